//! Noise-prediction denoiser trained on the training prefix and applied as a
//! single-step projection with overlap-add across time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Smallest `ᾱ_t` accepted by the projection.
pub const MIN_ALPHA_BAR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "noise schedule needs steps > 0 and 0 < beta_start <= beta_end < 1 (got {steps}, {beta_start}, {beta_end})"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|t| {
                let f = if steps == 1 { 0.0 } else { t as f64 / (steps - 1) as f64 };
                beta_start + f * (beta_end - beta_start)
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bar })
    }

    /// Schedule whose `ᾱ` values are given directly (must lie in `[0, 1]`).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() || alpha_bar.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("alpha_bar values must lie in [0, 1]"));
        }
        let betas = alpha_bar
            .iter()
            .scan(1.0, |prev, &a| {
                let b = if *prev > 0.0 { 1.0 - a / *prev } else { 1.0 };
                *prev = a;
                Some(b)
            })
            .collect();
        Ok(Self { betas, alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("diffusion step {t} outside 0..{}", self.len())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub seg_len: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub t_diff: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub t_star: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl DenoiserConfig {
    pub fn for_context(seg_len: usize) -> Self {
        Self {
            seg_len,
            hidden: 64,
            time_dim: 16,
            t_diff: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            t_star: 10,
            steps: 2000,
            batch: 32,
            lr: 1e-3,
            seed: 0,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_diff, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seg_len < 2 || self.hidden == 0 || self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::invalid(
                "denoiser needs seg_len >= 2, hidden >= 1 and an even, positive time_dim",
            ));
        }
        if self.t_star >= self.t_diff || self.batch == 0 || self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::invalid("denoiser needs t_star < t_diff, batch >= 1 and lr > 0"));
        }
        self.schedule().map(|_| ())
    }
}

/// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps`.
pub fn forward_noise(schedule: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    let ab = schedule.alpha_bar(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Shape {
            op: "forward_noise",
            lhs: vec![x0.len()],
            rhs: vec![eps.len()],
        });
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Sinusoidal embedding of an integer diffusion step.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = 10_000f64.powf(-(k as f64) / half as f64);
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// Anything that predicts the injected noise for a batch of segments
/// (`B x seg_len`, one diffusion step per row).
pub trait NoisePredictor {
    fn predict_var(&self, tape: &mut Tape, x_t: Var, t: &[usize]) -> Result<Var>;

    fn predict(&self, x_t: &Matrix, t: &[usize]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_matrix(x_t));
        let out = self.predict_var(&mut tape, x, t)?;
        tape.value(out).to_matrix()
    }
}

/// Per-channel MLP `[segment, embed(t)] -> 64 -> 64 -> segment` with ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    pub seg_len: usize,
    pub time_dim: usize,
    pub params: ParamStore,
}

fn uniform_init(rng: &mut ChaCha8Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("shape and data agree")
}

impl DenoiserNet {
    pub fn new(seg_len: usize, hidden: usize, time_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let widths = [seg_len + time_dim, hidden, hidden, seg_len];
        for (k, w) in widths.windows(2).enumerate() {
            params.add(format!("layer{k}.w"), uniform_init(&mut rng, w[0], &[w[0], w[1]]));
            params.add(format!("layer{k}.b"), Tensor::zeros(&[w[1]]));
        }
        Self {
            seg_len,
            time_dim,
            params,
        }
    }

    fn forward_with(&self, tape: &mut Tape, vars: &[Var], x_t: Var, t: &[usize]) -> Result<Var> {
        let shape = tape.shape(x_t).to_vec();
        if shape.len() != 2 || shape[1] != self.seg_len || shape[0] != t.len() {
            return Err(Error::Shape {
                op: "denoiser",
                lhs: vec![t.len(), self.seg_len],
                rhs: shape,
            });
        }
        let emb: Vec<f64> = t.iter().flat_map(|&s| time_embedding(s, self.time_dim)).collect();
        let emb = tape.constant(Tensor::new(vec![t.len(), self.time_dim], emb)?);
        let mut h = tape.concat(&[x_t, emb], 1)?;
        let layers = vars.len() / 2;
        for k in 0..layers {
            h = tape.matmul(h, vars[2 * k])?;
            h = tape.add(h, vars[2 * k + 1])?;
            if k + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

impl NoisePredictor for DenoiserNet {
    fn predict_var(&self, tape: &mut Tape, x_t: Var, t: &[usize]) -> Result<Var> {
        let vars: Vec<Var> = self.params.iter().map(|(_, p)| tape.constant(p.clone())).collect();
        self.forward_with(tape, &vars, x_t, t)
    }
}

/// Mean squared error between `eps` and the predicted noise at
/// `x_t = forward_noise(x0, t, eps)`, row by row.
pub fn ddpm_loss<P: NoisePredictor>(
    tape: &mut Tape,
    net: &P,
    schedule: &NoiseSchedule,
    x0: &Matrix,
    t: &[usize],
    eps: &Matrix,
) -> Result<Var> {
    if x0.rows() == 0 {
        return Err(Error::Empty("ddpm batch".into()));
    }
    if x0.shape() != eps.shape() || t.len() != x0.rows() {
        return Err(Error::Shape {
            op: "ddpm_loss",
            lhs: vec![x0.rows(), x0.cols()],
            rhs: vec![eps.rows(), eps.cols(), t.len()],
        });
    }
    let noisy = noisy_batch(schedule, x0, t, eps)?;
    let x = tape.constant(Tensor::from_matrix(&noisy));
    let pred = net.predict_var(tape, x, t)?;
    let target = tape.constant(Tensor::from_matrix(eps));
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

fn noisy_batch(schedule: &NoiseSchedule, x0: &Matrix, t: &[usize], eps: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(x0.rows(), x0.cols());
    for (b, &tb) in t.iter().enumerate() {
        let row = forward_noise(schedule, x0.row(b), tb, eps.row(b))?;
        out.row_mut(b).copy_from_slice(&row);
    }
    Ok(out)
}

/// `x̂0 = (x - sqrt(1 - ᾱ_t) ε̂) / sqrt(ᾱ_t)` for every row of `x_noisy`.
pub fn denoise_batch<P: NoisePredictor>(
    net: &P,
    schedule: &NoiseSchedule,
    x_noisy: &Matrix,
    t: usize,
) -> Result<Matrix> {
    let ab = schedule.alpha_bar(t)?;
    if ab < MIN_ALPHA_BAR {
        return Err(Error::Numeric(format!(
            "alpha_bar at step {t} is {ab:e}, below {MIN_ALPHA_BAR:e}"
        )));
    }
    let eps = net.predict(x_noisy, &vec![t; x_noisy.rows()])?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Matrix::from_fn(x_noisy.rows(), x_noisy.cols(), |i, j| {
        (x_noisy[(i, j)] - b * eps[(i, j)]) / a
    }))
}

pub fn denoise_one_step<P: NoisePredictor>(
    net: &P,
    schedule: &NoiseSchedule,
    x_noisy: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    let m = Matrix::from_vec(1, x_noisy.len(), x_noisy.to_vec())?;
    Ok(denoise_batch(net, schedule, &m, t)?.into_vec())
}

/// Segment start indices: stride `max(1, seg_len / 2)`, plus a final segment
/// flush with the end when the stride does not land there.
pub fn segment_starts(n: usize, seg_len: usize) -> Vec<usize> {
    if n < seg_len || seg_len == 0 {
        return Vec::new();
    }
    let stride = (seg_len / 2).max(1);
    let mut starts: Vec<usize> = (0..=n - seg_len).step_by(stride).collect();
    if *starts.last().unwrap() != n - seg_len {
        starts.push(n - seg_len);
    }
    starts
}

/// Triangular window. For even `seg_len` and stride `seg_len / 2`, shifted
/// copies sum to exactly 1.
pub fn overlap_weights(seg_len: usize) -> Vec<f64> {
    let half = (seg_len as f64 / 2.0).max(0.5);
    (0..seg_len)
        .map(|k| {
            let k = k as f64;
            (k + 0.5).min(seg_len as f64 - k - 0.5) / half
        })
        .collect()
}

/// Denoise every channel of `prefix` with overlapping segments projected at
/// step `t_star`, then average overlaps with triangular weights. The weighted
/// average is taken over corrections `x̂ - x`, so a segment that comes back
/// unchanged leaves the input bit-for-bit intact.
pub fn denoise_prefix<P: NoisePredictor>(
    net: &P,
    schedule: &NoiseSchedule,
    prefix: &Matrix,
    seg_len: usize,
    t_star: usize,
) -> Result<Matrix> {
    let (n, d) = prefix.shape();
    if n < seg_len || seg_len == 0 {
        return Err(Error::TooShort(format!(
            "denoising needs at least {seg_len} rows, got {n}"
        )));
    }
    let starts = segment_starts(n, seg_len);
    let w = overlap_weights(seg_len);
    let mut out = Matrix::zeros(n, d);
    for c in 0..d {
        let column = prefix.column(c);
        let segs = Matrix::from_fn(starts.len(), seg_len, |s, k| column[starts[s] + k]);
        let clean = denoise_batch(net, schedule, &segs, t_star)?;
        let mut acc = vec![0.0; n];
        let mut wsum = vec![0.0; n];
        for (s, &start) in starts.iter().enumerate() {
            for k in 0..seg_len {
                acc[start + k] += w[k] * (clean[(s, k)] - column[start + k]);
                wsum[start + k] += w[k];
            }
        }
        for r in 0..n {
            out.row_mut(r)[c] = column[r] + acc[r] / wsum[r];
        }
    }
    Ok(out)
}

/// A trained network with its schedule and configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub schedule: NoiseSchedule,
    pub net: DenoiserNet,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            schedule: config.schedule()?,
            net: DenoiserNet::new(config.seg_len, config.hidden, config.time_dim, config.seed),
            config,
        })
    }

    pub fn denoise(&self, series: &Matrix) -> Result<Matrix> {
        denoise_prefix(
            &self.net,
            &self.schedule,
            series,
            self.config.seg_len,
            self.config.t_star,
        )
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            meta: serde_json::json!({ "kind": "denoiser", "config": self.config }),
            params: self.net.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("denoiser") {
            return Err(Error::Schema("checkpoint does not hold a denoiser".into()));
        }
        let config: DenoiserConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
        let mut d = Self::new(config)?;
        d.net.params = adopt_params(&d.net.params, &ckpt.params)?;
        Ok(d)
    }
}

/// Check that `loaded` has the same names and shapes as `template`.
pub(crate) fn adopt_params(template: &ParamStore, loaded: &ParamStore) -> Result<ParamStore> {
    if template.len() != loaded.len() {
        return Err(Error::Schema(format!(
            "checkpoint has {} tensors, expected {}",
            loaded.len(),
            template.len()
        )));
    }
    for ((tn, tt), (ln, lt)) in template.iter().zip(loaded.iter()) {
        if tn != ln || tt.shape() != lt.shape() {
            return Err(Error::Schema(format!(
                "checkpoint tensor '{ln}' {:?} does not match expected '{tn}' {:?}",
                lt.shape(),
                tt.shape()
            )));
        }
    }
    Ok(loaded.clone())
}

/// Random training batch: segments drawn from random channels and offsets.
pub fn sample_batch(
    series: &Matrix,
    seg_len: usize,
    batch: usize,
    t_diff: usize,
    rng: &mut ChaCha8Rng,
) -> (Matrix, Vec<usize>, Matrix) {
    let (n, d) = series.shape();
    let mut x0 = Matrix::zeros(batch, seg_len);
    let mut t = Vec::with_capacity(batch);
    for b in 0..batch {
        let c = rng.random_range(0..d);
        let start = rng.random_range(0..=n - seg_len);
        for k in 0..seg_len {
            x0.row_mut(b)[k] = series[(start + k, c)];
        }
        t.push(rng.random_range(0..t_diff));
    }
    let eps = Matrix::from_fn(batch, seg_len, |_, _| rng.sample(StandardNormal));
    (x0, t, eps)
}

/// Train on segments of `series` (rows are time). Returns the denoiser and
/// the per-step loss.
pub fn train_denoiser(series: &Matrix, config: &DenoiserConfig) -> Result<(Denoiser, Vec<f64>)> {
    let mut den = Denoiser::new(config.clone())?;
    if series.rows() < config.seg_len || series.cols() == 0 {
        return Err(Error::TooShort(format!(
            "denoiser training needs at least {} rows, got {}",
            config.seg_len,
            series.rows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &den.net.params);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (x0, t, eps) = sample_batch(series, config.seg_len, config.batch, config.t_diff, &mut rng);
        let noisy = noisy_batch(&den.schedule, &x0, &t, &eps)?;
        let mut tape = Tape::new();
        let vars = den.net.params.bind(&mut tape);
        let x = tape.constant(Tensor::from_matrix(&noisy));
        let pred = den.net.forward_with(&mut tape, &vars, x, &t)?;
        let target = tape.constant(Tensor::from_matrix(&eps));
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("denoiser loss at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let g = den.net.params.collect_grads(&grads, &vars);
        adam.step(&mut den.net.params, &g)?;
        losses.push(value);
    }
    Ok((den, losses))
}
