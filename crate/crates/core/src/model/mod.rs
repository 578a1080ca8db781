//! The forecaster: a shared value lift with learned positional table, a
//! per-channel pre-norm transformer, stacked self+neighbor graph blocks and a
//! per-node MLP decoder producing all `H` steps at once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{inverse_softplus, softplus_scalar, ParamStore, Tape, Tensor, Var};
use crate::denoiser::adopt_params;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const INIT_KAPPA: f64 = 0.2;
pub const INIT_GAMMA: f64 = 0.2;
const LN_EPS: f64 = 1e-5;
const FFN_MULT: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub context: usize,
    pub horizon: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub graph_widths: Vec<usize>,
    pub dec_widths: Vec<usize>,
    pub seed: u64,
}

impl ModelConfig {
    /// Small defaults that train in seconds on a laptop.
    pub fn desk(context: usize, horizon: usize, channels: usize) -> Self {
        Self {
            context,
            horizon,
            channels,
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            graph_widths: vec![16, 16],
            dec_widths: vec![32],
            seed: 0,
        }
    }

    /// Width 64, 4 heads, 2 encoder layers.
    pub fn full_scale(context: usize, horizon: usize, channels: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            graph_widths: vec![64, 64],
            dec_widths: vec![64],
            ..Self::desk(context, horizon, channels)
        }
    }

    pub fn preset(name: &str, context: usize, horizon: usize, channels: usize) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(context, horizon, channels)),
            "full" => Ok(Self::full_scale(context, horizon, channels)),
            other => Err(Error::invalid(format!(
                "unknown model preset '{other}' (expected desk or full)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.context, self.horizon, self.channels, self.d_model, self.n_heads];
        if sizes.contains(&0) || self.graph_widths.contains(&0) || self.dec_widths.contains(&0) {
            return Err(Error::invalid("model sizes and widths must all be at least 1"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Width of the node features entering the decoder.
    pub fn node_width(&self) -> usize {
        self.graph_widths.last().copied().unwrap_or(self.d_model)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderSlots {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Slots {
    lift_w: usize,
    lift_b: usize,
    pe: usize,
    encoder: Vec<EncoderSlots>,
    graph: Vec<(usize, usize)>,
    decoder: Vec<(usize, usize)>,
    raw_kappa: usize,
    raw_gamma: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    slots: Slots,
}

struct Init {
    rng: ChaCha8Rng,
    params: ParamStore,
}

impl Init {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.params
            .add(name, Tensor::new(shape.to_vec(), data).expect("shape and data agree"))
    }

    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        self.uniform(name, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    fn fill(&mut self, name: String, len: usize, value: f64) -> usize {
        self.params.add(
            name,
            Tensor::new(vec![len], vec![value; len]).expect("shape and data agree"),
        )
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params: ParamStore::new(),
        };
        let lift_w = init.weight("lift.w".into(), 1, d);
        let lift_b = init.fill("lift.b".into(), d, 0.0);
        let pe = init.uniform("pe".into(), &[config.context, d], 1.0 / (d as f64).sqrt());
        let encoder = (0..config.n_enc_layers)
            .map(|l| {
                let p = |s: &str| format!("enc{l}.{s}");
                EncoderSlots {
                    ln1_g: init.fill(p("ln1.g"), d, 1.0),
                    ln1_b: init.fill(p("ln1.b"), d, 0.0),
                    wq: init.weight(p("wq"), d, d),
                    wk: init.weight(p("wk"), d, d),
                    wv: init.weight(p("wv"), d, d),
                    wo: init.weight(p("wo"), d, d),
                    bo: init.fill(p("bo"), d, 0.0),
                    ln2_g: init.fill(p("ln2.g"), d, 1.0),
                    ln2_b: init.fill(p("ln2.b"), d, 0.0),
                    ff1_w: init.weight(p("ff1.w"), d, FFN_MULT * d),
                    ff1_b: init.fill(p("ff1.b"), FFN_MULT * d, 0.0),
                    ff2_w: init.weight(p("ff2.w"), FFN_MULT * d, d),
                    ff2_b: init.fill(p("ff2.b"), d, 0.0),
                }
            })
            .collect();
        let mut width = d;
        let mut graph = Vec::new();
        for (l, &g) in config.graph_widths.iter().enumerate() {
            let w = init.weight(format!("graph{l}.w_self"), width, g);
            let u = init.weight(format!("graph{l}.u_nei"), width, g);
            graph.push((w, u));
            width = g;
        }
        let mut decoder = Vec::new();
        for (l, &h) in config
            .dec_widths
            .iter()
            .chain(std::iter::once(&config.horizon))
            .enumerate()
        {
            let w = init.weight(format!("dec{l}.w"), width, h);
            let b = init.fill(format!("dec{l}.b"), h, 0.0);
            decoder.push((w, b));
            width = h;
        }
        let raw_kappa = init.fill("raw_kappa".into(), 1, inverse_softplus(INIT_KAPPA));
        let raw_gamma = init.fill("raw_gamma".into(), 1, inverse_softplus(INIT_GAMMA));
        Ok(Self {
            config,
            params: init.params,
            slots: Slots {
                lift_w,
                lift_b,
                pe,
                encoder,
                graph,
                decoder,
                raw_kappa,
                raw_gamma,
            },
        })
    }

    /// Rebuild from a configuration and a parameter set with matching names
    /// and shapes.
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.params = adopt_params(&m.params, params)?;
        Ok(m)
    }

    /// Place every parameter on `tape`, tracked for gradients when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, p)| tape.leaf(p.clone(), trainable))
            .collect()
    }

    pub fn kappa(&self) -> f64 {
        softplus_scalar(self.params.get(self.slots.raw_kappa).item())
    }

    pub fn gamma(&self) -> f64 {
        softplus_scalar(self.params.get(self.slots.raw_gamma).item())
    }

    /// `(W_self, U_nei)` of every graph layer.
    pub fn graph_weights(&self) -> Result<Vec<(Matrix, Matrix)>> {
        self.slots
            .graph
            .iter()
            .map(|&(w, u)| Ok((self.params.get(w).to_matrix()?, self.params.get(u).to_matrix()?)))
            .collect()
    }

    pub fn set_graph_weights(&mut self, layer: usize, w_self: &Matrix, u_nei: &Matrix) -> Result<()> {
        let &(w, u) = self
            .slots
            .graph
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("no graph layer {layer}")))?;
        for (slot, m) in [(w, w_self), (u, u_nei)] {
            let t = Tensor::from_matrix(m);
            if t.shape() != self.params.get(slot).shape() {
                return Err(Error::Shape {
                    op: "set_graph_weights",
                    lhs: self.params.get(slot).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *self.params.get_mut(slot) = t;
        }
        Ok(())
    }

    /// `h[i, l] = φ(x[l, i]) + PE[l]`: history `L x D` to `D x L x d`.
    pub fn lift_and_pe(&self, tape: &mut Tape, vars: &[Var], history: Var) -> Result<Var> {
        let c = &self.config;
        let (l, d) = (c.context, c.channels);
        if tape.shape(history) != [l, d] {
            return Err(Error::Shape {
                op: "lift_and_pe",
                lhs: vec![l, d],
                rhs: tape.shape(history).to_vec(),
            });
        }
        let xt = tape.transpose(history)?;
        let col = tape.reshape(xt, &[d * l, 1])?;
        let lifted = tape.matmul(col, vars[self.slots.lift_w])?;
        let lifted = tape.add(lifted, vars[self.slots.lift_b])?;
        let lifted = tape.reshape(lifted, &[d, l, c.d_model])?;
        tape.add(lifted, vars[self.slots.pe])
    }

    /// Per-channel transformer over the `L` positions; returns the last
    /// position of every channel as a `D x d` matrix. The final layer only
    /// computes queries for that position, which leaves its output unchanged.
    pub fn temporal_encode(&self, tape: &mut Tape, vars: &[Var], h0: Var) -> Result<Var> {
        let c = &self.config;
        let (l, d, dm) = (c.context, c.channels, c.d_model);
        if tape.shape(h0) != [d, l, dm] {
            return Err(Error::Shape {
                op: "temporal_encode",
                lhs: vec![d, l, dm],
                rhs: tape.shape(h0).to_vec(),
            });
        }
        let mut x = h0;
        let layers = self.slots.encoder.len();
        if layers == 0 {
            let last = tape.slice(x, 1, l - 1, 1)?;
            return tape.reshape(last, &[d, dm]);
        }
        for (k, s) in self.slots.encoder.iter().enumerate() {
            x = self.encoder_layer(tape, vars, s, x, k + 1 == layers)?;
        }
        tape.reshape(x, &[d, dm])
    }

    fn encoder_layer(&self, tape: &mut Tape, vars: &[Var], s: &EncoderSlots, x: Var, last_only: bool) -> Result<Var> {
        let c = &self.config;
        let (l, d, dm) = (c.context, c.channels, c.d_model);
        let lq = if last_only { 1 } else { l };
        let dh = dm / c.n_heads;

        let xn = affine_norm(tape, x, vars[s.ln1_g], vars[s.ln1_b])?;
        let q_src = if last_only { tape.slice(xn, 1, l - 1, 1)? } else { xn };
        let q = linear3(tape, q_src, vars[s.wq], d, lq)?;
        let k = linear3(tape, xn, vars[s.wk], d, l)?;
        let v = linear3(tape, xn, vars[s.wv], d, l)?;
        let mut heads = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let qh = tape.slice(q, 2, h * dh, dh)?;
            let kh = tape.slice(k, 2, h * dh, dh)?;
            let vh = tape.slice(v, 2, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let att = tape.softmax_rowwise(scores);
            heads.push(tape.matmul(att, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 2)?
        };
        let o = linear3(tape, cat, vars[s.wo], d, lq)?;
        let o = tape.add(o, vars[s.bo])?;
        let base = if last_only { tape.slice(x, 1, l - 1, 1)? } else { x };
        let r = tape.add(base, o)?;

        let rn = affine_norm(tape, r, vars[s.ln2_g], vars[s.ln2_b])?;
        let f = linear3(tape, rn, vars[s.ff1_w], d, lq)?;
        let f = tape.add(f, vars[s.ff1_b])?;
        let f = tape.relu(f);
        let f = linear3(tape, f, vars[s.ff2_w], d, lq)?;
        let f = tape.add(f, vars[s.ff2_b])?;
        tape.add(r, f)
    }

    /// `H(l) = ReLU(H(l-1) W_self + Ā H(l-1) U_nei)` starting from `Z`.
    pub fn graph_encode(&self, tape: &mut Tape, vars: &[Var], z: Var, a_bar: Var) -> Result<Var> {
        let d = self.config.channels;
        if tape.shape(a_bar) != [d, d] {
            return Err(Error::Shape {
                op: "graph_encode",
                lhs: vec![d, d],
                rhs: tape.shape(a_bar).to_vec(),
            });
        }
        let mut h = z;
        for &(w, u) in &self.slots.graph {
            let own = tape.matmul(h, vars[w])?;
            let msg = tape.matmul(h, vars[u])?;
            let msg = tape.matmul(a_bar, msg)?;
            let sum = tape.add(own, msg)?;
            h = tape.relu(sum);
        }
        Ok(h)
    }

    /// Shared MLP on each node's features; node `i` becomes column `i` of the
    /// `H x D` forecast.
    pub fn decode(&self, tape: &mut Tape, vars: &[Var], h: Var) -> Result<Var> {
        let mut x = h;
        let n = self.slots.decoder.len();
        for (k, &(w, b)) in self.slots.decoder.iter().enumerate() {
            x = tape.matmul(x, vars[w])?;
            x = tape.add(x, vars[b])?;
            if k + 1 < n {
                x = tape.relu(x);
            }
        }
        tape.transpose(x)
    }

    /// `(κ, γ)` as softplus of their raw parameters.
    pub fn kappa_gamma(&self, tape: &mut Tape, vars: &[Var]) -> (Var, Var) {
        let k = tape.softplus(vars[self.slots.raw_kappa]);
        let g = tape.softplus(vars[self.slots.raw_gamma]);
        (k, g)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], history: Var, a_bar: Var) -> Result<Var> {
        let h0 = self.lift_and_pe(tape, vars, history)?;
        let z = self.temporal_encode(tape, vars, h0)?;
        let h = self.graph_encode(tape, vars, z, a_bar)?;
        self.decode(tape, vars, h)
    }

    /// Forecast `H x D` from a history `L x D` and a normalized operator.
    pub fn predict(&self, history: &Matrix, a_bar: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_matrix(history));
        let a = tape.constant(Tensor::from_matrix(a_bar));
        let y = self.forward(&mut tape, &vars, x, a)?;
        tape.value(y).to_matrix()
    }
}

/// Layer norm over the last axis followed by a learned gain and bias.
fn affine_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layernorm_rowwise(x, LN_EPS);
    let n = tape.mul(n, gain)?;
    tape.add(n, bias)
}

/// `[b, n, k] · W[k, m]` through a flattened 2-D product.
fn linear3(tape: &mut Tape, x: Var, w: Var, b: usize, n: usize) -> Result<Var> {
    let (k, m) = (tape.shape(w)[0], tape.shape(w)[1]);
    let flat = tape.reshape(x, &[b * n, k])?;
    let y = tape.matmul(flat, w)?;
    tape.reshape(y, &[b, n, m])
}

#[cfg(test)]
mod tests;
