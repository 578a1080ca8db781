//! Training over rolling windows, one-shot inference, rolling evaluation on
//! the holdout, the persistence baseline and the one-component ablations.
//!
//! Every row the training path touches is read through an [`AuditedSeries`]
//! whose limit is the end of the training prefix.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Checkpoint, ParamStore, Tape, Tensor};
use crate::data::{AuditReport, AuditedSeries, Dataset, PhysicsBudgets, Scaler, DEFAULT_QUANTILE};
use crate::denoiser::{train_denoiser, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::graph::{build_graph, DynamicGraph, GraphParams};
use crate::losses::{loss_terms, total_loss, LossBreakdown, LossWeights, WindowContext};
use crate::matrix::Matrix;
use crate::model::{Model, ModelConfig};

const CHECKPOINT_KIND: &str = "forecaster";
const DENOISER_PREFIX: &str = "denoiser/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub graph: GraphParams,
    /// Rows per correlation window.
    pub corr_window: usize,
    /// Freeze one graph built from the whole training prefix.
    pub static_graph: bool,
    pub denoise_enabled: bool,
    pub denoiser: DenoiserConfig,
    /// Denoise the observed window before building the inference graph.
    pub denoise_at_inference: bool,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Tail fraction of the training prefix used for early stopping.
    pub val_fraction: f64,
    /// Final rows reserved for testing.
    pub holdout: usize,
    pub tau_max: usize,
    pub quantile: f64,
    pub window_stride: usize,
    /// Seeds the model and the denoiser; their own `seed` fields are ignored.
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        let context = model.context;
        let channels = model.channels;
        Self {
            weights: LossWeights::default(),
            graph: GraphParams::default_for(channels),
            corr_window: context,
            static_graph: false,
            denoise_enabled: true,
            denoiser: DenoiserConfig::for_context(context),
            denoise_at_inference: false,
            lr: 1e-3,
            max_epochs: 10,
            patience: 5,
            val_fraction: 0.1,
            holdout: model.horizon,
            tau_max: 4,
            quantile: DEFAULT_QUANTILE,
            window_stride: 1,
            seed: 0,
            model,
        }
    }

    pub fn desk(context: usize, horizon: usize, channels: usize) -> Self {
        Self::new(ModelConfig::desk(context, horizon, channels))
    }

    /// Rows of history needed for one forecast.
    pub fn lookback(&self) -> usize {
        self.model.context.max(self.corr_window)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.graph.validate(self.model.channels)?;
        if self.denoise_enabled || self.denoise_at_inference {
            self.denoiser.validate()?;
        }
        if self.corr_window < 2 {
            return Err(Error::invalid("corr_window must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr = {} must be positive", self.lr)));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.window_stride == 0 || self.holdout == 0 {
            return Err(Error::invalid(
                "max_epochs, patience, window_stride and holdout must be at least 1",
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid(format!(
                "val_fraction = {} outside [0, 1)",
                self.val_fraction
            )));
        }
        if !(self.quantile > 0.0 && self.quantile <= 1.0) {
            return Err(Error::invalid(format!("quantile = {} outside (0, 1]", self.quantile)));
        }
        Ok(())
    }

    fn seeded_model(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    fn seeded_denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            seed: self.seed,
            ..self.denoiser.clone()
        }
    }
}

/// One component removed at a time; each variant changes a single concern of
/// the configuration and nothing else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoDenoise,
    StaticGraph,
    NoPde,
    NoConstraints,
    NoLagCohere,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        Self::Full,
        Self::NoDenoise,
        Self::StaticGraph,
        Self::NoPde,
        Self::NoConstraints,
        Self::NoLagCohere,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoDenoise => "no_denoise",
            Self::StaticGraph => "static_graph",
            Self::NoPde => "no_pde",
            Self::NoConstraints => "no_constraints",
            Self::NoLagCohere => "no_lag_cohere",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Self::Full => {}
            Self::NoDenoise => c.denoise_enabled = false,
            Self::StaticGraph => c.static_graph = true,
            Self::NoPde => c.weights.lambda_pde = 0.0,
            Self::NoConstraints => {
                c.weights.lambda_range = 0.0;
                c.weights.lambda_vel = 0.0;
                c.weights.lambda_acc = 0.0;
            }
            Self::NoLagCohere => c.weights.lambda_cohere = 0.0,
        }
        c
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation variant '{s}'")))
    }
}

/// Everything needed to forecast: weights, normalization, budgets and the
/// optional frozen graph and denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub model: Model,
    pub scaler: Scaler,
    pub budgets: PhysicsBudgets,
    pub train_len: usize,
    pub static_graph: Option<DynamicGraph>,
    pub denoiser: Option<Denoiser>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: TrainConfig,
    scaler: Scaler,
    budgets: PhysicsBudgets,
    train_len: usize,
    static_graph: Option<DynamicGraph>,
    denoiser: Option<DenoiserConfig>,
}

impl TrainedModel {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut params = self.model.params.clone();
        if let Some(d) = &self.denoiser {
            for (name, t) in d.net.params.iter() {
                params.add(format!("{DENOISER_PREFIX}{name}"), t.clone());
            }
        }
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.clone(),
            scaler: self.scaler.clone(),
            budgets: self.budgets.clone(),
            train_len: self.train_len,
            static_graph: self.static_graph.clone(),
            denoiser: self.denoiser.as_ref().map(|d| d.config.clone()),
        };
        Ok(Checkpoint {
            meta: serde_json::to_value(meta)?,
            params,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Schema("checkpoint does not hold a trained forecaster".into()));
        }
        let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())?;
        let (mut model_params, mut den_params) = (ParamStore::new(), ParamStore::new());
        for (name, t) in ckpt.params.iter() {
            match name.strip_prefix(DENOISER_PREFIX) {
                Some(rest) => den_params.add(rest, t.clone()),
                None => model_params.add(name, t.clone()),
            };
        }
        let model = Model::from_params(meta.config.seeded_model(), &model_params)?;
        let denoiser = match meta.denoiser {
            Some(cfg) => Some(Denoiser::from_checkpoint(&Checkpoint {
                meta: serde_json::json!({ "kind": "denoiser", "config": cfg }),
                params: den_params,
            })?),
            None if den_params.is_empty() => None,
            None => {
                return Err(Error::Schema(
                    "denoiser tensors without a denoiser configuration".into(),
                ))
            }
        };
        Ok(Self {
            config: meta.config,
            model,
            scaler: meta.scaler,
            budgets: meta.budgets,
            train_len: meta.train_len,
            static_graph: meta.static_graph,
            denoiser,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_checkpoint()?.to_bytes()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub epoch: usize,
    /// Index of the last history row.
    pub t: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_train_loss: f64,
    /// `None` when the validation tail is too short for a window.
    pub val_mse: Option<f64>,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub trained: TrainedModel,
    pub log: Vec<WindowRecord>,
    pub epochs: Vec<EpochSummary>,
    pub denoiser_losses: Vec<f64>,
    /// Consecutive fitting windows whose operator `Ā` differs.
    pub operator_changes: usize,
    pub audit: AuditReport,
}

impl TrainOutcome {
    /// The log as JSON lines.
    pub fn log_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

struct Window {
    t: usize,
    a_bar: Matrix,
    adjacency: Matrix,
}

/// Ends `t` of windows whose history `[t + 1 - lookback, t]` and targets
/// `[t + 1, t + H]` lie in `[0, rows)`, restricted to `t >= first`.
fn window_range(first: usize, rows: usize, lookback: usize, horizon: usize, stride: usize) -> Vec<usize> {
    let lo = first.max(lookback - 1);
    if rows < horizon + 1 || lo + horizon >= rows {
        return Vec::new();
    }
    (lo..rows - horizon).step_by(stride).collect()
}

fn window_graph(source: &Matrix, t: usize, cfg: &TrainConfig) -> Result<DynamicGraph> {
    build_graph(&source.slice_rows(t + 1 - cfg.corr_window..t + 1), t, &cfg.graph)
}

fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let (rows, d) = dataset.values.shape();
    if d != config.model.channels {
        return Err(Error::Schema(format!(
            "model expects {} channels, data has {d}",
            config.model.channels
        )));
    }
    if config.holdout >= rows {
        return Err(Error::invalid(format!(
            "holdout {} leaves no training rows out of {rows}",
            config.holdout
        )));
    }
    let train_len = rows - config.holdout;
    let horizon = config.model.horizon;
    let lookback = config.lookback();
    let audit = AuditedSeries::new(&dataset.values, train_len);

    let raw_prefix = audit.rows(0..train_len);
    let scaler = Scaler::fit(&raw_prefix);
    let z_prefix = scaler.transform(&raw_prefix);
    let (denoiser, denoiser_losses) = if config.denoise_enabled {
        let (den, losses) = train_denoiser(&z_prefix, &config.seeded_denoiser())?;
        (Some(den), losses)
    } else {
        (None, Vec::new())
    };
    let source = match &denoiser {
        Some(den) => den.denoise(&z_prefix)?,
        None => z_prefix,
    };
    let budgets = PhysicsBudgets::from_prefix(&source, config.tau_max, config.quantile)?;

    let val_rows = (config.val_fraction * train_len as f64).ceil() as usize;
    let fit_len = train_len - val_rows;
    let fit_ends = window_range(0, fit_len, lookback, horizon, config.window_stride);
    if fit_ends.is_empty() {
        return Err(Error::TooShort(format!(
            "{fit_len} fitting rows cannot hold a window of {lookback} history and {horizon} target rows"
        )));
    }
    let val_ends = if val_rows == 0 {
        Vec::new()
    } else {
        window_range(fit_len - 1, train_len, lookback, horizon, 1)
    };

    let static_graph = if config.static_graph {
        Some(build_graph(&source, train_len - 1, &config.graph)?)
    } else {
        None
    };
    let windows = |ends: &[usize]| -> Result<Vec<Window>> {
        ends.iter()
            .map(|&t| {
                let g = match &static_graph {
                    Some(g) => g.clone(),
                    None => window_graph(&source, t, config)?,
                };
                Ok(Window {
                    t,
                    a_bar: g.normalized,
                    adjacency: g.adjacency,
                })
            })
            .collect()
    };
    let fit_windows = windows(&fit_ends)?;
    let val_windows = windows(&val_ends)?;
    let operator_changes = fit_windows.windows(2).filter(|p| p[0].a_bar != p[1].a_bar).count();

    let mut model = Model::new(config.seeded_model())?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &model.params);
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let mut loss_sum = 0.0;
        for w in &fit_windows {
            let history = scaler.transform(&audit.rows(w.t + 1 - config.model.context..w.t + 1));
            let target = scaler.transform(&audit.rows(w.t + 1..w.t + 1 + horizon));
            let x_last = history.row(history.rows() - 1).to_vec();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let hist = tape.constant(Tensor::from_matrix(&history));
            let a = tape.constant(Tensor::from_matrix(&w.a_bar));
            let y_hat = model.forward(&mut tape, &vars, hist, a)?;
            let (kappa, gamma) = model.kappa_gamma(&mut tape, &vars);
            let ctx = WindowContext {
                target: &target,
                budgets: &budgets,
                x_last: &x_last,
                a_bar: &w.a_bar,
                adjacency: &w.adjacency,
            };
            let terms = loss_terms(&mut tape, y_hat, &ctx, kappa, gamma)?;
            let (total, breakdown) = total_loss(&mut tape, &terms, &config.weights)?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at window t = {} (epoch {epoch})",
                    w.t
                )));
            }
            let grads = tape.backward(total)?;
            let g = model.params.collect_grads(&grads, &vars);
            let norm = grad_norm(&g);
            adam.step(&mut model.params, &g)
                .map_err(|e| Error::NonFinite(format!("window t = {} (epoch {epoch}): {e}", w.t)))?;
            loss_sum += breakdown.total;
            log.push(WindowRecord {
                epoch,
                t: w.t,
                loss: breakdown,
                grad_norm: norm,
            });
        }
        let mean_train_loss = loss_sum / fit_windows.len() as f64;
        let val_mse = if val_windows.is_empty() {
            None
        } else {
            let mut sum = 0.0;
            for w in &val_windows {
                let history = scaler.transform(&audit.rows(w.t + 1 - config.model.context..w.t + 1));
                let target = scaler.transform(&audit.rows(w.t + 1..w.t + 1 + horizon));
                sum += mse(&model.predict(&history, &w.a_bar)?, &target)?;
            }
            Some(sum / val_windows.len() as f64)
        };
        let score = val_mse.unwrap_or(mean_train_loss);
        let improved = best.as_ref().is_none_or(|(b, _)| score < *b);
        if improved {
            best = Some((score, model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        epochs.push(EpochSummary {
            epoch,
            mean_train_loss,
            val_mse,
            improved,
        });
        if stale >= config.patience {
            break;
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }

    Ok(TrainOutcome {
        trained: TrainedModel {
            config: config.clone(),
            model,
            scaler,
            budgets,
            train_len,
            static_graph,
            denoiser,
        },
        log,
        epochs,
        denoiser_losses,
        operator_changes,
        audit: audit.report(),
    })
}

/// Standardized forecast for the window whose last observed row is `end`.
/// Only rows `[end + 1 - lookback, end]` are read.
pub fn forecast_at(trained: &TrainedModel, series: &AuditedSeries<'_>, end: usize) -> Result<Matrix> {
    let cfg = &trained.config;
    let lookback = cfg.lookback();
    if end + 1 < lookback {
        return Err(Error::TooShort(format!(
            "forecast needs {lookback} rows of history, only {} available",
            end + 1
        )));
    }
    let z = trained.scaler.transform(&series.rows(end + 1 - lookback..end + 1));
    let a_bar = match &trained.static_graph {
        Some(g) => g.normalized.clone(),
        None => {
            let source = match (&trained.denoiser, cfg.denoise_at_inference) {
                (Some(den), true) => den.denoise(&z)?,
                _ => z.clone(),
            };
            window_graph(&source, lookback - 1, cfg)?.normalized
        }
    };
    let history = z.slice_rows(lookback - cfg.model.context..lookback);
    trained.model.predict(&history, &a_bar)
}

/// One-shot `H x D` forecast in the original units from the trailing rows of
/// `history`.
pub fn infer(trained: &TrainedModel, history: &Matrix) -> Result<Matrix> {
    if history.cols() != trained.model.config.channels {
        return Err(Error::Schema(format!(
            "history has {} channels, model expects {}",
            history.cols(),
            trained.model.config.channels
        )));
    }
    if history.rows() == 0 {
        return Err(Error::TooShort("empty history".into()));
    }
    let audit = AuditedSeries::new(history, history.rows());
    let z = forecast_at(trained, &audit, history.rows() - 1)?;
    Ok(trained.scaler.inverse(&z))
}

/// Repeat the last observed row `horizon` times.
pub fn persistence_baseline(history: &Matrix, horizon: usize) -> Result<Matrix> {
    if history.rows() == 0 {
        return Err(Error::Empty("persistence needs at least one observed row".into()));
    }
    let last = history.row(history.rows() - 1);
    Ok(Matrix::from_fn(horizon, history.cols(), |_, j| last[j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mse: f64,
    pub mae: f64,
    /// Mean squared error at each horizon step, averaged over channels.
    pub per_step: Vec<f64>,
}

impl EvalResult {
    pub fn horizon_end_mse(&self) -> f64 {
        self.per_step.last().copied().unwrap_or(0.0)
    }

    /// Average of results over equally sized forecasts.
    pub fn mean(results: &[EvalResult]) -> Result<EvalResult> {
        let first = results
            .first()
            .ok_or_else(|| Error::Empty("no evaluation results to average".into()))?;
        let n = results.len() as f64;
        let mut per_step = vec![0.0; first.per_step.len()];
        for r in results {
            if r.per_step.len() != per_step.len() {
                return Err(Error::Shape {
                    op: "EvalResult::mean",
                    lhs: vec![per_step.len()],
                    rhs: vec![r.per_step.len()],
                });
            }
            for (acc, v) in per_step.iter_mut().zip(&r.per_step) {
                *acc += v;
            }
        }
        per_step.iter_mut().for_each(|v| *v /= n);
        Ok(EvalResult {
            mse: results.iter().map(|r| r.mse).sum::<f64>() / n,
            mae: results.iter().map(|r| r.mae).sum::<f64>() / n,
            per_step,
        })
    }
}

fn mse(y_hat: &Matrix, y: &Matrix) -> Result<f64> {
    Ok(evaluate(y_hat, y)?.mse)
}

pub fn evaluate(y_hat: &Matrix, y: &Matrix) -> Result<EvalResult> {
    if y_hat.shape() != y.shape() {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: vec![y_hat.rows(), y_hat.cols()],
            rhs: vec![y.rows(), y.cols()],
        });
    }
    let (h, d) = y.shape();
    if h * d == 0 {
        return Err(Error::Empty("nothing to evaluate".into()));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    let mut per_step = Vec::with_capacity(h);
    for k in 0..h {
        let mut step = 0.0;
        for (a, b) in y_hat.row(k).iter().zip(y.row(k)) {
            let e = a - b;
            step += e * e;
            ae += e.abs();
        }
        se += step;
        per_step.push(step / d as f64);
    }
    let n = (h * d) as f64;
    Ok(EvalResult {
        mse: se / n,
        mae: ae / n,
        per_step,
    })
}

/// Rolling evaluation in standardized units over every window whose targets
/// lie in the holdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub model: EvalResult,
    pub persistence: EvalResult,
    pub windows: usize,
}

pub fn evaluate_holdout(trained: &TrainedModel, dataset: &Dataset) -> Result<HoldoutReport> {
    let horizon = trained.model.config.horizon;
    let rows = dataset.len();
    let ends = window_range(trained.train_len - 1, rows, trained.config.lookback(), horizon, 1);
    if ends.is_empty() {
        return Err(Error::TooShort(format!(
            "holdout of {} rows cannot hold a {horizon}-step target",
            rows - trained.train_len
        )));
    }
    let audit = AuditedSeries::new(&dataset.values, rows);
    let (mut model, mut naive) = (Vec::new(), Vec::new());
    for &t in &ends {
        let y_hat = forecast_at(trained, &audit, t)?;
        let truth = trained.scaler.transform(&audit.rows(t + 1..t + 1 + horizon));
        let last = trained.scaler.transform(&audit.rows(t..t + 1));
        model.push(evaluate(&y_hat, &truth)?);
        naive.push(evaluate(&persistence_baseline(&last, horizon)?, &truth)?);
    }
    Ok(HoldoutReport {
        model: EvalResult::mean(&model)?,
        persistence: EvalResult::mean(&naive)?,
        windows: ends.len(),
    })
}

/// Back-to-back forecasts from the end of the training prefix, stitched and
/// trimmed to the holdout. Returns `(forecast, truth)` in standardized units.
pub fn stitched_forecast(trained: &TrainedModel, dataset: &Dataset) -> Result<(Matrix, Matrix)> {
    let horizon = trained.model.config.horizon;
    let (rows, d) = dataset.values.shape();
    let start = trained.train_len;
    if start >= rows {
        return Err(Error::TooShort("no holdout rows to forecast".into()));
    }
    let audit = AuditedSeries::new(&dataset.values, rows);
    let mut out = Matrix::zeros(rows - start, d);
    let mut t = start - 1;
    while t + 1 < rows {
        let y_hat = forecast_at(trained, &audit, t)?;
        for k in 0..horizon.min(rows - t - 1) {
            out.row_mut(t + 1 + k - start).copy_from_slice(y_hat.row(k));
        }
        t += horizon;
    }
    let truth = trained.scaler.transform(&audit.rows(start..rows));
    Ok((out, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub eval: EvalResult,
    pub delta_mse_pct: f64,
    pub delta_mae_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn delta_pct(value: f64, base: f64) -> f64 {
    if value == base {
        0.0
    } else {
        100.0 * (value - base) / base
    }
}

impl AblationTable {
    pub fn row(&self, variant: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "variant",
            "mse",
            "mae",
            "delta_mse_pct",
            "delta_mae_pct",
            "horizon_end_mse",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.variant.name().to_string(),
                r.eval.mse.to_string(),
                r.eval.mae.to_string(),
                r.delta_mse_pct.to_string(),
                r.delta_mae_pct.to_string(),
                r.eval.horizon_end_mse().to_string(),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::io("<ablation csv>", e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Train and evaluate `variants` (the full model is always trained first and
/// serves as the Δ% baseline) with identical seeds and splits.
pub fn run_ablations(base: &TrainConfig, dataset: &Dataset, variants: &[AblationVariant]) -> Result<AblationTable> {
    let mut order = vec![AblationVariant::Full];
    order.extend(variants.iter().copied().filter(|v| *v != AblationVariant::Full));
    let mut evals = Vec::with_capacity(order.len());
    for v in &order {
        let outcome = train(&v.apply(base), dataset)?;
        evals.push(evaluate_holdout(&outcome.trained, dataset)?.model);
    }
    let (base_mse, base_mae) = (evals[0].mse, evals[0].mae);
    let rows = order
        .into_iter()
        .zip(evals)
        .map(|(variant, eval)| AblationRow {
            variant,
            delta_mse_pct: delta_pct(eval.mse, base_mse),
            delta_mae_pct: delta_pct(eval.mae, base_mae),
            eval,
        })
        .collect();
    Ok(AblationTable { rows })
}

pub fn run_ablation_suite(base: &TrainConfig, dataset: &Dataset) -> Result<AblationTable> {
    run_ablations(base, dataset, &AblationVariant::ALL)
}
