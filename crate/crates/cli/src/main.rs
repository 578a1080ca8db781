mod config;
mod failure;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prism_core::autodiff::Checkpoint;
use prism_core::data::{load_csv, write_csv_to, Dataset, Scaler};
use prism_core::denoiser::Denoiser;
use prism_core::graph::{build_graph, export_adjacency, import_adjacency, GraphParams};
use prism_core::spectral::{compare_spectra, rfft_magnitude};
use prism_core::stability::{build_horizon_map, certify_contraction};
use prism_core::synthetic::{generate_with, SyntheticKind, SyntheticOptions};
use prism_core::trainer::{
    evaluate_holdout, infer, run_ablations, stitched_forecast, train, AblationVariant, TrainedModel,
};
use prism_core::Matrix;
use serde_json::json;

use config::TrainFlags;
use failure::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "prism",
    version,
    about = "Graph-regularized multivariate forecasting with stability certificates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multivariate series as CSV
    Synth(SynthArgs),
    /// Denoise a series with the diffusion denoiser from a checkpoint
    Denoise(DenoiseArgs),
    /// Build the correlation graph of one window and write it as JSON
    Graph(GraphArgs),
    /// Train a forecaster and write its checkpoint and per-window log
    Train(TrainArgs),
    /// Forecast the next H rows after the end of a series
    Infer(InferArgs),
    /// Rolling evaluation on the holdout against the persistence baseline
    Eval(EvalArgs),
    /// Certify contraction of the horizon map for a graph
    Stability(StabilityArgs),
    /// Per-channel magnitude spectra and an optional truth/forecast comparison
    Spectrum(SpectrumArgs),
    /// Train every one-component ablation and write the comparison table
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct CsvInput {
    /// Input CSV has no header row [default: off]
    #[arg(long)]
    no_header: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Generator: coupled_rd, clustered_sines or shifted_pairs
    #[arg(long, default_value = "coupled_rd")]
    kind: String,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    /// Rows to generate
    #[arg(long, default_value_t = 2000)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Observation noise standard deviation
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Diffusion strength of the coupled_rd map
    #[arg(long, default_value_t = 0.3)]
    kappa: f64,
    /// Decay of the coupled_rd map
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    /// Follower delay for shifted_pairs
    #[arg(long, default_value_t = 3)]
    lag: usize,
    /// Probability of a spike per observation
    #[arg(long, default_value_t = 0.0)]
    spike_rate: f64,
    /// Spike size
    #[arg(long, default_value_t = 0.0)]
    spike_magnitude: f64,
    #[arg(long, default_value = "synth.csv")]
    out: String,
}

#[derive(Debug, Args)]
struct DenoiseArgs {
    /// Series to denoise [required]
    #[arg(long)]
    data: String,
    /// Forecaster or denoiser checkpoint [required]
    #[arg(long)]
    checkpoint: String,
    #[arg(long, default_value = "denoised.csv")]
    out: String,
    #[command(flatten)]
    input: CsvInput,
}

#[derive(Debug, Args)]
struct GraphArgs {
    /// Series to read [required]
    #[arg(long)]
    data: String,
    /// Last row of the correlation window [default: last row of the data]
    #[arg(long)]
    end: Option<usize>,
    /// Rows in the correlation window
    #[arg(long, default_value_t = 48)]
    window: usize,
    /// Correlation threshold [default: 0.5]
    #[arg(long)]
    tau: Option<f64>,
    /// Exponent on retained correlations [default: 1]
    #[arg(long)]
    gamma_corr: Option<f64>,
    /// Degree floor [default: 1]
    #[arg(long)]
    k_min: Option<usize>,
    /// Degree cap [default: max(4, ceil(D/4)) clipped to D - 1]
    #[arg(long)]
    cap: Option<usize>,
    #[arg(long, default_value = "graph.json")]
    out: String,
    #[command(flatten)]
    input: CsvInput,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training series; the final holdout rows are never read [required]
    #[arg(long)]
    data: String,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, default_value = "model.ckpt")]
    out: String,
    /// Per-window training log as JSON lines
    #[arg(long, default_value = "train_log.jsonl")]
    log: String,
    #[command(flatten)]
    input: CsvInput,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Trained forecaster [required]
    #[arg(long)]
    checkpoint: String,
    /// Observed history; the trailing rows are used [required]
    #[arg(long)]
    data: String,
    #[arg(long, default_value = "forecast.csv")]
    out: String,
    #[command(flatten)]
    input: CsvInput,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Trained forecaster [required]
    #[arg(long)]
    checkpoint: String,
    /// The full series the model was trained on, holdout included [required]
    #[arg(long)]
    data: String,
    #[arg(long, default_value = "eval.json")]
    out: String,
    /// Also write back-to-back forecasts over the holdout as CSV [default: off]
    #[arg(long)]
    stitched: Option<String>,
    #[command(flatten)]
    input: CsvInput,
}

#[derive(Debug, Args)]
struct StabilityArgs {
    /// Graph JSON written by `prism graph` [required]
    #[arg(long)]
    adjacency: String,
    #[arg(long, default_value_t = 0.3)]
    kappa: f64,
    #[arg(long, default_value_t = 0.2)]
    gamma: f64,
    #[arg(long, default_value = "stability.json")]
    out: String,
}

#[derive(Debug, Args)]
struct SpectrumArgs {
    /// Reference series [required]
    #[arg(long)]
    truth: String,
    /// Series to compare against the reference, same shape [default: none]
    #[arg(long)]
    pred: Option<String>,
    #[arg(long, default_value = "spectra.csv")]
    out: String,
    /// Comparison report, written when --pred is given
    #[arg(long, default_value = "spectrum_report.json")]
    report: String,
    #[command(flatten)]
    input: CsvInput,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Series to train and evaluate on [required]
    #[arg(long)]
    data: String,
    #[command(flatten)]
    flags: TrainFlags,
    /// Comma-separated variants; full always runs first
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "full,no_denoise,static_graph,no_pde,no_constraints,no_lag_cohere"
    )]
    variants: Vec<String>,
    #[arg(long, default_value = "ablation.csv")]
    out: String,
    #[command(flatten)]
    input: CsvInput,
}

fn load(path: &str, input: &CsvInput) -> Result<Dataset, Failure> {
    Ok(load_csv(path, !input.no_header)?)
}

fn write(path: &str, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::data(format!("{path}: {e}")))
}

fn csv_bytes(values: &Matrix, header: &[String]) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    write_csv_to(&mut buf, values, Some(header))?;
    Ok(buf)
}

fn pretty(value: &impl serde::Serialize) -> Result<Vec<u8>, Failure> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn load_model(path: &str) -> Result<TrainedModel, Failure> {
    Ok(TrainedModel::load(path)?)
}

fn check_channels(trained: &TrainedModel, ds: &Dataset) -> Result<(), Failure> {
    let want = trained.model.config.channels;
    if ds.channels() != want {
        return Err(Failure::data(format!(
            "data has {} columns, the checkpoint expects {want}",
            ds.channels()
        )));
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let kind: SyntheticKind = a.kind.parse()?;
    let opts = SyntheticOptions {
        noise: a.noise,
        kappa: a.kappa,
        gamma: a.gamma,
        lag: a.lag,
        spike_rate: a.spike_rate,
        spike_magnitude: a.spike_magnitude,
    };
    let ds = generate_with(kind, a.channels, a.len, a.seed, &opts)?;
    write(&a.out, &csv_bytes(&ds.values, &ds.channel_names)?)?;
    println!(
        "wrote {} rows x {} channels of {} to {}",
        ds.len(),
        ds.channels(),
        kind.name(),
        a.out
    );
    Ok(())
}

fn denoise(a: DenoiseArgs) -> Result<(), Failure> {
    let ds = load(&a.data, &a.input)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (denoiser, scaler) = match ckpt.meta.get("kind").and_then(|k| k.as_str()) {
        Some("denoiser") => (Denoiser::from_checkpoint(&ckpt)?, Scaler::fit(&ds.values)),
        _ => {
            let trained = TrainedModel::from_checkpoint(&ckpt)?;
            check_channels(&trained, &ds)?;
            let den = trained
                .denoiser
                .ok_or_else(|| Failure::data(format!("{}: forecaster was trained without a denoiser", a.checkpoint)))?;
            (den, trained.scaler)
        }
    };
    let clean = scaler.inverse(&denoiser.denoise(&scaler.transform(&ds.values))?);
    write(&a.out, &csv_bytes(&clean, &ds.channel_names)?)?;
    println!("wrote {} denoised rows to {}", clean.rows(), a.out);
    Ok(())
}

fn graph(a: GraphArgs) -> Result<(), Failure> {
    let ds = load(&a.data, &a.input)?;
    let d = ds.channels();
    let end = a.end.unwrap_or(ds.len() - 1);
    if end >= ds.len() || a.window < 2 || end + 1 < a.window {
        return Err(Failure::usage(format!(
            "window of {} rows ending at row {end} does not fit in {} rows",
            a.window,
            ds.len()
        )));
    }
    let base = GraphParams::default_for(d);
    let params = GraphParams {
        tau: a.tau.unwrap_or(base.tau),
        gamma_corr: a.gamma_corr.unwrap_or(base.gamma_corr),
        k_min: a.k_min.unwrap_or(base.k_min),
        cap: a.cap.unwrap_or(base.cap),
    };
    params.validate(d)?;
    let g = build_graph(&ds.values.slice_rows(end + 1 - a.window..end + 1), end, &params)?;
    export_adjacency(&g, &a.out)?;
    println!(
        "wrote graph with {} undirected edges over {d} channels to {}",
        g.edges().len() / 2,
        a.out
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let ds = load(&a.data, &a.input)?;
    let config = a.flags.resolve(ds.channels())?;
    let outcome = train(&config, &ds)?;
    outcome.trained.save(&a.out)?;
    write(&a.log, outcome.log_jsonl()?.as_bytes())?;
    for e in &outcome.epochs {
        let val = e.val_mse.map_or("-".to_string(), |v| format!("{v:.6}"));
        println!(
            "epoch {:>3}  train {:.6}  val {val}{}",
            e.epoch,
            e.mean_train_loss,
            if e.improved { "  *" } else { "" }
        );
    }
    println!(
        "kappa {:.4}  gamma {:.4}; wrote {} and {}",
        outcome.trained.model.kappa(),
        outcome.trained.model.gamma(),
        a.out,
        a.log
    );
    Ok(())
}

fn infer_cmd(a: InferArgs) -> Result<(), Failure> {
    let trained = load_model(&a.checkpoint)?;
    let ds = load(&a.data, &a.input)?;
    check_channels(&trained, &ds)?;
    let forecast = infer(&trained, &ds.values)?;
    write(&a.out, &csv_bytes(&forecast, &ds.channel_names)?)?;
    println!("wrote {}-step forecast to {}", forecast.rows(), a.out);
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), Failure> {
    let trained = load_model(&a.checkpoint)?;
    let ds = load(&a.data, &a.input)?;
    check_channels(&trained, &ds)?;
    let report = evaluate_holdout(&trained, &ds)?;
    write(&a.out, &pretty(&report)?)?;
    if let Some(path) = &a.stitched {
        let (forecast, _) = stitched_forecast(&trained, &ds)?;
        write(path, &csv_bytes(&trained.scaler.inverse(&forecast), &ds.channel_names)?)?;
    }
    println!(
        "{} windows  model mse {:.6} mae {:.6}  persistence mse {:.6} mae {:.6}",
        report.windows, report.model.mse, report.model.mae, report.persistence.mse, report.persistence.mae
    );
    Ok(())
}

fn stability(a: StabilityArgs) -> Result<(), Failure> {
    let g = import_adjacency(&a.adjacency)?;
    let report = certify_contraction(&build_horizon_map(&g.normalized, a.kappa, a.gamma)?)?;
    write(&a.out, &pretty(&report)?)?;
    print!("{}", report.to_table());
    Ok(())
}

fn spectrum(a: SpectrumArgs) -> Result<(), Failure> {
    let truth = load(&a.truth, &a.input)?;
    let pred = a.pred.as_deref().map(|p| load(p, &a.input)).transpose()?;
    if let Some(p) = &pred {
        if p.values.shape() != truth.values.shape() {
            return Err(Failure::data(format!(
                "truth is {:?} but the comparison series is {:?}",
                truth.values.shape(),
                p.values.shape()
            )));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["channel", "series", "freq", "magnitude"])?;
    let mut comparisons = Vec::new();
    for (j, name) in truth.channel_names.iter().enumerate() {
        let mut series = vec![("truth", truth.values.column(j))];
        if let Some(p) = &pred {
            series.push(("pred", p.values.column(j)));
        }
        for (label, x) in &series {
            let s = rfft_magnitude(x)?;
            for (f, m) in s.freqs.iter().zip(&s.mags) {
                w.write_record([name.as_str(), label, &f.to_string(), &m.to_string()])?;
            }
        }
        if let [(_, t), (_, p)] = series.as_slice() {
            comparisons.push(json!({ "channel": name, "comparison": compare_spectra(t, p)? }));
        }
    }
    let bytes = w.into_inner().map_err(|e| Failure::data(e.to_string()))?;
    write(&a.out, &bytes)?;
    if pred.is_some() {
        write(&a.report, &pretty(&comparisons)?)?;
        let matched = comparisons
            .iter()
            .filter(|c| c["comparison"]["fundamental_match"] == json!(true))
            .count();
        println!(
            "fundamental matches in {matched}/{} channels; wrote {} and {}",
            comparisons.len(),
            a.out,
            a.report
        );
    } else {
        println!("wrote spectra of {} channels to {}", truth.channels(), a.out);
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<(), Failure> {
    let ds = load(&a.data, &a.input)?;
    let config = a.flags.resolve(ds.channels())?;
    let variants = a
        .variants
        .iter()
        .map(|v| v.trim().parse::<AblationVariant>())
        .collect::<Result<Vec<_>, _>>()?;
    let table = run_ablations(&config, &ds, &variants)?;
    write(&a.out, table.to_csv_string()?.as_bytes())?;
    for r in &table.rows {
        println!(
            "{:<15} mse {:.6}  mae {:.6}  dmse {:+.2}%",
            r.variant.name(),
            r.eval.mse,
            r.eval.mae,
            r.delta_mse_pct
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Denoise(a) => denoise(a),
        Command::Graph(a) => graph(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Stability(a) => stability(a),
        Command::Spectrum(a) => spectrum(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
