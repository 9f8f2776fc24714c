//! `mfinverse` command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 format or grid mismatch,
//! 5 internal error. `MFINVERSE_THREADS` sets the worker thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use mfinverse::data::{load_dataset, load_target, save_dataset, synth_generate, CsvSchema, Grid};
use mfinverse::ensemble::{
    forward_spectrum, inversion_report, mf_invert, train_bundle, EnsembleConfig, TrainConfig,
};
use mfinverse::explain::{shap_batch, write_shap_csv, OutputMode};
use mfinverse::forest::ForestParams;
use mfinverse::harness::{
    baseline_sweep, evaluate_on_test, learning_curve, time_inference, write_rows_csv, Pipeline,
};
use mfinverse::metrics::{batch_rmse, Bounds};
use mfinverse::seed::derive_seed;
use mfinverse::{Error, ModelBundle, Spectrum};
use serde_json::json;

const THREADS_ENV: &str = "MFINVERSE_THREADS";

#[derive(Parser)]
#[command(
    name = "mfinverse",
    version,
    about = "Multi-fidelity inverse design of laser-processed emissivity spectra"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit PCA, forward and inverse forests and write a model bundle.
    Train(TrainArgs),
    /// Find laser parameters for a target spectrum.
    Invert(InvertArgs),
    /// Score an inversion pipeline on a held-out test set.
    Evaluate(EvaluateArgs),
    /// Shapley attributions of the forward model.
    Explain(ExplainArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Budget sweep of MF vs HF plus inference timing.
    Benchmark(BenchmarkArgs),
    /// Cross-validated learning curve of the forward model.
    Curve(CurveArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    pca_components: u32,
    #[arg(long, default_value_t = 450, value_parser = clap::value_parser!(u32).range(1..))]
    trees: u32,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    max_depth: u32,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    inverse_trees: u32,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Copy)]
struct SearchArgs {
    /// Inverse trees consulted.
    #[arg(long = "n", default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    n: u32,
    /// Evaluation budget per refinement run.
    #[arg(long, default_value_t = 25)]
    nmax: usize,
    /// Fitness threshold (percent RMSE).
    #[arg(long, default_value_t = 2.0)]
    f0: f64,
    /// Solutions to return per target.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    top: u32,
    #[arg(long)]
    seed: Option<u64>,
}

impl SearchArgs {
    fn config(self) -> EnsembleConfig {
        EnsembleConfig {
            n_estimators: self.n as usize,
            n_max: self.nmax,
            f0: self.f0,
            top_k: (self.top as usize).min(self.n as usize),
            seed: resolve_seed(self.seed),
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    search: SearchArgs,
    /// Omit predicted spectra from the output.
    #[arg(long)]
    no_spectra: bool,
    /// JSON output file (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = "mf", value_parser = ["mf", "lf", "hf"])]
    mode: String,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..))]
    repeats: u32,
    /// JSON summary; per-solution rows go next to it with a `.csv`
    /// extension. Summary to stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset whose parameter columns are explained.
    #[arg(long)]
    data: PathBuf,
    /// `avg` or `wl:<um>`.
    #[arg(long, default_value = "avg")]
    output: String,
    /// Accept the nearest grid wavelength instead of requiring a grid point.
    #[arg(long)]
    nearest: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    n: u32,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 101, value_parser = clap::value_parser!(u32).range(2..))]
    grid_points: u32,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "25,50,100")]
    nmax_values: Vec<usize>,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..))]
    repeats: u32,
    /// Test targets used for timing.
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    timing_targets: u32,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "500,2500,5000,8500")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    pca_components: u32,
    #[arg(long, default_value_t = 450, value_parser = clap::value_parser!(u32).range(1..))]
    trees: u32,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    max_depth: u32,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random();
        log::warn!("no --seed given; using seed {s}");
        s
    })
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) => 2,
        Error::Io { .. } => 3,
        Error::Schema(_)
        | Error::Parse { .. }
        | Error::GridMismatch { .. }
        | Error::Format(_)
        | Error::Config(_) => 4,
    }
}

fn write_output(out: Option<&Path>, text: &str) -> mfinverse::Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize")
}

fn cmd_train(a: TrainArgs) -> mfinverse::Result<()> {
    let schema = CsvSchema::default();
    let ds = load_dataset(&a.data, &schema)?;
    let seed = resolve_seed(a.seed);
    let mut forward = ForestParams::forward().with_trees(a.trees as usize);
    forward.max_depth = Some(a.max_depth as usize);
    forward.seed = derive_seed(seed, 0);
    let mut inverse = ForestParams::inverse().with_trees(a.inverse_trees as usize);
    inverse.max_depth = Some(a.max_depth as usize);
    inverse.seed = derive_seed(seed, 1);
    let n_components = a.pca_components as usize;
    if n_components > ds.len().min(ds.grid().len()) {
        return Err(Error::Argument(format!(
            "--pca-components {n_components} exceeds min(records {}, grid {})",
            ds.len(),
            ds.grid().len()
        )));
    }
    let cfg = TrainConfig {
        n_components,
        forward,
        inverse: Some(inverse),
        bounds: Bounds::default(),
    };
    info!(
        "training on {} records, {} wavelengths",
        ds.len(),
        ds.grid().len()
    );
    let start = Instant::now();
    let bundle = train_bundle(&ds, &cfg)?;
    info!("trained in {:.1}s", start.elapsed().as_secs_f64());
    let pred: Vec<Spectrum> = ds
        .records()
        .iter()
        .map(|r| forward_spectrum(&bundle, &r.params))
        .collect::<mfinverse::Result<_>>()?;
    let fit = batch_rmse(&ds.spectra(), &pred)?;
    bundle.save(&a.out)?;
    println!(
        "training pooled RMSE {:.4}% (max {:.4}%); bundle written to {}",
        fit.pooled,
        fit.max,
        a.out.display()
    );
    Ok(())
}

fn cmd_invert(a: InvertArgs) -> mfinverse::Result<()> {
    let bundle = ModelBundle::load(&a.model)?;
    let target = load_target(&a.target, &CsvSchema::default())?;
    let cfg = a.search.config();
    let sols = mf_invert(&bundle, &target, &cfg)?;
    info!(
        "{} solutions, best fitness {:.4}%",
        sols.len(),
        sols.first().map_or(f64::NAN, |s| s.fitness)
    );
    let report = inversion_report(&bundle, &cfg, &sols, !a.no_spectra)?;
    write_output(a.out.as_deref(), &to_json(&report))
}

fn cmd_evaluate(a: EvaluateArgs) -> mfinverse::Result<()> {
    let bundle = ModelBundle::load(&a.model)?;
    let test = load_dataset(&a.test, &CsvSchema::default())?;
    let mode: Pipeline = a.mode.parse()?;
    let cfg = a.search.config();
    let start = Instant::now();
    let e = evaluate_on_test(&bundle, &test, mode, &cfg, a.repeats as usize)?;
    info!(
        "evaluated {} targets x {} repeats in {:.1}s",
        test.len(),
        a.repeats,
        start.elapsed().as_secs_f64()
    );
    let summary = json!({
        "mode": e.mode,
        "repeats": e.repeats,
        "targets": test.len(),
        "config": cfg,
        "average_rmse": e.report.average_rmse,
        "max_rmse": e.report.max_rmse,
        "std_rmse": e.report.std_rmse,
        "average_nepd": e.report.average_nepd,
        "max_nepd": e.report.max_nepd,
        "std_nepd": e.report.std_nepd,
        "repeat_mean_rmse": e.repeat_mean_rmse,
    });
    if let Some(out) = &a.out {
        let csv_path = out.with_extension("csv");
        let f = fs::File::create(&csv_path).map_err(|e| Error::Io {
            path: csv_path.clone(),
            source: e,
        })?;
        write_rows_csv(f, &e.rows)?;
        info!("per-solution rows written to {}", csv_path.display());
    }
    write_output(a.out.as_deref(), &to_json(&summary))
}

fn cmd_explain(a: ExplainArgs) -> mfinverse::Result<()> {
    let bundle = ModelBundle::load(&a.model)?;
    let ds = load_dataset(&a.data, &CsvSchema::default())?;
    let mode = OutputMode::parse(&a.output, &bundle.grid, a.nearest)?;
    let (rows, summary) = shap_batch(&bundle, &ds.params(), mode)?;
    let f = fs::File::create(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    write_shap_csv(f, &rows)?;
    let names = ["power", "speed", "spacing"];
    let ranked: Vec<String> = summary
        .ranking
        .iter()
        .map(|&j| format!("{} {:.5}", names[j], summary.mean_abs_phi[j]))
        .collect();
    println!("mean |phi|: {}", ranked.join(", "));
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> mfinverse::Result<()> {
    if a.noise.is_nan() || a.noise < 0.0 {
        return Err(Error::Argument("--noise must be >= 0".into()));
    }
    let grid = Grid::band(a.grid_points as usize)?;
    let ds = synth_generate(a.n as usize, &grid, a.noise, resolve_seed(a.seed))?;
    save_dataset(&a.out, &ds, &CsvSchema::default())?;
    info!("wrote {} records to {}", ds.len(), a.out.display());
    Ok(())
}

fn cmd_benchmark(a: BenchmarkArgs) -> mfinverse::Result<()> {
    let bundle = ModelBundle::load(&a.model)?;
    let test = load_dataset(&a.test, &CsvSchema::default())?;
    let cfg = a.search.config();
    let sweep = baseline_sweep(&bundle, &test, &a.nmax_values, &cfg, a.repeats as usize)?;
    let targets: Vec<Spectrum> = test
        .records()
        .iter()
        .take(a.timing_targets as usize)
        .map(|r| r.spectrum.clone())
        .collect();
    let mf = time_inference(&bundle, &targets, Pipeline::Mf, &cfg)?;
    let lf = time_inference(&bundle, &targets, Pipeline::Lf, &cfg)?;
    let report = json!({
        "config": cfg,
        "repeats": a.repeats,
        "sweep": sweep,
        "timing_ms": { "mf": mf, "lf": lf },
    });
    write_output(a.out.as_deref(), &to_json(&report))
}

fn cmd_curve(a: CurveArgs) -> mfinverse::Result<()> {
    let ds = load_dataset(&a.data, &CsvSchema::default())?;
    let seed = resolve_seed(a.seed);
    let mut forward = ForestParams::forward().with_trees(a.trees as usize);
    forward.max_depth = Some(a.max_depth as usize);
    forward.seed = derive_seed(seed, 0);
    let cfg = TrainConfig {
        n_components: a.pca_components as usize,
        forward,
        inverse: None,
        bounds: Bounds::default(),
    };
    let pts = learning_curve(&ds, &a.sizes, a.k, &cfg, seed)?;
    write_output(a.out.as_deref(), &to_json(&pts))
}

fn configure_threads() -> mfinverse::Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize =
        v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Argument(format!("{THREADS_ENV}={v:?} is not a positive integer"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Argument(format!("cannot configure {n} threads: {e}")))
}

fn run(cli: Cli) -> mfinverse::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Invert(a) => cmd_invert(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Curve(a) => cmd_curve(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => {
            eprintln!("error: internal failure");
            ExitCode::from(5)
        }
    }
}
