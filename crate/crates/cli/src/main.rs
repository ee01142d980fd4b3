//! `imloss` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input (flags, schemas, shapes, missing
//! files), 2 runtime failure (failed gradient check, divergence, cancellation).

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use imloss::bench::{self, BenchmarkGrid, SweepConfig};
use imloss::io::{read_json, write_atomic, write_json};
use imloss::losses::{self, evaluate, presets, Family, LossSpec};
use imloss::numerics::segt::SegtArray;
use imloss::numerics::{clip_probs, OneHotMask, ProbTensor, Tensor, CLIP_EPS};
use imloss::oracle::{random_spec, run_gradcheck, trial_rng, GradCheckReport};
use imloss::synth::{self, SceneConfig, PROTOCOL_RATIOS};
use imloss::trainer::{self, TrainConfig};

static CANCEL: AtomicBool = AtomicBool::new(false);

#[derive(Parser)]
#[command(name = "imloss", version, about = "Class-imbalance segmentation losses: evaluation, gradient checks, synthetic data, training and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the named loss presets with their JSON specs.
    Losses {
        /// Print one JSON array instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a loss on a prediction / truth pair of SEGT tensors.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on random inputs.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic imbalanced dataset.
    Synth(SynthArgs),
    /// Train the tiny segmentation net on one dataset.
    Train(TrainArgs),
    /// Run a loss × scene × seed grid.
    Bench(BenchArgs),
    /// Sweep γ of the Unified Focal loss on one scene.
    Sweep(SweepArgs),
    /// Render a markdown table from a results.csv.
    Report(ReportArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// Loss spec JSON file.
    #[arg(long)]
    spec: PathBuf,
    /// Prediction tensor (SEGT, channels last): probabilities, or logits with --logits.
    #[arg(long)]
    pred: PathBuf,
    /// One-hot truth tensor (SEGT) of the same shape.
    #[arg(long)]
    truth: PathBuf,
    /// Write the gradient with respect to the logits here (SEGT, f64). Without
    /// --logits the logits are taken as ln of the clipped probabilities.
    #[arg(long)]
    grad: Option<PathBuf>,
    /// Treat --pred as logits and apply softmax.
    #[arg(long)]
    logits: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Family name, or `all` for every family.
    #[arg(long, default_value = "all")]
    family: String,
    /// Random trials per configuration.
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = imloss::oracle::DEFAULT_TOL)]
    tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = imloss::oracle::DEFAULT_STEP)]
    step: f64,
    /// Extra random hyperparameter draws per family, besides its preset.
    #[arg(long, default_value_t = 0)]
    draws: usize,
    /// Comma-separated logit shape, class axis last.
    #[arg(long, default_value = "2,3,3,2", value_delimiter = ',')]
    shape: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for gradcheck.json and run.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene preset: moderate, low, severe or nested.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    preset: Option<String>,
    /// Scene config JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of images.
    #[arg(long)]
    count: Option<usize>,
    /// Override the scene seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON file (loss spec, optimiser and schedule).
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory written by `synth`.
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    data: Option<PathBuf>,
    /// Scene preset generated on the fly instead of --data.
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Grid JSON file (scenes, losses, seeds, train).
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep JSON file (scene, variants, gammas, seeds, lambda, delta, train).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// results.csv produced by `bench` or `sweep`.
    #[arg(long = "in")]
    input: PathBuf,
    /// Write the markdown here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Invalid(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<imloss::Error> for CliError {
    fn from(e: imloss::Error) -> Self {
        if e.is_validation() || matches!(e, imloss::Error::Json(_)) {
            CliError::Invalid(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Any failure to read a user-supplied input is an input error.
fn input<T>(r: imloss::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Invalid(e.to_string()))
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    config_sha256: String,
    seed: Option<u64>,
    complete: bool,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_run(out: &Path, command: &str, config: &impl Serialize, seed: Option<u64>, complete: bool) -> CliResult<()> {
    let canonical = serde_json::to_vec(config).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_json(
        &out.join("run.json"),
        &RunRecord {
            command,
            version: imloss::VERSION,
            config_sha256: sha256_hex(&canonical),
            seed,
            complete,
        },
    )?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> CliResult<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn cmd_losses(json: bool) -> CliResult<()> {
    let all = presets();
    if json {
        return print_json(&all);
    }
    for p in all {
        println!("{:<20} {}", p.name, p.spec.to_json());
    }
    Ok(())
}

fn read_tensor(path: &Path) -> CliResult<Tensor> {
    input(SegtArray::read(path).and_then(|a| a.to_tensor()))
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.spec)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", a.spec.display())))?;
    let spec = input(LossSpec::from_json(&text))?;
    let pred = read_tensor(&a.pred)?;
    let truth = input(OneHotMask::new(read_tensor(&a.truth)?))?;
    let (value, logits) = if a.logits {
        let out = evaluate(&spec, &pred, &truth)?;
        (out.value, pred)
    } else {
        let p = clip_probs(&input(ProbTensor::new(pred))?, CLIP_EPS);
        let value = losses::value_on_probs(&spec, &p, &truth)?;
        let logits = Tensor::new(p.shape().to_vec(), p.data().iter().map(|v| v.ln()).collect())?;
        (value, logits)
    };
    if let Some(path) = &a.grad {
        let g = evaluate(&spec, &logits, &truth)?.grad_logits;
        SegtArray::from_tensor(&g).write(path)?;
    }
    print_json(&serde_json::json!({ "family": spec.family(), "value": value }))
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let families = if a.family == "all" {
        Family::ALL.to_vec()
    } else {
        vec![input(Family::parse(&a.family))?]
    };
    if a.shape.len() < 2 || a.shape.iter().any(|&d| d == 0) || *a.shape.last().unwrap() < 2 {
        return Err(CliError::Invalid("invalid `shape`: need at least 2 axes and 2 classes".into()));
    }
    let mut reports: Vec<GradCheckReport> = Vec::new();
    for (fi, family) in families.iter().enumerate() {
        let mut specs = vec![input(losses::preset(family.name()))?];
        let mut rng = trial_rng(a.seed, 1000 + fi as u64);
        specs.extend((0..a.draws).map(|_| random_spec(*family, &mut rng)));
        for spec in specs {
            let r = run_gradcheck(&spec, &a.shape, a.trials, a.seed, a.step, a.tol).map_err(|e| {
                if e.is_validation() {
                    CliError::Invalid(e.to_string())
                } else {
                    CliError::Runtime(e.to_string())
                }
            })?;
            reports.push(r);
        }
    }
    let passed = reports.iter().all(GradCheckReport::passed);
    let failures: usize = reports.iter().map(|r| r.failures.len()).sum();
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let summary = serde_json::json!({
        "passed": passed,
        "failures": failures,
        "max_rel_error": max_rel_error,
        "reports": reports,
    });
    if let Some(out) = &a.out {
        write_json(&out.join("gradcheck.json"), &summary)?;
        let config = serde_json::json!({
            "family": a.family, "trials": a.trials, "tol": a.tol, "step": a.step,
            "draws": a.draws, "shape": a.shape, "seed": a.seed,
        });
        write_run(out, "gradcheck", &config, Some(a.seed), true)?;
    }
    print_json(&serde_json::json!({
        "passed": passed,
        "failures": failures,
        "max_rel_error": max_rel_error,
        "checks": reports.len(),
    }))?;
    if passed {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{failures} gradient entries exceeded tol {}", a.tol)))
    }
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let mut config = match (&a.preset, &a.config) {
        (Some(name), _) => input(SceneConfig::preset(name))?,
        (None, Some(path)) => input(read_json::<SceneConfig>(path))?,
        (None, None) => unreachable!("clap requires one of --preset / --config"),
    };
    if let Some(n) = a.count {
        config.count = n;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let data = synth::generate(&config)?;
    let splits = synth::split(config.count, PROTOCOL_RATIOS, config.seed)?;
    let manifest = synth::save(&data, &splits, &a.out)?;
    write_run(&a.out, "synth", &config, Some(config.seed), true)?;
    print_json(&serde_json::json!({
        "scene": config.name,
        "count": config.count,
        "target_foreground_fraction": config.target_foreground_fraction,
        "realized_fractions": manifest.realized_fractions,
        "train": splits.train.len(), "val": splits.val.len(), "test": splits.test.len(),
    }))
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let config: TrainConfig = input(read_json(&a.config))?;
    input(config.validate())?;
    let (data, splits) = match (&a.data, &a.scene) {
        (Some(dir), _) => input(synth::load(dir))?,
        (None, Some(name)) => {
            let scene = input(SceneConfig::preset(name))?;
            let splits = synth::split(scene.count, PROTOCOL_RATIOS, scene.seed)?;
            (synth::generate(&scene)?, splits)
        }
        (None, None) => unreachable!("clap requires one of --data / --scene"),
    };
    let (report, model) = trainer::train_cancellable(&config, &data, &splits, &CANCEL)?;
    write_json(&a.out.join("report.json"), &report)?;
    write_atomic(&a.out.join("epochs.csv"), report.epochs_csv().as_bytes())?;
    trainer::save_checkpoint(&model, &a.out.join("checkpoint"))?;
    let provenance = serde_json::json!({ "train": config, "scene": data.config });
    write_run(&a.out, "train", &provenance, Some(config.seed), !report.diverged())?;
    let fg: Vec<f64> = report
        .test
        .as_ref()
        .map(|t| (1..data.config.num_classes).map(|c| t.mean_dsc(c)).collect())
        .unwrap_or_default();
    print_json(&serde_json::json!({
        "outcome": report.outcome,
        "epochs": report.history.len(),
        "best_epoch": report.best_epoch,
        "best_val_loss": report.best_val_loss,
        "test_mean_dsc": fg,
    }))?;
    if report.diverged() {
        return Err(CliError::Runtime("training diverged; partial report written".into()));
    }
    Ok(())
}

fn finish_grid(result: &bench::GridResult, out: &Path) -> CliResult<()> {
    let failed = result
        .cells
        .iter()
        .filter(|c| matches!(c.status, bench::CellStatus::Failed { .. }))
        .count();
    if failed > 0 {
        eprintln!("warning: {failed} cell(s) failed and were excluded; see report.md");
    }
    if !result.complete {
        return Err(CliError::Runtime(format!(
            "cancelled; partial results in {}",
            out.display()
        )));
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CliResult<()> {
    let grid: BenchmarkGrid = input(read_json(&a.grid))?;
    input(grid.validate())?;
    let result = bench::run_grid_cancellable(&grid, &CANCEL)?;
    result.write(&a.out)?;
    write_run(&a.out, "bench", &grid, None, result.complete)?;
    print!("{}", bench::render_report(&result.table.rows));
    finish_grid(&result, &a.out)
}

fn cmd_sweep(a: SweepArgs) -> CliResult<()> {
    let config: SweepConfig = input(read_json(&a.config))?;
    let (points, result) = bench::gamma_sweep(&config, &CANCEL)?;
    result.write(&a.out)?;
    write_atomic(&a.out.join("sweep.csv"), bench::sweep_csv(&points).as_bytes())?;
    write_run(&a.out, "sweep", &config, None, result.complete)?;
    print!("{}", bench::sweep_csv(&points));
    finish_grid(&result, &a.out)
}

fn cmd_report(a: ReportArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.input)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", a.input.display())))?;
    let rows = input(bench::summarize_results_csv(&text))?;
    let md = bench::render_report(&rows);
    match &a.out {
        Some(path) => write_atomic(path, md.as_bytes())?,
        None => print!("{md}"),
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Losses { json } => cmd_losses(json),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = ctrlc::set_handler(|| CANCEL.store(true, Ordering::SeqCst)) {
        eprintln!("warning: cannot install interrupt handler: {e}");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Invalid(_) => 1,
                CliError::Runtime(_) => 2,
            })
        }
    }
}
