//! Command-line front end: train a controller, evaluate controllers over a
//! dataset, solve one power flow, project one dispatch, or render reports
//! from stored records.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use saver::config::ExperimentConfig;
use saver::feeder::Feeder;
use saver::harness::{self, report, Controller, ControllerKind, EvaluateOptions};
use saver::powerflow;
use saver::rl::{self, Checkpoint};
use saver::safety::{ProjectionOptions, SafetyLayer};

#[derive(Parser)]
#[command(
    name = "saver",
    about = "Radial feeder simulation and safe volt-var control",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reactive-power controller on the configured dataset.
    Train(TrainArgs),
    /// Run a controller over the test days and store step records.
    Evaluate(EvaluateArgs),
    /// Solve one nonlinear power flow and print per-bus voltages.
    Powerflow(PowerflowArgs),
    /// Project one proposed dispatch through the safety layer.
    Project(ProjectArgs),
    /// Render summary tables and series from stored records.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train with the safety projection in the loop (overrides the file).
    #[arg(long)]
    safe: bool,
    /// Where to write the trained checkpoint.
    #[arg(long, default_value = "checkpoint.json")]
    out: PathBuf,
    /// Where to write the per-episode training log.
    #[arg(long, default_value = "training_log.csv")]
    log: PathBuf,
    /// Simulate at 6-second steps instead of the configured cadence.
    #[arg(long)]
    full_res: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Controller to run: noop, linear, rl, or safe_rl.
    #[arg(long)]
    controller: String,
    /// Trained checkpoint (required for rl and safe_rl).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Experiment TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Measurement CSV overriding the configured profile source.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for the step records.
    #[arg(long, default_value = "records")]
    records_out: PathBuf,
    /// Simulate at 6-second steps instead of the configured cadence.
    #[arg(long)]
    full_res: bool,
}

#[derive(Args)]
struct PowerflowArgs {
    /// Feeder TOML.
    #[arg(long)]
    feeder: PathBuf,
    /// CSV with columns bus,p,q (per-unit injections; omitted buses are 0).
    #[arg(long)]
    injections: PathBuf,
}

#[derive(Args)]
struct ProjectArgs {
    /// Problem TOML: feeder path, p, q_background, q_proposed, and
    /// optional tol / max_iterations / penalty.
    #[arg(long)]
    problem: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding records_*.json files.
    #[arg(long)]
    records: PathBuf,
    /// Experiment TOML naming the feeder the records came from.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the records directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Train(args) => run_train(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Powerflow(args) => run_powerflow(args),
        Command::Project(args) => run_project(args),
        Command::Report(args) => run_report(args),
    }
}

fn load_config(path: &Option<PathBuf>, full_res: bool) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if full_res {
        cfg.experiment.step_seconds = 6;
    }
    Ok(cfg)
}

fn run_train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.config, args.full_res)?;
    let feeder = cfg.feeder()?;
    let dataset = cfg.dataset(&feeder)?;
    let train_cfg = cfg.train_config(args.safe.then_some(true));
    eprintln!(
        "training {} episodes on {} days of {} steps ({})",
        train_cfg.episodes,
        dataset.train_day_indices().len(),
        dataset.steps_per_day(),
        if train_cfg.safe {
            "projection in the loop"
        } else {
            "unconstrained"
        },
    );
    let (agent, logs) = rl::train(&feeder, &dataset, &train_cfg)?;
    agent.to_checkpoint(&feeder).save(&args.out)?;
    report::write_training_log(&args.log, &logs)?;
    if let Some(last) = logs.last() {
        eprintln!(
            "final episode: return {:.4}, violations {}, relaxed steps {}",
            last.ret, last.violations, last.relaxed_steps
        );
    }
    println!("checkpoint: {}", args.out.display());
    println!("training log: {}", args.log.display());
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let kind: ControllerKind = args.controller.parse().map_err(anyhow::Error::msg)?;
    let mut cfg = load_config(&args.config, args.full_res)?;
    if let Some(data) = &args.data {
        cfg.experiment.profiles_csv = Some(std::path::absolute(data)?);
    }
    let feeder = cfg.feeder()?;
    let dataset = cfg.dataset(&feeder)?;
    let days = dataset.test_day_indices();
    if days.is_empty() {
        bail!("dataset has no test days; set test_days in [experiment]");
    }
    let policy = match kind {
        ControllerKind::Rl | ControllerKind::SafeRl => {
            let path = args
                .checkpoint
                .as_ref()
                .with_context(|| format!("controller {kind} needs --checkpoint"))?;
            let ck = Checkpoint::load(path)?;
            Some(rl::Agent::from_checkpoint(ck, &feeder)?.policy())
        }
        _ => None,
    };
    let sens = saver::linearization::sensitivities(&feeder);
    let mut controller = Controller::new(kind, &feeder, &sens, policy)?;
    let opts = EvaluateOptions {
        eta: cfg.rl.eta,
        sweep: cfg.sweep_options(),
        projection: cfg.projection_options(),
    };
    let records = harness::evaluate(&feeder, &mut controller, &dataset, &days, &opts)?;
    let written = report::write_records(&args.records_out, &records)?;
    for path in &written {
        println!("records: {}", path.display());
    }
    for summary in harness::metrics::summarize_all(&feeder, &records)? {
        println!(
            "{}: violations {:.4}%, mean |q| {:.2} kVAR, mean step {:.4} ms over {} steps",
            summary.controller,
            summary.violation_frequency_percent,
            summary.mean_abs_q_kvar,
            summary.mean_step_seconds * 1e3,
            summary.total_steps,
        );
    }
    Ok(())
}

/// Reads per-bus injections from a bus,p,q CSV into dense vectors.
fn read_injections(path: &Path, feeder: &Feeder) -> anyhow::Result<(Vec<f64>, Vec<f64>)> {
    let n = feeder.injection_count();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    for (row, result) in reader.deserialize::<(usize, f64, f64)>().enumerate() {
        let (bus, pi, qi) = result.with_context(|| format!("row {} of injections", row + 2))?;
        if bus == 0 || bus > n {
            bail!("row {}: bus {} is not a non-root bus of this feeder", row + 2, bus);
        }
        p[bus - 1] = pi;
        q[bus - 1] = qi;
    }
    Ok((p, q))
}

fn run_powerflow(args: PowerflowArgs) -> anyhow::Result<()> {
    let feeder = Feeder::load(&args.feeder)?;
    let (p, q) = read_injections(&args.injections, &feeder)?;
    let solution = powerflow::solve(&feeder, &p, &q, &powerflow::SweepOptions::default())?;
    eprintln!("converged in {} iterations", solution.iterations);
    println!("bus,v_magnitude,v_squared");
    for (bus, &v) in solution.v.iter().enumerate() {
        println!("{},{},{}", bus, v.sqrt(), v);
    }
    Ok(())
}

/// One projection instance as read from the problem file.
#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectionProblem {
    feeder: PathBuf,
    p: Vec<f64>,
    q_background: Vec<f64>,
    q_proposed: Vec<f64>,
    tol: Option<f64>,
    max_iterations: Option<usize>,
    penalty: Option<f64>,
    lower_margin: Option<f64>,
    upper_margin: Option<f64>,
}

fn run_project(args: ProjectArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.problem)
        .with_context(|| format!("reading {}", args.problem.display()))?;
    let problem: ProjectionProblem = toml::from_str(&text)?;
    let feeder_path = if problem.feeder.is_absolute() {
        problem.feeder.clone()
    } else {
        args.problem
            .parent()
            .unwrap_or(Path::new("."))
            .join(&problem.feeder)
    };
    let feeder = Feeder::load(&feeder_path)?;
    let sens = saver::linearization::sensitivities(&feeder);
    let mut layer = SafetyLayer::new(&feeder, &sens);
    let defaults = ProjectionOptions::default();
    let opts = ProjectionOptions {
        tol: problem.tol.unwrap_or(defaults.tol),
        max_iterations: problem.max_iterations.unwrap_or(defaults.max_iterations),
        penalty: problem.penalty.unwrap_or(defaults.penalty),
        lower_margin: problem.lower_margin.unwrap_or(defaults.lower_margin),
        upper_margin: problem.upper_margin.unwrap_or(defaults.upper_margin),
    };
    let result = layer.project(&problem.q_proposed, &problem.p, &problem.q_background, &opts);
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn run_report(args: ReportArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.config, false)?;
    let feeder = cfg.feeder()?;
    let records = report::read_records(&args.records)?;
    let out = args.out.as_deref().unwrap_or(&args.records);
    report::write_report(&feeder, &records, out)?;
    println!("report: {}", out.join("summary.txt").display());
    Ok(())
}
