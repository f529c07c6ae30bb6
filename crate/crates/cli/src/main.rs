use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crs_debias::experiment::{
    emit_report, run_ablation_dir, run_stages, ExperimentConfig, PolicyKind, ReportFormat, RunDir, Stage,
};
use crs_debias::Error;

/// Popularity-bias experiments for simulated conversational recommenders.
#[derive(Parser)]
#[command(name = "crs-debias", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (JSON). Defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set recommender.mode=bpr`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set output_dir=DIR`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> crs_debias::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Run directory created by `prepare`.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Load or generate the data, split it and write a new run directory.
    Prepare(ConfigArgs),
    /// Train the factorization model of a prepared run.
    TrainRec(RunArgs),
    /// Fit the cold-start mapper and rewrite the run's model.
    FitCsm(RunArgs),
    /// Train the conversation policy of a run.
    TrainPolicy(RunArgs),
    /// Simulate the test conversations and write episodes and metrics.
    Simulate(RunArgs),
    /// Run every stage in a fresh run directory.
    Pipeline(ConfigArgs),
    /// Compare the full pipeline against variants skipping single stages.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Stages to skip one at a time (pal, csm, dpl). Defaults to all three.
        #[arg(long, value_delimiter = ',')]
        skip: Option<Vec<Stage>>,
        /// Policy of the baseline row and of the -DPL row.
        #[arg(long, default_value = "single-rl", value_parser = parse_policy)]
        baseline_policy: PolicyKind,
    },
    /// Render a run's or an ablation's metrics.
    Report {
        /// Run or ablation directory.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: ReportFormat,
    },
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn open(path: &Path) -> crs_debias::Result<RunDir> {
    RunDir::open(path)
}

fn execute(command: Command) -> crs_debias::Result<()> {
    match command {
        Command::Prepare(args) => {
            let mut run = RunDir::create(&args.load()?)?;
            run.prepare()?;
            log::info!("prepared {}", run.path.display());
        }
        Command::TrainRec(args) => {
            let mut run = open(&args.run)?;
            let data = run.load_prepared()?;
            run.train_recommender(&data)?;
        }
        Command::FitCsm(args) => {
            let mut run = open(&args.run)?;
            let data = run.load_prepared()?;
            let model = run.load_model().map_err(|_| Error::Validation("CSM requires trained model".into()))?;
            run.fit_csm(&data, &model)?;
        }
        Command::TrainPolicy(args) => {
            let mut run = open(&args.run)?;
            let data = run.load_prepared()?;
            let model = run.load_model()?;
            run.train_policy(&data, &model)?;
        }
        Command::Simulate(args) => {
            let mut run = open(&args.run)?;
            let data = run.load_prepared()?;
            let model = run.load_model()?;
            let policy = run.load_policy(&data)?;
            let report = run.simulate(&data, &model, &policy)?;
            log::info!("metrics: {}", report.csv_row());
        }
        Command::Pipeline(args) => {
            let mut run = RunDir::create(&args.load()?)?;
            let report = run_stages(&mut run)?;
            log::info!("finished {}", run.path.display());
            log::info!("metrics: {}", report.csv_row());
        }
        Command::Ablate {
            config,
            skip,
            baseline_policy,
        } => {
            let skip = skip.unwrap_or_else(|| vec![Stage::Pal, Stage::Csm, Stage::Dpl]);
            let (dir, _) = run_ablation_dir(&config.load()?, &skip, baseline_policy)?;
            let path = emit_report(&dir, ReportFormat::Markdown)?;
            log::info!("ablation written to {}", path.display());
        }
        Command::Report { run, format } => {
            let path = emit_report(&run, format)?;
            log::info!("report written to {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
