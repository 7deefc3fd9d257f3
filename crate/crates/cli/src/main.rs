//! `foresee`: ex-ante fairness risk audits from the command line.
//!
//! Exit codes: 0 success, 2 usage, 3 i/o, 4 input data or schema,
//! 5 invalid parameter, 6 estimator failure, 7 undefined metric or violated
//! hypothesis, 8 serialization.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use foresee::classifiers::{ClassifierKind, Metric};
use foresee::mitigation::Strategy;
use foresee::{Error, Result};

use commands::{Context, EstimatorChoice, FitRows};
use config::{Format, RunConfig};
use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(
    name = "foresee",
    version,
    about = "Ex-ante fairness risk audits for tabular data"
)]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Shared {
    /// Input CSV with a header row.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Schema TOML; defaults to the data path with a `.toml` extension.
    #[arg(long, global = true)]
    schema: Option<PathBuf>,
    /// Run configuration TOML; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Risk threshold separating High from Low.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Minimum held-out accuracy for a tree to be retained.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Trees to retain.
    #[arg(long, global = true)]
    trees: Option<usize>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score every instance and write the risk distribution.
    Audit {
        #[arg(long, value_enum, default_value = "foresee")]
        estimator: EstimatorChoice,
        /// Rows the estimator is fit on; every row is scored.
        #[arg(long, value_enum, default_value = "all")]
        fit: FitRows,
        /// Also write the fitted model as JSON.
        #[arg(long)]
        save_model: bool,
    },
    /// Compare estimated and true risk on the synthetic benchmark.
    Simulate {
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        /// Skip the boosted baseline.
        #[arg(long)]
        no_baseline: bool,
        /// Also write one synthetic sample of this size with its schema.
        #[arg(long)]
        export_sample: Option<usize>,
    },
    /// Train the unaware classifiers and report fairness by risk group.
    Evaluate {
        /// Comma-separated subset of logistic, random_forest, knn, linear_svm.
        #[arg(long, value_delimiter = ',')]
        classifiers: Option<Vec<String>>,
        /// f1 or accuracy.
        #[arg(long)]
        metric: Option<String>,
        /// Add a top-gamma subset by risk.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Compare features of the highest- and lowest-risk instances.
    Profile {
        /// `row_id,risk` CSV from `audit`; scored afresh when absent.
        #[arg(long)]
        risks: Option<PathBuf>,
        /// Share of instances in each profile, in (0, 0.5].
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Apply risk-guided pre- or post-processing.
    Mitigate {
        #[arg(long, default_value = "random_forest")]
        classifier: String,
        /// Comma-separated strategies, or `all`.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        strategy: Vec<String>,
        /// Fairness tolerance for post-processing.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        metric: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Audit { .. } => "audit",
            Command::Simulate { .. } => "simulate",
            Command::Evaluate { .. } => "evaluate",
            Command::Profile { .. } => "profile",
            Command::Mitigate { .. } => "mitigate",
        }
    }
}

fn parse_metric(s: &str) -> Result<Metric> {
    match s.to_ascii_lowercase().as_str() {
        "f1" => Ok(Metric::F1),
        "accuracy" | "acc" => Ok(Metric::Accuracy),
        other => Err(Error::InvalidParameter(format!("unknown metric '{other}'"))),
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let s = &cli.shared;
    let mut cfg = RunConfig::load(cli.command.name(), s.config.as_deref())?;
    if let Some(v) = s.seed {
        cfg.seed = v;
    }
    if let Some(v) = s.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = s.beta {
        cfg.forest.beta = v;
    }
    if let Some(v) = s.trees {
        cfg.forest.trees = v;
        cfg.forest.max_attempts = cfg.forest.max_attempts.max(5 * v);
    }
    if let Some(v) = s.format {
        cfg.format = v;
    }
    match &cli.command {
        Command::Simulate {
            seeds,
            n,
            no_baseline,
            ..
        } => {
            if let Some(v) = seeds {
                cfg.simulate.seeds = *v;
            }
            if let Some(v) = n {
                cfg.simulate.n = *v;
            }
            if *no_baseline {
                cfg.simulate.baseline = false;
            }
        }
        Command::Evaluate {
            classifiers,
            metric,
            gamma,
        } => {
            if let Some(list) = classifiers {
                cfg.models = list
                    .iter()
                    .map(|c| ClassifierKind::parse(c))
                    .collect::<Result<_>>()?;
            }
            if let Some(m) = metric {
                cfg.metric = parse_metric(m)?;
            }
            if gamma.is_some() {
                cfg.gamma = *gamma;
            }
        }
        Command::Profile { fraction, .. } => {
            if let Some(v) = fraction {
                cfg.profile_fraction = *v;
            }
        }
        Command::Mitigate {
            epsilon, metric, ..
        } => {
            if let Some(v) = epsilon {
                cfg.mitigation.epsilon = *v;
            }
            if let Some(m) = metric {
                cfg.metric = parse_metric(m)?;
            }
        }
        Command::Audit { .. } => {}
    }
    cfg.seed_components();
    cfg.validate()?;
    Ok(cfg)
}

fn strategies(list: &[String]) -> Result<Vec<Strategy>> {
    if list.iter().any(|s| s == "all") {
        return Ok(Strategy::ALL.to_vec());
    }
    list.iter().map(|s| Strategy::parse(s)).collect()
}

fn require_data(cli: &Cli) -> Result<PathBuf> {
    cli.shared
        .data
        .clone()
        .ok_or_else(|| Error::InvalidParameter(format!("{} requires --data", cli.command.name())))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    let threads = cli
        .shared
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(Error::InvalidParameter(
            "--threads must be at least 1".into(),
        ));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let out_dir = cli.shared.out_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| manifest::io(&out_dir, e))?;

    let mut parameters = serde_json::to_value(&cfg)?;
    if let serde_json::Value::Object(map) = &mut parameters {
        map.insert(
            "command".into(),
            serde_json::to_value(format!("{:?}", cli.command))?,
        );
    }
    let mut ctx = Context {
        manifest: RunManifest::new(cli.command.name(), parameters, cfg.seed, threads),
        cfg,
        out_dir: out_dir.clone(),
    };
    if let Some(c) = &cli.shared.config {
        ctx.manifest.add_input(c)?;
    }
    let schema = cli.shared.schema.as_deref();
    match &cli.command {
        Command::Audit {
            estimator,
            fit,
            save_model,
        } => commands::audit(
            &mut ctx,
            &require_data(&cli)?,
            schema,
            *estimator,
            *fit,
            *save_model,
        )?,
        Command::Simulate { export_sample, .. } => commands::simulate(&mut ctx, *export_sample)?,
        Command::Evaluate { .. } => commands::evaluate(&mut ctx, &require_data(&cli)?, schema)?,
        Command::Profile { risks, .. } => {
            commands::profile_cmd(&mut ctx, &require_data(&cli)?, schema, risks.as_deref())?
        }
        Command::Mitigate {
            classifier,
            strategy,
            ..
        } => {
            let kind = ClassifierKind::parse(classifier)?;
            let list = strategies(strategy)?;
            commands::mitigate_cmd(&mut ctx, &require_data(&cli)?, schema, kind, &list)?
        }
    }
    ctx.manifest.write(&out_dir)?;
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Csv(_) | Error::Schema(_) | Error::Validation(_) | Error::Row { .. } => 4,
        Error::InvalidParameter(_) => 5,
        Error::BetaTooStrict { .. } | Error::EmptyForest | Error::Seed { .. } => 6,
        Error::UndefinedMetric(_) | Error::Hypothesis(_) => 7,
        Error::Json(_) => 8,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
