use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use datamin::dataset::{generate_synthetic, write_csv, SyntheticSpec};
use datamin::metrics::MetricKind;
use datamin::minimisation::StopDecision;
use datamin::runner::{self, ExperimentConfig};
use datamin::{Error, Result};

/// Exit code for command-line usage errors (unknown flag, missing argument).
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "datamin", version, about = "Data minimisation experiments for recommender systems")]
struct Cli {
    /// Replace the configured seed list (or the generator seed for `gen`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Suppress progress and report output; errors are still printed.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full experiment grid described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Build one learning curve, fit the power law and apply the stopping rule.
    Curve {
        #[arg(long)]
        config: PathBuf,
        /// Model kind: popularity, item_knn or mf_sgd.
        #[arg(long)]
        model: String,
        /// Metric, e.g. rmse, mae, ndcg@10, hit_rate@5.
        #[arg(long)]
        metric: String,
    },
    /// Withdraw users, retrain every configured model and print the cost report.
    Withdraw {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated user ids.
        #[arg(long, value_delimiter = ',', required = true)]
        users: Vec<String>,
        /// Ledger timestamp; defaults to the current Unix time.
        #[arg(long)]
        timestamp: Option<u64>,
    },
    /// Run the compatibility analysis of `[analysis.compatibility]`.
    Compat {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a synthetic dataset CSV from a generator spec (TOML).
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        config.override_seed(s);
    }
    Ok(config)
}

fn execute(cli: Cli) -> Result<u8> {
    let say = |msg: String| {
        if !cli.quiet {
            println!("{msg}");
        }
    };
    match &cli.command {
        Command::Run { config } => {
            let config = load(config, cli.seed)?;
            let summary = runner::run(&config)?;
            say(format!(
                "{} cells ({} failed), {} curves -> {}",
                summary.cells.len(),
                summary.failed_cells(),
                summary.curves,
                summary.output_dir.display()
            ));
            if summary.failed_cells() > 0 {
                return Ok(4);
            }
        }
        Command::Curve { config, model, metric } => {
            let config = load(config, cli.seed)?;
            let metric: MetricKind = metric.parse()?;
            let out = runner::single_curve(&config, model, metric)?;
            say(format!("model={} plan={} metric={metric}", out.model.label(), out.plan));
            say("budget,seed,metric_value".into());
            for p in &out.curve.points {
                say(format!("{},{},{}", p.budget, p.seed, p.value));
            }
            match &out.curve.fit {
                Some(f) => say(format!(
                    "fit a={} b={} c={} residual={} converged={}",
                    f.a, f.b, f.c, f.residual, f.converged
                )),
                None => say("fit: none".into()),
            }
            match &out.stop {
                Ok(StopDecision::StopAt(k)) => say(format!("stop_at={k}")),
                Ok(StopDecision::Continue) => say("stop=continue".into()),
                Err(e) => {
                    eprintln!("error: {e}");
                    return Ok(4);
                }
            }
            if out.curve.failed_cells > 0 {
                eprintln!("warning: {} cells failed", out.curve.failed_cells);
                return Ok(4);
            }
        }
        Command::Withdraw {
            config,
            users,
            timestamp,
        } => {
            let config = load(config, cli.seed)?;
            let ts = timestamp.unwrap_or_else(|| {
                SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0)
            });
            let out = runner::withdraw_users(&config, users, ts)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            say("model,exact,max_deviation,probes,sgd_updates,similarity_ops,retrains".into());
            for m in &out.models {
                say(format!(
                    "{},{},{},{},{},{},{}",
                    m.model,
                    m.exactness.exact,
                    m.exactness.max_deviation,
                    m.exactness.probes,
                    m.delta.sgd_updates,
                    m.delta.similarity_ops,
                    m.delta.retrains
                ));
            }
            say(format!(
                "energy_proxy={} ledger={}",
                out.report.energy_proxy,
                out.ledger_path.display()
            ));
            if out.models.iter().any(|m| !m.exactness.exact) {
                eprintln!("error: a retrained model differs from its independent refit");
                return Ok(4);
            }
        }
        Command::Compat { config } => {
            let config = load(config, cli.seed)?;
            let r = runner::run_compatibility(&config)?;
            say(format!(
                "{} vs {}: r={} p={} samples={} verdict={}",
                r.purpose_a,
                r.purpose_b,
                r.pearson_r,
                r.permutation_p,
                r.pairs.len(),
                r.verdict
            ));
        }
        Command::Gen { spec, out } => {
            let text = std::fs::read_to_string(spec)
                .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", spec.display())))?;
            let mut spec: SyntheticSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let data = generate_synthetic(&spec)?;
            write_csv(&data, BufWriter::new(File::create(out)?))?;
            say(format!("{} interactions -> {}", data.len(), out.display()));
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
