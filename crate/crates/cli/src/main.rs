use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stateful_ope::env::write_trajectories;
use stateful_ope::experiment::{parse_methods, replication_data, run_analyze, run_learn, run_ope, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "stateful-ope", version, about = "Off-policy evaluation and threshold-policy learning for inventory pricing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate logged behavior data and write it as a trajectory CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of trajectories; defaults to the largest configured sample size.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Off-policy evaluation error curves.
    Ope {
        #[command(flatten)]
        common: Common,
    },
    /// Out-of-sample values of learned threshold policies.
    Learn {
        #[command(flatten)]
        common: Common,
    },
    /// Optimal against learned thresholds, bias histogram and persistence value.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration as JSON; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed, overriding the configured one.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Comma-separated methods from dm, ipw, dr, drnp.
    #[arg(long)]
    modes: Option<String>,
    /// Misspecification weight of the outcome model.
    #[arg(long)]
    delta: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
                ExperimentConfig::from_json(&text).map_err(|e| format!("bad config {}: {e}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(modes) = &self.modes {
            cfg.methods = parse_methods(modes).map_err(|e| e.to_string())?;
        }
        if let Some(delta) = self.delta {
            cfg.env.mixture_delta = delta;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    fn pool(&self) -> Result<rayon::ThreadPool, String> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(k) = self.workers {
            if k == 0 {
                return Err("--workers must be at least 1".into());
            }
            builder = builder.num_threads(k);
        }
        builder.build().map_err(|e| e.to_string())
    }
}

// ── Commands ────────────────────────────────────────────────────────────

fn simulate(cfg: &ExperimentConfig, n: Option<usize>) -> Result<String, String> {
    let n = n.unwrap_or_else(|| cfg.sample_sizes.iter().copied().max().unwrap_or(1));
    if n == 0 {
        return Err("--n must be at least 1".into());
    }
    let data = replication_data(&cfg.env, n, cfg.replication_seed(0)).map_err(|e| e.to_string())?;
    let path = prepare(&cfg.output_dir)?.join("trajectories.csv");
    let file = fs::File::create(&path).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    write_trajectories(file, &data).map_err(|e| e.to_string())?;
    Ok(format!("wrote {} trajectories to {}", n, path.display()))
}

fn prepare(dir: &Path) -> Result<&Path, String> {
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    Ok(dir)
}

fn run(cli: Cli) -> Result<String, String> {
    let common = match &cli.command {
        Command::Simulate { common, .. } | Command::Ope { common } | Command::Learn { common } | Command::Analyze { common } => common,
    };
    let cfg = common.load()?;
    common.pool()?.install(|| match &cli.command {
        Command::Simulate { n, .. } => simulate(&cfg, *n),
        Command::Ope { .. } => {
            let rows = run_ope(&cfg).map_err(|e| e.to_string())?;
            Ok(summary("ope.csv", &cfg, rows.len(), rows.iter().filter(|r| r.error.is_some()).count()))
        }
        Command::Learn { .. } => {
            let rows = run_learn(&cfg).map_err(|e| e.to_string())?;
            Ok(summary("learn.csv", &cfg, rows.len(), rows.iter().filter(|r| r.error.is_some()).count()))
        }
        Command::Analyze { .. } => {
            let report = run_analyze(&cfg).map_err(|e| e.to_string())?;
            Ok(format!(
                "wrote thresholds.csv and delta_hist.csv to {} (persistence value {:.6})",
                cfg.output_dir.display(),
                report.persistence_condition_value
            ))
        }
    })
}

fn summary(file: &str, cfg: &ExperimentConfig, rows: usize, failed: usize) -> String {
    format!("wrote {rows} rows to {} ({failed} failed)", cfg.output_dir.join(file).display())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
