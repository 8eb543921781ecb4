use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use vmr_core::datasets::{generate_synthetic, load_dataset, SynthConfig};
use vmr_core::run::{cmd_evaluate, sweep_table, RunConfig, RunSummary, Runner, SweepGrid};

/// Zero-shot video moment retrieval.
#[derive(Parser)]
#[command(name = "vmr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rewrite every query into plainer wording.
    Debias(Common),
    /// Caption every sampled frame of every video.
    Caption(Common),
    /// Run the full pipeline and write ranked spans per query.
    Retrieve(Common),
    /// Score predictions against the dataset's ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Predictions file (default: <output_dir>/predictions.jsonl).
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Retrieve and evaluate over a grid of pipeline settings.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        n_d: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        kappa: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        tau: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        lambda: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        sigma: Vec<f64>,
    },
    /// Write a seeded synthetic dataset.
    Synth {
        /// Output file.
        #[arg(long, default_value = "synthetic.json")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        n_videos: usize,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set pipeline.kappa=9`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// charades_sta, activity_net, qv_highlights or synthetic.
    #[arg(long)]
    dataset_kind: Option<String>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    frames_root: Option<PathBuf>,
    /// Skip malformed annotation records instead of failing.
    #[arg(long)]
    lenient: bool,
    /// http or synthetic.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    concurrency: Option<usize>,
}

impl Common {
    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        let quoted = |p: &PathBuf| format!("{:?}", p.display().to_string());
        if let Some(p) = &self.output_dir {
            overrides.push(format!("output_dir={}", quoted(p)));
        }
        if let Some(k) = &self.dataset_kind {
            overrides.push(format!("dataset.kind={k:?}"));
        }
        if let Some(p) = &self.annotations {
            overrides.push(format!("dataset.annotations={}", quoted(p)));
        }
        if let Some(p) = &self.frames_root {
            overrides.push(format!("dataset.frames_root={}", quoted(p)));
        }
        if self.lenient {
            overrides.push("dataset.parse_mode=\"lenient\"".into());
        }
        if let Some(b) = &self.backend {
            overrides.push(format!("backend.kind={b:?}"));
        }
        if let Some(p) = &self.cache_dir {
            overrides.push(format!("backend.cache_dir={}", quoted(p)));
        }
        if let Some(n) = self.concurrency {
            overrides.push(format!("backend.concurrency={n}"));
        }
        Ok(RunConfig::load(self.config.as_deref(), &overrides)?)
    }
}

fn report_summary(command: &str, summary: &RunSummary) -> ExitCode {
    eprintln!(
        "{command}: {} processed, {} already done, {} failed",
        summary.processed,
        summary.skipped_existing,
        summary.failures.len()
    );
    for f in summary.failures.iter().take(20) {
        eprintln!("  {} [{:?}]: {}", f.qid, f.stage, f.error);
    }
    if summary.ok() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

async fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Debias(c) => {
            let runner = Runner::from_config(c.config()?)?;
            Ok(report_summary("debias", &runner.cmd_debias().await?))
        }
        Command::Caption(c) => {
            let runner = Runner::from_config(c.config()?)?;
            Ok(report_summary("caption", &runner.cmd_caption().await?))
        }
        Command::Retrieve(c) => {
            let runner = Runner::from_config(c.config()?)?;
            Ok(report_summary("retrieve", &runner.cmd_retrieve().await?))
        }
        Command::Evaluate { common, predictions } => {
            let config = common.config()?;
            let dataset = load_dataset(config.dataset.kind, &config.dataset.annotations, config.dataset.parse_mode)?;
            let report = cmd_evaluate(&config, &dataset, predictions.as_deref())?;
            print!("{}", report.to_table());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            common,
            n_d,
            kappa,
            tau,
            lambda,
            sigma,
        } => {
            let runner = Runner::from_config(common.config()?)?;
            let grid = SweepGrid {
                n_d,
                kappa,
                tau,
                lambda,
                sigma,
            };
            let rows = runner.cmd_sweep(&grid).await?;
            print!("{}", sweep_table(&rows));
            let failed = rows.iter().any(|r| r.failures > 0);
            Ok(if failed { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Command::Synth { out, seed, n_videos } => {
            let syn = generate_synthetic(&SynthConfig {
                seed,
                n_videos,
                ..SynthConfig::default()
            })?;
            let json = serde_json::to_string(&syn)?;
            std::fs::write(&out, json).with_context(|| format!("writing {}", out.display()))?;
            eprintln!(
                "wrote {} videos and {} queries to {}",
                syn.videos.len(),
                syn.queries.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
