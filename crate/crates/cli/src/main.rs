use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use symptom_core::config::RunConfig;
use symptom_core::pipeline;

/// Symptom-based anomaly detection over VM traffic traces.
#[derive(Parser)]
#[command(name = "symwatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate per-agent traces and ground truth for a scenario.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Run detection over a trace directory.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Directory holding agent-*.trace and trace_meta.toml.
        #[arg(long)]
        trace_dir: PathBuf,
    },
    /// Closed-loop simulation, detection and mitigation.
    Run {
        #[command(flatten)]
        common: Common,
        /// Detect only; never throttle.
        #[arg(long)]
        no_mitigation: bool,
        /// Keep the generated traces under <out>/traces.
        #[arg(long)]
        write_traces: bool,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// baseline, router_misconfig, dns_misconfig or lb_misconfig.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    vm_count: Option<u32>,
    #[arg(long)]
    agent_count: Option<u32>,
    #[arg(long)]
    windows: Option<u64>,
    #[arg(long)]
    onset_window: Option<u64>,
    #[arg(long)]
    affected_fraction: Option<f64>,
    /// Any setting as dotted.key=value, e.g. controller.tau=0.7. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("scenario.name", self.scenario.clone()),
            ("scenario.vm_count", self.vm_count.map(|v| v.to_string())),
            ("scenario.agent_count", self.agent_count.map(|v| v.to_string())),
            ("scenario.total_windows", self.windows.map(|v| v.to_string())),
            ("scenario.onset_window", self.onset_window.map(|v| v.to_string())),
            ("scenario.affected_fraction", self.affected_fraction.map(|v| format!("{v:?}"))),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(&format!("{key}={v}"))?;
            }
        }
        for o in &self.overrides {
            cfg.set(o)?;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common } => {
            let cfg = common.config()?;
            let entries = pipeline::simulate(&cfg, &common.out)
                .with_context(|| format!("simulate into {}", common.out.display()))?;
            println!("wrote {} files to {}", entries.len(), common.out.display());
        }
        Command::Detect { common, trace_dir } => {
            let cfg = common.config()?;
            let outcome = pipeline::detect(&cfg, &trace_dir, &common.out)
                .with_context(|| format!("detect over {}", trace_dir.display()))?;
            print!("{}", outcome.summary());
        }
        Command::Run {
            common,
            no_mitigation,
            write_traces,
        } => {
            let mut cfg = common.config()?;
            if no_mitigation {
                cfg.mitigation.enabled = false;
            }
            let outcome = pipeline::run(&cfg, &common.out, write_traces)
                .with_context(|| format!("run into {}", common.out.display()))?;
            print!("{}", outcome.summary());
        }
    }
    Ok(())
}
