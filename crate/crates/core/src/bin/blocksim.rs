use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use blocksim::harness::service::{serve, Role};
use blocksim::harness::{
    capacity, capacity_csv, convert_trace, run, sweep, sweep_csv, ExperimentConfig, HarnessError,
    TraceFormat,
};

#[derive(Parser)]
#[command(name = "blocksim", version, about = "Predictive scheduling simulator for LLM serving clusters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    qps: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Backend,
    Predictor,
    Scheduler,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Sharegpt,
    Burstgpt,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its report files.
    Run(Common),
    /// Run every (policy, qps, seed) cell of the sweep section.
    Sweep(Common),
    /// Search the highest qps meeting the latency objective, per policy.
    Capacity(Common),
    /// Run one role of the networked deployment.
    Serve {
        #[arg(long, value_enum)]
        role: RoleArg,
        #[arg(long)]
        config: PathBuf,
    },
    /// Convert a conversation dump or length trace into the trace format.
    ConvertTrace {
        #[arg(long, value_enum)]
        format: FormatArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn load(c: &Common) -> Result<(ExperimentConfig, PathBuf), HarnessError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
        cfg.sweep.seeds = vec![seed];
    }
    if let Some(p) = &c.policy {
        cfg.scheduler.policy = p.clone();
        cfg.sweep.policies.clear();
    }
    if let Some(q) = c.qps {
        cfg.workload.qps = q;
        cfg.sweep.qps = vec![q];
    }
    cfg.validate()?;
    let out = c.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    Ok((cfg, out))
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run(c) => {
            let (cfg, out) = load(&c)?;
            let report = run(&cfg, &out)?;
            let s = &report.summary;
            println!(
                "finished={} mean_ttft_s={:.4} p99_ttft_s={:.4} p99_e2e_s={:.4} preemptions={} -> {}",
                s.finished,
                s.mean_ttft,
                s.p99_ttft,
                s.p99_e2e,
                s.total_preemptions,
                out.display()
            );
        }
        Command::Sweep(c) => {
            let (cfg, out) = load(&c)?;
            let cells = sweep(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let csv = sweep_csv(&cells);
            std::fs::write(out.join("sweep.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Capacity(c) => {
            let (cfg, out) = load(&c)?;
            let rows = capacity(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let csv = capacity_csv(&rows);
            std::fs::write(out.join("capacity.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Serve { role, config } => {
            let cfg = ExperimentConfig::load(config)?;
            let role = match role {
                RoleArg::Backend => Role::Backend,
                RoleArg::Predictor => Role::Predictor,
                RoleArg::Scheduler => Role::Scheduler,
            };
            serve(role, &cfg)?;
        }
        Command::ConvertTrace { format, input, output } => {
            let format = match format {
                FormatArg::Sharegpt => TraceFormat::ShareGpt,
                FormatArg::Burstgpt => TraceFormat::BurstGpt,
            };
            let n = convert_trace(format, &input, &output)?;
            println!("wrote {n} records to {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BLOCK_LOG_LEVEL", "warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
