use std::path::PathBuf;
use std::process::ExitCode;

use ccfed::harness::{self, HarnessError, HarnessResult};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ccfed",
    version,
    about = "Client-centric federated adaptive optimization simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds: seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    seeds: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its per-round metrics.
    Run(Common),
    /// Run one experiment per value of a config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Config key to vary.
        #[arg(long, default_value = "eta")]
        axis: String,
        /// Comma-separated values; `eta` defaults to 1e-3 .. 1e1 in half decades.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Cells run concurrently.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Run the built-in invariant scenarios.
    Verify,
    /// Print step-size conditions and bound terms for a config.
    Bound(Common),
    /// Write the client/class label counts of a config's data split.
    PartitionStats(Common),
}

fn read_config(common: &Common) -> HarnessResult<String> {
    match &common.config {
        None => Ok(String::new()),
        Some(p) => std::fs::read_to_string(p).map_err(|e| {
            HarnessError::Config(vec![harness::ConfigIssue {
                line: 0,
                key: "--config".into(),
                message: format!("{}: {e}", p.display()),
            }])
        }),
    }
}

fn overrides(common: &Common) -> Vec<(String, String)> {
    let mut o = Vec::new();
    if let Some(out) = &common.out {
        o.push(("out".to_string(), out.display().to_string()));
    }
    if let Some(seed) = common.seed {
        o.push(("seed".to_string(), seed.to_string()));
    }
    o
}

fn spec(common: &Common) -> HarnessResult<harness::RunSpec> {
    harness::parse_config_with(&read_config(common)?, &overrides(common))
}

fn dispatch(command: Command) -> HarnessResult<()> {
    match command {
        Command::Run(c) => print!("{}", harness::cmd_run(&spec(&c)?, c.seeds)?),
        Command::Sweep {
            common,
            axis,
            values,
            workers,
        } => {
            let text = read_config(&common)?;
            let report = harness::cmd_sweep(&text, &overrides(&common), &axis, Some(values), common.seeds, workers)?;
            print!("{report}");
        }
        Command::Verify => {
            let report = harness::cmd_verify();
            print!("{report}");
            if !report.passed() {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
                return Err(HarnessError::Verify(failed.join(", ")));
            }
        }
        Command::Bound(c) => print!("{}", harness::cmd_bound(&spec(&c)?)?),
        Command::PartitionStats(c) => print!("{}", harness::cmd_partition_stats(&spec(&c)?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
