use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfsde::cli::{resolve, run, Overrides};

#[derive(Parser)]
#[command(name = "mfsde", version, about = "Mean-field SDE approximation through the Fokker-Planck density")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one study; settings come from the preset, then --config, then flags.
    Run {
        /// JSON config, or the manifest.json of an earlier run.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let Command::Run { config, overrides } = cli.command;
    let result = resolve(config.as_deref(), &overrides).and_then(|cfg| run(&cfg));
    match result {
        Ok(summary) => {
            if let Some(report) = &summary.report {
                print!("{}", report.to_csv());
            }
            for p in &summary.outputs {
                eprintln!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
