use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coopeig::cli::{run, RunArgs};

#[derive(Parser)]
#[command(name = "coopeig", version, about = "Principal eigenvalues and diagnostics for switching diffusions")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the task described by a JSON config.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (falls back to COOPEIG_THREADS).
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let Cli { cmd: Cmd::Run { config, out, threads, seed } } = Cli::parse();
    let o = run(&RunArgs { config, out, threads, seed });
    if let Some(m) = &o.message {
        eprintln!("{m}");
    }
    if let Some(d) = &o.dir {
        eprintln!("report: {}", d.join("report.json").display());
    }
    ExitCode::from(o.code as u8)
}
