use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spinlab_cli::{acceptance, exit_code, resolve_threads, run_file, RunOptions, EXIT_NUMERICAL};

#[derive(Parser)]
#[command(name = "spinlab", version, about = "Numerical lab for conservative spin systems")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config's `output`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run seed (overrides the config's `seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; falls back to SPINLAB_THREADS, then all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the acceptance suite and print one line per criterion.
    Acceptance {
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn init_pool(flag: Option<usize>) -> anyhow::Result<usize> {
    let n = resolve_threads(flag)?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(rayon::current_num_threads())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run { config, out, seed, threads } => init_pool(threads).and_then(|threads| {
            let dir = run_file(&config, &RunOptions { out, seed, threads })?;
            eprintln!("wrote {}", dir.display());
            Ok(0)
        }),
        Cmd::Acceptance { threads } => init_pool(threads).map(|_| {
            let all = acceptance::run_all(|o| println!("{}", o.line()));
            let passed = all.iter().filter(|o| o.passed).count();
            println!("{passed}/{} criteria passed", all.len());
            if passed == all.len() { 0 } else { EXIT_NUMERICAL }
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
