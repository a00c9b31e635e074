use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nlab_cli::{catalog, exit_code, run_config, ExperimentConfig, EXIT_VALIDATION};

#[derive(Parser)]
#[command(name = "nlab", version, about = "Deterministic and stochastic variational experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Worker threads; results do not depend on this.
        #[arg(long)]
        threads: Option<usize>,
        /// Output directory overriding the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// List every catalog key.
    Catalog,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match cli.command {
        Command::Catalog => {
            print!("{}", catalog::listing());
            ExitCode::SUCCESS
        }
        Command::Run { config, threads, output } => {
            if let Some(n) = threads {
                if n == 0 {
                    eprintln!("validation error: --threads must be positive");
                    return ExitCode::from(EXIT_VALIDATION as u8);
                }
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            let result = ExperimentConfig::load(&config).and_then(|cfg| {
                let out = output.unwrap_or_else(|| cfg.output.clone());
                run_config(&cfg, &out)
            });
            match &result {
                Ok(s) => print!("{}", s.table()),
                Err(e) => eprintln!("{e}"),
            }
            ExitCode::from(exit_code(&result) as u8)
        }
    }
}

