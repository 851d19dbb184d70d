use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use lain_core::config::RunConfig;
use lain_core::runner;
use lain_core::Error;

#[derive(Parser)]
#[command(name = "lain", about = "Zero-shot HOI detection with locality and interaction adapters")]
struct Cli {
    command: Command,
    /// Flat key=value config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, later wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Load a checkpoint even if its config digest differs.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Command {
    Gen,
    Train,
    Eval,
    Gradcheck,
    Oracle,
    Ablate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
            Command::Oracle => "oracle",
            Command::Ablate => "ablate",
        }
    }
}

enum Failure {
    Check(String),
    Usage(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::UnknownKey(_) | Error::InvalidArgument(_) | Error::Io { .. } | Error::DigestMismatch { .. } => {
                Failure::Usage(e)
            }
            e => Failure::Runtime(e),
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path, &cli.overrides)?,
        None => RunConfig::resolve("", &cli.overrides)?,
    };
    let dir = runner::run_dir(&cfg, cli.command.name())?;
    println!("run directory {}", dir.display());
    match cli.command {
        Command::Gen => runner::cmd_gen(&cfg, &dir)?,
        Command::Train => runner::cmd_train(&cfg, &dir)?,
        Command::Eval => {
            let r = runner::cmd_eval(&cfg, &dir, cli.force)?;
            let p = runner::points;
            println!("mAP full {} seen {} unseen {}", p(r.map_full), p(r.map_seen), p(r.map_unseen));
        }
        Command::Gradcheck => {
            let suite = runner::gradcheck_suite(&cfg)?;
            let tol = 1e-4;
            if !runner::print_gradcheck(&suite, tol) {
                return Err(Failure::Check(format!("gradient check exceeded {tol:.0e}")));
            }
        }
        Command::Oracle => {
            let checks = runner::oracle_suite(&cfg)?;
            if !runner::print_checks(&checks, std::io::stdout().lock()) {
                let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.clone()).collect();
                return Err(Failure::Check(format!("oracle mismatch: {}", failed.join("; "))));
            }
        }
        Command::Ablate => {
            let rows = runner::cmd_ablate(&cfg, &dir)?;
            print!("{}", runner::ablation_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
