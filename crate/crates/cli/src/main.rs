use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ccn::autodiff::AdjointFault;
use ccn::harness::{cmd_enumerate, cmd_eval, cmd_train, cmd_verify, RunConfig, VerifyLevel};

#[derive(Parser)]
#[command(name = "ccn", version, about = "Covariant compositional networks on graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Quick,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    /// Flip the sign of every contraction adjoint.
    ContractSign,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per split seed listed in the config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split (train, valid, test or all).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the covariance, invariance, gradient and catalog property suites.
    Verify {
        #[arg(long, value_enum, default_value = "quick")]
        level: Level,
        /// Corrupt an adjoint on purpose; the gradient suite must then fail.
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
    /// List every contraction from order `in` down to order `out`.
    Enumerate {
        #[arg(long = "in")]
        order_in: usize,
        #[arg(long = "out")]
        order_out: usize,
    },
}

fn run(cli: Cli) -> Result<(), (u8, String)> {
    let fail = |e: ccn::CcnError| (1, e.to_string());
    match cli.command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config).map_err(fail)?;
            let report = cmd_train(&cfg).map_err(fail)?;
            for s in &report.splits {
                println!(
                    "split {}: best epoch {}, valid {} {:.4}, test {} {:.4}, checkpoint {}, metrics {}",
                    s.split_seed,
                    s.best_epoch,
                    report.metric,
                    s.best_valid,
                    report.metric,
                    s.test.get(report.metric).unwrap_or(f64::NAN),
                    s.best_checkpoint.display(),
                    s.metrics_path.display()
                );
            }
            println!(
                "test {}: {:.4} ± {:.4} over {} splits",
                report.metric,
                report.mean_test,
                report.std_test,
                report.splits.len()
            );
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
        } => {
            let metrics = cmd_eval(&checkpoint, &dataset, &split).map_err(fail)?;
            for (name, value) in &metrics.0 {
                println!("{split}\t{name}\t{value:?}");
            }
        }
        Command::Verify {
            level,
            inject_fault,
        } => {
            let level = match level {
                Level::Quick => VerifyLevel::Quick,
                Level::Full => VerifyLevel::Full,
            };
            let fault = inject_fault.map(|Fault::ContractSign| AdjointFault::ContractSign);
            let report = cmd_verify(level, fault);
            for r in &report.results {
                println!(
                    "{} {:<24} {:>7.2}s  {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.seconds,
                    r.detail
                );
            }
            if !report.passed() {
                return Err((1, "verification failed".into()));
            }
        }
        Command::Enumerate {
            order_in,
            order_out,
        } => {
            let lines = cmd_enumerate(order_in, order_out).map_err(|e| (2, e.to_string()))?;
            for l in &lines {
                println!("{l}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
