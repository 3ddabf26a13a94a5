//! `lsr1` command line: train, trace, profile, inspect.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsr1::cli;

#[derive(Parser)]
#[command(
    name = "lsr1",
    version,
    about = "Learned SR1 optimizer: meta-training, trajectory tracing, and performance-profile benchmarking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Named preset configuration.
    #[arg(long)]
    preset: Option<String>,
    /// Path to a TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key overrides, e.g. --set metatrain.meta-iterations=500
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default: timestamped under the output root;
    /// override the root with LSR1_OUT_ROOT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for batch and benchmark fan-out.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train the learned optimizer and write checkpoints and logs.
    Train(ConfigArgs),
    /// Run one solver on one objective and write the trajectory CSV.
    Trace {
        #[command(flatten)]
        common: ConfigArgs,
        /// Model checkpoint (required for lsr1 / lsr1-noproj).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Solver name: lsr1, lsr1-noproj, lbfgs, adam, sr1, adahessian.
        #[arg(long, default_value = "lsr1")]
        solver: String,
        /// Objective, e.g. rosenbrock:n=2 or quad-diag:n=10,cond=100 or
        /// quad-random:n=2,seed=7
        #[arg(long)]
        objective: String,
        /// Seed for the uniform initial point.
        #[arg(long, default_value_t = 0)]
        x0_seed: u64,
        /// Inner iterations.
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Buffer capacity at trace time.
        #[arg(long, default_value_t = 8)]
        buffer: usize,
        /// Fixed step size for classical solvers (default: exact line search
        /// on quadratics, a small fixed step otherwise).
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Run the benchmark suite and write performance-profile artifacts.
    Profile {
        #[command(flatten)]
        common: ConfigArgs,
        /// Comma-separated solver subset (default: from config).
        #[arg(long)]
        solvers: Option<String>,
        /// Checkpoint for the lsr1 solver.
        #[arg(long)]
        lsr1_checkpoint: Option<PathBuf>,
        /// Checkpoint for the lsr1-noproj solver.
        #[arg(long)]
        lsr1_noproj_checkpoint: Option<PathBuf>,
        /// Upper end of the tau grid.
        #[arg(long)]
        tau_max: Option<f64>,
        /// Inner steps per solver.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Print a checkpoint's manifest and parameter count.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(parsed: Cli) -> Result<(), cli::CliError> {
    match parsed.command {
        Command::Train(args) => {
            init_jobs(args.jobs);
            let config =
                cli::resolve_config(args.preset.as_deref(), args.config.as_deref(), &args.overrides)?;
            println!("resolved configuration:\n{}", toml::to_string(&config).unwrap());
            let mut progress = |r: &lsr1::metatrain::MetaRecord| {
                if let Some(v) = r.val_meta_loss {
                    eprintln!(
                        "iter {:>6}  train {:>12.6}  val {:>12.6}",
                        r.iteration, r.train_meta_loss, v
                    );
                }
            };
            let artifacts = cli::cmd_train(&config, args.out.as_deref(), Some(&mut progress))?;
            println!(
                "done: best val meta-loss {} at iteration {}; artifacts in {}",
                artifacts.outcome.best_val_meta_loss,
                artifacts.outcome.best_iteration,
                artifacts.out_dir.display()
            );
            Ok(())
        }
        Command::Trace { common, checkpoint, solver, objective, x0_seed, steps, buffer, lr } => {
            init_jobs(common.jobs);
            let config = cli::resolve_config(
                common.preset.as_deref(),
                common.config.as_deref(),
                &common.overrides,
            )?;
            let args = cli::TraceArgs {
                checkpoint: checkpoint.as_deref(),
                solver: &solver,
                objective_spec: &objective,
                x0_seed,
                steps,
                buffer_capacity: buffer,
                include_identity: config.lsr1.include_identity,
                lr,
                lbfgs_memory: config.baselines.lbfgs_memory,
            };
            let dir = cli::cmd_trace(&args, &config, common.out.as_deref())?;
            println!("trajectory written to {}", dir.display());
            Ok(())
        }
        Command::Profile {
            common,
            solvers,
            lsr1_checkpoint,
            lsr1_noproj_checkpoint,
            tau_max,
            budget,
        } => {
            init_jobs(common.jobs);
            let mut config = cli::resolve_config(
                common.preset.as_deref(),
                common.config.as_deref(),
                &common.overrides,
            )?;
            if let Some(s) = solvers {
                config.eval.solvers = s.split(',').map(|x| x.trim().to_string()).collect();
            }
            if let Some(p) = lsr1_checkpoint {
                config.eval.lsr1_checkpoint = Some(p.display().to_string());
            }
            if let Some(p) = lsr1_noproj_checkpoint {
                config.eval.lsr1_noproj_checkpoint = Some(p.display().to_string());
            }
            if let Some(t) = tau_max {
                config.eval.tau_max = t;
            }
            if let Some(b) = budget {
                config.eval.step_budget = Some(b);
            }
            let artifacts = cli::cmd_profile(&config, common.out.as_deref())?;
            for (s, name) in artifacts.result.solvers.iter().enumerate() {
                println!(
                    "{name}: rho(1) = {:.3}, auc[1, {}] = {:.3}",
                    artifacts.result.table.rho(s, 1.0),
                    config.eval.tau_max,
                    artifacts.result.table.auc(s, config.eval.tau_max)
                );
            }
            println!("artifacts in {}", artifacts.out_dir.display());
            Ok(())
        }
        Command::Inspect { checkpoint } => {
            let summary = cli::cmd_inspect(&checkpoint)?;
            print!("{summary}");
            Ok(())
        }
    }
}

fn init_jobs(jobs: Option<usize>) {
    if let Some(n) = jobs {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() -> ExitCode {
    // Exit codes: 0 success, 1 usage, 2 runtime.
    match Cli::try_parse() {
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            ExitCode::from(code)
        }
        Ok(parsed) => match run(parsed) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
