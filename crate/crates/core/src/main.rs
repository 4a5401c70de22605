use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cdch::harness::{self, plot, refine, RunConfig, RunStatus};
use cdch::{oracle, Error};

#[derive(Parser)]
#[command(name = "cdch", version, about = "Cross-diffusion Cahn-Hilliard time stepper")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trajectory into an output directory.
    Run(RunArgs),
    /// Check the solvers against the independent oracles.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the same problem at tau, tau/2, ... and compare trajectories.
    Refine {
        #[command(flatten)]
        run: RunArgs,
        /// Number of halvings.
        #[arg(long, default_value_t = refine::MIN_LEVELS)]
        levels: usize,
    },
    /// Write SVG charts for a run or refinement directory.
    Plot {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `run.output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `initial.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `model.tau`.
    #[arg(long)]
    tau: Option<f64>,
}

const EXIT_CONFIG: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidParameter { .. } => EXIT_CONFIG,
        e if e.is_solver_failure() => 2,
        _ => 1,
    }
}

fn load(args: &RunArgs) -> Result<(RunConfig, PathBuf), Error> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::Config {
        line: None,
        message: format!("{}: {e}", args.config.display()),
    })?;
    let mut cfg = harness::parse_config(&text)?;
    if let Some(tau) = args.tau {
        cfg = cfg.with_tau(tau)?;
    }
    if let Some(seed) = args.seed {
        cfg.initial.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output = out.clone();
    }
    let out = cfg.output.clone();
    Ok((cfg, out))
}

fn report_status(status: RunStatus, what: &str, dir: &Path) -> ExitCode {
    match status {
        RunStatus::Ok => println!("{what}: ok ({})", dir.display()),
        RunStatus::InvariantFailure => eprintln!("{what}: invariant check failed, see {}", dir.join("summary.json").display()),
        RunStatus::SolverFailure => eprintln!("{what}: solver failure, see {}", dir.join("summary.json").display()),
    }
    ExitCode::from(status.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let fail = |e: Error| {
        eprintln!("error: {e}");
        ExitCode::from(exit_code(&e))
    };
    match cli.command {
        Command::Run(args) => {
            let (cfg, out) = match load(&args) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match harness::run_to_dir(&cfg, &out) {
                Ok((_, summary)) => {
                    for c in &summary.checks {
                        println!("{:<24} {} ({:.3e})", c.name, if c.passed { "pass" } else { "FAIL" }, c.value);
                    }
                    if let Some(e) = &summary.error {
                        eprintln!("error: {e}");
                    }
                    report_status(summary.status, "run", &out)
                }
                Err(e) => fail(e),
            }
        }
        Command::Verify { seed } => {
            let checks = oracle::verify_all(seed);
            let mut ok = true;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Command::Refine { run, levels } => {
            let (cfg, out) = match load(&run) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            if levels < refine::MIN_LEVELS {
                return fail(Error::Config {
                    line: None,
                    message: format!("--levels must be at least {}", refine::MIN_LEVELS),
                });
            }
            let print = |rep: &refine::RefineReport| {
                for (k, g) in rep.gaps.iter().enumerate() {
                    let alpha = k.checked_sub(1).map(|j| format!("  alpha {:.3}", rep.alphas[j])).unwrap_or_default();
                    println!("tau {:.3e} vs {:.3e}: gap {g:.6e}{alpha}", rep.levels[k].tau, rep.levels[k + 1].tau);
                }
            };
            match refine::refinement_study(&cfg, levels, &out) {
                Ok(rep) => {
                    print(&rep);
                    println!("gaps decrease monotonically: {}", rep.monotone);
                    ExitCode::from(if rep.monotone { 0 } else { 1 })
                }
                Err(f) => {
                    print(&f.partial);
                    fail(f.error)
                }
            }
        }
        Command::Plot { out } => match plot::plot_dir(&out) {
            Ok(files) => {
                for f in files {
                    println!("{}", f.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
