use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vthinker_cli::{cmd_eval, cmd_evolve, cmd_perception, cmd_rollout, cmd_stats, CliError, EvolveOptions, RunConfig};

#[derive(Parser)]
#[command(name = "vthinker", version, about = "Interactive visual-reasoning data pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key, e.g. `--set flywheel.rounds=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Global seed; overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self, extra: Vec<String>) -> Result<RunConfig, CliError> {
        let mut sets = self.sets.clone();
        sets.extend(extra);
        RunConfig::load(&self.config, &sets, self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Flywheel, calibration and expansion end to end.
    Evolve {
        #[command(flatten)]
        common: Common,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long, hide = true)]
        halt_after_round: Option<u32>,
    },
    /// Synthesize perception-alignment scenes.
    Perception {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Roll out grouped trajectories and score them.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// Sample shard to roll out.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score candidates on a benchmark.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        benchmark: Option<PathBuf>,
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Forest statistics and per-round growth of an evolve run.
    Stats { run_dir: PathBuf },
}

fn path_set(key: &str, p: Option<PathBuf>) -> Vec<String> {
    p.map(|p| {
        let abs = std::path::absolute(&p).unwrap_or(p);
        format!("{key}={:?}", abs.display().to_string())
    })
    .into_iter()
    .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Evolve {
            common,
            resume,
            halt_after_round,
        } => {
            let cfg = common.load(Vec::new())?;
            let s = cmd_evolve(
                &cfg,
                &EvolveOptions {
                    resume,
                    halt_after_round,
                },
            )?;
            if s.halted {
                println!("halted after round {}; rerun with --resume to continue", s.rounds);
            } else {
                println!(
                    "rounds {}  d_init {}  d_verified {}  d_final {}  rejected {}",
                    s.rounds, s.d_init, s.d_verified, s.d_final, s.rejected
                );
                println!("final digest {}", s.final_digest);
            }
            println!("run dir {}", s.run_dir.display());
        }
        Command::Perception { common, n } => {
            let cfg = common.load(n.map(|n| format!("perception.n={n}")).into_iter().collect())?;
            let (path, count) = cmd_perception(&cfg)?;
            println!("{count} perception items in {}", path.display());
        }
        Command::Rollout { common, input } => {
            let cfg = common.load(path_set("rl.input", input))?;
            let s = cmd_rollout(&cfg)?;
            println!(
                "groups {}  mean reward {:.3}  mean surrogate {:.4}  targeted {}",
                s.groups, s.mean_reward, s.mean_surrogate, s.targeted
            );
            println!("run dir {}", s.run_dir.display());
        }
        Command::Eval {
            common,
            benchmark,
            candidates,
        } => {
            let mut extra = path_set("eval.benchmark", benchmark);
            extra.extend(path_set("eval.candidates", candidates));
            let cfg = common.load(extra)?;
            let (_, table) = cmd_eval(&cfg)?;
            print!("{table}");
        }
        Command::Stats { run_dir } => print!("{}", cmd_stats(&run_dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    // Workers are spawned as `vthinker stub-worker --protocol-version N`.
    if args.get(1).map(String::as_str) == Some("stub-worker") {
        let code = vthinker_core::executor::stub_worker::main_with_args(&args[2..]);
        return ExitCode::from(code.clamp(0, 255) as u8);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
