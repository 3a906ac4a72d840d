use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use offrl::cli::{cmd_ablate, cmd_dataset, cmd_sweep, cmd_train, exit_code, Mix, Recipe, RunConfig, DEFAULT_DATASET_SIZE};
use offrl::envs::EnvKind;
use offrl::{Error, Result};

#[derive(Parser)]
#[command(name = "offrl", about = "Offline RL lab: datasets, training runs, ablations and sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a contaminated dataset, or the full standard suite when --mix is omitted.
    Dataset {
        #[arg(long, default_value = "pointmass2d")]
        env: String,
        /// expert-random or expert-medium.
        #[arg(long)]
        mix: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        ratio: f64,
        #[arg(long, default_value_t = DEFAULT_DATASET_SIZE)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train every seed of a run config.
    Train { config: PathBuf },
    /// Run plain, +GP, +CR and ++ variants on every listed dataset.
    Ablate { config: PathBuf },
    /// Sweep the gradient-penalty weight.
    Sweep {
        config: PathBuf,
        /// Comma-separated λ values; overrides the config.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset {
            env,
            mix,
            ratio,
            n,
            seed,
            out,
        } => {
            let env: EnvKind = env.parse()?;
            if n == 0 {
                return Err(Error::Config("--n must be positive".into()));
            }
            let recipe = match mix {
                Some(m) => {
                    if !(0.0..=1.0).contains(&ratio) {
                        return Err(Error::Config(format!("ratio must be in [0, 1], got {ratio}")));
                    }
                    Some(Recipe {
                        mix: m.parse::<Mix>()?,
                        ratio,
                        n,
                        seed,
                    })
                }
                None => None,
            };
            for p in cmd_dataset(env, recipe, n, seed, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Train { config } => {
            let agg = cmd_train(&RunConfig::from_path(&config)?)?;
            println!("final score {:.2} ± {:.2} ({} failed)", agg.mean, agg.std, agg.failed_runs);
        }
        Command::Ablate { config } => {
            for r in cmd_ablate(&RunConfig::from_path(&config)?)? {
                println!("{} {} {:.2} ± {:.2}", r.dataset, r.variant, r.aggregate.mean, r.aggregate.std);
            }
        }
        Command::Sweep { config, values } => {
            for (v, a) in cmd_sweep(&RunConfig::from_path(&config)?, values)? {
                println!("lambda_gp {v}: {:.2} ± {:.2}", a.mean, a.std);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
