use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlb_boot::pipeline::{dump_weight_maps, generate_data, load_data, thread_cap, write_data};
use mlb_boot::{run_ablation, run_experiment, ExperimentConfig, Result, RunOptions};

#[derive(Parser)]
#[command(
    name = "mlb-boot",
    version,
    about = "Meta-learned label bootstrapping for segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (`key = value` lines).
    config: PathBuf,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic splits into `data_dir`.
    GenData(Common),
    /// Train and evaluate one configuration into `out_dir`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in `out_dir`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs, leaving a checkpoint.
        #[arg(long, value_name = "EPOCHS")]
        stop_after: Option<usize>,
    },
    /// Run the five ablation configurations over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        seeds: Vec<u64>,
    },
    /// Write the normalized weight maps at the listed training steps.
    DumpWeights {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        steps: Vec<usize>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = common.load()?;
            let generated = generate_data(&cfg.data)?;
            write_data(&cfg.data.dir, &generated.splits)?;
            println!("wrote {}", cfg.data.dir.display());
        }
        Command::Train {
            common,
            resume,
            stop_after,
        } => {
            let cfg = common.load()?;
            let data = load_data(&cfg.data.dir)?;
            let opts = RunOptions {
                out_dir: Some(&cfg.out_dir),
                resume,
                stop_after,
                ..Default::default()
            };
            let outcome = run_experiment(&cfg, &data, opts)?;
            match outcome.final_report {
                Some(f) => println!(
                    "{} epoch {}: dice {:.4} (best {:.4} at epoch {}), results in {}",
                    f.phase,
                    f.final_epoch,
                    f.final_eval.dice,
                    f.best_eval.dice,
                    f.best_epoch,
                    cfg.out_dir.display()
                ),
                None => println!("stopped; resume with --resume from {}", cfg.out_dir.display()),
            }
        }
        Command::Ablate { common, seeds } => {
            let cfg = common.load()?;
            let data = load_data(&cfg.data.dir)?;
            let rows = run_ablation(&cfg, &data, &seeds, &cfg.out_dir, thread_cap()?)?;
            for r in rows {
                let dice: Vec<f64> = r.finals.iter().map(|m| m.dice).collect();
                let (m, s) = mlb_boot::report::mean_std(&dice);
                println!("{:<28} dice {m:.4} ± {s:.4}", r.name);
            }
            println!("wrote {}", cfg.out_dir.join("ablation.csv").display());
        }
        Command::DumpWeights { common, steps } => {
            let cfg = common.load()?;
            let data = load_data(&cfg.data.dir)?;
            for d in dump_weight_maps(&cfg, &data, &steps, &cfg.out_dir)? {
                println!("step {}: {} {}", d.step, d.noisy.display(), d.pseudo.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
