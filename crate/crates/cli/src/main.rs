use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rmd_core::config::RunConfig;
use rmd_core::pipeline::{cost_table, schedule_table, Run, SampleOptions};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "RMD_THREADS";

#[derive(Parser)]
#[command(name = "rmd", version, about = "Cross-resolution distillation of a toy flow model")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; keys not given take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset used when no config file is given.
    #[arg(long, global = true, default_value = "toy-default")]
    preset: String,
    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-tier shape dataset.
    GenData,
    /// Train the teacher on the low tier, then the high tier.
    TrainTeacher,
    /// Distil the few-step cascaded generator.
    Distill,
    /// Sample with a generator through the cascade.
    Sample(SampleArgs),
    /// Compare student, naive cascade and control arms with the teacher.
    Eval,
    /// Print the inference schedule as CSV.
    Schedule,
    /// Print analytic speedups for published configurations.
    Cost,
}

#[derive(Args)]
struct SampleArgs {
    /// Generator checkpoint; defaults to the run's distilled generator.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    class: usize,
    /// Sampling steps; defaults to the configured value.
    #[arg(long)]
    steps: Option<usize>,
    /// Predicted-noise weight at stage transitions.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Seed of the first sample; later samples use consecutive seeds.
    #[arg(long = "sample-seed", default_value_t = 0)]
    sample_seed: u64,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::preset(&c.preset)?,
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.run_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("{THREADS_ENV} must be a positive integer, got `{v}`"),
        },
        Err(_) => Ok(1),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Schedule => print!("{}", schedule_table(&cfg)?),
        Command::Cost => print!("{}", cost_table()?),
        cmd => {
            let run = Run::create(cfg)?.with_threads(threads()?);
            match cmd {
                Command::GenData => {
                    let path = run.gen_data()?;
                    println!("dataset written to {}", path.display());
                }
                Command::TrainTeacher => {
                    let t = run.train_teacher()?;
                    println!(
                        "teacher trained: high-res validation loss {:.4} after low tier, {:.4} final",
                        t.val_high_after_low, t.val_high_final
                    );
                }
                Command::Distill => {
                    let out = run.distill()?;
                    let last = out.rmd.log.last().map(|e| e.generator_loss).unwrap_or(f64::NAN);
                    println!("distilled {} steps, final generator loss {last:.4}", out.rmd.step);
                }
                Command::Sample(a) => {
                    let dir = run.sample(&SampleOptions {
                        checkpoint: a.checkpoint,
                        class_id: a.class,
                        n: a.steps,
                        alpha_inference: a.alpha,
                        seed: a.sample_seed,
                        count: a.count,
                    })?;
                    println!("samples written to {}", dir.display());
                }
                Command::Eval => {
                    let report = run.eval()?;
                    for r in report.rows.iter().filter(|r| r.metric == "mmd_to_teacher") {
                        println!("{:<20} mmd_to_teacher {:.5}", r.method, r.value);
                    }
                }
                Command::Schedule | Command::Cost => unreachable!(),
            }
            println!("run directory: {}", run.dir.display());
        }
    }
    Ok(())
}
