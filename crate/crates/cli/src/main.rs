use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use udac::actor::DistortionSpec;
use udac::dataset::OfflineDataset;
use udac::env::{rollout_mixture, BehaviorAgentKind, RiskyPointMassConfig};
use udac::eval::{ablate_lambda, ablation_csv, evaluate, export_trajectories};
use udac::trainer::{TrainLog, Trainer, TrainerConfig, UdacModel, LOG_FILE};
use udac::UdacError;

#[derive(Parser)]
#[command(
    name = "udac",
    version,
    about = "Risk-averse offline RL with a diffusion behavior policy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted behavior agents and write an offline dataset.
    GenData {
        #[arg(long)]
        env_config: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        episodes: usize,
        /// Episode shares for the direct, detour and noisy agents.
        #[arg(long, value_delimiter = ',', default_value = "0.4,0.4,0.2")]
        mixture: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write it, its config and the training log to a directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Roll out a trained model and write per-seed and pooled metrics.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        env_config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Number of evaluation seeds, `0..seeds`.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write rollout positions of a trained model as CSV.
    ExportTraj {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        env_config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one model per lambda.
    AblateLambda {
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.25,0.5,0.75,1.0")]
        grid: Vec<f64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        env_config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    lambda: Option<f64>,
    /// `cvar:ALPHA`, `mean`, `wang:ETA` or `cpw:ETA`.
    #[arg(long)]
    distortion: Option<DistortionSpec>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    diffusion_steps: Option<usize>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    no_guidance: bool,
    #[arg(long)]
    freeze_taus: bool,
    #[arg(long)]
    target_actor_bootstrap: bool,
}

impl Overrides {
    fn apply(&self, mut c: TrainerConfig) -> Result<TrainerConfig> {
        if let Some(l) = self.lambda {
            c.actor.lambda = l;
        }
        if let Some(d) = self.distortion {
            c.actor.distortion = d;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(n) = self.steps {
            c.gradient_steps = n;
        }
        if let Some(n) = self.diffusion_steps {
            c.diffusion_steps = n;
        }
        if let Some(g) = self.guidance_scale {
            c.guidance.guidance_scale = g;
        }
        if self.no_guidance {
            c.guidance.enabled = false;
        }
        c.freeze_taus |= self.freeze_taus;
        c.target_actor_bootstrap |= self.target_actor_bootstrap;
        c.validate()?;
        Ok(c)
    }
}

fn load_env(path: Option<&Path>) -> Result<RiskyPointMassConfig> {
    match path {
        Some(p) => RiskyPointMassConfig::load(p).with_context(|| format!("reading env config {}", p.display())),
        None => Ok(RiskyPointMassConfig::default()),
    }
}

fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<TrainerConfig> {
    let base = match path {
        Some(p) => TrainerConfig::load(p).with_context(|| format!("reading trainer config {}", p.display()))?,
        None => TrainerConfig::default(),
    };
    overrides.apply(base)
}

fn load_data(path: &Path) -> Result<OfflineDataset> {
    OfflineDataset::load(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn gen_data(env: &RiskyPointMassConfig, episodes: usize, mixture: &[f64], seed: u64, out: &Path) -> Result<()> {
    let agents = BehaviorAgentKind::default_mixture();
    if mixture.len() != agents.len() {
        bail!(
            "--mixture needs {} ratios (direct, detour, noisy), got {}",
            agents.len(),
            mixture.len()
        );
    }
    let eps = rollout_mixture(env, &agents, mixture, episodes, seed)?;
    let ds = OfflineDataset::from_episodes(&eps, env)?;
    ds.save(out)?;
    eprintln!(
        "wrote {} transitions from {} episodes to {}",
        ds.len(),
        episodes,
        out.display()
    );
    Ok(())
}

fn train(data: &Path, config: TrainerConfig, out: &Path) -> Result<()> {
    let ds = load_data(data)?;
    fs::create_dir_all(out)?;
    let mut log = BufWriter::new(File::create(out.join(LOG_FILE))?);
    writeln!(log, "{}", TrainLog::CSV_HEADER)?;
    let every = config.checkpoint_every;
    let mut trainer = Trainer::new(&ds, config)?;
    let result = trainer.run_with(&ds, |t| {
        if let Some(r) = t.log.records.last() {
            writeln!(log, "{}", TrainLog::csv_row(r))?;
        }
        if every > 0 && t.step % every == 0 {
            t.save_checkpoint(out.join(format!("step_{}.ckpt", t.step)))?;
        }
        Ok(())
    });
    log.flush()?;
    match result {
        Ok(()) => {}
        Err(e @ UdacError::Diverged { .. }) => {
            let snap = out.join("diverged.ckpt");
            trainer.save_checkpoint(&snap)?;
            bail!("{e}; last good state saved to {}", snap.display());
        }
        Err(e) => return Err(e.into()),
    }
    trainer.model.save_dir(out, &trainer.config)?;
    eprintln!("trained {} steps, model in {}", trainer.step, out.display());
    Ok(())
}

fn load_model(dir: &Path) -> Result<UdacModel> {
    let (model, _) = UdacModel::load_dir(dir).with_context(|| format!("reading model {}", dir.display()))?;
    Ok(model)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            env_config,
            episodes,
            mixture,
            seed,
            out,
        } => gen_data(&load_env(env_config.as_deref())?, episodes, &mixture, seed, &out),
        Command::Train {
            data,
            config,
            out,
            overrides,
        } => train(&data, load_config(config.as_deref(), &overrides)?, &out),
        Command::Eval {
            model,
            env_config,
            episodes,
            seeds,
            out,
        } => {
            let model = load_model(&model)?;
            let env = load_env(env_config.as_deref())?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let report = evaluate(&model, &env, episodes, &seeds)?;
            fs::write(&out, report.to_csv())?;
            println!(
                "mean {:.3} median {:.3} cvar10 {:.3} violations/episode {:.3}",
                report.mean_return, report.median_return, report.cvar10_return, report.violations_mean
            );
            Ok(())
        }
        Command::ExportTraj {
            model,
            env_config,
            episodes,
            seed,
            out,
        } => {
            let model = load_model(&model)?;
            let dump = export_trajectories(&model, &load_env(env_config.as_deref())?, episodes, seed, &out)?;
            eprintln!(
                "wrote {} rows, risky fraction {:.3}",
                dump.rows.len(),
                dump.risky_fraction()
            );
            Ok(())
        }
        Command::AblateLambda {
            grid,
            data,
            config,
            env_config,
            episodes,
            seeds,
            out,
            overrides,
        } => {
            let ds = load_data(&data)?;
            let cfg = load_config(config.as_deref(), &overrides)?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let rows = ablate_lambda(&ds, &cfg, &grid, &load_env(env_config.as_deref())?, episodes, &seeds)?;
            fs::write(&out, ablation_csv(&rows))?;
            for (l, r) in &rows {
                println!(
                    "lambda {l}: cvar10 {:.3} mean {:.3} violations {:.3}",
                    r.cvar10_return, r.mean_return, r.violations_mean
                );
            }
            Ok(())
        }
    }
}
