//! Command-line driver: pretraining, alternating training, evaluation
//! sweeps, state-component ablations, and trajectory visualisation.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use avex::checkpoint::{load_checkpoint, save_checkpoint};
use avex::config::AvexConfig;
use avex::dataset::SceneDataset;
use avex::episode::{run_episode, EpisodeOptions, LearnedPolicy, System};
use avex::train::{schedule, EvalMode, Trainer};
use avex::vis::{accumulate_glimpse_map, export_glimpse_map, export_trajectory};

#[derive(Parser)]
#[command(name = "avex", about = "Active visual exploration with a zoomable glimpse camera")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Desk,
    Full,
    Toy,
}

#[derive(Args)]
struct CommonOpts {
    /// TOML config file; omit to use a preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset when no config file is given.
    #[arg(long, value_enum, default_value = "desk")]
    scale: Scale,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (1 = sequential).
    #[arg(long)]
    threads: Option<usize>,
}

impl CommonOpts {
    fn config(&self) -> anyhow::Result<AvexConfig> {
        let mut cfg = match &self.config {
            Some(p) => AvexConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => match self.scale {
                Scale::Desk => AvexConfig::desk(),
                Scale::Full => AvexConfig::full(),
                Scale::Toy => AvexConfig::toy(),
            },
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(t) = self.threads {
            avex::par::set_threads(t);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the backbone on random glimpse bundles and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: CommonOpts,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Alternating backbone/agent training, optionally from a checkpoint.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Start from this checkpoint (e.g. a pretrained backbone).
        #[arg(long)]
        from: Option<PathBuf>,
        /// Output directory for the final checkpoint and run logs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// fixed = full glimpse budget; stopping = confidence threshold.
        #[arg(long, default_value = "fixed")]
        mode: String,
        /// Stopping threshold override.
        #[arg(long)]
        theta: Option<f64>,
        /// Directory for metrics CSV/JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean-replacement state-component study, one CSV row per ablation.
    Ablate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-episode trajectories and average glimpse maps.
    Visualize {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test-scene index to export.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Also render the smoothly interpolated preview.
        #[arg(long)]
        interpolated: bool,
        /// Embed base64 capture pixels in the exported record JSON.
        #[arg(long)]
        embed_pixels: bool,
        /// Also export average glimpse maps over the test split.
        #[arg(long)]
        map: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved schedule and config, then exit.
    Plan {
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Pretrain { common, out } => {
            let cfg = common.config()?;
            let data = SceneDataset::build(&cfg.dataset)?;
            let mut rng = avex_nn::seeded_rng(cfg.train.seed);
            let system = System::new(&mut rng, &cfg)?;
            let mut trainer = Trainer::new(system);
            let loss = trainer.pretrain(&data)?;
            save_checkpoint(&out, &trainer)?;
            println!("pretrained {} epochs, final epoch loss {loss:.6}", cfg.train.pretrain_epochs);
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
        Command::Train { common, from, out } => {
            let cfg = common.config()?;
            let data = SceneDataset::build(&cfg.dataset)?;
            let mut trainer = match from {
                Some(p) => load_checkpoint(&p, Some(&cfg))?,
                None => {
                    let mut rng = avex_nn::seeded_rng(cfg.train.seed);
                    Trainer::new(System::new(&mut rng, &cfg)?)
                }
            };
            std::fs::create_dir_all(&out)?;
            trainer.fit(&data)?;
            for row in &trainer.log.rows {
                println!(
                    "epoch {:>3} {:>8} loss {:>10.6} reward {:>9.6} val {:>8.4} ({:.1}s)",
                    row.epoch,
                    format!("{:?}", row.phase).to_lowercase(),
                    row.train_loss,
                    row.mean_reward,
                    row.val_score,
                    row.wall_s
                );
            }
            trainer.log.write_csv(&out.join("runlog.csv"))?;
            trainer.log.write_json(&out.join("runlog.json"))?;
            save_checkpoint(&out.join("final.ckpt"), &trainer)?;
            let test = trainer.evaluate(&data.test, EvalMode::FixedBudget, cfg.train.seed)?;
            println!("test: {}", serde_json::to_string(&test)?);
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            mode,
            theta,
            out,
        } => {
            let _ = common.config(); // applies --threads even when unused
            let mut trainer = load_checkpoint(&checkpoint, None)?;
            if let Some(t) = theta {
                trainer.system.cfg.train.stop_threshold = t;
            }
            let data = SceneDataset::build(&trainer.system.cfg.dataset)?;
            let mode = match mode.as_str() {
                "fixed" => EvalMode::FixedBudget,
                "stopping" => EvalMode::Stopping,
                other => bail!("unknown eval mode {other:?} (use fixed or stopping)"),
            };
            let metrics = trainer.evaluate(&data.test, mode, trainer.system.cfg.train.seed)?;
            let json = serde_json::to_string_pretty(&metrics)?;
            println!("{json}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("metrics.json"), &json)?;
                let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
                w.write_record(["n", "accuracy", "rmse", "mean_steps", "mean_pixel_pct", "mean_top_prob"])?;
                w.write_record([
                    metrics.n.to_string(),
                    metrics.accuracy.map(|v| v.to_string()).unwrap_or_default(),
                    metrics.rmse.map(|v| v.to_string()).unwrap_or_default(),
                    metrics.mean_steps.to_string(),
                    metrics.mean_pixel_pct.to_string(),
                    metrics.mean_top_prob.map(|v| v.to_string()).unwrap_or_default(),
                ])?;
                w.flush()?;
            }
            Ok(())
        }
        Command::Ablate {
            common,
            checkpoint,
            out,
        } => {
            let _ = common.config();
            let trainer = load_checkpoint(&checkpoint, None)?;
            let data = SceneDataset::build(&trainer.system.cfg.dataset)?;
            let table = trainer.ablation_table(&data.test, trainer.system.cfg.train.seed)?;
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["patches", "coords", "importance", "latents", "accuracy", "rmse"])?;
            for (spec, m) in &table {
                w.write_record([
                    mark(!spec.patches),
                    mark(!spec.coords),
                    mark(!spec.importance),
                    mark(!spec.latents),
                    m.accuracy.map(|v| format!("{:.4}", v * 100.0)).unwrap_or_default(),
                    m.rmse.map(|v| format!("{v:.6}")).unwrap_or_default(),
                ])?;
                println!(
                    "patches {} coords {} importance {} latents {} -> acc {:?} rmse {:?}",
                    !spec.patches, !spec.coords, !spec.importance, !spec.latents, m.accuracy, m.rmse
                );
            }
            w.flush()?;
            println!("ablation table written to {}", out.display());
            Ok(())
        }
        Command::Visualize {
            common,
            checkpoint,
            scene,
            interpolated,
            embed_pixels,
            map,
            out,
        } => {
            let _ = common.config();
            let trainer = load_checkpoint(&checkpoint, None)?;
            let data = SceneDataset::build(&trainer.system.cfg.dataset)?;
            if scene >= data.test.len() {
                bail!("scene index {scene} out of range ({} test scenes)", data.test.len());
            }
            std::fs::create_dir_all(&out)?;
            let cfg = &trainer.system.cfg;
            let policy = LearnedPolicy {
                agent: &trainer.system.agent,
                deterministic: true,
            };
            let mut rng = avex_nn::seeded_rng(cfg.train.seed);
            let mut outcome = run_episode(
                &trainer.system,
                &data.test[scene],
                &policy,
                None,
                &EpisodeOptions::stopping(cfg.train.max_steps, cfg.train.stop_threshold),
                &mut rng,
            )?;
            if embed_pixels {
                let captures = outcome.captures.clone();
                outcome.record.encode_pixels(&captures);
            }
            export_trajectory(&outcome.record, &data.test[scene], &out, interpolated)?;
            if let Some(dec) = &trainer.system.decoder {
                let latents = trainer.system.encoder.encode(&outcome.final_bundle)?;
                let pred = dec.decode_for_export(&latents)?;
                avex::imaging::save_png(&pred, &out.join("prediction.png"))?;
            }
            println!(
                "episode on {}: {} steps, stop {:?}",
                outcome.record.scene_id, outcome.steps, outcome.record.stop_reason
            );
            if map {
                let opts = EpisodeOptions::fixed_budget(cfg.train.max_steps);
                let mut records = Vec::new();
                for (i, s) in data.test.iter().enumerate() {
                    let mut rng = avex_nn::derived_rng(cfg.train.seed, i as u64);
                    records.push(run_episode(&trainer.system, s, &policy, None, &opts, &mut rng)?.record);
                }
                let gm = accumulate_glimpse_map(&records, cfg.dataset.canvas, cfg.dataset.canvas)?;
                export_glimpse_map(&gm, &out.join("maps"))?;
                println!("glimpse maps over {} episodes written", gm.records);
            }
            println!("visualisation written to {}", out.display());
            Ok(())
        }
        Command::Plan { common } => {
            let cfg = common.config()?;
            println!("config hash {:016x}", cfg.hash());
            println!("{}", cfg.to_toml_string());
            for epoch in 0..cfg.train.epochs.min(12) {
                let phase = schedule(epoch, cfg.train.warmup_agent_epochs, cfg.train.epochs)
                    .map_err(|e| anyhow::anyhow!(e.to_string()))?;
                println!("epoch {epoch}: {phase:?}");
            }
            Ok(())
        }
    }
}

fn mark(present: bool) -> String {
    if present { "yes".into() } else { "mean".into() }
}
