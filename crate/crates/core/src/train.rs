//! Training orchestration: random-glimpse pretraining, the alternating
//! backbone/agent schedule, evaluation sweeps, ablation tables, and run
//! logging.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use avex_nn::{cosine_lr, derived_rng, AdamW, AdamWConfig, HasParams, Param};

use crate::agent::{AblationSpec, ComponentMeans};
use crate::backbone::{bundle_from_captures, PatchCoord};
use crate::baselines::BaselinePolicy;
use crate::dataset::{augment_scene, SceneDataset};
use crate::episode::{run_episode, EpisodeOptions, EpisodeOutcome, LearnedPolicy, Policy, System};
use crate::error::{io_err, AvexError, Result};
use crate::par;
use crate::scene::{capture_glimpse, GlimpseAction, SceneImage};

/// Which component trains this epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Agent,
    Backbone,
}

/// Warm-up epochs train the agent only; afterwards the backbone leads a
/// strict alternation.
pub fn schedule(epoch: usize, warmup_agent_epochs: usize, epochs: usize) -> Result<Phase> {
    if epoch >= epochs {
        return Err(AvexError::Config(format!(
            "epoch {epoch} out of range for {epochs} epochs"
        )));
    }
    if epoch < warmup_agent_epochs {
        Ok(Phase::Agent)
    } else if (epoch - warmup_agent_epochs) % 2 == 0 {
        Ok(Phase::Backbone)
    } else {
        Ok(Phase::Agent)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum EvalMode {
    FixedBudget,
    Stopping,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalMetrics {
    pub n: usize,
    pub accuracy: Option<f64>,
    pub rmse: Option<f64>,
    pub mean_steps: f64,
    pub mean_pixel_pct: f64,
    pub mean_top_prob: Option<f64>,
}

impl EvalMetrics {
    /// Higher-is-better scalar for early stopping.
    pub fn score(&self) -> f64 {
        match (self.accuracy, self.rmse) {
            (Some(a), _) => a,
            (None, Some(r)) => -r,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub mean_reward: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub val_score: f64,
    pub wall_s: f64,
}

/// Append-only run log with a config hash; serializable as JSON or CSV.
#[derive(Default, Serialize)]
pub struct RunLog {
    pub config_hash: String,
    pub rows: Vec<EpochRow>,
}

impl RunLog {
    pub fn push(&mut self, row: EpochRow) {
        self.rows.push(row);
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| AvexError::Dataset(format!("csv open: {e}")))?;
        w.write_record([
            "epoch", "phase", "train_loss", "mean_reward", "critic_loss", "actor_loss", "alpha",
            "val_score", "wall_s",
        ])
        .map_err(|e| AvexError::Dataset(format!("csv write: {e}")))?;
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                format!("{:?}", r.phase).to_lowercase(),
                r.train_loss.to_string(),
                r.mean_reward.to_string(),
                r.critic_loss.to_string(),
                r.actor_loss.to_string(),
                r.alpha.to_string(),
                r.val_score.to_string(),
                r.wall_s.to_string(),
            ])
            .map_err(|e| AvexError::Dataset(format!("csv write: {e}")))?;
        }
        w.flush().map_err(|e| AvexError::Dataset(format!("csv flush: {e}")))?;
        Ok(())
    }
}

pub struct Trainer {
    pub system: System,
    pub log: RunLog,
    opt_backbone: AdamW,
    backbone_step: u64,
    backbone_total_steps: u64,
    pretrain_step: u64,
    pretrain_total_steps: u64,
}

impl Trainer {
    pub fn new(system: System) -> Self {
        let cfg = &system.cfg.train;
        let opt_backbone = AdamW::new(AdamWConfig {
            lr: cfg.backbone_lr,
            weight_decay: cfg.weight_decay,
            clip_global_norm: Some(cfg.grad_clip),
            ..Default::default()
        });
        // half of the post-warmup epochs are backbone epochs
        let backbone_epochs =
            (cfg.epochs - cfg.warmup_agent_epochs).div_ceil(2).max(1) as u64;
        let steps_per_epoch = (cfg.episodes_per_epoch as u64).div_ceil(cfg.scene_batch as u64);
        let config_hash = format!("{:016x}", system.cfg.hash());
        Trainer {
            backbone_total_steps: backbone_epochs * steps_per_epoch,
            pretrain_total_steps: 0,
            backbone_step: 0,
            pretrain_step: 0,
            opt_backbone,
            system,
            log: RunLog {
                config_hash,
                rows: Vec::new(),
            },
        }
    }

    pub fn backbone_lr_at(&self, step: u64, total: u64) -> f64 {
        cosine_lr(
            self.system.cfg.train.backbone_lr,
            self.system.cfg.train.cosine_floor,
            step,
            total.max(1),
        ) / self.system.cfg.train.backbone_lr
    }

    fn backbone_params_mut(system: &mut System) -> Vec<&mut Param> {
        let mut ps = system.encoder.params_mut();
        if let Some(c) = &mut system.classifier {
            ps.extend(c.params_mut());
        }
        if let Some(d) = &mut system.decoder {
            ps.extend(d.params_mut());
        }
        ps
    }

    /// Train the backbone on uniformly random glimpse bundles; the agent is
    /// untouched. Epoch 0 is a no-op that leaves parameters at init.
    pub fn pretrain(&mut self, data: &SceneDataset) -> Result<f64> {
        let cfg = self.system.cfg.clone();
        let n_glimpses = cfg.train.pretrain_glimpse_count;
        let batch = cfg.train.scene_batch.max(1);
        let n_batches = data.train.len().div_ceil(batch);
        self.pretrain_total_steps = (cfg.train.pretrain_epochs * n_batches) as u64;
        let mut last_loss = f64::NAN;
        for epoch in 0..cfg.train.pretrain_epochs {
            let mut order: Vec<usize> = (0..data.train.len()).collect();
            let mut shuffle_rng = derived_rng(cfg.train.seed, 1_000_000 + epoch as u64);
            for i in (1..order.len()).rev() {
                order.swap(i, shuffle_rng.random_range(0..=i));
            }
            let mut epoch_loss = 0.0;
            for (bi, chunk) in order.chunks(batch).enumerate() {
                // per-scene random glimpses via derived streams
                let prepared: Vec<Result<(SceneImage, crate::backbone::PatchBundle)>> =
                    par::map_slice(chunk, |&si| {
                        let mut rng = derived_rng(
                            cfg.train.seed,
                            2_000_000 + (epoch * data.train.len() + si) as u64,
                        );
                        let scene = if cfg.dataset.augment {
                            augment_scene(&data.train[si], &mut rng)
                        } else {
                            data.train[si].clone()
                        };
                        let mut captures = Vec::with_capacity(n_glimpses);
                        for t in 1..=n_glimpses {
                            let a = GlimpseAction::new(rng.random(), rng.random(), rng.random());
                            captures.push(capture_glimpse(&scene, a, &cfg.camera, t)?);
                        }
                        let bundle = bundle_from_captures(
                            &captures,
                            &cfg.camera,
                            scene.height(),
                            scene.width(),
                        );
                        Ok((scene, bundle))
                    });
                let mut scenes_bundles = Vec::with_capacity(prepared.len());
                for p in prepared {
                    scenes_bundles.push(p?);
                }
                let system = &self.system;
                let (loss, grads) = par::batch_grads(scenes_bundles.len(), |i| {
                    let (scene, bundle) = &scenes_bundles[i];
                    let latents = system.encoder.encode(bundle)?;
                    Ok(system.task_loss_var(&latents, scene)?.0)
                })?;
                epoch_loss += loss;
                let lr_scale = self.backbone_lr_at(self.pretrain_step, self.pretrain_total_steps);
                self.opt_backbone.step(
                    &mut Self::backbone_params_mut(&mut self.system),
                    &grads,
                    lr_scale,
                );
                self.pretrain_step += 1;
                let _ = bi;
            }
            last_loss = epoch_loss / n_batches as f64;
        }
        Ok(last_loss)
    }

    /// Mean task loss over held-out scenes under random glimpse bundles;
    /// used to verify pretraining helped.
    pub fn random_glimpse_loss(&self, scenes: &[SceneImage], n_glimpses: usize, seed: u64) -> Result<f64> {
        let cfg = &self.system.cfg;
        let system = &self.system;
        let results: Vec<Result<f64>> = par::map_indexed(scenes.len(), |i| {
            let mut rng = derived_rng(seed, i as u64);
            let mut captures = Vec::with_capacity(n_glimpses);
            for t in 1..=n_glimpses {
                let a = GlimpseAction::new(rng.random(), rng.random(), rng.random());
                captures.push(capture_glimpse(&scenes[i], a, &cfg.camera, t)?);
            }
            let bundle =
                bundle_from_captures(&captures, &cfg.camera, scenes[i].height(), scenes[i].width());
            let latents = system.encoder.encode(&bundle)?;
            Ok(system.task_loss(&latents, &scenes[i])?.0)
        });
        let mut acc = 0.0;
        for r in results {
            acc += r?;
        }
        Ok(acc / scenes.len().max(1) as f64)
    }

    /// One epoch of the alternating schedule. Backbone epochs roll out with
    /// the frozen stochastic policy and optimize the task loss on the final
    /// step only; agent epochs collect rewards into replay and run SAC
    /// updates with the backbone frozen.
    pub fn train_epoch(&mut self, phase: Phase, data: &SceneDataset, epoch: usize) -> Result<EpochRow> {
        let started = Instant::now();
        let cfg = self.system.cfg.clone();
        let n_episodes = cfg.train.episodes_per_epoch;
        let t_budget = cfg.train.max_steps;

        // choose scenes for this epoch
        let mut pick_rng = derived_rng(cfg.train.seed, 3_000_000 + epoch as u64);
        let scene_idx: Vec<usize> = (0..n_episodes)
            .map(|_| pick_rng.random_range(0..data.train.len()))
            .collect();

        let collect_transitions = phase == Phase::Agent;
        let opts = EpisodeOptions {
            max_steps: t_budget,
            stop_threshold: None,
            collect_transitions,
            ablation: None,
        };
        let system = &self.system;
        let outcomes: Vec<Result<EpisodeOutcome>> = par::map_indexed(n_episodes, |i| {
            let mut rng = derived_rng(cfg.train.seed, 4_000_000 + (epoch * n_episodes + i) as u64);
            let policy = LearnedPolicy {
                agent: &system.agent,
                deterministic: false,
            };
            run_episode(system, &data.train[scene_idx[i]], &policy, None, &opts, &mut rng)
        });
        let mut episodes = Vec::with_capacity(n_episodes);
        for o in outcomes {
            episodes.push(o?);
        }
        let mean_reward = episodes
            .iter()
            .map(|e| e.record.rewards.iter().sum::<f64>())
            .sum::<f64>()
            / episodes.len().max(1) as f64;

        let mut train_loss = 0.0;
        let mut critic_loss = 0.0;
        let mut actor_loss = 0.0;
        let mut alpha = self.system.agent.alpha();

        match phase {
            Phase::Backbone => {
                let batch = cfg.train.scene_batch.max(1);
                let mut n_steps = 0usize;
                for chunk in episodes.chunks(batch) {
                    let system = &self.system;
                    let (loss, grads) = par::batch_grads(chunk.len(), |i| {
                        let latents = system.encoder.encode(&chunk[i].final_bundle)?;
                        let scene = data
                            .train
                            .iter()
                            .find(|s| s.id == chunk[i].record.scene_id)
                            .expect("scene exists");
                        Ok(system.task_loss_var(&latents, scene)?.0)
                    })?;
                    train_loss += loss;
                    let lr_scale =
                        self.backbone_lr_at(self.backbone_step, self.backbone_total_steps);
                    self.opt_backbone.step(
                        &mut Self::backbone_params_mut(&mut self.system),
                        &grads,
                        lr_scale,
                    );
                    self.backbone_step += 1;
                    n_steps += 1;
                }
                train_loss /= n_steps.max(1) as f64;
            }
            Phase::Agent => {
                if cfg.train.fresh_replay_per_agent_epoch {
                    self.system.agent.replay.clear();
                }
                for e in episodes {
                    for t in e.transitions {
                        self.system.agent.replay.push(t);
                    }
                }
                let mut update_rng = derived_rng(cfg.train.seed, 5_000_000 + epoch as u64);
                let batch_size = cfg.agent.batch_size;
                let mut n_updates = 0usize;
                for _ in 0..cfg.train.sac_updates_per_epoch {
                    if self.system.agent.replay.len() < batch_size.min(32) {
                        break;
                    }
                    let agent = &mut self.system.agent;
                    let batch = agent.replay.sample_cloned(&mut update_rng, batch_size);
                    let stats = agent.update(&batch, &mut update_rng)?;
                    critic_loss += stats.critic_loss;
                    actor_loss += stats.actor_loss;
                    alpha = stats.alpha;
                    n_updates += 1;
                }
                critic_loss /= n_updates.max(1) as f64;
                actor_loss /= n_updates.max(1) as f64;
            }
        }

        Ok(EpochRow {
            epoch,
            phase,
            train_loss,
            mean_reward,
            critic_loss,
            actor_loss,
            alpha,
            val_score: f64::NAN,
            wall_s: started.elapsed().as_secs_f64(),
        })
    }

    /// Full training run with validation-based early stopping.
    pub fn fit(&mut self, data: &SceneDataset) -> Result<()> {
        let cfg = self.system.cfg.clone();
        let mut best = f64::NEG_INFINITY;
        let mut since_best = 0usize;
        for epoch in 0..cfg.train.epochs {
            let phase = schedule(epoch, cfg.train.warmup_agent_epochs, cfg.train.epochs)?;
            let mut row = self.train_epoch(phase, data, epoch)?;
            let val = self.evaluate(&data.val, EvalMode::FixedBudget, cfg.train.seed)?;
            row.val_score = val.score();
            self.log.push(row);
            if val.score() > best + 1e-12 {
                best = val.score();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.train.patience {
                    break;
                }
            }
        }
        Ok(())
    }

    /// Evaluate the deterministic learned policy over scenes; fixed budget
    /// or confidence stopping.
    pub fn evaluate(&self, scenes: &[SceneImage], mode: EvalMode, seed: u64) -> Result<EvalMetrics> {
        let threshold = match mode {
            EvalMode::FixedBudget => None,
            EvalMode::Stopping => Some(self.system.cfg.train.stop_threshold),
        };
        let policy = LearnedPolicy {
            agent: &self.system.agent,
            deterministic: true,
        };
        evaluate_policy(&self.system, scenes, &policy, threshold, None, None, seed)
    }

    /// Dataset-mean state components for the mean-replacement ablations.
    pub fn component_means(&self, scenes: &[SceneImage], seed: u64) -> Result<ComponentMeans> {
        let cfg = &self.system.cfg;
        let system = &self.system;
        let opts = EpisodeOptions {
            max_steps: cfg.train.max_steps,
            stop_threshold: None,
            collect_transitions: true,
            ablation: None,
        };
        let outcomes: Vec<Result<EpisodeOutcome>> = par::map_indexed(scenes.len(), |i| {
            let mut rng = derived_rng(seed, 7_000_000 + i as u64);
            let policy = LearnedPolicy {
                agent: &system.agent,
                deterministic: true,
            };
            run_episode(system, &scenes[i], &policy, None, &opts, &mut rng)
        });
        let p = cfg.agent.d_patch;
        let c = cfg.agent.channels;
        let e = cfg.agent.latent_dim;
        let mut patch_mean = crate::imaging::Pixels::zeros((p, p, c));
        let mut coord_acc = [0.0f64; 3];
        let mut imp_acc = 0.0;
        let mut latent_mean = ndarray::Array1::<f64>::zeros(e);
        let mut n_patches = 0usize;
        for o in outcomes {
            let o = o?;
            // the final transition's next_state covers the full history
            if let Some(last) = o.transitions.last() {
                let state = last.next_state.to_state(e);
                for (i, patch) in state.patches.iter().enumerate() {
                    patch_mean += patch;
                    coord_acc[0] += state.coords[i].cx;
                    coord_acc[1] += state.coords[i].cy;
                    coord_acc[2] += state.coords[i].s;
                    imp_acc += state.importance[i];
                    latent_mean += &state.latents.row(i);
                    n_patches += 1;
                }
            }
        }
        let nf = n_patches.max(1) as f64;
        patch_mean.mapv_inplace(|v| v / nf);
        latent_mean.mapv_inplace(|v| v / nf);
        Ok(ComponentMeans {
            patch: patch_mean,
            coord: PatchCoord {
                cx: coord_acc[0] / nf,
                cy: coord_acc[1] / nf,
                s: (coord_acc[2] / nf).clamp(1e-6, 1.0),
            },
            importance: imp_acc / nf,
            latent: latent_mean,
        })
    }

    /// The mean-replacement study: evaluate with each component of the state
    /// replaced by its dataset mean, one at a time.
    pub fn ablation_table(
        &self,
        scenes: &[SceneImage],
        seed: u64,
    ) -> Result<Vec<(AblationSpec, EvalMetrics)>> {
        let means = self.component_means(scenes, seed)?;
        let mut out = Vec::new();
        let specs = [
            AblationSpec::default(),
            AblationSpec { patches: true, ..Default::default() },
            AblationSpec { coords: true, ..Default::default() },
            AblationSpec { importance: true, ..Default::default() },
            AblationSpec { latents: true, ..Default::default() },
        ];
        let policy = LearnedPolicy {
            agent: &self.system.agent,
            deterministic: true,
        };
        for spec in specs {
            let metrics = evaluate_policy(
                &self.system,
                scenes,
                &policy,
                None,
                Some(spec.clone()),
                Some(&means),
                seed,
            )?;
            out.push((spec, metrics));
        }
        Ok(out)
    }
}

/// Evaluate any policy over a scene list (ordered, parallel, reproducible).
pub fn evaluate_policy(
    system: &System,
    scenes: &[SceneImage],
    policy: &dyn Policy,
    stop_threshold: Option<f64>,
    ablation: Option<AblationSpec>,
    means: Option<&ComponentMeans>,
    seed: u64,
) -> Result<EvalMetrics> {
    let opts = EpisodeOptions {
        max_steps: system.cfg.train.max_steps,
        stop_threshold,
        collect_transitions: false,
        ablation,
    };
    let outcomes: Vec<Result<EpisodeOutcome>> = par::map_indexed(scenes.len(), |i| {
        let mut rng = derived_rng(seed, 6_000_000 + i as u64);
        run_episode(system, &scenes[i], policy, means, &opts, &mut rng)
    });
    let mut n = 0usize;
    let mut correct = 0usize;
    let mut have_labels = false;
    let mut rmse_acc = 0.0;
    let mut have_rmse = false;
    let mut steps_acc = 0.0;
    let mut pix_acc = 0.0;
    let mut prob_acc = 0.0;
    let mut have_prob = false;
    for o in outcomes {
        let o = o?;
        n += 1;
        steps_acc += o.steps as f64;
        pix_acc += o.pixel_pct;
        if let Some(c) = o.correct {
            have_labels = true;
            if c {
                correct += 1;
            }
        }
        if let Some(r) = o.final_rmse {
            have_rmse = true;
            rmse_acc += r;
        }
        if let Some((_, p)) = o.predicted {
            have_prob = true;
            prob_acc += p;
        }
    }
    let nf = n.max(1) as f64;
    Ok(EvalMetrics {
        n,
        accuracy: have_labels.then(|| correct as f64 / nf),
        rmse: have_rmse.then(|| rmse_acc / nf),
        mean_steps: steps_acc / nf,
        mean_pixel_pct: pix_acc / nf,
        mean_top_prob: have_prob.then(|| prob_acc / nf),
    })
}

/// Evaluate the random-uniform baseline at the same budget.
pub fn evaluate_random_baseline(system: &System, scenes: &[SceneImage], seed: u64) -> Result<EvalMetrics> {
    evaluate_policy(
        system,
        scenes,
        &BaselinePolicy::random_uniform(),
        None,
        None,
        None,
        seed,
    )
}

/// Stable hash of every parameter byte, for phase-isolation audits.
pub fn params_hash(model: &dyn HasParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in model.params() {
        for &v in p.value().iter() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

impl HasParams for System {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.encoder.visit_params(f);
        if let Some(c) = &self.classifier {
            c.visit_params(f);
        }
        if let Some(d) = &self.decoder {
            d.visit_params(f);
        }
        self.agent.visit_params(f);
    }
    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.encoder.visit_params_mut(f);
        if let Some(c) = &mut self.classifier {
            c.visit_params_mut(f);
        }
        if let Some(d) = &mut self.decoder {
            d.visit_params_mut(f);
        }
        self.agent.visit_params_mut(f);
    }
}

impl Trainer {
    pub fn backbone_optim_state(&self) -> (u64, Vec<(String, avex_nn::Arr, avex_nn::Arr)>) {
        let mut ps: Vec<&Param> = self.system.encoder.params();
        if let Some(c) = &self.system.classifier {
            ps.extend(c.params());
        }
        if let Some(d) = &self.system.decoder {
            ps.extend(d.params());
        }
        (self.opt_backbone.steps_taken(), self.opt_backbone.export_state(&ps))
    }

    pub fn restore_backbone_optim(&mut self, step: u64, state: &[(String, avex_nn::Arr, avex_nn::Arr)]) {
        let mut ps: Vec<&Param> = self.system.encoder.params();
        if let Some(c) = &self.system.classifier {
            ps.extend(c.params());
        }
        if let Some(d) = &self.system.decoder {
            ps.extend(d.params());
        }
        self.opt_backbone.import_state(&ps, state, step);
    }
}
