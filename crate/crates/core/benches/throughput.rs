//! Parallel vs. sequential throughput on the data-parallel inner loops:
//! episode rollouts, evaluation sweeps, pretraining gradient batches, and
//! glimpse-map accumulation. The runtime switch in `avex::par` lets one
//! binary measure both paths; results are bit-identical either way.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use avex::baselines::BaselinePolicy;
use avex::config::AvexConfig;
use avex::dataset::synthetic_dataset;
use avex::episode::{run_episode, EpisodeOptions, LearnedPolicy, System};
use avex::par;
use avex::train::{evaluate_policy, Trainer};
use avex::vis::accumulate_glimpse_map;

fn bench_config() -> AvexConfig {
    let mut cfg = AvexConfig::desk();
    cfg.encoder.blocks = 2;
    cfg.encoder.embed = 64;
    cfg.encoder.heads = 4;
    cfg.encoder.pos_freqs = 4;
    cfg.encoder.mlp_ratio = 2;
    cfg.agent.hidden = 64;
    cfg.agent.pool_heads = 4;
    cfg.agent.latent_dim = 64;
    cfg.dataset.n_train = 16;
    cfg.dataset.n_val = 4;
    cfg.dataset.n_test = 16;
    cfg.train.max_steps = 3;
    cfg.train.pretrain_glimpse_count = 4;
    cfg.train.scene_batch = 8;
    cfg
}

fn rollout_batch(system: &System, scenes: &[avex::scene::SceneImage]) -> f64 {
    let opts = EpisodeOptions::fixed_budget(system.cfg.train.max_steps);
    let policy = LearnedPolicy {
        agent: &system.agent,
        deterministic: false,
    };
    let outcomes = par::map_indexed(scenes.len(), |i| {
        let mut rng = avex_nn::derived_rng(17, i as u64);
        run_episode(system, &scenes[i], &policy, None, &opts, &mut rng).expect("episode")
    });
    outcomes.iter().map(|o| o.record.rewards.iter().sum::<f64>()).sum()
}

fn bench_modes(c: &mut Criterion) {
    let cfg = bench_config();
    let data = synthetic_dataset(&cfg.dataset);
    let mut rng = avex_nn::seeded_rng(17);
    let system = System::new(&mut rng, &cfg).expect("system");

    let mut group = c.benchmark_group("rollout_batch");
    group.sample_size(10);
    for (label, parallel) in [("parallel", true), ("sequential", false)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &parallel, |b, &p| {
            par::set_parallel(p);
            b.iter(|| rollout_batch(&system, &data.test));
        });
    }
    group.finish();
    par::set_parallel(true);

    let mut group = c.benchmark_group("eval_sweep");
    group.sample_size(10);
    for (label, parallel) in [("parallel", true), ("sequential", false)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &parallel, |b, &p| {
            par::set_parallel(p);
            b.iter(|| {
                evaluate_policy(
                    &system,
                    &data.test,
                    &BaselinePolicy::random_uniform(),
                    None,
                    None,
                    None,
                    3,
                )
                .expect("eval")
            });
        });
    }
    group.finish();
    par::set_parallel(true);

    let mut pretrain_cfg = cfg.clone();
    pretrain_cfg.train.pretrain_epochs = 1;
    let mut group = c.benchmark_group("pretrain_batch");
    group.sample_size(10);
    for (label, parallel) in [("parallel", true), ("sequential", false)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &parallel, |b, &p| {
            par::set_parallel(p);
            b.iter(|| {
                let mut rng2 = avex_nn::seeded_rng(23);
                let fresh = System::new(&mut rng2, &pretrain_cfg).expect("system");
                let mut trainer = Trainer::new(fresh);
                trainer.pretrain(&data).expect("pretrain")
            });
        });
    }
    group.finish();
    par::set_parallel(true);

    // map accumulation over prerecorded episodes
    let opts = EpisodeOptions::fixed_budget(cfg.train.max_steps);
    let records: Vec<_> = data
        .test
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = avex_nn::derived_rng(29, i as u64);
            run_episode(
                &system,
                s,
                &BaselinePolicy::random_uniform(),
                None,
                &opts,
                &mut rng,
            )
            .expect("episode")
            .record
        })
        .collect();
    let mut group = c.benchmark_group("glimpse_map");
    group.sample_size(20);
    group.bench_function("accumulate", |b| {
        b.iter(|| accumulate_glimpse_map(&records, cfg.dataset.canvas, cfg.dataset.canvas).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_modes);
criterion_main!(benches);
