//! End-to-end smoke test of the command-line interface: pretrain a tiny
//! system, evaluate it in both modes, run the ablation table, and export a
//! visualisation, all through the binary.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_avex")
}

fn tiny_toml() -> String {
    r#"
[task]
kind = "classification"
classes = 10

[camera]
d_cam = 16
d_patch = 16

[encoder]
blocks = 2
embed = 32
heads = 4
d_patch = 16
channels = 3
pos_freqs = 4
mlp_ratio = 2

[decoder]
blocks = 1
width = 32
heads = 4
d_patch = 16
scene_side = 64
channels = 3
pos_freqs = 4

[agent]
hidden = 32
pool_heads = 4
d_patch = 16
channels = 3
latent_dim = 32
gamma = 0.99
tau = 0.005
lr = 0.001
batch_size = 8
replay_capacity = 512
target_entropy = -3.0
auto_alpha = true
init_alpha = 0.2
grad_clip = 1.0

[dataset]
kind = "synthetic"
canvas = 64
n_train = 12
n_val = 4
n_test = 4
digit_min_side = 26
digit_max_side = 40
seed = 7
augment = false

[train]
epochs = 2
warmup_agent_epochs = 1
pretrain_epochs = 1
pretrain_glimpse_count = 3
backbone_lr = 0.001
agent_lr = 0.001
weight_decay = 0.0001
cosine_floor = 1e-8
grad_clip = 1.0
max_steps = 2
stop_threshold = 0.85
seed = 0
episodes_per_epoch = 4
sac_updates_per_epoch = 2
scene_batch = 4
patience = 10
fresh_replay_per_agent_epoch = false
"#
    .to_string()
}

fn run(args: &[&str]) -> (bool, String) {
    let out = Command::new(bin()).args(args).output().expect("binary runs");
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    (out.status.success(), text)
}

#[test]
fn cli_pipeline_smoke() {
    let dir = std::env::temp_dir().join(format!("avex-cli-test-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg_path: PathBuf = dir.join("tiny.toml");
    std::fs::write(&cfg_path, tiny_toml()).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let ckpt = dir.join("pre.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();

    let (ok, text) = run(&["plan", "--config", cfg]);
    assert!(ok, "plan failed: {text}");
    assert!(text.contains("epoch 0: Agent"), "schedule in plan output: {text}");

    let (ok, text) = run(&["pretrain", "--config", cfg, "--out", ckpt_s]);
    assert!(ok, "pretrain failed: {text}");
    assert!(ckpt.exists());

    let train_dir = dir.join("run");
    let (ok, text) = run(&[
        "train",
        "--config",
        cfg,
        "--from",
        ckpt_s,
        "--out",
        train_dir.to_str().unwrap(),
    ]);
    assert!(ok, "train failed: {text}");
    assert!(train_dir.join("final.ckpt").exists());
    assert!(train_dir.join("runlog.csv").exists());
    assert!(train_dir.join("runlog.json").exists());

    let final_ckpt = train_dir.join("final.ckpt");
    let eval_dir = dir.join("eval");
    let (ok, text) = run(&[
        "eval",
        "--checkpoint",
        final_ckpt.to_str().unwrap(),
        "--mode",
        "stopping",
        "--theta",
        "0.85",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(ok, "eval failed: {text}");
    assert!(text.contains("accuracy"), "metrics json printed: {text}");
    assert!(eval_dir.join("metrics.csv").exists());
    assert!(eval_dir.join("metrics.json").exists());

    let (ok, text) = run(&["eval", "--checkpoint", final_ckpt.to_str().unwrap(), "--mode", "bogus"]);
    assert!(!ok, "unknown mode must exit nonzero: {text}");

    let table = dir.join("ablation.csv");
    let (ok, text) = run(&[
        "ablate",
        "--checkpoint",
        final_ckpt.to_str().unwrap(),
        "--out",
        table.to_str().unwrap(),
    ]);
    assert!(ok, "ablate failed: {text}");
    let csv = std::fs::read_to_string(&table).unwrap();
    assert_eq!(csv.lines().count(), 6, "header plus five rows: {csv}");

    let vis = dir.join("vis");
    let (ok, text) = run(&[
        "visualize",
        "--checkpoint",
        final_ckpt.to_str().unwrap(),
        "--scene",
        "0",
        "--interpolated",
        "--embed-pixels",
        "--map",
        "--out",
        vis.to_str().unwrap(),
    ]);
    assert!(ok, "visualize failed: {text}");
    assert!(vis.join("visible.png").exists());
    assert!(vis.join("maps").join("map_overall_raw.png").exists());
    let record_json = std::fs::read_to_string(vis.join("record.json")).unwrap();
    let record = avex::scene::EpisodeRecord::from_json(&record_json).unwrap();
    let pixels = record.decode_pixels().unwrap().expect("embedded pixels");
    assert_eq!(pixels.len(), record.regions.len());

    let _ = std::fs::remove_dir_all(&dir);
}
