//! Whole-system checkpoints: config, every parameter, and optimizer moments
//! in one file. Loading refuses config mismatches; save/load round trips are
//! bit-exact.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use avex_nn::serialize::{read_tensors, write_tensors};
use avex_nn::{Arr, HasParams};

use crate::config::AvexConfig;
use crate::episode::System;
use crate::error::{io_err, AvexError, Result};
use crate::train::Trainer;

const MAGIC: &[u8; 4] = b"AVCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(f);
    w.write_all(MAGIC).map_err(io_err(path))?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err(path))?;
    let cfg_json = serde_json::to_vec(&trainer.system.cfg)?;
    w.write_all(&(cfg_json.len() as u32).to_le_bytes()).map_err(io_err(path))?;
    w.write_all(&cfg_json).map_err(io_err(path))?;

    let mut tensors: Vec<(String, Arr)> = Vec::new();
    for p in trainer.system.params() {
        tensors.push((p.name().to_string(), p.value().clone()));
    }
    let (bb_step, bb_state) = trainer.backbone_optim_state();
    push_optim(&mut tensors, "opt_backbone", bb_step, &bb_state);
    let sac = trainer.system.agent.optim_state();
    push_optim(&mut tensors, "opt_actor", sac.actor_step, &sac.actor);
    push_optim(&mut tensors, "opt_critic", sac.critic_step, &sac.critic);
    push_optim(&mut tensors, "opt_alpha", sac.alpha_step, &sac.alpha);

    write_tensors(&mut w, tensors.iter().map(|(n, a)| (n.as_str(), a)))?;
    Ok(())
}

fn push_optim(out: &mut Vec<(String, Arr)>, prefix: &str, step: u64, state: &[(String, Arr, Arr)]) {
    out.push((
        format!("{prefix}/__step__"),
        Arr::from_elem(ndarray::IxDyn(&[1]), step as f64),
    ));
    for (name, m, v) in state {
        out.push((format!("{prefix}/m/{name}"), m.clone()));
        out.push((format!("{prefix}/v/{name}"), v.clone()));
    }
}

fn pull_optim(tensors: &HashMap<String, Arr>, prefix: &str) -> (u64, Vec<(String, Arr, Arr)>) {
    let step = tensors
        .get(&format!("{prefix}/__step__"))
        .map(|a| a[[0]] as u64)
        .unwrap_or(0);
    let mut state = Vec::new();
    let m_prefix = format!("{prefix}/m/");
    for (k, m) in tensors {
        if let Some(name) = k.strip_prefix(&m_prefix) {
            if let Some(v) = tensors.get(&format!("{prefix}/v/{name}")) {
                state.push((name.to_string(), m.clone(), v.clone()));
            }
        }
    }
    state.sort_by(|a, b| a.0.cmp(&b.0));
    (step, state)
}

/// Load a checkpoint into a freshly built trainer. When `expected` is given
/// the stored config must match it exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&AvexConfig>) -> Result<Trainer> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut r = std::io::BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(AvexError::CheckpointMismatch("bad magic".into()));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb).map_err(io_err(path))?;
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        return Err(AvexError::CheckpointMismatch(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut lb = [0u8; 4];
    r.read_exact(&mut lb).map_err(io_err(path))?;
    let len = u32::from_le_bytes(lb) as usize;
    let mut cfg_bytes = vec![0u8; len];
    r.read_exact(&mut cfg_bytes).map_err(io_err(path))?;
    let cfg: AvexConfig = serde_json::from_slice(&cfg_bytes)?;
    if let Some(exp) = expected {
        if *exp != cfg {
            return Err(AvexError::CheckpointMismatch(
                "stored config does not match the requested one".into(),
            ));
        }
    }

    let tensors: HashMap<String, Arr> = read_tensors(&mut r)?.into_iter().collect();

    let mut rng = avex_nn::seeded_rng(0);
    let system = System::new(&mut rng, &cfg)?;
    let mut trainer = Trainer::new(system);

    for p in trainer.system.params_mut() {
        let stored = tensors.get(p.name()).ok_or_else(|| {
            AvexError::CheckpointMismatch(format!("missing tensor {}", p.name()))
        })?;
        if stored.shape() != p.shape() {
            return Err(AvexError::CheckpointMismatch(format!(
                "tensor {} has shape {:?}, expected {:?}",
                p.name(),
                stored.shape(),
                p.shape()
            )));
        }
        p.assign(stored.clone());
    }

    let (bb_step, bb_state) = pull_optim(&tensors, "opt_backbone");
    trainer.restore_backbone_optim(bb_step, &bb_state);
    let (a_step, a_state) = pull_optim(&tensors, "opt_actor");
    let (c_step, c_state) = pull_optim(&tensors, "opt_critic");
    let (al_step, al_state) = pull_optim(&tensors, "opt_alpha");
    trainer.system.agent.restore_optim_state(&crate::agent::SacOptimState {
        actor_step: a_step,
        critic_step: c_step,
        alpha_step: al_step,
        actor: a_state,
        critic: c_state,
        alpha: al_state,
    });
    Ok(trainer)
}
