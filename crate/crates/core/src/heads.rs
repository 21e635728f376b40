//! Task heads: a linear classifier on the class token and a dense decoder
//! that reconstructs the whole scene from a full grid of mask tokens, plus
//! the task losses.

use ndarray::Array1;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use avex_nn::{concat_cols, concat_rows, HasParams, LayerNorm, Linear, Mlp, MultiHeadAttention, Param, Var};

use crate::backbone::{LatentBundle, PatchCoord, PositionEncoder};
use crate::error::{AvexError, Result};
use crate::imaging::Pixels;
use crate::scene::SceneImage;

/// Linear classification head over the class-token latent.
pub struct Classifier {
    pub proj: Linear,
}

impl Classifier {
    pub fn new(rng: &mut ChaCha12Rng, embed: usize, classes: usize) -> Self {
        Classifier {
            proj: Linear::new(rng, "cls_head", embed, classes),
        }
    }

    /// `[1, embed] -> [1, classes]`
    pub fn forward(&self, cls_latent: &Var) -> Var {
        self.proj.forward(cls_latent)
    }

    pub fn classes(&self) -> usize {
        self.proj.out_features()
    }

    pub fn probs(&self, cls_latent: &Var) -> Vec<f64> {
        let logits = self.forward(cls_latent);
        softmax_slice(logits.data().iter().cloned().collect::<Vec<_>>().as_slice())
    }
}

impl HasParams for Classifier {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.proj.visit_params(f);
    }
    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.proj.visit_params_mut(f);
    }
}

pub fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / z).collect()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct DecoderConfig {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub d_patch: usize,
    /// Output resolution (square); the query grid is `scene_side / d_patch`
    /// cells on a side.
    pub scene_side: usize,
    pub channels: usize,
    pub pos_freqs: usize,
}

impl DecoderConfig {
    pub fn desk(d_patch: usize, scene_side: usize) -> Self {
        DecoderConfig {
            blocks: 2,
            width: 128,
            heads: 4,
            d_patch,
            scene_side,
            channels: 3,
            pos_freqs: 8,
        }
    }

    /// Full-scale configuration.
    pub fn full(d_patch: usize, scene_side: usize) -> Self {
        DecoderConfig {
            blocks: 8,
            width: 512,
            heads: 8,
            d_patch,
            scene_side,
            channels: 3,
            pos_freqs: 16,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.scene_side / self.d_patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene_side % self.d_patch != 0 {
            return Err(AvexError::Config(format!(
                "scene side {} not a multiple of d_patch {}",
                self.scene_side, self.d_patch
            )));
        }
        if self.width % self.heads != 0 {
            return Err(AvexError::Config("decoder width must divide by heads".into()));
        }
        Ok(())
    }
}

/// Coordinates of the full query grid covering `[0,1]^2` at patch
/// granularity, with no gaps or overlaps.
pub fn dense_query_grid(cfg: &DecoderConfig) -> Vec<PatchCoord> {
    let g = cfg.grid_side();
    let mut coords = Vec::with_capacity(g * g);
    for r in 0..g {
        for c in 0..g {
            coords.push(PatchCoord {
                cx: (c as f64 + 0.5) / g as f64,
                cy: (r as f64 + 0.5) / g as f64,
                s: 1.0 / g as f64,
            });
        }
    }
    coords
}

struct DecBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

/// Masked-autoencoder-style decoder: encoder tokens plus one mask token per
/// grid cell go through transformer blocks; only the grid-token outputs are
/// kept and projected to pixels.
pub struct DenseDecoder {
    pub cfg: DecoderConfig,
    input_proj: Linear,
    pub query_embed: Param,
    pos: PositionEncoder,
    blocks: Vec<DecBlock>,
    final_norm: LayerNorm,
    output_proj: Linear,
    grid_coords: Vec<PatchCoord>,
}

impl DenseDecoder {
    pub fn new(rng: &mut ChaCha12Rng, encoder_embed: usize, cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let blocks = (0..cfg.blocks)
            .map(|i| DecBlock {
                norm1: LayerNorm::new(&format!("dec.b{i}.norm1"), d),
                attn: MultiHeadAttention::new(rng, &format!("dec.b{i}.attn"), d, cfg.heads),
                norm2: LayerNorm::new(&format!("dec.b{i}.norm2"), d),
                mlp: Mlp::new(rng, &format!("dec.b{i}.mlp"), &[d, d * 4, d]),
            })
            .collect();
        Ok(DenseDecoder {
            input_proj: Linear::new(rng, "dec.input_proj", encoder_embed, d),
            query_embed: Param::randn(rng, "dec.query_embed", &[1, d], 0.02),
            pos: PositionEncoder::new(rng, "dec.pos", cfg.pos_freqs, d),
            final_norm: LayerNorm::new("dec.final_norm", d),
            output_proj: Linear::new(
                rng,
                "dec.output_proj",
                d,
                cfg.d_patch * cfg.d_patch * cfg.channels,
            ),
            grid_coords: dense_query_grid(&cfg),
            blocks,
            cfg,
        })
    }

    pub fn grid_coords(&self) -> &[PatchCoord] {
        &self.grid_coords
    }

    /// Reconstruct the full scene from whatever was observed. Works with an
    /// empty observation history (class token only).
    pub fn decode(&self, latents: &LatentBundle) -> Result<Var> {
        let enc_tokens = self.input_proj.forward(&latents.seq);
        let n_enc = enc_tokens.shape()[0];
        let g = self.cfg.grid_side();
        let n_grid = g * g;

        // grid tokens: shared learnable query + positional encoding
        let query = self.query_embed.leaf();
        let queries = concat_rows(&vec![query; n_grid]);
        let grid_tokens = queries.add(&self.pos.forward(&self.grid_coords));

        let mut x = concat_rows(&[enc_tokens, grid_tokens]);
        for block in &self.blocks {
            let normed = block.norm1.forward(&x);
            let (attended, _) = block.attn.forward(&normed, &normed, None);
            x = x.add(&attended);
            let normed2 = block.norm2.forward(&x);
            x = x.add(&block.mlp.forward(&normed2));
        }
        x = self.final_norm.forward(&x);

        // keep only the grid-token outputs, drop the encoder-token outputs
        let grid_out = x.slice_rows(n_enc, n_enc + n_grid);
        let pixels = self.output_proj.forward(&grid_out); // [g*g, p*p*C]

        // arrange tokens back into an image
        let p = self.cfg.d_patch;
        let c = self.cfg.channels;
        let mut row_blocks = Vec::with_capacity(g);
        for r in 0..g {
            let mut cells = Vec::with_capacity(g);
            for col in 0..g {
                let idx = r * g + col;
                cells.push(pixels.slice_rows(idx, idx + 1).reshape(&[p, p * c]));
            }
            row_blocks.push(concat_cols(&cells));
        }
        let image = concat_rows(&row_blocks).reshape(&[g * p, g * p, c]);
        if image.data().iter().any(|v| !v.is_finite()) {
            return Err(AvexError::NonFinite("dense decoder output"));
        }
        Ok(image)
    }

    /// Decoder output as pixels clamped to `[0, 1]` for export.
    pub fn decode_for_export(&self, latents: &LatentBundle) -> Result<Pixels> {
        let out = self.decode(latents)?;
        let side = self.cfg.scene_side;
        let arr = out
            .data()
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| AvexError::ShapeMismatch(e.to_string()))?
            .to_owned();
        debug_assert_eq!(arr.dim(), (side, side, self.cfg.channels));
        Ok(arr.mapv(|v| v.clamp(0.0, 1.0)))
    }
}

impl HasParams for DenseDecoder {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.input_proj.visit_params(f);
        f(&self.query_embed);
        self.pos.visit_params(f);
        for b in &self.blocks {
            b.norm1.visit_params(f);
            b.attn.visit_params(f);
            b.norm2.visit_params(f);
            b.mlp.visit_params(f);
        }
        self.final_norm.visit_params(f);
        self.output_proj.visit_params(f);
    }
    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.input_proj.visit_params_mut(f);
        f(&mut self.query_embed);
        self.pos.visit_params_mut(f);
        for b in &mut self.blocks {
            b.norm1.visit_params_mut(f);
            b.attn.visit_params_mut(f);
            b.norm2.visit_params_mut(f);
            b.mlp.visit_params_mut(f);
        }
        self.final_norm.visit_params_mut(f);
        self.output_proj.visit_params_mut(f);
    }
}

// ---- losses ----

/// Root mean squared error between a dense prediction and its target.
pub fn rmse_loss(pred: &Var, target: &Pixels) -> Result<Var> {
    if pred.shape() != target.shape() {
        return Err(AvexError::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let t = Var::constant(target.clone().into_dyn());
    Ok(pred.sub(&t).square().mean().sqrt())
}

/// Cross-entropy of the labelled class: `-log softmax(logits)[label]`.
pub fn ce_loss(logits: &Var, label: usize) -> Result<Var> {
    let classes = logits.shape()[1];
    if label >= classes {
        return Err(AvexError::BadLabel { label, classes });
    }
    Ok(logits.log_softmax_rows().pick_per_row(&[label]).neg().reshape(&[1]))
}

/// `KL(teacher || softmax(student))`; zero iff the distributions agree.
pub fn distill_kl_loss(student_logits: &Var, teacher_probs: &[f64]) -> Result<Var> {
    let sum: f64 = teacher_probs.iter().sum();
    if (sum - 1.0).abs() > 1e-5 {
        return Err(AvexError::BadProbabilities(sum));
    }
    let classes = student_logits.shape()[1];
    if teacher_probs.len() != classes {
        return Err(AvexError::ShapeMismatch(format!(
            "{} teacher probs vs {} classes",
            teacher_probs.len(),
            classes
        )));
    }
    let entropy_term: f64 = teacher_probs
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum();
    let p = Var::from_vec(teacher_probs.to_vec(), &[1, classes]);
    let cross = student_logits.log_softmax_rows().mul(&p).sum().neg();
    Ok(cross.add_scalar(entropy_term))
}

/// Produces soft targets for a full scene. The default pipeline uses hard
/// labels instead; plug one of these in to distil from a stronger model.
pub trait Teacher: Send + Sync {
    fn class_probs(&self, scene: &SceneImage) -> Vec<f64>;
}

/// Degenerate teacher that one-hot encodes the stored label; handy in tests.
pub struct HardLabelTeacher {
    pub classes: usize,
}

impl Teacher for HardLabelTeacher {
    fn class_probs(&self, scene: &SceneImage) -> Vec<f64> {
        let mut p = vec![0.0; self.classes];
        if let Some(l) = scene.label {
            p[l] = 1.0;
        }
        p
    }
}

pub fn cls_latent_var(latents: &LatentBundle) -> Var {
    latents.cls()
}

pub fn logits_to_vec(logits: &Var) -> Vec<f64> {
    logits.data().iter().cloned().collect()
}

pub fn cls_array_to_var(cls: &Array1<f64>) -> Var {
    Var::constant(
        cls.clone()
            .into_shape_with_order((1, cls.len()))
            .unwrap()
            .into_dyn(),
    )
}
