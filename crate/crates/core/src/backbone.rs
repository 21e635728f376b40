//! Transformer encoder over patches at arbitrary continuous positions and
//! scales: glimpse splitting, coordinate-based positional encoding, masked
//! attention with a class token, and attention-rollout importances.

use ndarray::{Array1, Array2, Ix2};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use avex_nn::{
    concat_rows, HasParams, LayerNorm, Linear, Mlp, MultiHeadAttention, Param, Var,
};

use crate::error::{AvexError, Result};
use crate::imaging::{resize_bilinear, Pixels};
use crate::scene::{CameraConfig, GlimpseCapture};

/// Center position and relative side of one patch, all normalized to the
/// scene: `cx` by width, `cy` by height, `s` by the shorter scene side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchCoord {
    pub cx: f64,
    pub cy: f64,
    pub s: f64,
}

impl PatchCoord {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.s > 0.0
            && self.s <= 1.0
    }
}

/// Aligned sequences of patch pixels, coordinates, and validity flags.
#[derive(Clone, Default)]
pub struct PatchBundle {
    pub patches: Vec<Pixels>,
    pub coords: Vec<PatchCoord>,
    pub mask: Vec<bool>,
}

impl PatchBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn push(&mut self, patch: Pixels, coord: PatchCoord, valid: bool) {
        self.patches.push(patch);
        self.coords.push(coord);
        self.mask.push(valid);
    }

    pub fn extend(&mut self, other: PatchBundle) {
        self.patches.extend(other.patches);
        self.coords.extend(other.coords);
        self.mask.extend(other.mask);
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches.len() != self.coords.len() || self.patches.len() != self.mask.len() {
            return Err(AvexError::StateMismatch(format!(
                "{} patches, {} coords, {} mask entries",
                self.patches.len(),
                self.coords.len(),
                self.mask.len()
            )));
        }
        for c in &self.coords {
            if !c.is_valid() {
                return Err(AvexError::Invariant(format!("coord out of range: {c:?}")));
            }
        }
        Ok(())
    }
}

/// Split one capture into `ceil(d_cam / d_patch)^2` patches in raster order,
/// assigning each its scene-space center and relative side. Captures whose
/// side is not a multiple of `d_patch` are first resampled up to the next
/// multiple.
pub fn split_glimpse(
    capture: &GlimpseCapture,
    cam: &CameraConfig,
    scene_h: usize,
    scene_w: usize,
) -> PatchBundle {
    let p = cam.d_patch;
    let m = cam.d_cam.div_ceil(p);
    let work = if cam.d_cam == m * p {
        capture.pixels.clone()
    } else {
        resize_bilinear(capture.pixels.view(), m * p, m * p)
    };
    let region = capture.coords;
    let cell = region.d as f64 / m as f64;
    let short_side = scene_h.min(scene_w) as f64;
    let mut bundle = PatchBundle::new();
    for row in 0..m {
        for col in 0..m {
            let patch = work
                .slice(ndarray::s![row * p..(row + 1) * p, col * p..(col + 1) * p, ..])
                .to_owned();
            let coord = PatchCoord {
                cx: (region.x as f64 + (col as f64 + 0.5) * cell) / scene_w as f64,
                cy: (region.y as f64 + (row as f64 + 0.5) * cell) / scene_h as f64,
                s: cell / short_side,
            };
            bundle.push(patch, coord, true);
        }
    }
    bundle
}

/// Accumulate the patch bundle for a whole capture history.
pub fn bundle_from_captures(
    captures: &[GlimpseCapture],
    cam: &CameraConfig,
    scene_h: usize,
    scene_w: usize,
) -> PatchBundle {
    let mut bundle = PatchBundle::new();
    for cap in captures {
        bundle.extend(split_glimpse(cap, cam, scene_h, scene_w));
    }
    bundle
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct EncoderConfig {
    pub blocks: usize,
    pub embed: usize,
    pub heads: usize,
    pub d_patch: usize,
    pub channels: usize,
    /// Sinusoid frequency count per coordinate channel.
    pub pos_freqs: usize,
    /// Hidden width of each block's MLP as a multiple of `embed`.
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// Small configuration that trains in minutes on a CPU.
    pub fn desk(d_patch: usize) -> Self {
        EncoderConfig {
            blocks: 4,
            embed: 192,
            heads: 4,
            d_patch,
            channels: 3,
            pos_freqs: 8,
            mlp_ratio: 4,
        }
    }

    /// Full-scale configuration (ViT-B shape).
    pub fn full(d_patch: usize) -> Self {
        EncoderConfig {
            blocks: 12,
            embed: 768,
            heads: 12,
            d_patch,
            channels: 3,
            pos_freqs: 16,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed % self.heads != 0 {
            return Err(AvexError::Config(format!(
                "embed {} not divisible by heads {}",
                self.embed, self.heads
            )));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.d_patch * self.d_patch * self.channels
    }
}

/// Sinusoidal features of `(cx, cy, ln s)` at geometric frequencies, mapped
/// to the embedding width by a learned projection. Equal coordinates give
/// equal encodings by construction.
pub struct PositionEncoder {
    pub proj: Linear,
    pub freqs: usize,
}

impl PositionEncoder {
    pub fn new(rng: &mut ChaCha12Rng, name: &str, freqs: usize, embed: usize) -> Self {
        PositionEncoder {
            proj: Linear::new(rng, &format!("{name}.proj"), 6 * freqs, embed),
            freqs,
        }
    }

    pub fn features(&self, coords: &[PatchCoord]) -> Array2<f64> {
        let f = self.freqs;
        let mut out = Array2::<f64>::zeros((coords.len(), 6 * f));
        for (i, c) in coords.iter().enumerate() {
            let channels = [c.cx, c.cy, c.s.max(1e-9).ln()];
            for (ch, &v) in channels.iter().enumerate() {
                for k in 0..f {
                    let omega = std::f64::consts::PI * (1 << k) as f64;
                    out[[i, (ch * f + k) * 2]] = (omega * v).sin();
                    out[[i, (ch * f + k) * 2 + 1]] = (omega * v).cos();
                }
            }
        }
        out
    }

    /// `[n, embed]` positional vectors for the given coordinates.
    pub fn forward(&self, coords: &[PatchCoord]) -> Var {
        self.proj.forward(&Var::constant(self.features(coords).into_dyn()))
    }
}

impl HasParams for PositionEncoder {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.proj.visit_params(f);
    }
    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.proj.visit_params_mut(f);
    }
}

struct Block {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

/// Encoder output: the full token sequence (class token at row 0) plus the
/// retained per-block attention over the valid tokens.
pub struct LatentBundle {
    /// `[1 + n_valid, embed]` sequence after the final norm; row 0 is the
    /// class token, remaining rows are valid patches in bundle order.
    pub seq: Var,
    /// Head-averaged row-stochastic attention per block over the same rows.
    pub attentions: Vec<Array2<f64>>,
}

impl LatentBundle {
    pub fn cls(&self) -> Var {
        self.seq.slice_rows(0, 1)
    }

    pub fn patch_latents(&self) -> Option<Var> {
        let n = self.seq.shape()[0];
        if n > 1 {
            Some(self.seq.slice_rows(1, n))
        } else {
            None
        }
    }

    pub fn cls_array(&self) -> Array1<f64> {
        self.seq
            .data()
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .row(0)
            .to_owned()
    }

    pub fn latents_array(&self) -> Array2<f64> {
        let v = self.seq.data().view().into_dimensionality::<Ix2>().unwrap();
        v.slice(ndarray::s![1.., ..]).to_owned()
    }
}

/// ViT-style encoder that consumes patches with continuous coordinates.
pub struct GlimpseEncoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub pos: PositionEncoder,
    pub cls_token: Param,
    blocks: Vec<Block>,
    pub final_norm: LayerNorm,
}

impl GlimpseEncoder {
    pub fn new(rng: &mut ChaCha12Rng, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed;
        let blocks = (0..cfg.blocks)
            .map(|i| Block {
                norm1: LayerNorm::new(&format!("enc.b{i}.norm1"), e),
                attn: MultiHeadAttention::new(rng, &format!("enc.b{i}.attn"), e, cfg.heads),
                norm2: LayerNorm::new(&format!("enc.b{i}.norm2"), e),
                mlp: Mlp::new(rng, &format!("enc.b{i}.mlp"), &[e, e * cfg.mlp_ratio, e]),
            })
            .collect();
        Ok(GlimpseEncoder {
            patch_embed: Linear::new(rng, "enc.patch_embed", cfg.patch_dim(), e),
            pos: PositionEncoder::new(rng, "enc.pos", cfg.pos_freqs, e),
            cls_token: Param::randn(rng, "enc.cls_token", &[1, e], 0.02),
            final_norm: LayerNorm::new("enc.final_norm", e),
            blocks,
            cfg,
        })
    }

    fn run_blocks(&self, mut x: Var, key_mask: Option<&[bool]>) -> (Var, Vec<Array2<f64>>) {
        let mut attns: Vec<Array2<f64>> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let normed = block.norm1.forward(&x);
            let (attended, attn) = block.attn.forward(&normed, &normed, key_mask);
            attns.push(attn.into_dimensionality::<Ix2>().unwrap());
            x = x.add(&attended);
            let normed2 = block.norm2.forward(&x);
            x = x.add(&block.mlp.forward(&normed2));
        }
        (self.final_norm.forward(&x), attns)
    }

    /// Forward pass. Invalid bundle slots take part in the sequence but are
    /// masked out of every attention, so they cannot influence valid tokens;
    /// their rows are dropped from the output. An empty bundle encodes the
    /// class token alone.
    pub fn encode(&self, bundle: &PatchBundle) -> Result<LatentBundle> {
        bundle.validate()?;
        for p in &bundle.patches {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(AvexError::NonFinite("patch pixels"));
            }
        }
        let n = bundle.len();

        let mut tokens: Vec<Var> = Vec::with_capacity(1 + n);
        tokens.push(self.cls_token.leaf());
        if n > 0 {
            let pd = self.cfg.patch_dim();
            let mut flat = Array2::<f64>::zeros((n, pd));
            for (i, p) in bundle.patches.iter().enumerate() {
                for (j, &v) in p.iter().enumerate() {
                    flat[[i, j]] = v;
                }
            }
            let embedded = self.patch_embed.forward(&Var::constant(flat.into_dyn()));
            let pos = self.pos.forward(&bundle.coords);
            tokens.push(embedded.add(&pos));
        }
        let x0 = concat_rows(&tokens);

        let mut key_mask: Vec<bool> = Vec::with_capacity(1 + n);
        key_mask.push(true);
        key_mask.extend_from_slice(&bundle.mask);
        let all_valid = bundle.mask.iter().all(|&m| m);
        let (x, attns) = self.run_blocks(x0, if all_valid { None } else { Some(&key_mask) });

        // Drop invalid rows from outputs and attention matrices.
        let keep: Vec<usize> = std::iter::once(0)
            .chain(
                bundle
                    .mask
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &m)| m.then_some(i + 1)),
            )
            .collect();
        let seq = if keep.len() == 1 + n {
            x
        } else {
            let parts: Vec<Var> = keep.iter().map(|&i| x.slice_rows(i, i + 1)).collect();
            concat_rows(&parts)
        };
        let attentions = attns
            .into_iter()
            .map(|a| {
                let mut sub = Array2::<f64>::zeros((keep.len(), keep.len()));
                for (ri, &r) in keep.iter().enumerate() {
                    for (ci, &c) in keep.iter().enumerate() {
                        sub[[ri, ci]] = a[[r, c]];
                    }
                }
                // Masked keys carry exactly zero weight, so valid rows stay
                // row-stochastic after dropping them; renormalize anyway to
                // absorb float dust.
                for mut row in sub.rows_mut() {
                    let s = row.sum();
                    if s > 0.0 {
                        row.mapv_inplace(|v| v / s);
                    }
                }
                sub
            })
            .collect();

        Ok(LatentBundle { seq, attentions })
    }
}

impl HasParams for GlimpseEncoder {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.patch_embed.visit_params(f);
        self.pos.visit_params(f);
        f(&self.cls_token);
        for b in &self.blocks {
            b.norm1.visit_params(f);
            b.attn.visit_params(f);
            b.norm2.visit_params(f);
            b.mlp.visit_params(f);
        }
        self.final_norm.visit_params(f);
    }
    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.patch_embed.visit_params_mut(f);
        self.pos.visit_params_mut(f);
        f(&mut self.cls_token);
        for b in &mut self.blocks {
            b.norm1.visit_params_mut(f);
            b.attn.visit_params_mut(f);
            b.norm2.visit_params_mut(f);
            b.mlp.visit_params_mut(f);
        }
        self.final_norm.visit_params_mut(f);
    }
}

/// Attention rollout: mix each head-averaged attention with the identity
/// (`0.5 A + 0.5 I`), renormalize rows, multiply across blocks, and read the
/// class-token row. Entry `j` of the result is the importance of patch `j`
/// (class token at index 0 excluded).
pub fn attention_rollout(attentions: &[Array2<f64>]) -> Result<Vec<f64>> {
    assert!(!attentions.is_empty(), "rollout needs at least one block");
    let n = attentions[0].nrows();
    for a in attentions {
        if a.nrows() != n || a.ncols() != n {
            return Err(AvexError::ShapeMismatch(format!(
                "attention {}x{} does not match {n} tokens",
                a.nrows(),
                a.ncols()
            )));
        }
        for (row, r) in a.rows().into_iter().enumerate() {
            let sum = r.sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(AvexError::NotRowStochastic { row, sum });
            }
        }
    }
    let mut rollout = Array2::<f64>::eye(n);
    for a in attentions {
        let mut mixed = a * 0.5;
        for i in 0..n {
            mixed[[i, i]] += 0.5;
        }
        for mut row in mixed.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        rollout = mixed.dot(&rollout);
    }
    Ok(rollout.row(0).iter().skip(1).cloned().collect())
}

/// Full rollout product, exposed for property checks on row sums.
pub fn attention_rollout_matrix(attentions: &[Array2<f64>]) -> Result<Array2<f64>> {
    let n = attentions[0].nrows();
    let mut rollout = Array2::<f64>::eye(n);
    for a in attentions {
        for (row, r) in a.rows().into_iter().enumerate() {
            let sum = r.sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(AvexError::NotRowStochastic { row, sum });
            }
        }
        let mut mixed = a * 0.5;
        for i in 0..n {
            mixed[[i, i]] += 0.5;
        }
        for mut row in mixed.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        rollout = mixed.dot(&rollout);
    }
    Ok(rollout)
}

/// Importance of each valid patch from an encoder output.
pub fn importances(latents: &LatentBundle) -> Result<Vec<f64>> {
    let imp = attention_rollout(&latents.attentions)?;
    if imp.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(AvexError::NonFinite("importances"));
    }
    Ok(imp)
}

/// Encode patch pixels given as a flat `[n, patch_dim]` matrix, returning
/// the input node so callers can ask for its gradient. Same forward path as
/// [`GlimpseEncoder::encode`] with every slot valid.
pub fn encode_flat_input(
    encoder: &GlimpseEncoder,
    coords: &[PatchCoord],
    flat: &Array2<f64>,
) -> (Var, LatentBundle) {
    let n = coords.len();
    assert_eq!(flat.dim(), (n, encoder.cfg.patch_dim()));
    let input = Var::constant(flat.clone().into_dyn());
    let embedded = encoder.patch_embed.forward(&input);
    let pos = encoder.pos.forward(coords);
    let tokens = concat_rows(&[encoder.cls_token.leaf(), embedded.add(&pos)]);
    let (seq, attentions) = encoder.run_blocks(tokens, None);
    (input, LatentBundle { seq, attentions })
}
