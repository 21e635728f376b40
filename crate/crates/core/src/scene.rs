//! The simulated zoom-capable camera: scenes, glimpse actions in `[0,1]^3`,
//! capture by crop-and-resample, and the episodic environment around them.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{AvexError, Result};
use crate::imaging::{crop, resize_antialiased, Pixels};

/// A stored scene the camera explores. Pixels are `(H, W, C)` in `[0, 1]`.
#[derive(Clone)]
pub struct SceneImage {
    pub id: String,
    pub pixels: Pixels,
    pub label: Option<usize>,
    /// Reconstruction target; defaults to the scene itself when absent.
    pub dense_target: Option<Pixels>,
}

impl SceneImage {
    pub fn new(id: impl Into<String>, pixels: Pixels) -> Self {
        SceneImage {
            id: id.into(),
            pixels,
            label: None,
            dense_target: None,
        }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn validate(&self, cam: &CameraConfig) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let d_min = cam.d_min();
        if h < d_min || w < d_min {
            return Err(AvexError::SceneTooSmall { h, w, d_min });
        }
        if self.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(AvexError::NonFinite("scene pixels outside [0,1]"));
        }
        Ok(())
    }
}

/// Camera geometry. `d_min`/`d_max` default to the sensor resolution and the
/// scene's shorter side respectively when left unset.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraConfig {
    /// Sensor resolution: every capture is `d_cam x d_cam` pixels.
    pub d_cam: usize,
    /// Minimum field-of-view side in scene pixels (max zoom).
    pub d_min: Option<usize>,
    /// Maximum field-of-view side in scene pixels (widest view).
    pub d_max: Option<usize>,
    /// Backbone patch side; captures are split into patches of this size.
    pub d_patch: usize,
}

impl CameraConfig {
    pub fn new(d_cam: usize, d_patch: usize) -> Self {
        CameraConfig {
            d_cam,
            d_min: None,
            d_max: None,
            d_patch,
        }
    }

    pub fn d_min(&self) -> usize {
        self.d_min.unwrap_or(self.d_cam)
    }

    pub fn d_max_for(&self, scene: &SceneImage) -> usize {
        self.d_max.unwrap_or_else(|| scene.height().min(scene.width()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_cam == 0 || self.d_patch == 0 {
            return Err(AvexError::BadCameraConfig("zero d_cam or d_patch".into()));
        }
        if self.d_min() < 1 {
            return Err(AvexError::BadCameraConfig("d_min must be >= 1".into()));
        }
        if let (Some(lo), Some(hi)) = (self.d_min, self.d_max) {
            if lo > hi {
                return Err(AvexError::BadCameraConfig(format!("d_min {lo} > d_max {hi}")));
            }
        }
        Ok(())
    }

    /// Patches per glimpse: `ceil(d_cam / d_patch)^2`.
    pub fn patches_per_glimpse(&self) -> usize {
        let m = self.d_cam.div_ceil(self.d_patch);
        m * m
    }
}

/// Continuous glimpse selection: position of the top-left corner, normalized
/// by the valid placement range, and scale (`0` = max zoom, `1` = widest).
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct GlimpseAction {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl GlimpseAction {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        GlimpseAction { x, y, z }
    }

    /// Clamp all components into `[0, 1]`; the environment boundary.
    pub fn clamped(self) -> Self {
        GlimpseAction {
            x: self.x.clamp(0.0, 1.0),
            y: self.y.clamp(0.0, 1.0),
            z: self.z.clamp(0.0, 1.0),
        }
    }

    pub fn in_bounds(&self) -> bool {
        [self.x, self.y, self.z].iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// One captured glimpse: fixed-resolution pixels plus the exact scene-space
/// region they came from.
#[derive(Clone)]
pub struct GlimpseCapture {
    pub pixels: Pixels,
    /// Top-left corner and side in scene pixels.
    pub coords: Region,
    /// 1-based exploration step.
    pub step_index: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub d: usize,
}

/// Map a normalized action onto scene pixels. The glimpse side interpolates
/// between `d_min` and `d_max`; the corner scales with the remaining valid
/// placement range so the region always fits the scene.
pub fn denormalize_action(
    action: GlimpseAction,
    scene: &SceneImage,
    cam: &CameraConfig,
) -> Result<Region> {
    cam.validate()?;
    let (h, w) = (scene.height(), scene.width());
    let d_min = cam.d_min();
    if h < d_min || w < d_min {
        return Err(AvexError::SceneTooSmall { h, w, d_min });
    }
    let d_max = cam.d_max_for(scene).min(h).min(w);
    let a = action.clamped();
    let d = (d_min as f64 + a.z * (d_max as f64 - d_min as f64)).round() as usize;
    let d = d.clamp(d_min, d_max);
    let x = (a.x * (w - d) as f64).round() as usize;
    let y = (a.y * (h - d) as f64).round() as usize;
    Ok(Region { x, y, d })
}

/// Crop the selected region and resample it to the sensor resolution.
pub fn capture_glimpse(
    scene: &SceneImage,
    action: GlimpseAction,
    cam: &CameraConfig,
    step_index: usize,
) -> Result<GlimpseCapture> {
    let region = denormalize_action(action, scene, cam)?;
    let cropped = crop(scene.pixels.view(), region.x, region.y, region.d);
    let pixels = resize_antialiased(cropped.view(), cam.d_cam);
    Ok(GlimpseCapture {
        pixels,
        coords: region,
        step_index,
    })
}

/// Percentage of scene pixels captured across all glimpses (overlaps count
/// multiply): `n * d_cam^2 / (H * W) * 100`.
pub fn pixel_percentage(n_captures: usize, d_cam: usize, scene_h: usize, scene_w: usize) -> f64 {
    (n_captures * d_cam * d_cam) as f64 / (scene_h * scene_w) as f64 * 100.0
}

/// Stop when the top class probability reaches `threshold` or the glimpse
/// budget is exhausted.
pub fn should_stop(class_probs: &[f64], threshold: f64, t: usize, max_steps: usize) -> Result<bool> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(AvexError::BadThreshold(threshold));
    }
    let sum: f64 = class_probs.iter().sum();
    if (sum - 1.0).abs() > 1e-5 {
        return Err(AvexError::BadProbabilities(sum));
    }
    if t >= max_steps {
        return Ok(true);
    }
    let top = class_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(top >= threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Confidence,
}

/// Episodic wrapper over one scene. A single instance is single-caller;
/// independent instances may be driven in parallel.
pub struct GlimpseEnv {
    scene: SceneImage,
    cam: CameraConfig,
    max_steps: usize,
    t: usize,
    done: bool,
    captures: Vec<GlimpseCapture>,
    actions: Vec<GlimpseAction>,
    stop_reason: Option<StopReason>,
}

impl GlimpseEnv {
    pub fn new(scene: SceneImage, cam: CameraConfig, max_steps: usize) -> Result<Self> {
        cam.validate()?;
        scene.validate(&cam)?;
        Ok(GlimpseEnv {
            scene,
            cam,
            max_steps,
            t: 0,
            done: false,
            captures: Vec::new(),
            actions: Vec::new(),
            stop_reason: None,
        })
    }

    /// Clear the episode: empty history, step counter back to zero.
    pub fn reset(&mut self, scene: SceneImage) -> Result<()> {
        scene.validate(&self.cam)?;
        self.scene = scene;
        self.t = 0;
        self.done = false;
        self.captures.clear();
        self.actions.clear();
        self.stop_reason = None;
        Ok(())
    }

    pub fn scene(&self) -> &SceneImage {
        &self.scene
    }

    pub fn cam(&self) -> &CameraConfig {
        &self.cam
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn captures(&self) -> &[GlimpseCapture] {
        &self.captures
    }

    pub fn actions(&self) -> &[GlimpseAction] {
        &self.actions
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.stop_reason
    }

    /// Capture the requested glimpse and advance the step counter. Returns
    /// the capture and whether the budget is now exhausted.
    pub fn step(&mut self, action: GlimpseAction) -> Result<(GlimpseCapture, bool)> {
        if self.done {
            return Err(AvexError::EpisodeFinished);
        }
        let capture = capture_glimpse(&self.scene, action, &self.cam, self.t + 1)?;
        self.t += 1;
        self.captures.push(capture.clone());
        self.actions.push(action.clamped());
        if self.t >= self.max_steps {
            self.done = true;
            self.stop_reason = Some(StopReason::MaxSteps);
        }
        Ok((capture, self.done))
    }

    /// End the episode before the budget runs out (confidence stopping).
    pub fn stop_early(&mut self) {
        if !self.done {
            self.done = true;
            self.stop_reason = Some(StopReason::Confidence);
        }
    }

    pub fn pixel_percentage(&self) -> f64 {
        pixel_percentage(
            self.captures.len(),
            self.cam.d_cam,
            self.scene.height(),
            self.scene.width(),
        )
    }
}

/// Lockstep wrapper over independent environments.
pub struct BatchEnv {
    pub envs: Vec<GlimpseEnv>,
}

impl BatchEnv {
    pub fn new(envs: Vec<GlimpseEnv>) -> Self {
        BatchEnv { envs }
    }

    /// Step every unfinished environment with its action; `None` for
    /// environments that are already done.
    pub fn step(&mut self, actions: &[Option<GlimpseAction>]) -> Result<Vec<Option<(GlimpseCapture, bool)>>> {
        assert_eq!(actions.len(), self.envs.len());
        self.envs
            .iter_mut()
            .zip(actions)
            .map(|(env, act)| match act {
                Some(a) if !env.is_done() => env.step(*a).map(Some),
                _ => Ok(None),
            })
            .collect()
    }

    pub fn all_done(&self) -> bool {
        self.envs.iter().all(|e| e.is_done())
    }
}

// ---- episode record ----

/// Everything observed and decided during one episode, serializable to JSON.
/// Capture pixels are included only when requested (base64 of f32 LE bytes).
#[derive(Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub scene_id: String,
    pub scene_h: usize,
    pub scene_w: usize,
    pub d_cam: usize,
    pub actions: Vec<GlimpseAction>,
    pub regions: Vec<Region>,
    /// Task loss before any glimpse (empty-history forward).
    pub loss_initial: f64,
    /// Task loss after each step, aligned with `actions`.
    pub losses: Vec<f64>,
    /// Per-step rewards, `r_t = L_{t-1} - L_t`.
    pub rewards: Vec<f64>,
    pub stop_reason: StopReason,
    pub final_prediction: Option<FinalPrediction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capture_pixels_b64: Option<Vec<String>>,
}

#[derive(Clone, Serialize, Deserialize)]
pub struct FinalPrediction {
    pub logits: Option<Vec<f64>>,
    pub label: Option<usize>,
    pub probability: Option<f64>,
    pub rmse: Option<f64>,
}

impl EpisodeRecord {
    /// Check the internal consistency every record must satisfy.
    pub fn validate(&self) -> Result<()> {
        if self.rewards.len() != self.regions.len() || self.losses.len() != self.regions.len() {
            return Err(AvexError::Invariant(format!(
                "record lengths disagree: {} regions, {} losses, {} rewards",
                self.regions.len(),
                self.losses.len(),
                self.rewards.len()
            )));
        }
        let mut prev = self.loss_initial;
        for (t, (&l, &r)) in self.losses.iter().zip(&self.rewards).enumerate() {
            if (r - (prev - l)).abs() > 1e-6 {
                return Err(AvexError::Invariant(format!(
                    "reward at step {} is {} but loss difference is {}",
                    t + 1,
                    r,
                    prev - l
                )));
            }
            prev = l;
        }
        Ok(())
    }

    pub fn encode_pixels(&mut self, captures: &[GlimpseCapture]) {
        use base64::Engine;
        let engine = base64::engine::general_purpose::STANDARD;
        self.capture_pixels_b64 = Some(
            captures
                .iter()
                .map(|c| {
                    let bytes: Vec<u8> = c
                        .pixels
                        .iter()
                        .flat_map(|&v| (v as f32).to_le_bytes())
                        .collect();
                    engine.encode(bytes)
                })
                .collect(),
        );
    }

    pub fn decode_pixels(&self) -> Result<Option<Vec<Pixels>>> {
        use base64::Engine;
        let Some(blobs) = &self.capture_pixels_b64 else {
            return Ok(None);
        };
        let engine = base64::engine::general_purpose::STANDARD;
        let mut out = Vec::with_capacity(blobs.len());
        for blob in blobs {
            let bytes = engine
                .decode(blob)
                .map_err(|e| AvexError::Invariant(format!("bad base64 pixels: {e}")))?;
            let vals: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let side = (vals.len() as f64 / 3.0).sqrt().round() as usize;
            let arr = Array3::from_shape_vec((side, side, 3), vals)
                .map_err(|e| AvexError::Invariant(format!("bad pixel blob shape: {e}")))?;
            out.push(arr);
        }
        Ok(Some(out))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
