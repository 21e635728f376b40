//! Scene sources: a seeded synthetic "locate the digit" generator and a
//! directory loader with an optional label CSV. Light augmentation for
//! backbone training.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use avex_nn::derived_rng;

use crate::config::{DatasetConfig, DatasetKind};
use crate::error::{AvexError, Result};
use crate::imaging::{load_png, resize_bilinear, Pixels};
use crate::scene::SceneImage;

pub struct SceneDataset {
    pub train: Vec<SceneImage>,
    pub val: Vec<SceneImage>,
    pub test: Vec<SceneImage>,
    pub classes: usize,
}

impl SceneDataset {
    pub fn build(cfg: &DatasetConfig) -> Result<Self> {
        match cfg.kind {
            DatasetKind::Synthetic => Ok(synthetic_dataset(cfg)),
            DatasetKind::Directory => directory_dataset(cfg),
        }
    }
}

/// Segments of a seven-segment digit glyph, in glyph-normalized coordinates.
/// Order: top, top-right, bottom-right, bottom, bottom-left, top-left, middle.
const SEGMENTS: [[f64; 4]; 7] = [
    // [x0, y0, x1, y1]
    [0.0, 0.0, 1.0, 0.18],
    [0.82, 0.0, 1.0, 0.55],
    [0.82, 0.45, 1.0, 1.0],
    [0.0, 0.82, 1.0, 1.0],
    [0.0, 0.45, 0.18, 1.0],
    [0.0, 0.0, 0.18, 0.55],
    [0.0, 0.41, 1.0, 0.59],
];

const DIGIT_SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],   // 0
    [false, true, true, false, false, false, false], // 1
    [true, true, false, true, true, false, true],  // 2
    [true, true, true, true, false, false, true],  // 3
    [false, true, true, false, false, true, true], // 4
    [true, false, true, true, false, true, true],  // 5
    [true, false, true, true, true, true, true],   // 6
    [true, true, true, false, false, false, false], // 7
    [true, true, true, true, true, true, true],    // 8
    [true, true, true, true, false, true, true],   // 9
];

fn glyph_coverage(digit: usize, gx: f64, gy: f64) -> bool {
    SEGMENTS
        .iter()
        .zip(DIGIT_SEGMENTS[digit].iter())
        .any(|(seg, &on)| on && gx >= seg[0] && gx <= seg[2] && gy >= seg[1] && gy <= seg[3])
}

/// Render `digit` into `canvas` at the given square box with 3x3 coverage
/// supersampling; white strokes on whatever is underneath.
pub fn render_digit(canvas: &mut Pixels, digit: usize, x0: usize, y0: usize, side: usize) {
    assert!(digit < 10);
    for py in 0..side {
        for px in 0..side {
            let mut cover = 0.0;
            for sy in 0..3 {
                for sx in 0..3 {
                    let gx = (px as f64 + (sx as f64 + 0.5) / 3.0) / side as f64;
                    let gy = (py as f64 + (sy as f64 + 0.5) / 3.0) / side as f64;
                    if glyph_coverage(digit, gx, gy) {
                        cover += 1.0;
                    }
                }
            }
            cover /= 9.0;
            if cover > 0.0 {
                for c in 0..canvas.dim().2 {
                    let v = &mut canvas[[y0 + py, x0 + px, c]];
                    *v = (*v).max(cover);
                }
            }
        }
    }
}

/// One synthetic scene: a digit at a random position and scale on a blank
/// canvas. Fully determined by the RNG stream.
pub fn synthetic_scene(rng: &mut ChaCha12Rng, cfg: &DatasetConfig, id: &str) -> SceneImage {
    let canvas_side = cfg.canvas;
    let digit = rng.random_range(0..10usize);
    let side = rng.random_range(cfg.digit_min_side..=cfg.digit_max_side.min(canvas_side));
    let x0 = rng.random_range(0..=canvas_side - side);
    let y0 = rng.random_range(0..=canvas_side - side);
    let mut pixels = Array3::<f64>::zeros((canvas_side, canvas_side, 3));
    render_digit(&mut pixels, digit, x0, y0, side);
    SceneImage::new(id, pixels).with_label(digit)
}

fn synthetic_split(cfg: &DatasetConfig, stream: u64, n: usize, prefix: &str) -> Vec<SceneImage> {
    let mut rng = derived_rng(cfg.seed, stream);
    (0..n)
        .map(|i| synthetic_scene(&mut rng, cfg, &format!("{prefix}{i:05}")))
        .collect()
}

pub fn synthetic_dataset(cfg: &DatasetConfig) -> SceneDataset {
    SceneDataset {
        train: synthetic_split(cfg, 1, cfg.n_train, "train-"),
        val: synthetic_split(cfg, 2, cfg.n_val, "val-"),
        test: synthetic_split(cfg, 3, cfg.n_test, "test-"),
        classes: 10,
    }
}

fn directory_dataset(cfg: &DatasetConfig) -> Result<SceneDataset> {
    let dir = cfg
        .path
        .as_ref()
        .ok_or_else(|| AvexError::Dataset("directory dataset needs a path".into()))?;
    let dir = Path::new(dir);
    let mut labels = std::collections::HashMap::new();
    let mut classes = 0usize;
    if let Some(csv_name) = &cfg.labels {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(dir.join(csv_name))
            .map_err(|e| AvexError::Dataset(format!("label csv: {e}")))?;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| AvexError::Dataset(format!("label csv row: {e}")))?;
            if rec.len() < 2 {
                return Err(AvexError::Dataset("label csv needs file,label".into()));
            }
            let label: usize = rec[1]
                .trim()
                .parse()
                .map_err(|_| AvexError::Dataset(format!("bad label {:?}", &rec[1])))?;
            classes = classes.max(label + 1);
            labels.insert(rec[0].to_string(), label);
        }
    }
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| AvexError::Dataset(format!("read dir {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("jpg") | Some("jpeg")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(AvexError::Dataset(format!("no images in {}", dir.display())));
    }
    let mut scenes = Vec::with_capacity(files.len());
    for f in &files {
        let pixels = load_png(f)?;
        let name = f.file_name().unwrap().to_string_lossy().to_string();
        let mut scene = SceneImage::new(name.clone(), pixels);
        if let Some(&l) = labels.get(&name) {
            scene = scene.with_label(l);
        }
        scenes.push(scene);
    }
    // deterministic 8:1:1 split by index
    let n = scenes.len();
    let n_val = (n / 10).max(1).min(n.saturating_sub(2));
    let n_test = (n / 10).max(1).min(n.saturating_sub(1 + n_val));
    let test = scenes.split_off(n - n_test);
    let val = scenes.split_off(scenes.len() - n_val);
    Ok(SceneDataset {
        train: scenes,
        val,
        test,
        classes: classes.max(1),
    })
}

/// Horizontal flip plus random resized crop, the light augmentation used
/// for backbone training when enabled.
pub fn augment_scene(scene: &SceneImage, rng: &mut ChaCha12Rng) -> SceneImage {
    let (h, w, c) = scene.pixels.dim();
    let mut px = scene.pixels.clone();
    if rng.random::<bool>() {
        let mut flipped = Array3::<f64>::zeros((h, w, c));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    flipped[[y, x, ch]] = px[[y, w - 1 - x, ch]];
                }
            }
        }
        px = flipped;
    }
    // random resized crop: keep 70..100% of each side, resize back
    let keep = rng.random_range(0.7..=1.0);
    let ch_ = (h as f64 * keep) as usize;
    let cw = (w as f64 * keep) as usize;
    if ch_ < h || cw < w {
        let y0 = rng.random_range(0..=h - ch_);
        let x0 = rng.random_range(0..=w - cw);
        let cropped = px.slice(ndarray::s![y0..y0 + ch_, x0..x0 + cw, ..]).to_owned();
        px = resize_bilinear(cropped.view(), h, w);
    }
    SceneImage {
        id: scene.id.clone(),
        pixels: px,
        label: scene.label,
        dense_target: scene.dense_target.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DatasetConfig {
        DatasetConfig {
            n_train: 12,
            n_val: 4,
            n_test: 4,
            ..Default::default()
        }
    }

    #[test]
    fn synthetic_scenes_are_seed_reproducible() {
        let c = cfg();
        let a = synthetic_dataset(&c);
        let b = synthetic_dataset(&c);
        assert_eq!(a.train.len(), 12);
        for (x, y) in a.train.iter().zip(b.train.iter()) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.pixels, y.pixels);
        }
    }

    #[test]
    fn synthetic_scene_has_digit_pixels_in_range() {
        let c = cfg();
        let ds = synthetic_dataset(&c);
        for s in &ds.train {
            assert!(s.label.unwrap() < 10);
            assert!(s.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            let mass: f64 = s.pixels.sum();
            assert!(mass > 0.0, "digit must be visible");
        }
    }

    #[test]
    fn all_ten_digits_render_distinctly() {
        let mut imgs = Vec::new();
        for d in 0..10 {
            let mut canvas = Array3::<f64>::zeros((32, 32, 3));
            render_digit(&mut canvas, d, 4, 4, 24);
            imgs.push(canvas);
        }
        for a in 0..10 {
            for b in (a + 1)..10 {
                let diff: f64 = imgs[a]
                    .iter()
                    .zip(imgs[b].iter())
                    .map(|(x, y)| (x - y).abs())
                    .sum();
                assert!(diff > 1.0, "digits {a} and {b} render identically");
            }
        }
    }

    #[test]
    fn augmentation_keeps_shape_and_range() {
        let c = cfg();
        let ds = synthetic_dataset(&c);
        let mut rng = avex_nn::seeded_rng(3);
        let aug = augment_scene(&ds.train[0], &mut rng);
        assert_eq!(aug.pixels.dim(), ds.train[0].pixels.dim());
        assert!(aug.pixels.iter().all(|v| (-1e-9..=1.0 + 1e-9).contains(v)));
    }
}
