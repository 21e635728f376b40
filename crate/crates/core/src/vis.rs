//! Inspection outputs: per-pixel glimpse coverage maps and per-episode
//! trajectory exports (overlays, visible-pixel composites, captions, JSON).

use std::path::Path;

use ndarray::Array2;

use crate::error::{io_err, AvexError, Result};
use crate::imaging::{crop, draw_rect, paste_resized, resize_antialiased, save_png, Pixels};
use crate::scene::{EpisodeRecord, SceneImage};

/// Per-pixel observation frequency, per step index and averaged over all
/// steps, normalized by record count.
pub struct GlimpseMap {
    pub per_step: Vec<Array2<f64>>,
    pub overall: Array2<f64>,
    pub records: usize,
}

impl GlimpseMap {
    /// Mean of the overall map; equals the mean per-episode covered area
    /// fraction, counting overlaps multiply.
    pub fn mean_coverage(&self) -> f64 {
        self.overall.mean().unwrap_or(0.0)
    }

    /// Map scaled so the largest value is 1 (all-zero maps stay zero).
    pub fn max_normalized(&self, map: &Array2<f64>) -> Array2<f64> {
        let max = map.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            map.mapv(|v| v / max)
        } else {
            map.clone()
        }
    }
}

/// Accumulate coverage maps over records sharing one scene shape.
pub fn accumulate_glimpse_map(records: &[EpisodeRecord], scene_h: usize, scene_w: usize) -> Result<GlimpseMap> {
    let max_steps = records.iter().map(|r| r.regions.len()).max().unwrap_or(0);
    let mut per_step = vec![Array2::<f64>::zeros((scene_h, scene_w)); max_steps];
    let mut overall = Array2::<f64>::zeros((scene_h, scene_w));
    for rec in records {
        if rec.scene_h != scene_h || rec.scene_w != scene_w {
            return Err(AvexError::ShapeMismatch(format!(
                "record scene {}x{} vs map {}x{}",
                rec.scene_h, rec.scene_w, scene_h, scene_w
            )));
        }
        for (t, region) in rec.regions.iter().enumerate() {
            let mut slab = per_step[t].slice_mut(ndarray::s![
                region.y..region.y + region.d,
                region.x..region.x + region.d
            ]);
            slab += 1.0;
            let mut all = overall.slice_mut(ndarray::s![
                region.y..region.y + region.d,
                region.x..region.x + region.d
            ]);
            all += 1.0;
        }
    }
    let n = records.len().max(1) as f64;
    for m in per_step.iter_mut() {
        m.mapv_inplace(|v| v / n);
    }
    overall.mapv_inplace(|v| v / n);
    Ok(GlimpseMap {
        per_step,
        overall,
        records: records.len(),
    })
}

fn gray_to_pixels(map: &Array2<f64>) -> Pixels {
    let (h, w) = map.dim();
    Pixels::from_shape_fn((h, w, 3), |(y, x, _)| map[[y, x]].clamp(0.0, 1.0))
}

/// Write the overall and per-step maps as PNGs (raw and max-normalized)
/// plus a JSON summary.
pub fn export_glimpse_map(map: &GlimpseMap, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    save_png(&gray_to_pixels(&map.overall), &dir.join("map_overall_raw.png"))?;
    save_png(
        &gray_to_pixels(&map.max_normalized(&map.overall)),
        &dir.join("map_overall_norm.png"),
    )?;
    for (t, m) in map.per_step.iter().enumerate() {
        save_png(&gray_to_pixels(m), &dir.join(format!("map_step{:02}_raw.png", t + 1)))?;
        save_png(
            &gray_to_pixels(&map.max_normalized(m)),
            &dir.join(format!("map_step{:02}_norm.png", t + 1)),
        )?;
    }
    let summary = serde_json::json!({
        "records": map.records,
        "mean_coverage": map.mean_coverage(),
        "steps": map.per_step.len(),
    });
    std::fs::write(dir.join("map_summary.json"), serde_json::to_string_pretty(&summary)?)
        .map_err(io_err(dir.join("map_summary.json")))?;
    Ok(())
}

/// Paste everything the model saw back into scene space; unobserved pixels
/// stay mid-gray so coverage is unambiguous.
pub fn visible_composite(record: &EpisodeRecord, scene: &SceneImage) -> Pixels {
    let (h, w, c) = scene.pixels.dim();
    let mut canvas = Pixels::from_elem((h, w, c), 0.5);
    for region in &record.regions {
        // what the camera stored: the region resampled to the sensor
        let cropped = crop(scene.pixels.view(), region.x, region.y, region.d);
        let sensor = resize_antialiased(cropped.view(), record.d_cam);
        paste_resized(&mut canvas, sensor.view(), region.x, region.y, region.d);
    }
    canvas
}

/// Smooth preview: after pasting the captures, flood unobserved pixels
/// from their nearest observed neighbours (iterative dilation).
pub fn interpolated_preview(record: &EpisodeRecord, scene: &SceneImage) -> Pixels {
    let (h, w, c) = scene.pixels.dim();
    let mut canvas = Pixels::zeros((h, w, c));
    let mut known = Array2::<bool>::from_elem((h, w), false);
    for region in &record.regions {
        let cropped = crop(scene.pixels.view(), region.x, region.y, region.d);
        let sensor = resize_antialiased(cropped.view(), record.d_cam);
        paste_resized(&mut canvas, sensor.view(), region.x, region.y, region.d);
        known
            .slice_mut(ndarray::s![region.y..region.y + region.d, region.x..region.x + region.d])
            .fill(true);
    }
    // dilate until everything is filled (or nothing was observed)
    if known.iter().any(|&k| k) {
        while known.iter().any(|&k| !k) {
            let snapshot = known.clone();
            for y in 0..h {
                for x in 0..w {
                    if snapshot[[y, x]] {
                        continue;
                    }
                    let mut acc = vec![0.0; c];
                    let mut cnt = 0usize;
                    for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w
                            && snapshot[[ny as usize, nx as usize]]
                        {
                            for ch in 0..c {
                                acc[ch] += canvas[[ny as usize, nx as usize, ch]];
                            }
                            cnt += 1;
                        }
                    }
                    if cnt > 0 {
                        for ch in 0..c {
                            canvas[[y, x, ch]] = acc[ch] / cnt as f64;
                        }
                        known[[y, x]] = true;
                    }
                }
            }
        }
    }
    canvas
}

/// Write the full trajectory bundle: per-step overlays, the visible-pixel
/// composite (optionally an interpolated preview), a caption, and the raw
/// record JSON. Identical records produce byte-identical JSON.
pub fn export_trajectory(
    record: &EpisodeRecord,
    scene: &SceneImage,
    dir: &Path,
    interpolated: bool,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    for t in 1..=record.regions.len() {
        let mut frame = scene.pixels.clone();
        for (i, region) in record.regions[..t].iter().enumerate() {
            let color = if i + 1 == t { [1.0, 0.1, 0.1] } else { [0.1, 0.9, 0.1] };
            draw_rect(&mut frame, region.x, region.y, region.d, color);
        }
        save_png(&frame, &dir.join(format!("step{t:02}_overlay.png")))?;
    }

    save_png(&visible_composite(record, scene), &dir.join("visible.png"))?;
    if interpolated {
        save_png(&interpolated_preview(record, scene), &dir.join("preview.png"))?;
    }

    let caption = match &record.final_prediction {
        Some(p) => match (p.label, p.probability, p.rmse) {
            (Some(l), Some(prob), _) => format!("predicted class {l} with probability {prob:.4}\n"),
            (_, _, Some(r)) => format!("reconstruction rmse {r:.6}\n"),
            _ => "no prediction\n".to_string(),
        },
        None => "no prediction\n".to_string(),
    };
    std::fs::write(dir.join("caption.txt"), caption).map_err(io_err(dir.join("caption.txt")))?;

    std::fs::write(dir.join("record.json"), record.to_json()?)
        .map_err(io_err(dir.join("record.json")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{FinalPrediction, GlimpseAction, Region, StopReason};
    use ndarray::Array3;

    fn record(regions: Vec<Region>, h: usize, w: usize, d_cam: usize) -> EpisodeRecord {
        let n = regions.len();
        EpisodeRecord {
            scene_id: "s".into(),
            scene_h: h,
            scene_w: w,
            d_cam,
            actions: vec![GlimpseAction::new(0.0, 0.0, 0.0); n],
            regions,
            loss_initial: 1.0,
            losses: (0..n).map(|i| 1.0 - 0.1 * (i + 1) as f64).collect(),
            rewards: vec![0.1; n],
            stop_reason: StopReason::MaxSteps,
            final_prediction: Some(FinalPrediction {
                logits: None,
                label: Some(3),
                probability: Some(0.9),
                rmse: None,
            }),
            capture_pixels_b64: None,
        }
    }

    #[test]
    fn single_full_scene_glimpse_gives_uniform_unit_map() {
        let rec = record(vec![Region { x: 0, y: 0, d: 8 }], 8, 8, 8);
        let map = accumulate_glimpse_map(&[rec], 8, 8).unwrap();
        assert!(map.overall.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!((map.mean_coverage() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_glimpse_mass_matches_area_arithmetic() {
        let rec = record(
            vec![Region { x: 0, y: 0, d: 2 }, Region { x: 4, y: 4, d: 2 }],
            8,
            8,
            2,
        );
        let map = accumulate_glimpse_map(&[rec], 8, 8).unwrap();
        // sum d_i^2 / (H W N) = (4 + 4) / 64
        assert!((map.mean_coverage() - 8.0 / 64.0).abs() < 1e-12);
    }

    #[test]
    fn three_episode_fixture_matches_hand_counted_overlap() {
        // 8x8 scene; episodes observe: A) whole top-left 4x4, B) same 4x4,
        // C) the 2x2 at (6, 6). Hand count: pixels in the 4x4 get 2/3,
        // bottom 2x2 gets 1/3, rest 0.
        let recs = vec![
            record(vec![Region { x: 0, y: 0, d: 4 }], 8, 8, 4),
            record(vec![Region { x: 0, y: 0, d: 4 }], 8, 8, 4),
            record(vec![Region { x: 6, y: 6, d: 2 }], 8, 8, 2),
        ];
        let map = accumulate_glimpse_map(&recs, 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expect = if y < 4 && x < 4 {
                    2.0 / 3.0
                } else if y >= 6 && x >= 6 {
                    1.0 / 3.0
                } else {
                    0.0
                };
                assert!(
                    (map.overall[[y, x]] - expect).abs() < 1e-12,
                    "pixel ({y},{x}): {} vs {expect}",
                    map.overall[[y, x]]
                );
            }
        }
        // per-step map for t=1 matches the overall here (single-glimpse episodes)
        assert_eq!(map.per_step.len(), 1);
        for (a, b) in map.per_step[0].iter().zip(map.overall.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_is_gray_with_no_captures_and_respects_regions() {
        let scene = SceneImage::new("s", Array3::from_elem((16, 16, 3), 0.9));
        let rec = record(vec![], 16, 16, 4);
        let comp = visible_composite(&rec, &scene);
        assert!(comp.iter().all(|&v| (v - 0.5).abs() < 1e-12), "all gray");

        let rec2 = record(vec![Region { x: 2, y: 3, d: 4 }], 16, 16, 4);
        let comp2 = visible_composite(&rec2, &scene);
        // inside the region: scene value; outside: gray
        assert!((comp2[[3, 2, 0]] - 0.9).abs() < 1e-12);
        assert!((comp2[[0, 0, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zoomed_region_is_sharper_than_wide_view_in_composite() {
        // scene with fine detail; one widest-view glimpse then one zoomed
        // glimpse over a sub-region. Inside the zoomed region the composite
        // must match the scene better than outside it.
        let scene = SceneImage::new(
            "s",
            Array3::from_shape_fn((64, 64, 3), |(y, x, _)| {
                if (x + y) % 2 == 0 {
                    1.0
                } else {
                    0.0
                }
            }),
        );
        let rec = record(
            vec![Region { x: 0, y: 0, d: 64 }, Region { x: 8, y: 8, d: 16 }],
            64,
            64,
            16,
        );
        let comp = visible_composite(&rec, &scene);
        let mut err_in = 0.0;
        let mut n_in = 0usize;
        let mut err_out = 0.0;
        let mut n_out = 0usize;
        for y in 0..64 {
            for x in 0..64 {
                let e: f64 = (0..3)
                    .map(|c| (comp[[y, x, c]] - scene.pixels[[y, x, c]]).powi(2))
                    .sum();
                if (8..24).contains(&x) && (8..24).contains(&y) {
                    err_in += e;
                    n_in += 1;
                } else {
                    err_out += e;
                    n_out += 1;
                }
            }
        }
        let mean_in = err_in / n_in as f64;
        let mean_out = err_out / n_out as f64;
        assert!(
            mean_in < mean_out,
            "zoomed region error {mean_in} should beat wide-view error {mean_out}"
        );
    }

    #[test]
    fn export_trajectory_writes_expected_files_and_stable_json() {
        let dir = std::env::temp_dir().join(format!("avex-vis-test-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let scene = SceneImage::new("s", Array3::from_elem((16, 16, 3), 0.4));
        let rec = record(vec![Region { x: 1, y: 1, d: 8 }], 16, 16, 8);
        export_trajectory(&rec, &scene, &dir, true).unwrap();
        for f in ["step01_overlay.png", "visible.png", "preview.png", "caption.txt", "record.json"] {
            assert!(dir.join(f).exists(), "missing {f}");
        }
        let a = std::fs::read(dir.join("record.json")).unwrap();
        export_trajectory(&rec, &scene, &dir, true).unwrap();
        let b = std::fs::read(dir.join("record.json")).unwrap();
        assert_eq!(a, b, "identical record must export byte-identical JSON");
        let _ = std::fs::remove_dir_all(&dir);
    }
}
