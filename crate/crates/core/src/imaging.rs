//! Pixel-level helpers on `(H, W, C)` f64 arrays in `[0, 1]`: cropping,
//! bilinear resampling, area-averaged downscaling, PNG import/export, and
//! rectangle overlays.

use std::path::Path;

use ndarray::{Array3, ArrayView3};

use crate::error::{io_err, AvexError, Result};

pub type Pixels = Array3<f64>;

/// Exact crop; caller guarantees bounds.
pub fn crop(src: ArrayView3<'_, f64>, x: usize, y: usize, side: usize) -> Pixels {
    src.slice(ndarray::s![y..y + side, x..x + side, ..]).to_owned()
}

/// Bilinear resample with pixel-center alignment. Used on its own for
/// upscaling; downscales should go through [`resize_antialiased`].
pub fn resize_bilinear(src: ArrayView3<'_, f64>, out_h: usize, out_w: usize) -> Pixels {
    let (h, w, c) = src.dim();
    let mut out = Array3::<f64>::zeros((out_h, out_w, c));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let top = src[[y0, x0, ch]] * (1.0 - wx) + src[[y0, x1, ch]] * wx;
                let bot = src[[y1, x0, ch]] * (1.0 - wx) + src[[y1, x1, ch]] * wx;
                out[[oy, ox, ch]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Area-averaged downscale: each output pixel is the overlap-weighted mean
/// of the source pixels it covers. Exact for integer ratios.
pub fn downscale_area(src: ArrayView3<'_, f64>, out_h: usize, out_w: usize) -> Pixels {
    let (h, w, c) = src.dim();
    debug_assert!(out_h <= h && out_w <= w);
    let mut out = Array3::<f64>::zeros((out_h, out_w, c));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let y_lo = oy as f64 * sy;
        let y_hi = (oy + 1) as f64 * sy;
        let iy0 = y_lo.floor() as usize;
        let iy1 = (y_hi.ceil() as usize).min(h);
        for ox in 0..out_w {
            let x_lo = ox as f64 * sx;
            let x_hi = (ox + 1) as f64 * sx;
            let ix0 = x_lo.floor() as usize;
            let ix1 = (x_hi.ceil() as usize).min(w);
            let mut acc = vec![0.0; c];
            let mut area = 0.0;
            for iy in iy0..iy1 {
                let oy_cov = (y_hi.min((iy + 1) as f64) - y_lo.max(iy as f64)).max(0.0);
                for ix in ix0..ix1 {
                    let ox_cov = (x_hi.min((ix + 1) as f64) - x_lo.max(ix as f64)).max(0.0);
                    let wgt = oy_cov * ox_cov;
                    if wgt > 0.0 {
                        area += wgt;
                        for ch in 0..c {
                            acc[ch] += src[[iy, ix, ch]] * wgt;
                        }
                    }
                }
            }
            for ch in 0..c {
                out[[oy, ox, ch]] = acc[ch] / area;
            }
        }
    }
    out
}

/// Resample to a square target: identity when sides match, area averaging
/// when shrinking, bilinear when growing.
pub fn resize_antialiased(src: ArrayView3<'_, f64>, out_side: usize) -> Pixels {
    let (h, w, _) = src.dim();
    if h == out_side && w == out_side {
        return src.to_owned();
    }
    if out_side <= h.min(w) {
        downscale_area(src, out_side, out_side)
    } else {
        resize_bilinear(src, out_side, out_side)
    }
}

/// Paste `patch` (resampled to `side`) into `dst` at `(x, y)`.
pub fn paste_resized(dst: &mut Pixels, patch: ArrayView3<'_, f64>, x: usize, y: usize, side: usize) {
    let resized = if patch.dim().0 == side && patch.dim().1 == side {
        patch.to_owned()
    } else if side <= patch.dim().0.min(patch.dim().1) {
        downscale_area(patch, side, side)
    } else {
        resize_bilinear(patch, side, side)
    };
    dst.slice_mut(ndarray::s![y..y + side, x..x + side, ..]).assign(&resized);
}

/// Draw a 1-pixel rectangle outline in the given RGB colour.
pub fn draw_rect(img: &mut Pixels, x: usize, y: usize, side: usize, color: [f64; 3]) {
    let (h, w, c) = img.dim();
    let x1 = (x + side).min(w).saturating_sub(1);
    let y1 = (y + side).min(h).saturating_sub(1);
    for xx in x..=x1 {
        for ch in 0..c.min(3) {
            img[[y, xx, ch]] = color[ch];
            img[[y1, xx, ch]] = color[ch];
        }
    }
    for yy in y..=y1 {
        for ch in 0..c.min(3) {
            img[[yy, x, ch]] = color[ch];
            img[[yy, x1, ch]] = color[ch];
        }
    }
}

pub fn save_png(img: &Pixels, path: &Path) -> Result<()> {
    let (h, w, c) = img.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| -> u8 {
                let v = if c > ch { img[[y, x, ch]] } else { img[[y, x, 0]] };
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path)
        .map_err(|e| AvexError::Dataset(format!("png write {}: {e}", path.display())))
}

pub fn load_png(path: &Path) -> Result<Pixels> {
    let img = image::open(path)
        .map_err(|e| AvexError::Dataset(format!("image read {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x, y);
            for ch in 0..3 {
                out[[y as usize, x as usize, ch]] = p.0[ch] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

pub fn write_string(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(io_err(path))
}
