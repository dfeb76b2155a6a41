//! Minimal line plots: axes, light grid, polyline with square markers.
//! No text; the companion CSV carries the numbers.

use crate::error::{Error, Result};
use image::{Rgb, RgbImage};
use std::path::Path;

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: f64 = 32.0;

fn dot(img: &mut RgbImage, x: f64, y: f64, r: i64, c: Rgb<u8>) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            let (px, py) = (cx + dx, cy + dy);
            if px >= 0 && py >= 0 && (px as u32) < W && (py as u32) < H {
                img.put_pixel(px as u32, py as u32, c);
            }
        }
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), r: i64, c: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        dot(img, x0 + t * (x1 - x0), y0 + t * (y1 - y0), r, c);
    }
}

/// Plots `ys` against `xs` into a PNG at `path`.
pub fn plot_curve(xs: &[f64], ys: &[f64], path: &Path) -> Result<()> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::LengthMismatch(xs.len(), ys.len()));
    }
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            (lo - 1.0, hi + 1.0)
        } else {
            (lo, hi)
        }
    };
    let ((x0, x1), (y0, y1)) = (range(xs), range(ys));
    let y0 = y0.min(0.0);
    let (pw, ph) = (W as f64 - 2.0 * MARGIN, H as f64 - 2.0 * MARGIN);
    let to_px = |x: f64, y: f64| (MARGIN + (x - x0) / (x1 - x0) * pw, H as f64 - MARGIN - (y - y0) / (y1 - y0) * ph);

    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let grid = Rgb([225, 225, 225]);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        line(&mut img, (MARGIN, MARGIN + f * ph), (MARGIN + pw, MARGIN + f * ph), 0, grid);
        line(&mut img, (MARGIN + f * pw, MARGIN), (MARGIN + f * pw, MARGIN + ph), 0, grid);
    }
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (MARGIN, H as f64 - MARGIN), (W as f64 - MARGIN, H as f64 - MARGIN), 0, axis);
    line(&mut img, (MARGIN, MARGIN), (MARGIN, H as f64 - MARGIN), 0, axis);

    let blue = Rgb([31, 90, 180]);
    let pts: Vec<(f64, f64)> = xs.iter().zip(ys).map(|(&x, &y)| to_px(x, y)).collect();
    for w in pts.windows(2) {
        line(&mut img, w[0], w[1], 1, blue);
    }
    for &(x, y) in &pts {
        dot(&mut img, x, y, 3, blue);
    }
    img.save(path)?;
    Ok(())
}
