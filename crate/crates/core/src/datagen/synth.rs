use crate::error::{Error, Result};
use crate::parallel;
use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Pool of grayscale source images that samples are cut from.
#[derive(Debug, Clone)]
pub struct SourcePool {
    images: Vec<GrayImage>,
}

impl SourcePool {
    pub fn new(images: Vec<GrayImage>) -> Self {
        Self { images }
    }

    /// `count` procedural textures of side `size`.
    pub fn procedural(count: usize, size: u32, seed: u64) -> Self {
        let images = parallel::map_range(count, |i| procedural_source(size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)));
        Self { images }
    }

    /// Loads every PNG/JPEG in `dir` (sorted by file name), converting to
    /// luminance with weights 0.299, 0.587, 0.114.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                    Some("png" | "jpg" | "jpeg")
                )
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::DatasetMissing(dir.to_path_buf()));
        }
        let images = paths
            .iter()
            .map(|p| Ok(luminance(&image::open(p)?.to_rgb8())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[GrayImage] {
        &self.images
    }
}

pub fn luminance(rgb: &image::RgbImage) -> GrayImage {
    GrayImage::from_fn(rgb.width(), rgb.height(), |x, y| {
        let [r, g, b] = rgb.get_pixel(x, y).0;
        Luma([(0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round().clamp(0.0, 255.0) as u8])
    })
}

/// Value noise on a `cells x cells` lattice with smoothstep interpolation.
fn value_noise(size: u32, cells: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = cells as usize + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let step = size as f64 / cells as f64;
    let mut out = Vec::with_capacity((size * size) as usize);
    for y in 0..size {
        for x in 0..size {
            let (gx, gy) = (x as f64 / step, y as f64 / step);
            let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
            let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
            let (tx, ty) = (smooth(gx.fract()), smooth(gy.fract()));
            let at = |i: usize, j: usize| lattice[j * n + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Deterministic textured image: multi-octave noise overlaid with random
/// rectangles, ellipses and strokes. Stands in for natural photographs.
pub fn procedural_source(size: u32, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = vec![128.0; (size * size) as usize];
    for (cells, amp) in [(2, 50.0), (5, 30.0), (11, 18.0)] {
        for (c, v) in canvas.iter_mut().zip(value_noise(size, cells, &mut rng)) {
            *c += amp * v;
        }
    }
    let s = size as f64;
    let shapes = 10 + (size / 8) as usize;
    for _ in 0..shapes {
        let level = rng.random_range(0.0..255.0);
        let alpha = rng.random_range(0.5..1.0);
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let (rx, ry) = (rng.random_range(s / 30.0..s / 5.0), rng.random_range(s / 30.0..s / 5.0));
        let kind = rng.random_range(0..3);
        let (sin, cos) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                let inside = match kind {
                    0 => u.abs() <= rx && v.abs() <= ry,
                    1 => (u / rx).powi(2) + (v / ry).powi(2) <= 1.0,
                    _ => v.abs() <= 1.0 + ry / 12.0 && u.abs() <= rx * 1.5,
                };
                if inside {
                    let c = &mut canvas[(y * size + x) as usize];
                    *c = *c * (1.0 - alpha) + level * alpha;
                }
            }
        }
    }
    GrayImage::from_fn(size, size, |x, y| Luma([canvas[(y * size + x) as usize].round().clamp(0.0, 255.0) as u8]))
}
