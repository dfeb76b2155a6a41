//! Synthetic warped pairs and dual pairs sharing one ground-truth homography.
//!
//! Generation follows the oversized-crop rule: the source is resized to
//! `(S + 2m)²` with margin `m = ceil(rho)`, the central `S²` crop is `I_a`,
//! four corner offsets define `H`, and `I_b` is the central crop of the
//! resized source warped by `H⁻¹`, so pixel `p` of `I_b` shows the source
//! content at `H·p` (in crop coordinates).
//!
//! Every random draw comes from a ChaCha stream seeded by the per-sample seed,
//! with one stream per purpose, so changing `delta` or `occlusion_p` never
//! changes the geometry of a sample.

mod io;
mod synth;

pub use io::{read_dataset, write_dataset, Dataset, DatasetHeader, ManifestRecord, MANIFEST};
pub use synth::{procedural_source, SourcePool};

use crate::error::{Error, Result};
use crate::geometry::{
    four_point_to_homography, homography_to_four_point, resample, CornerSet, FourPointOffsets, Homography, Raster,
};
use crate::parallel;
use image::GrayImage;
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const DELTA_MAX: f64 = 32.0;
pub const OCCLUSION_MAX: u32 = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TransformType {
    #[default]
    Full,
    Translation,
    Scale,
    Rotation,
    Perspective,
}

impl fmt::Display for TransformType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TransformType::Full => "full",
            TransformType::Translation => "translation",
            TransformType::Scale => "scale",
            TransformType::Rotation => "rotation",
            TransformType::Perspective => "perspective",
        };
        f.write_str(s)
    }
}

impl FromStr for TransformType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "translation" => Ok(Self::Translation),
            "scale" => Ok(Self::Scale),
            "rotation" => Ok(Self::Rotation),
            "perspective" => Ok(Self::Perspective),
            other => Err(Error::InvalidGenConfig(format!("unknown transform type {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub image_size: u32,
    /// Maximum corner perturbation in pixels.
    pub rho: f64,
    /// Photometric distortion strength.
    pub delta: f64,
    /// Occlusion patch side in pixels; 0 disables occlusion.
    pub occlusion_p: u32,
    pub transform_type: TransformType,
    pub global_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            rho: 32.0,
            delta: 0.0,
            occlusion_p: 0,
            transform_type: TransformType::Full,
            global_seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGenConfig(m));
        if self.image_size == 0 {
            return bad("image_size must be positive".into());
        }
        if !(self.rho >= 0.0 && self.rho <= self.image_size as f64 / 4.0) {
            return bad(format!("rho {} outside [0, image_size/4]", self.rho));
        }
        if !(0.0..=DELTA_MAX).contains(&self.delta) {
            return bad(format!("delta {} outside [0, {DELTA_MAX}]", self.delta));
        }
        if self.occlusion_p > OCCLUSION_MAX.min(self.image_size) {
            return bad(format!("occlusion_p {} outside [0, {}]", self.occlusion_p, OCCLUSION_MAX.min(self.image_size)));
        }
        Ok(())
    }

    /// Side of the resized source: `image_size + 2·ceil(rho)`.
    pub fn source_size(&self) -> u32 {
        self.image_size + 2 * self.margin()
    }

    fn margin(&self) -> u32 {
        self.rho.ceil() as u32
    }

    pub fn reference(&self) -> CornerSet {
        CornerSet::square(self.image_size as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub image_a: GrayImage,
    pub image_b: GrayImage,
    pub gt_offsets: FourPointOffsets,
    pub sample_id: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSample {
    pub pair_ab: SamplePair,
    pub pair_cd: SamplePair,
}

impl DualSample {
    pub fn gt_offsets(&self) -> &FourPointOffsets {
        &self.pair_ab.gt_offsets
    }

    pub fn sample_id(&self) -> u64 {
        self.pair_ab.sample_id
    }

    pub fn seed(&self) -> u64 {
        self.pair_ab.seed
    }
}

/// Independent random streams derived from one per-sample seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Geometry = 0,
    Sources = 1,
    PhotometricAb = 2,
    OcclusionAb = 3,
    PhotometricCd = 4,
    OcclusionCd = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable per-sample seed: independent of generation order and sharding.
pub fn sample_seed(global_seed: u64, sample_id: u64) -> u64 {
    splitmix64(splitmix64(global_seed) ^ sample_id.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Parameters of one restricted transformation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformDraw {
    Independent([f64; 8]),
    Translation(f64, f64),
    Scale(f64),
    Rotation(f64),
}

/// Largest rotation angle (radians) drawn for a given `rho`.
pub fn max_rotation(rho: f64) -> f64 {
    rho * (std::f64::consts::PI / 180.0) * (45.0 / 32.0)
}

/// Corner offsets for a drawn transformation about the reference-square
/// centre, clipped to `[-rho, rho]` per component.
pub fn offsets_for(draw: TransformDraw, image_size: u32, rho: f64) -> FourPointOffsets {
    let reference = CornerSet::square(image_size as f64);
    let [cx, cy] = reference.center();
    let mut out = [[0.0; 2]; 4];
    for (k, o) in out.iter_mut().enumerate() {
        let [x, y] = reference.0[k];
        let (dx, dy) = (x - cx, y - cy);
        *o = match draw {
            TransformDraw::Independent(v) => [v[2 * k], v[2 * k + 1]],
            TransformDraw::Translation(tx, ty) => [tx, ty],
            TransformDraw::Scale(s) => [(s - 1.0) * dx, (s - 1.0) * dy],
            TransformDraw::Rotation(t) => {
                let (sin, cos) = t.sin_cos();
                [cos * dx - sin * dy - dx, sin * dx + cos * dy - dy]
            }
        };
        o[0] = o[0].clamp(-rho, rho);
        o[1] = o[1].clamp(-rho, rho);
    }
    FourPointOffsets(out)
}

fn symmetric<R: Rng>(rng: &mut R, r: f64) -> f64 {
    if r > 0.0 {
        rng.random_range(-r..=r)
    } else {
        0.0
    }
}

/// Draws corner offsets restricted to one transformation family.
pub fn restrict_offsets<R: Rng>(
    transform: TransformType,
    rho: f64,
    image_size: u32,
    rng: &mut R,
) -> FourPointOffsets {
    let half = image_size as f64 / 2.0;
    let draw = match transform {
        TransformType::Full | TransformType::Perspective => {
            TransformDraw::Independent(std::array::from_fn(|_| symmetric(rng, rho)))
        }
        TransformType::Translation => {
            let tx = symmetric(rng, rho);
            TransformDraw::Translation(tx, symmetric(rng, rho))
        }
        TransformType::Scale => TransformDraw::Scale(1.0 + symmetric(rng, rho / half)),
        TransformType::Rotation => TransformDraw::Rotation(symmetric(rng, max_rotation(rho))),
    };
    offsets_for(draw, image_size, rho)
}

fn prepare_source(source: &GrayImage, cfg: &GenConfig) -> Result<GrayImage> {
    let need = cfg.source_size();
    if source.width() < need || source.height() < need {
        return Err(Error::SourceTooSmall { width: source.width(), height: source.height(), required: need });
    }
    if source.width() == need && source.height() == need {
        return Ok(source.clone());
    }
    Ok(image::imageops::resize(source, need, need, image::imageops::FilterType::Triangle))
}

/// Renders `(I_a, I_b)` from `source` for the given offsets, no perturbations.
pub fn render_pair(source: &GrayImage, cfg: &GenConfig, offsets: &FourPointOffsets) -> Result<(GrayImage, GrayImage)> {
    let big = prepare_source(source, cfg)?;
    let (s, m) = (cfg.image_size, cfg.margin());
    let image_a = image::imageops::crop_imm(&big, m, m, s, s).to_image();
    let h = four_point_to_homography(offsets, &cfg.reference())?;
    let to_big = Homography::translation(m as f64, m as f64).compose(&h)?;
    let image_b = resample(&Raster::from_gray(&big), &to_big, (s as usize, s as usize))?.to_gray();
    Ok((image_a, image_b))
}

/// Brightness shift then contrast gain, clamped to `[0, 255]`.
pub fn apply_photometric(image: &GrayImage, shift: f64, contrast: f64) -> GrayImage {
    let mut out = image.clone();
    for p in out.pixels_mut() {
        p.0[0] = ((p.0[0] as f64 + shift) * contrast).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Random brightness in `[-delta, delta]` and contrast in `[1 - delta/128, 1 + delta/128]`.
pub fn photometric_distort<R: Rng>(image: &GrayImage, delta: f64, rng: &mut R) -> GrayImage {
    if delta <= 0.0 {
        return image.clone();
    }
    let shift = rng.random_range(-delta..=delta);
    let contrast = 1.0 + rng.random_range(-delta / 128.0..=delta / 128.0);
    apply_photometric(image, shift, contrast)
}

/// Copies a `p x p` crop of `patch_source` at `src` into `image` at `dst`.
pub fn paste_patch(image: &GrayImage, patch_source: &GrayImage, p: u32, src: (u32, u32), dst: (u32, u32)) -> GrayImage {
    let mut out = image.clone();
    for y in 0..p {
        for x in 0..p {
            out.put_pixel(dst.0 + x, dst.1 + y, *patch_source.get_pixel(src.0 + x, src.1 + y));
        }
    }
    out
}

/// Pastes a random `p x p` crop of `patch_source` at a random location fully inside `image`.
pub fn occlude<R: Rng>(image: &GrayImage, p: u32, patch_source: &GrayImage, rng: &mut R) -> Result<GrayImage> {
    if p == 0 {
        return Ok(image.clone());
    }
    let size = image.width().min(image.height());
    if p > size || p > patch_source.width() || p > patch_source.height() {
        return Err(Error::PatchTooLarge { p, size });
    }
    let src = (rng.random_range(0..=patch_source.width() - p), rng.random_range(0..=patch_source.height() - p));
    let dst = (rng.random_range(0..=image.width() - p), rng.random_range(0..=image.height() - p));
    Ok(paste_patch(image, patch_source, p, src, dst))
}

/// Applies the configured photometric and occlusion perturbations, each to
/// one image of the pair chosen uniformly.
fn perturb(
    mut pair: (GrayImage, GrayImage),
    cfg: &GenConfig,
    seed: u64,
    streams: (Stream, Stream),
    patch_source: Option<&GrayImage>,
) -> Result<(GrayImage, GrayImage)> {
    if cfg.delta > 0.0 {
        let mut rng = stream_rng(seed, streams.0);
        let target = if rng.random_bool(0.5) { &mut pair.1 } else { &mut pair.0 };
        *target = photometric_distort(target, cfg.delta, &mut rng);
    }
    if cfg.occlusion_p > 0 {
        let patch = patch_source.ok_or_else(|| Error::InvalidGenConfig("occlusion needs a patch source".into()))?;
        let mut rng = stream_rng(seed, streams.1);
        let target = if rng.random_bool(0.5) { &mut pair.1 } else { &mut pair.0 };
        *target = occlude(target, cfg.occlusion_p, patch, &mut rng)?;
    }
    Ok(pair)
}

/// Offsets for a sample, drawn from its geometry stream.
pub fn draw_offsets(cfg: &GenConfig, seed: u64) -> FourPointOffsets {
    let mut rng = stream_rng(seed, Stream::Geometry);
    restrict_offsets(cfg.transform_type, cfg.rho, cfg.image_size, &mut rng)
}

/// One warped pair. `patch_source` is required when `occlusion_p > 0`.
pub fn generate_pair(
    source: &GrayImage,
    patch_source: Option<&GrayImage>,
    cfg: &GenConfig,
    sample_id: u64,
    seed: u64,
) -> Result<SamplePair> {
    cfg.validate()?;
    let offsets = draw_offsets(cfg, seed);
    let pair = render_pair(source, cfg, &offsets)?;
    let (image_a, image_b) = perturb(pair, cfg, seed, (Stream::PhotometricAb, Stream::OcclusionAb), patch_source)?;
    Ok(SamplePair { image_a, image_b, gt_offsets: offsets, sample_id, seed })
}

/// Two pairs from different sources sharing one set of offsets.
#[allow(clippy::too_many_arguments)]
pub fn generate_dual(
    source_1: &GrayImage,
    source_2: &GrayImage,
    patch_sources: (Option<&GrayImage>, Option<&GrayImage>),
    cfg: &GenConfig,
    sample_id: u64,
    seed: u64,
) -> Result<DualSample> {
    cfg.validate()?;
    if source_1 == source_2 {
        return Err(Error::SameSource);
    }
    let offsets = draw_offsets(cfg, seed);
    let ab = render_pair(source_1, cfg, &offsets)?;
    let (a, b) = perturb(ab, cfg, seed, (Stream::PhotometricAb, Stream::OcclusionAb), patch_sources.0)?;
    let cd = render_pair(source_2, cfg, &offsets)?;
    let (c, d) = perturb(cd, cfg, seed, (Stream::PhotometricCd, Stream::OcclusionCd), patch_sources.1)?;
    Ok(DualSample {
        pair_ab: SamplePair { image_a: a, image_b: b, gt_offsets: offsets, sample_id, seed },
        pair_cd: SamplePair { image_a: c, image_b: d, gt_offsets: offsets, sample_id, seed },
    })
}

/// Source indices `(first, second, patch_ab, patch_cd)` for one sample.
fn pick_sources(pool_len: usize, seed: u64) -> (usize, usize, usize, usize) {
    let mut rng = stream_rng(seed, Stream::Sources);
    let mut other_than = |i: usize| (i + rng.random_range(1..pool_len)) % pool_len;
    let first = other_than(0);
    let second = other_than(first);
    let patch_ab = other_than(first);
    let patch_cd = other_than(second);
    (first, second, patch_ab, patch_cd)
}

/// Regenerates the dual sample with the given id from the pool.
pub fn generate_dual_from_pool(pool: &SourcePool, cfg: &GenConfig, sample_id: u64) -> Result<DualSample> {
    if pool.len() < 2 {
        return Err(Error::InvalidGenConfig("source pool needs at least two images".into()));
    }
    let seed = sample_seed(cfg.global_seed, sample_id);
    let (i1, i2, p1, p2) = pick_sources(pool.len(), seed);
    let imgs = pool.images();
    generate_dual(&imgs[i1], &imgs[i2], (Some(&imgs[p1]), Some(&imgs[p2])), cfg, sample_id, seed)
}

/// Generates the dual samples `ids` in parallel; output order follows `ids`.
pub fn generate_duals(pool: &SourcePool, cfg: &GenConfig, ids: std::ops::Range<u64>) -> Result<Vec<DualSample>> {
    let start = ids.start;
    let n = ids.end.saturating_sub(ids.start) as usize;
    parallel::try_map_range(n, |i| generate_dual_from_pool(pool, cfg, start + i as u64))
}

/// One of the eight symmetries of the square: bit 0 mirrors x, bit 1 mirrors
/// y, bit 2 swaps the axes. Returns the pixel map `M` with `new(p) = old(M p)`.
fn dihedral_map(k: u8, size: u32) -> Matrix3<f64> {
    let e = size as f64 - 1.0;
    let (fx, tx) = if k & 1 != 0 { (-1.0, e) } else { (1.0, 0.0) };
    let (fy, ty) = if k & 2 != 0 { (-1.0, e) } else { (1.0, 0.0) };
    let flip = Matrix3::new(fx, 0.0, tx, 0.0, fy, ty, 0.0, 0.0, 1.0);
    if k & 4 != 0 {
        flip * Matrix3::new(0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0)
    } else {
        flip
    }
}

pub fn dihedral_image(image: &GrayImage, k: u8) -> GrayImage {
    let s = image.width();
    debug_assert_eq!(s, image.height());
    let m = dihedral_map(k, s);
    GrayImage::from_fn(s, s, |x, y| {
        let (sx, sy) = (m[(0, 0)] * x as f64 + m[(0, 1)] * y as f64 + m[(0, 2)], m[(1, 0)] * x as f64 + m[(1, 1)] * y as f64 + m[(1, 2)]);
        *image.get_pixel(sx as u32, sy as u32)
    })
}

/// The pair seen through symmetry `k`. Since `b(x) = a(H x)`, the transformed
/// images satisfy `b'(x) = a'(M⁻¹ H M x)`; the offsets are re-derived from
/// that conjugate, so they stay exact.
pub fn dihedral_pair(pair: &SamplePair, k: u8) -> Result<SamplePair> {
    if k == 0 {
        return Ok(pair.clone());
    }
    let s = pair.image_a.width();
    let reference = CornerSet::square(s as f64);
    let m = dihedral_map(k, s);
    let h = four_point_to_homography(&pair.gt_offsets, &reference)?;
    let inv = m.try_inverse().expect("symmetries are invertible");
    let conj = Homography::from_matrix(inv * h.matrix() * m)?;
    Ok(SamplePair {
        image_a: dihedral_image(&pair.image_a, k),
        image_b: dihedral_image(&pair.image_b, k),
        gt_offsets: homography_to_four_point(&conj, &reference)?,
        ..pair.clone()
    })
}

/// Applies one symmetry to both pairs, which therefore keep a shared ground truth.
pub fn dihedral_dual(dual: &DualSample, k: u8) -> Result<DualSample> {
    Ok(DualSample { pair_ab: dihedral_pair(&dual.pair_ab, k)?, pair_cd: dihedral_pair(&dual.pair_cd, k)? })
}
