//! Exact homography math: representations, conversions, warping and MACE.
//!
//! Conventions used across the crate:
//!
//! * Corner order is always top-left, top-right, bottom-right, bottom-left.
//! * A reference square of side `s` has corners `(0,0) (s,0) (s,s) (0,s)`.
//! * Homographies are stored normalized so that the bottom-right entry is 1.

use crate::error::{Error, Result};
use crate::parallel;
use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

/// Homogeneous `w` below this magnitude is treated as the line at infinity.
pub const W_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0) }
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Self { m: Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0) }
    }

    /// Wraps a raw matrix, normalizing it. Fails if the matrix is singular.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) || is_singular(&m) {
            return Err(Error::SingularHomography);
        }
        Ok(Self { m: normalize(m) })
    }

    pub fn from_row_major(v: &[f64; 9]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_row_slice(v))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.m[(r, c)];
            }
        }
        out
    }

    pub fn invert(&self) -> Result<Self> {
        if is_singular(&self.m) {
            return Err(Error::SingularHomography);
        }
        let inv = self.m.try_inverse().ok_or(Error::SingularHomography)?;
        Self::from_matrix(inv)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_matrix(self.m * other.m)
    }

    pub fn apply(&self, p: Point) -> Result<Point> {
        project(&self.m, p)
    }

    /// Space-separated row-major decimals (shortest round-trip form).
    pub fn to_decimal_line(&self) -> String {
        join_decimals(&self.to_row_major())
    }

    pub fn parse_decimal_line(line: &str) -> Result<Self> {
        let v = parse_decimals::<9>(line)?;
        Self::from_row_major(&v)
    }
}

fn normalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let scale = m.amax();
    let br = m[(2, 2)];
    if br.abs() > 1e-12 * scale {
        m / br
    } else {
        // Bottom-right is (numerically) zero: fall back to unit Frobenius norm.
        m / m.norm()
    }
}

fn is_singular(m: &Matrix3<f64>) -> bool {
    let scale = m.amax();
    scale == 0.0 || m.determinant().abs() <= 1e-14 * scale.powi(3)
}

fn project(m: &Matrix3<f64>, p: Point) -> Result<Point> {
    let v = m * Vector3::new(p[0], p[1], 1.0);
    if v.z.abs() < W_EPS {
        return Err(Error::PointAtInfinity(v.z));
    }
    Ok([v.x / v.z, v.y / v.z])
}

/// Projects every point through `h`.
pub fn apply_homography(h: &Homography, points: &[Point]) -> Result<Vec<Point>> {
    points.iter().map(|&p| h.apply(p)).collect()
}

/// Displacements of the four reference corners, in TL, TR, BR, BL order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FourPointOffsets(pub [Point; 4]);

impl FourPointOffsets {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn uniform(dx: f64, dy: f64) -> Self {
        Self([[dx, dy]; 4])
    }

    /// `TL.x TL.y TR.x TR.y BR.x BR.y BL.x BL.y`
    pub fn to_flat(&self) -> [f64; 8] {
        let mut out = [0.0; 8];
        for (i, p) in self.0.iter().enumerate() {
            out[2 * i] = p[0];
            out[2 * i + 1] = p[1];
        }
        out
    }

    pub fn from_flat(v: &[f64]) -> Self {
        assert_eq!(v.len(), 8, "four-point offsets need exactly 8 values");
        let mut c = [[0.0; 2]; 4];
        for (i, p) in c.iter_mut().enumerate() {
            *p = [v[2 * i], v[2 * i + 1]];
        }
        Self(c)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.map(|p| [p[0] * s, p[1] * s]))
    }

    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_decimal_line(&self) -> String {
        join_decimals(&self.to_flat())
    }

    pub fn parse_decimal_line(line: &str) -> Result<Self> {
        Ok(Self::from_flat(&parse_decimals::<8>(line)?))
    }
}

/// Four pixel positions in TL, TR, BR, BL order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSet(pub [Point; 4]);

impl CornerSet {
    /// Corners of the `size x size` reference square.
    pub fn square(size: f64) -> Self {
        Self([[0.0, 0.0], [size, 0.0], [size, size], [0.0, size]])
    }

    pub fn center(&self) -> Point {
        let s = self.0.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        [s[0] / 4.0, s[1] / 4.0]
    }

    pub fn displaced(&self, offsets: &FourPointOffsets) -> CornerSet {
        let mut c = self.0;
        for (p, o) in c.iter_mut().zip(offsets.0.iter()) {
            p[0] += o[0];
            p[1] += o[1];
        }
        CornerSet(c)
    }

    /// True when some three corners are (numerically) collinear.
    pub fn is_degenerate(&self) -> bool {
        let pts = &self.0;
        let extent = pts
            .iter()
            .flat_map(|a| pts.iter().map(move |b| (a[0] - b[0]).abs().max((a[1] - b[1]).abs())))
            .fold(0.0, f64::max);
        if !extent.is_finite() || extent == 0.0 {
            return true;
        }
        let tol = 1e-10 * extent * extent;
        const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
        TRIPLES.iter().any(|&[i, j, k]| {
            let (a, b, c) = (pts[i], pts[j], pts[k]);
            let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
            cross.abs() <= tol
        })
    }
}

/// Similarity transform moving the centroid to the origin with mean distance √2.
fn conditioning(pts: &[Point; 4]) -> Matrix3<f64> {
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / 4.0;
    let mean = pts.iter().map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / 4.0;
    let s = if mean > 0.0 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Homography mapping each reference corner to `reference + offsets`.
///
/// Solved as the square 8x8 DLT system (bottom-right fixed to 1) on
/// conditioned coordinates.
pub fn four_point_to_homography(
    offsets: &FourPointOffsets,
    reference: &CornerSet,
) -> Result<Homography> {
    let dst = reference.displaced(offsets);
    if reference.is_degenerate() || dst.is_degenerate() {
        return Err(Error::DegenerateCorners);
    }
    let ts = conditioning(&reference.0);
    let td = conditioning(&dst.0);
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut rhs = SVector::<f64, 8>::zeros();
    for k in 0..4 {
        let [x, y] = project(&ts, reference.0[k])?;
        let [u, v] = project(&td, dst.0[k])?;
        let r = 2 * k;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        rhs[r] = u;
        rhs[r + 1] = v;
    }
    let h = a.lu().solve(&rhs).ok_or(Error::DegenerateCorners)?;
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateCorners);
    }
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    let td_inv = td.try_inverse().ok_or(Error::DegenerateCorners)?;
    Homography::from_matrix(td_inv * hn * ts).map_err(|_| Error::DegenerateCorners)
}

/// Offsets of the projected reference corners.
pub fn homography_to_four_point(h: &Homography, reference: &CornerSet) -> Result<FourPointOffsets> {
    let mut out = [[0.0; 2]; 4];
    for (o, &r) in out.iter_mut().zip(reference.0.iter()) {
        let p = h.apply(r)?;
        *o = [p[0] - r[0], p[1] - r[1]];
    }
    Ok(FourPointOffsets(out))
}

/// Row-major grayscale raster with `f64` intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_gray(img: &image::GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&v| v as f64).collect(),
        }
    }

    /// Rounds and clamps to 8-bit.
    pub fn to_gray(&self) -> image::GrayImage {
        let raw = self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("raster dimensions match buffer")
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample; neighbours outside the raster contribute zero.
    pub fn sample_bilinear(&self, sx: f64, sy: f64) -> f64 {
        if !(sx > -1.0 && sy > -1.0 && sx < self.width as f64 && sy < self.height as f64) {
            return 0.0;
        }
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = sx - x0;
        let fy = sy - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let mut acc = 0.0;
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            let y = y0 + dy;
            if wy == 0.0 || y < 0 || y >= self.height as i64 {
                continue;
            }
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let x = x0 + dx;
                if wx == 0.0 || x < 0 || x >= self.width as i64 {
                    continue;
                }
                acc += wy * wx * self.data[y as usize * self.width + x as usize];
            }
        }
        acc
    }
}

/// Output pixel `(x, y)` takes the bilinear sample of `image` at `H⁻¹·(x, y)`;
/// sources off the raster (or at infinity) give 0.
pub fn warp_image(image: &Raster, h: &Homography, out_size: (usize, usize)) -> Result<Raster> {
    if image.width == 0 || image.height == 0 {
        return Err(Error::EmptyInput);
    }
    resample(image, &h.invert()?, out_size)
}

/// Output pixel `(x, y)` takes the bilinear sample of `image` at `source_map·(x, y)`.
pub fn resample(image: &Raster, source_map: &Homography, out_size: (usize, usize)) -> Result<Raster> {
    if image.width == 0 || image.height == 0 {
        return Err(Error::EmptyInput);
    }
    let m = *source_map.matrix();
    let (out_h, out_w) = out_size;
    let mut out = Raster::zeros(out_w, out_h);
    if out_w == 0 {
        return Ok(out);
    }
    parallel::for_each_chunk_mut(&mut out.data, out_w, |y, row| {
        for (x, px) in row.iter_mut().enumerate() {
            let v = m * Vector3::new(x as f64, y as f64, 1.0);
            *px = if v.z.abs() < W_EPS { 0.0 } else { image.sample_bilinear(v.x / v.z, v.y / v.z) };
        }
    });
    Ok(out)
}

/// Euclidean error of each displaced corner.
pub fn corner_errors(pred: &FourPointOffsets, gt: &FourPointOffsets) -> [f64; 4] {
    let mut e = [0.0; 4];
    for (k, e) in e.iter_mut().enumerate() {
        // ‖(ref + p) − (ref + g)‖ = ‖p − g‖ for a shared reference.
        *e = (pred.0[k][0] - gt.0[k][0]).hypot(pred.0[k][1] - gt.0[k][1]);
    }
    e
}

/// Mean over samples of the per-sample mean corner error.
pub fn mace(pred: &[FourPointOffsets], gt: &[FourPointOffsets]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    let per_sample: Vec<f64> =
        pred.iter().zip(gt).map(|(p, g)| corner_errors(p, g).iter().sum::<f64>() / 4.0).collect();
    mean_of(&per_sample)
}

/// MACE from stored per-sample average corner errors.
pub fn mean_of(per_sample: &[f64]) -> Result<f64> {
    if per_sample.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

fn join_decimals(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

fn parse_decimals<const N: usize>(line: &str) -> Result<[f64; N]> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::CorruptManifest { line: 0, reason: e.to_string() })?;
    vals.try_into().map_err(|v: Vec<f64>| Error::CorruptManifest {
        line: 0,
        reason: format!("expected {N} decimals, found {}", v.len()),
    })
}
