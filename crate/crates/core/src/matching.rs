//! Parameter-free feature matching: the all-pairs cost volume.
//!
//! For feature maps with `h * w` cells of `D` channels, entry `(i, j)` of the
//! 2D form is the dot product of source cell `i` and target cell `j` divided
//! by `D`. The 3D form is `h x w x hw`: spatial position `(i / w, i % w)`
//! holds row `i`, channels enumerate target cells in row-major order. In
//! row-major memory both forms share one buffer.

use crate::error::{Error, Result};
use crate::real::Real;

/// Channel-ordering tag recorded in checkpoints.
pub const CHANNEL_ORDERING: &str = "row-major-target-cells";

/// `h x w x D` feature map, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<T>) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::BadShape(format!("feature map {h}x{w}x{d} has an empty axis")));
        }
        if data.len() != h * w * d {
            return Err(Error::ShapeMismatch(format!(
                "feature map {h}x{w}x{d} needs {} values, got {}",
                h * w * d,
                data.len()
            )));
        }
        Ok(Self { h, w, d, data })
    }

    /// Converts a channel-first `D x h x w` buffer.
    pub fn from_chw(d: usize, h: usize, w: usize, chw: &[T]) -> Result<Self> {
        let mut data = vec![T::zero(); h * w * d];
        for c in 0..d {
            for i in 0..h * w {
                data[i * d + c] = chw[c * h * w + i];
            }
        }
        Self::new(h, w, d, data)
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn vector(&self, cell: usize) -> &[T] {
        &self.data[cell * self.d..(cell + 1) * self.d]
    }
}

/// Cost volume over an `h x w` grid; `data` is the `hw x hw` 2D form.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> CostVolume<T> {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn at2d(&self, i: usize, j: usize) -> T {
        self.data[i * self.cells() + j]
    }

    pub fn at3d(&self, y: usize, x: usize, j: usize) -> T {
        self.at2d(y * self.w + x, j)
    }

    pub fn to_3d(&self) -> CostVolume3d<T> {
        reshape_2d_to_3d(&self.data, self.cells(), self.h, self.w).expect("consistent volume")
    }

    pub fn transpose(&self) -> CostVolume<T> {
        let n = self.cells();
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                data[j * n + i] = self.data[i * n + j];
            }
        }
        CostVolume { h: self.h, w: self.w, data }
    }
}

/// `h x w x channels` array (channel-last).
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume3d<T> {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Copy> CostVolume3d<T> {
    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.w + x) * self.channels + c]
    }
}

/// Reshapes a `rows x rows` matrix (row-major) into `h x w x rows`.
pub fn reshape_2d_to_3d<T: Copy>(data2d: &[T], rows: usize, h: usize, w: usize) -> Result<CostVolume3d<T>> {
    if rows != h * w || data2d.len() != rows * rows {
        return Err(Error::ShapeMismatch(format!(
            "2D volume with {} entries ({rows} rows) cannot be viewed as {h}x{w}x{}",
            data2d.len(),
            h * w
        )));
    }
    let mut data = Vec::with_capacity(data2d.len());
    for i in 0..rows {
        let (y, x) = (i / w, i % w);
        debug_assert_eq!(y * w + x, i);
        data.extend_from_slice(&data2d[i * rows..(i + 1) * rows]);
    }
    Ok(CostVolume3d { h, w, channels: rows, data })
}

/// Inverse of [`reshape_2d_to_3d`].
pub fn reshape_3d_to_2d<T: Copy>(vol: &CostVolume3d<T>) -> Result<Vec<T>> {
    let n = vol.h * vol.w;
    if vol.channels != n || vol.data.len() != n * n {
        return Err(Error::ShapeMismatch(format!(
            "3D volume {}x{}x{} is not square in cells",
            vol.h, vol.w, vol.channels
        )));
    }
    let mut out = Vec::with_capacity(n * n);
    for y in 0..vol.h {
        for x in 0..vol.w {
            for c in 0..vol.channels {
                out.push(vol.at(y, x, c));
            }
        }
    }
    Ok(out)
}

/// Strided view of `cells x channels` features.
#[derive(Debug, Clone, Copy)]
pub struct FeatureView<'a, T> {
    pub data: &'a [T],
    pub cells: usize,
    pub channels: usize,
    pub cell_stride: usize,
    pub channel_stride: usize,
}

impl<'a, T> FeatureView<'a, T> {
    pub fn channel_last(data: &'a [T], cells: usize, channels: usize) -> Self {
        Self { data, cells, channels, cell_stride: channels, channel_stride: 1 }
    }

    pub fn channel_first(data: &'a [T], cells: usize, channels: usize) -> Self {
        Self { data, cells, channels, cell_stride: 1, channel_stride: cells }
    }

    fn extent(&self) -> usize {
        if self.cells == 0 || self.channels == 0 {
            0
        } else {
            (self.cells - 1) * self.cell_stride + (self.channels - 1) * self.channel_stride + 1
        }
    }
}

/// `out[i*rs + j*cs] = alpha * <a_i, b_j> / D + beta * out[..]`, one GEMM.
///
/// Shared by [`cost_volume`] and the autograd correlation op.
pub fn correlate_into<T: Real>(
    a: FeatureView<'_, T>,
    b: FeatureView<'_, T>,
    alpha: T,
    beta: T,
    out: &mut [T],
    out_row_stride: usize,
    out_col_stride: usize,
) {
    assert_eq!(a.channels, b.channels);
    assert!(a.data.len() >= a.extent() && b.data.len() >= b.extent());
    let (m, n, k) = (a.cells, b.cells, a.channels);
    if m == 0 || n == 0 {
        return;
    }
    assert!(out.len() > (m - 1) * out_row_stride + (n - 1) * out_col_stride);
    let scale = alpha / T::of(k as f64);
    // SAFETY: extents checked above; `out` is uniquely borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            scale,
            a.data.as_ptr(),
            a.cell_stride as isize,
            a.channel_stride as isize,
            b.data.as_ptr(),
            b.channel_stride as isize,
            b.cell_stride as isize,
            beta,
            out.as_mut_ptr(),
            out_row_stride as isize,
            out_col_stride as isize,
        );
    }
}

/// All-pairs correlation cost volume between two same-shape feature maps.
pub fn cost_volume<T: Real>(fa: &FeatureMap<T>, fb: &FeatureMap<T>) -> Result<CostVolume<T>> {
    if (fa.h, fa.w, fa.d) != (fb.h, fb.w, fb.d) {
        return Err(Error::ShapeMismatch(format!(
            "feature maps {}x{}x{} and {}x{}x{}",
            fa.h, fa.w, fa.d, fb.h, fb.w, fb.d
        )));
    }
    let n = fa.cells();
    let mut data = vec![T::zero(); n * n];
    correlate_into(
        FeatureView::channel_last(&fa.data, n, fa.d),
        FeatureView::channel_last(&fb.data, n, fb.d),
        T::one(),
        T::zero(),
        &mut data,
        n,
        1,
    );
    Ok(CostVolume { h: fa.h, w: fa.w, data })
}

/// Min-max normalized 8-bit rendering of a `rows x cols` matrix.
pub fn heatmap<T: Real>(data: &[T], rows: usize, cols: usize) -> image::GrayImage {
    assert_eq!(data.len(), rows * cols);
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.f64()), hi.max(v.f64())));
    let span = hi - lo;
    let raw = data
        .iter()
        .map(|v| if span > 0.0 { ((v.f64() - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    image::GrayImage::from_raw(cols as u32, rows as u32, raw).expect("heatmap buffer")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_half() {
        let f = FeatureMap::new(1, 1, 2, vec![1.0f64, 0.0]).unwrap();
        let c = cost_volume(&f, &f).unwrap();
        assert_eq!(c.data, vec![0.5]);
    }

    #[test]
    fn all_ones_give_ones() {
        let f = FeatureMap::new(3, 2, 4, vec![1.0f64; 24]).unwrap();
        let c = cost_volume(&f, &f).unwrap();
        assert!(c.data.iter().all(|&v| v == 1.0));
        assert_eq!(c.data.len(), 36);
    }

    #[test]
    fn shape_errors() {
        let a = FeatureMap::new(2, 2, 3, vec![0.0f64; 12]).unwrap();
        let b = FeatureMap::new(2, 2, 4, vec![0.0f64; 16]).unwrap();
        assert!(matches!(cost_volume(&a, &b), Err(Error::ShapeMismatch(_))));
        assert!(FeatureMap::<f64>::new(0, 2, 2, vec![]).is_err());
        assert!(reshape_2d_to_3d(&[0.0; 16], 4, 2, 3).is_err());
    }

    #[test]
    fn reshape_index_law_and_round_trip() {
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let v3 = reshape_2d_to_3d(&data, 4, 2, 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(v3.at(i / 2, i % 2, j), data[i * 4 + j]);
            }
        }
        assert_eq!(reshape_3d_to_2d(&v3).unwrap(), data);
        let one = reshape_2d_to_3d(&[7.0], 1, 1, 1).unwrap();
        assert_eq!(one.data, vec![7.0]);
    }

    #[test]
    fn channel_first_matches_channel_last() {
        let (h, w, d) = (2, 3, 4);
        let chw: Vec<f64> = (0..h * w * d).map(|v| (v as f64 * 0.37).sin()).collect();
        let f = FeatureMap::from_chw(d, h, w, &chw).unwrap();
        let expected = cost_volume(&f, &f).unwrap();
        let mut out = vec![0.0; 36];
        let view = FeatureView::channel_first(&chw, 6, d);
        correlate_into(view, view, 1.0, 0.0, &mut out, 6, 1);
        for (a, b) in out.iter().zip(&expected.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn heatmap_min_max() {
        let img = heatmap(&[0.0f64, 1.0, 2.0, 4.0], 2, 2);
        assert_eq!(img.as_raw(), &vec![0, 64, 128, 255]);
        let flat = heatmap(&[3.0f64; 4], 2, 2);
        assert!(flat.as_raw().iter().all(|&v| v == 0));
    }
}
