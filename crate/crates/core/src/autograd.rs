//! Minimal reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the tape in reverse and returns gradients for the parameters that
//! took part. Only the operations the network needs are implemented.
//! Convolutions use im2col + GEMM and are parallel over the batch.

use crate::matching::{correlate_into, FeatureView};
use crate::parallel;
use crate::real::{gemm, Real};
use std::borrow::Cow;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} vs {} values", data.len());
        Self { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a rank-4 tensor, got {:?}", self.shape),
        }
    }

    /// Batch size and per-sample element count.
    pub fn rows(&self) -> (usize, usize) {
        let n = self.shape[0];
        (n, self.len().checked_div(n).unwrap_or(0))
    }

    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize, cols: Vec<T> },
    Relu(Var),
    Add(Var, Var),
    MaxPool { x: Var, argmax: Vec<u32> },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    ConcatBatch(Vec<Var>),
    NarrowBatch { x: Var, start: usize },
    AvgPool { x: Var, k: usize },
    GlobalAvgPool(Var),
    NormalizeChannels { x: Var, norms: Vec<T> },
    Reshape(Var),
    Linear { x: Var, w: Var, b: Var },
    Correlate { a: Var, b: Var },
    MseMean { pred: Var, target: Vec<T> },
    MeanAbsDiff(Var, Var),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<'a, T: Clone> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by parameter.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    per_param: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn accumulate(&mut self, other: Grads<T>) {
        for (mine, theirs) in self.per_param.iter_mut().zip(other.per_param) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.add_assign(&b),
                (None, b) => *mine = b,
                _ => {}
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.per_param.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.per_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_param.is_empty()
    }
}

pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Input, false)
    }

    pub fn param(&mut self, params: &'a Params<T>, id: ParamId) -> Var {
        self.push(Cow::Borrowed(params.get(id)), Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xt = self.value(x);
        let wt = self.value(w);
        let (n, c, h, wd) = xt.dims4();
        let (o, wc, k, k2) = wt.dims4();
        assert_eq!(c, wc, "conv input channels");
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(self.value(b).shape, vec![o]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let (ckk, p) = (c * k * k, ho * wo);
        let gs = conv_group(p);
        // Per group of `gs` samples: cols is [ckk, m·p], sample j in columns j·p..
        let mut cols = vec![T::zero(); n * ckk * p];
        parallel::for_each_chunk_mut(&mut cols, gs * ckk * p, |gi, col| {
            let m = col.len() / (ckk * p);
            for j in 0..m {
                let s = gi * gs + j;
                im2col(&xt.data[s * c * h * wd..(s + 1) * c * h * wd], c, h, wd, k, stride, pad, ho, wo, &mut col[j * p..], m * p);
            }
        });
        let mut out = vec![T::zero(); n * o * p];
        let bias = &self.value(b).data;
        parallel::for_each_chunk_mut(&mut out, gs * o * p, |gi, y| {
            let m = y.len() / (o * p);
            let col = &cols[gi * gs * ckk * p..][..m * ckk * p];
            let mut tmp = vec![T::zero(); o * m * p];
            for (oc, row) in tmp.chunks_mut(m * p).enumerate() {
                row.fill(bias[oc]);
            }
            gemm(o, ckk, m * p, T::one(), &wt.data, false, col, false, T::one(), &mut tmp);
            for j in 0..m {
                for oc in 0..o {
                    y[(j * o + oc) * p..][..p].copy_from_slice(&tmp[oc * m * p + j * p..][..p]);
                }
            }
        });
        let value = Tensor::from_vec(&[n, o, ho, wo], out);
        self.owned(value, Op::Conv2d { x, w, b, stride, pad, cols }, &[x, w, b])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::from_vec(&t.shape, data);
        self.owned(value, Op::Relu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "add shapes");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(&ta.shape, data);
        self.owned(value, Op::Add(a, b), &[a, b])
    }

    /// Max pooling with `-inf` padding.
    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0u32; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &t.data[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if src[idx] > best {
                                best = src[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = plane * ho * wo + oy * wo + ox;
                    out[o] = best;
                    argmax[o] = best_i as u32;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out);
        self.owned(value, Op::MaxPool { x, argmax }, &[x])
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for plane in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[plane * 4 * h * w + y * 2 * w + xx] = t.data[plane * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out);
        self.owned(value, Op::Upsample2x(x), &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, ca, h, w) = ta.dims4();
        let (nb, cb, hb, wb) = tb.dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial dims");
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (sa + sb));
        for s in 0..n {
            out.extend_from_slice(&ta.data[s * sa..(s + 1) * sa]);
            out.extend_from_slice(&tb.data[s * sb..(s + 1) * sb]);
        }
        let value = Tensor::from_vec(&[n, ca + cb, h, w], out);
        self.owned(value, Op::ConcatChannels(a, b), &[a, b])
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]).shape.clone();
        let mut n = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.shape[1..], first[1..], "concat_batch trailing dims");
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first;
        shape[0] = n;
        let value = Tensor::from_vec(&shape, data);
        self.owned(value, Op::ConcatBatch(parts.to_vec()), parts)
    }

    pub fn narrow_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let (n, per) = t.rows();
        assert!(start + len <= n, "narrow_batch out of range");
        let mut shape = t.shape.clone();
        shape[0] = len;
        let value = Tensor::from_vec(&shape, t.data[start * per..(start + len) * per].to_vec());
        self.owned(value, Op::NarrowBatch { x, start }, &[x])
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        assert!(h % k == 0 && w % k == 0, "avg_pool needs divisible dims");
        let (ho, wo) = (h / k, w / k);
        let inv = T::one() / T::of((k * k) as f64);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    let o = plane * ho * wo + (y / k) * wo + xx / k;
                    out[o] = out[o] + t.data[plane * h * w + y * w + xx] * inv;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out);
        self.owned(value, Op::AvgPool { x, k }, &[x])
    }

    /// `[N, C, H, W] -> [N, C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let data = t.data.chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::from_vec(&[n, c], data);
        self.owned(value, Op::GlobalAvgPool(x), &[x])
    }

    /// Rescales every spatial position of `[N, C, H, W]` to channel-vector
    /// length `sqrt(C)`: `y = sqrt(C) · x / sqrt(|x|² + eps)`.
    pub fn normalize_channels(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let (p, scale, eps) = (h * w, T::of(c as f64).sqrt(), T::of(NORM_EPS));
        let mut norms = vec![T::zero(); n * p];
        for s in 0..n {
            for ch in 0..c {
                for (acc, &v) in norms[s * p..(s + 1) * p].iter_mut().zip(&t.data[(s * c + ch) * p..][..p]) {
                    *acc = *acc + v * v;
                }
            }
        }
        norms.iter_mut().for_each(|r| *r = (*r + eps).sqrt());
        let mut data = t.data.clone();
        for s in 0..n {
            for ch in 0..c {
                for (v, &r) in data[(s * c + ch) * p..][..p].iter_mut().zip(&norms[s * p..(s + 1) * p]) {
                    *v = *v * scale / r;
                }
            }
        }
        let value = Tensor::from_vec(&t.shape, data);
        self.owned(value, Op::NormalizeChannels { x, norms }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x);
        let value = Tensor::from_vec(shape, t.data.clone());
        self.owned(value, Op::Reshape(x), &[x])
    }

    /// `y = x · Wᵀ + b` with `x: [N, in]`, `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, fin) = tx.rows();
        let (fout, win) = (tw.shape[0], tw.shape[1]);
        assert_eq!(fin, win, "linear input width");
        let bias = &self.value(b).data;
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        gemm(n, fin, fout, T::one(), &tx.data, false, &tw.data, true, T::one(), &mut out);
        let value = Tensor::from_vec(&[n, fout], out);
        self.owned(value, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Cost volume of `[N, D, h, w]` features, returned as `[N, hw, h, w]`:
    /// channel `j` at spatial cell `i` holds `<a_i, b_j> / D`.
    pub fn correlate(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "correlate shapes");
        let (n, d, h, w) = ta.dims4();
        let cells = h * w;
        let mut out = vec![T::zero(); n * cells * cells];
        parallel::for_each_chunk_mut(&mut out, cells * cells, |s, o| {
            let fa = FeatureView::channel_first(&ta.data[s * d * cells..(s + 1) * d * cells], cells, d);
            let fb = FeatureView::channel_first(&tb.data[s * d * cells..(s + 1) * d * cells], cells, d);
            // Row j = target cell, column i = source cell.
            correlate_into(fb, fa, T::one(), T::zero(), o, cells, 1);
        });
        let value = Tensor::from_vec(&[n, cells, h, w], out);
        self.owned(value, Op::Correlate { a, b }, &[a, b])
    }

    /// Mean squared error against a constant target, over all elements.
    pub fn mse_mean(&mut self, pred: Var, target: &[T]) -> Var {
        let t = self.value(pred);
        assert_eq!(t.len(), target.len(), "mse target length");
        let n = T::of(t.len() as f64);
        let s: T = t.data.iter().zip(target).map(|(&p, &q)| (p - q) * (p - q)).sum();
        self.owned(Tensor::scalar(s / n), Op::MseMean { pred, target: target.to_vec() }, &[pred])
    }

    /// `mean |a - b|` over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "mean_abs_diff shapes");
        let n = T::of(ta.len() as f64);
        let s: T = ta.data.iter().zip(&tb.data).map(|(&x, &y)| (x - y).abs()).sum();
        self.owned(Tensor::scalar(s / n), Op::MeanAbsDiff(a, b), &[a, b])
    }

    /// `Σ weight · term` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut s = T::zero();
        for &(v, wgt) in terms {
            s = s + self.value(v).item() * wgt;
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.owned(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), &parents)
    }

    /// Hash of every branch taken at a non-differentiable point: ReLU signs,
    /// max-pool winners and the signs inside `|a - b|`. Two parameter settings
    /// with equal signatures lie on the same smooth piece of the loss.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => self.value(*x).data.iter().for_each(|v| (*v > T::zero()).hash(&mut h)),
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                Op::MeanAbsDiff(a, b) => {
                    for (x, y) in self.value(*a).data.iter().zip(&self.value(*b).data) {
                        x.partial_cmp(y).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a scalar `loss`; returns gradients per parameter.
    pub fn backward(&self, loss: Var, num_params: usize) -> Grads<T> {
        self.backward_above(loss, None, num_params)
    }

    /// Gradient of `loss` that does not flow back past node `floor`: only
    /// parameters entering the graph after `floor` receive a share.
    pub fn backward_above(&self, loss: Var, floor: Option<Var>, num_params: usize) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let low = floor.map_or(0, |f| f.0 + 1);
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(&self.value(loss).shape, vec![T::one()]));
        let mut per_param: Vec<Option<Tensor<T>>> = (0..num_params).map(|_| None).collect();

        for id in (low..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let mut emit = |v: Var, t: Tensor<T>| {
                if v.0 < low || !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => match &mut per_param[pid.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::Conv2d { x, w, b, stride, pad, cols } => {
                    let (gx, gw, gb) = self.conv2d_backward(*x, *w, *stride, *pad, cols, &g);
                    if let Some(gx) = gx {
                        emit(*x, gx);
                    }
                    emit(*w, gw);
                    emit(*b, gb);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    emit(*x, Tensor::from_vec(&xv.shape, data));
                }
                Op::Add(a, b) => {
                    emit(*a, g.clone());
                    emit(*b, g);
                }
                Op::MaxPool { x, argmax } => {
                    let xv = self.value(*x);
                    let (_, _, h, w) = xv.dims4();
                    let (_, _, ho, wo) = g.dims4();
                    let mut gx = vec![T::zero(); xv.len()];
                    for (o, (&gv, &src)) in g.data.iter().zip(argmax).enumerate() {
                        let plane = o / (ho * wo);
                        let idx = plane * h * w + src as usize;
                        gx[idx] = gx[idx] + gv;
                    }
                    emit(*x, Tensor::from_vec(&xv.shape, gx));
                }
                Op::Upsample2x(x) => {
                    let xv = self.value(*x);
                    let (_, _, h, w) = xv.dims4();
                    let mut gx = vec![T::zero(); xv.len()];
                    for (o, &gv) in g.data.iter().enumerate() {
                        let plane = o / (4 * h * w);
                        let r = o % (4 * h * w);
                        let (y, xx) = (r / (2 * w), r % (2 * w));
                        let idx = plane * h * w + (y / 2) * w + xx / 2;
                        gx[idx] = gx[idx] + gv;
                    }
                    emit(*x, Tensor::from_vec(&xv.shape, gx));
                }
                Op::ConcatChannels(a, b) => {
                    let (sa_shape, sb_shape) = (self.value(*a).shape.clone(), self.value(*b).shape.clone());
                    let n = sa_shape[0];
                    let sa = sa_shape[1..].iter().product::<usize>();
                    let sb = sb_shape[1..].iter().product::<usize>();
                    let mut ga = Vec::with_capacity(n * sa);
                    let mut gb = Vec::with_capacity(n * sb);
                    for s in 0..n {
                        let base = s * (sa + sb);
                        ga.extend_from_slice(&g.data[base..base + sa]);
                        gb.extend_from_slice(&g.data[base + sa..base + sa + sb]);
                    }
                    emit(*a, Tensor::from_vec(&sa_shape, ga));
                    emit(*b, Tensor::from_vec(&sb_shape, gb));
                }
                Op::ConcatBatch(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape.clone();
                        let len = self.value(p).len();
                        emit(p, Tensor::from_vec(&shape, g.data[offset..offset + len].to_vec()));
                        offset += len;
                    }
                }
                Op::NarrowBatch { x, start } => {
                    let xv = self.value(*x);
                    let (_, per) = xv.rows();
                    let mut gx = vec![T::zero(); xv.len()];
                    gx[start * per..start * per + g.len()].copy_from_slice(&g.data);
                    emit(*x, Tensor::from_vec(&xv.shape, gx));
                }
                Op::AvgPool { x, k } => {
                    let xv = self.value(*x);
                    let (_, _, h, w) = xv.dims4();
                    let (ho, wo) = (h / k, w / k);
                    let inv = T::one() / T::of((k * k) as f64);
                    let mut gx = vec![T::zero(); xv.len()];
                    for (i, gv) in gx.iter_mut().enumerate() {
                        let plane = i / (h * w);
                        let r = i % (h * w);
                        let (y, xx) = (r / w, r % w);
                        *gv = g.data[plane * ho * wo + (y / k) * wo + xx / k] * inv;
                    }
                    emit(*x, Tensor::from_vec(&xv.shape, gx));
                }
                Op::GlobalAvgPool(x) => {
                    let xv = self.value(*x);
                    let (_, _, h, w) = xv.dims4();
                    let inv = T::one() / T::of((h * w) as f64);
                    let gx = g.data.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, h * w)).collect();
                    emit(*x, Tensor::from_vec(&xv.shape, gx));
                }
                Op::NormalizeChannels { x, norms } => {
                    // dx = scale / r · (g − x · <g, x> / r²)
                    let xv = self.value(*x);
                    let (n, c, h, w) = xv.dims4();
                    let (p, scale) = (h * w, T::of(c as f64).sqrt());
                    let mut dot = vec![T::zero(); n * p];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * p;
                            for (k, d) in dot[s * p..(s + 1) * p].iter_mut().enumerate() {
                                *d = *d + g.data[base + k] * xv.data[base + k];
                            }
                        }
                    }
                    let mut gx = vec![T::zero(); xv.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * p;
                            for k in 0..p {
                                let r = norms[s * p + k];
                                let i = base + k;
                                gx[i] = scale / r * (g.data[i] - xv.data[i] * dot[s * p + k] / (r * r));
                            }
                        }
                    }
                    emit(*x, Tensor::from_vec(&xv.shape, gx));
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape.clone();
                    emit(*x, Tensor::from_vec(&shape, g.data));
                }
                Op::Linear { x, w, b } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (n, fin) = tx.rows();
                    let fout = tw.shape[0];
                    if self.nodes[x.0].needs_grad {
                        let mut gx = vec![T::zero(); n * fin];
                        gemm(n, fout, fin, T::one(), &g.data, false, &tw.data, false, T::zero(), &mut gx);
                        emit(*x, Tensor::from_vec(&tx.shape, gx));
                    }
                    let mut gw = vec![T::zero(); fout * fin];
                    gemm(fout, n, fin, T::one(), &g.data, true, &tx.data, false, T::zero(), &mut gw);
                    emit(*w, Tensor::from_vec(&tw.shape, gw));
                    let mut gb = vec![T::zero(); fout];
                    for row in g.data.chunks(fout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    emit(*b, Tensor::from_vec(&[fout], gb));
                }
                Op::Correlate { a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, d, h, w) = ta.dims4();
                    let cells = h * w;
                    let inv_d = T::one() / T::of(d as f64);
                    let per = d * cells;
                    // g[s] is [j, i]; dA = B·g / D, dB = A·gᵀ / D.
                    if self.nodes[a.0].needs_grad {
                        let mut ga = vec![T::zero(); n * per];
                        parallel::for_each_chunk_mut(&mut ga, per, |s, out| {
                            let gs = &g.data[s * cells * cells..(s + 1) * cells * cells];
                            gemm(d, cells, cells, inv_d, &tb.data[s * per..(s + 1) * per], false, gs, false, T::zero(), out);
                        });
                        emit(*a, Tensor::from_vec(&ta.shape, ga));
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut gbv = vec![T::zero(); n * per];
                        parallel::for_each_chunk_mut(&mut gbv, per, |s, out| {
                            let gs = &g.data[s * cells * cells..(s + 1) * cells * cells];
                            gemm(d, cells, cells, inv_d, &ta.data[s * per..(s + 1) * per], false, gs, true, T::zero(), out);
                        });
                        emit(*b, Tensor::from_vec(&tb.shape, gbv));
                    }
                }
                Op::MseMean { pred, target } => {
                    let tp = self.value(*pred);
                    let scale = g.item() * T::of(2.0) / T::of(tp.len() as f64);
                    let data = tp.data.iter().zip(target).map(|(&p, &q)| (p - q) * scale).collect();
                    emit(*pred, Tensor::from_vec(&tp.shape, data));
                }
                Op::MeanAbsDiff(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let scale = g.item() / T::of(ta.len() as f64);
                    let ga: Vec<T> = ta
                        .data
                        .iter()
                        .zip(&tb.data)
                        .map(|(&x, &y)| {
                            let d = x - y;
                            if d > T::zero() {
                                scale
                            } else if d < T::zero() {
                                -scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    let gb = ga.iter().map(|&v| -v).collect();
                    emit(*a, Tensor::from_vec(&ta.shape, ga));
                    emit(*b, Tensor::from_vec(&tb.shape, gb));
                }
                Op::WeightedSum(terms) => {
                    for &(v, wgt) in terms {
                        emit(v, Tensor::scalar(g.item() * wgt));
                    }
                }
            }
        }
        Grads { per_param }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        cols: &[T],
        g: &Tensor<T>,
    ) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
        let (xt, wt) = (self.value(x), self.value(w));
        let (n, c, h, wd) = xt.dims4();
        let (o, _, k, _) = wt.dims4();
        let (_, _, ho, wo) = g.dims4();
        let (ckk, p) = (c * k * k, ho * wo);
        let gs = conv_group(p);

        // Per group: output gradient gathered to [o, m·p] and its weight gradient.
        let parts = parallel::map_range(n.div_ceil(gs), |gi| {
            let m = gs.min(n - gi * gs);
            let mut gg = vec![T::zero(); o * m * p];
            for j in 0..m {
                for oc in 0..o {
                    gg[oc * m * p + j * p..][..p].copy_from_slice(&g.data[((gi * gs + j) * o + oc) * p..][..p]);
                }
            }
            let col = &cols[gi * gs * ckk * p..][..m * ckk * p];
            let mut gw = vec![T::zero(); o * ckk];
            gemm(o, m * p, ckk, T::one(), &gg, false, col, true, T::zero(), &mut gw);
            (gw, gg)
        });
        let mut gw = vec![T::zero(); o * ckk];
        for (part, _) in &parts {
            for (a, &v) in gw.iter_mut().zip(part) {
                *a = *a + v;
            }
        }
        let mut gb = vec![T::zero(); o];
        for gs in g.data.chunks(o * p) {
            for (oc, row) in gs.chunks(p).enumerate() {
                gb[oc] = gb[oc] + row.iter().copied().sum::<T>();
            }
        }

        let gx = self.nodes[x.0].needs_grad.then(|| {
            let plane = c * h * wd;
            let mut gx = vec![T::zero(); n * plane];
            parallel::for_each_chunk_mut(&mut gx, gs * plane, |gi, out| {
                let m = out.len() / plane;
                let gg = &parts[gi].1;
                let mut dcols = vec![T::zero(); ckk * m * p];
                gemm(ckk, o, m * p, T::one(), &wt.data, true, gg, false, T::zero(), &mut dcols);
                for j in 0..m {
                    col2im(&dcols[j * p..], m * p, c, h, wd, k, stride, pad, ho, wo, &mut out[j * plane..(j + 1) * plane]);
                }
            });
            Tensor::from_vec(&xt.shape, gx)
        });
        (gx, Tensor::from_vec(&wt.shape, gw), Tensor::from_vec(&[o], gb))
    }
}

/// Keeps [`Graph::normalize_channels`] finite on all-zero feature vectors.
const NORM_EPS: f64 = 1e-3;

/// Samples per convolution GEMM. Depends on the shape only, so results are
/// independent of the thread count.
fn conv_group(p: usize) -> usize {
    (4096 / p).max(1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
    row_stride: usize,
) {
    let p = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * row_stride..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[ch * h * w + iy as usize * w..][..w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    row_stride: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let p = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * row_stride..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[ch * h * w + iy as usize * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of every parameter entry of a tiny graph.
    fn check<F>(params: &Params<f64>, f: F)
    where
        F: for<'p> Fn(&mut Graph<'p, f64>, &'p Params<f64>) -> Var,
    {
        let mut g = Graph::new();
        let loss = f(&mut g, params);
        let grads = g.backward(loss, params.len());
        let eps = 1e-6;
        for id in params.ids() {
            let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(&params.get(id).shape));
            for e in 0..params.get(id).len() {
                let mut p = params.clone();
                p.get_mut(id).data[e] += eps;
                let mut g1 = Graph::new();
                let l1 = f(&mut g1, &p);
                let up = g1.value(l1).item();
                p.get_mut(id).data[e] -= 2.0 * eps;
                let mut g2 = Graph::new();
                let l2 = f(&mut g2, &p);
                let down = g2.value(l2).item();
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic.data[e];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                    "{} [{e}]: analytic {a} numeric {numeric}",
                    params.name(id)
                );
            }
        }
    }

    #[test]
    fn conv_pool_upsample_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::new();
        let x = p.push("x", random(&[2, 2, 6, 6], &mut rng));
        let w = p.push("w", random(&[3, 2, 3, 3], &mut rng));
        let b = p.push("b", random(&[3], &mut rng));
        let w2 = p.push("w2", random(&[2, 6, 1, 1], &mut rng));
        let b2 = p.push("b2", random(&[2], &mut rng));
        check(&p, |g, p| {
            let (x, w, b, w2, b2) = (g.param(p, x), g.param(p, w), g.param(p, b), g.param(p, w2), g.param(p, b2));
            let y = g.conv2d(x, w, b, 2, 1); // 3x3
            let y = g.max_pool(y, 3, 2, 1); // 2x2
            let y = g.upsample2x(y); // 4x4
            let z = g.conv2d(x, w, b, 1, 0); // 4x4
            let z = g.relu(z);
            let cat = g.concat_channels(y, z); // 6 channels
            let mixed = g.conv2d(cat, w2, b2, 1, 0);
            let s1 = g.mse_mean(mixed, &vec![0.1; 64]);
            let pooled = g.avg_pool(cat, 2);
            let half = g.narrow_batch(pooled, 1, 1);
            let both = g.concat_batch(&[pooled, half]);
            let gap = g.global_avg_pool(both);
            let gap = g.reshape(gap, &[3, 6]);
            let s2 = g.mse_mean(gap, &[0.3; 18]);
            let s3 = g.mean_abs_diff(y, z);
            let sum = g.add(y, z);
            let s4 = g.mse_mean(sum, &vec![0.0; 96]);
            g.weighted_sum(&[(s1, 1.0), (s2, 2.0), (s3, 0.5), (s4, 0.25)])
        });
    }

    #[test]
    fn linear_and_correlate_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = Params::new();
        let fa = p.push("fa", random(&[2, 3, 2, 2], &mut rng));
        let fb = p.push("fb", random(&[2, 3, 2, 2], &mut rng));
        let w = p.push("w", random(&[5, 16], &mut rng));
        let b = p.push("b", random(&[5], &mut rng));
        check(&p, |g, p| {
            let (fa, fb, w, b) = (g.param(p, fa), g.param(p, fb), g.param(p, w), g.param(p, b));
            let fa = g.normalize_channels(fa);
            let c = g.correlate(fa, fb);
            let flat = g.reshape(c, &[2, 16]);
            let y = g.linear(flat, w, b);
            g.mse_mean(y, &[0.2; 10])
        });
    }

    #[test]
    fn correlate_layout() {
        // [1, D=2, h=1, w=2]: cells (1,0) and (0,1) in channel-first layout.
        let a = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::from_vec(&[1, 2, 1, 2], vec![2.0, 3.0, 0.0, 0.0]);
        let mut g = Graph::new();
        let (va, vb) = (g.input(a), g.input(b));
        let c = g.correlate(va, vb);
        // channel j, cell i = <a_i, b_j>/2; a_0=(1,0), a_1=(0,1), b_0=(2,0), b_1=(3,0)
        assert_eq!(g.value(c).shape, vec![1, 2, 1, 2]);
        assert_eq!(g.value(c).data, vec![1.0, 0.0, 1.5, 0.0]);
    }

    #[test]
    fn inputs_do_not_receive_gradients() {
        let mut p = Params::new();
        let w = p.push("w", Tensor::from_vec(&[1, 1, 1, 1], vec![2.0f64]));
        let b = p.push("b", Tensor::from_vec(&[1], vec![0.0]));
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let (wv, bv) = (g.param(&p, w), g.param(&p, b));
        let y = g.conv2d(x, wv, bv, 1, 0);
        let l = g.mse_mean(y, &[0.0; 4]);
        let grads = g.backward(l, p.len());
        // d/dw mean((w x)^2) = 2 w mean(x^2) = 4 * 7.5
        assert!((grads.get(w).unwrap().data[0] - 30.0).abs() < 1e-12);
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn conv_groups_match_direct_loops() {
        // 48x48 outputs put each sample in its own GEMM group.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, c, o, hw, k) = (3, 2, 3, 48, 3);
        let x = random(&[n, c, hw, hw], &mut rng);
        let mut params = Params::new();
        let w = params.push("w", random(&[o, c, k, k], &mut rng));
        let b = params.push("b", random(&[o], &mut rng));
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let (wv, bv) = (g.param(&params, w), g.param(&params, b));
        let y = g.conv2d(xi, wv, bv, 1, 1);
        let yt = g.value(y).clone();
        let (wt, bt) = (params.get(w), params.get(b));
        for s in 0..n {
            for oc in 0..o {
                for (oy, ox) in [(0, 0), (17, 30), (47, 47)] {
                    let mut acc = bt.data[oc];
                    for ch in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                                if (0..hw as isize).contains(&iy) && (0..hw as isize).contains(&ix) {
                                    acc += wt.data[((oc * c + ch) * k + ky) * k + kx]
                                        * x.data[((s * c + ch) * hw + iy as usize) * hw + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((yt.data[((s * o + oc) * hw + oy) * hw + ox] - acc).abs() < 1e-12);
                }
            }
        }
        let target = vec![0.5; yt.len()];
        let l = g.mse_mean(y, &target);
        let whole = g.backward(l, 2).get(w).unwrap().clone();
        let mut summed = vec![0.0; whole.len()];
        let per = c * hw * hw;
        for s in 0..n {
            let mut gs = Graph::new();
            let xi = gs.input(Tensor::from_vec(&[1, c, hw, hw], x.data[s * per..(s + 1) * per].to_vec()));
            let (wv, bv) = (gs.param(&params, w), gs.param(&params, b));
            let y = gs.conv2d(xi, wv, bv, 1, 1);
            // Same per-element scale as the batched loss.
            let l = gs.mse_mean(y, &target[..o * hw * hw]);
            let l = gs.weighted_sum(&[(l, 1.0 / n as f64)]);
            for (a, v) in summed.iter_mut().zip(&gs.backward(l, 2).get(w).unwrap().data) {
                *a += v;
            }
        }
        assert!(whole.data.iter().zip(&summed).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
