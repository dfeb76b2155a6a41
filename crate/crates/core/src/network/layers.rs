use crate::autograd::{Graph, ParamId, Params, Tensor, Var};
use crate::real::Real;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// He-normal scaled by the given gain.
    He(f64),
    Zero,
}

fn weights<T: Real, R: Rng>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Zero => vec![T::zero(); n],
        Init::He(gain) => {
            let dist = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("valid std");
            (0..n).map(|_| T::of(dist.sample(rng))).collect()
        }
    };
    Tensor::from_vec(shape, data)
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        params: &mut Params<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = params.push(format!("{name}.w"), weights(&[cout, cin, k, k], cin * k * k, init, rng));
        let b = params.push(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad: k / 2 }
    }

    pub fn apply<'a, T: Real>(&self, g: &mut Graph<'a, T>, p: &'a Params<T>, x: Var) -> Var {
        let (w, b) = (g.param(p, self.w), g.param(p, self.b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<T: Real, R: Rng>(params: &mut Params<T>, name: &str, fin: usize, fout: usize, init: Init, rng: &mut R) -> Self {
        let w = params.push(format!("{name}.w"), weights(&[fout, fin], fin, init, rng));
        let b = params.push(format!("{name}.b"), Tensor::zeros(&[fout]));
        Self { w, b }
    }

    pub fn apply<'a, T: Real>(&self, g: &mut Graph<'a, T>, p: &'a Params<T>, x: Var) -> Var {
        let (w, b) = (g.param(p, self.w), g.param(p, self.b));
        g.linear(x, w, b)
    }
}
