//! Supervised, self-supervised and combined losses. Every norm is reduced
//! by a per-element mean.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::FourPointOffsets;
use crate::network::Forward;
use crate::real::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.5, lambda2: 0.25 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidTrainConfig(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

fn mse(pred: &[FourPointOffsets], gt: &[FourPointOffsets]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "prediction and ground-truth batch sizes");
    let n = pred.len() * 8;
    let s: f64 = pred
        .iter()
        .zip(gt)
        .flat_map(|(p, g)| p.to_flat().into_iter().zip(g.to_flat()))
        .map(|(p, g)| (p - g) * (p - g))
        .sum();
    s / n as f64
}

/// Mean squared offset error of pair ab, plus the same for pair cd when given.
pub fn loss_supervised(pred_ab: &[FourPointOffsets], pred_cd: Option<&[FourPointOffsets]>, gt: &[FourPointOffsets]) -> f64 {
    mse(pred_ab, gt) + pred_cd.map_or(0.0, |p| mse(p, gt))
}

fn mean_abs_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).abs()).sum::<f64>() / a.len() as f64
}

/// `λ1·mean|C'ab − C'cd| + λ2·(mean|C'ab − Cab| + mean|C'cd − Ccd|)`.
pub fn loss_self_supervised<T: Real>(cp_ab: &[T], cp_cd: &[T], c_ab: &[T], c_cd: &[T], w: LossWeights) -> Result<f64> {
    let n = cp_ab.len();
    if n == 0 || [cp_cd.len(), c_ab.len(), c_cd.len()].iter().any(|&l| l != n) {
        return Err(Error::ShapeMismatch(format!(
            "cost volumes of {} / {} / {} / {} values",
            n,
            cp_cd.len(),
            c_ab.len(),
            c_cd.len()
        )));
    }
    Ok(w.lambda1 * mean_abs_diff(cp_ab, cp_cd) + w.lambda2 * (mean_abs_diff(cp_ab, c_ab) + mean_abs_diff(cp_cd, c_cd)))
}

pub fn loss_total(l_s: f64, l_ss: Option<f64>) -> f64 {
    l_s + l_ss.unwrap_or(0.0)
}

/// Loss nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_s: Var,
    pub l_ss: Option<Var>,
    pub l_f: Var,
}

/// Builds the losses on a forward pass over `pairs` pairs, or over `2·pairs`
/// when `dual` (ab pairs first, then cd). `gt` holds `pairs x 8` offsets.
pub fn loss_graph<T: Real>(
    g: &mut Graph<'_, T>,
    fwd: &Forward,
    pairs: usize,
    dual: bool,
    gt: &[T],
    offset_unit: f64,
    self_supervised: Option<LossWeights>,
) -> Result<LossVars> {
    // mse(p / u, g / u) = mse(p, g) / u²
    let w = T::of(1.0 / (offset_unit * offset_unit));
    let pred_ab = g.narrow_batch(fwd.offsets, 0, pairs);
    let mut terms = vec![(g.mse_mean(pred_ab, gt), w)];
    if dual {
        let pred_cd = g.narrow_batch(fwd.offsets, pairs, pairs);
        terms.push((g.mse_mean(pred_cd, gt), w));
    }
    let l_s = g.weighted_sum(&terms);
    let Some(w) = self_supervised else {
        return Ok(LossVars { l_s, l_ss: None, l_f: l_s });
    };
    let (Some(c), Some(cp), true) = (fwd.cost, fwd.cleaned, dual) else {
        return Err(Error::InvalidTrainConfig("the self-supervised loss needs dual pairs and a denoiser".into()));
    };
    let (c_ab, c_cd) = (g.narrow_batch(c, 0, pairs), g.narrow_batch(c, pairs, pairs));
    let (cp_ab, cp_cd) = (g.narrow_batch(cp, 0, pairs), g.narrow_batch(cp, pairs, pairs));
    let t1 = g.mean_abs_diff(cp_ab, cp_cd);
    let t2 = g.mean_abs_diff(cp_ab, c_ab);
    let t3 = g.mean_abs_diff(cp_cd, c_cd);
    let (l1, l2) = (T::of(w.lambda1), T::of(w.lambda2));
    let l_ss = g.weighted_sum(&[(t1, l1), (t2, l2), (t3, l2)]);
    let l_f = g.weighted_sum(&[(l_s, T::one()), (l_ss, T::one())]);
    Ok(LossVars { l_s, l_ss: Some(l_ss), l_f })
}
