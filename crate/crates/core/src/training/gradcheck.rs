//! Central finite differences against the analytic gradients of the tape.

use crate::autograd::{Grads, ParamId, Params};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// One evaluation of the loss at a parameter setting.
pub struct Probe {
    pub loss: f64,
    /// Branch signature of the tape (see `Graph::branch_signature`).
    pub signature: u64,
    pub grads: Option<Grads<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Candidates discarded because a ±h probe changed branch.
    pub rejected_at_kinks: usize,
    pub worst: Option<String>,
}

/// Relative errors below this denominator are measured absolutely.
const FLOOR: f64 = 1e-7;

/// Checks up to `want` coordinates from `candidates`, skipping those whose
/// perturbation crosses a non-differentiable point.
pub fn gradcheck<F>(params: &Params<f64>, eval: F, candidates: &[(ParamId, usize)], want: usize, h: f64) -> GradcheckReport
where
    F: Fn(&Params<f64>, bool) -> Probe,
{
    let base = eval(params, true);
    let grads = base.grads.expect("analytic gradients requested");
    let mut report = GradcheckReport { max_rel_error: 0.0, checked: 0, rejected_at_kinks: 0, worst: None };
    let mut work = params.clone();
    for &(id, k) in candidates {
        if report.checked == want {
            break;
        }
        let orig = work.get(id).data[k];
        work.get_mut(id).data[k] = orig + h;
        let plus = eval(&work, false);
        work.get_mut(id).data[k] = orig - h;
        let minus = eval(&work, false);
        work.get_mut(id).data[k] = orig;
        if plus.signature != base.signature || minus.signature != base.signature {
            report.rejected_at_kinks += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * h);
        let analytic = grads.get(id).map_or(0.0, |g| g.data[k]);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(FLOOR);
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(format!("{}[{k}]: analytic {analytic:.6e}, numeric {numeric:.6e}", params.name(id)));
        }
        report.checked += 1;
    }
    report
}

/// Shuffled coordinates covering every tensor: round-robin over tensors,
/// random element within each.
pub fn sample_coordinates(params: &Params<f64>, count: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = params.ids().collect();
    let mut out = Vec::with_capacity(count);
    while out.len() < count && !ids.is_empty() {
        let mut order = ids.clone();
        order.shuffle(&mut rng);
        for id in order {
            if out.len() == count {
                break;
            }
            out.push((id, rng.random_range(0..params.get(id).len())));
        }
    }
    out
}

/// Replaces all-zero tensors (zero-initialized layers and biases) with small
/// random values, so every path carries gradient.
pub fn jitter_zero_tensors(params: &mut Params<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in params.ids().collect::<Vec<_>>() {
        let t = params.get_mut(id);
        if t.data.iter().all(|v| *v == 0.0) {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
        }
    }
}
