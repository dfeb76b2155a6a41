//! Dual-pair training: losses, Adam with a step decay, held-out MACE,
//! checkpoints and a metrics log.

mod gradcheck;
mod losses;

pub use gradcheck::{gradcheck, jitter_zero_tensors, sample_coordinates, GradcheckReport, Probe};
pub use losses::{loss_graph, loss_self_supervised, loss_supervised, loss_total, LossVars, LossWeights};

use crate::autograd::{Grads, Graph, Params, Tensor};
use crate::datagen::{dihedral_dual, read_dataset, write_dataset, Dataset, DualSample};
use crate::error::{Error, Result};
use crate::geometry::{mace, FourPointOffsets};
use crate::network::{image_tensor, save_checkpoint, Forward, Model, ModelConfig, ModelVariant};
use crate::real::Real;
use image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// `L_s` only.
    Supervised,
    /// `L_s + L_ss`; needs the denoiser.
    Combined,
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(LossMode::Supervised),
            "combined" => Ok(LossMode::Combined),
            _ => Err(Error::Config(format!("unknown loss mode {s:?} (expected supervised or combined)"))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Supervised => "supervised",
            LossMode::Combined => "combined",
        })
    }
}

/// Name of a trained variant: `FH`, `FMH`, `FMRH-s` or `FMRH-ss`.
pub fn variant_label(variant: ModelVariant, mode: LossMode) -> String {
    match (variant, mode) {
        (ModelVariant::FMRH, LossMode::Supervised) => "FMRH-s".into(),
        (ModelVariant::FMRH, LossMode::Combined) => "FMRH-ss".into(),
        (v, _) => v.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss_mode: LossMode,
    pub weights: LossWeights,
    /// Dual samples per step.
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// The learning rate is multiplied by `decay_factor` from
    /// `round(decay_at · steps)` on.
    pub decay_at: f64,
    pub decay_factor: f64,
    pub seed: u64,
    /// Held-out MACE every this many steps (and at the last step); 0 = last only.
    pub eval_every: usize,
    /// Trailing samples of the dataset kept out of training.
    pub holdout: usize,
    /// Show each training dual through a random symmetry of the square.
    pub augment: bool,
    /// Pixels per unit of the supervised loss; `rho` keeps it comparable
    /// to the self-supervised term.
    pub offset_unit: f64,
    /// The self-supervised loss trains only the denoiser; without this it
    /// also reaches the extractor, which can satisfy it by collapsing.
    pub ss_denoiser_only: bool,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, loss_mode: LossMode) -> Self {
        Self {
            model,
            loss_mode,
            weights: LossWeights::default(),
            batch_size: 32,
            steps: 1000,
            lr: 1e-4,
            decay_at: 2.0 / 3.0,
            decay_factor: 0.1,
            seed: 0,
            eval_every: 100,
            holdout: 100,
            augment: false,
            offset_unit: 1.0,
            ss_denoiser_only: false,
        }
    }

    pub fn label(&self) -> String {
        variant_label(self.model.variant, self.loss_mode)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        let bad = |m: String| Err(Error::InvalidTrainConfig(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.offset_unit > 0.0 && self.offset_unit.is_finite()) {
            return bad(format!("offset unit {} must be positive", self.offset_unit));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..=1.0).contains(&self.decay_at) || self.decay_factor.is_nan() || self.decay_factor <= 0.0 {
            return bad("decay point must lie in [0, 1] and the factor be positive".into());
        }
        if self.loss_mode == LossMode::Combined && !self.model.variant.has_denoiser() {
            return bad(format!("combined loss needs FMRH, not {}", self.model.variant));
        }
        Ok(())
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        let decay = (self.decay_at * self.steps as f64).round() as usize;
        if step >= decay {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &Params<T>) -> Self {
        let zeros = || params.ids().map(|id| vec![T::zero(); params.get(id).len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Grads<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (1.0 - self.beta1.powi(self.t), 1.0 - self.beta2.powi(self.t));
        let step = T::of(lr * c2.sqrt() / c1);
        let eps = T::of(self.eps * c2.sqrt());
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (((p, &gi), mi), vi) in params.get_mut(id).data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *p = *p - step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

/// Network-ready tensors for a batch of dual samples: the ab pairs followed
/// by the cd pairs.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    /// `pairs x 8` ground-truth offsets.
    pub gt: Vec<T>,
    pub pairs: usize,
    pub dual: bool,
    /// Pixels per unit of the supervised loss.
    pub offset_unit: f64,
}

impl<T: Real> Batch<T> {
    pub fn from_duals(samples: &[&DualSample]) -> Result<Self> {
        let a: Vec<&GrayImage> = samples.iter().map(|s| &s.pair_ab.image_a).chain(samples.iter().map(|s| &s.pair_cd.image_a)).collect();
        let b: Vec<&GrayImage> = samples.iter().map(|s| &s.pair_ab.image_b).chain(samples.iter().map(|s| &s.pair_cd.image_b)).collect();
        let gt = samples.iter().flat_map(|s| s.gt_offsets().to_flat()).map(T::of).collect();
        Ok(Self { a: image_tensor(&a)?, b: image_tensor(&b)?, gt, pairs: samples.len(), dual: true, offset_unit: 1.0 })
    }
}

/// Forward pass and losses of `model` on `batch`.
pub fn batch_losses<'a, T: Real>(
    model: &'a Model<T>,
    g: &mut Graph<'a, T>,
    batch: &Batch<T>,
    mode: LossMode,
    weights: LossWeights,
) -> Result<(Forward, LossVars)> {
    let (a, b) = (g.input(batch.a.clone()), g.input(batch.b.clone()));
    let fwd = model.forward(g, a, b)?;
    let ss = (mode == LossMode::Combined).then_some(weights);
    let lv = loss_graph(g, &fwd, batch.pairs, batch.dual, &batch.gt, batch.offset_unit, ss)?;
    Ok((fwd, lv))
}

/// MACE of `model` on the ab pairs of `samples`.
pub fn heldout_mace(model: &Model<f32>, samples: &[DualSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let pairs: Vec<(&GrayImage, &GrayImage)> = samples.iter().map(|s| (&s.pair_ab.image_a, &s.pair_ab.image_b)).collect();
    let pred = model.predict(&pairs, 16)?;
    let gt: Vec<FourPointOffsets> = samples.iter().map(|s| *s.gt_offsets()).collect();
    mace(&pred, &gt)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub l_s: f64,
    pub l_ss: Option<f64>,
    pub l_f: f64,
    pub heldout_mace: Option<f64>,
    pub wall_clock: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.9}"))
}

impl MetricRow {
    pub const HEADER: &'static str = "step,l_s,l_ss,l_f,heldout_mace,wall_clock";

    pub fn csv(&self) -> String {
        format!(
            "{},{:.9},{},{:.9},{},{:.3}",
            self.step,
            self.l_s,
            opt(self.l_ss),
            self.l_f,
            opt(self.heldout_mace),
            self.wall_clock
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub label: String,
    pub initial_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
    pub untrained_mace: f64,
    pub best_mace: Option<f64>,
    pub final_mace: Option<f64>,
    pub metrics: Vec<MetricRow>,
}

pub const METRICS_FILE: &str = "metrics.csv";

/// Reads the dataset at `data_dir` and trains on it.
pub fn train_from_dir(cfg: &TrainConfig, data_dir: &Path, out: &Path) -> Result<TrainOutcome> {
    let data = read_dataset(data_dir)?;
    if data.samples.is_empty() {
        return Err(Error::DatasetMissing(data_dir.to_path_buf()));
    }
    train(cfg, &data, out)
}

fn dump_batch(samples: &[&DualSample], ds: &Dataset, row: &MetricRow, dir: &Path) -> Result<()> {
    let owned: Vec<DualSample> = samples.iter().map(|s| (*s).clone()).collect();
    write_dataset(&owned, &ds.header.config, dir)?;
    let losses = serde_json::json!({ "step": row.step, "l_s": row.l_s, "l_ss": row.l_ss, "l_f": row.l_f });
    std::fs::write(dir.join("losses.json"), losses.to_string())?;
    Ok(())
}

/// Trains a fresh model. Writes `metrics.csv` and `checkpoints/{initial,best,final}`
/// under `out`; with 0 steps only the initial checkpoint exists.
pub fn train(cfg: &TrainConfig, data: &Dataset, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let size = data.header.config.image_size as usize;
    if size != cfg.model.image_size {
        return Err(Error::InvalidTrainConfig(format!(
            "model expects {0}x{0} images but the dataset holds {size}x{size}",
            cfg.model.image_size
        )));
    }
    let n = data.samples.len();
    if cfg.holdout == 0 || cfg.holdout >= n {
        return Err(Error::InvalidTrainConfig(format!("hold-out of {} leaves no training data among {n} samples", cfg.holdout)));
    }
    let (train_set, held) = data.samples.split_at(n - cfg.holdout);

    std::fs::create_dir_all(out.join("checkpoints"))?;
    let label = cfg.label();
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let initial = out.join("checkpoints").join("initial");
    save_checkpoint(&model, &label, &initial)?;
    let untrained_mace = heldout_mace(&model, held)?;

    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join(METRICS_FILE))?);
    writeln!(log, "{}", MetricRow::HEADER)?;
    log.flush()?;

    let mut outcome = TrainOutcome {
        label: label.clone(),
        initial_checkpoint: initial,
        best_checkpoint: None,
        final_checkpoint: None,
        untrained_mace,
        best_mace: None,
        final_mace: None,
        metrics: Vec::new(),
    };
    if cfg.steps == 0 {
        return Ok(outcome);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new(&model.params);
    let start = Instant::now();
    for step in 1..=cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().expect("refilled"));
        }
        let picked: Vec<&DualSample> = idx.iter().map(|&i| &train_set[i]).collect();
        let transformed: Vec<DualSample> = if cfg.augment {
            picked.iter().map(|s| dihedral_dual(s, rng.random_range(0..8))).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let samples: Vec<&DualSample> = if cfg.augment { transformed.iter().collect() } else { picked };
        let batch = Batch::<f32> { offset_unit: cfg.offset_unit, ..Batch::from_duals(&samples)? };

        let (row, grads) = {
            let mut g = Graph::new();
            let (fwd, lv) = batch_losses(&model, &mut g, &batch, cfg.loss_mode, cfg.weights)?;
            let row = MetricRow {
                step,
                l_s: g.value(lv.l_s).item().f64(),
                l_ss: lv.l_ss.map(|v| g.value(v).item().f64()),
                l_f: g.value(lv.l_f).item().f64(),
                heldout_mace: None,
                wall_clock: 0.0,
            };
            if !row.l_f.is_finite() {
                let dump = out.join(format!("nonfinite_step_{step}"));
                dump_batch(&samples, data, &row, &dump)?;
                return Err(Error::NonFiniteLoss { step, dump });
            }
            let n = model.params.len();
            let grads = match (lv.l_ss, fwd.cost) {
                (Some(l_ss), Some(c)) if cfg.ss_denoiser_only => {
                    let mut grads = g.backward(lv.l_s, n);
                    grads.accumulate(g.backward_above(l_ss, Some(c), n));
                    grads
                }
                _ => g.backward(lv.l_f, n),
            };
            (row, grads)
        };
        adam.step(&mut model.params, &grads, cfg.learning_rate(step - 1));

        let mut row = row;
        let evaluate = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        if evaluate {
            let m = heldout_mace(&model, held)?;
            row.heldout_mace = Some(m);
            if outcome.best_mace.is_none_or(|b| m < b) {
                let dir = out.join("checkpoints").join("best");
                save_checkpoint(&model, &label, &dir)?;
                outcome.best_mace = Some(m);
                outcome.best_checkpoint = Some(dir);
            }
        }
        row.wall_clock = start.elapsed().as_secs_f64();
        writeln!(log, "{}", row.csv())?;
        log.flush()?;
        outcome.metrics.push(row);
    }
    let dir = out.join("checkpoints").join("final");
    save_checkpoint(&model, &label, &dir)?;
    outcome.final_checkpoint = Some(dir);
    outcome.final_mace = outcome.metrics.last().and_then(|r| r.heldout_mace);
    Ok(outcome)
}

/// Finite-difference check of the training loss of `model` (after jittering
/// its zero-initialized tensors) on `batch`, over `count` sampled coordinates.
pub fn model_gradcheck(
    model: &Model<f64>,
    batch: &Batch<f64>,
    mode: LossMode,
    weights: LossWeights,
    count: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let mut params = model.params.clone();
    jitter_zero_tensors(&mut params, 0.05, seed);
    let model = Model::from_params(model.config().clone(), params)?;
    // Validate the graph once so the closure can unwrap.
    batch_losses(&model, &mut Graph::new(), batch, mode, weights)?;
    let eval = |p: &Params<f64>, want: bool| {
        let m = Model::from_params(model.config().clone(), p.clone()).expect("same layout");
        let mut g = Graph::new();
        let (_, lv) = batch_losses(&m, &mut g, batch, mode, weights).expect("validated");
        Probe {
            loss: g.value(lv.l_f).item(),
            signature: g.branch_signature(),
            grads: want.then(|| g.backward(lv.l_f, p.len())),
        }
    };
    // Oversample: some candidates sit next to a kink.
    let coords = sample_coordinates(&model.params, count * 4, seed);
    Ok(gradcheck(&model.params, eval, &coords, count, 1e-4))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_duals, GenConfig, SourcePool};
    use crate::network::{DenoiserConfig, EstimatorConfig, ExtractorConfig};

    fn tiny_model(variant: ModelVariant) -> ModelConfig {
        ModelConfig {
            variant,
            image_size: 32,
            extractor: ExtractorConfig { stem_width: 8, widths: [8, 8], blocks: [1, 1], normalize: true },
            denoiser: DenoiserConfig { base: Some(8), channels: vec![1, 2], ..Default::default() },
            estimator: EstimatorConfig { hidden: 16, pool_to: None },
        }
    }

    fn tiny_data(n: u64) -> Dataset {
        let cfg = GenConfig { image_size: 32, rho: 8.0, global_seed: 3, ..Default::default() };
        let pool = SourcePool::procedural(4, cfg.source_size(), 2);
        Dataset::new(cfg.clone(), generate_duals(&pool, &cfg, 0..n).unwrap())
    }

    fn tiny_train(mode: LossMode, steps: usize) -> TrainConfig {
        TrainConfig { batch_size: 2, steps, lr: 1e-3, eval_every: 2, holdout: 2, ..TrainConfig::new(tiny_model(ModelVariant::FMRH), mode) }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = Params::new();
        let id = params.push("x", Tensor::from_vec(&[2], vec![3.0f64, -2.0]));
        let mut adam = Adam::new(&params);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let x = g.param(&params, id);
            let l = g.mse_mean(x, &[1.0, 1.0]);
            let grads = g.backward(l, 1);
            adam.step(&mut params, &grads, 0.01);
        }
        assert!(params.get(id).data.iter().all(|v| (v - 1.0).abs() < 1e-3), "{:?}", params.get(id));
    }

    #[test]
    fn schedule_decays_at_two_thirds() {
        let cfg = TrainConfig { steps: 30, ..tiny_train(LossMode::Combined, 30) };
        assert_eq!(cfg.learning_rate(0), 1e-3);
        assert_eq!(cfg.learning_rate(19), 1e-3);
        assert!((cfg.learning_rate(20) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_train(LossMode::Combined, 1);
        cfg.model.variant = ModelVariant::FMH;
        assert!(matches!(cfg.validate(), Err(Error::InvalidTrainConfig(_))));
        assert_eq!(tiny_train(LossMode::Supervised, 1).label(), "FMRH-s");
        let dir = tempfile::tempdir().unwrap();
        let big_holdout = TrainConfig { holdout: 4, ..tiny_train(LossMode::Combined, 1) };
        assert!(train(&big_holdout, &tiny_data(4), dir.path()).is_err());
        assert!(matches!(train_from_dir(&big_holdout, &dir.path().join("nope"), dir.path()), Err(Error::DatasetMissing(_))));
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&tiny_train(LossMode::Combined, 0), &tiny_data(4), dir.path()).unwrap();
        assert!(out.initial_checkpoint.join("checkpoint.json").exists());
        assert!(out.final_checkpoint.is_none() && out.best_checkpoint.is_none());
        assert!(out.metrics.is_empty());
        let log = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(log.trim(), MetricRow::HEADER);
    }

    #[test]
    fn identical_seeds_give_identical_curves() {
        let data = tiny_data(6);
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            train(&tiny_train(LossMode::Combined, 4), &data, dir.path()).unwrap()
        };
        let (a, b) = (run(), run());
        let losses = |o: &TrainOutcome| o.metrics.iter().map(|r| (r.l_s, r.l_ss, r.l_f, r.heldout_mace)).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.metrics.len(), 4);
        assert!(a.metrics.iter().all(|r| r.l_ss.is_some()));
        assert!(a.final_checkpoint.is_some() && a.best_mace.is_some());
    }

    #[test]
    fn nonfinite_loss_aborts_with_dump() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { lr: 1e30, eval_every: 0, ..tiny_train(LossMode::Combined, 5) };
        match train(&cfg, &tiny_data(4), dir.path()) {
            Err(Error::NonFiniteLoss { dump, .. }) => {
                assert!(dump.join("losses.json").exists());
                assert!(dump.join(crate::datagen::MANIFEST).exists());
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let data = tiny_data(3);
        let refs: Vec<&DualSample> = data.samples.iter().collect();
        let batch = Batch::<f64>::from_duals(&refs).unwrap();
        let mut model = Model::<f64>::new(tiny_model(ModelVariant::FMRH), 1).unwrap();
        jitter_zero_tensors(&mut model.params, 0.05, 2);
        let mut g = Graph::new();
        let (_, lv) = batch_losses(&model, &mut g, &batch, LossMode::Combined, LossWeights::default()).unwrap();
        let grads = g.backward(lv.l_f, model.params.len());
        for id in model.params.ids() {
            let gt = grads.get(id).unwrap_or_else(|| panic!("no gradient for {}", model.params.name(id)));
            assert!(gt.data.iter().any(|v| *v != 0.0), "zero gradient for {}", model.params.name(id));
        }
    }

    #[test]
    fn routed_self_supervised_gradient_stops_at_the_cost_volume() {
        let data = tiny_data(2);
        let refs: Vec<&DualSample> = data.samples.iter().collect();
        let batch = Batch::<f64>::from_duals(&refs).unwrap();
        let mut model = Model::<f64>::new(tiny_model(ModelVariant::FMRH), 1).unwrap();
        jitter_zero_tensors(&mut model.params, 0.05, 2);
        let mut g = Graph::new();
        let (fwd, lv) = batch_losses(&model, &mut g, &batch, LossMode::Combined, LossWeights::default()).unwrap();
        let n = model.params.len();
        let full = g.backward(lv.l_ss.unwrap(), n);
        let routed = g.backward_above(lv.l_ss.unwrap(), fwd.cost, n);
        for id in model.params.ids() {
            let name = model.params.name(id);
            if name.starts_with("denoiser.") {
                assert_eq!(routed.get(id).unwrap().data, full.get(id).unwrap().data, "{name}");
            } else {
                assert!(routed.get(id).is_none(), "{name}");
                if name.starts_with("extractor.") {
                    assert!(full.get(id).is_some(), "{name}");
                }
            }
        }
    }

    #[test]
    fn combined_mode_updates_the_denoiser_each_step() {
        let data = tiny_data(4);
        let mut model = Model::<f32>::new(tiny_model(ModelVariant::FMRH), 1).unwrap();
        let mut adam = Adam::new(&model.params);
        let names: Vec<String> = model.denoiser_param_names().into_iter().map(String::from).collect();
        assert!(!names.is_empty());
        for step in 0..3 {
            let refs: Vec<&DualSample> = data.samples.iter().skip(step % 2).take(2).collect();
            let batch = Batch::<f32>::from_duals(&refs).unwrap();
            let grads = {
                let mut g = Graph::new();
                let (_, lv) = batch_losses(&model, &mut g, &batch, LossMode::Combined, LossWeights::default()).unwrap();
                g.backward(lv.l_f, model.params.len())
            };
            let denoiser_grad: f32 = model
                .params
                .ids()
                .filter(|id| names.iter().any(|n| n == model.params.name(*id)))
                .filter_map(|id| grads.get(id))
                .flat_map(|t| t.data.iter().map(|v| v.abs()))
                .sum();
            assert!(denoiser_grad > 0.0, "step {step}");
            adam.step(&mut model.params, &grads, 1e-3);
        }
    }

    #[test]
    fn gradcheck_reduced_fmrh() {
        let data = tiny_data(2);
        let refs: Vec<&DualSample> = data.samples.iter().collect();
        let batch = Batch::<f64>::from_duals(&refs).unwrap();
        let model = Model::<f64>::new(tiny_model(ModelVariant::FMRH), 4).unwrap();
        let r = model_gradcheck(&model, &batch, LossMode::Combined, LossWeights::default(), 20, 1).unwrap();
        assert_eq!(r.checked, 20, "{r:?}");
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}
