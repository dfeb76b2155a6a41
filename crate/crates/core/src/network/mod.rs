//! Trainable components and the assembled model variants.
//!
//! * extractor `f`: residual CNN, stride 8, `D` output channels;
//! * denoiser `r`: encoder-decoder over the `[hw, h, w]` cost volume;
//! * estimator `h`: two fully connected layers producing 8 offsets.
//!
//! Both images go through one extractor pass (shared weights).

mod checkpoint;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_FILE, PARAMS_FILE};

use crate::autograd::{Graph, Params, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::FourPointOffsets;
use crate::matching::{CostVolume, CostVolume3d, FeatureMap};
use crate::parallel;
use crate::real::Real;
use image::GrayImage;
use layers::{Conv, Dense, Init};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    FH,
    FMH,
    FMRH,
}

impl ModelVariant {
    pub fn has_cost_volume(self) -> bool {
        self != ModelVariant::FH
    }

    pub fn has_denoiser(self) -> bool {
        self == ModelVariant::FMRH
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelVariant::FH => "FH",
            ModelVariant::FMH => "FMH",
            ModelVariant::FMRH => "FMRH",
        })
    }
}

impl FromStr for ModelVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FH" => Ok(ModelVariant::FH),
            "FMH" => Ok(ModelVariant::FMH),
            "FMRH" => Ok(ModelVariant::FMRH),
            _ => Err(Error::Config(format!("unknown model variant {s:?} (expected FH, FMH or FMRH)"))),
        }
    }
}

/// Residual backbone: 7x7/2 stem, 3x3/2 max pool, then two stages of basic
/// blocks, the second with stride 2. Output channels `D = widths[1]`.
/// With `normalize`, every cell's feature vector is rescaled to length
/// `sqrt(D)`, which makes `<a, b> / D` the cosine similarity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub stem_width: usize,
    pub widths: [usize; 2],
    pub blocks: [usize; 2],
    pub normalize: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { stem_width: 64, widths: [64, 128], blocks: [3, 4], normalize: true }
    }
}

impl ExtractorConfig {
    /// Narrow, shallow variant for desk-scale runs.
    pub fn reduced() -> Self {
        Self { stem_width: 16, widths: [16, 32], blocks: [1, 1], normalize: true }
    }

    pub fn d(&self) -> usize {
        self.widths[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.d() < 8 {
            return Err(Error::Config(format!("feature channels D = {} must be at least 8", self.d())));
        }
        if self.stem_width == 0 || self.widths[0] == 0 || self.blocks.contains(&0) {
            return Err(Error::Config("extractor widths and block counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserKind {
    Unet,
    Dncnn,
}

impl FromStr for DenoiserKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(DenoiserKind::Unet),
            "dncnn" => Ok(DenoiserKind::Dncnn),
            _ => Err(Error::Config(format!("unknown denoiser kind {s:?} (expected unet or dncnn)"))),
        }
    }
}

/// `channels` are multiples of `base` (default `hw`), one per resolution
/// level; the UNet halves the resolution between levels. DnCNN uses
/// `channels[0]` as its width and `dncnn_depth` convolutions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    pub base: Option<usize>,
    pub channels: Vec<usize>,
    pub residual: bool,
    pub dncnn_depth: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { kind: DenoiserKind::Unet, base: None, channels: vec![1, 2, 4], residual: true, dncnn_depth: 5 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.base == Some(0) {
            return Err(Error::Config("denoiser channel plan must be non-empty and positive".into()));
        }
        match self.kind {
            DenoiserKind::Unet => {
                let f = 1 << (self.channels.len() - 1);
                if !h.is_multiple_of(f) || !w.is_multiple_of(f) {
                    return Err(Error::Config(format!(
                        "{} denoiser levels need the {h}x{w} cost-volume grid divisible by {f}",
                        self.channels.len()
                    )));
                }
            }
            DenoiserKind::Dncnn if self.dncnn_depth < 2 => {
                return Err(Error::Config("dncnn depth must be at least 2".into()));
            }
            DenoiserKind::Dncnn => {}
        }
        Ok(())
    }
}

/// Hidden width and optional spatial average pooling of the cost volume
/// down to `pool_to x pool_to` before flattening.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub hidden: usize,
    pub pool_to: Option<usize>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { hidden: 1024, pool_to: Some(8) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub image_size: usize,
    pub extractor: ExtractorConfig,
    pub denoiser: DenoiserConfig,
    pub estimator: EstimatorConfig,
}

impl ModelConfig {
    pub fn new(variant: ModelVariant, image_size: usize) -> Self {
        Self {
            variant,
            image_size,
            extractor: ExtractorConfig::default(),
            denoiser: DenoiserConfig::default(),
            estimator: EstimatorConfig::default(),
        }
    }

    /// Side of the feature grid.
    pub fn grid(&self) -> usize {
        self.image_size / 8
    }

    pub fn cells(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Pooled grid side seen by the estimator.
    fn pooled(&self) -> usize {
        match self.estimator.pool_to {
            Some(p) if p < self.grid() => p,
            _ => self.grid(),
        }
    }

    pub fn estimator_input(&self) -> usize {
        match self.variant {
            ModelVariant::FH => 2 * self.extractor.d(),
            _ => self.cells() * self.pooled() * self.pooled(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s == 0 || !s.is_multiple_of(8) {
            return Err(Error::Config(format!("image size {s} must be a positive multiple of 8")));
        }
        self.extractor.validate()?;
        if self.estimator.hidden == 0 {
            return Err(Error::Config("estimator hidden width must be positive".into()));
        }
        if let Some(p) = self.estimator.pool_to {
            if p == 0 || (p < self.grid() && !self.grid().is_multiple_of(p)) {
                return Err(Error::Config(format!("cannot pool a {0}x{0} grid to {p}x{p}", self.grid())));
            }
        }
        if self.variant.has_denoiser() {
            self.denoiser.validate(self.grid(), self.grid())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv,
    conv2: Conv,
    down: Option<Conv>,
}

#[derive(Debug, Clone)]
enum Denoiser {
    Unet { enc: Vec<[Conv; 2]>, dec: Vec<[Conv; 2]>, out: Conv },
    Dncnn(Vec<Conv>),
}

#[derive(Debug, Clone)]
struct Layout {
    stem: Conv,
    blocks: Vec<Block>,
    denoiser: Option<Denoiser>,
    fc1: Dense,
    fc2: Dense,
}

fn build<T: Real>(cfg: &ModelConfig, params: &mut Params<T>, seed: u64) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let he = Init::He(1.0);
    let ex = &cfg.extractor;
    let stem = Conv::new(params, "extractor.stem", 1, ex.stem_width, 7, 2, he, rng);
    let mut blocks = Vec::new();
    let mut cin = ex.stem_width;
    for stage in 0..2 {
        let width = ex.widths[stage];
        for b in 0..ex.blocks[stage] {
            let stride = if stage == 1 && b == 0 { 2 } else { 1 };
            let name = format!("extractor.layer{}.{b}", stage + 1);
            let conv1 = Conv::new(params, &format!("{name}.conv1"), cin, width, 3, stride, he, rng);
            // Down-weighted second conv keeps the residual sum tame without normalization.
            let conv2 = Conv::new(params, &format!("{name}.conv2"), width, width, 3, 1, Init::He(0.5), rng);
            let down = (stride != 1 || cin != width)
                .then(|| Conv::new(params, &format!("{name}.down"), cin, width, 1, stride, he, rng));
            blocks.push(Block { conv1, conv2, down });
            cin = width;
        }
    }

    let hw = cfg.cells();
    let denoiser = cfg.variant.has_denoiser().then(|| {
        let dn = &cfg.denoiser;
        let out_init = if dn.residual { Init::Zero } else { he };
        let base = dn.base.unwrap_or(hw);
        match dn.kind {
            DenoiserKind::Unet => {
                let ch: Vec<usize> = dn.channels.iter().map(|m| m * base).collect();
                let mut enc = Vec::new();
                for (l, &c) in ch.iter().enumerate() {
                    let cin = if l == 0 { hw } else { ch[l - 1] };
                    enc.push([
                        Conv::new(params, &format!("denoiser.enc{l}.conv1"), cin, c, 3, 1, he, rng),
                        Conv::new(params, &format!("denoiser.enc{l}.conv2"), c, c, 3, 1, he, rng),
                    ]);
                }
                let mut dec = Vec::new();
                for l in 0..ch.len() - 1 {
                    dec.push([
                        Conv::new(params, &format!("denoiser.dec{l}.conv1"), ch[l + 1] + ch[l], ch[l], 3, 1, he, rng),
                        Conv::new(params, &format!("denoiser.dec{l}.conv2"), ch[l], ch[l], 3, 1, he, rng),
                    ]);
                }
                let out = Conv::new(params, "denoiser.out", ch[0], hw, 1, 1, out_init, rng);
                Denoiser::Unet { enc, dec, out }
            }
            DenoiserKind::Dncnn => {
                let width = dn.channels[0] * base;
                let mut convs = Vec::new();
                for l in 0..dn.dncnn_depth {
                    let cin = if l == 0 { hw } else { width };
                    let last = l + 1 == dn.dncnn_depth;
                    let (cout, init) = if last { (hw, out_init) } else { (width, he) };
                    convs.push(Conv::new(params, &format!("denoiser.conv{l}"), cin, cout, 3, 1, init, rng));
                }
                Denoiser::Dncnn(convs)
            }
        }
    });

    let fc1 = Dense::new(params, "estimator.fc1", cfg.estimator_input(), cfg.estimator.hidden, he, rng);
    // Zero-initialized: the untrained model predicts the identity homography.
    let fc2 = Dense::new(params, "estimator.fc2", cfg.estimator.hidden, 8, Init::Zero, rng);
    Layout { stem, blocks, denoiser, fc1, fc2 }
}

/// Graph handles produced by [`Model::forward`].
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `[N, 8]`, pixels at input scale.
    pub offsets: Var,
    /// `[N, D, h, w]`
    pub features_a: Var,
    pub features_b: Var,
    /// `[N, hw, h, w]`: channel `j` at cell `i` is the score of source cell
    /// `i` against target cell `j`.
    pub cost: Option<Var>,
    pub cleaned: Option<Var>,
}

/// Per-sample intermediates in their domain types.
#[derive(Debug, Clone)]
pub struct Inspection<T> {
    pub offsets: FourPointOffsets,
    pub features_a: FeatureMap<T>,
    pub features_b: FeatureMap<T>,
    pub cost: Option<CostVolume<T>>,
    pub cleaned: Option<CostVolume<T>>,
}

/// Standardized `[N, 1, S, S]` tensor: `(v / 255 - 0.5) / 0.5`.
pub fn image_tensor<T: Real>(images: &[&GrayImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::BadShape("empty image batch".into()))?;
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(images.len() * (w * h) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::BadShape(format!("image {:?} in a batch of {:?}", img.dimensions(), (w, h))));
        }
        data.extend(img.as_raw().iter().map(|&v| T::of((v as f64 / 255.0 - 0.5) / 0.5)));
    }
    Ok(Tensor::from_vec(&[images.len(), 1, h as usize, w as usize], data))
}

/// `[N, hw, h, w]` sample `s` to the row-major `hw x hw` 2D form.
fn volume_to_2d<T: Real>(t: &Tensor<T>, s: usize) -> CostVolume<T> {
    let (_, c, h, w) = t.dims4();
    let cells = h * w;
    debug_assert_eq!(c, cells);
    let src = &t.data[s * cells * cells..(s + 1) * cells * cells];
    let mut data = vec![T::zero(); cells * cells];
    for j in 0..cells {
        for i in 0..cells {
            data[i * cells + j] = src[j * cells + i];
        }
    }
    CostVolume { h, w, data }
}

fn volume_from_3d<T: Real>(c: &CostVolume3d<T>) -> Tensor<T> {
    let cells = c.h * c.w;
    let mut data = vec![T::zero(); c.channels * cells];
    for i in 0..cells {
        for j in 0..c.channels {
            data[j * cells + i] = c.data[i * c.channels + j];
        }
    }
    Tensor::from_vec(&[1, c.channels, c.h, c.w], data)
}

fn feature_map<T: Real>(t: &Tensor<T>, s: usize) -> FeatureMap<T> {
    let (_, d, h, w) = t.dims4();
    FeatureMap::from_chw(d, h, w, &t.data[s * d * h * w..(s + 1) * d * h * w]).expect("consistent feature tensor")
}

fn offsets_at<T: Real>(t: &Tensor<T>, s: usize) -> FourPointOffsets {
    let flat: Vec<f64> = t.data[s * 8..(s + 1) * 8].iter().map(|v| v.f64()).collect();
    FourPointOffsets::from_flat(&flat)
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    config: ModelConfig,
    pub params: Params<T>,
    layout: Layout,
}

impl<T: Real> Model<T> {
    /// Fresh model with He-normal weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let layout = build(&config, &mut params, seed);
        Ok(Self { config, params, layout })
    }

    /// Rebuilds the layout for `config` around existing parameters, which
    /// must match in order, name and shape.
    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for id in model.params.ids() {
            let (want, got) = (model.params.get(id), params.get(id));
            if model.params.name(id) != params.name(id) || want.shape != got.shape {
                return Err(Error::CorruptCheckpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    params.name(id),
                    got.shape,
                    model.params.name(id),
                    want.shape
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    /// Ids of the denoiser's parameters (empty for FH/FMH).
    pub fn denoiser_param_names(&self) -> Vec<&str> {
        self.params.ids().map(|id| self.params.name(id)).filter(|n| n.starts_with("denoiser.")).collect()
    }

    pub fn extract<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Var {
        let p = &self.params;
        let mut x = self.layout.stem.apply(g, p, x);
        x = g.relu(x);
        x = g.max_pool(x, 3, 2, 1);
        for b in &self.layout.blocks {
            let y = b.conv1.apply(g, p, x);
            let y = g.relu(y);
            let y = b.conv2.apply(g, p, y);
            let skip = match &b.down {
                Some(d) => d.apply(g, p, x),
                None => x,
            };
            let s = g.add(y, skip);
            x = g.relu(s);
        }
        if self.config.extractor.normalize {
            x = g.normalize_channels(x);
        }
        x
    }

    /// Denoiser on `[N, hw, h, w]`; panics for variants without one.
    pub fn denoise<'a>(&'a self, g: &mut Graph<'a, T>, c: Var) -> Var {
        let p = &self.params;
        let conv_relu = |g: &mut Graph<'a, T>, conv: &Conv, x: Var| {
            let y = conv.apply(g, p, x);
            g.relu(y)
        };
        let out = match self.layout.denoiser.as_ref().expect("model has no denoiser") {
            Denoiser::Unet { enc, dec, out } => {
                let mut skips = Vec::new();
                let mut x = c;
                for (l, [c1, c2]) in enc.iter().enumerate() {
                    if l > 0 {
                        x = g.max_pool(x, 2, 2, 0);
                    }
                    x = conv_relu(g, c1, x);
                    x = conv_relu(g, c2, x);
                    skips.push(x);
                }
                skips.pop();
                for (l, [c1, c2]) in dec.iter().enumerate().rev() {
                    x = g.upsample2x(x);
                    x = g.concat_channels(x, skips[l]);
                    x = conv_relu(g, c1, x);
                    x = conv_relu(g, c2, x);
                }
                out.apply(g, p, x)
            }
            Denoiser::Dncnn(convs) => {
                let mut x = c;
                for (l, conv) in convs.iter().enumerate() {
                    x = if l + 1 == convs.len() { conv.apply(g, p, x) } else { conv_relu(g, conv, x) };
                }
                x
            }
        };
        if self.config.denoiser.residual {
            g.add(out, c)
        } else {
            out
        }
    }

    /// Estimator on `[N, hw, h, w]` volumes (or `[N, 2D]` pooled features).
    pub fn estimate_var<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Var {
        let p = &self.params;
        let n = g.shape(x)[0];
        let mut x = x;
        if g.shape(x).len() == 4 {
            let grid = g.shape(x)[2];
            let pooled = self.config.pooled();
            if pooled < grid {
                x = g.avg_pool(x, grid / pooled);
            }
        }
        let width = g.value(x).len() / n.max(1);
        let x = g.reshape(x, &[n, width]);
        let y = self.layout.fc1.apply(g, p, x);
        let y = g.relu(y);
        self.layout.fc2.apply(g, p, y)
    }

    /// Full forward pass on image batches `[N, 1, S, S]`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, a: Var, b: Var) -> Result<Forward> {
        let s = self.config.image_size;
        let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
        if sa != sb || sa.len() != 4 || sa[1] != 1 || sa[2] != s || sa[3] != s {
            return Err(Error::BadShape(format!("forward expects two [N, 1, {s}, {s}] batches, got {sa:?} and {sb:?}")));
        }
        let n = sa[0];
        let both = g.concat_batch(&[a, b]);
        let feats = self.extract(g, both);
        let fa = g.narrow_batch(feats, 0, n);
        let fb = g.narrow_batch(feats, n, n);
        let (cost, cleaned, head_in) = match self.config.variant {
            ModelVariant::FH => {
                let d = self.config.extractor.d();
                let pa = g.global_avg_pool(fa);
                let pb = g.global_avg_pool(fb);
                let pa = g.reshape(pa, &[n, d, 1, 1]);
                let pb = g.reshape(pb, &[n, d, 1, 1]);
                let cat = g.concat_channels(pa, pb);
                (None, None, g.reshape(cat, &[n, 2 * d]))
            }
            ModelVariant::FMH => {
                let c = g.correlate(fa, fb);
                (Some(c), None, c)
            }
            ModelVariant::FMRH => {
                let c = g.correlate(fa, fb);
                let cp = self.denoise(g, c);
                (Some(c), Some(cp), cp)
            }
        };
        let offsets = self.estimate_var(g, head_in);
        Ok(Forward { offsets, features_a: fa, features_b: fb, cost, cleaned })
    }

    /// Features of one image (`H, W` divisible by 8), `H/8 x W/8 x D`.
    pub fn feature_extract(&self, image: &GrayImage) -> Result<FeatureMap<T>> {
        let (w, h) = image.dimensions();
        if w == 0 || h == 0 || w % 8 != 0 || h % 8 != 0 {
            return Err(Error::BadShape(format!("image {w}x{h} is not divisible by 8")));
        }
        let mut g = Graph::new();
        let x = g.input(image_tensor(&[image])?);
        let f = self.extract(&mut g, x);
        Ok(feature_map(g.value(f), 0))
    }

    fn check_volume(&self, c: &CostVolume3d<T>) -> Result<()> {
        let (grid, cells) = (self.config.grid(), self.config.cells());
        if c.h != grid || c.w != grid || c.channels != cells || c.data.len() != cells * cells {
            return Err(Error::BadShape(format!(
                "cost volume {}x{}x{} but the model expects {grid}x{grid}x{cells}",
                c.h, c.w, c.channels
            )));
        }
        Ok(())
    }

    /// Denoises a 3D cost volume; shape is preserved.
    pub fn remove_outliers(&self, c: &CostVolume3d<T>) -> Result<CostVolume3d<T>> {
        if !self.variant().has_denoiser() {
            return Err(Error::WrongVariant(format!("{} has no denoiser", self.variant())));
        }
        self.check_volume(c)?;
        let mut g = Graph::new();
        let x = g.input(volume_from_3d(c));
        let y = self.denoise(&mut g, x);
        Ok(volume_to_2d(g.value(y), 0).to_3d())
    }

    /// Offsets from one (cleaned) 3D cost volume.
    pub fn estimate(&self, c: &CostVolume3d<T>) -> Result<FourPointOffsets> {
        if !self.variant().has_cost_volume() {
            return Err(Error::WrongVariant(format!("{} does not consume a cost volume", self.variant())));
        }
        self.check_volume(c)?;
        let mut g = Graph::new();
        let x = g.input(volume_from_3d(c));
        let y = self.estimate_var(&mut g, x);
        Ok(offsets_at(g.value(y), 0))
    }

    /// Runs the model on one batch of pairs and unpacks every intermediate.
    pub fn inspect(&self, pairs: &[(&GrayImage, &GrayImage)]) -> Result<Vec<Inspection<T>>> {
        let a: Vec<&GrayImage> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<&GrayImage> = pairs.iter().map(|p| p.1).collect();
        let mut g = Graph::new();
        let (ta, tb) = (image_tensor(&a)?, image_tensor(&b)?);
        let (va, vb) = (g.input(ta), g.input(tb));
        let out = self.forward(&mut g, va, vb)?;
        Ok((0..pairs.len())
            .map(|s| Inspection {
                offsets: offsets_at(g.value(out.offsets), s),
                features_a: feature_map(g.value(out.features_a), s),
                features_b: feature_map(g.value(out.features_b), s),
                cost: out.cost.map(|c| volume_to_2d(g.value(c), s)),
                cleaned: out.cleaned.map(|c| volume_to_2d(g.value(c), s)),
            })
            .collect())
    }

    /// Predicted offsets for many pairs, in batches of `batch`.
    pub fn predict(&self, pairs: &[(&GrayImage, &GrayImage)], batch: usize) -> Result<Vec<FourPointOffsets>> {
        let batch = batch.max(1);
        let chunks = parallel::try_map_range(pairs.len().div_ceil(batch), |k| -> Result<Vec<FourPointOffsets>> {
            let part = &pairs[k * batch..((k + 1) * batch).min(pairs.len())];
            let a: Vec<&GrayImage> = part.iter().map(|p| p.0).collect();
            let b: Vec<&GrayImage> = part.iter().map(|p| p.1).collect();
            let mut g = Graph::new();
            let (ta, tb) = (image_tensor(&a)?, image_tensor(&b)?);
            let (va, vb) = (g.input(ta), g.input(tb));
            let out = self.forward(&mut g, va, vb)?;
            Ok((0..part.len()).map(|s| offsets_at(g.value(out.offsets), s)).collect())
        })?;
        Ok(chunks.into_iter().flatten().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::cost_volume;

    fn small(variant: ModelVariant, size: usize) -> ModelConfig {
        ModelConfig {
            extractor: ExtractorConfig { stem_width: 8, widths: [8, 16], blocks: [1, 1], normalize: true },
            estimator: EstimatorConfig { hidden: 32, pool_to: Some(8) },
            ..ModelConfig::new(variant, size)
        }
    }

    fn image(size: u32, seed: u64) -> GrayImage {
        crate::datagen::procedural_source(size, seed)
    }

    #[test]
    fn feature_shape_law() {
        for size in [64u32, 128, 256] {
            let cfg = ModelConfig { extractor: ExtractorConfig::reduced(), ..small(ModelVariant::FH, size as usize) };
            let m = Model::<f32>::new(cfg, 1).unwrap();
            let f = m.feature_extract(&image(size, 2)).unwrap();
            assert_eq!((f.h, f.w, f.d), (size as usize / 8, size as usize / 8, 32));
        }
        let full = Model::<f32>::new(ModelConfig::new(ModelVariant::FH, 256), 1).unwrap();
        let f = full.feature_extract(&image(256, 3)).unwrap();
        assert_eq!((f.h, f.w, f.d), (32, 32, 128));
        assert!(matches!(full.feature_extract(&image(60, 3)), Err(Error::BadShape(_))));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = Model::<f32>::new(small(ModelVariant::FMRH, 64), 9).unwrap();
        let b = Model::<f32>::new(small(ModelVariant::FMRH, 64), 9).unwrap();
        assert_eq!(a.params, b.params);
        let img = image(64, 1);
        assert_eq!(a.feature_extract(&img).unwrap(), b.feature_extract(&img).unwrap());
        let c = a.inspect(&[(&img, &image(64, 2))]).unwrap();
        let d = b.inspect(&[(&img, &image(64, 2))]).unwrap();
        assert_eq!(c[0].cleaned, d[0].cleaned);
        assert_ne!(a.params, Model::<f32>::new(small(ModelVariant::FMRH, 64), 10).unwrap().params);
    }

    #[test]
    fn untrained_estimator_predicts_identity() {
        let m = Model::<f32>::new(small(ModelVariant::FMH, 64), 3).unwrap();
        let zero = CostVolume3d { h: 8, w: 8, channels: 64, data: vec![0.0; 64 * 64] };
        assert_eq!(m.estimate(&zero).unwrap(), FourPointOffsets::zeros());
        let out = m.inspect(&[(&image(64, 1), &image(64, 2))]).unwrap();
        assert!(out[0].offsets.to_flat().iter().all(|v| *v == 0.0));
        let wrong = CostVolume3d { h: 4, w: 4, channels: 16, data: vec![0.0; 256] };
        assert!(matches!(m.estimate(&wrong), Err(Error::BadShape(_))));
    }

    #[test]
    fn intermediates_by_variant() {
        let (a, b) = (image(64, 1), image(64, 2));
        for (v, cost, cleaned) in
            [(ModelVariant::FH, false, false), (ModelVariant::FMH, true, false), (ModelVariant::FMRH, true, true)]
        {
            let m = Model::<f32>::new(small(v, 64), 1).unwrap();
            let out = &m.inspect(&[(&a, &b)]).unwrap()[0];
            assert_eq!((out.cost.is_some(), out.cleaned.is_some()), (cost, cleaned), "{v}");
            assert_eq!(out.offsets.to_flat().len(), 8);
        }
    }

    #[test]
    fn full_size_fmrh_shapes() {
        let mut cfg = ModelConfig::new(ModelVariant::FMRH, 256);
        cfg.denoiser.base = Some(8);
        cfg.estimator.hidden = 16;
        let m = Model::<f32>::new(cfg, 5).unwrap();
        let out = &m.inspect(&[(&image(256, 1), &image(256, 2))]).unwrap()[0];
        let (c, cp) = (out.cost.as_ref().unwrap(), out.cleaned.as_ref().unwrap());
        for v in [c, cp] {
            let v3 = v.to_3d();
            assert_eq!((v3.h, v3.w, v3.channels), (32, 32, 1024));
        }
        assert!(out.offsets.to_flat().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_composes_the_standalone_ops() {
        for kind in [DenoiserKind::Unet, DenoiserKind::Dncnn] {
            let mut cfg = small(ModelVariant::FMRH, 64);
            cfg.denoiser.kind = kind;
            cfg.denoiser.base = Some(16);
            let mut m = Model::<f64>::new(cfg, 4).unwrap();
            // Non-zero output layers so every component matters.
            for id in m.params.ids().collect::<Vec<_>>() {
                let t = m.params.get_mut(id);
                if t.data.iter().all(|v| *v == 0.0) && t.shape.len() > 1 {
                    t.data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 7) as f64 - 3.0) * 1e-3);
                }
            }
            let (a, b) = (image(64, 1), image(64, 2));
            let whole = &m.inspect(&[(&a, &b)]).unwrap()[0];
            let c = cost_volume(&m.feature_extract(&a).unwrap(), &m.feature_extract(&b).unwrap()).unwrap();
            let cleaned = m.remove_outliers(&c.to_3d()).unwrap();
            assert_eq!((cleaned.h, cleaned.w, cleaned.channels), (8, 8, 64));
            let off = m.estimate(&cleaned).unwrap();
            for (x, y) in whole.offsets.to_flat().iter().zip(off.to_flat()) {
                assert!((x - y).abs() < 1e-9, "{kind:?}: {x} vs {y}");
            }
            let wc = whole.cleaned.as_ref().unwrap().to_3d();
            assert!(wc.data.iter().zip(&cleaned.data).all(|(x, y)| (x - y).abs() < 1e-9));
        }
    }

    #[test]
    fn residual_denoiser_starts_as_identity() {
        let m = Model::<f32>::new(small(ModelVariant::FMRH, 64), 2).unwrap();
        let c = CostVolume3d { h: 8, w: 8, channels: 64, data: (0..4096).map(|i| (i % 13) as f32 * 0.1).collect() };
        assert_eq!(m.remove_outliers(&c).unwrap(), c);
        let fmh = Model::<f32>::new(small(ModelVariant::FMH, 64), 2).unwrap();
        assert!(matches!(fmh.remove_outliers(&c), Err(Error::WrongVariant(_))));
    }

    #[test]
    fn invalid_configs() {
        assert!(Model::<f32>::new(small(ModelVariant::FH, 60), 0).is_err());
        let mut cfg = small(ModelVariant::FH, 64);
        cfg.extractor.widths = [8, 4];
        assert!(Model::<f32>::new(cfg, 0).is_err());
        let mut cfg = small(ModelVariant::FMRH, 32);
        cfg.denoiser.channels = vec![1, 1, 1, 1];
        assert!(Model::<f32>::new(cfg, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f32>::new(small(ModelVariant::FMRH, 64), 6).unwrap();
        let meta = save_checkpoint(&m, "FMRH-ss", dir.path()).unwrap();
        let (back, meta2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(meta, meta2);
        assert_eq!(meta.id, save_checkpoint(&back, "FMRH-ss", dir.path()).unwrap().id);
        assert_eq!(meta.d, 16);
        assert_eq!(meta.channel_ordering, crate::matching::CHANNEL_ORDERING);

        let path = dir.path().join(CHECKPOINT_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace(crate::matching::CHANNEL_ORDERING, "column-major")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::ConventionMismatch { .. })));
        std::fs::write(&path, text).unwrap();
        let bin = dir.path().join(PARAMS_FILE);
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::CorruptCheckpoint(_))));
    }
}
