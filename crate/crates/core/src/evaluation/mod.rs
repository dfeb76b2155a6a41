//! MACE evaluation, robustness sweeps, ablation tables and cost-volume
//! visualization.

mod plot;

pub use plot::plot_curve;

use crate::datagen::{generate_duals, Dataset, GenConfig, SamplePair, SourcePool};
use crate::error::{Error, Result};
use crate::geometry::{corner_errors, homography_to_four_point, mean_of, CornerSet, FourPointOffsets, Homography};
use crate::matching::{heatmap, CostVolume};
use crate::network::{load_checkpoint, CheckpointMeta, Model, ModelVariant};
use image::GrayImage;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Anything that maps image pairs to offsets.
pub trait Predictor: Sync {
    /// Identifier recorded in reports (checkpoint id for models).
    fn id(&self) -> String;
    /// Training label such as `FMRH-ss`.
    fn label(&self) -> String;
    /// Required input side, if any.
    fn image_size(&self) -> Option<usize>;
    fn predict(&self, pairs: &[&SamplePair]) -> Result<Vec<FourPointOffsets>>;
}

pub struct ModelPredictor {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
}

impl ModelPredictor {
    pub fn load(dir: &Path) -> Result<Self> {
        let (model, meta) = load_checkpoint(dir)?;
        Ok(Self { model, meta })
    }
}

impl Predictor for ModelPredictor {
    fn id(&self) -> String {
        self.meta.id.clone()
    }

    fn label(&self) -> String {
        self.meta.label.clone()
    }

    fn image_size(&self) -> Option<usize> {
        Some(self.meta.image_size)
    }

    fn predict(&self, pairs: &[&SamplePair]) -> Result<Vec<FourPointOffsets>> {
        let images: Vec<(&GrayImage, &GrayImage)> = pairs.iter().map(|p| (&p.image_a, &p.image_b)).collect();
        self.model.predict(&images, 16)
    }
}

/// Returns the ground truth: a sanity bound for the harness.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn id(&self) -> String {
        "oracle".into()
    }
    fn label(&self) -> String {
        "oracle".into()
    }
    fn image_size(&self) -> Option<usize> {
        None
    }
    fn predict(&self, pairs: &[&SamplePair]) -> Result<Vec<FourPointOffsets>> {
        Ok(pairs.iter().map(|p| p.gt_offsets).collect())
    }
}

/// Always predicts the identity homography.
pub struct ZeroPredictor;

impl Predictor for ZeroPredictor {
    fn id(&self) -> String {
        "identity".into()
    }
    fn label(&self) -> String {
        "identity".into()
    }
    fn image_size(&self) -> Option<usize> {
        None
    }
    fn predict(&self, pairs: &[&SamplePair]) -> Result<Vec<FourPointOffsets>> {
        Ok(vec![FourPointOffsets::zeros(); pairs.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub description: String,
    pub image_size: usize,
    pub generator: Option<GenConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub sample_id: u64,
    /// Sweep value the sample was generated at.
    pub axis_value: Option<f64>,
    /// TL, TR, BR, BL.
    pub corners: [f64; 4],
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub mace: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_id: String,
    pub label: String,
    pub dataset: DatasetDescriptor,
    pub count: usize,
    /// Mean of `per_sample[..].error`.
    pub mace: f64,
    pub sweep: Option<Sweep>,
    #[serde(skip_serializing, default)]
    pub per_sample: Vec<SampleError>,
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "per_sample.csv";

impl EvalReport {
    fn new(p: &dyn Predictor, dataset: DatasetDescriptor, per_sample: Vec<SampleError>, sweep: Option<Sweep>) -> Result<Self> {
        let errors: Vec<f64> = per_sample.iter().map(|s| s.error).collect();
        Ok(Self {
            checkpoint_id: p.id(),
            label: p.label(),
            dataset,
            count: per_sample.len(),
            mace: mean_of(&errors)?,
            sweep,
            per_sample,
        })
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("sample_id,axis_value,e_tl,e_tr,e_br,e_bl,error\n");
        for e in &self.per_sample {
            let v = e.axis_value.map_or(String::new(), |v| v.to_string());
            let [a, b, c, d] = e.corners;
            s += &format!("{},{v},{a:.9},{b:.9},{c:.9},{d:.9},{:.9}\n", e.sample_id, e.error);
        }
        s
    }

    /// Writes `report.json` (summary) and `per_sample.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let (json, csv) = (dir.join(REPORT_JSON), dir.join(REPORT_CSV));
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::write(&csv, self.csv())?;
        Ok((json, csv))
    }
}

fn check_size(p: &dyn Predictor, pairs: &[&SamplePair]) -> Result<usize> {
    let first = pairs.first().ok_or(Error::EmptyInput)?;
    let size = first.image_a.width() as usize;
    for pair in pairs {
        for img in [&pair.image_a, &pair.image_b] {
            if img.dimensions() != (size as u32, size as u32) {
                return Err(Error::SizeMismatch { expected: size, found: img.width() as usize });
            }
        }
    }
    match p.image_size() {
        Some(s) if s != size => Err(Error::SizeMismatch { expected: s, found: size }),
        _ => Ok(size),
    }
}

fn score(p: &dyn Predictor, pairs: &[&SamplePair], axis_value: Option<f64>) -> Result<Vec<SampleError>> {
    check_size(p, pairs)?;
    let pred = p.predict(pairs)?;
    Ok(pred
        .iter()
        .zip(pairs)
        .map(|(pr, pair)| {
            let corners = corner_errors(pr, &pair.gt_offsets);
            SampleError { sample_id: pair.sample_id, axis_value, corners, error: corners.iter().sum::<f64>() / 4.0 }
        })
        .collect())
}

/// Scores `pairs` (in order).
pub fn evaluate(p: &dyn Predictor, pairs: &[&SamplePair], dataset: DatasetDescriptor) -> Result<EvalReport> {
    let per = score(p, pairs, None)?;
    EvalReport::new(p, dataset, per, None)
}

/// The ab pair of every dual sample.
pub fn dataset_pairs(data: &Dataset) -> Vec<&SamplePair> {
    data.samples.iter().map(|s| &s.pair_ab).collect()
}

pub fn describe(data: &Dataset, description: impl Into<String>) -> DatasetDescriptor {
    DatasetDescriptor {
        description: description.into(),
        image_size: data.header.config.image_size as usize,
        generator: Some(data.header.config.clone()),
    }
}

pub fn evaluate_dataset(p: &dyn Predictor, data: &Dataset, description: &str) -> Result<EvalReport> {
    evaluate(p, &dataset_pairs(data), describe(data, description))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Delta,
    OcclusionP,
    /// Sets `rho`.
    TransformMagnitude,
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(SweepAxis::Delta),
            "occlusion_p" => Ok(SweepAxis::OcclusionP),
            "transform_magnitude" => Ok(SweepAxis::TransformMagnitude),
            _ => Err(Error::BadAxis(s.into())),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Delta => "delta",
            SweepAxis::OcclusionP => "occlusion_p",
            SweepAxis::TransformMagnitude => "transform_magnitude",
        })
    }
}

impl SweepAxis {
    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &GenConfig, value: f64) -> Result<GenConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::Delta => cfg.delta = value,
            SweepAxis::OcclusionP => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidGenConfig(format!("occlusion size {value} is not a whole number")));
                }
                cfg.occlusion_p = value as u32;
            }
            SweepAxis::TransformMagnitude => cfg.rho = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Regenerates `count` samples per value from `base` with the axis changed
/// and evaluates each set. The top-level MACE spans every sample.
pub fn sweep(
    p: &dyn Predictor,
    pool: &SourcePool,
    base: &GenConfig,
    count: u64,
    axis: SweepAxis,
    values: &[f64],
) -> Result<EvalReport> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let configs = values.iter().map(|&v| axis.apply(base, v)).collect::<Result<Vec<_>>>()?;
    let mut per_sample = Vec::new();
    let mut points = Vec::new();
    for (cfg, &v) in configs.iter().zip(values) {
        let data = generate_duals(pool, cfg, 0..count)?;
        let pairs: Vec<&SamplePair> = data.iter().map(|s| &s.pair_ab).collect();
        let per = score(p, &pairs, Some(v))?;
        let errors: Vec<f64> = per.iter().map(|e| e.error).collect();
        points.push(SweepPoint { value: v, mace: mean_of(&errors)?, count: per.len() });
        per_sample.extend(per);
    }
    let dataset = DatasetDescriptor {
        description: format!("{axis} sweep over {} values, {count} samples each", values.len()),
        image_size: base.image_size as usize,
        generator: Some(base.clone()),
    };
    EvalReport::new(p, dataset, per_sample, Some(Sweep { axis, points }))
}

/// Writes `{axis}_{id}.png` and `{axis}_{id}.csv` for a sweep report.
pub fn write_sweep_plot(report: &EvalReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let sweep = report.sweep.as_ref().ok_or_else(|| Error::BadAxis("report has no sweep".into()))?;
    std::fs::create_dir_all(dir)?;
    let stem = format!("{}_{}", sweep.axis, report.checkpoint_id);
    let (xs, ys): (Vec<f64>, Vec<f64>) = sweep.points.iter().map(|p| (p.value, p.mace)).unzip();
    let png = dir.join(format!("{stem}.png"));
    plot_curve(&xs, &ys, &png)?;
    let csv = dir.join(format!("{stem}.csv"));
    let mut f = std::fs::File::create(&csv)?;
    writeln!(f, "{},mace,count", sweep.axis)?;
    for p in &sweep.points {
        writeln!(f, "{},{:.9},{}", p.value, p.mace, p.count)?;
    }
    Ok((png, csv))
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

pub const ABLATION_VARIANTS: [&str; 4] = ["FH", "FMH", "FMRH-s", "FMRH-ss"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub checkpoint_id: String,
    pub mace: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub count: usize,
}

impl AblationTable {
    pub fn csv(&self) -> String {
        let mut s = String::from("variant,checkpoint_id,mace\n");
        for r in &self.rows {
            s += &format!("{},{},{:.9}\n", r.variant, r.checkpoint_id, r.mace);
        }
        s
    }

    pub fn text(&self) -> String {
        let mut s = format!("{:<10} {:>10}  {}\n", "variant", "MACE", "checkpoint");
        for r in &self.rows {
            s += &format!("{:<10} {:>10.4}  {}\n", r.variant, r.mace, r.checkpoint_id);
        }
        s + &format!("({} samples)\n", self.count)
    }

    pub fn mace(&self, variant: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| r.mace)
    }
}

/// MACE of each of the four variants (matched by label) on the same pairs.
pub fn ablation_table(predictors: &[&dyn Predictor], pairs: &[&SamplePair]) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for v in ABLATION_VARIANTS {
        let p = predictors.iter().find(|p| p.label() == v).ok_or_else(|| Error::MissingVariant(v.into()))?;
        let per = score(*p, pairs, None)?;
        let errors: Vec<f64> = per.iter().map(|e| e.error).collect();
        rows.push(AblationRow { variant: v.into(), checkpoint_id: p.id(), mace: mean_of(&errors)? });
    }
    Ok(AblationTable { rows, count: pairs.len() })
}

fn volume_heatmap(c: &CostVolume<f32>) -> GrayImage {
    heatmap(&c.data, c.cells(), c.cells())
}

/// Mean absolute difference between two volumes.
pub fn volume_mad(a: &CostVolume<f32>, b: &CostVolume<f32>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.data.len() as f64
}

/// Writes `{stem}_c.png` and `{stem}_c_prime.png`: min-max normalized
/// `hw x hw` heatmaps of the raw and cleaned cost volumes of `pair`.
pub fn viz_cost_volume(model: &Model<f32>, pair: &SamplePair, dir: &Path, stem: &str) -> Result<[PathBuf; 2]> {
    if model.variant() != ModelVariant::FMRH {
        return Err(Error::WrongVariant(format!("visualization needs an FMRH checkpoint, got {}", model.variant())));
    }
    let out = model.inspect(&[(&pair.image_a, &pair.image_b)])?.remove(0);
    let (c, cp) = (out.cost.expect("FMRH has C"), out.cleaned.expect("FMRH has C'"));
    std::fs::create_dir_all(dir)?;
    let paths = [dir.join(format!("{stem}_c.png")), dir.join(format!("{stem}_c_prime.png"))];
    volume_heatmap(&c).save(&paths[0])?;
    volume_heatmap(&cp).save(&paths[1])?;
    Ok(paths)
}

/// Raw and cleaned disagreement between the two pairs of a dual sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualAgreement {
    /// `mean|C_ab − C_cd|`
    pub raw: f64,
    /// `mean|C'_ab − C'_cd|`
    pub cleaned: f64,
}

pub fn dual_agreement(model: &Model<f32>, pairs: &[(&SamplePair, &SamplePair)]) -> Result<Vec<DualAgreement>> {
    if model.variant() != ModelVariant::FMRH {
        return Err(Error::WrongVariant(format!("dual agreement needs an FMRH checkpoint, got {}", model.variant())));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(16) {
        let images: Vec<(&GrayImage, &GrayImage)> = chunk
            .iter()
            .map(|(ab, _)| (&ab.image_a, &ab.image_b))
            .chain(chunk.iter().map(|(_, cd)| (&cd.image_a, &cd.image_b)))
            .collect();
        let ins = model.inspect(&images)?;
        let (ab, cd) = ins.split_at(chunk.len());
        for (x, y) in ab.iter().zip(cd) {
            let (cx, cy) = (x.cost.as_ref().expect("C"), y.cost.as_ref().expect("C"));
            let (px, py) = (x.cleaned.as_ref().expect("C'"), y.cleaned.as_ref().expect("C'"));
            out.push(DualAgreement { raw: volume_mad(cx, cy), cleaned: volume_mad(px, py) });
        }
    }
    Ok(out)
}

/// Pair directory: `{name}_a.png`, `{name}_b.png` and `{name}.txt` holding
/// the 3x3 homography from image a to image b (9 row-major decimals) at the
/// image resolution. Pairs are returned sorted by name.
pub fn read_pair_dir(dir: &Path) -> Result<Vec<(String, SamplePair)>> {
    if !dir.is_dir() {
        return Err(Error::DatasetMissing(dir.to_path_buf()));
    }
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".txt")).map(String::from))
        .collect();
    names.sort();
    let mut out = Vec::new();
    for (i, name) in names.into_iter().enumerate() {
        let load = |tag: &str| -> Result<GrayImage> {
            let path = dir.join(format!("{name}_{tag}.png"));
            if !path.exists() {
                return Err(Error::MissingImage(path));
            }
            Ok(image::open(&path)?.to_luma8())
        };
        let (a, b) = (load("a")?, load("b")?);
        if a.dimensions() != b.dimensions() || a.width() != a.height() {
            return Err(Error::SizeMismatch { expected: a.width() as usize, found: b.width() as usize });
        }
        let text = std::fs::read_to_string(dir.join(format!("{name}.txt")))?;
        let h = Homography::parse_decimal_line(text.trim())?;
        let gt = homography_to_four_point(&h, &CornerSet::square(a.width() as f64))?;
        out.push((name, SamplePair { image_a: a, image_b: b, gt_offsets: gt, sample_id: i as u64, seed: 0 }));
    }
    if out.is_empty() {
        return Err(Error::DatasetMissing(dir.to_path_buf()));
    }
    Ok(out)
}

/// Writes a pair directory (the inverse of [`read_pair_dir`]).
pub fn write_pair_dir(pairs: &[(String, &SamplePair)], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, p) in pairs {
        let size = p.image_a.width() as f64;
        let h = crate::geometry::four_point_to_homography(&p.gt_offsets, &CornerSet::square(size))?;
        p.image_a.save(dir.join(format!("{name}_a.png")))?;
        p.image_b.save(dir.join(format!("{name}_b.png")))?;
        std::fs::write(dir.join(format!("{name}.txt")), h.to_decimal_line() + "\n")?;
    }
    Ok(())
}
