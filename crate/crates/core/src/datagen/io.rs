//! On-disk dataset format.
//!
//! ```text
//! dir/
//!   manifest.jsonl        header line, then one record per dual sample
//!   images/{id}_a.png     8-bit grayscale, lossless
//!   images/{id}_b.png
//!   images/{id}_c.png
//!   images/{id}_d.png
//! ```

use super::{DualSample, GenConfig, SamplePair, TransformType};
use crate::error::{Error, Result};
use crate::geometry::FourPointOffsets;
use crate::parallel;
use image::GrayImage;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const MANIFEST: &str = "manifest.jsonl";
const FORMAT: &str = "homonet-dual-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub count: usize,
    pub config: GenConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: u64,
    pub seed: u64,
    /// `TL.x TL.y TR.x TR.y BR.x BR.y BL.x BL.y`
    pub offsets: [f64; 8],
    pub delta: f64,
    pub occlusion_p: u32,
    pub transform_type: TransformType,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<DualSample>,
}

impl Dataset {
    /// In-memory dataset with a matching header.
    pub fn new(config: GenConfig, samples: Vec<DualSample>) -> Self {
        Self { header: DatasetHeader { format: FORMAT.into(), count: samples.len(), config }, samples }
    }
}

fn image_path(dir: &Path, id: u64, tag: char) -> PathBuf {
    dir.join("images").join(format!("{id}_{tag}.png"))
}

pub fn write_dataset(samples: &[DualSample], cfg: &GenConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    parallel::try_map_range(samples.len(), |i| -> Result<()> {
        let s = &samples[i];
        let id = s.sample_id();
        for (tag, img) in [
            ('a', &s.pair_ab.image_a),
            ('b', &s.pair_ab.image_b),
            ('c', &s.pair_cd.image_a),
            ('d', &s.pair_cd.image_b),
        ] {
            img.save_with_format(image_path(dir, id, tag), image::ImageFormat::Png)?;
        }
        Ok(())
    })?;

    let mut out = BufWriter::new(std::fs::File::create(dir.join(MANIFEST))?);
    let header = DatasetHeader { format: FORMAT.into(), count: samples.len(), config: cfg.clone() };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for s in samples {
        let rec = ManifestRecord {
            sample_id: s.sample_id(),
            seed: s.seed(),
            offsets: s.gt_offsets().to_flat(),
            delta: cfg.delta,
            occlusion_p: cfg.occlusion_p,
            transform_type: cfg.transform_type,
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    out.flush()?;
    Ok(())
}

fn load(path: PathBuf) -> Result<GrayImage> {
    if !path.exists() {
        return Err(Error::MissingImage(path));
    }
    Ok(image::open(&path)?.to_luma8())
}

pub fn read_manifest(dir: &Path) -> Result<(DatasetHeader, Vec<ManifestRecord>)> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::DatasetMissing(dir.to_path_buf()));
    }
    let file = std::io::BufReader::new(std::fs::File::open(&path)?);
    let mut lines = file.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
    let corrupt = |line: usize, reason: String| Error::CorruptManifest { line: line + 1, reason };
    let (_, first) = lines.next().ok_or_else(|| corrupt(0, "missing header".into()))?;
    let header: DatasetHeader = serde_json::from_str(&first?).map_err(|e| corrupt(0, e.to_string()))?;
    if header.format != FORMAT {
        return Err(corrupt(0, format!("unknown format {:?}", header.format)));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let rec: ManifestRecord = serde_json::from_str(&line?).map_err(|e| corrupt(i, e.to_string()))?;
        records.push(rec);
    }
    if records.len() != header.count {
        return Err(corrupt(0, format!("header count {} but {} records", header.count, records.len())));
    }
    Ok((header, records))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let (header, records) = read_manifest(dir)?;
    let samples = parallel::try_map_range(records.len(), |i| -> Result<DualSample> {
        let r = &records[i];
        let gt = FourPointOffsets::from_flat(&r.offsets);
        let pair = |ta, tb| -> Result<SamplePair> {
            Ok(SamplePair {
                image_a: load(image_path(dir, r.sample_id, ta))?,
                image_b: load(image_path(dir, r.sample_id, tb))?,
                gt_offsets: gt,
                sample_id: r.sample_id,
                seed: r.seed,
            })
        };
        Ok(DualSample { pair_ab: pair('a', 'b')?, pair_cd: pair('c', 'd')? })
    })?;
    Ok(Dataset { header, samples })
}
