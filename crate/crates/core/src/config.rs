//! Flat `key = value` run configuration.
//!
//! Every key is dotted (`gen.rho`, `train.steps`, ...) and belongs to a fixed
//! schema; unknown keys and malformed values are rejected when set. Lines
//! starting with `#` are comments. The effective configuration is written
//! back in the same format, one line per key, so a snapshot alone reproduces
//! a run.

use crate::datagen::{GenConfig, TransformType};
use crate::error::{Error, Result};
use crate::network::{DenoiserConfig, DenoiserKind, EstimatorConfig, ExtractorConfig, ModelConfig, ModelVariant};
use crate::training::{LossMode, LossWeights, TrainConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy)]
enum Kind {
    Uint,
    Float,
    Bool,
    Text,
    UintList,
    FloatList,
    /// Unsigned integer or `none`.
    OptUint,
    Choice(&'static [&'static str]),
}

const SCHEMA: &[(&str, &str, Kind)] = &[
    ("run.deterministic", "false", Kind::Bool),
    ("gen.image_size", "256", Kind::Uint),
    ("gen.rho", "32", Kind::Float),
    ("gen.delta", "0", Kind::Float),
    ("gen.occlusion_p", "0", Kind::Uint),
    ("gen.transform_type", "full", Kind::Choice(&["full", "translation", "scale", "rotation", "perspective"])),
    ("gen.global_seed", "0", Kind::Uint),
    ("gen.count", "1000", Kind::Uint),
    ("gen.first_id", "0", Kind::Uint),
    ("gen.sources", "200", Kind::Uint),
    ("gen.source_seed", "0", Kind::Uint),
    ("gen.source_dir", "", Kind::Text),
    ("model.variant", "FMRH", Kind::Choice(&["FH", "FMH", "FMRH"])),
    ("model.extractor.stem_width", "64", Kind::Uint),
    ("model.extractor.widths", "64,128", Kind::UintList),
    ("model.extractor.blocks", "3,4", Kind::UintList),
    ("model.extractor.normalize", "true", Kind::Bool),
    ("model.denoiser.kind", "unet", Kind::Choice(&["unet", "dncnn"])),
    ("model.denoiser.base", "none", Kind::OptUint),
    ("model.denoiser.channels", "1,2,4", Kind::UintList),
    ("model.denoiser.residual", "true", Kind::Bool),
    ("model.denoiser.dncnn_depth", "5", Kind::Uint),
    ("model.estimator.hidden", "1024", Kind::Uint),
    ("model.estimator.pool_to", "8", Kind::OptUint),
    ("train.data", "", Kind::Text),
    ("train.loss_mode", "combined", Kind::Choice(&["supervised", "combined"])),
    ("train.lambda1", "0.5", Kind::Float),
    ("train.lambda2", "0.25", Kind::Float),
    ("train.batch_size", "32", Kind::Uint),
    ("train.steps", "1000", Kind::Uint),
    ("train.lr", "0.0001", Kind::Float),
    ("train.decay_at", "0.6666666666666666", Kind::Float),
    ("train.decay_factor", "0.1", Kind::Float),
    ("train.seed", "0", Kind::Uint),
    ("train.eval_every", "100", Kind::Uint),
    ("train.holdout", "100", Kind::Uint),
    ("train.augment", "false", Kind::Bool),
    ("train.offset_unit", "1", Kind::Float),
    ("train.ss_denoiser_only", "false", Kind::Bool),
    ("eval.checkpoint", "", Kind::Text),
    ("eval.predictor", "model", Kind::Choice(&["model", "oracle", "identity"])),
    ("eval.data", "", Kind::Text),
    ("eval.pairs", "", Kind::Text),
    ("sweep.axis", "occlusion_p", Kind::Choice(&["delta", "occlusion_p", "transform_magnitude"])),
    ("sweep.values", "0,10,20,30,40,50,60,70,80", Kind::FloatList),
    ("sweep.count", "100", Kind::Uint),
    ("viz.data", "", Kind::Text),
    ("viz.sample", "0", Kind::Uint),
    ("viz.dual", "false", Kind::Bool),
    ("gradcheck.image_size", "32", Kind::Uint),
    ("gradcheck.batch", "2", Kind::Uint),
    ("gradcheck.width", "8", Kind::Uint),
    ("gradcheck.hidden", "16", Kind::Uint),
    ("gradcheck.samples", "60", Kind::Uint),
    ("gradcheck.tolerance", "0.001", Kind::Float),
    ("gradcheck.seed", "0", Kind::Uint),
];

fn kind_of(key: &str) -> Result<Kind> {
    SCHEMA
        .iter()
        .find(|(k, _, _)| *k == key)
        .map(|(_, _, kind)| *kind)
        .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))
}

fn check(key: &str, kind: Kind, value: &str) -> Result<()> {
    let bad = |what: &str| Err(Error::Config(format!("{key} = {value:?}: expected {what}")));
    let list = |v: &str| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect::<Vec<_>>();
    match kind {
        Kind::Uint if value.parse::<u64>().is_err() => bad("an unsigned integer"),
        Kind::Float if !value.parse::<f64>().is_ok_and(f64::is_finite) => bad("a number"),
        Kind::Bool if value.parse::<bool>().is_err() => bad("true or false"),
        Kind::UintList if list(value).is_empty() || list(value).iter().any(|v| v.parse::<u64>().is_err()) => {
            bad("comma-separated unsigned integers")
        }
        Kind::FloatList if list(value).is_empty() || list(value).iter().any(|v| !v.parse::<f64>().is_ok_and(f64::is_finite)) => {
            bad("comma-separated numbers")
        }
        Kind::OptUint if value != "none" && value.parse::<u64>().is_err() => bad("an unsigned integer or none"),
        Kind::Choice(opts) if !opts.contains(&value) => bad(&format!("one of {}", opts.join(", "))),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self { values: SCHEMA.iter().map(|(k, v, _)| (*k, v.to_string())).collect() }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let kind = kind_of(key)?;
        let value = value.trim();
        check(key, kind, value)?;
        let slot = SCHEMA.iter().find(|(k, _, _)| *k == key).expect("known key").0;
        self.values.insert(slot, value.to_string());
        Ok(())
    }

    /// Applies `key=value`.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            cfg.set_override(line).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key with its effective value, sorted.
    pub fn snapshot(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("unknown config key {key}"))
    }

    pub fn uint(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.uint(key) as usize
    }

    pub fn float(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated")
    }

    pub fn flag(&self, key: &str) -> bool {
        self.get(key).parse().expect("validated")
    }

    pub fn floats(&self, key: &str) -> Vec<f64> {
        self.get(key).split(',').map(str::trim).filter(|s| !s.is_empty()).map(|v| v.parse().expect("validated")).collect()
    }

    pub fn uints(&self, key: &str) -> Vec<usize> {
        self.floats(key).into_iter().map(|v| v as usize).collect()
    }

    pub fn opt_uint(&self, key: &str) -> Option<usize> {
        match self.get(key) {
            "none" => None,
            v => Some(v.parse().expect("validated")),
        }
    }

    /// Path value; empty means unset.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        Some(self.get(key)).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    pub fn gen_config(&self) -> Result<GenConfig> {
        let cfg = GenConfig {
            image_size: self.uint("gen.image_size") as u32,
            rho: self.float("gen.rho"),
            delta: self.float("gen.delta"),
            occlusion_p: self.uint("gen.occlusion_p") as u32,
            transform_type: self.get("gen.transform_type").parse::<TransformType>()?,
            global_seed: self.uint("gen.global_seed"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn pair(&self, key: &str) -> Result<[usize; 2]> {
        match self.uints(key)[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::Config(format!("{key} needs exactly two values"))),
        }
    }

    pub fn model_config(&self, image_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            variant: self.get("model.variant").parse::<ModelVariant>()?,
            image_size,
            extractor: ExtractorConfig {
                stem_width: self.usize("model.extractor.stem_width"),
                widths: self.pair("model.extractor.widths")?,
                blocks: self.pair("model.extractor.blocks")?,
                normalize: self.flag("model.extractor.normalize"),
            },
            denoiser: DenoiserConfig {
                kind: self.get("model.denoiser.kind").parse::<DenoiserKind>()?,
                base: self.opt_uint("model.denoiser.base"),
                channels: self.uints("model.denoiser.channels"),
                residual: self.flag("model.denoiser.residual"),
                dncnn_depth: self.usize("model.denoiser.dncnn_depth"),
            },
            estimator: EstimatorConfig {
                hidden: self.usize("model.estimator.hidden"),
                pool_to: self.opt_uint("model.estimator.pool_to"),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, image_size: usize) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            model: self.model_config(image_size)?,
            loss_mode: self.get("train.loss_mode").parse::<LossMode>()?,
            weights: LossWeights { lambda1: self.float("train.lambda1"), lambda2: self.float("train.lambda2") },
            batch_size: self.usize("train.batch_size"),
            steps: self.usize("train.steps"),
            lr: self.float("train.lr"),
            decay_at: self.float("train.decay_at"),
            decay_factor: self.float("train.decay_factor"),
            seed: self.uint("train.seed"),
            eval_every: self.usize("train.eval_every"),
            holdout: self.usize("train.holdout"),
            augment: self.flag("train.augment"),
            offset_unit: self.float("train.offset_unit"),
            ss_denoiser_only: self.flag("train.ss_denoiser_only"),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_valid_configs() {
        let c = Config::default();
        assert_eq!(c.gen_config().unwrap(), GenConfig::default());
        let t = c.train_config(256).unwrap();
        assert_eq!(t.model, ModelConfig::new(ModelVariant::FMRH, 256));
        assert_eq!((t.batch_size, t.lr, t.weights), (32, 1e-4, LossWeights::default()));
    }

    #[test]
    fn parse_overrides_and_snapshot() {
        let mut c = Config::parse("# toy\ngen.image_size = 64\n\ngen.rho=16\nmodel.estimator.pool_to = none\n").unwrap();
        c.set_override("train.steps=5").unwrap();
        assert_eq!(c.gen_config().unwrap().rho, 16.0);
        assert_eq!(c.opt_uint("model.estimator.pool_to"), None);
        assert_eq!(c.usize("train.steps"), 5);
        let again = Config::parse(&c.snapshot()).unwrap();
        assert_eq!(again, c);
        assert_eq!(c.snapshot().lines().count(), SCHEMA.len());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(Config::parse("gen.rhoo = 3"), Err(Error::Config(m)) if m.contains("line 1") && m.contains("unknown")));
        let mut c = Config::default();
        for bad in ["train.steps=-1", "train.lr=abc", "model.variant=XYZ", "model.extractor.widths=", "viz.dual=yes", "nokey"] {
            assert!(c.set_override(bad).is_err(), "{bad}");
        }
        c.set("model.extractor.widths", "8").unwrap();
        assert!(c.model_config(64).is_err());
        c.set("gen.rho", "100").unwrap();
        assert!(c.gen_config().is_err());
    }
}
