//! Flat `key = value` pipeline configuration. Unknown keys are rejected.

use crate::error::{Error, Result};
use crate::filter::{ClassifierTrainConfig, FilterConfig};
use crate::network::Architecture;
use crate::sampling::SamplingMode;
use crate::superpixel::SlicParams;
use crate::train::{FinetuneConfig, PretrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub patch_size: usize,
    pub theta: usize,
    pub beam: Vec<usize>,
    pub sampling_mode: SamplingMode,
    pub architecture: Architecture,
    pub seed: u64,
    pub unlabeled_fraction: f64,
    pub label_fraction: f64,
    pub feature_filter: bool,
    pub freeze_target: bool,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_batch_size: usize,
    pub freeze_encoder: bool,
    pub speckle_window: usize,
    /// 0 selects the 30x30 sizing rule.
    pub slic_k: usize,
    pub compactness: f64,
    pub slic_iters: usize,
    pub filter_epochs: usize,
    pub filter_lr: f64,
    pub validation_fraction: f64,
    /// Per-class label fraction drawn for the feature filter; 0 reuses the fine-tuning labels.
    pub filter_label_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let p = PretrainConfig::default();
        let f = FinetuneConfig::default();
        let c = ClassifierTrainConfig::default();
        let filt = FilterConfig::default();
        Self {
            tau: p.tau,
            batch_size: p.batch_size,
            epochs: p.epochs,
            lr0: p.lr0,
            momentum: p.momentum,
            weight_decay: p.weight_decay,
            patch_size: p.patch_size,
            theta: filt.theta,
            beam: filt.schedule,
            sampling_mode: p.sampling_mode,
            architecture: p.architecture,
            seed: 0,
            unlabeled_fraction: p.unlabeled_fraction,
            label_fraction: 0.001,
            feature_filter: true,
            freeze_target: p.freeze_target,
            finetune_lr: f.lr,
            finetune_epochs: f.epochs,
            finetune_batch_size: f.batch_size,
            freeze_encoder: f.freeze_encoder,
            speckle_window: 7,
            slic_k: 0,
            compactness: 10.0,
            slic_iters: 10,
            filter_epochs: c.epochs,
            filter_lr: c.lr,
            validation_fraction: c.validation_fraction,
            filter_label_fraction: 0.0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "tau",
    "batch_size",
    "epochs",
    "lr0",
    "momentum",
    "weight_decay",
    "patch_size",
    "theta",
    "beam",
    "sampling_mode",
    "architecture",
    "seed",
    "unlabeled_fraction",
    "label_fraction",
    "feature_filter",
    "freeze_target",
    "finetune_lr",
    "finetune_epochs",
    "finetune_batch_size",
    "freeze_encoder",
    "speckle_window",
    "slic_k",
    "compactness",
    "slic_iters",
    "filter_epochs",
    "filter_lr",
    "validation_fraction",
    "filter_label_fraction",
];

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), reason: reason.into() }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, format!("cannot parse {v:?}")))
}

fn positive_f(key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(key, v)?;
    if !(x > 0.0 && x.is_finite()) {
        return Err(bad(key, format!("must be positive, got {v}")));
    }
    Ok(x)
}

fn non_negative_f(key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(key, v)?;
    if !(x >= 0.0 && x.is_finite()) {
        return Err(bad(key, format!("must be non-negative, got {v}")));
    }
    Ok(x)
}

fn fraction(key: &str, v: &str) -> Result<f64> {
    let x = positive_f(key, v)?;
    if x > 1.0 {
        return Err(bad(key, format!("must be in (0, 1], got {v}")));
    }
    Ok(x)
}

fn at_least(key: &str, v: &str, min: usize) -> Result<usize> {
    let x: usize = num(key, v)?;
    if x < min {
        return Err(bad(key, format!("must be at least {min}, got {x}")));
    }
    Ok(x)
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, format!("expected true or false, got {v:?}"))),
    }
}

fn odd(key: &str, v: &str) -> Result<usize> {
    let x = at_least(key, v, 1)?;
    if x % 2 == 0 {
        return Err(bad(key, format!("must be odd, got {x}")));
    }
    Ok(x)
}

pub fn parse_schedule(key: &str, v: &str) -> Result<Vec<usize>> {
    let s = v.split(',').map(|p| at_least(key, p.trim(), 1)).collect::<Result<Vec<_>>>()?;
    if s.is_empty() {
        return Err(bad(key, "empty beam schedule"));
    }
    Ok(s)
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "tau" => self.tau = positive_f(key, v)?,
            "batch_size" => self.batch_size = at_least(key, v, 2)?,
            "epochs" => self.epochs = num(key, v)?,
            "lr0" => self.lr0 = positive_f(key, v)?,
            "momentum" => {
                let m = non_negative_f(key, v)?;
                if m >= 1.0 {
                    return Err(bad(key, "must be below 1"));
                }
                self.momentum = m;
            }
            "weight_decay" => self.weight_decay = non_negative_f(key, v)?,
            "patch_size" => self.patch_size = odd(key, v)?,
            "theta" => self.theta = at_least(key, v, 1)?,
            "beam" => self.beam = parse_schedule(key, v)?,
            "sampling_mode" => self.sampling_mode = v.parse().map_err(|e: String| bad(key, e))?,
            "architecture" => self.architecture = v.parse().map_err(|e: String| bad(key, e))?,
            "seed" => self.seed = num(key, v)?,
            "unlabeled_fraction" => self.unlabeled_fraction = fraction(key, v)?,
            "label_fraction" => self.label_fraction = fraction(key, v)?,
            "feature_filter" => self.feature_filter = boolean(key, v)?,
            "freeze_target" => self.freeze_target = boolean(key, v)?,
            "finetune_lr" => self.finetune_lr = positive_f(key, v)?,
            "finetune_epochs" => self.finetune_epochs = num(key, v)?,
            "finetune_batch_size" => self.finetune_batch_size = at_least(key, v, 2)?,
            "freeze_encoder" => self.freeze_encoder = boolean(key, v)?,
            "speckle_window" => self.speckle_window = odd(key, v)?,
            "slic_k" => self.slic_k = num(key, v)?,
            "compactness" => self.compactness = non_negative_f(key, v)?,
            "slic_iters" => self.slic_iters = num(key, v)?,
            "filter_epochs" => self.filter_epochs = num(key, v)?,
            "filter_lr" => self.filter_lr = positive_f(key, v)?,
            "validation_fraction" => {
                let f = non_negative_f(key, v)?;
                if f >= 1.0 {
                    return Err(bad(key, "must be below 1"));
                }
                self.validation_fraction = f;
            }
            "filter_label_fraction" => {
                let f = non_negative_f(key, v)?;
                if f > 1.0 {
                    return Err(bad(key, "must be at most 1"));
                }
                self.filter_label_fraction = f;
            }
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config { key: line.to_string(), reason: format!("line {} is not `key = value`", n + 1) }
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "tau" => self.tau.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr0" => self.lr0.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "theta" => self.theta.to_string(),
            "beam" => self.beam.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
            "sampling_mode" => self.sampling_mode.to_string(),
            "architecture" => self.architecture.to_string(),
            "seed" => self.seed.to_string(),
            "unlabeled_fraction" => self.unlabeled_fraction.to_string(),
            "label_fraction" => self.label_fraction.to_string(),
            "feature_filter" => self.feature_filter.to_string(),
            "freeze_target" => self.freeze_target.to_string(),
            "finetune_lr" => self.finetune_lr.to_string(),
            "finetune_epochs" => self.finetune_epochs.to_string(),
            "finetune_batch_size" => self.finetune_batch_size.to_string(),
            "freeze_encoder" => self.freeze_encoder.to_string(),
            "speckle_window" => self.speckle_window.to_string(),
            "slic_k" => self.slic_k.to_string(),
            "compactness" => self.compactness.to_string(),
            "slic_iters" => self.slic_iters.to_string(),
            "filter_epochs" => self.filter_epochs.to_string(),
            "filter_lr" => self.filter_lr.to_string(),
            "validation_fraction" => self.validation_fraction.to_string(),
            "filter_label_fraction" => self.filter_label_fraction.to_string(),
            _ => return None,
        })
    }

    /// Every key in documented order; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("known key"))).collect()
    }

    pub fn pretrain(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            tau: self.tau,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            patch_size: self.patch_size,
            sampling_mode: self.sampling_mode,
            architecture: self.architecture,
            unlabeled_fraction: self.unlabeled_fraction,
            freeze_target: self.freeze_target,
            seed,
        }
    }

    pub fn finetune(&self, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            lr: self.finetune_lr,
            epochs: self.finetune_epochs,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.finetune_batch_size,
            patch_size: self.patch_size,
            freeze_encoder: self.freeze_encoder,
            seed,
        }
    }

    pub fn filter(&self) -> FilterConfig {
        FilterConfig {
            theta: self.theta,
            schedule: self.beam.clone(),
            classifier: ClassifierTrainConfig {
                epochs: self.filter_epochs,
                lr: self.filter_lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                validation_fraction: self.validation_fraction,
                ..ClassifierTrainConfig::default()
            },
        }
    }

    pub fn slic(&self, height: usize, width: usize) -> SlicParams {
        let k = if self.slic_k == 0 { crate::superpixel::default_k(height, width) } else { self.slic_k };
        SlicParams { k, compactness: self.compactness, iters: self.slic_iters }
    }
}
