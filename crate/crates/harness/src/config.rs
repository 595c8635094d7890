//! JSON-facing configuration records.

use std::path::Path;

use serde::{Deserialize, Serialize};
use smalldet_core::{BoxLossKind, FocalerParams, Precision};

use crate::error::{HarnessError, Result};

pub const PRECISION_ENV: &str = "SMALLDET_PRECISION";

/// Synthetic scene generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// Square image side, 32 or 64.
    pub image_size: usize,
    /// Inclusive range of objects per image.
    #[serde(default = "default_num_objects")]
    pub num_objects: [usize; 2],
    /// Inclusive range of object width/height in pixels.
    #[serde(default = "default_object_size")]
    pub object_size: [usize; 2],
    pub num_classes: usize,
    /// Background intensities are uniform in this range.
    #[serde(default = "default_background")]
    pub background: [f64; 2],
    pub seed: u64,
}

fn default_num_objects() -> [usize; 2] {
    [1, 4]
}

fn default_object_size() -> [usize; 2] {
    [3, 8]
}

fn default_background() -> [f64; 2] {
    [0.0, 0.2]
}

impl SceneSpec {
    pub fn new(image_size: usize, num_classes: usize, seed: u64) -> Self {
        SceneSpec {
            image_size,
            num_objects: default_num_objects(),
            object_size: default_object_size(),
            num_classes,
            background: default_background(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if ![32, 64].contains(&self.image_size) {
            return bad(format!("image_size must be 32 or 64, got {}", self.image_size));
        }
        let [n0, n1] = self.num_objects;
        if n0 < 1 || n1 > 8 || n0 > n1 {
            return bad(format!("num_objects must be a range within 1..=8, got {n0}..={n1}"));
        }
        let [s0, s1] = self.object_size;
        if s0 < 2 || s0 > s1 {
            return bad(format!("object_size must be a range starting at ≥ 2, got {s0}..={s1}"));
        }
        if s1 > self.image_size {
            return Err(HarnessError::Unplaceable {
                size: s1,
                image: self.image_size,
            });
        }
        if !(1..=4).contains(&self.num_classes) {
            return bad(format!("num_classes must be in 1..=4, got {}", self.num_classes));
        }
        let [b0, b1] = self.background;
        if !(0.0 <= b0 && b0 <= b1 && b1 < FOREGROUND_FLOOR) {
            return bad(format!(
                "background range must lie in [0, {FOREGROUND_FLOOR}), got [{b0}, {b1}]"
            ));
        }
        Ok(())
    }

    /// Intensity band `[lo, hi)` of class `k`; bands are disjoint from each
    /// other and from the background.
    pub fn class_band(&self, k: usize) -> (f64, f64) {
        let width = (1.0 - FOREGROUND_FLOOR) / self.num_classes as f64;
        let lo = FOREGROUND_FLOOR + k as f64 * width;
        (lo, lo + 0.6 * width)
    }
}

pub const FOREGROUND_FLOOR: f64 = 0.3;

/// Toy detector sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub c0: usize,
    pub c1: usize,
    pub num_classes: usize,
    pub image_size: usize,
    /// Reference box side for the width/height offsets.
    pub anchor: f64,
}

impl ModelConfig {
    pub fn new(num_classes: usize, image_size: usize) -> Self {
        ModelConfig {
            c0: 4,
            c1: 8,
            num_classes,
            image_size,
            anchor: 5.0,
        }
    }

    pub fn head_channels(&self) -> usize {
        4 + self.num_classes + 1
    }

    pub fn grid(&self) -> usize {
        self.image_size / 2
    }
}

/// Learning-rate multiplier over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine from 1 at the first step to 0 after the last.
    Cosine,
}

impl Schedule {
    /// Multiplier for 0-based `step` of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()),
        }
    }
}

fn default_precision() -> String {
    "single".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub focaler_d: f64,
    #[serde(default = "default_focaler_u")]
    pub focaler_u: f64,
    pub loss_kind: String,
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: String,
    /// Architecture sizes; derived from the dataset when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
}

fn default_weight_decay() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_focaler_u() -> f64 {
    0.95
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 4,
            learning_rate: 1e-4,
            schedule: Schedule::Constant,
            weight_decay: default_weight_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            focaler_d: 0.0,
            focaler_u: default_focaler_u(),
            loss_kind: BoxLossKind::FocalerSiou.name().into(),
            seed: 0,
            precision: default_precision(),
            model: None,
        }
    }
}

impl TrainConfig {
    /// The desk-scale convergence fixture.
    pub fn fixture(loss: BoxLossKind, seed: u64) -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 4,
            learning_rate: 3e-3,
            loss_kind: loss.name().into(),
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be ≥ 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        self.focaler()?;
        self.loss()?;
        self.precision()?;
        Ok(())
    }

    pub fn focaler(&self) -> Result<FocalerParams> {
        Ok(FocalerParams::new(self.focaler_d, self.focaler_u)?)
    }

    pub fn loss(&self) -> Result<BoxLossKind> {
        Ok(self.loss_kind.parse()?)
    }

    pub fn precision(&self) -> Result<Precision> {
        parse_precision(&self.precision)
    }
}

pub fn parse_precision(s: &str) -> Result<Precision> {
    s.parse()
        .map_err(|_| HarnessError::Config(format!("precision must be single or double, got {s:?}")))
}

/// Flag value, then the environment variable, then `fallback`.
pub fn resolve_precision(flag: Option<&str>, fallback: &str) -> Result<Precision> {
    match flag {
        Some(s) => parse_precision(s),
        None => match std::env::var(PRECISION_ENV) {
            Ok(s) => parse_precision(&s),
            Err(_) => parse_precision(fallback),
        },
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Json {
        path: path.to_path_buf(),
        cause: e,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}
