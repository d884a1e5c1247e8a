//! Run configuration: TOML files, dotted-key overrides and the resolved form
//! written next to every run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use seedcloud_tensor::AdamConfig;

use crate::data::{DataConfig, Split};
use crate::error::{io_err, Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Use squared nearest-neighbor distances in the loss.
    #[serde(default)]
    pub squared_chamfer: bool,
    /// Learning rate reached at the last step, as a fraction of `lr`; the
    /// rate follows a cosine between the two. 1 keeps it constant.
    #[serde(default = "one")]
    pub final_lr_ratio: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            betas: [0.9, 0.999],
            weight_decay: 1e-6,
            batch_size: 32,
            epochs: 50,
            squared_chamfer: false,
            final_lr_ratio: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            betas: (self.betas[0], self.betas[1]),
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    /// Learning rate for `step` (0-based) of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 || self.final_lr_ratio == 1.0 {
            return self.lr;
        }
        let t = step.min(total - 1) as f64 / (total - 1) as f64;
        let r = self.final_lr_ratio + (1.0 - self.final_lr_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * r
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return Err(Error::Config(format!("train.final_lr_ratio must lie in (0, 1], got {}", self.final_lr_ratio)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("train.batch_size and train.epochs must be positive".into()));
        }
        self.adam().validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { split: Split::Test, batch_size: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    /// L2 regularization strength of the linear classifier.
    pub lambda: f64,
    pub iterations: usize,
    /// Initial subgradient step; step `t` uses `step / sqrt(t)`.
    pub step: f64,
    /// Label permutations averaged for the shuffled-label control.
    #[serde(default = "default_shuffles")]
    pub shuffles: usize,
}

fn default_shuffles() -> usize {
    20
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig { lambda: 1e-3, iterations: 1000, step: 1.0, shuffles: default_shuffles() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    /// Overrides applied to the base configuration, `key=value`.
    pub set: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Relative slack allowed when checking that each cell is no worse than
    /// the one before it.
    pub tie_band: f64,
    pub cells: Vec<AblationCell>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { seeds: vec![1, 2, 3], tie_band: 0.02, cells: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Label used for table rows.
    pub name: String,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub classify: ClassifyConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "psg".into(),
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            classify: ClassifyConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `section.key=value` overrides. Values use TOML syntax; bare
    /// words are taken as strings. Keys the configuration does not know are
    /// rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override `{item}` is not key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(Error::Usage(format!("malformed override key `{key}`")));
            }
            let value = parse_value(raw.trim());
            let (last, parents) = path.split_last().expect("nonempty");
            let mut table = &mut root;
            for (depth, part) in parents.iter().enumerate() {
                table = match table.get_mut(*part) {
                    Some(toml::Value::Table(t)) => t,
                    _ => return Err(Error::Config(format!("unknown configuration key `{}`", path[..=depth].join(".")))),
                };
            }
            table.insert(last.to_string(), value);
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("after overrides: {e}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.classify.shuffles == 0 {
            return Err(Error::Config("classify.shuffles must be positive".into()));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.data.classes.iter().all(|c| seen.insert(*c)) {
            return Err(Error::Config("data.classes lists a class twice".into()));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_overrides() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        let o = cfg
            .with_overrides(&["train.lr=5e-5", "model.decoder=folding", "model.psg.resolutions=[2,4]"])
            .unwrap();
        assert_eq!(o.train.lr, 5e-5);
        assert_eq!(o.model.decoder, crate::model::DecoderKind::Folding);
        assert_eq!(o.model.psg.resolutions, vec![2, 4]);
        assert!(matches!(cfg.with_overrides(&["train.nope=1"]), Err(Error::Config(_))));
        assert!(matches!(cfg.with_overrides(&["nope.lr=1"]), Err(Error::Config(_))));
        assert!(matches!(cfg.with_overrides(&["train.lr"]), Err(Error::Usage(_))));
        let m = cfg.with_overrides(&["data.manifest=shapes/list.tsv"]).unwrap();
        assert_eq!(m.data.manifest.unwrap(), Path::new("shapes/list.tsv"));
    }
}
