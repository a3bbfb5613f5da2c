//! Run configuration: one JSON document, validated before any compute.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::ToyDataset;
use crate::distill::{DistillConfig, EvalConfig};
use crate::error::{Error, Result};
use crate::train::{ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: ToyDataset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.mlp(self.dataset.dim()).validate()?;
        self.train.validate()?;
        self.distill.validate()?;
        self.eval.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?)
    }

    fn from_value(v: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read `path` (or start from defaults) and apply `section.key=value`
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut v = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Apply one `a.b.c=value` override. The value is parsed as JSON when
/// possible, otherwise taken as a string; `dataset=<spec>` accepts the
/// compact dataset syntax (`ring8:2,0.05`).
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::Config(format!(
            "override `{spec}` is not of the form section.key=value"
        ))
    })?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path `{path}`")));
    }
    let mut value =
        serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    if keys == ["dataset"] {
        if let Value::String(s) = &value {
            value = serde_json::to_value(s.parse::<ToyDataset>()?)?;
        }
    }
    if !root.is_object() {
        *root = Value::Object(Default::default());
    }
    let mut cur = root;
    for (i, k) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert((*k).to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(*k)
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("non-empty key path")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{LossWeighting, Parameterization};

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        // an empty document means all defaults
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn shipped_default_file_matches() {
        let text = include_str!("../configs/default.json");
        assert_eq!(RunConfig::from_json(text).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"updatez": 3}}"#).is_err());
        assert!(RunConfig::load(None, &["train.updatez=3".into()]).is_err());
        assert!(RunConfig::load(None, &["distill.step_divisor=3".into()]).is_err());
    }

    #[test]
    fn overrides() {
        let c = RunConfig::load(
            None,
            &[
                "seed=7".into(),
                "train.updates=10".into(),
                "train.loss_weighting=truncated_snr".into(),
                "model.parameterization=x_eps_combined".into(),
                "model.hidden_dims=[8,8]".into(),
                "dataset=gauss1d:0.5,2".into(),
                "train.discrete_grid=16".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.updates, 10);
        assert_eq!(c.train.loss_weighting, LossWeighting::TruncatedSnr);
        assert_eq!(c.model.parameterization, Parameterization::XEpsCombined);
        assert_eq!(c.model.hidden_dims, vec![8, 8]);
        assert_eq!(
            c.dataset,
            ToyDataset::Gauss1d {
                mean: 0.5,
                var: 2.0
            }
        );
        assert_eq!(c.train.discrete_grid, Some(16));
        assert!(RunConfig::load(None, &["seed".into()]).is_err());
        assert!(RunConfig::load(None, &["seed.x=1".into()]).is_err());
    }
}
