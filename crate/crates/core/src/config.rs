//! Run configuration: JSON file plus flat `--key value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataio::LabelScheme;
use crate::error::{Error, Result};
use crate::multiview::losses::Hyper;
use crate::optim::WarmupCosine;
use crate::prompt::{PromptConfig, PromptMode};
use crate::swinlite::BackboneConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

/// Optimiser and schedule of one training phase. Learning rates follow
/// a linear warm-up from `warmup_start_lr` then cosine decay to `min_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_start_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub augment: bool,
}

impl PhaseConfig {
    pub fn schedule(&self, steps_per_epoch: usize) -> WarmupCosine {
        WarmupCosine {
            base: self.lr,
            start: self.warmup_start_lr,
            min: self.min_lr,
            warmup_steps: self.warmup_epochs * steps_per_epoch,
            total_steps: self.epochs * steps_per_epoch,
        }
    }

    fn validate(&self, phase: &str) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{phase}: {what}")));
        if !(self.lr > 0.0) || !(self.min_lr >= 0.0) || !(self.warmup_start_lr >= 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs exceeds epochs");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2)
        {
            return bad("momentum and betas must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("weight_decay must be ≥ 0 and eps > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub prompt: PromptConfig,
    pub tau: f64,
    pub lambda: f64,
    pub scheme: LabelScheme,
    pub subjects: usize,
    pub pretrain: PhaseConfig,
    pub tune: PhaseConfig,
    pub test_fraction: f64,
    pub folds: usize,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RunConfig {
    /// Desk-scale defaults.
    pub fn toy() -> Self {
        RunConfig {
            backbone: BackboneConfig::toy(),
            prompt: PromptConfig::default(),
            tau: 4.0,
            lambda: 0.1,
            scheme: LabelScheme::Ternary,
            subjects: 600,
            pretrain: PhaseConfig {
                optimizer: OptimizerKind::Adamw,
                lr: 1e-3,
                min_lr: 1e-5,
                warmup_start_lr: 1e-6,
                weight_decay: 0.05,
                momentum: 0.9,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                batch_size: 6,
                epochs: 30,
                warmup_epochs: 3,
                augment: true,
            },
            tune: PhaseConfig {
                optimizer: OptimizerKind::Sgd,
                lr: 0.01,
                min_lr: 0.0,
                warmup_start_lr: 1e-4,
                weight_decay: 0.01,
                momentum: 0.9,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                batch_size: 2,
                epochs: 20,
                warmup_epochs: 2,
                augment: true,
            },
            test_fraction: 0.2,
            folds: 5,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }

    /// Full-scale architecture and recipe; only audited, never trained here.
    pub fn full_scale() -> Self {
        let mut c = Self::toy();
        c.backbone = BackboneConfig::full_scale();
        c.prompt = PromptConfig {
            length: 5,
            mode: PromptMode::Deep,
            shared: true,
        };
        c.pretrain.epochs = 50;
        c.pretrain.warmup_epochs = 5;
        c.tune.epochs = 100;
        c.tune.warmup_epochs = 10;
        c
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            tau: self.tau,
            lambda: self.lambda,
        }
    }

    pub fn image_side(&self) -> usize {
        self.backbone.image_size[0]
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.image_size[0] != self.backbone.image_size[1] {
            return Err(Error::Config("images must be square".into()));
        }
        if self.backbone.num_classes != self.scheme.num_classes() {
            return Err(Error::Config(format!(
                "num_classes {} does not match the {:?} scheme",
                self.backbone.num_classes, self.scheme
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if self.folds < 2 || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("need folds ≥ 2 and test_fraction in [0, 1)".into()));
        }
        self.pretrain.validate("pretrain")?;
        self.tune.validate("tune")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Apply `key = value` overrides. A key is either a dotted path
    /// (`tune.epochs`) or a bare field name that occurs exactly once in
    /// the tree (`lambda`, `length`). Values are parsed as JSON, falling
    /// back to a plain string.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for (key, raw) in pairs {
            let path = resolve(&tree, key)?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            let mut slot = &mut tree;
            for part in &path {
                slot = slot.get_mut(part.as_str()).expect("resolved path exists");
            }
            *slot = value;
        }
        let c: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

fn leaf_paths(v: &Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if let Value::Object(m) = v {
        for (k, child) in m {
            prefix.push(k.clone());
            out.push(prefix.clone());
            leaf_paths(child, prefix, out);
            prefix.pop();
        }
    }
}

fn resolve(tree: &Value, key: &str) -> Result<Vec<String>> {
    let key = key.replace('-', "_");
    let mut all = Vec::new();
    leaf_paths(tree, &mut Vec::new(), &mut all);
    let dotted: Vec<String> = key.split('.').map(str::to_string).collect();
    if all.contains(&dotted) {
        return Ok(dotted);
    }
    let hits: Vec<_> = all.into_iter().filter(|p| p.last() == Some(&key)).collect();
    match hits.len() {
        1 => Ok(hits.into_iter().next().expect("one hit")),
        0 => Err(Error::Config(format!("unknown config key `{key}`"))),
        _ => Err(Error::Config(format!(
            "ambiguous config key `{key}`: {}",
            hits.iter().map(|p| p.join(".")).collect::<Vec<_>>().join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        for c in [RunConfig::toy(), RunConfig::full_scale()] {
            let back = RunConfig::from_json(&c.to_json()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_json(), c.to_json());
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"lamda": 0.2}"#), Err(Error::Json(_))));
        let partial = RunConfig::from_json(r#"{"lambda": 0.0, "tune": {"optimizer": "sgd"}}"#);
        assert!(partial.is_err(), "phase blocks must be complete");
        assert_eq!(RunConfig::from_json(r#"{"lambda": 0.0}"#).unwrap().lambda, 0.0);
    }

    #[test]
    fn overrides() {
        let c = RunConfig::toy();
        let o = |k: &str, v: &str| (k.to_string(), v.to_string());
        let d = c
            .with_overrides(&[o("lambda", "0"), o("tune.epochs", "3"), o("length", "0"), o("out-dir", "x/y")])
            .unwrap();
        assert_eq!((d.lambda, d.tune.epochs, d.prompt.length), (0.0, 3, 0));
        assert_eq!(d.out_dir, PathBuf::from("x/y"));
        assert!(c.with_overrides(&[o("epochs", "3")]).is_err());
        assert!(c.with_overrides(&[o("nope", "3")]).is_err());
        assert!(c.with_overrides(&[o("lambda", "-1")]).is_err());
        assert!(c.with_overrides(&[o("tau", "\"hot\"")]).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn overridden_configs_round_trip(
            lambda in 0.0f64..2.0,
            tau in 0.5f64..16.0,
            length in 0usize..9,
            epochs in 2usize..50,
            seed in any::<u64>(),
        ) {
            let o = |k: &str, v: String| (k.to_string(), v);
            let c = RunConfig::toy()
                .with_overrides(&[
                    o("lambda", lambda.to_string()),
                    o("tau", tau.to_string()),
                    o("length", length.to_string()),
                    o("tune.epochs", epochs.to_string()),
                    o("seed", seed.to_string()),
                ])
                .unwrap();
            prop_assert_eq!((c.lambda, c.tau, c.prompt.length, c.seed), (lambda, tau, length, seed));
            prop_assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        }
    }
}
