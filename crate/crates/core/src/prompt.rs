//! Deep visual prompts, the frozen/learnable partition and parameter audits.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::swinlite::{backbone_specs, head_specs, BackboneConfig, Bound, ModelState, ParamSpec, PromptFeed, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// Fresh prompts before every layer.
    Deep,
    /// Prompts injected at the first layer of each stage and carried.
    Shallow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub length: usize,
    pub mode: PromptMode,
    /// One P_0 for both view slots; otherwise the cc slot gets its own.
    pub shared: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            length: 4,
            mode: PromptMode::Deep,
            shared: true,
        }
    }
}

fn stage_starts(cfg: &BackboneConfig) -> Vec<usize> {
    cfg.depths
        .iter()
        .scan(0, |acc, &d| {
            let s = *acc;
            *acc += d;
            Some(s)
        })
        .collect()
}

/// Layers that receive fresh prompts.
pub fn prompt_layers(cfg: &BackboneConfig, pc: &PromptConfig) -> Vec<usize> {
    if pc.length == 0 {
        return vec![];
    }
    match pc.mode {
        PromptMode::Deep => (0..cfg.num_layers()).collect(),
        PromptMode::Shallow => stage_starts(cfg),
    }
}

pub fn prompt_name(layer: usize) -> String {
    format!("prompt.layer.{layer}")
}

pub fn prompt_specs(cfg: &BackboneConfig, pc: &PromptConfig) -> Vec<ParamSpec> {
    let widths = cfg.layer_widths();
    let mut v: Vec<ParamSpec> = prompt_layers(cfg, pc)
        .into_iter()
        .map(|i| ParamSpec {
            name: prompt_name(i),
            shape: vec![pc.length, widths[i]],
        })
        .collect();
    if pc.length > 0 && !pc.shared {
        v.push(ParamSpec {
            name: format!("{}.cc", prompt_name(0)),
            shape: vec![pc.length, widths[0]],
        });
    }
    v
}

pub fn context_specs(cfg: &BackboneConfig) -> Vec<ParamSpec> {
    View::BOTH
        .iter()
        .map(|v| ParamSpec {
            name: format!("ctx.{}", v.name()),
            shape: vec![cfg.embed_dim],
        })
        .collect()
}

/// Every tensor of the stage-2 model, in checkpoint order.
pub fn tune_specs(cfg: &BackboneConfig, pc: &PromptConfig) -> Vec<ParamSpec> {
    let mut v = backbone_specs(cfg);
    v.extend(head_specs(cfg, "single"));
    v.extend(head_specs(cfg, "multi"));
    v.extend(prompt_specs(cfg, pc));
    v.extend(context_specs(cfg));
    v
}

/// Per-layer prompt matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet<S> {
    pub length: usize,
    pub tensors: Vec<(String, Tensor<S>)>,
}

impl<S: Real> PromptSet<S> {
    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// Uniform in `[−a, a]` with `a = sqrt(6 / (p + d_i))`.
pub fn init_prompts<S: Real>(cfg: &BackboneConfig, pc: &PromptConfig, seed: u64) -> PromptSet<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = prompt_specs(cfg, pc)
        .into_iter()
        .map(|spec| {
            let a = prompt_bound(spec.shape[0], spec.shape[1]);
            let data = (0..spec.numel())
                .map(|_| S::of(rng.random_range(-a..=a)))
                .collect();
            (spec.name, Tensor::new(spec.shape, data).expect("shape matches"))
        })
        .collect();
    PromptSet {
        length: pc.length,
        tensors,
    }
}

pub fn prompt_bound(p: usize, d: usize) -> f64 {
    (6.0 / (p + d) as f64).sqrt()
}

/// Stage-2 model from a stage-1 model: the multi-view head starts as a copy
/// of the single-view head and context encodings start at zero.
pub fn init_tune_state<S: Real>(
    stage1: &ModelState<S>,
    cfg: &BackboneConfig,
    pc: &PromptConfig,
    seed: u64,
) -> Result<ModelState<S>> {
    let mut base = backbone_specs(cfg);
    base.extend(head_specs(cfg, "single"));
    stage1.check_specs(&base)?;
    let mut state = ModelState::new();
    for spec in &base {
        state.insert(spec.name.clone(), stage1.get(&spec.name)?.clone());
    }
    for suffix in ["weight", "bias"] {
        let t = stage1.get(&format!("head.single.{suffix}"))?.clone();
        state.insert(format!("head.multi.{suffix}"), t);
    }
    for (name, t) in init_prompts::<S>(cfg, pc, seed).tensors {
        state.insert(name, t);
    }
    for spec in context_specs(cfg) {
        state.insert(spec.name, Tensor::zeros(&spec.shape));
    }
    Ok(state)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Tune,
}

/// Learnable/frozen flag for every named tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    flags: BTreeMap<String, bool>,
}

const TUNED_PREFIXES: [&str; 4] = ["prompt.", "ctx.", "head.single.", "head.multi."];

impl FreezeMask {
    pub fn from_flags(flags: impl IntoIterator<Item = (String, bool)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (name, learnable) in flags {
            if map.insert(name.clone(), learnable).is_some() {
                return Err(Error::Contract(format!("tensor `{name}` listed twice in freeze mask")));
            }
        }
        Ok(FreezeMask { flags: map })
    }

    pub fn all_learnable<S: Real>(state: &ModelState<S>) -> Self {
        FreezeMask {
            flags: state.names().iter().map(|n| (n.clone(), true)).collect(),
        }
    }

    pub fn is_learnable(&self, name: &str) -> Result<bool> {
        self.flags
            .get(name)
            .copied()
            .ok_or_else(|| Error::Audit(name.to_string()))
    }

    pub fn learnable_names(&self) -> impl Iterator<Item = &str> {
        self.flags.iter().filter(|(_, &l)| l).map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, bool)> {
        self.flags.iter().map(|(n, &l)| (n.as_str(), l))
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }
}

fn classify(name: &str, phase: Phase) -> Result<bool> {
    let tuned = TUNED_PREFIXES.iter().any(|p| name.starts_with(p));
    if !tuned && !name.starts_with("backbone.") {
        return Err(Error::Audit(name.to_string()));
    }
    Ok(match phase {
        Phase::Pretrain => true,
        Phase::Tune => tuned,
    })
}

/// Pretraining: everything learnable. Tuning: exactly prompts, context
/// encodings and both heads learnable; all `backbone.` tensors frozen.
pub fn build_freeze_mask<'a>(names: impl IntoIterator<Item = &'a str>, phase: Phase) -> Result<FreezeMask> {
    let flags = names
        .into_iter()
        .map(|n| Ok((n.to_string(), classify(n, phase)?)))
        .collect::<Result<Vec<_>>>()?;
    FreezeMask::from_flags(flags)
}

/// Learnable elements over all elements.
pub fn trainable_fraction(specs: &[ParamSpec], mask: &FreezeMask) -> Result<f64> {
    let mut total = 0usize;
    let mut learnable = 0usize;
    for s in specs {
        total += s.numel();
        if mask.is_learnable(&s.name)? {
            learnable += s.numel();
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(learnable as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub numel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamAudit {
    pub total_params: usize,
    pub learnable_params: usize,
    pub trainable_fraction: f64,
    pub learnable: Vec<AuditRow>,
}

/// Tune-phase audit computed from shapes alone; nothing is allocated, so
/// it also works for configurations too large to build.
pub fn audit(cfg: &BackboneConfig, pc: &PromptConfig) -> Result<ParamAudit> {
    cfg.validate()?;
    let specs = tune_specs(cfg, pc);
    let mask = build_freeze_mask(specs.iter().map(|s| s.name.as_str()), Phase::Tune)?;
    let mut learnable = Vec::new();
    let mut total = 0;
    let mut n_learn = 0;
    for s in &specs {
        total += s.numel();
        if mask.is_learnable(&s.name)? {
            n_learn += s.numel();
            learnable.push(AuditRow {
                name: s.name.clone(),
                shape: s.shape.clone(),
                numel: s.numel(),
            });
        }
    }
    Ok(ParamAudit {
        total_params: total,
        learnable_params: n_learn,
        trainable_fraction: trainable_fraction(&specs, &mask)?,
        learnable,
    })
}

/// One prompt slot of a forward pass. At layer 0 the slot's view context
/// (if any) is added to its prompt rows.
#[derive(Clone, Copy, Debug)]
pub struct Slot {
    pub view: View,
    pub ctx: Option<Var>,
}

/// Feeds bound prompt parameters into the encoder.
pub struct PromptInjector<'a> {
    bound: &'a Bound,
    layers: Vec<usize>,
    shared: bool,
    slots: Vec<Slot>,
}

impl<'a> PromptInjector<'a> {
    pub fn new(bound: &'a Bound, cfg: &BackboneConfig, pc: &PromptConfig, slots: Vec<Slot>) -> Self {
        PromptInjector {
            bound,
            layers: prompt_layers(cfg, pc),
            shared: pc.shared,
            slots,
        }
    }
}

impl<S: Real> PromptFeed<S> for PromptInjector<'_> {
    fn inject(&mut self, g: &mut Graph<S>, layer: usize) -> Result<Option<Var>> {
        if !self.layers.contains(&layer) || self.slots.is_empty() {
            return Ok(None);
        }
        let mut rows = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            let name = if layer == 0 && !self.shared && slot.view == View::Cc {
                format!("{}.cc", prompt_name(0))
            } else {
                prompt_name(layer)
            };
            let mut p = self.bound.get(&name)?;
            if layer == 0 {
                if let Some(c) = slot.ctx {
                    p = g.add(p, c)?;
                }
            }
            rows.push(p);
        }
        Ok(Some(if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? }))
    }

    fn replaces(&self, layer: usize) -> bool {
        self.layers.contains(&layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::swinlite::init_backbone;

    #[test]
    fn bound_for_p4_d32() {
        assert!((prompt_bound(4, 32) - 0.4082).abs() < 1e-4);
        let cfg = BackboneConfig::toy();
        let pc = PromptConfig::default();
        let set = init_prompts::<f64>(&cfg, &pc, 9);
        assert_eq!(set.tensors.len(), 4);
        for (name, t) in &set.tensors {
            let d = t.shape()[1];
            let a = prompt_bound(4, d);
            assert!(t.data().iter().all(|v| v.abs() <= a), "{name}");
        }
        assert_eq!(set, init_prompts::<f64>(&cfg, &pc, 9));
    }

    #[test]
    fn empirical_max_within_bound() {
        let cfg = BackboneConfig {
            embed_dim: 32,
            depths: vec![1],
            heads: vec![1],
            ..BackboneConfig::toy()
        };
        let pc = PromptConfig {
            length: 4,
            ..Default::default()
        };
        let a = prompt_bound(4, 32);
        let mut max: f64 = 0.0;
        let mut draws = 0;
        for seed in 0..800 {
            for (_, t) in init_prompts::<f64>(&cfg, &pc, seed).tensors {
                draws += t.numel();
                max = t.data().iter().fold(max, |m, v| m.max(v.abs()));
            }
        }
        assert!(draws >= 100_000);
        assert!(max <= a && max > 0.99 * a);
    }

    #[test]
    fn zero_length_gives_empty_set() {
        let cfg = BackboneConfig::toy();
        let pc = PromptConfig {
            length: 0,
            ..Default::default()
        };
        assert!(init_prompts::<f32>(&cfg, &pc, 0).is_empty());
        assert!(prompt_specs(&cfg, &pc).is_empty());
    }

    #[test]
    fn tune_mask_freezes_backbone_only() {
        let cfg = BackboneConfig::toy();
        let pc = PromptConfig::default();
        let s1 = init_backbone::<f32>(&cfg, 0).unwrap();
        let st = init_tune_state(&s1, &cfg, &pc, 1).unwrap();
        let mask = build_freeze_mask(st.names().iter().map(String::as_str), Phase::Tune).unwrap();
        for (name, learnable) in mask.iter() {
            assert_eq!(!learnable, name.starts_with("backbone."), "{name}");
        }
        assert_eq!(mask.len(), st.len());
        let pre = build_freeze_mask(st.names().iter().map(String::as_str), Phase::Pretrain).unwrap();
        let specs = tune_specs(&cfg, &pc);
        assert_eq!(trainable_fraction(&specs, &pre).unwrap(), 1.0);
        let frozen = FreezeMask::from_flags(specs.iter().map(|s| (s.name.clone(), false))).unwrap();
        assert_eq!(trainable_fraction(&specs, &frozen).unwrap(), 0.0);
    }

    #[test]
    fn unknown_name_is_audit_error() {
        let err = build_freeze_mask(["backbone.norm.weight", "mystery.w"], Phase::Tune).unwrap_err();
        assert!(matches!(err, Error::Audit(ref n) if n == "mystery.w"));
        let mask = build_freeze_mask(["backbone.norm.weight"], Phase::Tune).unwrap();
        assert!(matches!(mask.is_learnable("x"), Err(Error::Audit(_))));
    }

    #[test]
    fn multi_head_starts_as_copy() {
        let cfg = BackboneConfig::toy();
        let s1 = init_backbone::<f32>(&cfg, 0).unwrap();
        let st = init_tune_state(&s1, &cfg, &PromptConfig::default(), 1).unwrap();
        assert_eq!(st.get("head.multi.weight").unwrap(), st.get("head.single.weight").unwrap());
        assert!(st.get("ctx.mlo").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(st.digest("backbone."), s1.digest("backbone."));
        st.check_specs(&tune_specs(&cfg, &PromptConfig::default())).unwrap();
    }

    #[test]
    fn view_specific_variant_adds_cc_prompt() {
        let cfg = BackboneConfig::toy();
        let pc = PromptConfig {
            shared: false,
            ..Default::default()
        };
        let names: Vec<String> = prompt_specs(&cfg, &pc).into_iter().map(|s| s.name).collect();
        assert!(names.contains(&"prompt.layer.0.cc".to_string()));
        let shallow = PromptConfig {
            mode: PromptMode::Shallow,
            ..Default::default()
        };
        assert_eq!(prompt_layers(&cfg, &shallow), vec![0, 2]);
    }
}
