use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

use super::config::BackboneConfig;

/// Name and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("backbone.stages.{stage}.blocks.{block}")
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, din: usize, dout: usize, bias: bool) {
    out.push(ParamSpec::new(format!("{prefix}.weight"), &[din, dout]));
    if bias {
        out.push(ParamSpec::new(format!("{prefix}.bias"), &[dout]));
    }
}

fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(ParamSpec::new(format!("{prefix}.weight"), &[d]));
    out.push(ParamSpec::new(format!("{prefix}.bias"), &[d]));
}

/// Every backbone tensor (frozen during tuning), in canonical order.
pub fn backbone_specs(cfg: &BackboneConfig) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    linear_specs(&mut v, "backbone.patch_embed.proj", cfg.patch_dim(), cfg.embed_dim, true);
    if cfg.patch_norm {
        norm_specs(&mut v, "backbone.patch_embed.norm", cfg.embed_dim);
    }
    for s in 0..cfg.num_stages() {
        let d = cfg.stage_dim(s);
        for b in 0..cfg.depths[s] {
            let p = block_prefix(s, b);
            norm_specs(&mut v, &format!("{p}.norm1"), d);
            linear_specs(&mut v, &format!("{p}.attn.qkv"), d, 3 * d, true);
            if cfg.use_relative_position_bias {
                let side = 2 * cfg.window_size - 1;
                v.push(ParamSpec::new(
                    format!("{p}.attn.relative_position_bias_table"),
                    &[side * side, cfg.heads[s]],
                ));
            }
            linear_specs(&mut v, &format!("{p}.attn.proj"), d, d, true);
            norm_specs(&mut v, &format!("{p}.norm2"), d);
            linear_specs(&mut v, &format!("{p}.mlp.fc1"), d, cfg.mlp_ratio * d, true);
            linear_specs(&mut v, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * d, d, true);
        }
        if s + 1 < cfg.num_stages() {
            norm_specs(&mut v, &format!("backbone.stages.{s}.merge.norm"), 4 * d);
            linear_specs(&mut v, &format!("backbone.stages.{s}.merge.reduction"), 4 * d, 2 * d, false);
        }
    }
    norm_specs(&mut v, "backbone.norm", cfg.final_dim());
    v
}

pub fn head_specs(cfg: &BackboneConfig, which: &str) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    linear_specs(&mut v, &format!("head.{which}"), cfg.final_dim(), cfg.num_classes, true);
    v
}

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Real> Default for ModelState<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> ModelState<S> {
    pub fn new() -> Self {
        ModelState {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Add a tensor, replacing any existing one of the same name in place.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Config(format!("model state has no tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::Config(format!("model state has no tensor `{name}`"))),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn total_numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<T: Real>(&self) -> ModelState<T> {
        ModelState {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes and raw bytes of every tensor whose name
    /// starts with `prefix`, in state order.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Check that every spec is present with the expected shape.
    pub fn check_specs(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            let t = self.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Config(format!(
                    "tensor `{}` has shape {:?}, config expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(())
    }
}

fn xavier<S: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<S> {
    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    let n = shape[0] * shape[1];
    let data = (0..n).map(|_| S::of(rng.random_range(-a..=a))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Default initialisation of one spec: Xavier-uniform linear weights,
/// unit LayerNorm gains, zero biases, N(0, 0.02²) bias tables.
pub fn init_param<S: Real>(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let n = &spec.name;
    let is_norm = n.contains("norm");
    if n.ends_with("relative_position_bias_table") {
        let dist = Normal::new(0.0, 0.02).expect("valid std");
        let data = (0..spec.numel()).map(|_| S::of(dist.sample(rng))).collect();
        Tensor::new(spec.shape.clone(), data).expect("shape matches")
    } else if n.ends_with(".weight") && is_norm {
        Tensor::full(&spec.shape, S::one())
    } else if n.ends_with(".weight") {
        xavier(rng, &spec.shape)
    } else {
        Tensor::zeros(&spec.shape)
    }
}

/// Fresh stage-1 model: backbone plus single-view head.
pub fn init_backbone<S: Real>(cfg: &BackboneConfig, seed: u64) -> Result<ModelState<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ModelState::new();
    for spec in backbone_specs(cfg).iter().chain(&head_specs(cfg, "single")) {
        state.insert(spec.name.clone(), init_param(spec, &mut rng));
    }
    Ok(state)
}

/// Parameters bound as leaves on one graph.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Bind every tensor of `state`; `learnable` decides `requires_grad`.
    pub fn new<S: Real>(g: &mut Graph<S>, state: &ModelState<S>, learnable: impl Fn(&str) -> bool) -> Self {
        let vars = state
            .iter()
            .map(|(name, t)| (name.to_string(), g.leaf(t.clone(), learnable(name))))
            .collect();
        Bound { vars }
    }

    /// Bind `state` with some tensors supplied as existing nodes; the rest
    /// become frozen leaves.
    pub fn with<S: Real>(g: &mut Graph<S>, state: &ModelState<S>, given: &[(String, Var)]) -> Self {
        let mut vars: HashMap<String, Var> = given.iter().cloned().collect();
        for (name, t) in state.iter() {
            if !vars.contains_key(name) {
                vars.insert(name.to_string(), g.leaf(t.clone(), false));
            }
        }
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("model state has no tensor `{name}`")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
