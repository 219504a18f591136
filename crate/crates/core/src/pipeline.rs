//! The two-stage protocol end to end: synth, pretrain, tune, eval,
//! gradcheck and audit. Every artifact is a pure function of the config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{OptimizerKind, PhaseConfig, RunConfig};
use crate::dataio::{self, apply_augment, split, AugmentParams, Dataset, ImageTensor, SplitPlan, Study};
use crate::diffcore::gradcheck::{check_build, op_suite, FdOptions, FdReport};
use crate::diffcore::{inject_sign_fault, Graph, OpKind, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_folds, EvalReport, Metrics};
use crate::multiview::losses::loss_overall_with;
use crate::multiview::train::{infer_backbone, infer_pair, stack_logits};
use crate::multiview::{forward_pair, pretrain_step, tune_step, ModelRef, PairSample, SingleSample};
use crate::optim::{AdamW, Optimizer, Sgd};
use crate::prompt::{audit, build_freeze_mask, init_tune_state, FreezeMask, ParamAudit, Phase};
use crate::swinlite::checkpoint::{load_checkpoint, save_checkpoint};
use crate::swinlite::{forward_backbone, init_backbone, Bound, ModelState, NoPrompts, View};

pub const BACKBONE: &str = "backbone.";

pub fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir.join("manifest.csv")
}

pub fn split_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("split.csv")
}

pub fn stage1_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("stage1.ckpt")
}

pub fn fold_dir(cfg: &RunConfig, fold: usize) -> PathBuf {
    cfg.out_dir.join(format!("fold{fold}"))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// SplitMix64 finaliser over a tuple of words; derives independent seeds.
pub fn mix(words: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &w in words {
        h ^= w.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub subjects: usize,
    pub class_histogram: Vec<usize>,
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthSummary> {
    cfg.validate()?;
    let out = dataio::synth_generate(cfg.subjects, cfg.scheme, cfg.image_side(), cfg.seed, &cfg.data_dir)?;
    let mut class_histogram = vec![0; cfg.scheme.num_classes()];
    for r in &out.records {
        class_histogram[r.label] += 1;
    }
    Ok(SynthSummary {
        manifest: out.manifest,
        subjects: out.records.len(),
        class_histogram,
    })
}

/// Decoded dataset with its subject-level split.
pub struct Prepared {
    pub data: Dataset,
    pub plan: SplitPlan,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let data = Dataset::load(&manifest_path(cfg), cfg.image_side(), cfg.backbone.num_classes)?;
    let plan = split(&data.labels(), cfg.backbone.num_classes, cfg.test_fraction, cfg.folds, cfg.seed)?;
    Ok(Prepared { data, plan })
}

fn optimizer(p: &PhaseConfig) -> Optimizer {
    match p.optimizer {
        OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(p.momentum, p.weight_decay)),
        OptimizerKind::Adamw => Optimizer::AdamW(AdamW::new(p.beta1, p.beta2, p.eps, p.weight_decay)),
    }
}

fn view_tensor(img: &ImageTensor, augment: Option<u64>) -> Tensor<f32> {
    match augment {
        None => img.to_tensor(),
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            apply_augment(img, &AugmentParams::sample(&mut rng)).to_tensor()
        }
    }
}

fn epoch_order(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub subjects: usize,
    pub images: usize,
    pub steps: usize,
    pub backbone_digest: String,
    pub epochs: Vec<PretrainEpoch>,
}

/// Stage 1: single-view pretraining on every training-split image, both
/// views treated as independent samples with the subject label.
pub fn pretrain(cfg: &RunConfig, data: &Dataset, subjects: &[&str]) -> Result<(ModelState<f32>, PretrainLog)> {
    let p = &cfg.pretrain;
    let studies = data.subset(subjects);
    let images: Vec<(&ImageTensor, usize)> =
        studies.iter().flat_map(|s| [(&s.mlo, s.label), (&s.cc, s.label)]).collect();
    let mut state = init_backbone::<f32>(&cfg.backbone, mix(&[cfg.seed, 1]))?;
    let mask = build_freeze_mask(state.names().iter().map(String::as_str), Phase::Pretrain)?;
    let steps_per_epoch = images.len().div_ceil(p.batch_size);
    let schedule = p.schedule(steps_per_epoch);
    let mut opt = optimizer(p);
    let mut step = 0;
    let mut epochs = Vec::with_capacity(p.epochs);
    for epoch in 0..p.epochs {
        let order = epoch_order(images.len(), mix(&[cfg.seed, 2, epoch as u64]));
        let lr0 = schedule.lr(step);
        let mut losses = Vec::with_capacity(steps_per_epoch);
        for chunk in order.chunks(p.batch_size) {
            let batch: Vec<SingleSample> = chunk
                .iter()
                .map(|&i| SingleSample {
                    image: view_tensor(images[i].0, p.augment.then(|| mix(&[cfg.seed, 3, epoch as u64, i as u64]))),
                    label: images[i].1,
                })
                .collect();
            let loss = pretrain_step(&mut state, &mask, &cfg.backbone, &batch, &mut opt, schedule.lr(step))
                .map_err(|e| context(e, &format!("pretraining epoch {epoch} step {step}")))?;
            losses.push(loss);
            step += 1;
        }
        epochs.push(PretrainEpoch {
            epoch,
            lr: lr0,
            loss: mean(&losses),
        });
    }
    let log = PretrainLog {
        subjects: studies.len(),
        images: images.len(),
        steps: step,
        backbone_digest: state.digest(BACKBONE),
        epochs,
    };
    Ok((state, log))
}

fn context(e: Error, what: &str) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{what}: {m}")),
        other => other,
    }
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainLog> {
    let prep = prepare(cfg)?;
    create_dir(&cfg.out_dir)?;
    prep.plan.write_csv(&split_path(cfg))?;
    let (state, log) = pretrain(cfg, &prep.data, &prep.plan.train())?;
    save_checkpoint(&stage1_path(cfg), &state, None)?;
    write_json(&cfg.out_dir.join("pretrain_log.json"), &log)?;
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub l_overall: f64,
    pub l_mlo: f64,
    pub l_cc: f64,
    pub l_mv: f64,
    pub l_md: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneLog {
    pub fold: usize,
    pub subjects: usize,
    pub steps: usize,
    pub lambda: f64,
    pub backbone_digest_before: String,
    pub backbone_digest_after: String,
    /// Tensors that ever received a gradient.
    pub updated: Vec<String>,
    pub epochs: Vec<TuneEpoch>,
}

/// Trainable-parameter report of an actual state and mask.
pub fn audit_state(state: &ModelState<f32>, mask: &FreezeMask) -> Result<ParamAudit> {
    let mut learnable = Vec::new();
    let (mut total, mut n) = (0, 0);
    for (name, t) in state.iter() {
        total += t.numel();
        if mask.is_learnable(name)? {
            n += t.numel();
            learnable.push(crate::prompt::AuditRow {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                numel: t.numel(),
            });
        }
    }
    Ok(ParamAudit {
        total_params: total,
        learnable_params: n,
        trainable_fraction: n as f64 / total.max(1) as f64,
        learnable,
    })
}

/// Stage 2 on one fold: prompts, context encodings and heads are trained
/// on the fold's training subjects; the backbone stays frozen.
pub fn tune_fold(
    cfg: &RunConfig,
    stage1: &ModelState<f32>,
    data: &Dataset,
    subjects: &[&str],
    fold: usize,
) -> Result<(ModelState<f32>, FreezeMask, TuneLog)> {
    let p = &cfg.tune;
    let studies: Vec<&Study> = data.subset(subjects);
    let mut state = init_tune_state(stage1, &cfg.backbone, &cfg.prompt, mix(&[cfg.seed, 4, fold as u64]))?;
    let mask = build_freeze_mask(state.names().iter().map(String::as_str), Phase::Tune)?;
    let before = state.digest(BACKBONE);
    let steps_per_epoch = studies.len().div_ceil(p.batch_size);
    let schedule = p.schedule(steps_per_epoch);
    let mut opt = optimizer(p);
    let mut updated = std::collections::BTreeSet::new();
    let mut step = 0;
    let mut epochs = Vec::with_capacity(p.epochs);
    for epoch in 0..p.epochs {
        let order = epoch_order(studies.len(), mix(&[cfg.seed, 5, fold as u64, epoch as u64]));
        let lr0 = schedule.lr(step);
        let mut acc = [0.0f64; 5];
        let mut count = 0;
        for chunk in order.chunks(p.batch_size) {
            let batch: Vec<PairSample> = chunk
                .iter()
                .map(|&i| {
                    let s = studies[i];
                    let aug = |v: u64| p.augment.then(|| mix(&[cfg.seed, 6, fold as u64, epoch as u64, i as u64, v]));
                    PairSample {
                        mlo: view_tensor(&s.mlo, aug(0)),
                        cc: view_tensor(&s.cc, aug(1)),
                        label: s.label,
                    }
                })
                .collect();
            let out = tune_step(
                &mut state,
                &mask,
                &cfg.backbone,
                &cfg.prompt,
                cfg.hyper(),
                &batch,
                &mut opt,
                schedule.lr(step),
            )
            .map_err(|e| context(e, &format!("tuning fold {fold} epoch {epoch} step {step}")))?;
            let l = out.loss;
            for (a, v) in acc.iter_mut().zip([l.l_overall, l.l_mlo, l.l_cc, l.l_mv, l.l_md]) {
                *a += v;
            }
            count += 1;
            updated.extend(out.updated);
            step += 1;
        }
        let m = acc.map(|a| a / count.max(1) as f64);
        epochs.push(TuneEpoch {
            epoch,
            lr: lr0,
            l_overall: m[0],
            l_mlo: m[1],
            l_cc: m[2],
            l_mv: m[3],
            l_md: m[4],
        });
    }
    let after = state.digest(BACKBONE);
    if after != before {
        return Err(Error::Contract(format!("backbone changed during tuning: {before} → {after}")));
    }
    let log = TuneLog {
        fold,
        subjects: studies.len(),
        steps: step,
        lambda: cfg.lambda,
        backbone_digest_before: before,
        backbone_digest_after: after,
        updated: updated.into_iter().collect(),
        epochs,
    };
    Ok((state, mask, log))
}

pub fn load_stage1(cfg: &RunConfig, path: &Path) -> Result<ModelState<f32>> {
    let (state, _) = load_checkpoint::<f32>(path)?;
    let mut specs = crate::swinlite::backbone_specs(&cfg.backbone);
    specs.extend(crate::swinlite::head_specs(&cfg.backbone, "single"));
    crate::swinlite::checkpoint::check_against(&state, &specs)?;
    Ok(state)
}

/// Tune one fold, or all folds when `fold` is `None`.
pub fn cmd_tune(cfg: &RunConfig, stage1: &Path, fold: Option<usize>) -> Result<Vec<TuneLog>> {
    let stage1 = load_stage1(cfg, stage1)?;
    let prep = prepare(cfg)?;
    let folds: Vec<usize> = match fold {
        Some(k) if k >= cfg.folds => return Err(Error::Config(format!("fold {k} out of range 0..{}", cfg.folds))),
        Some(k) => vec![k],
        None => (0..cfg.folds).collect(),
    };
    let mut logs = Vec::new();
    for k in folds {
        let (state, mask, log) = tune_fold(cfg, &stage1, &prep.data, &prep.plan.fold_train(k), k)?;
        let dir = fold_dir(cfg, k);
        create_dir(&dir)?;
        save_checkpoint(&dir.join("stage2.ckpt"), &state, Some(&mask))?;
        write_json(&dir.join("tune_log.json"), &log)?;
        write_json(&dir.join("trainable.json"), &audit_state(&state, &mask)?)?;
        logs.push(log);
    }
    Ok(logs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Test,
    Val,
    Train,
}

impl EvalSplit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(EvalSplit::Test),
            "val" => Ok(EvalSplit::Val),
            "train" => Ok(EvalSplit::Train),
            other => Err(Error::Config(format!("unknown split `{other}` (test|val|train)"))),
        }
    }

    fn subjects<'a>(self, plan: &'a SplitPlan, fold: Option<usize>) -> Result<Vec<&'a str>> {
        match (self, fold) {
            (EvalSplit::Test, _) => Ok(plan.test()),
            (EvalSplit::Train, None) => Ok(plan.train()),
            (EvalSplit::Train, Some(k)) => Ok(plan.fold_train(k)),
            (EvalSplit::Val, Some(k)) => Ok(plan.fold(k)),
            (EvalSplit::Val, None) => Err(Error::Config("the val split needs --fold".into())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Stage-1 model, no prompts.
    Baseline,
    Prompted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewBlock<T> {
    pub mlo: T,
    pub cc: T,
    /// Mean of the two per-view metrics.
    pub averaged: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput<T> {
    pub mode: Mode,
    pub split: EvalSplit,
    pub subjects: usize,
    pub single_view: ViewBlock<T>,
    pub multi_view: Option<T>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Metrics of one model on `studies`.
pub fn evaluate_state(cfg: &RunConfig, state: &ModelState<f32>, studies: &[&Study]) -> Result<EvalOutput<Metrics>> {
    let mode = if state.contains("head.multi.weight") {
        Mode::Prompted
    } else {
        Mode::Baseline
    };
    let k = cfg.backbone.num_classes;
    let labels: Vec<usize> = studies.iter().map(|s| s.label).collect();
    let (mut p_mlo, mut p_cc, mut p_mv) = (Vec::new(), Vec::new(), Vec::new());
    for s in studies {
        let (mlo, cc) = (s.mlo.to_tensor(), s.cc.to_tensor());
        match mode {
            Mode::Baseline => {
                p_mlo.push(softmax(&infer_backbone(state, &cfg.backbone, &mlo)?));
                p_cc.push(softmax(&infer_backbone(state, &cfg.backbone, &cc)?));
            }
            Mode::Prompted => {
                let (a, b, c) = infer_pair(state, &cfg.backbone, &cfg.prompt, &mlo, &cc)?;
                p_mlo.push(softmax(&a));
                p_cc.push(softmax(&b));
                p_mv.push(softmax(&c));
            }
        }
    }
    let mlo = Metrics::evaluate(&p_mlo, &labels, k)?;
    let cc = Metrics::evaluate(&p_cc, &labels, k)?;
    Ok(EvalOutput {
        mode,
        split: EvalSplit::Test,
        subjects: studies.len(),
        single_view: ViewBlock {
            mlo,
            cc,
            averaged: Metrics::mean_of(&[mlo, cc]),
        },
        multi_view: match mode {
            Mode::Prompted => Some(Metrics::evaluate(&p_mv, &labels, k)?),
            Mode::Baseline => None,
        },
    })
}

pub fn aggregate_outputs(outs: &[EvalOutput<Metrics>]) -> Result<EvalOutput<EvalReport>> {
    let first = outs.first().ok_or_else(|| Error::Contract("no fold outputs".into()))?;
    let col = |f: &dyn Fn(&EvalOutput<Metrics>) -> Metrics| -> Result<EvalReport> {
        aggregate_folds(&outs.iter().map(f).collect::<Vec<_>>())
    };
    Ok(EvalOutput {
        mode: first.mode,
        split: first.split,
        subjects: first.subjects,
        single_view: ViewBlock {
            mlo: col(&|o| o.single_view.mlo)?,
            cc: col(&|o| o.single_view.cc)?,
            averaged: col(&|o| o.single_view.averaged)?,
        },
        multi_view: match first.mode {
            Mode::Prompted => Some(col(&|o| o.multi_view.expect("prompted output"))?),
            Mode::Baseline => None,
        },
    })
}

/// Result of `eval`: one checkpoint, or the per-fold checkpoints aggregated.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum EvalResult {
    Single(EvalOutput<Metrics>),
    Folds(EvalOutput<EvalReport>),
}

/// Evaluate `ckpt` on `split`; with no checkpoint, evaluate every fold's
/// stage-2 checkpoint (on its own validation fold for `val`) and aggregate.
pub fn cmd_eval(cfg: &RunConfig, ckpt: Option<&Path>, split: EvalSplit, fold: Option<usize>) -> Result<EvalResult> {
    let prep = prepare(cfg)?;
    let run = |state: &ModelState<f32>, fold: Option<usize>| -> Result<EvalOutput<Metrics>> {
        let ids = split.subjects(&prep.plan, fold)?;
        let studies = prep.data.subset(&ids);
        let mut out = evaluate_state(cfg, state, &studies)?;
        out.split = split;
        Ok(out)
    };
    let (result, name) = match ckpt {
        Some(path) => {
            let (state, _) = load_checkpoint::<f32>(path)?;
            (EvalResult::Single(run(&state, fold)?), "eval.json".to_string())
        }
        None => {
            let mut outs = Vec::with_capacity(cfg.folds);
            for k in 0..cfg.folds {
                let (state, _) = load_checkpoint::<f32>(&fold_dir(cfg, k).join("stage2.ckpt"))?;
                outs.push(run(&state, Some(k))?);
            }
            let name = format!("eval_{}.json", serde_json::to_value(split)?.as_str().unwrap_or("split"));
            (EvalResult::Folds(aggregate_outputs(&outs)?), name)
        }
    };
    if ckpt.is_none() {
        create_dir(&cfg.out_dir)?;
        write_json(&cfg.out_dir.join(name), &result)?;
    }
    Ok(result)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub passed: bool,
    pub injected_fault: Option<String>,
    pub ops: Vec<FdReport>,
    pub losses: Vec<FdReport>,
    pub failures: Vec<String>,
}

pub const LOSS_TERMS: [&str; 5] = ["l_mlo", "l_cc", "l_mv", "l_md", "l_overall"];

/// Coordinates probed per tensor in the model-level checks.
const MODEL_COORDS: usize = 6;

fn random_image(side: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::Rng;
    Tensor::new(vec![1, side, side], (0..side * side).map(|_| rng.random::<f64>()).collect()).expect("sized")
}

/// Model-level finite-difference checks in f64: each tuning loss term
/// against the learnable tensors, plus single-view cross-entropy against
/// the full stage-1 model.
pub fn model_checks(cfg: &RunConfig, opts: &FdOptions) -> Result<Vec<FdReport>> {
    use rand::Rng;
    let bc = &cfg.backbone;
    let pc = &cfg.prompt;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 7]));
    let stage1 = init_backbone::<f64>(bc, mix(&[cfg.seed, 8]))?;
    let mut state = init_tune_state(&stage1, bc, pc, mix(&[cfg.seed, 9]))?;
    // non-trivial context encodings and distinct heads
    for name in ["ctx.mlo", "ctx.cc", "head.multi.weight", "head.multi.bias"] {
        for v in state.get_mut(name)?.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let side = cfg.image_side();
    let pairs: Vec<(Tensor<f64>, Tensor<f64>, usize)> = (0..2)
        .map(|i| (random_image(side, &mut rng), random_image(side, &mut rng), (2 * i) % bc.num_classes))
        .collect();
    let labels: Vec<usize> = pairs.iter().map(|p| p.2).collect();
    let mask = build_freeze_mask(state.names().iter().map(String::as_str), Phase::Tune)?;
    let learn: Vec<(String, Tensor<f64>)> = state
        .iter()
        .filter(|(n, _)| mask.is_learnable(n).unwrap_or(false))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let names: Vec<String> = learn.iter().map(|(n, _)| n.clone()).collect();
    let sampled = FdOptions {
        max_coords: Some(MODEL_COORDS),
        ..opts.clone()
    };
    let logits = |g: &mut Graph<f64>, bound: &Bound| -> Result<[Var; 3]> {
        let m = ModelRef {
            cfg: bc,
            prompts: pc,
            bound,
        };
        let (mut a, mut b, mut c) = (Vec::new(), Vec::new(), Vec::new());
        for (mlo, cc, _) in &pairs {
            let y = forward_pair(g, m, mlo, cc)?;
            a.push(y.mlo);
            b.push(y.cc);
            c.push(y.mv);
        }
        Ok([stack_logits(g, &a)?, stack_logits(g, &b)?, stack_logits(g, &c)?])
    };
    // Distillation teachers are held at their values at the base point,
    // which is what stop-gradient differentiates.
    let (z_teacher, mv_teacher) = {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &state, |_| false);
        let [a, b, c] = logits(&mut g, &bound)?;
        let s = g.add(a, b)?;
        let z = g.scale(s, 0.5);
        (g.value(z).clone(), g.value(c).clone())
    };
    let mut reports = Vec::new();
    for (ti, term) in LOSS_TERMS.iter().enumerate() {
        let build = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
            let given: Vec<(String, Var)> = names.iter().cloned().zip(vars.iter().copied()).collect();
            let bound = Bound::with(g, &state, &given);
            let [a, b, c] = logits(g, &bound)?;
            let teachers = (g.constant(z_teacher.clone()), g.constant(mv_teacher.clone()));
            let l = loss_overall_with(g, a, b, c, &labels, cfg.hyper(), Some(teachers))?;
            Ok([l.l_mlo, l.l_cc, l.l_mv, l.l_md, l.l_overall][ti])
        };
        reports.push(check_build(term, &learn, &build, None, &sampled)?);
    }

    let full: Vec<(String, Tensor<f64>)> = stage1.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let full_names: Vec<String> = full.iter().map(|(n, _)| n.clone()).collect();
    let image = &pairs[0].0;
    let build = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let given: Vec<(String, Var)> = full_names.iter().cloned().zip(vars.iter().copied()).collect();
        let bound = Bound::with(g, &stage1, &given);
        let (_, y) = forward_backbone(g, bc, &bound, image, View::Mlo, &mut NoPrompts)?;
        let y = stack_logits(g, &[y])?;
        g.cross_entropy(y, &labels[..1])
    };
    let backbone_opts = FdOptions {
        max_coords: Some(2),
        ..opts.clone()
    };
    reports.push(check_build("l_single", &full, &build, None, &backbone_opts)?);
    Ok(reports)
}

pub const GRADCHECK_TOL: f64 = 1e-5;

/// Central-difference step of the whole-model checks.
pub const MODEL_FD_STEP: f64 = 1e-4;

pub fn cmd_gradcheck(cfg: &RunConfig, fault: Option<OpKind>) -> Result<GradcheckReport> {
    cfg.validate()?;
    inject_sign_fault(fault);
    let result = (|| -> Result<(Vec<FdReport>, Vec<FdReport>)> {
        let opts = FdOptions {
            seed: cfg.seed,
            ..FdOptions::default()
        };
        // whole-model losses are O(1) with per-coordinate gradients near
        // 1e-6, so roundoff (∝ 1/h) dominates there at the op-level step
        let model_opts = FdOptions {
            step: MODEL_FD_STEP,
            ..opts.clone()
        };
        Ok((op_suite(100, cfg.seed, &opts)?, model_checks(cfg, &model_opts)?))
    })();
    inject_sign_fault(None);
    let (ops, losses) = result?;
    let failures: Vec<String> = ops
        .iter()
        .chain(&losses)
        .filter(|r| !r.passed(GRADCHECK_TOL))
        .map(|r| match &r.worst {
            Some(w) => format!(
                "{}: max rel. err {:.3e} at `{}`[{}] (analytic {:.6e}, numeric {:.6e})",
                r.name, r.max_rel_err, w.param, w.index, w.analytic, w.numeric
            ),
            None => format!("{}: max rel. err {:.3e}", r.name, r.max_rel_err),
        })
        .collect();
    Ok(GradcheckReport {
        tolerance: GRADCHECK_TOL,
        passed: failures.is_empty(),
        injected_fault: fault.map(|k| k.name().to_string()),
        ops,
        losses,
        failures,
    })
}

pub fn cmd_audit(cfg: &RunConfig) -> Result<ParamAudit> {
    audit(&cfg.backbone, &cfg.prompt)
}

/// Class histogram of each fold, for stratification checks.
pub fn fold_histograms(plan: &SplitPlan, labels: &BTreeMap<String, usize>, num_classes: usize) -> Vec<Vec<usize>> {
    (0..plan.folds)
        .map(|k| {
            let mut h = vec![0; num_classes];
            for id in plan.fold(k) {
                h[labels[id]] += 1;
            }
            h
        })
        .collect()
}
