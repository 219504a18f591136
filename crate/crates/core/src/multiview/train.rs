//! One optimisation step of each training phase, plus inference helpers.

use crate::diffcore::{Gradients, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::prompt::{FreezeMask, PromptConfig};
use crate::swinlite::{forward_backbone, BackboneConfig, Bound, ModelState, NoPrompts, View};

use super::losses::{loss_overall, Hyper, LossValues};
use super::{forward_multiview, forward_pair, forward_singleview, ModelRef};

#[derive(Clone, Debug)]
pub struct SingleSample {
    pub image: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct PairSample {
    pub mlo: Tensor<f32>,
    pub cc: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct TuneStep {
    pub loss: LossValues,
    /// Tensors that received a gradient, in state order.
    pub updated: Vec<String>,
}

pub(crate) fn stack_logits<S: Real>(g: &mut Graph<S>, rows: &[Var]) -> Result<Var> {
    let mut r = Vec::with_capacity(rows.len());
    for &y in rows {
        let c = g.shape(y)[0];
        r.push(g.reshape(y, &[1, c])?);
    }
    g.concat_rows(&r)
}

/// Apply `update` to every learnable tensor holding a gradient. A gradient
/// on a frozen tensor is a broken freeze contract and aborts the step.
fn apply(
    state: &mut ModelState<f32>,
    mask: &FreezeMask,
    bound: &Bound,
    grads: &Gradients<f32>,
    mut update: impl FnMut(&str, &mut [f32], &[f32]),
) -> Result<Vec<String>> {
    let mut updated = Vec::new();
    for name in state.names().to_vec() {
        let Some(grad) = grads.get(bound.get(&name)?) else {
            continue;
        };
        if !mask.is_learnable(&name)? {
            return Err(Error::Contract(format!("frozen tensor `{name}` received a gradient")));
        }
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        update(&name, state.get_mut(&name)?.data_mut(), grad.data());
        updated.push(name);
    }
    Ok(updated)
}

fn bind(g: &mut Graph<f32>, state: &ModelState<f32>, mask: &FreezeMask) -> Result<Bound> {
    for name in state.names() {
        mask.is_learnable(name)?;
    }
    Ok(Bound::new(g, state, |n| mask.is_learnable(n).unwrap_or(false)))
}

/// One optimiser step on `l_overall` over a batch of pairs.
#[allow(clippy::too_many_arguments)]
pub fn tune_step(
    state: &mut ModelState<f32>,
    mask: &FreezeMask,
    cfg: &BackboneConfig,
    pc: &PromptConfig,
    hyper: Hyper,
    batch: &[PairSample],
    opt: &mut Optimizer,
    lr: f64,
) -> Result<TuneStep> {
    let mut g = Graph::new();
    let bound = bind(&mut g, state, mask)?;
    let m = ModelRef {
        cfg,
        prompts: pc,
        bound: &bound,
    };
    let (mut ys_mlo, mut ys_cc, mut ys_mv) = (Vec::new(), Vec::new(), Vec::new());
    for s in batch {
        let y = forward_pair(&mut g, m, &s.mlo, &s.cc)?;
        ys_mlo.push(y.mlo);
        ys_cc.push(y.cc);
        ys_mv.push(y.mv);
    }
    let y_mlo = stack_logits(&mut g, &ys_mlo)?;
    let y_cc = stack_logits(&mut g, &ys_cc)?;
    let y_mv = stack_logits(&mut g, &ys_mv)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let bundle = loss_overall(&mut g, y_mlo, y_cc, y_mv, &labels, hyper)?;
    let loss = bundle.values(&g);
    if !loss.l_overall.is_finite() {
        return Err(Error::NonFinite(format!("tuning loss {loss:?}")));
    }
    let grads = g.backward(bundle.l_overall)?;
    opt.begin_step();
    let updated = apply(state, mask, &bound, &grads, |n, p, gr| opt.update(n, p, gr, lr))?;
    Ok(TuneStep { loss, updated })
}

/// One optimiser step of single-view cross-entropy on the stage-1 model.
pub fn pretrain_step(
    state: &mut ModelState<f32>,
    mask: &FreezeMask,
    cfg: &BackboneConfig,
    batch: &[SingleSample],
    opt: &mut Optimizer,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = bind(&mut g, state, mask)?;
    let mut ys = Vec::with_capacity(batch.len());
    for s in batch {
        let (_, y) = forward_backbone(&mut g, cfg, &bound, &s.image, View::Mlo, &mut NoPrompts)?;
        ys.push(y);
    }
    let y = stack_logits(&mut g, &ys)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let loss = g.cross_entropy(y, &labels)?;
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("pretraining loss {value}")));
    }
    let grads = g.backward(loss)?;
    opt.begin_step();
    apply(state, mask, &bound, &grads, |n, p, gr| opt.update(n, p, gr, lr))?;
    Ok(value)
}

fn logits_of(g: &Graph<f32>, y: Var) -> Vec<f64> {
    g.value(y).to_f64()
}

/// Stage-1 logits of one image.
pub fn infer_backbone(state: &ModelState<f32>, cfg: &BackboneConfig, image: &Tensor<f32>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, state, |_| false);
    let (_, y) = forward_backbone(&mut g, cfg, &bound, image, View::Mlo, &mut NoPrompts)?;
    Ok(logits_of(&g, y))
}

/// Stage-2 logits of one pair: `(mlo, cc, multi-view)`.
pub fn infer_pair(
    state: &ModelState<f32>,
    cfg: &BackboneConfig,
    pc: &PromptConfig,
    mlo: &Tensor<f32>,
    cc: &Tensor<f32>,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, state, |_| false);
    let m = ModelRef {
        cfg,
        prompts: pc,
        bound: &bound,
    };
    let y_mlo = forward_singleview(&mut g, m, mlo, View::Mlo)?;
    let y_cc = forward_singleview(&mut g, m, cc, View::Cc)?;
    let y_mv = forward_multiview(&mut g, m, mlo, cc)?;
    Ok((logits_of(&g, y_mlo), logits_of(&g, y_cc), logits_of(&g, y_mv)))
}
