//! Two-view early fusion, single/multi-view heads and the distillation
//! objective.

pub mod losses;
pub mod train;

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::prompt::{PromptConfig, PromptInjector, Slot};
use crate::swinlite::{
    encode, head, patch_embed, pool, stack_grids, BackboneConfig, Bound, PromptFeed, Streams, Tag, TokenSequence,
    View,
};

pub use losses::{l_kd, l_md, l_md_against, loss_overall, loss_overall_with, Hyper, LossBundle, LossValues};
pub use train::{pretrain_step, tune_step, PairSample, SingleSample};

/// Everything a forward pass needs besides the graph.
#[derive(Clone, Copy)]
pub struct ModelRef<'a> {
    pub cfg: &'a BackboneConfig,
    pub prompts: &'a PromptConfig,
    pub bound: &'a Bound,
}

fn ctx_var(b: &Bound, view: View) -> Option<Var> {
    b.try_get(&format!("ctx.{}", view.name()))
}

/// Joint sequence `[P_0 + e_mlo, E_mlo + e_mlo, P_0 + e_cc, E_cc + e_cc]`. The same
/// prompt tensor fills both prompt slots unless the view-specific variant
/// is configured.
pub fn fuse_views<S: Real>(
    g: &mut Graph<S>,
    m: ModelRef<'_>,
    e_mlo: Var,
    e_cc: Var,
    grid: (usize, usize),
) -> Result<TokenSequence> {
    if g.shape(e_mlo) != g.shape(e_cc) {
        return Err(Error::Fusion(format!(
            "views disagree: mlo {:?} vs cc {:?}",
            g.shape(e_mlo),
            g.shape(e_cc)
        )));
    }
    let s = g.shape(e_mlo).to_vec();
    if s.len() != 2 || s[0] != grid.0 * grid.1 {
        return Err(Error::Fusion(format!("tokens {s:?} do not fill a {}×{} grid", grid.0, grid.1)));
    }
    let slots: Vec<Slot> = View::BOTH
        .iter()
        .map(|&view| Slot {
            view,
            ctx: ctx_var(m.bound, view),
        })
        .collect();
    let mut parts = Vec::new();
    let mut tags = Vec::new();
    for (slot, e) in slots.iter().zip([e_mlo, e_cc]) {
        let mut feed = PromptInjector::new(m.bound, m.cfg, m.prompts, vec![*slot]);
        if let Some(p) = feed.inject(g, 0)? {
            if g.shape(p)[1] != s[1] {
                return Err(Error::Fusion(format!("prompt width {} vs token width {}", g.shape(p)[1], s[1])));
            }
            tags.extend(std::iter::repeat_n(Tag::Prompt, g.shape(p)[0]));
            parts.push(p);
        }
        let e = match slot.ctx {
            Some(c) => g.add(e, c)?,
            None => e,
        };
        tags.extend(std::iter::repeat_n(Tag::Patch(slot.view), s[0]));
        parts.push(e);
    }
    Ok(TokenSequence {
        tokens: g.concat_rows(&parts)?,
        tags,
        grid,
    })
}

/// Split a joint sequence into stacked patch rows and prompt rows.
fn to_streams<S: Real>(g: &mut Graph<S>, seq: &TokenSequence) -> Result<Streams> {
    let mut patches = Vec::new();
    let mut prompts = Vec::new();
    let mut grids = Vec::new();
    let mut i = 0;
    while i < seq.tags.len() {
        let tag = seq.tags[i];
        let run = seq.tags[i..].iter().take_while(|&&t| t == tag).count();
        let rows = g.slice_rows(seq.tokens, i, run)?;
        match tag {
            Tag::Prompt => prompts.push(rows),
            Tag::Patch(_) => {
                patches.push(rows);
                grids.push(seq.grid);
            }
        }
        i += run;
    }
    Ok(Streams {
        patches: g.concat_rows(&patches)?,
        views: stack_grids(&grids),
        prompts: if prompts.is_empty() {
            None
        } else {
            Some(g.concat_rows(&prompts)?)
        },
    })
}

/// Encoder feed that leaves layer 0 to prompts already placed in the
/// fused sequence.
struct AfterFusion<'a>(PromptInjector<'a>);

impl<S: Real> PromptFeed<S> for AfterFusion<'_> {
    fn inject(&mut self, g: &mut Graph<S>, layer: usize) -> Result<Option<Var>> {
        if layer == 0 {
            Ok(None)
        } else {
            self.0.inject(g, layer)
        }
    }

    fn replaces(&self, layer: usize) -> bool {
        PromptFeed::<S>::replaces(&self.0, layer)
    }
}

/// Prompted single-view logits with the view's context encoding.
pub fn forward_singleview<S: Real>(g: &mut Graph<S>, m: ModelRef<'_>, image: &Tensor<S>, view: View) -> Result<Var> {
    let x = patch_embed(g, m.cfg, m.bound, image)?;
    let ctx = ctx_var(m.bound, view);
    let x = match ctx {
        Some(c) => g.add(x, c)?,
        None => x,
    };
    let st = Streams {
        patches: x,
        views: stack_grids(&[m.cfg.stage_grid(0)]),
        prompts: None,
    };
    let mut feed = PromptInjector::new(m.bound, m.cfg, m.prompts, vec![Slot { view, ctx }]);
    let st = encode(g, m.cfg, m.bound, st, &mut feed)?;
    let pooled = pool(g, &st, None)?;
    head(g, m.bound, "single", pooled)
}

/// Joint encoding of both views, multi-view head on the mean of
/// all final patch tokens.
pub fn forward_multiview<S: Real>(g: &mut Graph<S>, m: ModelRef<'_>, mlo: &Tensor<S>, cc: &Tensor<S>) -> Result<Var> {
    let e_mlo = patch_embed(g, m.cfg, m.bound, mlo)?;
    let e_cc = patch_embed(g, m.cfg, m.bound, cc)?;
    let joint = fuse_views(g, m, e_mlo, e_cc, m.cfg.stage_grid(0))?;
    let st = to_streams(g, &joint)?;
    let slots = View::BOTH
        .iter()
        .map(|&view| Slot {
            view,
            ctx: ctx_var(m.bound, view),
        })
        .collect();
    let mut feed = AfterFusion(PromptInjector::new(m.bound, m.cfg, m.prompts, slots));
    let st = encode(g, m.cfg, m.bound, st, &mut feed)?;
    let pooled = pool(g, &st, None)?;
    head(g, m.bound, "multi", pooled)
}

/// The three predictions of one pair.
#[derive(Clone, Copy, Debug)]
pub struct PairLogits {
    pub mlo: Var,
    pub cc: Var,
    pub mv: Var,
}

pub fn forward_pair<S: Real>(g: &mut Graph<S>, m: ModelRef<'_>, mlo: &Tensor<S>, cc: &Tensor<S>) -> Result<PairLogits> {
    Ok(PairLogits {
        mlo: forward_singleview(g, m, mlo, View::Mlo)?,
        cc: forward_singleview(g, m, cc, View::Cc)?,
        mv: forward_multiview(g, m, mlo, cc)?,
    })
}
