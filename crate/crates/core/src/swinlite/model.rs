//! Forward pass of the backbone on a [`Graph`].

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

use super::config::BackboneConfig;
use super::state::{block_prefix, Bound};
use super::window::{relative_position_index, stack_grids, ViewGrid, WindowLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Mlo,
    Cc,
}

impl View {
    pub const BOTH: [View; 2] = [View::Mlo, View::Cc];

    pub fn name(self) -> &'static str {
        match self {
            View::Mlo => "mlo",
            View::Cc => "cc",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "mlo" => Ok(View::Mlo),
            "cc" => Ok(View::Cc),
            other => Err(Error::Contract(format!("unknown view tag `{other}`"))),
        }
    }
}

/// Provenance of a token row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag {
    Prompt,
    Patch(View),
}

/// Token rows with a provenance tag each and the patch grid per view.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub tags: Vec<Tag>,
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn count(&self, tag: Tag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }
}

/// Working layout between layers: stacked patch rows of one or more views
/// plus the prompt rows currently carried (if any).
#[derive(Clone, Debug)]
pub struct Streams {
    pub patches: Var,
    pub views: Vec<ViewGrid>,
    pub prompts: Option<Var>,
}

impl Streams {
    pub fn patch_rows(&self) -> usize {
        self.views.iter().map(ViewGrid::len).sum()
    }
}

/// Supplies prompt rows to the encoder, one call per layer.
pub trait PromptFeed<S: Real> {
    /// Fresh rows `[P, d_layer]` for `layer`, or `None` to keep what is carried.
    fn inject(&mut self, g: &mut Graph<S>, layer: usize) -> Result<Option<Var>>;

    /// Whether [`PromptFeed::inject`] will return rows at `layer`.
    fn replaces(&self, layer: usize) -> bool;
}

/// The prompt-free feed used by the stage-1 model.
pub struct NoPrompts;

impl<S: Real> PromptFeed<S> for NoPrompts {
    fn inject(&mut self, _: &mut Graph<S>, _: usize) -> Result<Option<Var>> {
        Ok(None)
    }

    fn replaces(&self, _: usize) -> bool {
        true
    }
}

fn linear<S: Real>(g: &mut Graph<S>, b: &Bound, prefix: &str, x: Var, bias: bool) -> Result<Var> {
    let w = b.get(&format!("{prefix}.weight"))?;
    let bb = if bias {
        Some(b.get(&format!("{prefix}.bias"))?)
    } else {
        None
    };
    g.linear(x, w, bb)
}

fn norm<S: Real>(g: &mut Graph<S>, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{prefix}.weight"))?;
    let bb = b.get(&format!("{prefix}.bias"))?;
    g.layer_norm(x, w, bb)
}

/// Image `[C, H, W]` (or `[H, W]`) to non-overlapping patch rows
/// `[m, C·ph·pw]`, row-major over the patch grid.
pub fn im2col<S: Real>(cfg: &BackboneConfig, image: &Tensor<S>) -> Result<Tensor<S>> {
    let [h, w] = cfg.image_size;
    let c = cfg.in_channels;
    if image.numel() != c * h * w || !(image.rank() == 3 || (image.rank() == 2 && c == 1)) {
        return Err(Error::Config(format!(
            "image of shape {:?} does not match {c}×{h}×{w}",
            image.shape()
        )));
    }
    let [ph, pw] = cfg.patch_size;
    let (gh, gw) = (h / ph, w / pw);
    let src = image.data();
    let pd = cfg.patch_dim();
    let mut out = vec![S::zero(); gh * gw * pd];
    for gr in 0..gh {
        for gc in 0..gw {
            let row = &mut out[(gr * gw + gc) * pd..(gr * gw + gc + 1) * pd];
            for ch in 0..c {
                for i in 0..ph {
                    let s = ch * h * w + (gr * ph + i) * w + gc * pw;
                    row[(ch * ph + i) * pw..(ch * ph + i + 1) * pw].copy_from_slice(&src[s..s + pw]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, pd], out)
}

/// Patch rows through the linear projection only (no norm).
pub fn patch_project<S: Real>(g: &mut Graph<S>, cfg: &BackboneConfig, b: &Bound, image: &Tensor<S>) -> Result<Var> {
    let cols = g.constant(im2col(cfg, image)?);
    linear(g, b, "backbone.patch_embed.proj", cols, true)
}

/// Linear patch embedding followed by LayerNorm, `[m, d0]`.
pub fn patch_embed<S: Real>(g: &mut Graph<S>, cfg: &BackboneConfig, b: &Bound, image: &Tensor<S>) -> Result<Var> {
    let x = patch_project(g, cfg, b, image)?;
    if !cfg.patch_norm {
        return Ok(x);
    }
    norm(g, b, "backbone.patch_embed.norm", x)
}

/// Attention weights of one block.
pub struct AttnWeights {
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub bias_table: Option<Var>,
    /// Window side the bias table was built for.
    pub table_window: usize,
}

impl AttnWeights {
    pub fn bind(b: &Bound, prefix: &str, cfg: &BackboneConfig) -> Result<Self> {
        Ok(AttnWeights {
            qkv_w: b.get(&format!("{prefix}.attn.qkv.weight"))?,
            qkv_b: b.get(&format!("{prefix}.attn.qkv.bias"))?,
            proj_w: b.get(&format!("{prefix}.attn.proj.weight"))?,
            proj_b: b.get(&format!("{prefix}.attn.proj.bias"))?,
            bias_table: if cfg.use_relative_position_bias {
                Some(b.get(&format!("{prefix}.attn.relative_position_bias_table"))?)
            } else {
                None
            },
            table_window: cfg.window_size,
        })
    }
}

/// Windowed attention core: per-window heads over the window's tokens plus
/// all prompt rows, projected. When `prompt_queries` is set, prompt rows
/// also act as queries over every token and their outputs are returned.
#[allow(clippy::too_many_arguments)]
fn attend<S: Real>(
    g: &mut Graph<S>,
    x: Var,
    views: &[ViewGrid],
    prompt_kv: Option<Var>,
    heads: usize,
    window: usize,
    shift: usize,
    w: &AttnWeights,
    prompt_queries: bool,
) -> Result<(Var, Option<Var>)> {
    let m: usize = views.iter().map(ViewGrid::len).sum();
    let d = g.shape(x)[1];
    if d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let n_prompt = prompt_kv.map_or(0, |p| g.shape(p)[0]);
    let all = match prompt_kv {
        Some(p) => g.concat_rows(&[x, p])?,
        None => x,
    };
    let qkv = g.linear(all, w.qkv_w, Some(w.qkv_b))?;
    let layout = WindowLayout::new(views, window, shift, n_prompt, m)?;
    let packed = g.gather_rows(qkv, layout.gather.clone(), &[layout.groups, layout.keys()])?;
    let mask = layout.mask::<S>();
    let bias = match w.bias_table {
        Some(table) => {
            let idx = relative_position_index(window, w.table_window);
            let area = layout.area();
            Some(g.gather_rows(table, idx, &[area, area])?)
        }
        None => None,
    };
    let att = g.attention(packed, layout.area(), heads, mask.as_deref(), bias)?;
    let flat = g.reshape(att, &[layout.groups * layout.area(), d])?;
    let patches = g.gather_rows(flat, layout.scatter.clone(), &[m])?;
    let patches = g.linear(patches, w.proj_w, Some(w.proj_b))?;
    let prompts = if prompt_queries && n_prompt > 0 {
        let order: Rc<[u32]> = (m..m + n_prompt).chain(0..m).map(|i| i as u32).collect();
        let packed = g.gather_rows(qkv, order, &[1, m + n_prompt])?;
        let att = g.attention(packed, n_prompt, heads, None, None)?;
        let att = g.reshape(att, &[n_prompt, d])?;
        Some(g.linear(att, w.proj_w, Some(w.proj_b))?)
    } else {
        None
    };
    Ok((patches, prompts))
}

/// Attention sub-layer: (shifted) window multi-head self-attention
/// over `x` (`[m, d]`, views stacked), with optional prompt rows joining
/// every window's keys and values. Returns the projected patch outputs.
#[allow(clippy::too_many_arguments)]
pub fn w_msa<S: Real>(
    g: &mut Graph<S>,
    x: Var,
    views: &[ViewGrid],
    prompt_kv: Option<Var>,
    heads: usize,
    window: usize,
    shift: usize,
    w: &AttnWeights,
) -> Result<Var> {
    Ok(attend(g, x, views, prompt_kv, heads, window, shift, w, false)?.0)
}

/// One transformer layer. Prompt rows are attention context; their own
/// outputs are computed only when `carry` asks for them.
fn block<S: Real>(
    g: &mut Graph<S>,
    cfg: &BackboneConfig,
    b: &Bound,
    stage: usize,
    index: usize,
    st: Streams,
    carry: bool,
) -> Result<Streams> {
    let prefix = block_prefix(stage, index);
    let grid = (st.views[0].rows, st.views[0].cols);
    let (window, shift) = cfg.window_for(grid, index);
    let weights = AttnWeights::bind(b, &prefix, cfg)?;
    let m = st.patch_rows();
    let carry = carry && st.prompts.is_some();

    let all = match st.prompts {
        Some(p) => g.concat_rows(&[st.patches, p])?,
        None => st.patches,
    };
    let h = norm(g, b, &format!("{prefix}.norm1"), all)?;
    let (hx, hp) = match st.prompts {
        Some(p) => {
            let n = g.shape(p)[0];
            (g.slice_rows(h, 0, m)?, Some(g.slice_rows(h, m, n)?))
        }
        None => (h, None),
    };
    let (att_x, att_p) = attend(g, hx, &st.views, hp, cfg.heads[stage], window, shift, &weights, carry)?;
    let (base, att) = match att_p {
        Some(ap) => (all, g.concat_rows(&[att_x, ap])?),
        None => (st.patches, att_x),
    };
    let y = g.add(base, att)?;
    let z = norm(g, b, &format!("{prefix}.norm2"), y)?;
    let z = linear(g, b, &format!("{prefix}.mlp.fc1"), z, true)?;
    let z = g.gelu(z);
    let z = linear(g, b, &format!("{prefix}.mlp.fc2"), z, true)?;
    let out = g.add(y, z)?;

    if carry {
        let n = g.shape(st.prompts.expect("carry implies prompts"))[0];
        Ok(Streams {
            patches: g.slice_rows(out, 0, m)?,
            views: st.views,
            prompts: Some(g.slice_rows(out, m, n)?),
        })
    } else {
        Ok(Streams {
            patches: out,
            views: st.views,
            prompts: None,
        })
    }
}

/// Gather order of the 2×2 source block of merged token `(i, j)`.
const MERGE_ORDER: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// Row indices `[m/4, 4]` feeding each merged token, views kept separate.
pub fn merge_index(views: &[ViewGrid]) -> Result<(Rc<[u32]>, Vec<(usize, usize)>)> {
    let mut idx = Vec::new();
    let mut grids = Vec::new();
    for v in views {
        if v.rows % 2 != 0 || v.cols % 2 != 0 {
            return Err(Error::Config(format!(
                "patch merging needs even grid sides, got {}×{}",
                v.rows, v.cols
            )));
        }
        for i in 0..v.rows / 2 {
            for j in 0..v.cols / 2 {
                for (di, dj) in MERGE_ORDER {
                    idx.push((v.offset + (2 * i + di) * v.cols + 2 * j + dj) as u32);
                }
            }
        }
        grids.push((v.rows / 2, v.cols / 2));
    }
    Ok((idx.into(), grids))
}

/// Halve each view's grid and double the width; prompts are dropped.
pub fn patch_merging<S: Real>(g: &mut Graph<S>, b: &Bound, stage: usize, st: Streams) -> Result<Streams> {
    let d = g.shape(st.patches)[1];
    let (idx, grids) = merge_index(&st.views)?;
    let quarter = idx.len() / 4;
    let x = g.gather_rows(st.patches, idx, &[quarter, 4])?;
    let x = g.reshape(x, &[quarter, 4 * d])?;
    let x = norm(g, b, &format!("backbone.stages.{stage}.merge.norm"), x)?;
    let x = linear(g, b, &format!("backbone.stages.{stage}.merge.reduction"), x, false)?;
    Ok(Streams {
        patches: x,
        views: stack_grids(&grids),
        prompts: None,
    })
}

/// Run every stage over `st`, asking `feed` for prompts before each
/// layer, then apply the final norm. Returns final patch rows.
pub fn encode<S: Real>(
    g: &mut Graph<S>,
    cfg: &BackboneConfig,
    b: &Bound,
    mut st: Streams,
    feed: &mut dyn PromptFeed<S>,
) -> Result<Streams> {
    let mut layer = 0;
    for stage in 0..cfg.num_stages() {
        for index in 0..cfg.depths[stage] {
            if let Some(p) = feed.inject(g, layer)? {
                let width = g.shape(p).get(1).copied();
                if width != Some(cfg.stage_dim(stage)) {
                    return Err(Error::Config(format!(
                        "layer {layer} prompts have shape {:?}, width {} expected",
                        g.shape(p),
                        cfg.stage_dim(stage)
                    )));
                }
                st.prompts = Some(p);
            }
            let last_in_stage = index + 1 == cfg.depths[stage];
            let carry = !last_in_stage && !feed.replaces(layer + 1);
            st = block(g, cfg, b, stage, index, st, carry)?;
            layer += 1;
        }
        if stage + 1 < cfg.num_stages() {
            st = patch_merging(g, b, stage, st)?;
        }
    }
    st.prompts = None;
    st.patches = norm(g, b, "backbone.norm", st.patches)?;
    Ok(st)
}

/// Mean over the patch rows of one view, or of all views when `view` is `None`.
pub fn pool<S: Real>(g: &mut Graph<S>, st: &Streams, view: Option<usize>) -> Result<Var> {
    match view {
        None => g.mean_rows(st.patches),
        Some(v) => {
            let vg = st.views[v];
            let rows = g.slice_rows(st.patches, vg.offset, vg.len())?;
            g.mean_rows(rows)
        }
    }
}

/// Logits `[num_classes]` from pooled features `[d]`.
pub fn head<S: Real>(g: &mut Graph<S>, b: &Bound, which: &str, pooled: Var) -> Result<Var> {
    let d = g.shape(pooled)[0];
    let x = g.reshape(pooled, &[1, d])?;
    let y = linear(g, b, &format!("head.{which}"), x, true)?;
    let c = g.shape(y)[1];
    g.reshape(y, &[c])
}

/// Stage-1 model on one image: returns the final patch sequence and logits.
pub fn forward_backbone<S: Real>(
    g: &mut Graph<S>,
    cfg: &BackboneConfig,
    b: &Bound,
    image: &Tensor<S>,
    view: View,
    feed: &mut dyn PromptFeed<S>,
) -> Result<(TokenSequence, Var)> {
    let x = patch_embed(g, cfg, b, image)?;
    let st = Streams {
        patches: x,
        views: stack_grids(&[cfg.stage_grid(0)]),
        prompts: None,
    };
    let st = encode(g, cfg, b, st, feed)?;
    let pooled = pool(g, &st, None)?;
    let logits = head(g, b, "single", pooled)?;
    let grid = (st.views[0].rows, st.views[0].cols);
    Ok((
        TokenSequence {
            tokens: st.patches,
            tags: vec![Tag::Patch(view); grid.0 * grid.1],
            grid,
        },
        logits,
    ))
}
