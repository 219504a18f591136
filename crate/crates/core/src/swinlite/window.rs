//! Window bookkeeping for (shifted) window attention: which token rows
//! each window gathers, where outputs go back, and the additive masks.

use std::rc::Rc;

use crate::diffcore::graph::{MASKED, PAD_ROW};
use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

/// A view's patch tokens inside a stacked `[rows, d]` token table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewGrid {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ViewGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Lay views out back to back starting at row 0.
pub fn stack_grids(grids: &[(usize, usize)]) -> Vec<ViewGrid> {
    let mut offset = 0;
    grids
        .iter()
        .map(|&(rows, cols)| {
            let v = ViewGrid { offset, rows, cols };
            offset += v.len();
            v
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub window: usize,
    pub shift: usize,
    /// Windows over all views.
    pub groups: usize,
    /// Extra key/value rows appended to every window.
    pub extra: usize,
    /// Source row per window slot, `[groups, window² + extra]`.
    pub gather: Rc<[u32]>,
    /// For each token row, its slot in the flattened `[groups·window²]` output.
    pub scatter: Rc<[u32]>,
    /// Window slots not backed by a real token.
    pub pad_slots: usize,
    slot_region: Vec<u8>,
    slot_pad: Vec<bool>,
}

fn region(pos: usize, padded: usize, window: usize, shift: usize) -> u8 {
    if shift == 0 || pos < padded - window {
        0
    } else if pos < padded - shift {
        1
    } else {
        2
    }
}

impl WindowLayout {
    /// `extra_offset` is the first row of the `extra` shared key rows.
    pub fn new(views: &[ViewGrid], window: usize, shift: usize, extra: usize, extra_offset: usize) -> Result<Self> {
        if window == 0 || shift >= window && shift != 0 {
            return Err(Error::Config(format!("window {window} with shift {shift}")));
        }
        let area = window * window;
        let total_rows: usize = views.iter().map(|v| v.offset + v.len()).max().unwrap_or(0);
        let mut gather = Vec::new();
        let mut scatter = vec![PAD_ROW; total_rows];
        let mut slot_region = Vec::new();
        let mut slot_pad = Vec::new();
        let mut groups = 0;
        let mut pad_slots = 0;
        for v in views {
            let hp = v.rows.div_ceil(window) * window;
            let wp = v.cols.div_ceil(window) * window;
            for wr in 0..hp / window {
                for wc in 0..wp / window {
                    for i in 0..window {
                        for j in 0..window {
                            let (rs, cs) = (wr * window + i, wc * window + j);
                            let r = (rs + shift) % hp;
                            let c = (cs + shift) % wp;
                            slot_region.push(3 * region(rs, hp, window, shift) + region(cs, wp, window, shift));
                            if r < v.rows && c < v.cols {
                                let row = v.offset + r * v.cols + c;
                                scatter[row] = (groups * area + i * window + j) as u32;
                                gather.push(row as u32);
                                slot_pad.push(false);
                            } else {
                                gather.push(PAD_ROW);
                                slot_pad.push(true);
                                pad_slots += 1;
                            }
                        }
                    }
                    gather.extend((0..extra).map(|k| (extra_offset + k) as u32));
                    groups += 1;
                }
            }
        }
        Ok(WindowLayout {
            window,
            shift,
            groups,
            extra,
            gather: gather.into(),
            scatter: scatter.into(),
            pad_slots,
            slot_region,
            slot_pad,
        })
    }

    pub fn area(&self) -> usize {
        self.window * self.window
    }

    pub fn keys(&self) -> usize {
        self.area() + self.extra
    }

    /// Additive score mask `[groups, window², window² + extra]`, or `None`
    /// when nothing needs masking. Padding keys and keys from another
    /// shift region are excluded; extra rows are always visible.
    pub fn mask<S: Real>(&self) -> Option<Vec<S>> {
        if self.shift == 0 && self.pad_slots == 0 {
            return None;
        }
        let (a, l) = (self.area(), self.keys());
        let masked = S::of(MASKED);
        let mut m = vec![S::zero(); self.groups * a * l];
        for g in 0..self.groups {
            let reg = &self.slot_region[g * a..(g + 1) * a];
            let pad = &self.slot_pad[g * a..(g + 1) * a];
            for q in 0..a {
                let row = &mut m[(g * a + q) * l..(g * a + q) * l + a];
                for k in 0..a {
                    if pad[k] || reg[k] != reg[q] {
                        row[k] = masked;
                    }
                }
            }
        }
        Some(m)
    }
}

/// Split `[rows·cols, d]` tokens into zero-padded `[n_windows, window², d]`.
pub fn window_partition<S: Real>(tokens: &Tensor<S>, grid: (usize, usize), window: usize) -> Result<Tensor<S>> {
    let d = *tokens.shape().last().unwrap_or(&0);
    let views = stack_grids(&[grid]);
    if tokens.rank() != 2 || tokens.shape()[0] != views[0].len() {
        return Err(Error::Dimension {
            op: "window_partition",
            lhs: tokens.shape().to_vec(),
            rhs: vec![grid.0, grid.1],
        });
    }
    let layout = WindowLayout::new(&views, window, 0, 0, 0)?;
    let mut out = vec![S::zero(); layout.gather.len() * d];
    for (slot, &src) in layout.gather.iter().enumerate() {
        if src != PAD_ROW {
            let s = src as usize;
            out[slot * d..(slot + 1) * d].copy_from_slice(&tokens.data()[s * d..(s + 1) * d]);
        }
    }
    Tensor::new(vec![layout.groups, layout.area(), d], out)
}

/// Inverse of [`window_partition`]; padding slots are dropped.
pub fn window_reverse<S: Real>(windows: &Tensor<S>, grid: (usize, usize), window: usize) -> Result<Tensor<S>> {
    let views = stack_grids(&[grid]);
    let layout = WindowLayout::new(&views, window, 0, 0, 0)?;
    if windows.rank() != 3 || windows.shape()[0] != layout.groups || windows.shape()[1] != layout.area() {
        return Err(Error::Dimension {
            op: "window_reverse",
            lhs: windows.shape().to_vec(),
            rhs: vec![layout.groups, layout.area()],
        });
    }
    let d = windows.shape()[2];
    let mut out = vec![S::zero(); views[0].len() * d];
    for (row, &slot) in layout.scatter.iter().enumerate() {
        let s = slot as usize;
        out[row * d..(row + 1) * d].copy_from_slice(&windows.data()[s * d..(s + 1) * d]);
    }
    Tensor::new(vec![views[0].len(), d], out)
}

/// Index into a `[(2·table_window − 1)², heads]` bias table for every
/// (query, key) pair of a `window × window` block.
pub fn relative_position_index(window: usize, table_window: usize) -> Rc<[u32]> {
    let side = 2 * table_window - 1;
    let mut idx = Vec::with_capacity(window.pow(4));
    for q in 0..window * window {
        let (qi, qj) = (q / window, q % window);
        for k in 0..window * window {
            let (ki, kj) = (k / window, k % window);
            let di = qi + table_window - 1 - ki;
            let dj = qj + table_window - 1 - kj;
            idx.push((di * side + dj) as u32);
        }
    }
    idx.into()
}
