use std::cell::Cell;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::real::{gemm, Mat, Real};
use super::tensor::Tensor;

/// LayerNorm variance floor.
pub const LN_EPS: f64 = 1e-5;
/// Lower clamp applied to the second KL argument.
pub const KL_EPS: f64 = 1e-8;
/// Additive score used to exclude a key from attention.
pub const MASKED: f64 = -1e9;
/// Marks an output row of [`Graph::gather_rows`] as zero fill.
pub const PAD_ROW: u32 = u32::MAX;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Detach,
    MatMul,
    Linear,
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    Mean,
    MeanRows,
    Reshape,
    ConcatRows,
    SliceRows,
    GatherRows,
    LayerNorm,
    Gelu,
    Softmax,
    LogSoftmax,
    CrossEntropy,
    KlDiv,
    Attention,
}

impl OpKind {
    /// Every op with a backward rule.
    pub const DIFFERENTIABLE: [OpKind; 20] = [
        OpKind::MatMul,
        OpKind::Linear,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanRows,
        OpKind::Reshape,
        OpKind::ConcatRows,
        OpKind::SliceRows,
        OpKind::GatherRows,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::CrossEntropy,
        OpKind::KlDiv,
        OpKind::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Detach => "detach",
            OpKind::MatMul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanRows => "mean_rows",
            OpKind::Reshape => "reshape",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceRows => "slice_rows",
            OpKind::GatherRows => "gather_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::KlDiv => "kl_div",
            OpKind::Attention => "attention",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::DIFFERENTIABLE
            .iter()
            .chain([OpKind::Leaf, OpKind::Detach].iter())
            .copied()
            .find(|k| k.name() == name)
    }
}

thread_local! {
    static SIGN_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Flip the sign of every gradient produced by one op kind on this thread.
/// Only meant for mutation-testing the gradient checker.
pub fn inject_sign_fault(kind: Option<OpKind>) {
    SIGN_FAULT.with(|f| f.set(kind));
}

pub fn injected_sign_fault() -> Option<OpKind> {
    SIGN_FAULT.with(|f| f.get())
}

enum Op<S> {
    Leaf,
    Detach,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: S,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    MeanRows {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Reshape {
        a: Var,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        a: Var,
        offset: usize,
    },
    GatherRows {
        a: Var,
        index: Rc<[u32]>,
        row_len: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    KlDiv {
        p: Var,
        q: Var,
        rows: usize,
    },
    Attention {
        qkv: Var,
        groups: usize,
        len: usize,
        nq: usize,
        heads: usize,
        dim: usize,
        bias: Option<Var>,
        probs: Vec<S>,
    },
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Detach => OpKind::Detach,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::MeanRows { .. } => OpKind::MeanRows,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::ConcatRows { .. } => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::KlDiv { .. } => OpKind::KlDiv,
            Op::Attention { .. } => OpKind::Attention,
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to the learnable leaves.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of leaves holding a gradient.
    pub fn count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

/// Append-only tape of tensor operations. Nodes are created in
/// topological order, so the reverse sweep is a single backwards scan.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    kl_saturations: usize,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_row<S: Real>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = S::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn batch_of(shape: &[usize]) -> usize {
    shape[..shape.len() - 2].iter().product()
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            kl_saturations: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// True once any KL evaluation had to clamp its second argument.
    pub fn kl_saturated(&self) -> bool {
        self.kl_saturations > 0
    }

    pub fn kl_saturation_count(&self) -> usize {
        self.kl_saturations
    }

    /// Same value, cut off from gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let dim_err = || Error::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(dim_err());
        }
        let a_batched = sa.len() > 2;
        let b_batched = sb.len() > 2;
        let batch_shape = match (a_batched, b_batched) {
            (true, true) => {
                if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                    return Err(dim_err());
                }
                sa[..sa.len() - 2].to_vec()
            }
            (true, false) => sa[..sa.len() - 2].to_vec(),
            (false, true) => sb[..sb.len() - 2].to_vec(),
            (false, false) => vec![],
        };
        let batch = if a_batched { batch_of(&sa) } else { batch_of(&sb) };
        let mut out_shape = batch_shape;
        out_shape.extend([m, n]);
        let mut out = vec![S::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                let ao = if a_batched { i * m * k } else { 0 };
                let bo = if b_batched { i * k * n } else { 0 };
                gemm(
                    m,
                    k,
                    n,
                    av,
                    Mat::rows(ao, k),
                    bv,
                    Mat::rows(bo, n),
                    &mut out,
                    Mat::rows(i * m * n, n),
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            },
            rg,
        ))
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[din, dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[0] {
            return Err(Error::Dimension {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::Dimension {
                    op: "linear bias",
                    lhs: vec![dout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = self.value(x).numel() / din;
        let mut out = vec![S::zero(); rows * dout];
        gemm(
            rows,
            din,
            dout,
            self.value(x).data(),
            Mat::rows(0, din),
            self.value(w).data(),
            Mat::rows(0, dout),
            &mut out,
            Mat::rows(0, dout),
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
            rg,
        ))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise sum; `b` may be a trailing-suffix broadcast of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let bn = bv.len();
        let data: Vec<S> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % bn])
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("sub", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let bn = bv.len();
        let data: Vec<S> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x - bv[i % bn])
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, c }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: S = v.data().iter().copied().sum();
        let n = S::from_usize(v.numel()).unwrap();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s / n), Op::Mean { a }, rg)
    }

    /// Mean over every axis but the last: `[.., d] -> [d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() < 2 || v.numel() == 0 {
            return Err(Error::Dimension {
                op: "mean_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let cols = *v.shape().last().unwrap();
        let rows = v.numel() / cols;
        let mut out = vec![S::zero(); cols];
        for row in v.data().chunks(cols) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = S::one() / S::from_usize(rows).unwrap();
        for o in out.iter_mut() {
            *o *= inv;
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![cols], out)?,
            Op::MeanRows { a, rows, cols },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Concatenate along axis 0; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Rows `start..start + len` of axis 0.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: s,
                rhs: vec![start, len],
            });
        }
        let row: usize = s[1..].iter().product();
        let data = self.value(a).data()[start * row..(start + len) * row].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::SliceRows {
                a,
                offset: start * row,
            },
            rg,
        ))
    }

    /// Select rows (vectors along the last axis) of `a` by index;
    /// [`PAD_ROW`] yields a zero row. Output shape is `leading ++ [row_len]`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[u32]>, leading: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let row_len = *s.last().ok_or_else(|| Error::Dimension {
            op: "gather_rows",
            lhs: s.clone(),
            rhs: leading.to_vec(),
        })?;
        let n_rows = if row_len == 0 { 0 } else { self.value(a).numel() / row_len };
        if leading.iter().product::<usize>() != index.len() {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: leading.to_vec(),
                rhs: vec![index.len()],
            });
        }
        let src = self.value(a).data();
        let mut data = vec![S::zero(); index.len() * row_len];
        for (o, &i) in index.iter().enumerate() {
            if i == PAD_ROW {
                continue;
            }
            let i = i as usize;
            if i >= n_rows {
                return Err(Error::Index(format!(
                    "gather_rows index {i} out of {n_rows} rows"
                )));
            }
            data[o * row_len..(o + 1) * row_len]
                .copy_from_slice(&src[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = leading.to_vec();
        shape.push(row_len);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::GatherRows { a, index, row_len },
            rg,
        ))
    }

    /// Normalise the last axis to zero mean and unit variance, then apply
    /// the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: sx,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps = S::of(LN_EPS);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let inv_d = S::one() / S::from_usize(d).unwrap();
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv_d;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| gelu_fwd(x)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Gelu { a }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let c = *v.shape().last().ok_or_else(|| Error::Dimension {
            op: "softmax",
            lhs: vec![],
            rhs: vec![],
        })?;
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_row(row);
        }
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax { a }, rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let c = *v.shape().last().ok_or_else(|| Error::Dimension {
            op: "log_softmax",
            lhs: vec![],
            rhs: vec![],
        })?;
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::LogSoftmax { a }, rg))
    }

    /// `softmax(t / tau)` over the last axis.
    pub fn softmax_temp(&mut self, t: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
        }
        let scaled = self.scale(t, S::of(1.0 / tau));
        self.softmax(scaled)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} outside 0..{c}")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = S::zero();
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
            total += lse - row[label];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = total / S::from_usize(labels.len()).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `D_KL(p || q)` summed over the last axis and averaged over rows.
    /// Entries of `q` below [`KL_EPS`] are clamped and counted as
    /// saturation events.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let sp = self.shape(p).to_vec();
        if sp != self.shape(q) || sp.is_empty() {
            return Err(Error::Dimension {
                op: "kl_div",
                lhs: sp,
                rhs: self.shape(q).to_vec(),
            });
        }
        let c = *sp.last().unwrap();
        let pv = self.value(p).data();
        let qv = self.value(q).data();
        for (name, v) in [("p", pv), ("q", qv)] {
            for row in v.chunks(c) {
                let sum: f64 = row.iter().map(|x| x.as_f64()).sum();
                if row.iter().any(|x| x.as_f64() < 0.0) || (sum - 1.0).abs() > 1e-5 {
                    return Err(Error::Domain(format!(
                        "kl_div argument {name} is not on the simplex (row sum {sum})"
                    )));
                }
            }
        }
        let eps = S::of(KL_EPS);
        let rows = pv.len() / c;
        let mut total = S::zero();
        let mut saturated = 0;
        for (&pi, &qi) in pv.iter().zip(qv) {
            if pi > S::zero() {
                let qc = if qi < eps {
                    saturated += 1;
                    eps
                } else {
                    qi
                };
                total += pi * (pi.ln() - qc.ln());
            }
        }
        self.kl_saturations += saturated;
        let value = total / S::from_usize(rows).unwrap();
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(Tensor::scalar(value), Op::KlDiv { p, q, rows }, rg))
    }

    /// Grouped multi-head attention on a packed `[groups, len, 3·dim]`
    /// query/key/value tensor. The first `nq` rows of each group are
    /// queries; all `len` rows are keys and values. `mask` is an additive
    /// score table of shape `[groups, nq, len]` or `[nq, len]`; `bias`
    /// (shape `[nq, nq, heads]`) is added to the scores of the first `nq`
    /// keys. Returns `[groups, nq, dim]`.
    pub fn attention(
        &mut self,
        qkv: Var,
        nq: usize,
        heads: usize,
        mask: Option<&[S]>,
        bias: Option<Var>,
    ) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 3 || s[2] % 3 != 0 || nq > s[1] {
            return Err(Error::Dimension {
                op: "attention",
                lhs: s,
                rhs: vec![nq, heads],
            });
        }
        let (groups, len, dim) = (s[0], s[1], s[2] / 3);
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        let per_group = nq * len;
        if let Some(m) = mask {
            if m.len() != groups * per_group && m.len() != per_group {
                return Err(Error::Dimension {
                    op: "attention mask",
                    lhs: vec![groups, nq, len],
                    rhs: vec![m.len()],
                });
            }
        }
        if let Some(b) = bias {
            if self.shape(b) != [nq, nq, heads] {
                return Err(Error::Dimension {
                    op: "attention bias",
                    lhs: vec![nq, nq, heads],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let hd = dim / heads;
        let scale = S::one() / S::from_usize(hd).unwrap().sqrt();
        let x = self.value(qkv).data();
        let bias_v = bias.map(|b| self.value(b).data());
        let mut out = vec![S::zero(); groups * nq * dim];
        let mut probs = vec![S::zero(); groups * heads * per_group];
        for g in 0..groups {
            let base = g * len * 3 * dim;
            let mask_g = mask.map(|m| {
                if m.len() == per_group {
                    m
                } else {
                    &m[g * per_group..(g + 1) * per_group]
                }
            });
            for h in 0..heads {
                let po = (g * heads + h) * per_group;
                gemm(
                    nq,
                    hd,
                    len,
                    x,
                    Mat::rows(base + h * hd, 3 * dim),
                    x,
                    Mat::cols(base + dim + h * hd, 3 * dim),
                    &mut probs,
                    Mat::rows(po, len),
                    false,
                );
                let block = &mut probs[po..po + per_group];
                for i in 0..nq {
                    let row = &mut block[i * len..(i + 1) * len];
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                    if let Some(m) = mask_g {
                        for (v, &mm) in row.iter_mut().zip(&m[i * len..(i + 1) * len]) {
                            *v += mm;
                        }
                    }
                    if let Some(bv) = bias_v {
                        for (j, v) in row[..nq].iter_mut().enumerate() {
                            *v += bv[(i * nq + j) * heads + h];
                        }
                    }
                    softmax_row(row);
                }
                gemm(
                    nq,
                    len,
                    hd,
                    &probs,
                    Mat::rows(po, len),
                    x,
                    Mat::rows(base + 2 * dim + h * hd, 3 * dim),
                    &mut out,
                    Mat::rows(g * nq * dim + h * hd, dim),
                    false,
                );
            }
        }
        let rg = self.rg(qkv) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![groups, nq, dim], out)?,
            Op::Attention {
                qkv,
                groups,
                len,
                nq,
                heads,
                dim,
                bias,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root. Only leaves created with
    /// `requires_grad = true` receive a gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        let numel = self.value(root).numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_with(root, &[S::one()])
    }

    /// Vector-Jacobian product: propagate `seed` (same size as `root`)
    /// back to the learnable leaves.
    pub fn backward_with(&self, root: Var, seed: &[S]) -> Result<Gradients<S>> {
        if seed.len() != self.value(root).numel() {
            return Err(Error::Dimension {
                op: "backward seed",
                lhs: self.shape(root).to_vec(),
                rhs: vec![seed.len()],
            });
        }
        let fault = injected_sign_fault();
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        let mut leaves: Vec<Option<Tensor<S>>> = Vec::with_capacity(root.0 + 1);
        leaves.resize_with(root.0 + 1, || None);
        if self.rg(root) {
            grads[root.0] = Some(seed.to_vec());
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                    continue;
                }
                Op::Detach => continue,
                op => {
                    if fault == Some(op.kind()) {
                        for v in g.iter_mut() {
                            *v = -*v;
                        }
                    }
                    self.propagate(op, &node.value, &g, &mut grads);
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<S>>], v: Var) -> Option<&'a mut Vec<S>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
    }

    fn propagate(&self, op: &Op<S>, out: &Tensor<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match op {
            Op::Leaf | Op::Detach => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(da) = self.slot(grads, a) {
                    for i in 0..batch {
                        let ao = if a_batched { i * m * k } else { 0 };
                        let bo = if b_batched { i * k * n } else { 0 };
                        gemm(
                            m,
                            n,
                            k,
                            g,
                            Mat::rows(i * m * n, n),
                            bv,
                            Mat::cols(bo, n),
                            da,
                            Mat::rows(ao, k),
                            true,
                        );
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for i in 0..batch {
                        let ao = if a_batched { i * m * k } else { 0 };
                        let bo = if b_batched { i * k * n } else { 0 };
                        gemm(
                            k,
                            m,
                            n,
                            av,
                            Mat::cols(ao, k),
                            g,
                            Mat::rows(i * m * n, n),
                            db,
                            Mat::rows(bo, n),
                            true,
                        );
                    }
                }
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                if let Some(dx) = self.slot(grads, x) {
                    gemm(
                        rows,
                        dout,
                        din,
                        g,
                        Mat::rows(0, dout),
                        self.value(w).data(),
                        Mat::cols(0, dout),
                        dx,
                        Mat::rows(0, din),
                        true,
                    );
                }
                if let Some(dw) = self.slot(grads, w) {
                    gemm(
                        din,
                        rows,
                        dout,
                        self.value(x).data(),
                        Mat::cols(0, din),
                        g,
                        Mat::rows(0, dout),
                        dw,
                        Mat::rows(0, dout),
                        true,
                    );
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, b) {
                        for row in g.chunks(dout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let sign = if matches!(op, Op::Sub { .. }) {
                    -S::one()
                } else {
                    S::one()
                };
                if let Some(da) = self.slot(grads, a) {
                    for (d, &v) in da.iter_mut().zip(g) {
                        *d += v;
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    let bn = db.len();
                    for (i, &v) in g.iter().enumerate() {
                        db[i % bn] += sign * v;
                    }
                }
            }
            &Op::Mul { a, b } => {
                let bv = self.value(b).data();
                if let Some(da) = self.slot(grads, a) {
                    for ((d, &v), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += v * y;
                    }
                }
                let av = self.value(a).data();
                if let Some(db) = self.slot(grads, b) {
                    for ((d, &v), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += v * x;
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(da) = self.slot(grads, a) {
                    for (d, &v) in da.iter_mut().zip(g) {
                        *d += c * v;
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(da) = self.slot(grads, a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::Mean { a } => {
                if let Some(da) = self.slot(grads, a) {
                    let v = g[0] / S::from_usize(da.len()).unwrap();
                    for d in da.iter_mut() {
                        *d += v;
                    }
                }
            }
            &Op::MeanRows { a, rows, cols } => {
                if let Some(da) = self.slot(grads, a) {
                    let inv = S::one() / S::from_usize(rows).unwrap();
                    for row in da.chunks_mut(cols) {
                        for (d, &v) in row.iter_mut().zip(g) {
                            *d += v * inv;
                        }
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(da) = self.slot(grads, a) {
                    for (d, &v) in da.iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(dp) = self.slot(grads, p) {
                        for (d, &v) in dp.iter_mut().zip(&g[offset..offset + n]) {
                            *d += v;
                        }
                    }
                    offset += n;
                }
            }
            &Op::SliceRows { a, offset } => {
                if let Some(da) = self.slot(grads, a) {
                    for (d, &v) in da[offset..offset + g.len()].iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::GatherRows { a, index, row_len } => {
                let row_len = *row_len;
                if let Some(da) = self.slot(grads, *a) {
                    for (o, &i) in index.iter().enumerate() {
                        if i == PAD_ROW {
                            continue;
                        }
                        let i = i as usize;
                        let dst = &mut da[i * row_len..(i + 1) * row_len];
                        for (d, &v) in dst.iter_mut().zip(&g[o * row_len..(o + 1) * row_len]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let gv = self.value(*gamma).data();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for row_g in g.chunks(d) {
                        for (dd, &v) in db.iter_mut().zip(row_g) {
                            *dd += v;
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let inv_d = S::one() / S::from_usize(d).unwrap();
                    let mut dh = vec![S::zero(); d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let row_g = &g[r * d..(r + 1) * d];
                        let row_h = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = S::zero();
                        let mut mean_dh_h = S::zero();
                        for j in 0..d {
                            dh[j] = row_g[j] * gv[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * row_h[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        let dst = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += *rs * (dh[j] - mean_dh - row_h[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Gelu { a } => {
                let av = self.value(a).data();
                if let Some(da) = self.slot(grads, a) {
                    for ((d, &v), &x) in da.iter_mut().zip(g).zip(av) {
                        *d += v * gelu_grad(x);
                    }
                }
            }
            &Op::Softmax { a } => {
                if let Some(da) = self.slot(grads, a) {
                    let c = *out.shape().last().unwrap();
                    for ((dst, gy), y) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let dot: S = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dst[j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax { a } => {
                if let Some(da) = self.slot(grads, a) {
                    let c = *out.shape().last().unwrap();
                    for ((dst, gy), y) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let total: S = gy.iter().copied().sum();
                        for j in 0..c {
                            dst[j] += gy[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(dl) = self.slot(grads, *logits) {
                    let c = probs.len() / labels.len();
                    let w = g[0] / S::from_usize(labels.len()).unwrap();
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { S::one() } else { S::zero() };
                            dl[r * c + j] += w * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            &Op::KlDiv { p, q, rows } => {
                let eps = S::of(KL_EPS);
                let pv = self.value(p).data();
                let qv = self.value(q).data();
                let w = g[0] / S::from_usize(rows).unwrap();
                if let Some(dp) = self.slot(grads, p) {
                    for ((d, &pi), &qi) in dp.iter_mut().zip(pv).zip(qv) {
                        let pc = pi.max(eps);
                        let qc = qi.max(eps);
                        *d += w * (pc.ln() - qc.ln() + S::one());
                    }
                }
                if let Some(dq) = self.slot(grads, q) {
                    for ((d, &pi), &qi) in dq.iter_mut().zip(pv).zip(qv) {
                        if qi >= eps {
                            *d -= w * pi / qi;
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                groups,
                len,
                nq,
                heads,
                dim,
                bias,
                probs,
            } => {
                let (groups, len, nq, heads, dim) = (*groups, *len, *nq, *heads, *dim);
                let hd = dim / heads;
                let scale = S::one() / S::from_usize(hd).unwrap().sqrt();
                let x = self.value(*qkv).data();
                let per_group = nq * len;
                let bias_rg = bias.is_some_and(|b| self.rg(b));
                let mut dbias = if bias_rg {
                    vec![S::zero(); nq * nq * heads]
                } else {
                    vec![]
                };
                let mut ds = vec![S::zero(); per_group];
                let mut dqkv = self.slot(grads, *qkv).map(std::mem::take);
                for gi in 0..groups {
                    let base = gi * len * 3 * dim;
                    for h in 0..heads {
                        let po = (gi * heads + h) * per_group;
                        let p = &probs[po..po + per_group];
                        gemm(
                            nq,
                            hd,
                            len,
                            g,
                            Mat::rows(gi * nq * dim + h * hd, dim),
                            x,
                            Mat::cols(base + 2 * dim + h * hd, 3 * dim),
                            &mut ds,
                            Mat::rows(0, len),
                            false,
                        );
                        for i in 0..nq {
                            let dp = &mut ds[i * len..(i + 1) * len];
                            let pr = &p[i * len..(i + 1) * len];
                            let dot: S = dp.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                            for j in 0..len {
                                dp[j] = pr[j] * (dp[j] - dot);
                            }
                            if bias_rg {
                                for j in 0..nq {
                                    dbias[(i * nq + j) * heads + h] += dp[j];
                                }
                            }
                        }
                        let Some(dx) = dqkv.as_mut() else {
                            continue;
                        };
                        for v in ds.iter_mut() {
                            *v *= scale;
                        }
                        gemm(
                            nq,
                            len,
                            hd,
                            &ds,
                            Mat::rows(0, len),
                            x,
                            Mat::rows(base + dim + h * hd, 3 * dim),
                            dx,
                            Mat::rows(base + h * hd, 3 * dim),
                            true,
                        );
                        gemm(
                            len,
                            nq,
                            hd,
                            &ds,
                            Mat::cols(0, len),
                            x,
                            Mat::rows(base + h * hd, 3 * dim),
                            dx,
                            Mat::rows(base + dim + h * hd, 3 * dim),
                            true,
                        );
                        gemm(
                            len,
                            nq,
                            hd,
                            probs,
                            Mat::cols(po, len),
                            g,
                            Mat::rows(gi * nq * dim + h * hd, dim),
                            dx,
                            Mat::rows(base + 2 * dim + h * hd, 3 * dim),
                            true,
                        );
                    }
                }
                if let Some(dx) = dqkv {
                    grads[qkv.0] = Some(dx);
                }
                if let (Some(b), true) = (bias, bias_rg) {
                    if let Some(db) = self.slot(grads, *b) {
                        for (d, v) in db.iter_mut().zip(dbias) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

fn gelu_fwd<S: Real>(x: S) -> S {
    let c = S::of(GELU_C);
    let k = S::of(GELU_K);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::of(GELU_C);
    let k = S::of(GELU_K);
    let half = S::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::identity(2));
        let p = g.matmul(i, i).unwrap();
        assert_eq!(g.value(p), &Tensor::identity(2));
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let p = g.matmul(a, z).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_temp_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let y = g.softmax_temp(x, 1.0).unwrap();
        for &v in g.value(y).data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
        }
        let x = g.constant(t(&[2], &[4., 0.]));
        let y = g.softmax_temp(x, 4.0).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(g.value(y).data()[0], e / (1.0 + e), epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(y).data()[0], 0.73106, epsilon = 1e-5);
        assert_abs_diff_eq!(g.value(y).data()[1], 0.26894, epsilon = 1e-5);
        assert!(matches!(g.softmax_temp(x, 0.0), Err(Error::Domain(_))));
        assert!(matches!(g.softmax_temp(x, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[2], &[1., 0.]));
        let q = g.constant(t(&[2], &[0.5, 0.5]));
        let k = g.kl_div(p, q).unwrap();
        assert_abs_diff_eq!(g.value(k).item(), 2f64.ln(), epsilon = 1e-12);
        let p = g.constant(t(&[2], &[0.5, 0.5]));
        let q = g.constant(t(&[2], &[0.9, 0.1]));
        let k = g.kl_div(p, q).unwrap();
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert_abs_diff_eq!(g.value(k).item(), want, epsilon = 1e-12);
        assert_abs_diff_eq!(want, 0.5108, epsilon = 1e-4);
        let k = g.kl_div(p, p).unwrap();
        assert_eq!(g.value(k).item(), 0.0);
        assert!(!g.kl_saturated());
    }

    #[test]
    fn kl_clamps_and_flags() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[2], &[0.5, 0.5]));
        let q = g.constant(t(&[2], &[1.0, 0.0]));
        let k = g.kl_div(p, q).unwrap();
        assert!(g.value(k).item().is_finite());
        assert!(g.kl_saturated());
        assert_eq!(g.kl_saturation_count(), 1);
    }

    #[test]
    fn kl_rejects_off_simplex() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[2], &[0.7, 0.7]));
        let q = g.constant(t(&[2], &[0.5, 0.5]));
        assert!(matches!(g.kl_div(p, q), Err(Error::Domain(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let l = g.cross_entropy(z, &[0, 2]).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 3f64.ln(), epsilon = 1e-12);
        assert!(matches!(g.cross_entropy(z, &[0, 3]), Err(Error::Index(_))));
        let mut last = f64::INFINITY;
        for s in [1.0, 10.0, 100.0] {
            let z = g.constant(t(&[1, 3], &[s, 0., 0.]));
            let l = g.cross_entropy(z, &[0]).unwrap();
            let l = g.value(l).item();
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_naive() {
        let logits = [0.3, -1.2, 2.0, 0.1, 0.0, -0.4, 1.5, 1.5, -2.0, 0.9, -0.7, 0.2];
        let labels = [2, 0, 1, 1];
        let mut naive = 0.0;
        for (row, &l) in logits.chunks(3).zip(&labels) {
            let s: f64 = row.iter().map(|v: &f64| v.exp()).sum();
            naive -= (row[l].exp() / s).ln();
        }
        naive /= 4.0;
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[4, 3], &logits));
        let l = g.cross_entropy(z, &labels).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), naive, epsilon = 1e-6);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 5], 3.0));
        let one = g.constant(Tensor::full(&[5], 1.0));
        let zero = g.constant(Tensor::zeros(&[5]));
        let y = g.layer_norm(x, one, zero).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(gelu_fwd(0.0f64), 0.0);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_f64(&[2, 3], &[1.5, -2., 3., 0.1, 0.2, 0.3]).unwrap());
        let b = g.constant(Tensor::from_f64(&[1, 3], &[7., 8., 9.]).unwrap());
        let c = g.concat_rows(&[a, b]).unwrap();
        let a2 = g.slice_rows(c, 0, 2).unwrap();
        let b2 = g.slice_rows(c, 2, 1).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
    }

    #[test]
    fn product_rule_and_frozen_leaf() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.leaf(Tensor::scalar(-2.0), false);
        let p = g.mul(x, y).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), -2.0);
        assert!(grads.get(y).is_none());
        assert_eq!(grads.count(), 1);
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let d = g.detach(x);
        let p = g.mul(x, d).unwrap();
        let grads = g.backward(p).unwrap();
        // d(x * stop(x))/dx = stop(x)
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
    }

    #[test]
    fn softmax_kl_composite_matches_fd() {
        use crate::diffcore::gradcheck::{finite_diff_check, FdOptions};
        let t_ = Tensor::from_f64(&[2, 3], &[0.2, -1.0, 0.7, 1.1, 0.0, -0.3]).unwrap();
        let s_ = Tensor::from_f64(&[2, 3], &[-0.5, 0.4, 0.9, 0.0, 2.0, 0.3]).unwrap();
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let p = g.softmax_temp(v[0], 4.0)?;
            let q = g.softmax_temp(v[1], 4.0)?;
            g.kl_div(p, q)
        };
        let r = finite_diff_check(
            "kd",
            &[("t".into(), t_), ("s".into(), s_)],
            &build,
            &FdOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn matmul_fd_random() {
        use crate::diffcore::gradcheck::{finite_diff_check, FdOptions};
        let a = Tensor::from_f64(&[3, 4], &(0..12).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        let b = Tensor::from_f64(&[4, 2], &(0..8).map(|i| (i as f64 * 0.91).cos()).collect::<Vec<_>>()).unwrap();
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let p = g.matmul(v[0], v[1])?;
            Ok(g.sum(p))
        };
        let r = finite_diff_check("mm", &[("a".into(), a), ("b".into(), b)], &build, &FdOptions::default()).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
        assert_eq!(OpKind::from_name("nope"), None);
    }
}
