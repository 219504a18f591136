//! Central finite-difference verification of the tape's backward rules.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

use super::graph::{Graph, OpKind, Var, MASKED, PAD_ROW};
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Step `h` of the central difference.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Coordinates probed per tensor; `None` probes all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-5,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Worst coordinate seen by a check.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Worst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct FdReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
    pub worst: Option<Worst>,
}

impl FdReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Build-function signature shared by all checks: given a fresh tape and
/// the parameter leaves, return the output node.
pub type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn evaluate(
    params: &[(String, Tensor<f64>)],
    build: &Build<'_>,
    weights: Option<&[f64]>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|(_, t)| g.leaf(t.clone(), false))
        .collect();
    let out = build(&mut g, &vars)?;
    Ok(readout(g.value(out), weights))
}

fn readout(t: &Tensor<f64>, weights: Option<&[f64]>) -> f64 {
    match weights {
        None => t.item(),
        Some(w) => t.data().iter().zip(w).map(|(a, b)| a * b).sum(),
    }
}

/// Compare analytic gradients of `Σ weights·build(params)` (or of the scalar
/// output when `weights` is `None`) with central differences.
pub fn check_build(
    name: &str,
    params: &[(String, Tensor<f64>)],
    build: &Build<'_>,
    weights: Option<&[f64]>,
    opts: &FdOptions,
) -> Result<FdReport> {
    if !(opts.step > 0.0) {
        return Err(Error::Domain(format!("finite-difference step {}", opts.step)));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|(_, t)| g.leaf(t.clone(), true))
        .collect();
    let out = build(&mut g, &vars)?;
    let grads = match weights {
        None => g.backward(out)?,
        Some(w) => g.backward_with(out, w)?,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        coords: 0,
        worst: None,
    };
    let mut probe = params.to_vec();
    for (pi, (pname, t)) in params.iter().enumerate() {
        let n = t.numel();
        let analytic_all = grads.get(vars[pi]);
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                // the steepest coordinate is always probed
                let mut c = sample(&mut rng, n, k).into_vec();
                if let Some(a) = analytic_all {
                    let top = (0..n).max_by(|&i, &j| a.data()[i].abs().total_cmp(&a.data()[j].abs()));
                    c.extend(top);
                }
                c.sort_unstable();
                c.dedup();
                c
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let analytic = analytic_all.map_or(0.0, |a| a.data()[idx]);
            let x0 = t.data()[idx];
            probe[pi].1.data_mut()[idx] = x0 + opts.step;
            let fp = evaluate(&probe, build, weights)?;
            probe[pi].1.data_mut()[idx] = x0 - opts.step;
            let fm = evaluate(&probe, build, weights)?;
            probe[pi].1.data_mut()[idx] = x0;
            let numeric = (fp - fm) / (2.0 * opts.step);
            if !numeric.is_finite() || !analytic.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{name}: parameter `{pname}` index {idx} (analytic {analytic}, numeric {numeric})"
                )));
            }
            let e = rel_err(analytic, numeric, opts.floor);
            report.coords += 1;
            if report.worst.is_none() || e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some(Worst {
                    param: pname.clone(),
                    index: idx,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Scalar-function check: `build` must return a scalar node.
pub fn finite_diff_check(
    name: &str,
    params: &[(String, Tensor<f64>)],
    build: &Build<'_>,
    opts: &FdOptions,
) -> Result<FdReport> {
    check_build(name, params, build, None, opts)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn simplex(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.05..1.0)).collect();
    for row in data.chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

fn named(ts: Vec<Tensor<f64>>) -> Vec<(String, Tensor<f64>)> {
    ts.into_iter()
        .enumerate()
        .map(|(i, t)| (format!("input{i}"), t))
        .collect()
}

/// Random inputs and a build closure exercising exactly one op.
fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<(String, Tensor<f64>)>, Box<Build<'static>>) {
    let mut u = |shape: &[usize]| uniform(rng, shape, -1.0, 1.0);
    match kind {
        OpKind::MatMul => {
            let batched = u(&[1]).item() > 0.0;
            let a = if batched { u(&[2, 3, 4]) } else { u(&[3, 4]) };
            (named(vec![a, u(&[4, 2])]), Box::new(|g, v| g.matmul(v[0], v[1])))
        }
        OpKind::Linear => (
            named(vec![u(&[2, 3, 4]), u(&[4, 5]), u(&[5])]),
            Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        ),
        OpKind::Add => (named(vec![u(&[3, 4]), u(&[4])]), Box::new(|g, v| g.add(v[0], v[1]))),
        OpKind::Sub => (named(vec![u(&[3, 4]), u(&[3, 4])]), Box::new(|g, v| g.sub(v[0], v[1]))),
        OpKind::Mul => (named(vec![u(&[3, 4]), u(&[3, 4])]), Box::new(|g, v| g.mul(v[0], v[1]))),
        OpKind::Scale => (named(vec![u(&[3, 4])]), Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        OpKind::Sum => (named(vec![u(&[3, 4])]), Box::new(|g, v| Ok(g.sum(v[0])))),
        OpKind::Mean => (named(vec![u(&[3, 4])]), Box::new(|g, v| Ok(g.mean(v[0])))),
        OpKind::MeanRows => (named(vec![u(&[2, 3, 4])]), Box::new(|g, v| g.mean_rows(v[0]))),
        OpKind::Reshape => (named(vec![u(&[3, 4])]), Box::new(|g, v| g.reshape(v[0], &[2, 6]))),
        OpKind::ConcatRows => (
            named(vec![u(&[2, 3]), u(&[1, 3]), u(&[3, 3])]),
            Box::new(|g, v| g.concat_rows(v)),
        ),
        OpKind::SliceRows => (named(vec![u(&[5, 3])]), Box::new(|g, v| g.slice_rows(v[0], 1, 3))),
        OpKind::GatherRows => {
            let index: Rc<[u32]> = Rc::from(vec![2, 0, PAD_ROW, 2, 1, 3]);
            (
                named(vec![u(&[4, 3])]),
                Box::new(move |g, v| g.gather_rows(v[0], index.clone(), &[2, 3])),
            )
        }
        OpKind::LayerNorm => (
            named(vec![u(&[3, 6]), u(&[6]), u(&[6])]),
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
        ),
        OpKind::Gelu => (named(vec![uniform(rng, &[3, 4], -3.0, 3.0)]), Box::new(|g, v| Ok(g.gelu(v[0])))),
        OpKind::Softmax => (named(vec![uniform(rng, &[3, 4], -2.0, 2.0)]), Box::new(|g, v| g.softmax(v[0]))),
        OpKind::LogSoftmax => (
            named(vec![uniform(rng, &[3, 4], -2.0, 2.0)]),
            Box::new(|g, v| g.log_softmax(v[0])),
        ),
        OpKind::CrossEntropy => {
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            (
                named(vec![uniform(rng, &[4, 3], -2.0, 2.0)]),
                Box::new(move |g, v| g.cross_entropy(v[0], &labels)),
            )
        }
        OpKind::KlDiv => {
            let p = simplex(rng, 2, 4);
            let q = simplex(rng, 2, 4);
            (named(vec![p, q]), Box::new(|g, v| g.kl_div(v[0], v[1])))
        }
        OpKind::Attention => {
            let (groups, len, nq, heads, dim) = (2, 5, 3, 2, 4);
            let qkv = u(&[groups, len, 3 * dim]);
            let bias = uniform(rng, &[nq, nq, heads], -0.5, 0.5);
            let mut mask = vec![0.0; groups * nq * len];
            mask[len - 1] = MASKED;
            mask[nq * len + 1] = MASKED;
            (
                named(vec![qkv, bias]),
                Box::new(move |g, v| g.attention(v[0], nq, heads, Some(&mask), Some(v[1]))),
            )
        }
        OpKind::Leaf | OpKind::Detach => unreachable!("not differentiable"),
    }
}

/// Check every differentiable op on `instances` random inputs each and
/// return one report per op kind, named after the op.
pub fn op_suite(instances: usize, seed: u64, opts: &FdOptions) -> Result<Vec<FdReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for kind in OpKind::DIFFERENTIABLE {
        let mut merged: Option<FdReport> = None;
        for _ in 0..instances {
            let (params, build) = op_case(kind, &mut rng);
            let mut probe = Graph::new();
            let vars: Vec<Var> = params.iter().map(|(_, t)| probe.leaf(t.clone(), false)).collect();
            let y = build(&mut probe, &vars)?;
            let weights: Option<Vec<f64>> = if probe.value(y).numel() == 1 && probe.shape(y).is_empty() {
                None
            } else {
                let n = probe.value(y).numel();
                Some((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            };
            // Probes of the KL inputs must stay within the simplex tolerance.
            let local;
            let opts = if kind == OpKind::KlDiv {
                local = FdOptions {
                    step: opts.step.min(1e-6),
                    ..opts.clone()
                };
                &local
            } else {
                opts
            };
            let r = check_build(kind.name(), &params, &*build, weights.as_deref(), opts)?;
            merged = Some(match merged {
                Some(m) if m.max_rel_err >= r.max_rel_err => FdReport {
                    coords: m.coords + r.coords,
                    ..m
                },
                Some(m) => FdReport {
                    coords: m.coords + r.coords,
                    ..r
                },
                None => r,
            });
        }
        out.extend(merged);
    }
    Ok(out)
}
