use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Real, Var};
use crate::error::{Error, Result};

/// `KL(softmax(t/τ) ‖ softmax(s/τ))`, teacher first, averaged over rows.
pub fn l_kd<S: Real>(g: &mut Graph<S>, t: Var, s: Var, tau: f64) -> Result<Var> {
    let p = g.softmax_temp(t, tau)?;
    let q = g.softmax_temp(s, tau)?;
    g.kl_div(p, q)
}

fn fused<S: Real>(g: &mut Graph<S>, y_mlo: Var, y_cc: Var) -> Result<Var> {
    let sum = g.add(y_mlo, y_cc)?;
    Ok(g.scale(sum, S::of(0.5)))
}

fn md_terms<S: Real>(g: &mut Graph<S>, z: Var, y_mv: Var, z_teacher: Var, mv_teacher: Var, tau: f64) -> Result<Var> {
    let to_mv = l_kd(g, z_teacher, y_mv, tau)?;
    let to_z = l_kd(g, mv_teacher, z, tau)?;
    let both = g.add(to_mv, to_z)?;
    Ok(g.scale(both, S::of(1.0 / (tau * tau))))
}

/// Mutual distillation between the fused single-view logits
/// `z = (y_mlo + y_cc) / 2` and `y_mv`:
/// `(1/τ²)·[KL_τ(stop(z) ‖ y_mv) + KL_τ(stop(y_mv) ‖ z)]`.
pub fn l_md<S: Real>(g: &mut Graph<S>, y_mlo: Var, y_cc: Var, y_mv: Var, tau: f64) -> Result<Var> {
    let z = fused(g, y_mlo, y_cc)?;
    let z_hat = g.detach(z);
    let y_hat = g.detach(y_mv);
    md_terms(g, z, y_mv, z_hat, y_hat, tau)
}

/// [`l_md`] with the two teachers supplied explicitly. With teachers equal
/// to the current `z` and `y_mv` values this is the function whose
/// derivative the stop-gradient defines, which makes it the
/// finite-difference target for `l_md`.
pub fn l_md_against<S: Real>(
    g: &mut Graph<S>,
    y_mlo: Var,
    y_cc: Var,
    y_mv: Var,
    teachers: (Var, Var),
    tau: f64,
) -> Result<Var> {
    let z = fused(g, y_mlo, y_cc)?;
    md_terms(g, z, y_mv, teachers.0, teachers.1, tau)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub tau: f64,
    pub lambda: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper { tau: 4.0, lambda: 0.1 }
    }
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossBundle {
    pub l_mlo: Var,
    pub l_cc: Var,
    pub l_mv: Var,
    pub l_md: Var,
    pub l_overall: Var,
    pub tau: f64,
    pub lambda: f64,
}

/// Scalar values of a [`LossBundle`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_mlo: f64,
    pub l_cc: f64,
    pub l_mv: f64,
    pub l_md: f64,
    pub l_overall: f64,
}

impl LossBundle {
    pub fn values<S: Real>(&self, g: &Graph<S>) -> LossValues {
        let v = |x: Var| g.value(x).item().as_f64();
        LossValues {
            l_mlo: v(self.l_mlo),
            l_cc: v(self.l_cc),
            l_mv: v(self.l_mv),
            l_md: v(self.l_md),
            l_overall: v(self.l_overall),
        }
    }
}

/// `l_mv + l_mlo + l_cc + λ·l_md` on batched logits `[b, c]`.
pub fn loss_overall<S: Real>(
    g: &mut Graph<S>,
    y_mlo: Var,
    y_cc: Var,
    y_mv: Var,
    labels: &[usize],
    hyper: Hyper,
) -> Result<LossBundle> {
    loss_overall_with(g, y_mlo, y_cc, y_mv, labels, hyper, None)
}

/// [`loss_overall`] with optional explicit distillation teachers
/// `(z, y_mv)`; `None` detaches the live logits.
pub fn loss_overall_with<S: Real>(
    g: &mut Graph<S>,
    y_mlo: Var,
    y_cc: Var,
    y_mv: Var,
    labels: &[usize],
    hyper: Hyper,
    teachers: Option<(Var, Var)>,
) -> Result<LossBundle> {
    if !(hyper.lambda >= 0.0) || !hyper.lambda.is_finite() {
        return Err(Error::Domain(format!("lambda must be ≥ 0, got {}", hyper.lambda)));
    }
    let l_mlo = g.cross_entropy(y_mlo, labels)?;
    let l_cc = g.cross_entropy(y_cc, labels)?;
    let l_mv = g.cross_entropy(y_mv, labels)?;
    let l_md = match teachers {
        None => l_md(g, y_mlo, y_cc, y_mv, hyper.tau)?,
        Some(t) => l_md_against(g, y_mlo, y_cc, y_mv, t, hyper.tau)?,
    };
    let a = g.add(l_mv, l_mlo)?;
    let a = g.add(a, l_cc)?;
    let weighted = g.scale(l_md, S::of(hyper.lambda));
    let l_overall = g.add(a, weighted)?;
    Ok(LossBundle {
        l_mlo,
        l_cc,
        l_mv,
        l_md,
        l_overall,
        tau: hyper.tau,
        lambda: hyper.lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use approx::assert_abs_diff_eq;

    fn c(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.constant(Tensor::from_f64(&[v.len()], v).unwrap())
    }

    #[test]
    fn kd_examples() {
        let mut g = Graph::new();
        let t = c(&mut g, &[4.0, 0.0]);
        let s = c(&mut g, &[0.0, 0.0]);
        let v = l_kd(&mut g, t, s, 4.0).unwrap();
        let p0 = 1f64.exp() / (1.0 + 1f64.exp());
        let want = p0 * (p0 / 0.5).ln() + (1.0 - p0) * ((1.0 - p0) / 0.5).ln();
        assert_abs_diff_eq!(g.value(v).item(), want, epsilon = 1e-12);
        assert_abs_diff_eq!(want, 0.11094, epsilon = 1e-5);
        let same = l_kd(&mut g, t, t, 4.0).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
    }

    #[test]
    fn kd_decreases_with_temperature() {
        let mut g = Graph::new();
        let t = c(&mut g, &[2.0, -1.0, 0.5]);
        let s = c(&mut g, &[0.0, 1.5, -0.5]);
        let mut last = f64::INFINITY;
        for tau in [1.0, 4.0, 16.0, 64.0] {
            let v = l_kd(&mut g, t, s, tau).unwrap();
            let v = g.value(v).item();
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn md_vanishes_when_fused_mean_matches() {
        let mut g = Graph::new();
        let a = c(&mut g, &[2.0, 0.0]);
        let b = c(&mut g, &[0.0, 2.0]);
        let m = c(&mut g, &[1.0, 1.0]);
        let v = l_md(&mut g, a, b, m, 4.0).unwrap();
        assert_eq!(g.value(v).item(), 0.0);
    }

    #[test]
    fn negative_lambda_rejected() {
        let mut g = Graph::<f64>::new();
        let y = g.constant(Tensor::zeros(&[1, 3]));
        let h = Hyper { tau: 4.0, lambda: -0.1 };
        assert!(loss_overall(&mut g, y, y, y, &[0], h).is_err());
    }
}
