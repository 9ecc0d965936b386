//! The kernel-embedding quadratic loss and the risks built from it, plus the
//! correct losses that compare `(Γ_h)_* μ_X` with `μ` directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{mmd, mmd_squared_weights, GramMatrix};
use crate::morphisms::{disintegrate, graph_pushforward_in, MarkovKernel, ZeroRowPolicy};
use crate::numeric::{compensated_sum, MMD_CLAMP_TOL};
use crate::spaces::{ensure_same, marginal, Axis, Dataset, ProbMeasure, SignedMeasure};

/// A risk value, with the per-sample losses when it was computed from data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub value: f64,
    pub per_sample: Option<Vec<f64>>,
}

/// Per-row pieces of the loss expansion: `rᵀGr` and `Gr`.
pub(crate) struct RowEmbeddings {
    pub self_inner: Vec<f64>,
    pub cross: Vec<Vec<f64>>,
}

impl RowEmbeddings {
    pub(crate) fn new(h: &MarkovKernel, g_y: &GramMatrix) -> Self {
        let cross: Vec<Vec<f64>> = h.rows().map(|r| g_y.apply(r)).collect();
        let self_inner = h
            .rows()
            .zip(&cross)
            .map(|(r, gr)| compensated_sum(r.iter().zip(gr).map(|(a, b)| a * b)))
            .collect();
        RowEmbeddings { self_inner, cross }
    }

    pub(crate) fn loss(&self, g_y: &GramMatrix, x: usize, y: usize) -> f64 {
        let v = self.self_inner[x] + g_y.get(y, y) - 2.0 * self.cross[x][y];
        if (-MMD_CLAMP_TOL..0.0).contains(&v) {
            0.0
        } else {
            v
        }
    }
}

fn check_loss_spaces(h: &MarkovKernel, g_y: &GramMatrix) -> Result<()> {
    ensure_same(h.target(), g_y.space(), "loss kernel")
}

fn check_joint(h: &MarkovKernel, mu: &SignedMeasure) -> Result<()> {
    let (left, right) = mu
        .space()
        .factors()
        .ok_or_else(|| Error::NotProduct(format!("{} points", mu.space().len())))?;
    ensure_same(h.source(), left, "joint measure source factor")?;
    ensure_same(h.target(), right, "joint measure target factor")
}

/// `L^K(x, y, h) = ‖M_K(h(x)) − K_y‖²`.
pub fn instantaneous_loss(h: &MarkovKernel, x: &str, y: &str, g_y: &GramMatrix) -> Result<f64> {
    let xi = h.source().index_of(x)?;
    let yi = h.target().index_of(y)?;
    instantaneous_loss_at(h, xi, yi, g_y)
}

pub fn instantaneous_loss_at(
    h: &MarkovKernel,
    x: usize,
    y: usize,
    g_y: &GramMatrix,
) -> Result<f64> {
    check_loss_spaces(h, g_y)?;
    let row = h.row(x);
    let gr = g_y.apply(row);
    let v = compensated_sum(row.iter().zip(&gr).map(|(a, b)| a * b)) + g_y.get(y, y) - 2.0 * gr[y];
    Ok(if (-MMD_CLAMP_TOL..0.0).contains(&v) {
        0.0
    } else {
        v
    })
}

/// `R_μ(h) = Σ_{x,y} μ(x, y) L^K(x, y, h)`.
pub fn expected_risk(h: &MarkovKernel, mu: &ProbMeasure, g_y: &GramMatrix) -> Result<RiskReport> {
    check_loss_spaces(h, g_y)?;
    check_joint(h, mu)?;
    let emb = RowEmbeddings::new(h, g_y);
    let m = h.target().len();
    let value = compensated_sum(
        mu.weights()
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(k, w)| w * emb.loss(g_y, k / m, k % m)),
    );
    Ok(RiskReport {
        value,
        per_sample: None,
    })
}

/// `R̂_S(h) = (1/n) Σ_i L^K(x_i, y_i, h)`.
pub fn empirical_risk(h: &MarkovKernel, s: &Dataset, g_y: &GramMatrix) -> Result<RiskReport> {
    check_loss_spaces(h, g_y)?;
    ensure_same(h.source(), s.x_space(), "dataset source")?;
    ensure_same(h.target(), s.y_space(), "dataset target")?;
    if s.is_empty() {
        return Err(Error::EmptyData);
    }
    let emb = RowEmbeddings::new(h, g_y);
    let per_sample: Vec<f64> = s
        .samples()
        .iter()
        .map(|&(x, y)| emb.loss(g_y, x, y))
        .collect();
    let value = compensated_sum(per_sample.iter().copied()) / per_sample.len() as f64;
    Ok(RiskReport {
        value,
        per_sample: Some(per_sample),
    })
}

/// `Σ_x μ_X(x) ‖h(x) − μ_{Y|X}(x)‖²`, the part of the risk that `h` controls.
pub fn excess_risk(
    h: &MarkovKernel,
    mu: &ProbMeasure,
    g_y: &GramMatrix,
    policy: ZeroRowPolicy,
) -> Result<f64> {
    check_loss_spaces(h, g_y)?;
    check_joint(h, mu)?;
    let (mu_x, cond) = disintegrate(mu, policy)?;
    let mut terms = Vec::with_capacity(mu_x.weights().len());
    for (x, &w) in mu_x.weights().iter().enumerate() {
        if w > 0.0 {
            terms.push(w * mmd_squared_weights(g_y, h.row(x), cond.row(x))?);
        }
    }
    Ok(compensated_sum(terms))
}

/// `‖(Γ_h)_* μ_X − μ‖_TV^k`.
pub fn tv_correct_loss(h: &MarkovKernel, mu: &ProbMeasure, k: u32) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParameter("power k must be at least 1".into()));
    }
    check_joint(h, mu)?;
    let mu_x = marginal(mu, Axis::Left)?;
    let pushed = graph_pushforward_in(h, &mu_x, mu.space())?;
    Ok(pushed.minus(mu)?.tv_norm().powi(k as i32))
}

/// `‖(Γ_h)_* μ_X − μ‖` in the embedding of `g_xy`.
pub fn mmd_correct_loss(h: &MarkovKernel, mu: &ProbMeasure, g_xy: &GramMatrix) -> Result<f64> {
    check_joint(h, mu)?;
    let mu_x = marginal(mu, Axis::Left)?;
    let pushed = graph_pushforward_in(h, &mu_x, mu.space())?;
    mmd(g_xy, &pushed, mu)
}

/// Outcome of comparing `‖p − f‖₁` with `2√(1 − e^{−KL(p‖f)})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BhCheck {
    pub l1: f64,
    pub kl: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Bretagnolle–Huber: `‖p − f‖₁ ≤ 2√(1 − exp(−KL(p‖f)))`, natural log.
pub fn kl_and_bh_check(p: &ProbMeasure, f: &ProbMeasure) -> Result<BhCheck> {
    ensure_same(p.space(), f.space(), "kl")?;
    let l1 = p.minus(f)?.tv_norm();
    let mut terms = Vec::with_capacity(p.weights().len());
    let mut infinite = false;
    for (&pi, &fi) in p.weights().iter().zip(f.weights()) {
        if pi > 0.0 {
            if fi > 0.0 {
                terms.push(pi * (pi / fi).ln());
            } else {
                infinite = true;
            }
        }
    }
    let (kl, bound) = if infinite {
        (f64::INFINITY, 2.0)
    } else {
        let kl = compensated_sum(terms).max(0.0);
        // 1 − e^{−kl} via expm1 keeps precision for tiny divergences
        (kl, 2.0 * (-(-kl).exp_m1()).max(0.0).sqrt())
    };
    Ok(BhCheck {
        l1,
        kl,
        bound,
        holds: l1 <= bound + 1e-12,
    })
}
