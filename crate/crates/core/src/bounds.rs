//! Finite-sample generalization bounds, covering numbers of finite classes,
//! and a seeded Monte Carlo harness that measures how often each bound's
//! failure event actually occurs.
//!
//! Every event is evaluated exactly: on finite spaces risks are finite sums,
//! so "probability" below is plain probability under the product measure.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{mmd_squared_weights, GramMatrix};
use crate::learning::derive_seed;
use crate::losses::{empirical_risk, expected_risk, RowEmbeddings};
use crate::morphisms::MarkovKernel;
use crate::numeric::{compensated_sum, wilson_interval};
use crate::spaces::{ensure_same, Dataset, FiniteSpace, ProbMeasure};

/// Largest class for which [`covering_number_exact`] searches all subsets.
pub const EXACT_COVER_MAX: usize = 12;

/// Slack added to ball radii so that points at distance exactly `s` count as covered.
const BALL_SLACK: f64 = 1e-12;

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

fn check_sample_size(m: usize) -> Result<()> {
    if m == 0 {
        Err(Error::InvalidParameter(
            "sample size must be at least 1".into(),
        ))
    } else {
        Ok(())
    }
}

/// Failure probability `2·exp(−mε²/(4C_K²))` of `|R̂_S(h) − R_μ(h)| > ε`,
/// clamped to `[0, 1]`.
pub fn hoeffding_bound(m: usize, eps: f64, c_k: f64) -> Result<f64> {
    check_sample_size(m)?;
    check_positive("eps", eps)?;
    check_positive("c_k", c_k)?;
    Ok((2.0 * (-(m as f64) * eps * eps / (4.0 * c_k * c_k)).exp()).clamp(0.0, 1.0))
}

/// Two-sided Hoeffding `2·exp(−2mε²/range²)` for losses taking values in an
/// interval of width `range`, clamped to `[0, 1]`.
pub fn hoeffding_range_bound(m: usize, eps: f64, range: f64) -> Result<f64> {
    check_sample_size(m)?;
    check_positive("eps", eps)?;
    check_positive("range", range)?;
    Ok((2.0 * (-2.0 * m as f64 * eps * eps / (range * range)).exp()).clamp(0.0, 1.0))
}

/// Failure probability `4N·exp(−mε²/(4C_K²))` of the uniform deviation
/// event, where `N` covers the class at radius `ε/(8C_K)`; clamped to `[0, 1]`.
pub fn covering_bound(n_cover: usize, m: usize, eps: f64, c_k: f64) -> Result<f64> {
    if n_cover == 0 {
        return Err(Error::InvalidParameter(
            "covering number must be at least 1".into(),
        ));
    }
    check_sample_size(m)?;
    check_positive("eps", eps)?;
    check_positive("c_k", c_k)?;
    let v = 4.0 * n_cover as f64 * (-(m as f64) * eps * eps / (4.0 * c_k * c_k)).exp();
    Ok(v.clamp(0.0, 1.0))
}

/// `2√(k̄/n) + √(2 ln(1/δ)/n)`, valid for kernels with `sup K(y, y) ≤ 1`.
pub fn mmd_concentration_bound(n: usize, delta: f64, k_diag_mean: f64) -> Result<f64> {
    check_sample_size(n)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if !(k_diag_mean >= 0.0 && k_diag_mean.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "kernel diagonal mean must be nonnegative, got {k_diag_mean}"
        )));
    }
    let n = n as f64;
    Ok(2.0 * (k_diag_mean / n).sqrt() + (2.0 * (1.0 / delta).ln() / n).sqrt())
}

/// `d_∞(f, g) = max_x ‖f(x) − g(x)‖` in the embedding of `g_y`.
pub fn sup_distance(f: &MarkovKernel, g: &MarkovKernel, g_y: &GramMatrix) -> Result<f64> {
    ensure_same(f.source(), g.source(), "sup distance source")?;
    ensure_same(f.target(), g.target(), "sup distance target")?;
    ensure_same(f.target(), g_y.space(), "sup distance gram")?;
    let mut best = 0.0_f64;
    for x in 0..f.source().len() {
        best = best.max(mmd_squared_weights(g_y, f.row(x), g.row(x))?.sqrt());
    }
    Ok(best)
}

fn distance_matrix(class: &[MarkovKernel], g_y: &GramMatrix) -> Result<Vec<Vec<f64>>> {
    let n = class.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sup_distance(&class[i], &class[j], g_y)?;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

fn check_radius(s: f64) -> Result<()> {
    check_positive("covering radius", s)
}

/// Size of a greedy cover by closed radius-`s` balls centred at class
/// members: each step takes the centre covering the most uncovered members
/// (lowest index on ties). Plain greedy can grow with the radius, so this
/// returns the smallest greedy cover over all radii up to `s`; a cover at a
/// smaller radius also covers at `s`. An upper bound on the minimal covering
/// number, nonincreasing in `s`.
pub fn covering_number(class: &[MarkovKernel], s: f64, g_y: &GramMatrix) -> Result<usize> {
    check_radius(s)?;
    if class.is_empty() {
        return Err(Error::EmptyData);
    }
    let d = distance_matrix(class, g_y)?;
    // greedy covers only change at pairwise distances
    let mut radii: Vec<f64> = d.iter().flatten().copied().filter(|&r| r < s).collect();
    radii.push(s);
    radii.sort_by(f64::total_cmp);
    radii.dedup();
    Ok(radii
        .into_iter()
        .map(|r| greedy_cover(&d, r))
        .min()
        .expect("s is a candidate"))
}

fn greedy_cover(d: &[Vec<f64>], s: f64) -> usize {
    let n = d.len();
    let mut covered = vec![false; n];
    let mut count = 0;
    while covered.iter().any(|c| !c) {
        let (best, _) = (0..n)
            .map(|c| {
                (
                    c,
                    (0..n)
                        .filter(|&j| !covered[j] && d[c][j] <= s + BALL_SLACK)
                        .count(),
                )
            })
            .fold((0, 0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        for j in 0..n {
            if d[best][j] <= s + BALL_SLACK {
                covered[j] = true;
            }
        }
        count += 1;
    }
    count
}

/// The minimal number of closed radius-`s` balls centred at class members
/// that cover the class, by exhaustive search.
pub fn covering_number_exact(class: &[MarkovKernel], s: f64, g_y: &GramMatrix) -> Result<usize> {
    check_radius(s)?;
    if class.is_empty() {
        return Err(Error::EmptyData);
    }
    if class.len() > EXACT_COVER_MAX {
        return Err(Error::InvalidParameter(format!(
            "exact covers are limited to {EXACT_COVER_MAX} members, got {}",
            class.len()
        )));
    }
    let d = distance_matrix(class, g_y)?;
    let n = class.len();
    let full = (1u32 << n) - 1;
    let ball: Vec<u32> = (0..n)
        .map(|c| {
            (0..n)
                .filter(|&j| d[c][j] <= s + BALL_SLACK)
                .fold(0, |m, j| m | (1 << j))
        })
        .collect();
    let best = (1u32..=full)
        .filter(|centres| {
            (0..n)
                .filter(|&c| centres & (1 << c) != 0)
                .fold(0, |m, c| m | ball[c])
                == full
        })
        .map(|centres| centres.count_ones() as usize)
        .min()
        .expect("the full set of centres covers");
    Ok(best)
}

/// Both sides of `|(R_μ(f) − R̂_S(f)) − (R_μ(g) − R̂_S(g))| ≤ 8·C_K·d_∞(f, g)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub fn lipschitz_deviation_check(
    f: &MarkovKernel,
    g: &MarkovKernel,
    mu: &ProbMeasure,
    s: &Dataset,
    c_k: f64,
    g_y: &GramMatrix,
) -> Result<DeviationCheck> {
    let dev = |h: &MarkovKernel| -> Result<f64> {
        Ok(expected_risk(h, mu, g_y)?.value - empirical_risk(h, s, g_y)?.value)
    };
    let lhs = (dev(f)? - dev(g)?).abs();
    let rhs = 8.0 * c_k * sup_distance(f, g, g_y)?;
    Ok(DeviationCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-10,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundName {
    Hoeffding,
    Covering,
    MmdConcentration,
}

impl fmt::Display for BoundName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundName::Hoeffding => "hoeffding",
            BoundName::Covering => "covering",
            BoundName::MmdConcentration => "mmd_concentration",
        })
    }
}

impl FromStr for BoundName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hoeffding" => Ok(BoundName::Hoeffding),
            "covering" => Ok(BoundName::Covering),
            "mmd_concentration" | "mmd" => Ok(BoundName::MmdConcentration),
            other => Err(Error::InvalidParameter(format!("unknown bound `{other}`"))),
        }
    }
}

/// What a Monte Carlo run samples from and which event it counts.
#[derive(Debug, Clone)]
pub enum VerifySetup {
    /// `|R̂_S(h) − R_μ(h)| > ε` for a fixed `h`, `S ~ μ^n`.
    Hoeffding {
        h: MarkovKernel,
        mu: ProbMeasure,
        g_y: GramMatrix,
        eps: f64,
    },
    /// `sup_{h ∈ class} |R̂_S(h) − R_μ(h)| > ε`; each trial also checks that
    /// the deviation event together with a C-ERM gap `≤ c_m` forces
    /// `R_μ(A(S)) − min_h R_μ(h) ≤ 2ε + c_m`.
    Covering {
        class: Vec<MarkovKernel>,
        mu: ProbMeasure,
        g_y: GramMatrix,
        eps: f64,
        c_m: f64,
    },
    /// `‖M_K(μ_S) − M_K(μ)‖ > 2√(k̄/n) + √(2 ln(1/δ)/n)` with `S ~ μ^n`;
    /// the kernel must satisfy `sup K(y, y) ≤ 1`.
    MmdConcentration {
        mu: ProbMeasure,
        g: GramMatrix,
        delta: f64,
    },
}

impl VerifySetup {
    pub fn name(&self) -> BoundName {
        match self {
            VerifySetup::Hoeffding { .. } => BoundName::Hoeffding,
            VerifySetup::Covering { .. } => BoundName::Covering,
            VerifySetup::MmdConcentration { .. } => BoundName::MmdConcentration,
        }
    }

    fn sampling_measure(&self) -> &ProbMeasure {
        match self {
            VerifySetup::Hoeffding { mu, .. }
            | VerifySetup::Covering { mu, .. }
            | VerifySetup::MmdConcentration { mu, .. } => mu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_name: BoundName,
    pub parameters: BTreeMap<String, f64>,
    pub theoretical_bound: f64,
    pub empirical_failure_rate: f64,
    pub failures: usize,
    pub wilson_low: f64,
    pub wilson_high: f64,
    pub trials: usize,
    pub seed: u64,
    /// Trials on which the uniform-deviation chain implication failed
    /// (covering runs only).
    pub chain_violations: Option<usize>,
}

impl BoundReport {
    /// Whether the observed rate is within the bound plus the Wilson half-width.
    pub fn consistent(&self) -> bool {
        let half = (self.wilson_high - self.wilson_low) / 2.0;
        self.empirical_failure_rate <= self.theoretical_bound + half
    }
}

/// Loss of every hypothesis on every joint cell, and its exact risk.
struct LossTable {
    cells: Vec<f64>,
    risk: f64,
}

impl LossTable {
    fn new(h: &MarkovKernel, mu: &ProbMeasure, g_y: &GramMatrix) -> Result<Self> {
        let emb = RowEmbeddings::new(h, g_y);
        let m = h.target().len();
        let cells: Vec<f64> = (0..mu.weights().len())
            .map(|k| emb.loss(g_y, k / m, k % m))
            .collect();
        let risk = compensated_sum(mu.weights().iter().zip(&cells).map(|(w, l)| w * l));
        Ok(LossTable { cells, risk })
    }

    fn empirical(&self, sample: &[usize]) -> f64 {
        compensated_sum(sample.iter().map(|&k| self.cells[k])) / sample.len() as f64
    }
}

fn check_joint(h: &MarkovKernel, mu: &ProbMeasure, g_y: &GramMatrix) -> Result<()> {
    ensure_same(
        &FiniteSpace::product(h.source(), h.target()),
        mu.space(),
        "sampling measure",
    )?;
    ensure_same(h.target(), g_y.space(), "loss gram")
}

/// Draws `trials` i.i.d. samples of size `n`, counts the setup's failure
/// event, and reports the rate with a 95% Wilson interval. Each trial has
/// its own counter-derived random stream, so the report depends only on the
/// arguments.
pub fn monte_carlo_verify(
    setup: &VerifySetup,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<BoundReport> {
    check_sample_size(n)?;
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    let mu = setup.sampling_measure();
    let sampler = WeightedIndex::new(mu.weights())
        .map_err(|e| Error::InvalidParameter(format!("sampling measure: {e}")))?;
    let draw = |trial: usize| -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, trial as u64));
        (0..n).map(|_| sampler.sample(&mut rng)).collect()
    };
    let mut parameters = BTreeMap::new();
    parameters.insert("n".to_string(), n as f64);

    // per trial: (failure, chain violated)
    let (theoretical, outcomes): (f64, Vec<(bool, bool)>) = match setup {
        VerifySetup::Hoeffding { h, mu, g_y, eps } => {
            check_joint(h, mu, g_y)?;
            let c_k = g_y.c_k();
            let table = LossTable::new(h, mu, g_y)?;
            parameters.insert("eps".into(), *eps);
            parameters.insert("c_k".into(), c_k);
            let bound = hoeffding_bound(n, *eps, c_k)?;
            let outcomes = (0..trials)
                .into_par_iter()
                .map(|t| ((table.empirical(&draw(t)) - table.risk).abs() > *eps, false))
                .collect();
            (bound, outcomes)
        }
        VerifySetup::Covering {
            class,
            mu,
            g_y,
            eps,
            c_m,
        } => {
            let first = class.first().ok_or(Error::EmptyData)?;
            for h in class {
                check_joint(h, mu, g_y)?;
            }
            check_joint(first, mu, g_y)?;
            let c_k = g_y.c_k();
            check_positive("eps", *eps)?;
            check_positive("c_k", c_k)?;
            let n_cover = covering_number(class, eps / (8.0 * c_k), g_y)?;
            let tables = class
                .iter()
                .map(|h| LossTable::new(h, mu, g_y))
                .collect::<Result<Vec<_>>>()?;
            let best_risk = tables.iter().map(|t| t.risk).fold(f64::INFINITY, f64::min);
            parameters.insert("eps".into(), *eps);
            parameters.insert("c_k".into(), c_k);
            parameters.insert("c_m".into(), *c_m);
            parameters.insert("n_cover".into(), n_cover as f64);
            parameters.insert("class_size".into(), class.len() as f64);
            let bound = covering_bound(n_cover, n, *eps, c_k)?;
            let outcomes = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let sample = draw(t);
                    let empirical: Vec<f64> =
                        tables.iter().map(|tb| tb.empirical(&sample)).collect();
                    let sup_dev = tables
                        .iter()
                        .zip(&empirical)
                        .map(|(tb, e)| (e - tb.risk).abs())
                        .fold(0.0, f64::max);
                    // exact empirical risk minimizer, lowest index on ties, so the gap is 0
                    let chosen =
                        (0..tables.len())
                            .fold(0, |b, i| if empirical[i] < empirical[b] { i } else { b });
                    let gap = 0.0;
                    let excess = tables[chosen].risk - best_risk;
                    let premise = sup_dev <= *eps && gap <= *c_m;
                    let violated = premise && excess > 2.0 * eps + c_m + 1e-12;
                    (sup_dev > *eps, violated)
                })
                .collect();
            (bound, outcomes)
        }
        VerifySetup::MmdConcentration { mu, g, delta } => {
            ensure_same(mu.space(), g.space(), "concentration gram")?;
            let c_k = g.c_k();
            if c_k > 1.0 + 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "kernel must be rescaled so that sup K(y, y) <= 1 (C_K = {c_k})"
                )));
            }
            let k_bar = g.diag_mean(mu)?;
            let bound_radius = mmd_concentration_bound(n, *delta, k_bar)?;
            parameters.insert("delta".into(), *delta);
            parameters.insert("k_diag_mean".into(), k_bar);
            parameters.insert("radius".into(), bound_radius);
            let size = mu.weights().len();
            let outcomes = (0..trials)
                .into_par_iter()
                .map(|t| -> Result<(bool, bool)> {
                    let mut counts = vec![0.0; size];
                    for k in draw(t) {
                        counts[k] += 1.0;
                    }
                    let empirical: Vec<f64> = counts.iter().map(|c| c / n as f64).collect();
                    let d = mmd_squared_weights(g, &empirical, mu.weights())?.sqrt();
                    Ok((d > bound_radius, false))
                })
                .collect::<Result<Vec<_>>>()?;
            (*delta, outcomes)
        }
    };

    let failures = outcomes.iter().filter(|o| o.0).count();
    let chain = outcomes.iter().filter(|o| o.1).count();
    let (wilson_low, wilson_high) = wilson_interval(failures, trials);
    Ok(BoundReport {
        bound_name: setup.name(),
        parameters,
        theoretical_bound: theoretical,
        empirical_failure_rate: failures as f64 / trials as f64,
        failures,
        wilson_low,
        wilson_high,
        trials,
        seed,
        chain_violations: matches!(setup, VerifySetup::Covering { .. }).then_some(chain),
    })
}
