//! Hypothesis classes and learners: C-ERM, the W-regularized estimator,
//! the empirical section and a Newton interpolant through measure-valued
//! nodes.
//!
//! Parametric hypotheses carry one logit vector per source point and realize
//! rows by the normalized exponential, so every iterate is a Markov kernel.
//! Optimization is gradient descent with Armijo backtracking from several
//! seeded starts; the reported gaps compare the result against independent
//! competitors rather than certifying global optimality.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::GramMatrix;
use crate::losses::{empirical_risk, mmd_correct_loss};
use crate::morphisms::{operator_norm_parts, operator_spectrum, MarkovKernel, SignedKernel};
use crate::numeric::{compensated_sum, project_to_simplex, softmax, MMD_CLAMP_TOL};
use crate::spaces::{ensure_same, Dataset, FiniteSpace, ProbMeasure, SignedMeasure, SpaceRef};

/// Largest node count accepted by [`newton_interpolant`].
pub const MAX_INTERPOLATION_NODES: usize = 12;

pub const DEFAULT_RESTARTS: usize = 8;

/// The operator-norm term of W is enabled by default only up to this many
/// source points.
pub const OPERATOR_NORM_MAX_POINTS: usize = 32;

/// Above this many source points the Lipschitz term only looks at nearest
/// neighbours, which gives a lower bound on the true constant.
pub const LIPSCHITZ_ALL_PAIRS_MAX: usize = 256;

/// Weight of the hinge penalty that enforces a Lipschitz budget.
pub const LIPSCHITZ_PENALTY: f64 = 1e3;

/// Logit floor used when warm-starting from a kernel with zero entries.
const WARM_START_FLOOR: f64 = 1e-6;

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const MAX_STEP: f64 = 1e6;
const PROBE_SALT: u64 = 0x5052_4f42_455f_4752;
/// Temperatures of the smoothed W surrogates, followed by an exact stage.
const SMOOTHING_SCHEDULE: [f64; 5] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];

/// A sequence indexed by sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Schedule {
    Constant {
        value: f64,
    },
    /// `coef · n^{−exponent}`.
    Power {
        coef: f64,
        exponent: f64,
    },
}

impl Schedule {
    pub fn at(&self, n: usize) -> f64 {
        match *self {
            Schedule::Constant { value } => value,
            Schedule::Power { coef, exponent } => coef * (n as f64).powf(-exponent),
        }
    }

    fn nonincreasing_nonnegative(&self) -> bool {
        match *self {
            Schedule::Constant { value } => value >= 0.0 && value.is_finite(),
            Schedule::Power { coef, exponent } => {
                coef >= 0.0 && exponent >= 0.0 && coef.is_finite() && exponent.is_finite()
            }
        }
    }

    fn positive(&self) -> bool {
        match *self {
            Schedule::Constant { value } => value > 0.0 && value.is_finite(),
            Schedule::Power { coef, exponent } => {
                coef > 0.0 && coef.is_finite() && exponent.is_finite()
            }
        }
    }
}

/// `γ_n = n^{−1/2}`.
pub fn gamma_schedule(n: usize) -> f64 {
    debug_assert!(n >= 1, "sample size must be positive");
    (n as f64).powf(-0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub c_schedule: Schedule,
    pub gamma_schedule: Schedule,
    pub restarts: usize,
    pub max_iters: usize,
    pub step_size: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            c_schedule: Schedule::Power {
                coef: 1.0,
                exponent: 0.5,
            },
            gamma_schedule: Schedule::Power {
                coef: 1.0,
                exponent: 0.5,
            },
            restarts: DEFAULT_RESTARTS,
            max_iters: 2000,
            step_size: 1.0,
            tol: 1e-10,
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn with_seed(seed: u64) -> Self {
        LearnerConfig {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.c_schedule.nonincreasing_nonnegative() {
            return Err(Error::InvalidParameter(
                "c schedule must be nonnegative and nonincreasing".into(),
            ));
        }
        if !self.gamma_schedule.positive() {
            return Err(Error::InvalidParameter(
                "gamma schedule must be positive".into(),
            ));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidParameter(
                "restarts must be at least 1".into(),
            ));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidParameter("step size must be positive".into()));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::InvalidParameter(
                "tolerance must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum HypothesisClass {
    Finite(Vec<MarkovKernel>),
    /// All kernels `source ⇝ target` with rows `softmax(logits_x)`.
    Parametric {
        source: SpaceRef,
        target: SpaceRef,
    },
    /// Parametric kernels whose Lipschitz constant over source coordinates,
    /// measured by row MMD under `metric`, stays within `budget`.
    LipschitzGrid {
        source: SpaceRef,
        target: SpaceRef,
        budget: f64,
        metric: GramMatrix,
    },
}

impl HypothesisClass {
    pub fn finite(members: Vec<MarkovKernel>) -> Result<Self> {
        let first = members.first().ok_or(Error::EmptyData)?;
        for (i, h) in members.iter().enumerate() {
            ensure_same(first.source(), h.source(), "class member source")
                .map_err(|e| e.in_row(i))?;
            ensure_same(first.target(), h.target(), "class member target")
                .map_err(|e| e.in_row(i))?;
        }
        Ok(HypothesisClass::Finite(members))
    }

    pub fn parametric(source: &SpaceRef, target: &SpaceRef) -> Self {
        HypothesisClass::Parametric {
            source: source.clone(),
            target: target.clone(),
        }
    }

    pub fn lipschitz_grid(
        source: &SpaceRef,
        target: &SpaceRef,
        budget: f64,
        metric: GramMatrix,
    ) -> Result<Self> {
        if source.coords().is_none() {
            return Err(Error::MissingCoords {
                kernel: "lipschitz budget".into(),
            });
        }
        if !(budget >= 0.0 && budget.is_finite()) {
            return Err(Error::InvalidParameter(
                "lipschitz budget must be finite and nonnegative".into(),
            ));
        }
        ensure_same(target, metric.space(), "lipschitz metric")?;
        Ok(HypothesisClass::LipschitzGrid {
            source: source.clone(),
            target: target.clone(),
            budget,
            metric,
        })
    }

    pub fn source(&self) -> &SpaceRef {
        match self {
            HypothesisClass::Finite(members) => members[0].source(),
            HypothesisClass::Parametric { source, .. }
            | HypothesisClass::LipschitzGrid { source, .. } => source,
        }
    }

    pub fn target(&self) -> &SpaceRef {
        match self {
            HypothesisClass::Finite(members) => members[0].target(),
            HypothesisClass::Parametric { target, .. }
            | HypothesisClass::LipschitzGrid { target, .. } => target,
        }
    }

    /// The kernel with rows `softmax(logits[x])` (parametric variants only).
    pub fn realize(&self, logits: &[Vec<f64>]) -> Result<MarkovKernel> {
        if let HypothesisClass::Finite(_) = self {
            return Err(Error::InvalidParameter(
                "finite classes have no logits".into(),
            ));
        }
        let (source, target) = (self.source(), self.target());
        if logits.len() != source.len() {
            return Err(Error::LengthMismatch {
                expected: source.len(),
                got: logits.len(),
            });
        }
        let mut rows = Vec::with_capacity(logits.len());
        for (i, z) in logits.iter().enumerate() {
            if z.len() != target.len() {
                return Err(Error::LengthMismatch {
                    expected: target.len(),
                    got: z.len(),
                }
                .in_row(i));
            }
            if let Some(index) = z.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index }.in_row(i));
            }
            rows.push(softmax(z));
        }
        MarkovKernel::new(source, target, rows)
    }
}

/// Which empirical risk a learner minimizes.
#[derive(Debug, Clone, Copy)]
pub enum RiskSelector<'a> {
    /// Empirical risk of the quadratic embedding loss, Gram matrix on `Y`.
    Quadratic(&'a GramMatrix),
    /// Squared correct loss `‖(Γ_h)_* μ_{S,X} − μ_S‖²`, Gram matrix on `X × Y`.
    SquaredMmdCorrect(&'a GramMatrix),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CermOutcome {
    pub h: MarkovKernel,
    /// Empirical risk of `h` under the selected loss.
    pub risk: f64,
    pub certified_gap: f64,
    /// `c_n` at the dataset size.
    pub c_n: f64,
    /// Whether `certified_gap ≤ c_n`; only asserted for finite classes.
    pub contract_holds: Option<bool>,
    /// Objective per iteration of the winning restart (empty for finite classes).
    pub trace: Vec<f64>,
}

/// A C-ERM learner: exact enumeration for finite classes, multi-start
/// descent for parametric ones.
pub fn cerm(
    class: &HypothesisClass,
    s: &Dataset,
    risk: RiskSelector<'_>,
    config: &LearnerConfig,
) -> Result<CermOutcome> {
    config.validate()?;
    if s.is_empty() {
        return Err(Error::EmptyData);
    }
    ensure_same(class.source(), s.x_space(), "dataset source")?;
    ensure_same(class.target(), s.y_space(), "dataset target")?;
    let c_n = config.c_schedule.at(s.len());
    let evaluate = |h: &MarkovKernel| -> Result<f64> {
        match risk {
            RiskSelector::Quadratic(g) => Ok(empirical_risk(h, s, g)?.value),
            RiskSelector::SquaredMmdCorrect(g) => {
                Ok(mmd_correct_loss(h, &s.empirical()?, g)?.powi(2))
            }
        }
    };

    if let HypothesisClass::Finite(members) = class {
        let mut best: Option<(usize, f64)> = None;
        for (i, h) in members.iter().enumerate() {
            let v = evaluate(h)?;
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
        let (i, v) = best.expect("finite classes are nonempty");
        return Ok(CermOutcome {
            h: members[i].clone(),
            risk: v,
            certified_gap: 0.0,
            c_n,
            contract_holds: Some(0.0 <= c_n),
            trace: Vec::new(),
        });
    }

    let fit = EmpiricalFit::new(s)?;
    let base: Box<dyn Objective> = match risk {
        RiskSelector::Quadratic(g) => {
            ensure_same(s.y_space(), g.space(), "risk gram")?;
            Box::new(QuadraticRisk { g: g.clone(), fit })
        }
        RiskSelector::SquaredMmdCorrect(g) => {
            ensure_same(s.space(), g.space(), "risk gram")?;
            Box::new(MmdFidelity { g: g.clone(), fit })
        }
    };
    let objective: Box<dyn Objective> = match class {
        HypothesisClass::LipschitzGrid {
            source,
            budget,
            metric,
            ..
        } => Box::new(LipschitzPenalized {
            base,
            budget: *budget,
            metric: metric.clone(),
            pairs: lipschitz_pairs(source)?,
        }),
        _ => base,
    };
    let (n, m) = (class.source().len(), class.target().len());
    let best = multi_start(objective.as_ref(), n, m, config, &[], None)?;
    let probe = grid_probe(objective.as_ref(), n, m, config)?;
    let h = kernel_from_flat(class.source(), class.target(), &best.p)?;
    Ok(CermOutcome {
        risk: evaluate(&h)?,
        h,
        certified_gap: (best.value - probe).max(0.0),
        c_n,
        contract_holds: None,
        trace: best.trace,
    })
}

/// Which terms of W to include, and the Gram matrices they are measured in.
#[derive(Debug, Clone)]
pub struct WFunctionalSpec {
    pub include_sup: bool,
    pub include_lipschitz: bool,
    pub include_operator_norm: bool,
    /// Gram matrix on `Y` for row norms and row distances.
    pub g_y: GramMatrix,
    /// Gram matrix on `X × Y` for graph rows.
    pub g_xy: GramMatrix,
    /// Gram matrix on `X` for the operator-norm denominator.
    pub g_x: Option<GramMatrix>,
}

impl WFunctionalSpec {
    /// Sup and Lipschitz terms, plus the operator-norm term when `g_x` is
    /// given and the source has at most [`OPERATOR_NORM_MAX_POINTS`] points.
    pub fn new(g_y: GramMatrix, g_xy: GramMatrix, g_x: Option<GramMatrix>) -> Result<Self> {
        let op = g_x
            .as_ref()
            .is_some_and(|g| g.len() <= OPERATOR_NORM_MAX_POINTS);
        Self::with_terms(g_y, g_xy, g_x, true, true, op)
    }

    /// All three terms regardless of size.
    pub fn full(g_y: GramMatrix, g_xy: GramMatrix, g_x: GramMatrix) -> Result<Self> {
        Self::with_terms(g_y, g_xy, Some(g_x), true, true, true)
    }

    pub fn with_terms(
        g_y: GramMatrix,
        g_xy: GramMatrix,
        g_x: Option<GramMatrix>,
        include_sup: bool,
        include_lipschitz: bool,
        include_operator_norm: bool,
    ) -> Result<Self> {
        if !(include_sup || include_lipschitz || include_operator_norm) {
            return Err(Error::InvalidParameter("W needs at least one term".into()));
        }
        if include_operator_norm && g_x.is_none() {
            return Err(Error::InvalidParameter(
                "operator-norm term needs a gram matrix on the source".into(),
            ));
        }
        let (left, right) = g_xy
            .space()
            .factors()
            .ok_or_else(|| Error::NotProduct("W joint gram space".into()))?;
        ensure_same(right, g_y.space(), "W target gram")?;
        if let Some(gx) = &g_x {
            ensure_same(left, gx.space(), "W source gram")?;
        }
        Ok(WFunctionalSpec {
            include_sup,
            include_lipschitz,
            include_operator_norm,
            g_y,
            g_xy,
            g_x,
        })
    }

    fn check(&self, source: &SpaceRef, target: &SpaceRef) -> Result<()> {
        ensure_same(target, self.g_y.space(), "W target gram")?;
        ensure_same(
            &FiniteSpace::product(source, target),
            self.g_xy.space(),
            "W joint gram",
        )?;
        if let Some(gx) = &self.g_x {
            ensure_same(source, gx.space(), "W source gram")?;
        }
        Ok(())
    }
}

/// The three summands of W and the value `(s + l + o)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WTerms {
    pub sup: f64,
    pub lipschitz: f64,
    pub operator_norm: f64,
    pub value: f64,
}

pub fn w_functional(h: &MarkovKernel, spec: &WFunctionalSpec) -> Result<f64> {
    Ok(w_terms(h, spec)?.value)
}

pub fn w_terms(h: &MarkovKernel, spec: &WFunctionalSpec) -> Result<WTerms> {
    spec.check(h.source(), h.target())?;
    let pairs = if spec.include_lipschitz {
        lipschitz_pairs(h.source())?
    } else {
        Vec::new()
    };
    let evaluator = WEvaluator {
        spec,
        pairs: &pairs,
        source: h.source(),
        target: h.target(),
        smoothing: 0.0,
    };
    let flat: Vec<f64> = h.rows().flatten().copied().collect();
    Ok(evaluator.eval(&flat, false)?.0)
}

/// Outcome of [`regularized_estimate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularizedEstimate {
    pub h: MarkovKernel,
    /// `mmd_correct_loss(h, μ_S)² + γ·W(h)` at the returned `h`.
    pub objective: f64,
    pub fidelity: f64,
    pub w: WTerms,
    pub gamma: f64,
    /// Achieved objective minus the best independent competitor, floored at 0.
    pub eps_certificate: f64,
    /// Whether `eps_certificate ≤ γ²`.
    pub meets_contract: bool,
    pub trace: Vec<f64>,
}

/// Minimizes `‖(Γ_h)_* μ_{S,X} − μ_S‖² + γ·W(h)` over all kernels on the
/// dataset's grids.
pub fn regularized_estimate(
    s: &Dataset,
    gamma: f64,
    g_xy: &GramMatrix,
    spec: &WFunctionalSpec,
    config: &LearnerConfig,
) -> Result<RegularizedEstimate> {
    config.validate()?;
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    if s.is_empty() {
        return Err(Error::EmptyData);
    }
    ensure_same(s.space(), g_xy.space(), "fidelity gram")?;
    let (source, target) = (s.x_space(), s.y_space());
    spec.check(source, target)?;
    let pairs = if spec.include_lipschitz {
        lipschitz_pairs(source)?
    } else {
        Vec::new()
    };
    let objective_at = |smoothing: f64| -> Result<Regularized<'_>> {
        Ok(Regularized {
            fidelity: MmdFidelity {
                g: g_xy.clone(),
                fit: EmpiricalFit::new(s)?,
            },
            gamma,
            w: WEvaluator {
                spec,
                pairs: &pairs,
                source,
                target,
                smoothing,
            },
        })
    };
    let exact = objective_at(0.0)?;
    let (n, m) = (source.len(), target.len());
    let section = empirical_section(s)?;
    let section_flat: Vec<f64> = section.rows().flatten().copied().collect();
    let warm: Vec<f64> = section_flat
        .iter()
        .map(|p| p.max(WARM_START_FLOOR).ln())
        .collect();

    // The maxima inside W make the objective nonsmooth, so descent runs on
    // smoothed surrogates with a shrinking temperature, then on the exact
    // objective. Every stage is monitored with the exact objective and the
    // best exact iterate is kept.
    let mut best: Option<Run> = None;
    let mut trace: Vec<f64> = Vec::new();
    let mut z = None;
    for &tau in SMOOTHING_SCHEDULE.iter().chain(&[0.0]) {
        let surrogate = objective_at(tau)?;
        let run = match z.take() {
            None => multi_start(
                &surrogate,
                n,
                m,
                config,
                std::slice::from_ref(&warm),
                Some(&exact),
            )?,
            Some(z0) => descend(&surrogate, z0, m, config, Some(&exact))?,
        };
        for &v in &run.trace {
            let floor = trace.last().copied().unwrap_or(f64::INFINITY);
            trace.push(v.min(floor));
        }
        z = Some(run.z_end.clone());
        if best.as_ref().is_none_or(|b| run.value < b.value) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one stage");
    let section_value = exact.value(&section_flat)?;
    let probe = grid_probe(&exact, n, m, config)?;
    let competitor = section_value.min(probe);
    let h = kernel_from_flat(source, target, &best.p)?;
    let fidelity = exact.fidelity.value(&best.p)?;
    let w = exact.w.eval(&best.p, false)?.0;
    let eps = (best.value - competitor).max(0.0);
    Ok(RegularizedEstimate {
        h,
        objective: best.value,
        fidelity,
        w,
        gamma,
        eps_certificate: eps,
        meets_contract: eps <= gamma * gamma,
        trace,
    })
}

/// Rows at observed `x` are the empirical conditional; unobserved rows are
/// uniform.
pub fn empirical_section(s: &Dataset) -> Result<MarkovKernel> {
    if s.is_empty() {
        return Err(Error::EmptyData);
    }
    let (n, m) = (s.x_space().len(), s.y_space().len());
    let mut counts = vec![0usize; n * m];
    for &(x, y) in s.samples() {
        counts[x * m + y] += 1;
    }
    let rows = counts
        .chunks(m)
        .map(|row| {
            let total: usize = row.iter().sum();
            if total == 0 {
                vec![1.0 / m as f64; m]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect();
    MarkovKernel::new(s.x_space(), s.y_space(), rows)
}

/// Componentwise Newton form through `(x_i, Y_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonInterpolant {
    #[serde(skip)]
    space: Option<SpaceRef>,
    nodes: Vec<f64>,
    /// `coefficients[k]` is the order-`k` divided difference, one entry per point of `Y`.
    coefficients: Vec<Vec<f64>>,
}

pub fn newton_interpolant(nodes: &[(f64, ProbMeasure)]) -> Result<NewtonInterpolant> {
    let first = nodes.first().ok_or(Error::EmptyData)?;
    if nodes.len() > MAX_INTERPOLATION_NODES {
        return Err(Error::TooManyNodes(nodes.len()));
    }
    let space = first.1.space().clone();
    for (i, (x, mu)) in nodes.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        ensure_same(&space, mu.space(), "interpolation node").map_err(|e| e.in_row(i))?;
        if nodes[..i].iter().any(|(prev, _)| prev == x) {
            return Err(Error::DuplicateAbscissa(*x));
        }
    }
    let xs: Vec<f64> = nodes.iter().map(|(x, _)| *x).collect();
    let mut table: Vec<Vec<f64>> = nodes.iter().map(|(_, mu)| mu.weights().to_vec()).collect();
    let mut coefficients = vec![table[0].clone()];
    for order in 1..xs.len() {
        for i in 0..xs.len() - order {
            let span = xs[i + order] - xs[i];
            table[i] = table[i]
                .iter()
                .zip(&table[i + 1])
                .map(|(a, b)| (b - a) / span)
                .collect();
        }
        coefficients.push(table[0].clone());
    }
    Ok(NewtonInterpolant {
        space: Some(space),
        nodes: xs,
        coefficients,
    })
}

impl NewtonInterpolant {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn coefficients(&self) -> &[Vec<f64>] {
        &self.coefficients
    }

    /// Horner evaluation of every component but the last, which is taken as
    /// one minus the others: the interpolant of the total mass is the
    /// constant 1, and this keeps the sum exact up to one rounding.
    fn horner(&self, x: f64) -> Vec<f64> {
        let k = self.coefficients.len();
        let m = self.coefficients[0].len();
        let mut acc = self.coefficients[k - 1].clone();
        for order in (0..k - 1).rev() {
            let factor = x - self.nodes[order];
            for (a, c) in acc.iter_mut().zip(&self.coefficients[order]) {
                *a = *a * factor + c;
            }
        }
        acc[m - 1] = 1.0 - compensated_sum(acc[..m - 1].iter().copied());
        acc
    }

    /// Raw polynomial value; components sum to 1 but may be negative.
    pub fn eval(&self, x: f64) -> SignedMeasure {
        let space = self.space.clone().expect("interpolant built from nodes");
        SignedMeasure::new(&space, self.horner(x)).expect("finite interpolant value")
    }

    /// The raw value projected onto the probability simplex.
    pub fn eval_projected(&self, x: f64) -> ProbMeasure {
        let space = self.space.clone().expect("interpolant built from nodes");
        ProbMeasure::new(&space, project_to_simplex(&self.horner(x)))
            .expect("projection lies in the simplex")
    }
}

fn kernel_from_flat(source: &SpaceRef, target: &SpaceRef, p: &[f64]) -> Result<MarkovKernel> {
    MarkovKernel::from_signed(SignedKernel::from_flat(
        source.clone(),
        target.clone(),
        p.to_vec(),
    ))
}

/// A differentiable objective over flattened row-major kernels.
trait Objective: Sync {
    fn value(&self, p: &[f64]) -> Result<f64>;
    fn value_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Empirical joint and marginal of a dataset as flat weight vectors.
struct EmpiricalFit {
    px: Vec<f64>,
    pxy: Vec<f64>,
    m: usize,
}

impl EmpiricalFit {
    fn new(s: &Dataset) -> Result<Self> {
        let joint = s.empirical()?;
        let m = s.y_space().len();
        let pxy = joint.weights().to_vec();
        let px = pxy
            .chunks(m)
            .map(|row| compensated_sum(row.iter().copied()))
            .collect();
        Ok(EmpiricalFit { px, pxy, m })
    }
}

struct QuadraticRisk {
    g: GramMatrix,
    fit: EmpiricalFit,
}

impl QuadraticRisk {
    fn eval(&self, p: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let m = self.fit.m;
        let mut terms = Vec::new();
        let mut grad = if want_grad {
            vec![0.0; p.len()]
        } else {
            Vec::new()
        };
        for (x, row) in p.chunks(m).enumerate() {
            let px = self.fit.px[x];
            let target = &self.fit.pxy[x * m..(x + 1) * m];
            if px == 0.0 {
                continue;
            }
            let gr = self.g.apply(row);
            let gt = self.g.apply(target);
            terms.push(px * compensated_sum(row.iter().zip(&gr).map(|(a, b)| a * b)));
            terms.push(-2.0 * compensated_sum(target.iter().zip(&gr).map(|(a, b)| a * b)));
            for (y, &t) in target.iter().enumerate() {
                terms.push(t * self.g.get(y, y));
            }
            if want_grad {
                for y in 0..m {
                    grad[x * m + y] = 2.0 * px * gr[y] - 2.0 * gt[y];
                }
            }
        }
        (compensated_sum(terms), grad)
    }
}

impl Objective for QuadraticRisk {
    fn value(&self, p: &[f64]) -> Result<f64> {
        Ok(self.eval(p, false).0)
    }
    fn value_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(self.eval(p, true))
    }
}

/// `‖(Γ_h)_* p_X − p‖²` in the joint Gram matrix.
struct MmdFidelity {
    g: GramMatrix,
    fit: EmpiricalFit,
}

impl MmdFidelity {
    fn eval(&self, p: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
        let m = self.fit.m;
        let d: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(k, r)| self.fit.px[k / m] * r - self.fit.pxy[k])
            .collect();
        let gd = self.g.apply(&d);
        let mut v = compensated_sum(d.iter().zip(&gd).map(|(a, b)| a * b));
        if (-MMD_CLAMP_TOL..0.0).contains(&v) {
            v = 0.0;
        } else if v < 0.0 {
            return Err(Error::NegativeRadicand(v));
        }
        let grad = if want_grad {
            gd.iter()
                .enumerate()
                .map(|(k, g)| 2.0 * self.fit.px[k / m] * g)
                .collect()
        } else {
            Vec::new()
        };
        Ok((v, grad))
    }
}

impl Objective for MmdFidelity {
    fn value(&self, p: &[f64]) -> Result<f64> {
        Ok(self.eval(p, false)?.0)
    }
    fn value_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.eval(p, true)
    }
}

/// Source pairs `(i, j, ‖x_i − x_j‖₂)` the Lipschitz term ranges over.
fn lipschitz_pairs(source: &SpaceRef) -> Result<Vec<(usize, usize, f64)>> {
    let coords = source.coords().ok_or_else(|| Error::MissingCoords {
        kernel: "lipschitz term".into(),
    })?;
    let n = coords.len();
    let dist = |i: usize, j: usize| -> f64 {
        coords[i]
            .iter()
            .zip(&coords[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    if n <= LIPSCHITZ_ALL_PAIRS_MAX {
        return Ok((0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, dist(i, j)))
            .collect());
    }
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let j = (0..n)
            .filter(|&j| j != i)
            .min_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)))
            .expect("at least two points");
        pairs.push((i.min(j), i.max(j), dist(i, j)));
    }
    pairs.sort_by_key(|p| (p.0, p.1));
    pairs.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    Ok(pairs)
}

fn row_distance_sq(g: &GramMatrix, a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let gd = g.apply(&d);
    let v = compensated_sum(d.iter().zip(&gd).map(|(x, y)| x * y)).max(0.0);
    (v, gd)
}

/// Max row-distance quotient over `pairs`, with a subgradient at the argmax.
fn lipschitz_term(
    g: &GramMatrix,
    pairs: &[(usize, usize, f64)],
    p: &[f64],
    m: usize,
    labels: &SpaceRef,
    want_grad: bool,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut quotients = Vec::with_capacity(pairs.len());
    let mut parts = Vec::with_capacity(pairs.len());
    for &(i, j, d) in pairs {
        let (sq, gd) = row_distance_sq(g, &p[i * m..(i + 1) * m], &p[j * m..(j + 1) * m]);
        if d == 0.0 {
            if sq.sqrt() > 1e-12 {
                return Err(Error::InfiniteLipschitz(
                    labels.label(i).to_string(),
                    labels.label(j).to_string(),
                ));
            }
            continue;
        }
        // smoothed norm: sqrt(sq + τ²) − τ, the plain norm at τ = 0
        let root = (sq + tau * tau).sqrt();
        quotients.push((root - tau) / d);
        parts.push((i, j, d, root, gd));
    }
    let mut grad = if want_grad {
        vec![0.0; p.len()]
    } else {
        Vec::new()
    };
    if quotients.is_empty() {
        return Ok((0.0, grad));
    }
    let (q, weights) = soft_max(&quotients, tau);
    if want_grad {
        for ((i, j, d, root, gd), wt) in parts.into_iter().zip(weights) {
            if wt == 0.0 || root == 0.0 {
                continue;
            }
            for y in 0..m {
                let v = wt * gd[y] / (root * d);
                grad[i * m + y] += v;
                grad[j * m + y] -= v;
            }
        }
    }
    Ok((q, grad))
}

/// `τ·log Σ exp(v/τ)` with its gradient weights; the plain maximum (weight
/// on the first maximizer) at `τ = 0`.
fn soft_max(values: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let (k, &top) = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("nonempty values");
    if tau == 0.0 {
        let mut w = vec![0.0; values.len()];
        w[k] = 1.0;
        return (top, w);
    }
    let e: Vec<f64> = values.iter().map(|v| ((v - top) / tau).exp()).collect();
    let total = compensated_sum(e.iter().copied());
    (
        top + tau * total.ln(),
        e.into_iter().map(|v| v / total).collect(),
    )
}

struct WEvaluator<'a> {
    spec: &'a WFunctionalSpec,
    pairs: &'a [(usize, usize, f64)],
    source: &'a SpaceRef,
    target: &'a SpaceRef,
    /// Temperature of the smoothed maxima; 0 evaluates W exactly.
    smoothing: f64,
}

impl WEvaluator<'_> {
    fn eval(&self, p: &[f64], want_grad: bool) -> Result<(WTerms, Vec<f64>)> {
        let (n, m) = (self.source.len(), self.target.len());
        let spec = self.spec;
        let tau = self.smoothing;
        let mut d_sum = if want_grad {
            vec![0.0; p.len()]
        } else {
            Vec::new()
        };

        let mut sup = 0.0;
        if spec.include_sup {
            let mut values = Vec::with_capacity(n);
            let mut parts = Vec::with_capacity(n);
            for x in 0..n {
                let row = &p[x * m..(x + 1) * m];
                let gr = spec.g_y.apply(row);
                let a = compensated_sum(row.iter().zip(&gr).map(|(u, v)| u * v))
                    .max(0.0)
                    .sqrt();
                let g1r: Vec<f64> = (0..m)
                    .map(|y| {
                        compensated_sum(
                            (0..m).map(|z| spec.g_xy.get(x * m + y, x * m + z) * row[z]),
                        )
                    })
                    .collect();
                let b = compensated_sum(row.iter().zip(&g1r).map(|(u, v)| u * v))
                    .max(0.0)
                    .sqrt();
                values.push(a + b);
                parts.push((a, gr, b, g1r));
            }
            let (value, weights) = soft_max(&values, tau);
            sup = value;
            if want_grad {
                for (x, ((a, gr, b, g1r), wt)) in parts.into_iter().zip(weights).enumerate() {
                    if wt == 0.0 {
                        continue;
                    }
                    for y in 0..m {
                        let mut v = 0.0;
                        if a > 0.0 {
                            v += gr[y] / a;
                        }
                        if b > 0.0 {
                            v += g1r[y] / b;
                        }
                        d_sum[x * m + y] += wt * v;
                    }
                }
            }
        }

        let mut lipschitz = 0.0;
        if spec.include_lipschitz {
            let (l, grad) =
                lipschitz_term(&spec.g_y, self.pairs, p, m, self.source, want_grad, tau)?;
            lipschitz = l;
            if want_grad {
                for (a, b) in d_sum.iter_mut().zip(grad) {
                    *a += b;
                }
            }
        }

        let mut operator_norm = 0.0;
        if spec.include_operator_norm {
            let g_x = spec.g_x.as_ref().expect("validated at construction");
            let t = SignedKernel::from_flat(self.source.clone(), self.target.clone(), p.to_vec());
            let spectrum = if tau == 0.0 {
                let top = operator_norm_parts(&t, g_x, &spec.g_xy)?;
                if n < 2 {
                    Vec::new()
                } else {
                    vec![top]
                }
            } else {
                operator_spectrum(&t, g_x, &spec.g_xy)?
            };
            if !spectrum.is_empty() {
                // smoothed singular values sqrt(λ + τ²)
                let sigmas: Vec<f64> = spectrum
                    .iter()
                    .map(|e| (e.norm * e.norm + tau * tau).sqrt())
                    .collect();
                let (value, weights) = soft_max(&sigmas, tau);
                operator_norm = value;
                if want_grad {
                    for ((e, sigma), wt) in spectrum.iter().zip(&sigmas).zip(weights) {
                        if wt == 0.0 || *sigma == 0.0 {
                            continue;
                        }
                        let u = &e.direction;
                        let w: Vec<f64> = p.iter().enumerate().map(|(k, r)| u[k / m] * r).collect();
                        let gw = spec.g_xy.apply(&w);
                        for k in 0..p.len() {
                            d_sum[k] += wt * 2.0 * u[k / m] * gw[k] / (2.0 * sigma);
                        }
                    }
                }
            }
        }

        let total = sup + lipschitz + operator_norm;
        let terms = WTerms {
            sup,
            lipschitz,
            operator_norm,
            value: total * total,
        };
        let grad = if want_grad {
            d_sum.into_iter().map(|g| 2.0 * total * g).collect()
        } else {
            Vec::new()
        };
        Ok((terms, grad))
    }
}

struct Regularized<'a> {
    fidelity: MmdFidelity,
    gamma: f64,
    w: WEvaluator<'a>,
}

impl Objective for Regularized<'_> {
    fn value(&self, p: &[f64]) -> Result<f64> {
        Ok(self.fidelity.value(p)? + self.gamma * self.w.eval(p, false)?.0.value)
    }

    fn value_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (f, gf) = self.fidelity.value_grad(p)?;
        let (w, gw) = self.w.eval(p, true)?;
        let grad = gf
            .iter()
            .zip(&gw)
            .map(|(a, b)| a + self.gamma * b)
            .collect();
        Ok((f + self.gamma * w.value, grad))
    }
}

struct LipschitzPenalized {
    base: Box<dyn Objective>,
    budget: f64,
    metric: GramMatrix,
    pairs: Vec<(usize, usize, f64)>,
}

impl LipschitzPenalized {
    fn m(&self) -> usize {
        self.metric.len()
    }
}

impl Objective for LipschitzPenalized {
    fn value(&self, p: &[f64]) -> Result<f64> {
        let labels = FiniteSpace::indexed("x", p.len() / self.m())?;
        let (l, _) = lipschitz_term(&self.metric, &self.pairs, p, self.m(), &labels, false, 0.0)?;
        Ok(self.base.value(p)? + LIPSCHITZ_PENALTY * (l - self.budget).max(0.0))
    }

    fn value_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let labels = FiniteSpace::indexed("x", p.len() / self.m())?;
        let (l, gl) = lipschitz_term(&self.metric, &self.pairs, p, self.m(), &labels, true, 0.0)?;
        let (v, mut g) = self.base.value_grad(p)?;
        if l > self.budget {
            for (a, b) in g.iter_mut().zip(gl) {
                *a += LIPSCHITZ_PENALTY * b;
            }
        }
        Ok((v + LIPSCHITZ_PENALTY * (l - self.budget).max(0.0), g))
    }
}

fn softmax_rows(z: &[f64], m: usize) -> Vec<f64> {
    z.chunks(m).flat_map(softmax).collect()
}

#[cfg(test)]
/// Gradient with respect to logits from the gradient with respect to rows.
fn chain_softmax(p: &[f64], g: &[f64], m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.len());
    for (pr, gr) in p.chunks(m).zip(g.chunks(m)) {
        let mean = compensated_sum(pr.iter().zip(gr).map(|(a, b)| a * b));
        out.extend(pr.iter().zip(gr).map(|(a, b)| a * (b - mean)));
    }
    out
}

/// Counter-based seed derivation (splitmix64 finalizer).
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Run {
    /// Best iterate: the last one, or the best under the monitor if any.
    p: Vec<f64>,
    value: f64,
    trace: Vec<f64>,
    /// Logits of the last iterate and the objective value there.
    z_end: Vec<f64>,
    end_value: f64,
}

fn divergence(iteration: usize, objective: f64, trace: &[f64]) -> Error {
    let tail = trace[trace.len().saturating_sub(10)..].to_vec();
    Error::Divergence {
        iteration,
        objective,
        trace: tail,
    }
}

/// Row-block descent on logits. Each row moves along the centred
/// exponentiated-gradient direction with its own step size, accepted only
/// under an Armijo decrease of the full objective; steps grow after each
/// accepted move. The trace holds one entry per sweep: the objective, or,
/// with a `monitor`, the best monitored value so far. Either is nonincreasing.
fn descend(
    obj: &dyn Objective,
    mut z: Vec<f64>,
    m: usize,
    config: &LearnerConfig,
    monitor: Option<&dyn Objective>,
) -> Result<Run> {
    let n = z.len() / m;
    let mut p = softmax_rows(&z, m);
    let (mut f, mut g) = obj.value_grad(&p)?;
    let mut trace = vec![f];
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(divergence(0, f, &trace));
    }
    let mut best = match monitor {
        Some(mon) => {
            let v = mon.value(&p)?;
            trace[0] = v;
            Some((v, p.clone()))
        }
        None => None,
    };
    let mut steps = vec![config.step_size; n];
    for iteration in 1..=config.max_iters {
        let start = f;
        let mut max_slope = 0.0_f64;
        for x in 0..n {
            let row = x * m..(x + 1) * m;
            let (pr, gr) = (&p[row.clone()], &g[row.clone()]);
            let mean = compensated_sum(pr.iter().zip(gr).map(|(a, b)| a * b));
            let dir: Vec<f64> = gr.iter().map(|v| mean - v).collect();
            let slope = compensated_sum(pr.iter().zip(&dir).map(|(a, d)| a * d * d));
            max_slope = max_slope.max(slope);
            if slope.sqrt() <= config.tol {
                continue;
            }
            let mut accepted = false;
            for _ in 0..MAX_BACKTRACKS {
                let t = steps[x];
                let z_row: Vec<f64> = z[row.clone()]
                    .iter()
                    .zip(&dir)
                    .map(|(a, d)| a + t * d)
                    .collect();
                let mut p_new = p.clone();
                p_new[row.clone()].copy_from_slice(&softmax(&z_row));
                let f_new = obj.value(&p_new)?;
                if !f_new.is_finite() {
                    return Err(divergence(iteration, f_new, &trace));
                }
                if f_new <= f - ARMIJO_C * t * slope {
                    z[row.clone()].copy_from_slice(&z_row);
                    p = p_new;
                    f = f_new;
                    steps[x] = (t * 2.0).min(MAX_STEP);
                    accepted = true;
                    break;
                }
                steps[x] = t * 0.5;
            }
            if !accepted {
                steps[x] = config.step_size;
            }
        }
        if max_slope.sqrt() <= config.tol || f >= start {
            break;
        }
        let (f_new, g_new) = obj.value_grad(&p)?;
        if !f_new.is_finite() || g_new.iter().any(|v| !v.is_finite()) {
            return Err(divergence(iteration, f_new, &trace));
        }
        f = f_new;
        g = g_new;
        match (monitor, best.as_mut()) {
            (Some(mon), Some(b)) => {
                let v = mon.value(&p)?;
                if v < b.0 {
                    *b = (v, p.clone());
                }
                trace.push(b.0);
            }
            _ => trace.push(f),
        }
    }
    let (value, best_p) = match best {
        Some((v, bp)) => (v, bp),
        None => (f, p),
    };
    Ok(Run {
        p: best_p,
        value,
        trace,
        z_end: z,
        end_value: f,
    })
}

/// Restart 0 starts from uniform rows, the `warm` starts follow, and the
/// remaining restarts draw standard normal logits from per-restart streams.
/// The winner has the lowest `value`, or the lowest end value of `obj` when
/// a monitor is given.
fn multi_start(
    obj: &dyn Objective,
    n: usize,
    m: usize,
    config: &LearnerConfig,
    warm: &[Vec<f64>],
    monitor: Option<&dyn Objective>,
) -> Result<Run> {
    let starts = config.restarts + warm.len();
    let runs: Vec<Result<Run>> = (0..starts)
        .into_par_iter()
        .map(|k| {
            let z0 = if k == 0 {
                vec![0.0; n * m]
            } else if k <= warm.len() {
                warm[k - 1].clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, k as u64));
                (0..n * m)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            };
            descend(obj, z0, m, config, monitor)
        })
        .collect();
    let key = |r: &Run| {
        if monitor.is_some() {
            r.end_value
        } else {
            r.value
        }
    };
    let mut best: Option<Run> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().is_none_or(|b| key(&run) < key(b)) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Points of the simplex grid with the given resolution.
fn simplex_grid(m: usize, resolution: usize) -> Vec<Vec<f64>> {
    fn rec(m: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == m - 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=left {
            prefix.push(k);
            rec(m, left - k, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(m, resolution, &mut Vec::new(), &mut out);
    out.into_iter()
        .map(|c| {
            c.into_iter()
                .map(|k| k as f64 / resolution as f64)
                .collect()
        })
        .collect()
}

fn probe_grid(m: usize) -> Vec<Vec<f64>> {
    // resolution 1/4 while the grid stays small, coarser otherwise
    let count = |r: usize| -> usize {
        let mut c = 1usize;
        for i in 0..r {
            c = c * (m + i) / (i + 1);
        }
        c
    };
    let resolution = [4, 2, 1]
        .into_iter()
        .find(|&r| count(r) <= 1000)
        .unwrap_or(1);
    simplex_grid(m, resolution)
}

/// Block-coordinate search over a coarse simplex grid, one row at a time in
/// a seeded order, from uniform rows; the best value across probes.
fn grid_probe(obj: &dyn Objective, n: usize, m: usize, config: &LearnerConfig) -> Result<f64> {
    const SWEEPS: usize = 2;
    let grid = probe_grid(m);
    let results: Vec<Result<f64>> = (0..config.restarts)
        .into_par_iter()
        .map(|k| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(config.seed ^ PROBE_SALT, k as u64));
            let mut p = vec![1.0 / m as f64; n * m];
            let mut best = obj.value(&p)?;
            let mut order: Vec<usize> = (0..n).collect();
            for _ in 0..SWEEPS {
                order.shuffle(&mut rng);
                for &x in &order {
                    let keep = p[x * m..(x + 1) * m].to_vec();
                    let mut choice = keep.clone();
                    for point in &grid {
                        p[x * m..(x + 1) * m].copy_from_slice(point);
                        let v = obj.value(&p)?;
                        if v < best {
                            best = v;
                            choice = point.clone();
                        }
                    }
                    p[x * m..(x + 1) * m].copy_from_slice(&choice);
                }
            }
            Ok(best)
        })
        .collect();
    let mut best = f64::INFINITY;
    for r in results {
        best = best.min(r?);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram, mmd, KernelSpec};
    use crate::losses::empirical_risk;
    use crate::morphisms::{graph_pushforward, ZeroRowPolicy};
    use proptest::prelude::*;

    fn sp(prefix: &str, n: usize) -> SpaceRef {
        FiniteSpace::indexed(prefix, n).unwrap()
    }

    fn delta(space: &SpaceRef) -> GramMatrix {
        gram(&KernelSpec::delta(), space).unwrap()
    }

    fn quick() -> LearnerConfig {
        LearnerConfig {
            restarts: 3,
            ..LearnerConfig::with_seed(7)
        }
    }

    #[test]
    fn gamma_schedule_examples() {
        assert_eq!(gamma_schedule(1), 1.0);
        assert_eq!(gamma_schedule(4), 0.5);
        assert!((gamma_schedule(100) - 0.1).abs() < 1e-15);
        assert!(gamma_schedule(101) < gamma_schedule(100));
    }

    #[test]
    fn schedules_and_config_validation() {
        let c = Schedule::Power {
            coef: 2.0,
            exponent: 1.0,
        };
        assert_eq!(c.at(4), 0.5);
        assert_eq!(Schedule::Constant { value: 0.3 }.at(10), 0.3);
        let mut cfg = LearnerConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.c_schedule = Schedule::Power {
            coef: 1.0,
            exponent: -1.0,
        };
        assert!(cfg.validate().is_err());
        cfg = LearnerConfig {
            restarts: 0,
            ..LearnerConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = LearnerConfig {
            gamma_schedule: Schedule::Constant { value: 0.0 },
            ..LearnerConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cerm_finite_picks_lower_risk() {
        let (x, y) = (sp("x", 2), sp("y", 2));
        let s = Dataset::new(
            &x,
            &y,
            &[("x0", "y0"), ("x0", "y0"), ("x0", "y1"), ("x1", "y1")],
        )
        .unwrap();
        let g = delta(&y);
        let cond = empirical_section(&s).unwrap();
        let uniform = MarkovKernel::uniform(&x, &y);
        let class = HypothesisClass::finite(vec![uniform.clone(), cond.clone()]).unwrap();
        let out = cerm(&class, &s, RiskSelector::Quadratic(&g), &quick()).unwrap();
        let rc = empirical_risk(&cond, &s, &g).unwrap().value;
        let ru = empirical_risk(&uniform, &s, &g).unwrap().value;
        assert!(rc < ru);
        assert_eq!(out.h, cond);
        assert_eq!(out.risk, rc);
        assert_eq!(out.certified_gap, 0.0);
        assert_eq!(out.contract_holds, Some(true));

        let single = HypothesisClass::finite(vec![uniform.clone()]).unwrap();
        let out = cerm(&single, &s, RiskSelector::Quadratic(&g), &quick()).unwrap();
        assert_eq!((out.h, out.certified_gap), (uniform, 0.0));
    }

    #[test]
    fn cerm_finite_breaks_ties_by_index() {
        let (x, y) = (sp("x", 1), sp("y", 2));
        let s = Dataset::new(&x, &y, &[("x0", "y0"), ("x0", "y1")]).unwrap();
        let a = MarkovKernel::new(&x, &y, vec![vec![1.0, 0.0]]).unwrap();
        let b = MarkovKernel::new(&x, &y, vec![vec![0.0, 1.0]]).unwrap();
        let class = HypothesisClass::finite(vec![b.clone(), a]).unwrap();
        let out = cerm(&class, &s, RiskSelector::Quadratic(&delta(&y)), &quick()).unwrap();
        assert_eq!(out.h, b);
    }

    #[test]
    fn cerm_parametric_recovers_empirical_conditional() {
        let (x, y) = (sp("x", 1), sp("y", 3));
        let s = Dataset::new(
            &x,
            &y,
            &[
                ("x0", "y0"),
                ("x0", "y1"),
                ("x0", "y1"),
                ("x0", "y2"),
                ("x0", "y2"),
                ("x0", "y2"),
            ],
        )
        .unwrap();
        let g = delta(&y);
        let class = HypothesisClass::parametric(&x, &y);
        let out = cerm(&class, &s, RiskSelector::Quadratic(&g), &quick()).unwrap();
        let nu = empirical_section(&s).unwrap();
        let err = mmd(&g, &out.h.row_measure(0), &nu.row_measure(0)).unwrap();
        assert!(err < 1e-3, "{err}");
        assert!(out.contract_holds.is_none());
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn cerm_squared_mmd_selector_recovers_conditional() {
        let (x, y) = (sp("x", 2), sp("y", 2));
        let s = Dataset::new(
            &x,
            &y,
            &[("x0", "y0"), ("x0", "y1"), ("x0", "y1"), ("x1", "y0")],
        )
        .unwrap();
        let g = delta(s.space());
        let out = cerm(
            &HypothesisClass::parametric(&x, &y),
            &s,
            RiskSelector::SquaredMmdCorrect(&g),
            &quick(),
        )
        .unwrap();
        let section = empirical_section(&s).unwrap();
        assert!(out.h.max_abs_diff(&section) < 1e-3, "{:?}", out.h);
    }

    #[test]
    fn cerm_lipschitz_grid_respects_budget() {
        let x = FiniteSpace::line("x", &[0.0, 1.0]).unwrap();
        let y = sp("y", 2);
        let s = Dataset::new(&x, &y, &[("x0", "y0"), ("x1", "y1")]).unwrap();
        let g = delta(&y);
        let class = HypothesisClass::lipschitz_grid(&x, &y, 0.2, g.clone()).unwrap();
        let out = cerm(&class, &s, RiskSelector::Quadratic(&g), &quick()).unwrap();
        let d = mmd(&g, &out.h.row_measure(0), &out.h.row_measure(1)).unwrap();
        assert!(d <= 0.2 + 1e-3, "{d}");
        assert!(HypothesisClass::lipschitz_grid(&sp("x", 2), &y, 0.2, g).is_err());
    }

    #[test]
    fn cerm_rejects_empty_data() {
        let (x, y) = (sp("x", 1), sp("y", 2));
        let s = Dataset::new::<&str, &str>(&x, &y, &[]).unwrap();
        let class = HypothesisClass::parametric(&x, &y);
        assert_eq!(
            cerm(&class, &s, RiskSelector::Quadratic(&delta(&y)), &quick()).unwrap_err(),
            Error::EmptyData
        );
    }

    #[test]
    fn realize_uses_softmax_rows() {
        let (x, y) = (sp("x", 1), sp("y", 2));
        let class = HypothesisClass::parametric(&x, &y);
        let h = class.realize(&[vec![0.0, 2f64.ln()]]).unwrap();
        assert!((h.entry(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!(class.realize(&[vec![0.0, f64::NAN]]).is_err());
    }

    fn w_spec(x: &SpaceRef, y: &SpaceRef, sup: bool, lip: bool, op: bool) -> WFunctionalSpec {
        let xy = FiniteSpace::product(x, y);
        WFunctionalSpec::with_terms(delta(y), delta(&xy), Some(delta(x)), sup, lip, op).unwrap()
    }

    #[test]
    fn w_functional_constant_kernel_sup_only() {
        let x = FiniteSpace::line("x", &[0.0, 1.0, 2.0]).unwrap();
        let y = sp("y", 3);
        let nu = ProbMeasure::new(&y, vec![0.2, 0.3, 0.5]).unwrap();
        let h = MarkovKernel::constant(&x, &nu);
        let norm: f64 = nu.weights().iter().map(|v| v * v).sum::<f64>().sqrt();
        // under delta kernels a graph row has the same Euclidean norm as its row
        let expected = (norm + norm).powi(2);
        let got = w_functional(&h, &w_spec(&x, &y, true, false, false)).unwrap();
        assert!((got - expected).abs() < 1e-14);
        let terms = w_terms(&h, &w_spec(&x, &y, true, true, false)).unwrap();
        assert_eq!(terms.lipschitz, 0.0);
    }

    #[test]
    fn w_lipschitz_scales_inversely_with_coords() {
        let y = sp("y", 2);
        let rows = vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]];
        let x1 = FiniteSpace::line("x", &[0.0, 1.0, 3.0]).unwrap();
        let x2 = FiniteSpace::line("x", &[0.0, 2.0, 6.0]).unwrap();
        let l1 = w_terms(
            &MarkovKernel::new(&x1, &y, rows.clone()).unwrap(),
            &w_spec(&x1, &y, false, true, false),
        )
        .unwrap();
        let l2 = w_terms(
            &MarkovKernel::new(&x2, &y, rows).unwrap(),
            &w_spec(&x2, &y, false, true, false),
        )
        .unwrap();
        assert!((l1.lipschitz - 2.0 * l2.lipschitz).abs() < 1e-14);
        assert!((l1.lipschitz - 0.5f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn w_rejects_duplicate_coords_with_different_rows() {
        let x = FiniteSpace::line("x", &[0.0, 0.0]).unwrap();
        let y = sp("y", 2);
        let h = MarkovKernel::new(&x, &y, vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            w_functional(&h, &w_spec(&x, &y, true, true, false)),
            Err(Error::InfiniteLipschitz(_, _))
        ));
        let same = MarkovKernel::uniform(&x, &y);
        assert!(w_functional(&same, &w_spec(&x, &y, true, true, false)).is_ok());
        let unplaced = sp("x", 2);
        assert!(matches!(
            w_functional(
                &MarkovKernel::uniform(&unplaced, &y),
                &w_spec(&unplaced, &y, false, true, false)
            ),
            Err(Error::MissingCoords { .. })
        ));
    }

    #[test]
    fn w_default_spec_gates_operator_norm_by_size() {
        let y = sp("y", 2);
        for (n, expected) in [(4, true), (40, false)] {
            let x = FiniteSpace::line("x", &(0..n).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
            let spec = WFunctionalSpec::new(
                delta(&y),
                delta(&FiniteSpace::product(&x, &y)),
                Some(delta(&x)),
            )
            .unwrap();
            assert_eq!(spec.include_operator_norm, expected);
            assert!(spec.include_sup && spec.include_lipschitz);
        }
        let x = sp("x", 2);
        let xy = FiniteSpace::product(&x, &y);
        assert!(
            WFunctionalSpec::with_terms(delta(&y), delta(&xy), None, false, false, false).is_err()
        );
        assert!(
            WFunctionalSpec::with_terms(delta(&y), delta(&xy), None, false, false, true).is_err()
        );
    }

    #[test]
    fn w_terms_are_monotone_in_enabled_set() {
        let x = FiniteSpace::line("x", &[0.0, 0.5, 2.0]).unwrap();
        let y = sp("y", 2);
        let h = MarkovKernel::new(&x, &y, vec![vec![0.9, 0.1], vec![0.4, 0.6], vec![0.2, 0.8]])
            .unwrap();
        let a = w_functional(&h, &w_spec(&x, &y, true, false, false)).unwrap();
        let b = w_functional(&h, &w_spec(&x, &y, true, true, false)).unwrap();
        let c = w_functional(&h, &w_spec(&x, &y, true, true, true)).unwrap();
        assert!(a <= b && b <= c);
    }

    #[test]
    fn lipschitz_nearest_neighbour_pairs_above_threshold() {
        let n = LIPSCHITZ_ALL_PAIRS_MAX + 4;
        let x = FiniteSpace::line("x", &(0..n).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        let pairs = lipschitz_pairs(&x).unwrap();
        assert_eq!(pairs.len(), n - 1);
        assert!(pairs.iter().all(|&(i, j, d)| j == i + 1 && d == 1.0));
    }

    fn fd_check(obj: &dyn Objective, p: &[f64], m: usize) {
        // compare logit-space gradients against central differences
        let z: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        let (_, g) = obj.value_grad(p).unwrap();
        let gz = chain_softmax(p, &g, m);
        let h = 1e-6;
        for k in 0..z.len() {
            let mut zp = z.clone();
            zp[k] += h;
            let mut zm = z.clone();
            zm[k] -= h;
            let fd = (obj.value(&softmax_rows(&zp, m)).unwrap()
                - obj.value(&softmax_rows(&zm, m)).unwrap())
                / (2.0 * h);
            assert!(
                (fd - gz[k]).abs() < 1e-5 * (1.0 + fd.abs()),
                "coordinate {k}: fd {fd} vs {}",
                gz[k]
            );
        }
    }

    fn sample_problem() -> (Dataset, Vec<f64>) {
        let x = FiniteSpace::line("x", &[0.0, 0.7, 1.5]).unwrap();
        let y = FiniteSpace::line("y", &[0.0, 1.0, 2.5]).unwrap();
        let s = Dataset::new(
            &x,
            &y,
            &[
                ("x0", "y0"),
                ("x0", "y1"),
                ("x1", "y2"),
                ("x2", "y1"),
                ("x2", "y1"),
                ("x1", "y0"),
            ],
        )
        .unwrap();
        let p = vec![0.2, 0.3, 0.5, 0.6, 0.1, 0.3, 0.25, 0.45, 0.3];
        (s, p)
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (s, p) = sample_problem();
        let k = KernelSpec::gaussian(0.8).unwrap();
        let gy = gram(&k, s.y_space()).unwrap();
        let gxy = gram(&k, s.space()).unwrap();
        let gx = gram(&k, s.x_space()).unwrap();
        fd_check(
            &QuadraticRisk {
                g: gy.clone(),
                fit: EmpiricalFit::new(&s).unwrap(),
            },
            &p,
            3,
        );
        fd_check(
            &MmdFidelity {
                g: gxy.clone(),
                fit: EmpiricalFit::new(&s).unwrap(),
            },
            &p,
            3,
        );
        let spec = WFunctionalSpec::full(gy, gxy.clone(), gx).unwrap();
        let pairs = lipschitz_pairs(s.x_space()).unwrap();
        let reg = Regularized {
            fidelity: MmdFidelity {
                g: gxy,
                fit: EmpiricalFit::new(&s).unwrap(),
            },
            gamma: 0.3,
            w: WEvaluator {
                spec: &spec,
                pairs: &pairs,
                source: s.x_space(),
                target: s.y_space(),
                smoothing: 0.0,
            },
        };
        fd_check(&reg, &p, 3);
        for tau in [0.3, 0.05] {
            let smooth = Regularized {
                fidelity: MmdFidelity {
                    g: reg.fidelity.g.clone(),
                    fit: EmpiricalFit::new(&s).unwrap(),
                },
                gamma: 0.3,
                w: WEvaluator {
                    smoothing: tau,
                    ..reg.w
                },
            };
            fd_check(&smooth, &p, 3);
        }
    }

    #[test]
    fn smoothed_w_bounds_exact_and_converges() {
        let (s, p) = sample_problem();
        let k = KernelSpec::gaussian(0.8).unwrap();
        let spec = WFunctionalSpec::full(
            gram(&k, s.y_space()).unwrap(),
            gram(&k, s.space()).unwrap(),
            gram(&k, s.x_space()).unwrap(),
        )
        .unwrap();
        let pairs = lipschitz_pairs(s.x_space()).unwrap();
        let at = |tau: f64| {
            let w = WEvaluator {
                spec: &spec,
                pairs: &pairs,
                source: s.x_space(),
                target: s.y_space(),
                smoothing: tau,
            };
            w.eval(&p, false).unwrap().0
        };
        let exact = at(0.0);
        // three source points, three pairs, two sum-zero directions; nearest pair 0.7 apart
        let ln3 = 3f64.ln();
        for tau in [1e-1, 1e-2, 1e-3] {
            let t = at(tau);
            let sup = t.sup - exact.sup;
            let op = t.operator_norm - exact.operator_norm;
            let lip = t.lipschitz - exact.lipschitz;
            assert!((0.0..=tau * ln3 + 1e-12).contains(&sup), "{sup}");
            assert!(
                (0.0..=tau * (2f64.ln() + 1.0) + 1e-12).contains(&op),
                "{op}"
            );
            assert!(lip.abs() <= tau * (ln3 + 1.0 / 0.7) + 1e-12, "{lip}");
        }
    }

    #[test]
    fn quadratic_objective_matches_empirical_risk() {
        let (s, p) = sample_problem();
        let g = gram(&KernelSpec::laplacian(0.5).unwrap(), s.y_space()).unwrap();
        let obj = QuadraticRisk {
            g: g.clone(),
            fit: EmpiricalFit::new(&s).unwrap(),
        };
        let h = kernel_from_flat(s.x_space(), s.y_space(), &p).unwrap();
        assert!((obj.value(&p).unwrap() - empirical_risk(&h, &s, &g).unwrap().value).abs() < 1e-14);
    }

    #[test]
    fn regularized_estimate_point_mass() {
        let x = FiniteSpace::line("x", &[0.0]).unwrap();
        let y = sp("y", 3);
        let s = Dataset::new(&x, &y, &[("x0", "y1"); 5]).unwrap();
        let gxy = delta(s.space());
        let spec = WFunctionalSpec::new(delta(&y), gxy.clone(), Some(delta(&x))).unwrap();
        let mut prev = f64::INFINITY;
        for gamma in [1e-1, 1e-2, 1e-3] {
            let est = regularized_estimate(&s, gamma, &gxy, &spec, &quick()).unwrap();
            let gap = 1.0 - est.h.entry(0, 1);
            assert!(gap <= prev + 1e-12);
            prev = gap;
            assert!(est.trace.windows(2).all(|w| w[1] <= w[0]));
        }
        assert!(prev < 1e-2, "{prev}");
    }

    #[test]
    fn regularized_estimate_beats_empirical_section() {
        let (s, _) = sample_problem();
        let k = KernelSpec::gaussian(0.8).unwrap();
        let gxy = gram(&k, s.space()).unwrap();
        let spec = WFunctionalSpec::new(
            gram(&k, s.y_space()).unwrap(),
            gxy.clone(),
            Some(gram(&k, s.x_space()).unwrap()),
        )
        .unwrap();
        let gamma = 0.05;
        let est = regularized_estimate(&s, gamma, &gxy, &spec, &quick()).unwrap();
        let section = empirical_section(&s).unwrap();
        let section_obj = mmd_correct_loss(&section, &s.empirical().unwrap(), &gxy)
            .unwrap()
            .powi(2)
            + gamma * w_functional(&section, &spec).unwrap();
        assert!(est.objective <= section_obj + est.eps_certificate + 1e-12);
        let recomputed = mmd_correct_loss(&est.h, &s.empirical().unwrap(), &gxy)
            .unwrap()
            .powi(2)
            + gamma * w_functional(&est.h, &spec).unwrap();
        assert!((recomputed - est.objective).abs() < 1e-9);
        assert_eq!(est.meets_contract, est.eps_certificate <= gamma * gamma);
        assert!(regularized_estimate(&s, 0.0, &gxy, &spec, &quick()).is_err());
    }

    #[test]
    fn regularized_estimate_is_deterministic() {
        let (s, _) = sample_problem();
        let k = KernelSpec::gaussian(0.8).unwrap();
        let gxy = gram(&k, s.space()).unwrap();
        let spec = WFunctionalSpec::new(gram(&k, s.y_space()).unwrap(), gxy.clone(), None).unwrap();
        let a = regularized_estimate(&s, 0.1, &gxy, &spec, &quick()).unwrap();
        let b = regularized_estimate(&s, 0.1, &gxy, &spec, &quick()).unwrap();
        assert_eq!(a.h, b.h);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn empirical_section_examples() {
        let (x, y) = (sp("x", 2), sp("y", 2));
        let s = Dataset::new(&x, &y, &[("x0", "y0"), ("x0", "y0"), ("x0", "y1")]).unwrap();
        let h = empirical_section(&s).unwrap();
        assert_eq!(h.row(0), &[2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(h.row(1), &[0.5, 0.5]);
        let s = Dataset::new(&x, &y, &[("x0", "y1"), ("x1", "y0")]).unwrap();
        assert_eq!(
            empirical_section(&s).unwrap().to_rows(),
            vec![vec![0.0, 1.0], vec![1.0, 0.0]]
        );
    }

    #[test]
    fn newton_examples() {
        let y = sp("y", 2);
        let f = newton_interpolant(&[
            (0.0, ProbMeasure::dirac_at(&y, 0)),
            (1.0, ProbMeasure::dirac_at(&y, 1)),
        ])
        .unwrap();
        assert_eq!(f.eval(0.5).weights(), &[0.5, 0.5]);
        let nu = ProbMeasure::new(&y, vec![0.3, 0.7]).unwrap();
        let single = newton_interpolant(&[(2.0, nu.clone())]).unwrap();
        assert_eq!(single.eval(-10.0).weights(), nu.weights());
        let constant =
            newton_interpolant(&[(0.0, nu.clone()), (1.0, nu.clone()), (3.0, nu.clone())]).unwrap();
        assert!(constant.coefficients()[1..]
            .iter()
            .flatten()
            .all(|&c| c == 0.0));
        assert_eq!(constant.eval(7.5).weights(), nu.weights());
    }

    #[test]
    fn newton_errors_and_projection() {
        let y = sp("y", 2);
        let d = |i| ProbMeasure::dirac_at(&y, i);
        assert_eq!(
            newton_interpolant(&[(1.0, d(0)), (1.0, d(1))]).unwrap_err(),
            Error::DuplicateAbscissa(1.0)
        );
        let many: Vec<_> = (0..13).map(|i| (i as f64, d(i % 2))).collect();
        assert_eq!(
            newton_interpolant(&many).unwrap_err(),
            Error::TooManyNodes(13)
        );
        assert!(newton_interpolant(&[]).is_err());
        let f = newton_interpolant(&[(0.0, d(0)), (1.0, d(1)), (2.0, d(0))]).unwrap();
        // mass on y0 is (x − 1)², so at x = 3 the raw value is [4, −3]
        let raw = f.eval(3.0);
        assert!((raw.weights()[0] - 4.0).abs() < 1e-12 && (raw.weights()[1] + 3.0).abs() < 1e-12);
        let projected = f.eval_projected(3.0);
        assert_eq!(projected.weights(), &[1.0, 0.0]);
        assert!(projected
            .weights()
            .iter()
            .all(|&w| (0.0..=1.0).contains(&w)));
        assert_eq!(f.eval_projected(1.0).weights(), d(1).weights());
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01..1.0f64, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|w| w / s).collect()
        })
    }

    proptest! {
        #[test]
        fn newton_nodes_exact_and_sums_one(
            xs in prop::collection::btree_set(0i32..40, 1..9),
            ws in prop::collection::vec(simplex(4), 8),
            queries in prop::collection::vec(0.0..=1.0f64, 10),
        ) {
            let y = sp("y", 4);
            let nodes: Vec<(f64, ProbMeasure)> = xs
                .iter()
                .zip(&ws)
                .map(|(&x, w)| (x as f64 / 40.0, ProbMeasure::new(&y, w.clone()).unwrap()))
                .collect();
            let f = newton_interpolant(&nodes).unwrap();
            for (x, mu) in &nodes {
                prop_assert!(f.eval(*x).max_abs_diff(mu) < 1e-8);
            }
            let (lo, hi) = (nodes[0].0, nodes[nodes.len() - 1].0);
            for q in queries {
                let q = lo + q * (hi - lo);
                prop_assert!((f.eval(q).total_mass() - 1.0).abs() < 1e-10);
            }
        }

        #[test]
        fn empirical_section_round_trip(samples in prop::collection::vec((0usize..3, 0usize..2), 1..30)) {
            let xy = FiniteSpace::product(&sp("x", 3), &sp("y", 2));
            let s = Dataset::from_indices(&xy, samples).unwrap();
            let h = empirical_section(&s).unwrap();
            let mu = s.empirical().unwrap();
            let (mu_x, _) = crate::morphisms::disintegrate(&mu, ZeroRowPolicy::Uniform).unwrap();
            let back = graph_pushforward(&h, &mu_x).unwrap();
            prop_assert!(back.max_abs_diff(&mu) < 1e-15);
        }
    }
}
