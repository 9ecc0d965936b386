//! Markov kernels and bounded signed kernels between finite spaces.
//!
//! A kernel `T: X ⇝ Y` is stored as a dense row-major `|X| × |Y|` matrix whose
//! row `x` is the measure `T(x)` on `Y`.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::GramMatrix;
use crate::numeric::{compensated_sum, min_eigenvalue, sum_zero_basis, EQ_TOL};
use crate::spaces::{
    ensure_same, marginal, Axis, FiniteSpace, ProbMeasure, SignedMeasure, SpaceDoc, SpaceRef,
};

/// Above this subspace dimension the operator norm switches from a dense
/// eigensolver to power iteration.
pub const DENSE_EIGEN_LIMIT: usize = 64;

/// A kernel whose rows are finite signed measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelDoc", into = "KernelDoc")]
pub struct SignedKernel {
    source: SpaceRef,
    target: SpaceRef,
    rows: Vec<f64>,
}

/// JSON form `{"source": .., "target": .., "rows": [[..], ..]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelDoc {
    pub source: SpaceDoc,
    pub target: SpaceDoc,
    pub rows: Vec<Vec<f64>>,
}

impl SignedKernel {
    pub fn new(source: &SpaceRef, target: &SpaceRef, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != source.len() {
            return Err(Error::LengthMismatch {
                expected: source.len(),
                got: rows.len(),
            });
        }
        let mut flat = Vec::with_capacity(source.len() * target.len());
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != target.len() {
                return Err(Error::LengthMismatch {
                    expected: target.len(),
                    got: row.len(),
                }
                .in_row(i));
            }
            if let Some(index) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index }.in_row(i));
            }
            flat.extend(row);
        }
        Ok(SignedKernel {
            source: source.clone(),
            target: target.clone(),
            rows: flat,
        })
    }

    pub fn from_measures(source: &SpaceRef, rows: &[SignedMeasure]) -> Result<Self> {
        let target = rows
            .first()
            .map(|r| r.space().clone())
            .ok_or(Error::EmptySpace)?;
        for (i, r) in rows.iter().enumerate() {
            ensure_same(&target, r.space(), "kernel rows").map_err(|e| e.in_row(i))?;
        }
        Self::new(
            source,
            &target,
            rows.iter().map(|r| r.weights().to_vec()).collect(),
        )
    }

    pub fn zero(source: &SpaceRef, target: &SpaceRef) -> Self {
        SignedKernel {
            source: source.clone(),
            target: target.clone(),
            rows: vec![0.0; source.len() * target.len()],
        }
    }

    pub(crate) fn from_flat(source: SpaceRef, target: SpaceRef, rows: Vec<f64>) -> Self {
        debug_assert_eq!(rows.len(), source.len() * target.len());
        SignedKernel {
            source,
            target,
            rows,
        }
    }

    pub fn source(&self) -> &SpaceRef {
        &self.source
    }

    pub fn target(&self) -> &SpaceRef {
        &self.target
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.target.len();
        &self.rows[i * m..(i + 1) * m]
    }

    pub fn row_measure(&self, i: usize) -> SignedMeasure {
        SignedMeasure::from_parts_unchecked(self.target.clone(), self.row(i).to_vec())
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.chunks(self.target.len())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    pub fn entry(&self, x: usize, y: usize) -> f64 {
        self.rows[x * self.target.len() + y]
    }

    pub fn plus(&self, other: &SignedKernel) -> Result<SignedKernel> {
        ensure_same(&self.source, &other.source, "kernel sum source")?;
        ensure_same(&self.target, &other.target, "kernel sum target")?;
        Ok(SignedKernel {
            source: self.source.clone(),
            target: self.target.clone(),
            rows: self
                .rows
                .iter()
                .zip(&other.rows)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn scaled(&self, c: f64) -> SignedKernel {
        SignedKernel {
            source: self.source.clone(),
            target: self.target.clone(),
            rows: self.rows.iter().map(|v| c * v).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &SignedKernel) -> f64 {
        self.rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.source.len(), self.target.len(), &self.rows)
    }

    /// Checks the row-stochastic invariant, returning the worst row and its
    /// deviation (negative mass or row-sum error) when it exceeds `tol`.
    pub fn stochastic_violation(&self, tol: f64) -> Option<(usize, f64)> {
        let mut worst: Option<(usize, f64)> = None;
        for (i, row) in self.rows().enumerate() {
            let neg = row.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max);
            let sum_err = (compensated_sum(row.iter().copied()) - 1.0).abs();
            let dev = neg.max(sum_err);
            if dev > tol && worst.is_none_or(|(_, w)| dev > w) {
                worst = Some((i, dev));
            }
        }
        worst
    }
}

impl From<SignedKernel> for KernelDoc {
    fn from(k: SignedKernel) -> Self {
        KernelDoc {
            source: SpaceDoc::from(&*k.source),
            target: SpaceDoc::from(&*k.target),
            rows: k.to_rows(),
        }
    }
}

impl TryFrom<KernelDoc> for SignedKernel {
    type Error = Error;
    fn try_from(doc: KernelDoc) -> Result<Self> {
        let source = SpaceRef::try_from(doc.source)?;
        let target = SpaceRef::try_from(doc.target)?;
        SignedKernel::new(&source, &target, doc.rows)
    }
}

impl AsRef<SignedKernel> for SignedKernel {
    fn as_ref(&self) -> &SignedKernel {
        self
    }
}

/// A probabilistic morphism: every row is a probability measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelDoc", into = "KernelDoc")]
pub struct MarkovKernel(SignedKernel);

impl MarkovKernel {
    pub fn new(source: &SpaceRef, target: &SpaceRef, rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_signed(SignedKernel::new(source, target, rows)?)
    }

    /// Validates each row as a probability measure (with the same
    /// renormalization band as [`ProbMeasure`]).
    pub fn from_signed(mut k: SignedKernel) -> Result<Self> {
        let m = k.target.len();
        for i in 0..k.source.len() {
            let row = k.rows[i * m..(i + 1) * m].to_vec();
            let p = ProbMeasure::new(&k.target, row).map_err(|e| e.in_row(i))?;
            k.rows[i * m..(i + 1) * m].copy_from_slice(p.weights());
        }
        Ok(MarkovKernel(k))
    }

    pub fn from_rows(source: &SpaceRef, rows: &[ProbMeasure]) -> Result<Self> {
        let signed: Vec<SignedMeasure> = rows.iter().map(|r| r.as_signed().clone()).collect();
        Ok(MarkovKernel(SignedKernel::from_measures(source, &signed)?))
    }

    pub fn identity(space: &SpaceRef) -> Self {
        deterministic_indices(space, space, &(0..space.len()).collect::<Vec<_>>())
            .expect("identity map is total")
    }

    /// Every row equal to `nu`.
    pub fn constant(source: &SpaceRef, nu: &ProbMeasure) -> Self {
        let rows = nu.weights().repeat(source.len());
        MarkovKernel(SignedKernel::from_flat(
            source.clone(),
            nu.space().clone(),
            rows,
        ))
    }

    pub fn uniform(source: &SpaceRef, target: &SpaceRef) -> Self {
        Self::constant(source, &ProbMeasure::uniform(target))
    }

    /// Deterministic projection `X × Y → X` or `X × Y → Y`.
    pub fn projection(product: &SpaceRef, axis: Axis) -> Result<Self> {
        let (left, right) = product
            .factors()
            .ok_or_else(|| Error::NotProduct(format!("{} points", product.len())))?;
        let (target, map): (&SpaceRef, Vec<usize>) = match axis {
            Axis::Left => (
                left,
                (0..product.len())
                    .map(|k| product.split_index(k).0)
                    .collect(),
            ),
            Axis::Right => (
                right,
                (0..product.len())
                    .map(|k| product.split_index(k).1)
                    .collect(),
            ),
        };
        deterministic_indices(product, target, &map)
    }

    pub fn row_prob(&self, i: usize) -> ProbMeasure {
        ProbMeasure::from_signed(self.0.row_measure(i)).expect("rows are probability measures")
    }

    pub fn as_signed(&self) -> &SignedKernel {
        &self.0
    }

    pub fn into_signed(self) -> SignedKernel {
        self.0
    }

    /// `T_* μ` for a probability measure `μ`, which is again a probability measure.
    pub fn push(&self, mu: &ProbMeasure) -> Result<ProbMeasure> {
        ProbMeasure::from_signed(pushforward(&self.0, mu)?)
    }

    pub fn compose_markov(&self, first: &MarkovKernel) -> Result<MarkovKernel> {
        MarkovKernel::from_signed(compose(&self.0, &first.0)?)
    }
}

impl Deref for MarkovKernel {
    type Target = SignedKernel;
    fn deref(&self) -> &SignedKernel {
        &self.0
    }
}

impl AsRef<SignedKernel> for MarkovKernel {
    fn as_ref(&self) -> &SignedKernel {
        &self.0
    }
}

impl From<MarkovKernel> for KernelDoc {
    fn from(k: MarkovKernel) -> Self {
        k.0.into()
    }
}

impl TryFrom<KernelDoc> for MarkovKernel {
    type Error = Error;
    fn try_from(doc: KernelDoc) -> Result<Self> {
        MarkovKernel::from_signed(SignedKernel::try_from(doc)?)
    }
}

/// `ν(y) = Σ_x μ(x) T(y|x)`.
pub fn pushforward(t: &SignedKernel, mu: &SignedMeasure) -> Result<SignedMeasure> {
    ensure_same(&t.source, mu.space(), "pushforward")?;
    let m = t.target.len();
    let w = (0..m)
        .map(|y| {
            compensated_sum(
                mu.weights()
                    .iter()
                    .enumerate()
                    .map(|(x, &mx)| mx * t.rows[x * m + y]),
            )
        })
        .collect();
    Ok(SignedMeasure::from_parts_unchecked(t.target.clone(), w))
}

/// `(T^* f)(x) = Σ_y T(y|x) f(y)`.
pub fn pullback(t: &SignedKernel, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != t.target.len() {
        return Err(Error::LengthMismatch {
            expected: t.target.len(),
            got: f.len(),
        });
    }
    Ok(t.rows()
        .map(|row| compensated_sum(row.iter().zip(f).map(|(a, b)| a * b)))
        .collect())
}

/// `T2 ∘ T1`: row `x` is the pushforward of `T1(x)` under `T2`.
pub fn compose(t2: &SignedKernel, t1: &SignedKernel) -> Result<SignedKernel> {
    ensure_same(&t1.target, &t2.source, "composition")?;
    let (n, k, m) = (t1.source.len(), t1.target.len(), t2.target.len());
    let mut rows = Vec::with_capacity(n * m);
    for x in 0..n {
        for z in 0..m {
            rows.push(compensated_sum(
                (0..k).map(|y| t1.rows[x * k + y] * t2.rows[y * m + z]),
            ));
        }
    }
    Ok(SignedKernel::from_flat(
        t1.source.clone(),
        t2.target.clone(),
        rows,
    ))
}

/// The joint `X ⇝ Y1 × Y2` whose row at `x` is `T1(x) · T2(x)`.
pub fn joint(t1: &SignedKernel, t2: &SignedKernel) -> Result<SignedKernel> {
    ensure_same(&t1.source, &t2.source, "joint")?;
    let target = FiniteSpace::product(&t1.target, &t2.target);
    let mut rows = Vec::with_capacity(t1.source.len() * target.len());
    for x in 0..t1.source.len() {
        for a in t1.row(x) {
            for b in t2.row(x) {
                rows.push(a * b);
            }
        }
    }
    Ok(SignedKernel::from_flat(t1.source.clone(), target, rows))
}

/// The graph `Γ_T: X ⇝ X × Y`, `x ↦ δ_x · T(x)`.
pub fn graph(t: &SignedKernel) -> SignedKernel {
    let (n, m) = (t.source.len(), t.target.len());
    let target = FiniteSpace::product(&t.source, &t.target);
    let mut rows = vec![0.0; n * n * m];
    for x in 0..n {
        let offset = x * n * m + x * m;
        rows[offset..offset + m].copy_from_slice(t.row(x));
    }
    SignedKernel::from_flat(t.source.clone(), target, rows)
}

/// `(Γ_T)_* μ_X`, with weight `μ_X(x) T(y|x)` at `(x, y)`.
pub fn graph_pushforward(t: &SignedKernel, mu_x: &SignedMeasure) -> Result<SignedMeasure> {
    let space = FiniteSpace::product(&t.source, &t.target);
    graph_pushforward_in(t, mu_x, &space)
}

pub(crate) fn graph_pushforward_in(
    t: &SignedKernel,
    mu_x: &SignedMeasure,
    space: &SpaceRef,
) -> Result<SignedMeasure> {
    ensure_same(&t.source, mu_x.space(), "graph pushforward")?;
    let w = mu_x
        .weights()
        .iter()
        .enumerate()
        .flat_map(|(x, &mx)| t.row(x).iter().map(move |v| mx * v))
        .collect();
    Ok(SignedMeasure::from_parts_unchecked(space.clone(), w))
}

/// What to put in conditional rows at source points without mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZeroRowPolicy {
    #[default]
    Uniform,
    Error,
}

/// Splits a joint probability on `X × Y` into its `X`-marginal and a
/// regular conditional probability `μ_{Y|X}`.
pub fn disintegrate(
    mu: &ProbMeasure,
    policy: ZeroRowPolicy,
) -> Result<(ProbMeasure, MarkovKernel)> {
    let space = mu.space();
    let (left, right) = space
        .factors()
        .ok_or_else(|| Error::NotProduct(format!("{} points", space.len())))?;
    let mu_x = ProbMeasure::from_signed(marginal(mu, Axis::Left)?)?;
    let m = right.len();
    let mut rows = Vec::with_capacity(left.len() * m);
    let mut massless = Vec::new();
    for x in 0..left.len() {
        let mass = mu_x.weights()[x];
        let joint_row = &mu.weights()[x * m..(x + 1) * m];
        if mass > 0.0 {
            rows.extend(joint_row.iter().map(|v| v / mass));
        } else {
            massless.push(left.label(x).to_string());
            rows.extend(std::iter::repeat_n(1.0 / m as f64, m));
        }
    }
    if policy == ZeroRowPolicy::Error && !massless.is_empty() {
        return Err(Error::MasslessPoints(massless));
    }
    let cond =
        MarkovKernel::from_signed(SignedKernel::from_flat(left.clone(), right.clone(), rows))?;
    Ok((mu_x, cond))
}

/// The Markov kernel `x ↦ δ_{κ(x)}` of a map given by labels.
pub fn deterministic<F, S>(source: &SpaceRef, target: &SpaceRef, map: F) -> Result<MarkovKernel>
where
    F: Fn(&str) -> S,
    S: AsRef<str>,
{
    let indices = source
        .labels()
        .iter()
        .map(|l| target.index_of(map(l).as_ref()))
        .collect::<Result<Vec<_>>>()?;
    deterministic_indices(source, target, &indices)
}

pub fn deterministic_indices(
    source: &SpaceRef,
    target: &SpaceRef,
    map: &[usize],
) -> Result<MarkovKernel> {
    if map.len() != source.len() {
        return Err(Error::LengthMismatch {
            expected: source.len(),
            got: map.len(),
        });
    }
    let m = target.len();
    let mut rows = vec![0.0; source.len() * m];
    for (x, &y) in map.iter().enumerate() {
        if y >= m {
            return Err(Error::InvalidParameter(format!(
                "map sends `{}` to index {y} outside the target",
                source.label(x)
            )));
        }
        rows[x * m + y] = 1.0;
    }
    Ok(MarkovKernel(SignedKernel::from_flat(
        source.clone(),
        target.clone(),
        rows,
    )))
}

/// `‖T‖_∞ = sup_x ‖T(x)‖_TV`.
pub fn sup_tv_norm(t: &SignedKernel) -> f64 {
    t.rows()
        .map(|row| compensated_sum(row.iter().map(|v| v.abs())))
        .fold(0.0, f64::max)
}

/// Gram matrix of the graph rows: `M[i][j] = ⟨Γ_T(i), Γ_T(j)⟩` under `g_xy`.
pub(crate) fn graph_gram(t: &SignedKernel, g_xy: &GramMatrix) -> DMatrix<f64> {
    let (n, m) = (t.source.len(), t.target.len());
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = Vec::with_capacity(m * m);
            for (a, ta) in t.row(i).iter().enumerate() {
                for (b, tb) in t.row(j).iter().enumerate() {
                    acc.push(ta * tb * g_xy.get(i * m + a, j * m + b));
                }
            }
            let v = compensated_sum(acc);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Result of the operator-norm eigenproblem: the norm and a maximizing
/// direction `u` on `X` with `Σu = 0` and `uᵀ G_X u = 1`.
pub(crate) struct OperatorNorm {
    pub norm: f64,
    pub direction: Vec<f64>,
}

pub(crate) fn operator_norm_parts(
    t: &SignedKernel,
    g_x: &GramMatrix,
    g_xy: &GramMatrix,
) -> Result<OperatorNorm> {
    let spectrum = operator_spectrum(t, g_x, g_xy)?;
    let n = t.source.len();
    Ok(spectrum
        .into_iter()
        .max_by(|a, b| a.norm.total_cmp(&b.norm))
        .unwrap_or(OperatorNorm {
            norm: 0.0,
            direction: vec![0.0; n],
        }))
}

/// Square roots of the generalized eigenvalues on the sum-zero subspace,
/// each with its direction `u` (`Σu = 0`, `uᵀ G_X u = 1`). Every eigenpair is
/// returned when the dense solver applies, only the top one otherwise. Empty
/// for a one-point source.
pub(crate) fn operator_spectrum(
    t: &SignedKernel,
    g_x: &GramMatrix,
    g_xy: &GramMatrix,
) -> Result<Vec<OperatorNorm>> {
    ensure_same(&t.source, g_x.space(), "operator norm source gram")?;
    let product = FiniteSpace::product(&t.source, &t.target);
    ensure_same(&product, g_xy.space(), "operator norm joint gram")?;
    let n = t.source.len();
    if n < 2 {
        return Ok(Vec::new());
    }
    let q = sum_zero_basis(n);
    let qt = q.transpose();
    let mut b = &qt * g_x.entries() * &q;
    crate::numeric::symmetrize(&mut b);
    let min_b = min_eigenvalue(&b);
    if min_b <= EQ_TOL {
        return Err(Error::SingularSourceGram(min_b));
    }
    let mut a = &qt * graph_gram(t, g_xy) * &q;
    crate::numeric::symmetrize(&mut a);
    let chol = b
        .clone()
        .cholesky()
        .ok_or(Error::SingularSourceGram(min_b))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or(Error::SingularSourceGram(min_b))?;
    let mut c = &l_inv * a * l_inv.transpose();
    crate::numeric::symmetrize(&mut c);
    let pairs: Vec<(f64, DVector<f64>)> = if n - 1 <= DENSE_EIGEN_LIMIT {
        let eig = SymmetricEigen::new(c);
        eig.eigenvalues
            .iter()
            .enumerate()
            .map(|(k, &lambda)| (lambda, eig.eigenvectors.column(k).into_owned()))
            .collect()
    } else {
        vec![power_iteration(&c)]
    };
    let back = l_inv.transpose();
    Ok(pairs
        .into_iter()
        .map(|(lambda, v)| {
            let u = &q * (&back * v);
            OperatorNorm {
                norm: lambda.max(0.0).sqrt(),
                direction: u.iter().copied().collect(),
            }
        })
        .collect())
}

fn power_iteration(c: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let n = c.nrows();
    // shift so the top eigenvalue of a PSD matrix dominates in magnitude
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64) * 1e-3);
    v.normalize_mut();
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let next = c * &v;
        let norm = next.norm();
        if norm == 0.0 {
            return (0.0, v);
        }
        let next = next / norm;
        let new_lambda = next.dot(&(c * &next));
        let done = (new_lambda - lambda).abs() <= 1e-14 * new_lambda.abs().max(1.0);
        v = next;
        lambda = new_lambda;
        if done {
            break;
        }
    }
    (lambda, v)
}

/// `sup_{A,B ∈ P(X)} ‖(Γ_T)_*(A − B)‖_{K₁} / ‖A − B‖_{K₃}`, evaluated as the
/// square root of the top generalized eigenvalue on the sum-zero subspace.
/// Returns 0 for a one-point source, where no nonzero difference exists.
pub fn embedded_operator_norm(
    t: &MarkovKernel,
    g_x: &GramMatrix,
    g_xy: &GramMatrix,
) -> Result<f64> {
    Ok(operator_norm_parts(t, g_x, g_xy)?.norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram, KernelSpec};
    use crate::spaces::product;
    use proptest::prelude::*;

    fn sp(prefix: &str, n: usize) -> SpaceRef {
        FiniteSpace::indexed(prefix, n).unwrap()
    }

    fn markov(source: &SpaceRef, target: &SpaceRef, rows: Vec<Vec<f64>>) -> MarkovKernel {
        MarkovKernel::new(source, target, rows).unwrap()
    }

    #[test]
    fn pushforward_examples() {
        let x = sp("x", 2);
        let mu = SignedMeasure::new(&x, vec![0.3, -0.7]).unwrap();
        assert_eq!(pushforward(&MarkovKernel::identity(&x), &mu).unwrap(), mu);
        let t = markov(&x, &x, vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        let p = ProbMeasure::new(&x, vec![0.3, 0.7]).unwrap();
        assert_eq!(t.push(&p).unwrap().weights(), &[0.5, 0.5]);
        let t = markov(&x, &x, vec![vec![0.5, 0.5], vec![0.0, 1.0]]);
        let p = ProbMeasure::new(&x, vec![0.4, 0.6]).unwrap();
        let out = t.push(&p).unwrap();
        assert!((out.weights()[0] - 0.2).abs() < 1e-15 && (out.weights()[1] - 0.8).abs() < 1e-15);
        assert!(matches!(
            pushforward(&t, &ProbMeasure::uniform(&sp("z", 2))),
            Err(Error::SpaceMismatch(_))
        ));
    }

    #[test]
    fn pullback_examples() {
        let x = sp("x", 2);
        let t = markov(
            &x,
            &sp("y", 3),
            vec![vec![0.2, 0.3, 0.5], vec![1.0, 0.0, 0.0]],
        );
        assert_eq!(pullback(&t, &[1.0; 3]).unwrap(), vec![1.0, 1.0]);
        let id = MarkovKernel::identity(&x);
        assert_eq!(pullback(&id, &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
        let t = markov(&x, &x, vec![vec![0.5, 0.5], vec![0.0, 1.0]]);
        assert_eq!(pullback(&t, &[0.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(
            pullback(&t, &[1.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn compose_examples() {
        let x = sp("x", 2);
        let t2 = markov(&x, &x, vec![vec![0.5, 0.5], vec![0.0, 1.0]]);
        let id = MarkovKernel::identity(&x);
        assert_eq!(compose(&t2, &id).unwrap(), *t2.as_signed());
        let t1 = markov(&x, &x, vec![vec![1.0, 0.0], vec![0.5, 0.5]]);
        let c = compose(&t2, &t1).unwrap();
        assert_eq!(c.to_rows(), vec![vec![0.5, 0.5], vec![0.25, 0.75]]);
        assert!(matches!(
            compose(&t2, &MarkovKernel::identity(&sp("z", 2))),
            Err(Error::SpaceMismatch(_))
        ));
    }

    #[test]
    fn joint_examples() {
        let x = sp("x", 3);
        let (y1, y2) = (sp("a", 2), sp("b", 2));
        let k1 = deterministic_indices(&x, &y1, &[0, 1, 1]).unwrap();
        let k2 = deterministic_indices(&x, &y2, &[1, 1, 0]).unwrap();
        let j = joint(&k1, &k2).unwrap();
        let expected = deterministic_indices(&x, j.target(), &[1, 3, 2]).unwrap();
        assert_eq!(j.to_rows(), expected.to_rows());
        let one = sp("x", 1);
        let t1 = markov(&one, &y1, vec![vec![0.5, 0.5]]);
        let t2 = markov(&one, &y2, vec![vec![0.3, 0.7]]);
        assert_eq!(joint(&t1, &t2).unwrap().row(0), &[0.15, 0.35, 0.15, 0.35]);
        assert!(matches!(joint(&t1, &k2), Err(Error::SpaceMismatch(_))));
    }

    #[test]
    fn graph_examples() {
        let x = sp("x", 2);
        let y = sp("y", 2);
        let kappa = deterministic_indices(&x, &y, &[1, 0]).unwrap();
        let g = graph(&kappa);
        assert_eq!(
            g.to_rows(),
            vec![vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]
        );
        let one = sp("x", 1);
        let t = markov(&one, &y, vec![vec![0.4, 0.6]]);
        assert_eq!(graph(&t).row(0), &[0.4, 0.6]);
        let t = markov(&x, &y, vec![vec![0.2, 0.8], vec![0.6, 0.4]]);
        assert_eq!(graph(&t).row(0), &[0.2, 0.8, 0.0, 0.0]);
        // T = Π_Y ∘ Γ_T
        let proj = MarkovKernel::projection(graph(&t).target(), Axis::Right).unwrap();
        assert!(compose(&proj, &graph(&t)).unwrap().max_abs_diff(&t) < 1e-15);
    }

    #[test]
    fn graph_pushforward_examples() {
        let x = sp("x", 2);
        let id = MarkovKernel::identity(&x);
        let mu = ProbMeasure::new(&x, vec![0.3, 0.7]).unwrap();
        assert_eq!(
            graph_pushforward(&id, &mu).unwrap().weights(),
            &[0.3, 0.0, 0.0, 0.7]
        );
        let y = sp("y", 2);
        let t = markov(&x, &y, vec![vec![0.5, 0.5], vec![1.0 / 6.0, 5.0 / 6.0]]);
        let mu = ProbMeasure::new(&x, vec![0.4, 0.6]).unwrap();
        let j = graph_pushforward(&t, &mu).unwrap();
        for (a, b) in j.weights().iter().zip([0.2, 0.2, 0.1, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(
            graph_pushforward(&t, &SignedMeasure::zero(&x))
                .unwrap()
                .weights(),
            &[0.0; 4]
        );
    }

    #[test]
    fn disintegrate_examples() {
        let (x, y) = (sp("x", 2), sp("y", 2));
        let xy = FiniteSpace::product(&x, &y);
        let mu = ProbMeasure::new(&xy, vec![0.2, 0.2, 0.1, 0.5]).unwrap();
        let (mx, cond) = disintegrate(&mu, ZeroRowPolicy::Error).unwrap();
        assert!((mx.weights()[0] - 0.4).abs() < 1e-15);
        let expected = [[0.5, 0.5], [1.0 / 6.0, 5.0 / 6.0]];
        for (i, row) in expected.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((cond.entry(i, j) - v).abs() < 1e-15);
            }
        }
        let nu = ProbMeasure::new(&y, vec![0.25, 0.75]).unwrap();
        let p =
            ProbMeasure::from_signed(product(&ProbMeasure::new(&x, vec![0.1, 0.9]).unwrap(), &nu))
                .unwrap();
        let (_, cond) = disintegrate(&p, ZeroRowPolicy::Uniform).unwrap();
        assert!(cond.max_abs_diff(&MarkovKernel::constant(&x, &nu)) < 1e-15);
        let point = ProbMeasure::dirac_at(&xy, 0);
        let (mx, cond) = disintegrate(&point, ZeroRowPolicy::Uniform).unwrap();
        assert_eq!(mx.weights(), &[1.0, 0.0]);
        assert_eq!(cond.to_rows(), vec![vec![1.0, 0.0], vec![0.5, 0.5]]);
        assert_eq!(
            disintegrate(&point, ZeroRowPolicy::Error).unwrap_err(),
            Error::MasslessPoints(vec!["x1".into()])
        );
    }

    #[test]
    fn deterministic_examples() {
        let x = FiniteSpace::new(["a", "b"]).unwrap();
        let id = deterministic(&x, &x, |l| l.to_string()).unwrap();
        assert_eq!(id.to_rows(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let c = deterministic(&x, &x, |_| "a").unwrap();
        assert_eq!(c.to_rows(), vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let swap = deterministic(&x, &x, |l| if l == "a" { "b" } else { "a" }).unwrap();
        assert_eq!(swap.to_rows(), vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(
            deterministic(&x, &x, |_| "zz").unwrap_err(),
            Error::UnknownLabel("zz".into())
        );
    }

    #[test]
    fn sup_tv_examples() {
        let x = sp("x", 2);
        let t = markov(
            &x,
            &sp("y", 3),
            vec![vec![0.2, 0.3, 0.5], vec![1.0, 0.0, 0.0]],
        );
        assert!((sup_tv_norm(&t) - 1.0).abs() < 1e-15);
        assert_eq!(sup_tv_norm(&SignedKernel::zero(&x, &x)), 0.0);
        let s = SignedKernel::new(&x, &x, vec![vec![0.5, -0.5], vec![2.0, 0.0]]).unwrap();
        assert_eq!(sup_tv_norm(&s), 2.0);
    }

    #[test]
    fn markov_validation_names_row() {
        let x = sp("x", 2);
        let err = MarkovKernel::new(&x, &x, vec![vec![0.5, 0.5], vec![0.6, 0.5]]).unwrap_err();
        assert!(matches!(err, Error::Row { row: 1, .. }));
        let raw = SignedKernel::new(&x, &x, vec![vec![0.5, 0.5], vec![0.6, 0.5]]).unwrap();
        let (row, dev) = raw.stochastic_violation(1e-12).unwrap();
        assert_eq!(row, 1);
        assert!((dev - 0.1).abs() < 1e-12);
    }

    #[test]
    fn kernel_json_round_trip() {
        let x = FiniteSpace::line("x", &[0.0, 1.0]).unwrap();
        let y = sp("y", 2);
        let t = markov(&x, &y, vec![vec![0.25, 0.75], vec![1.0, 0.0]]);
        let text = serde_json::to_string(&t).unwrap();
        let back: MarkovKernel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, t);
        let bad = r#"{"source":{"labels":["a"],"coords":null},"target":{"labels":["b","c"],"coords":null},"rows":[[0.6,0.5]]}"#;
        assert!(serde_json::from_str::<MarkovKernel>(bad).is_err());
        assert!(serde_json::from_str::<SignedKernel>(bad).is_ok());
    }

    fn delta_grams(t: &SignedKernel) -> (GramMatrix, GramMatrix) {
        let gx = gram(&KernelSpec::delta(), t.source()).unwrap();
        let gxy = gram(
            &KernelSpec::delta(),
            &FiniteSpace::product(t.source(), t.target()),
        )
        .unwrap();
        (gx, gxy)
    }

    #[test]
    fn operator_norm_examples() {
        let x = sp("x", 2);
        let id = MarkovKernel::identity(&x);
        let (gx, gxy) = delta_grams(&id);
        assert!((embedded_operator_norm(&id, &gx, &gxy).unwrap() - 1.0).abs() < 1e-12);

        let y = sp("y", 3);
        let constant_dirac = MarkovKernel::constant(&x, &ProbMeasure::dirac_at(&y, 2));
        let (gx, gxy) = delta_grams(&constant_dirac);
        assert!((embedded_operator_norm(&constant_dirac, &gx, &gxy).unwrap() - 1.0).abs() < 1e-12);

        // one-dimensional quotient: A − B = c(δ_0 − δ_1)
        let nu = ProbMeasure::new(&y, vec![0.2, 0.3, 0.5]).unwrap();
        let constant = MarkovKernel::constant(&x, &nu);
        let (gx, gxy) = delta_grams(&constant);
        let diff = SignedMeasure::new(&x, vec![1.0, -1.0]).unwrap();
        let pushed = graph_pushforward(&constant, &diff).unwrap();
        let oracle = crate::kernels::embed_inner(&gxy, &pushed, &pushed)
            .unwrap()
            .sqrt()
            / crate::kernels::embed_inner(&gx, &diff, &diff)
                .unwrap()
                .sqrt();
        let got = embedded_operator_norm(&constant, &gx, &gxy).unwrap();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");

        let scaled = embedded_operator_norm(&constant, &gx, &gxy.scaled(9.0)).unwrap();
        assert!((scaled - 3.0 * got).abs() < 1e-12);
    }

    #[test]
    fn operator_norm_rejects_singular_source_gram() {
        let x = FiniteSpace::line("x", &[0.0, 1.0]).unwrap();
        let t = MarkovKernel::identity(&x);
        let gx = gram(&KernelSpec::linear(), &x).unwrap();
        let gxy = gram(&KernelSpec::delta(), &FiniteSpace::product(&x, &x)).unwrap();
        // linear kernel on {0, 1}: (1, -1) has squared norm 1, so not singular
        assert!(embedded_operator_norm(&t, &gx, &gxy).is_ok());
        let x = FiniteSpace::line("x", &[1.0, 1.0 + 1e-12]).unwrap();
        let t = MarkovKernel::identity(&x);
        let gx = gram(&KernelSpec::linear(), &x).unwrap();
        let gxy = gram(&KernelSpec::delta(), &FiniteSpace::product(&x, &x)).unwrap();
        assert!(matches!(
            embedded_operator_norm(&t, &gx, &gxy),
            Err(Error::SingularSourceGram(_))
        ));
    }

    #[test]
    fn power_iteration_matches_dense_solver() {
        let n = 70;
        let x = FiniteSpace::line(
            "x",
            &(0..n).map(|i| i as f64 / n as f64).collect::<Vec<_>>(),
        )
        .unwrap();
        let y = sp("y", 2);
        let rows = (0..n)
            .map(|i| {
                let p = 0.1 + 0.8 * (i as f64 / n as f64);
                vec![p, 1.0 - p]
            })
            .collect();
        let t = markov(&x, &y, rows);
        let gx = gram(&KernelSpec::delta(), &x).unwrap();
        let gxy = gram(&KernelSpec::delta(), &FiniteSpace::product(&x, &y)).unwrap();
        let norm = embedded_operator_norm(&t, &gx, &gxy).unwrap();
        // delta kernels: M is diagonal with entries ‖T(x)‖², G_X = I, so the
        // supremum over sum-zero directions lies between the two largest entries
        let mut sq: Vec<f64> = t.rows().map(|r| r.iter().map(|v| v * v).sum()).collect();
        sq.sort_by(|a, b| b.total_cmp(a));
        assert!(norm * norm <= sq[0] + 1e-9 && norm * norm >= sq[1] - 1e-9);
    }

    fn stochastic(n: usize, m: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.01..1.0f64, m), n).prop_map(|rows| {
            rows.into_iter()
                .map(|r| {
                    let s: f64 = r.iter().sum();
                    r.into_iter().map(|v| v / s).collect()
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn adjointness(rows in stochastic(3, 4), mu in prop::collection::vec(-1.0..1.0f64, 3), f in prop::collection::vec(-5.0..5.0f64, 4)) {
            let (x, y) = (sp("x", 3), sp("y", 4));
            let t = markov(&x, &y, rows);
            let mu = SignedMeasure::new(&x, mu).unwrap();
            let lhs: f64 = pushforward(&t, &mu).unwrap().weights().iter().zip(&f).map(|(a, b)| a * b).sum();
            let rhs: f64 = mu.weights().iter().zip(pullback(&t, &f).unwrap()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn pushforward_nonexpansive(rows in stochastic(4, 3), mu in prop::collection::vec(-1.0..1.0f64, 4)) {
            let t = markov(&sp("x", 4), &sp("y", 3), rows);
            let mu = SignedMeasure::new(t.source(), mu).unwrap();
            let out = pushforward(&t, &mu).unwrap();
            prop_assert!(out.tv_norm() <= mu.tv_norm() + 1e-12);
            prop_assert!((out.total_mass() - mu.total_mass()).abs() < 1e-12);
        }

        #[test]
        fn pullback_bounded(rows in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 3), 3), f in prop::collection::vec(-5.0..5.0f64, 3)) {
            let t = SignedKernel::new(&sp("x", 3), &sp("y", 3), rows).unwrap();
            let sup_f = f.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let out = pullback(&t, &f).unwrap();
            for v in out {
                prop_assert!(v.abs() <= sup_tv_norm(&t) * sup_f + 1e-12);
            }
        }

        #[test]
        fn graph_is_additive(a in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 2), 3), b in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 2), 3)) {
            let (x, y) = (sp("x", 3), sp("y", 2));
            let t1 = SignedKernel::new(&x, &y, a).unwrap();
            let t2 = SignedKernel::new(&x, &y, b).unwrap();
            let lhs = graph(&t1.plus(&t2).unwrap());
            let rhs = graph(&t1).plus(&graph(&t2)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-15);
        }

        #[test]
        fn graph_row_marginal_is_dirac(rows in stochastic(3, 2)) {
            let t = markov(&sp("x", 3), &sp("y", 2), rows);
            let g = graph(&t);
            for x in 0..3 {
                let left = marginal(&g.row_measure(x), Axis::Left).unwrap();
                prop_assert!(left.max_abs_diff(&ProbMeasure::dirac_at(t.source(), x)) < 1e-15);
            }
        }

        #[test]
        fn operator_norm_dominates_sampled_quotients(rows in stochastic(4, 3), pts in prop::collection::vec(-1.0..1.0f64, 4)) {
            let x = FiniteSpace::line("x", &[0.0, 0.5, 1.1, 1.7]).unwrap();
            let y = FiniteSpace::line("y", &[0.0, 1.0, 2.0]).unwrap();
            let t = markov(&x, &y, rows);
            let k = KernelSpec::gaussian(1.0).unwrap();
            let gx = gram(&k, &x).unwrap();
            let gxy = gram(&k, &FiniteSpace::product(&x, &y)).unwrap();
            let norm = embedded_operator_norm(&t, &gx, &gxy).unwrap();
            let mean: f64 = pts.iter().sum::<f64>() / 4.0;
            let diff = SignedMeasure::new(&x, pts.iter().map(|v| v - mean).collect()).unwrap();
            let denom = crate::kernels::embed_inner(&gx, &diff, &diff).unwrap();
            prop_assume!(denom > 1e-9);
            let pushed = graph_pushforward(&t, &diff).unwrap();
            let pushed = SignedMeasure::new(gxy.space(), pushed.weights().to_vec()).unwrap();
            let quotient = (crate::kernels::embed_inner(&gxy, &pushed, &pushed).unwrap() / denom).sqrt();
            prop_assert!(quotient <= norm * (1.0 + 1e-9) + 1e-12);
        }
    }
}
