//! Finite measurable spaces and signed-measure arithmetic.
//!
//! Every measure is a dense weight vector over an explicit [`FiniteSpace`].
//! Continuous domains are represented by a finite grid whose points carry
//! coordinates; the power set is the implicit sigma-algebra.

use std::collections::HashMap;
use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, INVARIANT_TOL, RENORMALIZE_TOL};

pub type SpaceRef = Arc<FiniteSpace>;

/// An ordered finite set of labelled points, optionally embedded in `R^d`.
///
/// A space built with [`FiniteSpace::product`] remembers its two factors; its
/// points are ordered row-major over `(left, right)`.
#[derive(Clone)]
pub struct FiniteSpace {
    labels: Vec<String>,
    coords: Option<Vec<Vec<f64>>>,
    index: HashMap<String, usize>,
    factors: Option<(SpaceRef, SpaceRef)>,
}

impl FiniteSpace {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<SpaceRef> {
        Self::build(labels.into_iter().map(Into::into).collect(), None, None)
    }

    pub fn with_coords<S: Into<String>>(
        labels: impl IntoIterator<Item = S>,
        coords: Vec<Vec<f64>>,
    ) -> Result<SpaceRef> {
        Self::build(
            labels.into_iter().map(Into::into).collect(),
            Some(coords),
            None,
        )
    }

    /// `n` points labelled `{prefix}0 .. {prefix}{n-1}` without coordinates.
    pub fn indexed(prefix: &str, n: usize) -> Result<SpaceRef> {
        Self::new((0..n).map(|i| format!("{prefix}{i}")))
    }

    /// Points on the real line labelled `{prefix}0 ..`, with 1-d coordinates.
    pub fn line(prefix: &str, points: &[f64]) -> Result<SpaceRef> {
        Self::with_coords(
            (0..points.len()).map(|i| format!("{prefix}{i}")),
            points.iter().map(|&p| vec![p]).collect(),
        )
    }

    /// The product space `left × right`. Pair labels are `(l,r)` and pair
    /// coordinates are the concatenation of the factors' coordinates.
    pub fn product(left: &SpaceRef, right: &SpaceRef) -> SpaceRef {
        let mut labels = Vec::with_capacity(left.len() * right.len());
        for l in &left.labels {
            for r in &right.labels {
                labels.push(format!("({l},{r})"));
            }
        }
        let coords = match (&left.coords, &right.coords) {
            (Some(lc), Some(rc)) => {
                let mut out = Vec::with_capacity(labels.len());
                for a in lc {
                    for b in rc {
                        out.push(a.iter().chain(b).copied().collect());
                    }
                }
                Some(out)
            }
            _ => None,
        };
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Arc::new(FiniteSpace {
            labels,
            coords,
            index,
            factors: Some((left.clone(), right.clone())),
        })
    }

    fn build(
        labels: Vec<String>,
        coords: Option<Vec<Vec<f64>>>,
        factors: Option<(SpaceRef, SpaceRef)>,
    ) -> Result<SpaceRef> {
        if labels.is_empty() {
            return Err(Error::EmptySpace);
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::DuplicateLabel(l.clone()));
            }
        }
        if let Some(c) = &coords {
            if c.len() != labels.len() {
                return Err(Error::Coords(format!(
                    "{} coordinate vectors for {} points",
                    c.len(),
                    labels.len()
                )));
            }
            let dim = c[0].len();
            if dim == 0 {
                return Err(Error::Coords("dimension must be at least 1".into()));
            }
            if let Some(bad) = c.iter().position(|v| v.len() != dim) {
                return Err(Error::Coords(format!(
                    "point `{}` has dimension {}, expected {dim}",
                    labels[bad],
                    c[bad].len()
                )));
            }
            if c.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Coords("coordinates must be finite".into()));
            }
        }
        Ok(Arc::new(FiniteSpace {
            labels,
            coords,
            index,
            factors,
        }))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn coords(&self) -> Option<&[Vec<f64>]> {
        self.coords.as_deref()
    }

    pub fn coord(&self, i: usize) -> Option<&[f64]> {
        self.coords.as_ref().map(|c| c[i].as_slice())
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.index
            .get(label)
            .copied()
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }

    pub fn factors(&self) -> Option<(&SpaceRef, &SpaceRef)> {
        self.factors.as_ref().map(|(l, r)| (l, r))
    }

    /// Index of the pair `(i, j)` in a product space.
    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        let (_, right) = self.factors.as_ref().expect("not a product space");
        i * right.len() + j
    }

    /// Inverse of [`FiniteSpace::pair_index`].
    pub fn split_index(&self, k: usize) -> (usize, usize) {
        let (_, right) = self.factors.as_ref().expect("not a product space");
        (k / right.len(), k % right.len())
    }

    /// Same space: either the same allocation or equal labels, coords and factors.
    pub fn same(a: &SpaceRef, b: &SpaceRef) -> bool {
        Arc::ptr_eq(a, b) || **a == **b
    }

    fn describe(&self) -> String {
        const SHOWN: usize = 4;
        let head: Vec<&str> = self.labels.iter().take(SHOWN).map(String::as_str).collect();
        if self.len() > SHOWN {
            format!("{{{}, ..}} ({} points)", head.join(", "), self.len())
        } else {
            format!("{{{}}}", head.join(", "))
        }
    }
}

impl PartialEq for FiniteSpace {
    fn eq(&self, other: &Self) -> bool {
        self.labels == other.labels && self.coords == other.coords && {
            match (&self.factors, &other.factors) {
                (None, None) => true,
                (Some((a, b)), Some((c, d))) => FiniteSpace::same(a, c) && FiniteSpace::same(b, d),
                _ => false,
            }
        }
    }
}

impl fmt::Debug for FiniteSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FiniteSpace")
            .field("labels", &self.labels)
            .field("coords", &self.coords)
            .field("product", &self.factors.is_some())
            .finish()
    }
}

pub(crate) fn ensure_same(a: &SpaceRef, b: &SpaceRef, what: &str) -> Result<()> {
    if FiniteSpace::same(a, b) {
        Ok(())
    } else {
        Err(Error::SpaceMismatch(format!(
            "{what}: {} vs {}",
            a.describe(),
            b.describe()
        )))
    }
}

/// JSON form shared by spaces and measures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureDoc {
    pub labels: Vec<String>,
    pub coords: Option<Vec<Vec<f64>>>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpaceDoc {
    pub labels: Vec<String>,
    pub coords: Option<Vec<Vec<f64>>>,
}

impl From<&FiniteSpace> for SpaceDoc {
    fn from(s: &FiniteSpace) -> Self {
        SpaceDoc {
            labels: s.labels.clone(),
            coords: s.coords.clone(),
        }
    }
}

impl TryFrom<SpaceDoc> for SpaceRef {
    type Error = Error;
    fn try_from(doc: SpaceDoc) -> Result<SpaceRef> {
        FiniteSpace::build(doc.labels, doc.coords, None)
    }
}

/// A finite signed measure: one real weight per point of its space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureDoc", into = "MeasureDoc")]
pub struct SignedMeasure {
    space: SpaceRef,
    weights: Vec<f64>,
}

impl SignedMeasure {
    pub fn new(space: &SpaceRef, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != space.len() {
            return Err(Error::LengthMismatch {
                expected: space.len(),
                got: weights.len(),
            });
        }
        if let Some(index) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(SignedMeasure {
            space: space.clone(),
            weights,
        })
    }

    pub fn zero(space: &SpaceRef) -> Self {
        SignedMeasure {
            space: space.clone(),
            weights: vec![0.0; space.len()],
        }
    }

    pub fn space(&self) -> &SpaceRef {
        &self.space
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn weight(&self, label: &str) -> Result<f64> {
        Ok(self.weights[self.space.index_of(label)?])
    }

    pub fn total_mass(&self) -> f64 {
        compensated_sum(self.weights.iter().copied())
    }

    pub fn tv_norm(&self) -> f64 {
        tv_norm(self)
    }

    pub fn plus(&self, other: &SignedMeasure) -> Result<SignedMeasure> {
        ensure_same(&self.space, &other.space, "measure addition")?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn minus(&self, other: &SignedMeasure) -> Result<SignedMeasure> {
        ensure_same(&self.space, &other.space, "measure difference")?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    pub fn scaled(&self, c: f64) -> SignedMeasure {
        SignedMeasure {
            space: self.space.clone(),
            weights: self.weights.iter().map(|w| c * w).collect(),
        }
    }

    /// Largest absolute weight difference.
    pub fn max_abs_diff(&self, other: &SignedMeasure) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn zip_with(&self, other: &SignedMeasure, f: impl Fn(f64, f64) -> f64) -> SignedMeasure {
        SignedMeasure {
            space: self.space.clone(),
            weights: self
                .weights
                .iter()
                .zip(&other.weights)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn from_parts_unchecked(space: SpaceRef, weights: Vec<f64>) -> Self {
        debug_assert_eq!(space.len(), weights.len());
        SignedMeasure { space, weights }
    }
}

impl From<SignedMeasure> for MeasureDoc {
    fn from(m: SignedMeasure) -> Self {
        MeasureDoc {
            labels: m.space.labels.clone(),
            coords: m.space.coords.clone(),
            weights: m.weights,
        }
    }
}

impl TryFrom<MeasureDoc> for SignedMeasure {
    type Error = Error;
    fn try_from(doc: MeasureDoc) -> Result<Self> {
        let space = FiniteSpace::build(doc.labels, doc.coords, None)?;
        SignedMeasure::new(&space, doc.weights)
    }
}

/// A probability measure: nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureDoc", into = "MeasureDoc")]
pub struct ProbMeasure(SignedMeasure);

impl ProbMeasure {
    /// Validates nonnegativity and unit mass. Masses within
    /// [`RENORMALIZE_TOL`] of one are renormalized, others rejected.
    pub fn new(space: &SpaceRef, weights: Vec<f64>) -> Result<Self> {
        Self::from_signed(SignedMeasure::new(space, weights)?)
    }

    pub fn from_signed(mut m: SignedMeasure) -> Result<Self> {
        for (index, w) in m.weights.iter_mut().enumerate() {
            if *w < 0.0 {
                if *w < -INVARIANT_TOL {
                    return Err(Error::NegativeWeight { index, value: *w });
                }
                *w = 0.0;
            }
        }
        let sum = m.total_mass();
        if (sum - 1.0).abs() > RENORMALIZE_TOL {
            return Err(Error::NotNormalized { sum });
        }
        if sum != 1.0 {
            m.weights.iter_mut().for_each(|w| *w /= sum);
        }
        Ok(ProbMeasure(m))
    }

    pub fn uniform(space: &SpaceRef) -> Self {
        let n = space.len();
        ProbMeasure(SignedMeasure::from_parts_unchecked(
            space.clone(),
            vec![1.0 / n as f64; n],
        ))
    }

    pub fn dirac(space: &SpaceRef, label: &str) -> Result<Self> {
        Ok(Self::dirac_at(space, space.index_of(label)?))
    }

    pub fn dirac_at(space: &SpaceRef, i: usize) -> Self {
        let mut w = vec![0.0; space.len()];
        w[i] = 1.0;
        ProbMeasure(SignedMeasure::from_parts_unchecked(space.clone(), w))
    }

    /// Empirical measure `(1/n) Σ δ_{x_i}` of a list of labels.
    pub fn empirical<S: AsRef<str>>(space: &SpaceRef, samples: &[S]) -> Result<Self> {
        let indices = samples
            .iter()
            .map(|s| space.index_of(s.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Self::empirical_indices(space, &indices)
    }

    pub fn empirical_indices(space: &SpaceRef, samples: &[usize]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyData);
        }
        let mut counts = vec![0usize; space.len()];
        for &i in samples {
            if i >= space.len() {
                return Err(Error::InvalidParameter(format!(
                    "point index {i} out of range for {} points",
                    space.len()
                )));
            }
            counts[i] += 1;
        }
        let n = samples.len() as f64;
        Self::from_signed(SignedMeasure::from_parts_unchecked(
            space.clone(),
            counts.into_iter().map(|c| c as f64 / n).collect(),
        ))
    }

    pub fn as_signed(&self) -> &SignedMeasure {
        &self.0
    }

    pub fn into_signed(self) -> SignedMeasure {
        self.0
    }
}

impl Deref for ProbMeasure {
    type Target = SignedMeasure;
    fn deref(&self) -> &SignedMeasure {
        &self.0
    }
}

impl AsRef<SignedMeasure> for ProbMeasure {
    fn as_ref(&self) -> &SignedMeasure {
        &self.0
    }
}

impl AsRef<SignedMeasure> for SignedMeasure {
    fn as_ref(&self) -> &SignedMeasure {
        self
    }
}

impl From<ProbMeasure> for MeasureDoc {
    fn from(m: ProbMeasure) -> Self {
        m.0.into()
    }
}

impl TryFrom<MeasureDoc> for ProbMeasure {
    type Error = Error;
    fn try_from(doc: MeasureDoc) -> Result<Self> {
        ProbMeasure::from_signed(SignedMeasure::try_from(doc)?)
    }
}

pub fn dirac(space: &SpaceRef, label: &str) -> Result<ProbMeasure> {
    ProbMeasure::dirac(space, label)
}

/// Total variation norm: the sum of absolute weights.
pub fn tv_norm(mu: &SignedMeasure) -> f64 {
    compensated_sum(mu.weights.iter().map(|w| w.abs()))
}

/// Jordan–Hahn decomposition `mu = pos − neg` into mutually singular
/// nonnegative parts.
pub fn jordan_hahn(mu: &SignedMeasure) -> (SignedMeasure, SignedMeasure) {
    let pos = mu.weights.iter().map(|&w| w.max(0.0)).collect();
    let neg = mu.weights.iter().map(|&w| (-w).max(0.0)).collect();
    (
        SignedMeasure::from_parts_unchecked(mu.space.clone(), pos),
        SignedMeasure::from_parts_unchecked(mu.space.clone(), neg),
    )
}

/// Product measure on `X × Y` with weight `mu(x)·nu(y)`.
pub fn product(mu: &SignedMeasure, nu: &SignedMeasure) -> SignedMeasure {
    let space = FiniteSpace::product(&mu.space, &nu.space);
    product_on(&space, mu, nu)
}

/// Product measure on an existing product space whose factors match.
pub fn product_in(
    space: &SpaceRef,
    mu: &SignedMeasure,
    nu: &SignedMeasure,
) -> Result<SignedMeasure> {
    let (left, right) = space
        .factors()
        .ok_or_else(|| Error::NotProduct(space.describe()))?;
    ensure_same(left, &mu.space, "left factor")?;
    ensure_same(right, &nu.space, "right factor")?;
    Ok(product_on(space, mu, nu))
}

fn product_on(space: &SpaceRef, mu: &SignedMeasure, nu: &SignedMeasure) -> SignedMeasure {
    let mut w = Vec::with_capacity(space.len());
    for a in &mu.weights {
        for b in &nu.weights {
            w.push(a * b);
        }
    }
    SignedMeasure::from_parts_unchecked(space.clone(), w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Left,
    Right,
}

/// Pushforward of a measure on `X × Y` under the projection to one factor.
pub fn marginal(mu: &SignedMeasure, axis: Axis) -> Result<SignedMeasure> {
    let (left, right) = mu
        .space
        .factors()
        .ok_or_else(|| Error::NotProduct(mu.space.describe()))?;
    let (nl, nr) = (left.len(), right.len());
    let w = match axis {
        Axis::Left => (0..nl)
            .map(|i| compensated_sum((0..nr).map(|j| mu.weights[i * nr + j])))
            .collect(),
        Axis::Right => (0..nr)
            .map(|j| compensated_sum((0..nl).map(|i| mu.weights[i * nr + j])))
            .collect(),
    };
    let space = match axis {
        Axis::Left => left.clone(),
        Axis::Right => right.clone(),
    };
    Ok(SignedMeasure::from_parts_unchecked(space, w))
}

/// Ordered `(x, y)` samples over a product space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    space: SpaceRef,
    samples: Vec<(usize, usize)>,
}

impl Dataset {
    pub fn new<S: AsRef<str>, T: AsRef<str>>(
        x_space: &SpaceRef,
        y_space: &SpaceRef,
        pairs: &[(S, T)],
    ) -> Result<Self> {
        let space = FiniteSpace::product(x_space, y_space);
        let samples = pairs
            .iter()
            .map(|(x, y)| Ok((x_space.index_of(x.as_ref())?, y_space.index_of(y.as_ref())?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { space, samples })
    }

    /// Samples given as factor indices over an existing product space.
    pub fn from_indices(space: &SpaceRef, samples: Vec<(usize, usize)>) -> Result<Self> {
        let (left, right) = space
            .factors()
            .ok_or_else(|| Error::NotProduct(space.describe()))?;
        if let Some(&(x, y)) = samples
            .iter()
            .find(|&&(x, y)| x >= left.len() || y >= right.len())
        {
            return Err(Error::InvalidParameter(format!(
                "sample ({x}, {y}) out of range"
            )));
        }
        Ok(Dataset {
            space: space.clone(),
            samples,
        })
    }

    pub fn space(&self) -> &SpaceRef {
        &self.space
    }

    pub fn x_space(&self) -> &SpaceRef {
        self.space.factors().expect("dataset space is a product").0
    }

    pub fn y_space(&self) -> &SpaceRef {
        self.space.factors().expect("dataset space is a product").1
    }

    pub fn samples(&self) -> &[(usize, usize)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Empirical joint measure `μ_S` on `X × Y`.
    pub fn empirical(&self) -> Result<ProbMeasure> {
        let flat: Vec<usize> = self
            .samples
            .iter()
            .map(|&(x, y)| self.space.pair_index(x, y))
            .collect();
        ProbMeasure::empirical_indices(&self.space, &flat)
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        ensure_same(&self.space, &other.space, "dataset concatenation")?;
        let mut samples = self.samples.clone();
        samples.extend_from_slice(&other.samples);
        Ok(Dataset {
            space: self.space.clone(),
            samples,
        })
    }
}
