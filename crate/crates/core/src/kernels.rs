//! Positive-definite symmetric kernels, Gram matrices and kernel mean
//! embeddings of finite signed measures.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, min_eigenvalue, symmetrize, MMD_CLAMP_TOL, PSD_TOL};
use crate::spaces::{ensure_same, SignedMeasure, SpaceRef};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelVariant {
    /// `exp(−σ‖y − y'‖₂²)`
    Gaussian { sigma: f64 },
    /// `exp(−σ‖y − y'‖₁)`
    Laplacian { sigma: f64 },
    /// `⟨y, y'⟩`
    Linear,
    /// `1[y = y']`
    Delta,
}

/// A kernel variant together with a positive multiplicative scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub variant: KernelVariant,
    pub scale: f64,
}

/// A point handed to [`KernelSpec::eval`].
#[derive(Debug, Clone, Copy)]
pub enum Point<'a> {
    Coords(&'a [f64]),
    Label(&'a str),
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::new(KernelVariant::Gaussian { sigma }, 1.0)
    }

    pub fn laplacian(sigma: f64) -> Result<Self> {
        Self::new(KernelVariant::Laplacian { sigma }, 1.0)
    }

    pub fn linear() -> Self {
        KernelSpec {
            variant: KernelVariant::Linear,
            scale: 1.0,
        }
    }

    pub fn delta() -> Self {
        KernelSpec {
            variant: KernelVariant::Delta,
            scale: 1.0,
        }
    }

    pub fn new(variant: KernelVariant, scale: f64) -> Result<Self> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(scale) {
            return Err(Error::InvalidParameter(format!(
                "kernel scale must be > 0, got {scale}"
            )));
        }
        match variant {
            KernelVariant::Gaussian { sigma } | KernelVariant::Laplacian { sigma }
                if !positive(sigma) =>
            {
                Err(Error::InvalidParameter(format!(
                    "kernel sigma must be > 0, got {sigma}"
                )))
            }
            _ => Ok(KernelSpec { variant, scale }),
        }
    }

    pub fn with_scale(self, scale: f64) -> Result<Self> {
        Self::new(self.variant, scale)
    }

    pub fn needs_coords(&self) -> bool {
        !matches!(self.variant, KernelVariant::Delta)
    }

    pub fn name(&self) -> &'static str {
        match self.variant {
            KernelVariant::Gaussian { .. } => "gaussian",
            KernelVariant::Laplacian { .. } => "laplacian",
            KernelVariant::Linear => "linear",
            KernelVariant::Delta => "delta",
        }
    }

    fn eval_coords(&self, a: &[f64], b: &[f64]) -> f64 {
        let raw = match self.variant {
            KernelVariant::Gaussian { sigma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-sigma * d2).exp()
            }
            KernelVariant::Laplacian { sigma } => {
                let d1: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
                (-sigma * d1).exp()
            }
            KernelVariant::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            KernelVariant::Delta => {
                if a == b {
                    1.0
                } else {
                    0.0
                }
            }
        };
        self.scale * raw
    }

    pub fn eval(&self, a: Point<'_>, b: Point<'_>) -> Result<f64> {
        match (a, b) {
            (Point::Coords(x), Point::Coords(y)) => {
                if x.len() != y.len() {
                    return Err(Error::Coords(format!(
                        "dimension mismatch {} vs {}",
                        x.len(),
                        y.len()
                    )));
                }
                Ok(self.eval_coords(x, y))
            }
            (Point::Label(x), Point::Label(y)) if !self.needs_coords() => {
                Ok(if x == y { self.scale } else { 0.0 })
            }
            _ => Err(Error::MissingCoords {
                kernel: self.name().into(),
            }),
        }
    }

    /// Kernel value between points `i` and `j` of `space`. The delta variant
    /// compares points by identity, the others by coordinates.
    pub fn eval_in(&self, space: &SpaceRef, i: usize, j: usize) -> Result<f64> {
        if !self.needs_coords() {
            return Ok(if i == j { self.scale } else { 0.0 });
        }
        match (space.coord(i), space.coord(j)) {
            (Some(a), Some(b)) => Ok(self.eval_coords(a, b)),
            _ => Err(Error::MissingCoords {
                kernel: self.name().into(),
            }),
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant {
            KernelVariant::Gaussian { sigma } | KernelVariant::Laplacian { sigma } => {
                write!(f, "{}(sigma={sigma}, scale={})", self.name(), self.scale)
            }
            _ => write!(f, "{}(scale={})", self.name(), self.scale),
        }
    }
}

impl FromStr for KernelSpec {
    type Err = Error;

    /// Parses `gaussian`, `laplacian`, `linear` or `delta`, optionally with a
    /// sigma as in `gaussian:0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, sigma) = match s.split_once(':') {
            Some((n, v)) => (
                n.trim(),
                Some(
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidParameter(format!("bad sigma `{v}`")))?,
                ),
            ),
            None => (s.trim(), None),
        };
        match name {
            "gaussian" => Self::gaussian(sigma.unwrap_or(1.0)),
            "laplacian" => Self::laplacian(sigma.unwrap_or(1.0)),
            "linear" => Ok(Self::linear()),
            "delta" => Ok(Self::delta()),
            other => Err(Error::InvalidParameter(format!("unknown kernel `{other}`"))),
        }
    }
}

/// Kernel values on every pair of points of a space.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    space: SpaceRef,
    entries: DMatrix<f64>,
}

impl GramMatrix {
    /// Wraps an explicit matrix after symmetrizing it and checking PSD.
    pub fn from_matrix(space: &SpaceRef, mut entries: DMatrix<f64>) -> Result<Self> {
        let n = space.len();
        if entries.nrows() != n || entries.ncols() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: entries.nrows(),
            });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "gram entries must be finite".into(),
            ));
        }
        symmetrize(&mut entries);
        let min = min_eigenvalue(&entries);
        if min < PSD_TOL {
            return Err(Error::NotPsd {
                min_eigenvalue: min,
            });
        }
        Ok(GramMatrix {
            space: space.clone(),
            entries,
        })
    }

    pub fn space(&self) -> &SpaceRef {
        &self.space
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    /// The Gram matrix of the kernel `c · K`.
    pub fn scaled(&self, c: f64) -> GramMatrix {
        GramMatrix {
            space: self.space.clone(),
            entries: &self.entries * c,
        }
    }

    /// `C_K = max_y √K(y, y)`.
    pub fn c_k(&self) -> f64 {
        (0..self.len())
            .map(|i| self.entries[(i, i)].max(0.0).sqrt())
            .fold(0.0, f64::max)
    }

    /// `∫ K(y, y) dμ(y)`.
    pub fn diag_mean(&self, mu: &SignedMeasure) -> Result<f64> {
        ensure_same(&self.space, mu.space(), "kernel diagonal")?;
        Ok(compensated_sum(
            mu.weights()
                .iter()
                .enumerate()
                .map(|(i, w)| w * self.entries[(i, i)]),
        ))
    }

    /// `(Gμ)_i`, the embedding of `μ` evaluated at point `i`.
    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| compensated_sum((0..n).map(|j| self.entries[(i, j)] * w[j])))
            .collect()
    }

    pub(crate) fn quad(&self, a: &[f64], b: &[f64]) -> f64 {
        let n = self.len();
        compensated_sum((0..n).flat_map(|i| {
            let ai = a[i];
            (0..n).map(move |j| ai * self.entries[(i, j)] * b[j])
        }))
    }
}

pub fn gram(k: &KernelSpec, space: &SpaceRef) -> Result<GramMatrix> {
    let n = space.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = k.eval_in(space, i, j)?;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    GramMatrix::from_matrix(space, m)
}

/// `⟨M_K(μ), M_K(ν)⟩_{H(K)} = μᵀ G ν`.
pub fn embed_inner(g: &GramMatrix, mu: &SignedMeasure, nu: &SignedMeasure) -> Result<f64> {
    ensure_same(&g.space, mu.space(), "embedding")?;
    ensure_same(&g.space, nu.space(), "embedding")?;
    Ok(g.quad(mu.weights(), nu.weights()))
}

/// Squared discrepancy `‖M_K(μ) − M_K(ν)‖²` from raw weight vectors,
/// clamped at 0 inside the rounding band.
pub(crate) fn mmd_squared_weights(g: &GramMatrix, a: &[f64], b: &[f64]) -> Result<f64> {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let r = g.quad(&diff, &diff);
    if r >= 0.0 {
        Ok(r)
    } else if r >= -MMD_CLAMP_TOL {
        Ok(0.0)
    } else {
        Err(Error::NegativeRadicand(r))
    }
}

/// Maximum mean discrepancy `‖M_K(μ) − M_K(ν)‖_{H(K)}`.
pub fn mmd(g: &GramMatrix, mu: &SignedMeasure, nu: &SignedMeasure) -> Result<f64> {
    ensure_same(&g.space, mu.space(), "mmd")?;
    ensure_same(&g.space, nu.space(), "mmd")?;
    Ok(mmd_squared_weights(g, mu.weights(), nu.weights())?.sqrt())
}

/// `C_K = sup_y √|K(y, y)|` over the points of `space`.
pub fn c_k(k: &KernelSpec, space: &SpaceRef) -> Result<f64> {
    let mut best = 0.0_f64;
    for i in 0..space.len() {
        best = best.max(k.eval_in(space, i, i)?.abs().sqrt());
    }
    Ok(best)
}

/// Whether `μ ↦ M_K(μ)` is injective on signed measures over the Gram
/// matrix's points, i.e. whether the Gram matrix is nonsingular.
pub fn embedding_injective(g: &GramMatrix, tol: f64) -> bool {
    min_eigenvalue(&g.entries) > tol
}
