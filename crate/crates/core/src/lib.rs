//! Probabilistic morphisms between finite spaces and kernel-mean-embedding
//! losses for supervised learning.
//!
//! Spaces are finite sets of labelled points (optionally with coordinates),
//! measures are dense weight vectors, and Markov kernels are row-stochastic
//! matrices. On top of this sit reproducing-kernel Gram matrices, the
//! quadratic embedding loss and its risks, learners over hypothesis classes,
//! and generalization bounds with a Monte Carlo harness.

pub mod bounds;
pub mod error;
pub mod kernels;
pub mod learning;
pub mod losses;
pub mod morphisms;
pub mod numeric;
pub mod spaces;

pub use error::{Error, Result};
pub use kernels::{gram, mmd, GramMatrix, KernelSpec, KernelVariant};
pub use morphisms::{MarkovKernel, SignedKernel, ZeroRowPolicy};
pub use spaces::{Axis, Dataset, FiniteSpace, ProbMeasure, SignedMeasure, SpaceRef};
