//! MMD between the empirical measures of two sample files.

use std::path::Path;

use probmorph::bounds::mmd_concentration_bound;
use probmorph::kernels::{gram, mmd};
use probmorph::spaces::{FiniteSpace, ProbMeasure};
use serde::Serialize;

use super::{emit, to_json};
use crate::config::ExperimentConfig;
use crate::data::read_points;
use crate::error::{data, usage, CliError, CliResult};

const DEFAULT_DELTA: f64 = 0.05;

#[derive(Debug, Serialize)]
struct EmbedReport {
    seed: u64,
    kernel: String,
    mmd: f64,
    n_a: usize,
    n_b: usize,
    delta: f64,
    /// Deviation bound of each empirical embedding, holding with
    /// probability `1 − δ` each.
    bound_a: f64,
    bound_b: f64,
    /// `bound_a + bound_b`: bounds `|mmd − mmd of the sampling measures|`.
    bound: f64,
}

pub fn run(config: &ExperimentConfig, a: &Path, b: &Path) -> CliResult<()> {
    let seed = config.seed()?;
    let kernel = config.kernel()?;
    let delta = config.f64_or("delta", DEFAULT_DELTA)?;
    if delta >= 1.0 {
        return Err(CliError::Usage(format!(
            "`delta` must lie in (0, 1), got {delta}"
        )));
    }
    let x = config.space("x")?;
    let y = config
        .space("y")?
        .ok_or_else(|| CliError::Usage("embed needs a declared y space".into()))?;
    let (space_a, idx_a) = read_points(a, x.as_ref(), &y)?;
    let (space_b, idx_b) = read_points(b, x.as_ref(), &y)?;
    if !FiniteSpace::same(&space_a, &space_b) {
        return Err(CliError::Data(format!(
            "{} and {} sample different spaces",
            a.display(),
            b.display()
        )));
    }
    let mu_a = ProbMeasure::empirical_indices(&space_a, &idx_a).map_err(data("first sample"))?;
    let mu_b = ProbMeasure::empirical_indices(&space_b, &idx_b).map_err(data("second sample"))?;
    let g = gram(&kernel, &space_a).map_err(usage("kernel"))?;
    let value = mmd(&g, &mu_a, &mu_b).map_err(data("mmd"))?;

    // rescale to sup K(y, y) ≤ 1, bound, and scale back
    let c = g.c_k();
    let side = |mu: &ProbMeasure, n: usize| -> CliResult<f64> {
        let k_bar = g.diag_mean(mu).map_err(data("kernel diagonal"))? / (c * c);
        Ok(c * mmd_concentration_bound(n, delta, k_bar).map_err(usage("bound"))?)
    };
    let bound_a = side(&mu_a, idx_a.len())?;
    let bound_b = side(&mu_b, idx_b.len())?;
    let report = EmbedReport {
        seed,
        kernel: kernel.name().to_string(),
        mmd: value,
        n_a: idx_a.len(),
        n_b: idx_b.len(),
        delta,
        bound_a,
        bound_b,
        bound: bound_a + bound_b,
    };
    let body = to_json(&report);
    emit(
        config.out().as_deref(),
        &[("embed.json", body.clone())],
        &body,
    )
}
