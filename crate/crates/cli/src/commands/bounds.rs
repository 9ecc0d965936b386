//! Monte Carlo verification of a concentration bound across sample sizes.

use std::fmt::Write as _;

use probmorph::bounds::{monte_carlo_verify, BoundName, BoundReport, VerifySetup};
use probmorph::kernels::gram;
use probmorph::morphisms::MarkovKernel;
use probmorph::spaces::{FiniteSpace, ProbMeasure, SpaceRef};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{emit, random_kernel, random_simplex, read_json, to_json};
use crate::config::ExperimentConfig;
use crate::error::{usage, CliError, CliResult};

const DEFAULT_TRIALS: usize = 1000;
const DEFAULT_SIZES: [usize; 3] = [50, 200, 800];
const DEFAULT_EPS: f64 = 0.2;
const DEFAULT_DELTA: f64 = 0.05;
const DEFAULT_CLASS_SIZE: usize = 6;
/// Separates the fixture stream from the per-trial sampling streams.
const FIXTURE_SALT: u64 = 0x4649_5854_5552_4553;

fn spaces(config: &ExperimentConfig) -> CliResult<(SpaceRef, SpaceRef)> {
    let x = match config.space("x")? {
        Some(x) => x,
        None => FiniteSpace::indexed("x", 4).expect("nonempty"),
    };
    let y = match config.space("y")? {
        Some(y) => y,
        None => FiniteSpace::indexed("y", 3).expect("nonempty"),
    };
    Ok((x, y))
}

fn measure(
    config: &ExperimentConfig,
    space: &SpaceRef,
    fallback: impl FnOnce() -> ProbMeasure,
) -> CliResult<ProbMeasure> {
    match config.path("mu_file") {
        None => Ok(fallback()),
        Some(path) => {
            let mu: ProbMeasure = read_json(&path)?;
            if !FiniteSpace::same(mu.space(), space) {
                return Err(CliError::Data(format!(
                    "{}: measure lives on a different space",
                    path.display()
                )));
            }
            Ok(mu)
        }
    }
}

/// Builds the experiment for one sample size; fixtures not given in the
/// config are drawn from a stream derived from the seed.
fn setup(
    config: &ExperimentConfig,
    name: BoundName,
    seed: u64,
    n: usize,
) -> CliResult<VerifySetup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ FIXTURE_SALT);
    let kernel = config.kernel()?;
    let (x, y) = spaces(config)?;
    let g_y = gram(&kernel, &y).map_err(usage("kernel on y"))?;
    match name {
        BoundName::MmdConcentration => {
            let mu = measure(config, &y, || ProbMeasure::uniform(&y))?;
            // the bound needs sup K(y, y) ≤ 1
            let c = g_y.c_k();
            let g = g_y.scaled(1.0 / (c * c));
            Ok(VerifySetup::MmdConcentration {
                mu,
                g,
                delta: config.f64_or("delta", DEFAULT_DELTA)?,
            })
        }
        BoundName::Hoeffding | BoundName::Covering => {
            let xy = FiniteSpace::product(&x, &y);
            let mu = measure(config, &xy, || {
                ProbMeasure::new(&xy, random_simplex(&mut rng, xy.len())).expect("simplex weights")
            })?;
            let eps = config.f64_or("eps", DEFAULT_EPS)?;
            if name == BoundName::Hoeffding {
                let h = match config.path("kernel_file") {
                    Some(path) => read_json::<MarkovKernel>(&path)?,
                    None => random_kernel(&mut rng, &x, &y),
                };
                Ok(VerifySetup::Hoeffding { h, mu, g_y, eps })
            } else {
                let size = config.usize_or("class_size", DEFAULT_CLASS_SIZE)?;
                let class = (0..size).map(|_| random_kernel(&mut rng, &x, &y)).collect();
                let c_m = config.learner(seed)?.c_schedule.at(n);
                Ok(VerifySetup::Covering {
                    class,
                    mu,
                    g_y,
                    eps,
                    c_m,
                })
            }
        }
    }
}

pub fn run(config: &ExperimentConfig, bound: Option<&str>) -> CliResult<()> {
    let seed = config.seed()?;
    let trials = config.trials(DEFAULT_TRIALS)?;
    let sizes = config.sizes(&DEFAULT_SIZES)?;
    let raw = bound.or(config.get("bound")).unwrap_or("hoeffding");
    let name: BoundName = raw.parse().map_err(|_| {
        CliError::Usage(format!(
            "unknown bound `{raw}` (hoeffding, covering, mmd_concentration)"
        ))
    })?;

    let mut reports: Vec<BoundReport> = Vec::with_capacity(sizes.len());
    for &n in &sizes {
        let s = setup(config, name, seed, n)?;
        let report = monte_carlo_verify(&s, n, trials, seed).map_err(|e| match e {
            probmorph::Error::InvalidParameter(_) | probmorph::Error::SpaceMismatch(_) => {
                CliError::Usage(format!("bounds: {e}"))
            }
            other => CliError::Data(format!("bounds: {other}")),
        })?;
        reports.push(report);
    }

    let mut table =
        String::from("n,theoretical_bound,empirical_failure_rate,wilson_low,wilson_high\n");
    for (n, r) in sizes.iter().zip(&reports) {
        writeln!(
            table,
            "{n},{},{},{},{}",
            r.theoretical_bound, r.empirical_failure_rate, r.wilson_low, r.wilson_high
        )
        .expect("writing to a string");
    }
    emit(
        config.out().as_deref(),
        &[
            ("bounds.csv", table.clone()),
            ("bounds.json", to_json(&reports)),
        ],
        &table,
    )?;
    let broken: Vec<String> = sizes
        .iter()
        .zip(&reports)
        .filter(|(_, r)| !r.consistent())
        .map(|(n, r)| {
            format!(
                "n = {n}: rate {} above bound {}",
                r.empirical_failure_rate, r.theoretical_bound
            )
        })
        .collect();
    if broken.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invariant(format!(
            "{name} bound violated beyond sampling error: {}",
            broken.join("; ")
        )))
    }
}
