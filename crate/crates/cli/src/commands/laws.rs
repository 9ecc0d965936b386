//! Seeded property suite over random kernels and measures.

use probmorph::morphisms::{
    compose, disintegrate, graph, graph_pushforward, pullback, pushforward, MarkovKernel,
    SignedKernel, ZeroRowPolicy,
};
use probmorph::spaces::{marginal, FiniteSpace, ProbMeasure, SignedMeasure, SpaceRef};
use probmorph::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use super::{emit, random_kernel, random_simplex, read_json, to_json};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

const DEFAULT_TRIALS: usize = 1000;
const DEFAULT_MAX_SIZE: usize = 6;
const DEFAULT_TOLERANCE: f64 = 1e-10;
const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Serialize)]
struct Law {
    name: &'static str,
    max_violation: f64,
    passed: bool,
    /// Worst instance, kept for replay when the law fails.
    #[serde(skip_serializing_if = "Option::is_none")]
    instance: Option<Value>,
}

#[derive(Debug, Serialize)]
struct LawsReport {
    seed: u64,
    trials: usize,
    max_size: usize,
    tolerance: f64,
    passed: bool,
    laws: Vec<Law>,
}

struct Tracker {
    laws: Vec<(&'static str, f64, Option<Value>)>,
}

impl Tracker {
    fn record(&mut self, name: &'static str, violation: f64, instance: impl FnOnce() -> Value) {
        let slot = match self.laws.iter_mut().find(|l| l.0 == name) {
            Some(slot) => slot,
            None => {
                self.laws.push((name, 0.0, None));
                self.laws.last_mut().expect("just pushed")
            }
        };
        // NaN counts as the worst possible violation
        let v = if violation.is_nan() {
            f64::INFINITY
        } else {
            violation
        };
        if v > slot.1 || (slot.2.is_none() && v == slot.1 && v > 0.0) {
            slot.1 = v;
            slot.2 = Some(instance());
        }
    }
}

fn kernel_json(k: &SignedKernel) -> Value {
    serde_json::to_value(k).expect("kernels serialize")
}

fn measure_json(m: &SignedMeasure) -> Value {
    serde_json::to_value(m).expect("measures serialize")
}

fn signed_measure(rng: &mut ChaCha8Rng, space: &SpaceRef) -> SignedMeasure {
    SignedMeasure::new(
        space,
        (0..space.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .expect("finite weights")
}

fn prob_measure(rng: &mut ChaCha8Rng, space: &SpaceRef) -> ProbMeasure {
    ProbMeasure::new(space, random_simplex(rng, space.len())).expect("simplex weights")
}

fn check_kernel(t: &MarkovKernel, rng: &mut ChaCha8Rng, laws: &mut Tracker) -> CliResult<()> {
    let err = |e: probmorph::Error| CliError::Invariant(format!("law evaluation failed: {e}"));
    let (x, y) = (t.source().clone(), t.target().clone());
    let left = compose(&MarkovKernel::identity(&y), t).map_err(err)?;
    let right = compose(t, &MarkovKernel::identity(&x)).map_err(err)?;
    laws.record(
        "left_unit",
        left.max_abs_diff(t),
        || json!({ "t": kernel_json(t) }),
    );
    laws.record(
        "right_unit",
        right.max_abs_diff(t),
        || json!({ "t": kernel_json(t) }),
    );

    let g = graph(t);
    let proj = MarkovKernel::projection(g.target(), Axis::Right).map_err(err)?;
    let back = compose(&proj, &g).map_err(err)?;
    laws.record(
        "projection_of_graph",
        back.max_abs_diff(t),
        || json!({ "t": kernel_json(t) }),
    );

    let mu_x = prob_measure(rng, &x);
    let joint = graph_pushforward(t, &mu_x).map_err(err)?;
    let left_marginal = marginal(&joint, Axis::Left).map_err(err)?;
    laws.record(
        "graph_marginal",
        left_marginal.max_abs_diff(&mu_x),
        || json!({ "t": kernel_json(t), "mu_x": measure_json(&mu_x) }),
    );
    let joint = ProbMeasure::from_signed(joint).map_err(err)?;
    let (_, cond) = disintegrate(&joint, ZeroRowPolicy::Uniform).map_err(err)?;
    laws.record(
        "disintegration_uniqueness",
        cond.max_abs_diff(t),
        || json!({ "t": kernel_json(t), "mu_x": measure_json(&mu_x) }),
    );

    let mu = signed_measure(rng, &x);
    let pushed = pushforward(t, &mu).map_err(err)?;
    laws.record(
        "tv_nonexpansive",
        (pushed.tv_norm() - mu.tv_norm()).max(0.0),
        || json!({ "t": kernel_json(t), "mu": measure_json(&mu) }),
    );
    let p = prob_measure(rng, &x);
    let mass = pushforward(t, &p).map_err(err)?.total_mass();
    laws.record(
        "mass_preservation",
        (mass - 1.0).abs(),
        || json!({ "t": kernel_json(t), "mu": measure_json(&p) }),
    );

    let f: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let lhs: f64 = pushed.weights().iter().zip(&f).map(|(a, b)| a * b).sum();
    let pulled = pullback(t, &f).map_err(err)?;
    let rhs: f64 = mu.weights().iter().zip(&pulled).map(|(a, b)| a * b).sum();
    laws.record(
        "adjointness",
        (lhs - rhs).abs(),
        || json!({ "t": kernel_json(t), "mu": measure_json(&mu), "f": f }),
    );
    Ok(())
}

fn check_triple(rng: &mut ChaCha8Rng, max_size: usize, laws: &mut Tracker) -> CliResult<()> {
    let err = |e: probmorph::Error| CliError::Invariant(format!("law evaluation failed: {e}"));
    let spaces: Vec<SpaceRef> = (0..4)
        .map(|i| {
            FiniteSpace::indexed(&format!("s{i}_"), rng.random_range(2..=max_size))
                .expect("nonempty")
        })
        .collect();
    let t1 = random_kernel(rng, &spaces[0], &spaces[1]);
    let t2 = random_kernel(rng, &spaces[1], &spaces[2]);
    let t3 = random_kernel(rng, &spaces[2], &spaces[3]);
    let instance =
        || json!({ "t1": kernel_json(&t1), "t2": kernel_json(&t2), "t3": kernel_json(&t3) });

    let a = compose(&compose(&t3, &t2).map_err(err)?, &t1).map_err(err)?;
    let b = compose(&t3, &compose(&t2, &t1).map_err(err)?).map_err(err)?;
    laws.record("associativity", a.max_abs_diff(&b), instance);

    let mu = signed_measure(rng, &spaces[0]);
    let direct = pushforward(&compose(&t2, &t1).map_err(err)?, &mu).map_err(err)?;
    let stepwise = pushforward(&t2, &pushforward(&t1, &mu).map_err(err)?).map_err(err)?;
    laws.record(
        "functoriality",
        direct.max_abs_diff(&stepwise),
        || json!({ "t1": kernel_json(&t1), "t2": kernel_json(&t2), "mu": measure_json(&mu) }),
    );

    let other = random_kernel(rng, &spaces[0], &spaces[1]);
    let sum = t1.plus(&other).map_err(err)?;
    let split = graph(&t1).plus(&graph(&other)).map_err(err)?;
    laws.record(
        "graph_additivity",
        graph(&sum).max_abs_diff(&split),
        || json!({ "t1": kernel_json(&t1), "t2": kernel_json(&other) }),
    );

    let xy = FiniteSpace::product(&spaces[0], &spaces[1]);
    let mu = prob_measure(rng, &xy);
    let (mu_x, cond) = disintegrate(&mu, ZeroRowPolicy::Uniform).map_err(err)?;
    let back = graph_pushforward(&cond, &mu_x).map_err(err)?;
    laws.record(
        "disintegration_round_trip",
        back.max_abs_diff(&mu),
        || json!({ "mu": measure_json(&mu) }),
    );

    check_kernel(&t1, rng, laws)
}

pub fn run(config: &ExperimentConfig) -> CliResult<()> {
    let seed = config.seed()?;
    let trials = config.trials(DEFAULT_TRIALS)?;
    let max_size = config.usize_or("max_size", DEFAULT_MAX_SIZE)?;
    if max_size < 2 {
        return Err(CliError::Usage("`max_size` must be at least 2".into()));
    }
    let tolerance = config.f64_or("tolerance", DEFAULT_TOLERANCE)?;
    let fixture = config
        .path("fixture")
        .map(|p| read_json::<SignedKernel>(&p).map(|k| (p, k)))
        .transpose()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tracker = Tracker { laws: Vec::new() };
    if let Some((path, k)) = &fixture {
        let violation = k.stochastic_violation(ROW_SUM_TOL);
        let dev = violation.map_or(0.0, |(_, d)| d);
        tracker.record("fixture_rows_are_probability_measures", dev, || {
            json!({ "fixture": path.display().to_string(), "row": violation.map(|v| v.0), "t": kernel_json(k) })
        });
        if violation.is_none() {
            let t = MarkovKernel::from_signed(k.clone())
                .map_err(|e| CliError::Invariant(format!("fixture is not a Markov kernel: {e}")))?;
            check_kernel(&t, &mut rng, &mut tracker)?;
        }
    }
    for _ in 0..trials {
        check_triple(&mut rng, max_size, &mut tracker)?;
    }

    // the fixture check uses its own tolerance on row sums
    let laws: Vec<Law> = tracker
        .laws
        .into_iter()
        .map(|(name, max_violation, instance)| {
            let limit = if name.starts_with("fixture") {
                ROW_SUM_TOL
            } else {
                tolerance
            };
            let passed = max_violation <= limit;
            Law {
                name,
                max_violation,
                passed,
                instance: if passed { None } else { instance },
            }
        })
        .collect();
    let passed = laws.iter().all(|l| l.passed);
    let report = LawsReport {
        seed,
        trials,
        max_size,
        tolerance,
        passed,
        laws,
    };
    let body = to_json(&report);
    emit(
        config.out().as_deref(),
        &[("laws.json", body.clone())],
        &body,
    )?;
    if passed {
        Ok(())
    } else {
        let failed: Vec<String> = report
            .laws
            .iter()
            .filter(|l| !l.passed)
            .map(|l| format!("{} (max violation {:e})", l.name, l.max_violation))
            .collect();
        Err(CliError::Invariant(format!(
            "violated: {}",
            failed.join(", ")
        )))
    }
}
