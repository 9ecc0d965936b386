//! W-regularized estimation from an `x,y` sample file.

use std::path::Path;

use probmorph::kernels::{gram, mmd};
use probmorph::learning::{
    gamma_schedule, regularized_estimate, WFunctionalSpec, WTerms, OPERATOR_NORM_MAX_POINTS,
};
use probmorph::morphisms::MarkovKernel;
use probmorph::spaces::{Dataset, FiniteSpace};
use serde::Serialize;

use super::{emit, read_json, to_json};
use crate::config::{ExperimentConfig, Gamma};
use crate::data::read_dataset;
use crate::error::{data, usage, CliError, CliResult};

#[derive(Debug, Serialize)]
struct EstimateReport {
    seed: u64,
    n: usize,
    kernel: String,
    gamma: f64,
    objective: f64,
    fidelity: f64,
    w: WTerms,
    eps_certificate: f64,
    meets_contract: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    sup_mmd_error: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Combined<'a> {
    estimate: &'a MarkovKernel,
    report: &'a EstimateReport,
    trace: &'a [f64],
}

pub fn run(config: &ExperimentConfig, data_path: &Path) -> CliResult<()> {
    let seed = config.seed()?;
    let learner = config.learner(seed)?;
    let kernel = config.kernel()?;
    let x = config
        .space("x")?
        .ok_or_else(|| CliError::Usage("estimate needs a declared x space".into()))?;
    let y = config
        .space("y")?
        .ok_or_else(|| CliError::Usage("estimate needs a declared y space".into()))?;
    let mut s = read_dataset(data_path, &x, &y)?;
    // `--n` keeps the first n samples
    if let Some(n) = config.sizes(&[])?.first().copied() {
        if n < s.len() {
            s = Dataset::from_indices(s.space(), s.samples()[..n].to_vec())
                .map_err(data("dataset"))?;
        }
    }
    let n = s.len();
    let gamma = match config.gamma()? {
        Gamma::Auto => gamma_schedule(n),
        Gamma::Fixed(g) => g,
    };

    let xy = FiniteSpace::product(&x, &y);
    let g_x = gram(&kernel, &x).map_err(usage("kernel on x"))?;
    let g_y = gram(&kernel, &y).map_err(usage("kernel on y"))?;
    let g_xy = gram(&kernel, &xy).map_err(usage("kernel on x×y"))?;
    let spec = if x.coords().is_some() {
        WFunctionalSpec::new(g_y.clone(), g_xy.clone(), Some(g_x))
    } else {
        // the Lipschitz term needs source coordinates
        eprintln!("note: x has no coordinates; the Lipschitz term of W is disabled");
        let op = x.len() <= OPERATOR_NORM_MAX_POINTS;
        WFunctionalSpec::with_terms(g_y.clone(), g_xy.clone(), Some(g_x), true, false, op)
    }
    .map_err(usage("W functional"))?;
    let est =
        regularized_estimate(&s, gamma, &g_xy, &spec, &learner).map_err(data("estimation"))?;

    let sup_mmd_error = match config.path("truth_file") {
        None => None,
        Some(path) => {
            let truth: MarkovKernel = read_json(&path)?;
            if !FiniteSpace::same(truth.source(), &x) || !FiniteSpace::same(truth.target(), &y) {
                return Err(CliError::Data(format!(
                    "{}: truth kernel spaces differ from the declared spaces",
                    path.display()
                )));
            }
            let mut worst = 0.0_f64;
            for i in 0..x.len() {
                let d = mmd(&g_y, &est.h.row_measure(i), &truth.row_measure(i))
                    .map_err(data("truth error"))?;
                worst = worst.max(d);
            }
            Some(worst)
        }
    };

    if !est.meets_contract {
        eprintln!(
            "warning: optimization gap {:e} exceeds gamma² = {:e}",
            est.eps_certificate,
            gamma * gamma
        );
    }
    let report = EstimateReport {
        seed,
        n,
        kernel: kernel.name().to_string(),
        gamma,
        objective: est.objective,
        fidelity: est.fidelity,
        w: est.w,
        eps_certificate: est.eps_certificate,
        meets_contract: est.meets_contract,
        sup_mmd_error,
    };
    let combined = Combined {
        estimate: &est.h,
        report: &report,
        trace: &est.trace,
    };
    emit(
        config.out().as_deref(),
        &[
            ("estimate.json", to_json(&est.h)),
            ("trace.json", to_json(&est.trace)),
            ("report.json", to_json(&report)),
        ],
        &to_json(&combined),
    )
}
