//! Experiment configuration: `key = value` lines with `#` comments.
//!
//! Relative file paths are resolved against the directory of the config
//! file. Command-line flags override the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use probmorph::kernels::{KernelSpec, KernelVariant};
use probmorph::learning::{LearnerConfig, Schedule};
use probmorph::spaces::{FiniteSpace, SpaceDoc, SpaceRef};

use crate::error::{usage, CliError, CliResult};

const KEYS: &[&str] = &[
    "seed",
    "out",
    "x_labels",
    "x_coords",
    "x_file",
    "y_labels",
    "y_coords",
    "y_file",
    "kernel",
    "sigma",
    "scale",
    "n",
    "trials",
    "gamma",
    "c_schedule",
    "restarts",
    "max_iters",
    "tol",
    "step_size",
    "bound",
    "eps",
    "delta",
    "class_size",
    "mu_file",
    "kernel_file",
    "truth_file",
    "fixture",
    "max_size",
    "tolerance",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    /// `n^{−1/2}` at the dataset size.
    Auto,
    Fixed(f64),
}

/// Parsed configuration; every field is optional until a subcommand asks
/// for it.
#[derive(Debug, Clone, Default)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
    base: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str, base: PathBuf) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(format!("line {}: unknown key `{key}`", i + 1));
            }
            if values
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(format!("line {}: duplicate key `{key}`", i + 1));
            }
        }
        Ok(ExperimentConfig { values, base })
    }

    /// Sets a value given on the command line; paths stay relative to the
    /// working directory.
    pub fn set(&mut self, key: &str, value: String) {
        self.values.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| CliError::Usage(format!("`{key}`: cannot parse `{v}`")))
            })
            .transpose()
    }

    fn positive<T: std::str::FromStr + PartialOrd + Default + Copy>(
        &self,
        key: &str,
        default: T,
    ) -> CliResult<T> {
        let v = self.parsed::<T>(key)?.unwrap_or(default);
        if v <= T::default() {
            return Err(CliError::Usage(format!("`{key}` must be positive")));
        }
        Ok(v)
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|v| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                self.base.join(p)
            }
        })
    }

    /// Seed is mandatory; there is no wall-clock fallback.
    pub fn seed(&self) -> CliResult<u64> {
        self.parsed("seed")?.ok_or_else(|| {
            CliError::Usage("a seed is required (`--seed` or `seed = …` in the config)".into())
        })
    }

    pub fn out(&self) -> Option<PathBuf> {
        self.get("out").map(PathBuf::from)
    }

    pub fn trials(&self, default: usize) -> CliResult<usize> {
        self.positive("trials", default)
    }

    pub fn usize_or(&self, key: &str, default: usize) -> CliResult<usize> {
        self.positive(key, default)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> CliResult<f64> {
        let v = self.positive(key, default)?;
        if !v.is_finite() {
            return Err(CliError::Usage(format!("`{key}` must be finite")));
        }
        Ok(v)
    }

    /// Comma-separated sample sizes.
    pub fn sizes(&self, default: &[usize]) -> CliResult<Vec<usize>> {
        let Some(v) = self.get("n") else {
            return Ok(default.to_vec());
        };
        let sizes = v
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| CliError::Usage(format!("`n`: cannot parse `{v}`")))?;
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(CliError::Usage(
                "`n` must list positive sample sizes".into(),
            ));
        }
        Ok(sizes)
    }

    pub fn gamma(&self) -> CliResult<Gamma> {
        match self.get("gamma") {
            None | Some("auto") => Ok(Gamma::Auto),
            Some(_) => Ok(Gamma::Fixed(self.f64_or("gamma", 1.0)?)),
        }
    }

    pub fn kernel(&self) -> CliResult<KernelSpec> {
        let raw = self.get("kernel").unwrap_or("delta");
        // `--kernel gaussian:0.5` carries its own parameter
        let (name, inline) = match raw.split_once(':') {
            Some((n, p)) => (
                n.trim(),
                Some(
                    p.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Usage(format!("`kernel`: cannot parse `{raw}`")))?,
                ),
            ),
            None => (raw.trim(), None),
        };
        let sigma = match inline {
            Some(s) => s,
            None => self.parsed::<f64>("sigma")?.unwrap_or(1.0),
        };
        let variant = match name {
            "gaussian" => KernelVariant::Gaussian { sigma },
            "laplacian" => KernelVariant::Laplacian { sigma },
            "linear" => KernelVariant::Linear,
            "delta" => KernelVariant::Delta,
            other => return Err(CliError::Usage(format!("unknown kernel `{other}`"))),
        };
        let scale = self.parsed::<f64>("scale")?.unwrap_or(1.0);
        KernelSpec::new(variant, scale).map_err(usage("kernel"))
    }

    pub fn learner(&self, seed: u64) -> CliResult<LearnerConfig> {
        let defaults = LearnerConfig::with_seed(seed);
        let c_schedule = match self.get("c_schedule") {
            None => defaults.c_schedule,
            Some(v) => parse_schedule(v)?,
        };
        let config = LearnerConfig {
            c_schedule,
            restarts: self.parsed("restarts")?.unwrap_or(defaults.restarts),
            max_iters: self.parsed("max_iters")?.unwrap_or(defaults.max_iters),
            tol: self.parsed("tol")?.unwrap_or(defaults.tol),
            step_size: self.parsed("step_size")?.unwrap_or(defaults.step_size),
            ..defaults
        };
        config.validate().map_err(usage("learner"))?;
        Ok(config)
    }

    /// Space `prefix` (`x` or `y`) from `{prefix}_file`, or from
    /// `{prefix}_labels` and/or `{prefix}_coords`; `None` if undeclared.
    pub fn space(&self, prefix: &str) -> CliResult<Option<SpaceRef>> {
        let file_key = format!("{prefix}_file");
        if let Some(path) = self.path(&file_key) {
            let text = fs::read_to_string(&path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let doc: SpaceDoc = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            return SpaceRef::try_from(doc).map(Some).map_err(usage(&file_key));
        }
        let labels = self.get(&format!("{prefix}_labels")).map(split_list);
        let coords = self
            .get(&format!("{prefix}_coords"))
            .map(|v| parse_coords(v, &format!("{prefix}_coords")))
            .transpose()?;
        let context = format!("{prefix} space");
        let space = match (labels, coords) {
            (None, None) => return Ok(None),
            (Some(labels), None) => FiniteSpace::new(labels),
            (None, Some(coords)) => {
                let labels: Vec<String> =
                    (0..coords.len()).map(|i| format!("{prefix}{i}")).collect();
                FiniteSpace::with_coords(labels, coords)
            }
            (Some(labels), Some(coords)) => FiniteSpace::with_coords(labels, coords),
        };
        space.map(Some).map_err(usage(&context))
    }
}

fn split_list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).collect()
}

/// `0, 0.5, 1` declares one-dimensional points; `0, 1; 2, 3` declares one
/// point per `;`-separated group.
fn parse_coords(v: &str, key: &str) -> CliResult<Vec<Vec<f64>>> {
    let number = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| CliError::Usage(format!("`{key}`: cannot parse `{}`", s.trim())))
    };
    if v.contains(';') {
        v.split(';')
            .map(|group| group.split(',').map(number).collect())
            .collect()
    } else {
        v.split(',').map(|s| number(s).map(|x| vec![x])).collect()
    }
}

/// `constant <value>` or `power <coef> <exponent>`.
fn parse_schedule(v: &str) -> CliResult<Schedule> {
    let parts: Vec<&str> = v.split_whitespace().collect();
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| CliError::Usage(format!("`c_schedule`: cannot parse `{s}`")))
    };
    match parts.as_slice() {
        ["constant", value] => Ok(Schedule::Constant { value: num(value)? }),
        ["power", coef, exponent] => Ok(Schedule::Power {
            coef: num(coef)?,
            exponent: num(exponent)?,
        }),
        _ => Err(CliError::Usage(format!(
            "`c_schedule` must be `constant <value>` or `power <coef> <exponent>`, got `{v}`"
        ))),
    }
}
