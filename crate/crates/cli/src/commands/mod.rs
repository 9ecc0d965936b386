mod bounds;
mod embed;
mod estimate;
mod laws;

use std::fs;
use std::path::Path;

use probmorph::morphisms::MarkovKernel;
use probmorph::spaces::SpaceRef;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub use bounds::run as bounds;
pub use embed::run as embed;
pub use estimate::run as estimate;
pub use laws::run as laws;

/// Writes `files` into `out` (created if missing), or prints `stdout` when
/// no output directory is configured.
fn emit(out: Option<&Path>, files: &[(&str, String)], stdout: &str) -> CliResult<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            for (name, body) in files {
                let path = dir.join(name);
                fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
                println!("wrote {}", path.display());
            }
        }
        None => print!("{stdout}"),
    }
    Ok(())
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn random_simplex(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn random_kernel(rng: &mut ChaCha8Rng, source: &SpaceRef, target: &SpaceRef) -> MarkovKernel {
    let rows = (0..source.len())
        .map(|_| random_simplex(rng, target.len()))
        .collect();
    MarkovKernel::new(source, target, rows).expect("rows lie in the simplex")
}
