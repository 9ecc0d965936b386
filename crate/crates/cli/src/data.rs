//! CSV ingestion. Datasets have an `x,y` header; `embed` also accepts a
//! single `y` column. Labels must exist in the declared spaces.

use std::path::Path;

use probmorph::spaces::{Dataset, FiniteSpace, SpaceRef};

use crate::error::{CliError, CliResult};

/// Rows of a CSV file with their line numbers.
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<(u64, Vec<String>)>,
}

pub fn read_table(path: &Path) -> CliResult<Table> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let where_ = |line: Option<u64>| match line {
        Some(l) => format!("{}:{l}", path.display()),
        None => path.display().to_string(),
    };
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", where_(e.position().map(|p| p.line())))))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            CliError::Data(format!("{}: {e}", where_(e.position().map(|p| p.line()))))
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        rows.push((line, record.iter().map(str::to_string).collect()));
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: no samples", path.display())));
    }
    Ok(Table { columns, rows })
}

fn resolve(
    space: &SpaceRef,
    label: &str,
    path: &Path,
    line: u64,
    column: &str,
) -> CliResult<usize> {
    space.index_of(label).map_err(|_| {
        CliError::Data(format!(
            "{}:{line}: unknown {column} label `{label}`",
            path.display()
        ))
    })
}

/// Samples of an `x,y` file over the declared spaces.
pub fn read_dataset(path: &Path, x: &SpaceRef, y: &SpaceRef) -> CliResult<Dataset> {
    let table = read_table(path)?;
    if table.columns != ["x", "y"] {
        return Err(CliError::Data(format!(
            "{}:1: expected header `x,y`, got `{}`",
            path.display(),
            table.columns.join(",")
        )));
    }
    let xy = FiniteSpace::product(x, y);
    let mut samples = Vec::with_capacity(table.rows.len());
    for (line, row) in &table.rows {
        let xi = resolve(x, &row[0], path, *line, "x")?;
        let yi = resolve(y, &row[1], path, *line, "y")?;
        samples.push((xi, yi));
    }
    Dataset::from_indices(&xy, samples)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Point indices of a sample file in `space`: a `y` column over `y`, or
/// `x,y` columns over the product of `x` and `y`.
pub fn read_points(
    path: &Path,
    x: Option<&SpaceRef>,
    y: &SpaceRef,
) -> CliResult<(SpaceRef, Vec<usize>)> {
    let table = read_table(path)?;
    match table
        .columns
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>()
        .as_slice()
    {
        ["y"] => {
            let mut idx = Vec::with_capacity(table.rows.len());
            for (line, row) in &table.rows {
                idx.push(resolve(y, &row[0], path, *line, "y")?);
            }
            Ok((y.clone(), idx))
        }
        ["x", "y"] => {
            let x = x.ok_or_else(|| {
                CliError::Data(format!(
                    "{}: `x,y` samples need a declared x space",
                    path.display()
                ))
            })?;
            let xy = FiniteSpace::product(x, y);
            let mut idx = Vec::with_capacity(table.rows.len());
            for (line, row) in &table.rows {
                let xi = resolve(x, &row[0], path, *line, "x")?;
                let yi = resolve(y, &row[1], path, *line, "y")?;
                idx.push(xy.pair_index(xi, yi));
            }
            Ok((xy, idx))
        }
        other => Err(CliError::Data(format!(
            "{}:1: expected header `x,y` or `y`, got `{}`",
            path.display(),
            other.join(",")
        ))),
    }
}
