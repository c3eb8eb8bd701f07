//! CSV ingestion and data preparation: trial loading and writing,
//! one-sided winsorization, and small-stratum pruning.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::proxy::Trial;
use crate::recipe::ExternalData;

/// Column roles in a trial CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub outcome_col: String,
    pub arm_col: String,
    pub stratum_col: String,
    pub covariate_cols: Vec<String>,
}

impl CsvSchema {
    pub fn new(outcome: &str, arm: &str, stratum: &str, covariates: &[&str]) -> Self {
        Self {
            outcome_col: outcome.to_string(),
            arm_col: arm.to_string(),
            stratum_col: stratum.to_string(),
            covariate_cols: covariates.iter().map(|c| c.to_string()).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let mut all = vec![&self.outcome_col, &self.arm_col, &self.stratum_col];
        all.extend(self.covariate_cols.iter());
        for (i, a) in all.iter().enumerate() {
            if all[..i].contains(a) {
                return Err(Error::InvalidSpec(format!("column '{a}' used twice in schema")));
            }
        }
        Ok(())
    }
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::InvalidInput(format!("column '{name}' not found in header")))
}

fn parse_real(cell: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("cannot parse '{cell}' as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("non-finite value '{cell}'"),
        });
    }
    Ok(v)
}

/// Reads a trial from CSV text. Rows are numbered from 1 after the header.
/// Stratum tokens are numbered in order of first appearance.
pub fn read_trial<R: Read>(reader: R, schema: &CsvSchema) -> Result<Trial> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::InvalidInput("empty file".into()));
    }
    let yi = header_index(&headers, &schema.outcome_col)?;
    let ai = header_index(&headers, &schema.arm_col)?;
    let si = header_index(&headers, &schema.stratum_col)?;
    let xi = schema
        .covariate_cols
        .iter()
        .map(|c| header_index(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let mut y = Vec::new();
    let mut a = Vec::new();
    let mut strata = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut lookup: HashMap<String, usize> = HashMap::new();
    let mut x = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        let field = |i: usize, name: &str| -> Result<&str> {
            rec.get(i).ok_or_else(|| Error::Parse {
                row,
                column: name.to_string(),
                message: "missing field".into(),
            })
        };
        y.push(parse_real(field(yi, &schema.outcome_col)?, row, &schema.outcome_col)?);
        let arm = field(ai, &schema.arm_col)?.trim();
        a.push(match arm {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(Error::Parse {
                    row,
                    column: schema.arm_col.clone(),
                    message: format!("arm value '{other}' is not 0 or 1"),
                })
            }
        });
        let token = field(si, &schema.stratum_col)?.trim().to_string();
        let next = names.len();
        let label = *lookup.entry(token.clone()).or_insert_with(|| {
            names.push(token);
            next
        });
        strata.push(label);
        for (&j, name) in xi.iter().zip(&schema.covariate_cols) {
            x.push(parse_real(field(j, name)?, row, name)?);
        }
    }
    if y.is_empty() {
        return Err(Error::InvalidInput("file has no data rows".into()));
    }
    let n = y.len();
    let p = xi.len();
    let x = DMatrix::from_row_slice(n, p, &x);
    Trial::with_names(y, a, strata, x, names, schema.covariate_cols.clone())
}

pub fn load_trial(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Trial> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_trial(file, schema)
}

/// Writes a trial with the schema's column names; covariates keep the
/// trial's order. Reals use the shortest representation that parses back
/// to the same value.
pub fn write_trial_to<W: Write>(trial: &Trial, schema: &CsvSchema, writer: W) -> Result<()> {
    if schema.covariate_cols.len() != trial.p() {
        return Err(Error::InvalidInput("schema covariate count does not match trial".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![schema.outcome_col.clone(), schema.arm_col.clone(), schema.stratum_col.clone()];
    header.extend(schema.covariate_cols.iter().cloned());
    w.write_record(&header)?;
    for i in 0..trial.n() {
        let mut rec = vec![
            trial.y()[i].to_string(),
            trial.a()[i].to_string(),
            trial.stratum_names()[trial.strata()[i]].clone(),
        ];
        rec.extend((0..trial.p()).map(|j| trial.x()[(i, j)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trial(trial: &Trial, schema: &CsvSchema, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_trial_to(trial, schema, file)
}

/// Reads external data: an outcome column and named covariate columns.
pub fn load_external(path: impl AsRef<Path>, outcome_col: &str, covariate_cols: &[String]) -> Result<ExternalData> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers()?.clone();
    let yi = header_index(&headers, outcome_col)?;
    let xi = covariate_cols
        .iter()
        .map(|c| header_index(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let mut y = Vec::new();
    let mut x = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec?;
        let cell = |i: usize, name: &str| {
            rec.get(i).ok_or_else(|| Error::Parse {
                row,
                column: name.to_string(),
                message: "missing field".into(),
            })
        };
        y.push(parse_real(cell(yi, outcome_col)?, row, outcome_col)?);
        for (&j, name) in xi.iter().zip(covariate_cols) {
            x.push(parse_real(cell(j, name)?, row, name)?);
        }
    }
    if y.is_empty() {
        return Err(Error::InvalidInput("external file has no data rows".into()));
    }
    let n = y.len();
    Ok(ExternalData {
        x: DMatrix::from_row_slice(n, covariate_cols.len(), &x),
        y,
        names: covariate_cols.to_vec(),
    })
}

/// Quantile by linear interpolation between order statistics
/// (h = (n - 1) q on the sorted values). A position within 1e-9 of an
/// integer is read as that order statistic.
pub fn quantile_type7(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("empty vector".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidSpec(format!("quantile level must be in [0,1], got {q}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut h = (sorted.len() - 1) as f64 * q;
    if (h - h.round()).abs() < 1e-9 {
        h = h.round();
    }
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Caps values above the `upper_percentile` quantile at that quantile.
/// The lower tail is untouched.
pub fn winsorize(values: &[f64], upper_percentile: f64) -> Result<Vec<f64>> {
    if !(upper_percentile > 0.0 && upper_percentile <= 1.0) {
        return Err(Error::InvalidSpec(format!(
            "upper percentile must be in (0,1], got {upper_percentile}"
        )));
    }
    let cap = quantile_type7(values, upper_percentile)?;
    Ok(values.iter().map(|&v| v.min(cap)).collect())
}

/// Winsorizes the outcome and the listed covariates of a trial.
pub fn winsorize_trial(trial: &Trial, upper_percentile: f64, covariates: &[usize]) -> Result<Trial> {
    let y = winsorize(trial.y(), upper_percentile)?;
    let mut x = trial.x().clone();
    for &j in covariates {
        if j >= trial.p() {
            return Err(Error::InvalidInput(format!("covariate index {j} out of range")));
        }
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let w = winsorize(&col, upper_percentile)?;
        x.set_column(j, &nalgebra::DVector::from_vec(w));
    }
    trial.with_data(y, x, trial.covariate_names().to_vec())
}

/// What [`prune_strata`] removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneReport {
    pub kept_units: usize,
    pub kept_strata: usize,
    pub removed_units: usize,
    pub removed_strata: Vec<String>,
}

/// Drops every stratum with fewer than `min_size` units and renumbers the
/// survivors.
pub fn prune_strata(trial: &Trial, min_size: usize) -> Result<(Trial, PruneReport)> {
    if min_size == 0 {
        return Err(Error::InvalidSpec("min_size must be at least 1".into()));
    }
    let members = trial.stratum_members();
    let keep: Vec<bool> = members.iter().map(|m| m.len() >= min_size).collect();
    let idx: Vec<usize> = (0..trial.n()).filter(|&i| keep[trial.strata()[i]]).collect();
    if idx.is_empty() {
        return Err(Error::InvalidInput(format!("every stratum has fewer than {min_size} units")));
    }
    let removed_strata = keep
        .iter()
        .enumerate()
        .filter(|(_, &k)| !k)
        .map(|(s, _)| trial.stratum_names()[s].clone())
        .collect();
    let pruned = trial.subset(&idx)?;
    let report = PruneReport {
        kept_units: pruned.n(),
        kept_strata: pruned.k(),
        removed_units: trial.n() - pruned.n(),
        removed_strata,
    };
    Ok((pruned, report))
}
