//! CSV ingestion and dataset construction from raw `(x, y)` columns.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::basis::{standardize, DesignMap, LogitBasis, SplineSpec, StandardizationRecord};
use crate::error::{LsbpError, Result};
use crate::model::{Dataset, RawColumns};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitKind {
    Linear,
    Spline,
}

/// How `Λ` and `Ψ` are built from the raw predictor.
///
/// Knots are on the standardized predictor scale. When they are absent the
/// interior knots sit at equally spaced quantiles and the boundary knots at
/// the observed range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisOptions {
    pub logit: LogitKind,
    pub num_basis: usize,
    pub interior_knots: Option<Vec<f64>>,
    pub boundary_knots: Option<(f64, f64)>,
    pub standardize_x: bool,
    pub standardize_y: bool,
}

impl Default for BasisOptions {
    fn default() -> Self {
        BasisOptions {
            logit: LogitKind::Spline,
            num_basis: 5,
            interior_knots: None,
            boundary_knots: None,
            standardize_x: true,
            standardize_y: true,
        }
    }
}

impl BasisOptions {
    pub fn linear() -> Self {
        BasisOptions {
            logit: LogitKind::Linear,
            ..Default::default()
        }
    }

    /// Columns of `Ψ`.
    pub fn logit_dim(&self) -> usize {
        match self.logit {
            LogitKind::Linear => 2,
            LogitKind::Spline => self.num_basis + 1,
        }
    }

    fn spline_spec(&self, xs: &[f64]) -> Result<SplineSpec> {
        let auto = SplineSpec::from_quantiles(xs, self.num_basis)?;
        let spec = SplineSpec {
            num_basis: self.num_basis,
            interior_knots: self.interior_knots.clone().unwrap_or(auto.interior_knots),
            boundary_knots: self.boundary_knots.unwrap_or(auto.boundary_knots),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn record_for(v: &[f64], enabled: bool, what: &str) -> Result<StandardizationRecord> {
    if !enabled {
        return Ok(StandardizationRecord::identity());
    }
    standardize(v)
        .map(|(_, r)| r)
        .map_err(|e| match e {
            LsbpError::DegenerateColumn(_) => {
                LsbpError::DegenerateColumn(format!("{what} column is constant"))
            }
            other => other,
        })
}

/// Standardizes per `opts` and builds the linear kernel design and the
/// log-odds design. The raw columns are kept for write-back.
pub fn build_dataset(x: &[f64], y: &[f64], opts: &BasisOptions) -> Result<Dataset> {
    if x.len() != y.len() {
        return Err(LsbpError::InvalidArgument(format!(
            "x has {} values but y has {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(LsbpError::InvalidArgument(format!(
            "need at least 2 observations, got {}",
            x.len()
        )));
    }
    let x_record = record_for(x, opts.standardize_x, "predictor")?;
    let y_record = record_for(y, opts.standardize_y, "response")?;
    let logit_basis = match opts.logit {
        LogitKind::Linear => LogitBasis::Linear,
        LogitKind::Spline => {
            let xs: Vec<f64> = x.iter().map(|&v| x_record.apply(v)).collect();
            LogitBasis::Spline(opts.spline_spec(&xs)?)
        }
    };
    let map = DesignMap {
        x_record,
        y_record,
        logit_basis,
    };
    let (lambda, psi) = map.designs(x)?;
    let ym = DVector::from_iterator(y.len(), y.iter().map(|&v| map.y_to_model(v)));
    let mut data = Dataset::new(ym, lambda, psi)?;
    data.transform = Some(map);
    data.raw = Some(RawColumns {
        x: x.to_vec(),
        y: y.to_vec(),
    });
    Ok(data)
}

/// Reads two numeric columns from a headed CSV. Row numbers in errors count
/// data rows from 1 (the header is not counted).
pub fn read_columns<R: Read>(rd: R, x_column: &str, y_column: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(rd);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| LsbpError::Ingestion {
            row: 0,
            message: format!("missing column '{name}' in header"),
        })
    };
    let (ix, iy) = (find(x_column)?, find(y_column)?);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| LsbpError::Ingestion {
            row,
            message: e.to_string(),
        })?;
        let cell = |i: usize, name: &str| -> Result<f64> {
            let raw = rec.get(i).ok_or_else(|| LsbpError::Ingestion {
                row,
                message: format!("missing value for '{name}'"),
            })?;
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(LsbpError::Ingestion {
                    row,
                    message: format!("non-numeric value '{raw}' in column '{name}'"),
                }),
            }
        };
        x.push(cell(ix, x_column)?);
        y.push(cell(iy, y_column)?);
    }
    if x.len() < 2 {
        return Err(LsbpError::Ingestion {
            row: x.len(),
            message: format!("need at least 2 data rows, got {}", x.len()),
        });
    }
    Ok((x, y))
}

pub fn load_dataset(
    path: &Path,
    x_column: &str,
    y_column: &str,
    opts: &BasisOptions,
) -> Result<Dataset> {
    let (x, y) = read_columns(File::open(path)?, x_column, y_column)?;
    build_dataset(&x, &y, opts)
}

/// Writes the raw columns as a two-column CSV that [`read_columns`] reads
/// back bit-exactly (shortest round-trip float formatting).
pub fn write_columns<W: Write>(w: W, x_column: &str, y_column: &str, x: &[f64], y: &[f64]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([x_column, y_column])?;
    for (a, b) in x.iter().zip(y) {
        wr.write_record([a.to_string(), b.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_dataset(data: &Dataset, path: &Path, x_column: &str, y_column: &str) -> Result<()> {
    let raw = data
        .raw
        .as_ref()
        .ok_or_else(|| LsbpError::InvalidArgument("dataset has no raw columns".into()))?;
    write_columns(File::create(path)?, x_column, y_column, &raw.x, &raw.y)
}
