//! Long-format CSV ingestion and output.

use std::fmt;
use std::path::Path;

use conmix::model::Row;
use conmix::{Dataset, FamilyKind};

const REQUIRED: [&str; 3] = ["id", "occasion", "y"];

#[derive(Debug)]
pub struct DataError {
    pub line: Option<u64>,
    pub message: String,
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for DataError {}

fn err(line: Option<u64>, message: impl Into<String>) -> DataError {
    DataError { line, message: message.into() }
}

/// Read a long-format CSV with columns `id`, `occasion`, `y` and numeric
/// covariates. Weibull data also needs a `status` column equal to 1.
pub fn read_dataset(path: &Path, family: FamilyKind) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(None, format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr.headers().map_err(|e| err(Some(1), e.to_string()))?.iter().map(str::to_string).collect();
    for col in REQUIRED {
        if !header.iter().any(|h| h == col) {
            return Err(err(Some(1), format!("missing required column `{col}`")));
        }
    }
    if family == FamilyKind::Weibull && !header.iter().any(|h| h == "status") {
        return Err(err(Some(1), "Weibull data needs a `status` column"));
    }
    let pos = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (id_at, occ_at, y_at) = (pos("id"), pos("occasion"), pos("y"));
    let cov_idx: Vec<usize> = (0..header.len()).filter(|i| ![id_at, occ_at, y_at].contains(i)).collect();
    let columns: Vec<String> = cov_idx.iter().map(|&i| header[i].clone()).collect();
    let status_at = header.iter().position(|h| h == "status");

    let mut rows = Vec::new();
    let mut first_line = std::collections::HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.position().map(|p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64, DataError> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| err(Some(line), format!("column `{}`: cannot parse `{}` as a number", header[i], &rec[i])))
        };
        let id = rec[id_at].to_string();
        if id.is_empty() {
            return Err(err(Some(line), "empty id"));
        }
        let occasion: u32 = rec[occ_at]
            .parse()
            .map_err(|_| err(Some(line), format!("occasion `{}` is not a positive integer", &rec[occ_at])))?;
        if occasion == 0 {
            return Err(err(Some(line), "occasions start at 1"));
        }
        if let Some(prev) = first_line.insert((id.clone(), occasion), line) {
            return Err(err(
                Some(line),
                format!("duplicate (id, occasion) = ({id}, {occasion}); first seen on line {prev}"),
            ));
        }
        if let Some(s) = status_at {
            if family == FamilyKind::Weibull && num(s)? != 1.0 {
                return Err(err(Some(line), "status other than 1: censoring out of scope"));
            }
        }
        let values = cov_idx.iter().map(|&i| num(i)).collect::<Result<Vec<_>, _>>()?;
        rows.push(Row { id, occasion, y: num(y_at)?, values });
    }
    Dataset::new(columns, rows).map_err(|e| err(None, e.to_string()))
}

/// Write a dataset in the same long format.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), DataError> {
    let io = |e: csv::Error| err(None, format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["id".to_string(), "occasion".into(), "y".into()];
    header.extend(data.columns().iter().cloned());
    w.write_record(&header).map_err(io)?;
    for r in data.rows() {
        let mut rec = vec![r.id.clone(), r.occasion.to_string(), r.y.to_string()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| err(None, e.to_string()))
}
