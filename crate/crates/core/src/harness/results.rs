//! Per-image result rows, the CSV format and aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 9] = ["task", "ratio", "S", "loss", "method", "seed", "image_id", "psnr", "wall_ms"];

/// Loss label of rows without a pre-trained model.
pub const NO_LOSS: &str = "none";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lowshot,
    Untrained,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lowshot => "lowshot",
            Method::Untrained => "untrained",
        }
    }
}

/// One reconstruction of one test image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    pub ratio: f64,
    #[serde(rename = "S")]
    pub shots: usize,
    pub loss: String,
    pub method: Method,
    pub seed: u64,
    pub image_id: String,
    pub psnr: f64,
    pub wall_ms: u64,
}

impl ResultRow {
    /// Identity of the cell that produced the row.
    pub fn key(&self) -> String {
        row_key(&self.task, self.ratio, self.shots, &self.loss, self.method, self.seed, &self.image_id)
    }
}

pub fn row_key(task: &str, ratio: f64, shots: usize, loss: &str, method: Method, seed: u64, image_id: &str) -> String {
    format!("{task}|{ratio}|{shots}|{loss}|{}|{seed}|{image_id}", method.as_str())
}

/// Serializes rows (header included) in the given order.
pub fn rows_to_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(csv_error)?;
    for r in rows {
        w.serialize(RowOut::from(r)).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

/// Serialization view of a row; the header is written explicitly.
#[derive(Serialize)]
struct RowOut<'a> {
    task: &'a str,
    ratio: f64,
    shots: usize,
    loss: &'a str,
    method: Method,
    seed: u64,
    image_id: &'a str,
    psnr: f64,
    wall_ms: u64,
}

impl<'a> From<&'a ResultRow> for RowOut<'a> {
    fn from(r: &'a ResultRow) -> Self {
        Self {
            task: &r.task,
            ratio: r.ratio,
            shots: r.shots,
            loss: &r.loss,
            method: r.method,
            seed: r.seed,
            image_id: &r.image_id,
            psnr: r.psnr,
            wall_ms: r.wall_ms,
        }
    }
}

/// One CSV line (no header) for appending.
pub fn row_line(row: &ResultRow) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.serialize(RowOut::from(row)).map_err(csv_error)?;
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

fn csv_error(e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::Parse(format!("line {}: {e}", p.line())),
        None => Error::Parse(e.to_string()),
    }
}

/// Parses a result CSV; errors name the offending line.
pub fn parse_rows(text: &str) -> Result<Vec<ResultRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers().map_err(csv_error)?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Parse(format!(
            "line 1: expected header `{}`, found `{}`",
            CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for rec in rd.deserialize::<ResultRow>() {
        let row = rec.map_err(csv_error)?;
        if !row.psnr.is_finite() || !row.ratio.is_finite() {
            return Err(Error::Parse(format!("non-finite value in row {}", row.key())));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_rows(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_rows(&text)
}

/// Reads rows left by a possibly interrupted run: a missing file yields no
/// rows and an unterminated last line is dropped.
pub fn read_rows_for_resume(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if text.is_empty() {
        return Ok(Vec::new());
    }
    if !text.ends_with('\n') {
        let cut = text.rfind('\n').map_or(0, |i| i + 1);
        log::warn!("{}: dropping incomplete last line", path.display());
        text.truncate(cut);
        if text.is_empty() {
            return Ok(Vec::new());
        }
    }
    parse_rows(&text)
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

/// Mean and sample standard deviation of one (task, ratio, S, loss, method) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub task: String,
    pub ratio: f64,
    #[serde(rename = "S")]
    pub shots: usize,
    pub loss: String,
    pub method: Method,
    pub count: usize,
    pub mean_psnr: f64,
    pub std_psnr: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Groups rows and summarizes their PSNR, ordered by group.
pub fn aggregate(rows: &[ResultRow]) -> Vec<Aggregate> {
    type Key = (String, u64, usize, String, Method);
    let mut groups: BTreeMap<Key, (f64, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        // Bit order of positive floats matches numeric order.
        let key = (r.task.clone(), r.ratio.to_bits(), r.shots, r.loss.clone(), r.method);
        groups.entry(key).or_insert_with(|| (r.ratio, Vec::new())).1.push(r.psnr);
    }
    groups
        .into_iter()
        .map(|((task, _, shots, loss, method), (ratio, v))| {
            let (mean_psnr, std_psnr) = mean_std(&v);
            Aggregate {
                task,
                ratio,
                shots,
                loss,
                method,
                count: v.len(),
                mean_psnr,
                std_psnr,
            }
        })
        .collect()
}

pub fn aggregates_to_csv(aggs: &[Aggregate]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for a in aggs {
        w.serialize(a).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(psnr: f64) -> ResultRow {
        ResultRow {
            task: "cs".into(),
            ratio: 0.1,
            shots: 5,
            loss: "mmd".into(),
            method: Method::Lowshot,
            seed: 0,
            image_id: "abc".into(),
            psnr,
            wall_ms: 12,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = vec![row(23.456789012345678), row(1e-7), row(100.0)];
        let bytes = rows_to_csv(&rows).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("task,ratio,S,loss,method,seed,image_id,psnr,wall_ms\n"));
        assert_eq!(parse_rows(&text).unwrap(), rows);
        let mut again = String::from("task,ratio,S,loss,method,seed,image_id,psnr,wall_ms\n");
        for r in &rows {
            again.push_str(std::str::from_utf8(&row_line(r).unwrap()).unwrap());
        }
        assert_eq!(again, text);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "task,ratio,S,loss,method,seed,image_id,psnr,wall_ms\ncs,0.1,5,mmd,lowshot,0,a,20,1\ncs,0.1,five,mmd,lowshot,0,a,20,1\n";
        let err = parse_rows(text).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn std_is_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }
}
