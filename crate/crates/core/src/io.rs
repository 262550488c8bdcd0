//! CSV and JSON files read and written by the command line front end.
//!
//! Grids are stored one functional per file: the first row holds `t`
//! followed by the frequencies, each later row a time index followed by
//! that time's values. Floats use Rust's shortest round-trip formatting.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::MultivariateSeries;
use crate::posterior::ScalarGrid;

fn csv_error(path: &Path, err: csv::Error) -> Error {
    match err.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Read a numeric `T × N` table with an optional single header row.
pub fn load_csv(path: impl AsRef<Path>) -> Result<MultivariateSeries> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = i + 1;
        if i == 0 && record.iter().any(|cell| cell.parse::<f64>().is_err()) {
            width = Some(record.len());
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::Data(format!(
                "{}: line {line} has {} cells, expected {expected}",
                path.display(),
                record.len()
            )));
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(j, cell)| match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(_) => Err(Error::Data(format!(
                    "{}: non-finite value {cell:?} at line {line}, column {}",
                    path.display(),
                    j + 1
                ))),
                Err(_) => Err(Error::Data(format!(
                    "{}: non-numeric cell {cell:?} at line {line}, column {}",
                    path.display(),
                    j + 1
                ))),
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    MultivariateSeries::from_rows(&rows)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn finish(path: &Path, mut w: BufWriter<File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write a series with header `x1, …, xN`.
pub fn write_series_csv(path: impl AsRef<Path>, series: &MultivariateSeries) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let header: Vec<String> = (1..=series.dim()).map(|j| format!("x{j}")).collect();
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for t in 0..series.len() {
        let row: Vec<String> = series.row(t).iter().map(f64::to_string).collect();
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    finish(path, w)
}

pub fn write_grid_csv(path: impl AsRef<Path>, grid: &ScalarGrid) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let nf = grid.freqs.len();
    let mut line = String::from("t");
    for f in &grid.freqs {
        line.push(',');
        line.push_str(&f.to_string());
    }
    writeln!(w, "{line}").map_err(io)?;
    for (ti, t) in grid.times.iter().enumerate() {
        line.clear();
        line.push_str(&t.to_string());
        for v in &grid.values[ti * nf..(ti + 1) * nf] {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    finish(path, w)
}

pub fn read_grid_csv(path: impl AsRef<Path>) -> Result<ScalarGrid> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let bad = |what: String| Error::Data(format!("{}: {what}", path.display()));
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| bad("empty grid file".into()))?
        .map_err(|e| csv_error(path, e))?;
    let freqs = header
        .iter()
        .skip(1)
        .map(|c| c.parse::<f64>().map_err(|_| bad(format!("bad frequency {c:?}"))))
        .collect::<Result<Vec<f64>>>()?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, record) in records.enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = i + 2;
        let mut cells = record.iter();
        let t = cells
            .next()
            .and_then(|c| c.parse::<usize>().ok())
            .ok_or_else(|| bad(format!("bad time index at line {line}")))?;
        times.push(t);
        for c in cells {
            values.push(c.parse::<f64>().map_err(|_| bad(format!("bad value {c:?} at line {line}")))?);
        }
    }
    if freqs.is_empty() || times.is_empty() {
        return Err(bad("grid has no cells".into()));
    }
    Ok(ScalarGrid { times, freqs, values })
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    finish(path, w)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}
