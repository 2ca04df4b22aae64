use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, TimeSeries};
use crate::diffmath::Tensor;

fn csv_err(e: csv::Error) -> DataError {
    let line = e.position().map(|p| p.line() as usize);
    match line {
        Some(line) => DataError::Parse { line, msg: e.to_string() },
        None => DataError::Csv(e.to_string()),
    }
}

/// Writes `t,x1..xK,y1..yM` with shortest round-trip decimal values.
pub fn write_canonical_csv_to<W: Write>(series: &TimeSeries, w: W) -> Result<(), DataError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    header.extend((1..=series.input_channels()).map(|i| format!("x{i}")));
    header.extend((1..=series.output_channels()).map(|i| format!("y{i}")));
    out.write_record(&header).map_err(csv_err)?;
    for r in 0..series.len() {
        let fields = std::iter::once(series.t()[r])
            .chain(series.x().row(r).iter().copied())
            .chain(series.y().row(r).iter().copied())
            .map(|v| v.to_string());
        out.write_record(fields).map_err(csv_err)?;
    }
    out.flush().map_err(|e| DataError::Csv(e.to_string()))
}

pub fn write_canonical_csv(series: &TimeSeries, path: &Path) -> Result<(), DataError> {
    let f = std::fs::File::create(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    write_canonical_csv_to(series, std::io::BufWriter::new(f))
}

pub fn read_canonical_csv_from<R: Read>(r: R) -> Result<TimeSeries, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.first() != Some(&"t") {
        return Err(DataError::Parse { line: 1, msg: "first column must be `t`".into() });
    }
    let k = names.iter().filter(|n| n.starts_with('x')).count();
    let m = names.iter().filter(|n| n.starts_with('y')).count();
    let expected: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=k).map(|i| format!("x{i}")))
        .chain((1..=m).map(|i| format!("y{i}")))
        .collect();
    if names != expected {
        return Err(DataError::Parse { line: 1, msg: format!("header must be {}", expected.join(",")) });
    }
    let (mut t, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let vals = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DataError::Parse { line, msg: format!("invalid number `{f}`") })
            })
            .collect::<Result<Vec<_>, _>>()?;
        t.push(vals[0]);
        x.extend_from_slice(&vals[1..1 + k]);
        y.extend_from_slice(&vals[1 + k..]);
    }
    let n = t.len();
    let x = Tensor::matrix(n, k, x).map_err(|e| DataError::Csv(e.to_string()))?;
    let y = Tensor::matrix(n, m, y).map_err(|e| DataError::Csv(e.to_string()))?;
    TimeSeries::new(t, x, y)
}

pub fn read_canonical_csv(path: &Path) -> Result<TimeSeries, DataError> {
    let f = std::fs::File::open(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    read_canonical_csv_from(std::io::BufReader::new(f))
}
