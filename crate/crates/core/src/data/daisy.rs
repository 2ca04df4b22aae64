use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DataError, TimeSeries};
use crate::diffmath::Tensor;

/// Which whitespace-separated columns hold time, inputs and outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnSpec {
    pub time: Option<usize>,
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
    /// Sample period used to synthesize timestamps when `time` is `None`.
    pub period: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Cstr,
    Winding,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::Cstr, Preset::Winding];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Cstr => "cstr",
            Preset::Winding => "winding",
        }
    }

    pub fn columns(self) -> ColumnSpec {
        match self {
            // time [min], coolant flow, concentration, temperature
            Preset::Cstr => ColumnSpec { time: Some(0), inputs: vec![1], outputs: vec![2, 3], period: Some(0.1) },
            // three reel speeds, two motor currents, two web tensions
            Preset::Winding => {
                ColumnSpec { time: None, inputs: (0..5).collect(), outputs: vec![5, 6], period: Some(0.1) }
            }
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Preset::Cstr => "cstr.dat",
            Preset::Winding => "winding.dat",
        }
    }

    pub fn rows(self) -> usize {
        match self {
            Preset::Cstr => 7500,
            Preset::Winding => 2500,
        }
    }

    pub fn period(self) -> f64 {
        0.1
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cstr" => Ok(Preset::Cstr),
            "winding" => Ok(Preset::Winding),
            other => Err(format!("unknown dataset `{other}` (expected cstr|winding)")),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn load_daisy(path: &Path, spec: &ColumnSpec) -> Result<TimeSeries, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    parse_daisy(&text, spec)
}

/// Parses whitespace-delimited numeric rows. Blank lines and lines starting
/// with `#` or `%` are skipped.
pub fn parse_daisy(text: &str, spec: &ColumnSpec) -> Result<TimeSeries, DataError> {
    if spec.time.is_none() && spec.period.is_none() {
        return Err(DataError::MissingPeriod);
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with('%') {
            continue;
        }
        let row = trimmed
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DataError::Parse { line: line_no, msg: format!("invalid number `{tok}`") })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let expected = *width.get_or_insert(row.len());
        if row.len() != expected {
            return Err(DataError::Ragged { line: line_no, expected, found: row.len() });
        }
        rows.push(row);
    }
    let available = width.unwrap_or(0);
    for &c in spec.time.iter().chain(&spec.inputs).chain(&spec.outputs) {
        if c >= available {
            return Err(DataError::MissingColumn { column: c, available });
        }
    }
    let n = rows.len();
    if n < 2 {
        return Err(DataError::TooShort { needed: 2, got: n });
    }
    let t = match spec.time {
        Some(c) => rows.iter().map(|r| r[c]).collect(),
        None => {
            let p = spec.period.expect("checked above");
            (0..n).map(|i| i as f64 * p).collect()
        }
    };
    let gather = |cols: &[usize]| {
        let data = rows.iter().flat_map(|r| cols.iter().map(move |&c| r[c])).collect();
        Tensor::matrix(n, cols.len(), data).expect("sized by construction")
    };
    TimeSeries::new(t, gather(&spec.inputs), gather(&spec.outputs))
}

/// Writes rows in the whitespace layout, optionally with a leading time column.
pub fn write_daisy<W: Write>(series: &TimeSeries, with_time: bool, mut w: W) -> std::io::Result<()> {
    for r in 0..series.len() {
        let mut fields: Vec<String> = Vec::new();
        if with_time {
            fields.push(format!("{:.10e}", series.t()[r]));
        }
        fields.extend(series.x().row(r).iter().chain(series.y().row(r)).map(|v| format!("{v:.10e}")));
        writeln!(w, "{}", fields.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesized_time_axis() {
        let spec = ColumnSpec { time: None, inputs: vec![0], outputs: vec![1], period: Some(1.0) };
        let s = parse_daisy("1 2\n3 4\n5 6\n", &spec).unwrap();
        assert_eq!(s.t(), &[0.0, 1.0, 2.0]);
        assert_eq!(s.x().data(), &[1.0, 3.0, 5.0]);
        assert_eq!(s.y().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn comments_and_explicit_time() {
        let spec = Preset::Cstr.columns();
        let text = "% header\n# another\n\n0.0 100 0.1 440\n0.1 101 0.11 439.5\n  0.2 102 0.12 439\n";
        let s = parse_daisy(text, &spec).unwrap();
        assert_eq!(s.t(), &[0.0, 0.1, 0.2]);
        assert_eq!(s.input_channels(), 1);
        assert_eq!(s.output_channels(), 2);
        assert_eq!(s.y().row(2), &[0.12, 439.0]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let spec = ColumnSpec { time: None, inputs: vec![0], outputs: vec![1], period: Some(1.0) };
        match parse_daisy("1 2\n% c\n3 x\n", &spec) {
            Err(DataError::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_daisy("1 2\n3 4 5\n", &spec) {
            Err(DataError::Ragged { line: 2, expected: 2, found: 3 }) => {}
            other => panic!("{other:?}"),
        }
        let wide = ColumnSpec { outputs: vec![4], ..spec.clone() };
        assert!(matches!(parse_daisy("1 2\n3 4\n", &wide), Err(DataError::MissingColumn { column: 4, .. })));
        let no_period = ColumnSpec { period: None, ..spec };
        assert!(matches!(parse_daisy("1 2\n3 4\n", &no_period), Err(DataError::MissingPeriod)));
    }

    #[test]
    fn non_increasing_time_rejected() {
        let spec = Preset::Cstr.columns();
        assert!(matches!(
            parse_daisy("0 1 2 3\n0 1 2 3\n", &spec),
            Err(DataError::NotIncreasing { row: 1 })
        ));
    }

    #[test]
    fn write_then_parse() {
        let spec = Preset::Winding.columns();
        let text: String = (0..4).map(|i| format!("{i} 1 2 3 4 {} 6\n", i * 2)).collect();
        let s = parse_daisy(&text, &spec).unwrap();
        let mut buf = Vec::new();
        write_daisy(&s, false, &mut buf).unwrap();
        let back = parse_daisy(std::str::from_utf8(&buf).unwrap(), &spec).unwrap();
        assert_eq!(back, s);
    }
}
