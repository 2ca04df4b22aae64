//! Time series ingestion, missing-data subsampling, splitting, normalization
//! and training-segment construction.

mod csv_io;
mod daisy;
pub mod synth;

pub use csv_io::{read_canonical_csv, write_canonical_csv, write_canonical_csv_to};
pub use daisy::{load_daisy, parse_daisy, write_daisy, ColumnSpec, Preset};

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffmath::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: expected {expected} columns, found {found}")]
    Ragged { line: usize, expected: usize, found: usize },
    #[error("column {column} out of range (file has {available} columns)")]
    MissingColumn { column: usize, available: usize },
    #[error("a sample period is required when there is no time column")]
    MissingPeriod,
    #[error("series needs at least {needed} rows, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("timestamps must be strictly increasing (row {row})")]
    NotIncreasing { row: usize },
    #[error("rows are misaligned: {what}")]
    Misaligned { what: String },
    #[error("missing-sample probability must lie in [0, 1), got {0}")]
    InvalidProbability(f64),
    #[error("{which} channel {channel} has zero variance over the training range")]
    ZeroVariance { which: &'static str, channel: usize },
    #[error("training range has {steps} steps, shorter than window {window}")]
    WindowTooLong { steps: usize, window: usize },
    #[error("window length must be at least 2 and stride at least 1")]
    InvalidWindow,
    #[error("{0}")]
    Csv(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Timestamps with aligned input and output samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    t: Vec<f64>,
    x: Tensor,
    y: Tensor,
}

impl TimeSeries {
    pub fn new(t: Vec<f64>, x: Tensor, y: Tensor) -> Result<Self, DataError> {
        if t.len() < 2 {
            return Err(DataError::TooShort { needed: 2, got: t.len() });
        }
        if x.rank() != 2 || y.rank() != 2 || x.rows() != t.len() || y.rows() != t.len() {
            return Err(DataError::Misaligned {
                what: format!("t has {} rows, X {:?}, Y {:?}", t.len(), x.shape(), y.shape()),
            });
        }
        if let Some(row) = t.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(DataError::NotIncreasing { row: row + 1 });
        }
        Ok(Self { t, x, y })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &Tensor {
        &self.y
    }

    pub fn input_channels(&self) -> usize {
        self.x.cols()
    }

    pub fn output_channels(&self) -> usize {
        self.y.cols()
    }

    /// `δ_n = t_{n+1} − t_n`
    pub fn delta(&self, n: usize) -> f64 {
        self.t[n + 1] - self.t[n]
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.t.windows(2).map(|w| w[1] - w[0]).collect()
    }

    fn select_rows(&self, idx: &[usize]) -> Self {
        let pick = |m: &Tensor| {
            let rows: Vec<&[f64]> = idx.iter().map(|&i| m.row(i)).collect();
            Tensor::from_rows(&rows).expect("rows share a width")
        };
        Self { t: idx.iter().map(|&i| self.t[i]).collect(), x: pick(&self.x), y: pick(&self.y) }
    }
}

/// Drops every row after the first independently with probability `p_missing`.
pub fn subsample_missing(series: &TimeSeries, p_missing: f64, seed: u64) -> Result<TimeSeries, DataError> {
    if !(0.0..1.0).contains(&p_missing) {
        return Err(DataError::InvalidProbability(p_missing));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![0];
    for i in 1..series.len() {
        if rng.gen::<f64>() >= p_missing {
            keep.push(i);
        }
    }
    if keep.len() < 2 {
        return Err(DataError::TooShort { needed: 2, got: keep.len() });
    }
    Ok(series.select_rows(&keep))
}

/// Per-channel mean and standard deviation of the training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

impl NormStats {
    fn normalize(m: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[c]) / std[c];
            }
        }
        out
    }

    pub fn normalize_x(&self, x: &Tensor) -> Tensor {
        Self::normalize(x, &self.x_mean, &self.x_std)
    }

    pub fn normalize_y(&self, y: &Tensor) -> Tensor {
        Self::normalize(y, &self.y_mean, &self.y_std)
    }

    pub fn denormalize_y(&self, y: &Tensor) -> Tensor {
        let mut out = y.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.y_std[c] + self.y_mean[c];
            }
        }
        out
    }

    /// Hex SHA-256 over the exact bit patterns of every statistic.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (tag, vals) in [
            (b'a', &self.x_mean),
            (b'b', &self.x_std),
            (b'c', &self.y_mean),
            (b'd', &self.y_std),
        ] {
            h.update([tag]);
            h.update((vals.len() as u64).to_le_bytes());
            for v in vals {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Contiguous 70/15/15 split boundaries over `[0, len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Split {
    pub train_end: usize,
    pub val_end: usize,
    pub len: usize,
}

impl Split {
    pub fn new(len: usize) -> Self {
        Self { train_end: len * 7 / 10, val_end: len * 85 / 100, len }
    }

    pub fn train(&self) -> Range<usize> {
        0..self.train_end
    }

    pub fn val(&self) -> Range<usize> {
        self.train_end..self.val_end
    }

    pub fn test(&self) -> Range<usize> {
        self.val_end..self.len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "val" | "validation" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split `{other}` (expected train|val|test)")),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

/// A normalized, split series ready for training and evaluation.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub series: TimeSeries,
    pub split: Split,
    /// Mean `δ_n` over the training transitions.
    pub mu_delta: f64,
    pub stats: NormStats,
    /// Whether the last input column is the appended `δ_n/μ_δ` channel.
    pub delta_channel: bool,
}

impl Dataset {
    pub fn range(&self, split: SplitName) -> Range<usize> {
        match split {
            SplitName::Train => self.split.train(),
            SplitName::Val => self.split.val(),
            SplitName::Test => self.split.test(),
        }
    }

    /// Transitions `n → n+1` that stay inside the training rows.
    pub fn train_steps(&self) -> usize {
        self.split.train_end - 1
    }

    pub fn input_dim(&self) -> usize {
        self.series.input_channels()
    }

    pub fn output_dim(&self) -> usize {
        self.series.output_channels()
    }
}

fn mean_std(m: &Tensor, rows: Range<usize>, col: usize) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.clone().map(|r| m.get(r, col)).sum::<f64>() / n;
    let var = rows.map(|r| (m.get(r, col) - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean of the training step sizes.
pub fn mean_train_delta(series: &TimeSeries, split: &Split) -> f64 {
    let steps = split.train_end - 1;
    series.t[..split.train_end].windows(2).map(|w| w[1] - w[0]).sum::<f64>() / steps as f64
}

/// Splits 70/15/15 and normalizes every channel with training-range statistics.
pub fn split_normalize(series: &TimeSeries) -> Result<Dataset, DataError> {
    if series.len() < 20 {
        return Err(DataError::TooShort { needed: 20, got: series.len() });
    }
    let split = Split::new(series.len());
    let mut stats = NormStats { x_mean: vec![], x_std: vec![], y_mean: vec![], y_std: vec![] };
    for (which, m, means, stds) in [
        ("input", &series.x, &mut stats.x_mean, &mut stats.x_std),
        ("output", &series.y, &mut stats.y_mean, &mut stats.y_std),
    ] {
        for c in 0..m.cols() {
            let (mean, std) = mean_std(m, split.train(), c);
            if !(std > 0.0) {
                return Err(DataError::ZeroVariance { which, channel: c });
            }
            means.push(mean);
            stds.push(std);
        }
    }
    let normalized = TimeSeries {
        t: series.t.clone(),
        x: stats.normalize_x(&series.x),
        y: stats.normalize_y(&series.y),
    };
    let mu_delta = mean_train_delta(series, &split);
    Ok(Dataset { series: normalized, split, mu_delta, stats, delta_channel: false })
}

/// `δ_n/μ_δ` per row; the last row repeats the previous gap.
pub fn delta_channel_values(t: &[f64], mu_delta: f64) -> Vec<f64> {
    let mut v: Vec<f64> = t.windows(2).map(|w| (w[1] - w[0]) / mu_delta).collect();
    if let Some(&last) = v.last() {
        v.push(last);
    }
    v
}

/// Appends the normalized step size as an extra (unnormalized) input channel.
pub fn augment_delta_channel(ds: &Dataset) -> Dataset {
    let values = delta_channel_values(&ds.series.t, ds.mu_delta);
    let x = &ds.series.x;
    let k = x.cols();
    let mut data = Vec::with_capacity(x.rows() * (k + 1));
    for (r, d) in values.iter().enumerate() {
        data.extend_from_slice(x.row(r));
        data.push(*d);
    }
    let x = Tensor::matrix(x.rows(), k + 1, data).expect("sized above");
    Dataset {
        series: TimeSeries { t: ds.series.t.clone(), x, y: ds.series.y.clone() },
        delta_channel: true,
        ..ds.clone()
    }
}

/// Subsamples (when `p_missing > 0`), splits, normalizes and optionally
/// appends the step-size channel.
pub fn build_dataset(series: &TimeSeries, p_missing: f64, data_seed: u64, delta_channel: bool) -> Result<Dataset, DataError> {
    let ds = if p_missing > 0.0 {
        split_normalize(&subsample_missing(series, p_missing, data_seed)?)?
    } else {
        split_normalize(series)?
    };
    Ok(if delta_channel { augment_delta_channel(&ds) } else { ds })
}

/// Training windows of `window` transitions; slot `i` holds the initial
/// state of the window starting at `starts[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentIndex {
    pub window: usize,
    pub starts: Vec<usize>,
}

impl SegmentIndex {
    /// Windows `[s, s + window)` over `steps` transitions, `s = 0, stride, …`.
    pub fn new(steps: usize, window: usize, stride: usize) -> Result<Self, DataError> {
        if window < 2 || stride < 1 {
            return Err(DataError::InvalidWindow);
        }
        if steps <= window {
            return Err(DataError::WindowTooLong { steps, window });
        }
        let starts = (0..=steps - window).step_by(stride).collect();
        Ok(Self { window, starts })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

/// Segments over the training transitions of `ds`.
pub fn make_segments(ds: &Dataset, window: usize, stride: usize) -> Result<SegmentIndex, DataError> {
    SegmentIndex::new(ds.train_steps(), window, stride)
}
