//! Full-sequence rollout, RRSE and multi-seed aggregation.

use std::fmt::Write as _;
use std::io::Write;

use thiserror::Error;

use crate::cells::{output_map, ModelParams};
use crate::data::{Dataset, SplitName};
use crate::diffmath::{Eval, Tensor};
use crate::integrators::{rk_step, StepError, StepSpec};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("target channel {channel} is constant over the evaluated range")]
    ZeroVariance { channel: usize },
    #[error("predictions {pred:?} and targets {target:?} are not aligned")]
    Misaligned { pred: Vec<usize>, target: Vec<usize> },
    #[error("nothing to evaluate")]
    Empty,
    #[error("no completed runs to aggregate")]
    NoRuns,
}

/// States and one-step-ahead predictions along a whole sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// `h_n` for every visited row, one row per sample.
    pub states: Tensor,
    /// Row `n` predicts `y_{n+1}`.
    pub predictions: Tensor,
}

/// Runs the model from its trained `h0` through rows `0..end`.
pub fn rollout_until(params: &ModelParams, ds: &Dataset, spec: &StepSpec, end: usize) -> Result<Rollout, StepError> {
    let end = end.min(ds.series.len()).max(1);
    let mut g = Eval;
    let model = params.bind(&mut g);
    let s = params.dims().state;
    let m = params.dims().output;
    let mut h = Tensor::matrix(1, s, params.h0.data().to_vec())?;
    let mut states = Vec::with_capacity(end * s);
    let mut preds = Vec::with_capacity((end - 1) * m);
    let x = ds.series.x();
    states.extend_from_slice(h.data());
    for n in 0..end - 1 {
        let xn = Tensor::matrix(1, x.cols(), x.row(n).to_vec())?;
        let xn1 = Tensor::matrix(1, x.cols(), x.row(n + 1).to_vec())?;
        h = rk_step(&mut g, spec, &model, &xn, &xn1, &[ds.series.delta(n)], &h)?;
        let y = output_map(&mut g, &h, &model.out)?;
        states.extend_from_slice(h.data());
        preds.extend_from_slice(y.data());
    }
    Ok(Rollout { states: Tensor::matrix(end, s, states)?, predictions: Tensor::matrix(end - 1, m, preds)? })
}

pub fn rollout(params: &ModelParams, ds: &Dataset, spec: &StepSpec) -> Result<Rollout, StepError> {
    rollout_until(params, ds, spec, ds.series.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Per-channel RRSE in percent.
    pub per_channel: Vec<f64>,
    pub mean: f64,
    pub split: Option<SplitName>,
    pub steps: usize,
}

/// Per-channel `sqrt(Σ(ŷ−y)² / Σ(y−μ_y)²)` in percent, with `μ_y` the mean of
/// the given targets.
pub fn rrse(predictions: &Tensor, targets: &Tensor) -> Result<EvalReport, EvalError> {
    if predictions.shape() != targets.shape() || predictions.rank() != 2 {
        return Err(EvalError::Misaligned { pred: predictions.shape().to_vec(), target: targets.shape().to_vec() });
    }
    let (n, k) = targets.dims2();
    if n == 0 || k == 0 {
        return Err(EvalError::Empty);
    }
    let mut per_channel = Vec::with_capacity(k);
    for c in 0..k {
        let mu = (0..n).map(|r| targets.get(r, c)).sum::<f64>() / n as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for r in 0..n {
            let y = targets.get(r, c);
            num += (predictions.get(r, c) - y).powi(2);
            den += (y - mu).powi(2);
        }
        if !(den > 0.0) {
            return Err(EvalError::ZeroVariance { channel: c });
        }
        per_channel.push(100.0 * (num / den).sqrt());
    }
    let mean = per_channel.iter().sum::<f64>() / k as f64;
    Ok(EvalReport { per_channel, mean, split: None, steps: n })
}

/// Rows of a split that have a prediction (row 0 has none).
fn predicted_rows(ds: &Dataset, split: SplitName) -> std::ops::Range<usize> {
    let r = ds.range(split);
    r.start.max(1)..r.end
}

/// Predictions and targets of `split`, taken from a rollout that covers it.
pub fn split_pairs(ro: &Rollout, ds: &Dataset, split: SplitName) -> (Vec<usize>, Tensor, Tensor) {
    let rows: Vec<usize> = predicted_rows(ds, split).collect();
    let pred: Vec<&[f64]> = rows.iter().map(|&r| ro.predictions.row(r - 1)).collect();
    let target: Vec<&[f64]> = rows.iter().map(|&r| ds.series.y().row(r)).collect();
    let m = ds.output_dim();
    let build = |v: Vec<&[f64]>| {
        if v.is_empty() {
            Tensor::zeros(&[0, m])
        } else {
            Tensor::from_rows(&v).expect("equal widths")
        }
    };
    (rows, build(pred), build(target))
}

pub fn evaluate_split(ro: &Rollout, ds: &Dataset, split: SplitName) -> Result<EvalReport, EvalError> {
    let (_, pred, target) = split_pairs(ro, ds, split);
    let mut report = rrse(&pred, &target)?;
    report.split = Some(split);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunAggregate {
    pub mean: f64,
    /// Sample standard deviation; `None` for a single run.
    pub std: Option<f64>,
    pub seeds: Vec<u64>,
    pub failures: usize,
}

impl RunAggregate {
    pub fn single_run(&self) -> bool {
        self.std.is_none()
    }
}

/// Mean and sample standard deviation of per-seed mean RRSE values.
pub fn aggregate(runs: &[(u64, f64)], failures: usize) -> Result<RunAggregate, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let n = runs.len() as f64;
    let mean = runs.iter().map(|r| r.1).sum::<f64>() / n;
    let std = (runs.len() > 1).then(|| (runs.iter().map(|r| (r.1 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    let mut seeds: Vec<u64> = runs.iter().map(|r| r.0).collect();
    seeds.sort_unstable();
    Ok(RunAggregate { mean, std, seeds, failures })
}

/// Ordered `key = value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    entries: Vec<(String, String)>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn report(&mut self, report: &EvalReport) -> &mut Self {
        if let Some(split) = report.split {
            self.push("split", split);
        }
        self.push("steps", report.steps);
        for (i, v) in report.per_channel.iter().enumerate() {
            self.push(format!("rrse_y{}", i + 1), format!("{v:.6}"));
        }
        self.push("rrse_mean", format!("{:.6}", report.mean))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// CSV `t,y_true_1..M,y_pred_1..M`.
pub fn write_predictions<W: Write>(t: &[f64], truth: &Tensor, pred: &Tensor, mut w: W) -> std::io::Result<()> {
    let m = truth.cols();
    let mut header = vec!["t".to_string()];
    header.extend((1..=m).map(|i| format!("y_true_{i}")));
    header.extend((1..=m).map(|i| format!("y_pred_{i}")));
    writeln!(w, "{}", header.join(","))?;
    for (r, ti) in t.iter().enumerate() {
        let fields: Vec<String> = std::iter::once(*ti)
            .chain(truth.row(r).iter().copied())
            .chain(pred.row(r).iter().copied())
            .map(|v| v.to_string())
            .collect();
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{zero_params, CellKind, ModelDims};
    use crate::data::{split_normalize, TimeSeries};
    use crate::integrators::{Formulation, Interpolation, Scheme};
    use proptest::prelude::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::matrix(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn rrse_cases() {
        let y = Tensor::matrix(4, 2, vec![1.0, 5.0, 2.0, 3.0, 4.0, 4.0, 0.5, 9.0]).unwrap();
        assert_eq!(rrse(&y, &y).unwrap().mean, 0.0);
        let mut mean_pred = y.clone();
        for c in 0..2 {
            let mu = (0..4).map(|r| y.get(r, c)).sum::<f64>() / 4.0;
            for r in 0..4 {
                mean_pred.set(r, c, mu);
            }
        }
        let rep = rrse(&mean_pred, &y).unwrap();
        assert!(rep.per_channel.iter().all(|v| (v - 100.0).abs() <= 1e-12));
        let rep = rrse(&col(&[1.0, 1.0]), &col(&[0.0, 2.0])).unwrap();
        assert!((rep.mean - 100.0).abs() <= 1e-12);
        assert_eq!(rrse(&col(&[1.0, 2.0]), &col(&[3.0, 3.0])), Err(EvalError::ZeroVariance { channel: 0 }));
        assert!(matches!(rrse(&col(&[1.0]), &col(&[1.0, 2.0])), Err(EvalError::Misaligned { .. })));
    }

    #[test]
    fn aggregate_cases() {
        let a = aggregate(&[(1, 10.0), (2, 12.0), (3, 14.0)], 0).unwrap();
        assert!((a.mean - 12.0).abs() < 1e-12 && (a.std.unwrap() - 2.0).abs() < 1e-12);
        let b = aggregate(&[(3, 14.0), (1, 10.0), (2, 12.0)], 0).unwrap();
        assert_eq!(a, b);
        let single = aggregate(&[(7, 3.5)], 1).unwrap();
        assert!(single.single_run() && single.mean == 3.5 && single.failures == 1);
        assert_eq!(aggregate(&[], 2), Err(EvalError::NoRuns));
    }

    fn dataset(n: usize) -> Dataset {
        let t: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 + if i % 4 == 1 { 0.05 } else { 0.0 }).collect();
        let x = col(&(0..n).map(|i| (i as f64 * 0.3).sin()).collect::<Vec<_>>());
        let y = Tensor::matrix(n, 2, (0..2 * n).map(|i| (i as f64 * 0.17).cos()).collect()).unwrap();
        split_normalize(&TimeSeries::new(t, x, y).unwrap()).unwrap()
    }

    #[test]
    fn zero_gru_predicts_output_bias() {
        let ds = dataset(60);
        let mut p = zero_params(ModelDims { input: 1, state: 3, output: 2 }, CellKind::Gru, 1.0, 1.0);
        p.out.b = Tensor::vector(vec![0.25, -0.5]);
        let spec = StepSpec::new(Scheme::Rk4, Formulation::Stationary, Interpolation::Linear, ds.mu_delta).unwrap();
        let ro = rollout(&p, &ds, &spec).unwrap();
        assert_eq!(ro.predictions.shape(), &[59, 2]);
        assert_eq!(ro.states.shape(), &[60, 3]);
        for r in 0..59 {
            assert_eq!(ro.predictions.row(r), &[0.25, -0.5]);
        }
        let (rows, pred, target) = split_pairs(&ro, &ds, SplitName::Train);
        assert_eq!(rows[0], 1);
        assert_eq!(pred.rows(), ds.split.train_end - 1);
        assert_eq!(target.row(0), ds.series.y().row(1));
        let rep = evaluate_split(&ro, &ds, SplitName::Test).unwrap();
        assert_eq!(rep.split, Some(SplitName::Test));
        assert_eq!(rep.steps, ds.range(SplitName::Test).len());
    }

    #[test]
    fn metrics_text() {
        let mut m = Metrics::new();
        m.push("seed", 3).report(&EvalReport { per_channel: vec![1.0, 3.0], mean: 2.0, split: Some(SplitName::Val), steps: 9 });
        let text = m.to_text();
        assert!(text.starts_with("seed = 3\nsplit = val\nsteps = 9\nrrse_y1 = 1.000000\n"));
        assert_eq!(m.get("rrse_mean"), Some("2.000000"));
    }

    #[test]
    fn prediction_dump_layout() {
        let mut buf = Vec::new();
        write_predictions(&[0.5, 0.75], &col(&[1.0, 2.0]), &col(&[1.5, 2.5]), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,y_true_1,y_pred_1\n0.5,1,1.5\n0.75,2,2.5\n");
    }

    proptest! {
        #[test]
        fn rrse_affine_invariance(
            ys in proptest::collection::vec(-10.0f64..10.0, 8..40),
            noise in proptest::collection::vec(-1.0f64..1.0, 40),
            a in -5.0f64..5.0,
            s in 0.01f64..20.0,
        ) {
            let n = ys.len();
            let spread = ys.iter().cloned().fold(f64::MIN, f64::max) - ys.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let y = col(&ys);
            let p = col(&ys.iter().zip(&noise).map(|(v, e)| v + e).collect::<Vec<_>>());
            let tf = |t: &Tensor| col(&t.data().iter().map(|v| (v - a) / s).collect::<Vec<_>>());
            let base = rrse(&p, &y).unwrap();
            let moved = rrse(&tf(&p), &tf(&y)).unwrap();
            prop_assert!((base.mean - moved.mean).abs() <= 1e-12 * base.mean.max(1.0), "{} {}", base.mean, moved.mean);
            prop_assert_eq!(base.steps, n);
        }

        #[test]
        fn channel_mean_is_mean_of_channels(vals in proptest::collection::vec(-3.0f64..3.0, 30)) {
            let y = Tensor::matrix(10, 3, vals.clone()).unwrap();
            let p = Tensor::matrix(10, 3, vals.iter().map(|v| v * 0.9 + 0.1).collect()).unwrap();
            if let Ok(rep) = rrse(&p, &y) {
                let m = rep.per_channel.iter().sum::<f64>() / 3.0;
                prop_assert!((m - rep.mean).abs() <= 1e-12);
                prop_assert!(rep.per_channel.iter().all(|v| *v >= 0.0));
            }
        }
    }
}
