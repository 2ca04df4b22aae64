//! Built-in benchmark suites, multi-seed execution and result bands.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;

use crate::cells::CellKind;
use crate::data::{build_dataset, Dataset, Preset, SplitName, TimeSeries};
use crate::evaluation::{aggregate, evaluate_split, rollout, RunAggregate};
use crate::integrators::{Formulation, Interpolation, Scheme};
use crate::training::{train, TrainConfig, TrainError};

pub const SUITES: &[&str] = &["table3-cstr", "table3-winding", "table4-cstr", "table4-winding"];
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Missing-sample probability of the uneven-sampling experiments.
pub const P_MISSING: f64 = 0.5;

/// One benchmark configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    /// Unique across suites, e.g. `cstr/gru-ignore-missing`.
    pub label: String,
    pub dataset: Preset,
    pub cell: CellKind,
    pub scheme: Scheme,
    pub formulation: Formulation,
    pub interpolation: Interpolation,
    pub p_missing: f64,
    pub delta_channel: bool,
}

impl SuiteRow {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            scheme: self.scheme,
            formulation: self.formulation,
            interpolation: self.interpolation,
            seed,
            ..TrainConfig::preset(self.dataset, self.cell)
        }
    }
}

fn row(
    dataset: Preset,
    name: &str,
    cell: CellKind,
    scheme: Scheme,
    formulation: Formulation,
    interpolation: Interpolation,
    p_missing: f64,
    delta_channel: bool,
) -> SuiteRow {
    SuiteRow {
        label: format!("{dataset}/{name}"),
        dataset,
        cell,
        scheme,
        formulation,
        interpolation,
        p_missing,
        delta_channel,
    }
}

/// Rows of a named suite, or `None` for an unknown name.
pub fn suite(name: &str) -> Option<Vec<SuiteRow>> {
    use CellKind::{Asrnn, Gru};
    use Formulation::{IgnoreTime, NonStationary, Stationary};
    use Interpolation::{Constant, Linear};
    let (kind, dataset) = name.split_once('-')?;
    let dataset: Preset = dataset.parse().ok()?;
    let rows = match kind {
        "table3" => vec![
            row(dataset, "gru-standard-full", Gru, Scheme::Euler, IgnoreTime, Constant, 0.0, false),
            row(dataset, "asrnn-stationary-full", Asrnn, Scheme::Euler, Stationary, Constant, 0.0, false),
            row(dataset, "gru-ignore-missing", Gru, Scheme::Euler, IgnoreTime, Constant, P_MISSING, false),
            row(dataset, "gru-extra-delta", Gru, Scheme::Euler, IgnoreTime, Constant, P_MISSING, true),
            row(dataset, "gru-non-stationary", Gru, Scheme::Euler, NonStationary, Constant, P_MISSING, false),
            row(dataset, "asrnn-non-stationary", Asrnn, Scheme::Euler, NonStationary, Constant, P_MISSING, false),
        ],
        "table4" => {
            let interps: &[Interpolation] = match dataset {
                Preset::Cstr => &[Constant],
                Preset::Winding => &[Constant, Linear],
            };
            let mut rows = Vec::new();
            for &interp in interps {
                for &scheme in Scheme::ALL {
                    let name = format!("gru-{scheme}-{interp}");
                    rows.push(row(dataset, &name, Gru, scheme, Stationary, interp, P_MISSING, false));
                }
            }
            rows
        }
        _ => return None,
    };
    Some(rows)
}

/// Applies a row's data treatment to a full-rate series.
pub fn prepare_dataset(full: &TimeSeries, row: &SuiteRow, data_seed: u64) -> Result<Dataset, TrainError> {
    Ok(build_dataset(full, row.p_missing, data_seed, row.delta_channel)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    /// Mean test RRSE in percent, or the failure message.
    pub outcome: Result<f64, String>,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowResult {
    pub row: SuiteRow,
    pub runs: Vec<SeedRun>,
}

impl RowResult {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.outcome.is_err()).count()
    }

    pub fn aggregate(&self) -> Option<RunAggregate> {
        let ok: Vec<(u64, f64)> = self.runs.iter().filter_map(|r| r.outcome.as_ref().ok().map(|v| (r.seed, *v))).collect();
        aggregate(&ok, self.failures()).ok()
    }

    pub fn mean(&self) -> Option<f64> {
        self.aggregate().map(|a| a.mean)
    }
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub data_seed: u64,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { seeds: DEFAULT_SEEDS.to_vec(), jobs: 1, data_seed: 0, max_epochs: None, patience: None }
    }
}

/// Trains one seed and returns its test RRSE.
pub fn run_seed(ds: &Dataset, row: &SuiteRow, seed: u64, opts: &BenchOptions) -> SeedRun {
    let mut cfg = row.train_config(seed);
    if let Some(e) = opts.max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(p) = opts.patience {
        cfg.patience = p;
    }
    let result = train(ds, &cfg).and_then(|out| {
        let spec = cfg.step_spec(ds.mu_delta)?;
        let ro = rollout(&out.params, ds, &spec)?;
        let rep = evaluate_split(&ro, ds, SplitName::Test)?;
        if rep.mean.is_finite() {
            Ok((rep.mean, out.history.epochs.len()))
        } else {
            Err(TrainError::Config(format!("non-finite test RRSE {}", rep.mean)))
        }
    });
    match result {
        Ok((rrse, epochs)) => SeedRun { seed, outcome: Ok(rrse), epochs },
        Err(TrainError::Diverged { epoch, what, .. }) => {
            SeedRun { seed, outcome: Err(format!("diverged at epoch {epoch}: {what}")), epochs: epoch }
        }
        Err(e) => SeedRun { seed, outcome: Err(e.to_string()), epochs: 0 },
    }
}

/// Runs every row × seed on up to `opts.jobs` threads. Results come back in
/// row order with seeds in the given order, independent of scheduling.
pub fn run_rows(
    rows: &[SuiteRow],
    data: &BTreeMap<&'static str, TimeSeries>,
    opts: &BenchOptions,
    on_done: impl Fn(&SuiteRow, &SeedRun) + Sync,
) -> Result<Vec<RowResult>, TrainError> {
    let datasets: Vec<Dataset> = rows
        .iter()
        .map(|r| {
            let full = data.get(r.dataset.name()).ok_or_else(|| TrainError::Config(format!("no data for {}", r.dataset)))?;
            prepare_dataset(full, r, opts.data_seed)
        })
        .collect::<Result<_, _>>()?;
    let tasks: Vec<(usize, u64)> = (0..rows.len()).flat_map(|i| opts.seeds.iter().map(move |&s| (i, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let runs: Vec<SeedRun> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(i, seed)| {
                let run = run_seed(&datasets[i], &rows[i], seed, opts);
                on_done(&rows[i], &run);
                run
            })
            .collect()
    });
    let mut it = runs.into_iter();
    Ok(rows
        .iter()
        .map(|r| RowResult { row: r.clone(), runs: it.by_ref().take(opts.seeds.len()).collect() })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Hard,
    Soft,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Verdict {
    Pass(String),
    Fail(String),
    /// Some row the criterion needs has not been run.
    Missing(Vec<String>),
}

impl Verdict {
    pub fn failed(&self) -> bool {
        matches!(self, Verdict::Fail(_))
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Pass(d) => write!(f, "PASS {d}"),
            Verdict::Fail(d) => write!(f, "FAIL {d}"),
            Verdict::Missing(rows) => write!(f, "SKIP missing rows: {}", rows.join(", ")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CriterionResult {
    pub id: u8,
    pub gate: Gate,
    pub text: &'static str,
    pub rows: Vec<String>,
    pub verdict: Verdict,
}

/// Mean test RRSE by row label; `None` when no seed of that row completed.
pub type Means = BTreeMap<String, Option<f64>>;

pub fn means(results: &[RowResult]) -> Means {
    results.iter().map(|r| (r.row.label.clone(), r.mean())).collect()
}

fn fmt_mean(v: f64) -> String {
    format!("{v:.2}%")
}

/// Evaluates the quantitative acceptance bands over whatever rows are present.
pub fn criteria(m: &Means) -> Vec<CriterionResult> {
    type Check = fn(&[f64]) -> (bool, String);
    let specs: Vec<(u8, Gate, &'static str, Vec<&str>, Check)> = vec![
        (8, Gate::Soft, "standard GRU, full CSTR: mean test RRSE <= 6%", vec!["cstr/gru-standard-full"], |v| {
            (v[0] <= 6.0, fmt_mean(v[0]))
        }),
        (9, Gate::Soft, "standard GRU, full Winding: mean test RRSE <= 30%", vec!["winding/gru-standard-full"], |v| {
            (v[0] <= 30.0, fmt_mean(v[0]))
        }),
        (10, Gate::Soft, "GRU ignore-missing, CSTR p=0.5: mean test RRSE in [6%, 20%]", vec!["cstr/gru-ignore-missing"], |v| {
            ((6.0..=20.0).contains(&v[0]), fmt_mean(v[0]))
        }),
        (
            11,
            Gate::Hard,
            "CSTR: non-stationary GRU >= 2x stationary Euler GRU",
            vec!["cstr/gru-non-stationary", "cstr/gru-euler-constant"],
            |v| (v[0] >= 2.0 * v[1], format!("{} vs 2 x {}", fmt_mean(v[0]), fmt_mean(v[1]))),
        ),
        (
            12,
            Gate::Hard,
            "CSTR constant interpolation: RK4 < Euler",
            vec!["cstr/gru-rk4-constant", "cstr/gru-euler-constant"],
            |v| (v[0] < v[1], format!("{} vs {}", fmt_mean(v[0]), fmt_mean(v[1]))),
        ),
        (
            13,
            Gate::Hard,
            "Winding: linear < constant for midpoint, kutta3, rk4; RK4-linear < Euler",
            vec![
                "winding/gru-midpoint-linear",
                "winding/gru-midpoint-constant",
                "winding/gru-kutta3-linear",
                "winding/gru-kutta3-constant",
                "winding/gru-rk4-linear",
                "winding/gru-rk4-constant",
                "winding/gru-euler-constant",
            ],
            |v| {
                let ok = v[0] < v[1] && v[2] < v[3] && v[4] < v[5] && v[4] < v[6];
                let d = format!(
                    "midpoint {} vs {}, kutta3 {} vs {}, rk4 {} vs {}, euler {}",
                    fmt_mean(v[0]),
                    fmt_mean(v[1]),
                    fmt_mean(v[2]),
                    fmt_mean(v[3]),
                    fmt_mean(v[4]),
                    fmt_mean(v[5]),
                    fmt_mean(v[6])
                );
                (ok, d)
            },
        ),
        (
            14,
            Gate::Soft,
            "CSTR: extra-delta input <= ignore-missing + 1 point",
            vec!["cstr/gru-extra-delta", "cstr/gru-ignore-missing"],
            |v| (v[0] <= v[1] + 1.0, format!("{} vs {} + 1", fmt_mean(v[0]), fmt_mean(v[1]))),
        ),
    ];
    specs
        .into_iter()
        .map(|(id, gate, text, rows, check)| {
            let absent: Vec<String> = rows.iter().filter(|r| !m.contains_key(**r)).map(|r| r.to_string()).collect();
            let verdict = if !absent.is_empty() {
                Verdict::Missing(absent)
            } else {
                let vals: Vec<Option<f64>> = rows.iter().map(|r| m[*r]).collect();
                let failed: Vec<&str> = rows.iter().zip(&vals).filter(|(_, v)| v.is_none()).map(|(r, _)| *r).collect();
                if failed.is_empty() {
                    let vals: Vec<f64> = vals.into_iter().flatten().collect();
                    let (ok, detail) = check(&vals);
                    if ok {
                        Verdict::Pass(detail)
                    } else {
                        Verdict::Fail(detail)
                    }
                } else {
                    Verdict::Fail(format!("no completed runs for {}", failed.join(", ")))
                }
            };
            CriterionResult { id, gate, text, rows: rows.into_iter().map(String::from).collect(), verdict }
        })
        .collect()
}

/// `pass`, `fail:<ids>` or `-` for one row, given the evaluated criteria.
pub fn row_status(label: &str, crit: &[CriterionResult]) -> String {
    let mine: Vec<&CriterionResult> =
        crit.iter().filter(|c| c.rows.iter().any(|r| r == label) && !matches!(c.verdict, Verdict::Missing(_))).collect();
    if mine.is_empty() {
        return "-".into();
    }
    let failed: Vec<String> = mine.iter().filter(|c| c.verdict.failed()).map(|c| c.id.to_string()).collect();
    if failed.is_empty() {
        "pass".into()
    } else {
        format!("fail:{}", failed.join("+"))
    }
}

pub const CSV_HEADER: &str = "config,cell,scheme,formulation,interp,mean_rrse,std_rrse,failures,status";

/// CSV line without the status column.
pub fn csv_fields(r: &RowResult) -> String {
    let agg = r.aggregate();
    let mean = agg.as_ref().map_or("NA".into(), |a| format!("{:.4}", a.mean));
    let std = agg.as_ref().and_then(|a| a.std).map_or("NA".into(), |s| format!("{s:.4}"));
    let row = &r.row;
    let formulation = if row.delta_channel { format!("{}+delta", row.formulation) } else { row.formulation.to_string() };
    format!("{},{},{},{},{},{},{},{}", row.label, row.cell, row.scheme, formulation, row.interpolation, mean, std, r.failures())
}

/// Parses the `config` and `mean_rrse` columns of an earlier benchmark CSV.
pub fn parse_means(text: &str) -> Means {
    let mut m = Means::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() >= 6 {
            m.insert(cols[0].to_string(), cols[5].parse().ok());
        }
    }
    m
}
