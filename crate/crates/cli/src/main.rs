use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tarnn_core::config::RunConfig;
use tarnn_core::data::{
    load_daisy, mean_train_delta, read_canonical_csv, subsample_missing, synth, write_canonical_csv, write_daisy,
    ColumnSpec, DataError, Preset, Split, SplitName, TimeSeries,
};
use tarnn_core::evaluation::{evaluate_split, rollout, split_pairs, write_predictions, Metrics};
use tarnn_core::model_file::{ModelFile, ModelFileError};
use tarnn_core::suites::{self, BenchOptions, Gate, Verdict};
use tarnn_core::training::{train_with, TrainError};
use tarnn_core::verify::{gradcheck_suite, ordercheck_suite, GRADIENT_TOLERANCE, ORDER_TOLERANCE};

#[derive(Parser)]
#[command(name = "tarnn", version, about = "Time-aware RNN system identification on unevenly sampled data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw whitespace-separated file into the canonical CSV, optionally dropping samples
    Prepare(PrepareArgs),
    /// Train a model from a `key = value` config file
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch history CSV (default: `<out>.history.csv`)
        #[arg(long)]
        history: Option<PathBuf>,
        /// Progress line every N epochs on stderr; 0 disables
        #[arg(long, default_value_t = 25)]
        progress: usize,
    },
    /// Free-running evaluation of a trained model on one split
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Canonical CSV the model was trained on
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        /// Write `t,y_true..,y_pred..` for the split, in original units
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Run a built-in suite over several seeds and write mean/std per configuration
    Benchmark(BenchArgs),
    /// Compare analytic gradients with central finite differences
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit convergence orders of the Runge-Kutta schemes on dh/dt = -h
    Ordercheck,
    /// Write a synthetic raw file shaped like a preset's source data
    Simulate {
        #[arg(long)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PrepareArgs {
    input: PathBuf,
    #[arg(long, conflicts_with_all = ["inputs", "outputs", "time_col", "period"])]
    preset: Option<Preset>,
    /// Zero-based input columns, comma separated
    #[arg(long, value_delimiter = ',', requires = "outputs")]
    inputs: Vec<usize>,
    /// Zero-based output columns, comma separated
    #[arg(long, value_delimiter = ',', requires = "inputs")]
    outputs: Vec<usize>,
    /// Column holding timestamps; without it time is synthesized from `--period`
    #[arg(long)]
    time_col: Option<usize>,
    #[arg(long)]
    period: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    p_missing: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    suite: String,
    /// Directory with full-rate canonical CSVs named `cstr.csv` and `winding.csv`
    #[arg(long)]
    data_dir: PathBuf,
    /// Results CSV; rows of other configurations already in it are kept
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, value_delimiter = ',', default_values_t = suites::DEFAULT_SEEDS)]
    seeds: Vec<u64>,
    /// Seed of the shared missing-data realization
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Override the preset epoch budget
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

enum Failure {
    Usage(String),
    Data(String),
    Diverged(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Diverged(_) => 3,
            Failure::Check(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Diverged(m) | Failure::Check(m) => m,
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ModelFileError> for Failure {
    fn from(e: ModelFileError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => Failure::Diverged(e.to_string()),
            TrainError::Config(_) => Failure::Usage(e.to_string()),
            TrainError::Data(_) => Failure::Data(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Train { config, out, history, progress } => cmd_train(&config, &out, history, progress),
        Command::Evaluate { model, data, split, dump } => evaluate(&model, &data, split, dump.as_deref()),
        Command::Benchmark(a) => benchmark(a),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::Ordercheck => ordercheck(),
        Command::Simulate { preset, seed, out } => simulate(preset, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn prepare(a: PrepareArgs) -> Result<(), Failure> {
    if !(0.0..1.0).contains(&a.p_missing) {
        return Err(Failure::Usage(format!("--p-missing must lie in [0, 1), got {}", a.p_missing)));
    }
    let spec = match a.preset {
        Some(p) => p.columns(),
        None if a.inputs.is_empty() => return Err(Failure::Usage("give --preset or --inputs/--outputs".into())),
        None => {
            if a.time_col.is_none() && a.period.is_none() {
                return Err(Failure::Usage("without --time-col a --period is required".into()));
            }
            ColumnSpec { time: a.time_col, inputs: a.inputs, outputs: a.outputs, period: a.period }
        }
    };
    let full = load_daisy(&a.input, &spec)?;
    if let Some(p) = a.preset {
        if full.len() != p.rows() {
            eprintln!("warning: {} has {} rows, the {p} source has {}", a.input.display(), full.len(), p.rows());
        }
    }
    let series = if a.p_missing > 0.0 { subsample_missing(&full, a.p_missing, a.seed)? } else { full };
    write_canonical_csv(&series, &a.out)?;
    let deltas = series.deltas();
    let mu = if series.len() >= 20 { mean_train_delta(&series, &Split::new(series.len())) } else { f64::NAN };
    let min = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let max = deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut m = Metrics::new();
    m.push("rows", series.len()).push("mu_delta", mu).push("delta_min", min).push("delta_max", max);
    print!("{}", m.to_text());
    Ok(())
}

fn cmd_train(config: &Path, out: &Path, history: Option<PathBuf>, progress: usize) -> Result<(), Failure> {
    let cfg = RunConfig::load(config).map_err(|e| Failure::Usage(format!("{}: {e}", config.display())))?;
    let ds = cfg.load_dataset()?;
    let outcome = train_with(&ds, &cfg.train, |e| {
        if progress > 0 && e.epoch % progress == 0 {
            eprintln!("epoch {:>5}  loss {:.6}  val_rrse {:.3}%", e.epoch, e.train_loss, e.val_rrse);
        }
    })?;
    let history_path = history.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".history.csv");
        PathBuf::from(p)
    });
    let mut csv = String::from("epoch,train_loss,val_rrse\n");
    for e in &outcome.history.epochs {
        csv += &format!("{},{},{}\n", e.epoch, e.train_loss, e.val_rrse);
    }
    let stop = outcome.history.stop.map_or("none".to_string(), |s| s.to_string());
    let model = ModelFile::from_training(outcome, &ds, &cfg);
    model.save(out)?;
    fs::write(&history_path, csv).map_err(io_err(&history_path))?;
    let meta = &model.meta;
    let mut m = Metrics::new();
    m.push("model", out.display())
        .push("history", history_path.display())
        .push("config_digest", &meta.config_digest)
        .push("seed", meta.seed)
        .push("epochs", meta.epochs)
        .push("best_epoch", meta.best_epoch)
        .push("best_val_rrse", format!("{:.6}", meta.best_val_rrse))
        .push("stop", stop);
    print!("{}", m.to_text());
    Ok(())
}

fn evaluate(model_path: &Path, data: &Path, split: SplitName, dump: Option<&Path>) -> Result<(), Failure> {
    let model = ModelFile::load(model_path)?;
    let series = read_canonical_csv(data)?;
    let ds = model.dataset_for(&series)?;
    let spec = model.step_spec().map_err(|e| Failure::Data(e.to_string()))?;
    let ro = rollout(&model.params, &ds, &spec).map_err(|e| Failure::Data(e.to_string()))?;
    let report = evaluate_split(&ro, &ds, split).map_err(|e| Failure::Data(e.to_string()))?;
    let meta = &model.meta;
    let mut m = Metrics::new();
    m.push("config_digest", &meta.config_digest).push("seed", meta.seed).push("epochs", meta.epochs).report(&report);
    print!("{}", m.to_text());
    if let Some(path) = dump {
        let (rows, pred, target) = split_pairs(&ro, &ds, split);
        let t: Vec<f64> = rows.iter().map(|&r| ds.series.t()[r]).collect();
        let stats = &ds.stats;
        let mut buf = Vec::new();
        write_predictions(&t, &stats.denormalize_y(&target), &stats.denormalize_y(&pred), &mut buf)
            .expect("writing to memory");
        fs::write(path, buf).map_err(io_err(path))?;
    }
    if !report.mean.is_finite() {
        return Err(Failure::Diverged(format!("non-finite RRSE on the {split} split")));
    }
    Ok(())
}

fn benchmark(a: BenchArgs) -> Result<(), Failure> {
    let rows = suites::suite(&a.suite)
        .ok_or_else(|| Failure::Usage(format!("unknown suite `{}`; available: {}", a.suite, suites::SUITES.join(", "))))?;
    if a.seeds.is_empty() {
        return Err(Failure::Usage("--seeds is empty".into()));
    }
    let mut needed: Vec<Preset> = rows.iter().map(|r| r.dataset).collect();
    needed.dedup();
    let paths: Vec<(Preset, PathBuf)> = needed.iter().map(|p| (*p, a.data_dir.join(format!("{p}.csv")))).collect();
    let missing: Vec<String> = paths.iter().filter(|(_, p)| !p.is_file()).map(|(_, p)| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(Failure::Data(format!("missing data files: {}", missing.join(", "))));
    }
    let mut data: BTreeMap<&'static str, TimeSeries> = BTreeMap::new();
    for (preset, path) in &paths {
        data.insert(preset.name(), read_canonical_csv(path)?);
    }
    let opts = BenchOptions {
        seeds: a.seeds,
        jobs: a.jobs,
        data_seed: a.data_seed,
        max_epochs: a.max_epochs,
        patience: a.patience,
    };
    let results = suites::run_rows(&rows, &data, &opts, |row, run| match &run.outcome {
        Ok(v) => eprintln!("{} seed {}: {v:.3}% after {} epochs", row.label, run.seed, run.epochs),
        Err(e) => eprintln!("{} seed {}: {e}", row.label, run.seed),
    })?;

    let mut lines: Vec<(String, String)> = Vec::new();
    if a.out.exists() {
        let old = fs::read_to_string(&a.out).map_err(io_err(&a.out))?;
        let mut it = old.lines();
        if it.next() != Some(suites::CSV_HEADER) {
            return Err(Failure::Data(format!("{} is not a benchmark CSV", a.out.display())));
        }
        for l in it.filter(|l| !l.trim().is_empty()) {
            let label = l.split(',').next().unwrap_or_default().to_string();
            if !results.iter().any(|r| r.row.label == label) {
                let without_status = l.rsplit_once(',').map_or(l, |(head, _)| head);
                lines.push((label, without_status.to_string()));
            }
        }
    }
    lines.extend(results.iter().map(|r| (r.row.label.clone(), suites::csv_fields(r))));
    let text: String = std::iter::once(suites::CSV_HEADER.to_string())
        .chain(lines.iter().map(|(_, l)| l.clone()))
        .map(|l| l + "\n")
        .collect();
    let means = suites::parse_means(&text);
    let crit = suites::criteria(&means);
    let mut out = format!("{}\n", suites::CSV_HEADER);
    for (label, l) in &lines {
        out += &format!("{l},{}\n", suites::row_status(label, &crit));
    }
    let tmp = a.out.with_extension("tmp");
    fs::write(&tmp, &out).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &a.out).map_err(io_err(&a.out))?;

    let stdout = io::stdout();
    let mut w = stdout.lock();
    let _ = write!(w, "{out}");
    let mut failed = Vec::new();
    for c in &crit {
        let gate = match c.gate {
            Gate::Hard => "hard",
            Gate::Soft => "soft",
        };
        let _ = writeln!(w, "criterion {:>2} [{gate}] {}: {}", c.id, c.text, c.verdict);
        if let Verdict::Fail(_) = c.verdict {
            failed.push(c.id.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("acceptance bands failed: {}", failed.join(", "))))
    }
}

fn gradcheck(seed: u64) -> Result<(), Failure> {
    let checks = gradcheck_suite(seed).map_err(|e| Failure::Data(e.to_string()))?;
    let mut failed = 0;
    for c in &checks {
        let tag = if c.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!c.passed());
        println!("{tag} {:<48} max_rel_err {:.3e}", c.name, c.max_relative_error);
    }
    println!("{} of {} checks within {GRADIENT_TOLERANCE:e}", checks.len() - failed, checks.len());
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn ordercheck() -> Result<(), Failure> {
    let checks = ordercheck_suite();
    let mut failed = 0;
    for c in &checks {
        let tag = if c.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!c.passed());
        println!("{tag} {:<9} expected {} fitted {:.4} (tolerance {ORDER_TOLERANCE})", c.scheme, c.expected, c.fitted);
    }
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} order checks failed")));
    }
    Ok(())
}

fn simulate(preset: Preset, seed: u64, out: &Path) -> Result<(), Failure> {
    let series = synth::simulate(preset, seed);
    let mut buf = Vec::new();
    write_daisy(&series, preset.columns().time.is_some(), &mut buf).expect("writing to memory");
    fs::write(out, buf).map_err(io_err(out))?;
    println!("rows = {}", series.len());
    Ok(())
}
