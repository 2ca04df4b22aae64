//! Self-describing text serialization of trained models.
//!
//! Floats are written with 17 significant digits so every value reads back
//! bit for bit.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::cells::{zero_params, CellKind, ModelDims, ModelParams};
use crate::config::RunConfig;
use crate::data::{build_dataset, Dataset, NormStats, TimeSeries};
use crate::diffmath::Tensor;
use crate::integrators::{Formulation, Interpolation, Scheme, StepError, StepSpec};
use crate::training::TrainOutcome;

const MAGIC: &str = "# tarnn model";
const FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing field `{0}`")]
    Missing(String),
    #[error("normalization digest does not match the stored statistics")]
    Digest,
    #[error("model and data are incompatible: {0}")]
    Incompatible(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelMeta {
    pub scheme: Scheme,
    pub formulation: Formulation,
    pub interpolation: Interpolation,
    pub mu_delta: f64,
    pub delta_channel: bool,
    /// Subsampling applied to the data file before normalization.
    pub p_missing: f64,
    pub data_seed: u64,
    pub stats: NormStats,
    pub config_digest: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_rrse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub params: ModelParams,
    pub meta: ModelMeta,
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

fn floats(vs: &[f64]) -> String {
    vs.iter().map(|v| float(*v)).collect::<Vec<_>>().join(" ")
}

impl ModelFile {
    /// Packages a finished run together with the data treatment it was trained on.
    pub fn from_training(outcome: TrainOutcome, ds: &Dataset, config: &RunConfig) -> Self {
        let h = &outcome.history;
        let meta = ModelMeta {
            scheme: config.train.scheme,
            formulation: config.train.formulation,
            interpolation: config.train.interpolation,
            mu_delta: ds.mu_delta,
            delta_channel: ds.delta_channel,
            p_missing: config.p_missing,
            data_seed: config.data_seed,
            stats: ds.stats.clone(),
            config_digest: config.digest(),
            seed: config.train.seed,
            epochs: h.epochs.len(),
            best_epoch: h.best_epoch,
            best_val_rrse: h.best_val_rrse,
        };
        Self { params: outcome.params, meta }
    }

    /// Rebuilds the evaluation dataset from the raw canonical series and
    /// checks it against the stored normalization and channel counts.
    pub fn dataset_for(&self, series: &TimeSeries) -> Result<Dataset, ModelFileError> {
        let m = &self.meta;
        let ds = build_dataset(series, m.p_missing, m.data_seed, m.delta_channel)
            .map_err(|e| ModelFileError::Incompatible(e.to_string()))?;
        let d = self.params.dims();
        if ds.input_dim() != d.input || ds.output_dim() != d.output {
            return Err(ModelFileError::Incompatible(format!(
                "data has {} inputs and {} outputs, model expects {} and {}",
                ds.input_dim(),
                ds.output_dim(),
                d.input,
                d.output
            )));
        }
        if ds.stats.digest() != m.stats.digest() || ds.mu_delta.to_bits() != m.mu_delta.to_bits() {
            return Err(ModelFileError::Incompatible("normalization digest differs from the model's".into()));
        }
        Ok(ds)
    }

    pub fn step_spec(&self) -> Result<StepSpec, StepError> {
        StepSpec::new(self.meta.scheme, self.meta.formulation, self.meta.interpolation, self.meta.mu_delta)
    }

    pub fn to_text(&self) -> String {
        let m = &self.meta;
        let p = &self.params;
        let d = p.dims();
        let (gamma, epsilon) = p.asrnn_hyper().unwrap_or((0.0, 1.0));
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("format", FORMAT.to_string());
        kv("cell", p.kind().to_string());
        kv("scheme", m.scheme.to_string());
        kv("formulation", m.formulation.to_string());
        kv("interpolation", m.interpolation.to_string());
        kv("input", d.input.to_string());
        kv("state", d.state.to_string());
        kv("output", d.output.to_string());
        kv("gamma", float(gamma));
        kv("epsilon", float(epsilon));
        kv("delta_channel", m.delta_channel.to_string());
        kv("p_missing", float(m.p_missing));
        kv("data_seed", m.data_seed.to_string());
        kv("mu_delta", float(m.mu_delta));
        kv("norm_digest", m.stats.digest());
        kv("config_digest", m.config_digest.clone());
        kv("seed", m.seed.to_string());
        kv("epochs", m.epochs.to_string());
        kv("best_epoch", m.best_epoch.to_string());
        kv("best_val_rrse", float(m.best_val_rrse));
        kv("x_mean", floats(&m.stats.x_mean));
        kv("x_std", floats(&m.stats.x_std));
        kv("y_mean", floats(&m.stats.y_mean));
        kv("y_std", floats(&m.stats.y_std));
        let mut out = format!("{MAGIC}\n{s}");
        for (name, t) in p.named_tensors() {
            let shape: Vec<String> = t.shape().iter().map(|n| n.to_string()).collect();
            let _ = writeln!(out, "tensor {name} {}", shape.join(" "));
            let width = if t.rank() == 2 { t.cols() } else { t.len().max(1) };
            for row in t.data().chunks(width) {
                let _ = writeln!(out, "{}", floats(row));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ModelFileError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(ModelFileError::Parse { line: 1, msg: format!("expected `{MAGIC}`") }),
        }
        let mut fields: HashMap<String, (usize, String)> = HashMap::new();
        let mut tensor_lines: Vec<(usize, &str)> = Vec::new();
        for (line, l) in lines.by_ref() {
            if l.starts_with("tensor ") {
                tensor_lines.push((line, l));
                break;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| ModelFileError::Parse { line, msg: "expected `key = value`".into() })?;
            fields.insert(k.trim().to_string(), (line, v.trim().to_string()));
        }
        tensor_lines.extend(lines);

        fn get<T: std::str::FromStr>(f: &HashMap<String, (usize, String)>, key: &str) -> Result<T, ModelFileError>
        where
            T::Err: std::fmt::Display,
        {
            let (line, v) = f.get(key).ok_or_else(|| ModelFileError::Missing(key.into()))?;
            v.parse().map_err(|e: T::Err| ModelFileError::Parse { line: *line, msg: format!("{key}: {e}") })
        }
        fn list(f: &HashMap<String, (usize, String)>, key: &str) -> Result<Vec<f64>, ModelFileError> {
            let (line, v) = f.get(key).ok_or_else(|| ModelFileError::Missing(key.into()))?;
            v.split_whitespace()
                .map(|x| x.parse().map_err(|e| ModelFileError::Parse { line: *line, msg: format!("{key}: {e}") }))
                .collect()
        }

        let format: u32 = get(&fields, "format")?;
        if format != FORMAT {
            let line = fields["format"].0;
            return Err(ModelFileError::Parse { line, msg: format!("unsupported format {format}") });
        }
        let kind: CellKind = get(&fields, "cell")?;
        let dims = ModelDims { input: get(&fields, "input")?, state: get(&fields, "state")?, output: get(&fields, "output")? };
        let stats = NormStats {
            x_mean: list(&fields, "x_mean")?,
            x_std: list(&fields, "x_std")?,
            y_mean: list(&fields, "y_mean")?,
            y_std: list(&fields, "y_std")?,
        };
        let digest: String = get(&fields, "norm_digest")?;
        if digest != stats.digest() {
            return Err(ModelFileError::Digest);
        }
        let meta = ModelMeta {
            scheme: get(&fields, "scheme")?,
            formulation: get(&fields, "formulation")?,
            interpolation: get(&fields, "interpolation")?,
            mu_delta: get(&fields, "mu_delta")?,
            delta_channel: get(&fields, "delta_channel")?,
            p_missing: get(&fields, "p_missing")?,
            data_seed: get(&fields, "data_seed")?,
            stats,
            config_digest: get(&fields, "config_digest")?,
            seed: get(&fields, "seed")?,
            epochs: get(&fields, "epochs")?,
            best_epoch: get(&fields, "best_epoch")?,
            best_val_rrse: get(&fields, "best_val_rrse")?,
        };

        let mut params = zero_params(dims, kind, get(&fields, "gamma")?, get(&fields, "epsilon")?);
        let names: Vec<&'static str> = params.named_tensors().iter().map(|(n, _)| *n).collect();
        let mut rows = tensor_lines.into_iter();
        for (name, slot) in names.into_iter().zip(params.tensors_mut()) {
            let (line, header) = rows.next().ok_or_else(|| ModelFileError::Missing(format!("tensor {name}")))?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() < 2 || parts[0] != "tensor" || parts[1] != name {
                return Err(ModelFileError::Parse { line, msg: format!("expected `tensor {name}`") });
            }
            let shape: Vec<usize> = parts[2..]
                .iter()
                .map(|s| s.parse().map_err(|_| ModelFileError::Parse { line, msg: format!("bad shape `{s}`") }))
                .collect::<Result<_, _>>()?;
            if shape != slot.shape() {
                return Err(ModelFileError::Parse {
                    line,
                    msg: format!("{name} has shape {shape:?}, expected {:?}", slot.shape()),
                });
            }
            let mut data = Vec::with_capacity(slot.len());
            while data.len() < slot.len() {
                let (line, l) = rows.next().ok_or_else(|| ModelFileError::Missing(format!("values of {name}")))?;
                for tok in l.split_whitespace() {
                    data.push(tok.parse::<f64>().map_err(|e| ModelFileError::Parse { line, msg: e.to_string() })?);
                }
            }
            if data.len() != slot.len() {
                return Err(ModelFileError::Parse { line, msg: format!("{name}: too many values") });
            }
            *slot = Tensor::new(shape, data).expect("length checked");
        }
        if let Some((line, _)) = rows.next() {
            return Err(ModelFileError::Parse { line, msg: "trailing content".into() });
        }
        Ok(Self { params, meta })
    }

    /// Writes through a temporary sibling so a failed write leaves no file behind.
    pub fn save(&self, path: &Path) -> Result<(), ModelFileError> {
        let io = |source| ModelFileError::Io { path: path.display().to_string(), source };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_text()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, ModelFileError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ModelFileError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }
}
