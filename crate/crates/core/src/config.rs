//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cells::CellKind;
use crate::data::{build_dataset, read_canonical_csv, DataError, Dataset, Preset};
use crate::training::TrainConfig;

pub const KEYS: &[&str] = &[
    "dataset",
    "preset",
    "cell",
    "scheme",
    "formulation",
    "interpolation",
    "k",
    "batch_size",
    "lr",
    "L",
    "stride",
    "seed",
    "max_epochs",
    "patience",
    "gamma",
    "epsilon",
    "delta_channel",
    "p_missing",
    "data_seed",
];

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}` (known keys: {known})")]
    UnknownKey { line: usize, key: String, known: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: invalid value for `{key}`: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
}

/// Everything needed to turn a prepared series into a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub preset: Preset,
    pub train: TrainConfig,
    pub delta_channel: bool,
    pub p_missing: f64,
    pub data_seed: u64,
}

impl RunConfig {
    pub fn new(dataset: impl Into<PathBuf>, preset: Preset, cell: CellKind) -> Self {
        Self {
            dataset: dataset.into(),
            preset,
            train: TrainConfig::preset(preset, cell),
            delta_channel: false,
            p_missing: 0.0,
            data_seed: 0,
        }
    }

    /// Parses a config; a relative `dataset` is resolved against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self, ConfigError> {
        let mut entries: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            let Some(&key) = KEYS.iter().find(|&&known| known == k) else {
                return Err(ConfigError::UnknownKey { line, key: k.into(), known: KEYS.join(", ") });
            };
            if entries.insert(key, (line, v)).is_some() {
                return Err(ConfigError::Duplicate { line, key: k.into() });
            }
        }

        fn value<T: std::str::FromStr>(
            entries: &BTreeMap<&str, (usize, &str)>,
            key: &str,
        ) -> Result<Option<T>, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            entries
                .get(key)
                .map(|&(line, v)| {
                    v.parse::<T>().map_err(|e| ConfigError::Value { line, key: key.into(), msg: e.to_string() })
                })
                .transpose()
        }

        let dataset: String = value(&entries, "dataset")?.ok_or(ConfigError::Missing("dataset"))?;
        let mut dataset = PathBuf::from(dataset);
        if let Some(base) = base.filter(|_| dataset.is_relative()) {
            dataset = base.join(dataset);
        }
        let preset = value::<Preset>(&entries, "preset")?.unwrap_or(Preset::Cstr);
        let cell = value::<CellKind>(&entries, "cell")?.unwrap_or(CellKind::Gru);
        let mut cfg = RunConfig::new(dataset, preset, cell);
        let t = &mut cfg.train;
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = value(&entries, $key)? {
                    $field = v;
                }
            };
        }
        set!("scheme", t.scheme);
        set!("formulation", t.formulation);
        set!("interpolation", t.interpolation);
        set!("k", t.state_size);
        set!("batch_size", t.batch_size);
        set!("lr", t.learning_rate);
        set!("L", t.window);
        set!("stride", t.stride);
        set!("seed", t.seed);
        set!("max_epochs", t.max_epochs);
        set!("patience", t.patience);
        set!("gamma", t.gamma);
        set!("epsilon", t.epsilon);
        set!("delta_channel", cfg.delta_channel);
        set!("p_missing", cfg.p_missing);
        set!("data_seed", cfg.data_seed);
        cfg.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..1.0).contains(&cfg.p_missing) {
            return Err(ConfigError::Invalid(format!("p_missing must lie in [0, 1), got {}", cfg.p_missing)));
        }
        Ok(cfg)
    }

    /// Reads the canonical CSV named by `dataset` and applies the data keys.
    pub fn load_dataset(&self) -> Result<Dataset, DataError> {
        let series = read_canonical_csv(&self.dataset)?;
        build_dataset(&series, self.p_missing, self.data_seed, self.delta_channel)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    /// Canonical text form; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let lines = [
            ("dataset", self.dataset.display().to_string()),
            ("preset", self.preset.to_string()),
            ("cell", t.cell.to_string()),
            ("scheme", t.scheme.to_string()),
            ("formulation", t.formulation.to_string()),
            ("interpolation", t.interpolation.to_string()),
            ("k", t.state_size.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.learning_rate.to_string()),
            ("L", t.window.to_string()),
            ("stride", t.stride.to_string()),
            ("seed", t.seed.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("gamma", t.gamma.to_string()),
            ("epsilon", t.epsilon.to_string()),
            ("delta_channel", self.delta_channel.to_string()),
            ("p_missing", self.p_missing.to_string()),
            ("data_seed", self.data_seed.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of everything except the dataset location.
    pub fn digest(&self) -> String {
        let text: String = self.to_text().lines().skip(1).map(|l| format!("{l}\n")).collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::{Formulation, Interpolation, Scheme};

    #[test]
    fn defaults_follow_the_preset() {
        let c = RunConfig::parse("dataset = w.csv\npreset = winding\ncell = asrnn\n", None).unwrap();
        assert_eq!((c.train.batch_size, c.train.state_size, c.train.learning_rate), (64, 10, 0.01));
        assert_eq!(c.train.window, 20);
        let c = RunConfig::parse("dataset = c.csv", None).unwrap();
        assert_eq!((c.train.batch_size, c.train.state_size, c.train.learning_rate), (512, 20, 0.001));
        assert_eq!(c.preset, Preset::Cstr);
    }

    #[test]
    fn every_key_parses() {
        let text = "# comment\ndataset = d.csv\npreset = cstr\ncell = gru\nscheme = rk4  # trailing\n\
            formulation = non-stationary\ninterpolation = linear\nk = 7\nbatch_size = 32\nlr = 0.02\nL = 10\n\
            stride = 2\nseed = 9\nmax_epochs = 50\npatience = 5\ngamma = 0.5\nepsilon = 0.7\n\
            delta_channel = true\np_missing = 0.5\ndata_seed = 4\n";
        let c = RunConfig::parse(text, Some(Path::new("/data"))).unwrap();
        assert_eq!(c.dataset, PathBuf::from("/data/d.csv"));
        let t = &c.train;
        assert_eq!((t.scheme, t.formulation, t.interpolation), (Scheme::Rk4, Formulation::NonStationary, Interpolation::Linear));
        assert_eq!((t.state_size, t.batch_size, t.window, t.stride, t.seed), (7, 32, 10, 2, 9));
        assert_eq!((t.max_epochs, t.patience), (50, 5));
        assert_eq!((t.learning_rate, t.gamma, t.epsilon), (0.02, 0.5, 0.7));
        assert!(c.delta_channel);
        assert_eq!((c.p_missing, c.data_seed), (0.5, 4));
        assert_eq!(RunConfig::parse(&c.to_text(), None).unwrap(), c);
    }

    #[test]
    fn rejections() {
        assert!(matches!(
            RunConfig::parse("dataset = a\nlearning_rate = 0.1\n", None),
            Err(ConfigError::UnknownKey { line: 2, .. })
        ));
        assert!(matches!(RunConfig::parse("dataset = a\nk = 3\nk = 4\n", None), Err(ConfigError::Duplicate { line: 3, .. })));
        assert!(matches!(RunConfig::parse("dataset a\n", None), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(RunConfig::parse("k = 3\n", None), Err(ConfigError::Missing("dataset"))));
        assert!(matches!(RunConfig::parse("dataset = a\nscheme = rk5\n", None), Err(ConfigError::Value { line: 2, .. })));
        assert!(matches!(RunConfig::parse("dataset = a\nk = 0\n", None), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::parse("dataset = a\np_missing = 1\n", None), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn digest_ignores_dataset_location() {
        let a = RunConfig::parse("dataset = a.csv\nseed = 1\n", None).unwrap();
        let b = RunConfig::parse("dataset = elsewhere/a.csv\nseed = 1\n", None).unwrap();
        let c = RunConfig::parse("dataset = a.csv\nseed = 2\n", None).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }
}
