//! Time-aware recurrent models for input/output system identification from
//! unevenly sampled data. Each step of a GRU or antisymmetric cell is
//! integrated with an explicit Runge-Kutta scheme over the actual sample gap.

pub mod diffmath;
pub mod cells;
pub mod integrators;
pub mod data;
pub mod evaluation;
pub mod training;
pub mod verify;
pub mod config;
pub mod model_file;
pub mod suites;

pub use cells::{CellKind, ModelDims, ModelParams};
pub use config::RunConfig;
pub use data::{Dataset, Preset, SplitName, TimeSeries};
pub use diffmath::Tensor;
pub use evaluation::{EvalReport, Rollout};
pub use integrators::{Formulation, Interpolation, Scheme, StepSpec};
pub use model_file::ModelFile;
pub use training::{TrainConfig, TrainHistory, TrainOutcome};
