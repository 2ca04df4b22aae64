//! Truncated backpropagation through time with stateful segment
//! initialization, Adam and early stopping on validation RRSE.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cells::{init_params, output_map, BoundModel, CellKind, ModelDims, ModelParams};
use crate::data::{make_segments, DataError, Dataset, Preset, SegmentIndex, SplitName};
use crate::diffmath::{DiffError, Eval, Ops, ShapeError, Tape, Tensor, Var};
use crate::evaluation::{evaluate_split, rollout_until, EvalError};
use crate::integrators::{rk_step, Formulation, Interpolation, Scheme, StepError, StepSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("window [{start}, {end}) leaves the training range (0..{limit})")]
    WindowOverflow { start: usize, end: usize, limit: usize },
    #[error("training diverged at epoch {epoch}: {what}")]
    Diverged { epoch: usize, what: String, history: Box<TrainHistory> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub cell: CellKind,
    pub scheme: Scheme,
    pub formulation: Formulation,
    pub interpolation: Interpolation,
    /// State size `k`.
    pub state_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// BPTT window length `L`.
    pub window: usize,
    pub stride: usize,
    pub seed: u64,
    pub max_epochs: usize,
    pub patience: usize,
    pub gamma: f64,
    pub epsilon: f64,
}

impl TrainConfig {
    /// Tuned `(b, k, λ)` for each dataset and cell, stationary Euler otherwise.
    pub fn preset(dataset: Preset, cell: CellKind) -> Self {
        let (batch_size, state_size, learning_rate) = match (dataset, cell) {
            (Preset::Cstr, CellKind::Gru) => (512, 20, 0.001),
            (Preset::Cstr, CellKind::Asrnn) => (512, 100, 0.001),
            (Preset::Winding, CellKind::Gru) => (512, 10, 0.003),
            (Preset::Winding, CellKind::Asrnn) => (64, 10, 0.01),
        };
        Self {
            cell,
            scheme: Scheme::Euler,
            formulation: Formulation::Stationary,
            interpolation: Interpolation::Constant,
            state_size,
            batch_size,
            learning_rate,
            window: 20,
            stride: 1,
            seed: 0,
            max_epochs: 2000,
            patience: 100,
            gamma: 1.0,
            epsilon: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.state_size == 0 {
            return bad("k must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("lr must be positive");
        }
        if self.window < 2 {
            return bad("L must be at least 2");
        }
        if self.stride == 0 {
            return bad("stride must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be non-negative");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }

    pub fn step_spec(&self, mu_delta: f64) -> Result<StepSpec, StepError> {
        StepSpec::new(self.scheme, self.formulation, self.interpolation, mu_delta)
    }

    pub fn dims(&self, ds: &Dataset) -> ModelDims {
        ModelDims { input: ds.input_dim(), state: self.state_size, output: ds.output_dim() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rrse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_rrse: f64,
    pub stop: Option<StopReason>,
}

impl TrainHistory {
    fn new() -> Self {
        Self { epochs: Vec::new(), best_epoch: 0, best_val_rrse: f64::INFINITY, stop: None }
    }
}

/// First and second moment estimates of every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { v: m.clone(), m, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Config(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(ShapeError::Mismatch { op: "adam", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() }.into());
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (1.0 - b1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            *pj -= lr * (mj / c1) / ((vj / c2).sqrt() + eps);
        }
    }
    Ok(())
}

fn rows_at(m: &Tensor, rows: impl Iterator<Item = usize>) -> Tensor {
    let picked: Vec<&[f64]> = rows.map(|r| m.row(r)).collect();
    Tensor::from_rows(&picked).expect("rows share a width")
}

fn check_window(ds: &Dataset, start: usize, window: usize) -> Result<(), TrainError> {
    let limit = ds.train_steps();
    if start + window > limit {
        return Err(TrainError::WindowOverflow { start, end: start + window, limit });
    }
    Ok(())
}

/// Steps a batch of windows forward on `g`; calls `visit(j, outputs)` with
/// the predictions for targets `y_{start + j + 1}`.
fn unroll<G: Ops>(
    g: &mut G,
    model: &BoundModel<G::Value>,
    ds: &Dataset,
    spec: &StepSpec,
    starts: &[usize],
    window: usize,
    h_init: G::Value,
    mut visit: impl FnMut(&mut G, usize, &G::Value) -> Result<(), TrainError>,
) -> Result<G::Value, TrainError> {
    let x = ds.series.x();
    let mut h = h_init;
    for j in 0..window {
        let xn = rows_at(x, starts.iter().map(|s| s + j));
        let xn1 = rows_at(x, starts.iter().map(|s| s + j + 1));
        let deltas: Vec<f64> = starts.iter().map(|s| ds.series.delta(s + j)).collect();
        h = rk_step(g, spec, model, &xn, &xn1, &deltas, &h)?;
        let y = output_map(g, &h, &model.out)?;
        visit(g, j, &y)?;
    }
    Ok(h)
}

/// Predictions `[L × k_out]` for targets `y_{start+1} … y_{start+L}` and the
/// final state.
pub fn forward_segment(
    params: &ModelParams,
    ds: &Dataset,
    spec: &StepSpec,
    start: usize,
    window: usize,
    h_init: &Tensor,
) -> Result<(Tensor, Tensor), TrainError> {
    check_window(ds, start, window)?;
    let mut g = Eval;
    let model = params.bind(&mut g);
    let h = Tensor::matrix(1, h_init.len(), h_init.data().to_vec())?;
    let mut preds = Vec::with_capacity(window * ds.output_dim());
    let h = unroll(&mut g, &model, ds, spec, &[start], window, h, |_, _, y| {
        preds.extend_from_slice(y.data());
        Ok(())
    })?;
    Ok((Tensor::matrix(window, ds.output_dim(), preds)?, Tensor::vector(h.into_data())))
}

/// States arriving at every segment start after one forward pass over the
/// training rows from `h0`, one row per segment.
pub fn refresh_segment_states(
    params: &ModelParams,
    ds: &Dataset,
    spec: &StepSpec,
    segments: &SegmentIndex,
) -> Result<Tensor, TrainError> {
    let last = segments.starts.last().copied().unwrap_or(0);
    let ro = rollout_until(params, ds, spec, last + 1)?;
    Ok(rows_at(&ro.states, segments.starts.iter().copied()))
}

/// Mean squared error over batch rows, window positions and channels,
/// recorded on `tape`. Windows starting at row 0 take the trainable `h0`;
/// every other window starts from its detached stored state.
pub fn batch_loss(
    tape: &mut Tape,
    model: &BoundModel<Var>,
    ds: &Dataset,
    spec: &StepSpec,
    starts: &[usize],
    window: usize,
    stored: &Tensor,
) -> Result<Var, TrainError> {
    for &s in starts {
        check_window(ds, s, window)?;
    }
    let mut fixed = stored.clone();
    let mask: Vec<f64> = starts.iter().map(|&s| if s == 0 { 1.0 } else { 0.0 }).collect();
    for (r, &on) in mask.iter().enumerate() {
        if on == 1.0 {
            fixed.row_mut(r).fill(0.0);
        }
    }
    let fixed = tape.constant(fixed);
    let h_init = if mask.contains(&1.0) {
        let from_h0 = tape.outer_rows(&model.h0, &mask)?;
        tape.add(&fixed, &from_h0)?
    } else {
        fixed
    };
    let y = ds.series.y();
    let mut terms = Vec::with_capacity(window);
    unroll(tape, model, ds, spec, starts, window, h_init, |tape, j, pred| {
        let target = tape.constant(rows_at(y, starts.iter().map(|s| s + j + 1)));
        let diff = tape.sub(pred, &target)?;
        let sq = tape.hadamard(&diff, &diff)?;
        terms.push(tape.sum(&sq));
        Ok(())
    })?;
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(&total, t)?;
    }
    let count = (starts.len() * window * ds.output_dim()) as f64;
    Ok(tape.scale(&total, 1.0 / count))
}

/// Loss and parameter gradients (in [`ModelParams::tensors_mut`] order).
pub fn loss_and_gradients(
    params: &ModelParams,
    ds: &Dataset,
    spec: &StepSpec,
    starts: &[usize],
    window: usize,
    stored: &Tensor,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let mut tape = Tape::new();
    let model = params.bind(&mut tape);
    let loss = batch_loss(&mut tape, &model, ds, spec, starts, window, stored)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).item();
    let g = model.leaves.iter().map(|v| grads.get(*v).expect("leaf is trainable").clone()).collect();
    Ok((value, g))
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
}

pub fn train(ds: &Dataset, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(ds, config, |_| {})
}

/// Trains from a seeded initialization; `observe` sees every finished epoch.
pub fn train_with(
    ds: &Dataset,
    config: &TrainConfig,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let spec = config.step_spec(ds.mu_delta)?;
    let segments = make_segments(ds, config.window, config.stride)?;
    let mut params = init_params(config.seed, config.dims(ds), config.cell, config.gamma, config.epsilon);
    let mut adam = AdamState::new(params.named_tensors().into_iter().map(|(_, t)| t));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut history = TrainHistory::new();
    let mut best = params.clone();
    let mut stored = refresh_segment_states(&params, ds, &spec, &segments)?;
    let mut order: Vec<usize> = (0..segments.len()).collect();
    let diverged = |epoch, what: String, history: &TrainHistory| TrainError::Diverged {
        epoch,
        what,
        history: Box::new(history.clone()),
    };

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let starts: Vec<usize> = batch.iter().map(|&i| segments.starts[i]).collect();
            let init = rows_at(&stored, batch.iter().copied());
            let (loss, grads) = loss_and_gradients(&params, ds, &spec, &starts, config.window, &init)?;
            if !loss.is_finite() {
                return Err(diverged(epoch, format!("non-finite training loss {loss}"), &history));
            }
            loss_sum += loss * batch.len() as f64;
            adam_update(&mut params.tensors_mut(), &grads, &mut adam, config.learning_rate)?;
        }
        let train_loss = loss_sum / segments.len() as f64;

        let ro = rollout_until(&params, ds, &spec, ds.split.val_end)?;
        stored = rows_at(&ro.states, segments.starts.iter().copied());
        let val_rrse = evaluate_split(&ro, ds, SplitName::Val)?.mean;
        if !val_rrse.is_finite() {
            return Err(diverged(epoch, format!("non-finite validation RRSE {val_rrse}"), &history));
        }
        let record = EpochRecord { epoch, train_loss, val_rrse };
        history.epochs.push(record);
        observe(&record);

        if val_rrse < history.best_val_rrse {
            history.best_val_rrse = val_rrse;
            history.best_epoch = epoch;
            best = params.clone();
        } else if epoch - history.best_epoch > config.patience {
            history.stop = Some(StopReason::Patience);
            break;
        }
    }
    if history.stop.is_none() {
        history.stop = Some(StopReason::MaxEpochs);
    }
    Ok(TrainOutcome { params: best, history })
}
