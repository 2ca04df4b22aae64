//! Recurrent cell functions, the input embedding, the output map and
//! parameter initialization.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffmath::{Ops, ShapeError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Gru,
    Asrnn,
}

impl FromStr for CellKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gru" => Ok(Self::Gru),
            "asrnn" => Ok(Self::Asrnn),
            other => Err(format!("unknown cell `{other}` (expected gru|asrnn)")),
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gru => "gru",
            Self::Asrnn => "asrnn",
        })
    }
}

/// Raw input channels, cell input/state size `k`, and output channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub input: usize,
    pub state: usize,
    pub output: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedParams {
    /// `[k × k_x_raw]`
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_h: Tensor,
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub u_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub b_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsrnnParams {
    pub w_h: Tensor,
    pub w_z: Tensor,
    /// Generator of the anti-symmetric hidden-to-hidden coupling.
    pub m: Tensor,
    pub b_h: Tensor,
    pub b_z: Tensor,
    /// Diffusion, `γ ≥ 0`.
    pub gamma: f64,
    /// Step scaling `ε > 0`.
    pub epsilon: f64,
}

impl AsrnnParams {
    /// `A = M − Mᵀ − γI`.
    pub fn coupling(&self) -> Tensor {
        let n = self.m.rows();
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let diag = if i == j { self.gamma } else { 0.0 };
                a.set(i, j, self.m.get(i, j) - self.m.get(j, i) - diag);
            }
        }
        a
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellParams {
    Gru(GruParams),
    Asrnn(AsrnnParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputParams {
    /// `[k_out × k]`
    pub w: Tensor,
    pub b: Tensor,
}

/// Every trainable quantity of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embed: EmbedParams,
    pub cell: CellParams,
    pub out: OutputParams,
    /// Trainable state at the start of the sequence.
    pub h0: Tensor,
}

impl ModelParams {
    pub fn kind(&self) -> CellKind {
        match self.cell {
            CellParams::Gru(_) => CellKind::Gru,
            CellParams::Asrnn(_) => CellKind::Asrnn,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims { input: self.embed.w.cols(), state: self.h0.len(), output: self.out.w.rows() }
    }

    /// `(gamma, epsilon)` for an ASRNN model.
    pub fn asrnn_hyper(&self) -> Option<(f64, f64)> {
        match &self.cell {
            CellParams::Asrnn(p) => Some((p.gamma, p.epsilon)),
            CellParams::Gru(_) => None,
        }
    }

    /// Trainable tensors in a fixed order, with stable names.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![("embed.w", &self.embed.w), ("embed.b", &self.embed.b)];
        match &self.cell {
            CellParams::Gru(p) => v.extend([
                ("gru.w_h", &p.w_h),
                ("gru.w_z", &p.w_z),
                ("gru.w_r", &p.w_r),
                ("gru.u_h", &p.u_h),
                ("gru.u_z", &p.u_z),
                ("gru.u_r", &p.u_r),
                ("gru.b_h", &p.b_h),
                ("gru.b_z", &p.b_z),
                ("gru.b_r", &p.b_r),
            ]),
            CellParams::Asrnn(p) => v.extend([
                ("asrnn.w_h", &p.w_h),
                ("asrnn.w_z", &p.w_z),
                ("asrnn.m", &p.m),
                ("asrnn.b_h", &p.b_h),
                ("asrnn.b_z", &p.b_z),
            ]),
        }
        v.extend([("out.w", &self.out.w), ("out.b", &self.out.b), ("h0", &self.h0)]);
        v
    }

    /// Same order as [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.embed.w, &mut self.embed.b];
        match &mut self.cell {
            CellParams::Gru(p) => v.extend([
                &mut p.w_h, &mut p.w_z, &mut p.w_r, &mut p.u_h, &mut p.u_z, &mut p.u_r,
                &mut p.b_h, &mut p.b_z, &mut p.b_r,
            ]),
            CellParams::Asrnn(p) => {
                v.extend([&mut p.w_h, &mut p.w_z, &mut p.m, &mut p.b_h, &mut p.b_z])
            }
        }
        v.extend([&mut self.out.w, &mut self.out.b, &mut self.h0]);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind<G: Ops>(&self, g: &mut G) -> BoundModel<G::Value> {
        let mut leaves = Vec::new();
        let mut leaf = |g: &mut G, t: &Tensor| {
            let v = g.param(t.clone());
            leaves.push(v.clone());
            v
        };
        let embed = BoundEmbed { w: leaf(g, &self.embed.w), b: leaf(g, &self.embed.b) };
        let cell = match &self.cell {
            CellParams::Gru(c) => BoundCell::Gru(BoundGru {
                w_h: leaf(g, &c.w_h),
                w_z: leaf(g, &c.w_z),
                w_r: leaf(g, &c.w_r),
                u_h: leaf(g, &c.u_h),
                u_z: leaf(g, &c.u_z),
                u_r: leaf(g, &c.u_r),
                b_h: leaf(g, &c.b_h),
                b_z: leaf(g, &c.b_z),
                b_r: leaf(g, &c.b_r),
            }),
            CellParams::Asrnn(c) => {
                let w_h = leaf(g, &c.w_h);
                let w_z = leaf(g, &c.w_z);
                let m = leaf(g, &c.m);
                let b_h = leaf(g, &c.b_h);
                let b_z = leaf(g, &c.b_z);
                let a = asrnn_coupling(g, &m, c.gamma).expect("generator is square");
                BoundCell::Asrnn(BoundAsrnn { w_h, w_z, a, b_h, b_z, epsilon: c.epsilon })
            }
        };
        let out = BoundOutput { w: leaf(g, &self.out.w), b: leaf(g, &self.out.b) };
        let h0 = leaf(g, &self.h0);
        BoundModel { embed, cell, out, h0, leaves }
    }
}

/// `A = M − Mᵀ − γI` recorded on `g`.
pub fn asrnn_coupling<G: Ops>(g: &mut G, m: &G::Value, gamma: f64) -> Result<G::Value, ShapeError> {
    let n = g.value(m).rows();
    let mt = g.transpose(m)?;
    let skew = g.sub(m, &mt)?;
    let diag = g.constant(scaled_identity(n, -gamma));
    g.add(&skew, &diag)
}

fn scaled_identity(n: usize, s: f64) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.set(i, i, s);
    }
    t
}

pub struct BoundEmbed<V> {
    pub w: V,
    pub b: V,
}

pub struct BoundGru<V> {
    pub w_h: V,
    pub w_z: V,
    pub w_r: V,
    pub u_h: V,
    pub u_z: V,
    pub u_r: V,
    pub b_h: V,
    pub b_z: V,
    pub b_r: V,
}

pub struct BoundAsrnn<V> {
    pub w_h: V,
    pub w_z: V,
    /// Derived coupling `A = M − Mᵀ − γI`.
    pub a: V,
    pub b_h: V,
    pub b_z: V,
    pub epsilon: f64,
}

pub enum BoundCell<V> {
    Gru(BoundGru<V>),
    Asrnn(BoundAsrnn<V>),
}

pub struct BoundOutput<V> {
    pub w: V,
    pub b: V,
}

/// A model whose parameters live on an [`Ops`] backend.
pub struct BoundModel<V> {
    pub embed: BoundEmbed<V>,
    pub cell: BoundCell<V>,
    pub out: BoundOutput<V>,
    pub h0: V,
    /// Parameter leaves in [`ModelParams::named_tensors`] order.
    pub leaves: Vec<V>,
}

impl<V: Clone> BoundCell<V> {
    pub fn apply<G: Ops<Value = V>>(&self, g: &mut G, x: &V, h: &V) -> Result<V, ShapeError> {
        match self {
            Self::Gru(p) => gru_cell(g, x, h, p),
            Self::Asrnn(p) => asrnn_cell(g, x, h, p),
        }
    }
}

/// `tanh(W_e·x + b_e)`
pub fn embed_input<G: Ops>(
    g: &mut G,
    x_raw: &G::Value,
    p: &BoundEmbed<G::Value>,
) -> Result<G::Value, ShapeError> {
    let pre = g.linear(x_raw, &p.w, &p.b)?;
    Ok(g.tanh(&pre))
}

/// GRU cell: `(1 − z)⊙c + z⊙h`, written as `c + z⊙(h − c)`.
pub fn gru_cell<G: Ops>(
    g: &mut G,
    x: &G::Value,
    h: &G::Value,
    p: &BoundGru<G::Value>,
) -> Result<G::Value, ShapeError> {
    let gate = |g: &mut G, w: &G::Value, u: &G::Value, b: &G::Value| -> Result<G::Value, ShapeError> {
        let xw = g.linear(x, w, b)?;
        let hu = g.matmul_t(h, u)?;
        let pre = g.add(&xw, &hu)?;
        Ok(g.sigmoid(&pre))
    };
    let z = gate(g, &p.w_z, &p.u_z, &p.b_z)?;
    let r = gate(g, &p.w_r, &p.u_r, &p.b_r)?;
    let rh = g.hadamard(&r, h)?;
    let xw = g.linear(x, &p.w_h, &p.b_h)?;
    let hu = g.matmul_t(&rh, &p.u_h)?;
    let pre = g.add(&xw, &hu)?;
    let cand = g.tanh(&pre);
    let diff = g.sub(h, &cand)?;
    let keep = g.hadamard(&z, &diff)?;
    g.add(&cand, &keep)
}

/// Gated anti-symmetric cell: `σ(W_z x + A h + b_z) ⊙ tanh(W_h x + A h + b_h)`.
pub fn asrnn_cell<G: Ops>(
    g: &mut G,
    x: &G::Value,
    h: &G::Value,
    p: &BoundAsrnn<G::Value>,
) -> Result<G::Value, ShapeError> {
    let ah = g.matmul_t(h, &p.a)?;
    let zx = g.linear(x, &p.w_z, &p.b_z)?;
    let zpre = g.add(&zx, &ah)?;
    let z = g.sigmoid(&zpre);
    let cx = g.linear(x, &p.w_h, &p.b_h)?;
    let cpre = g.add(&cx, &ah)?;
    let cand = g.tanh(&cpre);
    g.hadamard(&z, &cand)
}

/// Affine readout `W_o·h + b_o`.
pub fn output_map<G: Ops>(
    g: &mut G,
    h: &G::Value,
    p: &BoundOutput<G::Value>,
) -> Result<G::Value, ShapeError> {
    g.linear(h, &p.w, &p.b)
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("sized above")
}

/// Seeded initialization: matrices uniform in `±1/√cols`, zero biases, and
/// `h0` uniform in `±0.1`.
pub fn init_params(seed: u64, dims: ModelDims, kind: CellKind, gamma: f64, epsilon: f64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = dims.state;
    let zeros = || Tensor::zeros(&[k]);
    let embed = EmbedParams { w: uniform_matrix(&mut rng, k, dims.input), b: zeros() };
    let cell = match kind {
        CellKind::Gru => CellParams::Gru(GruParams {
            w_h: uniform_matrix(&mut rng, k, k),
            w_z: uniform_matrix(&mut rng, k, k),
            w_r: uniform_matrix(&mut rng, k, k),
            u_h: uniform_matrix(&mut rng, k, k),
            u_z: uniform_matrix(&mut rng, k, k),
            u_r: uniform_matrix(&mut rng, k, k),
            b_h: zeros(),
            b_z: zeros(),
            b_r: zeros(),
        }),
        CellKind::Asrnn => CellParams::Asrnn(AsrnnParams {
            w_h: uniform_matrix(&mut rng, k, k),
            w_z: uniform_matrix(&mut rng, k, k),
            m: uniform_matrix(&mut rng, k, k),
            b_h: zeros(),
            b_z: zeros(),
            gamma,
            epsilon,
        }),
    };
    let out = OutputParams {
        w: uniform_matrix(&mut rng, dims.output, k),
        b: Tensor::zeros(&[dims.output]),
    };
    let h0 = Tensor::vector((0..k).map(|_| rng.gen_range(-0.1..0.1)).collect());
    ModelParams { embed, cell, out, h0 }
}

/// All-zero parameters; handy for hand-checked cases.
pub fn zero_params(dims: ModelDims, kind: CellKind, gamma: f64, epsilon: f64) -> ModelParams {
    let mut p = init_params(0, dims, kind, gamma, epsilon);
    for t in p.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    p
}
