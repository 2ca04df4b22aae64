use super::kernels::{self, gemm};
use super::{DiffError, Ops, ShapeError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMulT(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Affine(usize, f64, usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Transpose(usize),
    ScaleRows(usize, Vec<f64>),
    OuterRows(usize, Vec<f64>),
    Sum(usize),
}

impl Op {
    fn operands(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            MatMulT(a, b) | AddBias(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => [Some(a), Some(b)],
            Affine(a, _, b, _) => [Some(a), Some(b)],
            Scale(a, _) | Tanh(a) | Sigmoid(a) | Transpose(a) | Sum(a) => [Some(a), None],
            ScaleRows(a, _) | OuterRows(a, _) => [Some(a), None],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

/// Computation record for reverse-mode differentiation.
///
/// Entries are appended in evaluation order, so every operand precedes its
/// consumer. The node value doubles as the saved value of each primitive:
/// `tanh` and `sigmoid` differentiate through their outputs, products through
/// their operands.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.entries
            .binary_search_by_key(&var, |(v, _)| *v)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.entries.iter().map(|(v, t)| (*v, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, trainable, needs_grad: trainable });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.operands().iter().flatten().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value, op, trainable: false, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn v(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// One reverse sweep from `loss`, visiting each entry at most once.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(DiffError::NonScalarLoss { shape: loss_node.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(loss_node.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let entries = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable)
            .map(|(i, n)| {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                (Var(i), g)
            })
            .collect();
        Ok(Gradients { entries })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |i: usize| self.nodes[i].needs_grad;
        let val = |i: usize| &self.nodes[i].value;
        match node.op {
            Op::Leaf => {}
            Op::MatMulT(x, w) => {
                // out[B×m] = X[B×n] · Wᵀ
                let (b, n) = val(x).dims2();
                let m = val(w).rows();
                if needs(x) {
                    let mut dx = vec![0.0; b * n];
                    gemm(b, m, n, g.data(), (m as isize, 1), val(w).data(), (n as isize, 1), 0.0, &mut dx);
                    accumulate(grads, x, val(x).with_data(dx));
                }
                if needs(w) {
                    let mut dw = vec![0.0; m * n];
                    gemm(m, b, n, g.data(), (1, m as isize), val(x).data(), (n as isize, 1), 0.0, &mut dw);
                    accumulate(grads, w, val(w).with_data(dw));
                }
            }
            Op::AddBias(x, bias) => {
                if needs(x) {
                    accumulate(grads, x, g.clone());
                }
                if needs(bias) {
                    let c = val(bias).len();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks_exact(c) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    accumulate(grads, bias, Tensor::vector(db));
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    accumulate(grads, a, g.clone());
                }
                if needs(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(grads, a, g.clone());
                }
                if needs(b) {
                    accumulate(grads, b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    accumulate(grads, a, g.zip_map(val(b), |x, y| x * y));
                }
                if needs(b) {
                    accumulate(grads, b, g.zip_map(val(a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => accumulate(grads, a, g.map(|x| x * s)),
            Op::Affine(a, alpha, b, beta) => {
                if needs(a) {
                    accumulate(grads, a, g.map(|x| x * alpha));
                }
                if needs(b) {
                    accumulate(grads, b, g.map(|x| x * beta));
                }
            }
            Op::Tanh(a) => {
                accumulate(grads, a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y)));
            }
            Op::Sigmoid(a) => {
                accumulate(grads, a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y)));
            }
            Op::Transpose(a) => {
                let t = kernels::transpose(g).expect("gradient of a matrix is a matrix");
                accumulate(grads, a, t);
            }
            Op::ScaleRows(a, ref factors) => {
                let t = kernels::scale_rows(g, factors).expect("shape recorded on forward");
                accumulate(grads, a, t);
            }
            Op::OuterRows(v, ref coeffs) => {
                let n = val(v).len();
                let mut dv = vec![0.0; n];
                for (row, c) in g.data().chunks_exact(n).zip(coeffs) {
                    for (d, r) in dv.iter_mut().zip(row) {
                        *d += c * r;
                    }
                }
                accumulate(grads, v, Tensor::vector(dv));
            }
            Op::Sum(a) => {
                let s = g.item();
                accumulate(grads, a, Tensor::filled(val(a).shape(), s));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Ops for Tape {
    type Value = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        Tape::constant(self, t)
    }

    fn param(&mut self, t: Tensor) -> Var {
        Tape::param(self, t)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.v(*v)
    }

    fn matmul_t(&mut self, x: &Var, w: &Var) -> Result<Var, ShapeError> {
        let out = kernels::matmul_t(self.v(*x), self.v(*w))?;
        Ok(self.push(out, Op::MatMulT(x.0, w.0)))
    }

    fn add_bias(&mut self, x: &Var, b: &Var) -> Result<Var, ShapeError> {
        let out = kernels::add_bias(self.v(*x), self.v(*b))?;
        Ok(self.push(out, Op::AddBias(x.0, b.0)))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var, ShapeError> {
        let out = kernels::add(self.v(*a), self.v(*b))?;
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var, ShapeError> {
        let out = kernels::sub(self.v(*a), self.v(*b))?;
        Ok(self.push(out, Op::Sub(a.0, b.0)))
    }

    fn hadamard(&mut self, a: &Var, b: &Var) -> Result<Var, ShapeError> {
        let out = kernels::hadamard(self.v(*a), self.v(*b))?;
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    fn scale(&mut self, a: &Var, s: f64) -> Var {
        let out = kernels::scale(self.v(*a), s);
        self.push(out, Op::Scale(a.0, s))
    }

    fn affine(&mut self, a: &Var, alpha: f64, b: &Var, beta: f64) -> Result<Var, ShapeError> {
        let out = kernels::affine(self.v(*a), alpha, self.v(*b), beta)?;
        Ok(self.push(out, Op::Affine(a.0, alpha, b.0, beta)))
    }

    fn tanh(&mut self, a: &Var) -> Var {
        let out = kernels::tanh(self.v(*a));
        self.push(out, Op::Tanh(a.0))
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        let out = kernels::sigmoid(self.v(*a));
        self.push(out, Op::Sigmoid(a.0))
    }

    fn transpose(&mut self, a: &Var) -> Result<Var, ShapeError> {
        let out = kernels::transpose(self.v(*a))?;
        Ok(self.push(out, Op::Transpose(a.0)))
    }

    fn scale_rows(&mut self, a: &Var, factors: &[f64]) -> Result<Var, ShapeError> {
        let out = kernels::scale_rows(self.v(*a), factors)?;
        Ok(self.push(out, Op::ScaleRows(a.0, factors.to_vec())))
    }

    fn outer_rows(&mut self, v: &Var, coeffs: &[f64]) -> Result<Var, ShapeError> {
        let out = kernels::outer_rows(self.v(*v), coeffs)?;
        Ok(self.push(out, Op::OuterRows(v.0, coeffs.to_vec())))
    }

    fn sum(&mut self, a: &Var) -> Var {
        let out = kernels::sum(self.v(*a));
        self.push(out, Op::Sum(a.0))
    }
}
