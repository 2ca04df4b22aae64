//! Self-checks: analytic gradients against central finite differences and
//! Runge-Kutta convergence orders on `dh/dt = −h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::{
    asrnn_coupling, embed_input, init_params, output_map, BoundAsrnn, BoundEmbed, BoundGru, BoundOutput, CellKind,
    ModelDims, ModelParams,
};
use crate::diffmath::{finite_difference_gradient, max_relative_error, Eval, Ops, ShapeError, Tape, Tensor};
use crate::integrators::{rk_step, rk_step_with, tableau, Formulation, Interpolation, Scheme, StepError, StepSpec};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const ORDER_TOLERANCE: f64 = 0.25;
const FD_STEP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_relative_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= GRADIENT_TOLERANCE
    }
}

/// A differentiable function of a list of tensors.
trait Probe {
    fn inputs(&self) -> Vec<Tensor>;
    /// Output plus the leaves registered for `tensors`, in order.
    fn eval<G: Ops>(&self, g: &mut G, tensors: &[Tensor]) -> Result<(G::Value, Vec<G::Value>), StepError>;
}

fn readout<G: Ops>(g: &mut G, out: &G::Value) -> Result<G::Value, ShapeError> {
    let n = g.value(out).len();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + (i as f64 * 0.618).fract()).collect();
    let w = g.constant(g.value(out).with_data(w));
    let sq = g.hadamard(out, out)?;
    let p = g.hadamard(&sq, &w)?;
    let s = g.sum(&p);
    let lin = g.hadamard(out, &w)?;
    let l = g.sum(&lin);
    g.add(&s, &l)
}

fn run<P: Probe>(name: String, probe: &P) -> Result<GradCheck, StepError> {
    let inputs = probe.inputs();
    let mut tape = Tape::new();
    let (out, leaves) = probe.eval(&mut tape, &inputs)?;
    let loss = readout(&mut tape, &out)?;
    let grads = tape.backward(loss).expect("scalar readout");
    let analytic: Vec<f64> = leaves.iter().flat_map(|v| grads.get(*v).expect("trainable leaf").data().to_vec()).collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = finite_difference_gradient(
        |v| {
            let mut off = 0;
            let ts: Vec<Tensor> = inputs
                .iter()
                .map(|t| {
                    let n = t.len();
                    off += n;
                    t.with_data(v[off - n..off].to_vec())
                })
                .collect();
            let mut e = Eval;
            let (out, _) = probe.eval(&mut e, &ts).expect("same shapes as the analytic pass");
            readout(&mut e, &out).expect("same shapes").item()
        },
        &flat,
        FD_STEP,
    )
    .expect("positive step");
    Ok(GradCheck { name, max_relative_error: max_relative_error(&analytic, &numeric) })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("sized")
}

struct EmbedProbe(Vec<Tensor>);

impl Probe for EmbedProbe {
    fn inputs(&self) -> Vec<Tensor> {
        self.0.clone()
    }

    fn eval<G: Ops>(&self, g: &mut G, t: &[Tensor]) -> Result<(G::Value, Vec<G::Value>), StepError> {
        let leaves: Vec<G::Value> = t.iter().map(|x| g.param(x.clone())).collect();
        let p = BoundEmbed { w: leaves[0].clone(), b: leaves[1].clone() };
        Ok((embed_input(g, &leaves[2], &p)?, leaves))
    }
}

struct OutputProbe(Vec<Tensor>);

impl Probe for OutputProbe {
    fn inputs(&self) -> Vec<Tensor> {
        self.0.clone()
    }

    fn eval<G: Ops>(&self, g: &mut G, t: &[Tensor]) -> Result<(G::Value, Vec<G::Value>), StepError> {
        let leaves: Vec<G::Value> = t.iter().map(|x| g.param(x.clone())).collect();
        let p = BoundOutput { w: leaves[0].clone(), b: leaves[1].clone() };
        Ok((output_map(g, &leaves[2], &p)?, leaves))
    }
}

/// Cell parameters followed by an embedded input and a state.
struct CellProbe {
    kind: CellKind,
    tensors: Vec<Tensor>,
    gamma: f64,
    epsilon: f64,
}

impl Probe for CellProbe {
    fn inputs(&self) -> Vec<Tensor> {
        self.tensors.clone()
    }

    fn eval<G: Ops>(&self, g: &mut G, t: &[Tensor]) -> Result<(G::Value, Vec<G::Value>), StepError> {
        let l: Vec<G::Value> = t.iter().map(|x| g.param(x.clone())).collect();
        let n = l.len();
        let (x, h) = (&l[n - 2], &l[n - 1]);
        let out = match self.kind {
            CellKind::Gru => {
                let p = BoundGru {
                    w_h: l[0].clone(),
                    w_z: l[1].clone(),
                    w_r: l[2].clone(),
                    u_h: l[3].clone(),
                    u_z: l[4].clone(),
                    u_r: l[5].clone(),
                    b_h: l[6].clone(),
                    b_z: l[7].clone(),
                    b_r: l[8].clone(),
                };
                crate::cells::gru_cell(g, x, h, &p)?
            }
            CellKind::Asrnn => {
                let a = asrnn_coupling(g, &l[2], self.gamma)?;
                let p = BoundAsrnn {
                    w_h: l[0].clone(),
                    w_z: l[1].clone(),
                    a,
                    b_h: l[3].clone(),
                    b_z: l[4].clone(),
                    epsilon: self.epsilon,
                };
                crate::cells::asrnn_cell(g, x, h, &p)?
            }
        };
        Ok((out, l))
    }
}

/// Three steps of `rk_step` on uneven intervals, outputs of every step stacked.
struct RolloutProbe {
    template: ModelParams,
    spec: StepSpec,
    xs: Vec<Tensor>,
    deltas: [f64; 3],
}

impl Probe for RolloutProbe {
    fn inputs(&self) -> Vec<Tensor> {
        self.template.named_tensors().into_iter().map(|(_, t)| t.clone()).collect()
    }

    fn eval<G: Ops>(&self, g: &mut G, t: &[Tensor]) -> Result<(G::Value, Vec<G::Value>), StepError> {
        let mut p = self.template.clone();
        for (dst, src) in p.tensors_mut().into_iter().zip(t) {
            *dst = src.clone();
        }
        let model = p.bind(g);
        let mut h = model.h0.clone();
        let mut total: Option<G::Value> = None;
        for (n, d) in self.deltas.iter().enumerate() {
            h = rk_step(g, &self.spec, &model, &self.xs[n], &self.xs[n + 1], &[*d], &h)?;
            let y = output_map(g, &h, &model.out)?;
            let y = g.scale(&y, 1.0 + n as f64);
            total = Some(match total {
                None => y,
                Some(acc) => g.add(&acc, &y)?,
            });
        }
        Ok((total.expect("three steps"), model.leaves))
    }
}

/// Gradient checks for every building block and for short rollouts of both
/// cells under every scheme and formulation.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheck>, StepError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k_in, k_h, k_out) = (3, 4, 2);
    let mut out = Vec::new();

    let embed = EmbedProbe(vec![
        random(&mut rng, &[k_h, k_in], 0.8),
        random(&mut rng, &[k_h], 0.5),
        random(&mut rng, &[k_in], 1.5),
    ]);
    out.push(run("embed_input".into(), &embed)?);
    let output = OutputProbe(vec![
        random(&mut rng, &[k_out, k_h], 0.8),
        random(&mut rng, &[k_out], 0.5),
        random(&mut rng, &[k_h], 1.0),
    ]);
    out.push(run("output_map".into(), &output)?);

    for kind in [CellKind::Gru, CellKind::Asrnn] {
        let shapes: Vec<Vec<usize>> = match kind {
            CellKind::Gru => [[k_h, k_h]; 6].iter().map(|s| s.to_vec()).chain((0..3).map(|_| vec![k_h])).collect(),
            CellKind::Asrnn => vec![vec![k_h, k_h], vec![k_h, k_h], vec![k_h, k_h], vec![k_h], vec![k_h]],
        };
        let mut tensors: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s, 0.7)).collect();
        tensors.push(random(&mut rng, &[k_h], 1.0));
        tensors.push(random(&mut rng, &[k_h], 1.0));
        let probe = CellProbe { kind, tensors, gamma: 0.3, epsilon: 0.9 };
        out.push(run(format!("{kind}_cell"), &probe)?);
    }

    let dims = ModelDims { input: k_in, state: k_h, output: k_out };
    let xs: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[k_in], 1.5)).collect();
    let mu = 0.5;
    for kind in [CellKind::Gru, CellKind::Asrnn] {
        let template = init_params(seed + 1, dims, kind, 0.3, 0.9);
        for &scheme in Scheme::ALL {
            for &formulation in Formulation::ALL {
                for &interpolation in Interpolation::ALL {
                    let spec = StepSpec::new(scheme, formulation, interpolation, mu)?;
                    let probe = RolloutProbe {
                        template: template.clone(),
                        spec,
                        xs: xs.clone(),
                        deltas: [0.35, 0.8, 0.5],
                    };
                    let name = format!("rollout {kind} {scheme} {formulation} {interpolation}");
                    out.push(run(name, &probe)?);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderCheck {
    pub scheme: Scheme,
    pub expected: usize,
    pub fitted: f64,
}

impl OrderCheck {
    pub fn passed(&self) -> bool {
        (self.fitted - self.expected as f64).abs() <= ORDER_TOLERANCE
    }
}

/// Least-squares slope of log global error at `t = 1` against log step size
/// for `dh/dt = −h`, `h(0) = 1`, over `δ ∈ {0.2, 0.1, 0.05, 0.025}`.
pub fn fitted_order(scheme: Scheme) -> f64 {
    let t = tableau(scheme);
    let mut e = Eval;
    let x = Tensor::zeros(&[1]);
    let pts: Vec<(f64, f64)> = [0.2f64, 0.1, 0.05, 0.025]
        .iter()
        .map(|&d| {
            let steps = (1.0 / d).round() as usize;
            let mut h = Tensor::vector(vec![1.0]);
            for _ in 0..steps {
                h = rk_step_with(&mut e, &t, Interpolation::Constant, &x, &x, &[d], &h, |g, _, _, h| Ok(g.scale(h, -1.0)))
                    .expect("positive step");
            }
            let err = (h.item() - (-1.0f64).exp()).abs();
            (d.ln(), err.ln())
        })
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn ordercheck_suite() -> Vec<OrderCheck> {
    Scheme::ALL
        .iter()
        .map(|&scheme| OrderCheck { scheme, expected: tableau(scheme).order, fitted: fitted_order(scheme) })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_gradient_check_passes() {
        for seed in 0..6 {
            let checks = gradcheck_suite(seed).unwrap();
            assert_eq!(checks.len(), 4 + 2 * 4 * 3 * 2);
            for c in &checks {
                assert!(c.passed(), "seed {seed} {}: {}", c.name, c.max_relative_error);
            }
        }
    }

    #[test]
    fn orders_match_tableaus() {
        for c in ordercheck_suite() {
            assert!(c.passed(), "{:?}", c);
        }
        let rk4 = ordercheck_suite().into_iter().find(|c| c.scheme == Scheme::Rk4).unwrap();
        assert!((3.75..=4.25).contains(&rk4.fitted));
    }
}
