//! Slope functions, Butcher tableaus and explicit Runge-Kutta stepping over
//! unevenly spaced samples.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::cells::{embed_input, BoundCell, BoundModel};
use crate::diffmath::{kernels, Ops, ShapeError, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    #[error("step size must be positive, got {0}")]
    NonPositiveDelta(f64),
    #[error("mean step size must be positive, got {0}")]
    NonPositiveMeanDelta(f64),
    #[error("{0}")]
    Shape(#[from] ShapeError),
}

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => {
                        let known: Vec<&str> = vec![$($text),+];
                        Err(format!(
                            "unknown {} `{other}` (expected {})",
                            stringify!($name).to_lowercase(),
                            known.join("|")
                        ))
                    }
                }
            }
        }
    };
}

named_enum!(
    /// Explicit Runge-Kutta method.
    Scheme {
        Euler => "euler",
        Midpoint => "midpoint",
        Kutta3 => "kutta3",
        Rk4 => "rk4",
    }
);

named_enum!(
    /// How the cell output becomes a slope.
    Formulation {
        Stationary => "stationary",
        NonStationary => "non-stationary",
        IgnoreTime => "ignore-time",
    }
);

named_enum!(
    /// Input values at intermediate stage times.
    Interpolation {
        Constant => "constant",
        Linear => "linear",
    }
);

/// Coefficients of an explicit Runge-Kutta method.
#[derive(Clone, Debug, PartialEq)]
pub struct ButcherTableau {
    pub c: Vec<f64>,
    pub b: Vec<f64>,
    /// Strictly lower triangular, `s × s`.
    pub a: Vec<Vec<f64>>,
    pub order: usize,
}

impl ButcherTableau {
    pub fn stages(&self) -> usize {
        self.b.len()
    }
}

pub fn tableau(scheme: Scheme) -> ButcherTableau {
    match scheme {
        Scheme::Euler => ButcherTableau { c: vec![0.0], b: vec![1.0], a: vec![vec![0.0]], order: 1 },
        Scheme::Midpoint => ButcherTableau {
            c: vec![0.0, 0.5],
            b: vec![0.0, 1.0],
            a: vec![vec![0.0, 0.0], vec![0.5, 0.0]],
            order: 2,
        },
        Scheme::Kutta3 => ButcherTableau {
            c: vec![0.0, 0.5, 1.0],
            b: vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
            a: vec![vec![0.0, 0.0, 0.0], vec![0.5, 0.0, 0.0], vec![-1.0, 2.0, 0.0]],
            order: 3,
        },
        Scheme::Rk4 => ButcherTableau {
            c: vec![0.0, 0.5, 0.5, 1.0],
            b: vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            a: vec![
                vec![0.0, 0.0, 0.0, 0.0],
                vec![0.5, 0.0, 0.0, 0.0],
                vec![0.0, 0.5, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
            ],
            order: 4,
        },
    }
}

pub fn tableau_by_name(name: &str) -> Result<ButcherTableau, String> {
    name.parse::<Scheme>().map(tableau)
}

/// Everything needed to advance the state over one sample interval.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSpec {
    pub tableau: ButcherTableau,
    pub formulation: Formulation,
    pub interpolation: Interpolation,
    /// Mean training step size, in dataset time units.
    pub mu_delta: f64,
}

impl StepSpec {
    pub fn new(
        scheme: Scheme,
        formulation: Formulation,
        interpolation: Interpolation,
        mu_delta: f64,
    ) -> Result<Self, StepError> {
        if !(mu_delta > 0.0) || !mu_delta.is_finite() {
            return Err(StepError::NonPositiveMeanDelta(mu_delta));
        }
        Ok(Self { tableau: tableau(scheme), formulation, interpolation, mu_delta })
    }
}

/// Slope `F(x, h)` for an already embedded input `x`.
///
/// Stationary (and ignore-time): `(ε·f(x,h) − h)/μ_δ`; non-stationary:
/// `(ε/μ_δ)·f(x,h)`. GRU cells use `ε = 1`.
pub fn slope<G: Ops>(
    g: &mut G,
    formulation: Formulation,
    cell: &BoundCell<G::Value>,
    x: &G::Value,
    h: &G::Value,
    mu_delta: f64,
) -> Result<G::Value, ShapeError> {
    let f = cell.apply(g, x, h)?;
    let epsilon = match cell {
        BoundCell::Gru(_) => 1.0,
        BoundCell::Asrnn(p) => p.epsilon,
    };
    let inv_mu = 1.0 / mu_delta;
    Ok(match formulation {
        Formulation::Stationary | Formulation::IgnoreTime => {
            let num = if epsilon == 1.0 { g.sub(&f, h)? } else { g.affine(&f, epsilon, h, -1.0)? };
            g.scale(&num, inv_mu)
        }
        Formulation::NonStationary => g.scale(&f, epsilon * inv_mu),
    })
}

/// Input at stage time `t_n + c·δ_n`.
pub fn interpolate_input(x_n: &Tensor, x_next: &Tensor, c: f64, mode: Interpolation) -> Tensor {
    match mode {
        Interpolation::Constant => x_n.clone(),
        Interpolation::Linear if c == 0.0 => x_n.clone(),
        Interpolation::Linear => {
            kernels::affine(x_n, 1.0 - c, x_next, c).expect("consecutive inputs share a shape")
        }
    }
}

fn combine<G: Ops>(g: &mut G, terms: &[(f64, &G::Value)]) -> Result<Option<G::Value>, ShapeError> {
    let mut acc: Option<G::Value> = None;
    for &(coef, v) in terms.iter().filter(|(c, _)| *c != 0.0) {
        acc = Some(match acc {
            None if coef == 1.0 => v.clone(),
            None => g.scale(v, coef),
            Some(a) => g.affine(&a, 1.0, v, coef)?,
        });
    }
    Ok(acc)
}

/// One explicit Runge-Kutta step with a caller-supplied slope.
///
/// `slope(g, c, x, h)` receives the stage time fraction `c` (0 for constant
/// interpolation) and the interpolated raw input. `deltas` holds one step size
/// per row of `h`.
#[allow(clippy::too_many_arguments)]
pub fn rk_step_with<G, F>(
    g: &mut G,
    tableau: &ButcherTableau,
    interpolation: Interpolation,
    x_n: &Tensor,
    x_next: &Tensor,
    deltas: &[f64],
    h: &G::Value,
    mut slope: F,
) -> Result<G::Value, StepError>
where
    G: Ops,
    F: FnMut(&mut G, f64, &Tensor, &G::Value) -> Result<G::Value, ShapeError>,
{
    if let Some(&d) = deltas.iter().find(|d| !(**d > 0.0)) {
        return Err(StepError::NonPositiveDelta(d));
    }
    let mut ks: Vec<G::Value> = Vec::with_capacity(tableau.stages());
    for (i, &c) in tableau.c.iter().enumerate() {
        let c = match interpolation {
            Interpolation::Constant => 0.0,
            Interpolation::Linear => c,
        };
        let x = interpolate_input(x_n, x_next, c, interpolation);
        let terms: Vec<(f64, &G::Value)> = tableau.a[i][..i].iter().copied().zip(&ks).collect();
        let stage_h = match combine(g, &terms)? {
            None => h.clone(),
            Some(sum) => {
                let incr = g.scale_rows(&sum, deltas)?;
                g.add(h, &incr)?
            }
        };
        let k = slope(g, c, &x, &stage_h)?;
        ks.push(k);
    }
    let terms: Vec<(f64, &G::Value)> = tableau.b.iter().copied().zip(&ks).collect();
    let sum = combine(g, &terms)?.expect("weights sum to one");
    let incr = g.scale_rows(&sum, deltas)?;
    Ok(g.add(h, &incr)?)
}

/// Advances the model state from `t_n` to `t_{n+1}`.
///
/// Raw inputs are interpolated at each stage time and then embedded. The
/// ignore-time formulation replaces every `δ_n` with `μ_δ` before stepping.
pub fn rk_step<G: Ops>(
    g: &mut G,
    spec: &StepSpec,
    model: &BoundModel<G::Value>,
    x_raw_n: &Tensor,
    x_raw_next: &Tensor,
    deltas: &[f64],
    h: &G::Value,
) -> Result<G::Value, StepError> {
    let substituted;
    let deltas = if spec.formulation == Formulation::IgnoreTime {
        substituted = vec![spec.mu_delta; deltas.len()];
        &substituted[..]
    } else {
        deltas
    };
    // Stages sharing a time fraction share one embedded input.
    let mut embedded: Vec<(f64, G::Value)> = Vec::with_capacity(4);
    rk_step_with(g, &spec.tableau, spec.interpolation, x_raw_n, x_raw_next, deltas, h, |g, c, x, hs| {
        let xe = match embedded.iter().find(|(ce, _)| *ce == c) {
            Some((_, v)) => v.clone(),
            None => {
                let xc = g.constant(x.clone());
                let v = embed_input(g, &xc, &model.embed)?;
                embedded.push((c, v.clone()));
                v
            }
        };
        slope(g, spec.formulation, &model.cell, &xe, hs, spec.mu_delta)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{init_params, zero_params, CellKind, ModelDims};
    use crate::diffmath::Eval;

    fn decay(g: &mut Eval, _c: f64, _x: &Tensor, h: &Tensor) -> Result<Tensor, ShapeError> {
        Ok(g.scale(h, -1.0))
    }

    #[test]
    fn table_coefficients() {
        assert_eq!(tableau(Scheme::Euler).b, vec![1.0]);
        let k3 = tableau(Scheme::Kutta3);
        assert_eq!(k3.a[2][0], -1.0);
        assert_eq!(k3.a[2][1], 2.0);
        assert_eq!(tableau(Scheme::Rk4).b, vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0]);
        assert!(tableau_by_name("heun").is_err());
        assert_eq!(tableau_by_name("midpoint").unwrap().order, 2);
    }

    #[test]
    fn tableau_sanity_and_order_conditions() {
        for &s in Scheme::ALL {
            let t = tableau(s);
            let n = t.stages();
            assert_eq!(t.order, n);
            assert!((t.b.iter().sum::<f64>() - 1.0).abs() <= 1e-15, "{s}");
            assert_eq!(t.c[0], 0.0);
            for i in 0..n {
                assert!(t.a[i][i..].iter().all(|v| *v == 0.0), "{s} not explicit");
                let row: f64 = t.a[i].iter().sum();
                assert!((row - t.c[i]).abs() <= 1e-15);
            }
            if t.order >= 2 {
                let v: f64 = t.b.iter().zip(&t.c).map(|(b, c)| b * c).sum();
                assert!((v - 0.5).abs() <= 1e-15, "{s}");
            }
            if t.order >= 3 {
                let v: f64 = t.b.iter().zip(&t.c).map(|(b, c)| b * c * c).sum();
                assert!((v - 1.0 / 3.0).abs() <= 1e-15, "{s}");
                let mut w = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        w += t.b[i] * t.a[i][j] * t.c[j];
                    }
                }
                assert!((w - 1.0 / 6.0).abs() <= 1e-15, "{s}");
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for &s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert_eq!("non-stationary".parse::<Formulation>().unwrap(), Formulation::NonStationary);
        assert_eq!("ignore-time".parse::<Formulation>().unwrap(), Formulation::IgnoreTime);
        assert_eq!("linear".parse::<Interpolation>().unwrap(), Interpolation::Linear);
        let err = "cubic".parse::<Interpolation>().unwrap_err();
        assert!(err.contains("constant|linear"), "{err}");
    }

    #[test]
    fn interpolation_endpoints() {
        let a = Tensor::vector(vec![0.0, 3.0]);
        let b = Tensor::vector(vec![2.0, -1.0]);
        assert_eq!(interpolate_input(&a, &b, 0.0, Interpolation::Linear), a);
        assert_eq!(interpolate_input(&a, &b, 1.0, Interpolation::Linear), b);
        assert_eq!(interpolate_input(&a, &b, 0.5, Interpolation::Linear).data(), &[1.0, 1.0]);
        assert_eq!(interpolate_input(&a, &b, 0.5, Interpolation::Constant), a);
    }

    #[test]
    fn slope_cases() {
        let mut e = Eval;
        let d = ModelDims { input: 1, state: 1, output: 1 };
        // Zero GRU: f = 0.5 h.
        let m = zero_params(d, CellKind::Gru, 1.0, 1.0).bind(&mut e);
        let s = slope(&mut e, Formulation::Stationary, &m.cell, &Tensor::zeros(&[1]), &Tensor::vector(vec![0.4]), 0.2)
            .unwrap();
        assert!((s.item() - -1.0).abs() < 1e-15);
        // Zero ASRNN with γ = 0: f = 0.
        let m = zero_params(d, CellKind::Asrnn, 0.0, 1.0).bind(&mut e);
        let s = slope(&mut e, Formulation::NonStationary, &m.cell, &Tensor::zeros(&[1]), &Tensor::vector(vec![0.4]), 0.2)
            .unwrap();
        assert_eq!(s.item(), 0.0);
        // f == h gives a fixed point: ASRNN with ε chosen so ε·f = h.
        let h = Tensor::vector(vec![0.3]);
        let mut p = zero_params(d, CellKind::Asrnn, 0.0, 1.0);
        if let crate::cells::CellParams::Asrnn(a) = &mut p.cell {
            a.b_h = Tensor::vector(vec![2.0]);
            a.b_z = Tensor::vector(vec![3.0]);
            let f = crate::diffmath::kernels::sigmoid_scalar(3.0) * 2.0f64.tanh();
            a.epsilon = 0.3 / f;
        }
        let m = p.bind(&mut e);
        let s = slope(&mut e, Formulation::Stationary, &m.cell, &Tensor::zeros(&[1]), &h, 0.1).unwrap();
        assert!(s.item().abs() < 1e-14);
    }

    #[test]
    fn decay_euler_and_rk4() {
        let mut e = Eval;
        let x = Tensor::zeros(&[1]);
        let h = Tensor::vector(vec![1.0]);
        let out = rk_step_with(&mut e, &tableau(Scheme::Euler), Interpolation::Constant, &x, &x, &[0.1], &h, decay)
            .unwrap();
        assert!((out.item() - 0.9).abs() < 1e-15);

        // Four hand-evaluated stages for F = −h, δ = 0.1.
        let d = 0.1f64;
        let k1 = -1.0f64;
        let k2 = -(1.0 + d * 0.5 * k1);
        let k3 = -(1.0 + d * 0.5 * k2);
        let k4 = -(1.0 + d * k3);
        let oracle = 1.0 + d * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0;
        assert!((oracle - 0.904_837_5).abs() < 1e-9);
        let out = rk_step_with(&mut e, &tableau(Scheme::Rk4), Interpolation::Linear, &x, &x, &[0.1], &h, decay)
            .unwrap();
        assert!((out.item() - oracle).abs() < 1e-15);
        assert!((out.item() - (-0.1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn non_positive_delta_rejected() {
        let mut e = Eval;
        let x = Tensor::zeros(&[1]);
        let h = Tensor::vector(vec![1.0]);
        for d in [0.0, -0.1, f64::NAN] {
            let r = rk_step_with(&mut e, &tableau(Scheme::Rk4), Interpolation::Constant, &x, &x, &[d], &h, decay);
            assert!(matches!(r, Err(StepError::NonPositiveDelta(_))));
        }
        assert!(StepSpec::new(Scheme::Euler, Formulation::Stationary, Interpolation::Constant, 0.0).is_err());
    }

    #[test]
    fn convergence_orders() {
        for &s in Scheme::ALL {
            let p = crate::verify::fitted_order(s);
            let want = tableau(s).order as f64;
            assert!((p - want).abs() <= 0.25, "{s}: fitted {p}");
        }
    }

    #[test]
    fn stationary_euler_at_mean_step_is_the_bare_cell() {
        let d = ModelDims { input: 2, state: 5, output: 1 };
        let p = init_params(9, d, CellKind::Gru, 1.0, 1.0);
        let mut e = Eval;
        let m = p.bind(&mut e);
        let mu = 0.1;
        let spec = StepSpec::new(Scheme::Euler, Formulation::Stationary, Interpolation::Constant, mu).unwrap();
        let x = Tensor::vector(vec![0.3, -1.2]);
        let h = Tensor::vector(vec![0.1, -0.4, 0.2, 0.0, 0.7]);
        let stepped = rk_step(&mut e, &spec, &m, &x, &x, &[mu], &h).unwrap();
        let xe = embed_input(&mut e, &x, &m.embed).unwrap();
        let bare = m.cell.apply(&mut e, &xe, &h).unwrap();
        assert!(stepped.max_abs_diff(&bare) <= 1e-15);
    }

    #[test]
    fn ignore_time_uses_mean_step() {
        let d = ModelDims { input: 1, state: 3, output: 1 };
        let p = init_params(2, d, CellKind::Gru, 1.0, 1.0);
        let mut e = Eval;
        let m = p.bind(&mut e);
        let x = Tensor::vector(vec![0.5]);
        let h = Tensor::vector(vec![0.1, 0.2, -0.3]);
        let ignore = StepSpec::new(Scheme::Rk4, Formulation::IgnoreTime, Interpolation::Constant, 0.2).unwrap();
        let stat = StepSpec { formulation: Formulation::Stationary, ..ignore.clone() };
        let a = rk_step(&mut e, &ignore, &m, &x, &x, &[0.7], &h).unwrap();
        let b = rk_step(&mut e, &stat, &m, &x, &x, &[0.2], &h).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_asrnn_from_zero_state_stays_put() {
        let d = ModelDims { input: 1, state: 2, output: 1 };
        let p = zero_params(d, CellKind::Asrnn, 1.0, 1.0);
        let mut e = Eval;
        let m = p.bind(&mut e);
        let spec = StepSpec::new(Scheme::Rk4, Formulation::Stationary, Interpolation::Linear, 0.1).unwrap();
        let h = Tensor::zeros(&[2]);
        let out = rk_step(&mut e, &spec, &m, &Tensor::vector(vec![1.0]), &Tensor::vector(vec![3.0]), &[0.3], &h)
            .unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn batched_rows_step_independently() {
        let d = ModelDims { input: 2, state: 3, output: 1 };
        let p = init_params(5, d, CellKind::Asrnn, 0.5, 1.0);
        let mut e = Eval;
        let m = p.bind(&mut e);
        let spec = StepSpec::new(Scheme::Kutta3, Formulation::Stationary, Interpolation::Linear, 0.2).unwrap();
        let xn = Tensor::from_rows(&[[0.1, 0.2], [-0.5, 0.9]]).unwrap();
        let xm = Tensor::from_rows(&[[0.3, -0.2], [0.5, 0.1]]).unwrap();
        let h = Tensor::from_rows(&[[0.1, 0.2, 0.3], [-0.3, 0.0, 0.4]]).unwrap();
        let deltas = [0.1, 0.5];
        let batched = rk_step(&mut e, &spec, &m, &xn, &xm, &deltas, &h).unwrap();
        for r in 0..2 {
            let single = rk_step(
                &mut e,
                &spec,
                &m,
                &Tensor::vector(xn.row(r).to_vec()),
                &Tensor::vector(xm.row(r).to_vec()),
                &deltas[r..=r],
                &Tensor::vector(h.row(r).to_vec()),
            )
            .unwrap();
            for (a, b) in batched.row(r).iter().zip(single.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
