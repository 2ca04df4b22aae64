//! Simulated stand-ins for the benchmark recordings, with the same layout,
//! length and sample period.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Preset, TimeSeries};
use crate::diffmath::Tensor;

/// Exothermic first-order reaction in a cooled tank.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CstrModel {
    pub q: f64,
    pub volume: f64,
    pub ca0: f64,
    pub t0: f64,
    pub tc0: f64,
    pub k0: f64,
    pub e_over_r: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

impl Default for CstrModel {
    fn default() -> Self {
        Self {
            q: 100.0,
            volume: 100.0,
            ca0: 1.0,
            t0: 350.0,
            tc0: 350.0,
            k0: 7.2e10,
            e_over_r: 1.0e4,
            k1: 1.44e13,
            k2: 0.01,
            k3: 700.0,
        }
    }
}

impl CstrModel {
    /// Time derivative of `(Ca, T)` at coolant flow `qc`.
    pub fn rhs(&self, state: [f64; 2], qc: f64) -> [f64; 2] {
        let [ca, temp] = state;
        let arrhenius = ca * (-self.e_over_r / temp).exp();
        let flow = self.q / self.volume;
        let dca = flow * (self.ca0 - ca) - self.k0 * arrhenius;
        let cooling = self.k2 * qc * (1.0 - (-self.k3 / qc).exp()) * (self.tc0 - temp);
        let dtemp = flow * (self.t0 - temp) + self.k1 * arrhenius + cooling;
        [dca, dtemp]
    }
}

fn rk4<const N: usize>(f: impl Fn([f64; N]) -> [f64; N], y: [f64; N], h: f64) -> [f64; N] {
    let shift = |y: [f64; N], k: [f64; N], s: f64| std::array::from_fn(|i| y[i] + s * k[i]);
    let k1 = f(y);
    let k2 = f(shift(y, k1, h / 2.0));
    let k3 = f(shift(y, k2, h / 2.0));
    let k4 = f(shift(y, k3, h));
    std::array::from_fn(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// Coolant flow held piecewise constant at random levels in `[92, 108]` l/min
/// for 1 to 5 minutes; outputs carry small Gaussian measurement noise.
pub fn cstr(seed: u64) -> TimeSeries {
    let model = CstrModel::default();
    let n = Preset::Cstr.rows();
    let period = Preset::Cstr.period();
    let substeps = 20;
    let h = period / substeps as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_ca = Normal::new(0.0, 3e-4).expect("positive sigma");
    let noise_t = Normal::new(0.0, 0.05).expect("positive sigma");

    let mut state = [0.088, 441.2];
    let mut qc = 100.0;
    for _ in 0..200 * substeps {
        state = rk4(|s| model.rhs(s, qc), state, h);
    }

    let mut hold = 0usize;
    let (mut t, mut x, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(2 * n));
    for i in 0..n {
        if hold == 0 {
            qc = rng.gen_range(92.0..108.0);
            hold = rng.gen_range(10..=50);
        }
        hold -= 1;
        t.push(i as f64 * period);
        x.push(qc);
        y.push(state[0] + noise_ca.sample(&mut rng));
        y.push(state[1] + noise_t.sample(&mut rng));
        for _ in 0..substeps {
            state = rk4(|s| model.rhs(s, qc), state, h);
        }
    }
    TimeSeries::new(t, Tensor::matrix(n, 1, x).expect("n×1"), Tensor::matrix(n, 2, y).expect("n×2"))
        .expect("uniform grid")
}

/// Sum of sinusoids with random phases.
#[derive(Clone, Debug)]
struct Multisine {
    terms: Vec<(f64, f64, f64)>,
}

impl Multisine {
    fn new(rng: &mut ChaCha8Rng, count: usize, f_lo: f64, f_hi: f64, amplitude: f64) -> Self {
        let terms = (0..count)
            .map(|_| {
                let f = f_lo * (f_hi / f_lo).powf(rng.gen::<f64>());
                (amplitude / count as f64 * 2.0, f, rng.gen_range(0.0..TAU))
            })
            .collect();
        Self { terms }
    }

    fn at(&self, t: f64) -> f64 {
        self.terms.iter().map(|&(a, f, phi)| a * (TAU * f * t + phi).sin()).sum()
    }
}

/// Three-reel web transport: reel speeds and two motor currents drive the
/// tensions of the two web spans through first-order elastic dynamics with
/// speed-dependent damping.
pub fn winding(seed: u64) -> TimeSeries {
    let n = Preset::Winding.rows();
    let period = Preset::Winding.period();
    let substeps = 10;
    let h = period / substeps as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let line = Multisine::new(&mut rng, 4, 0.005, 0.05, 0.3);
    let reels: Vec<Multisine> = (0..3).map(|_| Multisine::new(&mut rng, 5, 0.05, 0.8, 0.08)).collect();
    let currents: Vec<Multisine> = (0..2).map(|_| Multisine::new(&mut rng, 5, 0.02, 0.5, 0.5)).collect();
    let noise = Normal::new(0.0, 0.01).expect("positive sigma");

    let inputs = |t: f64| -> [f64; 5] {
        let s = 1.0 + line.at(t);
        [s + reels[0].at(t), s + reels[1].at(t), s + reels[2].at(t), 1.0 + currents[0].at(t), 1.0 + currents[1].at(t)]
    };
    let rhs = |t: f64, tension: [f64; 2]| -> [f64; 2] {
        let u = inputs(t);
        let damping = 1.5 * (1.0 + 0.5 * u[1] * u[1]);
        [
            5.0 * (u[1] - u[0]) + 0.6 * (2.0 * (u[3] - 1.0)).tanh() - damping * tension[0],
            5.0 * (u[2] - u[1]) + 0.6 * (2.0 * (u[4] - 1.0)).tanh() - damping * tension[1] + 0.5 * tension[0],
        ]
    };
    // RK4 with time-varying inputs evaluated at the stage times.
    let step = |t0: f64, y: [f64; 2]| -> [f64; 2] {
        let k1 = rhs(t0, y);
        let k2 = rhs(t0 + h / 2.0, [y[0] + h / 2.0 * k1[0], y[1] + h / 2.0 * k1[1]]);
        let k3 = rhs(t0 + h / 2.0, [y[0] + h / 2.0 * k2[0], y[1] + h / 2.0 * k2[1]]);
        let k4 = rhs(t0 + h, [y[0] + h * k3[0], y[1] + h * k3[1]]);
        std::array::from_fn(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
    };

    let warmup = 10.0;
    let mut tension = [0.0, 0.0];
    let mut clock = -warmup;
    while clock < -h / 2.0 {
        tension = step(clock, tension);
        clock += h;
    }

    let (mut t, mut x, mut y) = (Vec::with_capacity(n), Vec::with_capacity(5 * n), Vec::with_capacity(2 * n));
    for i in 0..n {
        let ti = i as f64 * period;
        t.push(ti);
        x.extend_from_slice(&inputs(ti));
        y.push(tension[0] + noise.sample(&mut rng));
        y.push(tension[1] + noise.sample(&mut rng));
        for j in 0..substeps {
            tension = step(ti + j as f64 * h, tension);
        }
    }
    TimeSeries::new(t, Tensor::matrix(n, 5, x).expect("n×5"), Tensor::matrix(n, 2, y).expect("n×2"))
        .expect("uniform grid")
}

/// Simulated series for a preset.
pub fn simulate(preset: Preset, seed: u64) -> TimeSeries {
    match preset {
        Preset::Cstr => cstr(seed),
        Preset::Winding => winding(seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cstr_steady_state() {
        let m = CstrModel::default();
        let mut s = [0.1, 438.5];
        for _ in 0..20_000 {
            s = rk4(|y| m.rhs(y, 103.41), s, 0.005);
        }
        assert!((s[0] - 0.1).abs() < 1e-3, "{s:?}");
        assert!((s[1] - 438.54).abs() < 0.1, "{s:?}");
    }

    #[test]
    fn cstr_layout_and_range() {
        let s = cstr(0);
        assert_eq!(s.len(), 7500);
        assert_eq!((s.input_channels(), s.output_channels()), (1, 2));
        assert!((s.t()[1] - 0.1).abs() < 1e-15);
        for r in 0..s.len() {
            let [ca, temp] = [s.y().get(r, 0), s.y().get(r, 1)];
            assert!(ca > 0.03 && ca < 0.2 && temp > 420.0 && temp < 460.0, "row {r}: {ca} {temp}");
        }
        assert_eq!(cstr(0), s);
        assert_ne!(cstr(1), s);
    }

    #[test]
    fn winding_layout_and_range() {
        let s = winding(0);
        assert_eq!(s.len(), 2500);
        assert_eq!((s.input_channels(), s.output_channels()), (5, 2));
        assert!(s.y().is_finite() && s.x().is_finite());
        let std = |c: usize| {
            let v: Vec<f64> = (0..s.len()).map(|r| s.y().get(r, c)).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        assert!(std(0) > 0.05 && std(1) > 0.05, "{} {}", std(0), std(1));
        assert_eq!(winding(3), winding(3));
    }
}
