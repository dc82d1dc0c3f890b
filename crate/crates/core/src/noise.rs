//! Stochastic inputs: the Ornstein-Uhlenbeck field z for additive forcing, the
//! scalar Brownian path B for linear multiplicative forcing, and their stopping times.
//!
//! Each mode of z is a divergence-free complex Gaussian z^(m) = zeta_m m^perp/|m| with
//! d zeta = -|m|^theta zeta dt + g_m dW, advanced with the exact exponential update.
//! One representative of every +/- pair is stored; the mirror mode is the conjugate.

use crate::params::{Schedule, SchemeParams};
use crate::spectral::{holder_seminorm, Grid, VectorField};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("time step {0} must be positive and finite")]
    BadStep(f64),
    #[error("Hoelder exponent parameter delta = {0} must lie in (0, 1/4)")]
    BadDelta(f64),
    #[error("stopping level L = {0} must exceed 1")]
    BadLevel(f64),
}

/// Decay rate of the default noise coefficients beyond the |m|^-(7/4 + 4 sigma) - 1 threshold.
pub const COEFFICIENT_MARGIN: f64 = 0.01;

/// Default coefficient g_m = |m|^-(7/4 + 4 sigma + 1 + margin).
pub fn default_coefficient(m: [i64; 2], sigma: f64) -> f64 {
    let r = ((m[0] * m[0] + m[1] * m[1]) as f64).sqrt();
    r.powf(-(1.75 + 4.0 * sigma + 1.0 + COEFFICIENT_MARGIN))
}

/// Closed-form variance E|zeta(t)|^2 of a mode started from zero.
pub fn ou_variance(g: f64, rate: f64, t: f64) -> f64 {
    g * g * (1.0 - (-2.0 * rate * t).exp()) / (2.0 * rate)
}

/// Standard complex Gaussian with E|xi|^2 = 1.
fn complex_normal(rng: &mut impl Rng) -> C64 {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    C64::new(a, b) * std::f64::consts::FRAC_1_SQRT_2
}

/// Generator for one realization; realizations share the seed and differ in the stream.
pub fn realization_rng(seed: u64, realization: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(realization);
    rng
}

/// Sampling settings of the Ornstein-Uhlenbeck field.
#[derive(Debug, Clone, Serialize)]
pub struct OuSpec {
    /// Modes with 0 < |m| <= radius are sampled.
    pub radius: f64,
    pub dt: f64,
    pub steps: usize,
    /// Overall factor multiplying every g_m.
    pub amplitude: f64,
    pub sigma: f64,
}

/// Sampled path of z on the grid t_i = i dt, i = 0..=steps; z vanishes for t <= 0.
#[derive(Debug, Clone)]
pub struct OuPath {
    pub modes: Vec<[i64; 2]>,
    pub rates: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub dt: f64,
    pub seed: u64,
    /// Standardised innovations, one row per step.
    pub innovations: Vec<Vec<C64>>,
    /// Mode amplitudes zeta_m(t_i), one row per time.
    pub samples: Vec<Vec<C64>>,
}

/// Half-plane representatives with 0 < |m| <= radius, in a fixed order.
pub fn half_plane_modes(radius: f64) -> Vec<[i64; 2]> {
    let r = radius.floor() as i64;
    let mut out = Vec::new();
    for m1 in 0..=r {
        for m2 in -r..=r {
            let half = m1 > 0 || m2 > 0;
            if half && ((m1 * m1 + m2 * m2) as f64) <= radius * radius {
                out.push([m1, m2]);
            }
        }
    }
    out
}

impl OuPath {
    pub fn sample(spec: &OuSpec, seed: u64, realization: u64) -> Result<Self, NoiseError> {
        let mut rng = realization_rng(seed, realization);
        let modes = half_plane_modes(spec.radius);
        let count = modes.len();
        let mut innovations = Vec::with_capacity(spec.steps);
        for _ in 0..spec.steps {
            innovations.push((0..count).map(|_| complex_normal(&mut rng)).collect());
        }
        Self::from_innovations(spec, modes, seed, innovations)
    }

    /// Rebuild a path from stored innovations.
    pub fn from_innovations(
        spec: &OuSpec,
        modes: Vec<[i64; 2]>,
        seed: u64,
        innovations: Vec<Vec<C64>>,
    ) -> Result<Self, NoiseError> {
        if !(spec.dt > 0.0 && spec.dt.is_finite()) {
            return Err(NoiseError::BadStep(spec.dt));
        }
        let theta = 1.5 - 2.0 * spec.sigma;
        let rates: Vec<f64> =
            modes.iter().map(|m| ((m[0] * m[0] + m[1] * m[1]) as f64).powf(0.5 * theta)).collect();
        let coefficients: Vec<f64> =
            modes.iter().map(|&m| spec.amplitude * default_coefficient(m, spec.sigma)).collect();
        let decay: Vec<f64> = rates.iter().map(|r| (-r * spec.dt).exp()).collect();
        let spread: Vec<f64> =
            rates.iter().zip(&coefficients).map(|(&r, &g)| ou_variance(g, r, spec.dt).sqrt()).collect();
        let mut samples = Vec::with_capacity(innovations.len() + 1);
        let mut cur = vec![C64::new(0.0, 0.0); modes.len()];
        samples.push(cur.clone());
        for row in &innovations {
            for (k, z) in cur.iter_mut().enumerate() {
                *z = *z * decay[k] + row[k] * spread[k];
            }
            samples.push(cur.clone());
        }
        Ok(Self { modes, rates, coefficients, dt: spec.dt, seed, innovations, samples })
    }

    /// A path that is identically zero.
    pub fn zero(spec: &OuSpec) -> Self {
        let modes = half_plane_modes(spec.radius);
        let innovations = vec![vec![C64::new(0.0, 0.0); modes.len()]; spec.steps];
        Self::from_innovations(spec, modes, 0, innovations).expect("valid step")
    }

    pub fn times(&self) -> usize {
        self.samples.len()
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn is_zero(&self) -> bool {
        self.samples.iter().flatten().all(|z| z.norm_sqr() == 0.0)
    }

    /// Index of the last sample at or before t, or None for t < 0.
    pub fn index_at(&self, t: f64) -> Option<usize> {
        if t < 0.0 {
            return None;
        }
        Some(((t / self.dt + 1e-9).floor() as usize).min(self.samples.len() - 1))
    }

    /// |z(t_i)|_{H^s} from the mode amplitudes.
    pub fn sobolev_norm(&self, i: usize, s: f64) -> f64 {
        self.norm_of(&self.samples[i], s, f64::INFINITY)
    }

    /// |z_cut(t)|_{H^s} with modes beyond `cutoff` dropped; zero for t < 0.
    pub fn norm_at(&self, t: f64, s: f64, cutoff: f64) -> f64 {
        self.index_at(t).map_or(0.0, |i| self.norm_of(&self.samples[i], s, cutoff))
    }

    fn norm_of(&self, amps: &[C64], s: f64, cutoff: f64) -> f64 {
        let mut acc = 0.0;
        for (m, z) in self.modes.iter().zip(amps) {
            let r2 = (m[0] * m[0] + m[1] * m[1]) as f64;
            if r2 <= cutoff * cutoff {
                acc += r2.powf(s) * z.norm_sqr();
            }
        }
        2.0 * PI * (2.0 * acc).sqrt()
    }

    fn difference_norm(&self, i: usize, j: usize, s: f64) -> f64 {
        let d: Vec<C64> = self.samples[i].iter().zip(&self.samples[j]).map(|(a, b)| a - b).collect();
        self.norm_of(&d, s, f64::INFINITY)
    }

    /// Field built from arbitrary mode amplitudes, keeping |m| <= cutoff.
    pub fn field_from(&self, grid: &Arc<Grid>, amps: &[C64], cutoff: f64) -> VectorField {
        let mut f = VectorField::zeros(grid);
        for (m, &z) in self.modes.iter().zip(amps) {
            let r2 = (m[0] * m[0] + m[1] * m[1]) as f64;
            if r2 > cutoff * cutoff {
                continue;
            }
            let r = r2.sqrt();
            let dir = [-(m[1] as f64) / r, m[0] as f64 / r];
            if let (Some(i), Some(j)) = (grid.index(*m), grid.index([-m[0], -m[1]])) {
                for c in 0..2 {
                    f.hat_mut(c)[i] = z * dir[c];
                    f.hat_mut(c)[j] = (z * dir[c]).conj();
                }
            }
        }
        f
    }

    /// z_cut(t) on the grid, zero for t < 0; `cutoff` is the hard frequency truncation.
    pub fn field_at(&self, grid: &Arc<Grid>, t: f64, cutoff: f64) -> VectorField {
        match self.index_at(t) {
            None => VectorField::zeros(grid),
            Some(i) => self.field_from(grid, &self.samples[i], cutoff),
        }
    }

    /// Amplitudes at sample i, zeroed beyond `cutoff`.
    pub fn truncated(&self, i: usize, cutoff: f64) -> Vec<C64> {
        self.modes
            .iter()
            .zip(&self.samples[i])
            .map(|(m, &z)| if ((m[0] * m[0] + m[1] * m[1]) as f64) <= cutoff * cutoff { z } else { C64::new(0.0, 0.0) })
            .collect()
    }
}

/// Constants entering the additive stopping rule.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StoppingInputs {
    pub c_s: f64,
    pub c_0: f64,
    pub delta: f64,
    pub eps_gamma: f64,
    pub energy_floor: f64,
}

/// Which rule ended the additive run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AdditiveStop {
    Horizon,
    Regularity,
    TimeHolder,
    StressBudget,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StoppingTime {
    pub time: f64,
    pub index: usize,
    pub rule: AdditiveStop,
}

/// First grid time at which any additive threshold is crossed, capped at 1.
pub fn stopping_time_additive(
    path: &OuPath,
    params: &SchemeParams,
    inputs: &StoppingInputs,
) -> Result<StoppingTime, NoiseError> {
    if !(inputs.delta > 0.0 && inputs.delta < 0.25) {
        return Err(NoiseError::BadDelta(inputs.delta));
    }
    let s = params.sigma;
    let a = params.a as f64;
    let b = params.b as f64;
    let budget = inputs.eps_gamma / (inputs.c_s * 32.0 * (2.0 * PI).powi(2))
        * a.powf((1.0 - 2.0 * params.beta) * b * (b - 1.0))
        * inputs.energy_floor;
    let exponent = 0.5 - 2.0 * inputs.delta;
    let last = path.index_at(1.0).expect("nonnegative time");
    let mut sup_norm = 0.0f64;
    let mut seminorm = 0.0f64;
    for i in 0..=last {
        let n_reg = path.sobolev_norm(i, 2.5 + 2.0 * s);
        if inputs.c_s * n_reg >= 1.0 {
            return Ok(StoppingTime { time: path.time(i), index: i, rule: AdditiveStop::Regularity });
        }
        sup_norm = sup_norm.max(path.sobolev_norm(i, 1.75 + 4.0 * s));
        let mut gap = 1;
        while gap <= i {
            let h = (gap as f64 * path.dt).powf(exponent);
            seminorm = seminorm.max(path.difference_norm(i - gap, i, 1.75 + 4.0 * s) / h);
            gap *= 2;
        }
        if inputs.c_s * (sup_norm + seminorm) >= 1.0 {
            return Ok(StoppingTime { time: path.time(i), index: i, rule: AdditiveStop::TimeHolder });
        }
        let h1 = path.sobolev_norm(i, 1.5 + 0.5 * s);
        let h2 = path.sobolev_norm(i, 1.5 - s);
        if inputs.c_0 * (inputs.c_s * h1 * h1 + 2.0 * h2 * h2) >= budget {
            return Ok(StoppingTime { time: path.time(i), index: i, rule: AdditiveStop::StressBudget });
        }
    }
    Ok(StoppingTime { time: 1.0f64.min(path.time(last)), index: last, rule: AdditiveStop::Horizon })
}

/// Scalar Brownian path B on t_i = i dt with B(0) = 0, extended by zero to negative times.
#[derive(Debug, Clone)]
pub struct BrownianPath {
    pub dt: f64,
    pub seed: u64,
    pub values: Vec<f64>,
}

impl BrownianPath {
    pub fn sample(dt: f64, steps: usize, seed: u64, realization: u64) -> Result<Self, NoiseError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(NoiseError::BadStep(dt));
        }
        let mut rng = realization_rng(seed, realization);
        let mut values = Vec::with_capacity(steps + 1);
        let mut b = 0.0;
        values.push(b);
        for _ in 0..steps {
            let xi: f64 = rng.sample(StandardNormal);
            b += dt.sqrt() * xi;
            values.push(b);
        }
        Ok(Self { dt, seed, values })
    }

    pub fn zero(dt: f64, steps: usize) -> Self {
        Self { dt, seed: 0, values: vec![0.0; steps + 1] }
    }

    /// B at the last sample not after t.
    pub fn at(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let i = ((t / self.dt + 1e-9).floor() as usize).min(self.values.len() - 1);
        self.values[i]
    }

    /// Upsilon(t) = exp(B(t)).
    pub fn upsilon(&self, t: f64) -> f64 {
        self.at(t).exp()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MultiplicativeStop {
    Level,
    Size,
    TimeHolder,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LevelStop {
    pub time: f64,
    pub rule: MultiplicativeStop,
}

/// T_L = L, or the first time |B| >= L^(1/4), or the first time the
/// C^(1/2 - 2 delta) norm of B on [0, t] reaches L^(1/2).
pub fn stopping_time_multiplicative(path: &BrownianPath, level: f64, delta: f64) -> Result<LevelStop, NoiseError> {
    if level <= 1.0 {
        return Err(NoiseError::BadLevel(level));
    }
    if !(delta > 0.0 && delta < 0.25) {
        return Err(NoiseError::BadDelta(delta));
    }
    let exponent = 0.5 - 2.0 * delta;
    let last = ((level / path.dt + 1e-9).floor() as usize).min(path.values.len() - 1);
    let (mut sup, mut semi) = (0.0f64, 0.0f64);
    for i in 0..=last {
        let v = path.values[i];
        let t = i as f64 * path.dt;
        if v.abs() >= level.powf(0.25) {
            return Ok(LevelStop { time: t, rule: MultiplicativeStop::Size });
        }
        sup = sup.max(v.abs());
        let mut gap = 1;
        while gap <= i {
            let h = (gap as f64 * path.dt).powf(exponent);
            semi = semi.max((v - path.values[i - gap]).abs() / h);
            gap *= 2;
        }
        if sup + semi >= level.sqrt() {
            return Ok(LevelStop { time: t, rule: MultiplicativeStop::TimeHolder });
        }
    }
    Ok(LevelStop { time: level.min(last as f64 * path.dt), rule: MultiplicativeStop::Level })
}

/// m_L = sqrt(3) L^(1/4) e^(L^(1/4) / 2).
pub fn level_constant(level: f64) -> f64 {
    3f64.sqrt() * level.powf(0.25) * (0.5 * level.powf(0.25)).exp()
}

/// Stage cutoff radii f(q) for q = 0..=max.
pub fn stage_cutoffs(schedule: &Schedule) -> Vec<f64> {
    (0..=schedule.max_index()).map(|q| schedule.noise_cutoff(q).value).collect()
}

/// Hoelder seminorm of the additive path in H^s over [0, t_last].
pub fn ou_holder(path: &OuPath, last: usize, exponent: f64, s: f64) -> f64 {
    holder_seminorm(last + 1, path.dt, exponent, |i, j| path.difference_norm(i, j, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(radius: f64, dt: f64, steps: usize) -> OuSpec {
        OuSpec { radius, dt, steps, amplitude: 1.0, sigma: 0.1 }
    }

    #[test]
    fn variance_closed_form_limits() {
        assert!((ou_variance(2.0, 3.0, 1e-9) - 4.0 * 1e-9).abs() < 1e-15);
        assert!((ou_variance(2.0, 3.0, 50.0) - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn single_step_is_exact_in_distribution() {
        // one step of size t and n steps of size t/n give the same variance
        let one = ou_variance(1.0, 2.0, 0.3);
        let (d, v) = ((-2.0f64 * 0.1).exp(), ou_variance(1.0, 2.0, 0.1));
        let three = v * (1.0 + d * d + d * d * d * d);
        assert!((one - three).abs() < 1e-15);
    }

    #[test]
    fn zero_path_stops_at_horizon() {
        let path = OuPath::zero(&spec(4.0, 0.01, 120));
        let p = SchemeParams::default();
        let inputs = StoppingInputs { c_s: 2.0, c_0: 2.0, delta: 0.1, eps_gamma: 0.266, energy_floor: 5.0 };
        let st = stopping_time_additive(&path, &p, &inputs).unwrap();
        assert_eq!(st.time, 1.0);
        assert_eq!(st.rule, AdditiveStop::Horizon);
        let b = BrownianPath::zero(0.01, 500);
        let stop = stopping_time_multiplicative(&b, 3.0, 0.1).unwrap();
        assert_eq!(stop.time, 3.0);
        assert!(stopping_time_multiplicative(&b, 1.0, 0.1).is_err());
    }

    #[test]
    fn large_noise_stops_early() {
        let mut s = spec(4.0, 0.01, 120);
        s.amplitude = 50.0;
        let path = OuPath::sample(&s, 3, 0).unwrap();
        let p = SchemeParams::default();
        let inputs = StoppingInputs { c_s: 2.0, c_0: 2.0, delta: 0.1, eps_gamma: 0.266, energy_floor: 5.0 };
        let st = stopping_time_additive(&path, &p, &inputs).unwrap();
        assert!(st.time < 1.0 && st.time > 0.0);
    }

    #[test]
    fn future_innovations_do_not_change_the_past() {
        let s = spec(3.0, 0.05, 40);
        let path = OuPath::sample(&s, 9, 2).unwrap();
        let mut inn = path.innovations.clone();
        for row in inn.iter_mut().skip(20) {
            row.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        }
        let cut = OuPath::from_innovations(&s, path.modes.clone(), 9, inn).unwrap();
        assert_eq!(cut.samples[..=20], path.samples[..=20]);
    }

    #[test]
    fn field_is_real_and_solenoidal() {
        let grid = Grid::new(32).unwrap();
        let path = OuPath::sample(&spec(5.0, 0.1, 5), 1, 0).unwrap();
        let z = path.field_at(&grid, 0.5, 5.0);
        assert!(crate::spectral::relative_divergence(&z) < 1e-13);
        let direct = path.sobolev_norm(5, 1.0);
        assert!((z.hs_norm(1.0) - direct).abs() < 1e-12 * direct);
        assert_eq!(path.field_at(&grid, -0.5, 5.0).support().len(), 0);
    }

    #[test]
    fn cutoff_zero_keeps_unit_modes() {
        let modes = half_plane_modes(1.25);
        assert_eq!(modes, vec![[0, 1], [1, 0]]);
    }

    #[test]
    fn level_constant_value() {
        assert!((level_constant(1.0) - 3f64.sqrt() * 0.5f64.exp()).abs() < 1e-15);
        assert!((level_constant(1.0) - 2.8557).abs() < 1e-3);
    }

    #[test]
    fn seeding_is_reproducible() {
        let s = spec(3.0, 0.05, 10);
        let a = OuPath::sample(&s, 5, 7).unwrap();
        let b = OuPath::sample(&s, 5, 7).unwrap();
        let c = OuPath::sample(&s, 5, 8).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_ne!(a.samples, c.samples);
    }
}
