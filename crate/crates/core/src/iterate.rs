//! One step of the iteration: from a stage q to the perturbed iterate at q + 1.
//!
//! A stage is anything that can report y_q, the Reynolds stress and the pressure at
//! a time. The base stage is explicit. The next stage is built from time samples of
//! the previous one, which are mollified, transported along backward flows and
//! turned into a high-frequency perturbation w_{q+1}.

use crate::geometry::{DirectionSystem, Family, GeometryError};
use crate::mollify::{mollify_space, MollifyError, TimeKernel};
use crate::noise::{BrownianPath, OuPath};
use crate::params::{NoiseMode, Schedule};
use crate::spectral::{
    band_reach, band_symbol, inverse_divergence, lambda_pow, nonlinearity, Grid, ModeSet,
    ScalarField, SparseField, SpectralError, SymTfField, VectorField,
};
use crate::transport::{compose, grid_flow, phase, Drift, FlowMap, TransportError};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IterateError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Mollify(#[from] MollifyError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("energy profile: {0}")]
    Energy(String),
    #[error("carrier {lambda} x {k:?} is not a lattice vector")]
    OffLattice { lambda: f64, k: [f64; 2] },
    #[error("flow grid of side {n} cannot hold the band of radius {radius}")]
    FlowGridTooSmall { n: usize, radius: f64 },
    #[error("stage {q} needs frequencies beyond the float range")]
    Overflow { q: usize },
    #[error("time {t} lies outside the stage window [{start}, {stop}]")]
    OutsideWindow { t: f64, start: f64, stop: f64 },
}

// ---------------------------------------------------------------- cutoffs

fn smooth_step(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / x).exp();
    let b = (-1.0 / (1.0 - x)).exp();
    a / (a + b)
}

/// Bump equal to 1 on [-1/4, 1/4] and vanishing outside (-3/4, 3/4).
pub fn cutoff_bump(s: f64) -> f64 {
    smooth_step((0.75 - s.abs()) / 0.5)
}

/// Normalised cutoff with sum_j cutoff(s - j)^2 = 1.
pub fn cutoff(s: f64) -> f64 {
    let c = cutoff_bump(s);
    if c == 0.0 {
        return 0.0;
    }
    let base = s.floor() as i64;
    let total: f64 = (base - 1..=base + 2).map(|j| cutoff_bump(s - j as f64).powi(2)).sum();
    c / total.sqrt()
}

/// Cutoffs chi_j(t) = chi(t / tau - j) for j in J.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Cutoffs {
    pub tau: f64,
    pub first: i64,
    pub last: i64,
}

impl Cutoffs {
    pub fn new(tau: f64, start: f64, stop: f64) -> Self {
        Self { tau, first: (start / tau).floor() as i64, last: (stop / tau).ceil() as i64 }
    }

    pub fn value(&self, j: i64, t: f64) -> f64 {
        if j < self.first || j > self.last {
            return 0.0;
        }
        cutoff(t / self.tau - j as f64)
    }

    /// Nonzero cutoffs at t, in increasing j.
    pub fn active(&self, t: f64) -> Vec<(i64, f64)> {
        let s = t / self.tau;
        let base = s.floor() as i64;
        (base - 1..=base + 1)
            .filter(|&j| j >= self.first && j <= self.last)
            .map(|j| (j, cutoff(s - j as f64)))
            .filter(|&(_, c)| c > 0.0)
            .collect()
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<i64> {
        self.first..=self.last
    }
}

// ---------------------------------------------------------------- energy

/// Prescribed energy e(t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnergyProfile {
    /// d0 + d1 t
    Affine { d0: f64, d1: f64 },
    /// d0 e^(d1 t)
    Exponential { d0: f64, d1: f64 },
    /// Linear interpolation of values at start + i dt, constant beyond the ends.
    Sampled { start: f64, dt: f64, values: Vec<f64> },
}

/// sup e, sup |e'| and inf e over an interval.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EnergyBounds {
    pub sup: f64,
    pub sup_derivative: f64,
    pub inf: f64,
}

impl EnergyProfile {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Self::Affine { d0, d1 } => d0 + d1 * t,
            Self::Exponential { d0, d1 } => d0 * (d1 * t).exp(),
            Self::Sampled { start, dt, values } => {
                let x = ((t - start) / dt).clamp(0.0, (values.len() - 1) as f64);
                let i = (x.floor() as usize).min(values.len().saturating_sub(2));
                if values.len() == 1 {
                    return values[0];
                }
                let f = x - i as f64;
                values[i] * (1.0 - f) + values[i + 1] * f
            }
        }
    }

    pub fn bounds(&self, lo: f64, hi: f64) -> EnergyBounds {
        match self {
            Self::Affine { d0, d1 } => {
                let (a, b) = (d0 + d1 * lo, d0 + d1 * hi);
                EnergyBounds { sup: a.max(b), sup_derivative: d1.abs(), inf: a.min(b) }
            }
            Self::Exponential { d1, .. } => {
                let (a, b) = (self.value(lo), self.value(hi));
                EnergyBounds { sup: a.max(b), sup_derivative: (d1 * a).abs().max((d1 * b).abs()), inf: a.min(b) }
            }
            Self::Sampled { dt, values, .. } => {
                let inside: Vec<f64> = (0..=400).map(|i| self.value(lo + (hi - lo) * i as f64 / 400.0)).collect();
                let slope = values.windows(2).map(|w| ((w[1] - w[0]) / dt).abs()).fold(0.0, f64::max);
                EnergyBounds {
                    sup: inside.iter().copied().fold(f64::MIN, f64::max),
                    sup_derivative: slope,
                    inf: inside.iter().copied().fold(f64::MAX, f64::min),
                }
            }
        }
    }

    /// Check the shape conditions and that inf e > 4 on [lo, hi].
    pub fn validate(&self, lo: f64, hi: f64) -> Result<EnergyBounds, IterateError> {
        match self {
            Self::Affine { d0, d1 } if !(*d1 > 0.0 && *d0 > 2.0 * d1 + 4.0) => {
                return Err(IterateError::Energy(format!("affine profile needs d1 > 0 and d0 > 2 d1 + 4, got d0 = {d0}, d1 = {d1}")))
            }
            Self::Exponential { d0, d1 } if !(*d1 > 0.0 && *d0 > 4.0 * (2.0 * d1).exp()) => {
                return Err(IterateError::Energy(format!("exponential profile needs d1 > 0 and d0 > 4 e^(2 d1), got d0 = {d0}, d1 = {d1}")))
            }
            Self::Sampled { dt, values, .. } if values.is_empty() || !(*dt > 0.0) => {
                return Err(IterateError::Energy("sampled profile needs values and a positive step".into()))
            }
            _ => {}
        }
        let b = self.bounds(lo, hi);
        if !(b.inf > 4.0) {
            return Err(IterateError::Energy(format!("inf e = {} must exceed 4", b.inf)));
        }
        Ok(b)
    }
}

/// gamma_q = [e (1 - lambda_{q+2} delta_{q+2}) - |y_q + z_q|^2] / (4 (2 pi)^2).
pub fn additive_gap(e: f64, gap_scale: f64, norm_sq: f64) -> f64 {
    (e * (1.0 - gap_scale) - norm_sq) / (4.0 * (2.0 * PI).powi(2))
}

/// Multiplicative gap with the factor Upsilon^-2 Upsilon_l and |y_q|^2 weighted by Upsilon^2.
pub fn multiplicative_gap(e: f64, gap_scale: f64, norm_sq: f64, upsilon: f64, upsilon_l: f64) -> f64 {
    upsilon_l / (upsilon * upsilon) * (e * (1.0 - gap_scale) - upsilon * upsilon * norm_sq) / (4.0 * (2.0 * PI).powi(2))
}

/// rho_j = eps^-1 sqrt(l^2 + |R|^2) + gamma_l.
pub fn rho(l: f64, stress_sup: f64, eps_gamma: f64, gamma_l: f64) -> f64 {
    l.hypot(stress_sup) / eps_gamma + gamma_l
}

// ---------------------------------------------------------------- forcing

/// The noise a run is driven by.
#[derive(Debug, Clone)]
pub enum Forcing {
    Additive(Arc<OuPath>),
    Multiplicative(Arc<BrownianPath>),
}

impl Forcing {
    pub fn mode(&self) -> NoiseMode {
        match self {
            Self::Additive(_) => NoiseMode::Additive,
            Self::Multiplicative(_) => NoiseMode::Multiplicative,
        }
    }

    /// z truncated at `cutoff`; zero under multiplicative forcing.
    pub fn z(&self, grid: &Arc<Grid>, t: f64, cutoff: f64) -> VectorField {
        match self {
            Self::Additive(p) => p.field_at(grid, t, cutoff),
            Self::Multiplicative(_) => VectorField::zeros(grid),
        }
    }

    pub fn z_energy(&self, t: f64, cutoff: f64) -> f64 {
        match self {
            Self::Additive(p) => p.norm_at(t, 0.5, cutoff).powi(2),
            Self::Multiplicative(_) => 0.0,
        }
    }

    /// Upsilon(t); 1 under additive forcing.
    pub fn upsilon(&self, t: f64) -> f64 {
        match self {
            Self::Additive(_) => 1.0,
            Self::Multiplicative(b) => b.upsilon(t),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Additive(p) => p.is_zero(),
            Self::Multiplicative(b) => b.is_zero(),
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            Self::Additive(p) => p.dt,
            Self::Multiplicative(b) => b.dt,
        }
    }
}

// ---------------------------------------------------------------- stages

/// Quantities of one stage as functions of time. Fields live on `grid()`.
pub trait Stage: Send + Sync {
    fn level(&self) -> usize;
    fn start(&self) -> f64;
    fn grid(&self) -> &Arc<Grid>;
    /// True when y vanishes identically.
    fn y_is_zero(&self) -> bool;
    /// Radius containing the Fourier support of y.
    fn y_radius(&self) -> f64;
    fn y(&self, t: f64) -> Result<VectorField, IterateError>;
    fn stress(&self, t: f64) -> Result<SymTfField, IterateError>;
    fn pressure(&self, t: f64) -> Result<ScalarField, IterateError>;
    /// D_t y = d_t y + (drift . grad) y.
    fn material_derivative(&self, t: f64) -> Result<VectorField, IterateError>;
    /// |y + z_q|^2 (additive) or Upsilon^2 |y|^2 (multiplicative) in H^(1/2).
    fn energy(&self, t: f64) -> Result<f64, IterateError>;
}

/// Pressure p with grad p = -(I - P) F, i.e. p^ = i m . F^ / |m|^2.
pub fn pressure_from(f: &VectorField) -> ScalarField {
    let grid = f.grid().clone();
    let hat = (0..grid.len())
        .map(|i| {
            let m = grid.mode(i);
            let r2 = (m[0] * m[0] + m[1] * m[1]) as f64;
            if r2 == 0.0 {
                return C64::new(0.0, 0.0);
            }
            C64::new(0.0, 1.0) * (f.hat(0)[i] * m[0] as f64 + f.hat(1)[i] * m[1] as f64) / r2
        })
        .collect();
    ScalarField::from_hat(&grid, [hat])
}

/// Stage q = 0: y_0 = 0 with the stress absorbing the forcing terms of z_0.
pub struct BaseStage {
    grid: Arc<Grid>,
    forcing: Forcing,
    cutoff: f64,
    gamma: f64,
    theta: f64,
    start: f64,
}

impl BaseStage {
    pub fn new(schedule: &Schedule, forcing: Forcing) -> Result<Self, IterateError> {
        let cutoff = schedule.noise_cutoff(0).value;
        let grid = Grid::new(Grid::size_for_products(cutoff))?;
        Ok(Self {
            grid,
            forcing,
            cutoff,
            gamma: schedule.params.gamma,
            theta: schedule.params.ou_exponent(),
            start: schedule.time_start(0),
        })
    }

    fn z(&self, t: f64) -> VectorField {
        self.forcing.z(&self.grid, t, self.cutoff)
    }

    /// N(z_0) and the linear terms Lambda^gamma z_0 - Lambda^theta z_0.
    pub fn forcing_terms(&self, t: f64) -> (VectorField, VectorField) {
        let z = self.z(t);
        let n = nonlinearity(&z, &z);
        let lin = &lambda_pow(&z, self.gamma) - &lambda_pow(&z, self.theta);
        (n, lin)
    }
}

impl BaseStage {
    /// Relative sup of P(N(z_0) + linear terms) - div R_0 with z_0 evaluated on `grid`.
    pub fn equation_residual(&self, grid: &Arc<Grid>, t: f64) -> Result<f64, IterateError> {
        let z = self.forcing.z(grid, t, self.cutoff);
        let mut f = nonlinearity(&z, &z);
        f.axpy(1.0, &lambda_pow(&z, self.gamma));
        f.axpy(-1.0, &lambda_pow(&z, self.theta));
        let scale = f.sup_norm();
        if scale == 0.0 {
            return Ok(0.0);
        }
        let r = SymTfField(self.stress(t)?.0.resample(grid));
        let res = &crate::spectral::leray(&f) - &crate::spectral::div_sym(&r);
        Ok(res.sup_norm() / scale)
    }
}

impl Stage for BaseStage {
    fn level(&self) -> usize {
        0
    }
    fn start(&self) -> f64 {
        self.start
    }
    fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    fn y_is_zero(&self) -> bool {
        true
    }
    fn y_radius(&self) -> f64 {
        0.0
    }
    fn y(&self, _t: f64) -> Result<VectorField, IterateError> {
        Ok(VectorField::zeros(&self.grid))
    }
    fn stress(&self, t: f64) -> Result<SymTfField, IterateError> {
        if matches!(self.forcing, Forcing::Multiplicative(_)) {
            return Ok(SymTfField::zeros(&self.grid));
        }
        let (n, lin) = self.forcing_terms(t);
        Ok(inverse_divergence(&(&n + &lin)))
    }
    fn pressure(&self, t: f64) -> Result<ScalarField, IterateError> {
        if matches!(self.forcing, Forcing::Multiplicative(_)) {
            return Ok(ScalarField::zeros(&self.grid));
        }
        Ok(pressure_from(&self.forcing_terms(t).0))
    }
    fn material_derivative(&self, _t: f64) -> Result<VectorField, IterateError> {
        Ok(VectorField::zeros(&self.grid))
    }
    fn energy(&self, t: f64) -> Result<f64, IterateError> {
        Ok(self.forcing.z_energy(t, self.cutoff))
    }
}

// ---------------------------------------------------------------- step q -> q+1

/// Numerical settings of a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepSettings {
    /// Side of the grid on which flows and amplitudes are sampled.
    pub flow_grid: usize,
    /// RK4 steps per flow, fixed for every evaluation time.
    pub flow_steps: usize,
    /// Mollification sample spacing in noise steps; 0 picks tau / (8 dt).
    pub sample_stride: usize,
    /// Number of mollification samples kept in memory.
    pub cache: usize,
}

impl Default for StepSettings {
    fn default() -> Self {
        Self { flow_grid: 64, flow_steps: 4, sample_stride: 0, cache: 48 }
    }
}

/// Space-mollified quantities of the previous stage at one sample time.
struct Sample {
    y: VectorField,
    r: SymTfField,
    z: VectorField,
    n: VectorField,
    p: ScalarField,
    drift: SparseField<2>,
    gap: f64,
}

/// Space-time mollified quantities at a time, on the previous stage's grid.
pub struct Mollified {
    pub y: VectorField,
    pub r: SymTfField,
    pub z: VectorField,
    /// Mollified nonlinearity N(y_q + z_q), or Upsilon N(y_q).
    pub n: VectorField,
    pub p: ScalarField,
    pub upsilon: f64,
    pub gap: f64,
}

/// Transported stress data attached to one cutoff index.
struct Anchor {
    rho: f64,
    gamma_l: f64,
    stress_sup: f64,
    stress: SparseField<2>,
    at_identity: Vec<[f64; 2]>,
}

struct BandEntry {
    fine: usize,
    mirror: usize,
    coarse: usize,
    weight: [C64; 2],
}

/// Per-anchor summary used in reports.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AnchorSummary {
    pub j: i64,
    pub time: f64,
    pub rho: f64,
    pub gamma_l: f64,
    pub stress_sup: f64,
}

/// The construction of stage q + 1 from stage q.
pub struct Step {
    prev: Arc<dyn Stage>,
    forcing: Forcing,
    pub grid: Arc<Grid>,
    flow_grid: Arc<Grid>,
    geometry: Arc<DirectionSystem>,
    energy: EnergyProfile,
    pub q: usize,
    pub lambda: f64,
    pub tau: f64,
    pub l: f64,
    pub start: f64,
    pub stop: f64,
    pub gap_scale: f64,
    pub cut_q: f64,
    pub cut_next: f64,
    pub cutoffs: Cutoffs,
    pub sample_dt: f64,
    flow_steps: usize,
    kernel: TimeKernel,
    drift_set: Option<Arc<ModeSet>>,
    cache: Mutex<BTreeMap<i64, Arc<Sample>>>,
    capacity: usize,
    clipped: Mutex<BTreeSet<i64>>,
    anchors: BTreeMap<i64, Anchor>,
    bands: [Vec<Vec<BandEntry>>; 2],
}

fn family_slot(f: Family) -> usize {
    match f {
        Family::First => 0,
        Family::Second => 1,
    }
}

impl Step {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prev: Arc<dyn Stage>,
        forcing: Forcing,
        schedule: &Schedule,
        geometry: Arc<DirectionSystem>,
        energy: EnergyProfile,
        grid: Arc<Grid>,
        stop: f64,
        settings: &StepSettings,
    ) -> Result<Self, IterateError> {
        let q = prev.level();
        let next = q + 1;
        if next + 2 > schedule.max_index() || schedule.lambda(next + 1).overflow {
            return Err(IterateError::Overflow { q: next });
        }
        let lambda = schedule.lambda(next).value;
        let reach = band_reach(lambda);
        if reach > grid.dealias_radius() {
            return Err(SpectralError::BandExceedsGrid { reach, radius: grid.dealias_radius() }.into());
        }
        let flow_grid = Grid::new(settings.flow_grid)?;
        let band_radius = lambda / 8.0;
        if (settings.flow_grid / 2) as f64 <= band_radius + 1.0 {
            return Err(IterateError::FlowGridTooSmall { n: settings.flow_grid, radius: band_radius });
        }
        let tau = schedule.tau(next).value;
        let dt = forcing.dt();
        let stride = if settings.sample_stride == 0 {
            ((tau / (8.0 * dt)).floor() as usize).max(1)
        } else {
            settings.sample_stride
        };
        let start = schedule.time_start(next);
        let mode = forcing.mode();
        let cut_q = schedule.noise_cutoff(q).value;
        let drift_radius = match mode {
            NoiseMode::Additive if !forcing.is_zero() => prev.y_radius().max(cut_q),
            _ => prev.y_radius(),
        };
        let drift_set = if prev.y_is_zero() && (mode == NoiseMode::Multiplicative || forcing.is_zero()) {
            None
        } else {
            Some(ModeSet::ball(drift_radius))
        };
        let bands = [Family::First, Family::Second].map(|f| {
            f.representatives().iter().map(|&k| band_entries(&grid, &flow_grid, k, lambda)).collect::<Result<Vec<_>, _>>()
        });
        let [b0, b1] = bands;
        let mut step = Self {
            prev,
            forcing,
            grid,
            flow_grid,
            geometry,
            energy,
            q,
            lambda,
            tau,
            l: schedule.mollifier_length(next).value,
            start,
            stop,
            gap_scale: schedule.gap_scale(next + 1).value,
            cut_q,
            cut_next: schedule.noise_cutoff(next).value,
            cutoffs: Cutoffs::new(tau, start, stop),
            sample_dt: dt * stride as f64,
            flow_steps: settings.flow_steps.max(1),
            kernel: TimeKernel::new(tau),
            drift_set,
            cache: Mutex::new(BTreeMap::new()),
            capacity: settings.cache.max(8),
            clipped: Mutex::new(BTreeSet::new()),
            anchors: BTreeMap::new(),
            bands: [b0?, b1?],
        };
        step.anchors = step.build_anchors()?;
        Ok(step)
    }

    pub fn mode(&self) -> NoiseMode {
        self.forcing.mode()
    }

    pub fn forcing(&self) -> &Forcing {
        &self.forcing
    }

    pub fn prev(&self) -> &Arc<dyn Stage> {
        &self.prev
    }

    pub fn energy_profile(&self) -> &EnergyProfile {
        &self.energy
    }

    pub fn eps_gamma(&self) -> f64 {
        self.geometry.eps_gamma()
    }

    /// Sample indices whose gap function was clipped at zero.
    pub fn clip_count(&self) -> usize {
        self.clipped.lock().expect("clip set").len()
    }

    pub fn drift_is_zero(&self) -> bool {
        self.drift_set.is_none()
    }

    fn sample(&self, i: i64) -> Result<Arc<Sample>, IterateError> {
        if let Some(s) = self.cache.lock().expect("sample cache").get(&i) {
            return Ok(s.clone());
        }
        let s = Arc::new(self.make_sample(i)?);
        let mut cache = self.cache.lock().expect("sample cache");
        if cache.len() >= self.capacity {
            let far = *cache.keys().max_by_key(|k| (*k - i).abs()).expect("nonempty cache");
            cache.remove(&far);
        }
        cache.insert(i, s.clone());
        Ok(s)
    }

    fn make_sample(&self, i: i64) -> Result<Sample, IterateError> {
        let s = i as f64 * self.sample_dt;
        let prev = &*self.prev;
        let g = prev.grid().clone();
        let y = prev.y(s)?;
        let z = self.forcing.z(&g, s, self.cut_q);
        let e = self.energy.value(s);
        let (n, gap) = match self.forcing.mode() {
            NoiseMode::Additive => {
                let u = &y + &z;
                let norm = u.hs_norm(0.5).powi(2);
                (nonlinearity(&u, &u), additive_gap(e, self.gap_scale, norm))
            }
            NoiseMode::Multiplicative => {
                let ups = self.forcing.upsilon(s);
                let norm = y.hs_norm(0.5).powi(2);
                let ups_l = self.upsilon_l(s)?;
                (nonlinearity(&y, &y).scale(ups), multiplicative_gap(e, self.gap_scale, norm, ups, ups_l))
            }
        };
        if gap < 0.0 {
            self.clipped.lock().expect("clip set").insert(i);
        }
        let y = mollify_space(&y, self.l);
        let z = mollify_space(&z, self.l);
        let drift = match &self.drift_set {
            None => SparseField::zeros(&ModeSet::ball(0.0)),
            Some(set) => match self.forcing.mode() {
                NoiseMode::Additive => lambda_pow(&(&y + &z), 1.0).restrict(set),
                NoiseMode::Multiplicative => lambda_pow(&y, 1.0).restrict(set),
            },
        };
        Ok(Sample {
            r: SymTfField(mollify_space(&prev.stress(s)?.0, self.l)),
            p: mollify_space(&prev.pressure(s)?, self.l),
            n: mollify_space(&n, self.l),
            y,
            z,
            drift,
            gap: gap.max(0.0),
        })
    }

    fn weights(&self, t: f64) -> Result<Vec<(i64, f64)>, IterateError> {
        Ok(self.kernel.weights(t, 0.0, self.sample_dt)?)
    }

    /// Upsilon mollified in time; 1 under additive forcing.
    pub fn upsilon_l(&self, t: f64) -> Result<f64, IterateError> {
        if self.forcing.mode() == NoiseMode::Additive {
            return Ok(1.0);
        }
        Ok(self.kernel.smooth_scalar(t, 0.0, self.sample_dt, |i| self.forcing.upsilon(i as f64 * self.sample_dt))?)
    }

    /// Mollified gap function gamma_l(t).
    pub fn gap_l(&self, t: f64) -> Result<f64, IterateError> {
        let mut acc = 0.0;
        for (i, w) in self.weights(t)? {
            acc += w * self.sample(i)?.gap;
        }
        Ok(acc)
    }

    /// Every mollified quantity at t, accumulated in sample order.
    pub fn mollified(&self, t: f64) -> Result<Mollified, IterateError> {
        let g = self.prev.grid().clone();
        let mut m = Mollified {
            y: VectorField::zeros(&g),
            r: SymTfField::zeros(&g),
            z: VectorField::zeros(&g),
            n: VectorField::zeros(&g),
            p: ScalarField::zeros(&g),
            upsilon: self.upsilon_l(t)?,
            gap: 0.0,
        };
        for (i, w) in self.weights(t)? {
            let s = self.sample(i)?;
            m.y.axpy(w, &s.y);
            m.r.axpy(w, &s.r);
            m.z.axpy(w, &s.z);
            m.n.axpy(w, &s.n);
            m.p.axpy(w, &s.p);
            m.gap += w * s.gap;
        }
        Ok(m)
    }

    /// Mollified drift Lambda(y_l + z_l), or Upsilon_l Lambda y_l.
    pub fn drift_at(&self, t: f64) -> Result<SparseField<2>, IterateError> {
        let set = match &self.drift_set {
            None => return Ok(SparseField::zeros(&ModeSet::ball(0.0))),
            Some(s) => s,
        };
        let mut out = SparseField::zeros(set);
        for (i, w) in self.weights(t)? {
            out.axpy(w, &self.sample(i)?.drift);
        }
        if self.forcing.mode() == NoiseMode::Multiplicative {
            let u = self.upsilon_l(t)?;
            let scaled = out.clone();
            out.axpy(u - 1.0, &scaled);
        }
        Ok(out)
    }

    fn build_anchors(&self) -> Result<BTreeMap<i64, Anchor>, IterateError> {
        let points: Vec<[f64; 2]> = (0..self.flow_grid.len()).map(|i| self.flow_grid.point(i)).collect();
        let mut out = BTreeMap::new();
        for j in self.cutoffs.indices() {
            let t = self.tau * j as f64;
            let mut r = SymTfField::zeros(self.prev.grid());
            let mut gamma_l = 0.0;
            for (i, w) in self.weights(t)? {
                let s = self.sample(i)?;
                r.axpy(w, &s.r);
                gamma_l += w * s.gap;
            }
            let stress_sup = SymTfField(r.0.resample(&self.grid)).sup_norm();
            let radius = r.0.support_radius(1e-14 * stress_sup);
            let sparse = r.0.restrict(&ModeSet::ball(radius));
            let at_identity = if stress_sup == 0.0 { vec![[0.0; 2]; points.len()] } else { sparse.eval_many(&points) };
            out.insert(
                j,
                Anchor {
                    rho: rho(self.l, stress_sup, self.geometry.eps_gamma(), gamma_l),
                    gamma_l,
                    stress_sup,
                    stress: sparse,
                    at_identity,
                },
            );
        }
        Ok(out)
    }

    pub fn anchors(&self) -> Vec<AnchorSummary> {
        self.anchors
            .iter()
            .map(|(&j, a)| AnchorSummary { j, time: self.tau * j as f64, rho: a.rho, gamma_l: a.gamma_l, stress_sup: a.stress_sup })
            .collect()
    }

    pub fn rho_of(&self, j: i64) -> Option<f64> {
        self.anchors.get(&j).map(|a| a.rho)
    }

    /// Backward flow Phi_j(t, .) on the flow grid.
    pub fn flow(&self, j: i64, t: f64) -> Result<FlowMap, IterateError> {
        let anchor = self.tau * j as f64;
        if self.drift_is_zero() {
            return Ok(FlowMap::identity(anchor, t, self.flow_grid.len()));
        }
        Ok(grid_flow(&StepDrift(self), &self.flow_grid, anchor, t, self.flow_steps)?)
    }

    /// R_{q,j}(t) = R_l(tau j, Phi_j(t, x)) at the flow-grid points.
    pub fn transported_stress(&self, j: i64, flow: &FlowMap) -> Vec<[f64; 2]> {
        let a = &self.anchors[&j];
        if flow.is_identity() || a.stress_sup == 0.0 {
            a.at_identity.clone()
        } else {
            compose(&a.stress, &self.flow_grid, flow)
        }
    }

    /// gamma_k(Id - R / rho) for the three representatives at every flow-grid point.
    pub fn amplitudes(&self, j: i64, stress: &[[f64; 2]]) -> Result<Vec<[f64; 3]>, IterateError> {
        let family = Family::for_index(j);
        let rho = self.anchors[&j].rho;
        stress
            .iter()
            .map(|r| {
                let m = [1.0 - r[0] / rho, -r[1] / rho, 1.0 + r[0] / rho];
                Ok(self.geometry.gamma(family, m)?)
            })
            .collect()
    }

    fn add_slice(&self, t: f64, j: i64, chi: f64, hat: &mut [Vec<C64>; 2]) -> Result<(), IterateError> {
        let flow = self.flow(j, t)?;
        let stress = self.transported_stress(j, &flow);
        let gammas = self.amplitudes(j, &stress)?;
        let family = Family::for_index(j);
        let ups = self.upsilon_l(t)?.powf(-0.5);
        let coef = chi * ups * (self.anchors[&j].rho / self.lambda).sqrt();
        for (kk, k) in family.representatives().iter().enumerate() {
            let ph = phase(&flow, *k, self.lambda);
            let mut buf: Vec<C64> = gammas.iter().zip(&ph).map(|(g, p)| p * (coef * g[kk])).collect();
            self.flow_grid.forward(&mut buf);
            for e in &self.bands[family_slot(family)][kk] {
                let a = buf[e.coarse];
                for c in 0..2 {
                    let v = e.weight[c] * a;
                    hat[c][e.fine] += v;
                    hat[c][e.mirror] += v.conj();
                }
            }
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<(), IterateError> {
        let lo = self.tau * self.cutoffs.first as f64;
        let hi = self.tau * self.cutoffs.last as f64;
        if t < lo || t > hi {
            return Err(IterateError::OutsideWindow { t, start: self.start, stop: self.stop });
        }
        Ok(())
    }

    /// w_{q+1}(t) on the run grid.
    pub fn perturbation(&self, t: f64) -> Result<VectorField, IterateError> {
        self.check_time(t)?;
        let len = self.grid.len();
        let mut hat = [vec![C64::new(0.0, 0.0); len], vec![C64::new(0.0, 0.0); len]];
        for (j, chi) in self.cutoffs.active(t) {
            self.add_slice(t, j, chi, &mut hat)?;
        }
        Ok(VectorField::from_hat(&self.grid, hat))
    }

    /// Leading energy of the perturbation, sum_j 4 chi_j^2 rho_j (2 pi)^2 (divided by Upsilon_l).
    pub fn quadrature(&self, t: f64) -> Result<f64, IterateError> {
        let s: f64 = self.cutoffs.active(t).iter().map(|&(j, c)| 4.0 * c * c * self.anchors[&j].rho).sum();
        Ok(s * (2.0 * PI).powi(2) / self.upsilon_l(t)?)
    }

    /// y_l(t) on the run grid.
    pub fn y_l(&self, t: f64) -> Result<VectorField, IterateError> {
        if self.prev.y_is_zero() {
            return Ok(VectorField::zeros(&self.grid));
        }
        let mut acc = VectorField::zeros(self.prev.grid());
        for (i, w) in self.weights(t)? {
            acc.axpy(w, &self.sample(i)?.y);
        }
        Ok(acc.resample(&self.grid))
    }

    /// z_{q+1}(t) on the run grid.
    pub fn z_next(&self, t: f64) -> VectorField {
        self.forcing.z(&self.grid, t, self.cut_next)
    }

    /// z_q(t) on the run grid.
    pub fn z_current(&self, t: f64) -> VectorField {
        self.forcing.z(&self.grid, t, self.cut_q)
    }

    /// y_{q+1} = y_l + w_{q+1}.
    pub fn y_next(&self, t: f64) -> Result<VectorField, IterateError> {
        Ok(&self.y_l(t)? + &self.perturbation(t)?)
    }

    /// Energy of stage q + 1 at t, computed from Fourier coefficients.
    pub fn energy_next(&self, t: f64) -> Result<f64, IterateError> {
        let y = self.y_next(t)?;
        Ok(match self.mode() {
            NoiseMode::Additive => (&y + &self.z_next(t)).hs_norm(0.5).powi(2),
            NoiseMode::Multiplicative => (self.forcing.upsilon(t) * y.hs_norm(0.5)).powi(2),
        })
    }

    /// p_{q+1} = p_l + w . Lambda(y_l + z_{q+1}), or p_l + Upsilon_l w . Lambda y_l.
    pub fn pressure_next(&self, t: f64) -> Result<ScalarField, IterateError> {
        let m = self.mollified(t)?;
        let w = self.perturbation(t)?;
        let y_l = m.y.resample(&self.grid);
        let carrier = match self.mode() {
            NoiseMode::Additive => lambda_pow(&(&y_l + &self.z_next(t)), 1.0),
            NoiseMode::Multiplicative => lambda_pow(&y_l, 1.0).scale(m.upsilon),
        };
        let mut p = m.p.resample(&self.grid);
        p.axpy(1.0, &crate::spectral::dot(&w, &carrier));
        Ok(p)
    }
}

fn band_entries(grid: &Arc<Grid>, flow: &Arc<Grid>, k: [f64; 2], lambda: f64) -> Result<Vec<BandEntry>, IterateError> {
    let carrier = [lambda * k[0], lambda * k[1]];
    let c = [carrier[0].round() as i64, carrier[1].round() as i64];
    if (carrier[0] - c[0] as f64).abs() > 1e-9 || (carrier[1] - c[1] as f64).abs() > 1e-9 {
        return Err(IterateError::OffLattice { lambda, k });
    }
    let r = (lambda / 8.0).ceil() as i64 + 1;
    let kp = [-k[1], k[0]];
    let mut out = Vec::new();
    for d0 in -r..=r {
        for d1 in -r..=r {
            let m = [c[0] + d0, c[1] + d1];
            let s = band_symbol(m, k, lambda);
            if s == 0.0 {
                continue;
            }
            let (fine, mirror, coarse) = match (grid.index(m), grid.index([-m[0], -m[1]]), flow.index([d0, d1])) {
                (Some(a), Some(b), Some(cc)) => (a, b, cc),
                _ => return Err(IterateError::FlowGridTooSmall { n: flow.n(), radius: lambda / 8.0 }),
            };
            let r2 = (m[0] * m[0] + m[1] * m[1]) as f64;
            let dotp = (m[0] as f64 * kp[0] + m[1] as f64 * kp[1]) / r2;
            let proj = [kp[0] - dotp * m[0] as f64, kp[1] - dotp * m[1] as f64];
            let i = C64::new(0.0, s);
            out.push(BandEntry { fine, mirror, coarse, weight: [i * proj[0], i * proj[1]] });
        }
    }
    Ok(out)
}

struct StepDrift<'a>(&'a Step);

impl Drift for StepDrift<'_> {
    fn at(&self, t: f64) -> Result<SparseField<2>, TransportError> {
        self.0.drift_at(t).map_err(|e| TransportError::DriftUnavailable { t, reason: e.to_string() })
    }

    fn is_zero(&self) -> bool {
        self.0.drift_is_zero()
    }
}

// ---------------------------------------------------------------- inductive hypotheses

/// Constants on the right of the inductive bounds.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct InductiveConstants {
    pub m0: f64,
    /// sup of e over the run.
    pub e_bar: f64,
    pub eps_gamma: f64,
    /// Horizon L of the multiplicative run; None for additive forcing.
    pub level: Option<f64>,
}

impl InductiveConstants {
    fn m_l(&self) -> f64 {
        self.level.map_or(1.0, crate::noise::level_constant)
    }

    /// Extra factor of the multiplicative stress bound, e^(-3 L^(1/4)).
    fn stress_factor(&self) -> f64 {
        self.level.map_or(1.0, |l| (-3.0 * l.powf(0.25)).exp())
    }

    fn drift_factor(&self) -> f64 {
        self.level.map_or(1.0, |l| l.powf(0.25).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    AtMost,
    AtLeast,
}

/// One hypothesis: measured left side against its bound.
#[derive(Debug, Clone, Serialize)]
pub struct HypothesisRow {
    pub id: &'static str,
    pub anchor: &'static str,
    pub measured: f64,
    pub bound: f64,
    pub comparison: Comparison,
    /// Time at which the measured value was attained.
    pub time: f64,
    pub holds: bool,
}

impl HypothesisRow {
    fn new(id: &'static str, anchor: &'static str, measured: f64, bound: f64, comparison: Comparison, time: f64) -> Self {
        let holds = match comparison {
            Comparison::AtMost => measured <= bound,
            Comparison::AtLeast => measured >= bound,
        };
        Self { id, anchor, measured, bound, comparison, time, holds }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InductiveReport {
    pub level: usize,
    pub rows: Vec<HypothesisRow>,
    /// Energy-window samples and how many fell outside [3/4, 5/4].
    pub energy_samples: usize,
    pub energy_violations: usize,
}

impl InductiveReport {
    pub fn all_hold(&self) -> bool {
        self.rows.iter().all(|r| r.holds)
    }
}

fn argmax(values: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    values.fold((f64::NEG_INFINITY, f64::NAN), |best, (t, v)| if v > best.0 { (v, t) } else { best })
}

/// Spectral mass ratio below which a coefficient pattern counts as roundoff.
pub const SPECTRAL_ROUNDOFF: f64 = 1e-24;

/// (t, stage energy) at each time.
pub fn energy_samples(stage: &dyn Stage, times: &[f64]) -> Result<Vec<(f64, f64)>, IterateError> {
    times.iter().map(|&t| Ok((t, stage.energy(t)?))).collect()
}

fn relative_mass_outside<const C: usize>(f: &crate::spectral::Field<C>, radius: f64) -> f64 {
    let total = f.mass_where(|_| true);
    if total == 0.0 {
        0.0
    } else {
        f.mass_outside(radius) / total
    }
}

/// Running maxima of the inductive size bounds, fed one time at a time.
pub struct InductiveAccumulator<'a> {
    level: usize,
    schedule: &'a Schedule,
    energy: &'a EnergyProfile,
    constants: InductiveConstants,
    support_y: (f64, f64),
    support_r: (f64, f64),
    /// (t, sup y, C1 size, sup D_t y, sup R, stress target)
    sizes: Vec<(f64, f64, f64, f64, f64, f64)>,
}

impl<'a> InductiveAccumulator<'a> {
    pub fn new(level: usize, schedule: &'a Schedule, energy: &'a EnergyProfile, constants: &InductiveConstants) -> Self {
        Self {
            level,
            schedule,
            energy,
            constants: *constants,
            support_y: (0.0, f64::NAN),
            support_r: (0.0, f64::NAN),
            sizes: Vec::new(),
        }
    }

    /// Record y, R and D_t y of the stage at time t.
    pub fn add(&mut self, t: f64, y: &VectorField, r: &SymTfField, material_derivative: &VectorField) {
        let lam = self.schedule.lambda(self.level).value;
        let c = &self.constants;
        let my = relative_mass_outside(y, 2.0 * lam);
        if my > self.support_y.0 || self.support_y.1.is_nan() {
            self.support_y = (my, t);
        }
        let mr = relative_mass_outside(&r.0, 4.0 * lam);
        if mr > self.support_r.0 || self.support_r.1.is_nan() {
            self.support_r = (mr, t);
        }
        let target = c.eps_gamma * c.stress_factor() / (32.0 * (2.0 * PI).powi(2))
            * self.schedule.gap_scale(self.level + 2).value
            * self.energy.value(t);
        self.sizes.push((
            t,
            y.sup_norm(),
            y.c1_norm() + lambda_pow(y, 1.0).sup_norm(),
            material_derivative.sup_norm(),
            r.sup_norm(),
            target,
        ));
    }

    /// Close the report with the energy window evaluated on `energies` = (t, energy).
    pub fn finish(self, energies: &[(f64, f64)]) -> InductiveReport {
        let q = self.level;
        let schedule = self.schedule;
        let lam = schedule.lambda(q).value;
        let delta = schedule.delta(q).value;
        let c = &self.constants;
        let ml = c.m_l();
        let sqrt_e = c.e_bar.sqrt();
        let sum_delta: f64 = (1..=q).map(|j| schedule.delta(j).value.sqrt()).sum();
        let sizes = &self.sizes;
        let (support_y, support_r) = (self.support_y, self.support_r);
        let (y0, ty0) = argmax(sizes.iter().map(|s| (s.0, s.1)));
        let (y1, ty1) = argmax(sizes.iter().map(|s| (s.0, s.2)));
        let (yd, tyd) = argmax(sizes.iter().map(|s| (s.0, s.3)));
        let (_, tr) = argmax(sizes.iter().map(|s| (s.0, s.4 / s.5)));
        let worst = sizes.iter().find(|s| s.0 == tr).copied();

        let window = schedule.gap_scale(q + 1).value;
        let mut lo = (f64::INFINITY, f64::NAN);
        let mut hi = (f64::NEG_INFINITY, f64::NAN);
        let mut violations = 0;
        for &(t, en) in energies {
            let e = self.energy.value(t);
            let ratio = (e - en) / (window * e);
            if ratio < lo.0 {
                lo = (ratio, t);
            }
            if ratio > hi.0 {
                hi = (ratio, t);
            }
            if !(0.75..=1.25).contains(&ratio) {
                violations += 1;
            }
        }
        use Comparison::*;
        let mut rows = vec![
            HypothesisRow::new(
                "1a",
                "frequency support of y inside B(0, 2 lambda_q): relative mass outside",
                support_y.0,
                SPECTRAL_ROUNDOFF,
                AtMost,
                support_y.1,
            ),
            HypothesisRow::new(
                "1b",
                "sup |y_q| <= M0^(1/2) (1 + sum delta_j^(1/2)) m_L^4 e_bar^(1/2)",
                y0,
                c.m0.sqrt() * (1.0 + sum_delta) * ml.powi(4) * sqrt_e,
                AtMost,
                ty0,
            ),
            HypothesisRow::new(
                "1c",
                "|y_q|_C1 + |Lambda y_q| <= M0^(1/2) m_L^4 lambda_q delta_q^(1/2) e_bar^(1/2)",
                y1,
                c.m0.sqrt() * ml.powi(4) * lam * delta.sqrt() * sqrt_e,
                AtMost,
                ty1,
            ),
            HypothesisRow::new(
                "1d",
                "|D_t y_q| <= M0 lambda_q^2 delta_q m_L^8 e^(L^(1/4)) e_bar",
                yd,
                c.m0 * lam * lam * delta * ml.powi(8) * c.drift_factor() * c.e_bar,
                AtMost,
                tyd,
            ),
            HypothesisRow::new(
                "2a",
                "frequency support of R_q inside B(0, 4 lambda_q): relative mass outside",
                support_r.0,
                SPECTRAL_ROUNDOFF,
                AtMost,
                support_r.1,
            ),
        ];
        if let Some(w) = worst {
            rows.push(HypothesisRow::new(
                "2b",
                "|R_q| <= eps_gamma e^(-3 L^(1/4)) / (32 (2 pi)^2) lambda_{q+2} delta_{q+2} e(t)",
                w.4,
                w.5,
                AtMost,
                w.0,
            ));
        }
        rows.push(HypothesisRow::new("3-lower", "energy gap >= 3/4 lambda_{q+1} delta_{q+1} e(t)", lo.0, 0.75, AtLeast, lo.1));
        rows.push(HypothesisRow::new("3-upper", "energy gap <= 5/4 lambda_{q+1} delta_{q+1} e(t)", hi.0, 1.25, AtMost, hi.1));
        InductiveReport { level: q, rows, energy_samples: energies.len(), energy_violations: violations }
    }
}

/// Evaluate the inductive hypotheses of `stage`: sizes at `times`, the energy window on `energies` = (t, energy).
pub fn check_inductive(
    stage: &dyn Stage,
    schedule: &Schedule,
    energy: &EnergyProfile,
    constants: &InductiveConstants,
    times: &[f64],
    energies: &[(f64, f64)],
) -> Result<InductiveReport, IterateError> {
    let mut acc = InductiveAccumulator::new(stage.level(), schedule, energy, constants);
    for &t in times {
        acc.add(t, &stage.y(t)?, &stage.stress(t)?, &stage.material_derivative(t)?);
    }
    Ok(acc.finish(energies))
}
