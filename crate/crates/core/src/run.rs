//! Run configuration, the end-to-end pipeline and its outputs.
//!
//! A run samples the noise, fixes the stopping time, builds the base stage and,
//! when more than one stage is requested, the perturbed iterate of the next
//! stage. Every diagnostic lands in a [`Report`]; nothing in the report depends
//! on the number of worker threads.

use crate::geometry::DirectionSystem;
use crate::iterate::{
    check_inductive, energy_samples, BaseStage, InductiveAccumulator, EnergyProfile, Forcing, InductiveConstants, InductiveReport, IterateError, Stage,
    Step, StepSettings,
};
use crate::noise::{
    realization_rng, stopping_time_additive, stopping_time_multiplicative, BrownianPath, NoiseError, OuPath, OuSpec,
    StoppingInputs,
};
use crate::params::{admissibility, amplitude_constant, Admissibility, NoiseMode, Schedule, SchemeParams};
use crate::spectral::{
    embedding_constants, projection_constant, relative_divergence, Grid, SpectralError, VectorField,
};
use crate::stress::{ComponentNorms, IteratedStage, ResidualCheck, StressError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

pub const REPORT_SCHEMA: &str = "msqg-report/1";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical fault: {0}")]
    Numerical(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io(_) => 2,
            RunError::Numerical(_) => 4,
        }
    }
}

impl From<IterateError> for RunError {
    fn from(e: IterateError) -> Self {
        match e {
            IterateError::Spectral(SpectralError::NotSolenoidal(_))
            | IterateError::Transport(_)
            | IterateError::Geometry(_) => RunError::Numerical(e.to_string()),
            _ => RunError::Config(e.to_string()),
        }
    }
}

impl From<StressError> for RunError {
    fn from(e: StressError) -> Self {
        match e {
            StressError::Iterate(e) => e.into(),
            other => RunError::Numerical(other.to_string()),
        }
    }
}

impl From<NoiseError> for RunError {
    fn from(e: NoiseError) -> Self {
        RunError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Replace the sampled path by the zero path.
    pub zero: bool,
    /// Largest sampled wavenumber; defaults to min(grid dealias radius, 32).
    pub radius: Option<f64>,
    /// Factor multiplying every noise coefficient.
    pub amplitude: f64,
    /// Hoelder parameter delta of the stopping rules, in (0, 1/4).
    pub holder_delta: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { zero: false, radius: None, amplitude: 1.0, holder_delta: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Times at which stresses and sup norms are measured.
    pub times: usize,
    /// Energy is traced at every `energy_stride`-th noise grid time.
    pub energy_stride: usize,
    /// Number of equation-residual checks per iterated stage.
    pub residual_checks: usize,
    /// Number of checkpoint times per iterated stage.
    pub checkpoints: usize,
    /// Probes used to estimate the embedding constants.
    pub probes: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { times: 24, energy_stride: 1, residual_checks: 4, checkpoints: 3, probes: 32 }
    }
}

/// Thresholds of strict mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub quadrature: f64,
    pub divergence: f64,
    pub residual_factor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { quadrature: 0.1, divergence: 1e-10, residual_factor: crate::stress::RESIDUAL_FACTOR }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub checkpoints: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), checkpoints: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloConfig {
    /// Number of independent paths; 0 skips the estimate.
    pub paths: usize,
    /// T in the estimate of P(stopping time >= T).
    pub horizon: f64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self { paths: 0, horizon: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: NoiseMode,
    pub scheme: SchemeParams,
    /// Stopping level L of the multiplicative scheme.
    pub level: f64,
    pub grid: usize,
    /// Time step of the noise grid.
    pub dt: f64,
    pub seed: u64,
    pub strict: bool,
    pub noise: NoiseConfig,
    pub energy: EnergyProfile,
    pub step: StepSettings,
    pub diagnostics: DiagnosticsConfig,
    pub tolerances: Tolerances,
    pub monte_carlo: MonteCarloConfig,
    #[serde(skip_serializing)]
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: NoiseMode::Additive,
            scheme: SchemeParams::default(),
            level: 4.0,
            grid: 512,
            dt: 1e-3,
            seed: 7,
            strict: false,
            noise: NoiseConfig::default(),
            energy: EnergyProfile::Affine { d0: 200.0, d1: 1.0 },
            step: StepSettings::default(),
            diagnostics: DiagnosticsConfig::default(),
            tolerances: Tolerances::default(),
            monte_carlo: MonteCarloConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Last time of the run before stopping.
    pub fn horizon(&self) -> f64 {
        match self.mode {
            NoiseMode::Additive => 1.0,
            NoiseMode::Multiplicative => self.level,
        }
    }

    pub fn validate(&self) -> Result<Schedule, RunError> {
        let schedule = Schedule::new(self.scheme.clone()).map_err(|e| RunError::Config(e.to_string()))?;
        Grid::new(self.grid).map_err(|e| RunError::Config(e.to_string()))?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(RunError::Config(format!("dt = {} must be positive", self.dt)));
        }
        if self.mode == NoiseMode::Multiplicative && !(self.level > 1.0) {
            return Err(RunError::Config(format!("level L = {} must exceed 1", self.level)));
        }
        if !(self.noise.holder_delta > 0.0 && self.noise.holder_delta < 0.25) {
            return Err(RunError::Config(format!("holder_delta = {} must lie in (0, 1/4)", self.noise.holder_delta)));
        }
        if self.diagnostics.times < 2 || self.diagnostics.energy_stride == 0 {
            return Err(RunError::Config("diagnostics need at least two times and a positive stride".into()));
        }
        self.energy.validate(-2.0, self.horizon())?;
        Ok(schedule)
    }

    fn noise_radius(&self, grid: &Grid) -> f64 {
        self.noise.radius.unwrap_or_else(|| grid.dealias_radius().min(32.0))
    }
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, Serialize)]
pub struct StageParameters {
    pub q: usize,
    pub lambda: f64,
    pub ln_lambda: f64,
    pub delta: f64,
    pub ln_delta: f64,
    pub t_start: f64,
    pub noise_cutoff: f64,
    pub mollifier_length: Option<f64>,
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Constants {
    pub c1: f64,
    pub c_s: f64,
    pub c_0: f64,
    pub m0: f64,
    pub eps_gamma: f64,
    pub sup_gamma: f64,
    pub e_sup: f64,
    pub e_inf: f64,
    pub e_sup_derivative: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Stopping {
    pub time: f64,
    pub rule: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarlo {
    pub paths: usize,
    pub horizon: f64,
    /// Fraction of paths whose stopping time is at least `horizon`.
    pub probability: f64,
    pub standard_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub level: usize,
    pub start: f64,
    pub stop: f64,
    pub inductive: InductiveReport,
    /// Relative residual of the base equation at N = 128 (level 0, additive).
    pub equation_residual: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Purity {
    /// Sum of |w^(m)|^2 over lattice modes outside lambda/2 <= |m| <= 2 lambda.
    pub mass_outside_annulus: f64,
    pub mass_outside_band: f64,
    pub relative_divergence: f64,
    /// Modes shared by the supports of y_l and w.
    pub overlap_y_l: usize,
    /// Modes shared by the supports of w and z_{q+1}.
    pub overlap_z: usize,
    /// Sum of |y_{q+1}^|^2 outside B(0, 2 lambda_{q+1}).
    pub mass_outside_ball: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Quadrature {
    pub samples: usize,
    pub max_relative_gap: f64,
    pub mean_relative_gap: f64,
    /// Largest |e - |y+z|^2 - (e - |y_l+z_l|^2 - sum 4 chi^2 rho (2 pi)^2)| seen, relative to e.
    pub max_split_defect: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Cauchy {
    pub measured: f64,
    pub bound: f64,
    pub time: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StressSummary {
    pub max: ComponentNorms,
    /// Largest |R_{q+1}| / target over the diagnostic times.
    pub max_target_ratio: f64,
    /// Largest sup |grad(p_{q+1} - p_solved)| at the residual-check times, p_solved from the divergence of the equation.
    pub max_pressure_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub level: usize,
    pub lambda: f64,
    pub tau: f64,
    pub mollifier_length: f64,
    pub difference_step: f64,
    pub anchors: usize,
    pub rho_min: f64,
    pub rho_max: f64,
    pub drift_zero: bool,
    pub gamma_clips: usize,
    pub purity: Purity,
    pub quadrature: Quadrature,
    pub residual: Vec<ResidualCheck>,
    pub stress: StressSummary,
    pub cauchy: Cauchy,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub config: RunConfig,
    pub schedule: Vec<StageParameters>,
    pub admissibility: Admissibility,
    pub constants: Constants,
    pub stopping: Stopping,
    pub monte_carlo: Option<MonteCarlo>,
    pub stages: Vec<StageReport>,
    pub steps: Vec<StepReport>,
    pub failures: Vec<String>,
    /// What each reported quantity measures.
    pub anchors: Vec<(&'static str, &'static str)>,
}

/// Descriptions attached to the reported quantities.
pub const ANCHORS: [(&str, &str); 12] = [
    ("schedule", "lambda_q = a^(b^q), delta_q = lambda_1^(2 beta - 1) lambda_q^(-2 beta), t_q = -2 + sum delta_i^(1/2)"),
    ("constants.m0", "amplitude constant: M0^(1/2) = 4 C1 sup|gamma_k| / pi"),
    ("stopping", "additive: first crossing of the regularity, time-Hoelder or stress-budget threshold, capped at 1; multiplicative: T_L"),
    ("stages.inductive", "inductive hypotheses: frequency supports, sup sizes, material derivative, stress bound, energy sandwich"),
    ("stages.equation_residual", "base step: P(N(z_0) + Lambda^gamma z_0 - Lambda^theta z_0) - div R_0"),
    ("steps.purity", "w_{q+1} lives in lambda_{q+1}/2 <= |m| <= 2 lambda_{q+1}, is divergence free and disjoint from y_l and z_{q+1}"),
    ("steps.quadrature", "|w|^2_{H^(1/2)} against sum_j 4 chi_j^2 rho_j (2 pi)^2"),
    ("steps.residual", "P(relaxed equation) - div R_{q+1} against the Richardson error of d_t w"),
    ("steps.stress", "transport, Nash, linear, oscillation and two commutator stresses; target eps/(32(2 pi)^2) lambda_{q+3} delta_{q+3} e(t)"),
    ("steps.cauchy", "|y_{q+1} - y_q| <= M0^(1/2) e_bar^(1/2) delta_{q+1}^(1/2), times Upsilon_l^(-1/2) e^(3 L^(1/4)/2) under multiplicative noise"),
    ("steps.gamma_clips", "samples at which the energy gap function was negative and clipped to zero"),
    ("monte_carlo", "empirical probability that the stopping time reaches the horizon"),
];

/// One row of energy_trace.csv.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EnergyRow {
    pub stage: usize,
    pub t: f64,
    pub e: f64,
    pub energy: f64,
    /// (e - energy) / (lambda_{q+1} delta_{q+1} e).
    pub gap_ratio: f64,
    /// Relative gap between |w|^2 and its quadrature; empty for the base stage.
    pub quadrature_gap: Option<f64>,
}

/// One row of stress_norms.csv.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StressRow {
    pub stage: usize,
    pub t: f64,
    pub transport: f64,
    pub nash: f64,
    pub linear: f64,
    pub oscillation: f64,
    pub com1: f64,
    pub com2: f64,
    pub total: f64,
    pub target: f64,
}

/// A field snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub name: String,
    pub n: usize,
    pub components: usize,
    pub time_index: i64,
    pub time: f64,
    /// Component-major, then row-major physical values.
    pub values: Vec<f64>,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSQG1\0\0\0";

impl Checkpoint {
    pub fn from_field<const C: usize>(name: &str, f: &crate::spectral::Field<C>, time_index: i64, time: f64) -> Self {
        let n = f.grid().n();
        let mut values = Vec::with_capacity(C * n * n);
        for comp in f.physical() {
            values.extend(comp);
        }
        Self { name: name.to_string(), n, components: C, time_index, time, values }
    }

    /// Header: magic, N, component count, time index (all 8 bytes, little endian), time; then the values.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.components as u64).to_le_bytes())?;
        w.write_all(&self.time_index.to_le_bytes())?;
        w.write_all(&self.time.to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 * self.values.len());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from(name: &str, r: &mut impl Read) -> std::io::Result<Self> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        if &word != CHECKPOINT_MAGIC {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "not an MSQG1 checkpoint"));
        }
        let mut next = || -> std::io::Result<[u8; 8]> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(b)
        };
        let n = u64::from_le_bytes(next()?) as usize;
        let components = u64::from_le_bytes(next()?) as usize;
        let time_index = i64::from_le_bytes(next()?);
        let time = f64::from_le_bytes(next()?);
        let mut raw = vec![0u8; 8 * components * n * n];
        r.read_exact(&mut raw)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self { name: name.to_string(), n, components, time_index, time, values })
    }

    pub fn file_name(&self) -> String {
        format!("{}_t{}.msqg", self.name, self.time_index)
    }
}

/// Everything a run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub report: Report,
    pub energy: Vec<EnergyRow>,
    pub stress: Vec<StressRow>,
    pub checkpoints: Vec<Checkpoint>,
    /// A non-finite value was met.
    pub non_finite: bool,
}

impl RunOutput {
    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(&self.report).expect("report serialises")
    }

    pub fn exit_code(&self, strict: bool) -> i32 {
        if self.non_finite {
            4
        } else if strict && !self.report.failures.is_empty() {
            3
        } else {
            0
        }
    }

    pub fn write(&self, dir: &Path, checkpoints: bool) -> Result<(), RunError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.report_json())?;
        write_csv(&dir.join("energy_trace.csv"), &self.energy)?;
        write_csv(&dir.join("stress_norms.csv"), &self.stress)?;
        if checkpoints {
            for c in &self.checkpoints {
                let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(c.file_name()))?);
                c.write_to(&mut f)?;
                f.flush()?;
            }
        }
        Ok(())
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| RunError::Io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| RunError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- pipeline

fn evenly(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 || hi <= lo {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Noise grid times i dt inside [lo, hi], every `stride`-th one.
fn grid_times(lo: f64, hi: f64, dt: f64, stride: usize) -> Vec<f64> {
    let first = (lo / dt - 1e-9).ceil() as i64;
    let last = (hi / dt + 1e-9).floor() as i64;
    (first..=last).step_by(stride).map(|i| i as f64 * dt).collect()
}

fn sample_forcing(config: &RunConfig, grid: &Grid) -> Result<Forcing, RunError> {
    let steps = (config.horizon() / config.dt).ceil() as usize;
    Ok(match config.mode {
        NoiseMode::Additive => {
            let spec = OuSpec {
                radius: config.noise_radius(grid),
                dt: config.dt,
                steps,
                amplitude: config.noise.amplitude,
                sigma: config.scheme.sigma,
            };
            let path = if config.noise.zero { OuPath::zero(&spec) } else { OuPath::sample(&spec, config.seed, 0)? };
            Forcing::Additive(Arc::new(path))
        }
        NoiseMode::Multiplicative => {
            let path = if config.noise.zero {
                BrownianPath::zero(config.dt, steps)
            } else {
                BrownianPath::sample(config.dt, steps, config.seed, 0)?
            };
            Forcing::Multiplicative(Arc::new(path))
        }
    })
}

fn stopping(config: &RunConfig, forcing: &Forcing, inputs: &StoppingInputs) -> Result<Stopping, RunError> {
    Ok(match forcing {
        Forcing::Additive(p) => {
            let s = stopping_time_additive(p, &config.scheme, inputs)?;
            Stopping { time: s.time, rule: format!("{:?}", s.rule) }
        }
        Forcing::Multiplicative(b) => {
            let s = stopping_time_multiplicative(b, config.level, config.noise.holder_delta)?;
            Stopping { time: s.time, rule: format!("{:?}", s.rule) }
        }
    })
}

fn monte_carlo(config: &RunConfig, grid: &Grid, inputs: &StoppingInputs) -> Result<Option<MonteCarlo>, RunError> {
    let k = config.monte_carlo.paths;
    if k == 0 {
        return Ok(None);
    }
    let horizon = config.monte_carlo.horizon;
    let steps = (config.horizon().max(horizon) / config.dt).ceil() as usize;
    let mut hits = 0usize;
    for r in 1..=k as u64 {
        let time = match config.mode {
            NoiseMode::Additive => {
                let spec = OuSpec {
                    radius: config.noise_radius(grid),
                    dt: config.dt,
                    steps,
                    amplitude: config.noise.amplitude,
                    sigma: config.scheme.sigma,
                };
                stopping_time_additive(&OuPath::sample(&spec, config.seed, r)?, &config.scheme, inputs)?.time
            }
            NoiseMode::Multiplicative => {
                let b = BrownianPath::sample(config.dt, steps, config.seed, r)?;
                stopping_time_multiplicative(&b, config.level, config.noise.holder_delta)?.time
            }
        };
        if time >= horizon - 1e-12 {
            hits += 1;
        }
    }
    let p = hits as f64 / k as f64;
    Ok(Some(MonteCarlo { paths: k, horizon, probability: p, standard_error: (p * (1.0 - p) / k as f64).sqrt() }))
}

fn schedule_report(schedule: &Schedule) -> Vec<StageParameters> {
    let max = schedule.max_index();
    (0..=max)
        .map(|q| StageParameters {
            q,
            lambda: schedule.lambda(q).value,
            ln_lambda: schedule.lambda(q).ln,
            delta: schedule.delta(q).value,
            ln_delta: schedule.delta(q).ln,
            t_start: schedule.time_start(q),
            noise_cutoff: schedule.noise_cutoff(q).value,
            mollifier_length: (q >= 1).then(|| schedule.mollifier_length(q).value),
            tau: (q >= 1 && q < max).then(|| schedule.tau(q).value),
        })
        .collect()
}

fn finite(x: f64, what: &str) -> Result<f64, RunError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(RunError::Numerical(format!("{what} is not finite")))
    }
}

fn overlap(a: &VectorField, b: &VectorField) -> usize {
    let sa: BTreeSet<usize> = a.support().into_iter().collect();
    b.support().into_iter().filter(|i| sa.contains(i)).count()
}

/// Run the pipeline in memory.
pub fn execute(config: &RunConfig) -> Result<RunOutput, RunError> {
    let schedule = config.validate()?;
    let p = &config.scheme;
    let run_grid = Grid::new(config.grid).map_err(|e| RunError::Config(e.to_string()))?;
    let geometry = Arc::new(DirectionSystem::build().map_err(|e| RunError::Numerical(e.to_string()))?);
    let mut rng = realization_rng(config.seed, 1 << 40);
    let c1 = projection_constant(&mut rng, config.diagnostics.probes);
    let emb = embedding_constants(p.sigma, &mut rng, config.diagnostics.probes);
    let sup_gamma = geometry.sup_gamma();
    let m0 = amplitude_constant(c1, sup_gamma).map_err(|e| RunError::Numerical(e.to_string()))?;
    let bounds = config.energy.bounds(-2.0, config.horizon());
    let constants = Constants {
        c1,
        c_s: emb.c_s,
        c_0: emb.c_0,
        m0,
        eps_gamma: geometry.eps_gamma(),
        sup_gamma,
        e_sup: bounds.sup,
        e_inf: bounds.inf,
        e_sup_derivative: bounds.sup_derivative,
    };
    let inputs = StoppingInputs {
        c_s: emb.c_s,
        c_0: emb.c_0,
        delta: config.noise.holder_delta,
        eps_gamma: geometry.eps_gamma(),
        energy_floor: bounds.inf,
    };
    let forcing = sample_forcing(config, &run_grid)?;
    let stop = stopping(config, &forcing, &inputs)?;
    let mc = monte_carlo(config, &run_grid, &inputs)?;
    let level = (config.mode == NoiseMode::Multiplicative).then_some(config.level);
    let ind = InductiveConstants { m0, e_bar: bounds.sup, eps_gamma: geometry.eps_gamma(), level };
    let stop_time = stop.time;
    let d = &config.diagnostics;

    let mut failures = Vec::new();
    let mut energy_rows = Vec::new();
    let mut stress_rows = Vec::new();
    let mut checkpoints = Vec::new();
    let mut stages = Vec::new();
    let mut steps = Vec::new();

    let base = Arc::new(BaseStage::new(&schedule, forcing.clone())?);
    {
        let start = schedule.time_start(0);
        let times = evenly(start, stop_time, d.times);
        let etimes = grid_times(start, stop_time, config.dt, d.energy_stride);
        let inductive = check_inductive(&*base, &schedule, &config.energy, &ind, &times, &energy_samples(&*base, &etimes)?)?;
        let window = schedule.gap_scale(1).value;
        for &t in &etimes {
            let e = config.energy.value(t);
            let energy = finite(base.energy(t)?, "base energy")?;
            energy_rows.push(EnergyRow { stage: 0, t, e, energy, gap_ratio: (e - energy) / (window * e), quadrature_gap: None });
        }
        let target_scale = geometry.eps_gamma() / (32.0 * (2.0 * std::f64::consts::PI).powi(2)) * schedule.gap_scale(2).value;
        for &t in &times {
            let r = finite(base.stress(t)?.sup_norm(), "base stress")?;
            stress_rows.push(StressRow {
                stage: 0,
                t,
                transport: 0.0,
                nash: 0.0,
                linear: 0.0,
                oscillation: 0.0,
                com1: 0.0,
                com2: 0.0,
                total: r,
                target: target_scale * config.energy.value(t) * ind_stress_factor(level),
            });
        }
        let equation_residual = match config.mode {
            NoiseMode::Additive => {
                let fine = Grid::new(128).expect("valid grid");
                let worst = times.iter().map(|&t| base.equation_residual(&fine, t)).collect::<Result<Vec<_>, _>>()?;
                Some(worst.into_iter().fold(0.0, f64::max))
            }
            NoiseMode::Multiplicative => None,
        };
        if inductive.energy_violations > 0 {
            failures.push(format!("stage 0: {} energy samples outside the window", inductive.energy_violations));
        }
        stages.push(StageReport { level: 0, start, stop: stop_time, inductive, equation_residual });
    }

    if p.stages >= 2 {
        if p.stages > 2 {
            return Err(RunError::Config(format!(
                "{} stages requested; stage 2 needs lambda_2 = {} and a grid of side > {}, only one iteration is resolvable",
                p.stages,
                schedule.lambda(2).value,
                (6.75 * schedule.lambda(2).value).ceil()
            )));
        }
        let start = schedule.time_start(1);
        if stop_time <= start {
            return Err(RunError::Config(format!("stopping time {stop_time} precedes the stage start {start}")));
        }
        let step = Arc::new(Step::new(
            base.clone() as Arc<dyn Stage>,
            forcing.clone(),
            &schedule,
            geometry.clone(),
            config.energy.clone(),
            run_grid.clone(),
            stop_time,
            &config.step,
        )?);
        let stage = IteratedStage::with_default_step(step.clone(), p.gamma, p.ou_exponent());
        let mut sinks = Sinks { energy: &mut energy_rows, stress: &mut stress_rows, checkpoints: &mut checkpoints, failures: &mut failures };
        let (report, inductive) = iterate_diagnostics(config, &schedule, &stage, &ind, level, stop_time, &mut sinks)?;
        if inductive.energy_violations > 0 {
            failures.push(format!("stage 1: {} energy samples outside the window", inductive.energy_violations));
        }
        stages.push(StageReport { level: 1, start, stop: stop_time, inductive, equation_residual: None });
        steps.push(report);
    }

    let non_finite = energy_rows.iter().any(|r| !r.energy.is_finite()) || stress_rows.iter().any(|r| !r.total.is_finite());
    let report = Report {
        schema: REPORT_SCHEMA,
        config: config.clone(),
        schedule: schedule_report(&schedule),
        admissibility: admissibility(&schedule, config.mode, config.level),
        constants,
        stopping: stop,
        monte_carlo: mc,
        stages,
        steps,
        failures,
        anchors: ANCHORS.to_vec(),
    };
    Ok(RunOutput { report, energy: energy_rows, stress: stress_rows, checkpoints, non_finite })
}

fn ind_stress_factor(level: Option<f64>) -> f64 {
    level.map_or(1.0, |l| (-3.0 * l.powf(0.25)).exp())
}

/// Where the diagnostics of a step are collected.
struct Sinks<'a> {
    energy: &'a mut Vec<EnergyRow>,
    stress: &'a mut Vec<StressRow>,
    checkpoints: &'a mut Vec<Checkpoint>,
    failures: &'a mut Vec<String>,
}

fn iterate_diagnostics(
    config: &RunConfig,
    schedule: &Schedule,
    stage: &IteratedStage,
    ind: &InductiveConstants,
    level: Option<f64>,
    stop: f64,
    sinks: &mut Sinks,
) -> Result<(StepReport, InductiveReport), RunError> {
    let Sinks { energy: energy_rows, stress: stress_rows, checkpoints, failures } = sinks;
    let mut energies = Vec::new();
    let mut acc = InductiveAccumulator::new(stage.step.q + 1, schedule, &config.energy, ind);
    let step = &*stage.step;
    let d = &config.diagnostics;
    let tol = &config.tolerances;
    let q1 = step.q + 1;
    let lambda = step.lambda;
    let window = schedule.gap_scale(q1 + 1).value;

    // energy and quadrature at every traced grid time
    let mut quad = Quadrature { samples: 0, max_relative_gap: 0.0, mean_relative_gap: 0.0, max_split_defect: 0.0 };
    for t in grid_times(step.start, stop, config.dt, d.energy_stride) {
        let w = step.perturbation(t)?;
        let y_l = step.y_l(t)?;
        let y = &y_l + &w;
        let (energy, base_energy) = match step.mode() {
            NoiseMode::Additive => {
                let z = step.z_next(t);
                ((&y + &z).hs_norm(0.5).powi(2), (&y_l + &z).hs_norm(0.5).powi(2))
            }
            NoiseMode::Multiplicative => {
                let u = step.forcing().upsilon(t).powi(2);
                (u * y.hs_norm(0.5).powi(2), u * y_l.hs_norm(0.5).powi(2))
            }
        };
        let energy = finite(energy, "energy")?;
        let quadrature = step.quadrature(t)?;
        let wn = match step.mode() {
            NoiseMode::Additive => w.hs_norm(0.5).powi(2),
            NoiseMode::Multiplicative => w.hs_norm(0.5).powi(2),
        };
        let gap = (wn - quadrature).abs() / quadrature;
        let e = config.energy.value(t);
        let upsilon2 = match step.mode() {
            NoiseMode::Additive => 1.0,
            NoiseMode::Multiplicative => step.forcing().upsilon(t).powi(2),
        };
        let split = (energy - base_energy - upsilon2 * wn).abs() / e;
        quad.samples += 1;
        quad.max_relative_gap = quad.max_relative_gap.max(gap);
        quad.mean_relative_gap += gap;
        quad.max_split_defect = quad.max_split_defect.max(split);
        energies.push((t, energy));
        energy_rows.push(EnergyRow { stage: q1, t, e, energy, gap_ratio: (e - energy) / (window * e), quadrature_gap: Some(gap) });
    }
    if quad.samples > 0 {
        quad.mean_relative_gap /= quad.samples as f64;
    }
    if quad.max_relative_gap > tol.quadrature {
        failures.push(format!("quadrature gap {} exceeds {}", quad.max_relative_gap, tol.quadrature));
    }

    // sizes, purity, stresses and checkpoints at the diagnostic times
    let times = evenly(step.start, stop, d.times);
    let mut purity = Purity {
        mass_outside_annulus: 0.0,
        mass_outside_band: 0.0,
        relative_divergence: 0.0,
        overlap_y_l: 0,
        overlap_z: 0,
        mass_outside_ball: 0.0,
    };
    let mut max = ComponentNorms { transport: 0.0, nash: 0.0, linear: 0.0, oscillation: 0.0, com1: 0.0, com2: 0.0, total: 0.0 };
    let mut max_ratio = 0.0f64;
    let mut max_pressure = 0.0f64;
    let mut cauchy = Cauchy { measured: 0.0, bound: f64::INFINITY, time: f64::NAN, holds: true };
    let checkpoint_times: BTreeSet<usize> = if d.checkpoints == 0 {
        BTreeSet::new()
    } else {
        (0..d.checkpoints).map(|i| (i * (times.len() - 1)) / d.checkpoints.max(2).saturating_sub(1).max(1)).collect()
    };
    let target_scale = ind.eps_gamma * ind_stress_factor(level) / (32.0 * (2.0 * std::f64::consts::PI).powi(2))
        * schedule.gap_scale(q1 + 2).value;
    let prev = step.prev();
    for (k, &t) in times.iter().enumerate() {
        let snap = stage.snapshot(t)?;
        let frame = &snap.frame;
        let w = &frame.w;
        purity.mass_outside_annulus =
            purity.mass_outside_annulus.max(w.mass_where(|r| r < 0.5 * lambda || r > 2.0 * lambda));
        purity.mass_outside_band =
            purity.mass_outside_band.max(w.mass_where(|r| r < 0.875 * lambda || r > 1.125 * lambda));
        purity.relative_divergence = purity.relative_divergence.max(relative_divergence(w));
        purity.overlap_y_l += overlap(&frame.y_l, w);
        purity.overlap_z += overlap(w, &frame.z_next);
        let y = frame.y_next();
        purity.mass_outside_ball = purity.mass_outside_ball.max(y.mass_outside(2.0 * lambda));

        let b = &snap.breakdown;
        let n = b.norms();
        let total = b.total();
        acc.add(t, &y, &total, &snap.material_derivative);
        let target = target_scale * config.energy.value(t);
        for (m, v) in [
            (&mut max.transport, n.transport),
            (&mut max.nash, n.nash),
            (&mut max.linear, n.linear),
            (&mut max.oscillation, n.oscillation),
            (&mut max.com1, n.com1),
            (&mut max.com2, n.com2),
            (&mut max.total, n.total),
        ] {
            *m = m.max(finite(v, "stress")?);
        }
        max_ratio = max_ratio.max(n.total / target);
        stress_rows.push(StressRow {
            stage: q1,
            t,
            transport: n.transport,
            nash: n.nash,
            linear: n.linear,
            oscillation: n.oscillation,
            com1: n.com1,
            com2: n.com2,
            total: n.total,
            target,
        });

        let y_prev = prev.y(t)?.resample(&step.grid);
        let measured = (&y - &y_prev).sup_norm();
        let mut bound = ind.m0.sqrt() * ind.e_bar.sqrt() * schedule.delta(q1).value.sqrt();
        if let Some(l) = level {
            bound *= frame.upsilon_l.powf(-0.5) * (1.5 * l.powf(0.25)).exp();
        }
        if measured / bound > cauchy.measured / cauchy.bound || cauchy.time.is_nan() {
            cauchy = Cauchy { measured, bound, time: t, holds: true };
        }

        if checkpoint_times.contains(&k) {
            let index = (t / config.dt).round() as i64;
            checkpoints.push(Checkpoint::from_field(&format!("y_q{q1}"), &y, index, t));
            checkpoints.push(Checkpoint::from_field(&format!("stress_q{q1}"), &total.0, index, t));
        }
    }
    cauchy.holds = cauchy.measured <= cauchy.bound;
    if purity.mass_outside_annulus > 0.0 || purity.overlap_y_l > 0 || purity.overlap_z > 0 {
        failures.push("perturbation spectrum leaves its annulus or meets y_l / z".into());
    }
    if purity.relative_divergence > tol.divergence {
        failures.push(format!("relative divergence {} exceeds {}", purity.relative_divergence, tol.divergence));
    }

    // residual checks halfway between anchors, where both cutoffs vary
    let mut residual = Vec::new();
    let picks = evenly(step.start + 2.0 * step.tau, stop - 2.0 * step.tau, d.residual_checks.max(1));
    if stop - step.start > 4.0 * step.tau {
        for t in picks.into_iter().take(d.residual_checks) {
            let t = ((t / step.tau).floor() + 0.5) * step.tau;
            let mut r = stage.residual(t)?;
            r.holds = r.residual[0] <= tol.residual_factor * r.estimate && r.order >= 2.0;
            max_pressure = max_pressure.max(stage.pressure_gap(t)?);
            if !r.holds {
                failures.push(format!("equation residual at t = {t}: ratio {}, order {}", r.ratio, r.order));
            }
            residual.push(r);
        }
    }

    let clips = step.clip_count();
    if clips > 0 {
        failures.push(format!("{clips} energy-gap samples clipped at zero"));
    }
    let anchors = step.anchors();
    let inductive = acc.finish(&energies);
    let report = StepReport {
        level: q1,
        lambda,
        tau: step.tau,
        mollifier_length: step.l,
        difference_step: stage.h,
        anchors: anchors.len(),
        rho_min: anchors.iter().map(|a| a.rho).fold(f64::INFINITY, f64::min),
        rho_max: anchors.iter().map(|a| a.rho).fold(0.0, f64::max),
        drift_zero: step.drift_is_zero(),
        gamma_clips: clips,
        purity,
        quadrature: quad,
        residual,
        stress: StressSummary { max, max_target_ratio: max_ratio, max_pressure_gap: max_pressure },
        cauchy,
    };
    Ok((report, inductive))
}

pub type Pool = rayon::ThreadPool;

/// Thread pool of `workers` threads (0 = rayon default).
pub fn pool(workers: usize) -> Result<Pool, RunError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| RunError::Config(format!("thread pool: {e}")))
}

/// Run inside a pool of `workers` threads.
pub fn execute_with_workers(config: &RunConfig, workers: usize) -> Result<RunOutput, RunError> {
    pool(workers)?.install(|| execute(config))
}
