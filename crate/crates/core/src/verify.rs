//! Invariant suite that runs without a production run.

use crate::geometry::{verify_structure, DirectionSystem, Family};
use crate::iterate::Cutoffs;
use crate::noise::{ou_variance, OuPath, OuSpec};
use crate::params::{Schedule, SchemeParams};
use crate::run::RunError;
use crate::spectral::{
    band_project, div_sym, gradient, inverse_divergence, lambda_pow, leray, random_band_field, relative_divergence,
    sqg_nonlinearity, transport_form, Grid, ModeSet, ScalarField, SparseField, SpectralError, VectorField,
};
use crate::transport::{backward_flow, phase, ConstantDrift, Drift, TransportError};
use num_complex::Complex64 as C64;
use num_rational::Rational64;
use serde::Serialize;
use rand::Rng;

/// One entry of the invariant catalogue.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Invariant {
    pub name: &'static str,
    pub anchor: &'static str,
    pub tolerance: f64,
}

pub const CATALOGUE: [Invariant; 14] = [
    Invariant { name: "inverse-divergence", anchor: "div Bf = P(f - mean f), relative sup error", tolerance: 1e-10 },
    Invariant { name: "leray-idempotent", anchor: "P P f = P f", tolerance: 1e-12 },
    Invariant { name: "leray-gradients", anchor: "P grad g = 0", tolerance: 1e-12 },
    Invariant { name: "fractional-inverse", anchor: "Lambda^r Lambda^-r f = f on mean-free f", tolerance: 1e-12 },
    Invariant { name: "sqg-identity", anchor: "(u.grad)v - (grad v)^T u = u^perp (grad^perp . v), u = Lambda v", tolerance: 1e-8 },
    Invariant { name: "geometry-structure", anchor: "rational unit directions, closed under negation, |k + k'| >= 1/2", tolerance: 0.0 },
    Invariant { name: "geometry-identity", anchor: "c_k(Id) = (7/16, 25/32, 25/32) in exact arithmetic", tolerance: 0.0 },
    Invariant { name: "geometry-reconstruction", anchor: "sum gamma_k^2 k^perp (x) k^perp = R on the working ball", tolerance: 1e-12 },
    Invariant { name: "partition", anchor: "sum_j chi_j^2 = 1 with at most two active cutoffs", tolerance: 1e-12 },
    Invariant { name: "ou-variance", anchor: "E|zeta_m(t)|^2 = g_m^2 (1 - e^(-2 r t)) / (2 r), in standard errors", tolerance: 5.0 },
    Invariant { name: "flow-constant-drift", anchor: "Phi(t, x) = x + v (anchor - t)", tolerance: 1e-10 },
    Invariant { name: "flow-order", anchor: "RK4 flow error order over three step counts", tolerance: 3.5 },
    Invariant { name: "phase-modulus", anchor: "|e^(i lambda k . (Phi - x))| = 1", tolerance: 1e-12 },
    Invariant { name: "band-purity", anchor: "band projection at lambda_1 fits the run grid and is divergence free", tolerance: 1e-10 },
];

#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub holds: bool,
}

fn rel(a: &VectorField, b: &VectorField) -> f64 {
    (a - b).sup_norm() / b.sup_norm().max(f64::MIN_POSITIVE)
}

/// Largest relative errors of the operator identities over `fields` random fields on an n x n grid.
pub fn operator_errors(n: usize, fields: usize, rng: &mut impl rand::Rng) -> [f64; 5] {
    let grid = Grid::new(n).expect("valid grid");
    let mut worst = [0.0f64; 5];
    for _ in 0..fields {
        let f: VectorField = random_band_field(&grid, rng);
        let g: ScalarField = random_band_field(&grid, rng);
        let p = leray(&f);
        worst[0] = worst[0].max(rel(&div_sym(&inverse_divergence(&f)), &leray(&f.mean_free())));
        worst[1] = worst[1].max(rel(&leray(&p), &p));
        let grad = gradient(&g);
        worst[2] = worst[2].max(leray(&grad).sup_norm() / grad.sup_norm());
        let r = rng.random_range(0.1..2.0);
        let m = f.mean_free();
        worst[3] = worst[3].max(rel(&lambda_pow(&lambda_pow(&m, -r), r), &m));
        let v = p.dealias();
        let n_v = sqg_nonlinearity(&v).expect("projected field");
        worst[4] = worst[4].max(rel(&transport_form(&lambda_pow(&v, 1.0), &v), &n_v));
    }
    worst
}

/// Time-dependent, spatially constant drift (cos t, sin t / 2).
struct Oscillating;

impl Drift for Oscillating {
    fn at(&self, t: f64) -> Result<SparseField<2>, TransportError> {
        let mut f = SparseField::zeros(&ModeSet::ball(0.0));
        f.coeffs_mut(0)[0] = C64::new(t.cos(), 0.0);
        f.coeffs_mut(1)[0] = C64::new(0.5 * t.sin(), 0.0);
        Ok(f)
    }
}

/// Errors of the oscillating-drift flow from t = 0 back to anchor 2 with 4, 8 and 16 steps, and the observed order.
pub fn flow_convergence() -> ([f64; 3], f64) {
    let points = [[0.3, -1.1]];
    let exact = [2.0f64.sin(), 0.5 * (1.0 - 2.0f64.cos())];
    let errs = [4usize, 8, 16].map(|steps| {
        let flow = backward_flow(&Oscillating, 2.0, 0.0, &points, steps, 10.0).expect("flow");
        let d = flow.displacement[0];
        (d[0] - exact[0]).hypot(d[1] - exact[1])
    });
    let order = ((errs[0] / errs[1]).log2() + (errs[1] / errs[2]).log2()) / 2.0;
    (errs, order)
}

/// Run every invariant; `grid` is the run grid the band check is built on.
pub fn run_suite(grid: usize, seed: u64) -> Result<Vec<Outcome>, RunError> {
    let run_grid = Grid::new(grid).map_err(|e| RunError::Config(e.to_string()))?;
    let schedule = Schedule::new(SchemeParams::default()).map_err(|e| RunError::Config(e.to_string()))?;
    let mut rng = crate::noise::realization_rng(seed, 1 << 41);
    let mut measured = Vec::with_capacity(CATALOGUE.len());

    let mut ops = [0.0f64; 5];
    for n in [64, 128] {
        let e = operator_errors(n, 10, &mut rng);
        for i in 0..5 {
            ops[i] = ops[i].max(e[i]);
        }
    }
    measured.extend(ops);

    let structure = verify_structure().iter().all(|c| c.holds);
    measured.push(if structure { 0.0 } else { 1.0 });
    let sys = DirectionSystem::build().map_err(|e| RunError::Numerical(e.to_string()))?;
    let one = Rational64::from_integer(1);
    let zero = Rational64::from_integer(0);
    let expect = [Rational64::new(7, 16), Rational64::new(25, 32), Rational64::new(25, 32)];
    let id_ok = [Family::First, Family::Second]
        .iter()
        .all(|&f| sys.coefficients_exact(f, [one, zero, one]) == expect);
    measured.push(if id_ok { 0.0 } else { 1.0 });
    let e = sys.eps_gamma();
    let mut recon = 0.0f64;
    for i in 0..2000 {
        let fam = if i % 2 == 0 { Family::First } else { Family::Second };
        let r = [1.0 + e * rng.random_range(-1.0..1.0), e * rng.random_range(-1.0..1.0), 1.0 + e * rng.random_range(-1.0..1.0)];
        let g = sys.gamma(fam, r).map_err(|e| RunError::Numerical(e.to_string()))?;
        let back = DirectionSystem::reconstruct(fam, g);
        recon = (0..3).fold(recon, |acc, k| acc.max((back[k] - r[k]).abs()));
    }
    measured.push(recon);

    let tau = schedule.tau(1).value;
    let cut = Cutoffs::new(tau, schedule.time_start(1), 1.0);
    let mut partition = 0.0f64;
    for i in 0..4000 {
        let t = schedule.time_start(1) + 2.0 * tau + (1.0 - schedule.time_start(1) - 4.0 * tau) * i as f64 / 3999.0;
        let active = cut.active(t);
        let sum: f64 = active.iter().map(|(_, c)| c * c).sum();
        partition = partition.max((sum - 1.0).abs());
        if active.len() > 2 {
            partition = f64::INFINITY;
        }
    }
    measured.push(partition);

    // OU variance at the last step, in standard errors, over five modes
    let spec = OuSpec { radius: 2.0, dt: 0.02, steps: 25, amplitude: 1.0, sigma: 0.1 };
    let paths = 2000u64;
    let mut sums = Vec::new();
    let mut squares = Vec::new();
    let mut reference = None;
    for r in 0..paths {
        let p = OuPath::sample(&spec, seed, (1 << 42) + r).map_err(|e| RunError::Config(e.to_string()))?;
        let last = p.samples.last().expect("samples");
        if reference.is_none() {
            sums = vec![0.0; last.len()];
            squares = vec![0.0; last.len()];
            reference = Some((p.rates.clone(), p.coefficients.clone()));
        }
        for (k, z) in last.iter().enumerate() {
            sums[k] += z.norm_sqr();
            squares[k] += z.norm_sqr().powi(2);
        }
    }
    let (rates, coefficients) = reference.expect("at least one path");
    let t_end = spec.dt * spec.steps as f64;
    let mut z_score = 0.0f64;
    for k in 0..5.min(sums.len()) {
        let mean = sums[k] / paths as f64;
        let var = squares[k] / paths as f64 - mean * mean;
        let se = (var / paths as f64).sqrt();
        z_score = z_score.max((mean - ou_variance(coefficients[k], rates[k], t_end)).abs() / se);
    }
    measured.push(z_score);

    let flow_grid = Grid::new(32).expect("valid grid");
    let pts: Vec<[f64; 2]> = (0..flow_grid.len()).map(|i| flow_grid.point(i)).collect();
    let v = [0.7, -0.4];
    let flow = backward_flow(&ConstantDrift(v), 0.5, 0.2, &pts, 4, 10.0).map_err(|e| RunError::Numerical(e.to_string()))?;
    let constant = flow
        .displacement
        .iter()
        .map(|d| (d[0] - v[0] * 0.3).abs().max((d[1] - v[1] * 0.3).abs()))
        .fold(0.0, f64::max);
    measured.push(constant);
    let (_, order) = flow_convergence();
    measured.push(order);
    let modulus = phase(&flow, [0.6, 0.8], 25.0).iter().map(|z| (z.norm() - 1.0).abs()).fold(0.0, f64::max);
    measured.push(modulus);

    let f: VectorField = random_band_field(&run_grid, &mut rng);
    let lambda = schedule.lambda(1).value;
    let band = band_project(&f, [0.6, 0.8], lambda).map_err(|e| match e {
        SpectralError::BandExceedsGrid { .. } => RunError::Config(format!("grid {grid}: {e}")),
        other => RunError::Numerical(other.to_string()),
    })?;
    measured.push(relative_divergence(&band));

    Ok(CATALOGUE
        .iter()
        .zip(measured)
        .map(|(inv, m)| {
            let holds = if inv.name == "flow-order" { m >= inv.tolerance } else { m <= inv.tolerance };
            Outcome { name: inv.name, measured: m, tolerance: inv.tolerance, holds }
        })
        .collect())
}
