//! Backward characteristics of the mollified drift and the quantities carried by them.
//!
//! The flow Phi_j(t, x) solves D_t Phi = 0 with Phi_j(tau j, x) = x. It is obtained by
//! integrating dX/ds = v(s, X) from (t, x) back to the anchor time tau j with classical
//! RK4. The number of steps is fixed per anchor so that Phi_j depends smoothly on t.

use crate::spectral::{Grid, SparseField, VectorField};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("drift speed {speed} times step {step} exceeds the grid spacing {spacing}")]
    CflViolation { speed: f64, step: f64, spacing: f64 },
    #[error("drift unavailable at t = {t}: {reason}")]
    DriftUnavailable { t: f64, reason: String },
}

/// Time-dependent band-limited velocity.
pub trait Drift: Sync {
    fn at(&self, t: f64) -> Result<SparseField<2>, TransportError>;

    /// True when the drift vanishes at every time of interest.
    fn is_zero(&self) -> bool {
        false
    }
}

/// Spatially constant drift.
#[derive(Debug, Clone)]
pub struct ConstantDrift(pub [f64; 2]);

impl Drift for ConstantDrift {
    fn at(&self, _t: f64) -> Result<SparseField<2>, TransportError> {
        let mut f = SparseField::zeros(&crate::spectral::ModeSet::ball(0.0));
        f.coeffs_mut(0)[0] = C64::new(self.0[0], 0.0);
        f.coeffs_mut(1)[0] = C64::new(self.0[1], 0.0);
        Ok(f)
    }

    fn is_zero(&self) -> bool {
        self.0 == [0.0, 0.0]
    }
}

/// Phi(t, .) - x at the points it was computed for.
#[derive(Debug, Clone)]
pub struct FlowMap {
    pub anchor: f64,
    pub time: f64,
    pub displacement: Vec<[f64; 2]>,
}

impl FlowMap {
    pub fn identity(anchor: f64, time: f64, points: usize) -> Self {
        Self { anchor, time, displacement: vec![[0.0, 0.0]; points] }
    }

    pub fn is_identity(&self) -> bool {
        self.displacement.iter().all(|d| *d == [0.0, 0.0])
    }
}

/// Steps used for every flow anchored at spacing `tau` with target step `dt_flow`.
pub fn flow_steps(tau: f64, dt_flow: f64) -> usize {
    ((tau / dt_flow).ceil() as usize).max(1)
}

fn add(a: [f64; 2], b: [f64; 2], s: f64) -> [f64; 2] {
    [a[0] + s * b[0], a[1] + s * b[1]]
}

/// Integrate from time t at `points` back to `anchor` in `steps` RK4 steps.
pub fn backward_flow(
    drift: &dyn Drift,
    anchor: f64,
    t: f64,
    points: &[[f64; 2]],
    steps: usize,
    spacing: f64,
) -> Result<FlowMap, TransportError> {
    if drift.is_zero() || t == anchor {
        return Ok(FlowMap::identity(anchor, t, points.len()));
    }
    let h = (anchor - t) / steps as f64;
    let mut x: Vec<[f64; 2]> = points.to_vec();
    let velocity = |s: f64, pts: &[[f64; 2]]| -> Result<Vec<[f64; 2]>, TransportError> {
        let field = drift.at(s)?;
        let v = field.eval_many(pts);
        let speed = v.iter().map(|w| w[0].hypot(w[1])).fold(0.0, f64::max);
        if speed * h.abs() > spacing {
            return Err(TransportError::CflViolation { speed, step: h.abs(), spacing });
        }
        Ok(v)
    };
    for n in 0..steps {
        let s = t + n as f64 * h;
        let k1 = velocity(s, &x)?;
        let x2: Vec<_> = x.par_iter().zip(&k1).map(|(a, k)| add(*a, *k, 0.5 * h)).collect();
        let k2 = velocity(s + 0.5 * h, &x2)?;
        let x3: Vec<_> = x.par_iter().zip(&k2).map(|(a, k)| add(*a, *k, 0.5 * h)).collect();
        let k3 = velocity(s + 0.5 * h, &x3)?;
        let x4: Vec<_> = x.par_iter().zip(&k3).map(|(a, k)| add(*a, *k, h)).collect();
        let k4 = velocity(s + h, &x4)?;
        x.par_iter_mut().enumerate().for_each(|(i, p)| {
            for c in 0..2 {
                p[c] += h / 6.0 * (k1[i][c] + 2.0 * k2[i][c] + 2.0 * k3[i][c] + k4[i][c]);
            }
        });
    }
    let displacement = x.iter().zip(points).map(|(a, b)| [a[0] - b[0], a[1] - b[1]]).collect();
    Ok(FlowMap { anchor, time: t, displacement })
}

/// Flow evaluated at every point of a grid.
pub fn grid_flow(
    drift: &dyn Drift,
    grid: &Arc<Grid>,
    anchor: f64,
    t: f64,
    steps: usize,
) -> Result<FlowMap, TransportError> {
    let points: Vec<[f64; 2]> = (0..grid.len()).map(|i| grid.point(i)).collect();
    backward_flow(drift, anchor, t, &points, steps, grid.spacing())
}

/// e^{i lambda k . (Phi - x)} at each point of the flow.
pub fn phase(flow: &FlowMap, k: [f64; 2], lambda: f64) -> Vec<C64> {
    flow.displacement.iter().map(|d| C64::from_polar(1.0, lambda * (k[0] * d[0] + k[1] * d[1]))).collect()
}

/// Evaluate a band-limited field at Phi(x) for each grid point x.
pub fn compose<const C: usize>(field: &SparseField<C>, grid: &Grid, flow: &FlowMap) -> Vec<[f64; C]> {
    let pts: Vec<[f64; 2]> =
        flow.displacement.iter().enumerate().map(|(i, d)| add(grid.point(i), *d, 1.0)).collect();
    field.eval_many(&pts)
}

/// sup |D Phi - Id| over the grid (operator norm), from the periodic displacement.
pub fn gradient_deviation(grid: &Arc<Grid>, flow: &FlowMap) -> f64 {
    let values = [0, 1].map(|c| flow.displacement.iter().map(|d| d[c]).collect());
    let disp = VectorField::from_physical(grid, values);
    let [a1, a2] = disp.partial(0).physical();
    let [b1, b2] = disp.partial(1).physical();
    (0..grid.len())
        .map(|i| {
            let (p, q, r, s) = (a1[i], b1[i], a2[i], b2[i]);
            let fro = p * p + q * q + r * r + s * s;
            let det = p * s - q * r;
            (0.5 * (fro + (fro * fro - 4.0 * det * det).max(0.0).sqrt())).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Growth bound e^{|t - anchor| |grad v|} - 1 for the deviation of D Phi from the identity.
pub fn gradient_deviation_bound(span: f64, grad_sup: f64) -> f64 {
    (span.abs() * grad_sup).exp_m1()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::ModeSet;

    /// v(s, x) = (a cos(w s) sin x2, b sin(w s) cos x1)
    struct Oscillating {
        a: f64,
        b: f64,
        w: f64,
    }

    impl Drift for Oscillating {
        fn at(&self, s: f64) -> Result<SparseField<2>, TransportError> {
            let set = ModeSet::ball(1.0);
            let mut f = SparseField::zeros(&set);
            for (i, m) in set.modes().iter().enumerate() {
                if *m == [0, 1] {
                    // sin x2 = 2 Re(-i/2 e^{i x2})
                    f.coeffs_mut(0)[i] = C64::new(0.0, -0.5 * self.a * (self.w * s).cos());
                }
                if *m == [1, 0] {
                    f.coeffs_mut(1)[i] = C64::new(0.5 * self.b * (self.w * s).sin(), 0.0);
                }
            }
            Ok(f)
        }
    }

    #[test]
    fn constant_drift_closed_form() {
        let grid = Grid::new(16).unwrap();
        let v = [0.7, -1.3];
        let flow = grid_flow(&ConstantDrift(v), &grid, 0.25, 0.31, 7).unwrap();
        for d in &flow.displacement {
            assert!((d[0] + 0.06 * v[0]).abs() < 1e-14 && (d[1] + 0.06 * v[1]).abs() < 1e-14);
        }
        let ph = phase(&flow, [0.6, 0.8], 25.0);
        assert!(ph.iter().all(|z| (z.norm() - 1.0).abs() < 1e-14));
    }

    #[test]
    fn oscillating_drift_converges_at_fourth_order() {
        let d = Oscillating { a: 1.2, b: 0.8, w: 3.0 };
        let pts = vec![[0.3, 1.1], [2.0, 4.0], [5.5, 0.2]];
        let reference = backward_flow(&d, 0.0, 0.4, &pts, 1024, 10.0).unwrap();
        let err = |n| {
            let f = backward_flow(&d, 0.0, 0.4, &pts, n, 10.0).unwrap();
            f.displacement
                .iter()
                .zip(&reference.displacement)
                .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
                .fold(0.0, f64::max)
        };
        let (e1, e2, e3) = (err(4), err(8), err(16));
        assert!((e1 / e2).log2() > 3.7 && (e2 / e3).log2() > 3.7, "{e1} {e2} {e3}");
    }

    #[test]
    fn cfl_violation() {
        let grid = Grid::new(16).unwrap();
        let r = grid_flow(&ConstantDrift([100.0, 0.0]), &grid, 0.0, 0.5, 1);
        assert!(matches!(r, Err(TransportError::CflViolation { .. })));
    }

    #[test]
    fn zero_drift_is_identity() {
        let grid = Grid::new(16).unwrap();
        assert!(grid_flow(&ConstantDrift([0.0, 0.0]), &grid, 0.0, 0.5, 3).unwrap().is_identity());
    }

    #[test]
    fn gradient_growth_within_bound() {
        let grid = Grid::new(32).unwrap();
        let d = Oscillating { a: 1.0, b: 1.0, w: 0.0 };
        let flow = grid_flow(&d, &grid, 0.0, 0.3, 30).unwrap();
        let dev = gradient_deviation(&grid, &flow);
        assert!(dev > 0.0 && dev <= gradient_deviation_bound(0.3, 1.0), "{dev}");
    }

    #[test]
    fn composition_with_constant_shift() {
        let grid = Grid::new(16).unwrap();
        let f = VectorField::from_fn(&grid, |x| [x[0].cos(), 0.0]);
        let s = f.restrict(&ModeSet::ball(2.0));
        let flow = grid_flow(&ConstantDrift([1.0, 0.0]), &grid, 0.0, 0.2, 2).unwrap();
        let vals = compose(&s, &grid, &flow);
        for (i, v) in vals.iter().enumerate() {
            assert!((v[0] - (grid.point(i)[0] - 0.2).cos()).abs() < 1e-13);
        }
    }
}
