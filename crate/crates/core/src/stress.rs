//! The Reynolds stress of the perturbed iterate and the residual of the relaxed equation.
//!
//! The new stress is the sum of six parts: transport, Nash, linear, oscillation and
//! the two commutator errors. The time derivative of w in the transport part is a
//! finite difference with step h; the residual check plugs a Richardson-extrapolated
//! derivative into the equation instead, so its size measures the time-discretisation
//! error of the assembled stress and nothing is cancelled by construction.

use crate::iterate::{pressure_from, IterateError, Stage, Step};
use crate::params::NoiseMode;
use crate::spectral::{
    advect, div_sym, grad_transpose_dot, inverse_divergence, lambda_pow, leray, nonlinearity, perp_curl, Grid,
    ScalarField, SymTfField, VectorField,
};
use serde::Serialize;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StressError {
    #[error(transparent)]
    Iterate(#[from] IterateError),
    #[error("time derivative at t = {t} with step {h} needs values outside [{lo}, {hi}]")]
    MissingTimeHalo { t: f64, h: f64, lo: f64, hi: f64 },
}

impl From<StressError> for IterateError {
    fn from(e: StressError) -> Self {
        match e {
            StressError::Iterate(e) => e,
            StressError::MissingTimeHalo { t, lo, hi, .. } => IterateError::OutsideWindow { t, start: lo, stop: hi },
        }
    }
}

/// Formal order of [`time_derivative`].
pub const FD_ORDER: i32 = 4;

const CENTERED: [(f64, f64); 4] = [(-2.0, 1.0), (-1.0, -8.0), (1.0, 8.0), (2.0, -1.0)];
const FORWARD: [(f64, f64); 5] = [(0.0, -25.0), (1.0, 48.0), (2.0, -36.0), (3.0, 16.0), (4.0, -3.0)];

/// Finite-difference derivative of f at t with step h, fourth order: the five-point
/// centred stencil, or the one-sided five-point stencil near the ends of [lo, hi].
pub fn time_derivative(
    f: impl Fn(f64) -> Result<VectorField, IterateError>,
    t: f64,
    h: f64,
    lo: f64,
    hi: f64,
) -> Result<VectorField, StressError> {
    let (stencil, dir): (&[(f64, f64)], f64) = if t - 2.0 * h >= lo && t + 2.0 * h <= hi {
        (&CENTERED, 1.0)
    } else if t >= lo && t + 4.0 * h <= hi {
        (&FORWARD, 1.0)
    } else if t <= hi && t - 4.0 * h >= lo {
        (&FORWARD, -1.0)
    } else {
        return Err(StressError::MissingTimeHalo { t, h, lo, hi });
    };
    let c = dir / (12.0 * h);
    let mut acc: Option<VectorField> = None;
    for &(k, w) in stencil {
        let v = f(t + dir * k * h)?;
        match acc.as_mut() {
            None => acc = Some(v.scale(c * w)),
            Some(a) => a.axpy(c * w, &v),
        }
    }
    Ok(acc.expect("nonempty stencil"))
}

/// The six stress parts at one time.
#[derive(Debug, Clone)]
pub struct StressBreakdown {
    pub transport: SymTfField,
    pub nash: SymTfField,
    pub linear: SymTfField,
    pub oscillation: SymTfField,
    pub com1: SymTfField,
    pub com2: SymTfField,
}

/// Sup norms of the parts and of their sum.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ComponentNorms {
    pub transport: f64,
    pub nash: f64,
    pub linear: f64,
    pub oscillation: f64,
    pub com1: f64,
    pub com2: f64,
    pub total: f64,
}

impl StressBreakdown {
    pub fn parts(&self) -> [&SymTfField; 6] {
        [&self.transport, &self.nash, &self.linear, &self.oscillation, &self.com1, &self.com2]
    }

    /// Sum of the parts, added in a fixed order.
    pub fn total(&self) -> SymTfField {
        let mut acc = self.transport.clone();
        for p in &self.parts()[1..] {
            acc.axpy(1.0, p);
        }
        acc
    }

    pub fn norms(&self) -> ComponentNorms {
        ComponentNorms {
            transport: self.transport.sup_norm(),
            nash: self.nash.sup_norm(),
            linear: self.linear.sup_norm(),
            oscillation: self.oscillation.sup_norm(),
            com1: self.com1.sup_norm(),
            com2: self.com2.sup_norm(),
            total: self.total().sup_norm(),
        }
    }
}

/// Everything the stress formulas need at one time, on the run grid.
pub struct Frame {
    pub t: f64,
    pub y_l: VectorField,
    pub z_l: VectorField,
    pub z_q: VectorField,
    pub z_next: VectorField,
    pub w: VectorField,
    pub r_l: SymTfField,
    /// Mollified nonlinearity of the previous stage.
    pub n_l: VectorField,
    pub upsilon: f64,
    pub upsilon_l: f64,
}

impl Frame {
    pub fn y_next(&self) -> VectorField {
        &self.y_l + &self.w
    }
}

/// Second commutator error, term by term in the additive scheme's original grouping.
pub fn com2_printed(f: &Frame) -> VectorField {
    let lam = |v: &VectorField| lambda_pow(v, 1.0);
    let y1 = f.y_next();
    let dz = &f.z_next - &f.z_q;
    let mz = &f.z_q - &f.z_next;
    let ql = &f.z_q - &f.z_l;
    let lq = &f.z_l - &f.z_q;
    let terms = [
        advect(&lam(&y1), &dz),
        advect(&lam(&dz), &y1),
        grad_transpose_dot(&f.y_l, &lam(&mz)),
        grad_transpose_dot(&mz, &lam(&f.y_l)),
        grad_transpose_dot(&lam(&dz), &f.w),
        perp_curl(&lam(&f.w), &lq).scale(-1.0),
        grad_transpose_dot(&mz, &lam(&f.w)),
        perp_curl(&lam(&f.y_l), &ql),
        advect(&lam(&ql), &f.w),
        perp_curl(&lam(&ql), &f.y_l),
        perp_curl(&lam(&dz), &f.z_next),
        perp_curl(&lam(&ql), &f.z_next),
        perp_curl(&lam(&f.z_l), &dz),
        perp_curl(&lam(&f.z_l), &ql),
    ];
    sum(terms)
}

/// Second commutator error reduced modulo gradients: with U = y_l + z_l and
/// D = z_{q+1} - z_l, N(U,D) + N(D,U) + N(w,D) + N(D,w) + N(D,D) + (grad Lambda(z_l - z_q))^T w.
pub fn com2_reduced(f: &Frame) -> VectorField {
    let u = &f.y_l + &f.z_l;
    let d = &f.z_next - &f.z_l;
    let terms = [
        nonlinearity(&u, &d),
        nonlinearity(&d, &u),
        nonlinearity(&f.w, &d),
        nonlinearity(&d, &f.w),
        nonlinearity(&d, &d),
        grad_transpose_dot(&lambda_pow(&(&f.z_l - &f.z_q), 1.0), &f.w),
    ];
    sum(terms)
}

fn sum<const K: usize>(terms: [VectorField; K]) -> VectorField {
    let mut it = terms.into_iter();
    let mut acc = it.next().expect("at least one term");
    for t in it {
        acc.axpy(1.0, &t);
    }
    acc
}

/// Stress parts given the frame and a value for d_t w.
pub fn assemble(f: &Frame, dw: &VectorField, mode: NoiseMode, gamma: f64, theta: f64) -> StressBreakdown {
    let lam = |v: &VectorField| lambda_pow(v, 1.0);
    let b = inverse_divergence;
    let lw = lam(&f.w);
    match mode {
        NoiseMode::Additive => {
            let u = &f.y_l + &f.z_l;
            let transport = dw + &advect(&lam(&u), &f.w);
            let nash = sum([
                grad_transpose_dot(&lam(&(&f.y_l + &f.z_q)), &f.w),
                advect(&lw, &f.y_l),
                grad_transpose_dot(&f.y_l, &lw).scale(-1.0),
            ]);
            let linear = sum([
                lambda_pow(&f.w, gamma),
                lambda_pow(&f.z_l, gamma).scale(-1.0),
                lambda_pow(&f.z_l, theta),
                lambda_pow(&f.z_next, gamma),
                lambda_pow(&f.z_next, theta).scale(-1.0),
                perp_curl(&lw, &f.z_l),
            ]);
            let mut oscillation = f.r_l.clone();
            oscillation.axpy(1.0, &b(&nonlinearity(&f.w, &f.w)));
            StressBreakdown {
                transport: b(&transport),
                nash: b(&nash),
                linear: b(&linear),
                oscillation,
                com1: b(&(&nonlinearity(&u, &u) - &f.n_l)),
                com2: b(&com2_printed(f)),
            }
        }
        NoiseMode::Multiplicative => {
            let ul = f.upsilon_l;
            let mut transport = dw.clone();
            transport.axpy(ul, &advect(&lam(&f.y_l), &f.w));
            let nash = (&grad_transpose_dot(&lam(&f.y_l), &f.w) + &nonlinearity(&f.w, &f.y_l)).scale(ul);
            let mut linear = lambda_pow(&f.w, gamma);
            linear.axpy(0.5, &f.w);
            let mut oscillation = f.r_l.clone();
            oscillation.axpy(ul, &b(&nonlinearity(&f.w, &f.w)));
            let mut com1 = nonlinearity(&f.y_l, &f.y_l).scale(ul);
            com1.axpy(-1.0, &f.n_l);
            let y1 = f.y_next();
            StressBreakdown {
                transport: b(&transport),
                nash: b(&nash),
                linear: b(&linear),
                oscillation,
                com1: b(&com1),
                com2: b(&nonlinearity(&y1, &y1).scale(f.upsilon - ul)),
            }
        }
    }
}

/// Left side of the relaxed equation without the pressure, for a given d_t y.
pub fn equation_terms(f: &Frame, dy: &VectorField, mode: NoiseMode, gamma: f64, theta: f64) -> VectorField {
    let y = f.y_next();
    match mode {
        NoiseMode::Additive => {
            let v = &y + &f.z_next;
            sum([
                dy.clone(),
                nonlinearity(&v, &v),
                lambda_pow(&y, gamma),
                lambda_pow(&f.z_next, gamma),
                lambda_pow(&f.z_next, theta).scale(-1.0),
            ])
        }
        NoiseMode::Multiplicative => sum([
            dy.clone(),
            y.scale(0.5),
            nonlinearity(&y, &y).scale(f.upsilon),
            lambda_pow(&y, gamma),
        ]),
    }
}

/// Outcome of the residual check at one time.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ResidualCheck {
    pub t: f64,
    pub h: f64,
    /// Sup of P(equation) - div R with the stress built from steps h and h/2.
    pub residual: [f64; 2],
    /// Richardson estimate of the error of the step-h derivative.
    pub estimate: f64,
    pub order: f64,
    /// residual[0] / estimate.
    pub ratio: f64,
    /// Sup of P(d_t y), the scale the residual is compared with.
    pub scale: f64,
    pub holds: bool,
}

/// Difference steps per cutoff spacing tau.
pub const DEFAULT_STEPS_PER_TAU: f64 = 32.0;

/// Allowed ratio of the residual to the time-discretisation error estimate.
pub const RESIDUAL_FACTOR: f64 = 10.0;

/// Quantities of the new iterate at one time.
pub struct Snapshot {
    pub frame: Frame,
    pub breakdown: StressBreakdown,
    pub material_derivative: VectorField,
}

/// The iterate at level q + 1 as a stage.
pub struct IteratedStage {
    pub step: Arc<Step>,
    /// Step of the finite differences in time.
    pub h: f64,
    gamma: f64,
    theta: f64,
}

impl IteratedStage {
    pub fn new(step: Arc<Step>, h: f64, gamma: f64, theta: f64) -> Self {
        Self { step, h, gamma, theta }
    }

    /// Stage with the default difference step tau / 32, which resolves the cutoff ramps.
    pub fn with_default_step(step: Arc<Step>, gamma: f64, theta: f64) -> Self {
        let h = step.tau / DEFAULT_STEPS_PER_TAU;
        Self::new(step, h, gamma, theta)
    }

    fn window(&self) -> (f64, f64) {
        let c = self.step.cutoffs;
        (c.tau * c.first as f64, c.tau * c.last as f64)
    }

    pub fn frame(&self, t: f64) -> Result<Frame, IterateError> {
        let st = &*self.step;
        let m = st.mollified(t)?;
        let g = &st.grid;
        Ok(Frame {
            t,
            y_l: m.y.resample(g),
            z_l: m.z.resample(g),
            z_q: st.z_current(t),
            z_next: st.z_next(t),
            w: st.perturbation(t)?,
            r_l: SymTfField(m.r.0.resample(g)),
            n_l: m.n.resample(g),
            upsilon: st.forcing().upsilon(t),
            upsilon_l: m.upsilon,
        })
    }

    pub fn dw(&self, t: f64, h: f64) -> Result<VectorField, StressError> {
        let (lo, hi) = self.window();
        time_derivative(|s| self.step.perturbation(s), t, h, lo, hi)
    }

    fn dy_l(&self, t: f64, h: f64) -> Result<VectorField, StressError> {
        if self.step.prev().y_is_zero() {
            return Ok(VectorField::zeros(&self.step.grid));
        }
        time_derivative(|s| self.step.y_l(s), t, h, f64::NEG_INFINITY, f64::INFINITY)
    }

    /// Richardson reference derivative from the steps h/2 and h/4.
    fn reference(&self, d: impl Fn(f64) -> Result<VectorField, StressError>) -> Result<VectorField, StressError> {
        let k = 2f64.powi(FD_ORDER);
        let mut r = d(self.h / 4.0)?.scale(k / (k - 1.0));
        r.axpy(-1.0 / (k - 1.0), &d(self.h / 2.0)?);
        Ok(r)
    }

    pub fn breakdown(&self, t: f64) -> Result<StressBreakdown, StressError> {
        self.breakdown_of(&self.frame(t)?)
    }

    /// Breakdown for an already evaluated frame.
    pub fn breakdown_of(&self, f: &Frame) -> Result<StressBreakdown, StressError> {
        let dw = self.dw(f.t, self.h)?;
        Ok(assemble(f, &dw, self.step.mode(), self.gamma, self.theta))
    }

    /// Frame, stress parts and material derivative at t, sharing one d_t w.
    pub fn snapshot(&self, t: f64) -> Result<Snapshot, StressError> {
        let frame = self.frame(t)?;
        let dw = self.dw(t, self.h)?;
        let breakdown = assemble(&frame, &dw, self.step.mode(), self.gamma, self.theta);
        let material_derivative = self.material_derivative_of(&frame, &dw)?;
        Ok(Snapshot { frame, breakdown, material_derivative })
    }

    /// d_t y + (v . grad) y with the unmollified drift of the new iterate.
    fn material_derivative_of(&self, f: &Frame, dw: &VectorField) -> Result<VectorField, IterateError> {
        let dy = &self.dy_l(f.t, self.h)? + dw;
        let y = f.y_next();
        let drift = match self.step.mode() {
            NoiseMode::Additive => lambda_pow(&(&y + &f.z_next), 1.0),
            NoiseMode::Multiplicative => lambda_pow(&y, 1.0).scale(f.upsilon),
        };
        Ok(&dy + &advect(&drift, &y))
    }

    /// Both Com2 forms at t.
    pub fn com2_forms(&self, t: f64) -> Result<(VectorField, VectorField), IterateError> {
        let f = self.frame(t)?;
        Ok((com2_printed(&f), com2_reduced(&f)))
    }

    /// Residual of the relaxed equation for the stress built from steps h and h/2.
    pub fn residual(&self, t: f64) -> Result<ResidualCheck, StressError> {
        let f = self.frame(t)?;
        let mode = self.step.mode();
        let dw = [self.dw(t, self.h)?, self.dw(t, self.h / 2.0)?];
        let dw_ref = self.reference(|h| self.dw(t, h))?;
        let dy_ref = &self.reference(|h| self.dy_l(t, h))? + &dw_ref;
        let lhs = leray(&equation_terms(&f, &dy_ref, mode, self.gamma, self.theta));
        let mut residual = [0.0; 2];
        for (k, d) in dw.iter().enumerate() {
            let r = assemble(&f, d, mode, self.gamma, self.theta).total();
            residual[k] = (&lhs - &div_sym(&r)).sup_norm();
        }
        let k = 2f64.powi(FD_ORDER);
        let estimate = leray(&(&dw[0] - &dw[1]).scale(k / (k - 1.0))).sup_norm();
        let order = (residual[0] / residual[1]).log2();
        let ratio = residual[0] / estimate;
        Ok(ResidualCheck {
            t,
            h: self.h,
            residual,
            estimate,
            order,
            ratio,
            scale: leray(&dy_ref).sup_norm(),
            holds: residual[0] <= RESIDUAL_FACTOR * estimate && order >= 2.0,
        })
    }

    /// Sup of grad(p_book - p_solved), where p_solved comes from the divergence of the equation.
    pub fn pressure_gap(&self, t: f64) -> Result<f64, StressError> {
        let f = self.frame(t)?;
        let dy = &self.dy_l(t, self.h)? + &self.dw(t, self.h)?;
        let r = assemble(&f, &self.dw(t, self.h)?, self.step.mode(), self.gamma, self.theta).total();
        let mut defect = equation_terms(&f, &dy, self.step.mode(), self.gamma, self.theta);
        defect.axpy(-1.0, &div_sym(&r));
        let solved = pressure_from(&defect);
        let book = self.step.pressure_next(t)?;
        Ok(crate::spectral::gradient(&(&book - &solved)).sup_norm())
    }
}

impl Stage for IteratedStage {
    fn level(&self) -> usize {
        self.step.q + 1
    }
    fn start(&self) -> f64 {
        self.step.start
    }
    fn grid(&self) -> &Arc<Grid> {
        &self.step.grid
    }
    fn y_is_zero(&self) -> bool {
        false
    }
    fn y_radius(&self) -> f64 {
        crate::spectral::band_reach(self.step.lambda).max(self.step.prev().y_radius())
    }
    fn y(&self, t: f64) -> Result<VectorField, IterateError> {
        self.step.y_next(t)
    }
    fn stress(&self, t: f64) -> Result<SymTfField, IterateError> {
        Ok(self.breakdown(t)?.total())
    }
    fn pressure(&self, t: f64) -> Result<ScalarField, IterateError> {
        self.step.pressure_next(t)
    }
    fn material_derivative(&self, t: f64) -> Result<VectorField, IterateError> {
        let f = self.frame(t)?;
        let dw = self.dw(t, self.h)?;
        self.material_derivative_of(&f, &dw)
    }
    fn energy(&self, t: f64) -> Result<f64, IterateError> {
        self.step.energy_next(t)
    }
}
