//! Frequency, amplitude and time-scale schedule of the iteration.
//!
//! Every geometric quantity is kept twice: as a natural logarithm, which is
//! always finite, and as a float that is flagged once it exceeds
//! [`FLOAT_CEILING`]. Admissibility inequalities are evaluated on the
//! logarithms so that parameter choices far beyond the float range can still
//! be classified.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Floats above this are reported as overflowed.
pub const FLOAT_CEILING: f64 = 1e300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("frequency base a = {a} and exponent base b = {b} must both be at least 2")]
    NonPositiveBase { a: u64, b: u32 },
    #[error("the schedule needs at least one stage")]
    ZeroStages,
    #[error("parameter {name} = {value} is not a finite number")]
    NonFinite { name: &'static str, value: f64 },
    #[error("sup of the geometric coefficients is unavailable ({0})")]
    GeometryUnavailable(f64),
}

/// Which forcing the iteration is run against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Additive,
    Multiplicative,
}

/// Scheme exponents and bases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeParams {
    pub a: u64,
    pub b: u32,
    pub beta: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub stages: usize,
}

impl Default for SchemeParams {
    /// Small-frequency demonstration values.
    fn default() -> Self {
        Self { a: 5, b: 2, beta: 0.51, alpha: 1.25, gamma: 1.0, sigma: 0.1, stages: 2 }
    }
}

impl SchemeParams {
    /// Drift exponent of the Ornstein-Uhlenbeck part, 3/2 - 2 sigma.
    pub fn ou_exponent(&self) -> f64 {
        1.5 - 2.0 * self.sigma
    }
}

/// A positive quantity stored as its logarithm and, when representable, as a float.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scale {
    pub ln: f64,
    pub value: f64,
    pub overflow: bool,
}

impl Scale {
    pub fn from_ln(ln: f64) -> Self {
        if ln > FLOAT_CEILING.ln() {
            Self { ln, value: f64::INFINITY, overflow: true }
        } else {
            Self { ln, value: ln.exp(), overflow: false }
        }
    }
}

/// Per-stage parameters for q = 0..=stages+3.
#[derive(Debug, Clone, Serialize)]
pub struct Schedule {
    pub params: SchemeParams,
    lambda: Vec<Scale>,
    delta: Vec<Scale>,
    time_start: Vec<f64>,
}

impl Schedule {
    pub fn new(params: SchemeParams) -> Result<Self, ParamError> {
        if params.a < 2 || params.b < 2 {
            return Err(ParamError::NonPositiveBase { a: params.a, b: params.b });
        }
        if params.stages == 0 {
            return Err(ParamError::ZeroStages);
        }
        for (name, value) in [
            ("beta", params.beta),
            ("alpha", params.alpha),
            ("gamma", params.gamma),
            ("sigma", params.sigma),
        ] {
            if !value.is_finite() {
                return Err(ParamError::NonFinite { name, value });
            }
        }
        let len = params.stages + 4;
        let ln_a = (params.a as f64).ln();
        let b = params.b as f64;
        let ln_lambda: Vec<f64> = (0..len).map(|q| b.powi(q as i32) * ln_a).collect();
        let beta = params.beta;
        let ln_delta: Vec<f64> = ln_lambda
            .iter()
            .map(|&l| (2.0 * beta - 1.0) * ln_lambda[1] - 2.0 * beta * l)
            .collect();
        let mut time_start = Vec::with_capacity(len);
        let mut acc = -2.0;
        time_start.push(acc);
        for d in ln_delta.iter().skip(1) {
            acc += (0.5 * d).exp();
            time_start.push(acc);
        }
        Ok(Self {
            params,
            lambda: ln_lambda.into_iter().map(Scale::from_ln).collect(),
            delta: ln_delta.into_iter().map(Scale::from_ln).collect(),
            time_start,
        })
    }

    /// Largest stage index with stored parameters.
    pub fn max_index(&self) -> usize {
        self.lambda.len() - 1
    }

    pub fn lambda(&self, q: usize) -> Scale {
        self.lambda[q]
    }

    pub fn delta(&self, q: usize) -> Scale {
        self.delta[q]
    }

    /// Spatial mollification length l_q = lambda_q^(-alpha), for q >= 1.
    pub fn mollifier_length(&self, q: usize) -> Scale {
        assert!(q >= 1, "mollification lengths start at stage 1");
        Scale::from_ln(-self.params.alpha * self.lambda[q].ln)
    }

    /// Time step tau_q for 1 <= q <= max_index - 1.
    ///
    /// tau_q^(-1) = l_q^(-1/2) lambda_{q+1}^(1/2) delta_{q+1}^(1/2) lambda_q^(1/2) delta_q^(-1/4).
    pub fn tau(&self, q: usize) -> Scale {
        assert!(q >= 1 && q < self.max_index(), "tau_q needs lambda_(q+1)");
        let ln_inv = -0.5 * self.mollifier_length(q).ln
            + 0.5 * (self.lambda[q + 1].ln + self.delta[q + 1].ln)
            + 0.5 * self.lambda[q].ln
            - 0.25 * self.delta[q].ln;
        Scale::from_ln(-ln_inv)
    }

    /// Start time t_q = -2 + sum_{1 <= i <= q} delta_i^(1/2).
    pub fn time_start(&self, q: usize) -> f64 {
        self.time_start[q]
    }

    /// Hard frequency cutoff of the noise entering stage q.
    pub fn noise_cutoff(&self, q: usize) -> Scale {
        Scale::from_ln(self.lambda[q].ln - 4f64.ln())
    }

    /// lambda_q * delta_q, the energy-gap scale of stage q - 1.
    pub fn gap_scale(&self, q: usize) -> Scale {
        Scale::from_ln(self.lambda[q].ln + self.delta[q].ln)
    }
}

/// Outcome of one admissibility inequality, `slack` in log units where it applies.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub holds: bool,
    pub slack: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Regime {
    Theoretical,
    Demonstration,
}

#[derive(Debug, Clone, Serialize)]
pub struct Admissibility {
    pub regime: Regime,
    pub checks: Vec<Check>,
}

fn open_interval(name: &str, x: f64, lo: f64, hi: f64) -> Check {
    Check { name: name.to_string(), holds: x > lo && x < hi, slack: (x - lo).min(hi - x) }
}

/// Evaluate every size condition on the parameters. `horizon` is the
/// stopping level L of the multiplicative scheme and is ignored otherwise.
pub fn admissibility(schedule: &Schedule, mode: NoiseMode, horizon: f64) -> Admissibility {
    let p = &schedule.params;
    let mut checks = vec![
        open_interval("beta in (1/2, 3/4)", p.beta, 0.5, 0.75),
        open_interval("alpha in (1, 3/2)", p.alpha, 1.0, 1.5),
        open_interval("gamma in (0, 3/2)", p.gamma, 0.0, 1.5),
    ];
    let sigma_hi = 0.5 * (1.5 - p.gamma);
    checks.push(Check {
        name: "sigma in (0, (3/2 - gamma)/2]".into(),
        holds: p.sigma > 0.0 && p.sigma <= sigma_hi,
        slack: p.sigma.min(sigma_hi - p.sigma),
    });
    let ln_a = (p.a as f64).ln();
    checks.push(Check {
        name: "a is a multiple of 5".into(),
        holds: p.a % 5 == 0,
        slack: if p.a % 5 == 0 { 0.0 } else { -((p.a % 5) as f64) },
    });
    checks.push(Check { name: "a >= e^16".into(), holds: ln_a >= 16.0, slack: ln_a - 16.0 });
    let b = p.b as f64;
    let need = match mode {
        NoiseMode::Additive => 6.0 / (p.alpha - 0.5),
        NoiseMode::Multiplicative => (6.0 * horizon / (p.alpha - 0.5))
            .max(4.0 * horizon / (3.0 - 2.0 * p.alpha))
            .max(horizon / (1.5 - p.gamma)),
    };
    checks.push(Check { name: format!("b > {need:.6}"), holds: b > need, slack: b - need });
    let target = (4.0f64 / 3.0).ln();
    for q in 0..p.stages {
        let ln_val = b.powi(q as i32 + 1) * (2.0 * p.beta - 1.0) * (b - 1.0) * ln_a;
        checks.push(Check {
            name: format!("a^(b^{}(2beta-1)(b-1)) >= 4/3", q + 1),
            holds: ln_val >= target,
            slack: ln_val - target,
        });
    }
    let regime = if checks.iter().all(|c| c.holds) { Regime::Theoretical } else { Regime::Demonstration };
    Admissibility { regime, checks }
}

/// Amplitude constant M0 with M0^(1/2) = 4 C1 sup|gamma_k| / pi.
pub fn amplitude_constant(c1: f64, sup_gamma: f64) -> Result<f64, ParamError> {
    if !(sup_gamma.is_finite() && sup_gamma > 0.0) {
        return Err(ParamError::GeometryUnavailable(sup_gamma));
    }
    let root = 4.0 * c1 * sup_gamma / PI;
    Ok(root * root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn demo() -> Schedule {
        Schedule::new(SchemeParams::default()).unwrap()
    }

    #[test]
    fn demo_frequencies() {
        let s = demo();
        let expect = [5.0, 25.0, 625.0, 390625.0];
        for (q, e) in expect.iter().enumerate() {
            assert!((s.lambda(q).value - e).abs() <= 1e-9 * e);
        }
        assert!((s.lambda(1).value * s.delta(1).value - 1.0).abs() < 1e-12);
        assert!((s.time_start(1) + 1.8).abs() < 1e-12);
    }

    #[test]
    fn demo_tau_and_gap() {
        let s = demo();
        let (lam1, lam2) = (25f64, 625f64);
        let l1 = lam1.powf(-1.25);
        let d1 = 1.0 / lam1;
        let d2 = lam1.powf(0.02) * lam2.powf(-1.02);
        let inv = l1.powf(-0.5) * (lam2 * d2).sqrt() * lam1.sqrt() * d1.powf(-0.25);
        assert!((s.tau(1).value * inv - 1.0).abs() < 1e-12);
        assert!((s.tau(1).value - 0.01236).abs() < 5e-5);
        assert!((s.gap_scale(2).value - 25f64.powf(-0.02)).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let mut p = SchemeParams::default();
        p.a = 1;
        assert!(matches!(Schedule::new(p.clone()), Err(ParamError::NonPositiveBase { .. })));
        p.a = 5;
        p.stages = 0;
        assert_eq!(Schedule::new(p).unwrap_err(), ParamError::ZeroStages);
        assert!(amplitude_constant(1.0, f64::NAN).is_err());
    }

    #[test]
    fn overflow_is_flagged() {
        let p = SchemeParams { a: 10_000_000_000, b: 9, stages: 3, ..Default::default() };
        let s = Schedule::new(p).unwrap();
        assert!(s.lambda(s.max_index()).overflow);
        assert!(s.lambda(s.max_index()).ln.is_finite());
    }

    #[test]
    fn regimes() {
        let s = demo();
        let adm = admissibility(&s, NoiseMode::Additive, 1.0);
        assert_eq!(adm.regime, Regime::Demonstration);
        let b_check = adm.checks.iter().find(|c| c.name.starts_with("b >")).unwrap();
        assert!(!b_check.holds);
        assert!((b_check.slack + 6.0).abs() < 1e-12);

        let p = SchemeParams { a: 9_000_000, b: 9, stages: 2, ..Default::default() };
        let adm = admissibility(&Schedule::new(p).unwrap(), NoiseMode::Additive, 1.0);
        assert_eq!(adm.regime, Regime::Theoretical, "{:?}", adm.checks);
    }

    #[test]
    fn amplitude_constant_scaling() {
        let m = amplitude_constant(1.0, 1.0).unwrap();
        assert!((m - (4.0 / PI).powi(2)).abs() < 1e-15);
        assert!((amplitude_constant(2.0, 1.0).unwrap() - 4.0 * m).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn schedule_monotone(a in 2u64..1000, b in 2u32..5, beta in 0.5001f64..0.7499) {
            let p = SchemeParams { a, b, beta, stages: 2, ..Default::default() };
            let s = Schedule::new(p).unwrap();
            for q in 0..s.max_index() {
                prop_assert!(s.lambda(q + 1).ln > s.lambda(q).ln);
                prop_assert!(s.delta(q + 1).ln < s.delta(q).ln);
                prop_assert!(s.time_start(q + 1) >= s.time_start(q));
            }
            prop_assert!(s.delta(1).ln + s.lambda(1).ln == 0.0 || (s.delta(1).ln + s.lambda(1).ln).abs() < 1e-12);
        }
    }
}
