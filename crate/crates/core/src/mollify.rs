//! Space and time mollification.
//!
//! In space the mollifier is the Fourier multiplier exp(-l^2 |m|^2 / 2), strictly
//! positive and at most 1. In time the mollifier is one-sided: a smooth bump
//! supported on (width, 2 width) in the lag variable, applied as a normalised
//! kernel smoother over uniformly spaced samples. Only samples from the past
//! window [t - 2 width, t - width] enter, the weights sum to one and depend
//! smoothly on t.

use crate::spectral::Field;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MollifyError {
    #[error("mollifying at t = {t} needs samples back to {needed}, history starts at {available}")]
    InsufficientHistory { t: f64, needed: f64, available: f64 },
    #[error("no sample falls in the window of width {width} (sample spacing {dt})")]
    UnresolvedWindow { width: f64, dt: f64 },
}

/// Fourier symbol of the spatial mollifier at scale l.
pub fn space_symbol(m: [i64; 2], l: f64) -> f64 {
    let r2 = (m[0] * m[0] + m[1] * m[1]) as f64;
    (-0.5 * l * l * r2).exp()
}

pub fn mollify_space<const C: usize>(f: &Field<C>, l: f64) -> Field<C> {
    f.multiplier(|m| space_symbol(m, l))
}

/// First absolute moment of the spatial kernel at scale 1, int |y| phi(y) dy.
pub const SPACE_KERNEL_MOMENT: f64 = 1.253_314_137_315_500_3;

/// One-sided smoothing kernel in time.
#[derive(Debug, Clone, Copy)]
pub struct TimeKernel {
    pub width: f64,
}

impl TimeKernel {
    pub fn new(width: f64) -> Self {
        Self { width }
    }

    /// Unnormalised bump in the lag s = t - t_i, positive exactly on (width, 2 width).
    pub fn profile(&self, lag: f64) -> f64 {
        let u = (lag / self.width - 1.5) / 0.5;
        if u.abs() >= 1.0 {
            0.0
        } else {
            (1.0 - 1.0 / (1.0 - u * u)).exp()
        }
    }

    /// Normalised weights over samples t_i = origin + i dt (any integer i) at time t.
    pub fn weights(&self, t: f64, origin: f64, dt: f64) -> Result<Vec<(i64, f64)>, MollifyError> {
        let lo = ((t - 2.0 * self.width - origin) / dt).ceil() as i64;
        let hi = ((t - self.width - origin) / dt).floor() as i64;
        let mut out = Vec::new();
        let mut total = 0.0;
        for i in lo..=hi {
            let w = self.profile(t - (origin + i as f64 * dt));
            if w > 0.0 {
                out.push((i, w));
                total += w;
            }
        }
        if total == 0.0 {
            return Err(MollifyError::UnresolvedWindow { width: self.width, dt });
        }
        out.iter_mut().for_each(|(_, w)| *w /= total);
        Ok(out)
    }

    /// Weights restricted to samples i >= first, failing if the window reaches further back.
    pub fn weights_from(&self, t: f64, origin: f64, dt: f64, first: i64) -> Result<Vec<(i64, f64)>, MollifyError> {
        let w = self.weights(t, origin, dt)?;
        if w.iter().any(|&(i, _)| i < first) {
            return Err(MollifyError::InsufficientHistory {
                t,
                needed: t - 2.0 * self.width,
                available: origin + first as f64 * dt,
            });
        }
        Ok(w)
    }

    /// Smooth a scalar sample sequence given by `value(i)`.
    pub fn smooth_scalar(
        &self,
        t: f64,
        origin: f64,
        dt: f64,
        value: impl Fn(i64) -> f64,
    ) -> Result<f64, MollifyError> {
        Ok(self.weights(t, origin, dt)?.iter().map(|&(i, w)| w * value(i)).sum())
    }
}

/// Weighted sum of fields, accumulated in the order given.
pub fn combine<const C: usize>(parts: &[(f64, Field<C>)]) -> Option<Field<C>> {
    let mut it = parts.iter();
    let (w0, f0) = it.next()?;
    let mut acc = f0.scale(*w0);
    for (w, f) in it {
        acc.axpy(*w, f);
    }
    Some(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{Grid, ScalarField};
    use proptest::prelude::*;

    #[test]
    fn spatial_symbol() {
        assert_eq!(space_symbol([0, 0], 0.3), 1.0);
        assert!(space_symbol([3, 4], 0.1) < 1.0 && space_symbol([3, 4], 0.1) > 0.0);
        let grid = Grid::new(16).unwrap();
        let f = ScalarField::from_fn(&grid, |x| [2.0 + x[0].sin()]);
        let g = mollify_space(&f, 0.2);
        assert_eq!(g.mean(0), f.mean(0));
        assert!((g.coeff(0, [1, 0]) - f.coeff(0, [1, 0]) * (-0.02f64).exp()).norm() < 1e-16);
    }

    #[test]
    fn kernel_moment_matches_gaussian() {
        // int |y| (2 pi)^-1 e^{-|y|^2/2} dy = sqrt(pi/2)
        assert!((SPACE_KERNEL_MOMENT - (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn insufficient_history() {
        let k = TimeKernel::new(0.1);
        assert!(matches!(k.weights_from(0.15, 0.0, 0.01, 0), Err(MollifyError::InsufficientHistory { .. })));
        assert!(k.weights_from(0.25, 0.0, 0.01, 0).is_ok());
        assert!(matches!(k.weights(1.0, 0.0, 0.5), Err(MollifyError::UnresolvedWindow { .. })));
    }

    proptest! {
        #[test]
        fn weights_are_causal_and_normalised(t in -2.0f64..1.0, width in 0.01f64..0.2, ratio in 8.0f64..40.0) {
            let dt = width / ratio;
            let k = TimeKernel::new(width);
            let w = k.weights(t, 0.0, dt).unwrap();
            let total: f64 = w.iter().map(|p| p.1).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for &(i, wi) in &w {
                let ti = i as f64 * dt;
                prop_assert!(wi > 0.0);
                prop_assert!(ti > t - 2.0 * width && ti < t - width);
            }
            let c = k.smooth_scalar(t, 0.0, dt, |_| 3.5).unwrap();
            prop_assert!((c - 3.5).abs() < 1e-12);
        }
    }
}
