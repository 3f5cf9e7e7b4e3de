//! Check loss, its C¹ piecewise-quadratic smoothing, and the exact
//! quadratic (A, b, c) rewriting of the smoothed loss used by the mode solver.
//!
//! The smoothed loss with band parameter `omega` is
//!
//! ```text
//! k(r) = r(tau-1) - (tau-1)^2 omega / 2     r <= (tau-1) omega
//!        r^2 / (2 omega)                    (tau-1) omega < r < tau omega
//!        r tau - tau^2 omega / 2            r >= tau omega
//! ```
//!
//! and for every residual `2 k(r) = a r^2 + b r + c` with `(a, b, c)` depending
//! only on the branch indicator `s`.

use crate::error::{AqmmError, Result};

/// Smallest band parameter accepted; `a = 1/omega` is evaluated with this clamp.
pub const OMEGA_FLOOR: f64 = 1e-12;

/// Quantile level and smoothing band of the approximate check loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedLossParams {
    pub tau: f64,
    pub omega: f64,
}

impl SmoothedLossParams {
    pub fn new(tau: f64, omega: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(AqmmError::Input(format!("tau must lie in (0, 1), got {tau}")));
        }
        if !(omega > 0.0) || !omega.is_finite() {
            return Err(AqmmError::Input(format!("omega must be positive, got {omega}")));
        }
        Ok(Self {
            tau,
            omega: omega.max(OMEGA_FLOOR),
        })
    }

    /// Lower and upper edges of the quadratic band.
    #[inline]
    pub fn band(&self) -> (f64, f64) {
        ((self.tau - 1.0) * self.omega, self.tau * self.omega)
    }

    /// Worst-case gap between the smoothed and the exact check loss.
    pub fn max_gap(&self) -> f64 {
        0.5 * self.omega * self.tau.powi(2).max((1.0 - self.tau).powi(2))
    }
}

/// `rho_tau(r) = r (tau - I(r < 0))`.
#[inline]
pub fn check_loss(r: f64, tau: f64) -> f64 {
    if r < 0.0 {
        r * (tau - 1.0)
    } else {
        r * tau
    }
}

#[inline]
pub fn smoothed_loss(r: f64, params: SmoothedLossParams) -> f64 {
    let SmoothedLossParams { tau, omega } = params;
    let (lo, hi) = params.band();
    if r <= lo {
        r * (tau - 1.0) - 0.5 * (tau - 1.0).powi(2) * omega
    } else if r >= hi {
        r * tau - 0.5 * tau * tau * omega
    } else {
        r * r / (2.0 * omega)
    }
}

/// Derivative of [`smoothed_loss`] with respect to `r`.
#[inline]
pub fn smoothed_loss_derivative(r: f64, params: SmoothedLossParams) -> f64 {
    let (lo, hi) = params.band();
    if r <= lo {
        params.tau - 1.0
    } else if r >= hi {
        params.tau
    } else {
        r / params.omega
    }
}

/// Branch indicator: -1 on the lower linear piece, +1 on the upper one, 0 inside the band.
#[inline]
pub fn sign_indicator(r: f64, params: SmoothedLossParams) -> i8 {
    let (lo, hi) = params.band();
    if r <= lo {
        -1
    } else if r >= hi {
        1
    } else {
        0
    }
}

/// Coefficients `(a, b, c)` of `2 k(r) = a r^2 + b r + c` on the branch `s`.
#[inline]
pub fn abc_coefficients(s: i8, params: SmoothedLossParams) -> (f64, f64, f64) {
    let SmoothedLossParams { tau, omega } = params;
    let s = f64::from(s);
    let s2 = s * s;
    let a = (1.0 - s2) / omega;
    let b = s * ((2.0 * tau - 1.0) * s + 1.0);
    let c = 0.5 * ((1.0 - 2.0 * tau) * omega * s - (1.0 - 2.0 * tau + 2.0 * tau * tau) * omega * s2);
    (a, b, c)
}

/// Per-residual quadratic decomposition of the smoothed loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AbcDecomposition {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub s: Vec<i8>,
}

impl AbcDecomposition {
    /// `r'Ar + b'r + c'1`, i.e. twice the summed smoothed loss.
    pub fn quadratic_form(&self, residuals: &[f64]) -> f64 {
        residuals
            .iter()
            .enumerate()
            .map(|(j, &r)| self.a[j] * r * r + self.b[j] * r + self.c[j])
            .sum()
    }
}

pub fn abc_decompose(residuals: &[f64], params: SmoothedLossParams) -> AbcDecomposition {
    let n = residuals.len();
    let mut out = AbcDecomposition {
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
        s: Vec::with_capacity(n),
    };
    for &r in residuals {
        let s = sign_indicator(r, params);
        let (a, b, c) = abc_coefficients(s, params);
        out.a.push(a);
        out.b.push(b);
        out.c.push(c);
        out.s.push(s);
    }
    out
}
