//! Data-power subproblem: a concave 1-D maximisation over a bounded interval.

use crate::linalg::CVec;
use crate::metrics::{isl_power_coefficients, sinr_aux};
use crate::{DfrcError, Result};

use super::ProblemSpec;

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Golden-section search for the maximiser of a unimodal `f` on `[lo, hi]`.
/// Returns the midpoint of the final bracket once its width is at most `tol`.
pub fn golden_section_max<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// The 1-D objective `φ(p_c)` with the pilot vector and `s1` frozen.
#[derive(Clone, Copy, Debug)]
pub struct PowerObjective {
    pub w_sinr: f64,
    pub w_isl: f64,
    pub s1: f64,
    pub noise_variance: f64,
    /// ISL coefficients `(α₂, α₁, α₀)`.
    pub alpha: (f64, f64, f64),
}

impl PowerObjective {
    pub fn new(spec: &ProblemSpec<'_>, s1: f64, x_p: &CVec) -> Self {
        let (w_sinr, w_isl) = spec.weights();
        PowerObjective {
            w_sinr,
            w_isl,
            s1,
            noise_variance: spec.model.noise_variance,
            alpha: isl_power_coefficients(x_p, spec.bank),
        }
    }

    pub fn value(&self, p_c: f64) -> f64 {
        let (a2, a1, a0) = self.alpha;
        self.w_sinr * sinr_aux(p_c, self.s1, self.noise_variance) - self.w_isl * ((a2 * p_c + a1) * p_c + a0)
    }

    pub fn derivative(&self, p_c: f64) -> f64 {
        let (a2, a1, _) = self.alpha;
        let denom = p_c / self.noise_variance * self.s1 + 1.0;
        self.w_sinr / (self.noise_variance * denom * denom) - self.w_isl * (2.0 * a2 * p_c + a1)
    }
}

/// Feasible data-power interval for the given pilots.
pub fn power_interval(spec: &ProblemSpec<'_>, x_p: &CVec) -> Result<(f64, f64)> {
    let q_p = x_p.dotc(&(spec.bank.pilot_gram() * x_p)).re;
    let q_c = spec.bank.data_gain();
    let budget = spec.mainlobe_budget();
    if q_c <= 0.0 {
        if q_p > budget * (1.0 + 1e-12) {
            return Err(DfrcError::Infeasible("pilot energy alone exceeds the power budget".into()));
        }
        if q_p < spec.xi_min * (1.0 - 1e-12) {
            return Err(DfrcError::Infeasible("no data cells and pilots below the mainlobe requirement".into()));
        }
        return Ok((0.0, 0.0));
    }
    let lo = ((spec.xi_min - q_p) / q_c).max(0.0);
    let hi = (budget - q_p) / q_c;
    if hi < 0.0 {
        return Err(DfrcError::Infeasible(format!(
            "power constraint: pilot energy {q_p:.6} exceeds the budget {budget:.6}"
        )));
    }
    if hi < lo {
        return Err(DfrcError::Infeasible(format!(
            "mainlobe constraint: xi_min {:.6} unreachable within the power budget",
            spec.xi_min
        )));
    }
    Ok((lo, hi))
}

/// Maximises `η SINR_norm − η̄ ISL_norm` over the data power.
pub fn solve_power(spec: &ProblemSpec<'_>, s1: f64, x_p: &CVec, tol: f64) -> Result<f64> {
    let (lo, hi) = power_interval(spec, x_p)?;
    if hi <= lo {
        return Ok(lo);
    }
    let obj = PowerObjective::new(spec, s1, x_p);
    // Concavity: a sign check at the ends settles boundary optima exactly.
    if obj.derivative(hi) >= 0.0 {
        return Ok(hi);
    }
    if obj.derivative(lo) <= 0.0 {
        return Ok(lo);
    }
    Ok(golden_section_max(|p| obj.value(p), lo, hi, tol * (hi - lo).max(f64::MIN_POSITIVE)))
}
