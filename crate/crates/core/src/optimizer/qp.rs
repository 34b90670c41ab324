//! Convex quadratic programs with a single two-sided linear constraint:
//!
//! ```text
//! minimize ½ zᵀ H z + fᵀ z   subject to   lo ≤ aᵀ z ≤ hi
//! ```
//!
//! Complex Hermitian forms are carried over to real coordinates
//! `z = [Re x; Im x]` by [`QuadForm::to_real`].

use nalgebra::{DMatrix, DVector};

use crate::linalg::{CMat, CVec, C64};
use crate::registry::{Named, Registry};
use crate::{DfrcError, Result};

/// `x^H P x + Re(c^H x)` over complex `x`.
#[derive(Clone, Debug)]
pub struct QuadForm {
    pub p: CMat,
    pub c: CVec,
}

impl QuadForm {
    pub fn zeros(n: usize) -> Self {
        QuadForm {
            p: CMat::zeros(n, n),
            c: CVec::zeros(n),
        }
    }

    pub fn value(&self, x: &CVec) -> f64 {
        x.dotc(&(&self.p * x)).re + self.c.dotc(x).re
    }

    /// `(H, f)` of the equivalent real problem.
    pub fn to_real(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.c.len();
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        for j in 0..n {
            for i in 0..n {
                // Hermitian part only; any skew part contributes nothing to x^H P x.
                let v = (self.p[(i, j)] + self.p[(j, i)].conj()) * 0.5;
                h[(i, j)] = 2.0 * v.re;
                h[(i, n + j)] = -2.0 * v.im;
                h[(n + i, j)] = 2.0 * v.im;
                h[(n + i, n + j)] = 2.0 * v.re;
            }
        }
        let f = DVector::from_fn(2 * n, |i, _| if i < n { self.c[i].re } else { self.c[i - n].im });
        (h, f)
    }
}

/// Real representation of the functional `Re(g^H x)`.
pub fn real_constraint(g: &CVec) -> DVector<f64> {
    let n = g.len();
    DVector::from_fn(2 * n, |i, _| if i < n { g[i].re } else { g[i - n].im })
}

pub fn to_complex(z: &DVector<f64>) -> CVec {
    let n = z.len() / 2;
    CVec::from_fn(n, |i, _| C64::new(z[i], z[n + i]))
}

pub fn to_real_vec(x: &CVec) -> DVector<f64> {
    real_constraint(x)
}

/// A slab-constrained convex QP.
#[derive(Clone, Debug)]
pub struct SlabQp {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a: DVector<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl SlabQp {
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.f.dot(z)
    }

    /// Constraint violation of `z` (zero when feasible).
    pub fn violation(&self, z: &DVector<f64>) -> f64 {
        let v = self.a.dot(z);
        (self.lo - v).max(v - self.hi).max(0.0)
    }

    /// True when the constraint functional is numerically zero, in which case
    /// it is dropped.
    pub fn is_unconstrained(&self) -> bool {
        self.a.norm() <= 1e-14 * (1.0 + self.h.norm())
    }
}

pub trait QpSolver: Named + Send + Sync {
    fn solve(&self, qp: &SlabQp) -> Result<DVector<f64>>;
}

/// Exact active-set solve: the unconstrained minimiser, or the minimiser on
/// the violated face.
pub struct KktSolver;

impl Named for KktSolver {
    fn name(&self) -> &'static str {
        "kkt"
    }
}

impl QpSolver for KktSolver {
    fn solve(&self, qp: &SlabQp) -> Result<DVector<f64>> {
        if qp.lo > qp.hi {
            return Err(DfrcError::Infeasible(format!("empty slab [{}, {}]", qp.lo, qp.hi)));
        }
        let chol = qp
            .h
            .clone()
            .cholesky()
            .ok_or_else(|| DfrcError::Infeasible("QP Hessian is not positive definite".into()))?;
        let z = chol.solve(&(-&qp.f));
        if qp.is_unconstrained() {
            return Ok(z);
        }
        let v = qp.a.dot(&z);
        let target = if v < qp.lo {
            qp.lo
        } else if v > qp.hi {
            qp.hi
        } else {
            return Ok(z);
        };
        let ha = chol.solve(&qp.a);
        let lambda = (target - v) / qp.a.dot(&ha);
        Ok(z + ha * lambda)
    }
}

/// FISTA with projection onto the slab and a fixed `1/L` step.
pub struct ProjectedGradient {
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for ProjectedGradient {
    fn default() -> Self {
        ProjectedGradient {
            max_iters: 500_000,
            tolerance: 1e-14,
        }
    }
}

impl Named for ProjectedGradient {
    fn name(&self) -> &'static str {
        "projected-gradient"
    }
}

fn largest_eigenvalue(h: &DMatrix<f64>) -> f64 {
    h.clone().symmetric_eigenvalues().iter().cloned().fold(0.0, f64::max)
}

impl ProjectedGradient {
    fn project(&self, qp: &SlabQp, z: DVector<f64>, aa: f64) -> DVector<f64> {
        if qp.is_unconstrained() {
            return z;
        }
        let v = qp.a.dot(&z);
        let clamped = v.clamp(qp.lo, qp.hi);
        if clamped == v {
            z
        } else {
            z + &qp.a * ((clamped - v) / aa)
        }
    }
}

impl QpSolver for ProjectedGradient {
    fn solve(&self, qp: &SlabQp) -> Result<DVector<f64>> {
        if qp.lo > qp.hi {
            return Err(DfrcError::Infeasible(format!("empty slab [{}, {}]", qp.lo, qp.hi)));
        }
        let lip = largest_eigenvalue(&qp.h);
        if !(lip > 0.0) {
            return Err(DfrcError::Infeasible("QP Hessian is not positive definite".into()));
        }
        let step = 1.0 / lip;
        let aa = qp.a.norm_squared();
        let n = qp.f.len();
        let mut x = self.project(qp, DVector::zeros(n), aa);
        let mut y = x.clone();
        let mut t = 1.0f64;
        for _ in 0..self.max_iters {
            let grad = &qp.h * &y + &qp.f;
            let next = self.project(qp, &y - grad * step, aa);
            let moved = (&next - &x).norm();
            // gradient-based restart when momentum stops helping
            if (&y - &next).dot(&(&next - &x)) > 0.0 {
                y = next.clone();
                t = 1.0;
            } else {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                y = &next + (&next - &x) * ((t - 1.0) / t_next);
                t = t_next;
            }
            x = next;
            if moved <= self.tolerance * (1.0 + x.norm()) {
                break;
            }
        }
        Ok(x)
    }
}

pub fn qp_solvers() -> Registry<dyn QpSolver> {
    let mut r: Registry<dyn QpSolver> = Registry::new("QP solver");
    r.register(Box::new(KktSolver)).register(Box::new(ProjectedGradient::default()));
    r
}
