//! Deterministic OTFS operators over the delay-Doppler grid.
//!
//! DD cells are linearised column-major over the `M x N` grid, delay along
//! `M`: `index = delay + M * doppler`.

mod kernels;
mod placement;

pub use kernels::{correlate, delay_doppler_matrix, AfKernel, KernelBank, TimeModulator};
pub use placement::{spread_cells, validate_guard, GuardReport, GuardViolation, Placement, ViolationKind};

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::{cis, CMat, C64, ZERO};
use crate::{DfrcError, Result};

/// OTFS frame geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Subcarriers (delay bins).
    pub m: usize,
    /// Time slots per frame (Doppler bins).
    pub n: usize,
    /// Reduced-CP length in samples.
    pub n_cp: usize,
}

impl GridConfig {
    pub fn new(m: usize, n: usize, n_cp: usize) -> Result<Self> {
        let cfg = GridConfig { m, n, n_cp };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(DfrcError::InvalidGrid(format!(
                "M and N must be positive (M={}, N={})",
                self.m, self.n
            )));
        }
        if self.n_cp >= self.mn() {
            return Err(DfrcError::InvalidGrid(format!(
                "N_CP={} must be smaller than MN={}",
                self.n_cp,
                self.mn()
            )));
        }
        Ok(())
    }

    pub fn mn(&self) -> usize {
        self.m * self.n
    }

    /// Transmitted samples per frame, `MN + N_CP`.
    pub fn frame_len(&self) -> usize {
        self.mn() + self.n_cp
    }

    /// Reduced-CP efficiency `MN / (MN + N_CP)`.
    pub fn cp_fraction(&self) -> f64 {
        self.mn() as f64 / self.frame_len() as f64
    }

    pub fn index(&self, delay: usize, doppler: usize) -> usize {
        delay + self.m * doppler
    }

    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index % self.m, index / self.m)
    }
}

/// Normalised `N`-point DFT matrix.
pub fn dft_matrix(n: usize) -> CMat {
    let scale = 1.0 / (n as f64).sqrt();
    CMat::from_fn(n, n, |r, c| {
        let phase = -2.0 * PI * ((r * c) % n) as f64 / n as f64;
        cis(phase) * scale
    })
}

/// `F_N ⊗ I_M`, the DD-to-frequency/time reshaping factor.
pub fn build_dft_factor(cfg: &GridConfig) -> CMat {
    let f = dft_matrix(cfg.n);
    let m = cfg.m;
    let mut out = CMat::zeros(cfg.mn(), cfg.mn());
    for a in 0..cfg.n {
        for b in 0..cfg.n {
            let v = f[(a, b)];
            for i in 0..m {
                out[(a * m + i, b * m + i)] = v;
            }
        }
    }
    out
}

/// Cyclic delay permutation `Π` and Doppler modulation `Δ`.
pub fn build_shift_operators(cfg: &GridConfig) -> (CMat, CMat) {
    let mn = cfg.mn();
    let mut pi = CMat::zeros(mn, mn);
    for r in 0..mn {
        pi[(r, (r + mn - 1) % mn)] = C64::new(1.0, 0.0);
    }
    let delta = CMat::from_diagonal(&nalgebra::DVector::from_fn(mn, |i, _| {
        cis(2.0 * PI * i as f64 / mn as f64)
    }));
    (pi, delta)
}

/// Reduced-CP arrangement `Γ`: the last `N_CP` rows of `I_MN` stacked above
/// `I_MN`, so `Γ x` prepends the tail of `x`.
pub fn build_cp_matrix(cfg: &GridConfig) -> DMatrix<f64> {
    let mn = cfg.mn();
    let mut g = DMatrix::zeros(cfg.frame_len(), mn);
    for r in 0..cfg.n_cp {
        g[(r, mn - cfg.n_cp + r)] = 1.0;
    }
    for r in 0..mn {
        g[(cfg.n_cp + r, r)] = 1.0;
    }
    g
}

/// `Π^delay Δ^doppler` applied to the time samples, as a phased permutation.
/// Entry `(n, n - delay)` carries `exp(j 2π doppler (n - delay) / MN)`.
#[cfg(test)]
fn time_shift(cfg: &GridConfig, delay: usize, doppler: usize) -> CMat {
    let mn = cfg.mn();
    let mut out = CMat::zeros(mn, mn);
    for row in 0..mn {
        let col = (row + mn - delay % mn) % mn;
        let phase = 2.0 * PI * ((doppler * col) % mn) as f64 / mn as f64;
        out[(row, col)] = cis(phase);
    }
    out
}

/// `(F_N ⊗ I_M) Π^delay Δ^doppler (F_N^H ⊗ I_M)`, the DD-domain response of a
/// single on-grid channel tap.
pub fn dd_shift_operator(cfg: &GridConfig, delay: usize, doppler: usize) -> CMat {
    let f = build_dft_factor(cfg);
    dd_shift_with(cfg, &f, delay, doppler)
}

pub(crate) fn dd_shift_with(cfg: &GridConfig, f: &CMat, delay: usize, doppler: usize) -> CMat {
    let mn = cfg.mn();
    // Π^l Δ^k (F^H ⊗ I): row n is the phased row (n - l) of F^H ⊗ I.
    let mut shifted = CMat::from_element(mn, mn, ZERO);
    for row in 0..mn {
        let src = (row + mn - delay % mn) % mn;
        let phase = cis(2.0 * PI * ((doppler * src) % mn) as f64 / mn as f64);
        for col in 0..mn {
            shifted[(row, col)] = phase * f[(col, src)].conj();
        }
    }
    f * shifted
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{identity, max_abs_diff};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_rejects_bad_dimensions() {
        assert!(GridConfig::new(0, 2, 0).is_err());
        assert!(GridConfig::new(2, 0, 0).is_err());
        assert!(GridConfig::new(2, 2, 4).is_err());
        let g = GridConfig::new(8, 16, 16).unwrap();
        assert_eq!(g.frame_len(), 144);
        assert!((g.cp_fraction() - 128.0 / 144.0).abs() < 1e-15);
    }

    #[test]
    fn dft_factor_degenerate_and_two_point() {
        let f = build_dft_factor(&GridConfig::new(1, 1, 0).unwrap());
        assert!(max_abs_diff(&f, &identity(1)) < 1e-15);

        let f = build_dft_factor(&GridConfig::new(1, 2, 0).unwrap());
        let s = 1.0 / 2f64.sqrt();
        let expected = CMat::from_row_slice(
            2,
            2,
            &[C64::new(s, 0.0), C64::new(s, 0.0), C64::new(s, 0.0), C64::new(-s, 0.0)],
        );
        assert!(max_abs_diff(&f, &expected) < 1e-15);
    }

    #[test]
    fn dft_factor_is_unitary() {
        for (m, n) in [(2, 2), (4, 8), (8, 16), (16, 16)] {
            let cfg = GridConfig::new(m, n, 0).unwrap();
            let f = build_dft_factor(&cfg);
            let err = max_abs_diff(&(&f * f.adjoint()), &identity(cfg.mn()));
            assert!(err < 1e-12, "M={m} N={n}: {err}");
        }
    }

    #[test]
    fn shift_operators_smallest_cycle() {
        let (pi, delta) = build_shift_operators(&GridConfig::new(1, 2, 0).unwrap());
        let one = C64::new(1.0, 0.0);
        assert_eq!(pi, CMat::from_row_slice(2, 2, &[ZERO, one, one, ZERO]));
        assert!((delta[(0, 0)] - one).norm() < 1e-15);
        assert!((delta[(1, 1)] + one).norm() < 1e-15);
    }

    #[test]
    fn shift_operators_have_order_mn() {
        let cfg = GridConfig::new(2, 2, 0).unwrap();
        let (pi, delta) = build_shift_operators(&cfg);
        let p4 = &pi * &pi * &pi * &pi;
        assert!(max_abs_diff(&p4, &identity(4)) < 1e-15);
        let d4 = &delta * &delta * &delta * &delta;
        assert!(max_abs_diff(&d4, &identity(4)) < 1e-12);
        let roots = [C64::new(1.0, 0.0), C64::new(0.0, 1.0), C64::new(-1.0, 0.0), C64::new(0.0, -1.0)];
        for (i, r) in roots.iter().enumerate() {
            assert!((delta[(i, i)] - r).norm() < 1e-15);
        }
    }

    #[test]
    fn cp_matrix_prepends_tail() {
        let cfg = GridConfig::new(1, 1, 0).unwrap();
        assert_eq!(build_cp_matrix(&cfg), DMatrix::identity(1, 1));

        let cfg = GridConfig::new(2, 2, 1).unwrap();
        let g = build_cp_matrix(&cfg);
        assert_eq!(g.shape(), (5, 4));
        // rows [e4; e1; e2; e3; e4]
        let cols = [3, 0, 1, 2, 3];
        for (r, &c) in cols.iter().enumerate() {
            assert_eq!(g.row(r).iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(g[(r, c)], 1.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
        let gx = &g * nalgebra::DVector::from_vec(x.clone());
        assert_eq!(gx[0], x[3]);
        for i in 0..4 {
            assert_eq!(gx[i + 1], x[i]);
        }
        let gtg = g.transpose() * &g;
        assert_eq!(gtg, DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1.0, 1.0, 2.0])));
    }

    #[test]
    fn dd_shift_matches_dense_product() {
        let cfg = GridConfig::new(4, 4, 0).unwrap();
        let f = build_dft_factor(&cfg);
        let (pi, delta) = build_shift_operators(&cfg);
        for (l, k) in [(0, 0), (1, 0), (0, 1), (3, 2), (2, 3)] {
            let mut op = identity(cfg.mn());
            for _ in 0..l {
                op = &pi * op;
            }
            let mut d = identity(cfg.mn());
            for _ in 0..k {
                d = &delta * d;
            }
            let dense = &f * (op * d) * f.adjoint();
            assert!(max_abs_diff(&dense, &dd_shift_operator(&cfg, l, k)) < 1e-12);
            assert!(max_abs_diff(&time_shift(&cfg, l, k), &(f.adjoint() * &dense * &f)) < 1e-12);
        }
    }

    #[test]
    fn dd_shift_is_phased_cyclic_shift() {
        let cfg = GridConfig::new(4, 8, 0).unwrap();
        let t = dd_shift_operator(&cfg, 3, 2);
        for col in 0..cfg.mn() {
            let (r, c) = cfg.cell(col);
            let target = cfg.index((r + 3) % cfg.m, (c + 2) % cfg.n);
            for row in 0..cfg.mn() {
                let mag = t[(row, col)].norm();
                if row == target {
                    assert!((mag - 1.0).abs() < 1e-12);
                } else {
                    assert!(mag < 1e-12);
                }
            }
        }
    }
}
