use std::f64::consts::PI;

use super::{build_dft_factor, GridConfig, Placement};
use crate::linalg::{cis, frobenius_sq, CMat, CVec, C64, ZERO};
use crate::{DfrcError, Result};

/// `B = Γ (F_N^H ⊗ I_M)`: maps DD symbols to the transmitted (CP-prefixed)
/// time samples.
#[derive(Clone, Debug)]
pub struct TimeModulator {
    grid: GridConfig,
    matrix: CMat,
}

impl TimeModulator {
    pub fn new(grid: &GridConfig) -> Self {
        let f = build_dft_factor(grid);
        let mn = grid.mn();
        let matrix = CMat::from_fn(grid.frame_len(), mn, |row, col| {
            let src = if row < grid.n_cp { mn - grid.n_cp + row } else { row - grid.n_cp };
            // (F^H ⊗ I)[src, col] = conj((F ⊗ I)[col, src])
            f[(col, src)].conj()
        });
        TimeModulator { grid: *grid, matrix }
    }

    pub fn grid(&self) -> &GridConfig {
        &self.grid
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn modulate(&self, x_dd: &CVec) -> CVec {
        &self.matrix * x_dd
    }
}

/// Applies `J_l D_k` to the rows of `x` (`frame_len` rows).
fn apply_delay_doppler(x: &CMat, delay: i64, doppler: i64) -> CMat {
    let len = x.nrows() as i64;
    let mut out = CMat::zeros(x.nrows(), x.ncols());
    for m in 0..len {
        let src = m - delay;
        if src < 0 || src >= len {
            continue;
        }
        let phase = doppler_phase(src, doppler, len);
        for c in 0..x.ncols() {
            out[(m as usize, c)] = phase * x[(src as usize, c)];
        }
    }
    out
}

fn doppler_phase(sample: i64, doppler: i64, len: i64) -> C64 {
    let r = (sample * doppler).rem_euclid(len);
    cis(-2.0 * PI * r as f64 / len as f64)
}

/// Dense `J_l D_k` over `frame_len` samples. Negative delays use `J_{-l} = J_l^T`
/// and negative Doppler bins use `D_{-k} = D_k^*`.
pub fn delay_doppler_matrix(frame_len: usize, delay: i64, doppler: i64) -> CMat {
    apply_delay_doppler(&CMat::identity(frame_len, frame_len), delay, doppler)
}

/// Time-domain cross-correlation `s^H J_l D_k s`:
/// `Σ_m conj(s_m) exp(-j2πk(m-l)/T) s_{m-l}`.
pub fn correlate(s: &[C64], delay: i64, doppler: i64) -> C64 {
    let len = s.len() as i64;
    let mut acc = ZERO;
    for m in 0..len {
        let src = m - delay;
        if src < 0 || src >= len {
            continue;
        }
        acc += s[m as usize].conj() * doppler_phase(src, doppler, len) * s[src as usize];
    }
    acc
}

/// Ambiguity-function kernel for one delay-Doppler bin with its
/// placement-specific reductions.
#[derive(Clone, Debug)]
pub struct AfKernel {
    pub delay: i64,
    pub doppler: i64,
    /// `Tr(X X^H)` with `X = Φ_c^H A Φ_c`.
    pub a: f64,
    /// `Tr(Φ_c^H A Φ_c)`.
    pub b: C64,
    /// Pilot/data interaction matrix (Hermitian, `K_p x K_p`).
    pub b_mat: CMat,
    /// `Φ_p^H A Φ_p`.
    pub a_p: CMat,
    /// `Φ_p^H A^H Φ_c`.
    pub a_pc: CMat,
    /// `Φ_c^H A^H Φ_p`.
    pub a_cp: CMat,
}

impl AfKernel {
    pub fn is_mainlobe(&self) -> bool {
        self.delay == 0 && self.doppler == 0
    }

    /// Full `A_lk = (F_N ⊗ I_M) Γ^H J_l D_k Γ (F_N^H ⊗ I_M)`.
    pub fn matrix(&self, modulator: &TimeModulator) -> CMat {
        let b = modulator.matrix();
        b.adjoint() * apply_delay_doppler(b, self.delay, self.doppler)
    }

    /// Deterministic pilot-only correlation `x_p^H A_p x_p`.
    pub fn pilot_correlation(&self, x_p: &CVec) -> C64 {
        x_p.dotc(&(&self.a_p * x_p))
    }
}

/// Precomputed kernels for all bins `|l| <= max_delay`, `|k| <= max_doppler`,
/// plus the mainlobe/power reductions.
#[derive(Clone, Debug)]
pub struct KernelBank {
    placement: Placement,
    modulator: TimeModulator,
    max_delay: usize,
    max_doppler: usize,
    kernels: Vec<AfKernel>,
    include_mainlobe: bool,
    pilot_time: CMat,
    data_time: CMat,
    pilot_gram: CMat,
    data_gain: f64,
    aggregates: IslAggregates,
}

/// Sums over the ISL bins that let the expected ISL and its block forms be
/// evaluated with a handful of products instead of per-bin loops.
#[derive(Clone, Debug)]
pub struct IslAggregates {
    /// `Σ (a_lk + |b_lk|²)`.
    pub data_coeff: f64,
    /// `Σ B_lk`.
    pub b_sum: CMat,
    /// `M = Σ conj(b_lk) A_p,lk`.
    pub mixed: CMat,
    /// `[A_p,1; A_p,2; …]` stacked vertically.
    pub stacked: CMat,
    /// `[A_p,1^H; A_p,2^H; …]` stacked vertically.
    pub stacked_adjoint: CMat,
}

impl IslAggregates {
    fn build<'a>(kernels: impl Iterator<Item = &'a AfKernel>, kp: usize) -> Self {
        let kernels: Vec<&AfKernel> = kernels.collect();
        let nb = kernels.len();
        let mut agg = IslAggregates {
            data_coeff: 0.0,
            b_sum: CMat::zeros(kp, kp),
            mixed: CMat::zeros(kp, kp),
            stacked: CMat::zeros(nb * kp, kp),
            stacked_adjoint: CMat::zeros(nb * kp, kp),
        };
        for (i, k) in kernels.iter().enumerate() {
            agg.data_coeff += k.a + k.b.norm_sqr();
            agg.b_sum += &k.b_mat;
            agg.mixed += &k.a_p * k.b.conj();
            agg.stacked.view_mut((i * kp, 0), (kp, kp)).copy_from(&k.a_p);
            agg.stacked_adjoint.view_mut((i * kp, 0), (kp, kp)).copy_from(&k.a_p.adjoint());
        }
        agg
    }

    pub fn num_bins(&self) -> usize {
        if self.b_sum.nrows() == 0 {
            0
        } else {
            self.stacked.nrows() / self.b_sum.nrows()
        }
    }

    /// Columns `A_p,lk x` for every ISL bin (`K_p x bins`).
    pub fn forward(&self, x: &CVec) -> CMat {
        let kp = x.len();
        let y = &self.stacked * x;
        CMat::from_column_slice(kp, self.num_bins(), y.as_slice())
    }

    /// Columns `A_p,lk^H x` for every ISL bin.
    pub fn backward(&self, x: &CVec) -> CMat {
        let kp = x.len();
        let y = &self.stacked_adjoint * x;
        CMat::from_column_slice(kp, self.num_bins(), y.as_slice())
    }
}

impl KernelBank {
    pub fn build(placement: &Placement, max_delay: usize, max_doppler: usize) -> Result<Self> {
        placement.validate()?;
        let grid = placement.grid;
        if max_delay >= grid.frame_len() {
            return Err(DfrcError::Dimension(format!(
                "sensing delay bound {max_delay} must be below frame length {}",
                grid.frame_len()
            )));
        }
        let modulator = TimeModulator::new(&grid);
        let pilot_time = modulator.matrix() * placement.pilot_selection();
        let data_time = modulator.matrix() * placement.data_selection();
        let pilot_gram = pilot_time.adjoint() * &pilot_time;
        let data_gain = frobenius_sq(&data_time);

        let mut kernels = Vec::with_capacity((2 * max_delay + 1) * (2 * max_doppler + 1));
        let (ld, kd) = (max_delay as i64, max_doppler as i64);
        for delay in -ld..=ld {
            for doppler in -kd..=kd {
                kernels.push(reduce_kernel(&pilot_time, &data_time, delay, doppler));
            }
        }
        let aggregates = IslAggregates::build(kernels.iter().filter(|k| !k.is_mainlobe()), placement.num_pilots());
        Ok(KernelBank {
            placement: placement.clone(),
            modulator,
            max_delay,
            max_doppler,
            kernels,
            include_mainlobe: false,
            pilot_time,
            data_time,
            pilot_gram,
            data_gain,
            aggregates,
        })
    }

    /// Includes the `(0,0)` bin in ISL sums (sensitivity checks only).
    pub fn with_mainlobe_in_isl(mut self, include: bool) -> Self {
        self.include_mainlobe = include;
        let kp = self.placement.num_pilots();
        self.aggregates = IslAggregates::build(self.sidelobes(), kp);
        self
    }

    pub fn isl_aggregates(&self) -> &IslAggregates {
        &self.aggregates
    }

    pub fn placement(&self) -> &Placement {
        &self.placement
    }

    pub fn grid(&self) -> &GridConfig {
        &self.placement.grid
    }

    pub fn modulator(&self) -> &TimeModulator {
        &self.modulator
    }

    pub fn max_delay(&self) -> usize {
        self.max_delay
    }

    pub fn max_doppler(&self) -> usize {
        self.max_doppler
    }

    pub fn all(&self) -> &[AfKernel] {
        &self.kernels
    }

    pub fn get(&self, delay: i64, doppler: i64) -> Option<&AfKernel> {
        self.kernels.iter().find(|k| k.delay == delay && k.doppler == doppler)
    }

    /// Bins that enter the ISL.
    pub fn sidelobes(&self) -> impl Iterator<Item = &AfKernel> {
        let include = self.include_mainlobe;
        self.kernels.iter().filter(move |k| include || !k.is_mainlobe())
    }

    /// `B Φ_p` (frame_len x K_p).
    pub fn pilot_time(&self) -> &CMat {
        &self.pilot_time
    }

    /// `B Φ_c` (frame_len x K_c).
    pub fn data_time(&self) -> &CMat {
        &self.data_time
    }

    /// `Φ_p^H B^H B Φ_p`.
    pub fn pilot_gram(&self) -> &CMat {
        &self.pilot_gram
    }

    /// `Tr(Φ_c^H B^H B Φ_c)`.
    pub fn data_gain(&self) -> f64 {
        self.data_gain
    }

    /// Transmitted time samples for the given pilot and data symbols.
    pub fn transmit(&self, x_p: &CVec, x_c: &CVec) -> CVec {
        &self.pilot_time * x_p + &self.data_time * x_c
    }
}

fn reduce_kernel(pilot_time: &CMat, data_time: &CMat, delay: i64, doppler: i64) -> AfKernel {
    let shifted_p = apply_delay_doppler(pilot_time, delay, doppler);
    let shifted_c = apply_delay_doppler(data_time, delay, doppler);
    let a_p = pilot_time.adjoint() * &shifted_p;
    let a_cc = data_time.adjoint() * &shifted_c;
    // Φ_p^H A Φ_c and Φ_c^H A Φ_p
    let e_pc = pilot_time.adjoint() * &shifted_c;
    let e_cp = data_time.adjoint() * &shifted_p;
    let a_pc = e_cp.adjoint();
    let a_cp = e_pc.adjoint();
    let b_mat = &a_pc * a_pc.adjoint() + a_cp.adjoint() * &a_cp;
    AfKernel {
        delay,
        doppler,
        a: frobenius_sq(&a_cc),
        b: a_cc.trace(),
        b_mat,
        a_p,
        a_pc,
        a_cp,
    }
}
