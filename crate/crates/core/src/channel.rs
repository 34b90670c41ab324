//! Bernoulli-Gaussian delay-Doppler channel, pilot dictionary and LMMSE
//! channel estimation.
//!
//! Taps are ordered delay-major: `(0,0), (1,0), …, (L,0), (0,1), …, (L,Q)`,
//! i.e. tap index `l + (L + 1) k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::grid::{build_dft_factor, dd_shift_with, GridConfig, Placement};
use crate::linalg::{inverse_hpd, solve_hpd, CMat, CVec, C64};
use crate::{DfrcError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModel {
    /// Maximum delay index `L`.
    pub max_delay: usize,
    /// Maximum Doppler index `Q`.
    pub max_doppler: usize,
    /// Per-tap activity probability `p`.
    pub activity: f64,
    /// Variance of an active tap, `σ_h²`.
    pub tap_variance: f64,
    /// AWGN variance `σ_n²`.
    pub noise_variance: f64,
}

impl ChannelModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.activity) {
            return Err(DfrcError::InvalidChannel(format!(
                "activity probability {} outside [0, 1]",
                self.activity
            )));
        }
        if !(self.tap_variance > 0.0) || !(self.noise_variance > 0.0) {
            return Err(DfrcError::InvalidChannel(
                "tap and noise variances must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `K_h = (L + 1)(Q + 1)`.
    pub fn num_taps(&self) -> usize {
        (self.max_delay + 1) * (self.max_doppler + 1)
    }

    /// `(delay, doppler)` of tap `i`.
    pub fn tap(&self, i: usize) -> (usize, usize) {
        (i % (self.max_delay + 1), i / (self.max_delay + 1))
    }

    pub fn taps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_taps()).map(|i| self.tap(i))
    }

    /// Marginal tap variance `p σ_h²`, used as the LMMSE prior.
    pub fn prior_variance(&self) -> f64 {
        self.activity * self.tap_variance
    }

    pub fn with_noise_variance(mut self, noise_variance: f64) -> Self {
        self.noise_variance = noise_variance;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub gains: CVec,
    pub active: Vec<bool>,
}

impl ChannelRealization {
    /// A deterministic realization with the given gains (all nonzero taps active).
    pub fn fixed(gains: CVec) -> Self {
        let active = gains.iter().map(|g| g.norm() > 0.0).collect();
        ChannelRealization { gains, active }
    }
}

/// Circularly-symmetric complex Gaussian sample with the given variance.
pub fn cscg<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> C64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re * s, im * s)
}

pub fn sample_channel(model: &ChannelModel, seed: u64) -> ChannelRealization {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_channel_with(model, &mut rng)
}

pub fn sample_channel_with<R: Rng + ?Sized>(model: &ChannelModel, rng: &mut R) -> ChannelRealization {
    let kh = model.num_taps();
    let mut gains = CVec::zeros(kh);
    let mut active = vec![false; kh];
    for i in 0..kh {
        if rng.random::<f64>() < model.activity {
            active[i] = true;
            gains[i] = cscg(rng, model.tap_variance);
        }
    }
    ChannelRealization { gains, active }
}

/// Per-tap DD operators `T_i = (F_N ⊗ I_M) Π^l Δ^k (F_N^H ⊗ I_M)` together
/// with their projections onto the placement.
#[derive(Clone, Debug)]
pub struct ChannelOperators {
    grid: GridConfig,
    model: ChannelModel,
    shifts: Vec<CMat>,
    dictionary: PilotDictionary,
    data_blocks: Vec<CMat>,
    pilot_cross_blocks: Vec<CMat>,
    permutations: Vec<PhasedPermutation>,
    data_columns: Vec<Vec<Option<(usize, C64)>>>,
}

/// A matrix with exactly one unit-modulus entry per column: `y[target[c]] += phase[c] x[c]`.
#[derive(Clone, Debug)]
pub struct PhasedPermutation {
    pub target: Vec<usize>,
    pub phase: Vec<C64>,
}

impl PhasedPermutation {
    fn from_dense(t: &CMat) -> Result<Self> {
        let mut target = Vec::with_capacity(t.ncols());
        let mut phase = Vec::with_capacity(t.ncols());
        for c in 0..t.ncols() {
            let col = t.column(c);
            let (r, v) = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
                .map(|(r, v)| (r, *v))
                .unwrap_or((0, C64::new(0.0, 0.0)));
            let residual: f64 = col.iter().map(|z| z.norm_sqr()).sum::<f64>() - v.norm_sqr();
            if (v.norm() - 1.0).abs() > 1e-9 || residual > 1e-18 {
                return Err(DfrcError::Dimension("tap operator is not a phased permutation".into()));
            }
            target.push(r);
            phase.push(v);
        }
        Ok(PhasedPermutation { target, phase })
    }

    pub fn accumulate(&self, gain: C64, x: &[C64], y: &mut [C64]) {
        for (c, (&t, &ph)) in self.target.iter().zip(&self.phase).enumerate() {
            y[t] += gain * ph * x[c];
        }
    }
}

impl ChannelOperators {
    pub fn build(placement: &Placement, model: &ChannelModel) -> Result<Self> {
        placement.validate()?;
        model.validate()?;
        let grid = placement.grid;
        if model.max_delay >= grid.mn() {
            return Err(DfrcError::Dimension(format!(
                "channel delay {} must be below MN={}",
                model.max_delay,
                grid.mn()
            )));
        }
        let f = build_dft_factor(&grid);
        let shifts: Vec<CMat> = model.taps().map(|(l, k)| dd_shift_with(&grid, &f, l, k)).collect();
        let phi_p = placement.pilot_selection();
        let phi_c = placement.data_selection();
        let psi_p = placement.rx_pilot_selection();
        let psi_c = placement.rx_data_selection();
        let pilot_blocks = shifts.iter().map(|t| psi_p.adjoint() * t * &phi_p).collect();
        let data_blocks: Vec<CMat> = shifts.iter().map(|t| psi_c.adjoint() * t * &phi_c).collect();
        let pilot_cross_blocks = shifts.iter().map(|t| psi_p.adjoint() * t * &phi_c).collect();
        let permutations = shifts.iter().map(PhasedPermutation::from_dense).collect::<Result<Vec<_>>>()?;
        let data_columns = data_blocks
            .iter()
            .map(|b: &CMat| {
                (0..b.ncols())
                    .map(|c| b.column(c).iter().enumerate().find(|(_, v)| v.norm() > 0.5).map(|(r, v)| (r, *v)))
                    .collect()
            })
            .collect();
        Ok(ChannelOperators {
            grid,
            model: *model,
            shifts,
            dictionary: PilotDictionary::new(pilot_blocks),
            data_blocks,
            pilot_cross_blocks,
            permutations,
            data_columns,
        })
    }

    pub fn grid(&self) -> &GridConfig {
        &self.grid
    }

    pub fn model(&self) -> &ChannelModel {
        &self.model
    }

    pub fn shift(&self, tap: usize) -> &CMat {
        &self.shifts[tap]
    }

    pub fn dictionary(&self) -> &PilotDictionary {
        &self.dictionary
    }

    /// `Ψ_c^H T_i Φ_c` for each tap.
    pub fn data_blocks(&self) -> &[CMat] {
        &self.data_blocks
    }

    /// `Ψ_p^H T_i Φ_c` for each tap (zero under a valid guard).
    pub fn pilot_cross_blocks(&self) -> &[CMat] {
        &self.pilot_cross_blocks
    }

    /// `H_DD = Σ_i h_i T_i`.
    pub fn effective_channel(&self, realization: &ChannelRealization) -> CMat {
        self.combine(&realization.gains)
    }

    fn combine(&self, gains: &CVec) -> CMat {
        let mn = self.grid.mn();
        let mut h = CMat::zeros(mn, mn);
        for (g, t) in gains.iter().zip(&self.shifts) {
            if g.norm_sqr() > 0.0 {
                h += t * *g;
            }
        }
        h
    }

    /// `Ψ_c^H H Φ_c` assembled from the per-tap blocks.
    pub fn data_channel(&self, gains: &CVec) -> CMat {
        let (r, c) = self.data_blocks.first().map_or((0, 0), |b| b.shape());
        let mut out = CMat::zeros(r, c);
        for (g, cols) in gains.iter().zip(&self.data_columns) {
            if g.norm_sqr() == 0.0 {
                continue;
            }
            for (col, entry) in cols.iter().enumerate() {
                if let Some((row, ph)) = entry {
                    out[(*row, col)] += g * ph;
                }
            }
        }
        out
    }

    /// `H_DD x` without forming `H_DD`.
    pub fn apply(&self, gains: &CVec, x: &[C64]) -> Vec<C64> {
        let mut y = vec![C64::new(0.0, 0.0); x.len()];
        for (g, p) in gains.iter().zip(&self.permutations) {
            if g.norm_sqr() > 0.0 {
                p.accumulate(*g, x, &mut y);
            }
        }
        y
    }

    /// Reconstructs `Ĥ_DD`, `Ĥ_c` and `Ĥ_p` from an estimate `ĥ`.
    pub fn estimated_effective_channels(&self, placement: &Placement, h_hat: &CVec) -> EstimatedChannels {
        let h_dd = self.combine(h_hat);
        let h_c = placement.rx_data_selection().adjoint() * &h_dd * placement.data_selection();
        let h_p = placement.rx_pilot_selection().adjoint() * &h_dd * placement.pilot_selection();
        EstimatedChannels { h_dd, h_c, h_p }
    }
}

#[derive(Clone, Debug)]
pub struct EstimatedChannels {
    pub h_dd: CMat,
    pub h_c: CMat,
    pub h_p: CMat,
}

/// Extended pilot dictionary `Ω̃ = [Ω̃_0, …, Ω̃_{K_h-1}]` with
/// `Ω̃_i = Ψ_p^H T_i Φ_p`, and the cached Gram blocks `Ω̃_i^H Ω̃_j`.
///
/// Every block of a grid-tap channel has at most one unit-modulus entry per
/// column; that structure is detected and used for fast products.
#[derive(Clone, Debug)]
pub struct PilotDictionary {
    blocks: Vec<CMat>,
    grams: Vec<CMat>,
    sparse: Option<Vec<Vec<Option<(usize, C64)>>>>,
}

fn column_entries(block: &CMat) -> Option<Vec<Option<(usize, C64)>>> {
    (0..block.ncols())
        .map(|c| {
            let mut found = None;
            for (r, v) in block.column(c).iter().enumerate() {
                // entries are exact zeros or unit-modulus up to rounding
                if v.norm() > 1e-9 {
                    if found.is_some() {
                        return None;
                    }
                    found = Some((r, *v));
                }
            }
            Some(found)
        })
        .collect()
}

impl PilotDictionary {
    pub fn new(blocks: Vec<CMat>) -> Self {
        let kh = blocks.len();
        let mut grams = Vec::with_capacity(kh * kh);
        for j in 0..kh {
            for i in 0..kh {
                grams.push(blocks[i].adjoint() * &blocks[j]);
            }
        }
        let sparse = blocks.iter().map(column_entries).collect();
        PilotDictionary { blocks, grams, sparse }
    }

    pub fn num_taps(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_pilots(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.ncols())
    }

    pub fn num_rx(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.nrows())
    }

    pub fn block(&self, tap: usize) -> &CMat {
        &self.blocks[tap]
    }

    /// Per-column `(row, value)` of block `tap` when every column has at
    /// most one nonzero.
    pub fn column_entries(&self, tap: usize) -> Option<&[Option<(usize, C64)>]> {
        self.sparse.as_ref().map(|s| s[tap].as_slice())
    }

    /// `Ω̃_i^H Ω̃_j`.
    pub fn gram(&self, i: usize, j: usize) -> &CMat {
        &self.grams[i + self.blocks.len() * j]
    }

    /// `Ω̃_i x`.
    pub fn apply(&self, tap: usize, x: &CVec) -> CVec {
        match self.column_entries(tap) {
            Some(cols) => {
                let mut out = CVec::zeros(self.num_rx());
                for (c, e) in cols.iter().enumerate() {
                    if let Some((r, v)) = e {
                        out[*r] += v * x[c];
                    }
                }
                out
            }
            None => &self.blocks[tap] * x,
        }
    }

    /// `Ω̃_i^H v`.
    pub fn apply_adjoint(&self, tap: usize, v: &CVec) -> CVec {
        match self.column_entries(tap) {
            Some(cols) => CVec::from_fn(cols.len(), |c, _| cols[c].map_or(C64::new(0.0, 0.0), |(r, w)| w.conj() * v[r])),
            None => self.blocks[tap].adjoint() * v,
        }
    }

    /// Accumulates `weight · Ω̃_i^H U Ω̃_j` into `out`.
    pub fn add_sandwich(&self, i: usize, j: usize, u: &CMat, weight: C64, out: &mut CMat) {
        match (self.column_entries(i), self.column_entries(j)) {
            (Some(ci), Some(cj)) => {
                let kp = out.nrows();
                let nu = u.nrows();
                let (us, os) = (u.as_slice(), out.as_mut_slice());
                let left: Vec<(usize, usize, C64)> = ci
                    .iter()
                    .enumerate()
                    .filter_map(|(a, e)| e.map(|(r, v)| (a, r, v.conj())))
                    .collect();
                for (b, eb) in cj.iter().enumerate() {
                    let Some((rb, vb)) = eb else { continue };
                    let wb = weight * vb;
                    let ucol = &us[rb * nu..(rb + 1) * nu];
                    let ocol = &mut os[b * kp..(b + 1) * kp];
                    for &(a, ra, va) in &left {
                        ocol[a] += va * ucol[ra] * wb;
                    }
                }
            }
            _ => *out += self.blocks[i].adjoint() * u * &self.blocks[j] * weight,
        }
    }

    /// `Ω̃` as one `R_p x (K_h K_p)` matrix.
    pub fn omega_tilde(&self) -> CMat {
        let (r, kp) = (self.num_rx(), self.num_pilots());
        let mut out = CMat::zeros(r, kp * self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            out.view_mut((0, i * kp), (r, kp)).copy_from(b);
        }
        out
    }

    /// `Ω(x_p) = Ω̃ (I_{K_h} ⊗ x_p)`, an `R_p x K_h` matrix.
    pub fn omega(&self, x_p: &CVec) -> CMat {
        let mut out = CMat::zeros(self.num_rx(), self.blocks.len());
        for i in 0..self.blocks.len() {
            out.set_column(i, &self.apply(i, x_p));
        }
        out
    }

    /// `Ω^H Ω`.
    pub fn omega_gram(&self, x_p: &CVec) -> CMat {
        let w = self.omega(x_p);
        w.adjoint() * &w
    }

    /// `(I ⊗ x2^H) Ω̃^H Ω̃ (I ⊗ x1) = Ω(x2)^H Ω(x1)`.
    pub fn cross_gram(&self, x1: &CVec, x2: &CVec) -> CMat {
        self.omega(x2).adjoint() * self.omega(x1)
    }

    pub fn lmmse_estimate(&self, x_p: &CVec, y_p: &CVec, model: &ChannelModel) -> Result<CVec> {
        lmmse_estimate(&self.omega(x_p), y_p, model)
    }
}

/// LMMSE estimate `ĥ = (Ω^H Ω/σ_n² + I/(pσ_h²))^{-1} Ω^H y/σ_n²` with the
/// marginal prior `C_h = pσ_h² I`.
pub fn lmmse_estimate(omega: &CMat, y_p: &CVec, model: &ChannelModel) -> Result<CVec> {
    let normal = lmmse_normal_matrix(omega, model)?;
    let rhs = CMat::from_column_slice(omega.ncols(), 1, (omega.adjoint() * y_p * C64::from(1.0 / model.noise_variance)).as_slice());
    let sol = solve_hpd(&normal, &rhs)
        .ok_or_else(|| DfrcError::InvalidChannel("LMMSE normal matrix is singular".into()))?;
    Ok(sol.column(0).into_owned())
}

/// LMMSE error covariance `(Ω^H Ω/σ_n² + I/(pσ_h²))^{-1}`.
pub fn lmmse_error_covariance(omega: &CMat, model: &ChannelModel) -> Result<CMat> {
    let normal = lmmse_normal_matrix(omega, model)?;
    inverse_hpd(&normal).ok_or_else(|| DfrcError::InvalidChannel("LMMSE normal matrix is singular".into()))
}

fn lmmse_normal_matrix(omega: &CMat, model: &ChannelModel) -> Result<CMat> {
    let prior = model.prior_variance();
    if !(prior > 0.0) {
        return Err(DfrcError::InvalidChannel(
            "LMMSE needs a positive prior variance p·σ_h²".into(),
        ));
    }
    let kh = omega.ncols();
    Ok(omega.adjoint() * omega * C64::from(1.0 / model.noise_variance) + CMat::identity(kh, kh) * C64::from(1.0 / prior))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{spread_cells, validate_guard};
    use crate::linalg::{frobenius_sq, max_abs_diff};

    fn model(p: f64) -> ChannelModel {
        ChannelModel {
            max_delay: 1,
            max_doppler: 1,
            activity: p,
            tap_variance: 2.0,
            noise_variance: 0.1,
        }
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> CVec {
        CVec::from_fn(n, |_, _| cscg(rng, 1.0))
    }

    pub(crate) fn small_setup() -> (Placement, ChannelModel) {
        let grid = GridConfig::new(4, 8, 2).unwrap();
        let m = model(0.5);
        let pilots = vec![grid.index(1, 1), grid.index(2, 1)];
        let ring = spread_cells(&grid, &pilots, m.max_delay, m.max_doppler);
        let data: Vec<usize> = (4..7)
            .flat_map(|c| (0..4).map(move |r| r + 4 * c))
            .filter(|i| !ring.contains(i))
            .collect();
        let p = Placement::with_spread_rx(grid, pilots, data, m.max_delay, m.max_doppler).unwrap();
        assert!(validate_guard(&p, m.max_delay, m.max_doppler).is_valid());
        (p, m)
    }

    #[test]
    fn tap_order_is_delay_major() {
        let m = ChannelModel { max_delay: 2, max_doppler: 1, ..model(1.0) };
        let taps: Vec<_> = m.taps().collect();
        assert_eq!(taps, vec![(0, 0), (1, 0), (2, 0), (0, 1), (1, 1), (2, 1)]);
    }

    #[test]
    fn inactive_channel_is_zero() {
        let m = model(0.0);
        for seed in 0..20 {
            let h = sample_channel(&m, seed);
            assert!(h.gains.iter().all(|g| g.norm() == 0.0));
            assert!(h.active.iter().all(|a| !a));
        }
    }

    #[test]
    fn sampling_statistics() {
        let m = ChannelModel { max_delay: 0, max_doppler: 0, ..model(1.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let var: f64 = (0..n).map(|_| sample_channel_with(&m, &mut rng).gains[0].norm_sqr()).sum::<f64>() / n as f64;
        assert!((var / m.tap_variance - 1.0).abs() < 0.03, "{var}");

        let m = ChannelModel { max_delay: 0, max_doppler: 0, ..model(0.5) };
        let rate = (0..n).filter(|_| sample_channel_with(&m, &mut rng).active[0]).count() as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.01, "{rate}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = model(0.5);
        assert_eq!(sample_channel(&m, 42), sample_channel(&m, 42));
    }

    #[test]
    fn realization_masks_inactive_taps() {
        let m = model(0.5);
        for seed in 0..50 {
            let h = sample_channel(&m, seed);
            for (g, a) in h.gains.iter().zip(&h.active) {
                if !a {
                    assert_eq!(g.norm(), 0.0);
                }
            }
        }
    }

    #[test]
    fn identity_tap_gives_identity_channel() {
        let (p, m) = small_setup();
        let ops = ChannelOperators::build(&p, &m).unwrap();
        let mut g = CVec::zeros(m.num_taps());
        g[0] = C64::new(1.0, 0.0);
        let h = ops.effective_channel(&ChannelRealization::fixed(g.clone()));
        assert!(max_abs_diff(&h, &CMat::identity(32, 32)) < 1e-12);
        let est = ops.estimated_effective_channels(&p, &g);
        assert!(max_abs_diff(&est.h_dd, &CMat::identity(32, 32)) < 1e-12);
    }

    #[test]
    fn frobenius_norm_is_preserved() {
        let (p, m) = small_setup();
        let ops = ChannelOperators::build(&p, &m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let h = sample_channel_with(&m, &mut rng);
            let hdd = ops.effective_channel(&h);
            let expected: f64 = h.gains.iter().map(|g| g.norm_sqr()).sum::<f64>() * 32.0;
            assert!((frobenius_sq(&hdd) - expected).abs() < 1e-9 * expected.max(1.0));
        }
    }

    #[test]
    fn pilot_observation_matches_dictionary() {
        let (p, m) = small_setup();
        let ops = ChannelOperators::build(&p, &m).unwrap();
        let dict = ops.dictionary();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let x_p = random_vec(&mut rng, p.num_pilots());
            let h = random_vec(&mut rng, m.num_taps());
            let hdd = ops.effective_channel(&ChannelRealization::fixed(h.clone()));
            let lhs = p.rx_pilot_selection().adjoint() * &hdd * p.pilot_selection() * &x_p;
            let rhs = dict.omega(&x_p) * &h;
            assert!((lhs - &rhs).camax() < 1e-10);

            let kron = {
                let kp = p.num_pilots();
                let kh = m.num_taps();
                let mut k = CMat::zeros(kh * kp, kh);
                for i in 0..kh {
                    k.view_mut((i * kp, i), (kp, 1)).copy_from(&x_p);
                }
                k
            };
            assert!(max_abs_diff(&dict.omega(&x_p), &(dict.omega_tilde() * kron)) < 1e-12);
            let om = dict.omega(&x_p);
            assert!(max_abs_diff(&dict.omega_gram(&x_p), &(om.adjoint() * &om)) < 1e-10);
        }
    }

    #[test]
    fn dictionary_fast_paths_match_dense_blocks() {
        let (p, m) = small_setup();
        let ops = ChannelOperators::build(&p, &m).unwrap();
        let dict = ops.dictionary();
        let dense = PilotDictionary {
            blocks: (0..dict.num_taps()).map(|i| dict.block(i).clone()).collect(),
            grams: Vec::new(),
            sparse: None,
        };
        assert!(dict.column_entries(0).is_some());
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x1 = random_vec(&mut rng, p.num_pilots());
        let x2 = random_vec(&mut rng, p.num_pilots());
        let v = random_vec(&mut rng, dict.num_rx());
        let u = CMat::from_fn(dict.num_rx(), dict.num_rx(), |_, _| cscg(&mut rng, 1.0));
        let kh = dict.num_taps();
        let via_grams = CMat::from_fn(kh, kh, |i, j| x2.dotc(&(dict.gram(i, j) * &x1)));
        assert!(max_abs_diff(&dict.cross_gram(&x1, &x2), &via_grams) < 1e-12);
        for i in 0..kh {
            assert!((dict.apply(i, &x1) - dense.apply(i, &x1)).camax() < 1e-14);
            assert!((dict.apply_adjoint(i, &v) - dense.apply_adjoint(i, &v)).camax() < 1e-14);
            let j = (i + 3) % kh;
            let w = C64::new(0.3, -1.2);
            let mut fast = CMat::zeros(p.num_pilots(), p.num_pilots());
            let mut slow = fast.clone();
            dict.add_sandwich(i, j, &u, w, &mut fast);
            dense.add_sandwich(i, j, &u, w, &mut slow);
            assert!(max_abs_diff(&fast, &slow) < 1e-12);
        }
    }

    #[test]
    fn estimated_data_channel_matches_true_projection() {
        let (p, m) = small_setup();
        let ops = ChannelOperators::build(&p, &m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_vec(&mut rng, m.num_taps());
        let h2 = random_vec(&mut rng, m.num_taps());
        let est = ops.estimated_effective_channels(&p, &h);
        let truth = p.rx_data_selection().adjoint() * ops.effective_channel(&ChannelRealization::fixed(h.clone())) * p.data_selection();
        assert!(max_abs_diff(&est.h_c, &truth) < 1e-10);
        assert!(max_abs_diff(&ops.data_channel(&h), &truth) < 1e-10);
        let sum = ops.estimated_effective_channels(&p, &(&h + &h2));
        let parts = ops.estimated_effective_channels(&p, &h2);
        assert!(max_abs_diff(&sum.h_dd, &(&est.h_dd + &parts.h_dd)) < 1e-10);
    }

    #[test]
    fn sparse_application_matches_dense() {
        let (p, m) = small_setup();
        let ops = ChannelOperators::build(&p, &m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = random_vec(&mut rng, m.num_taps());
        let x = random_vec(&mut rng, 32);
        let dense = ops.effective_channel(&ChannelRealization::fixed(h.clone())) * &x;
        let sparse = CVec::from_vec(ops.apply(&h, x.as_slice()));
        assert!((dense - sparse).camax() < 1e-12);
        let blocks = ops
            .data_blocks()
            .iter()
            .zip(h.iter())
            .fold(CMat::zeros(p.rx_data_indices.len(), p.num_data()), |acc, (b, g)| acc + b * *g);
        assert!(max_abs_diff(&blocks, &ops.data_channel(&h)) < 1e-12);
    }

    #[test]
    fn lmmse_zero_observation_and_noiseless_limit() {
        let (p, m) = small_setup();
        let ops = ChannelOperators::build(&p, &m).unwrap();
        let dict = ops.dictionary();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x_p = random_vec(&mut rng, p.num_pilots());
        let zero = CVec::zeros(dict.num_rx());
        assert_eq!(dict.lmmse_estimate(&x_p, &zero, &m).unwrap().camax(), 0.0);

        let quiet = m.with_noise_variance(1e-12);
        let h = random_vec(&mut rng, m.num_taps());
        let y = dict.omega(&x_p) * &h;
        let est = dict.lmmse_estimate(&x_p, &y, &quiet).unwrap();
        assert!((&est - &h).norm() / h.norm() < 1e-4);
    }

    #[test]
    fn lmmse_rejects_zero_prior() {
        let (p, m) = small_setup();
        let ops = ChannelOperators::build(&p, &m).unwrap();
        let dead = ChannelModel { activity: 0.0, ..m };
        let x_p = CVec::from_element(p.num_pilots(), C64::new(1.0, 0.0));
        let y = CVec::zeros(ops.dictionary().num_rx());
        assert!(ops.dictionary().lmmse_estimate(&x_p, &y, &dead).is_err());
    }
}
