//! Communication and sensing metrics.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{cscg, lmmse_estimate, sample_channel_with, ChannelModel, ChannelOperators, PilotDictionary};
use crate::grid::{correlate, KernelBank, Placement};
use crate::linalg::{inverse_hpd, mean_stderr, CMat, CVec, C64};
use crate::montecarlo::{chunked, stream_rng};
use crate::{DfrcError, Result};

/// `Tr(pσ_h² (I + (pσ_h²/σ_n²) Ω^H Ω)^{-1})`, the LMMSE error trace.
pub fn trace_term(dict: &PilotDictionary, x_p: &CVec, model: &ChannelModel) -> Result<f64> {
    trace_from_gram(&dict.omega_gram(x_p), model)
}

pub fn trace_from_gram(gram: &CMat, model: &ChannelModel) -> Result<f64> {
    let prior = model.prior_variance();
    let kh = gram.nrows();
    if prior == 0.0 {
        return Ok(0.0);
    }
    let m = CMat::identity(kh, kh) + gram * C64::new(prior / model.noise_variance, 0.0);
    let inv = inverse_hpd(&m).ok_or_else(|| DfrcError::InvalidChannel("singular SINR matrix".into()))?;
    Ok(prior * inv.diagonal().iter().map(|z| z.re).sum::<f64>())
}

/// SINR with the auxiliary trace variable `s1`:
/// `(p_c/σ_n²) / ((p_c/σ_n²) s1 + 1)`.
pub fn sinr_aux(p_c: f64, s1: f64, noise_variance: f64) -> f64 {
    let a = p_c / noise_variance;
    a / (a * s1 + 1.0)
}

/// Derivative of [`sinr_aux`] with respect to `s1` (non-positive).
pub fn sinr_aux_slope(p_c: f64, s1: f64, noise_variance: f64) -> f64 {
    let a = p_c / noise_variance;
    -(a * a) / ((a * s1 + 1.0) * (a * s1 + 1.0))
}

/// Tangent majorizer of `-sinr_aux` in `s1`, expanded at `s1_ref`.
/// Because `-sinr_aux` is concave in `s1`, this lies above it everywhere.
pub fn neg_sinr_tangent(p_c: f64, s1_ref: f64, noise_variance: f64, s1: f64) -> f64 {
    -sinr_aux(p_c, s1_ref, noise_variance) - sinr_aux_slope(p_c, s1_ref, noise_variance) * (s1 - s1_ref)
}

/// Communication metric: the scalar inside the capacity lower bound.
pub fn sinr(p_c: f64, x_p: &CVec, model: &ChannelModel, dict: &PilotDictionary) -> Result<f64> {
    Ok(sinr_aux(p_c, trace_term(dict, x_p, model)?, model.noise_variance))
}

/// Expected ISL over CSCG data `x_c ~ CN(0, p_c I)`, summed over the sidelobe bins.
pub fn isl_expected(p_c: f64, x_p: &CVec, bank: &KernelBank) -> f64 {
    let (a2, a1, a0) = isl_power_coefficients(x_p, bank);
    (a2 * p_c + a1) * p_c + a0
}

/// Coefficients `(α₂, α₁, α₀)` of the ISL as a quadratic in `p_c`.
pub fn isl_power_coefficients(x_p: &CVec, bank: &KernelBank) -> (f64, f64, f64) {
    let agg = bank.isl_aggregates();
    // conj(γ_lk) = (A_p,lk x)^H x
    let gammas = agg.forward(x_p).adjoint() * x_p;
    let a1 = x_p.dotc(&(&agg.b_sum * x_p)).re + 2.0 * x_p.dotc(&(&agg.mixed * x_p)).re;
    (agg.data_coeff, a1, gammas.norm_squared())
}

/// Split ISL with the pilot vector replaced by two copies. Bilinear terms are
/// taken as real parts; at `x1 = x2` this equals [`isl_expected`].
pub fn isl_split(p_c: f64, x1: &CVec, x2: &CVec, bank: &KernelBank) -> f64 {
    let agg = bank.isl_aggregates();
    let quartic = (agg.forward(x2).adjoint() * x1).norm_squared();
    let cross = x2.dotc(&(&agg.b_sum * x1)).re;
    let mixed = x2.dotc(&(agg.mixed.adjoint() * x1)).re;
    p_c * p_c * agg.data_coeff + p_c * cross + 2.0 * p_c * mixed + quartic
}

/// Gradient `g` of [`isl_split`] with respect to `x1`, scaled so that
/// `d ISL' = Re(g^H dx1)`.
pub fn isl_split_grad_x1(p_c: f64, x1: &CVec, x2: &CVec, bank: &KernelBank) -> CVec {
    let agg = bank.isl_aggregates();
    let v = agg.forward(x2);
    (&agg.b_sum * x2) * C64::from(p_c) + (&agg.mixed * x2) * C64::from(2.0 * p_c) + &v * (v.adjoint() * x1) * C64::from(2.0)
}

/// Expected mainlobe `f̄_00 = p_c Tr(Φ_c^H B^H B Φ_c) + x_p^H Φ_p^H B^H B Φ_p x_p`.
pub fn mainlobe(p_c: f64, x_p: &CVec, bank: &KernelBank) -> f64 {
    p_c * bank.data_gain() + x_p.dotc(&(bank.pilot_gram() * x_p)).re
}

/// Mainlobe with the pilot quadratic split as `Re{x2^H Q x1}`.
pub fn mainlobe_split(p_c: f64, x1: &CVec, x2: &CVec, bank: &KernelBank) -> f64 {
    p_c * bank.data_gain() + x2.dotc(&(bank.pilot_gram() * x1)).re
}

/// Emitted power `P_T = f̄_00 / (MN + N_CP)`.
pub fn tx_power(mainlobe: f64, bank: &KernelBank) -> f64 {
    mainlobe / bank.grid().frame_len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Monte Carlo capacity lower bound `(f_CP/MN) E[log2 det(I + SINR Ĥ_c Ĥ_c^H)]`
/// with LMMSE estimates from the pilot observation.
pub fn capacity_lower_bound(
    p_c: f64,
    x_p: &CVec,
    model: &ChannelModel,
    ops: &ChannelOperators,
    n_trials: usize,
    seed: u64,
) -> Result<Estimate> {
    if n_trials == 0 {
        return Err(DfrcError::Config("capacity bound needs at least one trial".into()));
    }
    let dict = ops.dictionary();
    let gamma = sinr(p_c, x_p, model, dict)?;
    let grid = ops.grid();
    let scale = grid.cp_fraction() / grid.mn() as f64;
    let omega = dict.omega(x_p);
    let values: Vec<f64> = (0..n_trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(seed, t as u64);
            let h = sample_channel_with(model, &mut rng);
            let noise = CVec::from_fn(omega.nrows(), |_, _| cscg(&mut rng, model.noise_variance));
            let y = &omega * &h.gains + noise;
            let h_hat = lmmse_estimate(&omega, &y, model)?;
            let hc = ops.data_channel(&h_hat);
            Ok(scale * log2_det_identity_plus(&hc, gamma))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, stderr) = mean_stderr(&values);
    Ok(Estimate { mean, stderr })
}

/// `log2 det(I + γ H H^H)` via the smaller Gram matrix.
pub fn log2_det_identity_plus(h: &CMat, gamma: f64) -> f64 {
    if gamma == 0.0 || h.is_empty() {
        return 0.0;
    }
    let g = if h.nrows() <= h.ncols() { h * h.adjoint() } else { h.adjoint() * h };
    let n = g.nrows();
    let m = CMat::identity(n, n) + g * C64::new(gamma, 0.0);
    match m.cholesky() {
        Some(ch) => 2.0 * ch.l().diagonal().iter().map(|z| z.re.ln()).sum::<f64>() / std::f64::consts::LN_2,
        None => f64::NAN,
    }
}

/// Per-bin empirical ambiguity statistics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AfBin {
    pub delay: i64,
    pub doppler: i64,
    pub mean_abs_f_sq: f64,
    pub mean_f_re: f64,
    pub mean_f_im: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AfTable {
    pub bins: Vec<AfBin>,
}

impl AfTable {
    pub fn get(&self, delay: i64, doppler: i64) -> Option<&AfBin> {
        self.bins.iter().find(|b| b.delay == delay && b.doppler == doppler)
    }

    /// Zero-Doppler slice (`k = 0`), ordered by delay.
    pub fn zero_doppler(&self) -> Vec<&AfBin> {
        self.bins.iter().filter(|b| b.doppler == 0).collect()
    }

    /// Zero-delay slice (`l = 0`), ordered by Doppler.
    pub fn zero_delay(&self) -> Vec<&AfBin> {
        self.bins.iter().filter(|b| b.delay == 0).collect()
    }

    /// Sum of mean `|f_lk|²` over the bins except `(0,0)`.
    pub fn sidelobe_energy(&self) -> f64 {
        self.bins.iter().filter(|b| b.delay != 0 || b.doppler != 0).map(|b| b.mean_abs_f_sq).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_af_csv(self.bins.iter(), out)
    }
}

pub fn write_af_csv<'a, W: Write>(bins: impl Iterator<Item = &'a AfBin>, mut out: W) -> std::io::Result<()> {
    writeln!(out, "l,k,mean_abs_f_sq,mean_f_re,mean_f_im")?;
    for b in bins {
        writeln!(out, "{},{},{:e},{:e},{:e}", b.delay, b.doppler, b.mean_abs_f_sq, b.mean_f_re, b.mean_f_im)?;
    }
    Ok(())
}

/// Empirical AF over `n_draws` Gaussian data draws, for every bin in `bank`
/// (mainlobe included).
pub fn empirical_af(x_p: &CVec, p_c: f64, bank: &KernelBank, n_draws: usize, seed: u64) -> Result<AfTable> {
    if n_draws == 0 {
        return Err(DfrcError::Config("empirical AF needs at least one draw".into()));
    }
    let kernels = bank.all();
    let nb = kernels.len();
    let pilot_part = bank.pilot_time() * x_p;
    let kc = bank.placement().num_data();
    // per bin: Σ|f|², Σ Re f, Σ Im f
    let sums = chunked(n_draws, seed, 3 * nb, |rng, acc| {
        let x_c = CVec::from_fn(kc, |_, _| cscg(rng, p_c));
        let s = &pilot_part + bank.data_time() * x_c;
        for (i, k) in kernels.iter().enumerate() {
            let f = correlate(s.as_slice(), k.delay, k.doppler);
            acc[3 * i].add(f.norm_sqr());
            acc[3 * i + 1].add(f.re);
            acc[3 * i + 2].add(f.im);
        }
    });
    let n = n_draws as f64;
    let bins = kernels
        .iter()
        .enumerate()
        .map(|(i, k)| AfBin {
            delay: k.delay,
            doppler: k.doppler,
            mean_abs_f_sq: sums[3 * i] / n,
            mean_f_re: sums[3 * i + 1] / n,
            mean_f_im: sums[3 * i + 2] / n,
        })
        .collect();
    Ok(AfTable { bins })
}

/// Scalar summary of a design.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub eta: f64,
    pub p_c: f64,
    pub pilot_energy: f64,
    pub sinr: f64,
    pub isl: f64,
    pub mainlobe: f64,
    pub tx_power: f64,
    pub capacity_lb: Option<f64>,
    pub capacity_lb_stderr: Option<f64>,
}

impl MetricReport {
    pub fn evaluate(
        eta: f64,
        p_c: f64,
        x_p: &CVec,
        bank: &KernelBank,
        dict: &PilotDictionary,
        model: &ChannelModel,
    ) -> Result<Self> {
        let f00 = mainlobe(p_c, x_p, bank);
        Ok(MetricReport {
            eta,
            p_c,
            pilot_energy: x_p.norm_squared(),
            sinr: sinr(p_c, x_p, model, dict)?,
            isl: isl_expected(p_c, x_p, bank),
            mainlobe: f00,
            tx_power: tx_power(f00, bank),
            capacity_lb: None,
            capacity_lb_stderr: None,
        })
    }

    pub fn with_capacity(mut self, est: Estimate) -> Self {
        self.capacity_lb = Some(est.mean);
        self.capacity_lb_stderr = Some(est.stderr);
        self
    }

    pub const CSV_HEADER: &'static str = "eta,p_c,pilot_energy,sinr,sinr_db,isl,isl_db,mainlobe,tx_power,capacity_lb,capacity_lb_stderr";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        format!(
            "{},{:e},{:e},{:e},{:.6},{:e},{:.6},{:e},{:e},{},{}",
            self.eta,
            self.p_c,
            self.pilot_energy,
            self.sinr,
            to_db(self.sinr),
            self.isl,
            to_db(self.isl),
            self.mainlobe,
            self.tx_power,
            opt(self.capacity_lb),
            opt(self.capacity_lb_stderr)
        )
    }
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.max(1e-300).log10()
}

/// Checks that a placement and kernel bank were built for the same grid.
pub fn check_compatible(bank: &KernelBank, placement: &Placement) -> Result<()> {
    if bank.placement() != placement {
        return Err(DfrcError::Dimension("kernel bank built for a different placement".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{spread_cells, GridConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Placement, ChannelModel, KernelBank, ChannelOperators) {
        let grid = GridConfig::new(4, 8, 4).unwrap();
        let model = ChannelModel {
            max_delay: 1,
            max_doppler: 1,
            activity: 0.5,
            tap_variance: 1.0,
            noise_variance: 0.2,
        };
        let pilots = vec![grid.index(0, 0), grid.index(1, 0), grid.index(2, 0), grid.index(3, 0)];
        let ring = spread_cells(&grid, &pilots, 1, 1);
        let data: Vec<usize> = (3..6).flat_map(|c| (0..4).map(move |r| r + 4 * c)).filter(|i| !ring.contains(i)).collect();
        let p = Placement::with_spread_rx(grid, pilots, data, 1, 1).unwrap();
        let bank = KernelBank::build(&p, 2, 1).unwrap();
        let ops = ChannelOperators::build(&p, &model).unwrap();
        (p, model, bank, ops)
    }

    fn rand_pilots(rng: &mut ChaCha8Rng, n: usize) -> CVec {
        CVec::from_fn(n, |_, _| cscg(rng, 1.0))
    }

    #[test]
    fn sinr_limits() {
        let (p, model, _, ops) = setup();
        let x = CVec::from_element(p.num_pilots(), C64::new(1.0, 0.0));
        assert_eq!(sinr(0.0, &x, &model, ops.dictionary()).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let strong = rand_pilots(&mut rng, p.num_pilots()) * C64::new(1e5, 0.0);
        let s = sinr(2.0, &strong, &model, ops.dictionary()).unwrap();
        assert!((s / (2.0 / model.noise_variance) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn sinr_aux_properties() {
        assert_eq!(sinr_aux(3.0, 0.0, 0.5), 6.0);
        assert!(sinr_aux(3.0, 1e12, 0.5) < 1e-11);
        let (p, model, _, ops) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_pilots(&mut rng, p.num_pilots());
        let t = trace_term(ops.dictionary(), &x, &model).unwrap();
        let lhs = sinr_aux(1.7, t, model.noise_variance);
        let rhs = sinr(1.7, &x, &model, ops.dictionary()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(t > 0.0 && t <= model.num_taps() as f64 * model.prior_variance());
    }

    #[test]
    fn tangent_majorizes_negative_sinr() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s_ref: f64 = rand::Rng::random::<f64>(&mut rng) * 3.0;
            let p_c = 0.5 + rand::Rng::random::<f64>(&mut rng);
            assert!((neg_sinr_tangent(p_c, s_ref, 0.3, s_ref) + sinr_aux(p_c, s_ref, 0.3)).abs() < 1e-14);
            for i in 0..50 {
                let s = i as f64 * 0.1;
                assert!(neg_sinr_tangent(p_c, s_ref, 0.3, s) >= -sinr_aux(p_c, s, 0.3) - 1e-14);
            }
        }
    }

    #[test]
    fn scaling_pilots_improves_sinr() {
        let (p, model, _, ops) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x = rand_pilots(&mut rng, p.num_pilots());
            let t1 = trace_term(ops.dictionary(), &x, &model).unwrap();
            let t2 = trace_term(ops.dictionary(), &(&x * C64::new(1.5, 0.0)), &model).unwrap();
            assert!(t2 < t1);
            let s1 = sinr(1.0, &x, &model, ops.dictionary()).unwrap();
            let s2 = sinr(1.0, &(&x * C64::new(1.5, 0.0)), &model, ops.dictionary()).unwrap();
            assert!(s2 > s1);
        }
    }

    #[test]
    fn isl_limits() {
        let (p, _, bank, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_pilots(&mut rng, p.num_pilots());
        let pilot_only: f64 = bank.sidelobes().map(|k| k.pilot_correlation(&x).norm_sqr()).sum();
        assert!((isl_expected(0.0, &x, &bank) - pilot_only).abs() < 1e-9 * pilot_only);
        let zero = CVec::zeros(p.num_pilots());
        let data_only: f64 = bank.sidelobes().map(|k| k.a + k.b.norm_sqr()).sum();
        assert!((isl_expected(2.0, &zero, &bank) - 4.0 * data_only).abs() < 1e-9 * data_only);
        let (a2, a1, a0) = isl_power_coefficients(&x, &bank);
        let v = isl_expected(0.7, &x, &bank);
        assert!((a2 * 0.49 + a1 * 0.7 + a0 - v).abs() < 1e-9 * v);
    }

    fn isl_per_bin(p_c: f64, x: &CVec, bank: &KernelBank) -> f64 {
        bank.sidelobes()
            .map(|k| {
                let gamma = k.pilot_correlation(x);
                gamma.norm_sqr()
                    + p_c * p_c * (k.a + k.b.norm_sqr())
                    + p_c * x.dotc(&(&k.b_mat * x)).re
                    + 2.0 * p_c * (k.b * gamma.conj()).re
            })
            .sum()
    }

    fn isl_split_per_bin(p_c: f64, x1: &CVec, x2: &CVec, bank: &KernelBank) -> f64 {
        bank.sidelobes()
            .map(|k| {
                let ah_x1 = k.a_p.adjoint() * x1;
                p_c * p_c * (k.a + k.b.norm_sqr())
                    + p_c * x2.dotc(&(&k.b_mat * x1)).re
                    + 2.0 * p_c * (k.b * x2.dotc(&ah_x1)).re
                    + x2.dotc(&ah_x1).norm_sqr()
            })
            .sum()
    }

    #[test]
    fn aggregated_isl_matches_per_bin_sums() {
        let (p, _, bank, _) = setup();
        let with_main = bank.clone().with_mainlobe_in_isl(true);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..10 {
            let x1 = rand_pilots(&mut rng, p.num_pilots());
            let x2 = rand_pilots(&mut rng, p.num_pilots());
            for b in [&bank, &with_main] {
                let (fast, slow) = (isl_expected(0.6, &x1, b), isl_per_bin(0.6, &x1, b));
                assert!((fast - slow).abs() < 1e-10 * slow);
                let (fast, slow) = (isl_split(0.6, &x1, &x2, b), isl_split_per_bin(0.6, &x1, &x2, b));
                assert!((fast - slow).abs() < 1e-10 * slow.abs().max(1.0));
            }
        }
        let x = rand_pilots(&mut rng, p.num_pilots());
        assert!(isl_expected(0.6, &x, &with_main) > isl_expected(0.6, &x, &bank));
    }

    #[test]
    fn split_isl_agrees_on_consensus() {
        let (p, _, bank, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = rand_pilots(&mut rng, p.num_pilots());
            let a = isl_expected(0.8, &x, &bank);
            let b = isl_split(0.8, &x, &x, &bank);
            assert!((a - b).abs() < 1e-10 * a.max(1.0));
        }
        let x = rand_pilots(&mut rng, p.num_pilots());
        let zero = CVec::zeros(p.num_pilots());
        let data_only: f64 = bank.sidelobes().map(|k| k.a + k.b.norm_sqr()).sum();
        assert!((isl_split(1.5, &zero, &x, &bank) - 2.25 * data_only).abs() < 1e-9 * data_only);
    }

    #[test]
    fn split_isl_gradient_matches_finite_differences() {
        let (p, _, bank, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = 1e-5;
        for _ in 0..20 {
            let x1 = rand_pilots(&mut rng, p.num_pilots());
            let x2 = rand_pilots(&mut rng, p.num_pilots());
            let g = isl_split_grad_x1(0.9, &x1, &x2, &bank);
            for i in 0..x1.len() {
                for (dir, analytic) in [(C64::new(h, 0.0), g[i].re), (C64::new(0.0, h), g[i].im)] {
                    let mut up = x1.clone();
                    up[i] += dir;
                    let mut dn = x1.clone();
                    dn[i] -= dir;
                    let fd = (isl_split(0.9, &up, &x2, &bank) - isl_split(0.9, &dn, &x2, &bank)) / (2.0 * h);
                    let scale = g.camax().max(1e-8);
                    assert!((fd - analytic).abs() / scale < 1e-4, "fd {fd} vs {analytic}");
                }
            }
        }
    }

    #[test]
    fn mainlobe_without_cp_is_energy() {
        let grid = GridConfig::new(4, 4, 0).unwrap();
        let p = Placement::with_spread_rx(grid, vec![0, 1], vec![8, 9, 10], 0, 0).unwrap();
        let bank = KernelBank::build(&p, 1, 1).unwrap();
        let x = CVec::from_vec(vec![C64::new(1.0, 2.0), C64::new(-0.5, 0.0)]);
        let expected = 0.3 * 3.0 + x.norm_squared();
        assert!((mainlobe(0.3, &x, &bank) - expected).abs() < 1e-12);
        assert!((mainlobe_split(0.3, &x, &x, &bank) - expected).abs() < 1e-12);
        assert!((tx_power(expected, &bank) - expected / 16.0).abs() < 1e-15);
    }

    #[test]
    fn mainlobe_of_spike_reads_gram_entry() {
        let grid = GridConfig::new(4, 4, 3).unwrap();
        let p = Placement::with_spread_rx(grid, vec![2, 7], vec![12], 0, 0).unwrap();
        let bank = KernelBank::build(&p, 0, 0).unwrap();
        let b = bank.modulator().matrix();
        let gram = b.adjoint() * b;
        let x = CVec::from_vec(vec![C64::new(0.0, 0.0), C64::new(2.0f64.sqrt(), 0.0)]);
        assert!((mainlobe(0.0, &x, &bank) - 2.0 * gram[(7, 7)].re).abs() < 1e-12);
    }

    #[test]
    fn capacity_bound_zero_power_and_identity_channel() {
        let (p, model, _, ops) = setup();
        let x = CVec::from_element(p.num_pilots(), C64::new(1.0, 0.0));
        let est = capacity_lower_bound(0.0, &x, &model, &ops, 10, 1).unwrap();
        assert_eq!(est.mean, 0.0);
        let eye = CMat::identity(5, 5);
        let v = log2_det_identity_plus(&eye, 3.0);
        assert!((v - 5.0 * 4f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn empirical_af_is_deterministic_without_data() {
        let (p, _, bank, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_pilots(&mut rng, p.num_pilots());
        let t1 = empirical_af(&x, 0.0, &bank, 3, 1).unwrap();
        let t2 = empirical_af(&x, 0.0, &bank, 17, 99).unwrap();
        for (a, b) in t1.bins.iter().zip(&t2.bins) {
            assert!((a.mean_abs_f_sq - b.mean_abs_f_sq).abs() < 1e-9 * a.mean_abs_f_sq.max(1.0));
            let k = bank.get(a.delay, a.doppler).unwrap();
            assert!((a.mean_abs_f_sq - k.pilot_correlation(&x).norm_sqr()).abs() < 1e-9 * a.mean_abs_f_sq.max(1.0));
        }
        assert_eq!(t1.zero_doppler().len(), 5);
        assert_eq!(t1.zero_delay().len(), 3);
    }
}
