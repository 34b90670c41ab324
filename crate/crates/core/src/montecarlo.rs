//! Brute-force oracles and the uncoded link-level BER simulation.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{cscg, lmmse_estimate, lmmse_error_covariance, sample_channel_with, ChannelModel, ChannelOperators};
use crate::grid::{correlate, KernelBank, Placement};
use crate::linalg::{inverse_hpd, CMat, CVec, CompensatedSum, C64};
use crate::metrics::{trace_term, Estimate};
use crate::registry::{Named, Registry};
use crate::{DfrcError, Result};

/// Draws per parallel work unit. Each chunk owns one RNG stream, so results
/// depend only on `(seed, n)` and not on the thread count.
const CHUNK: usize = 256;

/// Seeded generator for an independent sub-stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs `draw` `n` times over chunked RNG streams, accumulating `width`
/// compensated sums; returns the totals.
pub fn chunked<F>(n: usize, seed: u64, width: usize, draw: F) -> Vec<f64>
where
    F: Fn(&mut ChaCha8Rng, &mut [CompensatedSum]) + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partial: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let mut acc = vec![CompensatedSum::default(); width];
            let count = CHUNK.min(n - c * CHUNK);
            for _ in 0..count {
                draw(&mut rng, &mut acc);
            }
            acc.iter().map(|a| a.value()).collect()
        })
        .collect();
    let mut total = vec![CompensatedSum::default(); width];
    for p in &partial {
        for (t, v) in total.iter_mut().zip(p) {
            t.add(*v);
        }
    }
    total.iter().map(|t| t.value()).collect()
}

fn estimate_from_moments(sum: f64, sum_sq: f64, n: usize) -> Estimate {
    let nf = n as f64;
    let mean = sum / nf;
    let var = if n > 1 { ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
    Estimate {
        mean,
        stderr: (var / nf).sqrt(),
    }
}

/// Monte Carlo ISL: mean of `Σ_sidelobes |f_lk|²` with `x_c ~ CN(0, p_c I)`.
pub fn oracle_isl(p_c: f64, x_p: &CVec, bank: &KernelBank, n_draws: usize, seed: u64) -> Result<Estimate> {
    if n_draws < 100 {
        return Err(DfrcError::Config("ISL oracle needs at least 100 draws".into()));
    }
    let pilot_part = bank.pilot_time() * x_p;
    let kc = bank.placement().num_data();
    let bins: Vec<(i64, i64)> = bank.sidelobes().map(|k| (k.delay, k.doppler)).collect();
    let sums = chunked(n_draws, seed, 2, |rng, acc| {
        let x_c = CVec::from_fn(kc, |_, _| cscg(rng, p_c));
        let s = &pilot_part + bank.data_time() * x_c;
        let v: f64 = bins.iter().map(|&(l, k)| correlate(s.as_slice(), l, k).norm_sqr()).sum();
        acc[0].add(v);
        acc[1].add(v * v);
    });
    Ok(estimate_from_moments(sums[0], sums[1], n_draws))
}

/// Monte Carlo estimate of `E‖h - ĥ‖²` for the LMMSE estimator.
pub fn lmmse_mse(x_p: &CVec, ops: &ChannelOperators, model: &ChannelModel, n_trials: usize, seed: u64) -> Result<Estimate> {
    let omega = ops.dictionary().omega(x_p);
    let gain = lmmse_gain(&omega, model)?;
    let sums = chunked(n_trials, seed, 2, |rng, acc| {
        let h = sample_channel_with(model, rng);
        let y = &omega * &h.gains + CVec::from_fn(omega.nrows(), |_, _| cscg(rng, model.noise_variance));
        let err = (&h.gains - &gain * y).norm_squared();
        acc[0].add(err);
        acc[1].add(err * err);
    });
    Ok(estimate_from_moments(sums[0], sums[1], n_trials))
}

/// Entry-wise Monte Carlo mean of `(h - ĥ) ĥ^H`, with per-entry standard errors.
pub fn lmmse_residual_correlation(
    x_p: &CVec,
    ops: &ChannelOperators,
    model: &ChannelModel,
    n_trials: usize,
    seed: u64,
) -> Result<(CMat, CMat)> {
    let omega = ops.dictionary().omega(x_p);
    let gain = lmmse_gain(&omega, model)?;
    let kh = model.num_taps();
    let width = kh * kh;
    // layout: [re sums | im sums | re² sums | im² sums]
    let sums = chunked(n_trials, seed, 4 * width, |rng, acc| {
        let h = sample_channel_with(model, rng);
        let y = &omega * &h.gains + CVec::from_fn(omega.nrows(), |_, _| cscg(rng, model.noise_variance));
        let est = &gain * y;
        let err = &h.gains - &est;
        for j in 0..kh {
            for i in 0..kh {
                let v = err[i] * est[j].conj();
                let idx = i + kh * j;
                acc[idx].add(v.re);
                acc[width + idx].add(v.im);
                acc[2 * width + idx].add(v.re * v.re);
                acc[3 * width + idx].add(v.im * v.im);
            }
        }
    });
    let mut mean = CMat::zeros(kh, kh);
    let mut se = CMat::zeros(kh, kh);
    for j in 0..kh {
        for i in 0..kh {
            let idx = i + kh * j;
            let re = estimate_from_moments(sums[idx], sums[2 * width + idx], n_trials);
            let im = estimate_from_moments(sums[width + idx], sums[3 * width + idx], n_trials);
            mean[(i, j)] = C64::new(re.mean, im.mean);
            se[(i, j)] = C64::new(re.stderr, im.stderr);
        }
    }
    Ok((mean, se))
}

/// `(Ω^H Ω/σ_n² + I/(pσ_h²))^{-1} Ω^H / σ_n²`, so that `ĥ = W y_p`.
fn lmmse_gain(omega: &CMat, model: &ChannelModel) -> Result<CMat> {
    let cov = lmmse_error_covariance(omega, model)?;
    Ok(cov * omega.adjoint() * C64::from(1.0 / model.noise_variance))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CsiMode {
    /// LMMSE estimate from the pilot observation.
    #[default]
    Estimated,
    /// The receiver is given the true channel.
    Perfect,
}

/// Empirical SINR `p_c R_c / E‖(H_c - Ĥ_c) x_c + n_c‖²`. The standard error is
/// propagated from the mean effective-noise energy by the delta method.
pub fn oracle_sinr(
    p_c: f64,
    x_p: &CVec,
    ops: &ChannelOperators,
    model: &ChannelModel,
    csi: CsiMode,
    n_trials: usize,
    seed: u64,
) -> Result<Estimate> {
    if n_trials < 100 {
        return Err(DfrcError::Config("SINR oracle needs at least 100 trials".into()));
    }
    let omega = ops.dictionary().omega(x_p);
    let gain = lmmse_gain(&omega, model)?;
    let r_c = ops.data_blocks().first().map_or(0, |b| b.nrows());
    let k_c = ops.data_blocks().first().map_or(0, |b| b.ncols());
    let sums = chunked(n_trials, seed, 2, |rng, acc| {
        let h = sample_channel_with(model, rng);
        let err = match csi {
            CsiMode::Perfect => CVec::zeros(h.gains.len()),
            CsiMode::Estimated => {
                let y = &omega * &h.gains + CVec::from_fn(omega.nrows(), |_, _| cscg(rng, model.noise_variance));
                &h.gains - &gain * y
            }
        };
        let x_c = CVec::from_fn(k_c, |_, _| cscg(rng, p_c));
        let n_c = CVec::from_fn(r_c, |_, _| cscg(rng, model.noise_variance));
        let v = ops.data_channel(&err) * x_c + n_c;
        let e = v.norm_squared();
        acc[0].add(e);
        acc[1].add(e * e);
    });
    let energy = estimate_from_moments(sums[0], sums[1], n_trials);
    let value = p_c * r_c as f64 / energy.mean;
    Ok(Estimate {
        mean: value,
        stderr: value * energy.stderr / energy.mean,
    })
}

/// Unit-energy constellation with Gray bit labelling.
pub trait Modulation: Named + Send + Sync {
    fn bits_per_symbol(&self) -> usize;
    fn map(&self, bits: &[u8]) -> C64;
    fn demap(&self, symbol: C64, bits: &mut [u8]);
}

pub struct Qpsk;

impl Named for Qpsk {
    fn name(&self) -> &'static str {
        "qpsk"
    }
}

impl Modulation for Qpsk {
    fn bits_per_symbol(&self) -> usize {
        2
    }

    fn map(&self, bits: &[u8]) -> C64 {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        C64::new(s * (1.0 - 2.0 * bits[0] as f64), s * (1.0 - 2.0 * bits[1] as f64))
    }

    fn demap(&self, symbol: C64, bits: &mut [u8]) {
        bits[0] = (symbol.re < 0.0) as u8;
        bits[1] = (symbol.im < 0.0) as u8;
    }
}

pub struct Qam16;

const QAM16_SCALE: f64 = 0.316_227_766_016_837_94; // 1/sqrt(10)

impl Qam16 {
    // Gray order along one axis: 00 -> -3, 01 -> -1, 11 -> +1, 10 -> +3
    fn level(b0: u8, b1: u8) -> f64 {
        match (b0, b1) {
            (0, 0) => -3.0,
            (0, 1) => -1.0,
            (1, 1) => 1.0,
            _ => 3.0,
        }
    }

    fn slice(v: f64) -> (u8, u8) {
        let v = v / QAM16_SCALE;
        if v < -2.0 {
            (0, 0)
        } else if v < 0.0 {
            (0, 1)
        } else if v < 2.0 {
            (1, 1)
        } else {
            (1, 0)
        }
    }
}

impl Named for Qam16 {
    fn name(&self) -> &'static str {
        "16qam"
    }
}

impl Modulation for Qam16 {
    fn bits_per_symbol(&self) -> usize {
        4
    }

    fn map(&self, bits: &[u8]) -> C64 {
        C64::new(Self::level(bits[0], bits[1]), Self::level(bits[2], bits[3])) * QAM16_SCALE
    }

    fn demap(&self, symbol: C64, bits: &mut [u8]) {
        let (a, b) = Self::slice(symbol.re);
        let (c, d) = Self::slice(symbol.im);
        bits.copy_from_slice(&[a, b, c, d]);
    }
}

pub fn modulations() -> Registry<dyn Modulation> {
    let mut r: Registry<dyn Modulation> = Registry::new("modulation");
    r.register(Box::new(Qpsk)).register(Box::new(Qam16));
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BerConfig {
    pub modulation: String,
    pub snr_db: Vec<f64>,
    pub n_frames: usize,
    pub seed: u64,
    #[serde(default)]
    pub csi: CsiMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BerPoint {
    pub snr_db: f64,
    pub ber: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub bit_errors: u64,
    pub n_bits: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BerResult {
    pub points: Vec<BerPoint>,
}

impl BerResult {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "snr_db,ber,ci_low,ci_high,n_bits")?;
        for p in &self.points {
            writeln!(out, "{},{:e},{:e},{:e},{}", p.snr_db, p.ber, p.ci_low, p.ci_high, p.n_bits)?;
        }
        Ok(())
    }
}

/// Wilson score interval at 95% confidence.
pub fn wilson_interval(errors: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let n = trials as f64;
    let p = errors as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Where the per-frame channel comes from.
#[derive(Clone, Debug)]
pub enum ChannelSource {
    /// Fresh Bernoulli-Gaussian draw per frame.
    Random,
    /// The same deterministic taps every frame.
    Fixed(CVec),
}

/// Uncoded BER of a design under estimated (or perfect) CSI with a per-frame
/// unbiased LMMSE equalizer. SNR is `p_c / σ_n²`; the noise variance of
/// `model` is replaced at each grid point.
pub fn run_ber(
    p_c: f64,
    x_p: &CVec,
    placement: &Placement,
    ops: &ChannelOperators,
    model: &ChannelModel,
    source: &ChannelSource,
    cfg: &BerConfig,
) -> Result<BerResult> {
    if cfg.n_frames == 0 {
        return Err(DfrcError::Config("BER needs at least one frame".into()));
    }
    if !(p_c > 0.0) {
        return Err(DfrcError::Config("BER needs positive data power".into()));
    }
    let registry = modulations();
    let modulation = registry.get(&cfg.modulation)?;
    let omega = ops.dictionary().omega(x_p);
    let mut points = Vec::with_capacity(cfg.snr_db.len());
    for (si, &snr_db) in cfg.snr_db.iter().enumerate() {
        let noise = p_c / 10f64.powf(snr_db / 10.0);
        let m = model.with_noise_variance(noise);
        let gain = lmmse_gain(&omega, &m)?;
        let effective_noise = match cfg.csi {
            CsiMode::Estimated => p_c * trace_term(ops.dictionary(), x_p, &m)? + noise,
            CsiMode::Perfect => noise,
        };
        let ctx = FrameContext {
            p_c,
            x_p,
            placement,
            ops,
            model: &m,
            source,
            modulation,
            gain: &gain,
            regularizer: effective_noise / p_c,
            csi: cfg.csi,
        };
        let stream_base = (si as u64) << 40;
        let errors: u64 = (0..cfg.n_frames)
            .into_par_iter()
            .map(|f| {
                let mut rng = stream_rng(cfg.seed, stream_base + f as u64);
                ctx.frame_errors(&mut rng)
            })
            .sum();
        let n_bits = (cfg.n_frames * placement.num_data() * modulation.bits_per_symbol()) as u64;
        let (lo, hi) = wilson_interval(errors, n_bits);
        points.push(BerPoint {
            snr_db,
            ber: errors as f64 / n_bits as f64,
            ci_low: lo,
            ci_high: hi,
            bit_errors: errors,
            n_bits,
        });
    }
    Ok(BerResult { points })
}

struct FrameContext<'a> {
    p_c: f64,
    x_p: &'a CVec,
    placement: &'a Placement,
    ops: &'a ChannelOperators,
    model: &'a ChannelModel,
    source: &'a ChannelSource,
    modulation: &'a dyn Modulation,
    gain: &'a CMat,
    regularizer: f64,
    csi: CsiMode,
}

impl FrameContext<'_> {
    fn frame_errors(&self, rng: &mut ChaCha8Rng) -> u64 {
        let bps = self.modulation.bits_per_symbol();
        let kc = self.placement.num_data();
        let h = match self.source {
            ChannelSource::Random => sample_channel_with(self.model, rng).gains,
            ChannelSource::Fixed(g) => g.clone(),
        };
        let bits: Vec<u8> = (0..kc * bps).map(|_| rng.random::<bool>() as u8).collect();
        let amp = self.p_c.sqrt();
        let data: Vec<C64> = bits.chunks(bps).map(|b| self.modulation.map(b) * amp).collect();
        let x_dd = self.placement.assemble(self.x_p.as_slice(), &data);
        let mut y = self.ops.apply(&h, &x_dd);
        for v in y.iter_mut() {
            *v += cscg(rng, self.model.noise_variance);
        }
        let h_hat = match self.csi {
            CsiMode::Perfect => h,
            CsiMode::Estimated => {
                let y_p = CVec::from_iterator(
                    self.placement.rx_pilot_indices.len(),
                    self.placement.rx_pilot_indices.iter().map(|&i| y[i]),
                );
                self.gain * y_p
            }
        };
        let y_c = CVec::from_iterator(
            self.placement.rx_data_indices.len(),
            self.placement.rx_data_indices.iter().map(|&i| y[i]),
        );
        let hc = self.ops.data_channel(&h_hat);
        let estimate = equalize(&hc, &y_c, self.regularizer);
        let mut decided = vec![0u8; bps];
        let mut errors = 0u64;
        for (k, s) in estimate.iter().enumerate() {
            self.modulation.demap(*s / amp, &mut decided);
            errors += decided
                .iter()
                .zip(&bits[k * bps..(k + 1) * bps])
                .filter(|(a, b)| a != b)
                .count() as u64;
        }
        errors
    }
}

/// Unbiased LMMSE equalizer: `x̂_k = [(H^H H + λI)^{-1} H^H y]_k / (1 - λ [(H^H H + λI)^{-1}]_kk)`.
fn equalize(h: &CMat, y: &CVec, lambda: f64) -> CVec {
    let k = h.ncols();
    let g = h.adjoint() * h + CMat::identity(k, k) * C64::from(lambda);
    let Some(inv) = inverse_hpd(&g) else {
        return CVec::zeros(k);
    };
    let raw = &inv * (h.adjoint() * y);
    CVec::from_fn(k, |i, _| {
        let bias = 1.0 - lambda * inv[(i, i)].re;
        if bias > 1e-12 {
            raw[i] / bias
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

/// Convenience wrapper around [`lmmse_estimate`] used by callers that build
/// their own pilot observation.
pub fn estimate_channel(omega: &CMat, y_p: &CVec, model: &ChannelModel) -> Result<CVec> {
    lmmse_estimate(omega, y_p, model)
}
