//! Configuration documents and the named experiment runners behind the
//! command line front-end.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{ChannelModel, ChannelOperators};
use crate::grid::{validate_guard, GridConfig, KernelBank, Placement};
use crate::linalg::{CVec, C64};
use crate::metrics::{empirical_af, to_db, write_af_csv, AfBin, MetricReport};
use crate::montecarlo::{run_ber, BerConfig, BerResult, ChannelSource, CsiMode};
use crate::optimizer::{solve, write_trace_csv, DesignState, Evaluation, ProblemSpec, Solution, SolverOptions};
use crate::patterns::{generate_placement, pilot_patterns};
use crate::registry::{Named, Registry};
use crate::{DfrcError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub placement: PlacementSection,
    #[serde(default = "default_channel")]
    pub channel: ChannelModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensing: Option<SensingSection>,
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub af: AfSection,
    #[serde(default)]
    pub ber: BerSection,
}

/// Optional defaults for the command line; its arguments take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub m: usize,
    pub n: usize,
    /// CP length in samples; exclusive with `r_cp`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_cp: Option<usize>,
    /// CP length as a fraction of `MN`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_cp: Option<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            m: 8,
            n: 16,
            n_cp: None,
            r_cp: None,
        }
    }
}

impl GridSection {
    pub fn resolve(&self) -> Result<GridConfig> {
        let mn = self.m * self.n;
        let n_cp = match (self.n_cp, self.r_cp) {
            (Some(_), Some(_)) => return Err(DfrcError::Config("grid: give either n_cp or r_cp, not both".into())),
            (Some(n_cp), None) => n_cp,
            (None, r_cp) => {
                let r = r_cp.unwrap_or(0.125);
                if !(0.0..1.0).contains(&r) {
                    return Err(DfrcError::Config(format!("grid: r_cp must lie in [0, 1), got {r}")));
                }
                (r * mn as f64).round() as usize
            }
        };
        GridConfig::new(self.m, self.n, n_cp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementSection {
    /// Pilot archetype used when a single configured pattern is evaluated.
    pub pattern: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_pilots: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_data: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_pilot: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_gi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pilot_indices: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_indices: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rx_pilot_indices: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rx_data_indices: Option<Vec<usize>>,
    /// Explicit pilot values `[re, im]`, used by the "custom" start.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pilots: Option<Vec<[f64; 2]>>,
}

impl Default for PlacementSection {
    fn default() -> Self {
        PlacementSection {
            pattern: "spike".into(),
            num_pilots: None,
            num_data: None,
            r_pilot: None,
            r_gi: None,
            pilot_indices: None,
            data_indices: None,
            rx_pilot_indices: None,
            rx_data_indices: None,
            pilots: None,
        }
    }
}

impl PlacementSection {
    /// `(K_p, K_c)` from explicit counts or from the pilot and guard ratios.
    fn counts(&self, grid: &GridConfig) -> Result<(usize, usize)> {
        match (self.num_pilots, self.num_data, self.r_pilot, self.r_gi) {
            (Some(kp), Some(kc), None, None) => Ok((kp, kc)),
            (None, None, r_pilot, r_gi) => {
                let r_pilot = r_pilot.unwrap_or(0.375);
                let r_gi = r_gi.unwrap_or(0.5);
                if !(0.0..=1.0).contains(&r_pilot) || !(0.0..1.0).contains(&r_gi) {
                    return Err(DfrcError::Config(format!(
                        "placement: r_pilot {r_pilot} must lie in [0, 1] and r_gi {r_gi} in [0, 1)"
                    )));
                }
                let total = ((1.0 - r_gi) * grid.mn() as f64).round() as usize;
                let kp = (r_pilot * total as f64).round() as usize;
                Ok((kp, total - kp))
            }
            _ => Err(DfrcError::Config(
                "placement: give num_pilots and num_data together, or r_pilot/r_gi, not a mix".into(),
            )),
        }
    }

    pub fn resolve(&self, grid: GridConfig, max_delay: usize, max_doppler: usize) -> Result<Placement> {
        match (&self.pilot_indices, &self.data_indices) {
            (Some(pilots), Some(data)) => {
                if self.num_pilots.is_some() || self.num_data.is_some() || self.r_pilot.is_some() || self.r_gi.is_some() {
                    return Err(DfrcError::Config("placement: explicit indices exclude counts and ratios".into()));
                }
                match (&self.rx_pilot_indices, &self.rx_data_indices) {
                    (Some(rp), Some(rd)) => Placement::new(grid, pilots.clone(), data.clone(), rp.clone(), rd.clone()),
                    (None, None) => Placement::with_spread_rx(grid, pilots.clone(), data.clone(), max_delay, max_doppler),
                    _ => Err(DfrcError::Config("placement: give both receive index lists or neither".into())),
                }
            }
            (None, None) => {
                if self.rx_pilot_indices.is_some() || self.rx_data_indices.is_some() {
                    return Err(DfrcError::Config("placement: receive lists need explicit transmit indices".into()));
                }
                let (kp, kc) = self.counts(&grid)?;
                generate_placement(grid, kp, kc, max_delay, max_doppler)
            }
            _ => Err(DfrcError::Config("placement: give both pilot_indices and data_indices or neither".into())),
        }
    }
}

/// Sensing window `|l| ≤ L̂`, `|k| ≤ Q̂`; defaults to the channel spread.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensingSection {
    pub max_delay: usize,
    pub max_doppler: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    /// Weight used by `optimize`.
    pub eta: f64,
    /// Weights swept by `region`.
    pub eta_grid: Vec<f64>,
    pub p_max_dbm: f64,
    /// Absolute mainlobe floor; exclusive with `xi_min_ratio`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub xi_min: Option<f64>,
    /// Mainlobe floor as a fraction of `(MN + N_CP) P_max` (default 0.8).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub xi_min_ratio: Option<f64>,
    /// Fixed metric normalisers. When absent they are taken from the
    /// `eta = 1` optimum.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sinr_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub isl_scale: Option<f64>,
    pub baselines: Vec<String>,
    /// Points of the baseline power-split sweep.
    pub split_points: usize,
}

impl Default for ProblemSection {
    fn default() -> Self {
        ProblemSection {
            eta: 0.5,
            eta_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            p_max_dbm: 30.0,
            xi_min: None,
            xi_min_ratio: None,
            sinr_scale: None,
            isl_scale: None,
            baselines: vec!["flat".into(), "cluster".into()],
            split_points: 41,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AfSection {
    pub etas: Vec<f64>,
    pub n_draws: usize,
    /// "optimized" designs per eta, or the configured "placement" pattern.
    pub source: String,
    /// Data share of the power budget for the "placement" source.
    pub data_share: f64,
}

impl Default for AfSection {
    fn default() -> Self {
        AfSection {
            etas: vec![0.0, 0.5, 1.0],
            n_draws: 10_000,
            source: "optimized".into(),
            data_share: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BerSection {
    pub modulation: String,
    pub snr_db: Vec<f64>,
    pub n_frames: usize,
    pub csi: CsiMode,
    /// Weight of the optimized design.
    pub eta: f64,
    /// Also simulate the baselines at the optimized design's power split.
    pub baselines: bool,
}

impl Default for BerSection {
    fn default() -> Self {
        BerSection {
            modulation: "qpsk".into(),
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            n_frames: 1000,
            csi: CsiMode::Estimated,
            eta: 1.0,
            baselines: true,
        }
    }
}

fn default_channel() -> ChannelModel {
    ChannelModel {
        max_delay: 7,
        max_doppler: 3,
        activity: 0.25,
        tap_variance: 1.0,
        noise_variance: 0.1,
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            run: RunSection::default(),
            grid: GridSection::default(),
            placement: PlacementSection::default(),
            channel: default_channel(),
            sensing: None,
            problem: ProblemSection::default(),
            solver: SolverOptions::default(),
            af: AfSection::default(),
            ber: BerSection::default(),
        }
    }
}

fn check_eta(what: &str, eta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&eta) {
        Ok(())
    } else {
        Err(DfrcError::Config(format!("{what}: eta {eta} outside [0, 1]")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| DfrcError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| DfrcError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Checks every field that can be checked without building operators.
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid.resolve()?;
        self.channel.validate()?;
        self.solver.validate()?;
        let p = &self.problem;
        check_eta("problem", p.eta)?;
        if p.eta_grid.is_empty() {
            return Err(DfrcError::Config("problem: eta_grid is empty".into()));
        }
        for &eta in &p.eta_grid {
            check_eta("problem.eta_grid", eta)?;
        }
        if !p.p_max_dbm.is_finite() {
            return Err(DfrcError::Config("problem: p_max_dbm must be finite".into()));
        }
        if p.xi_min.is_some() && p.xi_min_ratio.is_some() {
            return Err(DfrcError::Config("problem: give either xi_min or xi_min_ratio, not both".into()));
        }
        if let Some(r) = p.xi_min_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(DfrcError::Config(format!("problem: xi_min_ratio {r} outside [0, 1]")));
            }
        }
        if p.sinr_scale.is_some() != p.isl_scale.is_some() {
            return Err(DfrcError::Config("problem: give both sinr_scale and isl_scale or neither".into()));
        }
        if p.split_points < 2 {
            return Err(DfrcError::Config("problem: split_points must be at least 2".into()));
        }
        let patterns = pilot_patterns();
        patterns.get(&self.placement.pattern)?;
        for b in &p.baselines {
            patterns.get(b)?;
        }
        if self.solver.init == "custom" && self.placement.pilots.is_none() {
            return Err(DfrcError::Config("solver.init = \"custom\" needs placement.pilots".into()));
        }
        if self.af.n_draws == 0 {
            return Err(DfrcError::Config("af: n_draws must be positive".into()));
        }
        for &eta in &self.af.etas {
            check_eta("af.etas", eta)?;
        }
        if !matches!(self.af.source.as_str(), "optimized" | "placement") {
            return Err(DfrcError::Config(format!(
                "af: unknown source '{}' (available: optimized, placement)",
                self.af.source
            )));
        }
        if !(0.0..=1.0).contains(&self.af.data_share) {
            return Err(DfrcError::Config("af: data_share outside [0, 1]".into()));
        }
        check_eta("ber", self.ber.eta)?;
        if self.ber.n_frames == 0 || self.ber.snr_db.is_empty() {
            return Err(DfrcError::Config("ber: needs at least one frame and one SNR point".into()));
        }
        crate::montecarlo::modulations().get(&self.ber.modulation)?;
        if let Some(s) = &self.sensing {
            if s.max_delay >= grid.frame_len() {
                return Err(DfrcError::Config("sensing: max_delay must be below the frame length".into()));
            }
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Independent sub-seed for a named stage.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 8 bytes"))
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Metric normalisers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Scales {
    pub sinr: f64,
    pub isl: f64,
}

/// An optimized design and the start it came from.
#[derive(Clone, Debug)]
pub struct Design {
    pub eta: f64,
    pub start: String,
    pub solution: Solution,
}

impl Design {
    pub fn p_c(&self) -> f64 {
        self.solution.state.p_c
    }

    pub fn pilots(&self) -> &CVec {
        &self.solution.state.x_p
    }

    pub fn evaluation(&self) -> &Evaluation {
        &self.solution.evaluation
    }
}

/// Highest-objective design; earlier entries win ties.
pub fn best_design(designs: Vec<Design>) -> Result<Design> {
    let mut best: Option<Design> = None;
    for d in designs {
        if best.as_ref().is_none_or(|b| d.solution.evaluation.objective > b.solution.evaluation.objective) {
            best = Some(d);
        }
    }
    best.ok_or_else(|| DfrcError::Config("no optimisation start configured".into()))
}

/// One point of a performance-region sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrontierPoint {
    pub series: String,
    /// `eta` for optimized points, data share `t` for baselines.
    pub param: f64,
    pub start: String,
    pub p_c: f64,
    pub pilot_energy: f64,
    pub sinr: f64,
    pub isl: f64,
    pub tx_power: f64,
}

pub const FRONTIER_CSV_HEADER: &str =
    "series,param,start,p_c,pilot_energy,sinr,isl,sinr_db,isl_db,sinr_norm,isl_norm,tx_power";

pub fn write_frontier_csv<W: Write>(points: &[FrontierPoint], scales: Scales, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{FRONTIER_CSV_HEADER}")?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{:e},{:e},{:e},{:e},{:.6},{:.6},{:e},{:e},{:e}",
            p.series,
            p.param,
            p.start,
            p.p_c,
            p.pilot_energy,
            p.sinr,
            p.isl,
            to_db(p.sinr),
            to_db(p.isl),
            p.sinr / scales.sinr,
            p.isl / scales.isl,
            p.tx_power
        )?;
    }
    Ok(())
}

/// Dominance margins of the optimized frontier over the baselines.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegionMargins {
    /// Optimized ISL at the smallest `eta`.
    pub optimized_isl: f64,
    pub best_baseline_isl: f64,
    pub isl_baseline: String,
    /// `10 log10(best baseline ISL / optimized ISL)`.
    pub isl_margin_db: f64,
    /// Optimized SINR at the largest `eta`.
    pub optimized_sinr: f64,
    pub best_baseline_sinr: f64,
    pub sinr_baseline: String,
    pub sinr_margin_db: f64,
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        if num > 0.0 { f64::INFINITY } else { f64::NAN }
    } else {
        10.0 * (num / den).log10()
    }
}

pub fn region_margins(points: &[FrontierPoint]) -> Result<RegionMargins> {
    let optimized: Vec<&FrontierPoint> = points.iter().filter(|p| p.series == "optimized").collect();
    let baselines: Vec<&FrontierPoint> = points.iter().filter(|p| p.series != "optimized").collect();
    if optimized.is_empty() || baselines.is_empty() {
        return Err(DfrcError::Config("region margins need optimized and baseline points".into()));
    }
    let low = optimized.iter().min_by(|a, b| a.param.total_cmp(&b.param)).expect("non-empty");
    let high = optimized.iter().max_by(|a, b| a.param.total_cmp(&b.param)).expect("non-empty");
    let min_isl = baselines.iter().min_by(|a, b| a.isl.total_cmp(&b.isl)).expect("non-empty");
    let max_sinr = baselines.iter().max_by(|a, b| a.sinr.total_cmp(&b.sinr)).expect("non-empty");
    Ok(RegionMargins {
        optimized_isl: low.isl,
        best_baseline_isl: min_isl.isl,
        isl_baseline: min_isl.series.clone(),
        isl_margin_db: ratio_db(min_isl.isl, low.isl),
        optimized_sinr: high.sinr,
        best_baseline_sinr: max_sinr.sinr,
        sinr_baseline: max_sinr.series.clone(),
        sinr_margin_db: ratio_db(high.sinr, max_sinr.sinr),
    })
}

/// Sidelobe summary of one empirical AF.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AfSummary {
    pub label: String,
    pub eta: f64,
    pub p_c: f64,
    pub isl_expected: f64,
    pub sidelobe_energy: f64,
    pub zero_doppler_sidelobe: f64,
    pub zero_delay_sidelobe: f64,
}

fn slice_sidelobe(bins: &[&AfBin]) -> f64 {
    bins.iter()
        .filter(|b| b.delay != 0 || b.doppler != 0)
        .map(|b| b.mean_abs_f_sq)
        .sum()
}

/// Operators and resolved parameters shared by every stage of a run.
pub struct Context {
    pub config: ExperimentConfig,
    pub placement: Placement,
    pub model: ChannelModel,
    pub bank: KernelBank,
    pub ops: ChannelOperators,
    pub p_max: f64,
    pub xi_min: f64,
}

impl Context {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid.resolve()?;
        let model = config.channel;
        let placement = config.placement.resolve(grid, model.max_delay, model.max_doppler)?;
        let guard = validate_guard(&placement, model.max_delay, model.max_doppler);
        if !guard.is_valid() {
            return Err(DfrcError::InvalidPlacement(format!(
                "{} guard violations for L = {}, Q = {}",
                guard.violations.len(),
                model.max_delay,
                model.max_doppler
            )));
        }
        let (l_hat, q_hat) = config
            .sensing
            .map_or((model.max_delay, model.max_doppler), |s| (s.max_delay, s.max_doppler));
        let bank = KernelBank::build(&placement, l_hat, q_hat)?;
        let ops = ChannelOperators::build(&placement, &model)?;
        let p_max = dbm_to_watts(config.problem.p_max_dbm);
        let budget = grid.frame_len() as f64 * p_max;
        let xi_min = config
            .problem
            .xi_min
            .unwrap_or(config.problem.xi_min_ratio.unwrap_or(0.8) * budget);
        if let Some(pilots) = &config.placement.pilots {
            if pilots.len() != placement.num_pilots() {
                return Err(DfrcError::Config(format!(
                    "placement.pilots has {} values for {} pilot cells",
                    pilots.len(),
                    placement.num_pilots()
                )));
            }
        }
        Ok(Context {
            config: config.clone(),
            placement,
            model,
            bank,
            ops,
            p_max,
            xi_min,
        })
    }

    pub fn spec(&self, eta: f64, scales: Scales) -> ProblemSpec<'_> {
        ProblemSpec {
            eta,
            p_max: self.p_max,
            xi_min: self.xi_min,
            sinr_scale: scales.sinr,
            isl_scale: scales.isl,
            bank: &self.bank,
            ops: &self.ops,
            model: self.model,
        }
    }

    /// Unit-scale pilots of a named pattern, or the configured values for "custom".
    pub fn pattern_pilots(&self, name: &str) -> Result<CVec> {
        if name == "custom" {
            let values = self
                .config
                .placement
                .pilots
                .as_ref()
                .ok_or_else(|| DfrcError::Config("no custom pilots configured".into()))?;
            return Ok(CVec::from_iterator(values.len(), values.iter().map(|[re, im]| C64::new(*re, *im))));
        }
        Ok(pilot_patterns().get(name)?.pilots(&self.placement))
    }

    fn starts(&self) -> Vec<String> {
        match self.config.solver.init.as_str() {
            "multistart" => pilot_patterns().names().into_iter().map(String::from).collect(),
            other => vec![other.to_string()],
        }
    }

    /// Solves the weighted problem once from every configured start.
    pub fn optimize_all(&self, eta: f64, scales: Scales) -> Result<Vec<Design>> {
        let spec = self.spec(eta, scales);
        let opts = &self.config.solver;
        self.starts()
            .into_iter()
            .map(|start| {
                let stage = format!("optimize eta={eta} start={start}");
                let run = || -> Result<Solution> {
                    let shape = self.pattern_pilots(&start)?;
                    let (p_c, x) = spec.best_split(&shape, opts.split_grid)?;
                    let init = DesignState::at(&spec, p_c, x, opts.rho)?;
                    solve(&spec, opts, &init)
                };
                let solution = run().map_err(|e| e.in_stage(&stage))?;
                info!(
                    "eta {eta} start {start}: objective {:.6e} (SINR {:.4}, ISL {:.4e})",
                    solution.evaluation.objective, solution.evaluation.sinr, solution.evaluation.isl
                );
                Ok(Design { eta, start, solution })
            })
            .collect()
    }

    /// Best of [`Context::optimize_all`]; earlier starts win ties.
    pub fn optimize(&self, eta: f64, scales: Scales) -> Result<Design> {
        best_design(self.optimize_all(eta, scales)?)
    }

    /// Normalisers from the `eta = 1` optimum: its SINR and its ISL. Returns
    /// the `eta = 1` design as well when one was computed.
    pub fn normalisers(&self) -> Result<(Scales, Option<Design>)> {
        if let (Some(sinr), Some(isl)) = (self.config.problem.sinr_scale, self.config.problem.isl_scale) {
            return Ok((Scales { sinr, isl }, None));
        }
        let provisional = {
            let spec = self.spec(1.0, Scales { sinr: 1.0, isl: 1.0 });
            let mut sinr: f64 = 0.0;
            for start in self.starts() {
                let shape = self.pattern_pilots(&start)?;
                let (p_c, x) = spec.best_split(&shape, self.config.solver.split_grid)?;
                sinr = sinr.max(spec.evaluate(p_c, &x)?.sinr);
            }
            Scales {
                sinr: if sinr > 0.0 { sinr } else { 1.0 },
                isl: 1.0,
            }
        };
        let design = self.optimize(1.0, provisional).map_err(|e| e.in_stage("normalisers"))?;
        let e = design.evaluation();
        let scales = Scales {
            sinr: if e.sinr > 0.0 { e.sinr } else { 1.0 },
            isl: if e.isl > 0.0 { e.isl } else { 1.0 },
        };
        Ok((scales, Some(design)))
    }

    /// Optimized designs for each weight, reusing the normaliser run at `eta = 1`.
    pub fn designs(&self, etas: &[f64]) -> Result<(Scales, Vec<Design>)> {
        let (scales, top) = self.normalisers()?;
        let mut out = Vec::with_capacity(etas.len());
        for &eta in etas {
            let design = match &top {
                Some(d) if eta == 1.0 => d.clone(),
                _ => self.optimize(eta, scales)?,
            };
            out.push(design);
        }
        Ok((scales, out))
    }

    pub fn report(&self, eta: f64, p_c: f64, x_p: &CVec) -> Result<MetricReport> {
        MetricReport::evaluate(eta, p_c, x_p, &self.bank, self.ops.dictionary(), &self.model)
    }

    /// Baseline sweep of the data share `t` from pilot-only (0) to data-only (1).
    pub fn baseline_sweep(&self, name: &str) -> Result<Vec<FrontierPoint>> {
        let spec = self.spec(0.5, Scales { sinr: 1.0, isl: 1.0 });
        let shape = self.pattern_pilots(name)?;
        let n = self.config.problem.split_points;
        (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                let (p_c, x) = spec.split_point(&shape, t);
                let e = spec.evaluate(p_c, &x)?;
                Ok(FrontierPoint {
                    series: name.to_string(),
                    param: t,
                    start: String::new(),
                    p_c,
                    pilot_energy: x.norm_squared(),
                    sinr: e.sinr,
                    isl: e.isl,
                    tx_power: e.tx_power,
                })
            })
            .collect()
    }

    pub fn empirical_summary(&self, label: &str, eta: f64, p_c: f64, x_p: &CVec, seed: u64) -> Result<(AfSummary, Vec<AfBin>)> {
        let table = empirical_af(x_p, p_c, &self.bank, self.config.af.n_draws, seed)?;
        let summary = AfSummary {
            label: label.to_string(),
            eta,
            p_c,
            isl_expected: crate::metrics::isl_expected(p_c, x_p, &self.bank),
            sidelobe_energy: table.sidelobe_energy(),
            zero_doppler_sidelobe: slice_sidelobe(&table.zero_doppler()),
            zero_delay_sidelobe: slice_sidelobe(&table.zero_delay()),
        };
        Ok((summary, table.bins))
    }
}

impl FrontierPoint {
    pub fn optimized(design: &Design) -> Self {
        let e = design.evaluation();
        FrontierPoint {
            series: "optimized".into(),
            param: design.eta,
            start: design.start.clone(),
            p_c: design.p_c(),
            pilot_energy: design.pilots().norm_squared(),
            sinr: e.sinr,
            isl: e.isl,
            tx_power: e.tx_power,
        }
    }
}

/// Collects the files an experiment writes.
pub struct Artifacts {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn write<F>(&mut self, name: &str, body: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        body(&mut w)?;
        w.flush()?;
        self.files.push(path.clone());
        Ok(path)
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }
}

fn write_design_csv<W: Write>(ctx: &Context, x_p: &CVec, mut out: W) -> std::io::Result<()> {
    writeln!(out, "cell,delay,doppler,re,im")?;
    for (k, &cell) in ctx.placement.pilot_indices.iter().enumerate() {
        let (l, q) = ctx.placement.grid.cell(cell);
        writeln!(out, "{cell},{l},{q},{:e},{:e}", x_p[k].re, x_p[k].im)?;
    }
    Ok(())
}

fn write_reports<W: Write>(rows: &[(String, MetricReport)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "label,{}", MetricReport::CSV_HEADER)?;
    for (label, r) in rows {
        writeln!(out, "{label},{}", r.csv_row())?;
    }
    Ok(())
}

fn eta_tag(eta: f64) -> String {
    format!("{eta}")
}

/// A named experiment writing its artifacts through `Artifacts`.
pub trait Experiment: Named + Send + Sync {
    fn run(&self, ctx: &Context, out: &mut Artifacts) -> Result<()>;
}

/// Single weighted design at `problem.eta`: design, metrics and solver trace.
pub struct Optimize;

impl Named for Optimize {
    fn name(&self) -> &'static str {
        "optimize"
    }
}

impl Experiment for Optimize {
    fn run(&self, ctx: &Context, out: &mut Artifacts) -> Result<()> {
        let eta = ctx.config.problem.eta;
        let (scales, top) = ctx.normalisers()?;
        let design = match top {
            Some(d) if eta == 1.0 => d,
            _ => ctx.optimize(eta, scales)?,
        };
        let report = ctx.report(eta, design.p_c(), design.pilots()).map_err(|e| e.in_stage("report"))?;
        out.write("design.csv", |w| write_design_csv(ctx, design.pilots(), w))?;
        out.write("metrics.csv", |w| write_reports(&[(design.start.clone(), report)], w))?;
        out.write("trace.csv", |w| write_trace_csv(&design.solution.trace, w))?;
        out.write("normalisers.csv", |w| {
            writeln!(w, "sinr_scale,isl_scale,consensus_residual")?;
            writeln!(w, "{:e},{:e},{:e}", scales.sinr, scales.isl, design.solution.consensus_residual)
        })?;
        Ok(())
    }
}

/// Performance region: optimized frontier over `problem.eta_grid` and the
/// baseline power-split sweeps.
pub struct Region;

impl Named for Region {
    fn name(&self) -> &'static str {
        "region"
    }
}

impl Experiment for Region {
    fn run(&self, ctx: &Context, out: &mut Artifacts) -> Result<()> {
        let (scales, designs) = ctx.designs(&ctx.config.problem.eta_grid)?;
        let mut points: Vec<FrontierPoint> = designs.iter().map(FrontierPoint::optimized).collect();
        for b in &ctx.config.problem.baselines {
            points.extend(ctx.baseline_sweep(b).map_err(|e| e.in_stage(&format!("baseline {b}")))?);
        }
        out.write("frontier.csv", |w| write_frontier_csv(&points, scales, w))?;
        let margins = region_margins(&points)?;
        out.write("margins.csv", |w| {
            writeln!(w, "axis,optimized,best_baseline,baseline,margin_db")?;
            writeln!(
                w,
                "isl,{:e},{:e},{},{}",
                margins.optimized_isl, margins.best_baseline_isl, margins.isl_baseline, margins.isl_margin_db
            )?;
            writeln!(
                w,
                "sinr,{:e},{:e},{},{}",
                margins.optimized_sinr, margins.best_baseline_sinr, margins.sinr_baseline, margins.sinr_margin_db
            )
        })?;
        for d in &designs {
            out.write(&format!("design_eta{}.csv", eta_tag(d.eta)), |w| write_design_csv(ctx, d.pilots(), w))?;
        }
        Ok(())
    }
}

/// Empirical AF slices of optimized designs (or of the configured pattern).
pub struct Af;

impl Named for Af {
    fn name(&self) -> &'static str {
        "af"
    }
}

impl Experiment for Af {
    fn run(&self, ctx: &Context, out: &mut Artifacts) -> Result<()> {
        let cfg = &ctx.config;
        let seed = derive_seed(cfg.seed, "af");
        let mut entries: Vec<(String, f64, f64, CVec)> = Vec::new();
        if cfg.af.source == "placement" {
            let name = cfg.placement.pattern.clone();
            let shape = ctx.pattern_pilots(&name)?;
            let (p_c, x) = ctx.spec(0.5, Scales { sinr: 1.0, isl: 1.0 }).split_point(&shape, cfg.af.data_share);
            entries.push((name, f64::NAN, p_c, x));
        } else {
            let (_, designs) = ctx.designs(&cfg.af.etas)?;
            for d in designs {
                entries.push((format!("eta{}", eta_tag(d.eta)), d.eta, d.p_c(), d.pilots().clone()));
            }
        }
        let mut summaries = Vec::new();
        for (label, eta, p_c, x) in &entries {
            let (summary, bins) = ctx
                .empirical_summary(label, *eta, *p_c, x, seed)
                .map_err(|e| e.in_stage(&format!("af {label}")))?;
            let zero_doppler: Vec<&AfBin> = bins.iter().filter(|b| b.doppler == 0).collect();
            let zero_delay: Vec<&AfBin> = bins.iter().filter(|b| b.delay == 0).collect();
            out.write(&format!("af_{label}_zero_doppler.csv"), |w| write_af_csv(zero_doppler.into_iter(), w))?;
            out.write(&format!("af_{label}_zero_delay.csv"), |w| write_af_csv(zero_delay.into_iter(), w))?;
            summaries.push(summary);
        }
        out.write("af_summary.csv", |w| {
            writeln!(w, "label,eta,p_c,isl_expected,sidelobe_energy,zero_doppler_sidelobe,zero_delay_sidelobe")?;
            for s in &summaries {
                writeln!(
                    w,
                    "{},{},{:e},{:e},{:e},{:e},{:e}",
                    s.label, s.eta, s.p_c, s.isl_expected, s.sidelobe_energy, s.zero_doppler_sidelobe, s.zero_delay_sidelobe
                )?;
            }
            Ok(())
        })?;
        Ok(())
    }
}

/// A design handed to the BER simulation.
#[derive(Clone, Debug)]
pub struct BerDesign {
    pub label: String,
    pub p_c: f64,
    pub x_p: CVec,
}

impl Context {
    /// The optimized design at `ber.eta` plus, when enabled, each baseline
    /// pattern at the same data power and total power.
    pub fn ber_designs(&self) -> Result<Vec<BerDesign>> {
        let eta = self.config.ber.eta;
        let (scales, top) = self.normalisers()?;
        let design = match top {
            Some(d) if eta == 1.0 => d,
            _ => self.optimize(eta, scales)?,
        };
        self.ber_designs_for(&design)
    }

    pub fn ber_designs_for(&self, design: &Design) -> Result<Vec<BerDesign>> {
        let mut designs = vec![BerDesign {
            label: "optimized".into(),
            p_c: design.p_c(),
            x_p: design.pilots().clone(),
        }];
        if self.config.ber.baselines {
            let spec = self.spec(design.eta, Scales { sinr: 1.0, isl: 1.0 });
            for b in &self.config.problem.baselines {
                let shape = self.pattern_pilots(b)?;
                let (p_c, x_p) = spec.pilots_at_power(&shape, design.p_c());
                designs.push(BerDesign { label: b.clone(), p_c, x_p });
            }
        }
        Ok(designs)
    }

    pub fn simulate_ber(&self, design: &BerDesign) -> Result<BerResult> {
        let b = &self.config.ber;
        let cfg = BerConfig {
            modulation: b.modulation.clone(),
            snr_db: b.snr_db.clone(),
            n_frames: b.n_frames,
            seed: derive_seed(self.config.seed, "ber"),
            csi: b.csi,
        };
        run_ber(design.p_c, &design.x_p, &self.placement, &self.ops, &self.model, &ChannelSource::Random, &cfg)
            .map_err(|e| e.in_stage(&format!("ber {}", design.label)))
    }
}

/// BER curves of the optimized design and the baselines.
pub struct Ber;

impl Named for Ber {
    fn name(&self) -> &'static str {
        "ber"
    }
}

impl Experiment for Ber {
    fn run(&self, ctx: &Context, out: &mut Artifacts) -> Result<()> {
        let designs = ctx.ber_designs()?;
        let mut reports = Vec::new();
        for d in &designs {
            let result = ctx.simulate_ber(d)?;
            out.write(&format!("ber_{}.csv", d.label), |w| result.write_csv(w))?;
            reports.push((d.label.clone(), ctx.report(ctx.config.ber.eta, d.p_c, &d.x_p)?));
        }
        out.write("ber_designs.csv", |w| write_reports(&reports, w))?;
        Ok(())
    }
}

pub fn experiments() -> Registry<dyn Experiment> {
    let mut r: Registry<dyn Experiment> = Registry::new("experiment");
    r.register(Box::new(Optimize))
        .register(Box::new(Region))
        .register(Box::new(Af))
        .register(Box::new(Ber));
    r
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    seed: u64,
    config_sha256: String,
    package: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    outputs: Vec<ManifestEntry>,
}

/// Runs `name` and writes its artifacts, the effective configuration and a
/// manifest into `out_dir`. Returns every file written.
pub fn run_experiment(config: &ExperimentConfig, name: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let registry = experiments();
    let experiment = registry.get(name)?;
    let ctx = Context::build(config).map_err(|e| e.in_stage("setup"))?;
    let mut out = Artifacts::new(out_dir)?;
    info!("running {name} into {}", out_dir.display());
    experiment.run(&ctx, &mut out).map_err(|e| match e {
        DfrcError::Stage { .. } => e,
        other => other.in_stage(name),
    })?;
    out.write("config.toml", |w| w.write_all(config.to_toml().as_bytes()))?;
    let mut outputs = Vec::new();
    for path in out.files() {
        let bytes = fs::read(path)?;
        outputs.push(ManifestEntry {
            file: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            sha256: hex(&Sha256::digest(&bytes)),
        });
    }
    let manifest = Manifest {
        experiment: name,
        seed: config.seed,
        config_sha256: config.hash(),
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config,
        outputs,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| DfrcError::Config(e.to_string()))?;
    out.write("manifest.json", |w| writeln!(w, "{json}"))?;
    Ok(out.files().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_the_reference_geometry() {
        let cfg = ExperimentConfig::default();
        let grid = cfg.grid.resolve().unwrap();
        assert_eq!((grid.m, grid.n, grid.n_cp), (8, 16, 16));
        let p = cfg.placement.resolve(grid, 7, 3).unwrap();
        assert_eq!((p.num_pilots(), p.num_data()), (24, 40));
        assert!((dbm_to_watts(30.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("seed = 1\n[grid]\nm = 4\nn = 4\nbogus = 2\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = ExperimentConfig::from_toml("typo = 1\n").unwrap_err();
        assert!(err.to_string().contains("typo"), "{err}");
    }

    #[test]
    fn toml_round_trip_preserves_config_and_hash() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 42;
        cfg.problem.eta_grid = vec![0.0, 1.0];
        cfg.placement.r_pilot = Some(0.25);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        cfg.seed = 43;
        assert_ne!(back.hash(), cfg.hash());
    }

    #[test]
    fn conflicting_fields_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.grid.n_cp = Some(4);
        cfg.grid.r_cp = Some(0.1);
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.problem.xi_min = Some(1.0);
        cfg.problem.xi_min_ratio = Some(0.5);
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.problem.eta_grid = vec![0.0, 1.5];
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.solver.init = "custom".into();
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.problem.baselines = vec!["zigzag".into()];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("zigzag") && err.contains("cluster"), "{err}");
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(1, "af"), derive_seed(1, "ber"));
        assert_ne!(derive_seed(1, "af"), derive_seed(2, "af"));
        assert_eq!(derive_seed(7, "ber"), derive_seed(7, "ber"));
    }

    #[test]
    fn margins_pick_the_best_baselines() {
        let pt = |series: &str, param: f64, sinr: f64, isl: f64| FrontierPoint {
            series: series.into(),
            param,
            start: String::new(),
            p_c: 0.0,
            pilot_energy: 0.0,
            sinr,
            isl,
            tx_power: 0.0,
        };
        let points = vec![
            pt("optimized", 0.0, 1.0, 10.0),
            pt("optimized", 1.0, 20.0, 500.0),
            pt("flat", 0.0, 0.5, 1000.0),
            pt("flat", 1.0, 2.0, 5000.0),
            pt("cluster", 0.5, 10.0, 100.0),
        ];
        let m = region_margins(&points).unwrap();
        assert_eq!(m.isl_baseline, "cluster");
        assert!((m.isl_margin_db - 10.0).abs() < 1e-12);
        assert_eq!(m.sinr_baseline, "cluster");
        assert!((m.sinr_margin_db - 10.0 * 2f64.log10()).abs() < 1e-12);
    }
}
