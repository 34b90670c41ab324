//! Weighted DFRC design by alternating optimisation: an exact 1-D data-power
//! step and an ADMM pilot step with a slack matrix standing in for the LMMSE
//! inverse.

mod admm;
mod power;
mod qp;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelModel, ChannelOperators};
use crate::grid::KernelBank;
use crate::linalg::{CMat, CVec, C64};
use crate::metrics::{isl_expected, mainlobe, sinr_aux, trace_term};
use crate::{DfrcError, Result};

pub use admm::{solve_pilots, update_slack, PilotStep};
pub use power::{golden_section_max, power_interval, solve_power, PowerObjective};
pub use qp::{qp_solvers, real_constraint, to_complex, to_real_vec, KktSolver, ProjectedGradient, QpSolver, QuadForm, SlabQp};

/// One weighted design problem. Borrowed operators are shared read-only
/// across parallel solves.
#[derive(Clone, Debug)]
pub struct ProblemSpec<'a> {
    pub eta: f64,
    /// Transmit power budget in watts.
    pub p_max: f64,
    pub xi_min: f64,
    /// SINR normaliser.
    pub sinr_scale: f64,
    /// ISL normaliser.
    pub isl_scale: f64,
    pub bank: &'a KernelBank,
    pub ops: &'a ChannelOperators,
    pub model: ChannelModel,
}

/// Metric values of one design point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub objective: f64,
    pub sinr: f64,
    pub isl: f64,
    pub mainlobe: f64,
    pub tx_power: f64,
}

impl<'a> ProblemSpec<'a> {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(DfrcError::Config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if !(self.p_max > 0.0) {
            return Err(DfrcError::Config("P_max must be positive".into()));
        }
        if !(self.sinr_scale > 0.0 && self.isl_scale > 0.0) {
            return Err(DfrcError::Config("metric normalisers must be positive".into()));
        }
        if !(self.xi_min >= 0.0) {
            return Err(DfrcError::Config("xi_min must be non-negative".into()));
        }
        if self.xi_min > self.mainlobe_budget() {
            return Err(DfrcError::Infeasible(format!(
                "xi_min {} exceeds (MN + N_CP) P_max = {}",
                self.xi_min,
                self.mainlobe_budget()
            )));
        }
        self.model.validate()?;
        let dict = self.ops.dictionary();
        if dict.num_pilots() != self.bank.placement().num_pilots() {
            return Err(DfrcError::Dimension("kernel bank and channel operators use different placements".into()));
        }
        Ok(())
    }

    /// Largest admissible mainlobe, `(MN + N_CP) P_max`.
    pub fn mainlobe_budget(&self) -> f64 {
        self.bank.grid().frame_len() as f64 * self.p_max
    }

    /// `(w_sinr, w_isl)` so that the objective is `w_sinr SINR − w_isl ISL`.
    pub fn weights(&self) -> (f64, f64) {
        (self.eta / self.sinr_scale, (1.0 - self.eta) / self.isl_scale)
    }

    pub fn objective_of(&self, sinr: f64, isl: f64) -> f64 {
        let (ws, wi) = self.weights();
        ws * sinr - wi * isl
    }

    pub fn evaluate(&self, p_c: f64, x_p: &CVec) -> Result<Evaluation> {
        let trace = trace_term(self.ops.dictionary(), x_p, &self.model)?;
        let sinr = sinr_aux(p_c, trace, self.model.noise_variance);
        let isl = isl_expected(p_c, x_p, self.bank);
        let ml = mainlobe(p_c, x_p, self.bank);
        Ok(Evaluation {
            objective: self.objective_of(sinr, isl),
            sinr,
            isl,
            mainlobe: ml,
            tx_power: ml / self.bank.grid().frame_len() as f64,
        })
    }

    /// Relative constraint slack check: `P_T ≤ P_max(1+tol)` and `f̄_00 ≥ ξ_min(1−tol)`.
    pub fn is_feasible(&self, p_c: f64, x_p: &CVec, tol: f64) -> bool {
        let ml = mainlobe(p_c, x_p, self.bank);
        p_c >= 0.0 && ml <= self.mainlobe_budget() * (1.0 + tol) && ml >= self.xi_min * (1.0 - tol)
    }

    /// Scales the pilots so that `ξ_min` is met, then scales the whole design
    /// down if the power budget is exceeded.
    pub fn restore_feasibility(&self, p_c: f64, x_p: &CVec) -> Result<(f64, CVec)> {
        let mut p_c = p_c.max(0.0);
        let mut x = x_p.clone();
        let q_c = self.bank.data_gain();
        let q_p = x.dotc(&(self.bank.pilot_gram() * &x)).re;
        let ml = p_c * q_c + q_p;
        if ml < self.xi_min {
            if q_p > 0.0 && self.xi_min > p_c * q_c {
                x *= C64::from(((self.xi_min - p_c * q_c) / q_p).sqrt());
            } else if q_c > 0.0 {
                p_c = (self.xi_min - q_p) / q_c;
            } else {
                return Err(DfrcError::Infeasible("zero pilots and no data cannot meet xi_min".into()));
            }
        }
        let ml = mainlobe(p_c, &x, self.bank);
        let budget = self.mainlobe_budget();
        if ml > budget {
            let r = budget / ml;
            p_c *= r;
            x *= C64::from(r.sqrt());
        }
        Ok((p_c, x))
    }

    /// Scales the pilots alone into the feasible slab at fixed `p_c`.
    pub fn fit_pilots(&self, p_c: f64, x_p: &CVec) -> Option<CVec> {
        let q = x_p.dotc(&(self.bank.pilot_gram() * x_p)).re;
        let base = p_c * self.bank.data_gain();
        let (lo, hi) = (self.xi_min - base, self.mainlobe_budget() - base);
        if hi < 0.0 {
            return None;
        }
        if q <= 0.0 {
            return (lo <= 0.0).then(|| x_p.clone());
        }
        let s2 = 1.0f64.clamp(lo.max(0.0) / q, hi / q);
        Some(x_p * C64::from(s2.sqrt()))
    }

    /// Point on the power boundary `f̄_00 = (MN+N_CP) P_max` that gives the
    /// data symbols the share `t` of the budget and the pilots (with the
    /// given shape) the rest. Degenerate placements pin `t` to the only
    /// meaningful end.
    pub fn split_point(&self, shape: &CVec, t: f64) -> (f64, CVec) {
        let budget = self.mainlobe_budget();
        let q_c = self.bank.data_gain();
        let q_shape = shape.dotc(&(self.bank.pilot_gram() * shape)).re;
        let t = if q_shape > 0.0 { t.clamp(0.0, 1.0) } else { 1.0 };
        let t = if q_c > 0.0 { t } else { 0.0 };
        let p_c = if q_c > 0.0 { t * budget / q_c } else { 0.0 };
        let x = if q_shape > 0.0 {
            shape * C64::from(((1.0 - t) * budget / q_shape).sqrt())
        } else {
            shape.clone()
        };
        (p_c, x)
    }

    /// Pilots of the given shape that fill the power budget left over by data
    /// power `p_c`.
    pub fn pilots_at_power(&self, shape: &CVec, p_c: f64) -> (f64, CVec) {
        let q_c = self.bank.data_gain();
        let t = if q_c > 0.0 { p_c * q_c / self.mainlobe_budget() } else { 0.0 };
        self.split_point(shape, t)
    }

    /// Best point along the pilot/data split with the pilot shape fixed.
    pub fn best_split(&self, shape: &CVec, grid_points: usize) -> Result<(f64, CVec)> {
        let score = |t: f64| -> f64 {
            let (p_c, x) = self.split_point(shape, t);
            self.evaluate(p_c, &x).map_or(f64::NEG_INFINITY, |e| e.objective)
        };
        let n = grid_points.max(2);
        let ts: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        let scores: Vec<f64> = ts.iter().map(|&t| score(t)).collect();
        let (best_i, _) = scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
        let lo = ts[best_i.saturating_sub(1)];
        let hi = ts[(best_i + 1).min(n)];
        let refined = golden_section_max(&score, lo, hi, 1e-6);
        let t = if score(refined) > scores[best_i] { refined } else { ts[best_i] };
        Ok(self.split_point(shape, t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub rho: f64,
    pub zeta: f64,
    pub ao_max_iters: usize,
    pub admm_max_iters: usize,
    pub sca_max_iters: usize,
    pub eps_obj: f64,
    pub eps_consensus: f64,
    pub eps_power_1d: f64,
    /// Starting point: a pilot pattern name, "custom" for caller-supplied
    /// pilots, or "multistart" to keep the best run over every pattern.
    pub init: String,
    pub qp_solver: String,
    /// Residual balancing on `ρ`.
    pub adaptive_penalty: bool,
    /// Grid resolution of the initial pilot/data split search.
    pub split_grid: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            rho: 1.0,
            zeta: 1.0,
            ao_max_iters: 30,
            admm_max_iters: 500,
            sca_max_iters: 5,
            eps_obj: 1e-7,
            eps_consensus: 1e-7,
            eps_power_1d: 1e-10,
            init: "multistart".into(),
            qp_solver: "kkt".into(),
            adaptive_penalty: true,
            split_grid: 40,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.rho, self.zeta, self.eps_obj, self.eps_consensus, self.eps_power_1d];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(DfrcError::Config("solver penalties and tolerances must be positive".into()));
        }
        if self.ao_max_iters == 0 || self.admm_max_iters == 0 || self.sca_max_iters == 0 {
            return Err(DfrcError::Config("iteration budgets must be positive".into()));
        }
        qp_solvers().get(&self.qp_solver)?;
        if self.init != "custom" && self.init != "multistart" {
            crate::patterns::pilot_patterns().get(&self.init)?;
        }
        Ok(())
    }
}

/// Full solver state, including the ADMM auxiliaries.
#[derive(Clone, Debug)]
pub struct DesignState {
    pub p_c: f64,
    pub x_p: CVec,
    pub x1: CVec,
    pub x2: CVec,
    /// Slack matrix standing in for `Ξ^{-1}`.
    pub a: CMat,
    /// Scaled dual variable of the consensus constraint.
    pub d: CVec,
    pub s1: f64,
    pub rho: f64,
    pub n: usize,
    pub m: usize,
}

impl DesignState {
    /// Consistent ADMM start: `x1 = x2 = x_p`, `A = Ξ^{-1}`, `s1 = trace_term`, `d = 0`.
    pub fn at(spec: &ProblemSpec<'_>, p_c: f64, x_p: CVec, rho: f64) -> Result<Self> {
        let step = PilotStep::new(spec, p_c);
        let xi = step.xi(&x_p, &x_p);
        let a = update_slack(&xi, 0.0, 1.0);
        let s1 = trace_term(spec.ops.dictionary(), &x_p, &spec.model)?;
        Ok(DesignState {
            p_c,
            x1: x_p.clone(),
            x2: x_p.clone(),
            d: CVec::zeros(x_p.len()),
            x_p,
            a,
            s1,
            rho,
            n: 0,
            m: 0,
        })
    }

    pub fn consensus_residual(&self) -> f64 {
        (&self.x1 - &self.x2).norm()
    }
}

/// One row of the solver log. Rows with `m = 0` are accepted AO iterates
/// (`n = 0` is the start); rows with `m ≥ 1` are ADMM iterates evaluated at `x2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub n: usize,
    pub m: usize,
    pub objective: f64,
    pub sinr: f64,
    pub isl: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub p_c: f64,
}

pub const TRACE_CSV_HEADER: &str = "n,m,objective,sinr,isl,primal_residual,dual_residual,p_c";

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.n, r.m, r.objective, r.sinr, r.isl, r.primal_residual, r.dual_residual, r.p_c
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub state: DesignState,
    pub evaluation: Evaluation,
    pub trace: Vec<TraceRow>,
    /// `‖x1 − x2‖` at the end of the last pilot step.
    pub consensus_residual: f64,
}

impl Solution {
    /// Objectives of the accepted AO iterates, in order.
    pub fn ao_objectives(&self) -> Vec<f64> {
        self.trace.iter().filter(|r| r.m == 0).map(|r| r.objective).collect()
    }
}

/// Alternating optimisation from `init`. Each outer iteration runs the exact
/// power step and then an ADMM pilot step whose result is kept only if it
/// does not lower the objective, so the accepted trace is monotone.
pub fn solve(spec: &ProblemSpec<'_>, opts: &SolverOptions, init: &DesignState) -> Result<Solution> {
    spec.validate()?;
    opts.validate()?;
    let registry = qp_solvers();
    let solver = registry.get(&opts.qp_solver)?;
    let (mut p_c, mut x_p) = spec.restore_feasibility(init.p_c, &init.x_p)?;
    let mut eval = spec.evaluate(p_c, &x_p)?;
    let mut trace = vec![ao_row(0, &eval, p_c, 0.0)];
    let mut last = DesignState::at(spec, p_c, x_p.clone(), opts.rho)?;
    let mut consensus = 0.0;
    for n in 1..=opts.ao_max_iters {
        let previous = eval.objective;
        let s1 = trace_term(spec.ops.dictionary(), &x_p, &spec.model)?;
        let new_p_c = solve_power(spec, s1, &x_p, opts.eps_power_1d)
            .map_err(|e| e.in_stage(&format!("power step {n}")))?;
        let power_eval = spec.evaluate(new_p_c, &x_p)?;
        if power_eval.objective >= eval.objective {
            p_c = new_p_c;
            eval = power_eval;
        }

        let start = if n == 1 {
            DesignState::at(spec, p_c, x_p.clone(), opts.rho)?
        } else {
            DesignState { p_c, ..last.clone() }
        };
        let (state, rows) = solve_pilots(spec, opts, solver, start, n)?;
        trace.extend(rows);
        consensus = state.consensus_residual();
        if let Some(candidate) = spec.fit_pilots(p_c, &state.x2) {
            let cand_eval = spec.evaluate(p_c, &candidate)?;
            if cand_eval.objective >= eval.objective {
                x_p = candidate;
                eval = cand_eval;
            }
        }
        last = DesignState { n, x_p: x_p.clone(), p_c, ..state };
        trace.push(ao_row(n, &eval, p_c, consensus));
        if (eval.objective - previous).abs() <= opts.eps_obj * previous.abs().max(1.0) {
            break;
        }
    }
    Ok(Solution {
        state: last,
        evaluation: eval,
        trace,
        consensus_residual: consensus,
    })
}

fn ao_row(n: usize, e: &Evaluation, p_c: f64, primal: f64) -> TraceRow {
    TraceRow {
        n,
        m: 0,
        objective: e.objective,
        sinr: e.sinr,
        isl: e.isl,
        primal_residual: primal,
        dual_residual: 0.0,
        p_c,
    }
}
