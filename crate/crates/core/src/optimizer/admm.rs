//! ADMM pilot step on the consensus split `x1 = x2`.
//!
//! Each block is a strictly convex quadratic in its own variable with the
//! split mainlobe functional `Re(x2^H Q x1)` as a two-sided slab constraint.

use log::warn;

use crate::linalg::{re_trace, CMat, CVec, C64};
use crate::metrics::{isl_split, sinr_aux, sinr_aux_slope};
use crate::{DfrcError, Result};

use super::qp::{real_constraint, to_complex, QpSolver, QuadForm, SlabQp};
use super::{ProblemSpec, SolverOptions, TraceRow};
use super::DesignState;

/// The pilot subproblem at fixed data power.
pub struct PilotStep<'s, 'a> {
    spec: &'s ProblemSpec<'a>,
    pub p_c: f64,
    w_sinr: f64,
    w_isl: f64,
    /// `pσ_h² / σ_n²`.
    c0: f64,
    /// `pσ_h²`.
    prior: f64,
    /// Bounds on `Re(x2^H Q x1)` after removing the data contribution.
    lo: f64,
    hi: f64,
}

impl<'s, 'a> PilotStep<'s, 'a> {
    pub fn new(spec: &'s ProblemSpec<'a>, p_c: f64) -> Self {
        let (w_sinr, w_isl) = spec.weights();
        let prior = spec.model.prior_variance();
        let base = p_c * spec.bank.data_gain();
        PilotStep {
            spec,
            p_c,
            w_sinr,
            w_isl,
            c0: prior / spec.model.noise_variance,
            prior,
            lo: spec.xi_min - base,
            hi: spec.mainlobe_budget() - base,
        }
    }

    /// `Ξ(x1, x2) = I + (pσ_h²/σ_n²)(I ⊗ x2^H) Ω̃^H Ω̃ (I ⊗ x1)`.
    pub fn xi(&self, x1: &CVec, x2: &CVec) -> CMat {
        let g = self.spec.ops.dictionary().cross_gram(x1, x2);
        let kh = g.nrows();
        CMat::identity(kh, kh) + g * C64::from(self.c0)
    }

    /// Weight of `Re Tr A` from the SINR tangent at `s1`.
    pub fn kappa(&self, s1: f64) -> f64 {
        self.w_sinr * (-sinr_aux_slope(self.p_c, s1, self.spec.model.noise_variance)) * self.prior
    }

    fn isl_form(&self, other: &CVec, first: bool) -> QuadForm {
        let mut form = QuadForm::zeros(other.len());
        let w = self.w_isl;
        if w == 0.0 {
            return form;
        }
        let agg = self.spec.bank.isl_aggregates();
        // x1 block: columns A_p x2 and mixed term M x2; x2 block: A_p^H x1 and M^H x1.
        let (v, mixed) = if first {
            (agg.forward(other), &agg.mixed * other)
        } else {
            (agg.backward(other), agg.mixed.adjoint() * other)
        };
        form.p = &v * v.adjoint() * C64::from(w);
        form.c = (&agg.b_sum * other) * C64::from(w * self.p_c) + mixed * C64::from(2.0 * w * self.p_c);
        form
    }

    /// `(ζ/2)‖A Ξ − I‖_F²` as a form in `x1`, with `Ξ = I + c0 Ω(x2)^H Ω(x1)`.
    fn slack_form_x1(&self, a: &CMat, x2: &CVec, zeta: f64) -> QuadForm {
        let dict = self.spec.ops.dictionary();
        let kh = dict.num_taps();
        let mut form = QuadForm::zeros(x2.len());
        // A Ξ − I = E + V Ω(x1) with V = c0 A Ω(x2)^H.
        let v = a * dict.omega(x2).adjoint() * C64::from(self.c0);
        let u = v.adjoint() * &v;
        let e = a - CMat::identity(kh, kh);
        let vr = v.adjoint() * e;
        let half = C64::from(0.5 * zeta);
        for j in 0..kh {
            dict.add_sandwich(j, j, &u, half, &mut form.p);
            form.c += dict.apply_adjoint(j, &vr.column(j).into_owned()) * C64::from(zeta);
        }
        form
    }

    /// `(ζ/2)‖A Ξ − I‖_F²` as a form in `x2`. Here `Ξ` is conjugate-linear
    /// in `x2`, which the sandwich sum absorbs.
    fn slack_form_x2(&self, a: &CMat, x1: &CVec, zeta: f64) -> QuadForm {
        let dict = self.spec.ops.dictionary();
        let kh = dict.num_taps();
        let mut form = QuadForm::zeros(x1.len());
        let w1 = dict.omega(x1);
        let u1 = &w1 * w1.adjoint();
        let h = a.adjoint() * a;
        let e = a - CMat::identity(kh, kh);
        let k = &w1 * e.adjoint() * a;
        let quad = 0.5 * zeta * self.c0 * self.c0;
        // The (i, i') and (i', i) terms are adjoints of each other.
        let mut lower = CMat::zeros(x1.len(), x1.len());
        for i in 0..kh {
            dict.add_sandwich(i, i, &u1, h[(i, i)] * quad, &mut form.p);
            for ip in 0..i {
                dict.add_sandwich(ip, i, &u1, h[(i, ip)] * quad, &mut lower);
            }
            form.c += dict.apply_adjoint(i, &k.column(i).into_owned()) * C64::from(zeta * self.c0);
        }
        form.p += &lower + lower.adjoint();
        form
    }

    /// Complete `x1`-block quadratic with `x2`, `A`, `d` frozen.
    pub fn form_x1(&self, state: &DesignState, zeta: f64) -> QuadForm {
        let mut form = self.isl_form(&state.x2, true);
        let slack = self.slack_form_x1(&state.a, &state.x2, zeta);
        form.p += slack.p;
        form.c += slack.c;
        // (ρ/2)‖x1 − x2 + d‖²
        let n = state.x2.len();
        form.p += CMat::identity(n, n) * C64::from(0.5 * state.rho);
        form.c += (&state.d - &state.x2) * C64::from(state.rho);
        form
    }

    /// Complete `x2`-block quadratic with `x1`, `A`, `d` frozen.
    pub fn form_x2(&self, state: &DesignState, zeta: f64) -> QuadForm {
        let mut form = self.isl_form(&state.x1, false);
        let slack = self.slack_form_x2(&state.a, &state.x1, zeta);
        form.p += slack.p;
        form.c += slack.c;
        let n = state.x1.len();
        form.p += CMat::identity(n, n) * C64::from(0.5 * state.rho);
        form.c -= (&state.x1 + &state.d) * C64::from(state.rho);
        form
    }

    fn slab(&self, form: &QuadForm, g: &CVec) -> SlabQp {
        let (h, f) = form.to_real();
        SlabQp {
            h,
            f,
            a: real_constraint(g),
            lo: self.lo,
            hi: self.hi,
        }
    }

    pub fn x1_qp(&self, state: &DesignState, zeta: f64) -> SlabQp {
        let g = self.spec.bank.pilot_gram() * &state.x2;
        self.slab(&self.form_x1(state, zeta), &g)
    }

    /// The x2 block bounds the tangent of `x^H Q x` at `x1`,
    /// `2 Re(x1^H Q x2) − x1^H Q x1`, which equals the split form at
    /// consensus but lets a residual normal to the face contract.
    pub fn x2_qp(&self, state: &DesignState, zeta: f64) -> SlabQp {
        let g = self.spec.bank.pilot_gram() * &state.x1;
        let q = g.dotc(&state.x1).re;
        let mut qp = self.slab(&self.form_x2(state, zeta), &(g * C64::from(2.0)));
        qp.lo += q;
        qp.hi += q;
        qp
    }

    /// Joint `(s1, x1)` block. With `A` frozen the SINR tangent has a
    /// positive `s1` coefficient, so `s1 = pσ_h² Re Tr A` is active and the
    /// remaining problem in `x1` is a single convex QP; the SCA loop only
    /// refreshes the tangent point.
    pub fn update_x1(&self, state: &DesignState, opts: &SolverOptions, solver: &dyn QpSolver) -> Result<(f64, CVec)> {
        let mut s1 = state.s1;
        for _ in 0..opts.sca_max_iters {
            let next = (self.prior * re_trace(&state.a)).max(0.0);
            let changed = (next - s1).abs() > opts.eps_obj * s1.abs().max(1.0);
            s1 = next;
            if !changed {
                break;
            }
        }
        let qp = self.x1_qp(state, opts.zeta);
        let z = solve_block(solver, &qp)?;
        Ok((s1, to_complex(&z)))
    }

    pub fn update_x2(&self, state: &DesignState, opts: &SolverOptions, solver: &dyn QpSolver) -> Result<CVec> {
        let qp = self.x2_qp(state, opts.zeta);
        Ok(to_complex(&solve_block(solver, &qp)?))
    }

    /// ADMM augmented objective (the quantity each block minimises).
    pub fn augmented(&self, state: &DesignState, zeta: f64) -> f64 {
        let xi = self.xi(&state.x1, &state.x2);
        let kh = xi.nrows();
        let fit = (&state.a * xi - CMat::identity(kh, kh)).norm_squared();
        self.w_isl * isl_split(self.p_c, &state.x1, &state.x2, self.spec.bank)
            + self.kappa(state.s1) * re_trace(&state.a)
            + 0.5 * zeta * fit
            + 0.5 * state.rho * (&state.x1 - &state.x2 + &state.d).norm_squared()
    }

    /// Block objective of `(s1, x1)` with the exact (not linearised) SINR term.
    pub fn x1_block_objective(&self, state: &DesignState, s1: f64, zeta: f64) -> f64 {
        let xi = self.xi(&state.x1, &state.x2);
        let kh = xi.nrows();
        let fit = (&state.a * xi - CMat::identity(kh, kh)).norm_squared();
        -self.w_sinr * sinr_aux(self.p_c, s1, self.spec.model.noise_variance)
            + self.w_isl * isl_split(self.p_c, &state.x1, &state.x2, self.spec.bank)
            + 0.5 * zeta * fit
            + 0.5 * state.rho * (&state.x1 - &state.x2 + &state.d).norm_squared()
    }
}

fn solve_block(solver: &dyn QpSolver, qp: &SlabQp) -> Result<nalgebra::DVector<f64>> {
    if qp.lo > qp.hi {
        return Err(DfrcError::Infeasible("pilot slab is empty at this data power".into()));
    }
    solver.solve(qp)
}

/// Slack-matrix update `A = (Ξ^H − (κ/ζ) I)(Ξ Ξ^H)^{-1}`, the minimiser of
/// `κ Re Tr A + (ζ/2)‖A Ξ − I‖_F²`. With `κ = 0` this is `Ξ^H(ΞΞ^H)^{-1}`.
/// The shift is capped at half the smallest singular value of `Ξ` so that
/// `A` stays positive on the consensus manifold.
pub fn update_slack(xi: &CMat, kappa: f64, zeta: f64) -> CMat {
    let kh = xi.nrows();
    let gram = xi * xi.adjoint();
    let shift = if kappa > 0.0 {
        let smin = xi.clone().singular_values().iter().cloned().fold(f64::INFINITY, f64::min);
        (kappa / zeta).min(0.5 * smin)
    } else {
        0.0
    };
    let rhs = xi.adjoint() - CMat::identity(kh, kh) * C64::from(shift);
    let solve = |g: &CMat| g.clone().cholesky().map(|c| c.solve(&rhs.adjoint()).adjoint());
    if let Some(a) = solve(&gram) {
        if a.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return a;
        }
    }
    let reg = 1e-10 * xi.norm_squared();
    warn!("near-singular slack system; Tikhonov regularisation {reg:e}");
    let g = gram + CMat::identity(kh, kh) * C64::from(reg);
    solve(&g).unwrap_or_else(|| CMat::identity(kh, kh))
}

/// Runs ADMM from `state` at its fixed data power and returns the final
/// state (with `x_p = x2`) and one trace row per iteration.
pub fn solve_pilots(
    spec: &ProblemSpec<'_>,
    opts: &SolverOptions,
    solver: &dyn QpSolver,
    state: DesignState,
    n: usize,
) -> Result<(DesignState, Vec<TraceRow>)> {
    let step = PilotStep::new(spec, state.p_c);
    let mut st = state;
    st.n = n;
    let mut rows = Vec::new();
    let mut prev = spec.evaluate(st.p_c, &st.x2)?.objective;
    let context = |m: usize, e: DfrcError| DfrcError::Solver {
        ao_iter: n,
        admm_iter: m,
        reason: e.to_string(),
    };
    for m in 1..=opts.admm_max_iters {
        let (s1, x1) = step.update_x1(&st, opts, solver).map_err(|e| context(m, e))?;
        st.s1 = s1;
        st.x1 = x1;
        let x2_prev = st.x2.clone();
        st.x2 = step.update_x2(&st, opts, solver).map_err(|e| context(m, e))?;
        let xi = step.xi(&st.x1, &st.x2);
        let a_next = update_slack(&xi, step.kappa(st.s1), opts.zeta);
        let slack_change = (&a_next - &st.a).norm() / st.a.norm().max(1.0);
        st.a = a_next;
        st.d += &st.x1 - &st.x2;
        st.m = m;

        let primal = st.consensus_residual();
        let dual = st.rho * (&st.x2 - &x2_prev).norm();
        let eval = spec.evaluate(st.p_c, &st.x2).map_err(|e| context(m, e))?;
        rows.push(TraceRow {
            n,
            m,
            objective: eval.objective,
            sinr: eval.sinr,
            isl: eval.isl,
            primal_residual: primal,
            dual_residual: dual,
            p_c: st.p_c,
        });
        if !eval.objective.is_finite() || !primal.is_finite() {
            return Err(context(m, DfrcError::Infeasible("ADMM iterate diverged".into())));
        }
        let settled = (eval.objective - prev).abs() <= opts.eps_obj * prev.abs().max(1.0);
        if primal <= opts.eps_consensus && settled && slack_change <= opts.eps_consensus.sqrt() {
            break;
        }
        prev = eval.objective;
        if opts.adaptive_penalty {
            if primal > 10.0 * dual {
                st.rho *= 2.0;
                st.d /= C64::from(2.0);
            } else if dual > 10.0 * primal && st.rho > opts.rho {
                st.rho /= 2.0;
                st.d *= C64::from(2.0);
            }
        }
    }
    st.x_p = st.x2.clone();
    Ok((st, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{cscg, ChannelModel, ChannelOperators};
    use crate::grid::{GridConfig, KernelBank};
    use crate::optimizer::qp::{qp_solvers, to_real_vec, KktSolver};
    use crate::patterns::generate_pattern;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        bank: KernelBank,
        ops: ChannelOperators,
        model: ChannelModel,
    }

    fn fixture() -> Fixture {
        let grid = GridConfig::new(4, 8, 2).unwrap();
        let model = ChannelModel {
            max_delay: 1,
            max_doppler: 1,
            activity: 0.5,
            tap_variance: 1.0,
            noise_variance: 0.2,
        };
        let (placement, _) = generate_pattern("flat", grid, 4, 8, 1, 1).unwrap();
        Fixture {
            bank: KernelBank::build(&placement, 1, 1).unwrap(),
            ops: ChannelOperators::build(&placement, &model).unwrap(),
            model,
        }
    }

    fn spec(f: &Fixture, eta: f64) -> ProblemSpec<'_> {
        ProblemSpec {
            eta,
            p_max: 1.0,
            xi_min: 2.0,
            sinr_scale: 2.0,
            isl_scale: 30.0,
            bank: &f.bank,
            ops: &f.ops,
            model: f.model.clone(),
        }
    }

    fn random_state(spec: &ProblemSpec<'_>, rng: &mut ChaCha8Rng) -> DesignState {
        let kp = spec.bank.placement().num_pilots();
        let x = CVec::from_fn(kp, |_, _| cscg(rng, 1.0));
        let mut st = DesignState::at(spec, 0.7, x, 1.3).unwrap();
        st.x1 = CVec::from_fn(kp, |_, _| cscg(rng, 1.0));
        st.x2 = CVec::from_fn(kp, |_, _| cscg(rng, 1.0));
        st.d = CVec::from_fn(kp, |_, _| cscg(rng, 0.1));
        st.a = CMat::from_fn(st.a.nrows(), st.a.ncols(), |_, _| cscg(rng, 0.05)) + &st.a;
        st
    }

    #[test]
    fn block_forms_reproduce_augmented_objective() {
        let f = fixture();
        let spec = spec(&f, 0.4);
        let step = PilotStep::new(&spec, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let base = random_state(&spec, &mut rng);
            let zeta = 0.8;
            let f1 = step.form_x1(&base, zeta);
            let f2 = step.form_x2(&base, zeta);
            let mut zero1 = base.clone();
            zero1.x1 = CVec::zeros(base.x1.len());
            let mut zero2 = base.clone();
            zero2.x2 = CVec::zeros(base.x2.len());
            let full = step.augmented(&base, zeta);
            let d1 = full - step.augmented(&zero1, zeta);
            let d2 = full - step.augmented(&zero2, zeta);
            assert!((d1 - f1.value(&base.x1)).abs() < 1e-9 * (1.0 + d1.abs()), "{d1} {}", f1.value(&base.x1));
            assert!((d2 - f2.value(&base.x2)).abs() < 1e-9 * (1.0 + d2.abs()), "{d2} {}", f2.value(&base.x2));
        }
    }

    #[test]
    fn kkt_and_projected_gradient_agree_on_blocks() {
        let f = fixture();
        let spec = spec(&f, 0.5);
        let step = PilotStep::new(&spec, 0.7);
        let solvers = qp_solvers();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..3 {
            let st = random_state(&spec, &mut rng);
            for qp in [step.x1_qp(&st, 1.0), step.x2_qp(&st, 1.0)] {
                let a = solvers.get("kkt").unwrap().solve(&qp).unwrap();
                let b = solvers.get("projected-gradient").unwrap().solve(&qp).unwrap();
                let (fa, fb) = (qp.objective(&a), qp.objective(&b));
                assert!((fa - fb).abs() <= 1e-8 * (1.0 + fa.abs()), "{fa} vs {fb}");
            }
        }
    }

    #[test]
    fn x2_update_does_not_increase_augmented_objective() {
        let f = fixture();
        let spec = spec(&f, 0.5);
        let step = PilotStep::new(&spec, 0.7);
        let opts = SolverOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let mut st = random_state(&spec, &mut rng);
            // start from a slab-feasible x2 so the comparison is meaningful
            let g = spec.bank.pilot_gram() * &st.x1;
            let qp = step.x2_qp(&st, opts.zeta);
            if qp.violation(&to_real_vec(&st.x2)) > 0.0 {
                let v = g.dotc(&st.x2).re;
                let target = 0.5 * (qp.lo + qp.hi);
                st.x2 += &g * C64::from((target - v) / g.norm_squared());
            }
            let before = step.augmented(&st, opts.zeta);
            st.x2 = step.update_x2(&st, &opts, &KktSolver).unwrap();
            assert!(step.augmented(&st, opts.zeta) <= before + 1e-9 * before.abs().max(1.0));
        }
    }

    #[test]
    fn large_penalty_pins_blocks_to_consensus_targets() {
        let f = fixture();
        let spec = ProblemSpec { xi_min: 0.0, p_max: 100.0, ..spec(&f, 0.5) };
        let step = PilotStep::new(&spec, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut st = random_state(&spec, &mut rng);
        st.rho = 1e9;
        let opts = SolverOptions::default();
        let (_, x1) = step.update_x1(&st, &opts, &KktSolver).unwrap();
        assert!((&x1 - (&st.x2 - &st.d)).norm() < 1e-5);
        st.x1 = x1;
        let x2 = step.update_x2(&st, &opts, &KktSolver).unwrap();
        assert!((&x2 - (&st.x1 + &st.d)).norm() < 1e-5);
    }

    #[test]
    fn slack_update_examples() {
        let i3 = CMat::identity(3, 3);
        assert!((update_slack(&i3, 0.0, 1.0) - &i3).norm() < 1e-14);
        let mut xi = CMat::zeros(2, 2);
        xi[(0, 0)] = C64::new(2.0, 0.0);
        xi[(1, 1)] = C64::new(4.0, 0.0);
        let a = update_slack(&xi, 0.0, 1.0);
        assert!((a[(0, 0)] - C64::new(0.5, 0.0)).norm() < 1e-14);
        assert!((a[(1, 1)] - C64::new(0.25, 0.0)).norm() < 1e-14);
        assert!(a[(0, 1)].norm() < 1e-14);
    }

    #[test]
    fn slack_update_minimises_its_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xi = CMat::identity(3, 3) * C64::from(2.0) + CMat::from_fn(3, 3, |_, _| cscg(&mut rng, 0.2));
        let (kappa, zeta) = (0.3, 1.5);
        let obj = |a: &CMat| kappa * re_trace(a) + 0.5 * zeta * (a * &xi - CMat::identity(3, 3)).norm_squared();
        let a = update_slack(&xi, kappa, zeta);
        let best = obj(&a);
        for _ in 0..20 {
            let pert = CMat::from_fn(3, 3, |_, _| cscg(&mut rng, 1e-3));
            assert!(obj(&(&a + pert)) >= best - 1e-12);
        }
    }

    #[test]
    fn slack_at_consensus_reproduces_trace_term() {
        let f = fixture();
        let spec = spec(&f, 0.5);
        let step = PilotStep::new(&spec, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = CVec::from_fn(spec.bank.placement().num_pilots(), |_, _| cscg(&mut rng, 1.0));
        let a = update_slack(&step.xi(&x, &x), 0.0, 1.0);
        let trace = crate::metrics::trace_term(spec.ops.dictionary(), &x, &spec.model).unwrap();
        assert!((spec.model.prior_variance() * re_trace(&a) - trace).abs() < 1e-8);
    }

    #[test]
    fn sca_tangent_majorises_negative_sinr() {
        use crate::metrics::neg_sinr_tangent;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        use rand::Rng;
        for _ in 0..20 {
            let s_ref: f64 = rng.random_range(0.0..3.0);
            let s: f64 = rng.random_range(0.0..3.0);
            let exact = -sinr_aux(0.8, s, 0.1);
            assert!(neg_sinr_tangent(0.8, s_ref, 0.1, s) >= exact - 1e-12);
            assert!((neg_sinr_tangent(0.8, s_ref, 0.1, s_ref) + sinr_aux(0.8, s_ref, 0.1)).abs() < 1e-12);
        }
    }
}
