use otfs_dfrc::channel::{ChannelModel, ChannelOperators};
use otfs_dfrc::grid::{GridConfig, KernelBank, Placement};
use otfs_dfrc::metrics::{isl_expected, mainlobe, sinr};
use otfs_dfrc::optimizer::{power_interval, solve, DesignState, ProblemSpec, SolverOptions};
use otfs_dfrc::patterns::generate_pattern;
use otfs_dfrc::{CVec, C64};

struct Setup {
    bank: KernelBank,
    ops: ChannelOperators,
    model: ChannelModel,
}

fn model() -> ChannelModel {
    ChannelModel {
        max_delay: 1,
        max_doppler: 1,
        activity: 0.5,
        tap_variance: 1.0,
        noise_variance: 0.1,
    }
}

fn setup(placement: &Placement) -> Setup {
    let model = model();
    Setup {
        bank: KernelBank::build(placement, 1, 1).unwrap(),
        ops: ChannelOperators::build(placement, &model).unwrap(),
        model,
    }
}

impl Setup {
    fn spec(&self, eta: f64) -> ProblemSpec<'_> {
        let budget = self.bank.grid().frame_len() as f64;
        ProblemSpec {
            eta,
            p_max: 1.0,
            xi_min: 0.8 * budget,
            sinr_scale: 5.0,
            isl_scale: 50.0,
            bank: &self.bank,
            ops: &self.ops,
            model: self.model,
        }
    }
}

fn custom() -> SolverOptions {
    SolverOptions {
        init: "custom".into(),
        ..SolverOptions::default()
    }
}

fn pattern(kind: &str) -> (Placement, CVec) {
    generate_pattern(kind, GridConfig::new(4, 4, 2).unwrap(), 4, 4, 1, 1).unwrap()
}

#[test]
fn sinr_only_weight_puts_data_power_on_the_upper_bound() {
    let (placement, shape) = pattern("flat");
    let s = setup(&placement);
    let spec = s.spec(1.0);
    let (p, x) = spec.split_point(&shape, 0.5);
    let sol = solve(&spec, &custom(), &DesignState::at(&spec, p, x, 1.0).unwrap()).unwrap();
    let (_, hi) = power_interval(&spec, &sol.state.x_p).unwrap();
    assert!((sol.state.p_c - hi).abs() <= 1e-6 * hi, "p_c {} upper bound {hi}", sol.state.p_c);

    let dict = s.ops.dictionary();
    let scan = (0..=10_000)
        .map(|i| sinr(hi * i as f64 / 1e4, &sol.state.x_p, &s.model, dict).unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(sol.evaluation.sinr >= scan - 1e-9 * scan);
}

#[test]
fn isl_only_weight_never_raises_isl() {
    let (placement, shape) = pattern("cluster");
    let s = setup(&placement);
    let spec = s.spec(0.0);
    let (p, x) = spec.split_point(&shape, 0.5);
    let start = spec.evaluate(p, &x).unwrap().isl;
    let sol = solve(&spec, &custom(), &DesignState::at(&spec, p, x, 1.0).unwrap()).unwrap();
    assert!(sol.evaluation.isl <= start);
    let ao = sol.ao_objectives();
    assert!(ao.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{ao:?}");
}

#[test]
fn single_pilot_without_data_sits_on_the_mainlobe_floor() {
    let grid = GridConfig::new(4, 4, 0).unwrap();
    let placement = Placement::with_spread_rx(grid, vec![5], vec![], 1, 1).unwrap();
    let s = setup(&placement);
    let spec = s.spec(0.0);
    let x = CVec::from_element(1, C64::new(3.0, 0.0));
    let sol = solve(&spec, &custom(), &DesignState::at(&spec, 0.0, x, 1.0).unwrap()).unwrap();
    let ml = mainlobe(sol.state.p_c, &sol.state.x_p, &s.bank);
    assert!((ml - spec.xi_min).abs() <= 1e-9 * spec.xi_min, "mainlobe {ml} floor {}", spec.xi_min);
    let energy = sol.state.x_p.norm_squared();
    let expected = isl_expected(0.0, &CVec::from_element(1, C64::new(energy.sqrt(), 0.0)), &s.bank);
    assert!((sol.evaluation.isl - expected).abs() <= 1e-9 * expected.max(1.0));
}

#[test]
fn restarting_from_a_solution_is_a_fixed_point() {
    let (placement, shape) = pattern("spike");
    let s = setup(&placement);
    let spec = s.spec(0.5);
    let (p, x) = spec.best_split(&shape, 20).unwrap();
    let first = solve(&spec, &custom(), &DesignState::at(&spec, p, x, 1.0).unwrap()).unwrap();
    let again = DesignState::at(&spec, first.state.p_c, first.state.x_p.clone(), 1.0).unwrap();
    let second = solve(&spec, &custom(), &again).unwrap();
    let j = first.evaluation.objective;
    assert!(second.evaluation.objective >= j - 1e-12);
    assert!((second.evaluation.objective - j).abs() <= 1e-4 * j.abs().max(1.0));
}

#[test]
fn unknown_start_is_rejected() {
    let (placement, shape) = pattern("flat");
    let s = setup(&placement);
    let spec = s.spec(0.5);
    let opts = SolverOptions {
        init: "zigzag".into(),
        ..SolverOptions::default()
    };
    let (p, x) = spec.split_point(&shape, 0.5);
    assert!(solve(&spec, &opts, &DesignState::at(&spec, p, x, 1.0).unwrap()).is_err());
}
