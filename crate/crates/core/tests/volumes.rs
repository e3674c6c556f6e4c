use num_rational::Ratio;

use seqpar::planner::{compare_report, lemma_sweep, plan_mesh, volume_sfu, volume_usp, Exact, PlanInput, Workload};
use seqpar::simnet::ExecMode;
use seqpar::strategies::{run_strategy, strategy_mesh, RunOptions, ShardedInput, Strategy};
use seqpar::Shape4;

fn plan(n: usize, m: usize, w: Workload) -> PlanInput {
    PlanInput { n, m, workload: w }
}

#[test]
fn four_machines_report() {
    // BLHD = 512
    let w = Workload { b: 1, l: 16, h: 8, d: 4 };
    let r = compare_report(plan(4, 2, w)).unwrap();
    assert_eq!(r.v_usp, Exact(Ratio::from_integer(768)));
    assert_eq!(r.v_sfu, Exact(Ratio::from_integer(384)));
    assert_eq!(r.verdict, "sfu < usp");
    assert_eq!((r.sfu_p_u, r.sfu_p_r), (8, 1));
}

#[test]
fn two_machines_report_is_a_tie() {
    let w = Workload { b: 1, l: 16, h: 8, d: 4 };
    let r = compare_report(plan(2, 4, w)).unwrap();
    assert_eq!(r.v_usp, r.v_sfu);
    assert_eq!(r.verdict, "equal inter volume (TAS = USP at N=2)");
}

#[test]
fn one_machine_report_is_zero() {
    let w = Workload { b: 1, l: 16, h: 8, d: 4 };
    let r = compare_report(plan(1, 8, w)).unwrap();
    assert_eq!(r.v_usp, Exact(Ratio::from_integer(0)));
    assert_eq!(r.v_sfu, Exact(Ratio::from_integer(0)));
}

#[test]
fn below_n_branches() {
    let w = Workload { b: 1, l: 48, h: 1, d: 1 };
    // P_r = 2 < N = 3: (2N + 4 - 2N/P_r - 4P_r/N) * BLHD / N = (10 - 3 - 8/3) * 16
    let (v, _) = volume_usp(3, 2, 3, 2, w).unwrap();
    assert_eq!(v, Ratio::new(208, 3));
    // P_u = 2 < N = 3: ((6 - 4/P_u) * N / P_u - 2) * BLHD / N = (4 * 3/2 - 2) * 16
    let (v, _) = volume_sfu(3, 2, 2, 3, w).unwrap();
    assert_eq!(v, Ratio::from_integer(64));
}

#[test]
fn traced_runs_attach_cleanly() {
    for (n, m, h) in [(2, 2, 8), (4, 2, 8), (3, 2, 12), (2, 4, 24)] {
        let p = n * m;
        let w = Workload { b: 1, l: 4 * p, h, d: 2 };
        let input = ShardedInput::random(Shape4::new(w.b, w.l, w.h, w.d).unwrap(), p, 1).unwrap();
        let opts = RunOptions {
            mode: Some(ExecMode::RoundRobin),
            ..RunOptions::default()
        };
        let mut report = compare_report(plan(n, m, w)).unwrap();
        for s in [Strategy::Usp, Strategy::Tas, Strategy::Torus] {
            let run = run_strategy(s, strategy_mesh(s, n, m, h).unwrap(), &input, &opts).unwrap();
            let expected = if s == Strategy::Usp { report.v_usp.0 } else { report.v_sfu.0 };
            report.attach_trace(s.name(), &run.trace, expected);
        }
        assert!(report.all_traces_match(), "{:?}", report.discrepancies);
        assert_eq!(report.traced.len(), 3);
    }
}

#[test]
fn attach_trace_reports_mismatch() {
    let (n, m, h) = (2, 2, 4);
    let w = Workload { b: 1, l: 8, h, d: 2 };
    let input = ShardedInput::random(Shape4::new(1, 8, h, 2).unwrap(), 4, 2).unwrap();
    let run = run_strategy(
        Strategy::Usp,
        strategy_mesh(Strategy::Usp, n, m, h).unwrap(),
        &input,
        &RunOptions::default(),
    )
    .unwrap();
    let mut report = compare_report(plan(n, m, w)).unwrap();
    report.attach_trace("usp", &run.trace, report.v_usp.0 + Ratio::from_integer(1));
    assert!(!report.all_traces_match());
}

#[test]
fn lemma_holds_to_sixty_four() {
    let r = lemma_sweep(64).unwrap();
    assert!(r.holds());
    // At P_u = M = 2 the difference vanishes.
    assert!(r.zeros.iter().all(|z| z.m == 2 && z.p_u == 2));
}

#[test]
fn plan_examples() {
    assert_eq!(plan_mesh(3, 8, 24), (24, 1));
    assert_eq!(plan_mesh(4, 8, 24), (8, 4));
}
