use std::sync::OnceLock;

use isoext::corrugation::CorrugationProfile;
use isoext::decomposition::DirectionFrame;
use isoext::extension::{demo, AdaptedShortState};
use isoext::fields::{Grid, SampledField, ScalarField, SymTensorField};
use isoext::iteration::*;
use isoext::linalg::sym_op_norm;
use proptest::prelude::*;

fn arc_grid() -> Grid {
    Grid::new(&[-0.1, 0.0], &[0.1, 0.25], &[161, 201]).unwrap()
}

/// Exact conformal arc with `ε0` chosen so that `ρ0 ≤ (7/4) ε0^{1/2}`.
fn arc_start(big_a: f64) -> (AdaptedShortState, Schedule, IterationConfig) {
    let s0 = demo::conformal_arc(&arc_grid()).unwrap();
    let r = s0.rho.max_abs();
    let sched = Schedule::new(r * r / 3.0625, 0.4, big_a, 0.05, 2).unwrap();
    (s0, sched, IterationConfig::new(2, 5.0, 256.0, 32.0).unwrap())
}

fn first_iterate() -> &'static (AdaptedShortState, Schedule, Iterate) {
    static IT: OnceLock<(AdaptedShortState, Schedule, Iterate)> = OnceLock::new();
    IT.get_or_init(|| {
        let (s0, sched, cfg) = arc_start(1.3);
        let it = iterate_once(&s0, &sched, 0, &cfg, &CorrugationProfile::default(), true).unwrap();
        (s0, sched, it)
    })
}

fn on_sigma(grid: &Grid, idx: usize) -> bool {
    grid.multi_index(idx)[1] == 0
}

/// Isometric state: the arc measured against its own metric.
fn isometric_arc() -> AdaptedShortState {
    let v = demo::conformal_arc_jet(&arc_grid()).unwrap();
    AdaptedShortState::from_deficit(v.metric(), v).unwrap()
}

#[test]
fn schedule_is_monotone() {
    let s = Schedule::new(0.7, 0.4, 1.3, 0.05, 2).unwrap();
    for q in 0..20 {
        assert!(s.eps(q + 1) < s.eps(q));
        assert!(s.theta(q + 1) > s.theta(q));
    }
    assert_eq!(s.eps(0), 0.7);
    assert!((s.eps(1) - 0.7 * 1.3f64.powf(-0.8)).abs() < 1e-15);
    assert!((s.theta(0) - 1.3f64.powf(1.2)).abs() < 1e-14);
    assert!((s.defect_rate() - 1.3f64.powf(-0.8)).abs() < 1e-15);
}

#[test]
fn exponent_ceiling_is_one_seventh_in_two_dimensions() {
    assert_eq!(n_star(2), 3);
    assert_eq!(alpha_limit(2), 1.0 / 7.0);
    assert_eq!(alpha_limit(3), 1.0 / 13.0);
    let mut prev = 0.0;
    for a in [0.1, 0.3, 0.45, 0.49, 0.499999] {
        let c = Schedule::new(1.0, a, 2.0, 0.0, 2).unwrap().alpha_ceiling();
        assert!(c > prev && c < 1.0 / 7.0);
        prev = c;
    }
    assert!(1.0 / 7.0 - prev < 1e-6);
    let err = Schedule::new(1.0, 0.4, 2.0, 1.0 / 7.0, 2).unwrap_err().to_string();
    assert!(err.contains("1/(n(n+1)+1)"), "{err}");
    assert!(Schedule::new(1.0, 0.4, 2.0, 0.14, 2).is_ok());
}

#[test]
fn schedule_rejects_bad_parameters_and_warns_past_the_ceiling() {
    assert!(Schedule::new(1.0, 0.5, 2.0, 0.0, 2).is_err());
    assert!(Schedule::new(1.0, 0.0, 2.0, 0.0, 2).is_err());
    assert!(Schedule::new(1.0, 0.4, 1.0, 0.0, 2).is_err());
    assert!(Schedule::new(0.0, 0.4, 2.0, 0.0, 2).is_err());
    let s = Schedule::new(1.0, 0.4, 2.0, 0.05, 2).unwrap();
    assert!(s.alpha_warning().is_none());
    assert!(Schedule::new(1.0, 0.4, 2.0, 0.12, 2).unwrap().alpha_warning().is_some());
}

#[test]
fn default_eps0_is_at_least_one() {
    let g = Grid::cube(2, 0.0, 1.0, 9).unwrap();
    assert_eq!(Schedule::default_eps0(&ScalarField::constant(&g, 0.5)), 1.0);
    assert_eq!(Schedule::default_eps0(&ScalarField::constant(&g, 3.0)), 9.0);
}

#[test]
fn ramp_plateaus_and_cutoff_nesting() {
    assert_eq!(ramp(1.75), 0.0);
    assert_eq!(ramp(0.0), 0.0);
    assert_eq!(ramp(2.0), 1.0);
    assert_eq!(ramp(9.0), 1.0);
    assert!((ramp(1.875) - 0.5).abs() < 1e-15);
    let g = Grid::new(&[0.0, 0.0], &[4.0, 1.0], &[401, 9]).unwrap();
    let rho = ScalarField::from_fn(&g, |x| x[0]);
    let c = CutoffPair::new(&rho, 1.0);
    for i in 0..g.len() {
        let (phi, psi) = (c.phi.values[i], c.psi.values[i]);
        if phi > 0.0 {
            assert_eq!(psi, 1.0);
        }
        if psi > 0.0 {
            assert!(rho.values[i] > 9.0 / 8.0);
        }
    }
}

#[test]
fn isometric_state_is_left_alone() {
    let s = isometric_arc();
    assert_eq!(s.rho.max_abs(), 0.0);
    let sched = Schedule::new(1.0, 0.4, 1.3, 0.05, 2).unwrap();
    let cfg = IterationConfig::new(2, 5.0, 256.0, 32.0).unwrap();
    let c = verify_adapted(&s, &sched, 0, cfg.m, &cfg.frame);
    assert!(c.passed(), "{:?}", c.violations());
    assert!(LevelSets::new(&s.rho, &sched, 6).masks.iter().all(|m| m.iter().all(|&b| !b)));

    let it = iterate_once(&s, &sched, 0, &cfg, &CorrugationProfile::default(), false).unwrap();
    assert_eq!(it.state.v, s.v);
    assert_eq!(it.state.rho, s.rho);
    assert_eq!(it.state.big_g, s.big_g);
    assert_eq!(it.changed_nodes, 0);

    let r = run(&s, &sched, &cfg, &RunConfig::default(), &CorrugationProfile::default()).unwrap();
    assert_eq!(r.report.stop, StopReason::Isometric);
    assert!(r.report.rows.is_empty());
    assert_eq!(r.report.displacement, 0.0);
    assert!(r.report.initial_defect < 1e-15);
}

#[test]
fn arc_start_meets_the_inductive_conditions() {
    let (s0, sched, cfg) = arc_start(1.3);
    let c = verify_adapted(&s0, &sched, 0, cfg.m, &cfg.frame);
    assert!(c.passed(), "{:?}", c.violations());
    assert!((c.rho_ratio - 0.4375).abs() < 1e-12);
    assert_eq!(c.worst_nodes, [None, None, None]);
}

#[test]
fn inflated_g_fails_condition_one_at_the_planted_node() {
    let (mut s, sched, cfg) = arc_start(1.3);
    let node = s.rho.grid().flat_index(&[80, 150]);
    let r2 = cfg.frame.r2();
    s.big_g.values[node * 3] = 10.0 * r2;
    s.big_g.values[node * 3 + 2] = 10.0 * r2;
    let c = verify_adapted(&s, &sched, 0, cfg.m, &cfg.frame);
    assert!(!c.cond1());
    assert_eq!(c.worst_nodes[0], Some(node));
    assert!((c.g_max - 10.0 * r2).abs() < 1e-15);
    assert!(c.violations()[0].starts_with("(1)"));
}

#[test]
fn split_vanishes_below_the_cutoff() {
    let (mut s, sched, cfg) = arc_start(1.3);
    let e1 = sched.eps(1).sqrt();
    s.rho = ScalarField::constant(s.rho.grid(), 1.7 * e1);
    let d = deficit_split(&s, &sched, 0, &cfg.frame, false).unwrap();
    assert!(d.rho.values.iter().all(|&r| r == 0.0));
    assert!(d.cutoffs.phi.values.iter().all(|&p| p == 0.0));
}

#[test]
fn split_at_twice_the_threshold() {
    let (mut s, sched, cfg) = arc_start(1.3);
    let e1 = sched.eps(1);
    s.rho = ScalarField::constant(s.rho.grid(), 2.0 * e1.sqrt());
    s.big_g = SymTensorField::zeros(s.rho.grid());
    let d = deficit_split(&s, &sched, 0, &cfg.frame, false).unwrap();
    for i in 0..s.rho.grid().len() {
        let phi = d.cutoffs.phi.values[i];
        assert_eq!(phi, 1.0);
        assert!((d.rho.values[i].powi(2) - 3.0 * e1).abs() < 1e-14);
    }
    assert_eq!(d.g_max, 0.0);
    assert!(d.target.is_none());
}

#[test]
fn split_radius_failure_and_clamp() {
    let (mut s, sched, cfg) = arc_start(1.3);
    let r0 = cfg.frame.r0();
    s.rho = ScalarField::constant(s.rho.grid(), 3.0 * sched.eps(1).sqrt());
    s.big_g = SymTensorField::zeros(s.rho.grid());
    s.big_g.values[7 * 3] = 2.0 * r0;
    assert!(deficit_split(&s, &sched, 0, &cfg.frame, false).is_err());
    let d = deficit_split(&s, &sched, 0, &cfg.frame, true).unwrap();
    assert_eq!(d.clamped_nodes, 1);
    assert!(d.big_g.op_norms().max_abs() < r0);
    assert!(d.target.is_some());
}

#[test]
fn level_sets_of_the_arc_are_nested() {
    let (s0, sched, _) = arc_start(1.3);
    let ls = LevelSets::new(&s0.rho, &sched, 12);
    assert!(ls.is_nested());
    let union: Vec<bool> = (0..s0.rho.values.len()).map(|i| ls.masks.iter().any(|m| m[i])).collect();
    for (i, &r) in s0.rho.values.iter().enumerate() {
        if !(r > 0.0) {
            assert!(!union[i]);
        }
    }
    assert!(ls.masks[0].iter().any(|&b| b));
}

#[test]
fn iterate_changes_only_the_cutoff_support() {
    let (s0, _, it) = first_iterate();
    assert_eq!(it.leaked_nodes, 0);
    assert!(it.changed_nodes > 0);
    let (_, sched, _) = arc_start(1.3);
    let phi = CutoffPair::new(&s0.rho, sched.eps(1)).phi;
    let omega = &LevelSets::new(&s0.rho, &sched, 0).masks[0];
    let grid = arc_grid();
    let mut outside = 0;
    for i in 0..grid.len() {
        if phi.values[i] > 0.0 {
            assert!(omega[i]);
            continue;
        }
        outside += 1;
        assert_eq!(it.state.v.value.at(i), s0.v.value.at(i));
        assert_eq!(it.state.rho.values[i], s0.rho.values[i]);
        assert_eq!(it.state.big_g.at(i), s0.big_g.at(i));
    }
    assert!(outside > grid.len() / 2);
}

#[test]
fn iterate_keeps_the_boundary_trace() {
    let (s0, _, it) = first_iterate();
    let grid = arc_grid();
    for i in (0..grid.len()).filter(|&i| on_sigma(&grid, i)) {
        assert_eq!(it.state.v.value.at(i), s0.v.value.at(i));
        let x = grid.point(i);
        assert_eq!(it.state.v.value.at(i), &[x[0].cos(), x[0].sin(), 0.0]);
    }
}

#[test]
fn iterate_keeps_the_defect_identity() {
    let (_, _, it) = first_iterate();
    assert!(it.identity_residual < 1e-8, "{}", it.identity_residual);
    let s = &it.state;
    let defect = s.g.sub(&s.v.metric());
    let mut worst = 0.0f64;
    for i in 0..s.rho.values.len() {
        let r2 = s.rho.values[i].powi(2);
        let (d, g) = (defect.at(i), s.big_g.at(i));
        let e = [d[0] - r2 * (1.0 + g[0]), d[1] - r2 * g[1], d[2] - r2 * (1.0 + g[2])];
        worst = worst.max(sym_op_norm(2, &e));
    }
    assert!(worst < 1e-8, "{worst}");
}

#[test]
fn next_deficit_scale_is_bounded_by_the_next_epsilon() {
    let (s0, sched, it) = first_iterate();
    let e1 = sched.eps(1).sqrt();
    let phi = CutoffPair::new(&s0.rho, sched.eps(1)).phi;
    for i in 0..s0.rho.values.len() {
        let (r0, r1, f) = (s0.rho.values[i], it.state.rho.values[i], phi.values[i]);
        let oracle = (r0 * r0 * (1.0 - f * f) + sched.eps(1) * f * f).sqrt();
        assert!((r1 - oracle).abs() < 1e-14);
    }
    let top = it.state.rho.max_abs();
    assert!(top <= 2.0 * e1, "{top} vs {}", 2.0 * e1);
    assert!(top <= 4.0 * sched.eps(1).sqrt());
}

#[test]
fn run_freezes_the_boundary_and_stays_within_the_displacement_bound() {
    let rc = RunConfig { q_max: 1, tol: 0.0, strict: false, retries: 0, stop_on_stall: false };
    let mut prev = f64::INFINITY;
    for big_a in [1.3, 1.6, 2.0] {
        let (s0, sched, cfg) = arc_start(big_a);
        let r = run(&s0, &sched, &cfg, &rc, &CorrugationProfile::default()).unwrap();
        let rep = &r.report;
        assert_eq!(rep.stop, StopReason::MaxIterates);
        assert_eq!(rep.rows.len(), 1);
        assert_eq!(rep.boundary_drift, 0.0);
        assert_eq!(rep.rows[0].leaked_nodes, 0);
        assert!(rep.rows[0].identity_residual < 1e-8);
        assert!(rep.displacement > 0.0 && rep.displacement <= rep.displacement_bound);
        assert!(rep.displacement_bound < prev);
        prev = rep.displacement_bound;
    }
}

#[test]
fn strict_run_escalates_and_reports_the_tried_values() {
    let (s0, sched, cfg) = arc_start(1.3);
    let rc = RunConfig { q_max: 1, tol: 0.0, strict: true, retries: 1, stop_on_stall: false };
    let err = run(&s0, &sched, &cfg, &rc, &CorrugationProfile::default()).unwrap_err().to_string();
    assert!(err.contains("escalation exhausted") && err.contains("1.3") && err.contains("2.6"), "{err}");
}

#[test]
fn rates_fit_geometric_sequences() {
    let pts: Vec<(f64, f64)> = (0..5).map(|q| (q as f64, 3.0 * 0.7f64.powi(q))).collect();
    assert!((fitted_rate(&pts) - 0.7).abs() < 1e-12);
    assert!(fitted_rate(&pts[..1]).is_nan());
    let row = IterateRow {
        q: 0,
        eps: 1.0,
        theta: 1.0,
        top_frequency: 1.0,
        defect: 1.0,
        increment: [0.5, 0.25, 4.0],
        error: 0.0,
        relative_error: 0.0,
        changed_nodes: 0,
        leaked_nodes: 0,
        identity_residual: 0.0,
        g_max: 0.0,
        violations: vec![],
    };
    assert!((row.holder_increment(0.5) - (0.5 + 0.25 + 1.0)).abs() < 1e-15);
    assert_eq!(row.csv_row().split(',').count(), IterateRow::CSV_HEADER.split(',').count());
}

fn small_state(rho: Vec<f64>, g: Vec<f64>) -> AdaptedShortState {
    let grid = Grid::cube(2, 0.0, 1.0, 9).unwrap();
    let mut s = demo::conformal_arc(&grid).unwrap();
    s.rho = ScalarField { grid, values: rho };
    s.big_g = SymTensorField { grid, values: g };
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn level_sets_are_nested(rho in prop::collection::vec(0.0..2.0f64, 81), big_a in 1.1..4.0f64, a in 0.05..0.49f64) {
        let g = Grid::cube(2, 0.0, 1.0, 9).unwrap();
        let rho = ScalarField { grid: g, values: rho };
        let sched = Schedule::new(1.0, a, big_a, 0.0, 2).unwrap();
        prop_assert!(LevelSets::new(&rho, &sched, 10).is_nested());
    }

    #[test]
    fn split_reconstructs_the_deficit(
        rho in prop::collection::vec(0.0..1.0f64, 81),
        g in prop::collection::vec(-0.003..0.003f64, 243),
        q in 0usize..3,
    ) {
        let s = small_state(rho, g);
        let sched = Schedule::new(0.2, 0.4, 1.3, 0.05, 2).unwrap();
        let frame = DirectionFrame::balanced(2).unwrap();
        let d = deficit_split(&s, &sched, q, &frame, false).unwrap();
        let e = sched.eps(q + 1);
        for i in 0..81 {
            let (r, rt, phi) = (s.rho.values[i], d.rho.values[i], d.cutoffs.phi.values[i]);
            let (gq, gt) = (s.big_g.at(i), d.big_g.at(i));
            // h + (1 − φ²) ρ²(Id + G) + φ² ε Id against ρ²(Id + G).
            let mut worst = 0.0f64;
            for k in 0..3 {
                let id = if k == 1 { 0.0 } else { 1.0 };
                let full = r * r * (id + gq[k]);
                let h = rt * rt * (id + gt[k]);
                worst = worst.max((h + (1.0 - phi * phi) * full + phi * phi * e * id - full).abs());
            }
            prop_assert!(worst < 1e-10, "node {} residual {}", i, worst);
        }
    }
}
