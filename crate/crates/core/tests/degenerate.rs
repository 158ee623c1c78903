mod common;

use cmflq::model::Symbol;
use cmflq::odesolve::{solve_gain_tables, TimeGrid};
use cmflq::scenarios::example_1d;
use cmflq::sim::{mc_cost, theoretical_cost, Estimate, McConfig};
use common::{lqg_reference, sample_lqg};

#[test]
fn one_regime_theory_matches_classical_lqg() {
    let p = sample_lqg();
    let reference = lqg_reference(&p, 2000);
    let spec = p.spec();
    let grid = TimeGrid::new(p.horizon, 1e-3).unwrap();
    let gains = solve_gain_tables(&spec, &grid).unwrap();
    let theory = theoretical_cost(&spec, &gains, 1, 3).unwrap();
    let rel = (theory.v_p.mean - reference.cost).abs() / reference.cost.abs();
    assert!(rel < 1e-6, "theory {} reference {} rel {rel:e}", theory.v_p.mean, reference.cost);
    assert!((theory.j_err.mean - theory.j_err_direct.mean).abs() < 1e-8);
}

#[test]
fn one_regime_simulation_matches_classical_lqg() {
    let p = sample_lqg();
    let reference = lqg_reference(&p, 2000);
    let spec = p.spec();
    let grid = TimeGrid::new(p.horizon, 1e-3).unwrap();
    let gains = solve_gain_tables(&spec, &grid).unwrap();
    let cfg = McConfig { track_component: Some(0), ..McConfig::new(40, 50, 11) };
    let out = mc_cost(&spec, &gains, &cfg).unwrap();
    let j = out.report.j_p;
    assert!((j.mean - reference.cost).abs() < 3.0 * j.se, "J_P {j:?} reference {}", reference.cost);
    // terminal moments of the first state component
    let last: Vec<f64> = out.tracked.iter().map(|s| *s.last().unwrap()).collect();
    let m = Estimate::from_samples(&last);
    assert!((m.mean - reference.mean_terminal[0]).abs() < 3.0 * m.se);
    let sq = Estimate::from_samples(&last.iter().map(|x| x * x).collect::<Vec<_>>());
    assert!((sq.mean - reference.second_moment_terminal[(0, 0)]).abs() < 3.0 * sq.se);
}

#[test]
fn switching_without_mean_field_terms_has_equal_riccati_systems() {
    let mut s = example_1d();
    for sym in [Symbol::AHat, Symbol::BHat, Symbol::FHat, Symbol::HHat, Symbol::GHat, Symbol::RHat] {
        s.spec.clear(sym);
    }
    for sh in &mut s.spec.terminal_s_hat {
        sh.fill(0.0);
    }
    let grid = TimeGrid::new(s.spec.horizon, 0.01).unwrap();
    let g = solve_gain_tables(&s.spec, &grid).unwrap();
    let mut worst: f64 = 0.0;
    for l in 0..2 {
        for k in 0..grid.nodes() {
            worst = worst.max((g.gamma.at_node(l, k) - g.lambda.at_node(l, k)).abs().max());
        }
    }
    assert!(worst < 1e-10, "max |Gamma - Lambda| = {worst:e}");
}
