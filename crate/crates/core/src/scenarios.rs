//! Built-in scenarios and scenario-file ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::chain::{product_chain, ChainError, Generator};
use crate::model::{Dims, InitialLaw, MatrixSchedule, ModelError, ProblemSpec, Recommended, ScalarSchedule, Symbol};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("damping must satisfy 0 < alpha2, got {0}")]
    InvalidDamping(f64),
    #[error("invalid parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("unknown scenario `{0}`")]
    Unknown(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A problem together with its recommended discretization and sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub spec: ProblemSpec,
    pub step: f64,
    pub chain_paths: usize,
    pub noise_draws: usize,
}

impl Scenario {
    fn new(mut spec: ProblemSpec, name: &str, description: &str, rec: Recommended) -> Self {
        spec.name = Some(name.to_string());
        spec.description = Some(description.to_string());
        spec.recommended = Some(rec);
        Scenario {
            name: name.to_string(),
            description: description.to_string(),
            spec,
            step: rec.step,
            chain_paths: rec.chain_paths,
            noise_draws: rec.noise_draws,
        }
    }
}

fn c(v: f64) -> ScalarSchedule {
    ScalarSchedule::Constant(v)
}

fn scalar_per_regime(entries: [ScalarSchedule; 2]) -> Vec<MatrixSchedule> {
    entries.into_iter().map(|e| MatrixSchedule::from_rows(vec![vec![e]])).collect()
}

/// One-dimensional two-regime example with time-varying coefficients.
/// The initial law `mu = 1, sigma = 1` is a chosen default.
pub fn example_1d() -> Scenario {
    use ScalarSchedule::*;
    let mut s = BTreeMap::new();
    let mut put = |sym, e: [ScalarSchedule; 2]| {
        s.insert(sym, scalar_per_regime(e));
    };
    put(Symbol::A, [Sin { amplitude: 0.5, frequency: 1.0, offset: 0.0 }, c(-0.2)]);
    put(Symbol::AHat, [Cos { amplitude: 0.4, frequency: 1.0, offset: 0.0 }, c(-0.3)]);
    put(Symbol::B, [c(1.0), c(-0.2)]);
    put(Symbol::BHat, [c(1.0), c(-0.4)]);
    put(Symbol::C, [c(1.0), c(0.2)]);
    put(Symbol::CBar, [c(0.4), c(0.1)]);
    put(Symbol::F, [c(1.0), c(1.0)]);
    put(Symbol::FHat, [c(2.0), c(-0.5)]);
    put(Symbol::ObsDrift, [Exp { amplitude: 0.1, rate: -1.0 }, c(0.2)]);
    put(Symbol::Drift, [Sin { amplitude: 1.5, frequency: 1.0, offset: 0.0 }, Rational { amplitude: -2.0, offset: 0.0 }]);
    put(Symbol::H, [c(1.5), c(2.5)]);
    put(Symbol::HHat, [c(1.5), c(1.0)]);
    put(Symbol::G, [c(0.15), c(0.2)]);
    put(Symbol::GHat, [c(-0.8), c(-0.15)]);
    put(Symbol::R, [c(1.0), c(2.0)]);
    put(Symbol::RHat, [c(1.0), c(2.0)]);
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    let spec = ProblemSpec::new(
        Dims { n: 1, m: 1, r: 1, d: 1 },
        50.0,
        Generator::from_rows(&[vec![-0.015, 0.015], vec![0.035, -0.035]]).expect("valid generator"),
        InitialLaw { mean: DVector::from_element(1, 1.0), covariance: m(1.0), regime: 0 },
        s,
        vec![m(1.0), m(3.0)],
        vec![m(1.5), m(2.0)],
    )
    .expect("built-in scenario is well formed");
    Scenario::new(
        spec,
        "example-1d",
        "Scalar two-regime problem with time-varying coefficients on [0, 50]",
        Recommended { step: 0.01, chain_paths: 200, noise_draws: 50 },
    )
}

/// Parameters of the two-machine network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MachinesParams {
    pub eps: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub alpha2: f64,
    pub pi1: f64,
    pub pi2: f64,
    pub b1: f64,
    pub b2: f64,
    pub cbar1: f64,
    pub cbar2: f64,
    pub lambda: f64,
    pub horizon: f64,
}

impl Default for MachinesParams {
    fn default() -> Self {
        MachinesParams {
            eps: 0.1,
            omega1: 1.0,
            omega2: 10.0,
            alpha2: 0.05,
            pi1: 2.5,
            pi2: 0.5,
            b1: 0.5,
            b2: 0.5,
            cbar1: 0.5,
            cbar2: 0.5,
            lambda: 0.2,
            horizon: 20.0,
        }
    }
}

/// Two coupled second-order machines with state
/// `[angle1, angle2, velocity1, velocity2]` and telegraph couplings.
pub fn machines(p: &MachinesParams) -> Result<Scenario, ScenarioError> {
    if !(p.alpha2 > 0.0) {
        return Err(ScenarioError::InvalidDamping(p.alpha2));
    }
    for (name, value) in [("omega1", p.omega1), ("omega2", p.omega2), ("horizon", p.horizon)] {
        if !(value > 0.0 && value.is_finite()) {
            return Err(ScenarioError::InvalidParameter { name, value });
        }
    }
    for (name, value) in [("pi1", p.pi1), ("pi2", p.pi2), ("lambda", p.lambda)] {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(ScenarioError::InvalidParameter { name, value });
        }
    }
    let tel = |q: f64| Generator::from_rows(&[vec![-q, q], vec![q, -q]]);
    let generator = product_chain(&tel(p.pi1)?, &tel(p.pi2)?)?;
    // regime index = 2*s1 + s2 with s = 0 for -1 and 1 for +1
    let a: Vec<MatrixSchedule> = (0..4)
        .map(|l| {
            let th1 = if l / 2 == 0 { -1.0 } else { 1.0 };
            let th2 = if l % 2 == 0 { -1.0 } else { 1.0 };
            let mut m = DMatrix::zeros(4, 4);
            m[(0, 2)] = 1.0;
            m[(1, 3)] = 1.0;
            m[(2, 0)] = -p.omega1 * p.omega1 + p.eps * th1;
            m[(2, 1)] = p.eps * th2;
            m[(3, 0)] = p.eps * th2;
            m[(3, 1)] = -p.omega2 * p.omega2 + p.eps * th1;
            m[(3, 3)] = -2.0 * p.alpha2;
            MatrixSchedule::constant(&m)
        })
        .collect();
    let all = |m: DMatrix<f64>| vec![MatrixSchedule::constant(&m); 4];
    let mut b = DMatrix::zeros(4, 2);
    b[(2, 0)] = p.b1;
    b[(3, 1)] = p.b2;
    let mut cbar = DMatrix::zeros(4, 2);
    cbar[(2, 0)] = p.cbar1;
    cbar[(3, 1)] = p.cbar2;
    let eye4 = DMatrix::<f64>::identity(4, 4);
    let mut s = BTreeMap::new();
    s.insert(Symbol::A, a);
    s.insert(Symbol::B, all(b));
    s.insert(Symbol::CBar, all(cbar));
    s.insert(Symbol::F, all(&eye4 * 2.0));
    s.insert(Symbol::H, all(&eye4 * p.lambda));
    s.insert(Symbol::HHat, all(&eye4 * -p.lambda));
    s.insert(Symbol::R, all(DMatrix::identity(2, 2) * 2.0));
    let spec = ProblemSpec::new(
        Dims { n: 4, m: 2, r: 4, d: 2 },
        p.horizon,
        generator,
        InitialLaw { mean: DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]), covariance: DMatrix::zeros(4, 4), regime: 0 },
        s,
        vec![DMatrix::zeros(4, 4); 4],
        vec![DMatrix::zeros(4, 4); 4],
    )?;
    let steps = (p.horizon / 0.001).round().max(1.0);
    Ok(Scenario::new(
        spec,
        "machines",
        "Two coupled electrical machines with telegraph coupling noise",
        Recommended { step: p.horizon / steps, chain_paths: 50, noise_draws: 1 },
    ))
}

/// Built-in scenario by name.
pub fn builtin(name: &str) -> Result<Scenario, ScenarioError> {
    match name {
        "example-1d" => Ok(example_1d()),
        "machines" => machines(&MachinesParams::default()),
        other => Err(ScenarioError::Unknown(other.to_string())),
    }
}

/// Parse a scenario file. Missing `recommended` defaults to `T/5000` and
/// 200 x 50 Monte-Carlo draws.
pub fn load_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let spec = ProblemSpec::from_json(text)?;
    let rec = spec.recommended.unwrap_or(Recommended {
        step: spec.horizon / crate::odesolve::DEFAULT_STEPS as f64,
        chain_paths: 200,
        noise_draws: 50,
    });
    Ok(Scenario {
        name: spec.name.clone().unwrap_or_else(|| "custom".into()),
        description: spec.description.clone().unwrap_or_default(),
        step: rec.step,
        chain_paths: rec.chain_paths,
        noise_draws: rec.noise_draws,
        spec,
    })
}

pub fn save_scenario(s: &Scenario) -> String {
    s.spec.to_json()
}

/// Pretty JSON with a trailing newline.
pub fn save_results<T: Serialize>(value: &T, path: &Path) -> Result<(), ScenarioError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_assumptions;

    #[test]
    fn example_1d_values() {
        let s = example_1d();
        let b = s.spec.eval(0, 0.0).unwrap();
        assert_eq!(b.a[(0, 0)], 0.0);
        assert_eq!(b.a_hat[(0, 0)], 0.4);
        assert_eq!(b.a_check[(0, 0)], 0.4);
        assert_eq!(b.r_check[(0, 0)], 2.0);
        assert_eq!(s.spec.eval(1, 0.0).unwrap().drift[0], -2.0);
        let rep = validate_assumptions(&s.spec, s.step);
        assert!(rep.passes, "{:?}", rep.violations);
        assert!(rep.delta2 >= 1.0);
        assert_eq!(rep.delta1, 1.5);
    }

    #[test]
    fn machines_defaults() {
        let s = machines(&MachinesParams::default()).unwrap();
        let b = s.spec.eval(0, 3.0).unwrap();
        assert!((b.a[(2, 0)] + 1.1).abs() < 1e-15);
        assert_eq!(b.a[(2, 1)], -0.1);
        assert_eq!(b.h_check, DMatrix::zeros(4, 4));
        let b4 = s.spec.eval(3, 0.0).unwrap();
        assert!((b4.a[(3, 1)] + 99.9).abs() < 1e-12);
        assert_eq!(b4.a[(3, 0)], 0.1);
        let rep = validate_assumptions(&s.spec, s.step);
        assert!(rep.passes, "{:?}", rep.violations);
        assert_eq!(rep.delta1, 0.0);
        assert_eq!(s.spec.generator.rate(0, 2), 2.5);
        assert!(matches!(
            machines(&MachinesParams { alpha2: 0.0, ..Default::default() }),
            Err(ScenarioError::InvalidDamping(_))
        ));
    }

    #[test]
    fn scenario_file_round_trip() {
        for s in [example_1d(), machines(&MachinesParams::default()).unwrap()] {
            let text = save_scenario(&s);
            let back = load_scenario(&text).unwrap();
            assert_eq!(back, s);
            assert_eq!(save_scenario(&back), text);
        }
    }
}
