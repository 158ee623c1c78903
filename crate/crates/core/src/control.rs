//! The separated feedback law and the policy abstraction used by the
//! simulator.
//!
//! A policy is affine in `(x_hat - m, m)`, so conditional means under it
//! follow a deterministic ODE. The controller sees only the filter state,
//! the conditional mean, the regime and the time.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::model::{Dims, ProblemSpec, Symbol};
use crate::odesolve::{spd_solve, GainTables, SolveError};

/// Gain blocks at one `(regime, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGains {
    /// `B^T Lambda + G`
    pub b_tilde: DMatrix<f64>,
    /// `B_check^T Gamma + G_check`
    pub b_tilde_check: DMatrix<f64>,
    /// `B_check^T phi`
    pub b_bold: DVector<f64>,
    /// `R^{-1} b_tilde`
    pub k1: DMatrix<f64>,
    /// `R_check^{-1} b_tilde_check`
    pub k2: DMatrix<f64>,
    /// `R_check^{-1} b_bold`
    pub k0: DVector<f64>,
}

fn gains_from(
    spec: &ProblemSpec,
    regime: usize,
    t: f64,
    lambda: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    phi: &DMatrix<f64>,
) -> Result<ControlGains, SolveError> {
    let c = |s| spec.coeff(s, regime, t);
    let b = c(Symbol::B);
    let b_check = &b + c(Symbol::BHat);
    let r = c(Symbol::R);
    let r_check = &r + c(Symbol::RHat);
    let b_tilde = b.transpose() * lambda + c(Symbol::G);
    let b_tilde_check = b_check.transpose() * gamma + c(Symbol::G) + c(Symbol::GHat);
    let b_bold_m = b_check.transpose() * phi;
    let k1 = spd_solve(&r, &b_tilde, regime, t)?;
    let k2 = spd_solve(&r_check, &b_tilde_check, regime, t)?;
    let k0 = spd_solve(&r_check, &b_bold_m, regime, t)?;
    Ok(ControlGains {
        b_tilde,
        b_tilde_check,
        b_bold: DVector::from_column_slice(b_bold_m.as_slice()),
        k1,
        k2,
        k0: DVector::from_column_slice(k0.as_slice()),
    })
}

/// Gains at grid node `node`.
pub fn assemble_gains(spec: &ProblemSpec, tables: &GainTables, regime: usize, node: usize) -> Result<ControlGains, SolveError> {
    let t = tables.grid.time(node);
    gains_from(
        spec,
        regime,
        t,
        tables.lambda.at_node(regime, node),
        tables.gamma.at_node(regime, node),
        tables.phi.at_node(regime, node),
    )
}

/// Gains at an arbitrary time, interpolating the tables.
pub fn assemble_gains_at(spec: &ProblemSpec, tables: &GainTables, regime: usize, t: f64) -> Result<ControlGains, SolveError> {
    gains_from(spec, regime, t, &tables.lambda.at(regime, t), &tables.gamma.at(regime, t), &tables.phi.at(regime, t))
}

/// `u = -K1 (x_hat - m) - K2 m - k0`
pub fn feedback(g: &ControlGains, x_hat: &DVector<f64>, m: &DVector<f64>) -> DVector<f64> {
    -(&g.k1 * (x_hat - m)) - &g.k2 * m - &g.k0
}

/// `ubar = -K2 m - k0`
pub fn conditional_mean_control(g: &ControlGains, m: &DVector<f64>) -> DVector<f64> {
    -(&g.k2 * m) - &g.k0
}

/// `u = L1 (x_hat - m) + L2 m + l0`, hence `ubar = L2 m + l0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLaw {
    pub l1: DMatrix<f64>,
    pub l2: DMatrix<f64>,
    pub l0: DVector<f64>,
}

impl AffineLaw {
    pub fn zeros(dims: &Dims) -> Self {
        AffineLaw { l1: DMatrix::zeros(dims.m, dims.n), l2: DMatrix::zeros(dims.m, dims.n), l0: DVector::zeros(dims.m) }
    }

    pub fn from_gains(g: &ControlGains) -> Self {
        AffineLaw { l1: -&g.k1, l2: -&g.k2, l0: -&g.k0 }
    }

    /// Random direction with entries uniform in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(dims: &Dims, rng: &mut R) -> Self {
        let mut u = || rng.random_range(-1.0..=1.0);
        AffineLaw {
            l1: DMatrix::from_fn(dims.m, dims.n, |_, _| u()),
            l2: DMatrix::from_fn(dims.m, dims.n, |_, _| u()),
            l0: DVector::from_fn(dims.m, |_, _| u()),
        }
    }

    pub fn control(&self, x_hat: &DVector<f64>, m: &DVector<f64>) -> DVector<f64> {
        &self.l1 * (x_hat - m) + &self.l2 * m + &self.l0
    }

    pub fn mean_control(&self, m: &DVector<f64>) -> DVector<f64> {
        &self.l2 * m + &self.l0
    }

    fn plus_scaled(&self, other: &AffineLaw, eps: f64) -> AffineLaw {
        AffineLaw { l1: &self.l1 + &other.l1 * eps, l2: &self.l2 + &other.l2 * eps, l0: &self.l0 + &other.l0 * eps }
    }
}

/// An affine feedback policy on the gain grid.
pub trait Policy: Sync {
    /// Law at grid node `node` in `regime`.
    fn law_at_node(&self, regime: usize, node: usize) -> Result<AffineLaw, SolveError>;
    /// Law at an arbitrary time, used inside ODE stages.
    fn law_at(&self, regime: usize, t: f64) -> Result<AffineLaw, SolveError>;
    /// `(L2, l0)` at an arbitrary time; all the conditional-mean ODE needs.
    fn mean_law_at(&self, regime: usize, t: f64) -> Result<(DMatrix<f64>, DVector<f64>), SolveError> {
        let law = self.law_at(regime, t)?;
        Ok((law.l2, law.l0))
    }
    fn name(&self) -> String;
}

type MeanLawMemo = OnceLock<Result<(DMatrix<f64>, DVector<f64>), SolveError>>;

/// The optimal separated controller, memoized per `(regime, node)`.
pub struct SeparatedController<'a> {
    spec: &'a ProblemSpec,
    gains: &'a GainTables,
    memo: Vec<OnceLock<Result<AffineLaw, SolveError>>>,
    /// Mean laws at half-step points, shared by all chain paths.
    half_memo: Vec<MeanLawMemo>,
}

impl<'a> SeparatedController<'a> {
    pub fn new(spec: &'a ProblemSpec, gains: &'a GainTables) -> Self {
        let memo = (0..spec.regimes() * gains.grid.nodes()).map(|_| OnceLock::new()).collect();
        let half_memo = (0..spec.regimes() * (2 * gains.grid.steps() + 1)).map(|_| OnceLock::new()).collect();
        SeparatedController { spec, gains, memo, half_memo }
    }

    fn mean_law_direct(&self, regime: usize, t: f64) -> Result<(DMatrix<f64>, DVector<f64>), SolveError> {
        let c = |s| self.spec.coeff(s, regime, t);
        let b_check = c(Symbol::B) + c(Symbol::BHat);
        let r_check = c(Symbol::R) + c(Symbol::RHat);
        let gamma = self.gains.gamma.at(regime, t);
        let phi = self.gains.phi.at(regime, t);
        let k2 = spd_solve(&r_check, &(b_check.transpose() * gamma + c(Symbol::G) + c(Symbol::GHat)), regime, t)?;
        let k0 = spd_solve(&r_check, &(b_check.transpose() * phi), regime, t)?;
        Ok((-k2, -DVector::from_column_slice(k0.as_slice())))
    }
}

impl Policy for SeparatedController<'_> {
    fn law_at_node(&self, regime: usize, node: usize) -> Result<AffineLaw, SolveError> {
        self.memo[regime * self.gains.grid.nodes() + node]
            .get_or_init(|| assemble_gains(self.spec, self.gains, regime, node).map(|g| AffineLaw::from_gains(&g)))
            .clone()
    }

    fn law_at(&self, regime: usize, t: f64) -> Result<AffineLaw, SolveError> {
        assemble_gains_at(self.spec, self.gains, regime, t).map(|g| AffineLaw::from_gains(&g))
    }

    fn mean_law_at(&self, regime: usize, t: f64) -> Result<(DMatrix<f64>, DVector<f64>), SolveError> {
        let half = 2.0 * t / self.gains.grid.step();
        let j = half.round();
        let slots = 2 * self.gains.grid.steps() + 1;
        if (half - j).abs() < 1e-9 && j >= 0.0 && (j as usize) < slots {
            let j = j as usize;
            let tj = self.gains.grid.horizon() * j as f64 / (slots - 1) as f64;
            return self.half_memo[regime * slots + j].get_or_init(|| self.mean_law_direct(regime, tj)).clone();
        }
        self.mean_law_direct(regime, t)
    }

    fn name(&self) -> String {
        "optimal".into()
    }
}

/// `base + eps * direction`.
pub struct Perturbed<'a, P: Policy> {
    pub base: &'a P,
    pub direction: AffineLaw,
    pub eps: f64,
}

impl<P: Policy> Policy for Perturbed<'_, P> {
    fn law_at_node(&self, regime: usize, node: usize) -> Result<AffineLaw, SolveError> {
        Ok(self.base.law_at_node(regime, node)?.plus_scaled(&self.direction, self.eps))
    }

    fn law_at(&self, regime: usize, t: f64) -> Result<AffineLaw, SolveError> {
        Ok(self.base.law_at(regime, t)?.plus_scaled(&self.direction, self.eps))
    }

    fn mean_law_at(&self, regime: usize, t: f64) -> Result<(DMatrix<f64>, DVector<f64>), SolveError> {
        let (l2, l0) = self.base.mean_law_at(regime, t)?;
        Ok((l2 + &self.direction.l2 * self.eps, l0 + &self.direction.l0 * self.eps))
    }

    fn name(&self) -> String {
        format!("{}+{}*direction", self.base.name(), self.eps)
    }
}

/// `u = 0`.
pub struct ZeroPolicy {
    law: AffineLaw,
}

impl ZeroPolicy {
    pub fn new(dims: &Dims) -> Self {
        ZeroPolicy { law: AffineLaw::zeros(dims) }
    }
}

impl Policy for ZeroPolicy {
    fn law_at_node(&self, _: usize, _: usize) -> Result<AffineLaw, SolveError> {
        Ok(self.law.clone())
    }

    fn law_at(&self, _: usize, _: f64) -> Result<AffineLaw, SolveError> {
        Ok(self.law.clone())
    }

    fn name(&self) -> String {
        "zero".into()
    }
}
