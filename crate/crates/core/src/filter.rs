//! Euler–Maruyama steps of the filter, the innovation and the estimation
//! error along one realization.
//!
//! Coefficients are passed as a [`CoefficientBundle`] already evaluated at
//! the current regime and time.

use nalgebra::{DMatrix, DVector};

use crate::kernels::{axpy, gemv_acc};
use crate::model::CoefficientBundle;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub t: f64,
    pub x_hat: DVector<f64>,
    /// Accumulated innovation `V_t`.
    pub v: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorState {
    pub t: f64,
    pub e: DVector<f64>,
}

/// `out = dY - (F x_hat + F_hat m + f) h`
pub(crate) fn innovation_into(out: &mut [f64], dy: &[f64], x_hat: &[f64], m: &[f64], c: &CoefficientBundle, h: f64) {
    out.copy_from_slice(dy);
    gemv_acc(out, &c.f, x_hat, -h);
    gemv_acc(out, &c.f_hat, m, -h);
    axpy(out, c.obs_drift.as_slice(), -h);
}

/// `x += (A x + A_hat m + B u + B_hat ubar + b) h`, the shared drift of the
/// truth and the filter.
#[inline]
pub(crate) fn drift_update(x: &mut [f64], x_old: &[f64], u: &[f64], ubar: &[f64], m: &[f64], c: &CoefficientBundle, h: f64) {
    gemv_acc(x, &c.a, x_old, h);
    gemv_acc(x, &c.a_hat, m, h);
    gemv_acc(x, &c.b, u, h);
    gemv_acc(x, &c.b_hat, ubar, h);
    axpy(x, c.drift.as_slice(), h);
}

/// `e += D e h - Phi F^T dW + C_bar dWbar` with `phi_ft = Phi F^T`.
#[inline]
pub(crate) fn error_update(e: &mut [f64], e_old: &[f64], dw: &[f64], dwbar: &[f64], drift: &DMatrix<f64>, phi_ft: &DMatrix<f64>, c_bar: &DMatrix<f64>, h: f64) {
    gemv_acc(e, drift, e_old, h);
    gemv_acc(e, phi_ft, dw, -1.0);
    gemv_acc(e, c_bar, dwbar, 1.0);
}

/// Innovation increment `dY - (F x_hat + F_hat m + f) h`.
pub fn innovation_increment(dy: &DVector<f64>, x_hat: &DVector<f64>, m: &DVector<f64>, c: &CoefficientBundle, h: f64) -> DVector<f64> {
    let mut out = DVector::zeros(dy.len());
    innovation_into(out.as_mut_slice(), dy.as_slice(), x_hat.as_slice(), m.as_slice(), c, h);
    out
}

/// One Euler–Maruyama step of the filter SDE with gain `q`.
#[allow(clippy::too_many_arguments)]
pub fn filter_step(
    state: &FilterState,
    dv: &DVector<f64>,
    u: &DVector<f64>,
    ubar: &DVector<f64>,
    m: &DVector<f64>,
    c: &CoefficientBundle,
    h: f64,
    q: &DMatrix<f64>,
) -> FilterState {
    let mut x = state.x_hat.clone();
    drift_update(x.as_mut_slice(), state.x_hat.as_slice(), u.as_slice(), ubar.as_slice(), m.as_slice(), c, h);
    gemv_acc(x.as_mut_slice(), q, dv.as_slice(), 1.0);
    FilterState { t: state.t + h, x_hat: x, v: &state.v + dv }
}

/// One step of `de = D e dt - Phi F^T dW + C_bar dWbar`.
#[allow(clippy::too_many_arguments)]
pub fn error_step(
    state: &ErrorState,
    dw: &DVector<f64>,
    dwbar: &DVector<f64>,
    c: &CoefficientBundle,
    h: f64,
    phi: &DMatrix<f64>,
    drift: &DMatrix<f64>,
) -> ErrorState {
    let phi_ft = phi * c.f.transpose();
    let mut e = state.e.clone();
    error_update(e.as_mut_slice(), state.e.as_slice(), dw.as_slice(), dwbar.as_slice(), drift, &phi_ft, &c.c_bar, h);
    ErrorState { t: state.t + h, e }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::chain::Generator;
    use crate::model::{Dims, InitialLaw, MatrixSchedule, ProblemSpec, Symbol};

    fn bundle(coeffs: &[(Symbol, f64)]) -> CoefficientBundle {
        let map: BTreeMap<_, _> = coeffs
            .iter()
            .map(|&(k, v)| (k, vec![MatrixSchedule::constant(&DMatrix::from_element(1, 1, v))]))
            .collect();
        let spec = ProblemSpec::new(
            Dims { n: 1, m: 1, r: 1, d: 1 },
            1.0,
            Generator::zero(1),
            InitialLaw { mean: DVector::zeros(1), covariance: DMatrix::zeros(1, 1), regime: 0 },
            map,
            vec![DMatrix::zeros(1, 1)],
            vec![DMatrix::zeros(1, 1)],
        )
        .unwrap();
        spec.eval(0, 0.0).unwrap()
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn exact_prediction_gives_zero_innovation() {
        let c = bundle(&[(Symbol::F, 2.0), (Symbol::FHat, -0.5), (Symbol::ObsDrift, 0.3)]);
        let (x, m, h) = (1.3, 0.4, 0.01);
        let dy = v((2.0 * x - 0.5 * m + 0.3) * h);
        assert!(innovation_increment(&dy, &v(x), &v(m), &c, h)[0].abs() < 1e-16);
        let c0 = bundle(&[]);
        assert_eq!(innovation_increment(&v(0.7), &v(x), &v(m), &c0, h), v(0.7));
    }

    #[test]
    fn filter_step_arithmetic() {
        let c = bundle(&[(Symbol::A, 1.0)]);
        let s = FilterState { t: 0.0, x_hat: v(2.0), v: v(0.0) };
        let q = DMatrix::zeros(1, 1);
        let next = filter_step(&s, &v(0.0), &v(0.0), &v(0.0), &v(0.0), &c, 0.01, &q);
        assert!((next.x_hat[0] - 2.02).abs() < 1e-15);
        let c0 = bundle(&[]);
        let same = filter_step(&s, &v(0.0), &v(0.0), &v(0.0), &v(0.0), &c0, 0.01, &q);
        assert_eq!(same.x_hat, s.x_hat);
    }

    #[test]
    fn zero_error_stays_zero() {
        let c = bundle(&[(Symbol::A, -1.0), (Symbol::F, 1.0)]);
        let s = ErrorState { t: 0.0, e: v(0.0) };
        let z = DMatrix::zeros(1, 1);
        let next = error_step(&s, &v(0.3), &v(-0.2), &c, 0.01, &z, &c.a);
        assert_eq!(next.e[0], 0.0);
    }
}
