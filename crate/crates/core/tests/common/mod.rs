//! Shared fixtures and an independent classical LQG reference.
//!
//! The reference solves the standard control Riccati equation, the linear
//! feedforward ODE and the Kalman–Bucy covariance, then propagates the first
//! two moments of the joint closed-loop state `(X, x_hat)` exactly. It does
//! not touch the library's solvers.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use cmflq::chain::Generator;
use cmflq::model::{Dims, InitialLaw, MatrixSchedule, ProblemSpec, Symbol};
use nalgebra::{DMatrix, DVector};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// Time-invariant single-regime problem without mean-field terms.
#[derive(Debug, Clone)]
pub struct Lqg {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub c_bar: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub drift: DVector<f64>,
    pub obs_drift: DVector<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub horizon: f64,
}

pub fn sample_lqg() -> Lqg {
    let m = |r, c, v: &[f64]| DMatrix::from_row_slice(r, c, v);
    Lqg {
        a: m(2, 2, &[0.0, 1.0, -1.0, -0.5]),
        b: m(2, 1, &[0.0, 1.0]),
        c: m(2, 1, &[0.2, 0.1]),
        c_bar: m(2, 1, &[0.3, 0.5]),
        f: m(1, 2, &[1.0, 0.5]),
        drift: DVector::from_vec(vec![0.1, -0.2]),
        obs_drift: DVector::from_vec(vec![0.05]),
        h: m(2, 2, &[1.0, 0.0, 0.0, 0.5]),
        r: m(1, 1, &[0.7]),
        s: m(2, 2, &[0.5, 0.0, 0.0, 0.2]),
        mu: DVector::from_vec(vec![1.0, -0.5]),
        sigma: m(2, 2, &[0.3, 0.05, 0.05, 0.2]),
        horizon: 2.0,
    }
}

impl Lqg {
    pub fn dims(&self) -> Dims {
        Dims { n: self.a.nrows(), m: self.b.ncols(), r: self.f.nrows(), d: self.c_bar.ncols() }
    }

    /// The same problem as a one-regime spec with every mean-field term zero.
    pub fn spec(&self) -> ProblemSpec {
        let mut map = BTreeMap::new();
        let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        for (sym, mat) in [
            (Symbol::A, self.a.clone()),
            (Symbol::B, self.b.clone()),
            (Symbol::C, self.c.clone()),
            (Symbol::CBar, self.c_bar.clone()),
            (Symbol::F, self.f.clone()),
            (Symbol::Drift, col(&self.drift)),
            (Symbol::ObsDrift, col(&self.obs_drift)),
            (Symbol::H, self.h.clone()),
            (Symbol::R, self.r.clone()),
        ] {
            map.insert(sym, vec![MatrixSchedule::constant(&mat)]);
        }
        ProblemSpec::new(
            self.dims(),
            self.horizon,
            Generator::zero(1),
            InitialLaw { mean: self.mu.clone(), covariance: self.sigma.clone(), regime: 0 },
            map,
            vec![self.s.clone()],
            vec![DMatrix::zeros(self.a.nrows(), self.a.nrows())],
        )
        .expect("valid spec")
    }
}

fn rk4<F: Fn(f64, &[DMatrix<f64>]) -> Vec<DMatrix<f64>>>(y: &[DMatrix<f64>], t: f64, dt: f64, f: F) -> Vec<DMatrix<f64>> {
    let add = |y: &[DMatrix<f64>], k: &[DMatrix<f64>], s: f64| y.iter().zip(k).map(|(a, b)| a + b * s).collect::<Vec<_>>();
    let k1 = f(t, y);
    let k2 = f(t + dt / 2.0, &add(y, &k1, dt / 2.0));
    let k3 = f(t + dt / 2.0, &add(y, &k2, dt / 2.0));
    let k4 = f(t + dt, &add(y, &k3, dt));
    (0..y.len()).map(|i| &y[i] + (&k1[i] + &k2[i] * 2.0 + &k3[i] * 2.0 + &k4[i]) * (dt / 6.0)).collect()
}

/// Result of the reference computation.
#[derive(Debug, Clone)]
pub struct LqgReference {
    pub cost: f64,
    pub mean_terminal: DVector<f64>,
    pub second_moment_terminal: DMatrix<f64>,
}

/// Optimal expected cost `1/2 E[int (X'HX + u'Ru) + X_T' S X_T]` of the
/// classical controller `u = -R^{-1} B'(Lambda x_hat + phi)` on `steps`
/// RK4 steps.
pub fn lqg_reference(p: &Lqg, steps: usize) -> LqgReference {
    let n = p.a.nrows();
    let h = p.horizon / steps as f64;
    let r_inv = p.r.clone().try_inverse().expect("R invertible");
    let brb = &p.b * &r_inv * p.b.transpose();
    let drift = DMatrix::from_column_slice(n, 1, p.drift.as_slice());

    // Backward (Lambda, phi) on a half-step grid, in reversed time s = T - t.
    let half = 2 * steps;
    let hh = h / 2.0;
    let mut back = vec![vec![p.s.clone(), DMatrix::zeros(n, 1)]];
    let back_rhs = |_: f64, y: &[DMatrix<f64>]| {
        let (lam, phi) = (&y[0], &y[1]);
        let dl = p.a.transpose() * lam + lam * &p.a + &p.h - lam * &brb * lam;
        let dp = (&p.a - &brb * lam).transpose() * phi + lam * &drift;
        vec![dl, dp]
    };
    for k in 0..half {
        let next = rk4(&back[k], k as f64 * hh, hh, back_rhs);
        back.push(next);
    }
    back.reverse();
    let k1 = |j: usize| &r_inv * p.b.transpose() * &back[j][0];
    let k0 = |j: usize| &r_inv * p.b.transpose() * &back[j][1];

    // Forward joint state: Phi, E[z], E[z z'] with z = (X, x_hat), cost.
    let mut z_mean = DMatrix::zeros(2 * n, 1);
    z_mean.view_mut((0, 0), (n, 1)).copy_from(&DMatrix::from_column_slice(n, 1, p.mu.as_slice()));
    z_mean.view_mut((n, 0), (n, 1)).copy_from(&DMatrix::from_column_slice(n, 1, p.mu.as_slice()));
    let mut z_sec = &z_mean * z_mean.transpose();
    let top = z_sec.view((0, 0), (n, n)) + &p.sigma;
    z_sec.view_mut((0, 0), (n, n)).copy_from(&top);
    let mut y = vec![p.sigma.clone(), z_mean, z_sec, DMatrix::zeros(1, 1)];
    let qq = |phi: &DMatrix<f64>| &p.c + phi * p.f.transpose();
    for k in 0..steps {
        let rhs = |t: f64, y: &[DMatrix<f64>]| {
            let j = ((t - k as f64 * h) / hh).round() as usize + 2 * k;
            let (phi, mean, sec) = (&y[0], &y[1], &y[2]);
            let q = qq(phi);
            let dphi = &p.a * phi + phi * p.a.transpose() + &p.c * p.c.transpose() + &p.c_bar * p.c_bar.transpose()
                - &q * q.transpose();
            let g1 = k1(j);
            let g0 = k0(j);
            let mut m = DMatrix::zeros(2 * n, 2 * n);
            m.view_mut((0, 0), (n, n)).copy_from(&p.a);
            m.view_mut((0, n), (n, n)).copy_from(&(-(&p.b * &g1)));
            m.view_mut((n, 0), (n, n)).copy_from(&(&q * &p.f));
            m.view_mut((n, n), (n, n)).copy_from(&(&p.a - &p.b * &g1 - &q * &p.f));
            let top = &drift - &p.b * &g0;
            let mut c = DMatrix::zeros(2 * n, 1);
            c.view_mut((0, 0), (n, 1)).copy_from(&top);
            c.view_mut((n, 0), (n, 1)).copy_from(&top);
            let r = p.f.nrows();
            let d = p.c_bar.ncols();
            let mut nn = DMatrix::zeros(2 * n, r + d);
            nn.view_mut((0, 0), (n, r)).copy_from(&p.c);
            nn.view_mut((0, r), (n, d)).copy_from(&p.c_bar);
            nn.view_mut((n, 0), (n, r)).copy_from(&q);
            let dmean = &m * mean + &c;
            let dsec = &m * sec + sec * m.transpose() + &c * mean.transpose() + mean * c.transpose() + &nn * nn.transpose();
            let sxx = sec.view((0, 0), (n, n));
            let shh = sec.view((n, n), (n, n));
            let mh = mean.view((n, 0), (n, 1));
            let kk = g1.transpose() * &p.r * &g1;
            let running = (&p.h * sxx).trace() + (kk * shh).trace()
                + 2.0 * (g0.transpose() * &p.r * &g1 * mh)[(0, 0)]
                + (g0.transpose() * &p.r * &g0)[(0, 0)];
            vec![dphi, dmean, dsec, DMatrix::from_element(1, 1, running)]
        };
        y = rk4(&y, k as f64 * h, h, rhs);
    }
    let sxx = y[2].view((0, 0), (n, n)).clone_owned();
    let cost = 0.5 * (y[3][(0, 0)] + (&p.s * &sxx).trace());
    LqgReference {
        cost,
        mean_terminal: DVector::from_iterator(n, y[1].iter().take(n).copied()),
        second_moment_terminal: sxx,
    }
}
