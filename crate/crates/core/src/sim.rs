//! Closed-loop Euler–Maruyama co-simulation, Monte-Carlo cost estimation and
//! the path-conditioned theoretical cost.
//!
//! Monte Carlo is nested: chain paths outside, noise draws inside. Each
//! chain path owns its filter tables and random streams, and per-path
//! results are reduced in path order, so reports are bit-reproducible for
//! any thread count.

use std::io::Write;
use std::sync::Arc;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::{sample_path_with, ChainPath};
use crate::control::{AffineLaw, Perturbed, Policy, SeparatedController};
use crate::filter::{drift_update, error_update, innovation_into};
use crate::kernels::{axpy, bilinear, dot, gemv_acc};
use crate::model::{BundleTable, CoefficientBundle, ProblemSpec, Symbol};
use crate::odesolve::{
    duality_sides, simpson, solve_filter_riccati, solve_mean_affine, solve_phibar, FilterTables, GainTables, PathSeries,
    SolveError, TimeGrid,
};
use crate::rng::{self, Domain};

/// Mean with standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    /// Sample mean and `sd / sqrt(n)` of `xs`.
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Estimate { mean: f64::NAN, se: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Estimate { mean, se: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        Estimate { mean, se: (var / n).sqrt() }
    }

    /// True when `|mean| < k * se`, or the mean is exactly zero.
    pub fn within(&self, k: f64) -> bool {
        self.mean == 0.0 || self.mean.abs() < k * self.se
    }
}

/// Symmetric square root of a PSD matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| x.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Running cost integrand `x'Hx + 2u'Gx + u'Ru + m'H_hat m + 2ubar'G_hat m + ubar'R_hat ubar`.
pub fn running_cost(c: &CoefficientBundle, x: &[f64], u: &[f64], m: &[f64], ubar: &[f64]) -> f64 {
    bilinear(x, &c.h, x) + 2.0 * bilinear(u, &c.g, x) + bilinear(u, &c.r, u) + bilinear(m, &c.h_hat, m)
        + 2.0 * bilinear(ubar, &c.g_hat, m)
        + bilinear(ubar, &c.r_hat, ubar)
}

/// Terminal cost `x'Sx + m'S_hat m` in `regime`.
pub fn terminal_cost(spec: &ProblemSpec, regime: usize, x: &[f64], m: &[f64]) -> f64 {
    bilinear(x, &spec.terminal_s[regime], x) + bilinear(m, &spec.terminal_s_hat[regime], m)
}

/// Everything the stepper needs along one chain path under one policy.
pub struct PathContext<'a> {
    pub spec: &'a ProblemSpec,
    pub grid: TimeGrid,
    bundles: &'a BundleTable,
    pub filter: Arc<FilterTables>,
    pub mean: PathSeries,
    laws: Vec<AffineLaw>,
    ubar: Vec<DVector<f64>>,
    phi_ft: Vec<DMatrix<f64>>,
}

impl<'a> PathContext<'a> {
    pub fn new<P: Policy + ?Sized>(
        spec: &'a ProblemSpec,
        grid: TimeGrid,
        bundles: &'a BundleTable,
        policy: &P,
        path: &ChainPath,
    ) -> Result<Self, SolveError> {
        let filter = solve_filter_riccati(spec, path, &grid)?;
        Self::with_filter(spec, bundles, policy, Arc::new(filter))
    }

    pub fn with_filter<P: Policy + ?Sized>(
        spec: &'a ProblemSpec,
        bundles: &'a BundleTable,
        policy: &P,
        filter: Arc<FilterTables>,
    ) -> Result<Self, SolveError> {
        let grid = filter.grid;
        let law = |l: usize, t: f64| policy.mean_law_at(l, t);
        let mean = solve_mean_affine(spec, &filter.substeps, &grid, &law)?;
        let mut laws = Vec::with_capacity(grid.nodes());
        let mut ubar = Vec::with_capacity(grid.nodes());
        let mut phi_ft = Vec::with_capacity(grid.nodes());
        for k in 0..grid.nodes() {
            let l = filter.regimes[k];
            let law = policy.law_at_node(l, k)?;
            let m = DVector::from_column_slice(mean.at_node(k).as_slice());
            ubar.push(law.mean_control(&m));
            laws.push(law);
            phi_ft.push(filter.phi.at_node(k) * bundles.get(l, k).f.transpose());
        }
        Ok(PathContext { spec, grid, bundles, filter, mean, laws, ubar, phi_ft })
    }

    pub fn regime(&self, k: usize) -> usize {
        self.filter.regimes[k]
    }

    pub fn bundle(&self, k: usize) -> &CoefficientBundle {
        self.bundles.get(self.regime(k), k)
    }
}

/// State of a realization at one node, handed to observers.
pub struct NodeView<'b> {
    pub k: usize,
    pub t: f64,
    pub regime: usize,
    pub x: &'b [f64],
    pub y: &'b [f64],
    pub x_hat: &'b [f64],
    pub m: &'b [f64],
    pub e: &'b [f64],
    pub u: &'b [f64],
    pub ubar: &'b [f64],
    pub v: &'b [f64],
    /// Innovation increment over `[t_k, t_{k+1}]`; absent at the last node.
    pub dv: Option<&'b [f64]>,
    pub bundle: &'b CoefficientBundle,
}

/// Independent noise for one realization: the initial draw, then per step
/// `dW` (r entries) and `dWbar` (d entries), each `N(0, h)`.
pub struct NoiseSource {
    rng: ChaCha8Rng,
    sqrt_h: f64,
}

impl NoiseSource {
    pub fn new(seed: u64, path: usize, draw: usize, h: f64) -> Self {
        NoiseSource { rng: rng::noise_stream(seed, path, draw), sqrt_h: h.sqrt() }
    }

    pub fn standard(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.rng.sample(StandardNormal);
        }
    }

    pub fn increments(&mut self, dw: &mut [f64], dwbar: &mut [f64]) {
        for x in dw.iter_mut().chain(dwbar.iter_mut()) {
            let z: f64 = self.rng.sample(StandardNormal);
            *x = z * self.sqrt_h;
        }
    }
}

/// Initial state `mu + sqrt(sigma) z`.
fn initial_state(spec: &ProblemSpec, noise: &mut NoiseSource) -> Vec<f64> {
    let n = spec.dims.n;
    let mut z = vec![0.0; n];
    noise.standard(&mut z);
    let mut x = spec.initial.mean.as_slice().to_vec();
    gemv_acc(&mut x, &psd_sqrt(&spec.initial.covariance), &z, 1.0);
    x
}

/// Run one closed-loop realization, calling `observe` at every node.
pub fn simulate<F: FnMut(&NodeView)>(ctx: &PathContext, noise: &mut NoiseSource, mut observe: F) {
    let d = ctx.spec.dims;
    let (n, mm, r, dd) = (d.n, d.m, d.r, d.d);
    let h = ctx.grid.step();
    let mut x = initial_state(ctx.spec, noise);
    let mut x_hat = ctx.spec.initial.mean.as_slice().to_vec();
    let mut e: Vec<f64> = x.iter().zip(&x_hat).map(|(a, b)| a - b).collect();
    let mut y = vec![0.0; r];
    let mut v = vec![0.0; r];
    let mut u = vec![0.0; mm];
    let mut diff = vec![0.0; n];
    let mut dw = vec![0.0; r];
    let mut dwbar = vec![0.0; dd];
    let mut dy = vec![0.0; r];
    let mut dv = vec![0.0; r];
    let mut x_new = vec![0.0; n];
    let mut xh_new = vec![0.0; n];
    let mut e_new = vec![0.0; n];
    let last = ctx.grid.steps();
    for k in 0..=last {
        let c = ctx.bundle(k);
        let m = ctx.mean.at_node(k).as_slice();
        let law = &ctx.laws[k];
        let ubar = ctx.ubar[k].as_slice();
        for i in 0..n {
            diff[i] = x_hat[i] - m[i];
        }
        u.copy_from_slice(ubar);
        gemv_acc(&mut u, &law.l1, &diff, 1.0);
        let mut view = NodeView {
            k,
            t: ctx.grid.time(k),
            regime: ctx.regime(k),
            x: &x,
            y: &y,
            x_hat: &x_hat,
            m,
            e: &e,
            u: &u,
            ubar,
            v: &v,
            dv: None,
            bundle: c,
        };
        if k == last {
            observe(&view);
            break;
        }
        noise.increments(&mut dw, &mut dwbar);
        dy.copy_from_slice(&dw);
        gemv_acc(&mut dy, &c.f, &x, h);
        gemv_acc(&mut dy, &c.f_hat, m, h);
        axpy(&mut dy, c.obs_drift.as_slice(), h);
        innovation_into(&mut dv, &dy, &x_hat, m, c, h);
        view.dv = Some(&dv);
        observe(&view);

        x_new.copy_from_slice(&x);
        drift_update(&mut x_new, &x, &u, ubar, m, c, h);
        gemv_acc(&mut x_new, &c.c, &dw, 1.0);
        gemv_acc(&mut x_new, &c.c_bar, &dwbar, 1.0);

        xh_new.copy_from_slice(&x_hat);
        drift_update(&mut xh_new, &x_hat, &u, ubar, m, c, h);
        gemv_acc(&mut xh_new, &ctx.filter.gain[k], &dv, 1.0);

        e_new.copy_from_slice(&e);
        error_update(&mut e_new, &e, &dw, &dwbar, &ctx.filter.drift[k], &ctx.phi_ft[k], &c.c_bar, h);

        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut x_hat, &mut xh_new);
        std::mem::swap(&mut e, &mut e_new);
        axpy(&mut y, &dy, 1.0);
        axpy(&mut v, &dv, 1.0);
    }
}

/// Realized costs of one realization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RealizedCosts {
    pub j_p: f64,
    pub j_f: f64,
    pub j_err: f64,
}

/// Trapezoid accumulator for the three cost functionals.
struct CostAccumulator<'s> {
    spec: &'s ProblemSpec,
    h: f64,
    last: usize,
    p: f64,
    f: f64,
    err: f64,
    terminal: Option<RealizedCosts>,
}

impl<'s> CostAccumulator<'s> {
    fn new(spec: &'s ProblemSpec, grid: &TimeGrid) -> Self {
        CostAccumulator { spec, h: grid.step(), last: grid.steps(), p: 0.0, f: 0.0, err: 0.0, terminal: None }
    }

    fn observe(&mut self, v: &NodeView) {
        let w = if v.k == 0 || v.k == self.last { 0.5 * self.h } else { self.h };
        let c = v.bundle;
        self.p += w * running_cost(c, v.x, v.u, v.m, v.ubar);
        self.f += w * running_cost(c, v.x_hat, v.u, v.m, v.ubar);
        self.err += w * bilinear(v.e, &c.h, v.e);
        if v.k == self.last {
            let zero = vec![0.0; v.m.len()];
            self.terminal = Some(RealizedCosts {
                j_p: terminal_cost(self.spec, v.regime, v.x, v.m),
                j_f: terminal_cost(self.spec, v.regime, v.x_hat, v.m),
                j_err: terminal_cost(self.spec, v.regime, v.e, &zero),
            });
        }
    }

    fn finish(&self) -> RealizedCosts {
        let t = self.terminal.expect("terminal node observed");
        RealizedCosts { j_p: 0.5 * (self.p + t.j_p), j_f: 0.5 * (self.f + t.j_f), j_err: 0.5 * (self.err + t.j_err) }
    }
}

/// One recorded closed-loop realization.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub path: ChainPath,
    pub regimes: Vec<usize>,
    pub x: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub x_hat: Vec<DVector<f64>>,
    pub m: Vec<DVector<f64>>,
    pub e: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub ubar: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    /// Running cost integrand of the partially observed cost per node.
    pub running_cost: Vec<f64>,
    pub terminal_cost: f64,
}

impl Trajectory {
    /// Columns `t, regime, X_i, Xhat_i, m_i, err_i, u_i, ubar_i, V_i, Y_i,
    /// running_cost`, with 1-based indices and regimes.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let n = self.x[0].len();
        let m = self.u[0].len();
        let r = self.v[0].len();
        let mut header = vec!["t".to_string(), "regime".to_string()];
        for (name, len) in [("X", n), ("Xhat", n), ("m", n), ("err", n), ("u", m), ("ubar", m), ("V", r), ("Y", r)] {
            header.extend((1..=len).map(|i| format!("{name}_{i}")));
        }
        header.push("running_cost".into());
        wtr.write_record(&header)?;
        for k in 0..self.grid.nodes() {
            let mut row = vec![self.grid.time(k).to_string(), (self.regimes[k] + 1).to_string()];
            for series in [&self.x, &self.x_hat, &self.m, &self.e, &self.u, &self.ubar, &self.v, &self.y] {
                row.extend(series[k].iter().map(f64::to_string));
            }
            row.push(self.running_cost[k].to_string());
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Record one full realization.
pub fn simulate_closed_loop(ctx: &PathContext, noise: &mut NoiseSource) -> Trajectory {
    let nodes = ctx.grid.nodes();
    let mut tr = Trajectory {
        grid: ctx.grid,
        path: ctx.filter.path.clone(),
        regimes: Vec::with_capacity(nodes),
        x: Vec::with_capacity(nodes),
        y: Vec::with_capacity(nodes),
        x_hat: Vec::with_capacity(nodes),
        m: Vec::with_capacity(nodes),
        e: Vec::with_capacity(nodes),
        u: Vec::with_capacity(nodes),
        ubar: Vec::with_capacity(nodes),
        v: Vec::with_capacity(nodes),
        running_cost: Vec::with_capacity(nodes),
        terminal_cost: 0.0,
    };
    let vecd = DVector::from_column_slice;
    let last = ctx.grid.steps();
    simulate(ctx, noise, |v| {
        tr.regimes.push(v.regime);
        tr.x.push(vecd(v.x));
        tr.y.push(vecd(v.y));
        tr.x_hat.push(vecd(v.x_hat));
        tr.m.push(vecd(v.m));
        tr.e.push(vecd(v.e));
        tr.u.push(vecd(v.u));
        tr.ubar.push(vecd(v.ubar));
        tr.v.push(vecd(v.v));
        tr.running_cost.push(running_cost(v.bundle, v.x, v.u, v.m, v.ubar));
        if v.k == last {
            tr.terminal_cost = terminal_cost(ctx.spec, v.regime, v.x, v.m);
        }
    });
    tr
}

/// Cost (3) of a recorded trajectory: half of the trapezoid of the running
/// cost plus the terminal cost.
pub fn realized_cost(traj: &Trajectory, spec: &ProblemSpec) -> f64 {
    let h = traj.grid.step();
    let last = traj.grid.steps();
    let mut total = 0.0;
    for k in 0..=last {
        let c = spec.bundle(traj.regimes[k], traj.grid.time(k));
        let w = if k == 0 || k == last { 0.5 * h } else { h };
        total += w * running_cost(&c, traj.x[k].as_slice(), traj.u[k].as_slice(), traj.m[k].as_slice(), traj.ubar[k].as_slice());
    }
    let l = traj.regimes[last];
    0.5 * (total + terminal_cost(spec, l, traj.x[last].as_slice(), traj.m[last].as_slice()))
}

/// Theoretical costs along one chain path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathTheory {
    pub v_f: f64,
    pub j_err: f64,
    /// `1/2 (int tr(H Phi) + tr(S Phi_T))`, the forward form of `j_err`.
    pub j_err_direct: f64,
}

impl PathTheory {
    pub fn v_p(&self) -> f64 {
        self.v_f + self.j_err
    }
}

/// Evaluate the optimal-cost formulas along the path of `ft`.
pub fn path_theory(spec: &ProblemSpec, gains: &GainTables, ft: &FilterTables) -> Result<PathTheory, SolveError> {
    let segs = ft.segments();
    let mut err: Option<SolveError> = None;
    let integral = simpson(&ft.substeps, |i, l, t| {
        let c = |s| spec.coeff(s, l, t);
        let phi_cov = segs[i].dense(t);
        let q = c(Symbol::C) + &phi_cov * c(Symbol::F).transpose();
        let lam = gains.lambda.at(l, t);
        let phi = gains.phi.at(l, t);
        let b_check = c(Symbol::B) + c(Symbol::BHat);
        let r_check = c(Symbol::R) + c(Symbol::RHat);
        let bb = b_check.transpose() * &phi;
        let rb = match crate::odesolve::spd_solve(&r_check, &bb, l, t) {
            Ok(x) => x,
            Err(e) => {
                err.get_or_insert(e);
                return 0.0;
            }
        };
        let drift = c(Symbol::Drift);
        -(bb.transpose() * rb)[(0, 0)] + (q.transpose() * lam * &q).trace() + 2.0 * (phi.transpose() * drift)[(0, 0)]
    });
    if let Some(e) = err {
        return Err(e);
    }
    let mu = DMatrix::from_column_slice(spec.dims.n, 1, spec.initial.mean.as_slice());
    let l0 = spec.initial.regime;
    let constant = (mu.transpose() * (gains.gamma.at_node(l0, 0) * &mu + gains.phi.at_node(l0, 0) * 2.0))[(0, 0)];
    let phibar = solve_phibar(spec, ft)?;
    let (lhs, rhs) = duality_sides(spec, ft, &phibar);
    Ok(PathTheory { v_f: 0.5 * (integral + constant), j_err: 0.5 * lhs, j_err_direct: 0.5 * rhs })
}

/// Averages of the theoretical costs over chain paths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryReport {
    pub v_p: Estimate,
    pub v_f: Estimate,
    pub j_err: Estimate,
    pub j_err_direct: Estimate,
    pub chain_paths: usize,
    pub seed: u64,
    #[serde(skip)]
    pub per_path: Vec<PathTheory>,
}

fn chain_path(spec: &ProblemSpec, seed: u64, i: usize) -> ChainPath {
    sample_path_with(&spec.generator, spec.initial.regime, spec.horizon, &mut rng::chain_stream(seed, i))
        .expect("initial regime checked when the problem is built")
}

fn theory_report(per_path: Vec<PathTheory>, seed: u64) -> TheoryReport {
    let col = |f: fn(&PathTheory) -> f64| Estimate::from_samples(&per_path.iter().map(f).collect::<Vec<_>>());
    TheoryReport {
        v_p: col(PathTheory::v_p),
        v_f: col(|p| p.v_f),
        j_err: col(|p| p.j_err),
        j_err_direct: col(|p| p.j_err_direct),
        chain_paths: per_path.len(),
        seed,
        per_path,
    }
}

/// Theoretical optimal costs averaged over `n_paths` chain paths drawn from
/// the same streams as [`mc_run`].
pub fn theoretical_cost(spec: &ProblemSpec, gains: &GainTables, n_paths: usize, seed: u64) -> Result<TheoryReport, SolveError> {
    let per_path: Result<Vec<PathTheory>, SolveError> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let path = chain_path(spec, seed, i);
            let ft = solve_filter_riccati(spec, &path, &gains.grid)?;
            path_theory(spec, gains, &ft)
        })
        .collect();
    Ok(theory_report(per_path?, seed))
}

/// Monte-Carlo run configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub chain_paths: usize,
    pub noise_draws: usize,
    pub seed: u64,
    /// Also evaluate the theoretical cost on every chain path.
    pub theory: bool,
    /// Record the first `keep` realizations in full.
    pub keep: usize,
    /// Record this state component at every node of every realization.
    pub track_component: Option<usize>,
    /// Number of equally spaced probe times for the orthogonality check.
    pub probes: usize,
}

impl McConfig {
    pub fn new(chain_paths: usize, noise_draws: usize, seed: u64) -> Self {
        McConfig { chain_paths, noise_draws, seed, theory: false, keep: 0, track_component: None, probes: 10 }
    }
}

/// Moments of the normalized innovation `dV / sqrt(h)`, per component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InnovationStats {
    pub count: u64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub lag1: Vec<f64>,
    /// `[regime][component]` mean of the normalized increments.
    pub mean_by_regime: Vec<Vec<f64>>,
    pub count_by_regime: Vec<u64>,
}

#[derive(Debug, Clone, Default)]
struct InnovationAcc {
    count: u64,
    pairs: u64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    lag: Vec<f64>,
    by_regime: Vec<(u64, Vec<f64>)>,
}

impl InnovationAcc {
    fn new(r: usize, regimes: usize) -> Self {
        InnovationAcc {
            count: 0,
            pairs: 0,
            sum: vec![0.0; r],
            sumsq: vec![0.0; r],
            lag: vec![0.0; r],
            by_regime: vec![(0, vec![0.0; r]); regimes],
        }
    }

    fn merge(&mut self, o: &InnovationAcc) {
        self.count += o.count;
        self.pairs += o.pairs;
        axpy(&mut self.sum, &o.sum, 1.0);
        axpy(&mut self.sumsq, &o.sumsq, 1.0);
        axpy(&mut self.lag, &o.lag, 1.0);
        for (a, b) in self.by_regime.iter_mut().zip(&o.by_regime) {
            a.0 += b.0;
            axpy(&mut a.1, &b.1, 1.0);
        }
    }

    fn finish(&self) -> InnovationStats {
        let n = self.count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let var: Vec<f64> = self.sumsq.iter().zip(&mean).map(|(s, m)| s / n - m * m).collect();
        let lag1 = self
            .lag
            .iter()
            .zip(mean.iter().zip(&var))
            .map(|(l, (m, v))| (l / self.pairs as f64 - m * m) / v)
            .collect();
        InnovationStats {
            count: self.count,
            mean,
            var,
            lag1,
            mean_by_regime: self
                .by_regime
                .iter()
                .map(|(c, s)| s.iter().map(|x| x / (*c).max(1) as f64).collect())
                .collect(),
            count_by_regime: self.by_regime.iter().map(|(c, _)| *c).collect(),
        }
    }
}

/// `E<e_t, x_hat_t>` at one probe time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeStat {
    pub t: f64,
    pub inner: Estimate,
    /// `inner / sqrt(E|e|^2 E|x_hat|^2)` with the matching standard error.
    pub correlation: Estimate,
}

/// Per chain path summary of a Monte-Carlo run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathSummary {
    pub jumps: usize,
    pub j_p: f64,
    pub j_f: f64,
    pub j_err: f64,
    pub gap: f64,
    /// Time average of `|e|^2` minus time average of `tr(Phi)`.
    pub error_energy_gap: f64,
    pub theory: Option<PathTheory>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub policy: String,
    pub seed: u64,
    pub chain_paths: usize,
    pub noise_draws: usize,
    pub step: f64,
    pub j_p: Estimate,
    pub j_f: Estimate,
    pub j_err: Estimate,
    /// `J_P - J_F - J_err`.
    pub gap: Estimate,
    pub v_p_theory: Option<Estimate>,
    pub v_f_theory: Option<Estimate>,
    pub j_err_theory: Option<Estimate>,
    /// `J_P - V_P` paired by chain path.
    pub theory_gap: Option<Estimate>,
    pub error_energy_gap: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McOutput {
    pub report: CostReport,
    pub innovation: InnovationStats,
    pub orthogonality: Vec<ProbeStat>,
    #[serde(skip)]
    pub per_path: Vec<PathSummary>,
    #[serde(skip)]
    pub trajectories: Vec<Trajectory>,
    /// Tracked component per realization, in realization order.
    #[serde(skip)]
    pub tracked: Vec<Vec<f64>>,
}

struct PathResult {
    summary: PathSummary,
    costs: Vec<RealizedCosts>,
    innovation: InnovationAcc,
    probes: Vec<[f64; 3]>,
    trajectories: Vec<Trajectory>,
    tracked: Vec<Vec<f64>>,
}

fn probe_nodes(grid: &TimeGrid, probes: usize) -> Vec<usize> {
    (1..=probes).map(|j| (grid.steps() * j + probes / 2) / probes).collect()
}

fn run_path<P: Policy + ?Sized>(
    spec: &ProblemSpec,
    gains: &GainTables,
    bundles: &BundleTable,
    policy: &P,
    cfg: &McConfig,
    i: usize,
) -> Result<PathResult, SolveError> {
    let grid = gains.grid;
    let path = chain_path(spec, cfg.seed, i);
    let ctx = PathContext::new(spec, grid, bundles, policy, &path)?;
    let theory = if cfg.theory { Some(path_theory(spec, gains, &ctx.filter)?) } else { None };
    let h = grid.step();
    let sqrt_h = h.sqrt();
    let r = spec.dims.r;
    let last = grid.steps();
    let probe_at = probe_nodes(&grid, cfg.probes);
    let mut probe_sums = vec![[0.0; 3]; cfg.probes];
    let mut innov = InnovationAcc::new(r, spec.regimes());
    let mut costs = Vec::with_capacity(cfg.noise_draws);
    let mut trajectories = Vec::new();
    let mut tracked = Vec::new();
    let mut energy = 0.0;
    let mut prev_z = vec![0.0; r];
    for j in 0..cfg.noise_draws {
        let realization = i * cfg.noise_draws + j;
        let mut noise = NoiseSource::new(cfg.seed, i, j, h);
        if realization < cfg.keep {
            let mut replay = NoiseSource::new(cfg.seed, i, j, h);
            trajectories.push(simulate_closed_loop(&ctx, &mut replay));
        }
        let mut acc = CostAccumulator::new(spec, &grid);
        let mut track = Vec::new();
        let mut e_energy = 0.0;
        let mut next_probe = 0;
        simulate(&ctx, &mut noise, |v| {
            acc.observe(v);
            let w = if v.k == 0 || v.k == last { 0.5 * h } else { h };
            e_energy += w * dot(v.e, v.e);
            if let Some(c) = cfg.track_component {
                track.push(v.x[c]);
            }
            if next_probe < probe_at.len() && v.k == probe_at[next_probe] {
                probe_sums[next_probe][0] += dot(v.e, v.x_hat);
                probe_sums[next_probe][1] += dot(v.e, v.e);
                probe_sums[next_probe][2] += dot(v.x_hat, v.x_hat);
                next_probe += 1;
            }
            if let Some(dv) = v.dv {
                innov.count += 1;
                let reg = &mut innov.by_regime[v.regime];
                reg.0 += 1;
                for c in 0..r {
                    let z = dv[c] / sqrt_h;
                    innov.sum[c] += z;
                    innov.sumsq[c] += z * z;
                    reg.1[c] += z;
                    if v.k > 0 {
                        innov.lag[c] += z * prev_z[c];
                    }
                    prev_z[c] = z;
                }
                if v.k > 0 {
                    innov.pairs += 1;
                }
            }
        });
        costs.push(acc.finish());
        energy += e_energy;
        if cfg.track_component.is_some() {
            tracked.push(track);
        }
    }
    let trace_phi = {
        let segs = ctx.filter.segments();
        simpson(&ctx.filter.substeps, |s, _, t| segs[s].dense(t).trace())
    };
    let nd = cfg.noise_draws as f64;
    let mean = |f: fn(&RealizedCosts) -> f64| costs.iter().map(f).sum::<f64>() / nd;
    let summary = PathSummary {
        jumps: path.jumps(),
        j_p: mean(|c| c.j_p),
        j_f: mean(|c| c.j_f),
        j_err: mean(|c| c.j_err),
        gap: mean(|c| c.j_p - c.j_f - c.j_err),
        error_energy_gap: (energy / nd - trace_phi) / grid.horizon(),
        theory,
    };
    let probes = probe_sums.iter().map(|s| [s[0] / nd, s[1] / nd, s[2] / nd]).collect();
    Ok(PathResult { summary, costs, innovation: innov, probes, trajectories, tracked })
}

/// Nested Monte Carlo of the closed loop under `policy`.
pub fn mc_run<P: Policy + ?Sized>(
    spec: &ProblemSpec,
    gains: &GainTables,
    policy: &P,
    cfg: &McConfig,
) -> Result<McOutput, SolveError> {
    let bundles = BundleTable::new(spec, &gains.grid.times());
    let results: Result<Vec<PathResult>, SolveError> = (0..cfg.chain_paths)
        .into_par_iter()
        .map(|i| run_path(spec, gains, &bundles, policy, cfg, i))
        .collect();
    let results = results?;
    let mut innov = InnovationAcc::new(spec.dims.r, spec.regimes());
    for r in &results {
        innov.merge(&r.innovation);
    }
    let col = |f: &dyn Fn(&PathSummary) -> f64| Estimate::from_samples(&results.iter().map(|r| f(&r.summary)).collect::<Vec<_>>());
    // With a single chain path the clustered standard error is undefined;
    // fall back to the spread over noise draws.
    let cost_col = |f: &dyn Fn(&RealizedCosts, &PathSummary) -> f64| {
        if results.len() > 1 {
            col(&|s| f(&RealizedCosts { j_p: s.j_p, j_f: s.j_f, j_err: s.j_err }, s))
        } else {
            let r = &results[0];
            Estimate::from_samples(&r.costs.iter().map(|c| f(c, &r.summary)).collect::<Vec<_>>())
        }
    };
    let grid = gains.grid;
    let orthogonality = probe_nodes(&grid, cfg.probes)
        .iter()
        .enumerate()
        .map(|(p, &k)| {
            let inner = Estimate::from_samples(&results.iter().map(|r| r.probes[p][0]).collect::<Vec<_>>());
            let ee = results.iter().map(|r| r.probes[p][1]).sum::<f64>() / results.len() as f64;
            let xx = results.iter().map(|r| r.probes[p][2]).sum::<f64>() / results.len() as f64;
            let scale = (ee * xx).sqrt();
            let correlation = if scale > 0.0 {
                Estimate { mean: inner.mean / scale, se: inner.se / scale }
            } else {
                Estimate { mean: 0.0, se: 0.0 }
            };
            ProbeStat { t: grid.time(k), inner, correlation }
        })
        .collect();
    let theory = cfg.theory.then(|| {
        (
            col(&|s| s.theory.map_or(f64::NAN, |t| t.v_p())),
            col(&|s| s.theory.map_or(f64::NAN, |t| t.v_f)),
            col(&|s| s.theory.map_or(f64::NAN, |t| t.j_err)),
            cost_col(&|c, s| c.j_p - s.theory.map_or(f64::NAN, |t| t.v_p())),
        )
    });
    let report = CostReport {
        policy: policy.name(),
        seed: cfg.seed,
        chain_paths: cfg.chain_paths,
        noise_draws: cfg.noise_draws,
        step: grid.step(),
        j_p: cost_col(&|c, _| c.j_p),
        j_f: cost_col(&|c, _| c.j_f),
        j_err: cost_col(&|c, _| c.j_err),
        gap: cost_col(&|c, _| c.j_p - c.j_f - c.j_err),
        v_p_theory: theory.map(|t| t.0),
        v_f_theory: theory.map(|t| t.1),
        j_err_theory: theory.map(|t| t.2),
        theory_gap: theory.map(|t| t.3),
        error_energy_gap: col(&|s| s.error_energy_gap),
    };
    let mut trajectories = Vec::new();
    let mut tracked = Vec::new();
    let mut per_path = Vec::with_capacity(results.len());
    for r in results {
        trajectories.extend(r.trajectories);
        tracked.extend(r.tracked);
        per_path.push(r.summary);
    }
    Ok(McOutput { report, innovation: innov.finish(), orthogonality, per_path, trajectories, tracked })
}

/// Optimal-policy Monte Carlo with the theoretical cost evaluated on the
/// same chain paths.
pub fn mc_cost(spec: &ProblemSpec, gains: &GainTables, cfg: &McConfig) -> Result<McOutput, SolveError> {
    let ctl = SeparatedController::new(spec, gains);
    mc_run(spec, gains, &ctl, &McConfig { theory: true, ..*cfg })
}

/// Maximum node deviations of the state and observation decompositions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecompositionReport {
    pub max_state_dev: f64,
    pub max_obs_dev: f64,
}

/// Replay one realization and split it into the control-free part
/// `(eta, lambda)` and the control-driven part `(X1, Y1)`, driven by the
/// same noise and the recorded controls.
pub fn decomposition_check<P: Policy + ?Sized>(
    spec: &ProblemSpec,
    grid: TimeGrid,
    policy: &P,
    path: &ChainPath,
    seed: u64,
) -> Result<(Trajectory, DecompositionReport), SolveError> {
    let bundles = BundleTable::new(spec, &grid.times());
    let ctx = PathContext::new(spec, grid, &bundles, policy, path)?;
    let traj = simulate_closed_loop(&ctx, &mut NoiseSource::new(seed, 0, 0, grid.step()));
    let zero_law = |_: usize, _: f64| Ok((DMatrix::zeros(spec.dims.m, spec.dims.n), DVector::zeros(spec.dims.m)));
    let m_eta = solve_mean_affine(spec, &ctx.filter.substeps, &grid, &zero_law)?;

    let (n, r) = (spec.dims.n, spec.dims.r);
    let h = grid.step();
    let mut noise = NoiseSource::new(seed, 0, 0, h);
    let mut eta = initial_state(spec, &mut noise);
    let mut lam = vec![0.0; r];
    let mut x1 = vec![0.0; n];
    let mut y1 = vec![0.0; r];
    let mut m1 = vec![0.0; n];
    let mut dw = vec![0.0; r];
    let mut dwbar = vec![0.0; spec.dims.d];
    let zero_m = vec![0.0; spec.dims.m];
    let mut rep = DecompositionReport { max_state_dev: 0.0, max_obs_dev: 0.0 };
    let mean_rhs = |k: usize, m1: &[f64]| {
        let c = ctx.bundle(k);
        let mut out = vec![0.0; n];
        gemv_acc(&mut out, &c.a_check, m1, 1.0);
        gemv_acc(&mut out, &c.b_check, traj.ubar[k].as_slice(), 1.0);
        out
    };
    for k in 0..=grid.steps() {
        let sdev = (0..n).map(|i| (traj.x[k][i] - eta[i] - x1[i]).abs()).fold(0.0, f64::max);
        let odev = (0..r).map(|i| (traj.y[k][i] - lam[i] - y1[i]).abs()).fold(0.0, f64::max);
        rep.max_state_dev = rep.max_state_dev.max(sdev);
        rep.max_obs_dev = rep.max_obs_dev.max(odev);
        if k == grid.steps() {
            break;
        }
        let c = ctx.bundle(k);
        let me = m_eta.at_node(k).as_slice();
        noise.increments(&mut dw, &mut dwbar);
        let mut dlam = dw.clone();
        gemv_acc(&mut dlam, &c.f, &eta, h);
        gemv_acc(&mut dlam, &c.f_hat, me, h);
        axpy(&mut dlam, c.obs_drift.as_slice(), h);
        let mut eta_new = eta.clone();
        drift_update(&mut eta_new, &eta, &zero_m, &zero_m, me, c, h);
        gemv_acc(&mut eta_new, &c.c, &dw, 1.0);
        gemv_acc(&mut eta_new, &c.c_bar, &dwbar, 1.0);

        let mut dy1 = vec![0.0; r];
        gemv_acc(&mut dy1, &c.f, &x1, h);
        gemv_acc(&mut dy1, &c.f_hat, &m1, h);
        let mut x1_new = x1.clone();
        gemv_acc(&mut x1_new, &c.a, &x1, h);
        gemv_acc(&mut x1_new, &c.a_hat, &m1, h);
        gemv_acc(&mut x1_new, &c.b, traj.u[k].as_slice(), h);
        gemv_acc(&mut x1_new, &c.b_hat, traj.ubar[k].as_slice(), h);
        // Heun step of the conditional mean of X1 under the recorded ubar
        let k1 = mean_rhs(k, &m1);
        let pred: Vec<f64> = m1.iter().zip(&k1).map(|(a, b)| a + h * b).collect();
        let k2 = mean_rhs(k + 1, &pred);
        for i in 0..n {
            m1[i] += 0.5 * h * (k1[i] + k2[i]);
        }
        eta = eta_new;
        x1 = x1_new;
        axpy(&mut lam, &dlam, 1.0);
        axpy(&mut y1, &dy1, 1.0);
    }
    Ok((traj, rep))
}

/// One perturbation direction at one step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerturbationRow {
    pub direction: usize,
    pub eps: f64,
    /// `J_P(u* + eps d) - J_P(u*)` with common random numbers.
    pub delta: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationReport {
    pub base: Estimate,
    pub rows: Vec<PerturbationRow>,
    pub chain_paths: usize,
    pub noise_draws: usize,
    pub seed: u64,
}

/// Mean partially observed cost over `noise_draws` realizations on one path.
fn path_cost(ctx: &PathContext, seed: u64, path: usize, noise_draws: usize) -> f64 {
    let mut total = 0.0;
    for j in 0..noise_draws {
        let mut acc = CostAccumulator::new(ctx.spec, &ctx.grid);
        simulate(ctx, &mut NoiseSource::new(seed, path, j, ctx.grid.step()), |v| acc.observe(v));
        total += acc.finish().j_p;
    }
    total / noise_draws as f64
}

/// Cost changes of random constant affine perturbations of the optimal law.
///
/// Every perturbed policy reuses the chain paths, filter tables and noise of
/// the base run.
pub fn perturbation_study(
    spec: &ProblemSpec,
    gains: &GainTables,
    directions: usize,
    eps: &[f64],
    chain_paths: usize,
    noise_draws: usize,
    seed: u64,
) -> Result<PerturbationReport, SolveError> {
    let ctl = SeparatedController::new(spec, gains);
    let bundles = BundleTable::new(spec, &gains.grid.times());
    let dirs: Vec<AffineLaw> = (0..directions)
        .map(|k| AffineLaw::random(&spec.dims, &mut rng::stream(seed, Domain::Direction, k as u64)))
        .collect();
    let per_path: Result<Vec<(f64, Vec<f64>)>, SolveError> = (0..chain_paths)
        .into_par_iter()
        .map(|i| {
            let path = chain_path(spec, seed, i);
            let filter = Arc::new(solve_filter_riccati(spec, &path, &gains.grid)?);
            let base_ctx = PathContext::with_filter(spec, &bundles, &ctl, filter.clone())?;
            let base = path_cost(&base_ctx, seed, i, noise_draws);
            let mut deltas = Vec::with_capacity(directions * eps.len());
            for d in &dirs {
                for &e in eps {
                    let pol = Perturbed { base: &ctl, direction: d.clone(), eps: e };
                    let ctx = PathContext::with_filter(spec, &bundles, &pol, filter.clone())?;
                    deltas.push(path_cost(&ctx, seed, i, noise_draws) - base);
                }
            }
            Ok((base, deltas))
        })
        .collect();
    let per_path = per_path?;
    let base = Estimate::from_samples(&per_path.iter().map(|p| p.0).collect::<Vec<_>>());
    let mut rows = Vec::new();
    for dir in 0..directions {
        for (q, &e) in eps.iter().enumerate() {
            let col = dir * eps.len() + q;
            let diffs: Vec<f64> = per_path.iter().map(|p| p.1[col]).collect();
            rows.push(PerturbationRow { direction: dir, eps: e, delta: Estimate::from_samples(&diffs) });
        }
    }
    Ok(PerturbationReport { base, rows, chain_paths, noise_draws, seed })
}

/// Time-averaged cross-realization variance of `series[realization][node]`.
pub fn mean_cross_variance(series: &[&[f64]]) -> f64 {
    let n = series.len() as f64;
    let nodes = series[0].len();
    let mut total = 0.0;
    for k in 0..nodes {
        let mean = series.iter().map(|s| s[k]).sum::<f64>() / n;
        total += series.iter().map(|s| (s[k] - mean) * (s[k] - mean)).sum::<f64>() / (n - 1.0);
    }
    total / nodes as f64
}

/// Ratio of time-averaged cross-realization variances `a / b` with a paired
/// bootstrap over realizations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceRatio {
    pub ratio: f64,
    pub lower_5pct: f64,
    pub upper_95pct: f64,
    pub resamples: usize,
}

pub fn variance_ratio(a: &[Vec<f64>], b: &[Vec<f64>], resamples: usize, seed: u64) -> VarianceRatio {
    fn refs<'s>(s: &'s [Vec<f64>], idx: &[usize]) -> Vec<&'s [f64]> {
        idx.iter().map(|&i| s[i].as_slice()).collect()
    }
    let all: Vec<usize> = (0..a.len()).collect();
    let ratio = mean_cross_variance(&refs(a, &all)) / mean_cross_variance(&refs(b, &all));
    let mut rng = rng::stream(seed, Domain::Bootstrap, 0);
    let mut boots: Vec<f64> = (0..resamples)
        .map(|_| {
            let idx: Vec<usize> = (0..a.len()).map(|_| rng.random_range(0..a.len())).collect();
            mean_cross_variance(&refs(a, &idx)) / mean_cross_variance(&refs(b, &idx))
        })
        .collect();
    boots.sort_by(f64::total_cmp);
    let q = |p: f64| boots[((p * resamples as f64) as usize).min(resamples - 1)];
    VarianceRatio { ratio, lower_5pct: q(0.05), upper_95pct: q(0.95), resamples }
}
