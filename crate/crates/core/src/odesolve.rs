//! Deterministic integration: regime-coupled backward Riccati systems, the
//! path-conditioned filter Riccati equation and the linear ODEs built on it.
//!
//! Everything runs through one fixed-step RK4 core. Backward problems are
//! integrated forward in reversed time with a negated right-hand side.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::chain::ChainPath;
use crate::model::{ProblemSpec, Symbol};

pub const DEFAULT_STEPS: usize = 5000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("R or R_check is not positive definite at regime {regime}, t = {t}")]
    RNotInvertible { regime: usize, t: f64 },
    #[error("non-finite state in {what} at t = {t}")]
    NonFiniteState { what: &'static str, t: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("chain path horizon {path} does not match grid horizon {grid}")]
    HorizonMismatch { path: f64, grid: f64 },
}

/// Uniform grid `t_k = T k / N`, `k = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    /// Grid with step `h`; `T` must be a multiple of `h` within 1e-12.
    pub fn new(horizon: f64, step: f64) -> Result<Self, SolveError> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(SolveError::InvalidGrid(format!("step {step} must be positive")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(SolveError::InvalidGrid(format!("horizon {horizon} must be positive")));
        }
        let steps = (horizon / step).round();
        if steps < 1.0 || (steps * step - horizon).abs() > 1e-12 * horizon.max(1.0) {
            return Err(SolveError::InvalidGrid(format!("horizon {horizon} is not a multiple of step {step}")));
        }
        Ok(TimeGrid { horizon, steps: steps as usize })
    }

    pub fn with_steps(horizon: f64, steps: usize) -> Self {
        assert!(steps > 0 && horizon > 0.0);
        TimeGrid { horizon, steps }
    }

    /// `T / 5000`.
    pub fn default_for(horizon: f64) -> Self {
        Self::with_steps(horizon, DEFAULT_STEPS)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nodes()).map(|k| self.time(k)).collect()
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Solve `R X = rhs` for SPD `R`.
pub(crate) fn spd_solve(r: &DMatrix<f64>, rhs: &DMatrix<f64>, regime: usize, t: f64) -> Result<DMatrix<f64>, SolveError> {
    let chol = Cholesky::new(r.clone()).ok_or(SolveError::RNotInvertible { regime, t })?;
    Ok(chol.solve(rhs))
}

fn finite(ys: &[DMatrix<f64>]) -> bool {
    ys.iter().all(|m| m.iter().all(|x| x.is_finite()))
}

fn combine(y: &[DMatrix<f64>], k: &[DMatrix<f64>], a: f64, sym: bool) -> Vec<DMatrix<f64>> {
    y.iter()
        .zip(k)
        .map(|(y, k)| {
            let mut z = y + k * a;
            if sym {
                symmetrize(&mut z);
            }
            z
        })
        .collect()
}

/// One classical RK4 step of size `dt` from `(t, y)`.
pub(crate) fn rk4_step<F>(y: &[DMatrix<f64>], t: f64, dt: f64, sym: bool, f: &mut F) -> Result<Vec<DMatrix<f64>>, SolveError>
where
    F: FnMut(f64, &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>, SolveError>,
{
    let k1 = f(t, y)?;
    let k2 = f(t + 0.5 * dt, &combine(y, &k1, 0.5 * dt, sym))?;
    let k3 = f(t + 0.5 * dt, &combine(y, &k2, 0.5 * dt, sym))?;
    let k4 = f(t + dt, &combine(y, &k3, dt, sym))?;
    Ok(y.iter()
        .enumerate()
        .map(|(i, yi)| {
            let mut z = yi + (&k1[i] + (&k2[i] + &k3[i]) * 2.0 + &k4[i]) * (dt / 6.0);
            if sym {
                symmetrize(&mut z);
            }
            z
        })
        .collect())
}

/// RK4 from `t = T` down to `t = 0` on `grid`, written as forward
/// integration of `dy/ds = -f(T - s, y)`. Returns node values.
fn integrate_backward<F>(
    grid: &TimeGrid,
    terminal: Vec<DMatrix<f64>>,
    sym: bool,
    what: &'static str,
    mut f: F,
) -> Result<Vec<Vec<DMatrix<f64>>>, SolveError>
where
    F: FnMut(f64, &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>, SolveError>,
{
    let big_t = grid.horizon();
    let mut g = |s: f64, y: &[DMatrix<f64>]| -> Result<Vec<DMatrix<f64>>, SolveError> {
        Ok(f(big_t - s, y)?.into_iter().map(|m| -m).collect())
    };
    let n = grid.steps();
    let mut out = vec![Vec::new(); n + 1];
    let mut y = terminal;
    out[n] = y.clone();
    for k in (0..n).rev() {
        // reversed time runs from s = T - t_{k+1} to s = T - t_k
        let s0 = big_t - grid.time(k + 1);
        let ds = grid.time(k + 1) - grid.time(k);
        y = rk4_step(&y, s0, ds, sym, &mut g)?;
        if !finite(&y) {
            return Err(SolveError::NonFiniteState { what, t: grid.time(k) });
        }
        out[k] = y.clone();
    }
    Ok(out)
}

/// Per-regime node values `[regime][node]`, with cubic interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSeries {
    grid: TimeGrid,
    values: Vec<Vec<DMatrix<f64>>>,
}

impl RegimeSeries {
    fn from_nodes(grid: TimeGrid, nodes: Vec<Vec<DMatrix<f64>>>) -> Self {
        let regimes = nodes[0].len();
        let values = (0..regimes).map(|l| nodes.iter().map(|ys| ys[l].clone()).collect()).collect();
        RegimeSeries { grid, values }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn regimes(&self) -> usize {
        self.values.len()
    }

    pub fn at_node(&self, regime: usize, node: usize) -> &DMatrix<f64> {
        &self.values[regime][node]
    }

    pub fn series(&self, regime: usize) -> &[DMatrix<f64>] {
        &self.values[regime]
    }

    /// 4-point Lagrange interpolation in time.
    pub fn at(&self, regime: usize, t: f64) -> DMatrix<f64> {
        let v = &self.values[regime];
        let n = self.grid.steps();
        let h = self.grid.step();
        let x = (t / h).clamp(0.0, n as f64);
        let k = x.round();
        if (x - k).abs() < 1e-9 {
            return v[k as usize].clone();
        }
        let pts = 4.min(n + 1);
        let base = (x.floor() as isize - (pts as isize / 2 - 1)).clamp(0, (n + 1 - pts) as isize) as usize;
        let mut out = DMatrix::zeros(v[0].nrows(), v[0].ncols());
        for i in 0..pts {
            let xi = (base + i) as f64;
            let mut w = 1.0;
            for j in 0..pts {
                if j != i {
                    let xj = (base + j) as f64;
                    w *= (x - xj) / (xi - xj);
                }
            }
            out += &v[base + i] * w;
        }
        out
    }
}

impl RegimeSeries {
    /// Long-format CSV: `t, regime, name_i_j` (row-major, 1-based), one row
    /// per node and regime. With `vector` set, columns are `name_i`.
    pub fn write_csv<W: std::io::Write>(&self, w: W, name: &str, vector: bool) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let (rows, cols) = self.values[0][0].shape();
        let mut header = vec!["t".to_string(), "regime".to_string()];
        for i in 1..=rows {
            for j in 1..=cols {
                header.push(if vector { format!("{name}_{i}") } else { format!("{name}_{i}_{j}") });
            }
        }
        wtr.write_record(&header)?;
        for l in 0..self.regimes() {
            for k in 0..self.grid.nodes() {
                let m = &self.values[l][k];
                let mut row = vec![self.grid.time(k).to_string(), (l + 1).to_string()];
                for i in 0..rows {
                    for j in 0..cols {
                        row.push(m[(i, j)].to_string());
                    }
                }
                wtr.write_record(&row)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Solutions of the two coupled Riccati systems and the linear ODE.
#[derive(Debug, Clone, PartialEq)]
pub struct GainTables {
    pub grid: TimeGrid,
    pub lambda: RegimeSeries,
    pub gamma: RegimeSeries,
    pub phi: RegimeSeries,
}

#[derive(Clone, Copy)]
enum RiccatiKind {
    Plain,
    Checked,
}

fn riccati_coeffs(spec: &ProblemSpec, kind: RiccatiKind, l: usize, t: f64) -> [DMatrix<f64>; 5] {
    let c = |s| spec.coeff(s, l, t);
    match kind {
        RiccatiKind::Plain => [c(Symbol::A), c(Symbol::B), c(Symbol::H), c(Symbol::G), c(Symbol::R)],
        RiccatiKind::Checked => [
            c(Symbol::A) + c(Symbol::AHat),
            c(Symbol::B) + c(Symbol::BHat),
            c(Symbol::H) + c(Symbol::HHat),
            c(Symbol::G) + c(Symbol::GHat),
            c(Symbol::R) + c(Symbol::RHat),
        ],
    }
}

fn solve_riccati(spec: &ProblemSpec, grid: &TimeGrid, kind: RiccatiKind) -> Result<RegimeSeries, SolveError> {
    let d = spec.regimes();
    let terminal: Vec<DMatrix<f64>> = match kind {
        RiccatiKind::Plain => spec.terminal_s.clone(),
        RiccatiKind::Checked => (0..d).map(|l| spec.s_check(l)).collect(),
    };
    let what = match kind {
        RiccatiKind::Plain => "Lambda",
        RiccatiKind::Checked => "Gamma",
    };
    let gen = spec.generator.matrix().clone();
    let nodes = integrate_backward(grid, terminal, true, what, |t, ys| {
        (0..d)
            .map(|l| {
                let [a, b, h, g, r] = riccati_coeffs(spec, kind, l, t);
                let y = &ys[l];
                let bt = b.transpose() * y + &g;
                let rinv_bt = spd_solve(&r, &bt, l, t)?;
                let mut rhs = a.transpose() * y + y * &a + &h - bt.transpose() * rinv_bt;
                for (j, yj) in ys.iter().enumerate() {
                    let p = gen[(l, j)];
                    if p != 0.0 {
                        rhs += yj * p;
                    }
                }
                Ok(-rhs)
            })
            .collect()
    })?;
    Ok(RegimeSeries::from_nodes(*grid, nodes))
}

/// `Lambda` with terminal value `S`.
pub fn solve_riccati_lambda(spec: &ProblemSpec, grid: &TimeGrid) -> Result<RegimeSeries, SolveError> {
    solve_riccati(spec, grid, RiccatiKind::Plain)
}

/// `Gamma` with checked coefficients and terminal value `S + S_hat`.
pub fn solve_riccati_gamma(spec: &ProblemSpec, grid: &TimeGrid) -> Result<RegimeSeries, SolveError> {
    solve_riccati(spec, grid, RiccatiKind::Checked)
}

/// Linear ODE for `phi` driven by `Gamma b`; `phi(T) = 0`.
pub fn solve_phi_ode(spec: &ProblemSpec, gamma: &RegimeSeries, grid: &TimeGrid) -> Result<RegimeSeries, SolveError> {
    let d = spec.regimes();
    let n = spec.dims.n;
    let gen = spec.generator.matrix().clone();
    let terminal = vec![DMatrix::zeros(n, 1); d];
    let nodes = integrate_backward(grid, terminal, false, "phi", |t, ys| {
        (0..d)
            .map(|l| {
                let [a, b, _, g, r] = riccati_coeffs(spec, RiccatiKind::Checked, l, t);
                let gam = gamma.at(l, t);
                let bt = b.transpose() * &gam + g;
                let rinv_bcheck_t = spd_solve(&r, &b.transpose(), l, t)?;
                let drift = spec.coeff(Symbol::Drift, l, t);
                let mut rhs = (a.transpose() - bt.transpose() * rinv_bcheck_t) * &ys[l] + gam * drift;
                for (j, yj) in ys.iter().enumerate() {
                    let p = gen[(l, j)];
                    if p != 0.0 {
                        rhs += yj * p;
                    }
                }
                Ok(-rhs)
            })
            .collect()
    })?;
    Ok(RegimeSeries::from_nodes(*grid, nodes))
}

pub fn solve_gain_tables(spec: &ProblemSpec, grid: &TimeGrid) -> Result<GainTables, SolveError> {
    let lambda = solve_riccati_lambda(spec, grid)?;
    let gamma = solve_riccati_gamma(spec, grid)?;
    let phi = solve_phi_ode(spec, &gamma, grid)?;
    Ok(GainTables { grid: *grid, lambda, gamma, phi })
}

/// Integration substep `[start, end]` inside grid interval `interval`,
/// with constant regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Substep {
    pub start: f64,
    pub end: f64,
    pub regime: usize,
    pub interval: usize,
}

/// Grid intervals split at the path's jump times.
pub fn substeps(grid: &TimeGrid, path: &ChainPath) -> Result<Vec<Substep>, SolveError> {
    if (path.horizon() - grid.horizon()).abs() > 1e-12 * grid.horizon().max(1.0) {
        return Err(SolveError::HorizonMismatch { path: path.horizon(), grid: grid.horizon() });
    }
    let jumps = path.jump_times();
    let mut out = Vec::with_capacity(grid.steps() + jumps.len());
    let mut j = 0;
    for k in 0..grid.steps() {
        let (a, b) = (grid.time(k), grid.time(k + 1));
        while j < jumps.len() && jumps[j] <= a {
            j += 1;
        }
        let mut start = a;
        while j < jumps.len() && jumps[j] < b {
            out.push(Substep { start, end: jumps[j], regime: path.regime_at_unchecked(start), interval: k });
            start = jumps[j];
            j += 1;
        }
        out.push(Substep { start, end: b, regime: path.regime_at_unchecked(start), interval: k });
    }
    Ok(out)
}

/// One substep of a path-conditioned solution with Hermite end data.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub step: Substep,
    pub y0: DMatrix<f64>,
    pub y1: DMatrix<f64>,
    pub dy0: DMatrix<f64>,
    pub dy1: DMatrix<f64>,
}

impl Segment {
    /// Cubic Hermite dense output at `t` in `[start, end]`.
    pub fn dense(&self, t: f64) -> DMatrix<f64> {
        let dt = self.step.end - self.step.start;
        if dt <= 0.0 {
            return self.y0.clone();
        }
        let s = (t - self.step.start) / dt;
        let s2 = s * s;
        let s3 = s2 * s;
        &self.y0 * (2.0 * s3 - 3.0 * s2 + 1.0)
            + &self.dy0 * ((s3 - 2.0 * s2 + s) * dt)
            + &self.y1 * (-2.0 * s3 + 3.0 * s2)
            + &self.dy1 * ((s3 - s2) * dt)
    }
}

/// Solution along one chain path: node values plus substep segments.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSeries {
    pub grid: TimeGrid,
    pub nodes: Vec<DMatrix<f64>>,
    pub segments: Vec<Segment>,
}

impl PathSeries {
    pub fn at_node(&self, k: usize) -> &DMatrix<f64> {
        &self.nodes[k]
    }

    pub fn terminal(&self) -> &DMatrix<f64> {
        &self.nodes[self.nodes.len() - 1]
    }
}

type PathRhs<'a> = dyn FnMut(usize, f64, &DMatrix<f64>) -> Result<DMatrix<f64>, SolveError> + 'a;

fn solve_path_forward(
    grid: &TimeGrid,
    subs: &[Substep],
    y0: DMatrix<f64>,
    sym: bool,
    what: &'static str,
    rhs: &mut PathRhs<'_>,
) -> Result<PathSeries, SolveError> {
    let mut nodes = Vec::with_capacity(grid.nodes());
    let mut segments = Vec::with_capacity(subs.len());
    let mut y = y0;
    let mut last_interval = usize::MAX;
    for (i, s) in subs.iter().enumerate() {
        if s.interval != last_interval {
            nodes.push(y.clone());
            last_interval = s.interval;
        }
        let mut f = |t: f64, ys: &[DMatrix<f64>]| Ok(vec![rhs(i, t, &ys[0])?]);
        let dy0 = f(s.start, std::slice::from_ref(&y))?.remove(0);
        let y1 = rk4_step(std::slice::from_ref(&y), s.start, s.end - s.start, sym, &mut f)?.remove(0);
        if y1.iter().any(|x| !x.is_finite()) {
            return Err(SolveError::NonFiniteState { what, t: s.end });
        }
        let dy1 = f(s.end, std::slice::from_ref(&y1))?.remove(0);
        segments.push(Segment { step: *s, y0: y, y1: y1.clone(), dy0, dy1 });
        y = y1;
    }
    nodes.push(y);
    Ok(PathSeries { grid: *grid, nodes, segments })
}

fn solve_path_backward(
    grid: &TimeGrid,
    subs: &[Substep],
    terminal: DMatrix<f64>,
    sym: bool,
    what: &'static str,
    rhs: &mut PathRhs<'_>,
) -> Result<PathSeries, SolveError> {
    let big_t = grid.horizon();
    let mut nodes = vec![DMatrix::zeros(0, 0); grid.nodes()];
    let mut segments = Vec::with_capacity(subs.len());
    let mut y = terminal;
    nodes[grid.steps()] = y.clone();
    for (i, s) in subs.iter().enumerate().rev() {
        let mut g = |sv: f64, ys: &[DMatrix<f64>]| Ok(vec![-rhs(i, big_t - sv, &ys[0])?]);
        let y1 = y;
        let y0 = rk4_step(std::slice::from_ref(&y1), big_t - s.end, s.end - s.start, sym, &mut g)?.remove(0);
        if y0.iter().any(|x| !x.is_finite()) {
            return Err(SolveError::NonFiniteState { what, t: s.start });
        }
        let dy0 = rhs(i, s.start, &y0)?;
        let dy1 = rhs(i, s.end, &y1)?;
        if i == 0 || subs[i - 1].interval != s.interval {
            nodes[s.interval] = y0.clone();
        }
        segments.push(Segment { step: *s, y0: y0.clone(), y1, dy0, dy1 });
        y = y0;
    }
    segments.reverse();
    Ok(PathSeries { grid: *grid, nodes, segments })
}

/// Path-conditioned filter quantities on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTables {
    pub grid: TimeGrid,
    pub path: ChainPath,
    pub substeps: Vec<Substep>,
    /// Conditional error covariance.
    pub phi: PathSeries,
    /// Regime in force at each node.
    pub regimes: Vec<usize>,
    /// Gain `C + Phi F^T` per node.
    pub gain: Vec<DMatrix<f64>>,
    /// Error drift `A - Q F` per node.
    pub drift: Vec<DMatrix<f64>>,
    /// `A - C F` per node.
    pub a_tilde: Vec<DMatrix<f64>>,
}

impl FilterTables {
    /// Error-drift matrix at `t` inside segment `seg`.
    pub fn drift_in(&self, spec: &ProblemSpec, seg: usize, t: f64) -> DMatrix<f64> {
        let s = &self.segments()[seg];
        let l = s.step.regime;
        error_drift(spec, l, t, &s.dense(t))
    }

    pub fn segments(&self) -> &[Segment] {
        &self.phi.segments
    }
}

fn error_drift(spec: &ProblemSpec, l: usize, t: f64, phi: &DMatrix<f64>) -> DMatrix<f64> {
    let f = spec.coeff(Symbol::F, l, t);
    let q = spec.coeff(Symbol::C, l, t) + phi * f.transpose();
    spec.coeff(Symbol::A, l, t) - q * f
}

/// Forward filter Riccati `Phi' = A~ Phi + Phi A~^T + C_bar C_bar^T - Phi F^T F Phi`,
/// `Phi(0) = sigma`, with substeps split at jumps.
pub fn solve_filter_riccati(spec: &ProblemSpec, path: &ChainPath, grid: &TimeGrid) -> Result<FilterTables, SolveError> {
    let subs = substeps(grid, path)?;
    let mut rhs = |i: usize, t: f64, y: &DMatrix<f64>| -> Result<DMatrix<f64>, SolveError> {
        let l = subs[i].regime;
        let f = spec.coeff(Symbol::F, l, t);
        let at = spec.coeff(Symbol::A, l, t) - spec.coeff(Symbol::C, l, t) * &f;
        let cb = spec.coeff(Symbol::CBar, l, t);
        let pf = y * f.transpose();
        Ok(&at * y + y * at.transpose() + &cb * cb.transpose() - &pf * pf.transpose())
    };
    let phi = solve_path_forward(grid, &subs, spec.initial.covariance.clone(), true, "Phi", &mut rhs)?;
    let mut regimes = Vec::with_capacity(grid.nodes());
    let mut gain = Vec::with_capacity(grid.nodes());
    let mut drift = Vec::with_capacity(grid.nodes());
    let mut a_tilde = Vec::with_capacity(grid.nodes());
    for k in 0..grid.nodes() {
        let t = grid.time(k);
        let l = path.regime_at_unchecked(t);
        let f = spec.coeff(Symbol::F, l, t);
        let c = spec.coeff(Symbol::C, l, t);
        let a = spec.coeff(Symbol::A, l, t);
        let q = &c + phi.at_node(k) * f.transpose();
        drift.push(&a - &q * &f);
        a_tilde.push(a - c * f);
        gain.push(q);
        regimes.push(l);
    }
    Ok(FilterTables { grid: *grid, path: path.clone(), substeps: subs, phi, regimes, gain, drift, a_tilde })
}

/// Error covariance `P' = D P + P D^T + Phi F^T F Phi + C_bar C_bar^T`,
/// `P(0) = sigma`, where `D = A - Q F`.
pub fn solve_error_lyapunov(spec: &ProblemSpec, ft: &FilterTables) -> Result<PathSeries, SolveError> {
    let segs = ft.segments();
    let mut rhs = |i: usize, t: f64, y: &DMatrix<f64>| -> Result<DMatrix<f64>, SolveError> {
        let l = segs[i].step.regime;
        let phi = segs[i].dense(t);
        let f = spec.coeff(Symbol::F, l, t);
        let dm = error_drift(spec, l, t, &phi);
        let cb = spec.coeff(Symbol::CBar, l, t);
        let pf = &phi * f.transpose();
        Ok(&dm * y + y * dm.transpose() + &pf * pf.transpose() + &cb * cb.transpose())
    };
    solve_path_forward(&ft.grid, &ft.substeps, spec.initial.covariance.clone(), true, "P", &mut rhs)
}

/// Backward `phibar' = -(D^T phibar + phibar D + H)`, `phibar(T) = S` at the
/// terminal regime.
pub fn solve_phibar(spec: &ProblemSpec, ft: &FilterTables) -> Result<PathSeries, SolveError> {
    let segs = ft.segments();
    let mut rhs = |i: usize, t: f64, y: &DMatrix<f64>| -> Result<DMatrix<f64>, SolveError> {
        let l = segs[i].step.regime;
        let dm = error_drift(spec, l, t, &segs[i].dense(t));
        Ok(-(dm.transpose() * y + y * dm + spec.coeff(Symbol::H, l, t)))
    };
    let terminal = spec.terminal_s[ft.path.terminal_regime()].clone();
    solve_path_backward(&ft.grid, &ft.substeps, terminal, true, "phibar", &mut rhs)
}

/// Affine conditional-mean law `ubar = L2 m + l0` at `(regime, t)`.
pub type MeanLaw<'a> = dyn Fn(usize, f64) -> Result<(DMatrix<f64>, DVector<f64>), SolveError> + Sync + 'a;

/// Forward `m' = A_check m + B_check ubar + b` under an affine mean law,
/// `m(0) = mu`.
pub fn solve_mean_affine(spec: &ProblemSpec, subs: &[Substep], grid: &TimeGrid, law: &MeanLaw<'_>) -> Result<PathSeries, SolveError> {
    let mut rhs = |i: usize, t: f64, y: &DMatrix<f64>| -> Result<DMatrix<f64>, SolveError> {
        let l = subs[i].regime;
        let (l2, l0) = law(l, t)?;
        let ac = spec.coeff(Symbol::A, l, t) + spec.coeff(Symbol::AHat, l, t);
        let bc = spec.coeff(Symbol::B, l, t) + spec.coeff(Symbol::BHat, l, t);
        let ubar = l2 * y + DMatrix::from_column_slice(l0.len(), 1, l0.as_slice());
        Ok(ac * y + bc * ubar + spec.coeff(Symbol::Drift, l, t))
    };
    let m0 = DMatrix::from_column_slice(spec.dims.n, 1, spec.initial.mean.as_slice());
    solve_path_forward(grid, subs, m0, false, "conditional mean", &mut rhs)
}

/// Conditional mean under the optimal law:
/// `m' = (A_check - B_check R_check^{-1} Bt_check) m - B_check R_check^{-1} B_check^T phi + b`.
pub fn solve_conditional_mean(spec: &ProblemSpec, path: &ChainPath, gains: &GainTables) -> Result<PathSeries, SolveError> {
    let subs = substeps(&gains.grid, path)?;
    let law = |l: usize, t: f64| -> Result<(DMatrix<f64>, DVector<f64>), SolveError> {
        let [_, bc, _, gc, rc] = riccati_coeffs(spec, RiccatiKind::Checked, l, t);
        let bt = bc.transpose() * gains.gamma.at(l, t) + gc;
        let k2 = spd_solve(&rc, &bt, l, t)?;
        let bb = bc.transpose() * gains.phi.at(l, t);
        let k0 = spd_solve(&rc, &bb, l, t)?;
        Ok((-k2, -DVector::from_column_slice(k0.as_slice())))
    };
    solve_mean_affine(spec, &subs, &gains.grid, &law)
}

/// Composite Simpson over every substep of `f(segment, regime, t)`.
pub fn simpson<F: FnMut(usize, usize, f64) -> f64>(subs: &[Substep], mut f: F) -> f64 {
    let mut total = 0.0;
    for (i, s) in subs.iter().enumerate() {
        let dt = s.end - s.start;
        if dt <= 0.0 {
            continue;
        }
        let mid = 0.5 * (s.start + s.end);
        total += dt / 6.0 * (f(i, s.regime, s.start) + 4.0 * f(i, s.regime, mid) + f(i, s.regime, s.end));
    }
    total
}

/// Both sides of the forward/backward duality for the error cost along a
/// path: `tr(phibar_0 sigma) + int tr(phibar (Phi F^T F Phi + C_bar C_bar^T))`
/// and `int tr(H Phi) + tr(S Phi_T)`.
pub fn duality_sides(spec: &ProblemSpec, ft: &FilterTables, phibar: &PathSeries) -> (f64, f64) {
    let segs = ft.segments();
    let sigma = &spec.initial.covariance;
    let lhs0 = (phibar.at_node(0) * sigma).trace();
    let lhs_int = simpson(&ft.substeps, |i, l, t| {
        let phi = segs[i].dense(t);
        let pb = phibar.segments[i].dense(t);
        let f = spec.coeff(Symbol::F, l, t);
        let cb = spec.coeff(Symbol::CBar, l, t);
        let pf = &phi * f.transpose();
        (pb * (&pf * pf.transpose() + &cb * cb.transpose())).trace()
    });
    let rhs_int = simpson(&ft.substeps, |i, l, t| (spec.coeff(Symbol::H, l, t) * segs[i].dense(t)).trace());
    let s_t = &spec.terminal_s[ft.path.terminal_regime()];
    (lhs0 + lhs_int, rhs_int + (s_t * ft.phi.terminal()).trace())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::chain::Generator;
    use crate::model::{Dims, InitialLaw, MatrixSchedule, ScalarSchedule};

    fn m1(v: f64) -> Vec<MatrixSchedule> {
        vec![MatrixSchedule::constant(&DMatrix::from_element(1, 1, v))]
    }

    fn scalar(coeffs: &[(Symbol, f64)], s: f64, sigma: f64, horizon: f64) -> ProblemSpec {
        let map: BTreeMap<_, _> = coeffs.iter().map(|&(k, v)| (k, m1(v))).collect();
        ProblemSpec::new(
            Dims { n: 1, m: 1, r: 1, d: 1 },
            horizon,
            Generator::zero(1),
            InitialLaw { mean: DVector::from_element(1, 1.0), covariance: DMatrix::from_element(1, 1, sigma), regime: 0 },
            map,
            vec![DMatrix::from_element(1, 1, s)],
            vec![DMatrix::zeros(1, 1)],
        )
        .unwrap()
    }

    #[test]
    fn grid_arithmetic() {
        let g = TimeGrid::new(50.0, 0.01).unwrap();
        assert_eq!(g.nodes(), 5001);
        assert_eq!(g.time(5000), 50.0);
        assert!(TimeGrid::new(1.0, 0.3).is_err());
        assert!(TimeGrid::new(1.0, 0.0).is_err());
        assert_eq!(TimeGrid::default_for(50.0).step(), 0.01);
    }

    #[test]
    fn scalar_riccati_matches_tanh() {
        let spec = scalar(&[(Symbol::B, 1.0), (Symbol::H, 1.0), (Symbol::R, 1.0)], 0.0, 0.0, 1.0);
        let grid = TimeGrid::new(1.0, 1e-3).unwrap();
        let lam = solve_riccati_lambda(&spec, &grid).unwrap();
        assert!((lam.at_node(0, 0)[(0, 0)] - 1f64.tanh()).abs() < 1e-6);
        let gam = solve_riccati_gamma(&spec, &grid).unwrap();
        assert!((gam.at_node(0, 0)[(0, 0)] - 1f64.tanh()).abs() < 1e-6);
    }

    #[test]
    fn zero_cost_gives_zero_lambda() {
        let spec = scalar(&[(Symbol::A, 0.7), (Symbol::B, 1.0), (Symbol::R, 1.0)], 0.0, 0.0, 2.0);
        let t = solve_gain_tables(&spec, &TimeGrid::with_steps(2.0, 100)).unwrap();
        assert!(t.lambda.series(0).iter().all(|m| m[(0, 0)] == 0.0));
        assert!(t.phi.series(0).iter().all(|m| m[(0, 0)] == 0.0));
    }

    #[test]
    fn singular_r_is_reported() {
        let spec = scalar(&[(Symbol::B, 1.0), (Symbol::H, 1.0)], 0.0, 0.0, 1.0);
        assert!(matches!(
            solve_riccati_lambda(&spec, &TimeGrid::with_steps(1.0, 10)),
            Err(SolveError::RNotInvertible { .. })
        ));
    }

    #[test]
    fn phi_with_unit_gamma_is_linear() {
        // B = 0 decouples control; Gamma stays at S_check = 1 when A = H = 0
        let mut spec = scalar(&[(Symbol::R, 1.0)], 1.0, 0.0, 2.0);
        spec.set(Symbol::Drift, m1(1.0)).unwrap();
        let grid = TimeGrid::with_steps(2.0, 200);
        let t = solve_gain_tables(&spec, &grid).unwrap();
        for k in 0..grid.nodes() {
            assert!((t.gamma.at_node(0, k)[(0, 0)] - 1.0).abs() < 1e-14);
            assert!((t.phi.at_node(0, k)[(0, 0)] - (2.0 - grid.time(k))).abs() < 1e-8);
        }
    }

    #[test]
    fn lagrange_interpolation_is_exact_for_cubics() {
        let grid = TimeGrid::with_steps(1.0, 10);
        let nodes: Vec<Vec<DMatrix<f64>>> =
            grid.times().iter().map(|&t| vec![DMatrix::from_element(1, 1, t * t * t - t)]).collect();
        let s = RegimeSeries::from_nodes(grid, nodes);
        for t in [0.03, 0.47, 0.51, 0.99] {
            assert!((s.at(0, t)[(0, 0)] - (t * t * t - t)).abs() < 1e-14);
        }
    }

    #[test]
    fn substeps_split_at_jumps() {
        let grid = TimeGrid::with_steps(1.0, 4);
        let path = ChainPath::new(0, vec![0.3, 0.5], vec![1, 0], 1.0).unwrap();
        let s = substeps(&grid, &path).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s[1], Substep { start: 0.25, end: 0.3, regime: 0, interval: 1 });
        assert_eq!(s[2], Substep { start: 0.3, end: 0.5, regime: 1, interval: 1 });
        assert_eq!(s[3], Substep { start: 0.5, end: 0.75, regime: 0, interval: 2 });
    }

    #[test]
    fn zero_noise_filter_is_trivial() {
        let spec = scalar(&[(Symbol::A, -0.5), (Symbol::C, 0.3), (Symbol::F, 1.0), (Symbol::R, 1.0)], 0.0, 0.0, 1.0);
        let grid = TimeGrid::with_steps(1.0, 50);
        let ft = solve_filter_riccati(&spec, &ChainPath::constant(0, 1.0), &grid).unwrap();
        assert!(ft.phi.nodes.iter().all(|m| m[(0, 0)] == 0.0));
        assert!(ft.gain.iter().all(|q| q[(0, 0)] == 0.3));
    }

    #[test]
    fn lyapunov_matches_fine_reference() {
        let spec = scalar(&[(Symbol::A, -0.4), (Symbol::CBar, 0.6), (Symbol::R, 1.0)], 0.0, 0.5, 2.0);
        let path = ChainPath::constant(0, 2.0);
        let coarse = solve_filter_riccati(&spec, &path, &TimeGrid::with_steps(2.0, 100)).unwrap();
        let fine = solve_filter_riccati(&spec, &path, &TimeGrid::with_steps(2.0, 1600)).unwrap();
        for k in 0..=100 {
            let a = coarse.phi.at_node(k)[(0, 0)];
            let b = fine.phi.at_node(16 * k)[(0, 0)];
            assert!(((a - b) / b).abs() < 1e-6);
        }
        // F = 0 reduces the error covariance to the same equation
        let p = solve_error_lyapunov(&spec, &coarse).unwrap();
        assert_eq!(p.nodes, coarse.phi.nodes);
    }

    #[test]
    fn phibar_linear_case() {
        let spec = scalar(&[(Symbol::H, 0.8), (Symbol::R, 1.0)], 1.5, 0.0, 3.0);
        let grid = TimeGrid::with_steps(3.0, 30);
        let ft = solve_filter_riccati(&spec, &ChainPath::constant(0, 3.0), &grid).unwrap();
        let pb = solve_phibar(&spec, &ft).unwrap();
        for k in 0..grid.nodes() {
            let expect = 1.5 + 0.8 * (3.0 - grid.time(k));
            assert!((pb.at_node(k)[(0, 0)] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn conditional_mean_constant_closed_loop() {
        // scalar: A_check = a, B_check = 1, R = 1, Gamma solved, b = 0
        let spec = scalar(&[(Symbol::A, 0.3), (Symbol::B, 1.0), (Symbol::H, 1.0), (Symbol::R, 1.0)], 0.0, 0.0, 1.0);
        let grid = TimeGrid::with_steps(1.0, 1000);
        let gains = solve_gain_tables(&spec, &grid).unwrap();
        let m = solve_conditional_mean(&spec, &ChainPath::constant(0, 1.0), &gains).unwrap();
        // m' = (a - Gamma) m; integrate the scalar ODE with Gamma interpolated on a fine trapezoid
        let mut log_m = 0.0;
        for k in 0..1000 {
            let g0 = gains.gamma.at_node(0, k)[(0, 0)];
            let g1 = gains.gamma.at_node(0, k + 1)[(0, 0)];
            let gm = gains.gamma.at(0, grid.time(k) + 0.0005)[(0, 0)];
            log_m += 0.001 / 6.0 * ((0.3 - g0) + 4.0 * (0.3 - gm) + (0.3 - g1));
        }
        assert!((m.terminal()[(0, 0)] - log_m.exp()).abs() < 1e-6 * log_m.exp());
    }

    #[test]
    fn time_varying_schedule_solves() {
        let mut spec = scalar(&[(Symbol::B, 1.0), (Symbol::H, 1.0), (Symbol::R, 1.0)], 0.0, 0.0, 1.0);
        spec.set(
            Symbol::A,
            vec![MatrixSchedule::from_rows(vec![vec![ScalarSchedule::Sin { amplitude: 0.5, frequency: 1.0, offset: 0.0 }]])],
        )
        .unwrap();
        let t = solve_gain_tables(&spec, &TimeGrid::with_steps(1.0, 100)).unwrap();
        assert!(t.lambda.at_node(0, 0)[(0, 0)] > 0.0);
    }
}
