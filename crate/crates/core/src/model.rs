//! Problem definition: coefficient schedules, the scenario file schema and
//! assumption checks.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ChainError, Generator};

const EIG_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("regime {regime} outside 0..{regimes}")]
    InvalidRegime { regime: usize, regimes: usize },
    #[error(transparent)]
    Chain(#[from] ChainError),
}

impl ModelError {
    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        ModelError::Schema { path: path.into(), message: message.into() }
    }

    pub fn is_parse(&self) -> bool {
        matches!(self, ModelError::Parse(_))
    }
}

/// Scalar time function. Serialized as a bare number when constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ScalarRepr", into = "ScalarRepr")]
pub enum ScalarSchedule {
    Constant(f64),
    /// `amplitude * sin(frequency * t) + offset`
    Sin { amplitude: f64, frequency: f64, offset: f64 },
    /// `amplitude * cos(frequency * t) + offset`
    Cos { amplitude: f64, frequency: f64, offset: f64 },
    /// `amplitude * exp(rate * t)`
    Exp { amplitude: f64, rate: f64 },
    /// `amplitude / (1 + sqrt(t)) + offset`
    Rational { amplitude: f64, offset: f64 },
    /// Linear interpolation of `values` on the grid `k * step`.
    Tabulated { step: f64, values: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScalarRepr {
    Number(f64),
    Tagged(TaggedSchedule),
}

fn zero() -> f64 {
    0.0
}

fn one() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum TaggedSchedule {
    Constant {
        value: f64,
    },
    Sin {
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
        #[serde(default = "zero")]
        offset: f64,
    },
    Cos {
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
        #[serde(default = "zero")]
        offset: f64,
    },
    Exp {
        amplitude: f64,
        rate: f64,
    },
    Rational {
        amplitude: f64,
        #[serde(default = "zero")]
        offset: f64,
    },
    Tabulated {
        step: f64,
        values: Vec<f64>,
    },
}

impl From<ScalarRepr> for ScalarSchedule {
    fn from(r: ScalarRepr) -> Self {
        match r {
            ScalarRepr::Number(v) => ScalarSchedule::Constant(v),
            ScalarRepr::Tagged(t) => match t {
                TaggedSchedule::Constant { value } => ScalarSchedule::Constant(value),
                TaggedSchedule::Sin { amplitude, frequency, offset } => ScalarSchedule::Sin { amplitude, frequency, offset },
                TaggedSchedule::Cos { amplitude, frequency, offset } => ScalarSchedule::Cos { amplitude, frequency, offset },
                TaggedSchedule::Exp { amplitude, rate } => ScalarSchedule::Exp { amplitude, rate },
                TaggedSchedule::Rational { amplitude, offset } => ScalarSchedule::Rational { amplitude, offset },
                TaggedSchedule::Tabulated { step, values } => ScalarSchedule::Tabulated { step, values },
            },
        }
    }
}

impl From<ScalarSchedule> for ScalarRepr {
    fn from(s: ScalarSchedule) -> Self {
        match s {
            ScalarSchedule::Constant(v) => ScalarRepr::Number(v),
            ScalarSchedule::Sin { amplitude, frequency, offset } => {
                ScalarRepr::Tagged(TaggedSchedule::Sin { amplitude, frequency, offset })
            }
            ScalarSchedule::Cos { amplitude, frequency, offset } => {
                ScalarRepr::Tagged(TaggedSchedule::Cos { amplitude, frequency, offset })
            }
            ScalarSchedule::Exp { amplitude, rate } => ScalarRepr::Tagged(TaggedSchedule::Exp { amplitude, rate }),
            ScalarSchedule::Rational { amplitude, offset } => {
                ScalarRepr::Tagged(TaggedSchedule::Rational { amplitude, offset })
            }
            ScalarSchedule::Tabulated { step, values } => ScalarRepr::Tagged(TaggedSchedule::Tabulated { step, values }),
        }
    }
}

impl ScalarSchedule {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            ScalarSchedule::Constant(v) => v,
            ScalarSchedule::Sin { amplitude, frequency, offset } => amplitude * (frequency * t).sin() + offset,
            ScalarSchedule::Cos { amplitude, frequency, offset } => amplitude * (frequency * t).cos() + offset,
            ScalarSchedule::Exp { amplitude, rate } => amplitude * (rate * t).exp(),
            ScalarSchedule::Rational { amplitude, offset } => amplitude / (1.0 + t.sqrt()) + offset,
            ScalarSchedule::Tabulated { step, ref values } => {
                if !(step > 0.0) || values.is_empty() || t < 0.0 {
                    return f64::NAN;
                }
                let x = t / step;
                let k = x.floor() as usize;
                if k + 1 >= values.len() {
                    // tolerate the last node up to rounding
                    let last = (values.len() - 1) as f64;
                    return if x <= last * (1.0 + 1e-12) { values[values.len() - 1] } else { f64::NAN };
                }
                let w = x - k as f64;
                values[k] * (1.0 - w) + values[k + 1] * w
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, ScalarSchedule::Constant(_))
    }
}

impl From<f64> for ScalarSchedule {
    fn from(v: f64) -> Self {
        ScalarSchedule::Constant(v)
    }
}

/// Matrix of scalar schedules for one regime.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSchedule {
    rows: usize,
    cols: usize,
    entries: Vec<ScalarSchedule>,
    constant: Option<DMatrix<f64>>,
}

impl MatrixSchedule {
    pub fn from_rows(rows: Vec<Vec<ScalarSchedule>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let entries: Vec<ScalarSchedule> = rows.into_iter().flatten().collect();
        let constant = entries
            .iter()
            .all(ScalarSchedule::is_constant)
            .then(|| DMatrix::from_row_iterator(r, c, entries.iter().map(|s| s.eval(0.0))));
        MatrixSchedule { rows: r, cols: c, entries, constant }
    }

    pub fn constant(m: &DMatrix<f64>) -> Self {
        let rows = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| ScalarSchedule::Constant(m[(i, j)])).collect())
            .collect();
        Self::from_rows(rows)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(&DMatrix::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_constant(&self) -> bool {
        self.constant.is_some()
    }

    pub fn entry(&self, i: usize, j: usize) -> &ScalarSchedule {
        &self.entries[i * self.cols + j]
    }

    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        match &self.constant {
            Some(m) => m.clone(),
            None => DMatrix::from_row_iterator(self.rows, self.cols, self.entries.iter().map(|s| s.eval(t))),
        }
    }

    fn to_rows(&self) -> Vec<Vec<ScalarSchedule>> {
        self.entries.chunks(self.cols.max(1)).map(<[ScalarSchedule]>::to_vec).collect()
    }

    fn is_symmetric(&self) -> bool {
        self.rows == self.cols && (0..self.rows).all(|i| (0..i).all(|j| self.entry(i, j) == self.entry(j, i)))
    }
}

/// Coefficient symbols in scenario files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Symbol {
    A,
    AHat,
    B,
    BHat,
    C,
    CBar,
    F,
    FHat,
    Drift,
    ObsDrift,
    H,
    HHat,
    G,
    GHat,
    R,
    RHat,
}

impl Symbol {
    pub const ALL: [Symbol; 16] = [
        Symbol::A,
        Symbol::AHat,
        Symbol::B,
        Symbol::BHat,
        Symbol::C,
        Symbol::CBar,
        Symbol::F,
        Symbol::FHat,
        Symbol::Drift,
        Symbol::ObsDrift,
        Symbol::H,
        Symbol::HHat,
        Symbol::G,
        Symbol::GHat,
        Symbol::R,
        Symbol::RHat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Symbol::A => "A",
            Symbol::AHat => "A_hat",
            Symbol::B => "B",
            Symbol::BHat => "B_hat",
            Symbol::C => "C",
            Symbol::CBar => "C_bar",
            Symbol::F => "F",
            Symbol::FHat => "F_hat",
            Symbol::Drift => "b",
            Symbol::ObsDrift => "f",
            Symbol::H => "H",
            Symbol::HHat => "H_hat",
            Symbol::G => "G",
            Symbol::GHat => "G_hat",
            Symbol::R => "R",
            Symbol::RHat => "R_hat",
        }
    }

    pub fn from_name(name: &str) -> Option<Symbol> {
        Symbol::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn shape(self, d: &Dims) -> (usize, usize) {
        match self {
            Symbol::A | Symbol::AHat | Symbol::H | Symbol::HHat => (d.n, d.n),
            Symbol::B | Symbol::BHat => (d.n, d.m),
            Symbol::C => (d.n, d.r),
            Symbol::CBar => (d.n, d.d),
            Symbol::F | Symbol::FHat => (d.r, d.n),
            Symbol::Drift => (d.n, 1),
            Symbol::ObsDrift => (d.r, 1),
            Symbol::G | Symbol::GHat => (d.m, d.n),
            Symbol::R | Symbol::RHat => (d.m, d.m),
        }
    }

    pub fn is_vector(self) -> bool {
        matches!(self, Symbol::Drift | Symbol::ObsDrift)
    }

    fn is_symmetric(self) -> bool {
        matches!(self, Symbol::H | Symbol::HHat | Symbol::R | Symbol::RHat)
    }

    fn is_cost(self) -> bool {
        matches!(self, Symbol::H | Symbol::HHat | Symbol::G | Symbol::GHat | Symbol::R | Symbol::RHat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub d: usize,
}

/// Initial law of the state and chain. `regime` is 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialLaw {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub regime: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recommended {
    pub step: f64,
    pub chain_paths: usize,
    pub noise_draws: usize,
}

/// Immutable problem description.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub name: Option<String>,
    pub description: Option<String>,
    pub dims: Dims,
    pub horizon: f64,
    pub generator: Generator,
    pub initial: InitialLaw,
    schedules: BTreeMap<Symbol, Vec<MatrixSchedule>>,
    pub terminal_s: Vec<DMatrix<f64>>,
    pub terminal_s_hat: Vec<DMatrix<f64>>,
    pub recommended: Option<Recommended>,
}

/// All coefficients at one `(regime, t)`, with checked sums.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientBundle {
    pub a: DMatrix<f64>,
    pub a_hat: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub c_bar: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub f_hat: DMatrix<f64>,
    pub drift: DVector<f64>,
    pub obs_drift: DVector<f64>,
    pub h: DMatrix<f64>,
    pub h_hat: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub g_hat: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub r_hat: DMatrix<f64>,
    pub a_check: DMatrix<f64>,
    pub b_check: DMatrix<f64>,
    pub h_check: DMatrix<f64>,
    pub g_check: DMatrix<f64>,
    pub r_check: DMatrix<f64>,
}

impl ProblemSpec {
    /// Build a spec from constant or scheduled coefficients. Symbols not in
    /// `schedules` are zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dims: Dims,
        horizon: f64,
        generator: Generator,
        initial: InitialLaw,
        schedules: BTreeMap<Symbol, Vec<MatrixSchedule>>,
        terminal_s: Vec<DMatrix<f64>>,
        terminal_s_hat: Vec<DMatrix<f64>>,
    ) -> Result<Self, ModelError> {
        let spec = ProblemSpec {
            name: None,
            description: None,
            dims,
            horizon,
            generator,
            initial,
            schedules,
            terminal_s,
            terminal_s_hat,
            recommended: None,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn regimes(&self) -> usize {
        self.generator.regimes()
    }

    /// Schedule of `sym` in `regime`, if given explicitly.
    pub fn schedule(&self, sym: Symbol, regime: usize) -> Option<&MatrixSchedule> {
        self.schedules.get(&sym).map(|v| &v[regime])
    }

    pub fn has(&self, sym: Symbol) -> bool {
        self.schedules.contains_key(&sym)
    }

    /// Replace or insert a symbol's schedules.
    pub fn set(&mut self, sym: Symbol, per_regime: Vec<MatrixSchedule>) -> Result<(), ModelError> {
        self.schedules.insert(sym, per_regime);
        self.check()
    }

    /// Drop a symbol, making it zero.
    pub fn clear(&mut self, sym: Symbol) {
        self.schedules.remove(&sym);
    }

    /// True when every schedule of `regime` is constant in time.
    pub fn is_time_invariant(&self, regime: usize) -> bool {
        self.schedules.values().all(|v| v[regime].is_constant())
    }

    /// Single coefficient at `(regime, t)`; zero when absent.
    pub fn coeff(&self, sym: Symbol, regime: usize, t: f64) -> DMatrix<f64> {
        match self.schedules.get(&sym) {
            Some(v) => v[regime].eval(t),
            None => {
                let (r, c) = sym.shape(&self.dims);
                DMatrix::zeros(r, c)
            }
        }
    }

    pub fn coeff_vec(&self, sym: Symbol, regime: usize, t: f64) -> DVector<f64> {
        let m = self.coeff(sym, regime, t);
        DVector::from_column_slice(m.as_slice())
    }

    pub fn s_check(&self, regime: usize) -> DMatrix<f64> {
        &self.terminal_s[regime] + &self.terminal_s_hat[regime]
    }

    /// Validated evaluation of all coefficients at `(regime, t)`.
    pub fn eval(&self, regime: usize, t: f64) -> Result<CoefficientBundle, ModelError> {
        if regime >= self.regimes() {
            return Err(ModelError::InvalidRegime { regime, regimes: self.regimes() });
        }
        if !(0.0..=self.horizon).contains(&t) {
            return Err(ModelError::TimeOutOfRange { t, horizon: self.horizon });
        }
        Ok(self.bundle(regime, t))
    }

    pub(crate) fn bundle(&self, regime: usize, t: f64) -> CoefficientBundle {
        let get = |s| self.coeff(s, regime, t);
        let a = get(Symbol::A);
        let a_hat = get(Symbol::AHat);
        let b = get(Symbol::B);
        let b_hat = get(Symbol::BHat);
        let h = get(Symbol::H);
        let h_hat = get(Symbol::HHat);
        let g = get(Symbol::G);
        let g_hat = get(Symbol::GHat);
        let r = get(Symbol::R);
        let r_hat = get(Symbol::RHat);
        CoefficientBundle {
            a_check: &a + &a_hat,
            b_check: &b + &b_hat,
            h_check: &h + &h_hat,
            g_check: &g + &g_hat,
            r_check: &r + &r_hat,
            a,
            a_hat,
            b,
            b_hat,
            c: get(Symbol::C),
            c_bar: get(Symbol::CBar),
            f: get(Symbol::F),
            f_hat: get(Symbol::FHat),
            drift: self.coeff_vec(Symbol::Drift, regime, t),
            obs_drift: self.coeff_vec(Symbol::ObsDrift, regime, t),
            h,
            h_hat,
            g,
            g_hat,
            r,
            r_hat,
        }
    }

    /// Structural checks: shapes, regime counts, symmetry and the initial law.
    fn check(&self) -> Result<(), ModelError> {
        let d = &self.dims;
        if d.n == 0 || d.m == 0 || d.r == 0 || d.d == 0 {
            return Err(ModelError::schema("dims", "all dimensions must be positive"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(ModelError::schema("horizon", "must be positive and finite"));
        }
        let regimes = self.regimes();
        if self.initial.regime >= regimes {
            return Err(ModelError::schema(
                "initial.regime",
                format!("regime {} outside 1..={regimes}", self.initial.regime + 1),
            ));
        }
        if self.initial.mean.len() != d.n {
            return Err(ModelError::schema("initial.mean", format!("expected length {}", d.n)));
        }
        let cov = &self.initial.covariance;
        if cov.shape() != (d.n, d.n) {
            return Err(ModelError::schema("initial.covariance", format!("expected {}x{}", d.n, d.n)));
        }
        if cov != &cov.transpose() {
            return Err(ModelError::schema("initial.covariance", "must be symmetric"));
        }
        if min_eigenvalue(cov) < -EIG_TOL {
            return Err(ModelError::schema("initial.covariance", "must be positive semi-definite"));
        }
        for (sym, per_regime) in &self.schedules {
            let path = format!("coefficients.{}", sym.name());
            if per_regime.len() != regimes {
                return Err(ModelError::schema(path, format!("expected {regimes} regimes, got {}", per_regime.len())));
            }
            let shape = sym.shape(d);
            for (l, m) in per_regime.iter().enumerate() {
                if m.shape() != shape {
                    return Err(ModelError::schema(
                        format!("{path}[{l}]"),
                        format!("expected shape {}x{}, got {}x{}", shape.0, shape.1, m.rows, m.cols),
                    ));
                }
                if sym.is_symmetric() && !m.is_symmetric() {
                    return Err(ModelError::schema(format!("{path}[{l}]"), "must be symmetric"));
                }
            }
        }
        for (name, mats) in [("terminal.S", &self.terminal_s), ("terminal.S_hat", &self.terminal_s_hat)] {
            if mats.len() != regimes {
                return Err(ModelError::schema(name, format!("expected {regimes} regimes, got {}", mats.len())));
            }
            for (l, m) in mats.iter().enumerate() {
                if m.shape() != (d.n, d.n) {
                    return Err(ModelError::schema(format!("{name}[{l}]"), format!("expected {}x{}", d.n, d.n)));
                }
                if m != &m.transpose() {
                    return Err(ModelError::schema(format!("{name}[{l}]"), "must be symmetric"));
                }
            }
        }
        Ok(())
    }

    /// Parse a scenario file.
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ScenarioFile = match serde_path_to_error::deserialize(de) {
            Ok(f) => f,
            Err(err) => {
                let path = err.path().to_string();
                let inner = err.into_inner();
                return Err(match inner.classify() {
                    serde_json::error::Category::Data => ModelError::schema(path, inner.to_string()),
                    _ => ModelError::Parse(inner.to_string()),
                });
            }
        };
        file.into_spec()
    }

    /// Canonical pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&ScenarioFile::from_spec(self)).expect("serializable");
        s.push('\n');
        s
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialFile {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    regime: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TerminalFile {
    #[serde(rename = "S")]
    s: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "S_hat")]
    s_hat: Vec<Vec<Vec<f64>>>,
}

type MatrixSeries = Vec<Vec<Vec<ScalarSchedule>>>;
type VectorSeries = Vec<Vec<ScalarSchedule>>;

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoefficientsFile {
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    a: Option<MatrixSeries>,
    #[serde(rename = "A_hat", default, skip_serializing_if = "Option::is_none")]
    a_hat: Option<MatrixSeries>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    b: Option<MatrixSeries>,
    #[serde(rename = "B_hat", default, skip_serializing_if = "Option::is_none")]
    b_hat: Option<MatrixSeries>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    c: Option<MatrixSeries>,
    #[serde(rename = "C_bar", default, skip_serializing_if = "Option::is_none")]
    c_bar: Option<MatrixSeries>,
    #[serde(rename = "F", default, skip_serializing_if = "Option::is_none")]
    f: Option<MatrixSeries>,
    #[serde(rename = "F_hat", default, skip_serializing_if = "Option::is_none")]
    f_hat: Option<MatrixSeries>,
    #[serde(rename = "b", default, skip_serializing_if = "Option::is_none")]
    drift: Option<VectorSeries>,
    #[serde(rename = "f", default, skip_serializing_if = "Option::is_none")]
    obs_drift: Option<VectorSeries>,
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    h: Option<MatrixSeries>,
    #[serde(rename = "H_hat", default, skip_serializing_if = "Option::is_none")]
    h_hat: Option<MatrixSeries>,
    #[serde(rename = "G", default, skip_serializing_if = "Option::is_none")]
    g: Option<MatrixSeries>,
    #[serde(rename = "G_hat", default, skip_serializing_if = "Option::is_none")]
    g_hat: Option<MatrixSeries>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    r: Option<MatrixSeries>,
    #[serde(rename = "R_hat", default, skip_serializing_if = "Option::is_none")]
    r_hat: Option<MatrixSeries>,
}

impl CoefficientsFile {
    fn slot(&mut self, sym: Symbol) -> &mut Option<MatrixSeries> {
        match sym {
            Symbol::A => &mut self.a,
            Symbol::AHat => &mut self.a_hat,
            Symbol::B => &mut self.b,
            Symbol::BHat => &mut self.b_hat,
            Symbol::C => &mut self.c,
            Symbol::CBar => &mut self.c_bar,
            Symbol::F => &mut self.f,
            Symbol::FHat => &mut self.f_hat,
            Symbol::H => &mut self.h,
            Symbol::HHat => &mut self.h_hat,
            Symbol::G => &mut self.g,
            Symbol::GHat => &mut self.g_hat,
            Symbol::R => &mut self.r,
            Symbol::RHat => &mut self.r_hat,
            Symbol::Drift | Symbol::ObsDrift => unreachable!("vector symbol"),
        }
    }

    fn vector_slot(&mut self, sym: Symbol) -> &mut Option<VectorSeries> {
        match sym {
            Symbol::Drift => &mut self.drift,
            Symbol::ObsDrift => &mut self.obs_drift,
            _ => unreachable!("matrix symbol"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    dims: Dims,
    horizon: f64,
    generator: Vec<Vec<f64>>,
    initial: InitialFile,
    #[serde(default)]
    coefficients: CoefficientsFile,
    terminal: TerminalFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    recommended: Option<Recommended>,
}

fn rows_to_matrix(path: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ModelError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(ModelError::schema(path, "ragged matrix"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl ScenarioFile {
    fn into_spec(mut self) -> Result<ProblemSpec, ModelError> {
        let generator = Generator::from_rows(&self.generator).map_err(|e| ModelError::schema("generator", e.to_string()))?;
        if self.initial.regime == 0 {
            return Err(ModelError::schema("initial.regime", "regimes are numbered from 1"));
        }
        let initial = InitialLaw {
            mean: DVector::from_vec(self.initial.mean.clone()),
            covariance: rows_to_matrix("initial.covariance", &self.initial.covariance)?,
            regime: self.initial.regime - 1,
        };
        let mut schedules = BTreeMap::new();
        for sym in Symbol::ALL {
            let per_regime: Option<Vec<MatrixSchedule>> = if sym.is_vector() {
                self.coefficients.vector_slot(sym).take().map(|series| {
                    series
                        .into_iter()
                        .map(|v| MatrixSchedule::from_rows(v.into_iter().map(|e| vec![e]).collect()))
                        .collect()
                })
            } else {
                match self.coefficients.slot(sym).take() {
                    Some(series) => {
                        let mut out = Vec::with_capacity(series.len());
                        for (l, rows) in series.into_iter().enumerate() {
                            let c = rows.first().map_or(0, Vec::len);
                            if rows.iter().any(|row| row.len() != c) {
                                return Err(ModelError::schema(
                                    format!("coefficients.{}[{l}]", sym.name()),
                                    "ragged matrix",
                                ));
                            }
                            out.push(MatrixSchedule::from_rows(rows));
                        }
                        Some(out)
                    }
                    None => None,
                }
            };
            if let Some(v) = per_regime {
                schedules.insert(sym, v);
            }
        }
        let conv = |name: &str, series: &[Vec<Vec<f64>>]| -> Result<Vec<DMatrix<f64>>, ModelError> {
            series
                .iter()
                .enumerate()
                .map(|(l, rows)| rows_to_matrix(&format!("{name}[{l}]"), rows))
                .collect()
        };
        let spec = ProblemSpec {
            name: self.name,
            description: self.description,
            dims: self.dims,
            horizon: self.horizon,
            generator,
            initial,
            schedules,
            terminal_s: conv("terminal.S", &self.terminal.s)?,
            terminal_s_hat: conv("terminal.S_hat", &self.terminal.s_hat)?,
            recommended: self.recommended,
        };
        spec.check()?;
        Ok(spec)
    }

    fn from_spec(spec: &ProblemSpec) -> Self {
        let mut coefficients = CoefficientsFile::default();
        for (&sym, per_regime) in &spec.schedules {
            if sym.is_vector() {
                *coefficients.vector_slot(sym) =
                    Some(per_regime.iter().map(|m| m.entries.clone()).collect());
            } else {
                *coefficients.slot(sym) = Some(per_regime.iter().map(MatrixSchedule::to_rows).collect());
            }
        }
        ScenarioFile {
            name: spec.name.clone(),
            description: spec.description.clone(),
            dims: spec.dims,
            horizon: spec.horizon,
            generator: spec.generator.to_rows(),
            initial: InitialFile {
                mean: spec.initial.mean.iter().copied().collect(),
                covariance: matrix_to_rows(&spec.initial.covariance),
                regime: spec.initial.regime + 1,
            },
            coefficients,
            terminal: TerminalFile {
                s: spec.terminal_s.iter().map(matrix_to_rows).collect(),
                s_hat: spec.terminal_s_hat.iter().map(matrix_to_rows).collect(),
            },
            recommended: spec.recommended,
        }
    }
}

/// Smallest eigenvalue of the symmetrized matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Maximum absolute row sum.
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub assumption: String,
    /// 1-based regime, absent for regime-free checks.
    pub regime: Option<usize>,
    pub time: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub passes: bool,
    pub delta1: f64,
    pub delta2: f64,
    pub violations: Vec<Violation>,
}

/// Sample all schedules on `{0, step, ..., T}` and check boundedness,
/// terminal positivity and the cost convexity bounds.
pub fn validate_assumptions(spec: &ProblemSpec, grid_step: f64) -> AssumptionReport {
    assert!(grid_step > 0.0, "grid step must be positive");
    let mut violations = Vec::new();
    let steps = (spec.horizon / grid_step).ceil().max(1.0) as usize;
    let times: Vec<f64> = (0..=steps).map(|k| (k as f64 * grid_step).min(spec.horizon)).collect();
    let mut delta1 = f64::INFINITY;
    let mut delta2 = f64::INFINITY;
    let mut g_norms: Vec<(usize, f64, f64)> = Vec::new();

    for l in 0..spec.regimes() {
        let invariant = spec.is_time_invariant(l);
        for &t in &times {
            let c = spec.bundle(l, t);
            for sym in Symbol::ALL {
                let m = spec.coeff(sym, l, t);
                if m.iter().any(|x| !x.is_finite()) {
                    violations.push(Violation {
                        assumption: if sym.is_cost() { "A2" } else { "A1" }.into(),
                        regime: Some(l + 1),
                        time: Some(t),
                        detail: format!("{} is not finite", sym.name()),
                    });
                }
            }
            let h_min = min_eigenvalue(&c.h).min(min_eigenvalue(&c.h_check));
            let r_min = min_eigenvalue(&c.r).min(min_eigenvalue(&c.r_check));
            if h_min.is_finite() {
                if h_min < -EIG_TOL {
                    violations.push(Violation {
                        assumption: "A3".into(),
                        regime: Some(l + 1),
                        time: Some(t),
                        detail: format!("H or H_check has eigenvalue {h_min:.3e} < 0"),
                    });
                }
                delta1 = delta1.min(h_min);
            }
            if r_min.is_finite() {
                delta2 = delta2.min(r_min);
            } else {
                delta2 = f64::NAN;
            }
            g_norms.push((l, t, inf_norm(&c.g).max(inf_norm(&c.g_check))));
            if invariant {
                break;
            }
        }
    }
    let delta1 = if delta1.is_finite() { delta1.max(0.0) } else { 0.0 };
    // treat eigenvalues within round-off of zero as zero
    let delta1 = if delta1 <= EIG_TOL { 0.0 } else { delta1 };
    if !(delta2 > EIG_TOL) {
        violations.push(Violation {
            assumption: "A3".into(),
            regime: None,
            time: None,
            detail: format!("delta2 = {delta2:.3e}: R and R_check must be uniformly positive definite"),
        });
    }
    for (l, t, norm) in g_norms {
        let bad = norm > 0.0 && (delta1 <= 0.0 || norm * norm >= delta1 * delta2);
        if bad {
            let detail = if delta1 > 0.0 {
                format!("|G|^2 = {:.4} not below delta1*delta2 = {:.4}", norm * norm, delta1 * delta2)
            } else {
                "delta1 = 0 requires G = G_hat = 0".to_string()
            };
            violations.push(Violation { assumption: "A3".into(), regime: Some(l + 1), time: Some(t), detail });
        }
    }
    for l in 0..spec.regimes() {
        for (label, m) in [("S", spec.terminal_s[l].clone()), ("S_check", spec.s_check(l))] {
            let e = min_eigenvalue(&m);
            if e < -EIG_TOL {
                violations.push(Violation {
                    assumption: "A3".into(),
                    regime: Some(l + 1),
                    time: None,
                    detail: format!("{label} has eigenvalue {e:.3e} < 0"),
                });
            }
        }
    }
    AssumptionReport { passes: violations.is_empty(), delta1, delta2, violations }
}

/// Precomputed coefficient bundles on a uniform grid. Time-invariant
/// regimes share one bundle.
#[derive(Debug, Clone)]
pub struct BundleTable {
    per_regime: Vec<Vec<Arc<CoefficientBundle>>>,
}

impl BundleTable {
    pub fn new(spec: &ProblemSpec, times: &[f64]) -> Self {
        let per_regime = (0..spec.regimes())
            .map(|l| {
                if spec.is_time_invariant(l) {
                    vec![Arc::new(spec.bundle(l, 0.0))]
                } else {
                    times.iter().map(|&t| Arc::new(spec.bundle(l, t))).collect()
                }
            })
            .collect();
        BundleTable { per_regime }
    }

    pub fn get(&self, regime: usize, node: usize) -> &CoefficientBundle {
        let v = &self.per_regime[regime];
        if v.len() == 1 {
            &v[0]
        } else {
            &v[node]
        }
    }
}
