//! Continuous-time Markov chains: generator validation, path sampling and
//! the product construction used for two independent telegraph processes.
//!
//! Regimes are 0-based here. File formats shift to 1-based on export.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ChainError {
    #[error("generator must be a non-empty square matrix, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("negative off-diagonal rate {value} at ({row}, {col})")]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, expected 0")]
    RowSumNonzero { row: usize, sum: f64 },
    #[error("non-finite rate at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("initial regime {regime} outside 0..{regimes}")]
    InvalidInitialRegime { regime: usize, regimes: usize },
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("expected a 2-state telegraph generator [[-p, p], [p, -p]]")]
    NotTelegraph,
    #[error("invalid chain path: {0}")]
    InvalidPath(String),
}

/// Validated transition-rate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    rates: DMatrix<f64>,
}

impl Generator {
    pub fn new(rates: DMatrix<f64>) -> Result<Self, ChainError> {
        validate_generator(rates)
    }

    /// Build from rows, as stored in JSON.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ChainError> {
        let d = rows.len();
        for row in rows {
            if row.len() != d {
                return Err(ChainError::NonSquare { rows: d, cols: row.len() });
            }
        }
        validate_generator(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    /// Zero generator on `d` regimes: every regime is absorbing.
    pub fn zero(d: usize) -> Self {
        Generator { rates: DMatrix::zeros(d, d) }
    }

    pub fn regimes(&self) -> usize {
        self.rates.nrows()
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.rates[(from, to)]
    }

    /// Total exit rate `-pi^{ll}`.
    pub fn exit_rate(&self, regime: usize) -> f64 {
        -self.rates[(regime, regime)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rates
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rates.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

impl Serialize for Generator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Generator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Generator::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

pub fn validate_generator(rates: DMatrix<f64>) -> Result<Generator, ChainError> {
    let (rows, cols) = rates.shape();
    if rows == 0 || rows != cols {
        return Err(ChainError::NonSquare { rows, cols });
    }
    for i in 0..rows {
        for j in 0..cols {
            let v = rates[(i, j)];
            if !v.is_finite() {
                return Err(ChainError::NonFinite { row: i, col: j });
            }
            if i != j && v < 0.0 {
                return Err(ChainError::NegativeOffDiagonal { row: i, col: j, value: v });
            }
        }
        let sum: f64 = rates.row(i).iter().sum();
        if sum.abs() > ROW_SUM_TOL {
            return Err(ChainError::RowSumNonzero { row: i, sum });
        }
    }
    Ok(Generator { rates })
}

/// One realization of the chain on `[0, horizon]`, stored as jump events.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPath {
    initial_regime: usize,
    jump_times: Vec<f64>,
    jump_targets: Vec<usize>,
    horizon: f64,
}

impl ChainPath {
    pub fn new(
        initial_regime: usize,
        jump_times: Vec<f64>,
        jump_targets: Vec<usize>,
        horizon: f64,
    ) -> Result<Self, ChainError> {
        if jump_times.len() != jump_targets.len() {
            return Err(ChainError::InvalidPath("jump times and targets differ in length".into()));
        }
        let mut prev_t = 0.0;
        let mut prev_regime = initial_regime;
        for (&t, &to) in jump_times.iter().zip(&jump_targets) {
            if !(t > prev_t && t <= horizon) {
                return Err(ChainError::InvalidPath(format!("jump time {t} not increasing in (0, {horizon}]")));
            }
            if to == prev_regime {
                return Err(ChainError::InvalidPath(format!("self-jump to regime {to} at t={t}")));
            }
            prev_t = t;
            prev_regime = to;
        }
        Ok(ChainPath { initial_regime, jump_times, jump_targets, horizon })
    }

    /// A path that never leaves `regime`.
    pub fn constant(regime: usize, horizon: f64) -> Self {
        ChainPath { initial_regime: regime, jump_times: Vec::new(), jump_targets: Vec::new(), horizon }
    }

    pub fn initial_regime(&self) -> usize {
        self.initial_regime
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn jump_targets(&self) -> &[usize] {
        &self.jump_targets
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Regime in force at `t`, taking the post-jump value at a jump instant.
    pub fn regime_at(&self, t: f64) -> Result<usize, ChainError> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(ChainError::TimeOutOfRange { t, horizon: self.horizon });
        }
        Ok(self.regime_at_unchecked(t))
    }

    pub(crate) fn regime_at_unchecked(&self, t: f64) -> usize {
        let passed = self.jump_times.partition_point(|&s| s <= t);
        if passed == 0 {
            self.initial_regime
        } else {
            self.jump_targets[passed - 1]
        }
    }

    /// Regime at the horizon, i.e. `theta_T`.
    pub fn terminal_regime(&self) -> usize {
        self.jump_targets.last().copied().unwrap_or(self.initial_regime)
    }

    /// Holding intervals `(regime, start, end, ended_by_jump)`.
    pub fn sojourns(&self) -> Vec<(usize, f64, f64, bool)> {
        let mut out = Vec::with_capacity(self.jumps() + 1);
        let mut start = 0.0;
        let mut regime = self.initial_regime;
        for (&t, &to) in self.jump_times.iter().zip(&self.jump_targets) {
            out.push((regime, start, t, true));
            start = t;
            regime = to;
        }
        out.push((regime, start, self.horizon, false));
        out
    }

    /// CSV with columns `jump_time,new_regime` (1-based regimes).
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["jump_time", "new_regime"])?;
        for (&t, &to) in self.jump_times.iter().zip(&self.jump_targets) {
            wtr.write_record([t.to_string(), (to + 1).to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Sample a path with the stream for `seed` (path index 0).
pub fn sample_path(gen: &Generator, initial_regime: usize, horizon: f64, seed: u64) -> Result<ChainPath, ChainError> {
    let mut rng = rng::chain_stream(seed, 0);
    sample_path_with(gen, initial_regime, horizon, &mut rng)
}

/// Exponential holding times with rate `-pi^{ll}`, targets drawn in
/// proportion to the off-diagonal rates.
pub fn sample_path_with<R: Rng + ?Sized>(
    gen: &Generator,
    initial_regime: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<ChainPath, ChainError> {
    let d = gen.regimes();
    if initial_regime >= d {
        return Err(ChainError::InvalidInitialRegime { regime: initial_regime, regimes: d });
    }
    let mut times = Vec::new();
    let mut targets = Vec::new();
    let mut t = 0.0;
    let mut regime = initial_regime;
    loop {
        let q = gen.exit_rate(regime);
        if q <= 0.0 {
            break;
        }
        let hold = Exp::new(q).expect("positive exit rate").sample(rng);
        t += hold;
        if t > horizon {
            break;
        }
        let mut pick = rng.random::<f64>() * q;
        let mut next = None;
        for j in (0..d).filter(|&j| j != regime) {
            let rate = gen.rate(regime, j);
            if rate <= 0.0 {
                continue;
            }
            next = Some(j);
            if pick < rate {
                break;
            }
            pick -= rate;
        }
        let next = next.expect("positive exit rate has a target");
        // a zero-length hold would break strict monotonicity
        if times.last().is_some_and(|&last| t <= last) {
            continue;
        }
        times.push(t);
        targets.push(next);
        regime = next;
    }
    Ok(ChainPath { initial_regime, jump_times: times, jump_targets: targets, horizon })
}

fn telegraph_rate(gen: &Generator) -> Result<f64, ChainError> {
    if gen.regimes() != 2 {
        return Err(ChainError::NotTelegraph);
    }
    let p = gen.rate(0, 1);
    if (gen.rate(1, 0) - p).abs() > ROW_SUM_TOL {
        return Err(ChainError::NotTelegraph);
    }
    Ok(p)
}

/// Generator of `theta = h(theta_1, theta_2)` for two independent
/// telegraph chains, with `h(-1,-1)=1, h(-1,1)=2, h(1,-1)=3, h(1,1)=4`.
pub fn product_chain(first: &Generator, second: &Generator) -> Result<Generator, ChainError> {
    let p1 = telegraph_rate(first)?;
    let p2 = telegraph_rate(second)?;
    let mut m = DMatrix::zeros(4, 4);
    // state index = 2*s1 + s2 with s_i = 0 for -1 and 1 for +1
    for i in 0..4 {
        let (s1, s2) = (i / 2, i % 2);
        let flip_second = 2 * s1 + (1 - s2);
        let flip_first = 2 * (1 - s1) + s2;
        m[(i, flip_second)] = p2;
        m[(i, flip_first)] = p1;
        m[(i, i)] = -(p1 + p2);
    }
    validate_generator(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::chain_stream;

    fn example_generator() -> Generator {
        Generator::from_rows(&[vec![-0.015, 0.015], vec![0.035, -0.035]]).unwrap()
    }

    #[test]
    fn validates_example_generator() {
        let g = example_generator();
        assert_eq!(g.regimes(), 2);
        assert_eq!(g.exit_rate(1), 0.035);
    }

    #[test]
    fn one_regime_chain_is_valid() {
        assert!(Generator::from_rows(&[vec![0.0]]).is_ok());
    }

    #[test]
    fn rejects_bad_generators() {
        assert!(matches!(
            Generator::from_rows(&[vec![-1.0, 2.0], vec![1.0, -1.0]]),
            Err(ChainError::RowSumNonzero { row: 0, .. })
        ));
        assert!(matches!(
            Generator::from_rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]),
            Err(ChainError::NegativeOffDiagonal { row: 0, col: 1, .. })
        ));
        assert!(matches!(
            Generator::from_rows(&[vec![0.0, 0.0]]),
            Err(ChainError::NonSquare { .. })
        ));
        assert!(matches!(validate_generator(DMatrix::zeros(0, 0)), Err(ChainError::NonSquare { .. })));
    }

    #[test]
    fn zero_generator_never_jumps() {
        for seed in 0..20 {
            let p = sample_path(&Generator::zero(3), 2, 100.0, seed).unwrap();
            assert_eq!(p.jumps(), 0);
            assert_eq!(p.regime_at(50.0).unwrap(), 2);
        }
    }

    #[test]
    fn invalid_initial_regime() {
        assert_eq!(
            sample_path(&example_generator(), 2, 1.0, 0),
            Err(ChainError::InvalidInitialRegime { regime: 2, regimes: 2 })
        );
    }

    #[test]
    fn regime_at_is_cadlag() {
        let p = ChainPath::new(0, vec![3.0], vec![1], 10.0).unwrap();
        assert_eq!(p.regime_at(3.0).unwrap(), 1);
        assert_eq!(p.regime_at(2.999).unwrap(), 0);
        assert_eq!(p.regime_at(0.0).unwrap(), 0);
        assert_eq!(p.regime_at(10.0).unwrap(), 1);
        assert!(matches!(p.regime_at(10.5), Err(ChainError::TimeOutOfRange { .. })));
        assert!(matches!(p.regime_at(-0.1), Err(ChainError::TimeOutOfRange { .. })));
        let flat = ChainPath::constant(1, 5.0);
        assert_eq!(flat.regime_at(4.2).unwrap(), 1);
    }

    #[test]
    fn path_constructor_rejects_self_jumps() {
        assert!(ChainPath::new(0, vec![1.0], vec![0], 2.0).is_err());
        assert!(ChainPath::new(0, vec![1.0, 1.0], vec![1, 0], 2.0).is_err());
        assert!(ChainPath::new(0, vec![3.0], vec![1], 2.0).is_err());
    }

    #[test]
    fn exit_rate_matches_generator() {
        // rate estimator: jumps out of regime 0 per unit exposure time
        let g = example_generator();
        let mut jumps = 0.0;
        let mut exposure = 0.0;
        for i in 0..10_000 {
            let p = sample_path_with(&g, 0, 50.0, &mut chain_stream(11, i)).unwrap();
            for (regime, a, b, jumped) in p.sojourns() {
                if regime == 0 {
                    exposure += b - a;
                    if jumped {
                        jumps += 1.0;
                    }
                }
            }
        }
        let rate = jumps / exposure;
        let se = jumps.sqrt() / exposure;
        assert!((rate - 0.015).abs() < 3.0 * se, "rate {rate} se {se}");
    }

    #[test]
    fn holding_time_means_match() {
        let g = Generator::from_rows(&[
            vec![-1.0, 0.4, 0.6],
            vec![2.0, -2.5, 0.5],
            vec![0.0, 0.3, -0.3],
        ])
        .unwrap();
        let mut stats = [(0.0f64, 0.0f64); 3];
        for i in 0..10_000 {
            let p = sample_path_with(&g, i % 3, 20.0, &mut chain_stream(5, i)).unwrap();
            for (regime, a, b, jumped) in p.sojourns() {
                stats[regime].0 += b - a;
                if jumped {
                    stats[regime].1 += 1.0;
                }
            }
        }
        for (l, &(exposure, count)) in stats.iter().enumerate() {
            let mean = exposure / count;
            let se = mean / count.sqrt();
            let expected = 1.0 / g.exit_rate(l);
            assert!((mean - expected).abs() < 3.0 * se, "regime {l}: {mean} vs {expected}");
        }
    }

    #[test]
    fn product_chain_matches_printed_matrix() {
        let g1 = Generator::from_rows(&[vec![-2.5, 2.5], vec![2.5, -2.5]]).unwrap();
        let g2 = Generator::from_rows(&[vec![-0.5, 0.5], vec![0.5, -0.5]]).unwrap();
        let p = product_chain(&g1, &g2).unwrap();
        let expected = [
            [-3.0, 0.5, 2.5, 0.0],
            [0.5, -3.0, 0.0, 2.5],
            [2.5, 0.0, -3.0, 0.5],
            [0.0, 2.5, 0.5, -3.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(p.rate(i, j), expected[i][j]);
            }
            assert_eq!(p.matrix().row(i).iter().sum::<f64>(), 0.0);
        }
        let z = product_chain(&Generator::zero(2), &Generator::zero(2)).unwrap();
        assert_eq!(z.matrix(), &DMatrix::zeros(4, 4));
    }

    #[test]
    fn product_chain_rejects_non_telegraph() {
        let asym = Generator::from_rows(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap();
        assert_eq!(product_chain(&asym, &asym), Err(ChainError::NotTelegraph));
        assert_eq!(product_chain(&Generator::zero(3), &asym), Err(ChainError::NotTelegraph));
    }

    #[test]
    fn product_chain_forbids_double_flips() {
        let g1 = Generator::from_rows(&[vec![-2.5, 2.5], vec![2.5, -2.5]]).unwrap();
        let g2 = Generator::from_rows(&[vec![-0.5, 0.5], vec![0.5, -0.5]]).unwrap();
        let p = product_chain(&g1, &g2).unwrap();
        for i in 0..500 {
            let path = sample_path_with(&p, i % 4, 20.0, &mut chain_stream(3, i)).unwrap();
            let mut prev = path.initial_regime();
            for &to in path.jump_targets() {
                let pair = (prev.min(to), prev.max(to));
                assert!(pair != (0, 3) && pair != (1, 2), "forbidden jump {prev}->{to}");
                prev = to;
            }
        }
    }

    #[test]
    fn generator_json_round_trip() {
        let g = example_generator();
        let text = serde_json::to_string(&g).unwrap();
        assert_eq!(text, "[[-0.015,0.015],[0.035,-0.035]]");
        let back: Generator = serde_json::from_str(&text).unwrap();
        assert_eq!(back, g);
        assert!(serde_json::from_str::<Generator>("[[-1,2],[1,-1]]").is_err());
    }

    #[test]
    fn path_csv_export() {
        let p = ChainPath::new(0, vec![1.5, 4.0], vec![1, 0], 10.0).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "jump_time,new_regime\n1.5,2\n4,1\n");
    }

    proptest::proptest! {
        #[test]
        fn sampled_paths_are_well_formed(seed in 0u64..10_000, l0 in 0usize..4, p1 in 0.0f64..5.0, p2 in 0.0f64..5.0) {
            let g1 = Generator::from_rows(&[vec![-p1, p1], vec![p1, -p1]]).unwrap();
            let g2 = Generator::from_rows(&[vec![-p2, p2], vec![p2, -p2]]).unwrap();
            let g = product_chain(&g1, &g2).unwrap();
            let path = sample_path(&g, l0, 7.0, seed).unwrap();
            let rebuilt = ChainPath::new(l0, path.jump_times().to_vec(), path.jump_targets().to_vec(), 7.0);
            proptest::prop_assert!(rebuilt.is_ok());
            proptest::prop_assert!(path.jump_targets().iter().all(|&r| r < 4));
        }
    }
}
