//! Stochastically increasing shrinkage (SIS) prior on concentration
//! parameters.
//!
//! A finite chain of shrinkage states runs down each branch of the partition
//! tree. State `j` (1-based) constrains the concentration parameter to an
//! interval `[c_{j-1}, c_j)`, with successive intervals stochastically
//! ordered; the last state pins the concentration at infinity (complete
//! shrinkage, zero Beta variance). Transitions only ever move towards more
//! shrinkage, through an upper-triangular exponential-kernel matrix.

use serde::{Deserialize, Serialize};

use crate::error::{HaptError, Result};

/// Support of the conditional prior on a concentration parameter given one
/// shrinkage state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StateSupport {
    /// Log-uniform over `[lo, hi)`.
    Interval { lo: f64, hi: f64 },
    /// Degenerate point mass at a finite value. Used by closed-form checks
    /// and calibration runs; not part of the default prior.
    Point(f64),
    /// Point mass at infinity: the complete-shrinkage state.
    Infinite,
}

impl StateSupport {
    fn validate(&self) -> Result<()> {
        match *self {
            StateSupport::Interval { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi) {
                    Err(HaptError::invalid(format!("bad support interval [{lo}, {hi})")))
                } else {
                    Ok(())
                }
            }
            StateSupport::Point(v) => {
                if !(v.is_finite() && v > 0.0) {
                    Err(HaptError::invalid(format!("bad point support {v}")))
                } else {
                    Ok(())
                }
            }
            StateSupport::Infinite => Ok(()),
        }
    }

    fn lower(&self) -> f64 {
        match *self {
            StateSupport::Interval { lo, .. } => lo,
            StateSupport::Point(v) => v,
            StateSupport::Infinite => f64::INFINITY,
        }
    }

    fn upper(&self) -> f64 {
        match *self {
            StateSupport::Interval { hi, .. } => hi,
            StateSupport::Point(v) => v,
            StateSupport::Infinite => f64::INFINITY,
        }
    }
}

/// Upper-triangular row-stochastic transition matrix over shrinkage states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    rows: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    /// Exponential-kernel transitions: from state `i`, the chance of moving
    /// to state `j >= i` is proportional to `exp(beta * (j - i))`
    /// (`build_transition`). States are never allowed to decrease, and the
    /// final row is absorbing.
    pub fn exponential(state_count: usize, beta: f64) -> Result<Self> {
        if state_count < 2 {
            return Err(HaptError::invalid(format!(
                "need at least two shrinkage states, got {state_count}"
            )));
        }
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(HaptError::invalid(format!("beta must be finite and >= 0, got {beta}")));
        }
        Ok(Self::exponential_unchecked(state_count, beta))
    }

    pub(crate) fn exponential_unchecked(state_count: usize, beta: f64) -> Self {
        let mut rows = Vec::with_capacity(state_count);
        for i in 0..state_count {
            let mut row = vec![0.0; state_count];
            // Normalize in a numerically tame way by shifting the exponent.
            let top = beta * (state_count - 1 - i) as f64;
            let norm: f64 = (0..state_count - i).map(|m| (beta * m as f64 - top).exp()).sum();
            for (j, slot) in row.iter_mut().enumerate().skip(i) {
                *slot = ((j - i) as f64 * beta - top).exp() / norm;
            }
            rows.push(row);
        }
        TransitionMatrix { rows }
    }

    pub fn state_count(&self) -> usize {
        self.rows.len()
    }

    /// `P(S(child) = to | S(parent) = from)`, 0-based indices.
    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.rows[from][to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.rows[from]
    }

    pub fn log_rows(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect()
    }
}

/// Shrinkage-state configuration for one concentration parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SisConfig {
    supports: Vec<StateSupport>,
    beta: f64,
    root_dist: Vec<f64>,
}

impl SisConfig {
    /// Builds a config from concentration cutpoints `c_0 < ... < c_{I-1}`:
    /// state `j` is log-uniform on `[c_{j-1}, c_j)` for `j < I`, and state `I`
    /// is the complete-shrinkage point mass at infinity.
    pub fn from_boundaries(boundaries: &[f64], beta: f64, root_dist: Vec<f64>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(HaptError::invalid("need at least two boundary cutpoints".into()));
        }
        let mut supports = Vec::with_capacity(boundaries.len());
        for w in boundaries.windows(2) {
            supports.push(if w[0] == w[1] {
                StateSupport::Point(w[0])
            } else {
                StateSupport::Interval { lo: w[0], hi: w[1] }
            });
        }
        supports.push(StateSupport::Infinite);
        Self::from_supports(supports, beta, root_dist)
    }

    /// General constructor over explicit per-state supports.
    pub fn from_supports(
        supports: Vec<StateSupport>,
        beta: f64,
        root_dist: Vec<f64>,
    ) -> Result<Self> {
        if supports.is_empty() {
            return Err(HaptError::invalid("need at least one state".into()));
        }
        for s in &supports {
            s.validate()?;
        }
        // Stochastic ordering: supports must not overlap and must increase.
        for w in supports.windows(2) {
            if w[0].upper() > w[1].lower() {
                return Err(HaptError::invalid(
                    "state supports must be disjoint and increasing".into(),
                ));
            }
        }
        if supports[..supports.len() - 1].iter().any(|s| matches!(s, StateSupport::Infinite)) {
            return Err(HaptError::invalid("only the last state may sit at infinity".into()));
        }
        if root_dist.len() != supports.len() {
            return Err(HaptError::invalid(format!(
                "root distribution has {} entries for {} states",
                root_dist.len(),
                supports.len()
            )));
        }
        if root_dist.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(HaptError::invalid("root distribution entries must be >= 0".into()));
        }
        let total: f64 = root_dist.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(HaptError::invalid(format!("root distribution sums to {total}, not 1")));
        }
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(HaptError::invalid(format!("beta must be finite and >= 0, got {beta}")));
        }
        Ok(SisConfig { supports, beta, root_dist })
    }

    /// Default prior: geometric boundaries `1, 4, 16, ...`, `beta = 1`, and a
    /// uniform root distribution.
    pub fn default_config(state_count: usize) -> Result<Self> {
        if state_count < 2 {
            return Err(HaptError::invalid(format!(
                "need at least two shrinkage states, got {state_count}"
            )));
        }
        let boundaries: Vec<f64> = (0..state_count).map(|j| 4f64.powi(j as i32)).collect();
        let root = vec![1.0 / state_count as f64; state_count];
        Self::from_boundaries(&boundaries, 1.0, root)
    }

    /// Degenerate one-state config: concentration fixed at `value`.
    ///
    /// Gives up the absorbing state, so it is only suitable for closed-form
    /// cross-checks, never as a modeling prior.
    pub fn single_point(value: f64) -> Result<Self> {
        Self::from_supports(vec![StateSupport::Point(value)], 0.0, vec![1.0])
    }

    /// Degenerate one-state config pinned at complete shrinkage.
    pub fn fully_shrunk() -> Self {
        SisConfig { supports: vec![StateSupport::Infinite], beta: 0.0, root_dist: vec![1.0] }
    }

    pub fn state_count(&self) -> usize {
        self.supports.len()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn root_dist(&self) -> &[f64] {
        &self.root_dist
    }

    /// Support of state `s` (1-based, matching the chain's state labels).
    pub fn support(&self, state: usize) -> Result<StateSupport> {
        if state == 0 || state > self.supports.len() {
            return Err(HaptError::invalid(format!("state {state} out of range")));
        }
        Ok(self.supports[state - 1])
    }

    /// Replaces the root distribution, e.g. to pin the root state.
    pub fn with_root_dist(mut self, root_dist: Vec<f64>) -> Result<Self> {
        Self::from_supports(std::mem::take(&mut self.supports), self.beta, root_dist)
    }

    /// Conditional prior density of the concentration given a finite-interval
    /// state: uniform in `log(value)` over the state's interval.
    pub fn state_prior_density(&self, state: usize, value: f64) -> Result<f64> {
        if value <= 0.0 || !value.is_finite() {
            return Err(HaptError::invalid(format!("concentration must be positive, got {value}")));
        }
        match self.support(state)? {
            StateSupport::Interval { lo, hi } => {
                if value >= lo && value < hi {
                    Ok(1.0 / ((hi / lo).ln() * value))
                } else {
                    Ok(0.0)
                }
            }
            StateSupport::Point(_) | StateSupport::Infinite => Err(HaptError::invalid(format!(
                "state {state} is a point mass; no density to evaluate"
            ))),
        }
    }

    /// The transition matrix implied by this config.
    pub fn transition(&self) -> TransitionMatrix {
        if self.supports.len() == 1 {
            TransitionMatrix { rows: vec![vec![1.0]] }
        } else {
            TransitionMatrix::exponential_unchecked(self.supports.len(), self.beta)
        }
    }

    /// Whether state `s` (1-based) is the complete-shrinkage state.
    pub fn is_absorbing(&self, state: usize) -> bool {
        matches!(self.supports[state - 1], StateSupport::Infinite)
    }

    /// Simulates the state chain down `depth` levels from the root
    /// distribution; returns the level at which it hit complete shrinkage,
    /// if it did.
    pub fn simulate_chain_absorption<R: rand::Rng>(
        &self,
        depth: u32,
        rng: &mut R,
    ) -> Option<u32> {
        let gamma = self.transition();
        let mut state = sample_index(&self.root_dist, rng);
        for level in 0..=depth {
            if self.is_absorbing(state + 1) {
                return Some(level);
            }
            if level == depth {
                break;
            }
            state = sample_index(gamma.row(state), rng);
        }
        None
    }
}

fn sample_index<R: rand::Rng>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (j, w) in weights.iter().enumerate() {
        cum += w;
        if u < cum {
            return j;
        }
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exponential_matrix_small_cases() {
        let m = TransitionMatrix::exponential(2, 0.0).unwrap();
        assert_eq!(m.row(0), &[0.5, 0.5]);
        assert_eq!(m.row(1), &[0.0, 1.0]);

        let m = TransitionMatrix::exponential(3, 0.0).unwrap();
        for p in m.row(0) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let m = TransitionMatrix::exponential(3, 1.0).unwrap();
        let norm = 1.0 + 1f64.exp() + 2f64.exp();
        assert!((m.prob(0, 0) - 1.0 / norm).abs() < 1e-14);
        assert!((m.prob(0, 1) - 1f64.exp() / norm).abs() < 1e-14);
        assert!((m.prob(0, 2) - 2f64.exp() / norm).abs() < 1e-14);
        assert!((m.prob(0, 0) - 0.0900).abs() < 5e-5);
        assert!((m.prob(0, 1) - 0.2447).abs() < 5e-5);
        assert!((m.prob(0, 2) - 0.6652).abs() < 5e-5);
    }

    #[test]
    fn rows_are_stochastic_and_triangular() {
        for &(i, beta) in &[(2usize, 0.0), (4, 1.0), (6, 2.5), (3, 10.0)] {
            let m = TransitionMatrix::exponential(i, beta).unwrap();
            for from in 0..i {
                let sum: f64 = m.row(from).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "row {from} sums to {sum}");
                for to in 0..from {
                    assert_eq!(m.prob(from, to), 0.0);
                }
                assert!(m.prob(from, i - 1) > 0.0);
            }
            assert_eq!(m.row(i - 1)[i - 1], 1.0);
        }
        assert!(TransitionMatrix::exponential(1, 1.0).is_err());
    }

    #[test]
    fn default_config_shape() {
        let cfg = SisConfig::default_config(4).unwrap();
        assert_eq!(cfg.state_count(), 4);
        assert_eq!(cfg.beta(), 1.0);
        assert_eq!(
            cfg.support(1).unwrap(),
            StateSupport::Interval { lo: 1.0, hi: 4.0 }
        );
        assert_eq!(
            cfg.support(3).unwrap(),
            StateSupport::Interval { lo: 16.0, hi: 64.0 }
        );
        assert_eq!(cfg.support(4).unwrap(), StateSupport::Infinite);
        assert_eq!(cfg.root_dist(), &[0.25; 4]);
        // Minimal legal config still carries the complete-shrinkage state.
        let minimal = SisConfig::default_config(2).unwrap();
        assert_eq!(minimal.state_count(), 2);
        assert!(minimal.is_absorbing(2));
        assert!(SisConfig::default_config(1).is_err());
    }

    #[test]
    fn log_uniform_density() {
        let cfg = SisConfig::from_boundaries(
            &[1.0, std::f64::consts::E],
            1.0,
            vec![0.5, 0.5],
        )
        .unwrap();
        let v = (0.5f64).exp();
        let d = cfg.state_prior_density(1, v).unwrap();
        assert!((d - (-0.5f64).exp()).abs() < 1e-14);
        assert_eq!(cfg.state_prior_density(1, 0.5).unwrap(), 0.0);
        assert!(cfg.state_prior_density(2, 1.0).is_err());

        // Numerical normalization over the interval.
        let n = 200_000;
        let (lo, hi) = (1.0, std::f64::consts::E);
        let h = (hi - lo) / n as f64;
        let integral: f64 = (0..n)
            .map(|j| cfg.state_prior_density(1, lo + (j as f64 + 0.5) * h).unwrap() * h)
            .sum();
        assert!((integral - 1.0).abs() < 1e-6, "integral {integral}");
    }

    #[test]
    fn ordering_is_enforced() {
        assert!(SisConfig::from_boundaries(&[4.0, 1.0], 1.0, vec![0.5, 0.5]).is_err());
        assert!(SisConfig::from_boundaries(&[1.0, 4.0], 1.0, vec![0.7, 0.7]).is_err());
    }

    #[test]
    fn chains_absorb_quickly() {
        let cfg = SisConfig::default_config(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 20_000;
        let absorbed = (0..trials)
            .filter(|_| cfg.simulate_chain_absorption(30, &mut rng).is_some())
            .count();
        assert_eq!(absorbed, trials);
    }

    #[test]
    fn point_boundaries_become_point_masses() {
        let cfg = SisConfig::from_boundaries(&[2.0, 2.0], 0.5, vec![1.0, 0.0]).unwrap();
        assert_eq!(cfg.support(1).unwrap(), StateSupport::Point(2.0));
    }
}
