//! Adaptive contrastive lookahead: a count-based model of how predictable
//! the next action is from the current one, and the sampler that turns it
//! into a per-item horizon `k`.

use rand::Rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AdaptiveKError {
    #[error("action window is empty")]
    EmptyWindow,
    #[error("action {action} out of range for {n_actions} actions")]
    ActionOutOfRange { action: usize, n_actions: usize },
    #[error("continue probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("expected {expected} entries, got {got}")]
    BadLength { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, AdaptiveKError>;

pub const DEFAULT_SMOOTHING: f64 = 1.0;
pub const DEFAULT_DECAY: f64 = 0.999;
pub const DEFAULT_DECAY_EVERY: u64 = 1000;
pub const DEFAULT_HORIZON: usize = 5;

/// Smoothed counts of consecutive action pairs `(a_i, a_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionOddsModel {
    n_actions: usize,
    joint: Vec<f64>,
    /// Counts of the second action of each pair.
    marginal: Vec<f64>,
    pub smoothing: f64,
    pub decay: f64,
    pub decay_every: u64,
    updates: u64,
}

impl ActionOddsModel {
    pub fn new(n_actions: usize) -> Self {
        Self {
            n_actions,
            joint: vec![0.0; n_actions * n_actions],
            marginal: vec![0.0; n_actions],
            smoothing: DEFAULT_SMOOTHING,
            decay: DEFAULT_DECAY,
            decay_every: DEFAULT_DECAY_EVERY,
            updates: 0,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn joint(&self, i: usize, j: usize) -> f64 {
        self.joint[i * self.n_actions + j]
    }

    pub fn marginal(&self, j: usize) -> f64 {
        self.marginal[j]
    }

    pub fn total(&self) -> f64 {
        self.marginal.iter().sum()
    }

    /// Number of non-empty updates applied so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Adds within-episode pairs. Every `decay_every` non-empty updates all
    /// counts are multiplied by `decay`. An empty slice leaves the model
    /// untouched.
    pub fn update(&mut self, pairs: &[(usize, usize)]) -> Result<()> {
        if pairs.is_empty() {
            return Ok(());
        }
        for &(i, j) in pairs {
            for a in [i, j] {
                if a >= self.n_actions {
                    return Err(AdaptiveKError::ActionOutOfRange {
                        action: a,
                        n_actions: self.n_actions,
                    });
                }
            }
        }
        for &(i, j) in pairs {
            self.joint[i * self.n_actions + j] += 1.0;
            self.marginal[j] += 1.0;
        }
        self.updates += 1;
        if self.decay_every > 0 && self.updates % self.decay_every == 0 {
            self.joint.iter_mut().for_each(|c| *c *= self.decay);
            self.marginal.iter_mut().for_each(|c| *c *= self.decay);
        }
        Ok(())
    }

    /// `log P(a_j | a_i) - log P(a_j)` from Laplace-smoothed counts.
    pub fn log_odds(&self, i: usize, j: usize) -> f64 {
        let n = self.n_actions as f64;
        let lam = self.smoothing;
        let row: f64 = self.joint[i * self.n_actions..(i + 1) * self.n_actions].iter().sum();
        let cond = (self.joint(i, j) + lam) / (row + lam * n);
        let marg = (self.marginal[j] + lam) / (self.total() + lam * n);
        cond.ln() - marg.ln()
    }

    pub fn log_odds_matrix(&self) -> Vec<f64> {
        let n = self.n_actions;
        (0..n * n).map(|idx| self.log_odds(idx / n, idx % n)).collect()
    }
}

/// Row-stochastic matrix of continue probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinueMatrix {
    n_actions: usize,
    entries: Vec<f64>,
}

impl ContinueMatrix {
    /// Arbitrary continue probabilities in `[0, 1]`; rows need not sum to 1.
    pub fn from_probabilities(n_actions: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n_actions * n_actions {
            return Err(AdaptiveKError::BadLength {
                expected: n_actions * n_actions,
                got: entries.len(),
            });
        }
        if let Some(&p) = entries.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(AdaptiveKError::BadProbability(p));
        }
        Ok(Self { n_actions, entries })
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n_actions + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// Row `i` is the softmax of the log-odds row `q(a_i, .)`.
pub fn continue_matrix(model: &ActionOddsModel) -> ContinueMatrix {
    let n = model.n_actions();
    let q = model.log_odds_matrix();
    let mut entries = Vec::with_capacity(n * n);
    for row in q.chunks(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        entries.extend(exps.iter().map(|e| e / z));
    }
    ContinueMatrix {
        n_actions: n,
        entries,
    }
}

/// Continue probabilities along a window: entry `i - 1` is
/// `A[window[i - 1], window[i]]`.
pub fn window_continue_probs(a: &ContinueMatrix, window: &[usize]) -> Result<Vec<f64>> {
    for &x in window {
        if x >= a.n_actions {
            return Err(AdaptiveKError::ActionOutOfRange {
                action: x,
                n_actions: a.n_actions,
            });
        }
    }
    Ok(window.windows(2).map(|p| a.get(p[0], p[1])).collect())
}

/// Draws a lookahead in `1..=H_eff`, `H_eff = min(h, window.len())`: starting
/// at `k = 1`, keep extending while a Bernoulli with the continue
/// probability of the next action pair succeeds. The draw at `k = H_eff`
/// cannot change the outcome and is skipped.
pub fn sample_k<R: Rng + ?Sized>(a: &ContinueMatrix, window: &[usize], h: usize, rng: &mut R) -> Result<usize> {
    if window.is_empty() {
        return Err(AdaptiveKError::EmptyWindow);
    }
    let h_eff = h.min(window.len()).max(1);
    let probs = window_continue_probs(a, &window[..h_eff])?;
    let mut k = 1;
    for p in probs {
        if !rng.random_bool(p) {
            break;
        }
        k += 1;
    }
    Ok(k)
}

/// Bounds `1 / max q <= E[k] <= 1 / min q` on the mean of a
/// non-homogeneous geometric variable with break probabilities
/// `q_i = 1 - continue_i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NhgBounds {
    pub lower: f64,
    pub upper: f64,
    /// Set when some break probability is 0 (upper bound infinite) or all
    /// are 1 (the variable is constant).
    pub degenerate: bool,
}

pub fn nhg_expectation_bounds(continue_probs: &[f64]) -> Result<NhgBounds> {
    if continue_probs.is_empty() {
        return Err(AdaptiveKError::EmptyWindow);
    }
    if let Some(&p) = continue_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(AdaptiveKError::BadProbability(p));
    }
    let breaks: Vec<f64> = continue_probs.iter().map(|c| 1.0 - c).collect();
    let max_q = breaks.iter().cloned().fold(0.0, f64::max);
    let min_q = breaks.iter().cloned().fold(1.0, f64::min);
    let lower = if max_q > 0.0 { 1.0 / max_q } else { f64::INFINITY };
    let upper = if min_q > 0.0 { 1.0 / min_q } else { f64::INFINITY };
    Ok(NhgBounds {
        lower,
        upper,
        degenerate: min_q == 0.0 || min_q == 1.0,
    })
}
