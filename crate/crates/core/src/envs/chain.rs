use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_action, truncated_info, EnvError, Environment, Observation, Result, StepResult};

/// Biased random walk on `0..k` observed as a one-hot vector (`[k, 1, 1]`).
/// The single action is ignored.
#[derive(Clone, Debug)]
pub struct ChainEnv {
    k: usize,
    alpha: f64,
    state: usize,
    steps: usize,
    episode_len: Option<usize>,
    done: bool,
    rng: ChaCha8Rng,
}

impl ChainEnv {
    /// `alpha` may be 0 or 1 here (degenerate walks), unlike the exact
    /// analysis which needs an ergodic chain.
    pub fn new(k: usize, alpha: f64, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(EnvError::Config(format!("chain needs at least 2 states, got {k}")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(EnvError::Config(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(Self {
            k,
            alpha,
            state: 0,
            steps: 0,
            episode_len: None,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Ends each episode (as a truncation) after `len` steps.
    pub fn with_episode_len(mut self, len: usize) -> Self {
        self.episode_len = Some(len);
        self
    }

    pub fn state(&self) -> usize {
        self.state
    }

    /// Places the walker at `state` without touching the RNG.
    pub fn set_state(&mut self, state: usize) {
        assert!(state < self.k);
        self.state = state;
    }

    fn observe(&self) -> Observation {
        let mut o = Observation::zeros(self.k, 1, 1);
        o.values[self.state] = 1.0;
        o
    }
}

impl Environment for ChainEnv {
    fn n_actions(&self) -> usize {
        1
    }

    fn observation_shape(&self) -> [usize; 3] {
        [self.k, 1, 1]
    }

    /// Starts from a uniformly drawn state.
    fn reset(&mut self) -> Observation {
        self.state = self.rng.random_range(0..self.k);
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        check_action(action, 1)?;
        if self.done {
            return Err(EnvError::NeedsReset);
        }
        let up = self.rng.random_bool(self.alpha);
        self.state = if up {
            (self.state + 1).min(self.k - 1)
        } else {
            self.state.saturating_sub(1)
        };
        self.steps += 1;
        let truncated = self.episode_len.is_some_and(|n| self.steps >= n);
        self.done = truncated;
        Ok(StepResult {
            observation: self.observe(),
            reward: 0.0,
            terminal: truncated,
            info: truncated_info(truncated),
        })
    }
}
