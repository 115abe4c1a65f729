//! Synthetic environments behind one stepping interface: a biased random
//! walk, an Ising patch embedded in noise, and a gridworld PacMan with
//! continual-task and Ising-wall wrappers.

mod augment;
mod chain;
mod continual;
mod ising;
pub mod pacman;
mod trace;
mod walls;

use std::collections::BTreeMap;

pub use augment::{augment, augment_seeded};
pub use chain::ChainEnv;
pub use continual::{ContinualSchedule, TaskBoundary};
pub use ising::{IsingConfig, IsingEnv, IsingLattice, Neighborhood};
pub use pacman::{LethalGhost, PacManConfig, PacManEnv, PacManMap};
pub use trace::{read_trace, record_episode, write_trace, TraceRecord};
pub use walls::IsingWallsOverlay;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("invalid map: {0}")]
    Map(String),
    #[error("action {action} out of range for {n_actions} actions")]
    BadAction { action: usize, n_actions: usize },
    #[error("step called on a finished episode; reset first")]
    NeedsReset,
    #[error("this environment has no task schedule")]
    NoTasks,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("trace format: {0}")]
    Trace(String),
}

pub type Result<T> = std::result::Result<T, EnvError>;

/// Channel-first observation: value `(c, y, x)` lives at
/// `values[(c * height + y) * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Observation {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), channels * height * width, "observation size");
        Self {
            channels,
            height,
            width,
            values,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.values[(c * self.height + y) * self.width + x] = v;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    /// The episode is over; `reset` must be called before stepping again.
    pub terminal: bool,
    /// Diagnostics. `truncated = 1` marks an episode cut by a step limit
    /// rather than a true terminal state.
    pub info: BTreeMap<String, f64>,
}

impl StepResult {
    pub fn truncated(&self) -> bool {
        self.info.get("truncated").is_some_and(|&v| v != 0.0)
    }
}

pub trait Environment: Send {
    fn n_actions(&self) -> usize;
    /// `[channels, height, width]` of every observation.
    fn observation_shape(&self) -> [usize; 3];
    fn reset(&mut self) -> Observation;
    fn step(&mut self, action: usize) -> Result<StepResult>;
    /// Current task index for scheduled environments.
    fn task_id(&self) -> usize {
        0
    }
    fn set_task(&mut self, _task: usize) -> Result<()> {
        Err(EnvError::NoTasks)
    }
    /// Number of distinct tasks a schedule can cycle through.
    fn n_tasks(&self) -> usize {
        1
    }
}

impl<E: Environment + ?Sized> Environment for Box<E> {
    fn n_actions(&self) -> usize {
        (**self).n_actions()
    }
    fn observation_shape(&self) -> [usize; 3] {
        (**self).observation_shape()
    }
    fn reset(&mut self) -> Observation {
        (**self).reset()
    }
    fn step(&mut self, action: usize) -> Result<StepResult> {
        (**self).step(action)
    }
    fn task_id(&self) -> usize {
        (**self).task_id()
    }
    fn set_task(&mut self, task: usize) -> Result<()> {
        (**self).set_task(task)
    }
    fn n_tasks(&self) -> usize {
        (**self).n_tasks()
    }
}

pub(crate) fn check_action(action: usize, n_actions: usize) -> Result<()> {
    if action >= n_actions {
        return Err(EnvError::BadAction { action, n_actions });
    }
    Ok(())
}

pub(crate) fn truncated_info(truncated: bool) -> BTreeMap<String, f64> {
    let mut info = BTreeMap::new();
    if truncated {
        info.insert("truncated".to_string(), 1.0);
    }
    info
}
