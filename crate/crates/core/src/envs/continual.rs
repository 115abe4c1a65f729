use serde::{Deserialize, Serialize};

use super::{EnvError, Environment, Observation, Result, StepResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskBoundary {
    /// First episode of the segment (0-based).
    pub episode: usize,
    pub task: usize,
}

/// Cycles the wrapped environment's task every `every` episodes. Episodes
/// are counted at each `reset`.
pub struct ContinualSchedule<E> {
    inner: E,
    every: usize,
    episodes: usize,
    boundaries: Vec<TaskBoundary>,
}

impl<E: Environment> ContinualSchedule<E> {
    pub fn new(inner: E, every: usize) -> Result<Self> {
        if every == 0 {
            return Err(EnvError::Config("task_switch_every must be positive".into()));
        }
        if inner.n_tasks() < 2 {
            return Err(EnvError::NoTasks);
        }
        Ok(Self {
            inner,
            every,
            episodes: 0,
            boundaries: Vec::new(),
        })
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn episodes_started(&self) -> usize {
        self.episodes
    }

    pub fn boundaries(&self) -> &[TaskBoundary] {
        &self.boundaries
    }

    pub fn task_for_episode(&self, episode: usize) -> usize {
        (episode / self.every) % self.inner.n_tasks()
    }
}

impl<E: Environment> Environment for ContinualSchedule<E> {
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    fn observation_shape(&self) -> [usize; 3] {
        self.inner.observation_shape()
    }

    fn reset(&mut self) -> Observation {
        let episode = self.episodes;
        if episode % self.every == 0 {
            let task = self.task_for_episode(episode);
            self.inner.set_task(task).expect("inner environment accepts tasks");
            self.boundaries.push(TaskBoundary { episode, task });
        }
        self.episodes += 1;
        self.inner.reset()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        self.inner.step(action)
    }

    fn task_id(&self) -> usize {
        self.inner.task_id()
    }

    fn set_task(&mut self, task: usize) -> Result<()> {
        self.inner.set_task(task)
    }

    fn n_tasks(&self) -> usize {
        self.inner.n_tasks()
    }
}
