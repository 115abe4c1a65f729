use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ising::{IsingLattice, Neighborhood};
use super::pacman::palette;
use super::{Environment, Observation, Result, StepResult};

/// Paints an Ising process over the wall cells of an RGB environment: wall
/// cells whose spin is `+1` are drawn in the noise color. The process is
/// redrawn at random on every reset and advances one synchronous sweep per
/// step. It has its own random stream, so the wrapped game is unaffected.
pub struct IsingWallsOverlay<E> {
    inner: E,
    walls: Vec<bool>,
    lattice: IsingLattice,
    beta: f64,
    enabled: bool,
    rng: ChaCha8Rng,
}

/// Stream id of the overlay generator.
const OVERLAY_STREAM: u64 = 7;

impl<E: Environment> IsingWallsOverlay<E> {
    pub fn new(inner: E, walls: Vec<bool>, height: usize, width: usize, beta: f64, seed: u64) -> Self {
        assert_eq!(walls.len(), height * width, "wall mask size");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(OVERLAY_STREAM);
        Self {
            inner,
            walls,
            lattice: IsingLattice::new(height, width, vec![-1; height * width]),
            beta,
            enabled: true,
            rng,
        }
    }

    /// A disabled overlay passes everything through unchanged.
    pub fn with_enabled(mut self, enabled: bool) -> Self {
        self.enabled = enabled;
        self
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn lattice(&self) -> &IsingLattice {
        &self.lattice
    }

    fn reset_lattice(&mut self) {
        let (h, w) = (self.lattice.height(), self.lattice.width());
        let mut fresh = IsingLattice::random(h, w, &mut self.rng);
        for (s, &wall) in fresh.spins_mut().iter_mut().zip(&self.walls) {
            if !wall {
                *s = -1;
            }
        }
        self.lattice = fresh;
    }

    fn paint(&self, obs: &mut Observation) {
        let cells = obs.height * obs.width;
        if obs.channels != 3 || cells != self.walls.len() {
            return;
        }
        for (i, &s) in self.lattice.spins().iter().enumerate() {
            if self.walls[i] && s > 0 {
                for c in 0..3 {
                    obs.values[c * cells + i] = palette::WALL_NOISE[c] as f64 / 255.0;
                }
            }
        }
    }
}

impl<E: Environment> Environment for IsingWallsOverlay<E> {
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    fn observation_shape(&self) -> [usize; 3] {
        self.inner.observation_shape()
    }

    fn reset(&mut self) -> Observation {
        let mut obs = self.inner.reset();
        if self.enabled {
            self.reset_lattice();
            self.paint(&mut obs);
        }
        obs
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        let mut out = self.inner.step(action)?;
        if self.enabled {
            self.lattice
                .heat_bath_step(&self.walls, self.beta, Neighborhood::VonNeumann4, &mut self.rng);
            self.paint(&mut out.observation);
        }
        Ok(out)
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
