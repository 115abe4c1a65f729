use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_action, truncated_info, EnvError, Environment, Observation, Result, StepResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neighborhood {
    /// Up, down, left, right.
    VonNeumann4,
    /// The four diagonal cells.
    Diagonal4,
}

impl Neighborhood {
    pub fn offsets(self) -> [(isize, isize); 4] {
        match self {
            Neighborhood::VonNeumann4 => [(-1, 0), (1, 0), (0, -1), (0, 1)],
            Neighborhood::Diagonal4 => [(-1, -1), (-1, 1), (1, -1), (1, 1)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IsingConfig {
    pub lattice_side: usize,
    pub patch_side: usize,
    pub inv_temperature_beta: f64,
    /// Inclusive range for both coordinates of the patch center.
    pub patch_center_range: [usize; 2],
    pub neighborhood: Neighborhood,
    /// Steps per episode; 0 means episodes never end on their own.
    pub episode_len: usize,
}

impl Default for IsingConfig {
    fn default() -> Self {
        Self {
            lattice_side: 84,
            patch_side: 42,
            inv_temperature_beta: 2.5,
            patch_center_range: [21, 63],
            neighborhood: Neighborhood::VonNeumann4,
            episode_len: 32,
        }
    }
}

impl IsingConfig {
    /// Cells before the center along each axis; `patch_side - before - 1`
    /// come after it.
    pub fn before_center(&self) -> usize {
        self.patch_side / 2
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.patch_center_range;
        if self.patch_side == 0 || self.patch_side > self.lattice_side {
            return Err(EnvError::Config(format!(
                "patch_side {} must lie in 1..={}",
                self.patch_side, self.lattice_side
            )));
        }
        if lo > hi {
            return Err(EnvError::Config(format!("patch_center_range [{lo}, {hi}] is empty")));
        }
        let before = self.before_center();
        let after = self.patch_side - before - 1;
        if lo < before || hi + after >= self.lattice_side {
            return Err(EnvError::Config(format!(
                "a {0}x{0} patch centered in [{lo}, {hi}] leaves the {1}x{1} lattice",
                self.patch_side, self.lattice_side
            )));
        }
        if !self.inv_temperature_beta.is_finite() || self.inv_temperature_beta < 0.0 {
            return Err(EnvError::Config(format!(
                "inv_temperature_beta must be finite and nonnegative, got {}",
                self.inv_temperature_beta
            )));
        }
        Ok(())
    }
}

/// Rectangular `±1` lattice with synchronous heat-bath updates on a subset
/// of its cells.
#[derive(Clone, Debug, PartialEq)]
pub struct IsingLattice {
    height: usize,
    width: usize,
    spins: Vec<i8>,
}

impl IsingLattice {
    pub fn new(height: usize, width: usize, spins: Vec<i8>) -> Self {
        assert_eq!(spins.len(), height * width);
        Self { height, width, spins }
    }

    pub fn random<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Self {
        let spins = (0..height * width).map(|_| fair_spin(rng)).collect();
        Self { height, width, spins }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    pub(crate) fn spins_mut(&mut self) -> &mut [i8] {
        &mut self.spins
    }

    pub fn get(&self, y: usize, x: usize) -> i8 {
        self.spins[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, s: i8) {
        self.spins[y * self.width + x] = s;
    }

    /// One synchronous update: every cell with `active` set draws `+1` with
    /// probability `1 / (1 + exp(-2 beta f))`, where `f` sums the previous
    /// spins of its active neighbors; every other cell is left alone.
    pub fn heat_bath_step<R: Rng + ?Sized>(
        &mut self,
        active: &[bool],
        beta: f64,
        neighborhood: Neighborhood,
        rng: &mut R,
    ) {
        let prev = self.spins.clone();
        let (h, w) = (self.height as isize, self.width as isize);
        for y in 0..h {
            for x in 0..w {
                let idx = (y * w + x) as usize;
                if !active[idx] {
                    continue;
                }
                let mut field = 0i32;
                for (dy, dx) in neighborhood.offsets() {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h || nx >= w {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if active[j] {
                        field += prev[j] as i32;
                    }
                }
                let p_up = 1.0 / (1.0 + (-2.0 * beta * field as f64).exp());
                self.spins[idx] = if rng.random_bool(p_up) { 1 } else { -1 };
            }
        }
    }
}

pub(crate) fn fair_spin<R: Rng + ?Sized>(rng: &mut R) -> i8 {
    if rng.random_bool(0.5) {
        1
    } else {
        -1
    }
}

/// Lattice of fair coin flips with a square patch that follows Ising
/// dynamics. The patch center is drawn once per episode. Observations are
/// `[1, side, side]` with values in `{-1, +1}`.
#[derive(Clone, Debug)]
pub struct IsingEnv {
    cfg: IsingConfig,
    lattice: IsingLattice,
    patch_mask: Vec<bool>,
    center: (usize, usize),
    steps: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl IsingEnv {
    pub fn new(cfg: IsingConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let side = cfg.lattice_side;
        let mut env = Self {
            lattice: IsingLattice::new(side, side, vec![1; side * side]),
            patch_mask: vec![false; side * side],
            center: (cfg.patch_center_range[0], cfg.patch_center_range[0]),
            cfg,
            steps: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.place_patch(env.center);
        Ok(env)
    }

    pub fn config(&self) -> &IsingConfig {
        &self.cfg
    }

    pub fn lattice(&self) -> &IsingLattice {
        &self.lattice
    }

    pub fn center(&self) -> (usize, usize) {
        self.center
    }

    /// Row-major mask of the cells inside the current patch.
    pub fn patch_mask(&self) -> &[bool] {
        &self.patch_mask
    }

    /// Inclusive `(row0, col0, row1, col1)` of the patch.
    pub fn patch_bounds(&self) -> (usize, usize, usize, usize) {
        let before = self.cfg.before_center();
        let after = self.cfg.patch_side - before - 1;
        let (cy, cx) = self.center;
        (cy - before, cx - before, cy + after, cx + after)
    }

    /// Overwrites every patch cell, e.g. to start from an ordered state.
    pub fn fill_patch(&mut self, spin: i8) {
        let (r0, c0, r1, c1) = self.patch_bounds();
        for y in r0..=r1 {
            for x in c0..=c1 {
                self.lattice.set(y, x, spin);
            }
        }
    }

    fn place_patch(&mut self, center: (usize, usize)) {
        self.center = center;
        let side = self.cfg.lattice_side;
        let (r0, c0, r1, c1) = self.patch_bounds();
        for y in 0..side {
            for x in 0..side {
                self.patch_mask[y * side + x] = (r0..=r1).contains(&y) && (c0..=c1).contains(&x);
            }
        }
    }

    fn observe(&self) -> Observation {
        let side = self.cfg.lattice_side;
        Observation::new(1, side, side, self.lattice.spins().iter().map(|&s| s as f64).collect())
    }
}

impl Environment for IsingEnv {
    fn n_actions(&self) -> usize {
        1
    }

    fn observation_shape(&self) -> [usize; 3] {
        [1, self.cfg.lattice_side, self.cfg.lattice_side]
    }

    fn reset(&mut self) -> Observation {
        let side = self.cfg.lattice_side;
        self.lattice = IsingLattice::random(side, side, &mut self.rng);
        let [lo, hi] = self.cfg.patch_center_range;
        let cy = self.rng.random_range(lo..=hi);
        let cx = self.rng.random_range(lo..=hi);
        self.place_patch((cy, cx));
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        check_action(action, 1)?;
        if self.done {
            return Err(EnvError::NeedsReset);
        }
        self.lattice.heat_bath_step(
            &self.patch_mask,
            self.cfg.inv_temperature_beta,
            self.cfg.neighborhood,
            &mut self.rng,
        );
        for (s, &inside) in self.lattice.spins_mut().iter_mut().zip(&self.patch_mask) {
            if !inside {
                *s = fair_spin(&mut self.rng);
            }
        }
        self.steps += 1;
        let truncated = self.cfg.episode_len > 0 && self.steps >= self.cfg.episode_len;
        self.done = truncated;
        Ok(StepResult {
            observation: self.observe(),
            reward: 0.0,
            terminal: truncated,
            info: truncated_info(truncated),
        })
    }
}
