//! Gridworld PacMan: one agent, four ghosts, food and boost pellets.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_action, EnvError, Environment, Observation, Result, StepResult};

pub const HEIGHT: usize = 21;
pub const WIDTH: usize = 19;
pub const N_GHOSTS: usize = 4;
pub const N_ACTIONS: usize = 5;
pub const DEFAULT_MAP: &str = include_str!("../../maps/classic.txt");

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const NOOP: usize = 4;

const MOVES: [(isize, isize); N_ACTIONS] = [(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)];

pub mod palette {
    pub const EMPTY: [u8; 3] = [0, 0, 0];
    pub const WALL: [u8; 3] = [33, 33, 222];
    pub const FOOD: [u8; 3] = [255, 184, 151];
    pub const BOOST: [u8; 3] = [255, 255, 255];
    pub const AGENT: [u8; 3] = [255, 255, 0];
    pub const AGENT_BOOSTED: [u8; 3] = [255, 255, 170];
    pub const GHOSTS: [[u8; 3]; 4] = [[255, 0, 0], [255, 184, 255], [0, 255, 255], [255, 184, 82]];
    pub const WALL_NOISE: [u8; 3] = [255, 0, 255];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Wall,
    Food,
    Boost,
    Empty,
}

/// Parsed ASCII map: `#` wall, `.` food, `o` boost, `G` ghost spawn,
/// `P` agent spawn, space empty.
#[derive(Clone, Debug, PartialEq)]
pub struct PacManMap {
    cells: Vec<Cell>,
    agent_spawn: (usize, usize),
    ghost_spawns: [(usize, usize); N_GHOSTS],
    /// Cells of the ghost pen (the empty region holding the spawns).
    pen: Vec<bool>,
    /// Open cell just outside the pen that wandering ghosts head for.
    pen_exit: (usize, usize),
}

impl PacManMap {
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.len() != HEIGHT {
            return Err(EnvError::Map(format!("expected {HEIGHT} rows, found {}", rows.len())));
        }
        let mut cells = Vec::with_capacity(HEIGHT * WIDTH);
        let mut agent = Vec::new();
        let mut ghosts = Vec::new();
        let mut spawn_region = vec![false; HEIGHT * WIDTH];
        for (y, row) in rows.iter().enumerate() {
            let chars: Vec<char> = row.chars().collect();
            if chars.len() != WIDTH {
                return Err(EnvError::Map(format!(
                    "row {y} has {} columns, expected {WIDTH}",
                    chars.len()
                )));
            }
            for (x, ch) in chars.into_iter().enumerate() {
                let cell = match ch {
                    '#' => Cell::Wall,
                    '.' => Cell::Food,
                    'o' => Cell::Boost,
                    ' ' => Cell::Empty,
                    'G' => {
                        ghosts.push((y, x));
                        Cell::Empty
                    }
                    'P' => {
                        agent.push((y, x));
                        Cell::Empty
                    }
                    other => return Err(EnvError::Map(format!("unknown symbol {other:?} at row {y}, column {x}"))),
                };
                spawn_region[y * WIDTH + x] = matches!(ch, ' ' | 'G');
                cells.push(cell);
            }
        }
        if agent.len() != 1 {
            return Err(EnvError::Map(format!("expected 1 agent spawn, found {}", agent.len())));
        }
        if ghosts.len() != N_GHOSTS {
            return Err(EnvError::Map(format!("expected {N_GHOSTS} ghost spawns, found {}", ghosts.len())));
        }
        let border_open = (0..HEIGHT)
            .flat_map(|y| (0..WIDTH).map(move |x| (y, x)))
            .filter(|&(y, x)| y == 0 || x == 0 || y == HEIGHT - 1 || x == WIDTH - 1)
            .any(|(y, x)| cells[y * WIDTH + x] != Cell::Wall);
        if border_open {
            return Err(EnvError::Map("the outer border must be walls".into()));
        }
        let open = |p: (usize, usize)| cells[p.0 * WIDTH + p.1] != Cell::Wall;
        let reach = bfs(&cells, agent[0], |_| true);
        let n_open = cells.iter().filter(|&&c| c != Cell::Wall).count();
        if reach.iter().filter(|d| d.is_some()).count() != n_open {
            return Err(EnvError::Map("open cells are not all connected".into()));
        }
        // Pen: empty cells connected to the spawns through empty cells.
        let pen_reach = bfs(&cells, ghosts[0], |p| spawn_region[p.0 * WIDTH + p.1]);
        let pen: Vec<bool> = pen_reach.iter().map(|d| d.is_some()).collect();
        if ghosts.iter().any(|g| !pen[g.0 * WIDTH + g.1]) {
            return Err(EnvError::Map("ghost spawns must share one empty pen".into()));
        }
        let mut exit = None;
        'search: for y in 1..HEIGHT - 1 {
            for x in 1..WIDTH - 1 {
                if !pen[y * WIDTH + x] {
                    continue;
                }
                for (dy, dx) in &MOVES[..4] {
                    let q = ((y as isize + dy) as usize, (x as isize + dx) as usize);
                    if open(q) && !pen[q.0 * WIDTH + q.1] {
                        exit = Some(q);
                        break 'search;
                    }
                }
            }
        }
        let pen_exit = exit.ok_or_else(|| EnvError::Map("ghost pen has no exit".into()))?;
        Ok(Self {
            cells,
            agent_spawn: agent[0],
            ghost_spawns: [ghosts[0], ghosts[1], ghosts[2], ghosts[3]],
            pen,
            pen_exit,
        })
    }

    pub fn cell(&self, y: usize, x: usize) -> Cell {
        self.cells[y * WIDTH + x]
    }

    pub fn is_wall(&self, y: usize, x: usize) -> bool {
        self.cell(y, x) == Cell::Wall
    }

    /// Row-major wall mask.
    pub fn wall_mask(&self) -> Vec<bool> {
        self.cells.iter().map(|&c| c == Cell::Wall).collect()
    }

    pub fn agent_spawn(&self) -> (usize, usize) {
        self.agent_spawn
    }

    pub fn ghost_spawns(&self) -> [(usize, usize); N_GHOSTS] {
        self.ghost_spawns
    }

    pub fn food_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == Cell::Food).count()
    }

    pub fn in_pen(&self, p: (usize, usize)) -> bool {
        self.pen[p.0 * WIDTH + p.1]
    }
}

fn bfs(cells: &[Cell], start: (usize, usize), allowed: impl Fn((usize, usize)) -> bool) -> Vec<Option<usize>> {
    let mut dist = vec![None; cells.len()];
    let mut queue = VecDeque::new();
    dist[start.0 * WIDTH + start.1] = Some(0);
    queue.push_back(start);
    while let Some((y, x)) = queue.pop_front() {
        let d = dist[y * WIDTH + x].unwrap();
        for (dy, dx) in &MOVES[..4] {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny < 0 || nx < 0 || ny >= HEIGHT as isize || nx >= WIDTH as isize {
                continue;
            }
            let q = (ny as usize, nx as usize);
            let i = q.0 * WIDTH + q.1;
            if cells[i] != Cell::Wall && dist[i].is_none() && allowed(q) {
                dist[i] = Some(d + 1);
                queue.push_back(q);
            }
        }
    }
    dist
}

/// Which ghosts kill the agent on contact. Written as an index or `"all"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LethalGhost {
    Index(usize),
    All(AllGhosts),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllGhosts {
    All,
}

impl LethalGhost {
    pub const ALL: LethalGhost = LethalGhost::All(AllGhosts::All);

    pub fn is_lethal(self, ghost: usize) -> bool {
        match self {
            LethalGhost::Index(i) => i == ghost,
            LethalGhost::All(_) => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PacManConfig {
    /// ASCII map; the bundled maze when left at its default.
    pub grid: String,
    pub ghost_random_prob_eps: f64,
    pub lethal_ghost_index: LethalGhost,
    pub boost_duration: usize,
    /// Episodes per task under the continual schedule; 0 disables it.
    pub task_switch_every: usize,
    pub ising_walls: bool,
    /// Inverse temperature of the wall overlay.
    pub walls_beta: f64,
    pub food_reward: f64,
    pub ghost_reward: f64,
    pub death_reward: f64,
    pub step_penalty: f64,
    pub step_cap: usize,
}

impl Default for PacManConfig {
    fn default() -> Self {
        Self {
            grid: DEFAULT_MAP.to_string(),
            ghost_random_prob_eps: 0.0,
            lethal_ghost_index: LethalGhost::ALL,
            boost_duration: 10,
            task_switch_every: 0,
            ising_walls: false,
            walls_beta: 2.5,
            food_reward: 1.0,
            ghost_reward: 5.0,
            death_reward: -10.0,
            step_penalty: 0.0,
            step_cap: 500,
        }
    }
}

impl PacManConfig {
    pub fn validate(&self) -> Result<PacManMap> {
        if !(0.0..=1.0).contains(&self.ghost_random_prob_eps) {
            return Err(EnvError::Config(format!(
                "ghost_random_prob_eps must lie in [0, 1], got {}",
                self.ghost_random_prob_eps
            )));
        }
        if let LethalGhost::Index(i) = self.lethal_ghost_index {
            if i >= N_GHOSTS {
                return Err(EnvError::Config(format!("lethal_ghost_index {i} must be 0..=3 or \"all\"")));
            }
        }
        if self.step_cap == 0 {
            return Err(EnvError::Config("step_cap must be positive".into()));
        }
        if self.food_reward < 0.0 || self.ghost_reward < 0.0 || self.death_reward > 0.0 {
            return Err(EnvError::Config(
                "food and ghost rewards must be nonnegative and the death reward nonpositive".into(),
            ));
        }
        PacManMap::parse(&self.grid)
    }

    /// Smallest and largest possible per-step reward.
    pub fn reward_bounds(&self) -> (f64, f64) {
        (
            self.step_penalty + self.death_reward,
            self.step_penalty + self.food_reward + N_GHOSTS as f64 * self.ghost_reward,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GhostMode {
    Wander,
    Chase,
    Flee,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Ghost {
    pos: (usize, usize),
    heading: usize,
}

/// Corner each ghost drifts toward while the agent is out of sight.
const WANDER_TARGETS: [(usize, usize); N_GHOSTS] = [(1, 1), (1, WIDTH - 2), (HEIGHT - 2, 1), (HEIGHT - 2, WIDTH - 2)];

#[derive(Clone, Debug)]
pub struct PacManEnv {
    cfg: PacManConfig,
    map: PacManMap,
    items: Vec<Cell>,
    agent: (usize, usize),
    ghosts: [Ghost; N_GHOSTS],
    boost_left: usize,
    food_left: usize,
    steps: usize,
    done: bool,
    last_ghost_actions: [usize; N_GHOSTS],
    last_ghost_random: [bool; N_GHOSTS],
    rng: ChaCha8Rng,
}

impl PacManEnv {
    pub fn new(cfg: PacManConfig, seed: u64) -> Result<Self> {
        let map = cfg.validate()?;
        let mut env = Self {
            items: map.cells.clone(),
            agent: map.agent_spawn,
            ghosts: map.ghost_spawns.map(|pos| Ghost { pos, heading: UP }),
            food_left: map.food_count(),
            map,
            cfg,
            boost_left: 0,
            steps: 0,
            done: false,
            last_ghost_actions: [NOOP; N_GHOSTS],
            last_ghost_random: [false; N_GHOSTS],
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.reset_state();
        Ok(env)
    }

    pub fn config(&self) -> &PacManConfig {
        &self.cfg
    }

    pub fn map(&self) -> &PacManMap {
        &self.map
    }

    pub fn agent_position(&self) -> (usize, usize) {
        self.agent
    }

    pub fn ghost_positions(&self) -> [(usize, usize); N_GHOSTS] {
        self.ghosts.map(|g| g.pos)
    }

    /// Test hook: moves the agent without touching anything else.
    pub fn place_agent(&mut self, pos: (usize, usize)) {
        assert!(!self.map.is_wall(pos.0, pos.1), "cannot place the agent in a wall");
        self.agent = pos;
    }

    /// Test hook: moves one ghost.
    pub fn place_ghost(&mut self, ghost: usize, pos: (usize, usize)) {
        assert!(!self.map.is_wall(pos.0, pos.1), "cannot place a ghost in a wall");
        self.ghosts[ghost].pos = pos;
    }

    pub fn boost_left(&self) -> usize {
        self.boost_left
    }

    pub fn food_left(&self) -> usize {
        self.food_left
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn lethal_ghost(&self) -> LethalGhost {
        self.cfg.lethal_ghost_index
    }

    pub fn set_lethal_ghost(&mut self, lethal: LethalGhost) {
        self.cfg.lethal_ghost_index = lethal;
    }

    /// Actions the ghosts took on the last step.
    pub fn last_ghost_actions(&self) -> [usize; N_GHOSTS] {
        self.last_ghost_actions
    }

    /// Whether each ghost's last action came from the random override.
    pub fn last_ghost_random(&self) -> [bool; N_GHOSTS] {
        self.last_ghost_random
    }

    /// Agent in the same row or column with no wall strictly between.
    pub fn line_of_sight(&self, from: (usize, usize), to: (usize, usize)) -> bool {
        if from.0 == to.0 {
            let (a, b) = (from.1.min(to.1), from.1.max(to.1));
            (a + 1..b).all(|x| !self.map.is_wall(from.0, x))
        } else if from.1 == to.1 {
            let (a, b) = (from.0.min(to.0), from.0.max(to.0));
            (a + 1..b).all(|y| !self.map.is_wall(y, from.1))
        } else {
            false
        }
    }

    pub fn ghost_mode(&self, ghost: usize) -> GhostMode {
        if !self.line_of_sight(self.ghosts[ghost].pos, self.agent) {
            GhostMode::Wander
        } else if self.boost_left > 0 {
            GhostMode::Flee
        } else {
            GhostMode::Chase
        }
    }

    /// RGB frame, row-major, 3 bytes per cell.
    pub fn render_rgb(&self) -> Vec<u8> {
        let mut px = Vec::with_capacity(HEIGHT * WIDTH * 3);
        for &c in &self.items {
            let color = match c {
                Cell::Wall => palette::WALL,
                Cell::Food => palette::FOOD,
                Cell::Boost => palette::BOOST,
                Cell::Empty => palette::EMPTY,
            };
            px.extend_from_slice(&color);
        }
        let mut paint = |p: (usize, usize), color: [u8; 3]| {
            let i = (p.0 * WIDTH + p.1) * 3;
            px[i..i + 3].copy_from_slice(&color);
        };
        let agent_color = if self.boost_left > 0 {
            palette::AGENT_BOOSTED
        } else {
            palette::AGENT
        };
        paint(self.agent, agent_color);
        for (i, g) in self.ghosts.iter().enumerate() {
            paint(g.pos, palette::GHOSTS[i]);
        }
        px
    }

    fn observe(&self) -> Observation {
        rgb_to_observation(&self.render_rgb(), HEIGHT, WIDTH)
    }

    fn reset_state(&mut self) {
        self.items = self.map.cells.clone();
        self.agent = self.map.agent_spawn;
        self.ghosts = self.map.ghost_spawns.map(|pos| Ghost { pos, heading: UP });
        self.food_left = self.map.food_count();
        self.boost_left = 0;
        self.steps = 0;
        self.done = false;
        self.last_ghost_actions = [NOOP; N_GHOSTS];
        self.last_ghost_random = [false; N_GHOSTS];
    }

    fn target_of(&self, pos: (usize, usize), action: usize) -> (usize, usize) {
        let (dy, dx) = MOVES[action];
        let q = ((pos.0 as isize + dy) as usize, (pos.1 as isize + dx) as usize);
        if self.map.is_wall(q.0, q.1) {
            pos
        } else {
            q
        }
    }

    fn ghost_policy(&self, i: usize) -> usize {
        let g = self.ghosts[i];
        let dist2 = |p: (usize, usize), t: (usize, usize)| {
            let dy = p.0 as isize - t.0 as isize;
            let dx = p.1 as isize - t.1 as isize;
            dy * dy + dx * dx
        };
        let manhattan = |p: (usize, usize)| p.0.abs_diff(self.agent.0) + p.1.abs_diff(self.agent.1);
        match self.ghost_mode(i) {
            GhostMode::Chase => (0..4)
                .filter(|&a| self.target_of(g.pos, a) != g.pos)
                .min_by_key(|&a| manhattan(self.target_of(g.pos, a)))
                .unwrap_or(NOOP),
            GhostMode::Flee => {
                let mut best = NOOP;
                for a in 0..N_ACTIONS {
                    if manhattan(self.target_of(g.pos, a)) > manhattan(self.target_of(g.pos, best)) {
                        best = a;
                    }
                }
                best
            }
            GhostMode::Wander => {
                // Greedy toward the target without reversing, as long as
                // some other move exists; wandering ghosts stay out of the
                // pen once they have left it.
                let inside = self.map.in_pen(g.pos);
                let target = if inside { self.map.pen_exit } else { WANDER_TARGETS[i] };
                let reverse = reverse_of(g.heading);
                let candidates: Vec<usize> = (0..4)
                    .filter(|&a| {
                        let q = self.target_of(g.pos, a);
                        q != g.pos && (inside || !self.map.in_pen(q))
                    })
                    .collect();
                let forward: Vec<usize> = candidates.iter().copied().filter(|&a| a != reverse).collect();
                let pool = if forward.is_empty() { &candidates } else { &forward };
                pool.iter()
                    .copied()
                    .min_by_key(|&a| dist2(self.target_of(g.pos, a), target))
                    .unwrap_or(NOOP)
            }
        }
    }

    /// Resolves contacts at the agent's cell. Returns the reward and whether
    /// the agent died.
    fn resolve_contacts(&mut self) -> (f64, bool) {
        let mut reward = 0.0;
        for i in 0..N_GHOSTS {
            if self.ghosts[i].pos != self.agent {
                continue;
            }
            if self.boost_left > 0 {
                reward += self.cfg.ghost_reward;
                self.ghosts[i] = Ghost {
                    pos: self.map.ghost_spawns[i],
                    heading: UP,
                };
            } else if self.cfg.lethal_ghost_index.is_lethal(i) {
                return (reward + self.cfg.death_reward, true);
            }
        }
        (reward, false)
    }
}

fn reverse_of(action: usize) -> usize {
    match action {
        UP => DOWN,
        DOWN => UP,
        LEFT => RIGHT,
        RIGHT => LEFT,
        _ => NOOP,
    }
}

/// Converts row-major RGB bytes into a `[3, h, w]` observation in `[0, 1]`.
pub fn rgb_to_observation(px: &[u8], h: usize, w: usize) -> Observation {
    let mut o = Observation::zeros(3, h, w);
    for (cell, rgb) in px.chunks_exact(3).enumerate() {
        for (c, &v) in rgb.iter().enumerate() {
            o.values[c * h * w + cell] = v as f64 / 255.0;
        }
    }
    o
}

impl Environment for PacManEnv {
    fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    fn observation_shape(&self) -> [usize; 3] {
        [3, HEIGHT, WIDTH]
    }

    fn reset(&mut self) -> Observation {
        self.reset_state();
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        check_action(action, N_ACTIONS)?;
        if self.done {
            return Err(EnvError::NeedsReset);
        }
        let mut reward = self.cfg.step_penalty;
        self.agent = self.target_of(self.agent, action);
        let idx = self.agent.0 * WIDTH + self.agent.1;
        match self.items[idx] {
            Cell::Food => {
                reward += self.cfg.food_reward;
                self.food_left -= 1;
                self.items[idx] = Cell::Empty;
            }
            Cell::Boost => {
                self.boost_left = self.cfg.boost_duration;
                self.items[idx] = Cell::Empty;
            }
            _ => {}
        }
        let (r, mut died) = self.resolve_contacts();
        reward += r;
        if !died {
            let eps = self.cfg.ghost_random_prob_eps;
            for i in 0..N_GHOSTS {
                let random = eps > 0.0 && self.rng.random_bool(eps);
                let a = if random {
                    self.rng.random_range(0..N_ACTIONS)
                } else {
                    self.ghost_policy(i)
                };
                self.last_ghost_actions[i] = a;
                self.last_ghost_random[i] = random;
                let q = self.target_of(self.ghosts[i].pos, a);
                if q != self.ghosts[i].pos {
                    self.ghosts[i].heading = a;
                }
                self.ghosts[i].pos = q;
            }
            let (r, d) = self.resolve_contacts();
            reward += r;
            died = d;
        }
        self.boost_left = self.boost_left.saturating_sub(1);
        self.steps += 1;
        let cleared = self.food_left == 0;
        let capped = self.steps >= self.cfg.step_cap;
        let truncated = capped && !died && !cleared;
        self.done = died || cleared || capped;
        let mut info = super::truncated_info(truncated);
        info.insert("died".into(), died as u8 as f64);
        info.insert("food_left".into(), self.food_left as f64);
        info.insert("task".into(), self.task_id() as f64);
        Ok(StepResult {
            observation: self.observe(),
            reward,
            terminal: self.done,
            info,
        })
    }

    fn task_id(&self) -> usize {
        match self.cfg.lethal_ghost_index {
            LethalGhost::Index(i) => i,
            LethalGhost::All(_) => 0,
        }
    }

    fn set_task(&mut self, task: usize) -> Result<()> {
        self.cfg.lethal_ghost_index = LethalGhost::Index(task % N_GHOSTS);
        Ok(())
    }

    fn n_tasks(&self) -> usize {
        N_GHOSTS
    }
}

/// Builds the configured PacMan stack: the base game, then the wall
/// overlay, then the task schedule.
pub fn build(cfg: &PacManConfig, seed: u64) -> Result<Box<dyn Environment>> {
    let base = PacManEnv::new(cfg.clone(), seed)?;
    let walls = base.map().wall_mask();
    let mut env: Box<dyn Environment> = Box::new(base);
    if cfg.ising_walls {
        env = Box::new(super::IsingWallsOverlay::new(
            env,
            walls,
            HEIGHT,
            WIDTH,
            cfg.walls_beta,
            seed,
        ));
    }
    if cfg.task_switch_every > 0 {
        env = Box::new(super::ContinualSchedule::new(env, cfg.task_switch_every)?);
    }
    Ok(env)
}
