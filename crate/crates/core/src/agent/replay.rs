//! Episode-aware replay of byte-quantized frames.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AgentError, Result};
use crate::diffkit::Tensor;
use crate::envs::Observation;

/// How single environment frames are stored and turned into network input.
/// A stored byte `q` decodes to `offset + scale * q`; the input stacks the
/// last `stack` frames (oldest first) and repeats every pixel `upscale`
/// times along both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub offset: f64,
    pub scale: f64,
    pub stack: usize,
    pub upscale: usize,
}

impl FrameSpec {
    /// Pixels in `[0, 1]` with 8-bit levels.
    pub fn rgb(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            offset: 0.0,
            scale: 1.0 / 255.0,
            stack: 1,
            upscale: 1,
        }
    }

    /// `{-1, +1}` spins.
    pub fn spins(channels: usize, height: usize, width: usize) -> Self {
        Self {
            offset: -1.0,
            scale: 2.0,
            ..Self::rgb(channels, height, width)
        }
    }

    /// `{0, 1}` values such as one-hot vectors.
    pub fn binary(channels: usize, height: usize, width: usize) -> Self {
        Self {
            offset: 0.0,
            scale: 1.0,
            ..Self::rgb(channels, height, width)
        }
    }

    pub fn with_stack(mut self, stack: usize, upscale: usize) -> Self {
        self.stack = stack;
        self.upscale = upscale;
        self
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// `[channels * stack, height * upscale, width * upscale]`
    pub fn input_shape(&self) -> [usize; 3] {
        [
            self.channels * self.stack,
            self.height * self.upscale,
            self.width * self.upscale,
        ]
    }

    pub fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len() == 0 || self.stack == 0 || self.upscale == 0 {
            return Err(AgentError::Config(format!("degenerate frame spec {self:?}")));
        }
        if !(self.scale > 0.0) {
            return Err(AgentError::Config(format!("frame scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    /// Quantizes an observation; values must land on the byte grid.
    pub fn encode(&self, obs: &Observation) -> Result<Vec<u8>> {
        if obs.shape() != [self.channels, self.height, self.width] {
            return Err(AgentError::Shape(format!(
                "observation {:?} does not match frame {:?}",
                obs.shape(),
                [self.channels, self.height, self.width]
            )));
        }
        obs.values
            .iter()
            .map(|&v| {
                let q = ((v - self.offset) / self.scale).round();
                if (0.0..=255.0).contains(&q) && (self.offset + self.scale * q - v).abs() <= 1e-9 {
                    Ok(q as u8)
                } else {
                    Err(AgentError::Shape(format!("value {v} is not representable in this frame format")))
                }
            })
            .collect()
    }

    /// Builds one network input from up to `stack` frames, oldest first.
    /// Missing frames (before an episode start) are all zeros.
    pub fn assemble(&self, frames: &[Option<&[u8]>], out: &mut [f64]) {
        debug_assert_eq!(frames.len(), self.stack);
        debug_assert_eq!(out.len(), self.input_len());
        let (h, w, u) = (self.height, self.width, self.upscale);
        let (oh, ow) = (h * u, w * u);
        for (s, frame) in frames.iter().enumerate() {
            for c in 0..self.channels {
                let plane = &mut out[(s * self.channels + c) * oh * ow..][..oh * ow];
                match frame {
                    None => plane.fill(0.0),
                    Some(f) => {
                        for y in 0..oh {
                            for x in 0..ow {
                                let q = f[(c * h + y / u) * w + x / u];
                                plane[y * ow + x] = self.offset + self.scale * q as f64;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// The rolling frame stack used while acting.
#[derive(Clone, Debug)]
pub struct FrameStacker {
    spec: FrameSpec,
    recent: VecDeque<Vec<u8>>,
}

impl FrameStacker {
    pub fn new(spec: FrameSpec) -> Self {
        Self {
            spec,
            recent: VecDeque::new(),
        }
    }

    pub fn reset(&mut self, obs: &Observation) -> Result<()> {
        self.recent.clear();
        self.push(obs)
    }

    pub fn push(&mut self, obs: &Observation) -> Result<()> {
        self.recent.push_back(self.spec.encode(obs)?);
        while self.recent.len() > self.spec.stack {
            self.recent.pop_front();
        }
        Ok(())
    }

    pub fn input(&self) -> Vec<f64> {
        let missing = self.spec.stack - self.recent.len();
        let frames: Vec<Option<&[u8]>> = (0..self.spec.stack)
            .map(|s| s.checked_sub(missing).map(|i| self.recent[i].as_slice()))
            .collect();
        let mut out = vec![0.0; self.spec.input_len()];
        self.spec.assemble(&frames, &mut out);
        out
    }
}

#[derive(Clone, Debug)]
struct Slot {
    frame: Vec<u8>,
    episode: u64,
    /// Action taken from this frame; `None` for the latest frame of an
    /// episode.
    action: Option<usize>,
    reward: f64,
    /// The action ended the episode in a true terminal state.
    terminal: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NStep {
    pub ret: f64,
    /// `gamma^m` for a span of `m` steps, 0 after a terminal.
    pub discount: f64,
    /// Position of the bootstrap state.
    pub next: usize,
    pub terminal: bool,
}

/// A sampled batch. Position `i` of every field refers to the same item.
#[derive(Clone, Debug)]
pub struct TransitionBatch {
    /// Buffer positions of the current states.
    pub positions: Vec<usize>,
    /// `[B, ...input_shape]`
    pub obs: Tensor,
    pub actions: Vec<usize>,
    /// Discounted reward sum over the (possibly shortened) n-step span.
    pub returns: Vec<f64>,
    /// `gamma^m` for the span length `m`, or 0 when the span hit a terminal.
    pub discounts: Vec<f64>,
    pub next_obs: Tensor,
    /// States `k` steps after each current state.
    pub future_obs: Tensor,
    pub ks: Vec<usize>,
    pub terminal: Vec<bool>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// FIFO buffer of frames in episode order. Each frame carries the action
/// taken from it, so transitions, n-step spans, lookahead targets and action
/// windows are read off consecutive slots of one episode.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    spec: FrameSpec,
    capacity: usize,
    slots: VecDeque<Slot>,
    episode: u64,
    open: bool,
    transitions: usize,
}

impl ReplayBuffer {
    pub fn new(spec: FrameSpec, capacity: usize) -> Result<Self> {
        spec.validate()?;
        if capacity < 2 {
            return Err(AgentError::Config(format!("replay capacity must be at least 2, got {capacity}")));
        }
        Ok(Self {
            spec,
            capacity,
            slots: VecDeque::new(),
            episode: 0,
            open: false,
            transitions: 0,
        })
    }

    pub fn spec(&self) -> &FrameSpec {
        &self.spec
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stored frames.
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Stored frames that have an action (and so a successor).
    pub fn transitions(&self) -> usize {
        self.transitions
    }

    pub fn start_episode(&mut self, obs: &Observation) -> Result<()> {
        let frame = self.spec.encode(obs)?;
        self.episode += 1;
        self.push_slot(Slot {
            frame,
            episode: self.episode,
            action: None,
            reward: 0.0,
            terminal: false,
        });
        self.open = true;
        Ok(())
    }

    /// Records the outcome of `action`. `done` closes the episode;
    /// `terminal` marks a true terminal (no bootstrapping past it).
    pub fn push_step(&mut self, action: usize, reward: f64, next: &Observation, terminal: bool, done: bool) -> Result<()> {
        if !self.open {
            return Err(AgentError::Replay("push_step before start_episode".into()));
        }
        let frame = self.spec.encode(next)?;
        let last = self.slots.back_mut().expect("open episode has a frame");
        last.action = Some(action);
        last.reward = reward;
        last.terminal = terminal;
        self.transitions += 1;
        self.push_slot(Slot {
            frame,
            episode: self.episode,
            action: None,
            reward: 0.0,
            terminal: false,
        });
        self.open = !(done || terminal);
        Ok(())
    }

    fn push_slot(&mut self, slot: Slot) {
        self.slots.push_back(slot);
        while self.slots.len() > self.capacity {
            let old = self.slots.pop_front().unwrap();
            if old.action.is_some() {
                self.transitions -= 1;
            }
        }
    }

    fn same_episode(&self, a: usize, b: usize) -> bool {
        b < self.slots.len() && self.slots[a].episode == self.slots[b].episode
    }

    pub fn action_at(&self, pos: usize) -> Option<usize> {
        self.slots.get(pos).and_then(|s| s.action)
    }

    /// Uniform positions over stored transitions.
    pub fn sample_positions<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.transitions == 0 {
            return Err(AgentError::EmptyBuffer);
        }
        Ok((0..n)
            .map(|_| loop {
                let p = rng.random_range(0..self.slots.len());
                if self.slots[p].action.is_some() {
                    break p;
                }
            })
            .collect())
    }

    /// Largest `k` with `pos + k` in the same episode.
    pub fn max_lookahead(&self, pos: usize) -> usize {
        let mut k = 0;
        while self.same_episode(pos, pos + k + 1) {
            k += 1;
        }
        k
    }

    /// Up to `h` actions starting at `pos`, stopping at the episode's end.
    pub fn action_window(&self, pos: usize, h: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(h);
        let mut p = pos;
        while out.len() < h && p < self.slots.len() && self.slots[p].episode == self.slots[pos].episode {
            match self.slots[p].action {
                Some(a) => out.push(a),
                None => break,
            }
            p += 1;
        }
        out
    }

    /// Discounted rewards over at most `n` steps from `pos`, cut short at
    /// the episode's last stored frame.
    pub fn n_step(&self, pos: usize, n: usize, gamma: f64) -> NStep {
        let mut out = NStep {
            ret: 0.0,
            discount: 1.0,
            next: pos,
            terminal: false,
        };
        for _ in 0..n.max(1) {
            let slot = &self.slots[out.next];
            if slot.action.is_none() {
                break;
            }
            out.ret += out.discount * slot.reward;
            out.discount *= gamma;
            out.next += 1;
            if slot.terminal {
                out.discount = 0.0;
                out.terminal = true;
                break;
            }
        }
        out
    }

    /// Stacked network input for the frame at `pos`.
    pub fn input_at(&self, pos: usize, out: &mut [f64]) {
        let stack = self.spec.stack;
        let frames: Vec<Option<&[u8]>> = (0..stack)
            .map(|s| {
                let back = stack - 1 - s;
                pos.checked_sub(back)
                    .filter(|&q| self.slots[q].episode == self.slots[pos].episode)
                    .map(|q| self.slots[q].frame.as_slice())
            })
            .collect();
        self.spec.assemble(&frames, out);
    }

    fn stacked(&self, positions: &[usize]) -> Tensor {
        let len = self.spec.input_len();
        let mut data = vec![0.0; positions.len() * len];
        for (chunk, &p) in data.chunks_mut(len).zip(positions) {
            self.input_at(p, chunk);
        }
        let mut shape = vec![positions.len()];
        shape.extend_from_slice(&self.spec.input_shape());
        Tensor::new(&shape, data).expect("sized above")
    }

    /// Assembles the batch; each `k` is clipped to the episode's last
    /// available frame.
    pub fn batch(&self, positions: &[usize], ks: &[usize], n_step: usize, gamma: f64) -> Result<TransitionBatch> {
        if positions.is_empty() || positions.len() != ks.len() {
            return Err(AgentError::Replay(format!(
                "{} positions with {} lookaheads",
                positions.len(),
                ks.len()
            )));
        }
        let mut actions = Vec::with_capacity(positions.len());
        let (mut returns, mut discounts, mut next, mut future, mut used_k, mut terminal) =
            (vec![], vec![], vec![], vec![], vec![], vec![]);
        for (&p, &k) in positions.iter().zip(ks) {
            let a = self
                .action_at(p)
                .ok_or_else(|| AgentError::Replay(format!("position {p} has no transition")))?;
            actions.push(a);
            let span = self.n_step(p, n_step, gamma);
            returns.push(span.ret);
            discounts.push(span.discount);
            terminal.push(span.terminal);
            next.push(span.next);
            let k = k.clamp(1, self.max_lookahead(p));
            used_k.push(k);
            future.push(p + k);
        }
        Ok(TransitionBatch {
            positions: positions.to_vec(),
            obs: self.stacked(positions),
            actions,
            returns,
            discounts,
            next_obs: self.stacked(&next),
            future_obs: self.stacked(&future),
            ks: used_k,
            terminal,
        })
    }
}
