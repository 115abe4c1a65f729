//! C51 agent with the contrastive auxiliary objectives, replay and the
//! per-item lookahead policies.

mod c51;
mod replay;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use c51::{
    c51_loss, c51_loss_on_graph, c51_targets, categorical_projection, distributions, greedy_actions, SupportGrid,
};
pub use replay::{FrameSpec, FrameStacker, NStep, ReplayBuffer, TransitionBatch};

use crate::adaptivek::{continue_matrix, sample_k, ActionOddsModel, AdaptiveKError, ContinueMatrix};
use crate::diffkit::{soft_update, DiffError, Gradients, Graph, Optimizer, OptimizerKind, ParamStore, Tensor};
use crate::encoder::{ArchConfig, DimHeads, Encoder, Level, N_ATOMS};
use crate::infomax::{composite_dim_loss, dim_loss, term_name, DimPair, DimWeights};
use crate::par::Exec;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("replay buffer has no transitions")]
    EmptyBuffer,
    #[error("replay: {0}")]
    Replay(String),
    #[error("the network has no value head")]
    NoValueHead,
    #[error("nothing to train: no value head and no active contrastive term")]
    NothingToTrain,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    AdaptiveK(#[from] AdaptiveKError),
}

pub type Result<T> = std::result::Result<T, AgentError>;

/// How the lookahead `k` of the contrastive positive is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentVariant {
    /// Distributional RL alone.
    C51Only,
    Fix { k: usize },
    /// `k` uniform in `1..=h`.
    RandK { h: usize },
    /// Fixed `k` with the action pathway zeroed.
    NoAct { k: usize },
    /// `k` from the learned action-continuation model, at most `h`.
    Ada { h: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    C51Only,
    Fix,
    Randk,
    Noact,
    Ada,
}

impl AgentVariant {
    pub fn from_kind(kind: VariantKind, k: usize, h: usize) -> Result<Self> {
        let v = match kind {
            VariantKind::C51Only => AgentVariant::C51Only,
            VariantKind::Fix => AgentVariant::Fix { k },
            VariantKind::Randk => AgentVariant::RandK { h },
            VariantKind::Noact => AgentVariant::NoAct { k },
            VariantKind::Ada => AgentVariant::Ada { h },
        };
        match v {
            AgentVariant::Fix { k: 0 } | AgentVariant::NoAct { k: 0 } => {
                Err(AgentError::Config("k must be at least 1".into()))
            }
            AgentVariant::RandK { h: 0 } | AgentVariant::Ada { h: 0 } => {
                Err(AgentError::Config("H must be at least 1".into()))
            }
            v => Ok(v),
        }
    }

    pub fn kind(self) -> VariantKind {
        match self {
            AgentVariant::C51Only => VariantKind::C51Only,
            AgentVariant::Fix { .. } => VariantKind::Fix,
            AgentVariant::RandK { .. } => VariantKind::Randk,
            AgentVariant::NoAct { .. } => VariantKind::Noact,
            AgentVariant::Ada { .. } => VariantKind::Ada,
        }
    }

    pub fn uses_dim(self) -> bool {
        self != AgentVariant::C51Only
    }

    pub fn uses_actions(self) -> bool {
        !matches!(self, AgentVariant::NoAct { .. })
    }
}

/// Whether the RL and contrastive gradients go into one update or are
/// applied one after another.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    #[default]
    Summed,
    Sequential,
}

/// Linear decay from `start` to `end` over `decay_steps`, constant after.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl EpsilonSchedule {
    pub fn value(&self, step: u64) -> f64 {
        if step >= self.decay_steps {
            return self.end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub arch: ArchConfig,
    pub variant: AgentVariant,
    pub weights: DimWeights,
    pub update_mode: UpdateMode,
    /// Return support; `None` drops the value head (reward-free tasks).
    pub support: Option<SupportGrid>,
    pub gamma: f64,
    pub n_step: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub clip_grad: f64,
    pub tau: f64,
    pub nce_clip: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            variant: AgentVariant::Fix { k: 1 },
            weights: DimWeights {
                lambda_4t4: 1.0,
                lambda_3t3: 1.0,
                lambda_3t4: 0.0,
                lambda_4t3: 0.0,
            },
            update_mode: UpdateMode::Summed,
            support: Some(SupportGrid {
                v_min: -10.0,
                v_max: 50.0,
            }),
            gamma: 0.99,
            n_step: 7,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            lr: 2.5e-4,
            clip_grad: 10.0,
            tau: 0.95,
            nce_clip: crate::infomax::DEFAULT_CLIP,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate().map_err(AgentError::Config)?;
        if self.batch_size < 2 {
            return Err(AgentError::Config("batch_size must be at least 2 for in-batch negatives".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return Err(AgentError::Config("gamma and tau must lie in [0, 1]".into()));
        }
        if self.n_step == 0 {
            return Err(AgentError::Config("n_step must be at least 1".into()));
        }
        if !(self.clip_grad > 0.0) || !(self.nce_clip > 0.0) {
            return Err(AgentError::Config("clip_grad and the score clip must be positive".into()));
        }
        if let Some(s) = self.support {
            SupportGrid::new(s.v_min, s.v_max)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub loss_rl: Option<f64>,
    /// Contrastive terms by name (`4t4`, `3t3`, ...), unweighted.
    pub loss_dim: BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub k_mean: f64,
    pub k_min: usize,
    pub k_max: usize,
}

pub struct Agent {
    cfg: AgentConfig,
    frame: FrameSpec,
    store: ParamStore,
    target: ParamStore,
    encoder: Encoder,
    heads: DimHeads,
    optimizer: Optimizer,
    odds: ActionOddsModel,
    exec: Exec,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(cfg: AgentConfig, frame: FrameSpec, n_actions: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        frame.validate()?;
        if n_actions == 0 {
            return Err(AgentError::Config("need at least one action".into()));
        }
        let mut arch = cfg.arch.clone();
        arch.value_head = cfg.support.is_some();
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &arch, frame.input_shape(), n_actions, rng)?;
        let heads = DimHeads::new(&mut store, &arch, &encoder, rng);
        let optimizer = Optimizer::new(cfg.optimizer, cfg.lr)?.with_clip(cfg.clip_grad);
        Ok(Self {
            target: store.clone(),
            store,
            encoder,
            heads,
            optimizer,
            odds: ActionOddsModel::new(n_actions),
            frame,
            cfg,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn frame(&self) -> &FrameSpec {
        &self.frame
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn target_store(&self) -> &ParamStore {
        &self.target
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn heads(&self) -> &DimHeads {
        &self.heads
    }

    pub fn odds(&self) -> &ActionOddsModel {
        &self.odds
    }

    pub fn continue_matrix(&self) -> ContinueMatrix {
        continue_matrix(&self.odds)
    }

    pub fn n_actions(&self) -> usize {
        self.encoder.n_actions()
    }

    /// Expected returns per action for one stacked input.
    pub fn q_values(&self, input: &[f64]) -> Result<Vec<f64>> {
        let grid = self.cfg.support.ok_or(AgentError::NoValueHead)?;
        let mut shape = vec![1];
        shape.extend_from_slice(&self.frame.input_shape());
        let mut g = Graph::inference(&self.store).with_exec(self.exec);
        let feats = self.encoder.encode(&mut g, Tensor::new(&shape, input.to_vec())?)?;
        let f5 = feats.f5.ok_or(AgentError::NoValueHead)?;
        let probs = distributions(&g, f5);
        Ok(probs.chunks(N_ATOMS).map(|p| grid.expectation(p)).collect())
    }

    /// Epsilon-greedy on expected returns; uniform when there is no value
    /// head. Always draws the exploration coin first.
    pub fn act<R: Rng + ?Sized>(&self, input: &[f64], epsilon: f64, rng: &mut R) -> Result<usize> {
        let explore = rng.random::<f64>() < epsilon;
        if explore || self.cfg.support.is_none() {
            return Ok(rng.random_range(0..self.n_actions()));
        }
        let q = self.q_values(input)?;
        Ok((0..q.len()).fold(0, |best, a| if q[a] > q[best] { a } else { best }))
    }

    /// Lookahead per sampled position, clipped to each episode's end. The
    /// adaptive variant also folds the first action pair of every window
    /// into the odds model, after sampling.
    pub fn choose_ks<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer, positions: &[usize], rng: &mut R) -> Result<Vec<usize>> {
        let clip = |p: usize, k: usize| k.clamp(1, buffer.max_lookahead(p).max(1));
        match self.cfg.variant {
            AgentVariant::C51Only => Ok(vec![1; positions.len()]),
            AgentVariant::Fix { k } | AgentVariant::NoAct { k } => Ok(positions.iter().map(|&p| clip(p, k)).collect()),
            AgentVariant::RandK { h } => Ok(positions.iter().map(|&p| clip(p, rng.random_range(1..=h))).collect()),
            AgentVariant::Ada { h } => {
                let a = continue_matrix(&self.odds);
                let mut ks = Vec::with_capacity(positions.len());
                let mut pairs = Vec::new();
                for &p in positions {
                    let window = buffer.action_window(p, h);
                    ks.push(clip(p, sample_k(&a, &window, h, rng)?));
                    if window.len() >= 2 {
                        pairs.push((window[0], window[1]));
                    }
                }
                self.odds.update(&pairs)?;
                Ok(ks)
            }
        }
    }

    /// Samples a batch and applies one update.
    pub fn train_step<R1: Rng + ?Sized, R2: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        sample_rng: &mut R1,
        k_rng: &mut R2,
    ) -> Result<TrainMetrics> {
        let positions = buffer.sample_positions(self.cfg.batch_size, sample_rng)?;
        let ks = self.choose_ks(buffer, &positions, k_rng)?;
        let batch = buffer.batch(&positions, &ks, self.cfg.n_step, self.cfg.gamma)?;
        self.train_on_batch(&batch)
    }

    fn dim_active(&self) -> bool {
        self.cfg.variant.uses_dim() && self.cfg.weights.any_positive()
    }

    /// One update on a prepared batch, then the target soft update.
    pub fn train_on_batch(&mut self, batch: &TransitionBatch) -> Result<TrainMetrics> {
        if batch.is_empty() {
            return Err(AgentError::EmptyBuffer);
        }
        if self.cfg.support.is_none() && !self.dim_active() {
            return Err(AgentError::NothingToTrain);
        }
        let targets = match &self.cfg.support {
            Some(grid) => Some(c51_targets(&self.target, &self.encoder, batch, grid)?),
            None => None,
        };
        let mut metrics = TrainMetrics {
            k_mean: batch.ks.iter().sum::<usize>() as f64 / batch.len() as f64,
            k_min: *batch.ks.iter().min().unwrap(),
            k_max: *batch.ks.iter().max().unwrap(),
            ..TrainMetrics::default()
        };
        match self.cfg.update_mode {
            UpdateMode::Summed => self.summed_update(batch, targets.as_ref(), &mut metrics)?,
            UpdateMode::Sequential => self.sequential_update(batch, targets.as_ref(), &mut metrics)?,
        }
        soft_update(&mut self.target, &self.store, self.cfg.tau)?;
        Ok(metrics)
    }

    fn dim_actions<'a>(&self, batch: &'a TransitionBatch) -> Option<&'a [usize]> {
        self.cfg.variant.uses_actions().then_some(batch.actions.as_slice())
    }

    fn summed_update(&mut self, batch: &TransitionBatch, targets: Option<&Tensor>, m: &mut TrainMetrics) -> Result<()> {
        let mut grads = Gradients::for_store(&self.store);
        {
            let mut g = Graph::new(&self.store).with_exec(self.exec);
            let feats = self.encoder.encode(&mut g, batch.obs.clone())?;
            let mut total = None;
            if let Some(t) = targets {
                let l = c51_loss_on_graph(&mut g, &feats, &batch.actions, t)?;
                m.loss_rl = Some(g.value(l).item());
                total = Some(l);
            }
            if self.dim_active() {
                let later = self.encoder.encode(&mut g, batch.future_obs.clone())?;
                let pair = DimPair {
                    current: &feats,
                    later: &later,
                    actions: self.dim_actions(batch),
                };
                let comp = composite_dim_loss(&mut g, &self.heads, pair, &self.cfg.weights, self.cfg.nce_clip)?;
                for (n, f, v) in &comp.terms {
                    m.loss_dim.insert(term_name(*n, *f).to_string(), g.value(*v).item());
                }
                total = Some(match total {
                    Some(t) => g.add(t, comp.total)?,
                    None => comp.total,
                });
            }
            g.backward(total.expect("checked above"), &mut grads)?;
        }
        m.grad_norm = self.optimizer.step(&mut self.store, &grads);
        Ok(())
    }

    fn sequential_update(&mut self, batch: &TransitionBatch, targets: Option<&Tensor>, m: &mut TrainMetrics) -> Result<()> {
        let mut norms = Vec::new();
        if let Some(t) = targets {
            let mut grads = Gradients::for_store(&self.store);
            {
                let mut g = Graph::new(&self.store).with_exec(self.exec);
                let feats = self.encoder.encode(&mut g, batch.obs.clone())?;
                let l = c51_loss_on_graph(&mut g, &feats, &batch.actions, t)?;
                m.loss_rl = Some(g.value(l).item());
                g.backward(l, &mut grads)?;
            }
            norms.push(self.optimizer.step(&mut self.store, &grads));
        }
        if self.dim_active() {
            for (now, future, w) in self.cfg.weights.terms() {
                if w <= 0.0 {
                    continue;
                }
                let mut grads = Gradients::for_store(&self.store);
                {
                    let mut g = Graph::new(&self.store).with_exec(self.exec);
                    let feats = self.encoder.encode(&mut g, batch.obs.clone())?;
                    let later = self.encoder.encode(&mut g, batch.future_obs.clone())?;
                    let pair = DimPair {
                        current: &feats,
                        later: &later,
                        actions: self.dim_actions(batch),
                    };
                    let l = dim_loss(&mut g, &self.heads, pair, now, future, self.cfg.nce_clip)?;
                    m.loss_dim.insert(term_name(now, future).to_string(), g.value(l).item());
                    let weighted = g.scale(l, w);
                    g.backward(weighted, &mut grads)?;
                }
                norms.push(self.optimizer.step(&mut self.store, &grads));
            }
        }
        m.grad_norm = norms.iter().cloned().fold(0.0, f64::max);
        Ok(())
    }

    /// Unweighted contrastive loss of one term on a batch, without updating.
    pub fn evaluate_dim(&self, batch: &TransitionBatch, now: Level, future: Level) -> Result<f64> {
        let mut g = Graph::inference(&self.store).with_exec(self.exec);
        let feats = self.encoder.encode(&mut g, batch.obs.clone())?;
        let later = self.encoder.encode(&mut g, batch.future_obs.clone())?;
        let pair = DimPair {
            current: &feats,
            later: &later,
            actions: self.dim_actions(batch),
        };
        let l = dim_loss(&mut g, &self.heads, pair, now, future, self.cfg.nce_clip)?;
        Ok(g.value(l).item())
    }
}
