use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::agent::{AgentConfig, AgentVariant, SupportGrid, UpdateMode, VariantKind};
use crate::diffkit::OptimizerKind;
use crate::encoder::ArchConfig;
use crate::envs::{IsingConfig, PacManConfig};
use crate::infomax::DimWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Chain,
    Ising,
    PacmanEps,
    PacmanContinual,
    PacmanIsing,
    Analyze,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Chain,
        Preset::Ising,
        Preset::PacmanEps,
        Preset::PacmanContinual,
        Preset::PacmanIsing,
        Preset::Analyze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Chain => "chain",
            Preset::Ising => "ising",
            Preset::PacmanEps => "pacman-eps",
            Preset::PacmanContinual => "pacman-continual",
            Preset::PacmanIsing => "pacman-ising",
            Preset::Analyze => "analyze",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown preset {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSection {
    pub states: usize,
    pub alpha: f64,
    pub episode_len: usize,
}

impl Default for ChainSection {
    fn default() -> Self {
        Self {
            states: 10,
            alpha: 0.499,
            episode_len: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    /// Chain sizes used for the information curve and the spectral curve.
    pub mi_states: usize,
    pub gap_states: usize,
    /// Empty means the standard grid `0.05, 0.10, ..., 0.95` with `0.499`
    /// in place of `0.5`.
    pub alphas: Vec<f64>,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            mi_states: 10,
            gap_states: 10,
            alphas: Vec::new(),
        }
    }
}

/// One experiment. Top-level keys carry the usual training knobs; the
/// sections configure each environment and the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out_dir: PathBuf,

    pub exploration_start: f64,
    pub exploration_end: f64,
    pub exploration_decay: u64,
    pub lr: f64,
    pub gamma: f64,
    pub clip_grad: f64,
    pub n_step: usize,
    pub frame_stack: usize,
    pub warmup: usize,
    pub replay_size: usize,
    pub tau: f64,
    pub lambda_4t4: f64,
    pub lambda_3t3: f64,
    pub lambda_3t4: f64,
    pub lambda_4t3: f64,
    pub k: usize,
    #[serde(rename = "H")]
    pub horizon: usize,

    pub variant: VariantKind,
    pub update_mode: UpdateMode,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Train the distributional value head; reward-free presets turn it off.
    pub rl_head: bool,
    pub v_min: f64,
    pub v_max: f64,
    pub score_clip: f64,
    /// Spatial repeat factor applied to frames before the network.
    pub upscale: usize,
    /// Environment steps between updates.
    pub train_every: usize,
    /// Updates between metric records.
    pub log_every: usize,
    /// Environment-step budget; 0 means unlimited.
    pub max_steps: u64,
    /// Episode budget; 0 means unlimited.
    pub max_episodes: u64,
    /// Passes over the collected data for presets that train offline.
    pub epochs: usize,
    /// Window (in records) for smoothed summaries.
    pub smoothing: usize,
    /// Ghost randomness levels swept by `pacman-eps`.
    pub eps_grid: Vec<f64>,
    pub parallel: bool,

    pub arch: ArchConfig,
    pub chain: ChainSection,
    pub ising: IsingConfig,
    pub pacman: PacManConfig,
    pub analyze: AnalyzeSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: Preset::PacmanContinual,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            exploration_start: 0.1,
            exploration_end: 0.01,
            exploration_decay: 100_000,
            lr: 2.5e-4,
            gamma: 0.99,
            clip_grad: 10.0,
            n_step: 7,
            frame_stack: 4,
            warmup: 1000,
            replay_size: 1_000_000,
            tau: 0.95,
            lambda_4t4: 1.0,
            lambda_3t3: 1.0,
            lambda_3t4: 0.0,
            lambda_4t3: 0.0,
            k: 1,
            horizon: 5,
            variant: VariantKind::Fix,
            update_mode: UpdateMode::Summed,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            rl_head: true,
            v_min: -10.0,
            v_max: 50.0,
            score_clip: crate::infomax::DEFAULT_CLIP,
            upscale: 2,
            train_every: 1,
            log_every: 100,
            max_steps: 0,
            max_episodes: 0,
            epochs: 10,
            smoothing: 100,
            eps_grid: vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
            parallel: true,
            arch: ArchConfig::default(),
            chain: ChainSection::default(),
            ising: IsingConfig::default(),
            pacman: PacManConfig::default(),
            analyze: AnalyzeSection::default(),
        }
    }
}

/// Small trunk for stacked 21x19 PacMan frames at native resolution.
fn pacman_arch() -> ArchConfig {
    ArchConfig {
        conv: vec![[16, 3, 1], [32, 3, 2]],
        hidden: 128,
        action_embed: 16,
        global_dim: 64,
        local_dim: 64,
        global_hidden: 128,
        local_hidden: 32,
        value_head: true,
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults for a preset. Keys absent from a config file take
    /// these values.
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            preset,
            out_dir: PathBuf::from(format!("runs/{preset}")),
            ..Self::default()
        };
        match preset {
            Preset::Chain => Self {
                rl_head: false,
                frame_stack: 1,
                upscale: 1,
                lambda_4t4: 1.0,
                lambda_3t3: 0.0,
                lr: 1e-3,
                batch_size: 64,
                replay_size: 100_000,
                max_steps: 50_000,
                log_every: 500,
                arch: ArchConfig {
                    conv: vec![],
                    hidden: 64,
                    action_embed: 8,
                    global_dim: 64,
                    local_dim: 64,
                    global_hidden: 64,
                    local_hidden: 64,
                    value_head: false,
                },
                ..base
            },
            Preset::Ising => Self {
                rl_head: false,
                frame_stack: 1,
                upscale: 1,
                lambda_4t4: 0.0,
                lambda_3t3: 1.0,
                lr: 1e-3,
                max_episodes: 200,
                epochs: 10,
                replay_size: 10_000,
                log_every: 50,
                arch: ArchConfig {
                    conv: vec![[16, 4, 4], [32, 3, 2]],
                    hidden: 128,
                    action_embed: 8,
                    global_dim: 64,
                    local_dim: 64,
                    global_hidden: 128,
                    local_hidden: 64,
                    value_head: false,
                },
                ..base
            },
            Preset::PacmanEps => Self {
                replay_size: 100_000,
                max_steps: 15_000,
                train_every: 4,
                upscale: 1,
                arch: pacman_arch(),
                pacman: PacManConfig {
                    lethal_ghost_index: crate::envs::LethalGhost::ALL,
                    ..PacManConfig::default()
                },
                ..base
            },
            Preset::PacmanContinual | Preset::PacmanIsing => Self {
                replay_size: 100_000,
                max_episodes: 300 * 8,
                train_every: 8,
                upscale: 1,
                arch: pacman_arch(),
                pacman: PacManConfig {
                    ghost_random_prob_eps: 0.2,
                    task_switch_every: 300,
                    ising_walls: preset == Preset::PacmanIsing,
                    step_cap: 50,
                    ..PacManConfig::default()
                },
                ..base
            },
            Preset::Analyze => base,
        }
    }

    /// Parses TOML over the defaults of its preset (or of `preset_override`
    /// when given). Unknown keys are errors that name the offending path.
    pub fn from_toml_str(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let file: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| HarnessError::Config(format!("config is not valid TOML: {e}")))?;
        let preset = match preset_override {
            Some(p) => p,
            None => match file.get("preset") {
                Some(toml::Value::String(s)) => s.parse()?,
                Some(other) => return Err(HarnessError::Config(format!("preset: expected a string, got {other}"))),
                None => {
                    return Err(HarnessError::Config(
                        "preset: missing (set it in the file or pass --preset)".into(),
                    ))
                }
            },
        };
        let mut merged = toml::Table::try_from(Self::preset(preset))
            .map_err(|e| HarnessError::Config(format!("serializing preset defaults: {e}")))?;
        merge(&mut merged, file);
        merged.insert("preset".into(), toml::Value::String(preset.name().into()));
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
            let path = e.path().to_string();
            HarnessError::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, preset_override: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, preset_override)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(format!("serializing config: {e}")))
    }

    pub fn weights(&self) -> DimWeights {
        DimWeights {
            lambda_4t4: self.lambda_4t4,
            lambda_3t3: self.lambda_3t3,
            lambda_3t4: self.lambda_3t4,
            lambda_4t3: self.lambda_4t3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(HarnessError::Config(format!("{field}: {msg}")));
        if !(0.0..=1.0).contains(&self.exploration_start) {
            return bad("exploration_start", format!("must lie in [0, 1], got {}", self.exploration_start));
        }
        if !(0.0..=1.0).contains(&self.exploration_end) {
            return bad("exploration_end", format!("must lie in [0, 1], got {}", self.exploration_end));
        }
        if self.exploration_decay == 0 {
            return bad("exploration_decay", "must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", format!("must lie in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau", format!("must lie in [0, 1], got {}", self.tau));
        }
        if !(self.clip_grad > 0.0) {
            return bad("clip_grad", "must be positive".into());
        }
        for (name, v) in [
            ("n_step", self.n_step),
            ("frame_stack", self.frame_stack),
            ("k", self.k),
            ("H", self.horizon),
            ("upscale", self.upscale),
            ("train_every", self.train_every),
            ("log_every", self.log_every),
            ("smoothing", self.smoothing),
        ] {
            if v == 0 {
                return bad(name, "must be at least 1".into());
            }
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2".into());
        }
        if self.replay_size < 2 {
            return bad("replay_size", "must be at least 2".into());
        }
        self.weights().validate().map_err(HarnessError::Config)?;
        if self.rl_head && !(self.v_min < self.v_max) {
            return bad("v_min", format!("must be below v_max ({} >= {})", self.v_min, self.v_max));
        }
        if !(0.0..=1.0).contains(&self.chain.alpha) {
            return bad("chain.alpha", format!("must lie in [0, 1], got {}", self.chain.alpha));
        }
        if self.chain.states < 2 {
            return bad("chain.states", "must be at least 2".into());
        }
        if self.eps_grid.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return bad("eps_grid", "entries must lie in [0, 1]".into());
        }
        self.ising
            .validate()
            .map_err(|e| HarnessError::Config(format!("ising: {e}")))?;
        self.pacman
            .validate()
            .map_err(|e| HarnessError::Config(format!("pacman: {e}")))?;
        AgentVariant::from_kind(self.variant, self.k, self.horizon)
            .map_err(|e| HarnessError::Config(format!("variant: {e}")))?;
        Ok(())
    }

    pub fn agent_config(&self) -> Result<AgentConfig> {
        let variant = AgentVariant::from_kind(self.variant, self.k, self.horizon)
            .map_err(|e| HarnessError::Config(format!("variant: {e}")))?;
        let support = if self.rl_head {
            Some(SupportGrid::new(self.v_min, self.v_max).map_err(|e| HarnessError::Config(format!("v_min: {e}")))?)
        } else {
            None
        };
        Ok(AgentConfig {
            arch: self.arch.clone(),
            variant,
            weights: self.weights(),
            update_mode: self.update_mode,
            support,
            gamma: self.gamma,
            n_step: self.n_step,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            lr: self.lr,
            clip_grad: self.clip_grad,
            tau: self.tau,
            nce_clip: self.score_clip,
        })
    }
}

/// Recursively overwrites `base` with `over`; tables merge, everything else
/// is replaced.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
