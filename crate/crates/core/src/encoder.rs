//! Observation encoder (conv or MLP trunk with a C51 value head) and the
//! projection heads used by the contrastive objectives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffkit::{Conv2d, DiffError, Graph, ParamStore, Result, Tensor, Var};
use crate::diffkit::Dense;

pub const N_ATOMS: usize = 51;

/// Network shape. An empty `conv` list selects the MLP trunk, in which case
/// the local feature map is the hidden layer viewed as a `1 x 1` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// `[channels, kernel, stride]` per conv block; the last block is `f3`.
    pub conv: Vec<[usize; 3]>,
    /// Width of the dense layer producing `f4`.
    pub hidden: usize,
    pub action_embed: usize,
    pub global_dim: usize,
    pub local_dim: usize,
    pub global_hidden: usize,
    pub local_hidden: usize,
    pub value_head: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            conv: vec![[32, 5, 2], [64, 3, 2], [64, 3, 1]],
            hidden: 512,
            action_embed: 64,
            global_dim: 128,
            local_dim: 128,
            global_hidden: 512,
            local_hidden: 128,
            value_head: true,
        }
    }
}

impl ArchConfig {
    /// Shape `[d3, h3, w3]` of the local map for a `[c, h, w]` input.
    pub fn local_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if self.conv.is_empty() {
            return Ok([self.hidden, 1, 1]);
        }
        let [mut c, mut h, mut w] = input;
        for &[ch, k, s] in &self.conv {
            if k > h || k > w || s == 0 {
                return Err(DiffError::Shape(format!(
                    "conv block [{ch}, {k}, {s}] does not fit a {h}x{w} map"
                )));
            }
            h = (h - k) / s + 1;
            w = (w - k) / s + 1;
            c = ch;
        }
        Ok([c, h, w])
    }
}

pub struct EncoderOutputs {
    /// `[B, d3, h3, w3]`
    pub f3: Var,
    /// `[B, d4]`
    pub f4: Var,
    /// `[B, n_actions, 51]` logits, when the value head is enabled.
    pub f5: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    convs: Vec<Conv2d>,
    fc: Dense,
    value: Option<Dense>,
    input: [usize; 3],
    local: [usize; 3],
    n_actions: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        arch: &ArchConfig,
        input: [usize; 3],
        n_actions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let local = arch.local_shape(input)?;
        let mut convs = Vec::new();
        let mut c_in = input[0];
        for (i, &[ch, k, s]) in arch.conv.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("enc.conv{i}"), c_in, ch, k, s, rng));
            c_in = ch;
        }
        let flat = if convs.is_empty() {
            input.iter().product()
        } else {
            local.iter().product()
        };
        let fc = Dense::new(store, "enc.fc", flat, arch.hidden, rng);
        let value = arch
            .value_head
            .then(|| Dense::new(store, "enc.value", arch.hidden, n_actions * N_ATOMS, rng));
        Ok(Self {
            convs,
            fc,
            value,
            input,
            local,
            n_actions,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn local_shape(&self) -> [usize; 3] {
        self.local
    }

    pub fn hidden(&self) -> usize {
        self.fc.out_dim
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn has_value_head(&self) -> bool {
        self.value.is_some()
    }

    /// Runs the trunk on a `[B, c, h, w]` observation batch.
    pub fn encode(&self, g: &mut Graph, obs: Tensor) -> Result<EncoderOutputs> {
        let shape = obs.shape().to_vec();
        if shape.len() != 4 || shape[1..] != self.input {
            return Err(DiffError::Shape(format!(
                "encoder expects [B, {}, {}, {}], got {shape:?}",
                self.input[0], self.input[1], self.input[2]
            )));
        }
        let b = shape[0];
        let x = g.constant(obs);
        let (f3, f4) = if self.convs.is_empty() {
            let flat = g.reshape(x, &[b, self.input.iter().product()])?;
            let h = self.fc.forward(g, flat)?;
            let f4 = g.relu(h);
            let f3 = g.reshape(f4, &[b, self.local[0], 1, 1])?;
            (f3, f4)
        } else {
            let mut h = x;
            for conv in &self.convs {
                let y = conv.forward(g, h)?;
                h = g.relu(y);
            }
            let flat = g.reshape(h, &[b, self.local.iter().product()])?;
            let y = self.fc.forward(g, flat)?;
            (h, g.relu(y))
        };
        let f5 = match &self.value {
            Some(v) => {
                let logits = v.forward(g, f4)?;
                Some(g.reshape(logits, &[b, self.n_actions, N_ATOMS])?)
            }
            None => None,
        };
        Ok(EncoderOutputs { f3, f4, f5 })
    }
}

/// Feature level a contrastive term reads from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Level {
    /// Per-location conv features (`f3`).
    Local,
    /// Whole-input vector (`f4`).
    Global,
}

impl Level {
    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            3 => Ok(Level::Local),
            4 => Ok(Level::Global),
            _ => Err(DiffError::Shape(format!("feature level must be 3 or 4, got {i}"))),
        }
    }
}

/// Two-layer map with a linear skip from input to output.
#[derive(Clone, Debug)]
struct SkipMlp {
    hidden: Dense,
    out: Dense,
    skip: Dense,
}

impl SkipMlp {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, i: usize, h: usize, o: usize, rng: &mut R) -> Self {
        Self {
            hidden: Dense::new(store, &format!("{name}.hidden"), i, h, rng),
            out: Dense::new(store, &format!("{name}.out"), h, o, rng),
            skip: Dense::new(store, &format!("{name}.skip"), i, o, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        let y = self.out.forward(g, h)?;
        let s = self.skip.forward(g, x)?;
        g.add(y, s)
    }
}

/// Hidden layer of `1 x 1` convolutions.
#[derive(Clone, Debug)]
struct PointwiseMlp {
    hidden: Conv2d,
    out: Conv2d,
}

impl PointwiseMlp {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, i: usize, h: usize, o: usize, rng: &mut R) -> Self {
        Self {
            hidden: Conv2d::new(store, &format!("{name}.hidden"), i, h, 1, 1, rng),
            out: Conv2d::new(store, &format!("{name}.out"), h, o, 1, 1, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        self.out.forward(g, h)
    }
}

/// Projection heads for the contrastive terms: action embedders and the
/// reference (`psi`) / positive (`phi`) maps at both feature levels.
#[derive(Clone, Debug)]
pub struct DimHeads {
    action_global: Dense,
    action_local: Dense,
    psi_global: SkipMlp,
    phi_global: SkipMlp,
    psi_local: PointwiseMlp,
    phi_local: PointwiseMlp,
    n_actions: usize,
    action_embed: usize,
    global_dim: usize,
    local_dim: usize,
}

impl DimHeads {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        arch: &ArchConfig,
        encoder: &Encoder,
        rng: &mut R,
    ) -> Self {
        let n_actions = encoder.n_actions();
        let d4 = encoder.hidden();
        let d3 = encoder.local_shape()[0];
        let e = arch.action_embed;
        Self {
            action_global: Dense::new(store, "dim.action4", n_actions, e, rng),
            action_local: Dense::new(store, "dim.action3", n_actions, e, rng),
            psi_global: SkipMlp::new(store, "dim.psi4", d4 + e, arch.global_hidden, arch.global_dim, rng),
            phi_global: SkipMlp::new(store, "dim.phi4", d4, arch.global_hidden, arch.global_dim, rng),
            psi_local: PointwiseMlp::new(store, "dim.psi3", d3 + e, arch.local_hidden, arch.local_dim, rng),
            phi_local: PointwiseMlp::new(store, "dim.phi3", d3, arch.local_hidden, arch.local_dim, rng),
            n_actions,
            action_embed: e,
            global_dim: arch.global_dim,
            local_dim: arch.local_dim,
        }
    }

    pub fn output_dim(&self, level: Level) -> usize {
        match level {
            Level::Global => self.global_dim,
            Level::Local => self.local_dim,
        }
    }

    /// Embedded actions `[B, e]`; zeros when `actions` is `None`.
    fn embed_actions(&self, g: &mut Graph, embed: &Dense, batch: usize, actions: Option<&[usize]>) -> Result<Var> {
        match actions {
            None => Ok(g.constant(Tensor::zeros(&[batch, self.action_embed]))),
            Some(acts) => {
                if acts.len() != batch || acts.iter().any(|&a| a >= self.n_actions) {
                    return Err(DiffError::Shape(format!(
                        "{} actions for batch {batch} over {} actions",
                        acts.len(),
                        self.n_actions
                    )));
                }
                let one_hot = Tensor::from_fn(&[batch, self.n_actions], |i| {
                    if acts[i / self.n_actions] == i % self.n_actions {
                        1.0
                    } else {
                        0.0
                    }
                });
                let x = g.constant(one_hot);
                let y = embed.forward(g, x)?;
                Ok(g.relu(y))
            }
        }
    }

    /// Reference projection of current-state features joined with the
    /// action. Global: `[B, G]`. Local: `[B, L, h3, w3]`.
    pub fn project_with_action(
        &self,
        g: &mut Graph,
        feats: &EncoderOutputs,
        actions: Option<&[usize]>,
        level: Level,
    ) -> Result<Var> {
        match level {
            Level::Global => {
                let b = g.shape(feats.f4)[0];
                let a = self.embed_actions(g, &self.action_global, b, actions)?;
                let x = g.concat(&[feats.f4, a], 1)?;
                self.psi_global.forward(g, x)
            }
            Level::Local => {
                let s = g.shape(feats.f3).to_vec();
                // A dense map on the one-hot followed by tiling equals a 1x1
                // convolution on the tiled one-hot.
                let a = self.embed_actions(g, &self.action_local, s[0], actions)?;
                let tiled = g.expand_trailing(a, &s[2..])?;
                let x = g.concat(&[feats.f3, tiled], 1)?;
                self.psi_local.forward(g, x)
            }
        }
    }

    /// Positive-side projection without actions.
    pub fn project_future(&self, g: &mut Graph, feats: &EncoderOutputs, level: Level) -> Result<Var> {
        match level {
            Level::Global => self.phi_global.forward(g, feats.f4),
            Level::Local => self.phi_local.forward(g, feats.f3),
        }
    }
}
