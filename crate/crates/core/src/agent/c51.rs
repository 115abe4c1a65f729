//! Categorical (51-atom) return distributions.

use serde::{Deserialize, Serialize};

use super::replay::TransitionBatch;
use super::{AgentError, Result};
use crate::diffkit::{kl_categorical_loss, Graph, ParamStore, Tensor, Var};
use crate::encoder::{Encoder, EncoderOutputs, N_ATOMS};

/// Evenly spaced atoms `v_min + i * (v_max - v_min) / 50`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportGrid {
    pub v_min: f64,
    pub v_max: f64,
}

impl SupportGrid {
    pub fn new(v_min: f64, v_max: f64) -> Result<Self> {
        if !(v_min < v_max) || !v_min.is_finite() || !v_max.is_finite() {
            return Err(AgentError::Config(format!("support needs v_min < v_max, got [{v_min}, {v_max}]")));
        }
        Ok(Self { v_min, v_max })
    }

    pub fn delta(&self) -> f64 {
        (self.v_max - self.v_min) / (N_ATOMS - 1) as f64
    }

    pub fn atom(&self, i: usize) -> f64 {
        self.v_min + i as f64 * self.delta()
    }

    pub fn atoms(&self) -> Vec<f64> {
        (0..N_ATOMS).map(|i| self.atom(i)).collect()
    }

    pub fn expectation(&self, probs: &[f64]) -> f64 {
        probs.iter().enumerate().map(|(i, p)| p * self.atom(i)).sum()
    }
}

/// Shifts and scales the atoms to `clamp(ret + gamma_n * z)` and splits
/// each atom's mass linearly between the two grid atoms around it.
pub fn categorical_projection(probs: &[f64], ret: f64, gamma_n: f64, grid: &SupportGrid) -> Vec<f64> {
    assert_eq!(probs.len(), N_ATOMS, "projection expects {N_ATOMS} atoms");
    let mut out = vec![0.0; N_ATOMS];
    let delta = grid.delta();
    let top = (N_ATOMS - 1) as f64;
    for (j, &p) in probs.iter().enumerate() {
        let tz = (ret + gamma_n * grid.atom(j)).clamp(grid.v_min, grid.v_max);
        let b = ((tz - grid.v_min) / delta).clamp(0.0, top);
        let (l, u) = (b.floor(), b.ceil());
        if l == u {
            out[l as usize] += p;
        } else {
            out[l as usize] += p * (u - b);
            out[u as usize] += p * (b - l);
        }
    }
    out
}

fn softmax_rows(logits: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(width) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

/// Per-action return distributions `[B, A, 51]` from value-head logits.
pub fn distributions(g: &Graph, f5: Var) -> Vec<f64> {
    softmax_rows(g.value(f5).data(), N_ATOMS)
}

/// Index of the largest expected return in each row of `[B, A, 51]`.
pub fn greedy_actions(probs: &[f64], n_actions: usize, grid: &SupportGrid) -> Vec<usize> {
    probs
        .chunks(n_actions * N_ATOMS)
        .map(|item| {
            let q: Vec<f64> = item.chunks(N_ATOMS).map(|p| grid.expectation(p)).collect();
            (0..n_actions).fold(0, |best, a| if q[a] > q[best] { a } else { best })
        })
        .collect()
}

/// Projected Bellman targets `[B, 51]`: the next action is greedy under the
/// target network, whose distribution is then shifted by the n-step return.
pub fn c51_targets(target: &ParamStore, encoder: &Encoder, batch: &TransitionBatch, grid: &SupportGrid) -> Result<Tensor> {
    let mut g = Graph::inference(target);
    let feats = encoder.encode(&mut g, batch.next_obs.clone())?;
    let f5 = feats.f5.ok_or(AgentError::NoValueHead)?;
    let probs = distributions(&g, f5);
    let a = encoder.n_actions();
    let best = greedy_actions(&probs, a, grid);
    let mut data = Vec::with_capacity(batch.len() * N_ATOMS);
    for (b, &act) in best.iter().enumerate() {
        let p = &probs[(b * a + act) * N_ATOMS..][..N_ATOMS];
        data.extend(categorical_projection(p, batch.returns[b], batch.discounts[b], grid));
    }
    Ok(Tensor::new(&[batch.len(), N_ATOMS], data)?)
}

/// Batch-mean KL from the targets to the online distribution of the taken
/// actions.
pub fn c51_loss_on_graph(g: &mut Graph, feats: &EncoderOutputs, actions: &[usize], targets: &Tensor) -> Result<Var> {
    let f5 = feats.f5.ok_or(AgentError::NoValueHead)?;
    let log_p = g.log_softmax(f5, 2)?;
    let taken = g.gather(log_p, actions)?;
    Ok(kl_categorical_loss(g, targets, taken)?)
}

/// Evaluates the distributional loss without recording gradients.
pub fn c51_loss(
    online: &ParamStore,
    target: &ParamStore,
    encoder: &Encoder,
    batch: &TransitionBatch,
    grid: &SupportGrid,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBuffer);
    }
    let targets = c51_targets(target, encoder, batch, grid)?;
    let mut g = Graph::inference(online);
    let feats = encoder.encode(&mut g, batch.obs.clone())?;
    let loss = c51_loss_on_graph(&mut g, &feats, &batch.actions, &targets)?;
    Ok(g.value(loss).item())
}
