//! Reverse-mode automatic differentiation over dense `f64` tensors, with
//! the layers, losses and optimizers the agent needs.

mod checkpoint;
mod graph;
mod kernels;
mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{read_checkpoint, restore_into, write_checkpoint, FORMAT_VERSION, MAGIC};
pub use graph::{Graph, Var};
pub use layers::{dense, Conv2d, Dense};
pub use optim::{soft_update, Optimizer, OptimizerKind};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("invalid optimizer setting: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// `sum_i p_i (log p_i - log_q_i)` with `0 log 0 = 0`.
pub fn kl_categorical(p: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(log_q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &lq)| pi * (pi.ln() - lq))
        .sum()
}

/// Batch-mean KL between constant target rows `p` (`[B, n]`) and the
/// log-probabilities `log_q` recorded on the graph.
pub fn kl_categorical_loss(g: &mut Graph, p: &Tensor, log_q: Var) -> Result<Var> {
    if p.shape() != g.shape(log_q) || p.rank() != 2 {
        return Err(DiffError::Shape(format!(
            "kl: target {:?} vs log-probabilities {:?}",
            p.shape(),
            g.shape(log_q)
        )));
    }
    let batch = p.shape()[0] as f64;
    let entropy_term: f64 = p.data().iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
    let pv = g.constant(p.clone());
    let cross = g.mul(pv, log_q)?;
    let cross = g.sum(cross);
    let neg = g.scale(cross, -1.0 / batch);
    let c = g.constant(Tensor::scalar(entropy_term / batch));
    g.add(neg, c)
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Entries whose gradients are both below this magnitude are compared
/// absolutely rather than relatively.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of `loss_fn` against central
/// differences with step `h` for every parameter entry.
pub fn check_gradients<F>(store: &ParamStore, h: f64, loss_fn: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut grads = Gradients::for_store(store);
    {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss, &mut grads)?;
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(s);
        let loss = loss_fn(&mut g)?;
        Ok(g.value(loss).item())
    };
    let mut probe = store.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for id in store.ids() {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[j]);
            let denom = analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}
