use super::{DiffError, Gradients, ParamStore, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip applied before the update; `None` disables it.
    pub clip_norm: Option<f64>,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(DiffError::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        Ok(Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn with_clip(mut self, clip_norm: f64) -> Self {
        self.clip_norm = Some(clip_norm);
        self
    }

    /// Clips `grads` to the global norm bound, then updates every parameter
    /// that received a gradient. Returns the pre-clip global norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> f64 {
        let norm = grads.global_norm();
        let factor = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step_count += 1;
        if self.m.len() < params.len() {
            self.m.resize(params.len(), Vec::new());
            self.v.resize(params.len(), Vec::new());
        }
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (id, g) in grads.iter() {
            let p = params.get_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (pi, gi) in p.iter_mut().zip(g.data()) {
                        *pi -= self.learning_rate * factor * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let i = id.index();
                    if self.m[i].is_empty() {
                        self.m[i] = vec![0.0; p.len()];
                        self.v[i] = vec![0.0; p.len()];
                    }
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..p.len() {
                        let gj = factor * g.data()[j];
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        p[j] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
        norm
    }
}

/// `target <- tau * target + (1 - tau) * online`.
pub fn soft_update(target: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    target.check_compatible(online)?;
    for id in online.ids() {
        let src = online.get(id).data();
        for (t, o) in target.get_mut(id).data_mut().iter_mut().zip(src) {
            *t = tau * *t + (1.0 - tau) * o;
        }
    }
    Ok(())
}
