//! Contrastive (InfoNCE) objectives between features of a state and a
//! later state, with in-batch negatives.

use serde::{Deserialize, Serialize};

use crate::diffkit::{DiffError, Graph, ParamStore, Result, Tensor, Var};
use crate::encoder::{DimHeads, Encoder, EncoderOutputs, Level};
use crate::markov::RatioModel;

pub const DEFAULT_CLIP: f64 = 20.0;

/// Weights of the four level pairings, named `lambda_<now>t<future>`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DimWeights {
    pub lambda_4t4: f64,
    pub lambda_3t3: f64,
    pub lambda_3t4: f64,
    pub lambda_4t3: f64,
}

impl DimWeights {
    pub fn terms(&self) -> [(Level, Level, f64); 4] {
        [
            (Level::Global, Level::Global, self.lambda_4t4),
            (Level::Local, Level::Local, self.lambda_3t3),
            (Level::Local, Level::Global, self.lambda_3t4),
            (Level::Global, Level::Local, self.lambda_4t3),
        ]
    }

    pub fn any_positive(&self) -> bool {
        self.terms().iter().any(|t| t.2 > 0.0)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for (n, m, w) in self.terms() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(format!("{} must be a nonnegative number, got {w}", term_name(n, m)));
            }
        }
        Ok(())
    }
}

pub fn term_name(now: Level, future: Level) -> &'static str {
    match (now, future) {
        (Level::Global, Level::Global) => "4t4",
        (Level::Local, Level::Local) => "3t3",
        (Level::Local, Level::Global) => "3t4",
        (Level::Global, Level::Local) => "4t3",
    }
}

/// Views a projection as `[B, d, n_locs]`: global vectors get one location.
pub fn as_locations(g: &mut Graph, v: Var) -> Result<Var> {
    let s = g.shape(v).to_vec();
    match s.len() {
        2 => g.reshape(v, &[s[0], s[1], 1]),
        3 => Ok(v),
        4 => g.reshape(v, &[s[0], s[1], s[2] * s[3]]),
        _ => Err(DiffError::Shape(format!("cannot view {s:?} as [B, d, locs]"))),
    }
}

/// Pairwise scores `[n_locs, B, B]`: entry `(l, i, j)` is the dot product of
/// reference `i` and positive `j` at location `l`, divided by `sqrt(d)` and
/// squashed by `clip * tanh(x / clip)`.
pub fn score_matrix(g: &mut Graph, reference: Var, positive: Var, clip: f64) -> Result<Var> {
    let (sr, sp) = (g.shape(reference).to_vec(), g.shape(positive).to_vec());
    if sr.len() != 3 || sr != sp {
        return Err(DiffError::Shape(format!(
            "score_matrix: reference {sr:?} and positive {sp:?} must both be [B, d, locs]"
        )));
    }
    let d = sr[1];
    if d == 0 {
        return Err(DiffError::Shape("score_matrix: feature dimension is zero".into()));
    }
    let r = g.permute(reference, &[2, 0, 1])?;
    let p = g.permute(positive, &[2, 1, 0])?;
    let pairs = g.bmm(r, p)?;
    let pairs = g.scale(pairs, 1.0 / (d as f64).sqrt());
    Ok(g.soft_clip(pairs, clip))
}

/// Log-softmax over candidates with everything but the diagonal zeroed.
pub fn masked_log_scores(g: &mut Graph, scores: Var) -> Result<Var> {
    let s = g.shape(scores).to_vec();
    if s.len() != 3 || s[1] != s[2] {
        return Err(DiffError::Shape(format!("scores must be [locs, B, B], got {s:?}")));
    }
    let (locs, b) = (s[0], s[1]);
    let ls = g.log_softmax(scores, 2)?;
    let mask = Tensor::from_fn(&[locs, b, b], |i| {
        let r = i % (b * b);
        if r / b == r % b {
            1.0
        } else {
            0.0
        }
    });
    let m = g.constant(mask);
    g.mul(ls, m)
}

/// InfoNCE loss: minus the mean over locations and batch of the diagonal
/// log-softmax entries.
pub fn nce_loss(g: &mut Graph, scores: Var) -> Result<Var> {
    let s = g.shape(scores).to_vec();
    if s.len() == 3 && s[1] < 2 {
        return Err(DiffError::Shape(format!(
            "nce_loss needs at least 2 batch items for negatives, got {}",
            s[1]
        )));
    }
    let masked = masked_log_scores(g, scores)?;
    let total = g.sum(masked);
    Ok(g.scale(total, -1.0 / (s[0] * s[1]) as f64))
}

/// Broadcasts a single-location side across the other side's locations.
fn align_locations(g: &mut Graph, a: Var, b: Var) -> Result<(Var, Var)> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    let expand = |g: &mut Graph, v: Var, s: &[usize], locs: usize| -> Result<Var> {
        let flat = g.reshape(v, &[s[0], s[1]])?;
        g.expand_trailing(flat, &[locs])
    };
    match (sa[2], sb[2]) {
        (x, y) if x == y => Ok((a, b)),
        (1, y) => Ok((expand(g, a, &sa, y)?, b)),
        (x, 1) => Ok((a, expand(g, b, &sb, x)?)),
        _ => Err(DiffError::Shape(format!("cannot pair locations of {sa:?} and {sb:?}"))),
    }
}

/// Encoded current and later states of a batch, with the actions taken in
/// the current states (`None` drops the action pathway).
#[derive(Clone, Copy)]
pub struct DimPair<'a> {
    pub current: &'a EncoderOutputs,
    pub later: &'a EncoderOutputs,
    pub actions: Option<&'a [usize]>,
}

/// One contrastive term between level `now` of the current state and
/// level `future` of the later state.
pub fn dim_loss(
    g: &mut Graph,
    heads: &DimHeads,
    pair: DimPair,
    now: Level,
    future: Level,
    clip: f64,
) -> Result<Var> {
    if heads.output_dim(now) != heads.output_dim(future) {
        return Err(DiffError::Shape(format!(
            "{} pairs projections of width {} and {}",
            term_name(now, future),
            heads.output_dim(now),
            heads.output_dim(future)
        )));
    }
    let r = heads.project_with_action(g, pair.current, pair.actions, now)?;
    let p = heads.project_future(g, pair.later, future)?;
    let r = as_locations(g, r)?;
    let p = as_locations(g, p)?;
    let (r, p) = align_locations(g, r, p)?;
    let scores = score_matrix(g, r, p, clip)?;
    nce_loss(g, scores)
}

/// Weighted sum of the active terms, with each term's value.
pub struct CompositeLoss {
    pub total: Var,
    pub terms: Vec<(Level, Level, Var)>,
}

pub fn composite_dim_loss(
    g: &mut Graph,
    heads: &DimHeads,
    pair: DimPair,
    weights: &DimWeights,
    clip: f64,
) -> Result<CompositeLoss> {
    let mut total = None;
    let mut terms = Vec::new();
    for (n, m, w) in weights.terms() {
        if w <= 0.0 {
            continue;
        }
        let l = dim_loss(g, heads, pair, n, m, clip)?;
        terms.push((n, m, l));
        let weighted = g.scale(l, w);
        total = Some(match total {
            None => weighted,
            Some(t) => g.add(t, weighted)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(CompositeLoss { total, terms })
}

/// Global-level scores of every one-hot state against every other.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedRatioTable {
    pub n_states: usize,
    /// Clipped scores, row = current state, column = candidate next state.
    pub scores: Vec<f64>,
    /// Row-softmax of `scores`: the predicted next-state pairing.
    pub pairing: Vec<f64>,
}

impl LearnedRatioTable {
    pub fn ratio_model(&self) -> RatioModel {
        RatioModel::new(self.n_states, self.scores.clone()).expect("square table")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.pairing[i * self.n_states..(i + 1) * self.n_states]
    }

    pub fn row_argmax(&self, i: usize) -> usize {
        let row = self.row(i);
        (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
    }
}

/// Evaluates the global scoring path on all `K x K` one-hot pairs of an
/// encoder whose input is a length-`K` one-hot (`[K, 1, 1]`). `action` is
/// the action paired with every reference state (`None` for the zeroed
/// pathway).
pub fn learned_ratio_table(
    store: &ParamStore,
    encoder: &Encoder,
    heads: &DimHeads,
    action: Option<usize>,
    clip: f64,
) -> Result<LearnedRatioTable> {
    let [k, h, w] = encoder.input_shape();
    if h != 1 || w != 1 {
        return Err(DiffError::Shape(format!(
            "ratio table needs one-hot inputs, encoder takes {:?}",
            encoder.input_shape()
        )));
    }
    let eye = Tensor::from_fn(&[k, k, 1, 1], |i| if i / k == i % k { 1.0 } else { 0.0 });
    let mut g = Graph::inference(store);
    let feats = encoder.encode(&mut g, eye)?;
    let actions = action.map(|a| vec![a; k]);
    let r = heads.project_with_action(&mut g, &feats, actions.as_deref(), Level::Global)?;
    let p = heads.project_future(&mut g, &feats, Level::Global)?;
    let r = as_locations(&mut g, r)?;
    let p = as_locations(&mut g, p)?;
    let s = score_matrix(&mut g, r, p, clip)?;
    let sm = g.softmax(s, 2)?;
    Ok(LearnedRatioTable {
        n_states: k,
        scores: g.value(s).data().to_vec(),
        pairing: g.value(sm).data().to_vec(),
    })
}
