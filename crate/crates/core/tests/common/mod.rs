//! Independent oracles shared by the unit tests and the acceptance report.
#![allow(dead_code)]

use driml::agent::{Agent, AgentConfig, AgentVariant, FrameSpec, ReplayBuffer, SupportGrid, TransitionBatch};
use driml::diffkit::{dense, Graph, ParamId, ParamStore, Result, Tensor, Var};
use driml::encoder::ArchConfig;
use driml::envs::Observation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-scale..scale))
}

/// Each atom's mass spread by the hat function centred on its shifted
/// position: weight `max(0, 1 - |b - i|)` on grid atom `i`.
pub fn hat_projection(probs: &[f64], ret: f64, gamma_n: f64, v_min: f64, v_max: f64) -> Vec<f64> {
    let delta = (v_max - v_min) / 50.0;
    let mut out = vec![0.0; 51];
    for (j, &p) in probs.iter().enumerate() {
        let z = v_min + j as f64 * delta;
        let tz = (ret + gamma_n * z).max(v_min).min(v_max);
        let b = (tz - v_min) / delta;
        for (i, o) in out.iter_mut().enumerate() {
            *o += p * (1.0 - (b - i as f64).abs()).max(0.0);
        }
    }
    out
}

pub fn random_distribution(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..51).map(|_| rng.random::<f64>().powi(3)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Scalar C51 loss: greedy next action under the target net, hat-projected
/// target, mean cross-entropy minus target entropy.
pub fn c51_reference(agent: &Agent, target: &ParamStore, batch: &TransitionBatch, grid: &SupportGrid) -> f64 {
    let n_actions = agent.n_actions();
    let logits = |store: &ParamStore, obs: &Tensor| {
        let mut g = Graph::inference(store);
        let f = agent.encoder().encode(&mut g, obs.clone()).unwrap();
        g.value(f.f5.unwrap()).data().to_vec()
    };
    let online = logits(agent.store(), &batch.obs);
    let next = logits(target, &batch.next_obs);
    let b_len = batch.actions.len();
    let mut total = 0.0;
    for b in 0..b_len {
        let dists: Vec<Vec<f64>> = (0..n_actions).map(|a| softmax(&next[(b * n_actions + a) * 51..][..51])).collect();
        let q: Vec<f64> = dists.iter().map(|d| (0..51).map(|i| d[i] * grid.atom(i)).sum()).collect();
        let best = (0..n_actions).fold(0, |m, a| if q[a] > q[m] { a } else { m });
        let m = hat_projection(&dists[best], batch.returns[b], batch.discounts[b], grid.atom(0), grid.atom(50));
        let p = softmax(&online[(b * n_actions + batch.actions[b]) * 51..][..51]);
        for i in 0..51 {
            if m[i] > 0.0 {
                total += m[i] * (m[i].ln() - p[i].ln());
            }
        }
    }
    total / b_len as f64
}

pub fn small_arch() -> ArchConfig {
    ArchConfig {
        conv: vec![[4, 2, 1]],
        hidden: 16,
        action_embed: 4,
        global_dim: 8,
        local_dim: 8,
        global_hidden: 16,
        local_hidden: 8,
        value_head: true,
    }
}

pub fn small_config() -> AgentConfig {
    AgentConfig {
        arch: small_arch(),
        variant: AgentVariant::Fix { k: 2 },
        batch_size: 8,
        n_step: 3,
        lr: 1e-3,
        ..AgentConfig::default()
    }
}

pub fn frame() -> FrameSpec {
    FrameSpec::rgb(1, 3, 3).with_stack(2, 1)
}

/// Replay filled with random-pixel episodes whose first pixel tags the
/// episode (`episode mod 200`).
pub fn filled_buffer(seed: u64, episodes: usize, n_actions: usize) -> ReplayBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = ReplayBuffer::new(frame(), 10_000).unwrap();
    let obs = |ep: usize, rng: &mut ChaCha8Rng| {
        let mut o = Observation::zeros(1, 3, 3);
        for v in o.values.iter_mut() {
            *v = rng.random_range(0..256u32) as f64 / 255.0;
        }
        o.values[0] = (ep % 200) as f64 / 255.0;
        o
    };
    for ep in 0..episodes {
        let o = obs(ep, &mut rng);
        buf.start_episode(&o).unwrap();
        let len = rng.random_range(1..9);
        for t in 0..len {
            let terminal = t + 1 == len && ep % 2 == 0;
            let o = obs(ep, &mut rng);
            let a = rng.random_range(0..n_actions);
            buf.push_step(a, rng.random_range(-1.0..1.0), &o, terminal, t + 1 == len).unwrap();
        }
    }
    buf
}

/// Loop-by-loop scores `[l][i][j]` for `[B, d, L]` inputs.
pub fn naive_scores(r: &Tensor, p: &Tensor, clip: f64) -> Vec<Vec<Vec<f64>>> {
    let (b, d, l) = (r.shape()[0], r.shape()[1], r.shape()[2]);
    let at = |t: &Tensor, i: usize, c: usize, loc: usize| t.data()[(i * d + c) * l + loc];
    (0..l)
        .map(|loc| {
            (0..b)
                .map(|i| {
                    (0..b)
                        .map(|j| {
                            let mut dot = 0.0;
                            for c in 0..d {
                                dot += at(r, i, c, loc) * at(p, j, c, loc);
                            }
                            let x = dot / (d as f64).sqrt();
                            clip * (x / clip).tanh()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn naive_nce(s: &[Vec<Vec<f64>>]) -> f64 {
    let (l, b) = (s.len(), s[0].len());
    let mut total = 0.0;
    for loc in s {
        for (i, row) in loc.iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += row[i] - lse;
        }
    }
    -total / (l * b) as f64
}

/// P(k = j) for j = 1..=len(c)+1 when each extension succeeds with `c[i]`.
pub fn enumerate_k(c: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut reach = 1.0;
    for &p in c {
        out.push(reach * (1.0 - p));
        reach *= p;
    }
    out.push(reach);
    out
}

/// Pearson chi-square goodness-of-fit p-value.
pub fn chi_square_p(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut dof = 0;
    for (&o, &p) in counts.iter().zip(probs) {
        if p > 0.0 {
            let e = p * n as f64;
            stat += (o as f64 - e).powi(2) / e;
            dof += 1;
        } else if o > 0 {
            return 0.0;
        }
    }
    1.0 - ChiSquared::new((dof - 1) as f64).unwrap().cdf(stat)
}

/// Store for a small network that routes through every differentiable op.
pub fn composite_setup() -> (ParamStore, Vec<ParamId>) {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let ids = vec![
        store.add("conv.w", random_tensor(&mut r, &[3, 2, 3, 3], 1.0)),
        store.add("conv.b", random_tensor(&mut r, &[3], 1.0)),
        store.add("dense.w", random_tensor(&mut r, &[12, 5], 1.0)),
        store.add("dense.b", random_tensor(&mut r, &[5], 1.0)),
        store.add("proj", random_tensor(&mut r, &[5, 4], 1.0)),
        store.add("emb", random_tensor(&mut r, &[2, 3, 2], 1.0)),
    ];
    (store, ids)
}

pub fn composite_loss(g: &mut Graph, ids: &[ParamId], x: &Tensor, mask: &Tensor) -> Result<Var> {
    let xv = g.constant(x.clone());
    let (cw, cb, dw, db, proj, emb) = (
        g.param(ids[0]),
        g.param(ids[1]),
        g.param(ids[2]),
        g.param(ids[3]),
        g.param(ids[4]),
        g.param(ids[5]),
    );
    let c = g.conv2d(xv, cw, 2)?; // [2,3,2,2]
    let c = g.add_along(c, cb, 1)?;
    let c = g.tanh(c);
    let flat = g.reshape(c, &[2, 12])?;
    let h = dense(g, flat, dw, db)?;
    let h = g.soft_clip(h, 1.5);
    let p = g.matmul_t(h, proj, false, false)?; // [2,4]
    let q = g.matmul_t(proj, h, true, true)?; // [4,2]
    let qt = g.permute(q, &[1, 0])?;
    let d = g.sub(p, qt)?;
    let s = g.add(p, d)?;
    let e = g.expand_trailing(emb, &[2])?; // [2,3,2,2]
    let e = g.reshape(e, &[2, 3, 4])?;
    let e = g.gather(e, &[0, 2])?; // [2,4]
    let cat = g.concat(&[s, e], 1)?; // [2,8]
    let r3 = g.reshape(cat, &[2, 2, 4])?;
    let bm = g.bmm_t(r3, r3, false, true)?; // [2,2,2]
    let ls = g.log_softmax(bm, 2)?;
    let m = g.constant(mask.clone());
    let masked = g.mul(ls, m)?;
    let sm = g.softmax(cat, 1)?;
    let sm = g.relu(sm);
    let a = g.sum(masked);
    let b = g.mean(sm);
    let b = g.scale(b, 3.0);
    g.add(a, b)
}

pub fn composite_inputs() -> (Tensor, Tensor) {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut r, &[2, 2, 5, 5], 1.0);
    let mask = Tensor::from_fn(&[2, 2, 2], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    (x, mask)
}
