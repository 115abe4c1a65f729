use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::artifacts::{JsonlWriter, RunDir};
use super::config::{ExperimentConfig, Preset};
use super::seeds::{Seeds, Stream};
use super::stats::{mean, pearson, pooled_sd};
use super::{HarnessError, Result};
use crate::agent::{Agent, EpsilonSchedule, FrameSpec, FrameStacker, ReplayBuffer, TrainMetrics, VariantKind};
use crate::diffkit::{Graph, Tensor};
use crate::encoder::Level;
use crate::envs::{pacman, ChainEnv, Environment, IsingEnv, Observation};
use crate::infomax::{as_locations, learned_ratio_table, score_matrix};
use crate::markov::{self, alpha_grid, random_walk_chain, random_walk_sweep};
use crate::par::Exec;

/// Numbers a run reports about itself, keyed by name. Also written to
/// `summary.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub preset: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    /// Environment steps taken when the episode ended.
    pub step: u64,
    pub task: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub length: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub episode: u64,
    pub update: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_rl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_dim_4t4: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_dim_3t3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_dim_3t4: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_dim_4t3: Option<f64>,
    /// Return of the last finished episode.
    #[serde(rename = "return", skip_serializing_if = "Option::is_none")]
    pub ret: Option<f64>,
    pub epsilon: f64,
    pub k_mean: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub task: usize,
}

impl MetricsRecord {
    fn fill(&mut self, m: &TrainMetrics) {
        self.loss_rl = m.loss_rl;
        self.loss_dim_4t4 = m.loss_dim.get("4t4").copied();
        self.loss_dim_3t3 = m.loss_dim.get("3t3").copied();
        self.loss_dim_3t4 = m.loss_dim.get("3t4").copied();
        self.loss_dim_4t3 = m.loss_dim.get("4t3").copied();
        self.k_mean = m.k_mean;
        self.k_min = m.k_min;
        self.k_max = m.k_max;
    }

    /// Sum of the logged contrastive terms.
    pub fn dim_total(&self) -> Option<f64> {
        let terms = [self.loss_dim_4t4, self.loss_dim_3t3, self.loss_dim_3t4, self.loss_dim_4t3];
        terms.iter().any(Option::is_some).then(|| terms.iter().flatten().sum())
    }
}

fn exec_for(cfg: &ExperimentConfig) -> Exec {
    if cfg.parallel {
        Exec::Parallel
    } else {
        Exec::Sequential
    }
}

fn build_agent(cfg: &ExperimentConfig, seeds: &Seeds, frame: FrameSpec, n_actions: usize, index: u32) -> Result<Agent> {
    let mut init = seeds.indexed(Stream::Init, index);
    Ok(Agent::new(cfg.agent_config()?, frame, n_actions, &mut init)?.with_exec(exec_for(cfg)))
}

/// Everything the online loop produced.
pub struct OnlineOutcome {
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub metrics: Vec<MetricsRecord>,
    pub episodes: Vec<EpisodeRecord>,
    pub steps: u64,
}

/// Acts, stores and trains until the step or episode budget runs out.
/// Updates start once the buffer holds `max(warmup, batch_size)`
/// transitions and then happen every `train_every` environment steps.
pub fn run_online(
    cfg: &ExperimentConfig,
    env: &mut dyn Environment,
    mut agent: Agent,
    seeds: &Seeds,
    index: u32,
    mut metrics_out: Option<&mut JsonlWriter>,
    mut episodes_out: Option<&mut JsonlWriter>,
) -> Result<OnlineOutcome> {
    if cfg.max_steps == 0 && cfg.max_episodes == 0 {
        return Err(HarnessError::Config("max_steps or max_episodes must be set".into()));
    }
    let frame = *agent.frame();
    let mut buffer = ReplayBuffer::new(frame, cfg.replay_size)?;
    let mut stacker = FrameStacker::new(frame);
    let mut act_rng = seeds.indexed(Stream::Act, index);
    let mut replay_rng = seeds.indexed(Stream::Replay, index);
    let mut k_rng = seeds.indexed(Stream::KSampler, index);
    let schedule = EpsilonSchedule {
        start: cfg.exploration_start,
        end: cfg.exploration_end,
        decay_steps: cfg.exploration_decay,
    };
    let ready = cfg.warmup.max(cfg.batch_size);
    let (mut step, mut episode, mut updates) = (0u64, 0u64, 0u64);
    let mut last_return = None;
    let mut metrics = Vec::new();
    let mut episodes = Vec::new();
    let budget_left = |step: u64, episode: u64| {
        (cfg.max_steps == 0 || step < cfg.max_steps) && (cfg.max_episodes == 0 || episode < cfg.max_episodes)
    };
    while budget_left(step, episode) {
        let obs = env.reset();
        stacker.reset(&obs)?;
        buffer.start_episode(&obs)?;
        let (mut ret, mut len) = (0.0, 0u64);
        loop {
            let eps = schedule.value(step);
            let action = agent.act(&stacker.input(), eps, &mut act_rng)?;
            let out = env.step(action)?;
            let true_terminal = out.terminal && !out.truncated();
            buffer.push_step(action, out.reward, &out.observation, true_terminal, out.terminal)?;
            stacker.push(&out.observation)?;
            ret += out.reward;
            len += 1;
            step += 1;
            if buffer.transitions() >= ready && step % cfg.train_every as u64 == 0 {
                let m = agent.train_step(&buffer, &mut replay_rng, &mut k_rng)?;
                updates += 1;
                if updates % cfg.log_every as u64 == 0 {
                    let mut rec = MetricsRecord {
                        step,
                        episode,
                        update: updates,
                        ret: last_return,
                        epsilon: eps,
                        task: env.task_id(),
                        ..MetricsRecord::default()
                    };
                    rec.fill(&m);
                    if let Some(w) = metrics_out.as_deref_mut() {
                        w.write(&rec)?;
                    }
                    metrics.push(rec);
                }
            }
            let out_of_steps = cfg.max_steps > 0 && step >= cfg.max_steps;
            if out.terminal || out_of_steps {
                break;
            }
        }
        let rec = EpisodeRecord {
            episode,
            step,
            task: env.task_id(),
            ret,
            length: len,
        };
        if let Some(w) = episodes_out.as_deref_mut() {
            w.write(&rec)?;
        }
        episodes.push(rec);
        last_return = Some(ret);
        episode += 1;
    }
    Ok(OnlineOutcome {
        agent,
        buffer,
        metrics,
        episodes,
        steps: step,
    })
}

/// Runs the configured preset and writes its artifacts under `out_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let mut dir = RunDir::create(cfg)?;
    let result = match cfg.preset {
        Preset::Analyze => run_analyze(cfg, &mut dir),
        Preset::Chain => run_chain(cfg, &mut dir),
        Preset::Ising => run_ising(cfg, &mut dir),
        Preset::PacmanEps => run_pacman_eps(cfg, &mut dir),
        Preset::PacmanContinual | Preset::PacmanIsing => run_pacman_continual(cfg, &mut dir),
    };
    match result {
        Ok(summary) => {
            dir.write_json("summary.json", &summary)?;
            dir.finalize(true)?;
            Ok(summary)
        }
        Err(e) => {
            let _ = dir.finalize(false);
            Err(e)
        }
    }
}

fn summary(cfg: &ExperimentConfig, values: BTreeMap<String, f64>) -> RunSummary {
    RunSummary {
        preset: cfg.preset.name().to_string(),
        values,
    }
}

fn analysis_alphas(cfg: &ExperimentConfig) -> Vec<f64> {
    if cfg.analyze.alphas.is_empty() {
        alpha_grid()
    } else {
        cfg.analyze.alphas.clone()
    }
}

/// Writes the information and spectral curves of the random walk; returns
/// the grid positions of the information minimum and the gap maximum.
fn write_sweep(cfg: &ExperimentConfig, dir: &mut RunDir, name: &str) -> Result<(f64, f64)> {
    let alphas = analysis_alphas(cfg);
    let sweep = random_walk_sweep(cfg.analyze.mi_states, cfg.analyze.gap_states, &alphas, exec_for(cfg))?;
    let mut csv = String::from("alpha,mi,mi_stationary,inv_gap\n");
    for p in &sweep {
        csv.push_str(&format!("{},{},{},{}\n", p.alpha, p.mi, p.mi_stationary, p.inv_gap));
    }
    dir.write_text(name, &csv)?;
    let argmin = (0..sweep.len()).fold(0, |b, i| if sweep[i].mi < sweep[b].mi { i } else { b });
    let argmax = (0..sweep.len()).fold(0, |b, i| if sweep[i].inv_gap > sweep[b].inv_gap { i } else { b });
    Ok((sweep[argmin].alpha, sweep[argmax].alpha))
}

fn run_analyze(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<RunSummary> {
    let (mi_argmin, gap_argmax) = write_sweep(cfg, dir, "analysis.csv")?;
    let mut values = BTreeMap::new();
    values.insert("mi_argmin_alpha".into(), mi_argmin);
    values.insert("inv_gap_argmax_alpha".into(), gap_argmax);
    Ok(summary(cfg, values))
}

/// Comparison of a learned score table with the true chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRecovery {
    /// Share of rows whose pairing argmax is a possible next state.
    pub band_argmax_fraction: f64,
    /// Correlation of learned scores and `log(T / rho)` over possible
    /// transitions.
    pub band_pearson: f64,
}

pub fn ratio_recovery(t: &markov::TransitionMatrix, rho: &[f64], table: &crate::infomax::LearnedRatioTable) -> RatioRecovery {
    let k = t.n_states();
    let hits = (0..k).filter(|&i| t.get(i, table.row_argmax(i)) > 0.0).count();
    let (mut learned, mut truth) = (Vec::new(), Vec::new());
    for i in 0..k {
        for j in 0..k {
            if t.get(i, j) > 0.0 {
                learned.push(table.scores[i * k + j]);
                truth.push((t.get(i, j) / rho[j]).ln());
            }
        }
    }
    RatioRecovery {
        band_argmax_fraction: hits as f64 / k as f64,
        band_pearson: pearson(&learned, &truth),
    }
}

fn run_chain(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<RunSummary> {
    let seeds = Seeds::new(cfg.seed);
    let k = cfg.chain.states;
    let mut env = ChainEnv::new(k, cfg.chain.alpha, seeds.derive(Stream::Env, 0))?.with_episode_len(cfg.chain.episode_len);
    let frame = FrameSpec::binary(k, 1, 1);
    let agent = build_agent(cfg, &seeds, frame, 1, 0)?;
    let mut mw = dir.jsonl("metrics.jsonl")?;
    let mut ew = dir.jsonl("episodes.jsonl")?;
    let out = run_online(cfg, &mut env, agent, &seeds, 0, Some(&mut mw), Some(&mut ew))?;
    mw.flush()?;
    ew.flush()?;

    let agent = &out.agent;
    let action = (cfg.variant != VariantKind::Noact).then_some(0);
    let table = learned_ratio_table(agent.store(), agent.encoder(), agent.heads(), action, cfg.score_clip)?;
    let t = random_walk_chain(k, cfg.chain.alpha)?;
    let rho = markov::stationary_distribution(&t, 1e-12)?;
    let ratio: Vec<f64> = (0..k * k).map(|i| t.get(i / k, i % k) / rho.probs()[i % k]).collect();
    dir.write_matrix("learned_scores.csv", k, k, &table.scores)?;
    dir.write_matrix("learned_pairing.csv", k, k, &table.pairing)?;
    dir.write_matrix("true_transition.csv", k, k, t.entries())?;
    dir.write_matrix("stationary.csv", 1, k, rho.probs())?;
    dir.write_matrix("true_ratio.csv", k, k, &ratio)?;
    write_sweep(cfg, dir, "curves.csv")?;

    let rec = ratio_recovery(&t, rho.probs(), &table);
    let mut values = BTreeMap::new();
    values.insert("band_argmax_fraction".into(), rec.band_argmax_fraction);
    values.insert("band_pearson".into(), rec.band_pearson);
    values.insert("updates".into(), out.metrics.last().map_or(0.0, |m| m.update as f64));
    if let Some(last) = out.metrics.last().and_then(|m| m.loss_dim_4t4) {
        values.insert("final_nce_4t4".into(), last);
    }
    Ok(summary(cfg, values))
}

/// Receptive field `(jump, size)` of the last conv block, in input pixels.
pub fn receptive_field(conv: &[[usize; 3]]) -> (usize, usize) {
    let (mut jump, mut size) = (1, 1);
    for &[_, k, s] in conv {
        size += (k - 1) * jump;
        jump *= s;
    }
    (jump, size)
}

/// Per-location diagonal scores of the local term between two observation
/// batches: `[B][locations]`.
pub fn local_diagonal_scores(agent: &Agent, now: &Tensor, later: &Tensor, actions: Option<&[usize]>) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::inference(agent.store());
    let a = agent.encoder().encode(&mut g, now.clone())?;
    let b = agent.encoder().encode(&mut g, later.clone())?;
    let r = agent.heads().project_with_action(&mut g, &a, actions, Level::Local)?;
    let p = agent.heads().project_future(&mut g, &b, Level::Local)?;
    let r = as_locations(&mut g, r)?;
    let p = as_locations(&mut g, p)?;
    let s = score_matrix(&mut g, r, p, agent.config().nce_clip)?;
    let shape = g.shape(s).to_vec();
    let (locs, batch) = (shape[0], shape[1]);
    let data = g.value(s).data();
    Ok((0..batch)
        .map(|i| (0..locs).map(|l| data[(l * batch + i) * batch + i]).collect())
        .collect())
}

fn obs_batch(frames: &[Observation]) -> Result<Tensor> {
    let o = &frames[0];
    let mut data = Vec::with_capacity(frames.len() * o.values.len());
    for f in frames {
        data.extend_from_slice(&f.values);
    }
    Ok(Tensor::new(&[frames.len(), o.channels, o.height, o.width], data)?)
}

fn run_ising(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<RunSummary> {
    let seeds = Seeds::new(cfg.seed);
    let side = cfg.ising.lattice_side;
    let mut env = IsingEnv::new(cfg.ising.clone(), seeds.derive(Stream::Env, 0))?;
    let frame = FrameSpec::spins(1, side, side);
    let mut agent = build_agent(cfg, &seeds, frame, 1, 0)?;
    let episodes = cfg.max_episodes.max(1) as usize;

    // Collect every episode first, then make `epochs` passes worth of
    // uniformly sampled updates over the stored transitions.
    let mut buffer = ReplayBuffer::new(frame, cfg.replay_size.max(episodes * (cfg.ising.episode_len + 1)))?;
    let mut ew = dir.jsonl("episodes.jsonl")?;
    for e in 0..episodes {
        let obs = env.reset();
        buffer.start_episode(&obs)?;
        let mut len = 0;
        loop {
            let out = env.step(0)?;
            buffer.push_step(0, 0.0, &out.observation, false, out.terminal)?;
            len += 1;
            if out.terminal {
                break;
            }
        }
        ew.write(&EpisodeRecord {
            episode: e as u64,
            step: 0,
            task: 0,
            ret: 0.0,
            length: len,
        })?;
    }
    ew.flush()?;
    let updates = cfg.epochs * buffer.transitions().div_ceil(cfg.batch_size);
    let mut replay_rng = seeds.rng(Stream::Replay);
    let mut k_rng = seeds.rng(Stream::KSampler);
    let mut mw = dir.jsonl("metrics.jsonl")?;
    for u in 1..=updates {
        let m = agent.train_step(&buffer, &mut replay_rng, &mut k_rng)?;
        if u % cfg.log_every == 0 || u == updates {
            let mut rec = MetricsRecord {
                update: u as u64,
                episode: episodes as u64,
                ..MetricsRecord::default()
            };
            rec.fill(&m);
            mw.write(&rec)?;
        }
    }
    mw.flush()?;

    // Fresh episodes: scores between the states at t = 2 and t = 3.
    let eval_n = cfg.batch_size.max(2);
    let mut eval_env = IsingEnv::new(cfg.ising.clone(), seeds.derive(Stream::Eval, 0))?;
    let (mut s2, mut s3, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..eval_n {
        eval_env.reset();
        eval_env.step(0)?;
        s2.push(eval_env.step(0)?.observation);
        s3.push(eval_env.step(0)?.observation);
        masks.push(eval_env.patch_mask().to_vec());
    }
    let actions = vec![0; eval_n];
    let scores = local_diagonal_scores(&agent, &obs_batch(&s2)?, &obs_batch(&s3)?, Some(&actions))?;
    let [_, h3, w3] = agent.encoder().local_shape();
    let (jump, size) = if cfg.arch.conv.is_empty() {
        (side, side)
    } else {
        receptive_field(&cfg.arch.conv)
    };
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for (row, mask) in scores.iter().zip(&masks) {
        for u in 0..h3 {
            for v in 0..w3 {
                let cells = (u * jump..u * jump + size).flat_map(|y| (v * jump..v * jump + size).map(move |x| (y, x)));
                let n_in = cells.clone().filter(|&(y, x)| mask[y * side + x]).count();
                let s = row[u * w3 + v];
                if n_in == size * size {
                    inside.push(s);
                } else if n_in == 0 {
                    outside.push(s);
                }
            }
        }
    }
    dir.write_matrix("heatmap_scores.csv", h3, w3, &scores[0])?;
    let mask0: Vec<f64> = masks[0].iter().map(|&m| m as u8 as f64).collect();
    dir.write_matrix("heatmap_patch.csv", side, side, &mask0)?;
    if inside.len() < 2 || outside.len() < 2 {
        return Err(HarnessError::Runtime(
            "too few feature locations fully inside or outside the patch; use a smaller receptive field".into(),
        ));
    }
    let (mi, mo) = (mean(&inside), mean(&outside));
    let pooled = pooled_sd(&inside, &outside);
    let mut values = BTreeMap::new();
    values.insert("inside_mean".into(), mi);
    values.insert("outside_mean".into(), mo);
    values.insert("pooled_sd".into(), pooled);
    values.insert("separation_sd".into(), (mi - mo) / pooled);
    values.insert("updates".into(), updates as f64);
    Ok(summary(cfg, values))
}

/// Mean of the last quarter (at least one) of the values.
pub fn tail_mean(xs: &[f64]) -> f64 {
    let n = (xs.len() / 4).max(1).min(xs.len());
    mean(&xs[xs.len() - n..])
}

fn run_pacman_eps(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<RunSummary> {
    let seeds = Seeds::new(cfg.seed);
    let mut values = BTreeMap::new();
    let mut csv = String::from("eps,final_nce\n");
    for (i, &eps) in cfg.eps_grid.iter().enumerate() {
        let idx = i as u32;
        let mut pc = cfg.pacman.clone();
        pc.ghost_random_prob_eps = eps;
        let mut env = pacman::build(&pc, seeds.derive(Stream::Env, idx))?;
        let frame = pacman_frame(cfg);
        let agent = build_agent(cfg, &seeds, frame, pacman::N_ACTIONS, idx)?;
        let mut mw = dir.jsonl(&format!("metrics-eps{i}.jsonl"))?;
        let mut ew = dir.jsonl(&format!("episodes-eps{i}.jsonl"))?;
        let out = run_online(cfg, env.as_mut(), agent, &seeds, idx, Some(&mut mw), Some(&mut ew))?;
        let nce: Vec<f64> = out.metrics.iter().filter_map(MetricsRecord::dim_total).collect();
        if nce.is_empty() {
            return Err(HarnessError::Runtime(format!(
                "eps {eps}: no contrastive loss was logged; raise max_steps or lower log_every"
            )));
        }
        let fin = tail_mean(&nce);
        csv.push_str(&format!("{eps},{fin}\n"));
        values.insert(format!("final_nce_eps{i}"), fin);
        values.insert(format!("eps{i}"), eps);
    }
    dir.write_text("eps_summary.csv", &csv)?;
    Ok(summary(cfg, values))
}

pub fn pacman_frame(cfg: &ExperimentConfig) -> FrameSpec {
    FrameSpec::rgb(3, pacman::HEIGHT, pacman::WIDTH).with_stack(cfg.frame_stack, cfg.upscale)
}

fn run_pacman_continual(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<RunSummary> {
    let seeds = Seeds::new(cfg.seed);
    let mut env = pacman::build(&cfg.pacman, seeds.derive(Stream::Env, 0))?;
    let agent = build_agent(cfg, &seeds, pacman_frame(cfg), pacman::N_ACTIONS, 0)?;
    let mut mw = dir.jsonl("metrics.jsonl")?;
    let mut ew = dir.jsonl("episodes.jsonl")?;
    let out = run_online(cfg, env.as_mut(), agent, &seeds, 0, Some(&mut mw), Some(&mut ew))?;
    mw.flush()?;
    ew.flush()?;
    let a = out.agent.continue_matrix();
    dir.write_matrix("continue_matrix.csv", a.n_actions(), a.n_actions(), a.entries())?;
    let segs = super::compare::segments(
        &out.episodes.iter().map(|e| (e.task, e.ret)).collect::<Vec<_>>(),
        cfg.smoothing,
    );
    let mut values = BTreeMap::new();
    for (i, s) in segs.iter().enumerate() {
        values.insert(format!("segment{}_terminal_return", i + 1), s.terminal);
    }
    values.insert("episodes".into(), out.episodes.len() as f64);
    values.insert("steps".into(), out.steps as f64);
    Ok(summary(cfg, values))
}

/// Draws a uniformly random action; handy for scripted rollouts.
pub fn random_action<R: Rng + ?Sized>(env: &dyn Environment, rng: &mut R) -> usize {
    rng.random_range(0..env.n_actions())
}
