mod common;

use driml::agent::{
    c51_loss, c51_loss_on_graph, categorical_projection, Agent, AgentConfig, AgentVariant, EpsilonSchedule, FrameSpec,
    FrameStacker, ReplayBuffer, SupportGrid, TransitionBatch, UpdateMode,
};
use driml::diffkit::{Gradients, Graph, ParamStore, Tensor};
use driml::encoder::{ArchConfig, DimHeads, Encoder, N_ATOMS};
use driml::envs::{ChainEnv, Environment, Observation};
use driml::infomax::{composite_dim_loss, DimPair, DimWeights};
use driml::par::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{c51_reference, filled_buffer, frame, hat_projection, random_distribution, small_arch, small_config};

#[test]
fn projection_matches_hat_function_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let grid = SupportGrid::new(-10.0, 50.0).unwrap();
    for case in 0..10_000 {
        let probs = random_distribution(&mut rng);
        let ret = rng.random_range(-80.0..80.0);
        // Include the terminal and undiscounted ends.
        let gamma_n = match case % 10 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random::<f64>(),
        };
        let got = categorical_projection(&probs, ret, gamma_n, &grid);
        let want = hat_projection(&probs, ret, gamma_n, -10.0, 50.0);
        for i in 0..51 {
            assert!((got[i] - want[i]).abs() <= 1e-12, "case {case} atom {i}: {} vs {}", got[i], want[i]);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn projection_identity_and_terminal_cases() {
    let grid = SupportGrid::new(-10.0, 50.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let probs = random_distribution(&mut rng);
    let same = categorical_projection(&probs, 0.0, 1.0, &grid);
    for i in 0..51 {
        assert!((same[i] - probs[i]).abs() < 1e-12);
    }
    // Terminal: all mass at the (clamped) reward.
    let t = categorical_projection(&probs, 100.0, 0.0, &grid);
    assert!((t[50] - 1.0).abs() < 1e-12);
    // -0.1 sits a quarter of the way from atom 8 (-0.4) to atom 9 (0.8).
    let t = categorical_projection(&probs, -0.1, 0.0, &grid);
    assert!((t[8] - 0.75).abs() < 1e-12 && (t[9] - 0.25).abs() < 1e-12);
    assert!(SupportGrid::new(1.0, 1.0).is_err());
}

#[test]
fn epsilon_schedule_is_linear_then_flat() {
    let s = EpsilonSchedule {
        start: 0.1,
        end: 0.01,
        decay_steps: 100_000,
    };
    assert_eq!(s.value(0), 0.1);
    assert!((s.value(50_000) - 0.055).abs() < 1e-15);
    assert_eq!(s.value(100_000), 0.01);
    assert_eq!(s.value(10_000_000), 0.01);
}

#[test]
fn c51_loss_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let agent = Agent::new(small_config(), frame(), 3, &mut rng).unwrap();
    // A target network that differs from the online one.
    let mut target = agent.store().clone();
    for p in target.ids().collect::<Vec<_>>() {
        for v in target.get_mut(p).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let grid = SupportGrid::new(-10.0, 50.0).unwrap();
    let buf = filled_buffer(3, 20, 3);
    for trial in 0..5 {
        let pos = buf.sample_positions(8, &mut rng).unwrap();
        let batch = buf.batch(&pos, &vec![1; 8], 3, 0.9).unwrap();
        let got = c51_loss(agent.store(), &target, agent.encoder(), &batch, &grid).unwrap();

        let want = c51_reference(&agent, &target, &batch, &grid);
        assert!((got - want).abs() <= 1e-9, "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn replay_spans_never_cross_episode_boundaries() {
    let buf = filled_buffer(4, 60, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tag = |t: &Tensor, item: usize| {
        let len = frame().input_len();
        // Newest frame of the stack, first pixel.
        (t.data()[item * len + len / 2] * 255.0).round() as usize
    };
    for _ in 0..50 {
        let pos = buf.sample_positions(16, &mut rng).unwrap();
        let ks: Vec<usize> = (0..16).map(|_| rng.random_range(1..12)).collect();
        let batch = buf.batch(&pos, &ks, 5, 0.9).unwrap();
        for i in 0..16 {
            let ep = tag(&batch.obs, i);
            assert_eq!(tag(&batch.future_obs, i), ep);
            assert_eq!(tag(&batch.next_obs, i), ep);
            assert!(batch.ks[i] >= 1 && batch.ks[i] <= ks[i].max(1));
            assert!(batch.ks[i] <= buf.max_lookahead(pos[i]));
            if batch.terminal[i] {
                assert_eq!(batch.discounts[i], 0.0);
            }
        }
    }
}

#[test]
fn n_step_returns_and_discounts_by_hand() {
    let spec = FrameSpec::binary(1, 1, 1);
    let mut buf = ReplayBuffer::new(spec, 100).unwrap();
    let o = |v: f64| Observation::new(1, 1, 1, vec![v]);
    buf.start_episode(&o(0.0)).unwrap();
    buf.push_step(0, 1.0, &o(1.0), false, false).unwrap();
    buf.push_step(0, 2.0, &o(0.0), false, false).unwrap();
    buf.push_step(0, 4.0, &o(1.0), true, true).unwrap();
    let s = buf.n_step(0, 2, 0.5);
    assert_eq!((s.ret, s.discount, s.next, s.terminal), (1.0 + 0.5 * 2.0, 0.25, 2, false));
    let s = buf.n_step(0, 7, 0.5);
    assert_eq!((s.ret, s.discount, s.next, s.terminal), (1.0 + 1.0 + 1.0, 0.0, 3, true));
    // With gamma = 0 the terminal flag still comes from the episode.
    let s = buf.n_step(1, 1, 0.0);
    assert_eq!((s.ret, s.discount, s.terminal), (2.0, 0.0, false));
    // Truncated (not terminal) episode: bootstrap from the last frame.
    buf.start_episode(&o(0.0)).unwrap();
    buf.push_step(1, 3.0, &o(1.0), false, true).unwrap();
    let s = buf.n_step(4, 5, 0.9);
    assert_eq!((s.ret, s.next, s.terminal), (3.0, 5, false));
    assert!((s.discount - 0.9).abs() < 1e-15);
    assert_eq!(buf.transitions(), 4);
    assert_eq!(buf.action_window(0, 5), vec![0, 0, 0]);
}

#[test]
fn frame_stack_pads_with_zeros_and_upscales() {
    let spec = FrameSpec::rgb(1, 1, 2).with_stack(3, 2);
    let mut st = FrameStacker::new(spec);
    let o = |a: f64, b: f64| Observation::new(1, 1, 2, vec![a / 255.0, b / 255.0]);
    st.reset(&o(10.0, 20.0)).unwrap();
    let x = st.input();
    assert_eq!(x.len(), 3 * 2 * 4);
    assert!(x[..16].iter().all(|&v| v == 0.0));
    let last: Vec<f64> = x[16..].iter().map(|v| (v * 255.0).round()).collect();
    assert_eq!(last, vec![10.0, 10.0, 20.0, 20.0, 10.0, 10.0, 20.0, 20.0]);
    st.push(&o(30.0, 40.0)).unwrap();
    st.push(&o(50.0, 60.0)).unwrap();
    st.push(&o(70.0, 80.0)).unwrap();
    let x: Vec<f64> = st.input().iter().map(|v| (v * 255.0).round()).collect();
    assert_eq!([x[0], x[2], x[8], x[16]], [30.0, 40.0, 50.0, 70.0]);
    assert!(spec.encode(&Observation::new(1, 1, 2, vec![0.5, 0.0])).is_err());
}

fn train(cfg: AgentConfig, seed: u64, steps: usize, exec: Exec) -> Agent {
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    let mut agent = Agent::new(cfg, frame(), 3, &mut init).unwrap().with_exec(exec);
    let buf = filled_buffer(seed, 30, 3);
    let mut sample = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut krng = ChaCha8Rng::seed_from_u64(seed + 200);
    for _ in 0..steps {
        agent.train_step(&buf, &mut sample, &mut krng).unwrap();
    }
    agent
}

fn same_params(a: &ParamStore, b: &ParamStore, prefix: &str) -> bool {
    a.ids()
        .filter(|&id| a.name(id).starts_with(prefix))
        .all(|id| a.get(id).data().iter().zip(b.get(id).data()).all(|(x, y)| x.to_bits() == y.to_bits()))
}

#[test]
fn c51_only_never_touches_contrastive_heads() {
    let cfg = AgentConfig {
        variant: AgentVariant::C51Only,
        ..small_config()
    };
    let mut init = ChaCha8Rng::seed_from_u64(6);
    let fresh = Agent::new(cfg.clone(), frame(), 3, &mut init).unwrap();
    let trained = train(cfg, 6, 5, Exec::Sequential);
    assert!(same_params(fresh.store(), trained.store(), "dim."));
    assert!(!same_params(fresh.store(), trained.store(), "enc."));
}

#[test]
fn zero_weights_match_c51_only() {
    let zero = AgentConfig {
        weights: DimWeights::default(),
        ..small_config()
    };
    let c51 = AgentConfig {
        variant: AgentVariant::C51Only,
        ..small_config()
    };
    let a = train(zero, 7, 5, Exec::Sequential);
    let b = train(c51, 7, 5, Exec::Sequential);
    assert!(same_params(a.store(), b.store(), ""));
    assert!(same_params(a.target_store(), b.target_store(), ""));
}

#[test]
fn training_is_deterministic_across_exec_modes() {
    for variant in [AgentVariant::Fix { k: 2 }, AgentVariant::Ada { h: 4 }, AgentVariant::RandK { h: 3 }] {
        for mode in [UpdateMode::Summed, UpdateMode::Sequential] {
            let cfg = AgentConfig {
                variant,
                update_mode: mode,
                ..small_config()
            };
            let a = train(cfg.clone(), 8, 4, Exec::Sequential);
            let b = train(cfg.clone(), 8, 4, Exec::Sequential);
            let c = train(cfg, 8, 4, Exec::Parallel);
            assert!(same_params(a.store(), b.store(), ""));
            assert!(same_params(a.store(), c.store(), ""));
            assert_eq!(a.odds(), c.odds());
        }
    }
}

#[test]
fn adaptive_variant_updates_odds_and_bounds_k() {
    let cfg = AgentConfig {
        variant: AgentVariant::Ada { h: 4 },
        ..small_config()
    };
    let mut init = ChaCha8Rng::seed_from_u64(9);
    let mut agent = Agent::new(cfg, frame(), 3, &mut init).unwrap();
    let buf = filled_buffer(9, 30, 3);
    let mut s = ChaCha8Rng::seed_from_u64(1);
    let mut k = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let m = agent.train_step(&buf, &mut s, &mut k).unwrap();
        assert!(m.k_min >= 1 && m.k_max <= 4 && m.k_mean >= 1.0);
    }
    assert_eq!(agent.odds().updates(), 10);
    assert!(agent.odds().total() > 0.0);
}

/// Gradient of the summed objective equals the sum of the gradients of its
/// parts.
#[test]
fn summed_objective_gradient_is_additive() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let arch = small_arch();
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &arch, [2, 3, 3], 3, &mut rng).unwrap();
    let heads = DimHeads::new(&mut store, &arch, &enc, &mut rng);
    let buf = filled_buffer(10, 20, 3);
    let pos = buf.sample_positions(6, &mut rng).unwrap();
    let batch: TransitionBatch = buf.batch(&pos, &[2; 6], 3, 0.9).unwrap();
    let targets = Tensor::from_fn(&[6, N_ATOMS], |_| 1.0 / N_ATOMS as f64);
    let weights = DimWeights {
        lambda_4t4: 0.7,
        lambda_3t3: 1.3,
        lambda_3t4: 0.0,
        lambda_4t3: 0.0,
    };
    let grads_of = |rl: bool, dim: bool| {
        let mut grads = Gradients::for_store(&store);
        let mut g = Graph::new(&store);
        let a = enc.encode(&mut g, batch.obs.clone()).unwrap();
        let b = enc.encode(&mut g, batch.future_obs.clone()).unwrap();
        let mut total = g.constant(Tensor::scalar(0.0));
        if rl {
            let l = c51_loss_on_graph(&mut g, &a, &batch.actions, &targets).unwrap();
            total = g.add(total, l).unwrap();
        }
        if dim {
            let pair = DimPair {
                current: &a,
                later: &b,
                actions: Some(&batch.actions),
            };
            let c = composite_dim_loss(&mut g, &heads, pair, &weights, 20.0).unwrap();
            total = g.add(total, c.total).unwrap();
        }
        g.backward(total, &mut grads).unwrap();
        grads
    };
    let both = grads_of(true, true);
    let rl = grads_of(true, false);
    let dim = grads_of(false, true);
    for id in store.ids() {
        let get = |gr: &Gradients| gr.get(id).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; store.get(id).len()]);
        let (s, r, d) = (get(&both), get(&rl), get(&dim));
        for i in 0..s.len() {
            assert!((s[i] - r[i] - d[i]).abs() <= 1e-12 * (1.0 + s[i].abs()), "{}", store.name(id));
        }
    }
}

#[test]
fn chain_contrastive_loss_falls_below_chance() {
    let k = 10;
    let batch = 32;
    let cfg = AgentConfig {
        arch: ArchConfig {
            conv: vec![],
            hidden: 64,
            action_embed: 8,
            global_dim: 32,
            local_dim: 32,
            global_hidden: 64,
            local_hidden: 32,
            value_head: false,
        },
        variant: AgentVariant::Fix { k: 1 },
        weights: DimWeights {
            lambda_4t4: 1.0,
            ..DimWeights::default()
        },
        support: None,
        batch_size: batch,
        lr: 1e-3,
        ..AgentConfig::default()
    };
    let spec = FrameSpec::binary(k, 1, 1);
    let mut init = ChaCha8Rng::seed_from_u64(11);
    let mut agent = Agent::new(cfg, spec, 1, &mut init).unwrap();
    let mut env = ChainEnv::new(k, 0.499, 12).unwrap().with_episode_len(500);
    let mut buf = ReplayBuffer::new(spec, 100_000).unwrap();
    let o = env.reset();
    buf.start_episode(&o).unwrap();
    for t in 0..2000 {
        let s = env.step(0).unwrap();
        buf.push_step(0, 0.0, &s.observation, false, s.terminal || t == 1999).unwrap();
        if s.terminal && t < 1999 {
            let o = env.reset();
            buf.start_episode(&o).unwrap();
        }
    }
    let (mut s, mut kr) = (ChaCha8Rng::seed_from_u64(13), ChaCha8Rng::seed_from_u64(14));
    let mut recent = Vec::new();
    for step in 0..1500 {
        let m = agent.train_step(&buf, &mut s, &mut kr).unwrap();
        if step >= 1400 {
            recent.push(m.loss_dim["4t4"]);
        }
    }
    let mean = recent.iter().sum::<f64>() / recent.len() as f64;
    assert!(mean < (batch as f64).ln() - 0.5, "final NCE {mean} vs log B {}", (batch as f64).ln());
}
