use driml::envs::pacman::{self, N_ACTIONS, N_GHOSTS, RIGHT, UP};
use driml::envs::{
    augment, augment_seeded, read_trace, record_episode, write_trace, ChainEnv, ContinualSchedule, EnvError,
    Environment, IsingConfig, IsingEnv, IsingWallsOverlay, LethalGhost, Observation, PacManConfig, PacManEnv,
    PacManMap,
};
use driml::markov::{random_walk_chain, random_walk_stationary_closed_form};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn state_of(o: &Observation) -> usize {
    o.values.iter().position(|&v| v == 1.0).unwrap()
}

#[test]
fn chain_alpha_one_always_advances() {
    let mut env = ChainEnv::new(6, 1.0, 3).unwrap();
    env.reset();
    env.set_state(0);
    for i in 1..6 {
        let out = env.step(0).unwrap();
        assert_eq!(state_of(&out.observation), i);
    }
    let out = env.step(0).unwrap();
    assert_eq!(state_of(&out.observation), 5);
    assert!(matches!(env.step(1), Err(EnvError::BadAction { .. })));
}

#[test]
fn chain_rejects_bad_params() {
    assert!(ChainEnv::new(1, 0.5, 0).is_err());
    assert!(ChainEnv::new(4, 1.5, 0).is_err());
}

#[test]
fn chain_transitions_match_exact_matrix() {
    let (k, alpha) = (5, 0.3);
    let t = random_walk_chain(k, alpha).unwrap();
    let mut env = ChainEnv::new(k, alpha, 11).unwrap();
    let mut s = state_of(&env.reset());
    let mut counts = vec![0usize; k * k];
    for _ in 0..100_000 {
        let n = state_of(&env.step(0).unwrap().observation);
        counts[s * k + n] += 1;
        s = n;
    }
    for i in 0..k {
        let row: usize = counts[i * k..(i + 1) * k].iter().sum();
        for j in 0..k {
            let p = t.get(i, j);
            let hat = counts[i * k + j] as f64 / row as f64;
            let se = (p * (1.0 - p) / row as f64).sqrt().max(1e-12);
            assert!((hat - p).abs() <= 3.0 * se, "T[{i},{j}] = {p}, empirical {hat}");
        }
    }
}

#[test]
fn chain_occupancy_matches_closed_form() {
    let (k, alpha) = (4, 0.6);
    let rho = random_walk_stationary_closed_form(k, alpha).unwrap();
    let mut env = ChainEnv::new(k, alpha, 5).unwrap();
    env.reset();
    // Batch means absorb the autocorrelation of the walk.
    let (batches, per) = (200, 1000);
    let mut means = vec![vec![0.0; k]; batches];
    for b in means.iter_mut() {
        for _ in 0..per {
            b[state_of(&env.step(0).unwrap().observation)] += 1.0 / per as f64;
        }
    }
    for s in 0..k {
        let xs: Vec<f64> = means.iter().map(|m| m[s]).collect();
        let mean = xs.iter().sum::<f64>() / batches as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
        let se = (var / batches as f64).sqrt();
        assert!((mean - rho.probs()[s]).abs() <= 3.0 * se, "state {s}: {mean} vs {}", rho.probs()[s]);
    }
}

#[test]
fn chain_episode_len_truncates() {
    let mut env = ChainEnv::new(3, 0.5, 0).unwrap().with_episode_len(4);
    env.reset();
    for i in 0..4 {
        let out = env.step(0).unwrap();
        assert_eq!(out.terminal, i == 3);
        assert_eq!(out.truncated(), i == 3);
    }
    assert!(matches!(env.step(0), Err(EnvError::NeedsReset)));
}

#[test]
fn ising_config_validation() {
    let mut cfg = IsingConfig::default();
    cfg.validate().unwrap();
    cfg.patch_center_range = [20, 63];
    assert!(IsingEnv::new(cfg.clone(), 0).is_err());
    cfg.patch_center_range = [21, 64];
    assert!(IsingEnv::new(cfg, 0).is_err());
}

#[test]
fn ising_patch_is_42_cells_wide() {
    let mut env = IsingEnv::new(IsingConfig::default(), 2).unwrap();
    for _ in 0..20 {
        env.reset();
        let (r0, c0, r1, c1) = env.patch_bounds();
        assert_eq!((r1 - r0 + 1, c1 - c0 + 1), (42, 42));
        let (cy, cx) = env.center();
        assert!((21..=63).contains(&cy) && (21..=63).contains(&cx));
        assert_eq!((cy - r0, r1 - cy), (21, 20));
        assert_eq!(env.patch_mask().iter().filter(|&&m| m).count(), 42 * 42);
    }
}

#[test]
fn ising_infinite_temperature_patch_is_fair() {
    let cfg = IsingConfig {
        inv_temperature_beta: 0.0,
        ..IsingConfig::default()
    };
    let mut env = IsingEnv::new(cfg, 4).unwrap();
    env.reset();
    env.fill_patch(1);
    let mut ups = 0usize;
    let mut n = 0usize;
    for _ in 0..20 {
        let out = env.step(0).unwrap();
        for (v, &m) in out.observation.values.iter().zip(env.patch_mask()) {
            if m {
                n += 1;
                ups += (*v > 0.0) as usize;
            }
        }
    }
    let hat = ups as f64 / n as f64;
    assert!((hat - 0.5).abs() <= 3.0 * (0.25 / n as f64).sqrt(), "{hat}");
}

#[test]
fn ising_cold_patch_stays_ordered() {
    let cfg = IsingConfig {
        inv_temperature_beta: 50.0,
        episode_len: 0,
        ..IsingConfig::default()
    };
    let mut env = IsingEnv::new(cfg, 9).unwrap();
    for _ in 0..20 {
        env.reset();
        env.fill_patch(1);
        for _ in 0..30 {
            let out = env.step(0).unwrap();
            for (v, &m) in out.observation.values.iter().zip(env.patch_mask()) {
                if m {
                    assert_eq!(*v, 1.0);
                }
            }
        }
    }
}

/// Mean |3x3 block magnetization| over blocks fully inside / outside the
/// patch.
fn block_magnetization(env: &IsingEnv) -> (f64, f64) {
    let lat = env.lattice();
    let side = lat.height();
    let mask = env.patch_mask();
    let (mut inside, mut outside) = ((0.0, 0usize), (0.0, 0usize));
    for by in 0..side / 3 {
        for bx in 0..side / 3 {
            let cells: Vec<(usize, usize)> = (0..9).map(|i| (by * 3 + i / 3, bx * 3 + i % 3)).collect();
            let m = cells.iter().map(|&(y, x)| lat.get(y, x) as f64).sum::<f64>().abs() / 9.0;
            let n_in = cells.iter().filter(|&&(y, x)| mask[y * side + x]).count();
            if n_in == 9 {
                inside.0 += m;
                inside.1 += 1;
            } else if n_in == 0 {
                outside.0 += m;
                outside.1 += 1;
            }
        }
    }
    (inside.0 / inside.1 as f64, outside.0 / outside.1 as f64)
}

#[test]
fn ising_patch_orders_more_than_background() {
    let mut env = IsingEnv::new(IsingConfig::default(), 21).unwrap();
    let mut diffs = Vec::new();
    for _ in 0..100 {
        env.reset();
        for _ in 0..32 {
            env.step(0).unwrap();
        }
        let (i, o) = block_magnetization(&env);
        diffs.push(i - o);
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean > 3.0 * sd / n.sqrt(), "mean gap {mean}, sd {sd}");
}

#[test]
fn ising_background_has_no_memory_and_patch_does() {
    let mut env = IsingEnv::new(IsingConfig::default(), 8).unwrap();
    let side = 84;
    let (mut out_sum, mut out_n) = (0.0, 0usize);
    // Patch cells: frequency of +1 given the previous neighbor field sign.
    let (mut pos_up, mut pos_n, mut neg_up, mut neg_n) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..5 {
        let mut prev = env.reset().values;
        for _ in 0..32 {
            let cur = env.step(0).unwrap().observation.values;
            let mask = env.patch_mask();
            for y in 1..side - 1 {
                for x in 1..side - 1 {
                    let i = y * side + x;
                    if !mask[i] {
                        out_sum += prev[i] * cur[i];
                        out_n += 1;
                        continue;
                    }
                    let field: f64 = [i - side, i + side, i - 1, i + 1]
                        .iter()
                        .filter(|&&j| mask[j])
                        .map(|&j| prev[j])
                        .sum();
                    if field > 0.0 {
                        pos_n += 1;
                        pos_up += (cur[i] > 0.0) as usize;
                    } else if field < 0.0 {
                        neg_n += 1;
                        neg_up += (cur[i] > 0.0) as usize;
                    }
                }
            }
            prev = cur;
        }
    }
    let corr = out_sum / out_n as f64;
    assert!(corr.abs() <= 3.0 / (out_n as f64).sqrt(), "background lag-1 correlation {corr}");
    let (p_pos, p_neg) = (pos_up as f64 / pos_n as f64, neg_up as f64 / neg_n as f64);
    assert!(p_pos > 0.9 && p_neg < 0.1, "{p_pos} {p_neg}");
}

#[test]
fn ising_is_deterministic_per_seed() {
    let run = |seed| {
        let mut env = IsingEnv::new(IsingConfig::default(), seed).unwrap();
        let mut v = env.reset().values;
        for _ in 0..5 {
            v.extend(env.step(0).unwrap().observation.values);
        }
        v
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn bundled_map_parses() {
    let map = PacManMap::parse(pacman::DEFAULT_MAP).unwrap();
    assert_eq!(map.agent_spawn(), (16, 9));
    assert!(map.ghost_spawns().iter().all(|&g| map.in_pen(g)));
    assert!(map.food_count() > 100);
}

#[test]
fn malformed_maps_are_rejected() {
    let rows: Vec<String> = pacman::DEFAULT_MAP.lines().map(String::from).collect();
    let join = |r: &[String]| r.join("\n");
    assert!(matches!(PacManMap::parse(&join(&rows[1..])), Err(EnvError::Map(_))));
    let mut bad = rows.clone();
    bad[9] = bad[9].replacen('G', " ", 1);
    assert!(PacManMap::parse(&join(&bad)).unwrap_err().to_string().contains("ghost spawns"));
    let mut bad = rows.clone();
    bad[3] = bad[3].replacen('.', "x", 1);
    assert!(PacManMap::parse(&join(&bad)).is_err());
    // Wall off the bottom-left room.
    let mut bad = rows.clone();
    bad[17] = "####.#.#####.#.#.##".into();
    bad[18] = "#...##...#...#....#".into();
    bad[19] = "#...##............#".into();
    let err = PacManMap::parse(&join(&bad)).unwrap_err().to_string();
    assert!(err.contains("connected"), "{err}");
    let cfg = PacManConfig {
        grid: join(&rows[..20]),
        ..PacManConfig::default()
    };
    assert!(PacManEnv::new(cfg, 0).is_err());
}

#[test]
fn walking_into_a_wall_costs_only_the_step_penalty() {
    let cfg = PacManConfig {
        step_penalty: -0.01,
        ..PacManConfig::default()
    };
    let mut env = PacManEnv::new(cfg, 0).unwrap();
    env.reset();
    let start = env.agent_position();
    assert!(env.map().is_wall(start.0 - 1, start.1));
    let out = env.step(UP).unwrap();
    assert_eq!(env.agent_position(), start);
    assert_eq!(out.reward, -0.01);
    assert!(!out.terminal);
}

#[test]
fn fully_random_ghosts_pick_uniform_actions() {
    let cfg = PacManConfig {
        ghost_random_prob_eps: 1.0,
        ..PacManConfig::default()
    };
    let mut env = PacManEnv::new(cfg, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = [0usize; N_ACTIONS];
    env.reset();
    let steps = 10_000;
    for _ in 0..steps {
        let out = env.step(rng.random_range(0..N_ACTIONS)).unwrap();
        if out.info["died"] == 0.0 {
            for a in env.last_ghost_actions() {
                counts[a] += 1;
            }
        }
        if out.terminal {
            env.reset();
        }
    }
    let n: usize = counts.iter().sum();
    let p = 1.0 / N_ACTIONS as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    for c in counts {
        let hat = c as f64 / n as f64;
        assert!((hat - p).abs() <= 3.0 * se, "{counts:?}");
    }
}

#[test]
fn wandering_ghosts_leave_the_pen() {
    let cfg = PacManConfig {
        lethal_ghost_index: LethalGhost::Index(0),
        ..PacManConfig::default()
    };
    let mut env = PacManEnv::new(cfg, 0).unwrap();
    env.reset();
    // Parked far from the only lethal ghost's corner.
    env.place_agent((19, 17));
    let mut left = [false; N_GHOSTS];
    for _ in 0..40 {
        env.step(pacman::NOOP).unwrap();
        for (i, g) in env.ghost_positions().iter().enumerate() {
            left[i] |= !env.map().in_pen(*g);
        }
    }
    assert_eq!(left, [true; N_GHOSTS]);
}

#[test]
fn only_the_lethal_ghost_kills() {
    for ghost in 0..N_GHOSTS {
        let cfg = PacManConfig {
            lethal_ghost_index: LethalGhost::Index(2),
            ..PacManConfig::default()
        };
        let mut env = PacManEnv::new(cfg, 1).unwrap();
        env.reset();
        let (y, x) = env.agent_position();
        env.place_ghost(ghost, (y, x + 1));
        let out = env.step(RIGHT).unwrap();
        assert_eq!(out.terminal, ghost == 2, "ghost {ghost}");
        if ghost == 2 {
            assert_eq!(out.reward, 1.0 - 10.0);
            assert_eq!(out.info["died"], 1.0);
            assert!(!out.truncated());
            assert!(matches!(env.step(0), Err(EnvError::NeedsReset)));
        } else {
            assert_eq!(out.reward, 1.0);
        }
    }
}

#[test]
fn boosted_agent_eats_ghosts() {
    let mut env = PacManEnv::new(PacManConfig::default(), 1).unwrap();
    env.reset();
    env.place_agent((3, 1));
    env.place_ghost(0, (2, 1));
    let out = env.step(UP).unwrap();
    assert_eq!(out.reward, 5.0);
    assert!(!out.terminal);
    let g = env.ghost_positions()[0];
    assert!(env.map().in_pen(g), "eaten ghost back in the pen, found at {g:?}");
    // Boost lasts for the pickup step and nine more.
    assert_eq!(env.boost_left(), 9);
}

#[test]
fn pacman_rewards_lengths_and_pixels_stay_in_range() {
    let cfg = PacManConfig {
        ghost_random_prob_eps: 0.5,
        lethal_ghost_index: LethalGhost::Index(1),
        step_cap: 60,
        ..PacManConfig::default()
    };
    let (lo, hi) = cfg.reward_bounds();
    let mut env = PacManEnv::new(cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut saw_cap = false;
    for _ in 0..40 {
        let obs = env.reset();
        assert_eq!(obs.shape(), [3, 21, 19]);
        let mut len = 0;
        loop {
            let out = env.step(rng.random_range(0..N_ACTIONS)).unwrap();
            len += 1;
            assert!((lo..=hi).contains(&out.reward));
            assert!(out.observation.values.iter().all(|v| (0.0..=1.0).contains(v)));
            if out.terminal {
                saw_cap |= out.truncated();
                assert_eq!(out.truncated(), len == 60 && out.info["died"] == 0.0);
                break;
            }
        }
        assert!(len <= 60);
    }
    assert!(saw_cap);
}

#[test]
fn lethal_ghost_config_accepts_index_or_all() {
    #[derive(serde::Deserialize)]
    struct W {
        l: LethalGhost,
    }
    let w: W = toml::from_str("l = 3").unwrap();
    assert_eq!(w.l, LethalGhost::Index(3));
    let w: W = toml::from_str("l = \"all\"").unwrap();
    assert_eq!(w.l, LethalGhost::ALL);
    let cfg = PacManConfig {
        lethal_ghost_index: LethalGhost::Index(4),
        ..PacManConfig::default()
    };
    assert!(PacManEnv::new(cfg, 0).is_err());
}

fn play<E: Environment + ?Sized>(env: &mut E, seed: u64, episodes: usize) -> (Vec<driml::envs::TraceRecord>, Vec<Observation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::new();
    let mut frames = Vec::new();
    for _ in 0..episodes {
        let (t, o) = record_episode(env, 80, &mut rng).unwrap();
        trace.extend(t);
        frames.extend(o);
    }
    (trace, frames)
}

#[test]
fn pacman_traces_are_reproducible() {
    let cfg = PacManConfig {
        ghost_random_prob_eps: 0.3,
        ..PacManConfig::default()
    };
    let a = play(&mut PacManEnv::new(cfg.clone(), 4).unwrap(), 1, 3);
    let b = play(&mut PacManEnv::new(cfg.clone(), 4).unwrap(), 1, 3);
    assert_eq!(a, b);
    let c = play(&mut PacManEnv::new(cfg, 5).unwrap(), 1, 3);
    assert_ne!(a.1, c.1);
}

#[test]
fn continual_schedule_cycles_lethal_ghost() {
    let cfg = PacManConfig {
        task_switch_every: 1,
        ..PacManConfig::default()
    };
    let mut env = pacman::build(&cfg, 0).unwrap();
    let mut seen = Vec::new();
    for _ in 0..5 {
        env.reset();
        seen.push(env.task_id());
    }
    assert_eq!(seen, vec![0, 1, 2, 3, 0]);
}

#[test]
fn continual_schedule_counts_segments() {
    let base = PacManEnv::new(PacManConfig::default(), 0).unwrap();
    let mut env = ContinualSchedule::new(base, 3).unwrap();
    for _ in 0..10 {
        env.reset();
    }
    let b = env.boundaries();
    assert_eq!(b.len(), 10usize.div_ceil(3));
    assert_eq!(b.iter().map(|s| (s.episode, s.task)).collect::<Vec<_>>(), vec![(0, 0), (3, 1), (6, 2), (9, 3)]);
    assert!(ContinualSchedule::new(ChainEnv::new(3, 0.5, 0).unwrap(), 2).is_err());
}

#[test]
fn continual_schedule_is_transparent_within_a_task() {
    let cfg = PacManConfig {
        ghost_random_prob_eps: 0.2,
        lethal_ghost_index: LethalGhost::Index(0),
        ..PacManConfig::default()
    };
    let mut plain = PacManEnv::new(cfg.clone(), 6).unwrap();
    let mut wrapped = ContinualSchedule::new(PacManEnv::new(cfg, 6).unwrap(), 1000).unwrap();
    assert_eq!(play(&mut plain, 2, 4), play(&mut wrapped, 2, 4));
}

#[test]
fn wall_overlay_touches_only_walls() {
    let cfg = PacManConfig {
        ghost_random_prob_eps: 0.2,
        ..PacManConfig::default()
    };
    let noisy_cfg = PacManConfig {
        ising_walls: true,
        ..cfg.clone()
    };
    let walls = PacManMap::parse(&cfg.grid).unwrap().wall_mask();
    let (ta, fa) = play(&mut *pacman::build(&cfg, 3).unwrap(), 9, 2);
    let (tb, fb) = play(&mut *pacman::build(&noisy_cfg, 3).unwrap(), 9, 2);
    assert_eq!(ta, tb);
    let cells = walls.len();
    let mut wall_diffs = 0;
    for (a, b) in fa.iter().zip(&fb) {
        for c in 0..3 {
            for i in 0..cells {
                let (x, y) = (a.values[c * cells + i], b.values[c * cells + i]);
                if walls[i] {
                    wall_diffs += (x != y) as usize;
                } else {
                    assert_eq!(x, y);
                }
            }
        }
    }
    assert!(wall_diffs > 0);

    let base = PacManEnv::new(cfg.clone(), 3).unwrap();
    let mut overlay = IsingWallsOverlay::new(base, walls.clone(), 21, 19, 2.5, 3);
    overlay.reset();
    for _ in 0..20 {
        overlay.step(0).unwrap();
        for (s, &w) in overlay.lattice().spins().iter().zip(&walls) {
            if !w {
                assert_eq!(*s, -1);
            }
        }
    }
}

#[test]
fn disabled_wall_overlay_is_identity() {
    let cfg = PacManConfig {
        ghost_random_prob_eps: 0.4,
        ..PacManConfig::default()
    };
    let walls = PacManMap::parse(&cfg.grid).unwrap().wall_mask();
    let mut plain = PacManEnv::new(cfg.clone(), 12).unwrap();
    let mut off = IsingWallsOverlay::new(PacManEnv::new(cfg, 12).unwrap(), walls, 21, 19, 2.5, 12).with_enabled(false);
    assert_eq!(play(&mut plain, 4, 3), play(&mut off, 4, 3));
}

#[test]
fn augment_identity_shape_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let obs = Observation::new(3, 8, 6, (0..144).map(|_| rng.random::<f64>()).collect());
    assert_eq!(augment_seeded(&obs, 1.0, 0.0, 7).unwrap(), obs);
    let a = augment_seeded(&obs, 0.8, 0.4, 7).unwrap();
    assert_eq!(a.shape(), obs.shape());
    assert_eq!(a, augment_seeded(&obs, 0.8, 0.4, 7).unwrap());
    assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
    let cropped = augment(&obs, 0.5, 0.0, &mut rng).unwrap();
    assert!(cropped.values.iter().all(|v| obs.values.contains(v)));
    assert!(augment_seeded(&obs, 0.0, 0.0, 1).is_err());
    assert!(augment_seeded(&obs, 1.2, 0.0, 1).is_err());
}

#[test]
fn trace_round_trips() {
    let mut env = PacManEnv::new(PacManConfig::default(), 0).unwrap();
    let (trace, _) = play(&mut env, 0, 2);
    let mut buf = Vec::new();
    write_trace(&mut buf, &trace).unwrap();
    assert_eq!(String::from_utf8_lossy(&buf).lines().count(), trace.len());
    assert_eq!(read_trace(&buf[..]).unwrap(), trace);
    assert!(read_trace(&b"{\"step\": 1}\n"[..]).is_err());
}
