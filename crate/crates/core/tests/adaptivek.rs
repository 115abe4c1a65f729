mod common;

use driml::adaptivek::{
    continue_matrix, nhg_expectation_bounds, sample_k, window_continue_probs, ActionOddsModel, ContinueMatrix,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{chi_square_p, enumerate_k};

fn check_distribution(a: &ContinueMatrix, window: &[usize], h: usize, seed: u64) {
    let h_eff = h.min(window.len());
    let probs = enumerate_k(&window_continue_probs(a, &window[..h_eff]).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; probs.len()];
    for _ in 0..100_000 {
        counts[sample_k(a, window, h, &mut rng).unwrap() - 1] += 1;
    }
    let p = chi_square_p(&counts, &probs);
    assert!(p > 0.01, "chi-square p = {p}, counts {counts:?}, expected {probs:?}");
}

#[test]
fn homogeneous_continue_matches_enumeration() {
    let a = ContinueMatrix::from_probabilities(2, vec![0.6; 4]).unwrap();
    check_distribution(&a, &[0, 1, 0, 0, 1, 1, 0], 5, 1);
}

#[test]
fn heterogeneous_continue_matches_enumeration() {
    let a = ContinueMatrix::from_probabilities(3, vec![0.9, 0.2, 0.5, 0.7, 0.1, 0.4, 0.35, 0.8, 0.6]).unwrap();
    check_distribution(&a, &[0, 0, 2, 1, 0, 1, 2, 2], 6, 2);
    // Window shorter than the horizon.
    check_distribution(&a, &[1, 2, 1], 5, 3);
}

#[test]
fn single_action_window_always_gives_one() {
    let a = ContinueMatrix::from_probabilities(2, vec![1.0; 4]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        assert_eq!(sample_k(&a, &[1], 5, &mut rng).unwrap(), 1);
    }
}

#[test]
fn expectation_bounds_hold_untruncated() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..5 {
        let n = 4;
        let entries: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.3..0.8)).collect();
        let a = ContinueMatrix::from_probabilities(n, entries).unwrap();
        // A window long enough that reaching its end has negligible mass.
        let window: Vec<usize> = (0..200).map(|_| rng.random_range(0..n)).collect();
        let probs = window_continue_probs(&a, &window).unwrap();
        let bounds = nhg_expectation_bounds(&probs).unwrap();
        let draws = 100_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            sum += sample_k(&a, &window, window.len(), &mut rng).unwrap() as f64;
        }
        let m = sum / draws as f64;
        assert!(!bounds.degenerate);
        assert!(bounds.lower <= m && m <= bounds.upper, "trial {trial}: {} <= {m} <= {}", bounds.lower, bounds.upper);
    }
}

#[test]
fn bounds_flag_degenerate_cases() {
    assert!(nhg_expectation_bounds(&[1.0, 0.5]).unwrap().degenerate);
    assert!(nhg_expectation_bounds(&[0.0, 0.0]).unwrap().degenerate);
    let b = nhg_expectation_bounds(&[0.5, 0.75]).unwrap();
    assert_eq!((b.lower, b.upper), (2.0, 4.0));
    assert!(nhg_expectation_bounds(&[]).is_err());
    assert!(nhg_expectation_bounds(&[1.5]).is_err());
}

#[test]
fn log_odds_match_smoothed_count_formula() {
    // Alternating policy 0 -> 1 -> 0 -> ... over three actions.
    let mut m = ActionOddsModel::new(3);
    let pairs: Vec<(usize, usize)> = (0..40).map(|t| (t % 2, (t + 1) % 2)).collect();
    m.update(&pairs).unwrap();
    let joint = [[0.0, 20.0, 0.0], [20.0, 0.0, 0.0], [0.0; 3]];
    let second: [f64; 3] = [20.0, 20.0, 0.0];
    for i in 0..3 {
        for j in 0..3 {
            let row: f64 = joint[i].iter().sum();
            let want = ((joint[i][j] + 1.0) / (row + 3.0)).ln() - ((second[j] + 1.0) / (40.0 + 3.0)).ln();
            assert!((m.log_odds(i, j) - want).abs() < 1e-12);
        }
    }
    let a = continue_matrix(&m);
    assert!(a.get(0, 1) > a.get(0, 0) && a.get(1, 0) > a.get(1, 1));
    for i in 0..3 {
        let s: f64 = (0..3).map(|j| a.get(i, j)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

fn mean_k(policy: impl Fn(&mut ChaCha8Rng, usize) -> usize, seed: u64) -> f64 {
    let n = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut actions = vec![0];
    for _ in 0..2000 {
        let prev = *actions.last().unwrap();
        actions.push(policy(&mut rng, prev));
    }
    let mut m = ActionOddsModel::new(n);
    let pairs: Vec<(usize, usize)> = actions.windows(2).map(|w| (w[0], w[1])).collect();
    m.update(&pairs).unwrap();
    let a = continue_matrix(&m);
    let mut total = 0.0;
    for s in 0..1000 {
        let start = s % (actions.len() - 6);
        total += sample_k(&a, &actions[start..start + 6], 5, &mut rng).unwrap() as f64;
    }
    total / 1000.0
}

#[test]
fn repetitive_policy_draws_longer_lookaheads_than_uniform() {
    let repetitive = mean_k(|r, prev| if r.random_bool(0.95) { prev } else { r.random_range(0..4) }, 4);
    let uniform = mean_k(|r, _| r.random_range(0..4), 4);
    assert!(repetitive > uniform + 0.5, "repetitive {repetitive} vs uniform {uniform}");
}
