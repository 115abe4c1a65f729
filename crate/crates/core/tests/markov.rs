use driml::markov::{
    alpha_grid, deflated_power_lambda2, mdp_to_chain, mi_consecutive, mi_stationary, mixing_time, pmi_matrix,
    prop1_witness, random_walk_chain, random_walk_stationary_closed_form, random_walk_sweep, read_matrix_csv,
    spectral_summary, stationary_distribution, write_matrix_csv, Distribution, TransitionMatrix,
};
use driml::par::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_chain(n: usize, rng: &mut ChaCha8Rng) -> TransitionMatrix {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        })
        .collect();
    TransitionMatrix::from_rows(&rows).unwrap()
}

fn step(p: &[f64], t: &TransitionMatrix) -> Vec<f64> {
    let n = p.len();
    (0..n).map(|j| (0..n).map(|i| p[i] * t.get(i, j)).sum()).collect()
}

/// Stationary distribution by repeated application from uniform.
fn iterate_to_stationary(t: &TransitionMatrix) -> Vec<f64> {
    let n = t.n_states();
    let mut p = vec![1.0 / n as f64; n];
    for _ in 0..200_000 {
        p = step(&p, t);
    }
    p
}

#[test]
fn stationary_agrees_with_closed_form_and_iteration() {
    for &(k, alpha) in &[(5, 0.3), (10, 0.499), (10, 0.7), (16, 0.2)] {
        let t = random_walk_chain(k, alpha).unwrap();
        let rho = stationary_distribution(&t, 1e-12).unwrap();
        let closed = random_walk_stationary_closed_form(k, alpha).unwrap();
        let iter = iterate_to_stationary(&t);
        for i in 0..k {
            assert!((rho.probs()[i] - closed.probs()[i]).abs() < 1e-10);
            assert!((rho.probs()[i] - iter[i]).abs() < 1e-9);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [2, 3, 7] {
        let t = random_chain(n, &mut rng);
        let rho = stationary_distribution(&t, 1e-12).unwrap();
        let iter = iterate_to_stationary(&t);
        for i in 0..n {
            assert!((rho.probs()[i] - iter[i]).abs() < 1e-10);
        }
    }
}

#[test]
fn exp_pmi_is_ratio_to_stationary() {
    let t = random_walk_chain(10, 0.7).unwrap();
    let rho = stationary_distribution(&t, 1e-12).unwrap();
    let pmi = pmi_matrix(&t, &rho).unwrap();
    for s in 0..10 {
        for s2 in 0..10 {
            let want = t.get(s, s2) / rho.probs()[s2];
            match pmi.get(s, s2) {
                Some(v) => assert!((v.exp() - want).abs() < 1e-10 * want.max(1.0)),
                None => assert_eq!(want, 0.0),
            }
        }
    }
}

#[test]
fn two_state_second_eigenvalue_is_closed_form() {
    for &(a, b) in &[(0.2, 0.3), (0.9, 0.6), (0.5, 0.05)] {
        let t = TransitionMatrix::from_rows(&[vec![1.0 - a, a], vec![b, 1.0 - b]]).unwrap();
        let s = spectral_summary(&t).unwrap();
        let want = (1.0 - a - b).abs();
        assert!((s.lambda2_mod - want).abs() < 1e-12);
        assert!((s.gap - (1.0 - want)).abs() < 1e-12);
    }
}

#[test]
fn schur_and_power_iteration_agree_on_reversible_chains() {
    for &(k, alpha) in &[(6, 0.3), (10, 0.499), (8, 0.8)] {
        let t = random_walk_chain(k, alpha).unwrap();
        let rho = stationary_distribution(&t, 1e-12).unwrap();
        let schur = spectral_summary(&t).unwrap().lambda2_mod;
        let power = deflated_power_lambda2(&t, &rho, 100_000);
        assert!((schur - power).abs() < 1e-6, "{schur} vs {power}");
    }
}

#[test]
fn random_walk_spectrum_matches_known_eigenvalues() {
    // The reflecting walk has eigenvalues 2 sqrt(a(1-a)) cos(pi j / k) for
    // j = 1..k-1 besides 1.
    for &(k, alpha) in &[(10, 0.499), (7, 0.3)] {
        let t = random_walk_chain(k, alpha).unwrap();
        let want = 2.0 * (alpha * (1.0 - alpha) as f64).sqrt() * (std::f64::consts::PI / k as f64).cos();
        let got = spectral_summary(&t).unwrap().lambda2_mod;
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

fn brute_mixing(t: &TransitionMatrix, eps: f64) -> usize {
    let n = t.n_states();
    let rho = iterate_to_stationary(t);
    let mut rows: Vec<Vec<f64>> = (0..n).map(|i| t.row(i).to_vec()).collect();
    for time in 1.. {
        let worst = rows
            .iter()
            .map(|r| 0.5 * r.iter().zip(&rho).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        if worst <= eps {
            return time;
        }
        rows = rows.iter().map(|r| step(r, t)).collect();
    }
    unreachable!()
}

#[test]
fn mixing_time_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for eps in [0.25, 0.01] {
        let t = random_walk_chain(6, 0.4).unwrap();
        assert_eq!(mixing_time(&t, eps).unwrap(), brute_mixing(&t, eps));
        let t = random_chain(4, &mut rng);
        assert_eq!(mixing_time(&t, eps).unwrap(), brute_mixing(&t, eps));
    }
}

/// MI of the joint `p_t(s) T(s, s')` summed entry by entry.
fn brute_mi(t: &TransitionMatrix, p0: &[f64], steps: usize) -> f64 {
    let n = t.n_states();
    let mut p = p0.to_vec();
    for _ in 0..steps {
        p = step(&p, t);
    }
    let joint: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| p[i] * t.get(i, j)).collect()).collect();
    let next: Vec<f64> = (0..n).map(|j| (0..n).map(|i| joint[i][j]).sum()).collect();
    let mut mi = 0.0;
    for i in 0..n {
        for j in 0..n {
            if joint[i][j] > 0.0 {
                mi += joint[i][j] * (joint[i][j] / (p[i] * next[j])).ln();
            }
        }
    }
    mi
}

#[test]
fn mutual_information_matches_joint_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = random_chain(5, &mut rng);
    let p0 = Distribution::new(vec![0.5, 0.1, 0.1, 0.2, 0.1]).unwrap();
    for steps in [0, 1, 5] {
        let got = mi_consecutive(&t, &p0, steps).unwrap();
        assert!((got - brute_mi(&t, p0.probs(), steps)).abs() < 1e-12);
    }
    let rho = iterate_to_stationary(&t);
    assert!((mi_stationary(&t).unwrap() - brute_mi(&t, &rho, 0)).abs() < 1e-9);
    let indep = TransitionMatrix::rank_one(&p0);
    assert!(mi_stationary(&indep).unwrap() < 1e-12);
}

#[test]
fn policy_collapse_mixes_kernels() {
    let k0 = random_walk_chain(4, 0.2).unwrap();
    let k1 = random_walk_chain(4, 0.9).unwrap();
    let policy: Vec<Distribution> = (0..4).map(|s| Distribution::new(vec![0.25 * s as f64 / 3.0 + 0.5, 0.5 - 0.25 * s as f64 / 3.0]).unwrap()).collect();
    let t = mdp_to_chain(&[k0.clone(), k1.clone()], &policy).unwrap();
    for s in 0..4 {
        let (p0, p1) = (policy[s].probs()[0], policy[s].probs()[1]);
        for s2 in 0..4 {
            assert!((t.get(s, s2) - (p0 * k0.get(s, s2) + p1 * k1.get(s, s2))).abs() < 1e-15);
        }
    }
}

#[test]
fn finite_time_ratios_converge() {
    for k in [4, 8, 16] {
        for alpha in [0.3, 0.7] {
            let t = random_walk_chain(k, alpha).unwrap();
            for eps in [0.1, 0.01] {
                let r = prop1_witness(&t, eps, &Distribution::one_hot(k, 0)).unwrap();
                assert!(r.max_deviation <= eps && r.checked > 0);
            }
        }
    }
}

#[test]
fn sweep_extremes_sit_at_the_symmetric_walk() {
    let alphas = alpha_grid();
    let sweep = random_walk_sweep(10, 10, &alphas, Exec::Sequential).unwrap();
    let argmin = (0..sweep.len()).min_by(|&a, &b| sweep[a].mi.total_cmp(&sweep[b].mi)).unwrap();
    let argmax = (0..sweep.len()).max_by(|&a, &b| sweep[a].inv_gap.total_cmp(&sweep[b].inv_gap)).unwrap();
    assert_eq!(alphas[argmin], 0.499);
    assert_eq!(alphas[argmax], 0.499);
    let par = random_walk_sweep(10, 10, &alphas, Exec::Parallel).unwrap();
    assert_eq!(sweep, par);
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(random_walk_chain(1, 0.5).is_err());
    assert!(random_walk_chain(4, 1.0).is_err());
    assert!(TransitionMatrix::from_rows(&[vec![0.5, 0.6], vec![0.5, 0.5]]).is_err());
    let periodic = TransitionMatrix::cycle(3);
    assert!(stationary_distribution(&periodic, 1e-12).is_err() || spectral_summary(&periodic).unwrap().gap == 0.0);
}

#[test]
fn matrix_dump_round_trips() {
    let t = random_walk_chain(5, 0.3).unwrap();
    let mut buf = Vec::new();
    write_matrix_csv(&mut buf, 5, 5, t.entries()).unwrap();
    let back = read_matrix_csv(&buf[..]).unwrap();
    assert_eq!((back.rows, back.cols), (5, 5));
    assert_eq!(back.values, t.entries());
}
