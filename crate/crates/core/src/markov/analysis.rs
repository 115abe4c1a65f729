use nalgebra::DMatrix;

use super::types::{Distribution, RatioModel, SpectralSummary, TransitionMatrix};
use super::{MarkovError, Result};
use crate::par::Exec;

/// Biased random walk on `0..k`: step up with probability `alpha`, down
/// otherwise; the walk holds at the bottom with `1 - alpha` and at the top
/// with `alpha`.
pub fn random_walk_chain(k: usize, alpha: f64) -> Result<TransitionMatrix> {
    if k < 2 {
        return Err(MarkovError::TooFewStates { min: 2, got: k });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MarkovError::InvalidAlpha(alpha));
    }
    let mut entries = vec![0.0; k * k];
    for i in 0..k {
        let up = if i + 1 < k { i + 1 } else { i };
        let down = if i > 0 { i - 1 } else { i };
        entries[i * k + up] += alpha;
        entries[i * k + down] += 1.0 - alpha;
    }
    TransitionMatrix::new(k, entries)
}

/// `rho(i) = r^i (1 - r) / (1 - r^k)` with `r = alpha / (1 - alpha)`;
/// uniform when `alpha == 0.5`.
pub fn random_walk_stationary_closed_form(k: usize, alpha: f64) -> Result<Distribution> {
    if k < 2 {
        return Err(MarkovError::TooFewStates { min: 2, got: k });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MarkovError::InvalidAlpha(alpha));
    }
    if alpha == 0.5 {
        return Ok(Distribution::uniform(k));
    }
    let r = alpha / (1.0 - alpha);
    let probs: Vec<f64> = if r < 1.0 {
        let norm = (1.0 - r) / (1.0 - r.powi(k as i32));
        (0..k).map(|i| r.powi(i as i32) * norm).collect()
    } else {
        // Mirror so powers stay below one for large k.
        let s = 1.0 / r;
        let norm = (1.0 - s) / (1.0 - s.powi(k as i32));
        (0..k).map(|i| s.powi((k - 1 - i) as i32) * norm).collect()
    };
    Ok(Distribution::from_unnormalized(probs))
}

/// Default power bound for the primitivity check (Wielandt's bound).
pub fn wielandt_bound(n: usize) -> usize {
    (n - 1) * (n - 1) + 1
}

/// Ergodicity check: some power of `t` up to `max_power` must be strictly
/// positive. For stochastic matrices positivity of `T^m` persists for all
/// larger powers, so checking `T^max_power` suffices.
pub fn check_ergodic(t: &TransitionMatrix, max_power: usize) -> Result<()> {
    let n = t.n_states();
    let pattern: Vec<bool> = t.entries().iter().map(|&v| v > 0.0).collect();
    let power = bool_matrix_power(&pattern, n, max_power.max(1));
    let zeros = power.iter().filter(|&&b| !b).count();
    if zeros == 0 {
        return Ok(());
    }
    let reason = if !is_irreducible(&pattern, n) {
        format!("chain is reducible; T^{max_power} has {zeros} zero entries")
    } else {
        format!(
            "chain is irreducible but no power up to {max_power} is strictly positive \
             (periodic or bound too small); T^{max_power} has {zeros} zero entries"
        )
    };
    Err(MarkovError::NonErgodic { reason })
}

fn bool_matmul(a: &[bool], b: &[bool], n: usize) -> Vec<bool> {
    let mut out = vec![false; n * n];
    for i in 0..n {
        for k in 0..n {
            if !a[i * n + k] {
                continue;
            }
            for j in 0..n {
                out[i * n + j] |= b[k * n + j];
            }
        }
    }
    out
}

fn bool_matrix_power(m: &[bool], n: usize, mut e: usize) -> Vec<bool> {
    let mut result: Option<Vec<bool>> = None;
    let mut base = m.to_vec();
    while e > 0 {
        if e & 1 == 1 {
            result = Some(match result {
                None => base.clone(),
                Some(r) => bool_matmul(&r, &base, n),
            });
        }
        e >>= 1;
        if e > 0 {
            base = bool_matmul(&base, &base, n);
        }
    }
    result.expect("exponent is positive")
}

fn is_irreducible(pattern: &[bool], n: usize) -> bool {
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let edge = if forward {
                    pattern[i * n + j]
                } else {
                    pattern[j * n + i]
                };
                if edge && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.iter().all(|&s| s)
    };
    reach(true) && reach(false)
}

/// Stationary distribution `rho` with `||rho T - rho||_1 <= tol`.
pub fn stationary_distribution(t: &TransitionMatrix, tol: f64) -> Result<Distribution> {
    stationary_distribution_checked(t, tol, wielandt_bound(t.n_states()))
}

pub fn stationary_distribution_checked(
    t: &TransitionMatrix,
    tol: f64,
    max_power: usize,
) -> Result<Distribution> {
    check_ergodic(t, max_power)?;
    let n = t.n_states();
    // Solve rho (I - T) = 0 with the last equation replaced by sum(rho) = 1.
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            // Row i of the system is column i of (I - T).
            let id = if i == j { 1.0 } else { 0.0 };
            a[i * n + j] = id - t.get(j, i);
        }
    }
    for j in 0..n {
        a[(n - 1) * n + j] = 1.0;
    }
    let mut b = vec![0.0; n];
    b[n - 1] = 1.0;
    let mut rho = solve_dense(a, b, n).unwrap_or_else(|| vec![1.0 / n as f64; n]);
    for _ in 0..4 {
        rho = t.left_mul(&rho);
    }
    let mut dist = Distribution::from_unnormalized(rho);
    let mut residual = stationary_residual(t, dist.probs());
    if residual > tol {
        // Lazy-chain power iteration as a fallback.
        let mut p = dist.probs().to_vec();
        for _ in 0..1_000_000 {
            let tp = t.left_mul(&p);
            p = p.iter().zip(&tp).map(|(a, b)| 0.5 * (a + b)).collect();
            if stationary_residual(t, &p) <= tol {
                break;
            }
        }
        dist = Distribution::from_unnormalized(p);
        residual = stationary_residual(t, dist.probs());
    }
    if residual > tol {
        return Err(MarkovError::StationaryResidual { residual, tol });
    }
    Ok(dist)
}

pub fn stationary_residual(t: &TransitionMatrix, rho: &[f64]) -> f64 {
    t.left_mul(rho)
        .iter()
        .zip(rho)
        .map(|(a, b)| (a - b).abs())
        .sum()
}

/// Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[pivot * n + col].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                a.swap(pivot * n + j, col * n + j);
            }
            b.swap(pivot, col);
        }
        let d = a[col * n + col];
        for i in col + 1..n {
            let f = a[i * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[i * n + j] -= f * a[col * n + j];
            }
            b[i] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in i + 1..n {
            s -= a[i * n + j] * x[j];
        }
        x[i] = s / a[i * n + i];
    }
    Some(x)
}

/// `p0 · T^t`.
pub fn marginal(p0: &Distribution, t: &TransitionMatrix, steps: usize) -> Result<Distribution> {
    if p0.len() != t.n_states() {
        return Err(MarkovError::DimensionMismatch {
            left: p0.len(),
            right: t.n_states(),
        });
    }
    let mut p = p0.probs().to_vec();
    for _ in 0..steps {
        p = t.left_mul(&p);
    }
    Ok(Distribution::from_unnormalized(p))
}

pub const DEFAULT_EIGEN_ITERATIONS: usize = 10_000;

/// Leading eigenvalue and the second-largest eigenvalue modulus, from a
/// dense real Schur decomposition (complex pairs handled by modulus).
pub fn spectral_summary(t: &TransitionMatrix) -> Result<SpectralSummary> {
    spectral_summary_with(t, DEFAULT_EIGEN_ITERATIONS)
}

pub fn spectral_summary_with(t: &TransitionMatrix, max_iterations: usize) -> Result<SpectralSummary> {
    let n = t.n_states();
    if n == 1 {
        return Ok(SpectralSummary {
            lambda1: 1.0,
            lambda2_mod: 0.0,
            gap: 1.0,
        });
    }
    let m = DMatrix::from_row_slice(n, n, t.entries());
    let schur = nalgebra::linalg::Schur::try_new(m, f64::EPSILON, max_iterations).ok_or(
        MarkovError::EigenNonConvergence {
            iterations: max_iterations,
        },
    )?;
    let eig = schur.complex_eigenvalues();
    let mut by_modulus: Vec<(f64, f64)> = eig.iter().map(|c| (c.norm(), c.re)).collect();
    by_modulus.sort_by(|a, b| b.0.total_cmp(&a.0));
    let lambda1 = by_modulus[0].1;
    let lambda2_mod = by_modulus[1].0.min(1.0);
    Ok(SpectralSummary {
        lambda1,
        lambda2_mod,
        gap: 1.0 - lambda2_mod,
    })
}

/// Power iteration on the deflated operator `T - 1 rho^T`, acting on
/// zero-sum row vectors. Estimates `|lambda_2|`; intended for reversible
/// chains where the subdominant eigenvalue is real.
pub fn deflated_power_lambda2(t: &TransitionMatrix, rho: &Distribution, iterations: usize) -> f64 {
    let n = t.n_states();
    let mut x: Vec<f64> = (0..n)
        .map(|i| ((i as f64 + 1.0) * 0.618_033_988_75).fract() - 0.5)
        .collect();
    let project = |v: &mut Vec<f64>| {
        let s: f64 = v.iter().sum();
        for (vi, r) in v.iter_mut().zip(rho.probs()) {
            *vi -= s * r;
        }
    };
    project(&mut x);
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let n0 = norm(&x);
        if n0 == 0.0 {
            return 0.0;
        }
        for v in x.iter_mut() {
            *v /= n0;
        }
        // Two steps at once so a -lambda_2 partner does not make the ratio oscillate.
        let mut y = t.left_mul(&x);
        project(&mut y);
        let mut z = t.left_mul(&y);
        project(&mut z);
        estimate = norm(&z).sqrt();
        x = z;
    }
    estimate
}

/// Worst-case total-variation distance to `rho` over one-hot starts.
fn worst_tv(power: &[f64], rho: &Distribution, n: usize) -> f64 {
    (0..n)
        .map(|i| rho.total_variation(&power[i * n..(i + 1) * n]))
        .fold(0.0, f64::max)
}

pub const DEFAULT_MIXING_CAP: usize = 100_000;

/// Smallest `t >= 1` with `max_x TV(e_x T^t, rho) <= eps`.
pub fn mixing_time(t: &TransitionMatrix, eps: f64) -> Result<usize> {
    mixing_time_with(t, eps, DEFAULT_MIXING_CAP)
}

pub fn mixing_time_with(t: &TransitionMatrix, eps: f64, cap: usize) -> Result<usize> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(MarkovError::InvalidEpsilon {
            value: eps,
            range: "(0, 1)",
        });
    }
    let rho = stationary_distribution(t, 1e-13)?;
    let n = t.n_states();
    let mut power = t.entries().to_vec();
    let mut tv = worst_tv(&power, &rho, n);
    for step in 1..=cap {
        if tv <= eps {
            return Ok(step);
        }
        power = TransitionMatrix::matmul_raw(&power, t.entries(), n);
        tv = worst_tv(&power, &rho, n);
    }
    Err(MarkovError::MixingCapExceeded { cap, tv })
}

/// Pointwise mutual information `log T(s,s') - log marg(s')`; `-inf` marks
/// transitions with zero probability.
pub fn pmi_matrix(t: &TransitionMatrix, marg: &Distribution) -> Result<RatioModel> {
    let n = t.n_states();
    if marg.len() != n {
        return Err(MarkovError::DimensionMismatch {
            left: n,
            right: marg.len(),
        });
    }
    if let Some(state) = marg.probs().iter().position(|&p| p <= 0.0) {
        return Err(MarkovError::ZeroMarginal { state });
    }
    let mut values = Vec::with_capacity(n * n);
    for s in 0..n {
        for s2 in 0..n {
            let p = t.get(s, s2);
            values.push(if p > 0.0 {
                p.ln() - marg.probs()[s2].ln()
            } else {
                f64::NEG_INFINITY
            });
        }
    }
    RatioModel::new(n, values)
}

/// Exact mutual information between `S_t` and `S_{t+1}` when `S_0 ~ p0`.
pub fn mi_consecutive(t: &TransitionMatrix, p0: &Distribution, steps: usize) -> Result<f64> {
    let pt = marginal(p0, t, steps)?;
    let pt1 = t.left_mul(pt.probs());
    let n = t.n_states();
    let mut mi = 0.0;
    for s in 0..n {
        let ps = pt.probs()[s];
        if ps == 0.0 {
            continue;
        }
        for s2 in 0..n {
            let p = t.get(s, s2);
            if p > 0.0 {
                mi += ps * p * (p.ln() - pt1[s2].ln());
            }
        }
    }
    // Round-off can leave -1e-17 for independent chains.
    Ok(mi.max(0.0))
}

/// Mutual information between consecutive states once the chain is stationary.
pub fn mi_stationary(t: &TransitionMatrix) -> Result<f64> {
    let rho = stationary_distribution(t, 1e-12)?;
    mi_consecutive(t, &rho, 0)
}

/// Collapses an MDP kernel under a policy: `T^pi(s,s') = sum_a pi(a|s) T(s,a,s')`.
pub fn mdp_to_chain(kernels: &[TransitionMatrix], policy: &[Distribution]) -> Result<TransitionMatrix> {
    let n_actions = kernels.len();
    if n_actions == 0 {
        return Err(MarkovError::TooFewStates { min: 1, got: 0 });
    }
    let n = kernels[0].n_states();
    for k in kernels {
        if k.n_states() != n {
            return Err(MarkovError::DimensionMismatch {
                left: n,
                right: k.n_states(),
            });
        }
    }
    if policy.len() != n {
        return Err(MarkovError::DimensionMismatch {
            left: n,
            right: policy.len(),
        });
    }
    let mut entries = vec![0.0; n * n];
    for (s, pi) in policy.iter().enumerate() {
        if pi.len() != n_actions {
            return Err(MarkovError::DimensionMismatch {
                left: n_actions,
                right: pi.len(),
            });
        }
        for (a, &pa) in pi.probs().iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            for (e, &v) in entries[s * n..(s + 1) * n].iter_mut().zip(kernels[a].row(s)) {
                *e += pa * v;
            }
        }
    }
    // Re-normalize rows against accumulated round-off before validation.
    for s in 0..n {
        let row = &mut entries[s * n..(s + 1) * n];
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v = (*v / sum).min(1.0));
    }
    TransitionMatrix::new(n, entries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prop1Report {
    /// Mixing time at level `(eps/2) min_x rho(x)^2`.
    pub t_star: usize,
    pub max_deviation: f64,
    pub eps: f64,
    /// Number of `(s, s', t)` triples checked.
    pub checked: usize,
}

pub const DEFAULT_PROP1_WINDOW: usize = 50;

/// Checks that once `t >= t_mix((eps/2) min rho^2)`, the finite-time ratio
/// `T(s,s')/p_{t+1}(s')` is within `eps` of `T(s,s')/rho(s')` for every
/// supported transition, over a window of `t` values.
pub fn prop1_witness(t: &TransitionMatrix, eps: f64, p0: &Distribution) -> Result<Prop1Report> {
    prop1_witness_with(t, eps, p0, DEFAULT_PROP1_WINDOW, DEFAULT_MIXING_CAP)
}

pub fn prop1_witness_with(
    t: &TransitionMatrix,
    eps: f64,
    p0: &Distribution,
    window: usize,
    mixing_cap: usize,
) -> Result<Prop1Report> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(MarkovError::InvalidEpsilon {
            value: eps,
            range: "(0, 1]",
        });
    }
    let n = t.n_states();
    let rho = stationary_distribution(t, 1e-13)?;
    let min_rho = rho.min();
    let level = 0.5 * eps * min_rho * min_rho;
    let t_star = mixing_time_with(t, level, mixing_cap)?;
    let mut p = marginal(p0, t, t_star + 1)?.probs().to_vec();
    let mut max_deviation: f64 = 0.0;
    let mut checked = 0;
    for step in t_star..t_star + window.max(1) {
        // p holds p_{step+1}.
        for s in 0..n {
            for s2 in 0..n {
                let tr = t.get(s, s2);
                if tr == 0.0 {
                    continue;
                }
                let deviation = (tr / p[s2] - tr / rho.probs()[s2]).abs();
                checked += 1;
                if deviation > eps {
                    return Err(MarkovError::Prop1Violation {
                        s,
                        s_next: s2,
                        t: step,
                        deviation,
                        eps,
                    });
                }
                max_deviation = max_deviation.max(deviation);
            }
        }
        p = t.left_mul(&p);
    }
    Ok(Prop1Report {
        t_star,
        max_deviation,
        eps,
        checked,
    })
}

/// One point of the random-walk sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub alpha: f64,
    /// One-step MI from a uniform start.
    pub mi: f64,
    /// MI between consecutive states at stationarity.
    pub mi_stationary: f64,
    pub inv_gap: f64,
}

/// Evaluates MI and inverse spectral gap of the random walk over an alpha grid.
pub fn random_walk_sweep(
    k_mi: usize,
    k_gap: usize,
    alphas: &[f64],
    exec: Exec,
) -> Result<Vec<SweepPoint>> {
    exec.map(alphas, |&alpha| {
        let t_mi = random_walk_chain(k_mi, alpha)?;
        let mi = mi_consecutive(&t_mi, &Distribution::uniform(k_mi), 0)?;
        let rho = random_walk_stationary_closed_form(k_mi, alpha)?;
        let mi_stationary = mi_consecutive(&t_mi, &rho, 0)?;
        let t_gap = random_walk_chain(k_gap, alpha)?;
        let inv_gap = spectral_summary(&t_gap)?.inverse_gap();
        Ok(SweepPoint {
            alpha,
            mi,
            mi_stationary,
            inv_gap,
        })
    })
    .into_iter()
    .collect()
}

/// `{0.05, 0.10, ..., 0.95}` with the midpoint replaced by 0.499, where
/// the symmetric walk is evaluated.
pub fn alpha_grid() -> Vec<f64> {
    (1..20)
        .map(|i| if i == 10 { 0.499 } else { i as f64 * 0.05 })
        .collect()
}
