use super::{MarkovError, Result, STOCHASTIC_TOL};

/// Row-stochastic matrix over a finite state space, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(MarkovError::TooFewStates { min: 1, got: 0 });
        }
        if entries.len() != n * n {
            return Err(MarkovError::BadLength {
                expected: n * n,
                got: entries.len(),
            });
        }
        for row in 0..n {
            let r = &entries[row * n..(row + 1) * n];
            for (col, &value) in r.iter().enumerate() {
                if !(0.0..=1.0).contains(&value) {
                    return Err(MarkovError::EntryOutOfRange { row, col, value });
                }
            }
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(MarkovError::RowNotStochastic { row, sum });
            }
        }
        Ok(Self { n, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * n);
        for r in rows {
            if r.len() != n {
                return Err(MarkovError::BadLength {
                    expected: n,
                    got: r.len(),
                });
            }
            entries.extend_from_slice(r);
        }
        Self::new(n, entries)
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        Self { n, entries }
    }

    /// Every row equal to `row`: the chain forgets its state in one step.
    pub fn rank_one(row: &Distribution) -> Self {
        let n = row.len();
        let mut entries = Vec::with_capacity(n * n);
        for _ in 0..n {
            entries.extend_from_slice(row.probs());
        }
        Self { n, entries }
    }

    /// Deterministic cycle `i -> i+1 mod n`.
    pub fn cycle(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + (i + 1) % n] = 1.0;
        }
        Self { n, entries }
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.n + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.entries[row * self.n..(row + 1) * self.n]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// `p · T` for a row vector `p`.
    pub fn left_mul(&self, p: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        for (i, &pi) in p.iter().enumerate() {
            if pi == 0.0 {
                continue;
            }
            let row = self.row(i);
            for (o, &t) in out.iter_mut().zip(row) {
                *o += pi * t;
            }
        }
        out
    }

    /// Matrix product `self · other`, unvalidated.
    pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let aik = a[i * n + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &b[k * n..(k + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        out
    }
}

/// Probability vector over states.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(MarkovError::TooFewStates { min: 1, got: 0 });
        }
        for (i, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(MarkovError::EntryOutOfRange {
                    row: 0,
                    col: i,
                    value: p,
                });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(MarkovError::NotNormalized(sum));
        }
        Ok(Self { probs })
    }

    /// Clamps tiny negative round-off and renormalizes.
    pub(crate) fn from_unnormalized(mut probs: Vec<f64>) -> Self {
        for p in probs.iter_mut() {
            if *p < 0.0 {
                *p = 0.0;
            }
        }
        let s: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= s;
        }
        Self { probs }
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, i: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[i] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Half the l1 distance.
    pub fn total_variation(&self, other: &[f64]) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// State-pair table such as a log density ratio. Entries whose numerator
/// is zero hold `-inf` and are reported as undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioModel {
    n: usize,
    values: Vec<f64>,
}

impl RatioModel {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(MarkovError::BadLength {
                expected: n * n,
                got: values.len(),
            });
        }
        Ok(Self { n, values })
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn raw(&self, s: usize, s_next: usize) -> f64 {
        self.values[s * self.n + s_next]
    }

    /// `None` where the entry is the `log 0` sentinel.
    pub fn get(&self, s: usize, s_next: usize) -> Option<f64> {
        let v = self.raw(s, s_next);
        v.is_finite().then_some(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralSummary {
    pub lambda1: f64,
    pub lambda2_mod: f64,
    pub gap: f64,
}

impl SpectralSummary {
    pub fn inverse_gap(&self) -> f64 {
        1.0 / self.gap
    }
}
