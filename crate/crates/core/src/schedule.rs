//! Inverse annealing schedule for the number of kept variables.
//!
//! `M_e = k + (M - k) * max(0, (n_iter - 2e) / (2 e mu + n_iter))`, rounded
//! half-up, clamped to `[k, M]` and forced nonincreasing. The whole sequence
//! is computed once at construction.

use crate::error::{FsaError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    n_features: usize,
    k: usize,
    mu: f64,
    n_iter: usize,
    kept: Vec<usize>,
}

impl Schedule {
    pub fn new(n_features: usize, k: usize, mu: f64, n_iter: usize) -> Result<Self> {
        if n_features == 0 {
            return Err(FsaError::Validation("schedule needs at least one feature".into()));
        }
        if k == 0 || k > n_features {
            return Err(FsaError::Validation(format!(
                "schedule target k = {k} must lie in [1, {n_features}]"
            )));
        }
        if !(mu.is_finite() && mu >= 0.0) {
            return Err(FsaError::Validation(format!("mu must be >= 0, got {mu}")));
        }
        if n_iter == 0 {
            return Err(FsaError::Validation("n_iter must be at least 1".into()));
        }
        let mut kept = Vec::with_capacity(n_iter);
        let mut prev = n_features;
        for e in 1..=n_iter {
            let m = raw_count(e, n_features, k, mu, n_iter).min(prev);
            kept.push(m);
            prev = m;
        }
        Ok(Schedule {
            n_features,
            k,
            mu,
            n_iter,
            kept,
        })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn n_iter(&self) -> usize {
        self.n_iter
    }

    /// Kept count after iteration `e` (1-based). Past `n_iter` it stays at `k`.
    pub fn features_to_keep(&self, e: usize) -> usize {
        assert!(e >= 1, "iterations are counted from 1");
        self.kept.get(e - 1).copied().unwrap_or(self.k)
    }

    /// `M_1, ..., M_{n_iter}`.
    pub fn counts(&self) -> &[usize] {
        &self.kept
    }

    /// Area under the schedule curve, `sum_e M_e` for `e = 1..=n_iter`.
    pub fn cost(&self) -> u64 {
        self.kept.iter().map(|&m| m as u64).sum()
    }

    /// Columns read by the gradient steps: iteration `e` works on the
    /// `M_{e-1}` columns that survived the previous selection (`M_0 = M`).
    pub fn access_cost(&self) -> u64 {
        let last = *self.kept.last().expect("schedule is never empty") as u64;
        self.n_features as u64 + self.cost() - last
    }
}

fn raw_count(e: usize, m: usize, k: usize, mu: f64, n_iter: usize) -> usize {
    let (ef, nf) = (e as f64, n_iter as f64);
    let frac = ((nf - 2.0 * ef) / (2.0 * ef * mu + nf)).max(0.0);
    let value = k as f64 + (m - k) as f64 * frac;
    let rounded = (value + 0.5).floor() as usize;
    rounded.clamp(k, m)
}

pub fn features_to_keep(e: usize, schedule: &Schedule) -> usize {
    schedule.features_to_keep(e)
}

pub fn schedule_cost(schedule: &Schedule) -> u64 {
    schedule.cost()
}
