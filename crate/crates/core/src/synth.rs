//! Synthetic correlated-Gaussian benchmarks.
//!
//! Rows are i.i.d. `N(0, S)` with `S_ij = delta^|i - j|`. The true signal
//! lives on the 1-based columns `10, 20, ..., 10 k*` (0-based `9, 19, ...`).
//! Every row draws from its own ChaCha stream, so output does not depend on
//! how rows are split across threads.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Matrix, RankPair, RankPairSet, Targets};
use crate::error::{FsaError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub m: usize,
    pub k_star: usize,
    pub delta: f64,
    /// Fraction of classification examples whose label is redrawn uniformly.
    pub noise_fraction: f64,
    /// Standard deviation of the regression noise.
    pub sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n: usize, m: usize, k_star: usize, seed: u64) -> Self {
        SynthConfig {
            n,
            m,
            k_star,
            delta: 0.9,
            noise_fraction: 0.0,
            sigma: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.k_star == 0 {
            return Err(FsaError::Validation("n, m and k_star must be positive".into()));
        }
        if 10 * self.k_star > self.m {
            return Err(FsaError::Validation(format!(
                "k_star = {} needs at least {} columns, got {}",
                self.k_star,
                10 * self.k_star,
                self.m
            )));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(FsaError::Validation(format!("delta must lie in [0, 1), got {}", self.delta)));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return Err(FsaError::Validation("noise_fraction must lie in [0, 1]".into()));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(FsaError::Validation("sigma must be >= 0".into()));
        }
        Ok(())
    }
}

const DESIGN: u64 = 0x0;
const TARGET: u64 = 0x9e37_79b9_7f4a_7c15;
const NOISE: u64 = 0xd1b5_4a32_d192_ed03;
const PAIRS: u64 = 0x8cb9_2ba7_2f3d_8dd7;

fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream(index);
    rng
}

/// 0-based columns of the true variables.
pub fn true_columns(k_star: usize) -> Vec<usize> {
    (1..=k_star).map(|i| 10 * i - 1).collect()
}

/// `sum_i x_{10 i}` for one row.
pub fn true_score(row: &[f64], k_star: usize) -> f64 {
    true_columns(k_star).iter().map(|&c| row[c]).sum()
}

/// `r_ij` of two scores: 1 if `i` scores higher, 0.5 on a tie, else 0.
pub fn preference(s_i: f64, s_j: f64) -> f64 {
    if s_i > s_j {
        1.0
    } else if s_i == s_j {
        0.5
    } else {
        0.0
    }
}

/// AR(1) rows: `x_1 ~ N(0,1)`, `x_j = delta x_{j-1} + sqrt(1 - delta^2) e_j`.
pub fn gen_design(cfg: &SynthConfig) -> Result<Matrix> {
    cfg.validate()?;
    let (n, m) = (cfg.n, cfg.m);
    let mut data = vec![0.0; n * m];
    let innov = (1.0 - cfg.delta * cfg.delta).sqrt();
    data.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let mut rng = stream(cfg.seed, DESIGN, i as u64);
        let mut prev: f64 = rng.sample(StandardNormal);
        row[0] = prev;
        for v in row.iter_mut().skip(1) {
            let e: f64 = rng.sample(StandardNormal);
            prev = cfg.delta * prev + innov * e;
            *v = prev;
        }
    });
    Matrix::new(n, m, data)
}

/// Labels `+1` where the true score is positive, with `noise_fraction` of
/// the rows (chosen uniformly) relabelled by a fair coin.
pub fn gen_classification(cfg: &SynthConfig) -> Result<Dataset> {
    let x = gen_design(cfg)?;
    let mut y: Vec<f64> = (0..cfg.n)
        .map(|i| if true_score(x.row(i), cfg.k_star) > 0.0 { 1.0 } else { -1.0 })
        .collect();
    let n_noisy = (cfg.noise_fraction * cfg.n as f64).round() as usize;
    if n_noisy > 0 {
        let mut rng = stream(cfg.seed, NOISE, 0);
        let mut rows = sample(&mut rng, cfg.n, n_noisy).into_vec();
        rows.sort_unstable();
        for i in rows {
            y[i] = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
    }
    Ok(Dataset::new(x, Targets::Binary(y))?.with_target_name("y"))
}

/// `y = sum_i x_{10 i} + sigma e`.
pub fn gen_regression(cfg: &SynthConfig) -> Result<Dataset> {
    let x = gen_design(cfg)?;
    let y: Vec<f64> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, TARGET, i as u64);
            let e: f64 = rng.sample(StandardNormal);
            true_score(x.row(i), cfg.k_star) + cfg.sigma * e
        })
        .collect();
    Ok(Dataset::new(x, Targets::Real(y))?.with_target_name("y"))
}

/// `n_pairs` distinct unordered row pairs, each in a random orientation,
/// labelled by [`preference`] of the true scores.
pub fn gen_rank_pairs(cfg: &SynthConfig, n_pairs: usize) -> Result<Dataset> {
    let x = gen_design(cfg)?;
    let max_pairs = cfg.n * (cfg.n - 1) / 2;
    if n_pairs == 0 || n_pairs > max_pairs {
        return Err(FsaError::Validation(format!(
            "n_pairs must lie in [1, {max_pairs}] for {} rows",
            cfg.n
        )));
    }
    let scores: Vec<f64> = (0..cfg.n).map(|i| true_score(x.row(i), cfg.k_star)).collect();
    let mut rng = stream(cfg.seed, PAIRS, 0);
    let mut seen = HashSet::with_capacity(n_pairs);
    let mut pairs = Vec::with_capacity(n_pairs);
    while pairs.len() < n_pairs {
        let a = rng.random_range(0..cfg.n);
        let b = rng.random_range(0..cfg.n);
        if a == b || !seen.insert((a.min(b), a.max(b))) {
            continue;
        }
        let (i, j) = if rng.random::<bool>() { (a, b) } else { (b, a) };
        pairs.push(RankPair {
            i,
            j,
            r: preference(scores[i], scores[j]),
        });
    }
    let pairs = RankPairSet::new(pairs, cfg.n)?;
    Dataset::new(x, Targets::Pairs(pairs))
}
