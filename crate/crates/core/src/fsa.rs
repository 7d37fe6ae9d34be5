//! The annealing trainer: gradient steps on the active set interleaved with
//! magnitude-based elimination that follows a [`Schedule`].

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::blocked::{ColumnMatrix, Executor};
use crate::data::{Dataset, Matrix, Targets};
use crate::error::{FsaError, Result};
use crate::losses::{LossKind, LossSpec, Objective};
use crate::model::{ActiveModel, Hyperparams};
use crate::schedule::Schedule;

/// Loss ratio (against the loss at `b = 0`) treated as divergence.
pub const DIVERGENCE_RATIO: f64 = 1e3;

/// Gradient-norm tolerance that ends [`refit`] early.
pub const REFIT_TOLERANCE: f64 = 1e-8;

const POWER_MAX_ITER: usize = 10_000;

/// Indices (ascending) of the `k` largest `mags`. Ties go to the lower
/// index, or to the lower key when `keys` is given.
pub(crate) fn top_k(mags: &[f64], k: usize, keys: Option<&[u64]>) -> Vec<usize> {
    let n = mags.len();
    let mut idx: Vec<usize> = (0..n).collect();
    if k < n {
        let cmp = |a: &usize, b: &usize| {
            mags[*b].total_cmp(&mags[*a]).then_with(|| match keys {
                Some(keys) => keys[*a].cmp(&keys[*b]).then(a.cmp(b)),
                None => a.cmp(b),
            })
        };
        if k > 0 {
            idx.select_nth_unstable_by(k - 1, cmp);
        }
        idx.truncate(k);
        idx.sort_unstable();
    }
    idx
}

fn tie_keys(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

/// Quantile thresholding: the `k` largest-magnitude entries of `v` divided
/// by `1 + lambda`, everything else zero. With `tie_seed` equal magnitudes
/// are ordered by seeded random keys instead of by index.
pub fn quantile_threshold(v: &[f64], k: usize, lambda: f64, tie_seed: Option<u64>) -> Result<Vec<f64>> {
    if k == 0 || k > v.len() {
        return Err(FsaError::Contract(format!(
            "quantile threshold needs 1 <= k <= {}, got k = {k}",
            v.len()
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(FsaError::Contract(format!("lambda must be >= 0, got {lambda}")));
    }
    let mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    let keys = tie_seed.map(|s| tie_keys(s, v.len()));
    let mut out = vec![0.0; v.len()];
    for i in top_k(&mags, k, keys.as_deref()) {
        out[i] = v[i] / (1.0 + lambda);
    }
    Ok(out)
}

/// Selection magnitude of each group: `|b|` for scalars, squared Euclidean
/// norm (same order as the norm) otherwise.
pub(crate) fn group_magnitudes(coeffs: &[f64], group_size: usize) -> Vec<f64> {
    if group_size == 1 {
        coeffs.iter().map(|b| b.abs()).collect()
    } else {
        coeffs
            .chunks(group_size)
            .map(|g| g.iter().map(|b| b * b).sum())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralNorm {
    /// Estimate of the largest singular value.
    pub value: f64,
    /// `||A^T A v - s^2 v|| / s^2` at the final iterate.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration on the symmetric operator `gram` (`v -> A^T A v`).
fn power_iteration(dim: usize, tol: f64, gram: impl Fn(&[f64]) -> Vec<f64>) -> SpectralNorm {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    for it in 1..=POWER_MAX_ITER {
        let w = gram(&v);
        let next: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        residual = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - next * b).powi(2))
            .sum::<f64>()
            .sqrt()
            / next.abs().max(f64::MIN_POSITIVE);
        let norm_w = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm_w == 0.0 {
            return SpectralNorm {
                value: 0.0,
                residual: 0.0,
                iterations: it,
                converged: true,
            };
        }
        let done = (next - lambda).abs() <= tol * next.abs();
        lambda = next;
        if done {
            return SpectralNorm {
                value: lambda.max(0.0).sqrt(),
                residual,
                iterations: it,
                converged: true,
            };
        }
        v = w.into_iter().map(|a| a / norm_w).collect();
    }
    SpectralNorm {
        value: lambda.max(0.0).sqrt(),
        residual,
        iterations: POWER_MAX_ITER,
        converged: false,
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|a| *a /= n);
    }
}

/// Largest singular value of `x`, stopping once the Rayleigh quotient of
/// `X^T X` changes by less than `tol` relative.
pub fn spectral_norm(x: &Matrix, tol: f64) -> SpectralNorm {
    let (n, m) = (x.rows(), x.cols());
    power_iteration(m, tol, |v| {
        let mut out = vec![0.0; m];
        for i in 0..n {
            let row = x.row(i);
            let f: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * f;
            }
        }
        out
    })
}

/// Curvature of the data-fit term per unit of `||X||^2`.
fn loss_curvature(spec: &LossSpec) -> f64 {
    match spec.kind {
        LossKind::SquaredError => 1.0,
        LossKind::Logistic | LossKind::RankLogistic => 0.25,
        LossKind::SvmHuber => 1.0 / (2.0 * spec.huber_h),
        LossKind::Lorenz => 2.0,
    }
}

/// Upper bound on the curvature of the prior.
fn prior_curvature(spec: &LossSpec, group_size: usize) -> f64 {
    let p = &spec.prior;
    let mut l = 2.0 * p.ridge;
    if group_size >= 4 {
        l += 32.0 * p.smooth2;
    }
    if group_size >= 2 {
        l += 4.0 * p.tv_q / p.tv_huber_h;
    }
    l
}

/// Largest step with guaranteed descent for the objective on design `x`
/// (`x` augmented with a ones column when an intercept is fitted). For an
/// unweighted summed objective without prior this is `4 / ||X||^2` for the
/// logistic loss and `1 / ||X||^2` for squared error.
pub(crate) fn design_step_bound(x: &ColumnMatrix, intercept: bool, obj: &Objective) -> f64 {
    let m = x.cols();
    let dim = m + usize::from(intercept);
    let pairs = match obj.targets {
        Targets::Pairs(p) => Some(p),
        _ => None,
    };
    let norm = power_iteration(dim, 1e-6, |v| {
        let mut f = vec![if intercept { v[m] } else { 0.0 }; x.rows()];
        for (j, &b) in v[..m].iter().enumerate() {
            for (o, a) in f.iter_mut().zip(x.column(j)) {
                *o += b * a;
            }
        }
        if let Some(pairs) = pairs {
            let mut g = vec![0.0; f.len()];
            for p in pairs.pairs() {
                let d = f[p.i] - f[p.j];
                g[p.i] += d;
                g[p.j] -= d;
            }
            f = g;
        }
        let mut out: Vec<f64> = (0..m)
            .map(|j| x.column(j).iter().zip(&f).map(|(a, b)| a * b).sum())
            .collect();
        if intercept {
            out.push(f.iter().sum());
        }
        out
    });
    let w_max = obj
        .weights
        .map_or(1.0, |w| w.iter().cloned().fold(0.0, f64::max));
    // power iteration approaches the top eigenvalue from below
    let sigma_sq = norm.value * norm.value * (1.0 + 1e-3);
    let l = loss_curvature(obj.spec) * w_max * sigma_sq * obj.data_scale + prior_curvature(obj.spec, obj.group_size);
    if l > 0.0 {
        1.0 / l
    } else {
        f64::INFINITY
    }
}

/// Step-size bound for a linear fit of `data` under `spec` and `hp` (scale,
/// intercept and standardization taken from `hp`).
pub fn step_bound(data: &Dataset, spec: &LossSpec, hp: &Hyperparams) -> Result<f64> {
    let obj = Objective::new(spec, data.targets(), data.weights(), 1, hp.scale)?;
    let mut x = ColumnMatrix::from_matrix(data.x());
    if hp.standardize {
        Standardizer::apply(&mut x);
    }
    Ok(design_step_bound(&x, hp.fits_intercept(data.task()), &obj))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterRecord {
    pub iteration: usize,
    /// Variables (groups) kept after this iteration's selection.
    pub kept: usize,
    /// Objective after the iteration.
    pub loss: f64,
    /// Running total of kept variables, `sum M_e` so far.
    pub touches: u64,
    /// Running total of variables read by gradient steps.
    pub columns_read: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitTrace {
    /// Objective at `b = 0`.
    pub initial_loss: f64,
    pub records: Vec<IterRecord>,
    /// Selected original variables (groups for grouped models), ascending.
    pub selected: Vec<usize>,
}

impl FitTrace {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(self.initial_loss, |r| r.loss)
    }

    pub fn touches(&self) -> u64 {
        self.records.last().map_or(0, |r| r.touches)
    }

    pub fn columns_read(&self) -> u64 {
        self.records.last().map_or(0, |r| r.columns_read)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Columns `e, M_e, loss, touches`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["e", "M_e", "loss", "touches"])?;
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                r.kept.to_string(),
                format!("{:e}", r.loss),
                r.touches.to_string(),
            ])?;
        }
        w.flush().map_err(|e| FsaError::io(path, e))?;
        Ok(())
    }
}

fn csv_io(path: &Path, e: csv::Error) -> FsaError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => FsaError::io(path, io),
            other => FsaError::Validation(format!("{other:?}")),
        }
    } else {
        FsaError::Csv(e)
    }
}

/// Column centring and scaling. Constant columns keep scale 1.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Standardizer {
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl Standardizer {
    pub fn apply(x: &mut ColumnMatrix) -> Standardizer {
        let n = x.rows() as f64;
        let mut mean = Vec::with_capacity(x.cols());
        let mut sd = Vec::with_capacity(x.cols());
        for j in 0..x.cols() {
            let col = x.column_mut(j);
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            let s = if var > 0.0 { var.sqrt() } else { 1.0 };
            col.iter_mut().for_each(|v| *v = (*v - m) / s);
            mean.push(m);
            sd.push(s);
        }
        Standardizer { mean, sd }
    }

    /// Model over standardized columns -> model over raw columns.
    pub fn restore(&self, model: &ActiveModel) -> ActiveModel {
        let mut b0 = model.intercept();
        let coeffs = model
            .active_index()
            .iter()
            .zip(model.coeffs())
            .map(|(&c, &b)| {
                let raw = b / self.sd[c];
                b0 -= raw * self.mean[c];
                raw
            })
            .collect();
        ActiveModel::from_parts_unchecked(coeffs, b0, model.active_index().to_vec(), model.group_size())
    }

    /// Inverse of [`Standardizer::restore`].
    pub fn transform(&self, model: &ActiveModel) -> ActiveModel {
        let mut b0 = model.intercept();
        let coeffs = model
            .active_index()
            .iter()
            .zip(model.coeffs())
            .map(|(&c, &b)| {
                b0 += b * self.mean[c];
                b * self.sd[c]
            })
            .collect();
        ActiveModel::from_parts_unchecked(coeffs, b0, model.active_index().to_vec(), model.group_size())
    }
}

fn response(exec: &Executor, x: &ColumnMatrix, coeffs: &[f64], intercept: f64) -> Result<Vec<f64>> {
    let mut f = exec.response(x, coeffs)?;
    if intercept != 0.0 {
        f.iter_mut().for_each(|v| *v += intercept);
    }
    Ok(f)
}

fn diverged(loss: f64, initial: f64) -> bool {
    !loss.is_finite() || (initial > 0.0 && loss > DIVERGENCE_RATIO * initial)
}

pub(crate) fn check_plan(hp: &Hyperparams, sched: &Schedule, n_groups: usize) -> Result<()> {
    hp.validate(n_groups)?;
    if sched.n_features() != n_groups {
        return Err(FsaError::Contract(format!(
            "schedule starts from {} variables, data has {n_groups}",
            sched.n_features()
        )));
    }
    if sched.k() != hp.k {
        return Err(FsaError::Contract(format!(
            "schedule target k = {} differs from hyperparameter k = {}",
            sched.k(),
            hp.k
        )));
    }
    if sched.n_iter() != hp.n_iter {
        return Err(FsaError::Contract(format!(
            "schedule runs {} iterations, hyperparameters ask for {}",
            sched.n_iter(),
            hp.n_iter
        )));
    }
    Ok(())
}

/// Runs the annealing loop on `x` (all columns start active). The returned
/// model indexes columns of `x`.
pub(crate) fn anneal(
    x: &ColumnMatrix,
    group_size: usize,
    fit_intercept: bool,
    obj: &Objective,
    hp: &Hyperparams,
    sched: &Schedule,
) -> Result<(ActiveModel, FitTrace)> {
    let exec = Executor::new(hp.grid, hp.workers)?;
    let mut work = x.clone();
    let mut model = ActiveModel::zeros(x.cols(), group_size)?;
    let mut dloss = vec![0.0; x.rows()];
    let mut tie_rng = hp.random_ties.then(|| ChaCha8Rng::seed_from_u64(hp.seed));

    let f0 = vec![0.0; x.rows()];
    let initial = obj.value(&f0, model.coeffs(), &mut dloss);
    if !initial.is_finite() {
        return Err(FsaError::Diverged {
            iteration: 0,
            loss: initial,
            initial,
            eta: hp.eta,
            bound: None,
        });
    }

    let mut records: Vec<IterRecord> = Vec::with_capacity(sched.n_iter());
    let (mut touches, mut read) = (0u64, 0u64);
    for e in 1..=sched.n_iter() {
        let f = response(&exec, &work, model.coeffs(), model.intercept())?;
        let loss = obj.value(&f, model.coeffs(), &mut dloss);
        if let Some(last) = records.last_mut() {
            last.loss = loss;
        }
        if diverged(loss, initial) {
            return Err(FsaError::Diverged {
                iteration: e - 1,
                loss,
                initial,
                eta: hp.eta,
                bound: None,
            });
        }

        let mut grad = exec.gradient(&work, &dloss)?;
        obj.add_prior_gradient(model.coeffs(), &mut grad);
        for (b, g) in model.coeffs_mut().iter_mut().zip(&grad) {
            *b -= hp.eta * g;
        }
        if fit_intercept {
            let g0: f64 = dloss.iter().sum();
            model.set_intercept(model.intercept() - hp.eta * g0);
        }
        let groups = model.n_groups();
        read += groups as u64;

        let m_e = sched.features_to_keep(e);
        if m_e < groups {
            let mags = group_magnitudes(model.coeffs(), group_size);
            let keys = tie_rng
                .as_mut()
                .map(|rng| (0..groups).map(|_| rng.random::<u64>()).collect::<Vec<_>>());
            let keep_groups = top_k(&mags, m_e, keys.as_deref());
            let keep: Vec<usize> = keep_groups
                .iter()
                .flat_map(|&g| g * group_size..(g + 1) * group_size)
                .collect();
            model.retain_positions(&keep);
            work.retain_columns(&keep);
        }
        if hp.threshold_shrink > 0.0 {
            let s = 1.0 + hp.threshold_shrink;
            model.coeffs_mut().iter_mut().for_each(|b| *b /= s);
        }
        let kept = model.n_groups();
        touches += kept as u64;
        records.push(IterRecord {
            iteration: e,
            kept,
            loss: f64::NAN,
            touches,
            columns_read: read,
        });
    }

    let f = response(&exec, &work, model.coeffs(), model.intercept())?;
    let loss = obj.value(&f, model.coeffs(), &mut dloss);
    if diverged(loss, initial) {
        return Err(FsaError::Diverged {
            iteration: sched.n_iter(),
            loss,
            initial,
            eta: hp.eta,
            bound: None,
        });
    }
    if let Some(last) = records.last_mut() {
        last.loss = loss;
    }
    let selected = model.active_groups();
    Ok((
        model,
        FitTrace {
            initial_loss: initial,
            records,
            selected,
        },
    ))
}

/// Plain gradient descent on all columns of `x` from `model` until
/// `max_iter` steps or the gradient norm drops to [`REFIT_TOLERANCE`].
pub(crate) fn descend(
    x: &ColumnMatrix,
    mut model: ActiveModel,
    fit_intercept: bool,
    obj: &Objective,
    hp: &Hyperparams,
    max_iter: usize,
) -> Result<ActiveModel> {
    let exec = Executor::new(hp.grid, hp.workers)?;
    let mut dloss = vec![0.0; x.rows()];
    let mut initial = f64::NAN;
    for it in 0..=max_iter {
        let f = response(&exec, x, model.coeffs(), model.intercept())?;
        let loss = obj.value(&f, model.coeffs(), &mut dloss);
        if it == 0 {
            initial = loss;
        }
        if diverged(loss, initial) {
            return Err(FsaError::Diverged {
                iteration: it,
                loss,
                initial,
                eta: hp.eta,
                bound: None,
            });
        }
        if it == max_iter {
            break;
        }
        let mut grad = exec.gradient(x, &dloss)?;
        obj.add_prior_gradient(model.coeffs(), &mut grad);
        let g0: f64 = if fit_intercept { dloss.iter().sum() } else { 0.0 };
        let norm = (grad.iter().map(|g| g * g).sum::<f64>() + g0 * g0).sqrt();
        if norm <= REFIT_TOLERANCE {
            break;
        }
        for (b, g) in model.coeffs_mut().iter_mut().zip(&grad) {
            *b -= hp.eta * g;
        }
        if fit_intercept {
            model.set_intercept(model.intercept() - hp.eta * g0);
        }
    }
    Ok(model)
}

fn with_bound(err: FsaError, bound: impl FnOnce() -> f64) -> FsaError {
    match err {
        FsaError::Diverged {
            iteration,
            loss,
            initial,
            eta,
            bound: None,
        } => FsaError::Diverged {
            iteration,
            loss,
            initial,
            eta,
            bound: Some(bound()),
        },
        other => other,
    }
}

/// Trains a sparse linear model with exactly `hp.k` nonzero-able columns.
/// Starts from `b = 0`; each iteration takes one gradient step on the active
/// columns, keeps the `M_e` largest `|b_j|` and drops the rest from both the
/// model and the working matrix.
pub fn fit(data: &Dataset, spec: &LossSpec, hp: &Hyperparams, sched: &Schedule) -> Result<(ActiveModel, FitTrace)> {
    let obj = Objective::new(spec, data.targets(), data.weights(), 1, hp.scale)?;
    check_plan(hp, sched, data.n_features())?;
    let intercept = hp.fits_intercept(data.task());
    let mut x = ColumnMatrix::from_matrix(data.x());
    let standardizer = hp.standardize.then(|| Standardizer::apply(&mut x));
    let (model, trace) = anneal(&x, 1, intercept, &obj, hp, sched)
        .map_err(|e| with_bound(e, || design_step_bound(&x, intercept, &obj)))?;
    let model = match &standardizer {
        Some(s) => s.restore(&model),
        None => model,
    };
    Ok((model, trace))
}

/// Polishes `model` by gradient descent on its fixed support for up to
/// `hp.n_iter` steps.
pub fn refit(data: &Dataset, model: &ActiveModel, spec: &LossSpec, hp: &Hyperparams) -> Result<ActiveModel> {
    if model.group_size() != 1 {
        return Err(FsaError::Contract(
            "refit works on linear models; use plinear::pl_refit for grouped models".into(),
        ));
    }
    let obj = Objective::new(spec, data.targets(), data.weights(), 1, hp.scale)?;
    hp.validate(model.n_active().max(hp.k))?;
    let cols = model.active_index();
    if let Some(&bad) = cols.iter().find(|&&c| c >= data.n_features()) {
        return Err(FsaError::Contract(format!(
            "model references column {bad}, data has {} columns",
            data.n_features()
        )));
    }
    let mut x = ColumnMatrix::from_matrix(&data.x().select_columns(cols));
    let local = ActiveModel::from_parts_unchecked(model.coeffs().to_vec(), model.intercept(), (0..cols.len()).collect(), 1);
    let intercept = hp.fits_intercept(data.task());
    let standardizer = hp.standardize.then(|| Standardizer::apply(&mut x));
    let start = match &standardizer {
        Some(s) => s.transform(&local),
        None => local,
    };
    let fitted = descend(&x, start, intercept, &obj, hp, hp.n_iter)
        .map_err(|e| with_bound(e, || design_step_bound(&x, intercept, &obj)))?;
    let fitted = match &standardizer {
        Some(s) => s.restore(&fitted),
        None => fitted,
    };
    Ok(ActiveModel::from_parts_unchecked(
        fitted.coeffs().to_vec(),
        fitted.intercept(),
        cols.to_vec(),
        1,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Targets;
    use crate::losses::LossKind;
    use crate::model::LossScale;
    use proptest::prelude::*;

    fn brute_threshold(v: &[f64], k: usize, lambda: f64) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].abs().partial_cmp(&v[a].abs()).unwrap().then(a.cmp(&b)));
        let mut out = vec![0.0; v.len()];
        for &i in &idx[..k] {
            out[i] = v[i] / (1.0 + lambda);
        }
        out
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(quantile_threshold(&[3.0, -1.0, 2.0], 2, 0.0, None).unwrap(), [3.0, 0.0, 2.0]);
        let v = [0.5, -7.0, 2.0, 0.0];
        assert_eq!(quantile_threshold(&v, 4, 0.0, None).unwrap(), v);
        assert_eq!(quantile_threshold(&[4.0, -4.0, 1.0], 1, 1.0, None).unwrap(), [2.0, 0.0, 0.0]);
        assert!(quantile_threshold(&v, 0, 0.0, None).is_err());
        assert!(quantile_threshold(&v, 5, 0.0, None).is_err());
    }

    #[test]
    fn seeded_ties_are_reproducible_and_can_differ_from_index_order() {
        let v = [1.0; 8];
        let a = quantile_threshold(&v, 3, 0.0, Some(11)).unwrap();
        assert_eq!(a, quantile_threshold(&v, 3, 0.0, Some(11)).unwrap());
        assert_eq!(a.iter().filter(|&&x| x != 0.0).count(), 3);
        let differs = (0..20u64).any(|s| {
            quantile_threshold(&v, 3, 0.0, Some(s)).unwrap() != quantile_threshold(&v, 3, 0.0, None).unwrap()
        });
        assert!(differs);
    }

    proptest! {
        #[test]
        fn threshold_matches_sort_oracle(
            v in proptest::collection::vec(prop_oneof![-5i32..5, -100i32..100].prop_map(|x| x as f64 * 0.5), 1..50),
            kf in 0.0f64..1.0,
            shrink in any::<bool>(),
        ) {
            let k = ((v.len() as f64 * kf) as usize).clamp(1, v.len());
            let lambda = if shrink { 0.5 } else { 0.0 };
            prop_assert_eq!(quantile_threshold(&v, k, lambda, None).unwrap(), brute_threshold(&v, k, lambda));
        }
    }

    #[test]
    fn spectral_norm_small_cases() {
        let eye = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert!((spectral_norm(&eye, 1e-12).value - 1.0).abs() < 1e-12);
        let d = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((spectral_norm(&d, 1e-14).value - 3.0).abs() < 1e-10);
        let z = Matrix::zeros(4, 3);
        assert_eq!(spectral_norm(&z, 1e-10).value, 0.0);
    }

    #[test]
    fn spectral_norm_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let data: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
            let x = Matrix::new(20, 10, data.clone()).unwrap();
            let svd = nalgebra::DMatrix::from_row_slice(20, 10, &data).singular_values();
            let s = spectral_norm(&x, 1e-14);
            assert!(s.converged);
            assert!((s.value - svd.max()).abs() <= 1e-8 * svd.max(), "{} vs {}", s.value, svd.max());
        }
    }

    fn random_regression(n: usize, m: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * m).map(|_| rng.sample(StandardNormal)).collect();
        let x = Matrix::new(n, m, data).unwrap();
        let y = (0..n)
            .map(|i| x.row(i).iter().enumerate().map(|(j, v)| v * (j as f64 - 1.5)).sum::<f64>() + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dataset::new(x, Targets::Real(y)).unwrap()
    }

    fn least_squares(x: &Matrix, y: &[f64]) -> Vec<f64> {
        let a = nalgebra::DMatrix::from_row_slice(x.rows(), x.cols(), x.as_slice());
        let b = nalgebra::DVector::from_column_slice(y);
        let ata = a.transpose() * &a;
        let atb = a.transpose() * b;
        ata.cholesky().unwrap().solve(&atb).iter().cloned().collect()
    }

    #[test]
    fn dense_fit_reaches_least_squares() {
        let d = random_regression(40, 4, 9);
        let spec = LossSpec::new(LossKind::SquaredError);
        let mut hp = Hyperparams::new(1.0, 3000, 0.0, 4);
        hp.scale = LossScale::Sum;
        hp.eta = 0.9 * step_bound(&d, &spec, &hp).unwrap();
        let sched = Schedule::new(4, 4, 0.0, 3000).unwrap();
        let (m, _) = fit(&d, &spec, &hp, &sched).unwrap();
        let beta = least_squares(d.x(), d.targets().values().unwrap());
        for (a, b) in m.coeffs().iter().zip(&beta) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn unconstrained_fit_is_plain_gradient_descent_bitwise() {
        let d = random_regression(30, 5, 3);
        let spec = LossSpec::new(LossKind::SquaredError);
        let hp = Hyperparams::new(0.01, 50, 10.0, 5);
        let sched = Schedule::new(5, 5, 10.0, 50).unwrap();
        let (m, _) = fit(&d, &spec, &hp, &sched).unwrap();

        let x = ColumnMatrix::from_matrix(d.x());
        let obj = Objective::new(&spec, d.targets(), None, 1, LossScale::Mean).unwrap();
        let mut beta = vec![0.0; 5];
        let mut dl = vec![0.0; 30];
        for _ in 0..50 {
            let f = crate::blocked::direct_response(&x, &beta);
            obj.value(&f, &beta, &mut dl);
            let g = crate::blocked::direct_gradient(&x, &dl);
            for (b, gi) in beta.iter_mut().zip(&g) {
                *b -= 0.01 * gi;
            }
        }
        assert_eq!(m.coeffs(), beta.as_slice());
    }

    #[test]
    fn zero_columns_are_dropped_first() {
        let base = random_regression(30, 3, 4);
        let mut rows = Vec::new();
        for i in 0..30 {
            let mut r = base.x().row(i).to_vec();
            r.extend([0.0; 4]);
            rows.push(r);
        }
        let y = base.targets().clone();
        let padded = Dataset::new(Matrix::from_rows(&rows).unwrap(), y).unwrap();
        let spec = LossSpec::new(LossKind::SquaredError);
        let hp = Hyperparams::new(0.05, 40, 1.0, 3);
        let (a, ta) = fit(&padded, &spec, &hp, &Schedule::new(7, 3, 1.0, 40).unwrap()).unwrap();
        let (b, _) = fit(&base, &spec, &hp, &Schedule::new(3, 3, 1.0, 40).unwrap()).unwrap();
        assert_eq!(ta.selected, [0, 1, 2]);
        assert_eq!(a.coeffs(), b.coeffs());
    }

    #[test]
    fn selection_schedule_is_followed_and_touches_match_cost() {
        let d = random_regression(50, 20, 8);
        let spec = LossSpec::new(LossKind::SquaredError);
        let hp = Hyperparams::new(0.02, 60, 2.0, 4);
        let sched = Schedule::new(20, 4, 2.0, 60).unwrap();
        let (m, t) = fit(&d, &spec, &hp, &sched).unwrap();
        assert_eq!(m.n_active(), 4);
        assert_eq!(t.touches(), sched.cost());
        assert_eq!(t.columns_read(), sched.access_cost());
        let kept: Vec<usize> = t.records.iter().map(|r| r.kept).collect();
        assert_eq!(kept, sched.counts());
        assert!(t.records.iter().all(|r| r.loss.is_finite()));
        assert_eq!(t.selected, m.active_index());
    }

    #[test]
    fn refit_polishes_to_restricted_least_squares() {
        let d = random_regression(60, 8, 12);
        let spec = LossSpec::new(LossKind::SquaredError);
        let hp = Hyperparams::new(0.05, 80, 5.0, 3);
        let (m, _) = fit(&d, &spec, &hp, &Schedule::new(8, 3, 5.0, 80).unwrap()).unwrap();
        let before = crate::losses::loss_value(&m, &d, &spec).unwrap();
        let mut polish = hp.clone();
        polish.n_iter = 20_000;
        let sub = d.x().select_columns(m.active_index());
        polish.eta = 0.9 * step_bound(&Dataset::new(sub.clone(), d.targets().clone()).unwrap(), &spec, &polish).unwrap();
        let r = refit(&d, &m, &spec, &polish).unwrap();
        assert_eq!(r.active_index(), m.active_index());
        assert!(crate::losses::loss_value(&r, &d, &spec).unwrap() <= before);
        let beta = least_squares(&sub, d.targets().values().unwrap());
        for (a, b) in r.coeffs().iter().zip(&beta) {
            assert!((a - b).abs() < 1e-6);
        }
        let again = refit(&d, &r, &spec, &polish).unwrap();
        for (a, b) in again.coeffs().iter().zip(r.coeffs()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn huge_step_is_reported_as_divergence_with_bound() {
        let d = random_regression(30, 5, 1);
        let spec = LossSpec::new(LossKind::SquaredError);
        let hp = Hyperparams::new(50.0, 50, 1.0, 2);
        let err = fit(&d, &spec, &hp, &Schedule::new(5, 2, 1.0, 50).unwrap()).unwrap_err();
        match err {
            FsaError::Diverged { bound: Some(b), .. } => assert!(b > 0.0 && b < 50.0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn standardized_fit_predicts_in_raw_coordinates() {
        let base = random_regression(40, 3, 2);
        let mut rows = Vec::new();
        for i in 0..40 {
            rows.push(base.x().row(i).iter().enumerate().map(|(j, v)| v * (j + 1) as f64 * 10.0 + 3.0).collect());
        }
        let d = Dataset::new(Matrix::from_rows(&rows).unwrap(), base.targets().clone()).unwrap();
        let spec = LossSpec::new(LossKind::SquaredError);
        let mut hp = Hyperparams::new(0.5, 50, 1.0, 3);
        hp.standardize = true;
        let (m, t) = fit(&d, &spec, &hp, &Schedule::new(3, 3, 1.0, 50).unwrap()).unwrap();
        let raw = crate::losses::loss_value(&m, &d, &spec).unwrap() / 40.0;
        assert!((raw - t.final_loss()).abs() < 1e-9 * t.final_loss().max(1.0));
    }

    #[test]
    fn mismatched_plans_are_contract_errors() {
        let d = random_regression(10, 4, 0);
        let spec = LossSpec::new(LossKind::SquaredError);
        let hp = Hyperparams::new(0.1, 10, 1.0, 2);
        assert!(matches!(fit(&d, &spec, &hp, &Schedule::new(4, 3, 1.0, 10).unwrap()), Err(FsaError::Contract(_))));
        assert!(matches!(fit(&d, &spec, &hp, &Schedule::new(5, 2, 1.0, 10).unwrap()), Err(FsaError::Contract(_))));
        assert!(fit(&d, &LossSpec::new(LossKind::Logistic), &hp, &Schedule::new(4, 2, 1.0, 10).unwrap()).is_err());
    }
}
