//! Piecewise-linear additive learners.
//!
//! Each variable is expanded into `B + 1` hat-function responses over `B`
//! equal bins of its training range. A variable's contribution is the linear
//! interpolation of its `B + 1` knot values, so the trainer sees groups of
//! `B + 1` columns and selects whole groups by their coefficient norm.

use serde::{Deserialize, Serialize};

use crate::blocked::ColumnMatrix;
use crate::data::{Dataset, Matrix, Task};
use crate::error::{FsaError, Result};
use crate::fsa::{anneal, check_plan, descend, design_step_bound, FitTrace};
use crate::losses::{LossKind, LossSpec, Objective, PriorSpec};
use crate::model::{ActiveModel, Hyperparams};
use crate::schedule::Schedule;

/// Default bin count for ranking.
pub const RANKING_BINS: usize = 4;
/// Default bin count for classification and regression.
pub const DEFAULT_BINS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub x_min: f64,
    pub x_max: f64,
    #[serde(rename = "B")]
    pub bins: usize,
}

impl BinSpec {
    pub fn new(x_min: f64, x_max: f64, bins: usize) -> Result<Self> {
        let spec = BinSpec { x_min, x_max, bins };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_min.is_finite() && self.x_max.is_finite() && self.x_max > self.x_min) {
            return Err(FsaError::Validation(format!(
                "bin range needs x_max > x_min, got [{}, {}]",
                self.x_min, self.x_max
            )));
        }
        if self.bins == 0 {
            return Err(FsaError::Validation("a bin spec needs B >= 1".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min) / self.bins as f64
    }

    /// Knot `i`, `x_min + i * b`.
    pub fn knot(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.width()
    }
}

/// Hat-function responses at one point: `1 - alpha` at `lower` and `alpha`
/// at `lower + 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasisResponse {
    pub lower: usize,
    pub alpha: f64,
}

impl BasisResponse {
    pub fn entries(&self) -> [(usize, f64); 2] {
        [(self.lower, 1.0 - self.alpha), (self.lower + 1, self.alpha)]
    }

    pub fn dense(&self, len: usize) -> Vec<f64> {
        let mut v = vec![0.0; len];
        v[self.lower] = 1.0 - self.alpha;
        v[self.lower + 1] = self.alpha;
        v
    }

    /// `u(x)^T values`.
    pub fn apply(&self, values: &[f64]) -> f64 {
        let j = self.lower;
        if self.alpha == 0.0 {
            values[j]
        } else {
            (1.0 - self.alpha) * values[j] + self.alpha * values[j + 1]
        }
    }
}

/// Out-of-range inputs are clamped to `[x_min, x_max]`.
pub fn basis_response(x: f64, spec: &BinSpec) -> BasisResponse {
    let x = x.clamp(spec.x_min, spec.x_max);
    let t = (x - spec.x_min) / spec.width();
    let lower = (t.floor().max(0.0) as usize).min(spec.bins - 1);
    let alpha = (t - lower as f64).clamp(0.0, 1.0);
    BasisResponse { lower, alpha }
}

/// Observed range of `column`; a constant column `v` gets `[v - 0.5, v + 0.5]`.
pub fn fit_bins(column: &[f64], bins: usize) -> Result<BinSpec> {
    if column.is_empty() {
        return Err(FsaError::Contract("cannot fit bins to an empty column".into()));
    }
    if bins == 0 {
        return Err(FsaError::Validation("B must be at least 1".into()));
    }
    let (lo, hi) = column
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(FsaError::Validation("bin range of a non-finite column".into()));
    }
    if hi > lo {
        BinSpec::new(lo, hi, bins)
    } else {
        BinSpec::new(lo - 0.5, hi + 0.5, bins)
    }
}

fn uniform_group(bins: &[BinSpec]) -> Result<usize> {
    let b = bins
        .first()
        .ok_or_else(|| FsaError::Contract("no bin specs".into()))?
        .bins;
    if bins.iter().any(|s| s.bins != b) {
        return Err(FsaError::Contract("all variables must use the same B".into()));
    }
    Ok(b + 1)
}

fn expand_columns(x: &Matrix, columns: &[usize], bins: &[BinSpec]) -> Result<ColumnMatrix> {
    let g = uniform_group(bins)?;
    let n = x.rows();
    let mut data = vec![0.0; n * g * columns.len()];
    for (v, (&c, spec)) in columns.iter().zip(bins).enumerate() {
        for i in 0..n {
            let u = basis_response(x.get(i, c), spec);
            for (t, w) in u.entries() {
                data[(v * g + t) * n + i] += w;
            }
        }
    }
    ColumnMatrix::from_column_major(n, g * columns.len(), data)
}

/// Basis expansion of every column of `x`: column `j * (B + 1) + t` holds the
/// `t`-th hat response of variable `j`.
pub fn expand(x: &Matrix, bins: &[BinSpec]) -> Result<Matrix> {
    if bins.len() != x.cols() {
        return Err(FsaError::Contract(format!(
            "{} bin specs for {} columns",
            bins.len(),
            x.cols()
        )));
    }
    let cols: Vec<usize> = (0..x.cols()).collect();
    let cm = expand_columns(x, &cols, bins)?;
    let (n, m) = (cm.rows(), cm.cols());
    let mut out = Matrix::zeros(n, m);
    for j in 0..m {
        for (i, &v) in cm.column(j).iter().enumerate() {
            out.set(i, j, v);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlTerm {
    /// Original column of the variable.
    pub variable: usize,
    pub bins: BinSpec,
    /// Knot values, length `B + 1`.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlModel {
    task: Task,
    intercept: f64,
    terms: Vec<PlTerm>,
}

impl PlModel {
    pub fn new(task: Task, intercept: f64, terms: Vec<PlTerm>) -> Result<Self> {
        if terms.windows(2).any(|w| w[0].variable >= w[1].variable) {
            return Err(FsaError::Contract("PL terms must have strictly increasing variables".into()));
        }
        for t in &terms {
            t.bins.validate()?;
            if t.values.len() != t.bins.bins + 1 {
                return Err(FsaError::Contract(format!(
                    "variable {} has {} knot values for B = {}",
                    t.variable,
                    t.values.len(),
                    t.bins.bins
                )));
            }
        }
        Ok(PlModel { task, intercept, terms })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    pub fn terms(&self) -> &[PlTerm] {
        &self.terms
    }

    pub fn variables(&self) -> Vec<usize> {
        self.terms.iter().map(|t| t.variable).collect()
    }

    /// The grouped coefficient model over the expanded columns of the
    /// active variables. Needs a uniform `B`.
    pub fn to_active(&self) -> Result<ActiveModel> {
        let bins: Vec<BinSpec> = self.terms.iter().map(|t| t.bins).collect();
        let g = if bins.is_empty() { 1 } else { uniform_group(&bins)? };
        let coeffs = self.terms.iter().flat_map(|t| t.values.iter().copied()).collect();
        let index = self
            .terms
            .iter()
            .flat_map(|t| t.variable * g..(t.variable + 1) * g)
            .collect();
        ActiveModel::new(coeffs, self.intercept, index, g)
    }

    fn with_values(&self, active: &ActiveModel) -> PlModel {
        let g = active.group_size();
        let terms = self
            .terms
            .iter()
            .zip(active.coeffs().chunks(g))
            .map(|(t, v)| PlTerm {
                variable: t.variable,
                bins: t.bins,
                values: v.to_vec(),
            })
            .collect();
        PlModel {
            task: self.task,
            intercept: active.intercept(),
            terms,
        }
    }
}

/// `b0 + sum_j u_j(x_j)^T b_j`; ranking models omit `b0`.
pub fn pl_predict(model: &PlModel, x: &[f64]) -> f64 {
    let base = if model.task == Task::Ranking { 0.0 } else { model.intercept };
    model
        .terms
        .iter()
        .fold(base, |acc, t| acc + basis_response(x[t.variable], &t.bins).apply(&t.values))
}

pub fn pl_scores(model: &PlModel, x: &Matrix) -> Result<Vec<f64>> {
    if let Some(t) = model.terms.iter().find(|t| t.variable >= x.cols()) {
        return Err(FsaError::Contract(format!(
            "model uses column {}, data has {} columns",
            t.variable,
            x.cols()
        )));
    }
    Ok((0..x.rows()).map(|i| pl_predict(model, x.row(i))).collect())
}

/// Loss and prior used by [`pl_fit`] when none is given: the ranking loss
/// with a small shrinkage prior, or the task's usual loss with a light ridge
/// plus second-difference prior.
pub fn pl_default_spec(task: Task) -> LossSpec {
    match task {
        Task::Ranking => LossSpec::new(LossKind::RankLogistic).with_prior(PriorSpec::ridge(0.01)),
        other => LossSpec::new(LossKind::default_for(other)).with_prior(PriorSpec::smooth(1e-3, 1e-2)),
    }
}

pub fn pl_default_bins(task: Task) -> usize {
    match task {
        Task::Ranking => RANKING_BINS,
        _ => DEFAULT_BINS,
    }
}

/// PL models fit an intercept except for ranking, where it cancels.
fn pl_intercept(hp: &Hyperparams, task: Task) -> bool {
    hp.intercept.unwrap_or(task != Task::Ranking)
}

/// Column bins from the training data.
pub fn fit_all_bins(x: &Matrix, bins: usize) -> Result<Vec<BinSpec>> {
    (0..x.cols()).map(|j| fit_bins(&x.column(j), bins)).collect()
}

/// Trains a PL additive model keeping `hp.k` variables. Selection ranks
/// variables by the Euclidean norm of their knot-value vectors.
pub fn pl_fit(
    data: &Dataset,
    spec: &LossSpec,
    hp: &Hyperparams,
    sched: &Schedule,
    bins: usize,
) -> Result<(PlModel, FitTrace)> {
    let specs = fit_all_bins(data.x(), bins)?;
    let g = bins + 1;
    let obj = Objective::new(spec, data.targets(), data.weights(), g, hp.scale)?;
    check_plan(hp, sched, data.n_features())?;
    let all: Vec<usize> = (0..data.n_features()).collect();
    let x = expand_columns(data.x(), &all, &specs)?;
    let intercept = pl_intercept(hp, data.task());
    let (active, trace) = anneal(&x, g, intercept, &obj, hp, sched).map_err(|e| match e {
        FsaError::Diverged {
            iteration,
            loss,
            initial,
            eta,
            ..
        } => FsaError::Diverged {
            iteration,
            loss,
            initial,
            eta,
            bound: Some(design_step_bound(&x, intercept, &obj)),
        },
        other => other,
    })?;
    let terms = active
        .active_groups()
        .into_iter()
        .zip(active.coeffs().chunks(g))
        .map(|(v, values)| PlTerm {
            variable: v,
            bins: specs[v],
            values: values.to_vec(),
        })
        .collect();
    let model = PlModel::new(data.task(), active.intercept(), terms)?;
    Ok((model, trace))
}

/// Step-size bound for a PL fit of `data` with `bins` bins per variable.
pub fn pl_step_bound(data: &Dataset, spec: &LossSpec, hp: &Hyperparams, bins: usize) -> Result<f64> {
    let specs = fit_all_bins(data.x(), bins)?;
    let obj = Objective::new(spec, data.targets(), data.weights(), bins + 1, hp.scale)?;
    let all: Vec<usize> = (0..data.n_features()).collect();
    let x = expand_columns(data.x(), &all, &specs)?;
    Ok(design_step_bound(&x, pl_intercept(hp, data.task()), &obj))
}

/// Gradient descent on the fixed variables of `model` (bins unchanged) for
/// up to `hp.n_iter` steps.
pub fn pl_refit(data: &Dataset, model: &PlModel, spec: &LossSpec, hp: &Hyperparams) -> Result<PlModel> {
    if model.terms.is_empty() {
        return Ok(model.clone());
    }
    let bins: Vec<BinSpec> = model.terms.iter().map(|t| t.bins).collect();
    let g = uniform_group(&bins)?;
    let obj = Objective::new(spec, data.targets(), data.weights(), g, hp.scale)?;
    let vars = model.variables();
    if let Some(&bad) = vars.iter().find(|&&v| v >= data.n_features()) {
        return Err(FsaError::Contract(format!(
            "model uses column {bad}, data has {} columns",
            data.n_features()
        )));
    }
    let x = expand_columns(data.x(), &vars, &bins)?;
    let start = model.to_active()?;
    let local = ActiveModel::new(start.coeffs().to_vec(), start.intercept(), (0..start.n_active()).collect(), g)?;
    let intercept = pl_intercept(hp, data.task());
    let fitted = descend(&x, local, intercept, &obj, hp, hp.n_iter)?;
    Ok(model.with_values(&fitted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Targets;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn basis_examples() {
        let s = BinSpec::new(0.0, 4.0, 4).unwrap();
        assert_eq!(basis_response(0.0, &s).dense(5), [1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(basis_response(0.5, &s).dense(5), [0.5, 0.5, 0.0, 0.0, 0.0]);
        assert_eq!(basis_response(4.0, &s).dense(5), [0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(basis_response(-3.0, &s), basis_response(0.0, &s));
        assert_eq!(basis_response(9.0, &s), basis_response(4.0, &s));
    }

    #[test]
    fn bin_fitting() {
        let s = fit_bins(&[0.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!((s.x_min, s.x_max, s.bins, s.width()), (0.0, 3.0, 2, 1.5));
        let c = fit_bins(&[7.0, 7.0], 4).unwrap();
        assert_eq!((c.x_min, c.x_max, c.bins), (6.5, 7.5, 4));
        assert!(matches!(fit_bins(&[], 3), Err(FsaError::Contract(_))));
    }

    #[test]
    fn partition_of_unity_and_continuity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let col: Vec<f64> = (0..500).map(|_| rng.random_range(-3.0..5.0)).collect();
        let s = fit_bins(&col, 7).unwrap();
        for &x in &col {
            let u = basis_response(x, &s);
            assert!(u.lower < s.bins);
            let d = u.dense(8);
            assert!(d.iter().all(|&w| w >= 0.0));
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let values: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        for i in 1..7 {
            let t = s.knot(i);
            let a = basis_response(t - 1e-10, &s).apply(&values);
            let b = basis_response(t + 1e-10, &s).apply(&values);
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn predict_interpolates_knots() {
        let s = BinSpec::new(-1.0, 3.0, 4).unwrap();
        let identity: Vec<f64> = (0..5).map(|i| s.knot(i)).collect();
        let m = PlModel::new(Task::Classification, 0.0, vec![PlTerm { variable: 1, bins: s, values: identity }]).unwrap();
        for x in [-1.0, -0.3, 0.0, 0.77, 2.5, 3.0] {
            assert!((pl_predict(&m, &[9.0, x]) - x).abs() < 1e-12);
        }
        let vals = vec![0.3, -2.0, 5.0, 1.0, 4.0];
        let m = PlModel::new(Task::Regression, 0.0, vec![PlTerm { variable: 0, bins: s, values: vals.clone() }]).unwrap();
        for (i, v) in vals.iter().enumerate() {
            assert_eq!(pl_predict(&m, &[s.knot(i)]), *v);
        }
        let empty = PlModel::new(Task::Classification, 0.3, vec![]).unwrap();
        assert_eq!(pl_predict(&empty, &[1.0]), 0.3);
        let rank = PlModel::new(Task::Ranking, 0.3, vec![]).unwrap();
        assert_eq!(pl_predict(&rank, &[1.0]), 0.0);
    }

    fn uniform_x(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::new(n, m, (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn expansion_scores_match_active_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = uniform_x(30, 4, &mut rng);
        let bins = fit_all_bins(&x, 3).unwrap();
        let e = expand(&x, &bins).unwrap();
        let terms: Vec<PlTerm> = [0usize, 2]
            .iter()
            .map(|&v| PlTerm { variable: v, bins: bins[v], values: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect() })
            .collect();
        let m = PlModel::new(Task::Classification, 0.25, terms).unwrap();
        let a = m.to_active().unwrap();
        for i in 0..30 {
            let lin: f64 = a.active_index().iter().zip(a.coeffs()).map(|(&c, &b)| e.get(i, c) * b).sum::<f64>() + 0.25;
            assert!((lin - pl_predict(&m, x.row(i))).abs() < 1e-12);
        }
    }

    #[test]
    fn single_bin_selects_like_linear_fsa() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::new(400, 12, (0..4800).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let y: Vec<f64> = (0..400)
            .map(|i| {
                let r = x.row(i);
                if 2.0 * r[3] - 1.5 * r[7] + 0.3 * (rng.random::<f64>() - 0.5) > 0.25 { 1.0 } else { -1.0 }
            })
            .collect();
        let d = Dataset::new(x, Targets::Binary(y)).unwrap();
        let spec = LossSpec::new(LossKind::Logistic);
        let hp = Hyperparams::new(2.0, 200, 10.0, 2);
        let sched = Schedule::new(12, 2, 10.0, 200).unwrap();
        let (lin, _) = crate::fsa::fit(&d, &spec, &hp, &sched).unwrap();
        let (pl, _) = pl_fit(&d, &spec, &hp, &sched, 1).unwrap();
        assert_eq!(lin.active_index(), [3, 7]);
        assert_eq!(pl.variables(), lin.active_index());
    }

    fn second_difference_sum(m: &PlModel) -> f64 {
        m.terms
            .iter()
            .map(|t| {
                let v = &t.values;
                (2..t.bins.bins).map(|k| (v[k + 1] + v[k - 1] - 2.0 * v[k]).powi(2)).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn smoothness_prior_flattens_curvature() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = uniform_x(600, 3, &mut rng);
        let y: Vec<f64> = (0..600).map(|i| if x.get(i, 0).sin() * 3.0 + x.get(i, 0).powi(2) > 0.3 { 1.0 } else { -1.0 }).collect();
        let d = Dataset::new(x, Targets::Binary(y)).unwrap();
        let hp = Hyperparams::new(0.5, 300, 0.0, 3);
        let sched = Schedule::new(3, 3, 0.0, 300).unwrap();
        let mut last = f64::INFINITY;
        for c in [0.0, 10.0, 1000.0] {
            let spec = LossSpec::new(LossKind::Logistic).with_prior(PriorSpec::smooth(0.0, c));
            let mut hp = hp.clone();
            hp.eta = hp.eta.min(0.9 * pl_step_bound(&d, &spec, &hp, 8).unwrap());
            let (m, _) = pl_fit(&d, &spec, &hp, &sched, 8).unwrap();
            let s = second_difference_sum(&m);
            assert!(s < last, "c = {c}: {s} !< {last}");
            last = s;
        }
    }

    #[test]
    fn refit_keeps_support_and_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = uniform_x(300, 6, &mut rng);
        let y: Vec<f64> = (0..300).map(|i| if x.get(i, 2).abs() > 0.5 { 1.0 } else { -1.0 }).collect();
        let d = Dataset::new(x, Targets::Binary(y)).unwrap();
        let spec = pl_default_spec(Task::Classification);
        let hp = Hyperparams::new(0.5, 100, 10.0, 1);
        let (m, t) = pl_fit(&d, &spec, &hp, &Schedule::new(6, 1, 10.0, 100).unwrap(), 4).unwrap();
        assert_eq!(m.variables(), [2]);
        let r = pl_refit(&d, &m, &spec, &hp).unwrap();
        assert_eq!(r.variables(), [2]);
        assert_eq!(r.terms()[0].bins, m.terms()[0].bins);
        // the mean-scaled objective the trainer minimizes
        let e = expand(d.x(), &fit_all_bins(d.x(), 4).unwrap()).unwrap();
        let ed = Dataset::new(e, d.targets().clone()).unwrap();
        let bare = LossSpec::new(spec.kind);
        let loss = |pm: &PlModel| {
            let a = pm.to_active().unwrap();
            let prior: f64 = a
                .coeffs()
                .chunks(5)
                .map(|g| crate::losses::prior_value_and_gradient(g, &spec.prior).0)
                .sum();
            crate::losses::loss_value(&a, &ed, &bare).unwrap() / 300.0 + prior
        };
        assert!(loss(&r) <= loss(&m) + 1e-12);
        assert!(t.final_loss().is_finite());
    }
}
