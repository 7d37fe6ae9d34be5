//! Differentiable losses and coefficient priors.
//!
//! Every loss is a function of the response vector `f = X b + b0` (one value
//! per row), so the coefficient gradient is always `X^T (dL/df)` plus the
//! prior gradient. Values returned by [`loss_value`] are summed over examples
//! (or pairs); the trainer may average the data-fit term instead, see
//! [`LossScale`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Targets, Task};
use crate::error::{FsaError, Result};
use crate::model::{ActiveModel, LossScale};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    Logistic,
    SvmHuber,
    Lorenz,
    RankLogistic,
}

impl LossKind {
    pub fn task(self) -> Task {
        match self {
            LossKind::SquaredError => Task::Regression,
            LossKind::Logistic | LossKind::SvmHuber | LossKind::Lorenz => Task::Classification,
            LossKind::RankLogistic => Task::Ranking,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::SquaredError => "squared_error",
            LossKind::Logistic => "logistic",
            LossKind::SvmHuber => "svm_huber",
            LossKind::Lorenz => "lorenz",
            LossKind::RankLogistic => "rank_logistic",
        }
    }

    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Regression => LossKind::SquaredError,
            Task::Classification => LossKind::Logistic,
            Task::Ranking => LossKind::RankLogistic,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = FsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "squared_error" | "squared" | "ls" => Ok(LossKind::SquaredError),
            "logistic" => Ok(LossKind::Logistic),
            "svm_huber" | "svm" | "huber" => Ok(LossKind::SvmHuber),
            "lorenz" => Ok(LossKind::Lorenz),
            "rank_logistic" | "rank" => Ok(LossKind::RankLogistic),
            other => Err(FsaError::Validation(format!("unknown loss '{other}'"))),
        }
    }
}

/// Per-group prior `rho(b_j)`. `smooth2` and `tv_q` are alternatives and may
/// not both be nonzero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// Weight of `||b_j||^2`.
    pub ridge: f64,
    /// Weight of the squared second differences of a group.
    pub smooth2: f64,
    /// Weight of the huberized total variation of a group.
    pub tv_q: f64,
    /// Transition width of the huberized absolute value used by `tv_q`.
    pub tv_huber_h: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            ridge: 0.0,
            smooth2: 0.0,
            tv_q: 0.0,
            tv_huber_h: 0.01,
        }
    }
}

impl PriorSpec {
    pub fn ridge(weight: f64) -> Self {
        PriorSpec {
            ridge: weight,
            ..PriorSpec::default()
        }
    }

    pub fn smooth(ridge: f64, smooth2: f64) -> Self {
        PriorSpec {
            ridge,
            smooth2,
            ..PriorSpec::default()
        }
    }

    pub fn total_variation(ridge: f64, q: f64, width: f64) -> Self {
        PriorSpec {
            ridge,
            tv_q: q,
            tv_huber_h: width,
            ..PriorSpec::default()
        }
    }

    pub fn is_zero(&self) -> bool {
        self.ridge == 0.0 && self.smooth2 == 0.0 && self.tv_q == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ridge", self.ridge), ("smooth2", self.smooth2), ("tv_q", self.tv_q)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(FsaError::Validation(format!("prior weight {name} must be >= 0, got {v}")));
            }
        }
        if !(self.tv_huber_h.is_finite() && self.tv_huber_h > 0.0) {
            return Err(FsaError::Validation("tv_huber_h must be > 0".into()));
        }
        if self.smooth2 > 0.0 && self.tv_q > 0.0 {
            return Err(FsaError::Validation(
                "the second-difference and total-variation priors are alternatives; set only one".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Transition width of the huberized hinge.
    pub huber_h: f64,
    pub prior: PriorSpec,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec {
            kind,
            huber_h: 0.5,
            prior: PriorSpec::default(),
        }
    }

    pub fn with_prior(mut self, prior: PriorSpec) -> Self {
        self.prior = prior;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.huber_h.is_finite() && self.huber_h > 0.0) {
            return Err(FsaError::Validation(format!("huber_h must be > 0, got {}", self.huber_h)));
        }
        self.prior.validate()
    }

    pub fn check_targets(&self, targets: &Targets) -> Result<()> {
        self.validate()?;
        if self.kind.task() != targets.task() {
            return Err(FsaError::Validation(format!(
                "loss {} needs {} targets, data has {} targets",
                self.kind,
                self.kind.task(),
                targets.task()
            )));
        }
        Ok(())
    }
}

/// `log(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Huberized hinge: 0 above `1 + h`, linear `1 - x` below `1 - h`, quadratic
/// in between.
pub fn huber_hinge(x: f64, h: f64) -> f64 {
    if x > 1.0 + h {
        0.0
    } else if x < 1.0 - h {
        1.0 - x
    } else {
        let t = 1.0 + h - x;
        t * t / (4.0 * h)
    }
}

pub fn huber_hinge_derivative(x: f64, h: f64) -> f64 {
    if x > 1.0 + h {
        0.0
    } else if x < 1.0 - h {
        -1.0
    } else {
        -(1.0 + h - x) / (2.0 * h)
    }
}

/// `ln(1 + (x - 1)^2)` for `x <= 1`, zero above. Not convex.
pub fn lorenz(x: f64) -> f64 {
    if x > 1.0 {
        0.0
    } else {
        let t = x - 1.0;
        (t * t).ln_1p()
    }
}

pub fn lorenz_derivative(x: f64) -> f64 {
    if x > 1.0 {
        0.0
    } else {
        let t = x - 1.0;
        2.0 * t / (1.0 + t * t)
    }
}

/// Huber approximation of `|t|` with width `delta`.
fn huber_abs(t: f64, delta: f64) -> f64 {
    if t.abs() <= delta {
        t * t / (2.0 * delta)
    } else {
        t.abs() - delta / 2.0
    }
}

fn huber_abs_derivative(t: f64, delta: f64) -> f64 {
    if t.abs() <= delta {
        t / delta
    } else {
        t.signum()
    }
}

/// Adds the prior of one group to `grad` and returns its value. For a group
/// `b_0..b_B` the second-difference term runs over `k = 2..=B-1` and the
/// total-variation term over `k = 1..=B`.
fn accumulate_prior(group: &[f64], prior: &PriorSpec, grad: &mut [f64]) -> f64 {
    let mut value = 0.0;
    if prior.ridge > 0.0 {
        for (g, &b) in grad.iter_mut().zip(group) {
            value += prior.ridge * b * b;
            *g += 2.0 * prior.ridge * b;
        }
    }
    let last = group.len() - 1;
    if prior.smooth2 > 0.0 && last >= 3 {
        for k in 2..last {
            let d = group[k + 1] + group[k - 1] - 2.0 * group[k];
            value += prior.smooth2 * d * d;
            let s = 2.0 * prior.smooth2 * d;
            grad[k + 1] += s;
            grad[k - 1] += s;
            grad[k] -= 2.0 * s;
        }
    }
    if prior.tv_q > 0.0 {
        for k in 1..=last {
            let t = group[k] - group[k - 1];
            value += prior.tv_q * huber_abs(t, prior.tv_huber_h);
            let s = prior.tv_q * huber_abs_derivative(t, prior.tv_huber_h);
            grad[k] += s;
            grad[k - 1] -= s;
        }
    }
    value
}

/// Value and gradient of the prior on one coefficient group.
pub fn prior_value_and_gradient(group: &[f64], prior: &PriorSpec) -> (f64, Vec<f64>) {
    assert!(!group.is_empty(), "prior needs a nonempty group");
    let mut grad = vec![0.0; group.len()];
    let value = accumulate_prior(group, prior, &mut grad);
    (value, grad)
}

/// Prior summed over consecutive groups of `group_size`; gradient added into `grad`.
pub(crate) fn prior_total(coeffs: &[f64], group_size: usize, prior: &PriorSpec, grad: &mut [f64]) -> f64 {
    if prior.is_zero() {
        return 0.0;
    }
    coeffs
        .chunks(group_size)
        .zip(grad.chunks_mut(group_size))
        .map(|(b, g)| accumulate_prior(b, prior, g))
        .sum()
}

/// Summed data-fit term at responses `f`; writes `dL/df` into `dloss`.
pub(crate) fn data_fit(
    spec: &LossSpec,
    targets: &Targets,
    weights: Option<&[f64]>,
    f: &[f64],
    dloss: &mut [f64],
) -> f64 {
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let mut value = 0.0;
    match (spec.kind, targets) {
        (LossKind::SquaredError, Targets::Real(y)) => {
            for i in 0..f.len() {
                let r = f[i] - y[i];
                value += 0.5 * w(i) * r * r;
                dloss[i] = w(i) * r;
            }
        }
        (LossKind::Logistic, Targets::Binary(y)) => {
            for i in 0..f.len() {
                let m = y[i] * f[i];
                value += w(i) * softplus(-m);
                dloss[i] = -w(i) * y[i] * sigmoid(-m);
            }
        }
        (LossKind::SvmHuber, Targets::Binary(y)) => {
            for i in 0..f.len() {
                let m = y[i] * f[i];
                value += w(i) * huber_hinge(m, spec.huber_h);
                dloss[i] = w(i) * y[i] * huber_hinge_derivative(m, spec.huber_h);
            }
        }
        (LossKind::Lorenz, Targets::Binary(y)) => {
            for i in 0..f.len() {
                let m = y[i] * f[i];
                value += w(i) * lorenz(m);
                dloss[i] = w(i) * y[i] * lorenz_derivative(m);
            }
        }
        (LossKind::RankLogistic, Targets::Pairs(pairs)) => {
            dloss.fill(0.0);
            for p in pairs.pairs() {
                let d = f[p.i] - f[p.j];
                value += softplus(d) - p.r * d;
                let g = sigmoid(d) - p.r;
                dloss[p.i] += g;
                dloss[p.j] -= g;
            }
        }
        (kind, t) => unreachable!("loss {kind} paired with {} targets", t.task()),
    }
    value
}

/// Number of terms the data fit sums over.
pub(crate) fn n_terms(targets: &Targets) -> usize {
    match targets {
        Targets::Real(y) | Targets::Binary(y) => y.len(),
        Targets::Pairs(p) => p.len(),
    }
}

/// Training objective: data fit (summed or averaged) plus the prior.
pub(crate) struct Objective<'a> {
    pub spec: &'a LossSpec,
    pub targets: &'a Targets,
    pub weights: Option<&'a [f64]>,
    pub group_size: usize,
    pub data_scale: f64,
}

impl<'a> Objective<'a> {
    pub fn new(
        spec: &'a LossSpec,
        targets: &'a Targets,
        weights: Option<&'a [f64]>,
        group_size: usize,
        scale: LossScale,
    ) -> Result<Self> {
        spec.check_targets(targets)?;
        let data_scale = match scale {
            LossScale::Sum => 1.0,
            LossScale::Mean => 1.0 / n_terms(targets).max(1) as f64,
        };
        Ok(Objective {
            spec,
            targets,
            weights,
            group_size,
            data_scale,
        })
    }

    /// Objective value at responses `f` and coefficients `coeffs`; `dloss`
    /// receives the scaled `dL/df`.
    pub fn value(&self, f: &[f64], coeffs: &[f64], dloss: &mut [f64]) -> f64 {
        let fit = data_fit(self.spec, self.targets, self.weights, f, dloss);
        if self.data_scale != 1.0 {
            for d in dloss.iter_mut() {
                *d *= self.data_scale;
            }
        }
        fit * self.data_scale + self.prior_value(coeffs)
    }

    pub fn prior_value(&self, coeffs: &[f64]) -> f64 {
        if self.spec.prior.is_zero() {
            return 0.0;
        }
        let mut scratch = vec![0.0; coeffs.len()];
        prior_total(coeffs, self.group_size, &self.spec.prior, &mut scratch)
    }

    pub fn add_prior_gradient(&self, coeffs: &[f64], grad: &mut [f64]) {
        prior_total(coeffs, self.group_size, &self.spec.prior, grad);
    }
}

/// Gradient with respect to the active coefficients and the intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub coeffs: Vec<f64>,
    pub intercept: f64,
}

fn response(model: &ActiveModel, data: &Dataset) -> Result<Vec<f64>> {
    let m = data.n_features();
    if let Some(&bad) = model.active_index().iter().find(|&&c| c >= m) {
        return Err(FsaError::Contract(format!(
            "model references column {bad}, data has {m} columns"
        )));
    }
    let x = data.x();
    Ok((0..data.n_rows())
        .map(|i| {
            let row = x.row(i);
            model
                .active_index()
                .iter()
                .zip(model.coeffs())
                .fold(model.intercept(), |acc, (&c, &b)| acc + b * row[c])
        })
        .collect())
}

/// Summed loss of `model` on `data`: data fit plus the per-group prior.
pub fn loss_value(model: &ActiveModel, data: &Dataset, spec: &LossSpec) -> Result<f64> {
    spec.check_targets(data.targets())?;
    let f = response(model, data)?;
    let mut dloss = vec![0.0; f.len()];
    let fit = data_fit(spec, data.targets(), data.weights(), &f, &mut dloss);
    let mut scratch = vec![0.0; model.n_active()];
    Ok(fit + prior_total(model.coeffs(), model.group_size(), &spec.prior, &mut scratch))
}

/// Analytic gradient of [`loss_value`].
pub fn loss_gradient(model: &ActiveModel, data: &Dataset, spec: &LossSpec) -> Result<Gradient> {
    spec.check_targets(data.targets())?;
    let f = response(model, data)?;
    let mut dloss = vec![0.0; f.len()];
    data_fit(spec, data.targets(), data.weights(), &f, &mut dloss);
    let x = data.x();
    let mut coeffs = vec![0.0; model.n_active()];
    for (i, &d) in dloss.iter().enumerate() {
        let row = x.row(i);
        for (g, &c) in coeffs.iter_mut().zip(model.active_index()) {
            *g += d * row[c];
        }
    }
    prior_total(model.coeffs(), model.group_size(), &spec.prior, &mut coeffs);
    Ok(Gradient {
        coeffs,
        intercept: dloss.iter().sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Matrix, RankPair, RankPairSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn huber_hinge_branches() {
        assert_eq!(huber_hinge(2.5, 0.5), 0.0);
        assert!((huber_hinge(1.0, 0.5) - 0.125).abs() < 1e-15);
        assert_eq!(huber_hinge(0.0, 0.5), 1.0);
        // C1 at both knots
        for knot in [0.5, 1.5] {
            let (a, b) = (knot - 1e-9, knot + 1e-9);
            assert!((huber_hinge(a, 0.5) - huber_hinge(b, 0.5)).abs() < 1e-8);
            assert!((huber_hinge_derivative(a, 0.5) - huber_hinge_derivative(b, 0.5)).abs() < 1e-8);
        }
    }

    #[test]
    fn lorenz_branches() {
        assert_eq!(lorenz(1.5), 0.0);
        assert_eq!(lorenz(1.0), 0.0);
        assert!((lorenz(0.0) - LN2).abs() < 1e-15);
        assert_eq!(lorenz_derivative(1.0), 0.0);
        assert!(lorenz_derivative(1.0 - 1e-9).abs() < 1e-8);
    }

    #[test]
    fn stable_forms_do_not_overflow() {
        for m in [-1e4, -700.0, 0.0, 700.0, 1e4] {
            assert!(softplus(m).is_finite());
            assert!(sigmoid(m).is_finite());
            assert!(lorenz(m).is_finite());
            assert!(huber_hinge(m, 0.5).is_finite());
        }
        assert_eq!(softplus(-1e4), 0.0);
        assert_eq!(softplus(1e4), 1e4);
    }

    fn small(targets: Targets, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Dataset {
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Dataset::new(Matrix::new(rows, cols, x).unwrap(), targets).unwrap()
    }

    #[test]
    fn zero_model_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = small(Targets::Real(vec![0.0; 6]), 6, 3, &mut rng);
        let zero = ActiveModel::zeros(3, 1).unwrap();
        assert_eq!(loss_value(&zero, &d, &LossSpec::new(LossKind::SquaredError)).unwrap(), 0.0);

        let labels: Vec<f64> = (0..7).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let d = small(Targets::Binary(labels), 7, 3, &mut rng);
        let v = loss_value(&zero, &d, &LossSpec::new(LossKind::Logistic)).unwrap();
        assert!((v - 7.0 * LN2).abs() < 1e-12);

        let pairs = RankPairSet::new(
            vec![
                RankPair { i: 0, j: 1, r: 0.3 },
                RankPair { i: 2, j: 4, r: 1.0 },
                RankPair { i: 3, j: 0, r: 0.0 },
            ],
            5,
        )
        .unwrap();
        let d = small(Targets::Pairs(pairs), 5, 3, &mut rng);
        let v = loss_value(&zero, &d, &LossSpec::new(LossKind::RankLogistic)).unwrap();
        assert!((v - 3.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn squared_error_gradient_at_zero_is_minus_xty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = small(Targets::Real(y.clone()), 5, 2, &mut rng);
        let g = loss_gradient(&ActiveModel::zeros(2, 1).unwrap(), &d, &LossSpec::new(LossKind::SquaredError)).unwrap();
        for j in 0..2 {
            let xty: f64 = (0..5).map(|i| d.x().get(i, j) * y[i]).sum();
            assert!((g.coeffs[j] + xty).abs() < 1e-14);
        }
    }

    #[test]
    fn ridge_gradient_is_two_s_beta() {
        let b = [0.5, -2.0, 3.0];
        let (v, g) = prior_value_and_gradient(&b, &PriorSpec::ridge(0.7));
        assert!((v - 0.7 * (0.25 + 4.0 + 9.0)).abs() < 1e-14);
        for (gi, bi) in g.iter().zip(b) {
            assert!((gi - 1.4 * bi).abs() < 1e-14);
        }
    }

    #[test]
    fn second_difference_prior_edge_cases() {
        let (v, g) = prior_value_and_gradient(&[5.0; 5], &PriorSpec::smooth(0.0, 3.0));
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        // B = 2: the range k = 2..=B-1 is empty
        let (v, _) = prior_value_and_gradient(&[0.0, 1.0, 0.0], &PriorSpec::smooth(0.0, 1.0));
        assert_eq!(v, 0.0);
        // B = 4: only k = 2, 3 contribute
        let (v, _) = prior_value_and_gradient(&[9.0, 0.0, 1.0, 0.0, 0.0], &PriorSpec::smooth(0.0, 1.0));
        assert_eq!(v, 4.0 + 1.0);
    }

    #[test]
    fn zero_prior_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels: Vec<f64> = (0..6).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let d = small(Targets::Binary(labels), 6, 3, &mut rng);
        let m = ActiveModel::new(vec![0.3, -0.2, 1.1], 0.1, vec![0, 1, 2], 1).unwrap();
        let bare = LossSpec::new(LossKind::Lorenz);
        let zero = bare.with_prior(PriorSpec { tv_huber_h: 0.3, ..PriorSpec::default() });
        assert_eq!(loss_value(&m, &d, &bare).unwrap(), loss_value(&m, &d, &zero).unwrap());
    }

    #[test]
    fn incompatible_targets_and_priors_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = small(Targets::Real(vec![0.0; 3]), 3, 2, &mut rng);
        let m = ActiveModel::zeros(2, 1).unwrap();
        assert!(loss_value(&m, &d, &LossSpec::new(LossKind::Logistic)).is_err());
        let both = LossSpec::new(LossKind::SquaredError).with_prior(PriorSpec {
            smooth2: 1.0,
            tv_q: 1.0,
            ..PriorSpec::default()
        });
        assert!(loss_value(&m, &d, &both).is_err());
        let wide = ActiveModel::new(vec![1.0], 0.0, vec![5], 1).unwrap();
        assert!(matches!(
            loss_value(&wide, &d, &LossSpec::new(LossKind::SquaredError)),
            Err(FsaError::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn margin_losses_monotone_and_finite(a in -1e4f64..1e4, b in -1e4f64..1e4, h in 0.01f64..2.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(huber_hinge(hi, h) <= huber_hinge(lo, h));
            prop_assert!(lorenz(hi) <= lorenz(lo));
            prop_assert!(huber_hinge(lo, h).is_finite() && lorenz(lo).is_finite());
            prop_assert!(softplus(lo).is_finite() && sigmoid(lo).is_finite());
            prop_assert!(huber_hinge_derivative(lo, h).is_finite() && lorenz_derivative(lo).is_finite());
        }
    }
}
