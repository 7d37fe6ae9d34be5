//! Sparse coefficient models and training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::blocked::BlockGrid;
use crate::data::Task;
use crate::error::{FsaError, Result};

/// Coefficients over the surviving columns. `active_index[p]` is the original
/// column of active position `p`; entries are strictly increasing. Grouped
/// models (piecewise-linear learners) keep whole groups of `group_size`
/// consecutive columns together.
#[derive(Clone, Debug, PartialEq)]
pub struct ActiveModel {
    coeffs: Vec<f64>,
    intercept: f64,
    active_index: Vec<usize>,
    group_size: usize,
}

impl ActiveModel {
    pub fn new(
        coeffs: Vec<f64>,
        intercept: f64,
        active_index: Vec<usize>,
        group_size: usize,
    ) -> Result<Self> {
        if group_size == 0 {
            return Err(FsaError::Contract("group_size must be at least 1".into()));
        }
        if coeffs.len() != active_index.len() {
            return Err(FsaError::Contract(format!(
                "{} coefficients for {} active columns",
                coeffs.len(),
                active_index.len()
            )));
        }
        if active_index.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FsaError::Contract(
                "active_index must be strictly increasing".into(),
            ));
        }
        if !active_index.len().is_multiple_of(group_size) {
            return Err(FsaError::Contract(format!(
                "{} active columns is not a multiple of group_size {group_size}",
                active_index.len()
            )));
        }
        for g in active_index.chunks(group_size) {
            let first = g[0];
            let aligned = first % group_size == 0
                && g.iter().enumerate().all(|(o, &c)| c == first + o);
            if !aligned {
                return Err(FsaError::Contract(format!(
                    "active columns {g:?} do not form a whole group of size {group_size}"
                )));
            }
        }
        Ok(ActiveModel {
            coeffs,
            intercept,
            active_index,
            group_size,
        })
    }

    /// All-zero model over columns `0..n_columns`.
    pub fn zeros(n_columns: usize, group_size: usize) -> Result<Self> {
        ActiveModel::new(
            vec![0.0; n_columns],
            0.0,
            (0..n_columns).collect(),
            group_size,
        )
    }

    pub(crate) fn from_parts_unchecked(
        coeffs: Vec<f64>,
        intercept: f64,
        active_index: Vec<usize>,
        group_size: usize,
    ) -> Self {
        debug_assert_eq!(coeffs.len(), active_index.len());
        ActiveModel {
            coeffs,
            intercept,
            active_index,
            group_size,
        }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub(crate) fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    pub fn set_intercept(&mut self, intercept: f64) {
        self.intercept = intercept;
    }

    pub fn active_index(&self) -> &[usize] {
        &self.active_index
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn n_active(&self) -> usize {
        self.coeffs.len()
    }

    pub fn n_groups(&self) -> usize {
        self.coeffs.len() / self.group_size
    }

    /// Original group (variable) ids of the active groups, ascending.
    pub fn active_groups(&self) -> Vec<usize> {
        self.active_index
            .chunks(self.group_size)
            .map(|g| g[0] / self.group_size)
            .collect()
    }

    /// Coefficient stored for original column `column`, if it is active.
    pub fn coefficient_at(&self, column: usize) -> Option<f64> {
        self.active_index
            .binary_search(&column)
            .ok()
            .map(|p| self.coeffs[p])
    }

    /// Keeps only the active positions in `keep`. Kept coefficients and their
    /// original columns are unchanged; everything else is dropped.
    pub fn compact(&self, keep: &[usize]) -> Result<ActiveModel> {
        let keep = self.checked_keep(keep)?;
        Ok(ActiveModel {
            coeffs: keep.iter().map(|&p| self.coeffs[p]).collect(),
            intercept: self.intercept,
            active_index: keep.iter().map(|&p| self.active_index[p]).collect(),
            group_size: self.group_size,
        })
    }

    /// In-place variant of [`ActiveModel::compact`] for a sorted, deduplicated,
    /// group-aligned keep list.
    pub(crate) fn retain_positions(&mut self, keep: &[usize]) {
        for (dst, &src) in keep.iter().enumerate() {
            self.coeffs[dst] = self.coeffs[src];
            self.active_index[dst] = self.active_index[src];
        }
        self.coeffs.truncate(keep.len());
        self.active_index.truncate(keep.len());
    }

    fn checked_keep(&self, keep: &[usize]) -> Result<Vec<usize>> {
        let mut keep = keep.to_vec();
        keep.sort_unstable();
        keep.dedup();
        if let Some(&bad) = keep.iter().find(|&&p| p >= self.coeffs.len()) {
            return Err(FsaError::Contract(format!(
                "keep position {bad} is not an active position (model has {})",
                self.coeffs.len()
            )));
        }
        let g = self.group_size;
        if g > 1 {
            for chunk in keep.chunks(g) {
                let aligned = chunk.len() == g
                    && chunk[0] % g == 0
                    && chunk.iter().enumerate().all(|(o, &p)| p == chunk[0] + o);
                if !aligned {
                    return Err(FsaError::Contract(format!(
                        "keep set is not aligned to groups of {g} (offending positions {chunk:?})"
                    )));
                }
            }
        }
        Ok(keep)
    }
}

/// Whether the data-fit term is summed or averaged over examples (or pairs).
/// The prior is added unscaled in both cases, so a step size tuned for the
/// mean objective is `n` times the equivalent step on the summed one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossScale {
    Sum,
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    /// Gradient step size.
    pub eta: f64,
    pub n_iter: usize,
    /// Annealing rate of the inverse schedule.
    pub mu: f64,
    /// Target number of variables (groups).
    pub k: usize,
    /// Seeds random tie breaking when `random_ties` is set.
    pub seed: u64,
    pub scale: LossScale,
    /// `None` picks the task default, see [`default_intercept`].
    pub intercept: Option<bool>,
    /// Centre and scale columns before training; the returned model is mapped
    /// back to the original coordinates.
    pub standardize: bool,
    /// Shrinkage applied to the kept coefficients after each selection step
    /// (`1 / (1 + shrink)`); zero gives pure magnitude selection.
    pub threshold_shrink: f64,
    pub random_ties: bool,
    pub grid: BlockGrid,
    pub workers: usize,
}

impl Hyperparams {
    pub fn new(eta: f64, n_iter: usize, mu: f64, k: usize) -> Self {
        Hyperparams {
            eta,
            n_iter,
            mu,
            k,
            seed: 0,
            scale: LossScale::Mean,
            intercept: None,
            standardize: false,
            threshold_shrink: 0.0,
            random_ties: false,
            grid: BlockGrid::default(),
            workers: 1,
        }
    }

    pub fn validate(&self, n_groups: usize) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(FsaError::Validation(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.n_iter == 0 {
            return Err(FsaError::Validation("n_iter must be at least 1".into()));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(FsaError::Validation(format!("mu must be >= 0, got {}", self.mu)));
        }
        if self.k == 0 || self.k > n_groups {
            return Err(FsaError::Validation(format!(
                "k must lie in [1, {n_groups}], got {}",
                self.k
            )));
        }
        if !(self.threshold_shrink.is_finite() && self.threshold_shrink >= 0.0) {
            return Err(FsaError::Validation("threshold shrink must be >= 0".into()));
        }
        if self.workers == 0 {
            return Err(FsaError::Validation("workers must be at least 1".into()));
        }
        self.grid.validate()
    }

    pub fn fits_intercept(&self, task: Task) -> bool {
        self.intercept.unwrap_or_else(|| default_intercept(task))
    }
}

/// Classification fits an intercept; regression targets are taken as centred
/// and ranking is invariant to one.
pub fn default_intercept(task: Task) -> bool {
    matches!(task, Task::Classification)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn compact_restricts_coefficients_and_index() {
        let m = ActiveModel::new(vec![3.0, -1.0, 2.0], 0.5, vec![0, 1, 2], 1).unwrap();
        let c = m.compact(&[0, 2]).unwrap();
        assert_eq!(c.coeffs(), [3.0, 2.0]);
        assert_eq!(c.active_index(), [0, 2]);
        assert_eq!(c.intercept(), 0.5);
    }

    #[test]
    fn compact_with_everything_is_identity() {
        let m = ActiveModel::new(vec![3.0, -1.0, 2.0], 0.0, vec![1, 4, 9], 1).unwrap();
        assert_eq!(m.compact(&[0, 1, 2]).unwrap(), m);
    }

    #[test]
    fn grouped_compaction_must_be_aligned() {
        let m = ActiveModel::zeros(9, 3).unwrap();
        assert!(m.compact(&[3, 4, 5]).is_ok());
        assert!(matches!(m.compact(&[2, 3, 4]), Err(FsaError::Contract(_))));
        assert!(matches!(m.compact(&[0, 1]), Err(FsaError::Contract(_))));
        let c = m.compact(&[0, 1, 2, 6, 7, 8]).unwrap();
        assert_eq!(c.active_groups(), [0, 2]);
        assert_eq!(c.active_index(), [0, 1, 2, 6, 7, 8]);
    }

    #[test]
    fn out_of_range_keep_is_a_contract_violation() {
        let m = ActiveModel::zeros(2, 1).unwrap();
        assert!(matches!(m.compact(&[2]), Err(FsaError::Contract(_))));
    }

    #[test]
    fn constructor_checks_index_invariants() {
        assert!(ActiveModel::new(vec![1.0, 2.0], 0.0, vec![2, 1], 1).is_err());
        assert!(ActiveModel::new(vec![1.0, 2.0], 0.0, vec![1, 2], 2).is_err());
        assert!(ActiveModel::new(vec![1.0, 2.0], 0.0, vec![2, 3], 2).is_ok());
    }

    fn model_and_keeps() -> impl Strategy<Value = (Vec<f64>, Vec<usize>, Vec<bool>, Vec<bool>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(-10.0f64..10.0, n),
                proptest::collection::btree_set(0usize..200, n),
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::vec(any::<bool>(), n),
            )
                .prop_map(|(c, idx, a, b)| (c, idx.into_iter().collect(), a, b))
        })
    }

    proptest! {
        #[test]
        fn successive_compactions_compose((coeffs, index, first, second) in model_and_keeps()) {
            let m = ActiveModel::new(coeffs, 1.0, index, 1).unwrap();
            let keep_a: Vec<usize> = (0..m.n_active()).filter(|&p| first[p]).collect();
            let once = m.compact(&keep_a).unwrap();
            let keep_b: Vec<usize> = (0..once.n_active()).filter(|&p| second[keep_a[p]]).collect();
            let twice = once.compact(&keep_b).unwrap();

            let both: Vec<usize> = (0..m.n_active()).filter(|&p| first[p] && second[p]).collect();
            prop_assert_eq!(&twice, &m.compact(&both).unwrap());
            // idempotent for a fixed keep set
            prop_assert_eq!(&once.compact(&(0..once.n_active()).collect::<Vec<_>>()).unwrap(), &once);
            // original columns keep their values or disappear
            for &c in m.active_index() {
                if let Some(v) = twice.coefficient_at(c) {
                    prop_assert_eq!(Some(v), m.coefficient_at(c));
                }
            }
        }
    }
}
