//! Feature selection with annealing.
//!
//! Sparse learners that minimize a differentiable loss while keeping exactly
//! `k` variables: gradient steps alternate with the removal of the
//! lowest-magnitude coefficients along a shrinking schedule.

pub mod blocked;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fsa;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod persist;
pub mod plinear;
pub mod schedule;
pub mod synth;

pub use blocked::{blocked_gradient, blocked_response, BlockGrid, ColumnMatrix, Executor};
pub use data::{load_csv, load_ranking_csv, read_table, write_csv, write_pairs_csv, Dataset, Matrix, RankPair, RankPairSet, Table, Targets, Task};
pub use error::{FsaError, Result};
pub use fsa::{fit, quantile_threshold, refit, spectral_norm, step_bound, FitTrace, IterRecord, SpectralNorm};
pub use losses::{loss_gradient, loss_value, prior_value_and_gradient, Gradient, LossKind, LossSpec, PriorSpec};
pub use model::{ActiveModel, Hyperparams, LossScale};
pub use persist::{ModelFile, Predictor, SCHEMA_VERSION};
pub use plinear::{basis_response, fit_bins, pl_fit, pl_predict, pl_refit, BinSpec, PlModel, PlTerm};
pub use schedule::{features_to_keep, schedule_cost, Schedule};
pub use synth::SynthConfig;
