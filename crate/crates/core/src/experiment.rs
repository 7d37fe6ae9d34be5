//! Repeated synthetic experiments: train on fresh correlated-Gaussian data,
//! score selection and held-out accuracy on a second sample of the same size.
//!
//! Results tables are a pure function of the config. Wall-clock times are
//! kept apart so the results file stays reproducible byte for byte.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Deserialize;

use crate::data::{Dataset, Targets, Task};
use crate::error::{FsaError, Result};
use crate::fsa::{fit, step_bound};
use crate::losses::{LossKind, LossSpec};
use crate::metrics::{auc, detection_rate, pcd, rank_disagreement, rmse};
use crate::model::{ActiveModel, Hyperparams};
use crate::schedule::Schedule;
use crate::synth::{gen_classification, gen_rank_pairs, gen_regression, true_columns, SynthConfig};
use crate::blocked::BlockGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepPolicy {
    /// Use `eta` as given.
    Fixed,
    /// Use 0.9 of the convergence bound for the training design.
    Bound,
    /// Try `eta`; on divergence retry with 0.9 of the bound.
    Fallback,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StandardizeMode {
    Off,
    On,
    Both,
}

/// One `[[row]]` of a bench config.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub task: Task,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    /// Label-noise fraction for classification, noise sigma for regression.
    #[serde(default)]
    pub noise: f64,
    pub runs: usize,
    pub seed: u64,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default)]
    pub iters: Option<usize>,
    #[serde(default)]
    pub loss: Option<LossKind>,
    #[serde(default)]
    pub step: Option<StepPolicy>,
    #[serde(default)]
    pub standardize: Option<StandardizeMode>,
    #[serde(default)]
    pub delta: Option<f64>,
    /// Pairs per sample for ranking rows (default `4 n`).
    #[serde(default)]
    pub pairs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(rename = "row")]
    pub rows: Vec<RowConfig>,
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: BenchConfig = toml::from_str(text).map_err(|e| FsaError::Config(e.to_string()))?;
        if cfg.rows.is_empty() {
            return Err(FsaError::Config("config has no [[row]] entries".into()));
        }
        for r in &cfg.rows {
            if r.runs == 0 {
                return Err(FsaError::Config(format!("row {} asks for zero runs", r.label())));
            }
        }
        Ok(cfg)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FsaError::io(path, e))?;
        BenchConfig::from_toml(&text)
    }
}

impl RowConfig {
    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{}-{}x{}-k{}", self.task, self.n, self.m, self.k))
    }
}

/// Everything needed to run one trial of a row.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSpec {
    pub task: Task,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub noise: f64,
    pub delta: f64,
    pub seed: u64,
    pub eta: f64,
    pub mu: f64,
    pub iters: usize,
    pub loss: LossKind,
    pub step: StepPolicy,
    pub standardize: bool,
    pub pairs: usize,
    pub workers: usize,
    pub grid: BlockGrid,
}

impl TrialSpec {
    /// Defaults: `eta` 20 for classification and ranking, 1 for regression;
    /// `mu = 300`, 500 iterations, `delta = 0.9`.
    pub fn new(task: Task, n: usize, m: usize, k: usize, seed: u64) -> Self {
        TrialSpec {
            task,
            n,
            m,
            k,
            noise: 0.0,
            delta: 0.9,
            seed,
            eta: if task == Task::Regression { 1.0 } else { 20.0 },
            mu: 300.0,
            iters: 500,
            loss: LossKind::default_for(task),
            step: StepPolicy::Fixed,
            standardize: false,
            pairs: 4 * n,
            workers: 1,
            grid: BlockGrid::default(),
        }
    }

    fn synth(&self, seed: u64) -> SynthConfig {
        let mut cfg = SynthConfig::new(self.n, self.m, self.k, seed);
        cfg.delta = self.delta;
        match self.task {
            Task::Classification => cfg.noise_fraction = self.noise,
            Task::Regression => cfg.sigma = self.noise,
            Task::Ranking => {}
        }
        cfg
    }

    fn generate(&self, seed: u64) -> Result<Dataset> {
        let cfg = self.synth(seed);
        match self.task {
            Task::Classification => gen_classification(&cfg),
            Task::Regression => gen_regression(&cfg),
            Task::Ranking => gen_rank_pairs(&cfg, self.pairs),
        }
    }

    /// Seeds of the training and held-out samples of run `run`.
    pub fn seeds(&self, run: usize) -> (u64, u64) {
        let base = self
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(2 * run as u64);
        (base, base.wrapping_add(1))
    }

    pub fn hyperparams(&self, eta: f64) -> Hyperparams {
        let mut hp = Hyperparams::new(eta, self.iters, self.mu, self.k);
        hp.standardize = self.standardize;
        hp.workers = self.workers;
        hp.grid = self.grid;
        hp
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepSource {
    Fixed,
    Bound,
    /// The fixed step diverged and the bound was used instead.
    Fallback,
}

impl StepSource {
    pub fn as_str(self) -> &'static str {
        match self {
            StepSource::Fixed => "fixed",
            StepSource::Bound => "bound",
            StepSource::Fallback => "fallback",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialOutcome {
    pub selected: Vec<usize>,
    pub truth: Vec<usize>,
    pub model: ActiveModel,
    /// Held-out AUC, RMSE or rank disagreement depending on the task.
    pub held_out: f64,
    pub eta: f64,
    pub step: StepSource,
    pub seconds: f64,
}

fn linear_scores(model: &ActiveModel, data: &Dataset) -> Vec<f64> {
    let x = data.x();
    (0..data.n_rows())
        .map(|i| {
            let row = x.row(i);
            model
                .active_index()
                .iter()
                .zip(model.coeffs())
                .fold(model.intercept(), |acc, (&c, &b)| acc + b * row[c])
        })
        .collect()
}

/// Held-out metric of `model` on `data`: AUC, RMSE or rank disagreement.
pub fn held_out_metric(model: &ActiveModel, data: &Dataset) -> Result<f64> {
    let s = linear_scores(model, data);
    match data.targets() {
        Targets::Binary(y) => auc(&s, y),
        Targets::Real(y) => rmse(&s, y),
        Targets::Pairs(p) => rank_disagreement(&s, p),
    }
}

pub fn run_trial(spec: &TrialSpec, run: usize) -> Result<TrialOutcome> {
    let (train_seed, test_seed) = spec.seeds(run);
    let train = spec.generate(train_seed)?;
    let loss = LossSpec::new(spec.loss);
    let sched = Schedule::new(spec.m, spec.k, spec.mu, spec.iters)?;
    let started = Instant::now();
    let bounded = |spec: &TrialSpec| -> Result<f64> { Ok(0.9 * step_bound(&train, &loss, &spec.hyperparams(1.0))?) };
    let (eta, source, result) = match spec.step {
        StepPolicy::Fixed => (spec.eta, StepSource::Fixed, fit(&train, &loss, &spec.hyperparams(spec.eta), &sched)),
        StepPolicy::Bound => {
            let eta = bounded(spec)?;
            (eta, StepSource::Bound, fit(&train, &loss, &spec.hyperparams(eta), &sched))
        }
        StepPolicy::Fallback => match fit(&train, &loss, &spec.hyperparams(spec.eta), &sched) {
            Err(FsaError::Diverged { .. }) => {
                let eta = bounded(spec)?;
                (eta, StepSource::Fallback, fit(&train, &loss, &spec.hyperparams(eta), &sched))
            }
            other => (spec.eta, StepSource::Fixed, other),
        },
    };
    let (model, trace) = result?;
    let seconds = started.elapsed().as_secs_f64();
    let test = spec.generate(test_seed)?;
    Ok(TrialOutcome {
        selected: trace.selected,
        truth: true_columns(spec.k),
        held_out: held_out_metric(&model, &test)?,
        model,
        eta,
        step: source,
        seconds,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowResult {
    pub label: String,
    pub spec: TrialSpec,
    pub runs: usize,
    pub failures: usize,
    pub dr: Option<f64>,
    pub pcd: Option<f64>,
    pub held_out: Option<f64>,
    pub eta_mean: Option<f64>,
    /// Runs whose fixed step diverged and fell back to the bound.
    pub fallbacks: usize,
    pub mean_seconds: Option<f64>,
    pub errors: Vec<String>,
}

impl RowResult {
    pub fn metric_name(&self) -> &'static str {
        match self.spec.task {
            Task::Classification => "auc",
            Task::Regression => "rmse",
            Task::Ranking => "rloss",
        }
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn run_row(label: String, spec: TrialSpec, runs: usize) -> Result<RowResult> {
    let mut outcomes = Vec::new();
    let mut errors = Vec::new();
    for r in 0..runs {
        match run_trial(&spec, r) {
            Ok(o) => outcomes.push(o),
            Err(e @ (FsaError::Diverged { .. } | FsaError::UndefinedMetric(_))) => errors.push(format!("run {r}: {e}")),
            Err(e) => return Err(e),
        }
    }
    let sets: Vec<(Vec<usize>, Vec<usize>)> = outcomes.iter().map(|o| (o.selected.clone(), o.truth.clone())).collect();
    let pcds: Vec<f64> = sets.iter().map(|(s, t)| pcd(s, t)).collect::<Result<_>>()?;
    let held: Vec<f64> = outcomes.iter().map(|o| o.held_out).collect();
    let etas: Vec<f64> = outcomes.iter().map(|o| o.eta).collect();
    let secs: Vec<f64> = outcomes.iter().map(|o| o.seconds).collect();
    Ok(RowResult {
        label,
        runs,
        failures: errors.len(),
        dr: if sets.is_empty() { None } else { Some(detection_rate(&sets)?) },
        pcd: mean(&pcds),
        held_out: mean(&held),
        eta_mean: mean(&etas),
        fallbacks: outcomes.iter().filter(|o| o.step == StepSource::Fallback).count(),
        mean_seconds: mean(&secs),
        errors,
        spec,
    })
}

/// Execution settings shared by every row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchOptions {
    pub workers: usize,
    pub grid: BlockGrid,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            workers: 1,
            grid: BlockGrid::default(),
        }
    }
}

/// Expands config rows into trial specs, one per standardization setting.
pub fn plan(cfg: &BenchConfig, opts: BenchOptions) -> Vec<(String, TrialSpec, usize)> {
    let mut out = Vec::new();
    for row in &cfg.rows {
        let mut spec = TrialSpec::new(row.task, row.n, row.m, row.k, row.seed);
        spec.noise = row.noise;
        if let Some(v) = row.eta {
            spec.eta = v;
        }
        if let Some(v) = row.mu {
            spec.mu = v;
        }
        if let Some(v) = row.iters {
            spec.iters = v;
        }
        if let Some(v) = row.loss {
            spec.loss = v;
        }
        if let Some(v) = row.step {
            spec.step = v;
        }
        if let Some(v) = row.delta {
            spec.delta = v;
        }
        if let Some(v) = row.pairs {
            spec.pairs = v;
        }
        spec.workers = opts.workers;
        spec.grid = opts.grid;
        let modes: &[bool] = match row.standardize.unwrap_or(StandardizeMode::Both) {
            StandardizeMode::Off => &[false],
            StandardizeMode::On => &[true],
            StandardizeMode::Both => &[false, true],
        };
        for &s in modes {
            let mut spec = spec.clone();
            spec.standardize = s;
            out.push((row.label(), spec, row.runs));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<RowResult>,
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

impl BenchReport {
    pub fn run(cfg: &BenchConfig, opts: BenchOptions) -> Result<Self> {
        let rows = plan(cfg, opts)
            .into_iter()
            .map(|(label, spec, runs)| run_row(label, spec, runs))
            .collect::<Result<_>>()?;
        Ok(BenchReport { rows })
    }

    pub fn all_failed(&self) -> bool {
        self.rows.iter().all(|r| r.failures == r.runs)
    }

    /// Deterministic results table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,task,n,m,k,noise,standardize,runs,failures,step,eta,mu,iters,dr,pcd,metric,value,fallbacks\n");
        for r in &self.rows {
            let p = &r.spec;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.label,
                p.task,
                p.n,
                p.m,
                p.k,
                p.noise,
                p.standardize,
                r.runs,
                r.failures,
                format!("{:?}", p.step).to_lowercase(),
                opt(r.eta_mean, 6),
                p.mu,
                p.iters,
                opt(r.dr, 1),
                opt(r.pcd, 2),
                r.metric_name(),
                opt(r.held_out, 4),
                r.fallbacks,
            );
        }
        s
    }

    /// Mean training time per row.
    pub fn timings_csv(&self) -> String {
        let mut s = String::from("row,standardize,mean_train_seconds\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.label, r.spec.standardize, opt(r.mean_seconds, 4));
        }
        s
    }

    /// Aligned table in the layout of the usual DR / PCD / AUC tables,
    /// including mean training time.
    pub fn to_text(&self) -> String {
        let header = ["row", "N", "M", "k", "noise", "std", "DR", "PCD", "metric", "value", "fail", "time(s)"];
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|h| h.to_string()).collect()];
        for r in &self.rows {
            let p = &r.spec;
            cells.push(vec![
                r.label.clone(),
                p.n.to_string(),
                p.m.to_string(),
                p.k.to_string(),
                p.noise.to_string(),
                if p.standardize { "on" } else { "off" }.into(),
                opt(r.dr, 1),
                opt(r.pcd, 1),
                r.metric_name().into(),
                opt(r.held_out, 3),
                format!("{}/{}", r.failures, r.runs),
                opt(r.mean_seconds, 3),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, &w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            let _ = writeln!(s, "{}", line.join("  ").trim_end());
        }
        for r in &self.rows {
            for e in &r.errors {
                let _ = writeln!(s, "# {}: {e}", r.label);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
[[row]]
name = "tiny"
task = "classification"
n = 200
m = 50
k = 2
runs = 2
seed = 3
iters = 100
mu = 10
standardize = "off"

[[row]]
task = "regression"
n = 200
m = 40
k = 3
noise = 1.0
runs = 1
seed = 4
iters = 100
step = "bound"
standardize = "both"
"#;

    #[test]
    fn config_parses_and_expands() {
        let cfg = BenchConfig::from_toml(SMALL).unwrap();
        assert_eq!(cfg.rows.len(), 2);
        let p = plan(&cfg, BenchOptions::default());
        assert_eq!(p.len(), 3);
        assert_eq!(p[1].0, "regression-200x40-k3");
        assert!(!p[1].1.standardize && p[2].1.standardize);
        assert!(BenchConfig::from_toml("[[row]]\ntask = \"classification\"\n").is_err());
        assert!(BenchConfig::from_toml("").is_err());
    }

    #[test]
    fn reports_are_deterministic() {
        let cfg = BenchConfig::from_toml(SMALL).unwrap();
        let a = BenchReport::run(&cfg, BenchOptions::default()).unwrap();
        let b = BenchReport::run(&cfg, BenchOptions::default()).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        let single = &a.rows[1];
        assert!(single.dr == Some(0.0) || single.dr == Some(100.0));
        assert!(a.to_text().contains("tiny"));
        assert!(!a.all_failed());
    }
}
