//! Model files.
//!
//! A model is a JSON object tagged with `schema_version`. Readers refuse any
//! other version instead of guessing at the layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Matrix, Table, Task};
use crate::error::{FsaError, Result};
use crate::losses::LossKind;
use crate::model::ActiveModel;
use crate::plinear::{pl_predict, BinSpec, PlModel, PlTerm};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Predictor {
    Linear(ActiveModel),
    PiecewiseLinear(PlModel),
}

impl Predictor {
    /// Original columns the predictor reads, ascending.
    pub fn columns(&self) -> Vec<usize> {
        match self {
            Predictor::Linear(m) => m.active_index().to_vec(),
            Predictor::PiecewiseLinear(m) => m.variables(),
        }
    }

    fn score_row(&self, row: &[f64]) -> f64 {
        match self {
            Predictor::Linear(m) => m
                .active_index()
                .iter()
                .zip(m.coeffs())
                .fold(m.intercept(), |acc, (&c, &b)| acc + b * row[c]),
            Predictor::PiecewiseLinear(m) => pl_predict(m, row),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub task: Task,
    pub loss: LossKind,
    /// Width of the training data.
    pub n_features: usize,
    pub feature_names: Vec<String>,
    pub target: Option<String>,
    pub predictor: Predictor,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    column: usize,
    name: String,
    values: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    x_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    x_max: Option<f64>,
    #[serde(rename = "B", skip_serializing_if = "Option::is_none", default)]
    bins: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Raw {
    schema_version: u32,
    task: Task,
    loss: LossKind,
    group_size: usize,
    bins: Option<usize>,
    intercept: f64,
    n_features: usize,
    feature_names: Vec<String>,
    target: Option<String>,
    entries: Vec<Entry>,
}

impl ModelFile {
    pub fn new(task: Task, loss: LossKind, feature_names: Vec<String>, target: Option<String>, predictor: Predictor) -> Result<Self> {
        let n_features = feature_names.len();
        if let Some(&c) = predictor.columns().iter().find(|&&c| c >= n_features) {
            return Err(FsaError::Contract(format!(
                "predictor uses column {c}, only {n_features} features are named"
            )));
        }
        Ok(ModelFile {
            task,
            loss,
            n_features,
            feature_names,
            target,
            predictor,
        })
    }

    fn to_raw(&self) -> Raw {
        let name = |c: usize| self.feature_names[c].clone();
        let (group_size, bins, intercept, entries) = match &self.predictor {
            Predictor::Linear(m) => (
                1,
                None,
                m.intercept(),
                m.active_index()
                    .iter()
                    .zip(m.coeffs())
                    .map(|(&c, &b)| Entry {
                        column: c,
                        name: name(c),
                        values: vec![b],
                        x_min: None,
                        x_max: None,
                        bins: None,
                    })
                    .collect(),
            ),
            Predictor::PiecewiseLinear(m) => {
                let b = m.terms().first().map(|t| t.bins.bins);
                (
                    b.map_or(1, |b| b + 1),
                    b,
                    m.intercept(),
                    m.terms()
                        .iter()
                        .map(|t| Entry {
                            column: t.variable,
                            name: name(t.variable),
                            values: t.values.clone(),
                            x_min: Some(t.bins.x_min),
                            x_max: Some(t.bins.x_max),
                            bins: Some(t.bins.bins),
                        })
                        .collect(),
                )
            }
        };
        Raw {
            schema_version: SCHEMA_VERSION,
            task: self.task,
            loss: self.loss,
            group_size,
            bins,
            intercept,
            n_features: self.n_features,
            feature_names: self.feature_names.clone(),
            target: self.target.clone(),
            entries,
        }
    }

    fn from_raw(raw: Raw) -> Result<Self> {
        if raw.feature_names.len() != raw.n_features {
            return Err(FsaError::Schema(format!(
                "{} feature names for n_features = {}",
                raw.feature_names.len(),
                raw.n_features
            )));
        }
        let predictor = match raw.bins {
            None => {
                if raw.group_size != 1 {
                    return Err(FsaError::Schema("linear models have group_size 1".into()));
                }
                let mut coeffs = Vec::with_capacity(raw.entries.len());
                let mut index = Vec::with_capacity(raw.entries.len());
                for e in &raw.entries {
                    if e.values.len() != 1 {
                        return Err(FsaError::Schema(format!(
                            "linear entry for column {} has {} values",
                            e.column,
                            e.values.len()
                        )));
                    }
                    coeffs.push(e.values[0]);
                    index.push(e.column);
                }
                Predictor::Linear(ActiveModel::new(coeffs, raw.intercept, index, 1).map_err(schema)?)
            }
            Some(b) => {
                if raw.group_size != b + 1 {
                    return Err(FsaError::Schema(format!("group_size {} for B = {b}", raw.group_size)));
                }
                let terms = raw
                    .entries
                    .into_iter()
                    .map(|e| {
                        let (Some(lo), Some(hi), Some(eb)) = (e.x_min, e.x_max, e.bins) else {
                            return Err(FsaError::Schema(format!(
                                "piecewise-linear entry for column {} lacks x_min/x_max/B",
                                e.column
                            )));
                        };
                        Ok(PlTerm {
                            variable: e.column,
                            bins: BinSpec::new(lo, hi, eb).map_err(schema)?,
                            values: e.values,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Predictor::PiecewiseLinear(PlModel::new(raw.task, raw.intercept, terms).map_err(schema)?)
            }
        };
        ModelFile::new(raw.task, raw.loss, raw.feature_names, raw.target, predictor).map_err(schema)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.to_raw())?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(FsaError::Schema(format!(
                    "model file has schema_version {v}, this reader understands only {SCHEMA_VERSION}"
                )))
            }
            None => return Err(FsaError::Schema("model file has no schema_version".into())),
        }
        let raw: Raw = serde_json::from_value(value).map_err(|e| FsaError::Schema(e.to_string()))?;
        ModelFile::from_raw(raw)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| FsaError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FsaError::io(path, e))?;
        ModelFile::from_json(&text)
    }

    /// Scores for rows laid out like the training features.
    pub fn scores(&self, x: &Matrix) -> Result<Vec<f64>> {
        if let Some(&c) = self.predictor.columns().iter().find(|&&c| c >= x.cols()) {
            return Err(FsaError::Schema(format!(
                "model column {c} ({}) is missing from data with {} columns",
                self.feature_names[c],
                x.cols()
            )));
        }
        Ok((0..x.rows()).map(|i| self.predictor.score_row(x.row(i))).collect())
    }

    /// Scores for a table, matching the model's features by column name.
    /// Extra columns (such as the target) are ignored.
    pub fn scores_table(&self, table: &Table) -> Result<Vec<f64>> {
        if table.rows.is_empty() {
            return Ok(Vec::new());
        }
        let used = self.predictor.columns();
        let mut missing = Vec::new();
        let mut position = vec![usize::MAX; self.n_features];
        for &c in &used {
            match table.column_index(&self.feature_names[c]) {
                Some(p) => position[c] = p,
                None => missing.push(self.feature_names[c].clone()),
            }
        }
        if !missing.is_empty() {
            return Err(FsaError::Schema(format!(
                "data lacks model columns: {}",
                missing.join(", ")
            )));
        }
        let mut row = vec![0.0; self.n_features];
        Ok(table
            .rows
            .iter()
            .map(|r| {
                for &c in &used {
                    row[c] = r[position[c]];
                }
                self.predictor.score_row(&row)
            })
            .collect())
    }
}

fn schema(e: FsaError) -> FsaError {
    match e {
        FsaError::Contract(m) | FsaError::Validation(m) => FsaError::Schema(m),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("x{i}")).collect()
    }

    fn linear() -> ModelFile {
        let m = ActiveModel::new(vec![0.5, -1.25], 0.1, vec![1, 3], 1).unwrap();
        ModelFile::new(Task::Classification, LossKind::Logistic, names(4), Some("y".into()), Predictor::Linear(m)).unwrap()
    }

    fn piecewise() -> ModelFile {
        let t = PlTerm { variable: 2, bins: BinSpec::new(-1.0, 1.0, 2).unwrap(), values: vec![1.0, -1.0, 1.0] };
        let m = PlModel::new(Task::Classification, 0.2, vec![t]).unwrap();
        ModelFile::new(Task::Classification, LossKind::Logistic, names(3), None, Predictor::PiecewiseLinear(m)).unwrap()
    }

    #[test]
    fn round_trips() {
        for m in [linear(), piecewise()] {
            let text = m.to_json().unwrap();
            assert!(text.contains("\"schema_version\": 1"));
            assert_eq!(ModelFile::from_json(&text).unwrap(), m);
        }
        assert!(piecewise().to_json().unwrap().contains("\"x_min\""));
    }

    #[test]
    fn other_schema_versions_are_rejected() {
        let text = linear().to_json().unwrap().replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(matches!(ModelFile::from_json(&text), Err(FsaError::Schema(_))));
        let text = linear().to_json().unwrap().replace("\"schema_version\": 1,", "");
        assert!(matches!(ModelFile::from_json(&text), Err(FsaError::Schema(_))));
    }

    #[test]
    fn table_scoring_uses_names_and_reports_missing_columns() {
        let m = linear();
        let t = Table {
            columns: vec!["y".into(), "x4".into(), "x2".into()],
            rows: vec![vec![1.0, 2.0, 4.0]],
        };
        assert_eq!(m.scores_table(&t).unwrap(), [0.1 + 0.5 * 4.0 - 1.25 * 2.0]);
        let bad = Table { columns: vec!["x2".into()], rows: vec![vec![1.0]] };
        let err = m.scores_table(&bad).unwrap_err().to_string();
        assert!(err.contains("x4"), "{err}");
        let empty = Table { columns: vec![], rows: vec![] };
        assert!(m.scores_table(&empty).unwrap().is_empty());
    }

    #[test]
    fn piecewise_scores_clamp_out_of_range_inputs() {
        let m = piecewise();
        let x = Matrix::from_rows(&[vec![0.0, 0.0, 5.0], vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(m.scores(&x).unwrap(), [1.2, 1.2, -0.8]);
    }
}
