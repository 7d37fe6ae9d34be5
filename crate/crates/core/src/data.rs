//! Datasets, targets and the CSV formats they are read from and written to.
//!
//! Observation matrices are row-major. Binary labels are always stored as
//! `-1.0 / +1.0`; files may carry them as `0/1` or `-1/1`.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FsaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
    Ranking,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
            Task::Ranking => "ranking",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = FsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            "ranking" => Ok(Task::Ranking),
            other => Err(FsaError::Validation(format!("unknown task '{other}'"))),
        }
    }
}

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(FsaError::Contract(format!(
                "matrix of {rows}x{cols} needs {} entries, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(FsaError::Contract(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Copy of the given columns, in the order given.
    pub fn select_columns(&self, columns: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * columns.len());
        for i in 0..self.rows {
            let row = self.row(i);
            data.extend(columns.iter().map(|&c| row[c]));
        }
        Matrix {
            rows: self.rows,
            cols: columns.len(),
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPair {
    pub i: usize,
    pub j: usize,
    /// Preference of row `i` over row `j`: 1 when `i` should score higher,
    /// 0.5 when they are equally good, 0 when `j` should score higher.
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankPairSet {
    pairs: Vec<RankPair>,
}

impl RankPairSet {
    pub fn new(pairs: Vec<RankPair>, n_rows: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for p in &pairs {
            if !(p.r.is_finite() && (0.0..=1.0).contains(&p.r)) {
                return Err(FsaError::Validation(format!(
                    "rank value for pair ({}, {}) is {}, expected a value in [0, 1]",
                    p.i, p.j, p.r
                )));
            }
            if p.i == p.j {
                return Err(FsaError::Validation(format!(
                    "rank pair ({}, {}) compares a row with itself",
                    p.i, p.j
                )));
            }
            if p.i >= n_rows || p.j >= n_rows {
                return Err(FsaError::Validation(format!(
                    "rank pair ({}, {}) indexes past the {n_rows} rows",
                    p.i, p.j
                )));
            }
            if !seen.insert((p.i, p.j)) {
                return Err(FsaError::Validation(format!(
                    "duplicate rank pair ({}, {})",
                    p.i, p.j
                )));
            }
        }
        Ok(RankPairSet { pairs })
    }

    pub fn pairs(&self) -> &[RankPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Real(Vec<f64>),
    /// Labels in `{-1, +1}`.
    Binary(Vec<f64>),
    Pairs(RankPairSet),
}

impl Targets {
    pub fn task(&self) -> Task {
        match self {
            Targets::Real(_) => Task::Regression,
            Targets::Binary(_) => Task::Classification,
            Targets::Pairs(_) => Task::Ranking,
        }
    }

    /// Per-row target values; `None` for pair targets.
    pub fn values(&self) -> Option<&[f64]> {
        match self {
            Targets::Real(v) | Targets::Binary(v) => Some(v),
            Targets::Pairs(_) => None,
        }
    }
}

/// Maps a `{0, 1}` or `{-1, +1}` label onto `{-1, +1}`.
pub fn to_signed_label(y: f64) -> Option<f64> {
    if y == 1.0 {
        Some(1.0)
    } else if y == 0.0 || y == -1.0 {
        Some(-1.0)
    } else {
        None
    }
}

/// Observations with their targets. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Matrix,
    targets: Targets,
    weights: Option<Vec<f64>>,
    feature_names: Vec<String>,
    target_name: Option<String>,
}

impl Dataset {
    pub fn new(x: Matrix, targets: Targets) -> Result<Self> {
        if x.rows() == 0 || x.cols() == 0 {
            return Err(FsaError::Validation(format!(
                "dataset needs at least one row and one column, got {}x{}",
                x.rows(),
                x.cols()
            )));
        }
        if !x.is_finite() {
            return Err(FsaError::Validation(
                "observation matrix contains non-finite entries".into(),
            ));
        }
        match &targets {
            Targets::Real(y) | Targets::Binary(y) => {
                if y.len() != x.rows() {
                    return Err(FsaError::Validation(format!(
                        "{} targets for {} rows",
                        y.len(),
                        x.rows()
                    )));
                }
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(FsaError::Validation("targets contain non-finite values".into()));
                }
                if let Targets::Binary(y) = &targets {
                    if let Some(bad) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
                        return Err(FsaError::Validation(format!(
                            "binary labels must be -1 or +1, found {bad}"
                        )));
                    }
                }
            }
            Targets::Pairs(p) => {
                if let Some(bad) = p.pairs().iter().find(|q| q.i >= x.rows() || q.j >= x.rows()) {
                    return Err(FsaError::Validation(format!(
                        "rank pair ({}, {}) indexes past the {} rows",
                        bad.i,
                        bad.j,
                        x.rows()
                    )));
                }
            }
        }
        let feature_names = (1..=x.cols()).map(|j| format!("x{j}")).collect();
        Ok(Dataset {
            x,
            targets,
            weights: None,
            feature_names,
            target_name: None,
        })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n_rows() {
            return Err(FsaError::Validation(format!(
                "{} weights for {} rows",
                weights.len(),
                self.n_rows()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(FsaError::Validation("weights must be finite and >= 0".into()));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_features() {
            return Err(FsaError::Validation(format!(
                "{} feature names for {} columns",
                names.len(),
                self.n_features()
            )));
        }
        self.feature_names = names;
        Ok(self)
    }

    pub fn with_target_name(mut self, name: impl Into<String>) -> Self {
        self.target_name = Some(name.into());
        self
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn task(&self) -> Task {
        self.targets.task()
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn n_rows(&self) -> usize {
        self.x.rows()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn target_name(&self) -> Option<&str> {
        self.target_name.as_deref()
    }
}

/// A parsed numeric CSV: column names and rows. May have zero rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| FsaError::Parse {
        row,
        column: column.to_string(),
        message: format!("'{cell}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(FsaError::Parse {
            row,
            column: column.to_string(),
            message: format!("non-finite value '{cell}'"),
        });
    }
    Ok(v)
}

/// Reads a comma-separated numeric table. The first row is a header when any
/// of its cells is not a number; otherwise columns are named `0, 1, ...`.
pub fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| FsaError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut records = reader.records();
    let Some(first) = records.next().transpose()? else {
        return Ok(Table {
            columns: Vec::new(),
            rows: Vec::new(),
        });
    };
    let is_header = first.iter().any(|c| c.trim().parse::<f64>().is_err());
    let columns: Vec<String> = if is_header {
        first.iter().map(str::to_string).collect()
    } else {
        (0..first.len()).map(|j| j.to_string()).collect()
    };

    let mut rows = Vec::new();
    let mut push = |record: &csv::StringRecord, line: usize| -> Result<()> {
        if record.len() != columns.len() {
            return Err(FsaError::Parse {
                row: line,
                column: "*".into(),
                message: format!("{} cells, expected {}", record.len(), columns.len()),
            });
        }
        let row = record
            .iter()
            .zip(&columns)
            .map(|(cell, name)| parse_cell(cell, line, name))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
        Ok(())
    };
    if !is_header {
        push(&first, 1)?;
    }
    for (offset, record) in records.enumerate() {
        push(&record?, offset + 2)?;
    }
    Ok(Table { columns, rows })
}

fn split_target(table: Table, target_column: &str) -> Result<(Matrix, Vec<f64>, Vec<String>)> {
    let t = table.column_index(target_column).ok_or_else(|| {
        FsaError::Validation(format!("target column '{target_column}' not found"))
    })?;
    let names: Vec<String> = table
        .columns
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != t)
        .map(|(_, c)| c.clone())
        .collect();
    let mut y = Vec::with_capacity(table.rows.len());
    let mut data = Vec::with_capacity(table.rows.len() * names.len());
    for row in &table.rows {
        y.push(row[t]);
        data.extend(row.iter().enumerate().filter(|&(j, _)| j != t).map(|(_, v)| *v));
    }
    let x = Matrix::new(table.rows.len(), names.len(), data)?;
    Ok((x, y, names))
}

/// Loads a regression or classification dataset. Classification targets must
/// be `0/1` or `-1/+1` and are stored as `-1/+1`. Ranking data pairs rows via
/// a separate file; use [`load_ranking_csv`].
pub fn load_csv(path: &Path, target_column: &str, task: Task) -> Result<Dataset> {
    let table = read_table(path)?;
    let (x, y, names) = split_target(table, target_column)?;
    let targets = match task {
        Task::Regression => Targets::Real(y),
        Task::Classification => Targets::Binary(
            y.iter()
                .enumerate()
                .map(|(i, &v)| {
                    to_signed_label(v).ok_or_else(|| {
                        FsaError::Validation(format!(
                            "classification target '{target_column}' has non-binary value {v} in data row {}",
                            i + 1
                        ))
                    })
                })
                .collect::<Result<_>>()?,
        ),
        Task::Ranking => {
            return Err(FsaError::Validation(
                "ranking data needs a pair file; use load_ranking_csv".into(),
            ))
        }
    };
    Ok(Dataset::new(x, targets)?
        .with_feature_names(names)?
        .with_target_name(target_column))
}

/// Reads a pair file with columns `i,j,r` (header optional).
pub fn read_pairs(path: &Path, n_rows: usize) -> Result<RankPairSet> {
    let table = read_table(path)?;
    let (ci, cj, cr) = match (
        table.column_index("i"),
        table.column_index("j"),
        table.column_index("r"),
    ) {
        (Some(i), Some(j), Some(r)) => (i, j, r),
        _ if table.columns.len() == 3 => (0, 1, 2),
        _ => {
            return Err(FsaError::Validation(format!(
                "pair file {} needs columns i,j,r",
                path.display()
            )))
        }
    };
    let mut pairs = Vec::with_capacity(table.rows.len());
    for (line, row) in table.rows.iter().enumerate() {
        let index = |v: f64, name: &str| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(FsaError::Parse {
                    row: line + 1,
                    column: name.into(),
                    message: format!("{v} is not a row index"),
                })
            }
        };
        pairs.push(RankPair {
            i: index(row[ci], "i")?,
            j: index(row[cj], "j")?,
            r: row[cr],
        });
    }
    RankPairSet::new(pairs, n_rows)
}

/// Loads ranking features (every column is a feature) plus the pair file.
pub fn load_ranking_csv(path: &Path, pairs_path: &Path) -> Result<Dataset> {
    let table = read_table(path)?;
    let names = table.columns.clone();
    let x = Matrix::from_rows(&table.rows)?;
    let pairs = read_pairs(pairs_path, x.rows())?;
    Dataset::new(x, Targets::Pairs(pairs))?.with_feature_names(names)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| FsaError::io(path, e))
}

/// Writes the features and, for per-row targets, a trailing target column
/// (binary labels as `0/1`). Values use the shortest round-trip decimal form.
pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| FsaError::io(path, e);
    let target = data.target_name().unwrap_or("y");
    let mut header = data.feature_names().join(",");
    if data.targets().values().is_some() {
        header.push(',');
        header.push_str(target);
    }
    writeln!(out, "{header}").map_err(io)?;
    let mut line = String::new();
    for i in 0..data.n_rows() {
        line.clear();
        for (j, v) in data.x().row(i).iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&v.to_string());
        }
        match data.targets() {
            Targets::Real(y) => {
                line.push(',');
                line.push_str(&y[i].to_string());
            }
            Targets::Binary(y) => line.push_str(if y[i] > 0.0 { ",1" } else { ",0" }),
            Targets::Pairs(_) => {}
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn write_pairs_csv(pairs: &RankPairSet, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| FsaError::io(path, e);
    writeln!(out, "i,j,r").map_err(io)?;
    for p in pairs.pairs() {
        writeln!(out, "{},{},{}", p.i, p.j, p.r).map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn binary_targets_are_mapped_to_signed_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "a,b,y\n1.0,2.0,0\n3.5,-1,1\n0,0.25,1\n");
        let d = load_csv(&p, "y", Task::Classification).unwrap();
        assert_eq!(d.n_rows(), 3);
        assert_eq!(d.n_features(), 2);
        assert_eq!(d.targets(), &Targets::Binary(vec![-1.0, 1.0, 1.0]));
        assert_eq!(d.feature_names(), ["a", "b"]);
        assert_eq!(d.x().row(1), [3.5, -1.0]);
    }

    #[test]
    fn nan_cell_is_reported_with_its_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "a,b,y\n1,2,3\n4,NaN,6\n");
        match load_csv(&p, "y", Task::Regression) {
            Err(FsaError::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "b");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_binary_classification_target_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "a,y\n1,0\n2,2\n");
        assert!(matches!(
            load_csv(&p, "y", Task::Classification),
            Err(FsaError::Validation(_))
        ));
    }

    #[test]
    fn headerless_files_use_positional_names() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "1,2,3\n4,5,6\n");
        let d = load_csv(&p, "2", Task::Regression).unwrap();
        assert_eq!(d.targets(), &Targets::Real(vec![3.0, 6.0]));
        assert_eq!(d.x().row(1), [4.0, 5.0]);
    }

    #[test]
    fn ragged_rows_and_garbage_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "a,y\n1,2\n3\n");
        assert!(matches!(read_table(&p), Err(FsaError::Parse { row: 3, .. })));
        let p = write(&dir, "e.csv", "a,y\n1,2\nfoo,3\n");
        assert!(matches!(read_table(&p), Err(FsaError::Parse { row: 3, .. })));
    }

    #[test]
    fn empty_file_is_an_empty_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "");
        let t = read_table(&p).unwrap();
        assert!(t.rows.is_empty());
    }

    #[test]
    fn rank_pair_invariants() {
        let ok = RankPairSet::new(vec![RankPair { i: 0, j: 1, r: 0.5 }], 2);
        assert!(ok.is_ok());
        for bad in [
            vec![RankPair { i: 0, j: 0, r: 0.5 }],
            vec![RankPair { i: 0, j: 2, r: 0.5 }],
            vec![RankPair { i: 0, j: 1, r: 1.5 }],
            vec![RankPair { i: 0, j: 1, r: 1.0 }, RankPair { i: 0, j: 1, r: 0.0 }],
        ] {
            assert!(RankPairSet::new(bad, 2).is_err());
        }
    }

    #[test]
    fn pair_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = RankPairSet::new(
            vec![RankPair { i: 2, j: 0, r: 1.0 }, RankPair { i: 1, j: 2, r: 0.25 }],
            3,
        )
        .unwrap();
        let p = dir.path().join("pairs.csv");
        write_pairs_csv(&pairs, &p).unwrap();
        assert_eq!(read_pairs(&p, 3).unwrap(), pairs);
    }

    #[test]
    fn dataset_rejects_bad_weights_and_shapes() {
        let x = Matrix::new(2, 1, vec![1.0, 2.0]).unwrap();
        assert!(Dataset::new(x.clone(), Targets::Real(vec![1.0])).is_err());
        let d = Dataset::new(x.clone(), Targets::Real(vec![1.0, 2.0])).unwrap();
        assert!(d.clone().with_weights(vec![1.0, -1.0]).is_err());
        assert!(d.with_weights(vec![1.0, 0.0]).is_ok());
        assert!(Dataset::new(Matrix::zeros(0, 1), Targets::Real(vec![])).is_err());
    }
}
