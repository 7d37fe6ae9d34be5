//! Tiled matrix-vector kernels with a fixed reduction order.
//!
//! The working matrix is split into a grid of row-blocks x column-blocks.
//! Responses `X b` are a row-wise reduction of per-tile partial products and
//! gradients `X^T r` a column-wise reduction. Tiles may be computed on any
//! number of workers; partial results are always combined in tile order, so
//! the output does not depend on the worker count.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{FsaError, Result};

/// Column-major dense matrix. This is the layout the trainer works on: a
/// column is contiguous, so dropping columns is a memmove and `X^T r` walks
/// memory linearly.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ColumnMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ColumnMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        let (rows, cols) = (m.rows(), m.cols());
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for (j, &v) in m.row(i).iter().enumerate() {
                data[j * rows + i] = v;
            }
        }
        ColumnMatrix { rows, cols, data }
    }

    /// `data` holds the columns one after another.
    pub fn from_column_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(FsaError::Contract(format!(
                "column-major matrix of {rows}x{cols} needs {} entries, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        Ok(ColumnMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    #[inline]
    pub fn column_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn push_column(&mut self, column: &[f64]) -> Result<()> {
        if column.len() != self.rows {
            return Err(FsaError::Contract(format!(
                "column of length {} for a matrix with {} rows",
                column.len(),
                self.rows
            )));
        }
        self.data.extend_from_slice(column);
        self.cols += 1;
        Ok(())
    }

    /// Keeps the listed columns (strictly increasing) and shifts them to the
    /// front, preserving order.
    pub fn retain_columns(&mut self, keep: &[usize]) {
        debug_assert!(keep.windows(2).all(|w| w[0] < w[1]));
        let n = self.rows;
        for (dst, &src) in keep.iter().enumerate() {
            if dst != src {
                self.data.copy_within(src * n..(src + 1) * n, dst * n);
            }
        }
        self.cols = keep.len();
        self.data.truncate(self.cols * n);
    }

    pub fn squared_frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Sub-block extents. Blocks of `row_block x col_block` tile the matrix; the
/// last block in each direction may be smaller.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGrid {
    pub row_block: usize,
    pub col_block: usize,
}

impl Default for BlockGrid {
    fn default() -> Self {
        BlockGrid {
            row_block: 2048,
            col_block: 256,
        }
    }
}

impl BlockGrid {
    pub fn new(row_block: usize, col_block: usize) -> Result<Self> {
        let g = BlockGrid {
            row_block,
            col_block,
        };
        g.validate()?;
        Ok(g)
    }

    /// One block covering any matrix.
    pub fn single() -> Self {
        BlockGrid {
            row_block: usize::MAX,
            col_block: usize::MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.row_block == 0 || self.col_block == 0 {
            return Err(FsaError::Validation("block sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn row_ranges(&self, rows: usize) -> Vec<Range<usize>> {
        ranges(rows, self.row_block)
    }

    pub fn col_ranges(&self, cols: usize) -> Vec<Range<usize>> {
        ranges(cols, self.col_block)
    }
}

fn ranges(len: usize, block: usize) -> Vec<Range<usize>> {
    if len == 0 {
        return std::iter::once(0..0).collect();
    }
    (0..len)
        .step_by(block)
        .map(|s| s..s.saturating_add(block).min(len))
        .collect()
}

fn response_tile(x: &ColumnMatrix, beta: &[f64], rows: Range<usize>, cols: Range<usize>) -> Vec<f64> {
    let mut out = vec![0.0; rows.len()];
    for j in cols {
        let b = beta[j];
        let col = &x.column(j)[rows.clone()];
        for (o, &v) in out.iter_mut().zip(col) {
            *o += b * v;
        }
    }
    out
}

fn gradient_tile(x: &ColumnMatrix, r: &[f64], rows: Range<usize>, cols: Range<usize>) -> Vec<f64> {
    let r = &r[rows.clone()];
    cols.map(|j| {
        let col = &x.column(j)[rows.clone()];
        let mut acc = 0.0;
        for (&v, &ri) in col.iter().zip(r) {
            acc += v * ri;
        }
        acc
    })
    .collect()
}

/// Unblocked `X b`: columns accumulated left to right.
pub fn direct_response(x: &ColumnMatrix, beta: &[f64]) -> Vec<f64> {
    assert_eq!(beta.len(), x.cols(), "coefficient length must match columns");
    response_tile(x, beta, 0..x.rows(), 0..x.cols())
}

/// Unblocked `X^T r`: one sequential dot product per column.
pub fn direct_gradient(x: &ColumnMatrix, r: &[f64]) -> Vec<f64> {
    assert_eq!(r.len(), x.rows(), "residual length must match rows");
    gradient_tile(x, r, 0..x.rows(), 0..x.cols())
}

/// Runs the tiled kernels on a private pool of `workers` threads (or inline
/// for a single worker).
pub struct Executor {
    grid: BlockGrid,
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("grid", &self.grid)
            .field("workers", &self.workers())
            .finish()
    }
}

impl Executor {
    pub fn new(grid: BlockGrid, workers: usize) -> Result<Self> {
        grid.validate()?;
        if workers == 0 {
            return Err(FsaError::Validation("workers must be at least 1".into()));
        }
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| FsaError::Validation(format!("cannot start worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Executor { grid, pool })
    }

    pub fn sequential(grid: BlockGrid) -> Self {
        Executor { grid, pool: None }
    }

    pub fn grid(&self) -> BlockGrid {
        self.grid
    }

    pub fn workers(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    fn tiles<T, F>(&self, rows: &[Range<usize>], cols: &[Range<usize>], f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(Range<usize>, Range<usize>) -> T + Sync,
    {
        let blocks: Vec<(Range<usize>, Range<usize>)> = rows
            .iter()
            .flat_map(|r| cols.iter().map(move |c| (r.clone(), c.clone())))
            .collect();
        match &self.pool {
            Some(pool) => pool.install(|| {
                blocks
                    .into_par_iter()
                    .map(|(r, c)| f(r, c))
                    .collect()
            }),
            None => blocks.into_iter().map(|(r, c)| f(r, c)).collect(),
        }
    }

    pub fn response(&self, x: &ColumnMatrix, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != x.cols() {
            return Err(FsaError::Contract(format!(
                "{} coefficients for {} columns",
                beta.len(),
                x.cols()
            )));
        }
        let rows = self.grid.row_ranges(x.rows());
        let cols = self.grid.col_ranges(x.cols());
        let partials = self.tiles(&rows, &cols, |r, c| response_tile(x, beta, r, c));
        let mut out = vec![0.0; x.rows()];
        for (rb, range) in rows.iter().enumerate() {
            let dst = &mut out[range.clone()];
            for (cb, part) in partials[rb * cols.len()..(rb + 1) * cols.len()].iter().enumerate() {
                if cb == 0 {
                    dst.copy_from_slice(part);
                } else {
                    for (o, p) in dst.iter_mut().zip(part) {
                        *o += p;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn gradient(&self, x: &ColumnMatrix, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != x.rows() {
            return Err(FsaError::Contract(format!(
                "vector of length {} for {} rows",
                r.len(),
                x.rows()
            )));
        }
        let rows = self.grid.row_ranges(x.rows());
        let cols = self.grid.col_ranges(x.cols());
        let partials = self.tiles(&rows, &cols, |rr, cc| gradient_tile(x, r, rr, cc));
        let mut out = vec![0.0; x.cols()];
        for (rb, _) in rows.iter().enumerate() {
            for (cb, range) in cols.iter().enumerate() {
                let part = &partials[rb * cols.len() + cb];
                let dst = &mut out[range.clone()];
                if rb == 0 {
                    dst.copy_from_slice(part);
                } else {
                    for (o, p) in dst.iter_mut().zip(part) {
                        *o += p;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `X b` over `grid`, reduced row-wise in block order.
pub fn blocked_response(x: &ColumnMatrix, beta: &[f64], grid: &BlockGrid) -> Result<Vec<f64>> {
    Executor::sequential(*grid).response(x, beta)
}

/// `X^T r` over `grid`, reduced column-wise in block order.
pub fn blocked_gradient(x: &ColumnMatrix, r: &[f64], grid: &BlockGrid) -> Result<Vec<f64>> {
    Executor::sequential(*grid).gradient(x, r)
}
