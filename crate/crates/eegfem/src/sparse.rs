//! Triplet-based sparse matrices with deterministic assembly.
//!
//! Entries are accumulated in element order and finalized by a stable sort
//! plus in-order summation, so identical inputs produce bit-identical
//! matrices. The symmetric type stores the upper triangle only
//! (`row <= col`).

use crate::error::{Error, Result};

/// One matrix entry prior to canonicalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub row: usize,
    pub col: usize,
    pub val: f64,
}

fn canonicalize(nrows: usize, ncols: usize, mut t: Vec<Triplet>) -> Result<Vec<Triplet>> {
    for e in &t {
        if e.row >= nrows || e.col >= ncols {
            return Err(Error::Validation(format!(
                "sparse entry ({}, {}) out of range for {}x{}",
                e.row, e.col, nrows, ncols
            )));
        }
        if !e.val.is_finite() {
            return Err(Error::Validation(format!(
                "non-finite sparse entry at ({}, {})",
                e.row, e.col
            )));
        }
    }
    // Stable sort keeps insertion order within a (row, col) group, fixing
    // the floating-point summation order.
    t.sort_by_key(|e| (e.row, e.col));
    let mut out: Vec<Triplet> = Vec::with_capacity(t.len());
    for e in t {
        match out.last_mut() {
            Some(last) if last.row == e.row && last.col == e.col => last.val += e.val,
            _ => out.push(e),
        }
    }
    Ok(out)
}

/// Symmetric sparse matrix; canonical upper-triangle storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymMatrix {
    n: usize,
    entries: Vec<Triplet>,
}

impl SparseSymMatrix {
    /// Build from raw triplets; entries below the diagonal are mirrored to
    /// the upper triangle, duplicates are summed deterministically.
    pub fn from_triplets(n: usize, triplets: Vec<Triplet>) -> Result<Self> {
        let upper = triplets
            .into_iter()
            .map(|e| {
                if e.row <= e.col {
                    e
                } else {
                    Triplet {
                        row: e.col,
                        col: e.row,
                        val: e.val,
                    }
                }
            })
            .collect();
        Ok(Self {
            n,
            entries: canonicalize(n, n, upper)?,
        })
    }

    pub fn zero(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz_upper(&self) -> usize {
        self.entries.len()
    }

    /// Canonical upper-triangle entries, sorted by (row, col).
    pub fn entries(&self) -> &[Triplet] {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.row == e.col)
            .map(|e| e.val)
            .sum()
    }

    pub fn diag(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for e in &self.entries {
            if e.row == e.col {
                d[e.row] = e.val;
            }
        }
        d
    }

    /// y = A x.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for e in &self.entries {
            y[e.row] += e.val * x[e.col];
            if e.row != e.col {
                y[e.col] += e.val * x[e.row];
            }
        }
        y
    }

    /// y = |A| |x|, the entrywise-absolute operator applied to |x|.
    /// Used as the Oettli-Prager denominator when judging how well an
    /// equation involving A x is satisfied in floating point.
    pub fn mul_abs_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for e in &self.entries {
            let a = e.val.abs();
            y[e.row] += a * x[e.col].abs();
            if e.row != e.col {
                y[e.col] += a * x[e.row].abs();
            }
        }
        y
    }

    /// x^T A x.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n);
        let mut s = 0.0;
        for e in &self.entries {
            if e.row == e.col {
                s += e.val * x[e.row] * x[e.col];
            } else {
                s += 2.0 * e.val * x[e.row] * x[e.col];
            }
        }
        s
    }

    /// alpha * a + beta * b, entrywise over the union pattern.
    pub fn lin_comb(alpha: f64, a: &Self, beta: f64, b: &Self) -> Result<Self> {
        assert_eq!(a.n, b.n);
        let mut t: Vec<Triplet> = Vec::with_capacity(a.entries.len() + b.entries.len());
        t.extend(a.entries.iter().map(|e| Triplet {
            row: e.row,
            col: e.col,
            val: alpha * e.val,
        }));
        t.extend(b.entries.iter().map(|e| Triplet {
            row: e.row,
            col: e.col,
            val: beta * e.val,
        }));
        Self::from_triplets(a.n, t)
    }

    /// Full (mirrored) triplet list, e.g. for unsymmetric backends.
    pub fn full_triplets(&self) -> Vec<Triplet> {
        let mut t = Vec::with_capacity(self.entries.len() * 2);
        for e in &self.entries {
            t.push(*e);
            if e.row != e.col {
                t.push(Triplet {
                    row: e.col,
                    col: e.row,
                    val: e.val,
                });
            }
        }
        t
    }

    /// Dense copy (row-major Vec of rows); intended for small oracle systems.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n]; self.n];
        for e in &self.entries {
            m[e.row][e.col] = e.val;
            m[e.col][e.row] = e.val;
        }
        m
    }
}

/// Rectangular sparse matrix in canonical triplet form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRectMatrix {
    nrows: usize,
    ncols: usize,
    entries: Vec<Triplet>,
}

impl SparseRectMatrix {
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: Vec<Triplet>) -> Result<Self> {
        Ok(Self {
            nrows,
            ncols,
            entries: canonicalize(nrows, ncols, triplets)?,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Canonical entries, sorted by (row, col).
    pub fn entries(&self) -> &[Triplet] {
        &self.entries
    }

    /// y = B x.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for e in &self.entries {
            y[e.row] += e.val * x[e.col];
        }
        y
    }

    /// y = B^T x.
    pub fn mul_transpose_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for e in &self.entries {
            y[e.col] += e.val * x[e.row];
        }
        y
    }

    /// y = |B| |x|.
    pub fn mul_abs_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for e in &self.entries {
            y[e.row] += e.val.abs() * x[e.col].abs();
        }
        y
    }

    /// y = |B|^T |x|.
    pub fn mul_abs_transpose_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for e in &self.entries {
            y[e.col] += e.val.abs() * x[e.row].abs();
        }
        y
    }

    /// Row sums (B applied to the all-ones vector).
    pub fn row_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.nrows];
        for e in &self.entries {
            s[e.row] += e.val;
        }
        s
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.ncols]; self.nrows];
        for e in &self.entries {
            m[e.row][e.col] = e.val;
        }
        m
    }
}

/// Euclidean norm.
pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// a + s * b, elementwise.
pub fn axpy(a: &[f64], s: f64, b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}
