//! Binary latent feature matrices.
//!
//! A `BinaryFeatureMatrix` is a p×K 0/1 matrix stored column-major: row `j`
//! is an object, column `k` a feature. Columns are contiguous so that adding
//! and dropping features is cheap, which is the common operation in the
//! sampler.

use nalgebra::DMatrix;

use crate::error::{LfmError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryFeatureMatrix {
    p: usize,
    k: usize,
    data: Vec<u8>,
}

impl BinaryFeatureMatrix {
    /// The p×0 matrix, i.e. the canonical representation of Z = 0.
    pub fn empty(p: usize) -> Self {
        Self {
            p,
            k: 0,
            data: Vec::new(),
        }
    }

    pub fn from_columns(p: usize, columns: &[Vec<u8>]) -> Result<Self> {
        let mut out = Self::empty(p);
        for col in columns {
            out.push_column(col)?;
        }
        Ok(out)
    }

    /// Builds a matrix from row-major rows. All rows must have the same length.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let p = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        let mut data = vec![0u8; p * k];
        for (j, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(LfmError::DimensionMismatch {
                    what: "row length",
                    expected: k,
                    actual: row.len(),
                });
            }
            for (c, &v) in row.iter().enumerate() {
                check_binary(v)?;
                data[c * p + j] = v;
            }
        }
        Ok(Self { p, k, data })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> u8 {
        self.data[k * self.p + j]
    }

    #[inline]
    pub fn set(&mut self, j: usize, k: usize, value: bool) {
        self.data[k * self.p + j] = u8::from(value);
    }

    pub fn column(&self, k: usize) -> &[u8] {
        &self.data[k * self.p..(k + 1) * self.p]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[u8]> {
        self.data.chunks_exact(self.p.max(1)).take(self.k)
    }

    pub fn row(&self, j: usize) -> Vec<u8> {
        (0..self.k).map(|k| self.get(j, k)).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.p).map(|j| self.row(j)).collect()
    }

    /// m_k, the number of objects possessing each feature.
    pub fn column_sums(&self) -> Vec<usize> {
        self.columns()
            .map(|c| c.iter().map(|&v| v as usize).sum())
            .collect()
    }

    pub fn column_sum(&self, k: usize) -> usize {
        self.column(k).iter().map(|&v| v as usize).sum()
    }

    pub fn push_column(&mut self, column: &[u8]) -> Result<()> {
        if column.len() != self.p {
            return Err(LfmError::DimensionMismatch {
                what: "column length",
                expected: self.p,
                actual: column.len(),
            });
        }
        for &v in column {
            check_binary(v)?;
        }
        self.data.extend_from_slice(column);
        self.k += 1;
        Ok(())
    }

    /// Appends a column whose only nonzero entry is at row `j`.
    pub fn push_singleton(&mut self, j: usize) {
        let start = self.data.len();
        self.data.resize(start + self.p, 0);
        self.data[start + j] = 1;
        self.k += 1;
    }

    pub fn remove_column(&mut self, k: usize) {
        self.data.drain(k * self.p..(k + 1) * self.p);
        self.k -= 1;
    }

    /// True when no column is all-zero.
    pub fn is_canonical(&self) -> bool {
        self.columns().all(|c| c.iter().any(|&v| v != 0))
    }

    /// Drops all-zero columns, keeping the order of the rest.
    pub fn canonicalize(&mut self) {
        let mut k = 0;
        while k < self.k {
            if self.column(k).iter().all(|&v| v == 0) {
                self.remove_column(k);
            } else {
                k += 1;
            }
        }
    }

    pub fn permute_columns(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &k in order {
            data.extend_from_slice(self.column(k));
        }
        Self {
            p: self.p,
            k: order.len(),
            data,
        }
    }

    /// Columns reordered by descending m_k; ties keep their relative order.
    pub fn sorted_by_popularity(&self) -> (Self, Vec<usize>) {
        let sums = self.column_sums();
        let mut order: Vec<usize> = (0..self.k).collect();
        order.sort_by(|&a, &b| sums[b].cmp(&sums[a]));
        (self.permute_columns(&order), order)
    }

    /// ZᵀZ as a dense K×K matrix.
    pub fn gram(&self) -> DMatrix<f64> {
        let k = self.k;
        let mut g = DMatrix::zeros(k, k);
        for a in 0..k {
            let ca = self.column(a);
            for b in a..k {
                let cb = self.column(b);
                let dot: usize = ca.iter().zip(cb).map(|(&x, &y)| (x & y) as usize).sum();
                g[(a, b)] = dot as f64;
                g[(b, a)] = dot as f64;
            }
        }
        g
    }

    /// The similarity matrix ZZᵀ.
    pub fn similarity(&self) -> DMatrix<f64> {
        let p = self.p;
        let mut out = DMatrix::zeros(p, p);
        for col in self.columns() {
            let ones: Vec<usize> = (0..p).filter(|&j| col[j] != 0).collect();
            for &a in &ones {
                for &b in &ones {
                    out[(a, b)] += 1.0;
                }
            }
        }
        out
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.k, |j, k| self.get(j, k) as f64)
    }
}

fn check_binary(v: u8) -> Result<()> {
    if v > 1 {
        return Err(LfmError::invalid(format!(
            "binary matrix entry must be 0 or 1, got {v}"
        )));
    }
    Ok(())
}
