//! Envelope (skyline) Cholesky factorization for symmetric positive-definite
//! matrices with a fixed sparsity pattern.
//!
//! The symbolic step (ordering plus row envelopes) runs once; afterwards
//! [`EnvelopeCholesky::factor`] refills numeric values into the same storage.
//! Fill-in of a Cholesky factor never leaves the envelope of the permuted
//! matrix, so a bandwidth-reducing ordering keeps the factor compact.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    n: usize,
    /// permuted position → original index
    perm: Vec<usize>,
    /// original index → permuted position
    inv_perm: Vec<usize>,
    /// first stored column of each permuted row
    first: Vec<usize>,
    /// start of each row's storage in `values`
    offset: Vec<usize>,
    values: Vec<f64>,
    factored: bool,
}

impl EnvelopeCholesky {
    /// Symbolic analysis for the lower-triangular pattern `pattern`
    /// (pairs of original indices, either order) under ordering `perm`.
    pub fn new(n: usize, perm: Vec<usize>, pattern: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if perm.len() != n {
            return Err(Error::Domain(format!("ordering has {} entries for a {n}×{n} matrix", perm.len())));
        }
        let mut inv_perm = vec![usize::MAX; n];
        for (p, &i) in perm.iter().enumerate() {
            if i >= n || inv_perm[i] != usize::MAX {
                return Err(Error::Domain("ordering is not a permutation".into()));
            }
            inv_perm[i] = p;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for (a, b) in pattern {
            let (pa, pb) = (inv_perm[a], inv_perm[b]);
            let (row, col) = if pa >= pb { (pa, pb) } else { (pb, pa) };
            first[row] = first[row].min(col);
        }
        let mut offset = Vec::with_capacity(n + 1);
        let mut total = 0;
        for (i, &f) in first.iter().enumerate() {
            offset.push(total);
            total += i - f + 1;
        }
        offset.push(total);
        Ok(Self { n, perm, inv_perm, first, offset, values: vec![0.0; total], factored: false })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries of the factor.
    pub fn envelope_size(&self) -> usize {
        self.values.len()
    }

    #[inline]
    fn idx(&self, row: usize, col: usize) -> usize {
        debug_assert!(col >= self.first[row] && col <= row);
        self.offset[row] + col - self.first[row]
    }

    /// Numeric factorization from `(i, j, value)` entries in original
    /// indexing. Entries may be given for either triangle; duplicates are
    /// summed, and an entry and its transpose should not both be supplied.
    pub fn factor(&mut self, entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<()> {
        self.values.iter_mut().for_each(|v| *v = 0.0);
        self.factored = false;
        for (a, b, v) in entries {
            let (pa, pb) = (self.inv_perm[a], self.inv_perm[b]);
            let (row, col) = if pa >= pb { (pa, pb) } else { (pb, pa) };
            if col < self.first[row] {
                return Err(Error::Numerical(format!("entry ({a}, {b}) lies outside the analysed pattern")));
            }
            let k = self.idx(row, col);
            self.values[k] += v;
        }
        for i in 0..self.n {
            let fi = self.first[i];
            for j in fi..=i {
                let fj = self.first[j];
                let start = fi.max(fj);
                let (ri, rj) = (self.offset[i] - fi, self.offset[j] - fj);
                let mut s = self.values[ri + j];
                for k in start..j {
                    s -= self.values[ri + k] * self.values[rj + k];
                }
                if j < i {
                    s /= self.values[rj + j];
                    self.values[ri + j] = s;
                } else {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Numerical(format!(
                            "matrix is not positive definite (pivot {s:e} at permuted row {i})"
                        )));
                    }
                    self.values[ri + i] = s.sqrt();
                }
            }
        }
        self.factored = true;
        Ok(())
    }

    fn ensure_factored(&self) -> Result<()> {
        if self.factored {
            Ok(())
        } else {
            Err(Error::Numerical("factor() has not succeeded".into()))
        }
    }

    /// Solve `L y = b` in permuted coordinates, in place.
    fn forward(&self, y: &mut [f64]) {
        for i in 0..self.n {
            let fi = self.first[i];
            let r = self.offset[i] - fi;
            let mut s = y[i];
            for k in fi..i {
                s -= self.values[r + k] * y[k];
            }
            y[i] = s / self.values[r + i];
        }
    }

    /// Solve `Lᵀ x = y` in permuted coordinates, in place.
    fn backward(&self, x: &mut [f64]) {
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let r = self.offset[i] - fi;
            x[i] /= self.values[r + i];
            let xi = x[i];
            for k in fi..i {
                x[k] -= self.values[r + k] * xi;
            }
        }
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.ensure_factored()?;
        let mut y: Vec<f64> = self.perm.iter().map(|&i| b[i]).collect();
        self.forward(&mut y);
        self.backward(&mut y);
        Ok(self.unpermute(&y))
    }

    /// `x` with `Cov(x) = A⁻¹` when `z` is standard normal: solves
    /// `Lᵀ x = z` in permuted order, where `z[k]` is consumed as the k-th
    /// permuted coordinate.
    pub fn sample_from_standard(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.ensure_factored()?;
        let mut x = z.to_vec();
        self.backward(&mut x);
        Ok(self.unpermute(&x))
    }

    /// `log det A`.
    pub fn log_det(&self) -> Result<f64> {
        self.ensure_factored()?;
        Ok(2.0 * (0..self.n).map(|i| self.values[self.idx(i, i)].ln()).sum::<f64>())
    }

    fn unpermute(&self, y: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| y[self.inv_perm[i]]).collect()
    }
}
