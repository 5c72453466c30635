//! Compressed sparse row storage for the assembled FE matrices.

use std::path::Path;

use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseSpdMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSpdMatrix {
    /// Builds from unsorted `(row, col, value)` triplets; duplicates are summed
    /// in a fixed order so the result does not depend on triplet order ties.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len() / 4);
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len() / 4);
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r}, {c}) out of range for n = {n}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseSpdMatrix { n, row_ptr, col_idx, values }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        SparseSpdMatrix {
            n: d.len(),
            row_ptr: (0..=d.len()).collect(),
            col_idx: (0..d.len()).collect(),
            values: d.to_vec(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[s..e].iter().copied().zip(self.values[s..e].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.col_idx[s..e].binary_search(&j) {
            Ok(k) => self.values[s + k],
            Err(_) => 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `y = A x`.
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yi = acc;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    /// `xᵀ A x`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.matvec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn sum_entries(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    /// `max |A_ij − A_ji|`.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// `alpha·self + beta·other`, merging sparsity patterns.
    pub fn linear_combination(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        if self.n != other.n {
            return Err(Error::invalid("matrix dimensions differ"));
        }
        let mut row_ptr = vec![0usize; self.n + 1];
        let mut col_idx = Vec::with_capacity(self.nnz().max(other.nnz()));
        let mut values = Vec::with_capacity(self.nnz().max(other.nnz()));
        for i in 0..self.n {
            let mut a = self.row(i).peekable();
            let mut b = other.row(i).peekable();
            loop {
                let next = match (a.peek(), b.peek()) {
                    (Some(&(ca, va)), Some(&(cb, vb))) => {
                        if ca == cb {
                            a.next();
                            b.next();
                            (ca, alpha * va + beta * vb)
                        } else if ca < cb {
                            a.next();
                            (ca, alpha * va)
                        } else {
                            b.next();
                            (cb, beta * vb)
                        }
                    }
                    (Some(&(ca, va)), None) => {
                        a.next();
                        (ca, alpha * va)
                    }
                    (None, Some(&(cb, vb))) => {
                        b.next();
                        (cb, beta * vb)
                    }
                    (None, None) => break,
                };
                col_idx.push(next.0);
                values.push(next.1);
            }
            row_ptr[i + 1] = col_idx.len();
        }
        Ok(SparseSpdMatrix { n: self.n, row_ptr, col_idx, values })
    }

    /// Diagonal matrix of row sums (the lumped form of a mass matrix).
    pub fn lumped(&self) -> Self {
        Self::diagonal(&self.row_sums())
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }

    const MAGIC: &'static [u8; 8] = b"ECGLCSR\0";

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(Self::MAGIC, 1);
        w.u64(self.n as u64).u64(self.nnz() as u64);
        let rp: Vec<u32> = self.row_ptr.iter().map(|&v| v as u32).collect();
        let ci: Vec<u32> = self.col_idx.iter().map(|&v| v as u32).collect();
        w.u32s(&rp).u32s(&ci).f64s(&self.values);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BinReader::open(bytes, Self::MAGIC, 1)?;
        let n = r.count(bytes.len() / 4)?;
        let nnz = r.count(bytes.len() / 12)?;
        let row_ptr: Vec<usize> = r.u32s(n + 1)?.into_iter().map(|v| v as usize).collect();
        let col_idx: Vec<usize> = r.u32s(nnz)?.into_iter().map(|v| v as usize).collect();
        let values = r.f64s(nnz)?;
        r.finish()?;
        let monotone = row_ptr.windows(2).all(|w| w[0] <= w[1]);
        if row_ptr[0] != 0 || row_ptr[n] != nnz || !monotone || col_idx.iter().any(|&c| c >= n) {
            return Err(Error::corrupt("inconsistent CSR structure"));
        }
        Ok(SparseSpdMatrix { n, row_ptr, col_idx, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::binio::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_merge_and_sum() {
        let m = SparseSpdMatrix::from_triplets(
            3,
            vec![(0, 0, 1.0), (2, 1, 3.0), (0, 0, 2.0), (1, 2, 3.0), (1, 1, 4.0)],
        );
        assert_eq!(m.nnz(), 4);
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(2, 1), 3.0);
        assert_eq!(m.get(2, 2), 0.0);
        assert_eq!(m.matvec(&[1.0, 1.0, 1.0]), vec![3.0, 7.0, 3.0]);
        assert_eq!(m.max_asymmetry(), 0.0);
    }

    #[test]
    fn linear_combination_merges_patterns() {
        let a = SparseSpdMatrix::from_triplets(2, vec![(0, 1, 1.0), (1, 0, 1.0)]);
        let b = SparseSpdMatrix::identity(2);
        let c = a.linear_combination(2.0, &b, 3.0).unwrap();
        assert_eq!(c.to_dense(), vec![vec![3.0, 2.0], vec![2.0, 3.0]]);
    }

    #[test]
    fn binary_round_trip() {
        let a = SparseSpdMatrix::from_triplets(3, vec![(0, 1, 1.5), (1, 0, 1.5), (2, 2, -4.0)]);
        assert_eq!(a, SparseSpdMatrix::from_bytes(&a.to_bytes()).unwrap());
    }
}
