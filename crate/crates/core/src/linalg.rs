//! Sparse symmetric storage plus the two solver backends: a banded
//! Cholesky factorization and Jacobi-preconditioned conjugate gradients.

use crate::error::{Error, Result};

/// Square matrix in compressed sparse row layout. Both triangles are stored.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds an all-zero matrix with the given per-row sorted column lists.
    pub fn from_pattern(rows: &[Vec<usize>]) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        for r in rows {
            debug_assert!(r.windows(2).all(|w| w[0] < w[1]));
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        Self {
            n,
            row_ptr,
            col_idx,
            values: vec![0.0; nnz],
        }
    }

    /// Position of `(i, j)` in `values`, if it is in the pattern.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        row.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |k| self.values[k])
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            y[i] = s;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Largest `|i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        let mut bw = 0;
        for i in 0..self.n {
            for &j in &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]] {
                bw = bw.max(i.abs_diff(j));
            }
        }
        bw
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).all(|k| {
                let j = self.col_idx[k];
                (self.values[k] - self.get(j, i)).abs() <= tol * self.values[k].abs().max(1.0)
            })
        })
    }
}

/// Default relative pivot threshold of [`BandCholesky::factor`].
pub const PIVOT_RTOL: f64 = 1e-12;

/// Lower-triangular banded Cholesky factor `L` with `A = L L^T`.
///
/// Row `i` stores columns `i - bw ..= i` contiguously; entries left of
/// column 0 are zero padding.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        Self::factor_with_tolerance(a, PIVOT_RTOL)
    }

    /// Fails when a pivot drops to `rtol` times its original diagonal entry.
    pub fn factor_with_tolerance(a: &CsrMatrix, rtol: f64) -> Result<Self> {
        let n = a.n;
        let bw = a.bandwidth();
        let w = bw + 1;
        let mut data = vec![0.0; n * w];
        for i in 0..n {
            for k in a.row_ptr[i]..a.row_ptr[i + 1] {
                let j = a.col_idx[k];
                if j <= i {
                    data[i * w + (j + bw - i)] = a.values[k];
                }
            }
        }
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                // k ranges over max(i, j) - bw ..= j - 1, clipped at 0
                let k0 = j.saturating_sub(bw).max(j0);
                let len = j - k0;
                let ri = i * w + (k0 + bw - i);
                let rj = j * w + (k0 + bw - j);
                let dot = dot(&data[ri..ri + len], &data[rj..rj + len]);
                let orig = data[i * w + (j + bw - i)];
                let aij = orig - dot;
                if j == i {
                    // pivots lost to cancellation signal a singular matrix
                    if !(aij > rtol * orig) || !aij.is_finite() {
                        return Err(Error::NotPositiveDefinite { row: i, pivot: aij });
                    }
                    data[i * w + bw] = aij.sqrt();
                } else {
                    data[i * w + (j + bw - i)] = aij / data[j * w + bw];
                }
            }
        }
        Ok(Self { n, bw, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        assert_eq!(x.len(), n);
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            let row = &self.data[i * w + (j0 + bw - i)..i * w + bw];
            let s = dot(row, &x[j0..i]);
            x[i] = (x[i] - s) / self.data[i * w + bw];
        }
        for i in (0..n).rev() {
            x[i] /= self.data[i * w + bw];
            let xi = x[i];
            let j0 = i.saturating_sub(bw);
            let row = &self.data[i * w + (j0 + bw - i)..i * w + bw];
            for (xj, l) in x[j0..i].iter_mut().zip(row) {
                *xj -= l * xi;
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the loop vectorizes
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Jacobi-preconditioned conjugate gradients. Returns the iteration count.
pub fn pcg(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<usize> {
    let n = a.n;
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = vec![0.0; n];
    a.mul_vec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        if norm2(&r) <= rel_tol * bnorm {
            return Ok(it);
        }
        a.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NotPositiveDefinite {
                row: it,
                pivot: pap,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let res = norm2(&r) / bnorm;
    if res <= rel_tol {
        Ok(max_iter)
    } else {
        Err(Error::SolveNotConverged {
            residual: res,
            iterations: max_iter,
        })
    }
}
