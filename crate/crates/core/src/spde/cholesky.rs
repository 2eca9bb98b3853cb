use std::sync::Arc;

use super::ordering::minimum_degree;
use super::sparse::CscMatrix;
use crate::{Error, Result};

const NONE: usize = usize::MAX;

/// Pattern-only analysis of `P A Pᵀ = L Lᵀ` for a symmetric matrix stored
/// with both triangles. Reusable for any values on the same pattern.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    nnz_a: usize,
    perm: Vec<usize>,
    // upper triangle of the permuted matrix, by column, pointing into A's values
    cu_ptr: Vec<usize>,
    cu_row: Vec<usize>,
    cu_src: Vec<usize>,
    // row patterns of L (strictly lower part), each in topological order
    row_ptr: Vec<usize>,
    row_col: Vec<usize>,
    // column pattern of L, diagonal first
    l_ptr: Vec<usize>,
    l_row: Vec<usize>,
}

impl SymbolicCholesky {
    /// `perm[new] = old`.
    pub fn analyze(a: &CscMatrix, perm: Vec<usize>) -> Result<Self> {
        let n = a.n_cols();
        if a.n_rows() != n || perm.len() != n {
            return Err(Error::Shape(format!(
                "cannot factor a {}x{} matrix with a permutation of length {}",
                a.n_rows(),
                n,
                perm.len()
            )));
        }
        let mut pinv = vec![NONE; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || pinv[old] != NONE {
                return Err(Error::InvalidParameter("ordering is not a permutation".into()));
            }
            pinv[old] = new;
        }

        let mut counts = vec![0usize; n + 1];
        for j in 0..n {
            let jn = pinv[j];
            for &i in a.col(j).0 {
                let inew = pinv[i];
                if inew <= jn {
                    counts[jn + 1] += 1;
                }
            }
        }
        for j in 0..n {
            counts[j + 1] += counts[j];
        }
        let cu_ptr = counts.clone();
        let mut next = counts;
        let mut cu_row = vec![0; cu_ptr[n]];
        let mut cu_src = vec![0; cu_ptr[n]];
        for j in 0..n {
            let jn = pinv[j];
            let start = a.col_ptr()[j];
            for (off, &i) in a.col(j).0.iter().enumerate() {
                let inew = pinv[i];
                if inew <= jn {
                    cu_row[next[jn]] = inew;
                    cu_src[next[jn]] = start + off;
                    next[jn] += 1;
                }
            }
        }

        // elimination tree with path compression
        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for &r in &cu_row[cu_ptr[k]..cu_ptr[k + 1]] {
                let mut i = r;
                while i != NONE && i < k {
                    let up = ancestor[i];
                    ancestor[i] = k;
                    if up == NONE {
                        parent[i] = k;
                    }
                    i = up;
                }
            }
        }

        // row patterns by reach in the elimination tree
        let mut mark = vec![NONE; n];
        let mut stack = vec![0usize; n];
        let mut row_ptr = vec![0usize; n + 1];
        let mut row_col = Vec::new();
        let mut col_count = vec![1usize; n];
        for k in 0..n {
            mark[k] = k;
            let mut top = n;
            for &r in &cu_row[cu_ptr[k]..cu_ptr[k + 1]] {
                let mut i = r;
                let mut len = 0;
                while mark[i] != k {
                    stack[len] = i;
                    len += 1;
                    mark[i] = k;
                    i = parent[i];
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    stack[top] = stack[len];
                }
            }
            for &c in &stack[top..n] {
                col_count[c] += 1;
            }
            row_col.extend_from_slice(&stack[top..n]);
            row_ptr[k + 1] = row_col.len();
        }

        let mut l_ptr = vec![0usize; n + 1];
        for j in 0..n {
            l_ptr[j + 1] = l_ptr[j] + col_count[j];
        }
        let mut l_row = vec![0usize; l_ptr[n]];
        let mut fill: Vec<usize> = l_ptr[..n].to_vec();
        for k in 0..n {
            l_row[fill[k]] = k;
            fill[k] += 1;
        }
        for k in 0..n {
            for &c in &row_col[row_ptr[k]..row_ptr[k + 1]] {
                l_row[fill[c]] = k;
                fill[c] += 1;
            }
        }

        Ok(Self {
            n,
            nnz_a: a.nnz(),
            perm,
            cu_ptr,
            cu_row,
            cu_src,
            row_ptr,
            row_col,
            l_ptr,
            l_row,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Nonzeros of L including the diagonal.
    pub fn nnz_l(&self) -> usize {
        self.l_row.len()
    }

    /// Numeric factorization for `values` laid out on the analyzed pattern.
    pub fn factor(self: &Arc<Self>, values: &[f64]) -> Result<CholeskyFactor> {
        if values.len() != self.nnz_a {
            return Err(Error::Shape(format!("expected {} values, got {}", self.nnz_a, values.len())));
        }
        let n = self.n;
        let mut lx = vec![0.0; self.l_row.len()];
        let mut next: Vec<usize> = vec![0; n];
        let mut x = vec![0.0; n];
        for k in 0..n {
            for p in self.cu_ptr[k]..self.cu_ptr[k + 1] {
                x[self.cu_row[p]] += values[self.cu_src[p]];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &self.row_col[self.row_ptr[k]..self.row_ptr[k + 1]] {
                let lki = x[i] / lx[self.l_ptr[i]];
                x[i] = 0.0;
                let span = self.l_ptr[i] + 1..next[i];
                for (&r, &v) in self.l_row[span.clone()].iter().zip(&lx[span]) {
                    x[r] -= v * lki;
                }
                d -= lki * lki;
                lx[next[i]] = lki;
                next[i] += 1;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: self.perm[k] });
            }
            lx[self.l_ptr[k]] = d.sqrt();
            next[k] = self.l_ptr[k] + 1;
        }
        Ok(CholeskyFactor {
            symbolic: Arc::clone(self),
            lx,
        })
    }
}

/// `P A Pᵀ = L Lᵀ` with `L` stored by columns, diagonal first.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    symbolic: Arc<SymbolicCholesky>,
    lx: Vec<f64>,
}

/// Factors with a minimum-degree ordering.
pub fn factorize(a: &CscMatrix) -> Result<CholeskyFactor> {
    factorize_with_order(a, minimum_degree(a))
}

pub fn factorize_with_order(a: &CscMatrix, perm: Vec<usize>) -> Result<CholeskyFactor> {
    Arc::new(SymbolicCholesky::analyze(a, perm)?).factor(a.values())
}

impl CholeskyFactor {
    pub fn n(&self) -> usize {
        self.symbolic.n
    }

    pub fn perm(&self) -> &[usize] {
        &self.symbolic.perm
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    /// L as a sparse matrix (of the permuted system).
    pub fn l_matrix(&self) -> CscMatrix {
        let s = &self.symbolic;
        let mut t = Vec::with_capacity(self.lx.len());
        for j in 0..s.n {
            for p in s.l_ptr[j]..s.l_ptr[j + 1] {
                t.push((s.l_row[p], j, self.lx[p]));
            }
        }
        CscMatrix::from_triplets(s.n, s.n, &t).expect("in range")
    }

    pub fn diag(&self) -> impl Iterator<Item = f64> + '_ {
        self.symbolic.l_ptr[..self.symbolic.n].iter().map(|&p| self.lx[p])
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.diag().map(f64::ln).sum::<f64>()
    }

    fn lsolve(&self, x: &mut [f64]) {
        let s = &self.symbolic;
        for j in 0..s.n {
            let p0 = s.l_ptr[j];
            x[j] /= self.lx[p0];
            let xj = x[j];
            for p in p0 + 1..s.l_ptr[j + 1] {
                x[s.l_row[p]] -= self.lx[p] * xj;
            }
        }
    }

    fn ltsolve(&self, x: &mut [f64]) {
        let s = &self.symbolic;
        for j in (0..s.n).rev() {
            let p0 = s.l_ptr[j];
            let mut acc = x[j];
            for p in p0 + 1..s.l_ptr[j + 1] {
                acc -= self.lx[p] * x[s.l_row[p]];
            }
            x[j] = acc / self.lx[p0];
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n() {
            return Err(Error::Shape(format!("vector has length {len}, factor has order {}", self.n())));
        }
        Ok(())
    }

    /// `A^{-1} b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check_len(b.len())?;
        let perm = &self.symbolic.perm;
        let mut y: Vec<f64> = perm.iter().map(|&old| b[old]).collect();
        self.lsolve(&mut y);
        self.ltsolve(&mut y);
        let mut x = vec![0.0; b.len()];
        for (new, &old) in perm.iter().enumerate() {
            x[old] = y[new];
        }
        Ok(x)
    }

    /// Draw with covariance `A^{-1}` from iid standard normal `noise`:
    /// solves `Lᵀ e' = ε` and undoes the permutation.
    pub fn sample(&self, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_len(noise.len())?;
        let mut y = noise.to_vec();
        self.ltsolve(&mut y);
        let mut e = vec![0.0; y.len()];
        for (new, &old) in self.symbolic.perm.iter().enumerate() {
            e[old] = y[new];
        }
        Ok(e)
    }
}
