use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};

use super::cholesky::SymbolicCholesky;
use super::sparse::CscMatrix;
use crate::Result;

/// Minimum-degree ordering of a symmetric pattern, computed on the explicit
/// elimination graph. Ties go to the lowest index. Returns `perm` with
/// `perm[new] = old`.
pub fn minimum_degree(a: &CscMatrix) -> Vec<usize> {
    let n = a.n_cols();
    let mut adj: Vec<HashSet<usize>> = vec![HashSet::new(); n];
    for j in 0..n {
        for &i in a.col(j).0 {
            if i != j {
                adj[i].insert(j);
                adj[j].insert(i);
            }
        }
    }
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = (0..n).map(|v| Reverse((adj[v].len(), v))).collect();
    let mut eliminated = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse((deg, v))) = heap.pop() {
        if eliminated[v] || adj[v].len() != deg {
            continue;
        }
        eliminated[v] = true;
        order.push(v);
        let mut nb: Vec<usize> = adj[v].drain().collect();
        nb.sort_unstable();
        for &u in &nb {
            adj[u].remove(&v);
        }
        for (x, &u) in nb.iter().enumerate() {
            for &w in &nb[x + 1..] {
                if adj[u].insert(w) {
                    adj[w].insert(u);
                }
            }
        }
        for &u in &nb {
            heap.push(Reverse((adj[u].len(), u)));
        }
    }
    order
}

/// Number of nonzeros in the Cholesky factor of `P A Pᵀ`, diagonal included.
pub fn fill_in(a: &CscMatrix, perm: &[usize]) -> Result<usize> {
    Ok(SymbolicCholesky::analyze(a, perm.to_vec())?.nnz_l())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arrow(n: usize) -> CscMatrix {
        // dense first row/column plus diagonal
        let mut t = vec![];
        for i in 0..n {
            t.push((i, i, n as f64));
            if i > 0 {
                t.push((0, i, 1.0));
                t.push((i, 0, 1.0));
            }
        }
        CscMatrix::from_triplets(n, n, &t).unwrap()
    }

    #[test]
    fn arrow_hub_goes_last() {
        let a = arrow(6);
        let perm = minimum_degree(&a);
        // once only one leaf remains, hub and leaf tie and the lower index wins
        assert_eq!(perm, vec![1, 2, 3, 4, 0, 5]);
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        assert_eq!(fill_in(&a, &perm).unwrap(), 11);
        assert_eq!(fill_in(&a, &(0..6).collect::<Vec<_>>()).unwrap(), 21);
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(minimum_degree(&CscMatrix::identity(4)), vec![0, 1, 2, 3]);
    }
}
