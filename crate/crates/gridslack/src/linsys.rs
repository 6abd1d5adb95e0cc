//! Sparse direct linear solver shared by the power-flow Newton loop and the
//! interior-point KKT steps.
//!
//! Left-looking LU with partial pivoting (Gilbert-Peierls sparse triangular
//! solves) over a fill-reducing column order. The ordering is a plain
//! minimum-degree elimination on the symmetrized pattern and is computed once
//! per sparsity pattern; repeated solves with the same pattern reuse it.
//! One round of iterative refinement tightens the residual after each solve.

use std::collections::BTreeSet;

use thiserror::Error;

/// Triplet-assembled square system `A x = b`. Duplicate entries accumulate.
#[derive(Clone, Debug)]
pub struct SparseSystem {
    pub dim: usize,
    triplets: Vec<(u32, u32, f64)>,
    pub rhs: Vec<f64>,
}

impl SparseSystem {
    pub fn new(dim: usize) -> SparseSystem {
        SparseSystem {
            dim,
            triplets: Vec::new(),
            rhs: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.dim && col < self.dim);
        if value != 0.0 {
            self.triplets.push((row as u32, col as u32, value));
        }
    }

    pub fn set_rhs(&mut self, rhs: Vec<f64>) {
        assert_eq!(rhs.len(), self.dim);
        self.rhs = rhs;
    }

    pub fn nnz(&self) -> usize {
        self.triplets.len()
    }

    /// Dense copy, for small-system tests and finite-difference checks.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.dim]; self.dim];
        for &(r, c, v) in &self.triplets {
            m[r as usize][c as usize] += v;
        }
        m
    }

    fn to_csc(&self) -> Csc {
        let n = self.dim;
        let mut count = vec![0usize; n + 1];
        for &(_, c, _) in &self.triplets {
            count[c as usize + 1] += 1;
        }
        for j in 0..n {
            count[j + 1] += count[j];
        }
        let col_ptr = count;
        let mut row_idx = vec![0u32; self.triplets.len()];
        let mut values = vec![0.0f64; self.triplets.len()];
        let mut next = col_ptr.clone();
        for &(r, c, v) in &self.triplets {
            let p = next[c as usize];
            row_idx[p] = r;
            values[p] = v;
            next[c as usize] += 1;
        }
        // Sort each column by row and fold duplicates.
        let mut out_ptr = vec![0usize; n + 1];
        let mut out_rows: Vec<u32> = Vec::with_capacity(row_idx.len());
        let mut out_vals: Vec<f64> = Vec::with_capacity(values.len());
        let mut scratch: Vec<(u32, f64)> = Vec::new();
        for j in 0..n {
            scratch.clear();
            for p in col_ptr[j]..col_ptr[j + 1] {
                scratch.push((row_idx[p], values[p]));
            }
            scratch.sort_unstable_by_key(|&(r, _)| r);
            let mut i = 0;
            while i < scratch.len() {
                let r = scratch[i].0;
                let mut v = 0.0;
                while i < scratch.len() && scratch[i].0 == r {
                    v += scratch[i].1;
                    i += 1;
                }
                out_rows.push(r);
                out_vals.push(v);
            }
            out_ptr[j + 1] = out_rows.len();
        }
        Csc {
            n,
            col_ptr: out_ptr,
            row_idx: out_rows,
            values: out_vals,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Csc {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    values: Vec<f64>,
}

impl Csc {
    fn matvec(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..self.n {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                out[self.row_idx[p] as usize] += self.values[p] * xj;
            }
        }
    }

    fn same_pattern(&self, other: &Csc) -> bool {
        self.n == other.n && self.col_ptr == other.col_ptr && self.row_idx == other.row_idx
    }
}

/// Factorization failure: no usable pivot while eliminating `column`
/// (original column index). Typically a floating subnetwork or rank loss.
#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("singular system: no pivot available at column {column}")]
pub struct SingularityReport {
    pub column: usize,
}

/// Minimum-degree elimination order on the pattern of A + A^T.
/// Ties break toward the smallest node index so the order is reproducible.
fn min_degree_order(a: &Csc) -> Vec<usize> {
    let n = a.n;
    let mut adj: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    for j in 0..n {
        for p in a.col_ptr[j]..a.col_ptr[j + 1] {
            let i = a.row_idx[p] as usize;
            if i != j {
                adj[i].insert(j as u32);
                adj[j].insert(i as u32);
            }
        }
    }
    let mut eliminated = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best = usize::MAX;
        let mut best_deg = usize::MAX;
        for v in 0..n {
            if !eliminated[v] && adj[v].len() < best_deg {
                best_deg = adj[v].len();
                best = v;
            }
        }
        let v = best;
        eliminated[v] = true;
        order.push(v);
        let neighbors: Vec<u32> = adj[v].iter().copied().collect();
        for &u in &neighbors {
            adj[u as usize].remove(&(v as u32));
        }
        for (i, &u) in neighbors.iter().enumerate() {
            for &w in &neighbors[i + 1..] {
                adj[u as usize].insert(w);
                adj[w as usize].insert(u);
            }
        }
        adj[v].clear();
    }
    order
}

struct LuFactors {
    n: usize,
    // L: unit lower triangular, diagonal implicit, rows in pivoted order.
    l_ptr: Vec<usize>,
    l_rows: Vec<u32>,
    l_vals: Vec<f64>,
    // U: upper triangular by column, diagonal kept separately.
    u_ptr: Vec<usize>,
    u_rows: Vec<u32>,
    u_vals: Vec<f64>,
    u_diag: Vec<f64>,
    /// pinv[original_row] = pivot position.
    pinv: Vec<usize>,
    /// q[k] = original column eliminated at position k.
    q: Vec<usize>,
}

impl LuFactors {
    /// x = U^{-1} L^{-1} P b, then un-permute columns.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[self.pinv[i]] = b[i];
        }
        for k in 0..n {
            let xk = x[k];
            if xk != 0.0 {
                for p in self.l_ptr[k]..self.l_ptr[k + 1] {
                    x[self.l_rows[p] as usize] -= self.l_vals[p] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            x[k] /= self.u_diag[k];
            let xk = x[k];
            if xk != 0.0 {
                for p in self.u_ptr[k]..self.u_ptr[k + 1] {
                    x[self.u_rows[p] as usize] -= self.u_vals[p] * xk;
                }
            }
        }
        let mut out = vec![0.0; n];
        for k in 0..n {
            out[self.q[k]] = x[k];
        }
        out
    }
}

const PIVOT_ABS_MIN: f64 = 1e-300;

fn factor(a: &Csc, q: &[usize]) -> Result<LuFactors, SingularityReport> {
    let n = a.n;
    let mut pinv = vec![usize::MAX; n];
    let mut l_ptr = vec![0usize];
    let mut l_rows: Vec<u32> = Vec::new();
    let mut l_vals: Vec<f64> = Vec::new();
    let mut u_ptr = vec![0usize];
    let mut u_rows: Vec<u32> = Vec::new();
    let mut u_vals: Vec<f64> = Vec::new();
    let mut u_diag = vec![0.0f64; n];

    // Workspaces for the sparse triangular solve.
    let mut x = vec![0.0f64; n];
    let mut mark = vec![false; n];
    let mut reach: Vec<u32> = Vec::with_capacity(n);
    let mut dfs_stack: Vec<(u32, usize)> = Vec::new();

    for k in 0..n {
        let col = q[k];

        // Reachability of A(:,col) through the solved part of L
        // (topological order comes out reversed on `reach`).
        reach.clear();
        for p in a.col_ptr[col]..a.col_ptr[col + 1] {
            let r = a.row_idx[p];
            if mark[r as usize] {
                continue;
            }
            dfs_stack.push((r, 0));
            mark[r as usize] = true;
            while !dfs_stack.is_empty() {
                let top = dfs_stack.len() - 1;
                let (node, child) = dfs_stack[top];
                let kcol = pinv[node as usize];
                let mut pushed = false;
                if kcol != usize::MAX {
                    let start = l_ptr[kcol];
                    let end = l_ptr[kcol + 1];
                    let mut c = child;
                    while start + c < end {
                        let next = l_rows[start + c];
                        c += 1;
                        if !mark[next as usize] {
                            mark[next as usize] = true;
                            dfs_stack[top].1 = c;
                            dfs_stack.push((next, 0));
                            pushed = true;
                            break;
                        }
                    }
                    if !pushed {
                        dfs_stack[top].1 = c;
                    }
                }
                if !pushed {
                    reach.push(node);
                    dfs_stack.pop();
                }
            }
        }

        // Numeric sparse solve x = L^{-1} A(:,col), visiting in topological
        // order (reverse of `reach`).
        for p in a.col_ptr[col]..a.col_ptr[col + 1] {
            x[a.row_idx[p] as usize] = a.values[p];
        }
        for &node in reach.iter().rev() {
            let kcol = pinv[node as usize];
            if kcol == usize::MAX {
                continue;
            }
            let xk = x[node as usize];
            if xk != 0.0 {
                for p in l_ptr[kcol]..l_ptr[kcol + 1] {
                    x[l_rows[p] as usize] -= l_vals[p] * xk;
                }
            }
        }

        // Partial pivoting: largest magnitude among unpivoted rows; ties
        // break toward the smallest original row index.
        let mut piv_row = usize::MAX;
        let mut piv_mag = 0.0f64;
        for &node in reach.iter() {
            let i = node as usize;
            if pinv[i] == usize::MAX {
                let t = x[i].abs();
                if t > piv_mag || (t == piv_mag && t > 0.0 && i < piv_row) {
                    piv_mag = t;
                    piv_row = i;
                }
            }
        }
        if piv_row == usize::MAX || piv_mag <= PIVOT_ABS_MIN {
            // Clean workspace before reporting.
            for &node in reach.iter() {
                mark[node as usize] = false;
                x[node as usize] = 0.0;
            }
            return Err(SingularityReport { column: col });
        }
        let pivot = x[piv_row];
        pinv[piv_row] = k;
        u_diag[k] = pivot;

        for &node in reach.iter() {
            let i = node as usize;
            let v = x[i];
            if i != piv_row && v != 0.0 {
                match pinv[i] {
                    usize::MAX => {
                        l_rows.push(i as u32);
                        l_vals.push(v / pivot);
                    }
                    kk => {
                        u_rows.push(kk as u32);
                        u_vals.push(v);
                    }
                }
            }
            mark[i] = false;
            x[i] = 0.0;
        }
        l_ptr.push(l_rows.len());
        u_ptr.push(u_rows.len());
    }

    // Rename L rows into pivot order now that every row has a position.
    for r in l_rows.iter_mut() {
        *r = pinv[*r as usize] as u32;
    }

    Ok(LuFactors {
        n,
        l_ptr,
        l_rows,
        l_vals,
        u_ptr,
        u_rows,
        u_vals,
        u_diag,
        pinv,
        q: q.to_vec(),
    })
}

/// Direct solver with a cached fill-reducing order. Reuse one instance across
/// solves that share a sparsity pattern (Newton and KKT iterations do).
pub struct DirectSolver {
    cached_pattern: Option<Csc>,
    cached_order: Vec<usize>,
}

impl DirectSolver {
    pub fn new() -> DirectSolver {
        DirectSolver {
            cached_pattern: None,
            cached_order: Vec::new(),
        }
    }

    pub fn factor_solve(&mut self, sys: &SparseSystem) -> Result<Vec<f64>, SingularityReport> {
        let a = sys.to_csc();
        let reuse = self
            .cached_pattern
            .as_ref()
            .map(|c| c.same_pattern(&a))
            .unwrap_or(false);
        if !reuse {
            self.cached_order = min_degree_order(&a);
            self.cached_pattern = Some(Csc {
                values: Vec::new(),
                ..a.clone()
            });
        }
        let factors = factor(&a, &self.cached_order)?;
        let mut x = factors.solve(&sys.rhs);

        // Iterative refinement until the residual test passes (two rounds at
        // most; ill-conditioned systems keep the best iterate found).
        let b_norm = sys.rhs.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        let mut resid = vec![0.0; sys.dim];
        for _ in 0..2 {
            a.matvec(&x, &mut resid);
            let mut worst = 0.0f64;
            for i in 0..sys.dim {
                resid[i] = sys.rhs[i] - resid[i];
                worst = worst.max(resid[i].abs());
            }
            if worst <= 1e-12 * b_norm {
                break;
            }
            let dx = factors.solve(&resid);
            for i in 0..sys.dim {
                x[i] += dx[i];
            }
        }
        Ok(x)
    }
}

impl Default for DirectSolver {
    fn default() -> Self {
        DirectSolver::new()
    }
}

/// One-shot convenience wrapper around [`DirectSolver`].
pub fn factor_solve(sys: &SparseSystem) -> Result<Vec<f64>, SingularityReport> {
    DirectSolver::new().factor_solve(sys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Dense LU with partial pivoting, the independent oracle.
    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.to_vec();
        let mut x: Vec<f64> = b.to_vec();
        for k in 0..n {
            let (mut piv, mut mag) = (k, m[k][k].abs());
            for i in (k + 1)..n {
                if m[i][k].abs() > mag {
                    piv = i;
                    mag = m[i][k].abs();
                }
            }
            if mag < 1e-300 {
                return None;
            }
            m.swap(k, piv);
            x.swap(k, piv);
            for i in (k + 1)..n {
                let f = m[i][k] / m[k][k];
                if f != 0.0 {
                    for j in k..n {
                        m[i][j] -= f * m[k][j];
                    }
                    x[i] -= f * x[k];
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = x[k];
            for j in (k + 1)..n {
                s -= m[k][j] * x[j];
            }
            x[k] = s / m[k][k];
        }
        Some(x)
    }

    #[test]
    fn identity_solve() {
        let mut sys = SparseSystem::new(3);
        for i in 0..3 {
            sys.push(i, i, 1.0);
        }
        sys.set_rhs(vec![1.0, 0.0, 0.0]);
        let x = factor_solve(&sys).unwrap();
        assert_eq!(x, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn two_by_two_hand_case() {
        let mut sys = SparseSystem::new(2);
        sys.push(0, 0, 2.0);
        sys.push(0, 1, 1.0);
        sys.push(1, 0, 1.0);
        sys.push(1, 1, 2.0);
        sys.set_rhs(vec![3.0, 3.0]);
        let x = factor_solve(&sys).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14);
        assert!((x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_diagonal_requires_pivoting() {
        // [[0, 1], [1, 0]] x = [2, 5]
        let mut sys = SparseSystem::new(2);
        sys.push(0, 1, 1.0);
        sys.push(1, 0, 1.0);
        sys.set_rhs(vec![2.0, 5.0]);
        let x = factor_solve(&sys).unwrap();
        assert!((x[0] - 5.0).abs() < 1e-14);
        assert!((x[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_reports_column() {
        let mut sys = SparseSystem::new(3);
        sys.push(0, 0, 1.0);
        sys.push(1, 1, 1.0);
        // Column 2 is structurally empty.
        sys.set_rhs(vec![1.0, 1.0, 1.0]);
        let err = factor_solve(&sys).unwrap_err();
        assert_eq!(err.column, 2);
    }

    #[test]
    fn random_sparse_matches_dense_oracle() {
        let mut rng = StdRng::seed_from_u64(42);
        let n = 50;
        for _trial in 0..5 {
            let mut dense = vec![vec![0.0f64; n]; n];
            let mut sys = SparseSystem::new(n);
            // SPD-patterned: diagonally dominated symmetric structure with
            // unsymmetric values plus a few off-pattern entries.
            for i in 0..n {
                let d = 4.0 + rng.gen_range(0.0..2.0);
                dense[i][i] += d;
                sys.push(i, i, d);
                for _ in 0..3 {
                    let j = rng.gen_range(0..n);
                    if j != i {
                        let v = rng.gen_range(-1.0..1.0);
                        dense[i][j] += v;
                        sys.push(i, j, v);
                        let w = rng.gen_range(-1.0..1.0);
                        dense[j][i] += w;
                        sys.push(j, i, w);
                    }
                }
            }
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            sys.set_rhs(b.clone());
            let x = factor_solve(&sys).unwrap();
            let xd = dense_solve(&dense, &b).unwrap();
            for i in 0..n {
                assert!(
                    (x[i] - xd[i]).abs() <= 1e-9 * xd[i].abs().max(1.0),
                    "row {}: {} vs {}",
                    i,
                    x[i],
                    xd[i]
                );
            }
        }
    }

    #[test]
    fn residual_bound_holds() {
        let mut rng = StdRng::seed_from_u64(7);
        let n = 80;
        let mut sys = SparseSystem::new(n);
        for i in 0..n {
            sys.push(i, i, 10.0 + rng.gen_range(0.0..1.0));
            let j = (i + 7) % n;
            sys.push(i, j, rng.gen_range(-2.0..2.0));
            sys.push(j, i, rng.gen_range(-2.0..2.0));
        }
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        sys.set_rhs(b.clone());
        let x = factor_solve(&sys).unwrap();
        let a = sys.to_csc();
        let mut ax = vec![0.0; n];
        a.matvec(&x, &mut ax);
        let b_norm = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..n {
            assert!((ax[i] - b[i]).abs() <= 1e-10 * b_norm);
        }
    }

    #[test]
    fn deterministic_given_identical_input() {
        let build = || {
            let mut sys = SparseSystem::new(20);
            let mut rng = StdRng::seed_from_u64(99);
            for i in 0..20 {
                sys.push(i, i, 3.0 + rng.gen_range(0.0..1.0));
                sys.push(i, (i + 3) % 20, rng.gen_range(-1.0..1.0));
                sys.push((i + 5) % 20, i, rng.gen_range(-1.0..1.0));
            }
            sys.set_rhs((0..20).map(|i| i as f64).collect());
            sys
        };
        let x1 = factor_solve(&build()).unwrap();
        let x2 = factor_solve(&build()).unwrap();
        assert_eq!(x1, x2, "identical bytes in must give identical bytes out");
    }

    #[test]
    fn pattern_reuse_gives_same_answers() {
        let mut solver = DirectSolver::new();
        for scale in [1.0, 2.0, 3.0] {
            let mut sys = SparseSystem::new(4);
            for i in 0..4 {
                sys.push(i, i, 2.0 * scale);
                if i + 1 < 4 {
                    sys.push(i, i + 1, -0.5 * scale);
                    sys.push(i + 1, i, -0.5 * scale);
                }
            }
            sys.set_rhs(vec![1.0; 4]);
            let x = solver.factor_solve(&sys).unwrap();
            let mut fresh = DirectSolver::new();
            let y = fresh.factor_solve(&sys).unwrap();
            assert_eq!(x, y);
        }
    }
}
