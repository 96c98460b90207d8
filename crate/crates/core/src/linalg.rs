//! Sparse symmetric `L D L^T` factorization and solves.
//!
//! The interior-point KKT systems are symmetric quasi-definite after
//! regularization, so an LDL factorization without pivoting is numerically
//! valid. Fill is controlled by a caller-supplied elimination order: the
//! assembler tags every row/column with a block id (per-interval dispatch
//! blocks first, coupling border last), which keeps the factor close to
//! block-diagonal-plus-border.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("zero pivot at permuted position {0}: matrix is singular to working precision")]
    Singular(usize),
    #[error("triplet index ({0}, {1}) out of bounds for dimension {2}")]
    IndexOutOfBounds(usize, usize, usize),
}

/// Signs of the diagonal factor; used for inertia-based regularization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inertia {
    pub pos: usize,
    pub neg: usize,
}

/// Factorizes `P A P^T = L D L^T` where `P` is built from block tags.
///
/// The solver object owns all workspace and the last factor, so repeated
/// factorizations with the same dimension reuse allocations.
pub struct SymSolver {
    n: usize,
    /// permuted position -> original index
    perm: Vec<usize>,
    /// original index -> permuted position
    inv: Vec<usize>,
    // permuted upper-triangular CSC of A
    acol: Vec<usize>,
    arow: Vec<usize>,
    aval: Vec<f64>,
    // factor
    lcol: Vec<usize>,
    lrow: Vec<usize>,
    lval: Vec<f64>,
    d: Vec<f64>,
    // workspace
    parent: Vec<usize>,
    lnz: Vec<usize>,
    flag: Vec<usize>,
    pattern: Vec<usize>,
    y: Vec<f64>,
    entries: Vec<(usize, usize, f64)>,
    factored: bool,
}

const NONE: usize = usize::MAX;

impl SymSolver {
    /// `order[i]` is the block tag of index `i`; indices are eliminated in
    /// ascending tag order (ties keep their original order), so `u32::MAX`
    /// marks the border.
    pub fn new(order: &[u32]) -> Self {
        let n = order.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by_key(|&i| (order[i], i));
        let mut inv = vec![0usize; n];
        for (pos, &orig) in perm.iter().enumerate() {
            inv[orig] = pos;
        }
        SymSolver {
            n,
            perm,
            inv,
            acol: Vec::new(),
            arow: Vec::new(),
            aval: Vec::new(),
            lcol: Vec::new(),
            lrow: Vec::new(),
            lval: Vec::new(),
            d: vec![0.0; n],
            parent: vec![NONE; n],
            lnz: vec![0; n],
            flag: vec![NONE; n],
            pattern: vec![0; n],
            y: vec![0.0; n],
            entries: Vec::new(),
            factored: false,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Build the permuted upper CSC from symmetric triplets (either triangle,
    /// duplicates summed), then factor. Returns the inertia of `D`.
    pub fn factor(&mut self, triplets: &[(usize, usize, f64)]) -> Result<Inertia, LinalgError> {
        self.factored = false;
        let n = self.n;
        self.entries.clear();
        self.entries.reserve(triplets.len());
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(LinalgError::IndexOutOfBounds(i, j, n));
            }
            let (pi, pj) = (self.inv[i], self.inv[j]);
            // upper storage: row <= col
            let (r, c) = if pi <= pj { (pi, pj) } else { (pj, pi) };
            self.entries.push((c, r, v));
        }
        self.entries.sort_unstable_by_key(|&(c, r, _)| (c, r));

        self.acol.clear();
        self.acol.resize(n + 1, 0);
        self.arow.clear();
        self.aval.clear();
        let mut last: Option<(usize, usize)> = None;
        for &(c, r, v) in &self.entries {
            if last == Some((c, r)) {
                *self.aval.last_mut().unwrap() += v;
            } else {
                self.arow.push(r);
                self.aval.push(v);
                self.acol[c + 1] += 1;
                last = Some((c, r));
            }
        }
        for c in 0..n {
            self.acol[c + 1] += self.acol[c];
        }

        self.symbolic();
        self.numeric()
    }

    fn symbolic(&mut self) {
        let n = self.n;
        self.flag.iter_mut().for_each(|f| *f = NONE);
        self.lnz.iter_mut().for_each(|c| *c = 0);
        for k in 0..n {
            self.parent[k] = NONE;
            self.flag[k] = k;
            for p in self.acol[k]..self.acol[k + 1] {
                let mut i = self.arow[p];
                while i < k && self.flag[i] != k {
                    if self.parent[i] == NONE {
                        self.parent[i] = k;
                    }
                    self.lnz[i] += 1;
                    self.flag[i] = k;
                    i = self.parent[i];
                }
            }
        }
        self.lcol.clear();
        self.lcol.resize(n + 1, 0);
        for k in 0..n {
            self.lcol[k + 1] = self.lcol[k] + self.lnz[k];
        }
        let nnz = self.lcol[n];
        self.lrow.clear();
        self.lrow.resize(nnz, 0);
        self.lval.clear();
        self.lval.resize(nnz, 0.0);
    }

    fn numeric(&mut self) -> Result<Inertia, LinalgError> {
        let n = self.n;
        self.flag.iter_mut().for_each(|f| *f = NONE);
        self.lnz.iter_mut().for_each(|c| *c = 0);
        self.y.iter_mut().for_each(|v| *v = 0.0);
        let mut inertia = Inertia { pos: 0, neg: 0 };
        for k in 0..n {
            let mut top = n;
            self.flag[k] = k;
            for p in self.acol[k]..self.acol[k + 1] {
                let i0 = self.arow[p];
                self.y[i0] += self.aval[p];
                let mut len = 0;
                let mut i = i0;
                while i < k && self.flag[i] != k {
                    self.pattern[len] = i;
                    len += 1;
                    self.flag[i] = k;
                    i = self.parent[i];
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    self.pattern[top] = self.pattern[len];
                }
            }
            self.d[k] = self.y[k];
            self.y[k] = 0.0;
            for s in top..n {
                let i = self.pattern[s];
                let yi = self.y[i];
                self.y[i] = 0.0;
                let p2 = self.lcol[i] + self.lnz[i];
                for p in self.lcol[i]..p2 {
                    self.y[self.lrow[p]] -= self.lval[p] * yi;
                }
                let lki = yi / self.d[i];
                self.d[k] -= lki * yi;
                self.lrow[p2] = k;
                self.lval[p2] = lki;
                self.lnz[i] += 1;
            }
            if self.d[k] == 0.0 || !self.d[k].is_finite() {
                return Err(LinalgError::Singular(k));
            }
            if self.d[k] > 0.0 {
                inertia.pos += 1;
            } else {
                inertia.neg += 1;
            }
        }
        self.factored = true;
        Ok(inertia)
    }

    fn solve_permuted(&self, b: &mut [f64]) {
        let n = self.n;
        for j in 0..n {
            let bj = b[j];
            for p in self.lcol[j]..self.lcol[j + 1] {
                b[self.lrow[p]] -= self.lval[p] * bj;
            }
        }
        for j in 0..n {
            b[j] /= self.d[j];
        }
        for j in (0..n).rev() {
            let mut bj = b[j];
            for p in self.lcol[j]..self.lcol[j + 1] {
                bj -= self.lval[p] * b[self.lrow[p]];
            }
            b[j] = bj;
        }
    }

    /// y += A x on the permuted matrix.
    fn matvec_permuted(&self, x: &[f64], y: &mut [f64]) {
        for c in 0..self.n {
            for p in self.acol[c]..self.acol[c + 1] {
                let r = self.arow[p];
                let v = self.aval[p];
                y[r] += v * x[c];
                if r != c {
                    y[c] += v * x[r];
                }
            }
        }
    }

    /// Solve `A x = b` with a few steps of iterative refinement.
    /// Returns the final residual infinity norm.
    pub fn solve(&self, b: &[f64], x: &mut [f64], refine_steps: usize) -> f64 {
        assert!(self.factored, "solve before successful factor");
        let n = self.n;
        let mut bp = vec![0.0; n];
        for pos in 0..n {
            bp[pos] = b[self.perm[pos]];
        }
        let mut xp = bp.clone();
        self.solve_permuted(&mut xp);
        let mut resid = vec![0.0; n];
        let mut last_norm = f64::INFINITY;
        for _ in 0..refine_steps {
            resid.copy_from_slice(&bp);
            let mut ax = vec![0.0; n];
            self.matvec_permuted(&xp, &mut ax);
            for i in 0..n {
                resid[i] -= ax[i];
            }
            let norm = resid.iter().fold(0.0f64, |a, &r| a.max(r.abs()));
            if norm >= last_norm || norm == 0.0 {
                break;
            }
            last_norm = norm;
            self.solve_permuted(&mut resid);
            for i in 0..n {
                xp[i] += resid[i];
            }
        }
        // final residual
        let mut ax = vec![0.0; n];
        self.matvec_permuted(&xp, &mut ax);
        let mut norm = 0.0f64;
        for i in 0..n {
            norm = norm.max((bp[i] - ax[i]).abs());
        }
        for pos in 0..n {
            x[self.perm[pos]] = xp[pos];
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Dense Gaussian elimination with partial pivoting, as an oracle.
    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.iter().cloned().collect();
        let mut x = b.to_vec();
        for k in 0..n {
            let piv = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs())).unwrap();
            m.swap(k, piv);
            x.swap(k, piv);
            for i in k + 1..n {
                let f = m[i][k] / m[k][k];
                for j in k..n {
                    m[i][j] -= f * m[k][j];
                }
                x[i] -= f * x[k];
            }
        }
        for k in (0..n).rev() {
            for j in k + 1..n {
                x[k] -= m[k][j] * x[j];
            }
            x[k] /= m[k][k];
        }
        x
    }

    fn to_dense(n: usize, tri: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; n]; n];
        for &(i, j, v) in tri {
            a[i][j] += v;
            if i != j {
                a[j][i] += v;
            }
        }
        a
    }

    #[test]
    fn solves_small_indefinite_system() {
        // saddle-point KKT: [[2, 0, 1], [0, 3, -1], [1, -1, -1e-8]]
        let tri = vec![
            (0, 0, 2.0),
            (1, 1, 3.0),
            (2, 0, 1.0),
            (2, 1, -1.0),
            (2, 2, -1e-8),
        ];
        let mut s = SymSolver::new(&[0, 0, u32::MAX]);
        let inertia = s.factor(&tri).unwrap();
        assert_eq!(inertia, Inertia { pos: 2, neg: 1 });
        let b = [1.0, -2.0, 0.5];
        let mut x = [0.0; 3];
        let resid = s.solve(&b, &mut x, 3);
        assert!(resid < 1e-10);
        let oracle = dense_solve(&to_dense(3, &tri), &b);
        for i in 0..3 {
            assert_relative_eq!(x[i], oracle[i], max_relative = 1e-8);
        }
    }

    #[test]
    fn random_quasidefinite_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let npos = 5 + (trial % 7);
            let nneg = 3 + (trial % 5);
            let n = npos + nneg;
            let mut tri = Vec::new();
            // positive block diag + coupling + negative block diag
            for i in 0..npos {
                tri.push((i, i, 1.0 + rng.random::<f64>() * 4.0));
            }
            for i in npos..n {
                tri.push((i, i, -(0.5 + rng.random::<f64>() * 2.0)));
            }
            for _ in 0..3 * n {
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..n);
                if i != j {
                    tri.push((i, j, rng.random::<f64>() - 0.5));
                }
            }
            // random block tags exercise the permutation
            let order: Vec<u32> =
                (0..n).map(|_| if rng.random::<bool>() { 0 } else { u32::MAX }).collect();
            let mut s = SymSolver::new(&order);
            let inertia = s.factor(&tri).unwrap();
            assert_eq!(inertia.pos + inertia.neg, n);
            let b: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let mut x = vec![0.0; n];
            let resid = s.solve(&b, &mut x, 4);
            assert!(resid < 1e-9, "trial {trial}: residual {resid}");
            let oracle = dense_solve(&to_dense(n, &tri), &b);
            for i in 0..n {
                assert_relative_eq!(x[i], oracle[i], max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn duplicate_triplets_are_summed() {
        let tri = vec![(0, 0, 1.0), (0, 0, 1.5), (1, 0, 0.25), (0, 1, 0.25), (1, 1, 2.0)];
        let mut s = SymSolver::new(&[0, 0]);
        s.factor(&tri).unwrap();
        let b = [1.0, 1.0];
        let mut x = [0.0; 2];
        s.solve(&b, &mut x, 2);
        let oracle = dense_solve(&to_dense(2, &tri), &b);
        assert_relative_eq!(x[0], oracle[0], max_relative = 1e-12);
        assert_relative_eq!(x[1], oracle[1], max_relative = 1e-12);
    }

    #[test]
    fn singular_matrix_reported() {
        let tri = vec![(0, 0, 1.0), (1, 1, 0.0)];
        let mut s = SymSolver::new(&[0, 0]);
        assert!(matches!(s.factor(&tri), Err(LinalgError::Singular(_))));
    }
}
