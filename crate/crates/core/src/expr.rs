//! Sparse algebraic expressions for model assembly.
//!
//! Every constraint in the pipeline is affine or quadratic in the decision
//! vector, and the only non-quadratic objective pieces are Cobb-Douglas
//! utility terms. Restricting the expression language to exactly that
//! (constant + linear + quadratic terms, plus [`CdAtom`]s in objectives)
//! keeps residuals, Jacobians, and Hessians analytic and cheap.

pub type VarId = usize;

/// `constant + sum coef * x_i + sum coef * x_i * x_j`.
#[derive(Debug, Clone, Default)]
pub struct QuadExpr {
    pub constant: f64,
    pub linear: Vec<(VarId, f64)>,
    /// Terms `coef * x_i * x_j`; `i == j` encodes `coef * x_i^2`.
    pub quadratic: Vec<(VarId, VarId, f64)>,
}

impl QuadExpr {
    pub fn constant(c: f64) -> Self {
        QuadExpr { constant: c, ..Default::default() }
    }

    pub fn lin(&mut self, var: VarId, coef: f64) -> &mut Self {
        if coef != 0.0 {
            self.linear.push((var, coef));
        }
        self
    }

    pub fn quad(&mut self, i: VarId, j: VarId, coef: f64) -> &mut Self {
        if coef != 0.0 {
            self.quadratic.push((i, j, coef));
        }
        self
    }

    pub fn add_const(&mut self, c: f64) -> &mut Self {
        self.constant += c;
        self
    }

    /// Accumulate `factor * other` into `self`.
    pub fn add_scaled(&mut self, other: &QuadExpr, factor: f64) {
        self.constant += factor * other.constant;
        self.linear
            .extend(other.linear.iter().map(|&(v, c)| (v, factor * c)));
        self.quadratic
            .extend(other.quadratic.iter().map(|&(i, j, c)| (i, j, factor * c)));
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut v = self.constant;
        for &(i, c) in &self.linear {
            v += c * x[i];
        }
        for &(i, j, c) in &self.quadratic {
            v += c * x[i] * x[j];
        }
        v
    }

    /// Accumulate `factor * gradient` into `out`.
    pub fn add_gradient(&self, x: &[f64], factor: f64, out: &mut [f64]) {
        for &(i, c) in &self.linear {
            out[i] += factor * c;
        }
        for &(i, j, c) in &self.quadratic {
            if i == j {
                out[i] += factor * 2.0 * c * x[i];
            } else {
                out[i] += factor * c * x[j];
                out[j] += factor * c * x[i];
            }
        }
    }

    /// Emit Jacobian-row entries `(row, col, d expr/d col)` as triplets.
    pub fn add_jacobian_row(&self, x: &[f64], row: usize, out: &mut Vec<(usize, usize, f64)>) {
        for &(i, c) in &self.linear {
            out.push((row, i, c));
        }
        for &(i, j, c) in &self.quadratic {
            if i == j {
                out.push((row, i, 2.0 * c * x[i]));
            } else {
                out.push((row, i, c * x[j]));
                out.push((row, j, c * x[i]));
            }
        }
    }

    /// Emit `factor * Hessian` entries into a lower-triangle triplet list.
    /// The Hessian of a quadratic is constant: `x` is not needed.
    pub fn add_hessian(&self, factor: f64, out: &mut Vec<(usize, usize, f64)>) {
        for &(i, j, c) in &self.quadratic {
            if i == j {
                out.push((i, i, 2.0 * factor * c));
            } else {
                out.push((i.max(j), i.min(j), factor * c));
            }
        }
    }

    /// Directional derivative `d/da expr(x + a d)` at `a = 0`.
    pub fn dir_deriv(&self, x: &[f64], d: &[f64]) -> f64 {
        let mut v = 0.0;
        for &(i, c) in &self.linear {
            v += c * d[i];
        }
        for &(i, j, c) in &self.quadratic {
            if i == j {
                v += 2.0 * c * x[i] * d[i];
            } else {
                v += c * (x[i] * d[j] + x[j] * d[i]);
            }
        }
        v
    }

    /// Variables referenced by this expression (with duplicates).
    pub fn vars(&self) -> impl Iterator<Item = VarId> + '_ {
        self.linear
            .iter()
            .map(|&(v, _)| v)
            .chain(self.quadratic.iter().flat_map(|&(i, j, _)| [i, j]))
    }
}

/// `coef * (x1 + off1)^alpha * (x2 + off2)^(1 - alpha)`.
///
/// Offsets keep the bases strictly positive on the solver's path (they hold
/// the inflexible window energies while `x` holds flexible energy).
#[derive(Debug, Clone, Copy)]
pub struct CdAtom {
    pub coef: f64,
    pub var1: VarId,
    pub off1: f64,
    pub var2: VarId,
    pub off2: f64,
    pub alpha: f64,
}

impl CdAtom {
    fn bases(&self, x: &[f64]) -> (f64, f64) {
        (x[self.var1] + self.off1, x[self.var2] + self.off2)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let (b1, b2) = self.bases(x);
        let a = self.alpha;
        if a == 0.0 {
            return self.coef * b2;
        }
        if a == 1.0 {
            return self.coef * b1;
        }
        if b1 <= 0.0 || b2 <= 0.0 {
            return 0.0;
        }
        self.coef * b1.powf(a) * b2.powf(1.0 - a)
    }

    pub fn add_gradient(&self, x: &[f64], factor: f64, out: &mut [f64]) {
        let (b1, b2) = self.bases(x);
        let a = self.alpha;
        if a == 0.0 {
            out[self.var2] += factor * self.coef;
            return;
        }
        if a == 1.0 {
            out[self.var1] += factor * self.coef;
            return;
        }
        if b1 <= 0.0 || b2 <= 0.0 {
            return;
        }
        let u = b1.powf(a) * b2.powf(1.0 - a);
        out[self.var1] += factor * self.coef * a * u / b1;
        out[self.var2] += factor * self.coef * (1.0 - a) * u / b2;
    }

    pub fn add_hessian(&self, x: &[f64], factor: f64, out: &mut Vec<(usize, usize, f64)>) {
        let (b1, b2) = self.bases(x);
        let a = self.alpha;
        if a == 0.0 || a == 1.0 || b1 <= 0.0 || b2 <= 0.0 {
            return;
        }
        let u = b1.powf(a) * b2.powf(1.0 - a);
        let c = factor * self.coef;
        let h11 = c * a * (a - 1.0) * u / (b1 * b1);
        let h22 = c * (1.0 - a) * (-a) * u / (b2 * b2);
        let h12 = c * a * (1.0 - a) * u / (b1 * b2);
        out.push((self.var1, self.var1, h11));
        out.push((self.var2, self.var2, h22));
        let (hi, lo) = (self.var1.max(self.var2), self.var1.min(self.var2));
        out.push((hi, lo, h12));
    }
}

/// A scalar function: quadratic part plus Cobb-Douglas atoms.
#[derive(Debug, Clone, Default)]
pub struct ObjExpr {
    pub quad: QuadExpr,
    pub atoms: Vec<CdAtom>,
}

impl ObjExpr {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.quad.eval(x) + self.atoms.iter().map(|a| a.eval(x)).sum::<f64>()
    }

    pub fn add_gradient(&self, x: &[f64], factor: f64, out: &mut [f64]) {
        self.quad.add_gradient(x, factor, out);
        for a in &self.atoms {
            a.add_gradient(x, factor, out);
        }
    }

    pub fn add_hessian(&self, x: &[f64], factor: f64, out: &mut Vec<(usize, usize, f64)>) {
        self.quad.add_hessian(factor, out);
        for a in &self.atoms {
            a.add_hessian(x, factor, out);
        }
    }

    pub fn add_scaled(&mut self, other: &ObjExpr, factor: f64) {
        self.quad.add_scaled(&other.quad, factor);
        self.atoms.extend(other.atoms.iter().map(|a| CdAtom {
            coef: factor * a.coef,
            ..*a
        }));
    }
}

/// Elimination-order hint: variables and rows tagged with a block id are
/// factored before the border (tag [`Blocks::BORDER`]). Blocks correspond to
/// the per-interval structure of the dispatch problem; the border holds the
/// coupling rows and variables.
#[derive(Debug, Clone, Default)]
pub struct Blocks {
    pub n_blocks: u32,
    pub var_block: Vec<u32>,
    pub eq_block: Vec<u32>,
    pub ineq_block: Vec<u32>,
}

impl Blocks {
    pub const BORDER: u32 = u32::MAX;
}

/// A smooth nonlinear program:
/// minimize `objective` subject to `equalities = 0`, `inequalities >= 0`,
/// and `lb <= x <= ub`.
#[derive(Debug, Clone, Default)]
pub struct Nlp {
    pub var_names: Vec<String>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub x0: Vec<f64>,
    pub equalities: Vec<QuadExpr>,
    pub eq_names: Vec<String>,
    pub inequalities: Vec<QuadExpr>,
    pub ineq_names: Vec<String>,
    pub objective: ObjExpr,
    /// Optional elimination-order hint for the KKT factorization.
    pub blocks: Option<Blocks>,
}

impl Nlp {
    pub fn n(&self) -> usize {
        self.lb.len()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lb: f64, ub: f64, x0: f64) -> VarId {
        debug_assert!(lb <= ub);
        self.var_names.push(name.into());
        self.lb.push(lb);
        self.ub.push(ub);
        self.x0.push(x0);
        self.var_names.len() - 1
    }

    pub fn add_equality(&mut self, name: impl Into<String>, expr: QuadExpr) {
        self.equalities.push(expr);
        self.eq_names.push(name.into());
    }

    pub fn add_inequality(&mut self, name: impl Into<String>, expr: QuadExpr) {
        self.inequalities.push(expr);
        self.ineq_names.push(name.into());
    }

    pub fn eval_equalities(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.equalities.iter().map(|e| e.eval(x)));
    }

    pub fn eval_inequalities(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.inequalities.iter().map(|e| e.eval(x)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let h = 1e-6 * (1.0 + x[i].abs());
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    #[test]
    fn quad_eval_and_gradient() {
        // 3 + 2 x0 - x1 + 0.5 x0^2 + 4 x0 x1
        let mut e = QuadExpr::constant(3.0);
        e.lin(0, 2.0).lin(1, -1.0).quad(0, 0, 0.5).quad(0, 1, 4.0);
        let x = [1.5, -2.0];
        assert_relative_eq!(
            e.eval(&x),
            3.0 + 3.0 + 2.0 + 0.5 * 2.25 + 4.0 * 1.5 * -2.0,
            max_relative = 1e-14
        );
        let mut g = vec![0.0; 2];
        e.add_gradient(&x, 1.0, &mut g);
        let fd = fd_gradient(|x| e.eval(x), &x);
        for i in 0..2 {
            assert_relative_eq!(g[i], fd[i], max_relative = 1e-6);
        }
    }

    #[test]
    fn cd_atom_gradient_matches_fd() {
        let atom = CdAtom { coef: -2.5, var1: 0, off1: 3.0, var2: 1, off2: 1.0, alpha: 0.6 };
        let x = [2.0, 5.0];
        let mut g = vec![0.0; 2];
        atom.add_gradient(&x, 1.0, &mut g);
        let fd = fd_gradient(|x| atom.eval(x), &x);
        for i in 0..2 {
            assert_relative_eq!(g[i], fd[i], max_relative = 1e-6);
        }
    }

    #[test]
    fn cd_atom_hessian_matches_fd() {
        let atom = CdAtom { coef: 1.5, var1: 0, off1: 0.5, var2: 1, off2: 2.0, alpha: 0.3 };
        let x = [1.0, 0.7];
        let mut tri = Vec::new();
        atom.add_hessian(&x, 1.0, &mut tri);
        let mut h = [[0.0; 2]; 2];
        for (i, j, v) in tri {
            h[i][j] += v;
            if i != j {
                h[j][i] += v;
            }
        }
        for j in 0..2 {
            let col = fd_gradient(
                |x| {
                    let mut g = vec![0.0; 2];
                    atom.add_gradient(x, 1.0, &mut g);
                    g[j]
                },
                &x,
            );
            for i in 0..2 {
                assert_relative_eq!(h[i][j], col[i], max_relative = 1e-5, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn cd_atom_degenerate_exponents() {
        let a0 = CdAtom { coef: 2.0, var1: 0, off1: 0.0, var2: 1, off2: 0.0, alpha: 0.0 };
        assert_eq!(a0.eval(&[7.0, 3.0]), 6.0);
        let a1 = CdAtom { coef: 2.0, var1: 0, off1: 0.0, var2: 1, off2: 0.0, alpha: 1.0 };
        assert_eq!(a1.eval(&[7.0, 3.0]), 14.0);
        let mut g = vec![0.0; 2];
        a0.add_gradient(&[0.0, 3.0], 1.0, &mut g);
        assert_eq!(g, vec![0.0, 2.0]);
    }
}
