//! Primal-dual interior-point solver for the smooth programs produced by the
//! pipeline: dispatch subproblems, and the relaxed equilibrium systems.
//!
//! The method is a damped Newton iteration on the perturbed first-order
//! conditions of the log-barrier subproblem, with
//! - slack variables for general inequalities and barrier terms for finite
//!   variable bounds,
//! - a symmetric quasi-definite KKT system (primal/dual regularization chosen
//!   by inertia), factored by [`crate::linalg::SymSolver`] in the caller's
//!   block elimination order,
//! - fraction-to-boundary step limits and an l1-penalty Armijo line search,
//! - an elastic-mode feasibility restoration fallback that also yields
//!   infeasibility certificates.
//!
//! Everything is deterministic: no randomization, fixed summation orders.

use crate::expr::{Blocks, Nlp, QuadExpr};
use crate::linalg::SymSolver;

#[derive(Debug, Clone)]
pub struct IpmOptions {
    /// Convergence tolerance on the scaled KKT residuals.
    pub tol: f64,
    /// Final barrier parameter; complementarity products are driven to this.
    pub mu_target: f64,
    /// Initial barrier parameter (warm starts pass something small).
    pub mu_init: f64,
    pub max_iter: usize,
    pub allow_restoration: bool,
}

impl Default for IpmOptions {
    fn default() -> Self {
        IpmOptions {
            tol: 1e-8,
            mu_target: 1e-10,
            mu_init: 1e-1,
            max_iter: 400,
            allow_restoration: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IpmStatus {
    Converged,
    /// Best point returned; progress stopped before reaching tolerance.
    Stalled,
    MaxIter,
    /// Constraint rows that remain violated at the feasibility-restoration
    /// optimum, with their violation magnitudes.
    LocallyInfeasible(Vec<(String, f64)>),
    NumericFailure(String),
}

impl IpmStatus {
    pub fn is_usable(&self) -> bool {
        matches!(self, IpmStatus::Converged | IpmStatus::Stalled | IpmStatus::MaxIter)
    }
}

#[derive(Debug, Clone)]
pub struct IpmResult {
    pub status: IpmStatus,
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    /// Equality multipliers, unscaled: stationarity reads
    /// `grad f - Je^T y - Ji^T w - zl + zu = 0`.
    pub y: Vec<f64>,
    /// General-inequality multipliers (nonnegative), unscaled.
    pub w: Vec<f64>,
    /// Lower/upper bound multipliers (nonnegative), unscaled.
    pub zl: Vec<f64>,
    pub zu: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Scaled KKT error at the returned point (mu = 0).
    pub kkt_error: f64,
    /// Unscaled infinity norm of constraint violations.
    pub constraint_violation: f64,
    /// Largest complementarity product at the returned point (scaled).
    pub complementarity: f64,
    pub mu: f64,
}

pub struct WarmStart<'a> {
    pub x: &'a [f64],
    pub y: Option<&'a [f64]>,
    pub w: Option<&'a [f64]>,
    pub zl: Option<&'a [f64]>,
    pub zu: Option<&'a [f64]>,
}

struct Scaling {
    f: f64,
    eq: Vec<f64>,
    ineq: Vec<f64>,
}

const SCALE_GRAD_CAP: f64 = 100.0;

fn gradient_cap_scale(max_abs: f64) -> f64 {
    if max_abs > SCALE_GRAD_CAP {
        SCALE_GRAD_CAP / max_abs
    } else {
        1.0
    }
}

fn compute_scaling(nlp: &Nlp, x0: &[f64]) -> Scaling {
    let n = nlp.n();
    let mut g = vec![0.0; n];
    nlp.objective.add_gradient(x0, 1.0, &mut g);
    let gmax = g.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let row_scale = |expr: &QuadExpr| -> f64 {
        let mut tri = Vec::new();
        expr.add_jacobian_row(x0, 0, &mut tri);
        let m = tri.iter().fold(0.0f64, |a, &(_, _, v)| a.max(v.abs()));
        gradient_cap_scale(m)
    };
    Scaling {
        f: gradient_cap_scale(gmax),
        eq: nlp.equalities.iter().map(row_scale).collect(),
        ineq: nlp.inequalities.iter().map(row_scale).collect(),
    }
}

fn scaled_nlp(nlp: &Nlp, sc: &Scaling) -> Nlp {
    let mut out = nlp.clone();
    let mut obj = crate::expr::ObjExpr::default();
    obj.add_scaled(&nlp.objective, sc.f);
    out.objective = obj;
    for (e, &s) in out.equalities.iter_mut().zip(&sc.eq) {
        let orig = e.clone();
        *e = QuadExpr::default();
        e.add_scaled(&orig, s);
    }
    for (e, &s) in out.inequalities.iter_mut().zip(&sc.ineq) {
        let orig = e.clone();
        *e = QuadExpr::default();
        e.add_scaled(&orig, s);
    }
    out
}

/// Iterate state on the scaled problem.
struct State {
    x: Vec<f64>,
    s: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    zl: Vec<f64>,
    zu: Vec<f64>,
    mu: f64,
}

struct Residuals {
    rx: Vec<f64>,
    re: Vec<f64>,
    ri: Vec<f64>,
    /// max |s w|, |(x-lb) zl|, |(ub-x) zu|
    comp0: f64,
    /// same but |. - mu|
    comp_mu: f64,
}

struct Workspace {
    h_vals: Vec<f64>,
    c_vals: Vec<f64>,
    grad: Vec<f64>,
    tri: Vec<(usize, usize, f64)>,
}

fn eval_residuals(nlp: &Nlp, st: &State, ws: &mut Workspace) -> Residuals {
    let n = nlp.n();
    nlp.eval_equalities(&st.x, &mut ws.h_vals);
    nlp.eval_inequalities(&st.x, &mut ws.c_vals);
    ws.grad.iter_mut().for_each(|g| *g = 0.0);
    ws.grad.resize(n, 0.0);
    nlp.objective.add_gradient(&st.x, 1.0, &mut ws.grad);
    let mut rx = ws.grad.clone();
    for (j, e) in nlp.equalities.iter().enumerate() {
        if st.y[j] != 0.0 {
            e.add_gradient(&st.x, -st.y[j], &mut rx);
        }
    }
    for (j, e) in nlp.inequalities.iter().enumerate() {
        if st.w[j] != 0.0 {
            e.add_gradient(&st.x, -st.w[j], &mut rx);
        }
    }
    for i in 0..n {
        rx[i] += -st.zl[i] + st.zu[i];
    }
    let ri: Vec<f64> = ws.c_vals.iter().zip(&st.s).map(|(&c, &s)| c - s).collect();
    let mut comp0 = 0.0f64;
    let mut comp_mu = 0.0f64;
    for (j, &s) in st.s.iter().enumerate() {
        let p = s * st.w[j];
        comp0 = comp0.max(p.abs());
        comp_mu = comp_mu.max((p - st.mu).abs());
    }
    for i in 0..n {
        if nlp.lb[i].is_finite() {
            let p = (st.x[i] - nlp.lb[i]) * st.zl[i];
            comp0 = comp0.max(p.abs());
            comp_mu = comp_mu.max((p - st.mu).abs());
        }
        if nlp.ub[i].is_finite() {
            let p = (nlp.ub[i] - st.x[i]) * st.zu[i];
            comp0 = comp0.max(p.abs());
            comp_mu = comp_mu.max((p - st.mu).abs());
        }
    }
    Residuals { rx, re: ws.h_vals.clone(), ri, comp0, comp_mu }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, &x| a.max(x.abs()))
}

fn kkt_order(nlp: &Nlp) -> Vec<u32> {
    let n = nlp.n();
    let me = nlp.equalities.len();
    let mi = nlp.inequalities.len();
    let mut order = vec![0u32; n + me + mi];
    if let Some(b) = &nlp.blocks {
        order[..n].copy_from_slice(&b.var_block);
        order[n..n + me].copy_from_slice(&b.eq_block);
        order[n + me..].copy_from_slice(&b.ineq_block);
    }
    order
}

pub fn solve(nlp: &Nlp, warm: Option<WarmStart<'_>>, opts: &IpmOptions) -> IpmResult {
    let n = nlp.n();
    let me = nlp.equalities.len();
    let mi = nlp.inequalities.len();
    debug_assert!(nlp.lb.iter().zip(&nlp.ub).all(|(l, u)| u - l > 1e-12), "fixed/inverted bounds");

    // --- initial point ---------------------------------------------------
    let pad = opts.mu_init.clamp(1e-8, 1e-2);
    let mut x: Vec<f64> = warm.as_ref().map(|w| w.x.to_vec()).unwrap_or_else(|| nlp.x0.clone());
    push_inside(&mut x, &nlp.lb, &nlp.ub, pad);

    let sc = compute_scaling(nlp, &x);
    let snlp = scaled_nlp(nlp, &sc);

    let mu0 = opts.mu_init.max(opts.mu_target);
    let mut ws = Workspace {
        h_vals: Vec::new(),
        c_vals: Vec::new(),
        grad: vec![0.0; n],
        tri: Vec::new(),
    };
    snlp.eval_inequalities(&x, &mut ws.c_vals);
    // With dual information available, trust the supplied slacks: inflating
    // them re-introduces primal infeasibility on rows whose true slack is tiny.
    let has_dual_warm = warm.as_ref().map_or(false, |w| w.w.is_some());
    let slack_floor =
        if has_dual_warm { (mu0 * 1e-2).max(1e-10) } else { mu0.max(1e-6) };
    let s: Vec<f64> = ws.c_vals.iter().map(|&c| c.max(slack_floor)).collect();
    let w: Vec<f64> = s.iter().map(|&sj| (mu0 / sj).clamp(1e-10, 1e10)).collect();
    let mut zl = vec![0.0; n];
    let mut zu = vec![0.0; n];
    for i in 0..n {
        if nlp.lb[i].is_finite() {
            zl[i] = (mu0 / (x[i] - nlp.lb[i])).clamp(1e-10, 1e10);
        }
        if nlp.ub[i].is_finite() {
            zu[i] = (mu0 / (nlp.ub[i] - x[i])).clamp(1e-10, 1e10);
        }
    }
    if let Some(zlw) = warm.as_ref().and_then(|w| w.zl) {
        for i in 0..n {
            if nlp.lb[i].is_finite() {
                zl[i] = (zlw[i] * sc.f).clamp(1e-12, 1e12);
            }
        }
    }
    if let Some(zuw) = warm.as_ref().and_then(|w| w.zu) {
        for i in 0..n {
            if nlp.ub[i].is_finite() {
                zu[i] = (zuw[i] * sc.f).clamp(1e-12, 1e12);
            }
        }
    }
    let y: Vec<f64> = match warm.as_ref().and_then(|w| w.y) {
        Some(yw) => (0..me).map(|j| yw[j] * sc.f / sc.eq[j]).collect(),
        None => vec![0.0; me],
    };
    let w = match warm.as_ref().and_then(|ws2| ws2.w) {
        Some(ww) => (0..mi)
            .map(|j| (ww[j] * sc.f / sc.ineq[j]).max(1e-8))
            .collect(),
        None => w,
    };
    let mut st = State { x, s, y, w, zl, zu, mu: mu0 };

    let order = kkt_order(&snlp);
    let mut sym = SymSolver::new(&order);
    let mut delta_w_last = 0.0f64;
    let mut restorations = 0usize;
    let mut stalls = 0usize;
    let mut penalty = 1.0f64;

    let mut best: Option<(f64, State)> = None;
    let mut status = IpmStatus::MaxIter;
    let mut iterations = opts.max_iter;

    for iter in 0..opts.max_iter {
        let res = eval_residuals(&snlp, &st, &mut ws);
        let e_dual = inf_norm(&res.rx);
        let e_pr = inf_norm(&res.re).max(inf_norm(&res.ri));
        let e0 = e_dual.max(e_pr).max(res.comp0);
        let e_mu = e_dual.max(e_pr).max(res.comp_mu);

        let score = e0;
        if best.as_ref().map_or(true, |(b, _)| score < *b) {
            best = Some((score, clone_state(&st)));
        }

        if e_dual <= opts.tol && e_pr <= opts.tol && res.comp0 <= opts.tol.max(10.0 * opts.mu_target)
        {
            status = IpmStatus::Converged;
            iterations = iter;
            break;
        }

        // Barrier update: once the current subproblem is solved well enough,
        // tighten mu.
        if e_mu <= (10.0 * st.mu).max(opts.tol / 10.0) && st.mu > opts.mu_target {
            st.mu = opts.mu_target.max((0.2 * st.mu).min(st.mu.powf(1.5)));
            continue;
        }

        // --- assemble and factor the KKT system --------------------------
        let delta_c = 1e-8;
        let mut delta_w = if delta_w_last == 0.0 { 0.0 } else { (delta_w_last / 3.0).max(1e-12) };
        let mut dir = None;
        for _attempt in 0..40 {
            assemble_kkt_triplets(&snlp, &st, delta_w, delta_c, &mut ws);
            match sym.factor(&ws.tri) {
                Ok(inertia) if inertia.pos == n && inertia.neg == me + mi => {
                    dir = Some(());
                    break;
                }
                Ok(_) | Err(_) => {
                    delta_w = if delta_w == 0.0 { 1e-8 } else { delta_w * 10.0 };
                    if delta_w > 1e14 {
                        break;
                    }
                }
            }
        }
        if dir.is_none() {
            status = IpmStatus::NumericFailure(format!(
                "could not obtain correct inertia at iteration {iter}"
            ));
            iterations = iter;
            break;
        }
        delta_w_last = delta_w;

        // --- Newton direction -------------------------------------------
        let mut rhs = vec![0.0; n + me + mi];
        // x-block: primal form of the dual residual
        for i in 0..n {
            let mut v = res.rx[i] + st.zl[i] - st.zu[i];
            if snlp.lb[i].is_finite() {
                v -= st.mu / (st.x[i] - snlp.lb[i]);
            }
            if snlp.ub[i].is_finite() {
                v += st.mu / (snlp.ub[i] - st.x[i]);
            }
            rhs[i] = -v;
        }
        for j in 0..me {
            rhs[n + j] = -res.re[j];
        }
        for j in 0..mi {
            rhs[n + me + j] = st.mu / st.w[j] - ws.c_vals[j];
        }
        let mut sol = vec![0.0; rhs.len()];
        sym.solve(&rhs, &mut sol, 2);

        let mut dx: Vec<f64> = sol[..n].to_vec();
        let mut dy: Vec<f64> = sol[n..n + me].iter().map(|&q| -q).collect();
        let mut dw: Vec<f64> = sol[n + me..].iter().map(|&q| -q).collect();
        let mut ds: Vec<f64> = (0..mi)
            .map(|j| snlp.inequalities[j].dir_deriv(&st.x, &dx) + res.ri[j])
            .collect();
        let mut dzl = vec![0.0; n];
        let mut dzu = vec![0.0; n];
        bound_dual_steps(&snlp, &st, &dx, &mut dzl, &mut dzu);

        // --- fraction to boundary ----------------------------------------
        let tau = 0.99f64.max(1.0 - st.mu);
        let a_pr = primal_alpha(&snlp, &st, tau, &dx, &ds);
        let mut a_du = dual_alpha(&snlp, &st, tau, &dw, &dzl, &dzu);

        // --- l1 merit line search ----------------------------------------
        // exact-penalty weight from the step's own multiplier estimates;
        // the current y/w start at zero on cold starts and would let the
        // objective term veto any violation-reducing step
        let mut mult_bound = inf_norm(&st.y).max(inf_norm(&st.w));
        for j in 0..me {
            mult_bound = mult_bound.max((st.y[j] + dy[j]).abs());
        }
        for j in 0..mi {
            mult_bound = mult_bound.max((st.w[j] + dw[j]).abs());
        }
        penalty = penalty.max(2.0 * mult_bound).min(1e10);
        let viol0 = l1_violation(&res.re, &res.ri);
        let phi0 = merit(&snlp, &st.x, &st.s, st.mu, penalty, viol0);
        let mut dphi = snlp.objective.quad.dir_deriv(&st.x, &dx);
        for a in &snlp.objective.atoms {
            // directional derivative of the atom via its gradient
            let mut g = vec![0.0; n];
            a.add_gradient(&st.x, 1.0, &mut g);
            dphi += g.iter().zip(&dx).map(|(gi, di)| gi * di).sum::<f64>();
        }
        for j in 0..mi {
            dphi -= st.mu / st.s[j] * ds[j];
        }
        for i in 0..n {
            if snlp.lb[i].is_finite() {
                dphi -= st.mu / (st.x[i] - snlp.lb[i]) * dx[i];
            }
            if snlp.ub[i].is_finite() {
                dphi += st.mu / (snlp.ub[i] - st.x[i]) * dx[i];
            }
        }
        dphi -= penalty * viol0;

        let mut alpha = a_pr;
        let mut accepted = false;
        let mut soc_used = false;
        let mut soc_tried = false;
        let mut xt = vec![0.0; n];
        let mut stt = vec![0.0; mi];
        let mut he = Vec::new();
        let mut ce = Vec::new();
        while alpha > 1e-12 {
            for i in 0..n {
                xt[i] = st.x[i] + alpha * dx[i];
            }
            for j in 0..mi {
                stt[j] = st.s[j] + alpha * ds[j];
            }
            snlp.eval_equalities(&xt, &mut he);
            snlp.eval_inequalities(&xt, &mut ce);
            let violt = l1_trial_violation(&he, &ce, &stt);
            let phit = merit(&snlp, &xt, &stt, st.mu, penalty, violt);
            let target = if dphi < 0.0 { phi0 + 1e-4 * alpha * dphi } else { phi0 + 1e-12 * phi0.abs() };
            if phit <= target {
                accepted = true;
                break;
            }
            // Second-order correction: when even the largest step fails to
            // reduce the violation, curvature of the constraints (not a bad
            // direction) is usually to blame -- quadratic rows grow the
            // merit like alpha^2*|d|^2, which caps plain backtracking at
            // alpha ~ viol/|d|^2 and stalls progress. Re-solving against the
            // trial-point residuals folds that second-order error into the
            // step; the factorization is reused, so the extra cost is one
            // backsolve.
            if !soc_tried && alpha == a_pr && violt >= viol0 {
                soc_tried = true;
                let mut rhs_soc = rhs.clone();
                for j in 0..me {
                    rhs_soc[n + j] = -(alpha * res.re[j] + he[j]);
                }
                for j in 0..mi {
                    let r_soc = alpha * res.ri[j] + (ce[j] - stt[j]);
                    rhs_soc[n + me + j] = -r_soc + st.mu / st.w[j] - st.s[j];
                }
                let mut sol_soc = vec![0.0; rhs_soc.len()];
                sym.solve(&rhs_soc, &mut sol_soc, 2);
                let dx_soc = &sol_soc[..n];
                let dw_soc: Vec<f64> = sol_soc[n + me..].iter().map(|&q| -q).collect();
                // slack steps from the (unchanged) complementarity rows
                let ds_soc: Vec<f64> = (0..mi)
                    .map(|j| st.mu / st.w[j] - st.s[j] - st.s[j] / st.w[j] * dw_soc[j])
                    .collect();
                let a_soc = primal_alpha(&snlp, &st, tau, dx_soc, &ds_soc);
                for i in 0..n {
                    xt[i] = st.x[i] + a_soc * dx_soc[i];
                }
                for j in 0..mi {
                    stt[j] = st.s[j] + a_soc * ds_soc[j];
                }
                snlp.eval_equalities(&xt, &mut he);
                snlp.eval_inequalities(&xt, &mut ce);
                let viol_soc = l1_trial_violation(&he, &ce, &stt);
                let phi_soc = merit(&snlp, &xt, &stt, st.mu, penalty, viol_soc);
                let target_soc = if dphi < 0.0 {
                    phi0 + 1e-4 * a_soc * dphi
                } else {
                    phi0 + 1e-12 * phi0.abs()
                };
                if phi_soc <= target_soc {
                    dx.copy_from_slice(dx_soc);
                    for j in 0..me {
                        dy[j] = -sol_soc[n + j];
                    }
                    dw = dw_soc;
                    ds = ds_soc;
                    bound_dual_steps(&snlp, &st, &dx, &mut dzl, &mut dzu);
                    a_du = dual_alpha(&snlp, &st, tau, &dw, &dzl, &dzu);
                    alpha = a_soc;
                    accepted = true;
                    soc_used = true;
                    break;
                }
            }
            alpha *= 0.5;
        }

        log::trace!(
            "ipm it={iter} mu={:.2e} e_pr={:.3e} e_du={:.3e} comp={:.3e} alpha={:.2e} acc={} soc={} pen={:.2e} dphi={:.3e} apr={:.2e}",
            st.mu, e_pr, e_dual, res.comp0, alpha, accepted, soc_used, penalty, dphi, a_pr
        );
        if !accepted {
            // Line search failed: restore feasibility or declare a stall.
            if e_pr > 10.0 * opts.tol && opts.allow_restoration && restorations < 2 {
                restorations += 1;
                match restore_feasibility(nlp, &sc, &snlp, &st, opts) {
                    RestoreOutcome::Restored(xr) => {
                        st.x = xr;
                        push_inside(&mut st.x, &snlp.lb, &snlp.ub, 1e-6);
                        snlp.eval_inequalities(&st.x, &mut ws.c_vals);
                        st.mu = st.mu.max(1e-6);
                        for j in 0..mi {
                            st.s[j] = ws.c_vals[j].max(1e-8);
                            st.w[j] = (st.mu / st.s[j]).clamp(1e-10, 1e10);
                        }
                        for i in 0..n {
                            if snlp.lb[i].is_finite() {
                                st.zl[i] = (st.mu / (st.x[i] - snlp.lb[i])).clamp(1e-10, 1e10);
                            }
                            if snlp.ub[i].is_finite() {
                                st.zu[i] = (st.mu / (snlp.ub[i] - st.x[i])).clamp(1e-10, 1e10);
                            }
                        }
                        continue;
                    }
                    RestoreOutcome::Infeasible(rows) => {
                        status = IpmStatus::LocallyInfeasible(rows);
                        iterations = iter;
                        break;
                    }
                }
            }
            stalls += 1;
            if st.mu > opts.mu_target && stalls <= 6 {
                st.mu = opts.mu_target.max(st.mu * 0.1);
                continue;
            }
            status = IpmStatus::Stalled;
            iterations = iter;
            break;
        }

        // --- accept step ---------------------------------------------------
        for i in 0..n {
            st.x[i] += alpha * dx[i];
            st.zl[i] = (st.zl[i] + a_du * dzl[i]).max(0.0);
            st.zu[i] = (st.zu[i] + a_du * dzu[i]).max(0.0);
        }
        for j in 0..mi {
            st.s[j] += alpha * ds[j];
            st.w[j] = (st.w[j] + a_du * dw[j]).max(1e-16);
        }
        for j in 0..me {
            st.y[j] += a_du * dy[j];
        }
        snlp.eval_inequalities(&st.x, &mut ws.c_vals);
    }

    // Return the best iterate seen if we did not converge at the last one.
    let final_st = match status {
        IpmStatus::Converged => st,
        _ => best.map(|(_, b)| b).unwrap_or(st),
    };
    finish(nlp, &snlp, &sc, final_st, status, iterations, &mut ws)
}

fn clone_state(st: &State) -> State {
    State {
        x: st.x.clone(),
        s: st.s.clone(),
        y: st.y.clone(),
        w: st.w.clone(),
        zl: st.zl.clone(),
        zu: st.zu.clone(),
        mu: st.mu,
    }
}

fn merit(nlp: &Nlp, x: &[f64], s: &[f64], mu: f64, penalty: f64, viol: f64) -> f64 {
    let mut phi = nlp.objective.eval(x) + penalty * viol;
    for &sj in s {
        phi -= mu * sj.ln();
    }
    for i in 0..x.len() {
        if nlp.lb[i].is_finite() {
            phi -= mu * (x[i] - nlp.lb[i]).ln();
        }
        if nlp.ub[i].is_finite() {
            phi -= mu * (nlp.ub[i] - x[i]).ln();
        }
    }
    phi
}

fn l1_violation(re: &[f64], ri: &[f64]) -> f64 {
    re.iter().map(|v| v.abs()).sum::<f64>() + ri.iter().map(|v| v.abs()).sum::<f64>()
}

fn l1_trial_violation(he: &[f64], ce: &[f64], s: &[f64]) -> f64 {
    he.iter().map(|v| v.abs()).sum::<f64>()
        + ce.iter().zip(s).map(|(&c, &sj)| (c - sj).abs()).sum::<f64>()
}

/// Largest step along `(dx, ds)` keeping slacks and bound gaps at least a
/// `1 - tau` fraction of their current size.
fn primal_alpha(nlp: &Nlp, st: &State, tau: f64, dx: &[f64], ds: &[f64]) -> f64 {
    let mut a: f64 = 1.0;
    for j in 0..ds.len() {
        if ds[j] < 0.0 {
            a = a.min(-tau * st.s[j] / ds[j]);
        }
    }
    for i in 0..dx.len() {
        if nlp.lb[i].is_finite() && dx[i] < 0.0 {
            a = a.min(-tau * (st.x[i] - nlp.lb[i]) / dx[i]);
        }
        if nlp.ub[i].is_finite() && dx[i] > 0.0 {
            a = a.min(tau * (nlp.ub[i] - st.x[i]) / dx[i]);
        }
    }
    a
}

/// Largest step along the dual directions keeping `w`, `zl`, `zu` positive.
fn dual_alpha(nlp: &Nlp, st: &State, tau: f64, dw: &[f64], dzl: &[f64], dzu: &[f64]) -> f64 {
    let mut a: f64 = 1.0;
    for j in 0..dw.len() {
        if dw[j] < 0.0 {
            a = a.min(-tau * st.w[j] / dw[j]);
        }
    }
    for i in 0..dzl.len() {
        if dzl[i] < 0.0 && st.zl[i] > 0.0 {
            a = a.min(-tau * st.zl[i] / dzl[i]);
        }
        if dzu[i] < 0.0 && st.zu[i] > 0.0 {
            a = a.min(-tau * st.zu[i] / dzu[i]);
        }
    }
    a.min(1.0)
}

/// Newton steps for the bound multipliers implied by a primal step `dx`.
fn bound_dual_steps(nlp: &Nlp, st: &State, dx: &[f64], dzl: &mut [f64], dzu: &mut [f64]) {
    for i in 0..dx.len() {
        dzl[i] = 0.0;
        dzu[i] = 0.0;
        if nlp.lb[i].is_finite() {
            let g = st.x[i] - nlp.lb[i];
            dzl[i] = st.mu / g - st.zl[i] - st.zl[i] / g * dx[i];
        }
        if nlp.ub[i].is_finite() {
            let g = nlp.ub[i] - st.x[i];
            dzu[i] = st.mu / g - st.zu[i] + st.zu[i] / g * dx[i];
        }
    }
}

/// Move `x` strictly inside its bounds. `pad_rel` controls how far: cold
/// starts use a generous pad, warm starts a tiny one so good points are kept.
fn push_inside(x: &mut [f64], lb: &[f64], ub: &[f64], pad_rel: f64) {
    for i in 0..x.len() {
        let (l, u) = (lb[i], ub[i]);
        if l.is_finite() && u.is_finite() {
            let pad = (pad_rel * (u - l)).min(pad_rel * (1.0 + l.abs().max(u.abs())));
            x[i] = x[i].clamp(l + pad, u - pad);
        } else if l.is_finite() {
            x[i] = x[i].max(l + pad_rel * (1.0 + l.abs()));
        } else if u.is_finite() {
            x[i] = x[i].min(u - pad_rel * (1.0 + u.abs()));
        }
        if !x[i].is_finite() {
            x[i] = 0.0;
        }
    }
}

fn assemble_kkt_triplets(nlp: &Nlp, st: &State, delta_w: f64, delta_c: f64, ws: &mut Workspace) {
    let n = nlp.n();
    let me = nlp.equalities.len();
    let tri = &mut ws.tri;
    tri.clear();
    // Hessian of the Lagrangian: f - y.h - w.c
    nlp.objective.add_hessian(&st.x, 1.0, tri);
    for (j, e) in nlp.equalities.iter().enumerate() {
        if st.y[j] != 0.0 {
            e.add_hessian(-st.y[j], tri);
        }
    }
    for (j, e) in nlp.inequalities.iter().enumerate() {
        if st.w[j] != 0.0 {
            e.add_hessian(-st.w[j], tri);
        }
    }
    // bound barrier curvature + primal regularization
    for i in 0..n {
        let mut d = delta_w;
        if nlp.lb[i].is_finite() {
            d += st.zl[i] / (st.x[i] - nlp.lb[i]);
        }
        if nlp.ub[i].is_finite() {
            d += st.zu[i] / (nlp.ub[i] - st.x[i]);
        }
        tri.push((i, i, d));
    }
    for (j, e) in nlp.equalities.iter().enumerate() {
        e.add_jacobian_row(&st.x, n + j, tri);
        tri.push((n + j, n + j, -delta_c));
    }
    for (j, e) in nlp.inequalities.iter().enumerate() {
        e.add_jacobian_row(&st.x, n + me + j, tri);
        tri.push((n + me + j, n + me + j, -(st.s[j] / st.w[j] + delta_c)));
    }
}

enum RestoreOutcome {
    Restored(Vec<f64>),
    Infeasible(Vec<(String, f64)>),
}

/// Elastic-mode restoration: minimize the sum of elastic variables that
/// absorb all constraint violations, with a small proximal term on `x`.
fn restore_feasibility(
    orig: &Nlp,
    sc: &Scaling,
    snlp: &Nlp,
    st: &State,
    opts: &IpmOptions,
) -> RestoreOutcome {
    let n = snlp.n();
    let me = snlp.equalities.len();
    let mi = snlp.inequalities.len();
    let mut el = Nlp {
        var_names: snlp.var_names.clone(),
        lb: snlp.lb.clone(),
        ub: snlp.ub.clone(),
        x0: st.x.clone(),
        ..Default::default()
    };
    let mut he = Vec::new();
    let mut ce = Vec::new();
    snlp.eval_equalities(&st.x, &mut he);
    snlp.eval_inequalities(&st.x, &mut ce);

    let mut obj = crate::expr::ObjExpr::default();
    // proximal tether: keeps the restored point near the iterate
    for i in 0..n {
        let wgt = 1e-4 / (1.0 + st.x[i].abs()).powi(2);
        obj.quad.quad(i, i, wgt);
        obj.quad.lin(i, -2.0 * wgt * st.x[i]);
        obj.quad.add_const(wgt * st.x[i] * st.x[i]);
    }
    let mut var_block = snlp.blocks.as_ref().map(|b| b.var_block.clone());
    let mut eqs = Vec::with_capacity(me);
    for (j, e) in snlp.equalities.iter().enumerate() {
        // both sides start strictly interior so fraction-to-boundary cannot
        // strangle the first Newton steps
        let p = el.add_var(format!("el.p[{j}]"), 0.0, f64::INFINITY, (-he[j]).max(0.0) + 1.0);
        let nn = el.add_var(format!("el.n[{j}]"), 0.0, f64::INFINITY, he[j].max(0.0) + 1.0);
        obj.quad.lin(p, 1.0).lin(nn, 1.0);
        let mut row = e.clone();
        row.lin(p, 1.0).lin(nn, -1.0);
        eqs.push(row);
        if let (Some(vb), Some(b)) = (var_block.as_mut(), snlp.blocks.as_ref()) {
            vb.push(b.eq_block[j]);
            vb.push(b.eq_block[j]);
        }
    }
    let mut ineqs = Vec::with_capacity(mi);
    for (j, e) in snlp.inequalities.iter().enumerate() {
        let q = el.add_var(format!("el.q[{j}]"), 0.0, f64::INFINITY, (-ce[j]).max(0.0) + 1.0);
        obj.quad.lin(q, 1.0);
        let mut row = e.clone();
        row.lin(q, 1.0);
        ineqs.push(row);
        if let (Some(vb), Some(b)) = (var_block.as_mut(), snlp.blocks.as_ref()) {
            vb.push(b.ineq_block[j]);
        }
    }
    for (j, row) in eqs.into_iter().enumerate() {
        el.add_equality(snlp_eq_name(orig, j), row);
    }
    for (j, row) in ineqs.into_iter().enumerate() {
        el.add_inequality(snlp_ineq_name(orig, j), row);
    }
    el.objective = obj;
    el.blocks = snlp.blocks.as_ref().map(|b| Blocks {
        n_blocks: b.n_blocks,
        var_block: var_block.unwrap(),
        eq_block: b.eq_block.clone(),
        ineq_block: b.ineq_block.clone(),
    });

    let sub_opts = IpmOptions {
        tol: (opts.tol * 10.0).max(1e-8),
        mu_target: 1e-9,
        mu_init: 1e-2,
        max_iter: 200,
        allow_restoration: false,
    };
    let r = solve(&el, None, &sub_opts);
    log::trace!(
        "ipm restoration: status={:?} iters={} elastic={:.3e}",
        r.status,
        r.iterations,
        r.x[n..].iter().sum::<f64>()
    );
    if !r.status.is_usable() {
        return RestoreOutcome::Infeasible(vec![(
            "restoration solve failed".to_string(),
            f64::NAN,
        )]);
    }
    // total elastic mass = residual violation (scaled)
    let elastic: f64 = r.x[n..].iter().sum();
    if elastic <= 1e-6 {
        return RestoreOutcome::Restored(r.x[..n].to_vec());
    }
    // the elastic mass is in scaled units; only rows still violated in
    // unscaled units count as evidence of infeasibility
    let xr = &r.x[..n];
    let mut viol: Vec<(String, f64)> = Vec::new();
    for (j, e) in orig.equalities.iter().enumerate() {
        let v = e.eval(xr).abs();
        if v * sc.eq[j] > 1e-6 {
            viol.push((orig.eq_names[j].clone(), v));
        }
    }
    for (j, e) in orig.inequalities.iter().enumerate() {
        let v = e.eval(xr);
        if v * sc.ineq[j] < -1e-6 {
            viol.push((orig.ineq_names[j].clone(), -v));
        }
    }
    if viol.is_empty() {
        return RestoreOutcome::Restored(r.x[..n].to_vec());
    }
    viol.sort_by(|a, b| b.1.total_cmp(&a.1));
    viol.truncate(12);
    RestoreOutcome::Infeasible(viol)
}

fn snlp_eq_name(orig: &Nlp, j: usize) -> String {
    orig.eq_names.get(j).cloned().unwrap_or_else(|| format!("eq[{j}]"))
}

fn snlp_ineq_name(orig: &Nlp, j: usize) -> String {
    orig.ineq_names.get(j).cloned().unwrap_or_else(|| format!("ineq[{j}]"))
}

fn finish(
    orig: &Nlp,
    snlp: &Nlp,
    sc: &Scaling,
    st: State,
    status: IpmStatus,
    iterations: usize,
    ws: &mut Workspace,
) -> IpmResult {
    let res = eval_residuals(snlp, &st, ws);
    let kkt_error = inf_norm(&res.rx).max(inf_norm(&res.re)).max(inf_norm(&res.ri)).max(res.comp0);

    let mut hv = Vec::new();
    let mut cv = Vec::new();
    orig.eval_equalities(&st.x, &mut hv);
    orig.eval_inequalities(&st.x, &mut cv);
    let mut viol = inf_norm(&hv);
    for &c in &cv {
        viol = viol.max((-c).max(0.0));
    }
    for i in 0..orig.n() {
        if orig.lb[i].is_finite() {
            viol = viol.max(orig.lb[i] - st.x[i]);
        }
        if orig.ub[i].is_finite() {
            viol = viol.max(st.x[i] - orig.ub[i]);
        }
    }

    let y = st.y.iter().zip(&sc.eq).map(|(&v, &s)| v * s / sc.f).collect();
    let w = st.w.iter().zip(&sc.ineq).map(|(&v, &s)| v * s / sc.f).collect();
    let zl = st.zl.iter().map(|&v| v / sc.f).collect();
    let zu = st.zu.iter().map(|&v| v / sc.f).collect();
    IpmResult {
        objective: orig.objective.eval(&st.x),
        x: st.x,
        s: st.s,
        y,
        w,
        zl,
        zu,
        status,
        iterations,
        kkt_error,
        constraint_violation: viol,
        complementarity: res.comp0,
        mu: st.mu,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::CdAtom;
    use approx::assert_relative_eq;

    fn free() -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    #[test]
    fn equality_qp() {
        // min x^2 + y^2 s.t. x + y = 1 -> (0.5, 0.5), multiplier 1
        let mut nlp = Nlp::default();
        let (l, u) = free();
        let x = nlp.add_var("x", l, u, 0.0);
        let y = nlp.add_var("y", l, u, 0.0);
        nlp.objective.quad.quad(x, x, 1.0).quad(y, y, 1.0);
        let mut e = QuadExpr::constant(-1.0);
        e.lin(x, 1.0).lin(y, 1.0);
        nlp.add_equality("sum", e);
        let r = solve(&nlp, None, &IpmOptions::default());
        assert_eq!(r.status, IpmStatus::Converged);
        assert_relative_eq!(r.x[0], 0.5, epsilon = 1e-7);
        assert_relative_eq!(r.x[1], 0.5, epsilon = 1e-7);
        assert_relative_eq!(r.y[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn active_upper_bound() {
        // min (x-2)^2 on [0, 1] -> x = 1, upper multiplier 2
        let mut nlp = Nlp::default();
        let x = nlp.add_var("x", 0.0, 1.0, 0.5);
        nlp.objective.quad.quad(x, x, 1.0).lin(x, -4.0).add_const(4.0);
        let r = solve(&nlp, None, &IpmOptions::default());
        assert_eq!(r.status, IpmStatus::Converged);
        assert_relative_eq!(r.x[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(r.zu[0], 2.0, epsilon = 1e-4);
    }

    #[test]
    fn general_inequality() {
        // min x^2 + y^2 s.t. x + y >= 1
        let mut nlp = Nlp::default();
        let (l, u) = free();
        let x = nlp.add_var("x", l, u, 2.0);
        let y = nlp.add_var("y", l, u, 2.0);
        nlp.objective.quad.quad(x, x, 1.0).quad(y, y, 1.0);
        let mut c = QuadExpr::constant(-1.0);
        c.lin(x, 1.0).lin(y, 1.0);
        nlp.add_inequality("halfspace", c);
        let r = solve(&nlp, None, &IpmOptions::default());
        assert_eq!(r.status, IpmStatus::Converged);
        assert_relative_eq!(r.x[0], 0.5, epsilon = 1e-6);
        assert_relative_eq!(r.w[0], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn linear_program_vertex() {
        // min -x - 2y s.t. x + y <= 1, x, y >= 0 -> (0, 1), objective -2
        let mut nlp = Nlp::default();
        let x = nlp.add_var("x", 0.0, f64::INFINITY, 0.3);
        let y = nlp.add_var("y", 0.0, f64::INFINITY, 0.3);
        nlp.objective.quad.lin(x, -1.0).lin(y, -2.0);
        let mut c = QuadExpr::constant(1.0);
        c.lin(x, -1.0).lin(y, -1.0);
        nlp.add_inequality("cap", c);
        let r = solve(&nlp, None, &IpmOptions::default());
        assert_eq!(r.status, IpmStatus::Converged);
        assert_relative_eq!(r.objective, -2.0, epsilon = 1e-6);
        assert_relative_eq!(r.x[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn nonconvex_box() {
        // min -x^2 on [-1, 2] -> x = 2 from a start right of the origin
        let mut nlp = Nlp::default();
        let x = nlp.add_var("x", -1.0, 2.0, 0.5);
        nlp.objective.quad.quad(x, x, -1.0);
        let r = solve(&nlp, None, &IpmOptions::default());
        assert_eq!(r.status, IpmStatus::Converged);
        assert_relative_eq!(r.x[0], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn cobb_douglas_budget() {
        // max x^0.3 y^0.7 s.t. 2x + y = 10 -> x = 1.5, y = 7
        let mut nlp = Nlp::default();
        let x = nlp.add_var("x", 0.0, f64::INFINITY, 1.0);
        let y = nlp.add_var("y", 0.0, f64::INFINITY, 1.0);
        nlp.objective.atoms.push(CdAtom {
            coef: -1.0,
            var1: x,
            off1: 0.0,
            var2: y,
            off2: 0.0,
            alpha: 0.3,
        });
        let mut e = QuadExpr::constant(-10.0);
        e.lin(x, 2.0).lin(y, 1.0);
        nlp.add_equality("budget", e);
        let r = solve(&nlp, None, &IpmOptions::default());
        assert_eq!(r.status, IpmStatus::Converged);
        assert_relative_eq!(r.x[0], 1.5, epsilon = 1e-5);
        assert_relative_eq!(r.x[1], 7.0, epsilon = 1e-5);
    }

    #[test]
    fn infeasible_bounds_vs_row() {
        // x >= 2 from a row, but ub = 1: locally infeasible
        let mut nlp = Nlp::default();
        let x = nlp.add_var("x", 0.0, 1.0, 0.5);
        let mut c = QuadExpr::constant(-2.0);
        c.lin(x, 1.0);
        nlp.add_inequality("floor", c);
        let r = solve(&nlp, None, &IpmOptions::default());
        match r.status {
            IpmStatus::LocallyInfeasible(rows) => {
                assert!(rows.iter().any(|(n, _)| n == "floor"));
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn warm_start_converges_fast() {
        let mut nlp = Nlp::default();
        let (l, u) = free();
        let x = nlp.add_var("x", l, u, 0.0);
        let y = nlp.add_var("y", l, u, 0.0);
        nlp.objective.quad.quad(x, x, 2.0).quad(y, y, 1.0).quad(x, y, 0.5);
        let mut e = QuadExpr::constant(-3.0);
        e.lin(x, 1.0).lin(y, 2.0);
        nlp.add_equality("line", e);
        let cold = solve(&nlp, None, &IpmOptions::default());
        assert_eq!(cold.status, IpmStatus::Converged);
        let warm = solve(
            &nlp,
            Some(WarmStart { x: &cold.x, y: Some(&cold.y), w: None, zl: None, zu: None }),
            &IpmOptions { mu_init: 1e-8, ..Default::default() },
        );
        assert_eq!(warm.status, IpmStatus::Converged);
        assert!(warm.iterations <= cold.iterations);
        assert_relative_eq!(warm.x[0], cold.x[0], epsilon = 1e-6);
    }
}
