//! Relaxation solver for the single-level tariff equilibrium.
//!
//! The three regulator objectives are combined with positive weights into
//! one scalar objective ([`scalarize`]). The complementarity products are
//! relaxed to `slack * mult <= rho` and the resulting smooth NLP is solved
//! by the interior-point method ([`crate::ipm`]) while `rho` shrinks
//! geometrically toward zero, each solve warm-started from the previous one
//! ([`scholtes_solve`]). The final point is classified by recovered
//! equilibrium multipliers and summarized with the dispatch evaluators.
//!
//! Solutions are local: the relaxed NLPs are nonconvex (bilinear tariff ×
//! demand and slack × multiplier terms), so every report records its start
//! and schedule for replay.

use crate::dispatch::{self, DispatchError, DispatchSolution, ObjectiveBreakdown, TariffSchedule};
use crate::expr::{Nlp, ObjExpr};
use crate::ipm::{self, IpmOptions, IpmResult, IpmStatus, WarmStart};
use crate::mopec::{
    classify_stationarity, complementarity_violation, MopecError, NcpSystem, RelaxedPoint,
    StationarityReport, Window,
};
use crate::system::{Series, SystemModel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("weights must be positive, got {0:?}")]
    BadWeight([f64; 3]),
    #[error("invalid relaxation schedule: {0}")]
    BadSchedule(String),
    #[error("start point has {got} entries, system has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Mopec(#[from] MopecError),
    #[error("start-point dispatch failed: {0}")]
    Dispatch(#[from] DispatchError),
}

/// KKT/feasibility error a floor-iteration point must meet to count as
/// converged even when the inner solver reports a stall.
const FLOOR_TOL: f64 = 1e-6;

/// Geometric shrink schedule for the relaxation parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScholtesSchedule {
    pub rho_init: f64,
    /// Multiplier applied after each outer iteration.
    pub shrink: f64,
    /// Loop stops after solving at (or below) this value.
    pub rho_final: f64,
    pub max_outer: usize,
}

impl Default for ScholtesSchedule {
    fn default() -> Self {
        ScholtesSchedule { rho_init: 1.0, shrink: 0.1, rho_final: 1e-8, max_outer: 20 }
    }
}

impl ScholtesSchedule {
    pub fn validate(&self) -> Result<(), SolverError> {
        // equality makes a valid single-solve schedule
        if !(self.rho_init >= self.rho_final && self.rho_final > 0.0) {
            return Err(SolverError::BadSchedule(format!(
                "need rho_init >= rho_final > 0, got {} and {}",
                self.rho_init, self.rho_final
            )));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(SolverError::BadSchedule(format!("shrink {} not in (0, 1)", self.shrink)));
        }
        if self.max_outer == 0 {
            return Err(SolverError::BadSchedule("max_outer is zero".into()));
        }
        Ok(())
    }

    /// Number of solves the schedule performs when none fail early.
    pub fn planned_iterations(&self) -> usize {
        let mut rho = self.rho_init;
        let mut n = 1;
        while rho > self.rho_final * (1.0 + 1e-12) && n < self.max_outer {
            rho = (rho * self.shrink).max(self.rho_final);
            n += 1;
        }
        n
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OuterIterate {
    pub rho: f64,
    pub scalarized: f64,
    /// Worst violation among equalities, inequalities, and bounds.
    pub feasibility: f64,
    /// Largest pair product.
    pub complementarity: f64,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub enum SolverStatus {
    Converged,
    /// The inner solver's restoration phase certified local infeasibility at
    /// the given outer iteration; rows carry the violated constraints.
    Infeasible { outer: usize, rows: Vec<(String, f64)> },
    /// The final inner solve stopped on its iteration or stall limits.
    MaxIter,
    NumericFailure { outer: usize, message: String },
}

impl SolverStatus {
    pub fn is_converged(&self) -> bool {
        matches!(self, SolverStatus::Converged)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverReport {
    pub weights: [f64; 3],
    pub schedule: ScholtesSchedule,
    /// Start point, recorded for replay.
    pub start: Vec<f64>,
    pub iterates: Vec<OuterIterate>,
    pub final_point: RelaxedPoint,
    /// The three objective components at the final point.
    pub objective_components: [f64; 3],
    /// Weighted sum of the components at the final point.
    pub scalarized: f64,
    /// Dispatch-level summary of the extracted solution; only meaningful
    /// (and only computed) for converged runs.
    pub objective_breakdown: Option<ObjectiveBreakdown>,
    pub stationarity: Option<StationarityReport>,
    pub status: SolverStatus,
}

/// Weighted sum of the three objective components. All weights must be
/// strictly positive, otherwise the sweep could park on an unbounded or
/// degenerate subproblem.
pub fn scalarize(ncp: &NcpSystem, weights: [f64; 3]) -> Result<ObjExpr, SolverError> {
    if weights.iter().any(|w| !(*w > 0.0)) {
        return Err(SolverError::BadWeight(weights));
    }
    let mut obj = ObjExpr::default();
    for k in 0..3 {
        obj.add_scaled(&ncp.objectives[k], weights[k]);
    }
    Ok(obj)
}

/// One smooth solve at fixed `rho`. `nlp` must be the system's NLP with the
/// scalarized objective installed; the product-row constants are rewritten
/// here before solving.
pub fn solve_relaxed_nlp(
    ncp: &NcpSystem,
    nlp: &mut Nlp,
    rho: f64,
    warm: Option<WarmStart<'_>>,
    opts: &IpmOptions,
) -> IpmResult {
    ncp.apply_rho(nlp, rho);
    ipm::solve(nlp, warm, opts)
}

/// The relaxation loop without any dispatch-level reporting: returns the
/// raw iterates, final point, and status. [`scholtes_solve`] wraps this
/// with solution extraction; tests drive it directly on hand-built systems.
pub fn scholtes_loop(
    ncp: &NcpSystem,
    weights: [f64; 3],
    schedule: &ScholtesSchedule,
    start: &[f64],
) -> Result<SolverReport, SolverError> {
    schedule.validate()?;
    if start.len() != ncp.nlp.n() {
        return Err(SolverError::Dimension { expected: ncp.nlp.n(), got: start.len() });
    }
    let mut nlp = ncp.nlp.clone();
    nlp.objective = scalarize(ncp, weights)?;
    nlp.x0 = start.to_vec();

    let mut rho = schedule.rho_init;
    let mut iterates: Vec<OuterIterate> = Vec::new();
    let status;
    let mut last: Option<IpmResult> = None;
    let mut floor_retry = false;
    loop {
        let at_floor = rho <= schedule.rho_final * (1.0 + 1e-12);
        // The barrier must not dwarf the relaxation width, or the first steps
        // push the near-complementary coordinates off the central path.
        let opts = IpmOptions {
            max_iter: 600,
            mu_init: if last.is_some() {
                (0.1 * rho).clamp(1e-9, 1e-2)
            } else {
                (0.1 * rho).clamp(1e-8, 1e-1)
            },
            ..Default::default()
        };
        let r = match &last {
            Some(p) => solve_relaxed_nlp(
                ncp,
                &mut nlp,
                rho,
                Some(WarmStart {
                    x: &p.x,
                    y: Some(&p.y),
                    w: Some(&p.w),
                    zl: Some(&p.zl),
                    zu: Some(&p.zu),
                }),
                &opts,
            ),
            None => solve_relaxed_nlp(ncp, &mut nlp, rho, None, &opts),
        };
        let (max_prod, _) = complementarity_violation(ncp, &r.x)?;
        log::debug!(
            "outer rho={:.3e} status={:?} inner={} kkt={:.3e} viol={:.3e} obj={:.6}",
            rho,
            r.status,
            r.iterations,
            r.kkt_error,
            r.constraint_violation,
            r.objective
        );
        let entry = OuterIterate {
            rho,
            scalarized: r.objective,
            feasibility: r.constraint_violation,
            complementarity: max_prod,
            inner_iterations: r.iterations,
        };
        match iterates.last_mut() {
            // floor retries continue the same outer iteration
            Some(prev) if prev.rho == rho => {
                let spent = prev.inner_iterations;
                *prev = entry;
                prev.inner_iterations += spent;
            }
            _ => iterates.push(entry),
        }
        let outer = iterates.len() - 1;
        match &r.status {
            IpmStatus::LocallyInfeasible(rows) => {
                status = SolverStatus::Infeasible { outer, rows: rows.clone() };
                last = Some(r);
                break;
            }
            IpmStatus::NumericFailure(m) => {
                status = SolverStatus::NumericFailure { outer, message: m.clone() };
                last = Some(r);
                break;
            }
            _ => {}
        }
        // At the floor the verdict rests on point quality, not on the inner
        // solver's own stopping label: a stall within tolerance is a success.
        let accepted = matches!(r.status, IpmStatus::Converged)
            || (r.status.is_usable()
                && r.kkt_error <= FLOOR_TOL
                && r.constraint_violation <= FLOOR_TOL
                && max_prod <= schedule.rho_final + FLOOR_TOL);
        last = Some(r);
        if at_floor {
            if accepted {
                status = SolverStatus::Converged;
                break;
            }
            if !floor_retry {
                floor_retry = true;
                continue;
            }
            status = SolverStatus::MaxIter;
            break;
        }
        if iterates.len() >= schedule.max_outer {
            status = SolverStatus::MaxIter;
            break;
        }
        rho = (rho * schedule.shrink).max(schedule.rho_final);
    }

    let last = last.expect("at least one solve ran");
    let final_point = RelaxedPoint { x: last.x, y: last.y, w: last.w, zl: last.zl, zu: last.zu };
    let objective_components = ncp.objective_values(&final_point.x);
    let scalarized = (0..3).map(|k| weights[k] * objective_components[k]).sum();
    // bi-activity threshold: on the relaxed boundary both coordinates sit
    // near sqrt(rho), so the tolerance must be at least that wide
    let stationarity = if status.is_converged() {
        let tol = (schedule.rho_final.sqrt() * 10.0).max(1e-6);
        classify_stationarity(ncp, &final_point, tol).ok()
    } else {
        None
    };
    Ok(SolverReport {
        weights,
        schedule: schedule.clone(),
        start: start.to_vec(),
        iterates,
        final_point,
        objective_components,
        scalarized,
        objective_breakdown: None,
        stationarity,
        status,
    })
}

/// Feasible-leaning start: tariffs at the average-tariff cap (clamped to
/// the per-bus bounds), demand at its closed forms there, dispatch primals
/// from an exact dispatch solve, and every equilibrium multiplier at one.
pub fn default_start(system: &SystemModel, ncp: &NcpSystem) -> Result<Vec<f64>, SolverError> {
    let lay = &ncp.layout;
    let mut values = Vec::with_capacity(lay.nb);
    for bus in &system.buses {
        let v = system.policy.avg_tariff_cap.clamp(bus.tariff_min, bus.tariff_max);
        values.push(Series(vec![vec![v; lay.hours]; lay.days]));
    }
    let tariff = TariffSchedule { structure: ncp.structure, values };
    let demand = dispatch::tariff_demand(system, &tariff)?;
    let ll = dispatch::solve_ll(&dispatch::build_ll(system, &tariff, &demand)?)?;
    let mut x = crate::mopec::embed_dispatch(ncp, system, &tariff, &demand, &ll)?;
    for r in 0..lay.days {
        for t in 0..lay.hours {
            for b in 0..lay.nb {
                x[lay.lam_p(r, t, b)] = 1.0;
                x[lay.lam_q(r, t, b)] = 1.0;
                x[lay.mu_lo(r, t, b)] = 1.0;
                x[lay.mu_hi(r, t, b)] = 1.0;
            }
            for i in 0..lay.ng {
                x[lay.delta_lo(r, t, i)] = 1.0;
                x[lay.delta_hi(r, t, i)] = 1.0;
                x[lay.theta_lo(r, t, i)] = 1.0;
                x[lay.theta_hi(r, t, i)] = 1.0;
            }
            for l in 0..lay.nl {
                x[lay.beta(r, t, l)] = 1.0;
                x[lay.eta(r, t, l)] = 1.0;
            }
            x[lay.beta_ref(r, t)] = 1.0;
            x[lay.tau_lo(r, t)] = 1.0;
            x[lay.tau_hi(r, t)] = 1.0;
        }
    }
    for y in crate::system::Pollutant::ALL {
        for b in 0..lay.nb {
            x[lay.psi(y, b)] = 1.0;
        }
        x[lay.chi(y)] = 1.0;
    }
    Ok(x)
}

/// Full pipeline for one weight vector: start (given or default), the
/// relaxation loop, then extraction and dispatch-level evaluation of the
/// final point when it converged.
pub fn scholtes_solve(
    system: &SystemModel,
    ncp: &NcpSystem,
    weights: [f64; 3],
    schedule: &ScholtesSchedule,
    start: Option<Vec<f64>>,
) -> Result<SolverReport, SolverError> {
    let start = match start {
        Some(s) => s,
        None => default_start(system, ncp)?,
    };
    let mut report = scholtes_loop(ncp, weights, schedule, &start)?;
    if report.status.is_converged() {
        let (tariff, demand, dsol) = crate::mopec::extract_solution(ncp, system, &report.final_point.x)?;
        report.objective_breakdown =
            Some(dispatch::eval_objectives(system, &tariff, &demand, &dsol)?);
    }
    Ok(report)
}

/// Extracted reporting bundle for a converged run.
pub struct SolvedTariff {
    pub tariff: TariffSchedule,
    pub demand: Vec<Vec<crate::demand::IntervalProfile>>,
    pub dispatch: DispatchSolution,
}

/// Re-extract the tariff, demand, and dispatch quantities from a report's
/// final point.
pub fn extract(
    system: &SystemModel,
    ncp: &NcpSystem,
    report: &SolverReport,
) -> Result<SolvedTariff, SolverError> {
    let (tariff, demand, dispatch) =
        crate::mopec::extract_solution(ncp, system, &report.final_point.x)?;
    Ok(SolvedTariff { tariff, demand, dispatch })
}

#[derive(Debug, Clone, Serialize)]
pub struct ParetoPoint {
    pub weights: [f64; 3],
    /// The solve outcome; hard setup errors are recorded as strings so the
    /// sweep can continue.
    pub report: Option<SolverReport>,
    pub error: Option<String>,
    /// True when another converged point in the sweep weakly improves all
    /// three objective components and strictly improves one.
    pub dominated: bool,
}

/// One relaxation solve per weight vector over a shared assembly. Results
/// come back sorted by weight vector; converged entries are flagged (not
/// dropped) when another converged entry dominates their objective triple.
pub fn pareto_sweep(
    system: &SystemModel,
    ncp: &NcpSystem,
    weight_list: &[[f64; 3]],
    schedule: &ScholtesSchedule,
) -> Vec<ParetoPoint> {
    use rayon::prelude::*;
    let mut points: Vec<ParetoPoint> = weight_list
        .par_iter()
        .map(|&weights| match scholtes_solve(system, ncp, weights, schedule, None) {
            Ok(report) => ParetoPoint { weights, report: Some(report), error: None, dominated: false },
            Err(e) => ParetoPoint { weights, report: None, error: Some(e.to_string()), dominated: false },
        })
        .collect();
    points.sort_by(|a, b| {
        a.weights
            .iter()
            .zip(b.weights.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != std::cmp::Ordering::Equal)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let triples: Vec<Option<[f64; 3]>> = points
        .iter()
        .map(|p| {
            p.report
                .as_ref()
                .filter(|r| r.status.is_converged())
                .map(|r| r.objective_components)
        })
        .collect();
    for i in 0..points.len() {
        let Some(ti) = triples[i] else { continue };
        points[i].dominated = triples.iter().enumerate().any(|(j, tj)| {
            let Some(tj) = tj else { return false };
            j != i
                && tj.iter().zip(ti.iter()).all(|(a, b)| a <= b)
                && tj.iter().zip(ti.iter()).any(|(a, b)| a < b)
        });
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatch::TariffStructure;
    use crate::expr::QuadExpr;
    use crate::mopec::{assemble_kkt, BoundSide, CompPair, NcpLayout};
    use crate::system::Pollutant;
    use crate::testfix::two_bus;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// min (x-a)^2 + (y-b)^2 subject to 0 <= x perp y >= 0: the classic
    /// two-branch complementarity toy. Optimum value min(a^2, b^2).
    fn toy_mpec(a: f64, b: f64) -> NcpSystem {
        let mut nlp = Nlp::default();
        let x = nlp.add_var("x", 0.0, f64::INFINITY, a);
        let y = nlp.add_var("y", 0.0, f64::INFINITY, b);
        let mut prod = QuadExpr::constant(1.0);
        prod.quad(x, y, -1.0);
        nlp.add_inequality("cmp:xy", prod);
        let mut f0 = ObjExpr::default();
        f0.quad
            .quad(x, x, 1.0)
            .lin(x, -2.0 * a)
            .quad(y, y, 1.0)
            .lin(y, -2.0 * b)
            .add_const(a * a + b * b);
        NcpSystem::from_parts(
            nlp,
            vec![CompPair { name: "xy".into(), var: x, side: BoundSide::Lower, mult: y }],
            [f0, ObjExpr::default(), ObjExpr::default()],
            TariffStructure::Flat,
            0.09,
            NcpLayout::default(),
            0,
        )
        .unwrap()
    }

    #[test]
    fn scalarize_checks_weights_and_scales() {
        let ncp = toy_mpec(1.0, 1.0);
        assert!(scalarize(&ncp, [1.0, 0.0, 1.0]).is_err());
        assert!(scalarize(&ncp, [1.0, -2.0, 1.0]).is_err());
        let x = vec![0.3, 0.7];
        let one = scalarize(&ncp, [1.0, 1.0, 1.0]).unwrap().eval(&x);
        let two = scalarize(&ncp, [2.0, 2.0, 2.0]).unwrap().eval(&x);
        // positive homogeneity, exact for power-of-two factors
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn toy_mpec_picks_cheaper_branch() {
        let schedule = ScholtesSchedule::default();
        let ncp = toy_mpec(1.0, 1.0);
        let report = scholtes_loop(&ncp, [1.0, 1.0, 1.0], &schedule, &[1.0, 1.0]).unwrap();
        assert!(report.status.is_converged(), "{:?}", report.status);
        // rho: 1, 0.1, ..., 1e-8
        assert_eq!(report.iterates.len(), 9);
        for w in report.iterates.windows(2) {
            assert!(w[1].rho < w[0].rho);
            assert!(w[0].complementarity <= w[0].rho + 1e-7);
        }
        assert_relative_eq!(report.scalarized, 1.0, epsilon = 1e-6);
        let x = &report.final_point.x;
        // lands on one branch: exactly one coordinate near 1
        let on_x = (x[0] - 1.0).abs() < 1e-3 && x[1].abs() < 1e-3;
        let on_y = (x[1] - 1.0).abs() < 1e-3 && x[0].abs() < 1e-3;
        assert!(on_x || on_y, "x = {x:?}");
    }

    #[test]
    fn loose_relaxation_reaches_unconstrained_minimum() {
        // rho = 10 leaves x*y = 1 inactive, so the unconstrained optimum
        // (a, b) is feasible and the objective is zero
        let ncp = toy_mpec(1.0, 1.0);
        let bad = ScholtesSchedule { rho_init: 1.0, rho_final: 2.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let schedule = ScholtesSchedule { rho_init: 10.0, rho_final: 10.0, ..Default::default() };
        let report = scholtes_loop(&ncp, [1.0, 1.0, 1.0], &schedule, &[0.5, 0.5]).unwrap();
        assert_eq!(report.iterates.len(), 1);
        assert!(report.status.is_converged());
        assert!(report.scalarized.abs() < 1e-6, "{}", report.scalarized);
    }

    #[test]
    fn complementary_start_at_tiny_rho_is_single_shot() {
        let ncp = toy_mpec(2.0, 0.5);
        let schedule =
            ScholtesSchedule { rho_init: 1e-8, rho_final: 1e-8, shrink: 0.1, max_outer: 5 };
        // (0, 0.5) is the minimum of the x = 0 branch; a local method started
        // there must stay on that branch, and the degenerate schedule leaves
        // no room to escape through a loose relaxation
        let report = scholtes_loop(&ncp, [1.0, 1.0, 1.0], &schedule, &[0.0, 0.5]).unwrap();
        assert_eq!(report.iterates.len(), 1);
        assert!(report.status.is_converged(), "{:?}", report.status);
        assert_relative_eq!(report.scalarized, 4.0, epsilon = 1e-5);
        let x = &report.final_point.x;
        assert!(x[0].abs() < 1e-6 && (x[1] - 0.5).abs() < 1e-3, "x = {x:?}");
    }

    #[test]
    fn toy_family_matches_branch_enumeration() {
        let schedule = ScholtesSchedule::default();
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..10 {
            let a = rng.random_range(0.2..3.0);
            let b = rng.random_range(0.2..3.0);
            let ncp = toy_mpec(a, b);
            let report = scholtes_loop(&ncp, [1.0, 1.0, 1.0], &schedule, &[a, b]).unwrap();
            assert!(report.status.is_converged(), "a={a} b={b}: {:?}", report.status);
            let best = (a * a).min(b * b);
            assert!(
                (report.scalarized - best).abs() <= 1e-4 * (1.0 + best),
                "a={a} b={b}: got {}, branch best {best}",
                report.scalarized
            );
        }
    }

    #[test]
    fn deterministic_repeat() {
        let schedule = ScholtesSchedule::default();
        let ncp = toy_mpec(1.3, 0.8);
        let r1 = scholtes_loop(&ncp, [1.0, 1.0, 1.0], &schedule, &[1.0, 1.0]).unwrap();
        let r2 = scholtes_loop(&ncp, [1.0, 1.0, 1.0], &schedule, &[1.0, 1.0]).unwrap();
        assert_eq!(r1.iterates.len(), r2.iterates.len());
        for (a, b) in r1.iterates.iter().zip(r2.iterates.iter()) {
            assert_eq!(a.scalarized, b.scalarized);
            assert_eq!(a.inner_iterations, b.inner_iterations);
        }
        assert_eq!(r1.final_point.x, r2.final_point.x);
    }

    #[test]
    fn default_start_is_pair_feasible() {
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        let ncp = assemble_kkt(&sys, TariffStructure::Flat, 0.09).unwrap();
        let x = default_start(&sys, &ncp).unwrap();
        let (_, min_coord) = complementarity_violation(&ncp, &x).unwrap();
        assert!(min_coord >= 0.0);
        let lay = &ncp.layout;
        for b in 0..lay.nb {
            for t in 0..lay.hours {
                // avg cap 45 within [5, 100]
                assert_eq!(x[lay.pi(b, t)], 45.0);
            }
            assert!(x[lay.d_window(b, 0, Window::Peak)] > 0.0);
        }
        assert_eq!(x[lay.lam_p(0, 1, 1)], 1.0);
        assert_eq!(x[lay.psi(Pollutant::Co2, 0)], 1.0);
    }

    #[test]
    fn two_bus_flat_converges_and_checks_out() {
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        let ncp = assemble_kkt(&sys, TariffStructure::Flat, 0.09).unwrap();
        let schedule = ScholtesSchedule::default();
        let report = scholtes_solve(&sys, &ncp, [1.0, 1.0, 1.0], &schedule, None).unwrap();
        assert!(report.status.is_converged(), "{:?}", report.status);
        let (max_prod, min_coord) = complementarity_violation(&ncp, &report.final_point.x).unwrap();
        assert!(max_prod <= schedule.rho_final + FLOOR_TOL, "{max_prod:.3e}");
        assert!(min_coord >= -FLOOR_TOL);
        let out = extract(&sys, &ncp, &report).unwrap();
        out.tariff.validate(&sys).unwrap();
        // adequacy must hold at the solution
        let resid =
            dispatch::revenue_adequacy_residual(&sys, &out.tariff, &out.demand, &out.dispatch)
                .unwrap();
        let capital = sys.policy.capital_cost_daily().unwrap();
        assert!(resid.abs() <= 1e-6 * (1.0 + capital), "adequacy residual {resid:.3e}");
        // burden caps respected
        for b in 0..sys.n_buses() {
            let (spend, bound) = dispatch::energy_burden(&sys, &out.tariff, &out.demand, b);
            assert!(spend <= bound * (1.0 + 1e-6), "bus {b}: {spend} vs {bound}");
        }
        let breakdown = report.objective_breakdown.as_ref().unwrap();
        assert_relative_eq!(
            breakdown.f_ew,
            -report.objective_components[0],
            max_relative = 1e-5
        );
        assert!(report.stationarity.is_some());
    }

    #[test]
    fn pareto_sweep_sorts_flags_and_survives_failures() {
        let schedule = ScholtesSchedule::default();
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        let ncp = assemble_kkt(&sys, TariffStructure::Flat, 0.09).unwrap();
        let points = pareto_sweep(
            &sys,
            &ncp,
            &[[1.0, 5.0, 5.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]],
            &schedule,
        );
        assert_eq!(points.len(), 3);
        assert_eq!(points[0].weights, [1.0, 1.0, 1.0]);
        assert_eq!(points[1].weights, [1.0, 5.0, 5.0]);
        assert_eq!(points[2].weights, [2.0, 2.0, 2.0]);
        for p in &points {
            assert!(p.error.is_none(), "{:?}", p.error);
            let r = p.report.as_ref().unwrap();
            assert!(r.status.is_converged());
        }
        // proportional weights from the same start reach the same point
        let a = points[0].report.as_ref().unwrap();
        let c = points[2].report.as_ref().unwrap();
        for k in 0..3 {
            assert_relative_eq!(
                a.objective_components[k],
                c.objective_components[k],
                max_relative = 1e-5,
                epsilon = 1e-6
            );
        }
        // flat structure with one degree of freedom: identical optima, so
        // no strict domination between the proportional pair
        assert!(!points[0].dominated || !points[2].dominated);
    }

    #[test]
    fn scalarized_gradient_matches_finite_differences() {
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        let ncp = assemble_kkt(&sys, TariffStructure::TimeOfUse, 0.09).unwrap();
        let obj = scalarize(&ncp, [1.0, 2.0, 0.5]).unwrap();
        let n = ncp.nlp.n();
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..10 {
            let mut x = vec![0.0; n];
            for i in 0..n {
                let lo = ncp.nlp.lb[i].max(0.05);
                let hi = ncp.nlp.ub[i].min(10.0);
                x[i] = rng.random_range(lo..hi.max(lo + 1e-9));
            }
            let mut grad = vec![0.0; n];
            obj.add_gradient(&x, 1.0, &mut grad);
            // sample a few coordinates
            for i in (0..n).step_by(11) {
                let h = 1e-5 * (1.0 + x[i].abs());
                let mut xp = x.clone();
                xp[i] = x[i] + h;
                let fp = obj.eval(&xp);
                xp[i] = x[i] - h;
                let fm = obj.eval(&xp);
                assert_relative_eq!(
                    grad[i],
                    (fp - fm) / (2.0 * h),
                    max_relative = 1e-5,
                    epsilon = 1e-6
                );
            }
        }
    }
}
