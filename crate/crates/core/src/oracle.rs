//! Brute-force validation tools: exhaustive tariff grid search backed by
//! exact dispatch solves, and an independent residual audit of solver output.
//!
//! Neither path touches the assembled equation system's expression machinery:
//! the grid search works from the closed-form demand model plus per-interval
//! dispatch solves, and the audit re-derives every residual directly from
//! system data. Agreement with the solver is therefore evidence that the
//! assembly itself is right.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dispatch::{
    self, DispatchError, ObjectiveBreakdown, TariffSchedule, TariffStructure,
};
use crate::demand::IntervalProfile;
use crate::mopec::{BoundSide, NcpSystem, RelaxedPoint, Window};
use crate::solver::SolverReport;
use crate::system::{BusIdx, Hour, Pollutant, SystemModel};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("grid search supports at most 3 tariff axes; {structure} here has {needed}")]
    TooManyAxes { structure: TariffStructure, needed: usize },
    #[error("{structure} has {expected} tariff degrees of freedom, grid supplies {got} axes")]
    AxisCount { structure: TariffStructure, expected: usize, got: usize },
    #[error("grid axis {axis}: {reason}")]
    BadAxis { axis: usize, reason: String },
    #[error("grid was built for {grid}, search asked for {requested}")]
    StructureMismatch { grid: TariffStructure, requested: TariffStructure },
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
}

/// Free tariff values a structure admits on a system: one for flat, a
/// peak/off-peak pair for time-of-use, per-bus pairs and per-(bus, hour)
/// values for the locational structures.
pub fn tariff_dof(system: &SystemModel, structure: TariffStructure) -> usize {
    match structure {
        TariffStructure::Flat => 1,
        TariffStructure::TimeOfUse => 2,
        TariffStructure::LocationalTimeOfUse => 2 * system.n_buses(),
        TariffStructure::LocationalHourly => system.n_buses() * system.hours,
    }
}

/// Expand a degree-of-freedom vector into a full schedule. Axis order: flat
/// `[value]`; time-of-use `[peak, off]`; locational time-of-use all peaks
/// then all off-peaks by bus; locational-hourly bus-major by hour.
pub fn schedule_from_dof(
    system: &SystemModel,
    structure: TariffStructure,
    dof: &[f64],
) -> TariffSchedule {
    assert_eq!(dof.len(), tariff_dof(system, structure), "dof vector length");
    match structure {
        TariffStructure::Flat => TariffSchedule::uniform(system, dof[0]),
        TariffStructure::TimeOfUse => TariffSchedule::time_of_use(system, dof[0], dof[1]),
        TariffStructure::LocationalTimeOfUse => {
            let nb = system.n_buses();
            TariffSchedule::locational_tou(system, &dof[..nb], &dof[nb..])
        }
        TariffStructure::LocationalHourly => {
            let mut out = TariffSchedule::uniform(system, 0.0);
            out.structure = TariffStructure::LocationalHourly;
            for b in 0..system.n_buses() {
                for r in 0..system.days {
                    for t in 0..system.hours {
                        out.values[b].0[r][t] = dof[b * system.hours + t];
                    }
                }
            }
            out
        }
    }
}

/// Sampling plan: one `(min, max, points)` range per free tariff value.
#[derive(Debug, Clone, Serialize)]
pub struct GridSpec {
    pub axes: Vec<(f64, f64, usize)>,
    pub structure: TariffStructure,
}

impl GridSpec {
    /// Identical range on every axis of the structure.
    pub fn uniform_axes(
        system: &SystemModel,
        structure: TariffStructure,
        min: f64,
        max: f64,
        points: usize,
    ) -> Self {
        let n = tariff_dof(system, structure);
        GridSpec { axes: vec![(min, max, points); n], structure }
    }

    pub fn validate(&self, system: &SystemModel) -> Result<(), OracleError> {
        let lo = system.buses.iter().map(|b| b.tariff_min).fold(f64::MIN, f64::max);
        let hi = system.buses.iter().map(|b| b.tariff_max).fold(f64::MAX, f64::min);
        for (k, &(min, max, points)) in self.axes.iter().enumerate() {
            if points < 2 {
                return Err(OracleError::BadAxis {
                    axis: k,
                    reason: format!("{points} points; need at least 2"),
                });
            }
            if !(min < max) {
                return Err(OracleError::BadAxis {
                    axis: k,
                    reason: format!("empty range [{min}, {max}]"),
                });
            }
            if min < lo - 1e-9 || max > hi + 1e-9 {
                return Err(OracleError::BadAxis {
                    axis: k,
                    reason: format!("range [{min}, {max}] escapes tariff bounds [{lo}, {hi}]"),
                });
            }
        }
        Ok(())
    }
}

/// One sampled tariff point. `values` carries the free tariff values; on the
/// cell containing a revenue-adequacy root the last coordinate is refined to
/// the root itself, and feasibility is judged there.
#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub values: Vec<f64>,
    pub feasible: bool,
    /// First violated requirement, when infeasible: a regulator row name,
    /// `adequacy` when no revenue-adequacy root lies in the cell, or a
    /// dispatch failure description.
    pub violation: Option<String>,
    pub scalarized: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridBest {
    pub values: Vec<f64>,
    pub scalarized: f64,
    pub tariff: TariffSchedule,
    pub breakdown: ObjectiveBreakdown,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridOutcome {
    pub grid: GridSpec,
    pub eb: f64,
    pub weights: [f64; 3],
    /// Cells in axis-lexicographic order, last axis fastest.
    pub cells: Vec<GridCell>,
    /// Feasible minimizer of the scalarized objective; `None` mirrors an
    /// empty feasible set and is not an error.
    pub best: Option<GridBest>,
}

/// Everything one tariff evaluation produces. Dispatch sees the tariff only
/// through the induced demand, so the program is built against a neutral
/// placeholder schedule; regulator feasibility is screened separately.
struct PointEval {
    tariff: TariffSchedule,
    demand: Vec<Vec<IntervalProfile>>,
    breakdown: ObjectiveBreakdown,
    adequacy: f64,
}

fn eval_point(
    system: &SystemModel,
    structure: TariffStructure,
    dof: &[f64],
) -> Result<PointEval, DispatchError> {
    let tariff = schedule_from_dof(system, structure, dof);
    let demand = dispatch::tariff_demand(system, &tariff)?;
    let neutral = TariffSchedule::uniform(
        system,
        0.5 * (system.buses[0].tariff_min + system.buses[0].tariff_max),
    );
    let ll = dispatch::solve_ll(&dispatch::build_ll(system, &neutral, &demand)?)?;
    let breakdown = dispatch::eval_objectives(system, &tariff, &demand, &ll.solution)?;
    let adequacy =
        breakdown.revenue - (1.0 + system.policy.rate_of_return) * breakdown.capital_cost
            - breakdown.op_cost;
    Ok(PointEval { tariff, demand, breakdown, adequacy })
}

/// Regulator screens that depend on the tariff alone (peak/off-peak floor and
/// the average cap); `None` means both hold.
fn screen_tariff(system: &SystemModel, tariff: &TariffSchedule) -> Option<String> {
    if tariff.structure != TariffStructure::Flat {
        let nu = system.policy.tou_ratio;
        for b in 0..system.n_buses() {
            let (pp, pop) = tariff.window_means(system, b, 0);
            if pp < nu * pop - 1e-9 * (1.0 + nu * pop.abs()) {
                return Some(format!("window_floor[{}]", system.buses[b].id));
            }
        }
    }
    let cap = 2.0 * system.policy.avg_tariff_cap;
    let avg = dispatch::average_tariff(system, tariff);
    if avg > cap + 1e-9 * (1.0 + cap) {
        return Some("avg_cap".into());
    }
    None
}

fn screen_burden(
    system: &SystemModel,
    eb: f64,
    tariff: &TariffSchedule,
    demand: &[Vec<IntervalProfile>],
) -> Option<String> {
    for b in 0..system.n_buses() {
        let (spend, _) = dispatch::energy_burden(system, tariff, demand, b);
        let bound = eb * system.buses[b].daily_income();
        if spend > bound + 1e-9 * (1.0 + bound) {
            return Some(format!("eb[{}]", system.buses[b].id));
        }
    }
    None
}

/// Exhaustive tariff search: every grid point gets closed-form demand, an
/// exact dispatch solve, and regulator screening. Revenue adequacy is an
/// equality, so a point passes it only when the adequacy root along the last
/// axis falls inside the point's half-step window; the root is then located
/// by bisection and the point judged there.
pub fn grid_search(
    system: &SystemModel,
    structure: TariffStructure,
    eb: f64,
    grid: &GridSpec,
    weights: [f64; 3],
) -> Result<GridOutcome, OracleError> {
    if grid.structure != structure {
        return Err(OracleError::StructureMismatch {
            grid: grid.structure,
            requested: structure,
        });
    }
    let needed = tariff_dof(system, structure);
    if needed > 3 {
        return Err(OracleError::TooManyAxes { structure, needed });
    }
    if grid.axes.len() != needed {
        return Err(OracleError::AxisCount {
            structure,
            expected: needed,
            got: grid.axes.len(),
        });
    }
    grid.validate(system)?;

    let prefix_axes = &grid.axes[..grid.axes.len() - 1];
    let n_slices: usize = prefix_axes.iter().map(|a| a.2).product();
    let axis_value = |axis: &(f64, f64, usize), i: usize| -> f64 {
        axis.0 + (axis.1 - axis.0) * i as f64 / (axis.2 - 1) as f64
    };

    let mut slices: Vec<(usize, Vec<GridCell>)> = (0..n_slices)
        .into_par_iter()
        .map(|slice| {
            let mut prefix = Vec::with_capacity(prefix_axes.len());
            let mut rem = slice;
            for axis in prefix_axes.iter().rev() {
                prefix.push(axis_value(axis, rem % axis.2));
                rem /= axis.2;
            }
            prefix.reverse();
            (slice, scan_slice(system, structure, eb, grid, weights, &prefix))
        })
        .collect();
    slices.sort_by_key(|(i, _)| *i);
    let cells: Vec<GridCell> = slices.into_iter().flat_map(|(_, c)| c).collect();

    let mut best: Option<GridBest> = None;
    for cell in cells.iter().filter(|c| c.feasible) {
        let sc = cell.scalarized.expect("feasible cells are scored");
        if best.as_ref().map_or(true, |b| sc < b.scalarized) {
            let eval = eval_point(system, structure, &cell.values)?;
            best = Some(GridBest {
                values: cell.values.clone(),
                scalarized: sc,
                tariff: eval.tariff,
                breakdown: eval.breakdown,
            });
        }
    }
    Ok(GridOutcome { grid: grid.clone(), eb, weights, cells, best })
}

/// Evaluate one slice: all samples of the last axis under a fixed prefix.
fn scan_slice(
    system: &SystemModel,
    structure: TariffStructure,
    eb: f64,
    grid: &GridSpec,
    weights: [f64; 3],
    prefix: &[f64],
) -> Vec<GridCell> {
    let axis = *grid.axes.last().expect("at least one axis");
    let (min, max, points) = axis;
    let step = (max - min) / (points - 1) as f64;
    let sample = |i: usize| min + step * i as f64;
    let dof_at = |v: f64| {
        let mut dof = prefix.to_vec();
        dof.push(v);
        dof
    };

    // pass 1: adequacy residual at each sample (dispatch failures recorded);
    // parallel because single-axis grids have only this one slice
    let evals: Vec<Result<PointEval, DispatchError>> = (0..points)
        .into_par_iter()
        .map(|i| eval_point(system, structure, &dof_at(sample(i))))
        .collect();

    // pass 2: locate adequacy roots between adjacent clean samples
    let adequacy_scale = 1.0
        + (1.0 + system.policy.rate_of_return)
            * system.policy.capital_cost_daily().map_or(0.0, |c| c);
    let mut roots: Vec<f64> = Vec::new();
    for i in 0..points {
        let Ok(e) = &evals[i] else { continue };
        if e.adequacy.abs() <= 1e-9 * adequacy_scale {
            roots.push(sample(i));
            continue;
        }
        if i + 1 < points {
            if let Ok(next) = &evals[i + 1] {
                if e.adequacy * next.adequacy < 0.0 {
                    if let Some(v) = bisect_adequacy(
                        system,
                        structure,
                        &dof_at(0.0)[..prefix.len()],
                        (sample(i), e.adequacy),
                        (sample(i + 1), next.adequacy),
                        1e-9 * adequacy_scale,
                    ) {
                        roots.push(v);
                    }
                }
            }
        }
    }

    let mut cells: Vec<GridCell> = (0..points)
        .map(|i| {
            let violation = match &evals[i] {
                Err(e) => format!("dispatch: {e}"),
                Ok(e) => screen_tariff(system, &e.tariff)
                    .or_else(|| screen_burden(system, eb, &e.tariff, &e.demand))
                    .unwrap_or_else(|| "adequacy".into()),
            };
            GridCell {
                values: dof_at(sample(i)),
                feasible: false,
                violation: Some(violation),
                scalarized: None,
            }
        })
        .collect();

    for &root in &roots {
        let i = (((root - min) / step).round() as isize).clamp(0, points as isize - 1) as usize;
        let dof = dof_at(root);
        let Ok(e) = eval_point(system, structure, &dof) else { continue };
        let violation =
            screen_tariff(system, &e.tariff).or_else(|| screen_burden(system, eb, &e.tariff, &e.demand));
        let scalarized = weights[0] * (-e.breakdown.f_ew)
            + weights[1] * e.breakdown.f_h
            + weights[2] * e.breakdown.f_en;
        cells[i] = GridCell {
            values: dof,
            feasible: violation.is_none(),
            scalarized: violation.is_none().then_some(scalarized),
            violation,
        };
    }
    cells
}

fn bisect_adequacy(
    system: &SystemModel,
    structure: TariffStructure,
    prefix: &[f64],
    mut lo: (f64, f64),
    mut hi: (f64, f64),
    tol: f64,
) -> Option<f64> {
    for _ in 0..200 {
        let mid = 0.5 * (lo.0 + hi.0);
        let mut dof = prefix.to_vec();
        dof.push(mid);
        let r = eval_point(system, structure, &dof).ok()?.adequacy;
        if r.abs() <= tol || hi.0 - lo.0 <= 1e-12 * (1.0 + mid.abs()) {
            return Some(mid);
        }
        if (r < 0.0) == (lo.1 < 0.0) {
            lo = (mid, r);
        } else {
            hi = (mid, r);
        }
    }
    Some(0.5 * (lo.0 + hi.0))
}

// --- independent residual audit -------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AuditFinding {
    pub row: String,
    /// Raw residual (equalities), coordinate or product value (pairs), or
    /// constraint value (inequalities, negative means violated).
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditRecord {
    pub pass: bool,
    pub tol: f64,
    pub checks: usize,
    /// Rows outside tolerance, worst first, capped.
    pub failures: Vec<AuditFinding>,
    pub worst_equality: Option<AuditFinding>,
    pub worst_pair: Option<AuditFinding>,
    pub worst_product: Option<AuditFinding>,
    pub worst_inequality: Option<AuditFinding>,
}

struct Auditor {
    tol: f64,
    checks: usize,
    failures: Vec<(f64, AuditFinding)>,
    worst: [Option<(f64, AuditFinding)>; 4],
}

const EQ: usize = 0;
const PAIR: usize = 1;
const PROD: usize = 2;
const INEQ: usize = 3;

impl Auditor {
    fn record(&mut self, family: usize, row: &str, value: f64, severity: f64) {
        self.checks += 1;
        if self.worst[family].as_ref().map_or(true, |(s, _)| severity > *s) {
            self.worst[family] = Some((severity, AuditFinding { row: row.into(), value }));
        }
        if severity > self.tol {
            self.failures.push((severity, AuditFinding { row: row.into(), value }));
        }
    }
    /// Equality rows: severity is |residual| relative to the row's constant.
    fn eq(&mut self, row: &str, residual: f64, scale: f64) {
        self.record(EQ, row, residual, residual.abs() / scale);
    }
    /// Pair coordinates must be nonnegative.
    fn pair(&mut self, row: &str, coord: f64, scale: f64) {
        self.record(PAIR, row, coord, (-coord).max(0.0) / scale);
    }
    /// Complementarity products must vanish.
    fn product(&mut self, row: &str, product: f64, scale: f64) {
        self.record(PROD, row, product, product.max(0.0) / scale);
    }
    /// Inequality rows must be nonnegative.
    fn ineq(&mut self, row: &str, value: f64, scale: f64) {
        self.record(INEQ, row, value, (-value).max(0.0) / scale);
    }
    fn finish(mut self) -> AuditRecord {
        self.failures.sort_by(|a, b| b.0.total_cmp(&a.0));
        let pass = self.failures.is_empty();
        let mut failures: Vec<AuditFinding> =
            self.failures.into_iter().map(|(_, f)| f).collect();
        failures.truncate(24);
        let [weq, wpair, wprod, wineq] = self.worst;
        AuditRecord {
            pass,
            tol: self.tol,
            checks: self.checks,
            failures,
            worst_equality: weq.map(|(_, f)| f),
            worst_pair: wpair.map(|(_, f)| f),
            worst_product: wprod.map(|(_, f)| f),
            worst_inequality: wineq.map(|(_, f)| f),
        }
    }
}

/// Audit a solver report. Converged status is a precondition; anything else
/// fails immediately, since the point then proves nothing.
pub fn audit_solution(
    system: &SystemModel,
    ncp: &NcpSystem,
    report: &SolverReport,
    tol: f64,
) -> AuditRecord {
    if !report.status.is_converged() {
        return AuditRecord {
            pass: false,
            tol,
            checks: 0,
            failures: vec![AuditFinding {
                row: format!("solver status {:?} is not converged", report.status),
                value: 0.0,
            }],
            worst_equality: None,
            worst_pair: None,
            worst_product: None,
            worst_inequality: None,
        };
    }
    audit_point(system, ncp, &report.final_point, tol)
}

/// Re-derive every equality residual, pair coordinate, complementarity
/// product, and regulator inequality from system data at `point.x`, without
/// evaluating the assembled expressions. Severities are relative to each
/// row's natural scale (1 + |constant term|).
pub fn audit_point(
    system: &SystemModel,
    ncp: &NcpSystem,
    point: &RelaxedPoint,
    tol: f64,
) -> AuditRecord {
    let lay = &ncp.layout;
    let x = &point.x;
    let mut a = Auditor { tol, checks: 0, failures: Vec::new(), worst: Default::default() };
    if x.len() != lay.n_vars {
        a.record(EQ, "dimension", (x.len() as f64) - (lay.n_vars as f64), f64::INFINITY);
        return a.finish();
    }
    let nb = system.n_buses();
    let nl = system.lines.len();
    let (days, hours) = (system.days, system.hours);
    let wts = &system.policy.day_weights;
    let peak = &system.policy.peak_window;
    let off = system.offpeak_window();
    let gamma = system.external_costs.carbon_tax;
    let eq_name = |k: usize| ncp.nlp.eq_names[k].clone();
    let ineq_name = |k: usize| ncp.nlp.ineq_names[k].clone();

    // inflexible window energies, recomputed
    let window_hours = |w: Window| -> &[Hour] {
        match w {
            Window::Peak => peak,
            Window::Off => &off,
        }
    };
    let energy = |b: BusIdx, r: usize, w: Window| -> f64 {
        system.inflexible_window_energy(b, r, window_hours(w))
    };

    for r in 0..days {
        let w = wts[r];
        for t in 0..hours {
            for b in 0..nb {
                let mut v = -system.demand_p[b].at(r, t) - x[lay.d(r, t, b)];
                if b == system.root {
                    v += x[lay.import_p(r, t)];
                }
                for &i in &system.gens_at[b] {
                    v += x[lay.gen_p(r, t, i)];
                }
                if let Some((_, l)) = system.parent[b] {
                    v += x[lay.flow_p(r, t, l)];
                }
                for &(_, l) in &system.children[b] {
                    v -= x[lay.flow_p(r, t, l)];
                }
                let scale = 1.0 + system.demand_p[b].at(r, t).abs();
                a.eq(&eq_name(lay.balance_p(r, t, b)), v, scale);
            }
            for b in 0..nb {
                let mut v = -system.demand_q[b].at(r, t);
                if b == system.root {
                    v += x[lay.import_q(r, t)];
                }
                for &i in &system.gens_at[b] {
                    v += x[lay.gen_q(r, t, i)];
                }
                if let Some((_, l)) = system.parent[b] {
                    v += x[lay.flow_q(r, t, l)];
                }
                for &(_, l) in &system.children[b] {
                    v -= x[lay.flow_q(r, t, l)];
                }
                let scale = 1.0 + system.demand_q[b].at(r, t).abs();
                a.eq(&eq_name(lay.balance_q(r, t, b)), v, scale);
            }
            for (l, line) in system.lines.iter().enumerate() {
                let v = x[lay.u(r, t, line.from)] - x[lay.u(r, t, line.to)]
                    - 2.0 * line.resistance * x[lay.flow_p(r, t, l)]
                    - 2.0 * line.reactance * x[lay.flow_q(r, t, l)];
                a.eq(&eq_name(lay.voltage(r, t, l)), v, 1.0);
            }
            a.eq(
                &eq_name(lay.voltage_ref(r, t)),
                x[lay.u(r, t, system.root)] - dispatch::VOLTAGE_REF_SQ,
                1.0 + dispatch::VOLTAGE_REF_SQ,
            );
            for (l, line) in system.lines.iter().enumerate() {
                let s2 = line.apparent_limit * line.apparent_limit;
                let v = x[lay.disk_slack(r, t, l)] - s2
                    + x[lay.flow_p(r, t, l)] * x[lay.flow_p(r, t, l)]
                    + x[lay.flow_q(r, t, l)] * x[lay.flow_q(r, t, l)];
                a.eq(&eq_name(lay.disk_def(r, t, l)), v, 1.0 + s2);
            }

            let lmp = system.interface.lmp.at(r, t);
            let v = w * lmp - x[lay.lam_p(r, t, system.root)] - x[lay.tau_lo(r, t)]
                + x[lay.tau_hi(r, t)];
            a.eq(&eq_name(lay.st_import_p(r, t)), v, 1.0 + w * lmp.abs());
            a.eq(&eq_name(lay.st_import_q(r, t)), -x[lay.lam_q(r, t, system.root)], 1.0);
            for (i, g) in system.generators.iter().enumerate() {
                let mut v = w * g.cost - x[lay.lam_p(r, t, g.bus)] - x[lay.delta_lo(r, t, i)]
                    + x[lay.delta_hi(r, t, i)];
                for y in Pollutant::ALL {
                    v -= w * g.emission_rates.get(y) * x[lay.psi(y, g.bus)];
                }
                a.eq(&eq_name(lay.st_gen_p(r, t, i)), v, 1.0 + w * g.cost.abs());
            }
            for (i, g) in system.generators.iter().enumerate() {
                let v = -x[lay.lam_q(r, t, g.bus)] - x[lay.theta_lo(r, t, i)]
                    + x[lay.theta_hi(r, t, i)];
                a.eq(&eq_name(lay.st_gen_q(r, t, i)), v, 1.0);
            }
            for (l, line) in system.lines.iter().enumerate() {
                let v = x[lay.lam_p(r, t, line.from)] - x[lay.lam_p(r, t, line.to)]
                    + 2.0 * line.resistance * x[lay.beta(r, t, l)]
                    + 2.0 * x[lay.flow_p(r, t, l)] * x[lay.eta(r, t, l)];
                a.eq(&eq_name(lay.st_flow_p(r, t, l)), v, 1.0);
                let v = x[lay.lam_q(r, t, line.from)] - x[lay.lam_q(r, t, line.to)]
                    + 2.0 * line.reactance * x[lay.beta(r, t, l)]
                    + 2.0 * x[lay.flow_q(r, t, l)] * x[lay.eta(r, t, l)];
                a.eq(&eq_name(lay.st_flow_q(r, t, l)), v, 1.0);
            }
            for b in 0..nb {
                let mut v = -x[lay.mu_lo(r, t, b)] + x[lay.mu_hi(r, t, b)];
                if b == system.root {
                    v -= x[lay.beta_ref(r, t)];
                } else if let Some((_, l)) = system.parent[b] {
                    v += x[lay.beta(r, t, l)];
                }
                for &(_, l) in &system.children[b] {
                    v -= x[lay.beta(r, t, l)];
                }
                a.eq(&eq_name(lay.st_u(r, t, b)), v, 1.0);
            }
            for b in 0..nb {
                let win = if peak.contains(&t) { Window::Peak } else { Window::Off };
                let e = energy(b, r, win);
                let v = x[lay.d(r, t, b)] * e
                    - system.demand_p[b].at(r, t) * x[lay.d_window(b, r, win)];
                a.eq(&eq_name(lay.share(r, t, b)), v, 1.0 + e);
            }
        }
    }

    for b in 0..nb {
        let budget = system.flexible_budget(b);
        for r in 0..days {
            for win in Window::BOTH {
                let share = match win {
                    Window::Peak => system.buses[b].alpha,
                    Window::Off => 1.0 - system.buses[b].alpha,
                };
                let e = energy(b, r, win);
                let mut v = -share * budget;
                for &t in window_hours(win) {
                    v += x[lay.d_window(b, r, win)] * x[lay.pi(b, t)]
                        * (system.demand_p[b].at(r, t) / e);
                }
                a.eq(&eq_name(lay.dw_budget(b, r, win)), v, 1.0 + share * budget);
            }
        }
    }
    for y in Pollutant::ALL {
        for b in 0..nb {
            let mut v = -x[lay.e_bus(y, b)];
            for &i in &system.gens_at[b] {
                let rate = system.generators[i].emission_rates.get(y);
                if rate == 0.0 {
                    continue;
                }
                for r in 0..days {
                    for t in 0..hours {
                        v += wts[r] * rate * x[lay.gen_p(r, t, i)];
                    }
                }
            }
            a.eq(&eq_name(lay.ledger(y, b)), v, 1.0);
        }
    }
    for y in Pollutant::ALL {
        let v = (0..nb).map(|b| x[lay.e_bus(y, b)]).sum::<f64>() - x[lay.e_total_bus(y)];
        a.eq(&eq_name(lay.ledger_sum(y)), v, 1.0);
    }
    for y in Pollutant::ALL {
        for b in 0..nb {
            a.eq(&eq_name(lay.st_e(y, b)), x[lay.psi(y, b)] - x[lay.chi(y)], 1.0);
        }
    }
    for y in Pollutant::ALL {
        let c = if y == Pollutant::Co2 { gamma } else { 0.0 };
        a.eq(&eq_name(lay.st_e_total(y)), x[lay.chi(y)] + c, 1.0 + c.abs());
    }
    {
        let capital = system.policy.capital_cost_daily().map_or(0.0, |c| c);
        let allowed = (1.0 + system.policy.rate_of_return) * capital;
        let mut v = -allowed;
        for b in 0..nb {
            for t in 0..hours {
                let mut served = 0.0;
                for r in 0..days {
                    served += wts[r] * (system.demand_p[b].at(r, t) + x[lay.d(r, t, b)]);
                }
                v += x[lay.pi(b, t)] * served;
            }
        }
        for r in 0..days {
            for t in 0..hours {
                v -= wts[r] * system.interface.lmp.at(r, t) * x[lay.import_p(r, t)];
                for (i, g) in system.generators.iter().enumerate() {
                    v -= wts[r] * g.cost * x[lay.gen_p(r, t, i)];
                }
            }
        }
        a.eq(&eq_name(lay.adequacy()), v, 1.0 + allowed.abs());
    }
    {
        let e_if = system.interface.emissions_total(Pollutant::Co2, wts);
        let v = x[lay.e_total_co2()] - x[lay.e_total_bus(Pollutant::Co2)] - e_if;
        a.eq(&eq_name(lay.co2_account()), v, 1.0 + e_if.abs());
    }
    // structure ties, re-derived from the anchor rule
    {
        let w0 = |t: Hour| if peak.contains(&t) { peak[0] } else { off[0] };
        let mut row = lay.n_eqs - lay.n_ties;
        let mut tie = |a_: &mut Auditor, anchor: usize, tied: usize| {
            a_.eq(&eq_name(row), x[anchor] - x[tied], 1.0);
            row += 1;
        };
        match ncp.structure {
            TariffStructure::Flat => {
                for b in 0..nb {
                    for t in 0..hours {
                        if (b, t) != (0, 0) {
                            tie(&mut a, lay.pi(0, 0), lay.pi(b, t));
                        }
                    }
                }
            }
            TariffStructure::TimeOfUse => {
                for b in 0..nb {
                    for t in 0..hours {
                        if !(b == 0 && t == w0(t)) {
                            tie(&mut a, lay.pi(0, w0(t)), lay.pi(b, t));
                        }
                    }
                }
            }
            TariffStructure::LocationalTimeOfUse => {
                for b in 0..nb {
                    for t in 0..hours {
                        if t != w0(t) {
                            tie(&mut a, lay.pi(b, w0(t)), lay.pi(b, t));
                        }
                    }
                }
            }
            TariffStructure::LocationalHourly => {}
        }
        debug_assert_eq!(row, lay.n_eqs);
    }

    // complementarity pairs against the variable-bound data
    for p in &ncp.pairs {
        let bound = match p.side {
            BoundSide::Lower => ncp.nlp.lb[p.var],
            BoundSide::Upper => ncp.nlp.ub[p.var],
        };
        let slack = match p.side {
            BoundSide::Lower => x[p.var] - bound,
            BoundSide::Upper => bound - x[p.var],
        };
        let mult = x[p.mult];
        let scale = 1.0 + bound.abs();
        a.pair(&format!("{}:slack", p.name), slack, scale);
        a.pair(&format!("{}:mult", p.name), mult, 1.0);
        a.product(&p.name, slack * mult, scale);
    }

    // regulator inequalities
    for b in 0..nb {
        let hh = system.buses[b].households();
        let bound = ncp.eb * system.buses[b].daily_income();
        let mut spend = 0.0;
        for t in 0..hours {
            let mut served = 0.0;
            for r in 0..days {
                served += wts[r] * (system.demand_p[b].at(r, t) + x[lay.d(r, t, b)]);
            }
            spend += x[lay.pi(b, t)] * served / hh;
        }
        a.ineq(&ineq_name(lay.eb_row(b)), bound - spend, 1.0 + bound.abs());
    }
    if ncp.structure != TariffStructure::Flat {
        let nu = system.policy.tou_ratio;
        for b in 0..nb {
            let pm = peak.iter().map(|&t| x[lay.pi(b, t)]).sum::<f64>() / peak.len() as f64;
            let om = off.iter().map(|&t| x[lay.pi(b, t)]).sum::<f64>() / off.len() as f64;
            a.ineq(&ineq_name(nb + b), pm - nu * om, 1.0 + nu * om.abs());
        }
    }
    {
        let cap = 2.0 * system.policy.avg_tariff_cap;
        let mut acc = 0.0;
        for b in 0..nb {
            let pm = peak.iter().map(|&t| x[lay.pi(b, t)]).sum::<f64>() / peak.len() as f64;
            let om = off.iter().map(|&t| x[lay.pi(b, t)]).sum::<f64>() / off.len() as f64;
            acc += (pm + om) / nb as f64;
        }
        a.ineq(&ineq_name(lay.n_ul_ineqs - 1), cap - acc, 1.0 + cap);
    }
    // unpaired variable bounds (tariffs and the demand lifts)
    for b in 0..nb {
        for t in 0..hours {
            let v = x[lay.pi(b, t)];
            let (lo, hi) = (system.buses[b].tariff_min, system.buses[b].tariff_max);
            a.ineq(&format!("pi_bounds[{},t{t}]", system.buses[b].id), v - lo, 1.0 + lo.abs());
            a.ineq(&format!("pi_bounds[{},t{t}]", system.buses[b].id), hi - v, 1.0 + hi.abs());
        }
        for r in 0..days {
            for t in 0..hours {
                a.ineq(&format!("d_nonneg[{},r{r}t{t}]", system.buses[b].id), x[lay.d(r, t, b)], 1.0);
            }
            for win in Window::BOTH {
                a.ineq(
                    &format!("dw_nonneg[{},r{r},{}]", system.buses[b].id, win.tag()),
                    x[lay.d_window(b, r, win)],
                    1.0,
                );
            }
        }
    }
    a.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mopec::{assemble_kkt, embed_dispatch};
    use crate::solver::{scholtes_solve, ScholtesSchedule};
    use crate::testfix::two_bus;

    fn flat_adequacy_root(system: &SystemModel) -> f64 {
        let (mut lo, mut hi) = (20.0, 100.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let tariff = TariffSchedule::uniform(system, mid);
            let demand = dispatch::tariff_demand(system, &tariff).unwrap();
            let ll = dispatch::solve_ll(&dispatch::build_ll(system, &tariff, &demand).unwrap())
                .unwrap();
            let r =
                dispatch::revenue_adequacy_residual(system, &tariff, &demand, &ll.solution)
                    .unwrap();
            if r < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn dof_counts_and_schedule_mapping() {
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        assert_eq!(tariff_dof(&sys, TariffStructure::Flat), 1);
        assert_eq!(tariff_dof(&sys, TariffStructure::TimeOfUse), 2);
        assert_eq!(tariff_dof(&sys, TariffStructure::LocationalTimeOfUse), 4);
        assert_eq!(tariff_dof(&sys, TariffStructure::LocationalHourly), 4);
        let tou = schedule_from_dof(&sys, TariffStructure::TimeOfUse, &[50.0, 35.0]);
        // hour 1 is the peak window in this fixture
        assert_eq!(tou.value(1, 0, 1), 50.0);
        assert_eq!(tou.value(0, 0, 0), 35.0);
        let lh =
            schedule_from_dof(&sys, TariffStructure::LocationalHourly, &[10.0, 11.0, 12.0, 13.0]);
        assert_eq!(lh.value(0, 0, 1), 11.0);
        assert_eq!(lh.value(1, 0, 0), 12.0);
    }

    #[test]
    fn grid_spec_validation_and_refusals() {
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        let bad_points = GridSpec {
            axes: vec![(20.0, 80.0, 1)],
            structure: TariffStructure::Flat,
        };
        assert!(bad_points.validate(&sys).is_err());
        let bad_range = GridSpec {
            axes: vec![(80.0, 20.0, 10)],
            structure: TariffStructure::Flat,
        };
        assert!(bad_range.validate(&sys).is_err());
        let escapes = GridSpec {
            axes: vec![(1.0, 80.0, 10)],
            structure: TariffStructure::Flat,
        };
        assert!(escapes.validate(&sys).is_err());

        // locational structures on two buses have 4 degrees of freedom
        let grid =
            GridSpec::uniform_axes(&sys, TariffStructure::LocationalTimeOfUse, 20.0, 80.0, 5);
        let err = grid_search(&sys, TariffStructure::LocationalTimeOfUse, 0.09, &grid, [1.0; 3])
            .unwrap_err();
        assert!(matches!(err, OracleError::TooManyAxes { needed: 4, .. }), "{err}");

        let mismatch =
            grid_search(&sys, TariffStructure::Flat, 0.09, &grid, [1.0; 3]).unwrap_err();
        assert!(matches!(mismatch, OracleError::StructureMismatch { .. }));

        let wrong_count = GridSpec {
            axes: vec![(20.0, 80.0, 5); 2],
            structure: TariffStructure::Flat,
        };
        let err =
            grid_search(&sys, TariffStructure::Flat, 0.09, &wrong_count, [1.0; 3]).unwrap_err();
        assert!(matches!(err, OracleError::AxisCount { expected: 1, got: 2, .. }));
    }

    #[test]
    fn flat_grid_recovers_the_adequacy_root() {
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        let grid = GridSpec::uniform_axes(&sys, TariffStructure::Flat, 20.0, 100.0, 201);
        let out = grid_search(&sys, TariffStructure::Flat, 0.09, &grid, [1.0; 3]).unwrap();
        assert_eq!(out.cells.len(), 201);
        let best = out.best.as_ref().expect("feasible root exists");
        let pi_star = flat_adequacy_root(&sys);
        assert!(
            (best.values[0] - pi_star).abs() < 1e-6,
            "grid root {} vs bisection {}",
            best.values[0],
            pi_star
        );
        // exactly one cell feasible (a single adequacy root), rest labelled
        let feasible: Vec<_> = out.cells.iter().filter(|c| c.feasible).collect();
        assert_eq!(feasible.len(), 1);
        // everything else fails adequacy, the average cap (flat tariffs
        // above it), or dispatch at demand-heavy low tariffs
        for c in out.cells.iter().filter(|c| !c.feasible) {
            let v = c.violation.as_deref().unwrap();
            assert!(
                v == "adequacy" || v == "avg_cap" || v.starts_with("dispatch"),
                "{v}"
            );
        }
    }

    #[test]
    fn starved_burden_cap_empties_the_feasible_set() {
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        let grid = GridSpec::uniform_axes(&sys, TariffStructure::Flat, 20.0, 100.0, 101);
        let out = grid_search(&sys, TariffStructure::Flat, 0.003, &grid, [1.0; 3]).unwrap();
        assert!(out.best.is_none());
        assert!(
            out.cells
                .iter()
                .any(|c| c.violation.as_deref().map_or(false, |v| v.starts_with("eb["))),
            "burden violation should be named somewhere in the map"
        );
    }

    #[test]
    fn flat_grid_agrees_with_the_relaxation_solver() {
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        let ncp = assemble_kkt(&sys, TariffStructure::Flat, 0.09).unwrap();
        let report =
            scholtes_solve(&sys, &ncp, [1.0; 3], &ScholtesSchedule::default(), None).unwrap();
        assert!(report.status.is_converged());
        let solver_obj: f64 =
            (0..3).map(|k| report.objective_components[k]).sum::<f64>();
        let grid = GridSpec::uniform_axes(&sys, TariffStructure::Flat, 20.0, 100.0, 501);
        let out = grid_search(&sys, TariffStructure::Flat, 0.09, &grid, [1.0; 3]).unwrap();
        let best = out.best.unwrap();
        // flat + adequacy equality leaves a single feasible tariff, so the
        // two must coincide, not merely dominate
        assert!(
            (solver_obj - best.scalarized).abs() <= 1e-3 * (1.0 + best.scalarized.abs()),
            "solver {solver_obj} vs grid {}",
            best.scalarized
        );
    }

    #[test]
    fn tou_solver_dominates_the_coarse_grid() {
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        let ncp = assemble_kkt(&sys, TariffStructure::TimeOfUse, 0.09).unwrap();
        let report =
            scholtes_solve(&sys, &ncp, [1.0; 3], &ScholtesSchedule::default(), None).unwrap();
        assert!(report.status.is_converged(), "{:?}", report.status);
        let solver_obj: f64 = (0..3).map(|k| report.objective_components[k]).sum();
        let grid = GridSpec {
            axes: vec![(30.0, 90.0, 13), (20.0, 90.0, 61)],
            structure: TariffStructure::TimeOfUse,
        };
        let out = grid_search(&sys, TariffStructure::TimeOfUse, 0.09, &grid, [1.0; 3]).unwrap();
        let best = out.best.expect("tou feasible set is nonempty");
        assert!(
            solver_obj <= best.scalarized + 0.01 * (1.0 + best.scalarized.abs()),
            "solver {solver_obj} must not lose to the grid {}",
            best.scalarized
        );
    }

    #[test]
    fn audit_passes_converged_solve_and_flags_injected_errors() {
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        let ncp = assemble_kkt(&sys, TariffStructure::Flat, 0.09).unwrap();
        let report =
            scholtes_solve(&sys, &ncp, [1.0; 3], &ScholtesSchedule::default(), None).unwrap();
        let record = audit_solution(&sys, &ncp, &report, 1e-6);
        assert!(record.pass, "clean audit expected: {:?}", record.failures);
        assert!(record.checks > 100);

        // perturb one dual: the owning stationarity row must be named
        let mut bad = report.clone();
        let lay = &ncp.layout;
        bad.final_point.x[lay.delta_lo(0, 1, 0)] += 0.1;
        let record = audit_solution(&sys, &ncp, &bad, 1e-6);
        assert!(!record.pass);
        assert!(
            record.failures.iter().any(|f| f.row.contains("st_g[")),
            "stationarity row not named: {:?}",
            record.failures
        );
    }

    #[test]
    fn audit_names_window_coupling_violation() {
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        let ncp = assemble_kkt(&sys, TariffStructure::TimeOfUse, 0.09).unwrap();
        let tariff = TariffSchedule::time_of_use(&sys, 50.0, 35.0);
        let demand = dispatch::tariff_demand(&sys, &tariff).unwrap();
        let ll =
            dispatch::solve_ll(&dispatch::build_ll(&sys, &tariff, &demand).unwrap()).unwrap();
        let mut x = embed_dispatch(&ncp, &sys, &tariff, &demand, &ll).unwrap();
        // swap the windows: peak below off-peak violates the floor
        let lay = &ncp.layout;
        for b in 0..sys.n_buses() {
            x[lay.pi(b, 1)] = 35.0;
            x[lay.pi(b, 0)] = 50.0;
        }
        let point = RelaxedPoint { x, y: vec![], w: vec![], zl: vec![], zu: vec![] };
        let record = audit_point(&sys, &ncp, &point, 1e-6);
        assert!(!record.pass);
        assert!(
            record.failures.iter().any(|f| f.row.starts_with("window_floor[")),
            "coupling row not named: {:?}",
            record.failures
        );
    }

    #[test]
    fn grid_outcome_is_deterministic() {
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        let grid = GridSpec::uniform_axes(&sys, TariffStructure::Flat, 20.0, 100.0, 51);
        let a = grid_search(&sys, TariffStructure::Flat, 0.09, &grid, [1.0; 3]).unwrap();
        let b = grid_search(&sys, TariffStructure::Flat, 0.09, &grid, [1.0; 3]).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
