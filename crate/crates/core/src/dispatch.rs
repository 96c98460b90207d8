//! The utility's dispatch problem on the radial feeder, and the regulator's
//! scalar evaluators (welfare, damages, burden, adequacy).
//!
//! Dispatch is a linearized power flow on squared voltages: lossless line
//! flows, voltage drops `u_child = u_parent - 2 (R f_p + X f_q)`, apparent
//! power limited per line by a disk constraint, and a wholesale interface at
//! the root bus priced at the LMP. Because the carbon tax enters the
//! utility's cost linearly through the CO2 ledger, dispatch decouples into
//! one small convex program per (rep day, hour) after folding the tax into
//! generator marginal costs; emissions variables and their multipliers are
//! recovered afterwards in closed form.
//!
//! Sign conventions used for every dual quantity (and mirrored by the
//! equilibrium assembly in [`crate::mopec`]):
//! - nodal balances are oriented supply-minus-demand, so `lambda_p` is the
//!   nodal price of active power;
//! - stationarity reads `grad(cost) - J^T y - z_lo + z_hi = 0` on the
//!   minimization form of the dispatch problem;
//! - emission ledger rows are oriented production-minus-ledger
//!   (`sum R g - e = 0`), which makes the CO2 ledger multipliers equal to
//!   `-gamma` (`chi`, `psi`) and zero for other pollutants.

use crate::demand::{allocate_intervals, demand_split, shape_weighted_price, DemandError, IntervalProfile};
use crate::expr::{Nlp, QuadExpr};
use crate::ipm::{self, IpmOptions, IpmStatus};
use crate::system::{BusIdx, Day, Hour, PolMap, Pollutant, Series, SystemModel};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("tariff schedule invalid: {0}")]
    Tariff(String),
    #[error("demand model: {0}")]
    Demand(#[from] DemandError),
    #[error("dispatch infeasible at (day {day}, hour {hour}): {rows:?}")]
    Infeasible { day: Day, hour: Hour, rows: Vec<(String, f64)> },
    #[error("dispatch solve failed at (day {day}, hour {hour}): {message}")]
    Numeric { day: Day, hour: Hour, message: String },
    #[error("{0}")]
    Domain(String),
}

/// How tariff values are allowed to vary across buses, hours, and rep days.
/// All four tie tariffs across rep days; products differ in (bus, hour)
/// resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TariffStructure {
    Flat,
    TimeOfUse,
    LocationalTimeOfUse,
    LocationalHourly,
}

impl TariffStructure {
    pub const ALL: [TariffStructure; 4] = [
        TariffStructure::Flat,
        TariffStructure::TimeOfUse,
        TariffStructure::LocationalTimeOfUse,
        TariffStructure::LocationalHourly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TariffStructure::Flat => "flat",
            TariffStructure::TimeOfUse => "tou",
            TariffStructure::LocationalTimeOfUse => "loc-tou",
            TariffStructure::LocationalHourly => "loc-hourly",
        }
    }
}

impl std::fmt::Display for TariffStructure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TariffStructure {
    type Err = DispatchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flat" => Ok(TariffStructure::Flat),
            "tou" => Ok(TariffStructure::TimeOfUse),
            "loc-tou" => Ok(TariffStructure::LocationalTimeOfUse),
            "loc-hourly" => Ok(TariffStructure::LocationalHourly),
            other => Err(DispatchError::Tariff(format!(
                "unknown structure {other:?}; expected flat, tou, loc-tou, or loc-hourly"
            ))),
        }
    }
}

impl serde::Serialize for TariffStructure {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for TariffStructure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Retail tariff values per (bus, rep day, hour), $/MWh.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TariffSchedule {
    pub structure: TariffStructure,
    /// values[bus] is a (day, hour) series.
    pub values: Vec<Series>,
}

impl TariffSchedule {
    /// One system-wide value everywhere.
    pub fn uniform(system: &SystemModel, value: f64) -> Self {
        let s = Series(vec![vec![value; system.hours]; system.days]);
        TariffSchedule {
            structure: TariffStructure::Flat,
            values: vec![s; system.n_buses()],
        }
    }

    /// System-wide peak/off-peak pair.
    pub fn time_of_use(system: &SystemModel, peak: f64, offpeak: f64) -> Self {
        let mut out = TariffSchedule::uniform(system, offpeak);
        out.structure = TariffStructure::TimeOfUse;
        for b in 0..system.n_buses() {
            for r in 0..system.days {
                for &t in &system.policy.peak_window {
                    out.values[b].0[r][t] = peak;
                }
            }
        }
        out
    }

    /// Per-bus peak/off-peak pairs.
    pub fn locational_tou(system: &SystemModel, peak: &[f64], offpeak: &[f64]) -> Self {
        let mut out = TariffSchedule::uniform(system, 0.0);
        out.structure = TariffStructure::LocationalTimeOfUse;
        for b in 0..system.n_buses() {
            for r in 0..system.days {
                for t in 0..system.hours {
                    out.values[b].0[r][t] = if system.policy.peak_window.contains(&t) {
                        peak[b]
                    } else {
                        offpeak[b]
                    };
                }
            }
        }
        out
    }

    pub fn value(&self, b: BusIdx, r: Day, t: Hour) -> f64 {
        self.values[b].at(r, t)
    }

    /// The single value of a flat schedule.
    pub fn flat_value(&self) -> Option<f64> {
        (self.structure == TariffStructure::Flat).then(|| self.values[0].at(0, 0))
    }

    /// Effective peak and off-peak prices seen by a bus on a rep day:
    /// values weighted by the inflexible load shape within each window (the
    /// same weighting the demand closed forms use), so they are exact for
    /// within-window-constant tariffs and load-weighted otherwise.
    pub fn window_prices(&self, system: &SystemModel, b: BusIdx, r: Day) -> (f64, f64) {
        let offpeak = system.offpeak_window();
        let shape = &system.demand_p[b].0[r];
        let pick = |w: &[Hour]| {
            let prices: Vec<f64> = w.iter().map(|&t| self.value(b, r, t)).collect();
            let weights: Vec<f64> = w.iter().map(|&t| shape[t]).collect();
            shape_weighted_price(&prices, &weights)
        };
        (pick(&system.policy.peak_window), pick(&offpeak))
    }

    /// Plain window means used by the peak/off-peak coupling and the average
    /// tariff cap.
    pub fn window_means(&self, system: &SystemModel, b: BusIdx, r: Day) -> (f64, f64) {
        let offpeak = system.offpeak_window();
        let mean = |w: &[Hour]| {
            w.iter().map(|&t| self.value(b, r, t)).sum::<f64>() / w.len() as f64
        };
        (mean(&system.policy.peak_window), mean(&offpeak))
    }

    /// Check structural ties, per-bus bounds, and (for non-flat structures)
    /// the peak/off-peak coupling.
    pub fn validate(&self, system: &SystemModel) -> Result<(), DispatchError> {
        let nb = system.n_buses();
        if self.values.len() != nb {
            return Err(DispatchError::Tariff(format!(
                "tariff covers {} buses, system has {nb}",
                self.values.len()
            )));
        }
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
        for b in 0..nb {
            let s = &self.values[b];
            if s.days() != system.days || s.hours() != system.hours {
                return Err(DispatchError::Tariff(format!(
                    "tariff grid for bus {} is {}x{}, expected {}x{}",
                    system.buses[b].id,
                    s.days(),
                    s.hours(),
                    system.days,
                    system.hours
                )));
            }
            for r in 0..system.days {
                for t in 0..system.hours {
                    let v = s.at(r, t);
                    let bus = &system.buses[b];
                    if v < bus.tariff_min - 1e-9 || v > bus.tariff_max + 1e-9 {
                        return Err(DispatchError::Tariff(format!(
                            "tariff {v} at (bus {}, day {r}, hour {t}) outside [{}, {}]",
                            bus.id, bus.tariff_min, bus.tariff_max
                        )));
                    }
                    // rep-day tying holds for every structure
                    if !close(v, s.at(0, t)) {
                        return Err(DispatchError::Tariff(format!(
                            "bus {} hour {t}: tariff varies across rep days",
                            bus.id
                        )));
                    }
                }
            }
        }
        let in_peak = |t: &Hour| system.policy.peak_window.contains(t);
        match self.structure {
            TariffStructure::Flat => {
                let v0 = self.values[0].at(0, 0);
                for b in 0..nb {
                    for r in 0..system.days {
                        for t in 0..system.hours {
                            if !close(self.value(b, r, t), v0) {
                                return Err(DispatchError::Tariff(
                                    "flat structure requires one system-wide value".into(),
                                ));
                            }
                        }
                    }
                }
            }
            TariffStructure::TimeOfUse | TariffStructure::LocationalTimeOfUse => {
                for b in 0..nb {
                    let bref = if self.structure == TariffStructure::TimeOfUse { 0 } else { b };
                    for r in 0..system.days {
                        for t in 0..system.hours {
                            let t_ref = if in_peak(&t) {
                                system.policy.peak_window[0]
                            } else {
                                system.offpeak_window()[0]
                            };
                            if !close(self.value(b, r, t), self.value(bref, 0, t_ref)) {
                                return Err(DispatchError::Tariff(format!(
                                    "{} structure requires window-constant values",
                                    self.structure
                                )));
                            }
                        }
                    }
                }
            }
            TariffStructure::LocationalHourly => {}
        }
        if self.structure != TariffStructure::Flat {
            let nu = system.policy.tou_ratio;
            for b in 0..nb {
                for r in 0..system.days {
                    let (pp, pop) = self.window_means(system, b, r);
                    if pp < nu * pop - 1e-9 {
                        return Err(DispatchError::Tariff(format!(
                            "bus {} day {r}: peak mean {pp} below {nu} x off-peak mean {pop}",
                            system.buses[b].id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Flexible-demand profiles induced by a tariff: closed-form window split,
/// then within-window allocation along the inflexible shape. Indexed
/// [bus][rep day].
pub fn tariff_demand(
    system: &SystemModel,
    tariff: &TariffSchedule,
) -> Result<Vec<Vec<IntervalProfile>>, DispatchError> {
    let mut out = Vec::with_capacity(system.n_buses());
    for b in 0..system.n_buses() {
        let budget = system.flexible_budget(b);
        let alpha = system.buses[b].alpha;
        let mut per_day = Vec::with_capacity(system.days);
        for r in 0..system.days {
            let (pp, pop) = tariff.window_prices(system, b, r);
            let split = demand_split(alpha, budget, pp, pop)?;
            let profile =
                allocate_intervals(&split, &system.demand_p[b].0[r], &system.policy.peak_window)?;
            per_day.push(profile);
        }
        out.push(per_day);
    }
    Ok(out)
}

/// Variable and row offsets inside one per-interval dispatch program.
#[derive(Debug, Clone)]
pub struct LlLayout {
    pub n_buses: usize,
    pub n_gens: usize,
    pub n_lines: usize,
    pub import_p: usize,
    pub import_q: usize,
    gen_p0: usize,
    gen_q0: usize,
    flow_p0: usize,
    flow_q0: usize,
    u0: usize,
    pub n_vars: usize,
    balance_p0: usize,
    balance_q0: usize,
    volt0: usize,
    ref_row: usize,
    pub n_eqs: usize,
}

impl LlLayout {
    fn new(nb: usize, ng: usize, nl: usize) -> Self {
        let gen_p0 = 2;
        let gen_q0 = gen_p0 + ng;
        let flow_p0 = gen_q0 + ng;
        let flow_q0 = flow_p0 + nl;
        let u0 = flow_q0 + nl;
        let n_vars = u0 + nb;
        let balance_p0 = 0;
        let balance_q0 = nb;
        let volt0 = 2 * nb;
        let ref_row = volt0 + nl;
        LlLayout {
            n_buses: nb,
            n_gens: ng,
            n_lines: nl,
            import_p: 0,
            import_q: 1,
            gen_p0,
            gen_q0,
            flow_p0,
            flow_q0,
            u0,
            n_vars,
            balance_p0,
            balance_q0,
            volt0,
            ref_row,
            n_eqs: ref_row + 1,
        }
    }

    pub fn gen_p(&self, i: usize) -> usize {
        self.gen_p0 + i
    }
    pub fn gen_q(&self, i: usize) -> usize {
        self.gen_q0 + i
    }
    pub fn flow_p(&self, l: usize) -> usize {
        self.flow_p0 + l
    }
    pub fn flow_q(&self, l: usize) -> usize {
        self.flow_q0 + l
    }
    pub fn u(&self, b: usize) -> usize {
        self.u0 + b
    }
    pub fn balance_p(&self, b: usize) -> usize {
        self.balance_p0 + b
    }
    pub fn balance_q(&self, b: usize) -> usize {
        self.balance_q0 + b
    }
    pub fn voltage(&self, l: usize) -> usize {
        self.volt0 + l
    }
    pub fn voltage_ref(&self) -> usize {
        self.ref_row
    }
    pub fn cone(&self, l: usize) -> usize {
        l
    }
}

/// Row/variable counts, exposed for census checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlCensus {
    pub intervals: usize,
    pub vars_per_interval: usize,
    pub equalities_per_interval: usize,
    pub cone_rows_per_interval: usize,
    /// Finite bound sides (each is one complementarity pair in the
    /// equilibrium form).
    pub bound_sides_per_interval: usize,
}

/// Everything needed to solve dispatch for all intervals and reassemble
/// day-weighted totals without keeping a borrow of the model.
#[derive(Debug, Clone)]
struct LlMeta {
    days: usize,
    hours: usize,
    day_weights: Vec<f64>,
    gen_bus: Vec<BusIdx>,
    emission_rates: Vec<PolMap>,
    carbon_tax: f64,
}

/// The dispatch problem, decoupled into one convex program per interval.
#[derive(Debug, Clone)]
pub struct LlProgram {
    /// Subproblem for interval `r * hours + t`; objectives carry the rep-day
    /// weight, so reported duals are day-weighted too.
    pub subproblems: Vec<Nlp>,
    pub layout: LlLayout,
    pub census: LlCensus,
    pub demand: Vec<Vec<IntervalProfile>>,
    pub tariff: TariffSchedule,
    meta: LlMeta,
}

/// The voltage reference at the root bus, squared p.u.
pub const VOLTAGE_REF_SQ: f64 = 1.0;

pub fn build_ll(
    system: &SystemModel,
    tariff: &TariffSchedule,
    demand: &[Vec<IntervalProfile>],
) -> Result<LlProgram, DispatchError> {
    tariff.validate(system)?;
    if demand.len() != system.n_buses()
        || demand.iter().any(|d| {
            d.len() != system.days || d.iter().any(|p| p.values.len() != system.hours)
        })
    {
        return Err(DispatchError::Domain(
            "demand profiles must cover every (bus, rep day, hour)".into(),
        ));
    }
    let nb = system.n_buses();
    let ng = system.generators.len();
    let nl = system.lines.len();
    let layout = LlLayout::new(nb, ng, nl);
    let gamma = system.external_costs.carbon_tax;

    let mut subproblems = Vec::with_capacity(system.days * system.hours);
    for r in 0..system.days {
        let w = system.policy.day_weights[r];
        for t in 0..system.hours {
            let mut nlp = Nlp::default();
            let f_lim = system.interface.flow_limit;
            let p_lo = if system.interface.allow_export { -f_lim } else { 0.0 };
            nlp.add_var("import_p", p_lo, f_lim, 0.0);
            // reactive exchange is unpriced and unbounded; its balance dual is
            // pinned to zero by stationarity
            nlp.add_var("import_q", f64::NEG_INFINITY, f64::INFINITY, 0.0);
            for g in &system.generators {
                nlp.add_var(format!("g[{}]", g.id), g.p_min, g.p_max, 0.0);
            }
            for g in &system.generators {
                nlp.add_var(format!("q[{}]", g.id), g.q_min, g.q_max, 0.0);
            }
            for l in 0..nl {
                nlp.add_var(format!("fp[{l}]"), f64::NEG_INFINITY, f64::INFINITY, 0.0);
            }
            for l in 0..nl {
                nlp.add_var(format!("fq[{l}]"), f64::NEG_INFINITY, f64::INFINITY, 0.0);
            }
            for b in 0..nb {
                nlp.add_var(
                    format!("u[{}]", system.buses[b].id),
                    system.buses[b].v_min_sq,
                    system.buses[b].v_max_sq,
                    VOLTAGE_REF_SQ,
                );
            }
            debug_assert_eq!(nlp.n(), layout.n_vars);

            // nodal balances, supply minus demand
            for b in 0..nb {
                let load_p = system.demand_p[b].at(r, t) + demand[b][r].values[t];
                let mut row = QuadExpr::constant(-load_p);
                if b == system.root {
                    row.lin(layout.import_p, 1.0);
                }
                for &i in &system.gens_at[b] {
                    row.lin(layout.gen_p(i), 1.0);
                }
                if let Some((_, l)) = system.parent[b] {
                    row.lin(layout.flow_p(l), 1.0);
                }
                for &(_, l) in &system.children[b] {
                    row.lin(layout.flow_p(l), -1.0);
                }
                nlp.add_equality(format!("balance_p[{}]", system.buses[b].id), row);
            }
            for b in 0..nb {
                let mut row = QuadExpr::constant(-system.demand_q[b].at(r, t));
                if b == system.root {
                    row.lin(layout.import_q, 1.0);
                }
                for &i in &system.gens_at[b] {
                    row.lin(layout.gen_q(i), 1.0);
                }
                if let Some((_, l)) = system.parent[b] {
                    row.lin(layout.flow_q(l), 1.0);
                }
                for &(_, l) in &system.children[b] {
                    row.lin(layout.flow_q(l), -1.0);
                }
                nlp.add_equality(format!("balance_q[{}]", system.buses[b].id), row);
            }
            // voltage drops along lines, then the root reference
            for (l, line) in system.lines.iter().enumerate() {
                let mut row = QuadExpr::default();
                row.lin(layout.u(line.from), 1.0)
                    .lin(layout.u(line.to), -1.0)
                    .lin(layout.flow_p(l), -2.0 * line.resistance)
                    .lin(layout.flow_q(l), -2.0 * line.reactance);
                nlp.add_equality(format!("voltage[{l}]"), row);
            }
            let mut row = QuadExpr::constant(-VOLTAGE_REF_SQ);
            row.lin(layout.u(system.root), 1.0);
            nlp.add_equality("voltage_ref", row);

            for (l, line) in system.lines.iter().enumerate() {
                let mut c = QuadExpr::constant(line.apparent_limit * line.apparent_limit);
                c.quad(layout.flow_p(l), layout.flow_p(l), -1.0)
                    .quad(layout.flow_q(l), layout.flow_q(l), -1.0);
                nlp.add_inequality(format!("cone[{l}]"), c);
            }

            // day-weighted cost: wholesale procurement plus generation with
            // the carbon tax folded into marginal cost
            nlp.objective
                .quad
                .lin(layout.import_p, w * system.interface.lmp.at(r, t));
            for (i, g) in system.generators.iter().enumerate() {
                let c_eff = g.cost + gamma * g.emission_rates.get(Pollutant::Co2);
                nlp.objective.quad.lin(layout.gen_p(i), w * c_eff);
            }
            subproblems.push(nlp);
        }
    }

    // import_p (2, both clamp modes) + gen p/q boxes (4 per gen) + voltage
    // boxes (2 per bus); reactive exchange is free
    let bound_sides = 2 + 4 * ng + 2 * nb;
    Ok(LlProgram {
        census: LlCensus {
            intervals: subproblems.len(),
            vars_per_interval: layout.n_vars,
            equalities_per_interval: layout.n_eqs,
            cone_rows_per_interval: nl,
            bound_sides_per_interval: bound_sides,
        },
        subproblems,
        layout,
        demand: demand.to_vec(),
        tariff: tariff.clone(),
        meta: LlMeta {
            days: system.days,
            hours: system.hours,
            day_weights: system.policy.day_weights.clone(),
            gen_bus: system.generators.iter().map(|g| g.bus).collect(),
            emission_rates: system.generators.iter().map(|g| g.emission_rates).collect(),
            carbon_tax: gamma,
        },
    })
}

#[derive(Debug, Clone)]
pub struct DispatchSolution {
    pub import_p: Series,
    pub import_q: Series,
    pub gen_p: Vec<Series>,
    pub gen_q: Vec<Series>,
    pub flow_p: Vec<Series>,
    pub flow_q: Vec<Series>,
    pub voltage_sq: Vec<Series>,
    /// Day-weighted emission ledger per bus, tonnes.
    pub emissions_bus: Vec<PolMap>,
    /// Day-weighted feeder totals per pollutant, tonnes.
    pub emissions_total: PolMap,
    /// Day-weighted generation + procurement cost, $ (no carbon tax).
    pub dispatch_cost: f64,
}

/// Multipliers of the dispatch problem, day-weighted like the objective.
/// Naming follows the equilibrium system: `lambda` for balances, `delta` and
/// `theta` for generator P/Q boxes, `mu` for voltage boxes, `tau` for the
/// interface bounds, `beta` for voltage-drop rows, `eta` for the line disk,
/// `psi`/`chi` for the emission ledger rows.
#[derive(Debug, Clone)]
pub struct DispatchDuals {
    pub lambda_p: Vec<Series>,
    pub lambda_q: Vec<Series>,
    pub delta_lo: Vec<Series>,
    pub delta_hi: Vec<Series>,
    pub theta_lo: Vec<Series>,
    pub theta_hi: Vec<Series>,
    pub mu_lo: Vec<Series>,
    pub mu_hi: Vec<Series>,
    pub tau_lo: Series,
    pub tau_hi: Series,
    pub beta: Vec<Series>,
    pub beta_ref: Series,
    /// Scalar disk multiplier per line, nonnegative.
    pub eta_scalar: Vec<Series>,
    /// Ledger multipliers: psi[bus].get(CO2) = -gamma, zero otherwise.
    pub psi: Vec<PolMap>,
    pub chi: PolMap,
}

impl DispatchDuals {
    /// The dual second-order-cone member for a line and interval,
    /// `(eta_s, eta_p, eta_q) = (2 z S, -2 z f_p, -2 z f_q)`: it lies in the
    /// dual cone and is orthogonal to `(S, f_p, f_q)` exactly when the disk
    /// complementarity holds.
    pub fn eta_vector(
        &self,
        sol: &DispatchSolution,
        line_limit: f64,
        l: usize,
        r: Day,
        t: Hour,
    ) -> [f64; 3] {
        let z = self.eta_scalar[l].at(r, t);
        [
            2.0 * z * line_limit,
            -2.0 * z * sol.flow_p[l].at(r, t),
            -2.0 * z * sol.flow_q[l].at(r, t),
        ]
    }
}

#[derive(Debug, Clone, Default)]
pub struct SolveStats {
    pub iterations: usize,
    pub max_kkt_error: f64,
    pub max_balance_residual: f64,
    /// Largest relative duality gap across subproblems.
    pub max_rel_gap: f64,
}

#[derive(Debug, Clone)]
pub struct LlSolution {
    pub solution: DispatchSolution,
    pub duals: DispatchDuals,
    pub stats: SolveStats,
}

pub fn solve_ll(program: &LlProgram) -> Result<LlSolution, DispatchError> {
    let meta = &program.meta;
    let lay = &program.layout;
    let (days, hours) = (meta.days, meta.hours);
    let opts = IpmOptions { max_iter: 200, ..Default::default() };

    let results: Vec<Result<ipm::IpmResult, DispatchError>> = program
        .subproblems
        .par_iter()
        .enumerate()
        .map(|(k, nlp)| {
            let (r, t) = (k / hours, k % hours);
            let res = ipm::solve(nlp, None, &opts);
            match &res.status {
                IpmStatus::LocallyInfeasible(rows) => {
                    Err(DispatchError::Infeasible { day: r, hour: t, rows: rows.clone() })
                }
                IpmStatus::NumericFailure(m) => {
                    Err(DispatchError::Numeric { day: r, hour: t, message: m.clone() })
                }
                _ => Ok(res),
            }
        })
        .collect();

    let zero = || Series::zeros(days, hours);
    let nb = lay.n_buses;
    let ng = lay.n_gens;
    let nl = lay.n_lines;
    let mut sol = DispatchSolution {
        import_p: zero(),
        import_q: zero(),
        gen_p: vec![zero(); ng],
        gen_q: vec![zero(); ng],
        flow_p: vec![zero(); nl],
        flow_q: vec![zero(); nl],
        voltage_sq: vec![zero(); nb],
        emissions_bus: vec![PolMap::default(); nb],
        emissions_total: PolMap::default(),
        dispatch_cost: 0.0,
    };
    let mut chi = PolMap::default();
    chi.set(Pollutant::Co2, -meta.carbon_tax);
    let mut duals = DispatchDuals {
        lambda_p: vec![zero(); nb],
        lambda_q: vec![zero(); nb],
        delta_lo: vec![zero(); ng],
        delta_hi: vec![zero(); ng],
        theta_lo: vec![zero(); ng],
        theta_hi: vec![zero(); ng],
        mu_lo: vec![zero(); nb],
        mu_hi: vec![zero(); nb],
        tau_lo: zero(),
        tau_hi: zero(),
        beta: vec![zero(); nl],
        beta_ref: zero(),
        eta_scalar: vec![zero(); nl],
        psi: vec![chi; nb],
        chi,
    };
    let mut stats = SolveStats::default();

    for (k, res) in results.into_iter().enumerate() {
        let res = res?;
        let (r, t) = (k / hours, k % hours);
        let nlp = &program.subproblems[k];
        stats.iterations += res.iterations;
        stats.max_kkt_error = stats.max_kkt_error.max(res.kkt_error);
        stats.max_balance_residual = stats.max_balance_residual.max(res.constraint_violation);
        // duality gap from complementarity mass, in objective units
        let mut gap = 0.0;
        let mut hv = Vec::new();
        nlp.eval_equalities(&res.x, &mut hv);
        for (j, h) in hv.iter().enumerate() {
            gap += (res.y[j] * h).abs();
        }
        let mut cv = Vec::new();
        nlp.eval_inequalities(&res.x, &mut cv);
        for (j, c) in cv.iter().enumerate() {
            gap += (res.w[j] * c).abs();
        }
        for i in 0..nlp.n() {
            if nlp.lb[i].is_finite() {
                gap += res.zl[i] * (res.x[i] - nlp.lb[i]);
            }
            if nlp.ub[i].is_finite() {
                gap += res.zu[i] * (nlp.ub[i] - res.x[i]);
            }
        }
        stats.max_rel_gap = stats.max_rel_gap.max(gap / (1.0 + res.objective.abs()));

        let w_day = meta.day_weights[r];
        sol.import_p.0[r][t] = res.x[lay.import_p];
        sol.import_q.0[r][t] = res.x[lay.import_q];
        for i in 0..ng {
            let g = res.x[lay.gen_p(i)];
            sol.gen_p[i].0[r][t] = g;
            sol.gen_q[i].0[r][t] = res.x[lay.gen_q(i)];
            for y in Pollutant::ALL {
                let e = w_day * meta.emission_rates[i].get(y) * g;
                let ledger = &mut sol.emissions_bus[meta.gen_bus[i]];
                let prev = ledger.get(y);
                ledger.set(y, prev + e);
            }
        }
        for l in 0..nl {
            sol.flow_p[l].0[r][t] = res.x[lay.flow_p(l)];
            sol.flow_q[l].0[r][t] = res.x[lay.flow_q(l)];
            duals.beta[l].0[r][t] = res.y[lay.voltage(l)];
            duals.eta_scalar[l].0[r][t] = res.w[lay.cone(l)];
        }
        for b in 0..nb {
            sol.voltage_sq[b].0[r][t] = res.x[lay.u(b)];
            duals.lambda_p[b].0[r][t] = res.y[lay.balance_p(b)];
            duals.lambda_q[b].0[r][t] = res.y[lay.balance_q(b)];
            duals.mu_lo[b].0[r][t] = res.zl[lay.u(b)];
            duals.mu_hi[b].0[r][t] = res.zu[lay.u(b)];
        }
        for i in 0..ng {
            duals.delta_lo[i].0[r][t] = res.zl[lay.gen_p(i)];
            duals.delta_hi[i].0[r][t] = res.zu[lay.gen_p(i)];
            duals.theta_lo[i].0[r][t] = res.zl[lay.gen_q(i)];
            duals.theta_hi[i].0[r][t] = res.zu[lay.gen_q(i)];
        }
        duals.tau_lo.0[r][t] = res.zl[lay.import_p];
        duals.tau_hi.0[r][t] = res.zu[lay.import_p];
        duals.beta_ref.0[r][t] = res.y[lay.voltage_ref()];
        // cost without the folded carbon tax: subtract it back out
        let mut carbon = 0.0;
        for i in 0..ng {
            carbon += meta.carbon_tax
                * meta.emission_rates[i].get(Pollutant::Co2)
                * res.x[lay.gen_p(i)];
        }
        sol.dispatch_cost += res.objective - w_day * carbon;
    }
    for b in 0..nb {
        for y in Pollutant::ALL {
            sol.emissions_total.set(y, sol.emissions_total.get(y) + sol.emissions_bus[b].get(y));
        }
    }
    Ok(LlSolution { solution: sol, duals, stats })
}

/// Regulator-side scalar quantities at a (tariff, demand, dispatch) triple.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ObjectiveBreakdown {
    /// Economic welfare: revenue + consumer utility - payments - operating
    /// cost - daily capital cost. Revenue and payments are both evaluated
    /// (they cancel identically).
    pub f_ew: f64,
    /// Health damages from non-CO2 pollutants, on-feeder and imported.
    pub f_h: f64,
    /// Unpriced carbon: (scc - tax) x total CO2 (imported + feeder).
    pub f_en: f64,
    /// Revenue - operating cost - carbon tax payment.
    pub utility_profit: f64,
    pub revenue: f64,
    pub op_cost: f64,
    /// Weighted composite with the policy weights: w . (-f_ew, f_h, f_en).
    pub scalarized: f64,
    pub consumer_utility: f64,
    pub capital_cost: f64,
    pub emissions_feeder: PolMap,
    pub emissions_interface: PolMap,
}

pub fn eval_objectives(
    system: &SystemModel,
    tariff: &TariffSchedule,
    demand: &[Vec<IntervalProfile>],
    dispatch: &DispatchSolution,
) -> Result<ObjectiveBreakdown, DispatchError> {
    let weights = &system.policy.day_weights;
    let mut revenue = 0.0;
    let mut utility = 0.0;
    for b in 0..system.n_buses() {
        for r in 0..system.days {
            let w = weights[r];
            for t in 0..system.hours {
                let served = system.demand_p[b].at(r, t) + demand[b][r].values[t];
                revenue += w * tariff.value(b, r, t) * served;
            }
            let peak = &system.policy.peak_window;
            let offpeak = system.offpeak_window();
            let tot = |win: &[Hour]| -> f64 {
                win.iter()
                    .map(|&t| system.demand_p[b].at(r, t) + demand[b][r].values[t])
                    .sum()
            };
            utility += w
                * crate::demand::cobb_douglas_utility(
                    tot(peak),
                    tot(&offpeak),
                    system.buses[b].alpha,
                );
        }
    }
    let payments = revenue;
    let mut op_cost = 0.0;
    for r in 0..system.days {
        let w = weights[r];
        for t in 0..system.hours {
            op_cost += w * system.interface.lmp.at(r, t) * dispatch.import_p.at(r, t);
            for (i, g) in system.generators.iter().enumerate() {
                op_cost += w * g.cost * dispatch.gen_p[i].at(r, t);
            }
        }
    }
    let capital = system.policy.capital_cost_daily().map_err(|e| DispatchError::Domain(e.to_string()))?;
    let f_ew = revenue + utility - payments - op_cost - capital;

    let mut f_h = 0.0;
    let mut emissions_interface = PolMap::default();
    for y in Pollutant::ALL {
        emissions_interface.set(y, system.interface.emissions_total(y, weights));
    }
    for y in Pollutant::ALL {
        if y == Pollutant::Co2 {
            continue;
        }
        for b in 0..system.n_buses() {
            f_h += system.external_costs.health_cost[b].get(y) * dispatch.emissions_bus[b].get(y);
        }
        f_h += system.interface.external_cost.get(y) * emissions_interface.get(y);
    }
    let gamma = system.external_costs.carbon_tax;
    let co2_total =
        emissions_interface.get(Pollutant::Co2) + dispatch.emissions_total.get(Pollutant::Co2);
    let f_en = (system.external_costs.scc - gamma) * co2_total;
    let utility_profit =
        revenue - op_cost - gamma * dispatch.emissions_total.get(Pollutant::Co2);
    let om = &system.policy.weights;
    let scalarized = om[0] * (-f_ew) + om[1] * f_h + om[2] * f_en;
    Ok(ObjectiveBreakdown {
        f_ew,
        f_h,
        f_en,
        utility_profit,
        revenue,
        op_cost,
        scalarized,
        consumer_utility: utility,
        capital_cost: capital,
        emissions_feeder: dispatch.emissions_total,
        emissions_interface,
    })
}

/// Daily tariff spend per household at a bus, and the cap it must respect:
/// `kappa x` daily income.
pub fn energy_burden(
    system: &SystemModel,
    tariff: &TariffSchedule,
    demand: &[Vec<IntervalProfile>],
    bus: BusIdx,
) -> (f64, f64) {
    let households = system.buses[bus].households();
    let mut spend = 0.0;
    for r in 0..system.days {
        let w = system.policy.day_weights[r];
        for t in 0..system.hours {
            let served = system.demand_p[bus].at(r, t) + demand[bus][r].values[t];
            spend += w * tariff.value(bus, r, t) * served;
        }
    }
    (spend / households, system.burden_bound(bus))
}

/// Revenue minus allowed return on capital minus operating cost; the
/// adequacy rule requires this to vanish.
pub fn revenue_adequacy_residual(
    system: &SystemModel,
    tariff: &TariffSchedule,
    demand: &[Vec<IntervalProfile>],
    dispatch: &DispatchSolution,
) -> Result<f64, DispatchError> {
    let b = eval_objectives(system, tariff, demand, dispatch)?;
    let capital = b.capital_cost;
    Ok(b.revenue - (1.0 + system.policy.rate_of_return) * capital - b.op_cost)
}

/// Day-weighted mean of the two window means across buses and hours; the
/// tariff cap bounds this by `2 x avg_tariff_cap`.
pub fn average_tariff(system: &SystemModel, tariff: &TariffSchedule) -> f64 {
    let wsum: f64 = system.policy.day_weights.iter().sum();
    let mut acc = 0.0;
    for r in 0..system.days {
        let w = system.policy.day_weights[r] / wsum;
        let nb = system.n_buses() as f64;
        let mut peak_mean = 0.0;
        let mut off_mean = 0.0;
        for b in 0..system.n_buses() {
            let (pp, pop) = tariff.window_means(system, b, r);
            peak_mean += pp / nb;
            off_mean += pop / nb;
        }
        acc += w * (peak_mean + off_mean);
    }
    acc
}
