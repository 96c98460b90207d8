//! Network, fleet, demand, price, and policy data for one distribution feeder.
//!
//! A dataset is a directory of five files: `network.json` (buses, lines,
//! generators, wholesale interface), `demand.csv` (inflexible load per bus,
//! representative day, and hour), `lmp.csv` (wholesale price series),
//! `external_costs.csv` (damage prices per pollutant and bus, the carbon tax,
//! and the social cost of carbon), and `policy.json` (regulatory knobs).
//! [`load_system`] wires the topology, validates every invariant, and returns
//! an immutable [`SystemModel`]; [`save_system`] writes the same format back.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

/// Hours per representative day are data-driven; indices are `0..hours`.
pub type Hour = usize;
/// Representative-day index, `0..days`.
pub type Day = usize;
/// Dense bus index into [`SystemModel::buses`].
pub type BusIdx = usize;
/// Dense line index into [`SystemModel::lines`].
pub type LineIdx = usize;
/// Dense generator index into [`SystemModel::generators`].
pub type GenIdx = usize;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("topology error: {0}")]
    Topology(String),
    #[error("domain error: {0}")]
    Domain(String),
}

fn validation(msg: impl Into<String>) -> SystemError {
    SystemError::Validation(msg.into())
}

/// The five priced pollutants, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pollutant {
    Co2,
    So2,
    Nox,
    Ch4,
    Pm25,
}

impl Pollutant {
    pub const ALL: [Pollutant; 5] = [
        Pollutant::Co2,
        Pollutant::So2,
        Pollutant::Nox,
        Pollutant::Ch4,
        Pollutant::Pm25,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        match self {
            Pollutant::Co2 => 0,
            Pollutant::So2 => 1,
            Pollutant::Nox => 2,
            Pollutant::Ch4 => 3,
            Pollutant::Pm25 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pollutant::Co2 => "CO2",
            Pollutant::So2 => "SO2",
            Pollutant::Nox => "NOx",
            Pollutant::Ch4 => "CH4",
            Pollutant::Pm25 => "PM2.5",
        }
    }
}

impl fmt::Display for Pollutant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pollutant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "CO2" | "co2" => Ok(Pollutant::Co2),
            "SO2" | "so2" => Ok(Pollutant::So2),
            "NOx" | "NOX" | "nox" => Ok(Pollutant::Nox),
            "CH4" | "ch4" => Ok(Pollutant::Ch4),
            "PM2.5" | "PM25" | "pm2.5" | "pm25" => Ok(Pollutant::Pm25),
            other => Err(format!("unknown pollutant {other:?}")),
        }
    }
}

/// One value per pollutant, canonically ordered; serializes as a name-keyed map.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PolMap(pub [f64; Pollutant::COUNT]);

impl PolMap {
    pub fn get(&self, y: Pollutant) -> f64 {
        self.0[y.index()]
    }
    pub fn set(&mut self, y: Pollutant, v: f64) {
        self.0[y.index()] = v;
    }
}

impl Serialize for PolMap {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        let mut map = BTreeMap::new();
        for y in Pollutant::ALL {
            map.insert(y.name().to_string(), self.0[y.index()]);
        }
        map.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for PolMap {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let raw = BTreeMap::<String, f64>::deserialize(de)?;
        let mut out = PolMap::default();
        for (k, v) in raw {
            let y = Pollutant::from_str(&k).map_err(serde::de::Error::custom)?;
            out.set(y, v);
        }
        Ok(out)
    }
}

/// A scalar series over the representative-day-by-hour grid, `values[r][t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series(pub Vec<Vec<f64>>);

impl Series {
    pub fn zeros(days: usize, hours: usize) -> Self {
        Series(vec![vec![0.0; hours]; days])
    }
    pub fn at(&self, r: Day, t: Hour) -> f64 {
        self.0[r][t]
    }
    pub fn days(&self) -> usize {
        self.0.len()
    }
    pub fn hours(&self) -> usize {
        self.0.first().map_or(0, Vec::len)
    }
    fn check_grid(&self, days: usize, hours: usize, what: &str) -> Result<(), SystemError> {
        if self.days() != days || self.0.iter().any(|d| d.len() != hours) {
            return Err(validation(format!(
                "{what} series must cover the full {days} day x {hours} hour grid"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: String,
    /// Residents served from this bus (P_b).
    pub population: f64,
    /// Mean residents per household (H_b); households = population / household_size.
    pub household_size: f64,
    /// Mean annual household income, $/yr.
    pub income: f64,
    /// Cobb-Douglas peak budget share of flexible demand.
    pub alpha: f64,
    /// Squared-voltage bounds, p.u.^2.
    pub v_min_sq: f64,
    pub v_max_sq: f64,
    /// Retail tariff bounds at this bus, $/MWh.
    pub tariff_min: f64,
    pub tariff_max: f64,
}

impl Bus {
    /// Number of households behind the bus.
    pub fn households(&self) -> f64 {
        self.population / self.household_size
    }
    /// Mean household income prorated to one day, $/day.
    pub fn daily_income(&self) -> f64 {
        self.income / 365.0
    }
}

/// Distribution line, oriented root-to-leaf after topology wiring.
///
/// `resistance`/`reactance` are voltage-drop coefficients in p.u.^2 per MW
/// (MVAr): u_child = u_parent - 2 (resistance * f_p + reactance * f_q).
#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from: BusIdx,
    pub to: BusIdx,
    pub resistance: f64,
    pub reactance: f64,
    /// Apparent-power rating S, MVA; flows satisfy f_p^2 + f_q^2 <= S^2.
    pub apparent_limit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub id: String,
    pub bus: BusIdx,
    /// Marginal cost C_i, $/MWh.
    pub cost: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Emission factors R_{y,i}, tonnes per MWh.
    pub emission_rates: PolMap,
}

/// Transmission-distribution interface: wholesale prices, import limit, and
/// the (parametric) emissions and damage prices attributed to imports.
#[derive(Debug, Clone, PartialEq)]
pub struct WholesaleInterface {
    /// Import limit F^max at the root, MW.
    pub flow_limit: f64,
    /// When false (default), import is bounded in [0, F^max]; when true, in
    /// [-F^max, F^max].
    pub allow_export: bool,
    /// Locational marginal price, $/MWh per (day, hour).
    pub lmp: Series,
    /// Emissions attributed to the interface, tonnes per (day, hour).
    pub transmission_emissions: Vec<Series>,
    /// Damage prices at the interface, $/tonne per pollutant.
    pub external_cost: PolMap,
}

impl WholesaleInterface {
    /// Day-weighted total interface emissions of pollutant `y`, tonnes.
    pub fn emissions_total(&self, y: Pollutant, day_weights: &[f64]) -> f64 {
        self.transmission_emissions[y.index()]
            .0
            .iter()
            .zip(day_weights)
            .map(|(day, w)| w * day.iter().sum::<f64>())
            .sum()
    }
}

/// Damage prices for pollutants emitted inside the feeder, plus the carbon
/// price pair: levied tax and social cost.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalCosts {
    /// health_cost[bus].get(y) = damage price of pollutant y emitted at bus, $/t.
    pub health_cost: Vec<PolMap>,
    /// Carbon tax the utility pays, $/t.
    pub carbon_tax: f64,
    /// Social cost of carbon, $/t; the objective prices CO2 at scc - carbon_tax.
    pub scc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulatorPolicy {
    /// Energy-burden cap as a fraction of household income (kappa).
    pub eb_regulator: f64,
    /// Flexible-spending budget fraction (kappa'); `None` ties it to
    /// `eb_regulator`.
    #[serde(default)]
    pub eb_household: Option<f64>,
    /// Peak/off-peak coupling factor nu in pi_peak >= nu * pi_offpeak.
    pub tou_ratio: f64,
    /// Allowed rate of return upsilon on capital.
    pub rate_of_return: f64,
    /// Present value of the utility's capital stock, $.
    pub capital_pv: f64,
    pub capital_years: u32,
    pub capital_rate: f64,
    /// Cap on the system-average tariff, $/MWh; the constraint bounds the sum
    /// of window means by 2 * avg_tariff_cap.
    pub avg_tariff_cap: f64,
    /// Hours belonging to the peak window T1; the complement is T2.
    pub peak_window: Vec<Hour>,
    /// Objective weights (economic welfare, health, environment).
    pub weights: [f64; 3],
    /// One weight per representative day.
    pub day_weights: Vec<f64>,
}

impl RegulatorPolicy {
    /// Household flexible budget fraction; defaults to the regulator cap.
    pub fn eb_household(&self) -> f64 {
        self.eb_household.unwrap_or(self.eb_regulator)
    }
    /// Daily prorated capital cost C^cap, $/day.
    pub fn capital_cost_daily(&self) -> Result<f64, SystemError> {
        derive_annuity(self.capital_pv, self.capital_years, self.capital_rate)
    }
}

/// A validated, immutable feeder model. Topology fields (`parent`,
/// `children`, `gens_at`) are derived from the line list at load time.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub interface: WholesaleInterface,
    pub external_costs: ExternalCosts,
    pub policy: RegulatorPolicy,
    pub root: BusIdx,
    pub hours: usize,
    pub days: usize,
    /// Inflexible active demand, MW: demand_p[bus] is a (day, hour) series.
    pub demand_p: Vec<Series>,
    /// Inflexible reactive demand, MVAr.
    pub demand_q: Vec<Series>,
    /// parent[b] = (parent bus, connecting line) for non-root buses.
    pub parent: Vec<Option<(BusIdx, LineIdx)>>,
    /// children[b] = (child bus, connecting line) pairs.
    pub children: Vec<Vec<(BusIdx, LineIdx)>>,
    /// Generators connected at each bus.
    pub gens_at: Vec<Vec<GenIdx>>,
}

impl SystemModel {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }
    pub fn bus_index(&self, id: &str) -> Option<BusIdx> {
        self.buses.iter().position(|b| b.id == id)
    }
    /// Off-peak window: hours not in the policy's peak window.
    pub fn offpeak_window(&self) -> Vec<Hour> {
        (0..self.hours)
            .filter(|t| !self.policy.peak_window.contains(t))
            .collect()
    }
    /// Inflexible window energy of a bus on one day, MWh.
    pub fn inflexible_window_energy(&self, b: BusIdx, r: Day, window: &[Hour]) -> f64 {
        window.iter().map(|&t| self.demand_p[b].at(r, t)).sum()
    }
    /// Household flexible daily budget at a bus, $/day (aggregate over the bus).
    pub fn flexible_budget(&self, b: BusIdx) -> f64 {
        self.policy.eb_household() * self.buses[b].daily_income() * self.buses[b].households()
    }
    /// Daily energy-burden cap per household at a bus, $/day.
    pub fn burden_bound(&self, b: BusIdx) -> f64 {
        self.policy.eb_regulator * self.buses[b].daily_income()
    }

    /// Validate an in-memory model: derives topology (`parent`, `children`,
    /// `gens_at`), orients lines away from the root, and checks every
    /// invariant that [`load_system`] enforces on files.
    pub fn assemble(model: SystemModel) -> Result<SystemModel, SystemError> {
        wire_and_validate(model)
    }
}

/// Annualized capital recovery prorated to one day:
/// `pv * rate / (1 - (1+rate)^-years) / 365`, straight-line when `rate = 0`.
pub fn derive_annuity(capital_pv: f64, years: u32, rate: f64) -> Result<f64, SystemError> {
    if capital_pv < 0.0 || rate < 0.0 {
        return Err(SystemError::Domain(
            "annuity requires nonnegative principal and rate".into(),
        ));
    }
    if years == 0 {
        return Err(SystemError::Domain("annuity horizon must be >= 1 year".into()));
    }
    let annual = if rate == 0.0 {
        capital_pv / years as f64
    } else {
        capital_pv * rate / (1.0 - (1.0 + rate).powi(-(years as i32)))
    };
    Ok(annual / 365.0)
}

// ---------------------------------------------------------------------------
// File schemas
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    root: String,
    buses: Vec<Bus>,
    lines: Vec<LineFile>,
    generators: Vec<GeneratorFile>,
    interface: InterfaceFile,
}

#[derive(Serialize, Deserialize)]
struct LineFile {
    from: String,
    to: String,
    resistance: f64,
    reactance: f64,
    apparent_limit: f64,
}

#[derive(Serialize, Deserialize)]
struct GeneratorFile {
    id: String,
    bus: String,
    cost: f64,
    p_min: f64,
    p_max: f64,
    q_min: f64,
    q_max: f64,
    emission_rates: PolMap,
}

#[derive(Serialize, Deserialize)]
struct InterfaceFile {
    flow_limit: f64,
    #[serde(default)]
    allow_export: bool,
    transmission_emissions: BTreeMap<String, Series>,
}

#[derive(Deserialize)]
struct DemandRow {
    bus: String,
    rep_day: usize,
    hour: usize,
    p_mw: f64,
    q_mvar: f64,
}

#[derive(Deserialize)]
struct LmpRow {
    rep_day: usize,
    hour: usize,
    lmp_usd_per_mwh: f64,
}

#[derive(Deserialize)]
struct CostRow {
    pollutant: String,
    bus: String,
    usd_per_tonne: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SystemError + '_ {
    move |source| SystemError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, message: impl ToString) -> SystemError {
    SystemError::Parse {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

/// Load and validate a dataset directory.
pub fn load_system(dir: &Path) -> Result<SystemModel, SystemError> {
    let net_path = dir.join("network.json");
    let raw = std::fs::read_to_string(&net_path).map_err(io_err(&net_path))?;
    let net: NetworkFile =
        serde_json::from_str(&raw).map_err(|e| parse_err(&net_path, e))?;

    let pol_path = dir.join("policy.json");
    let raw = std::fs::read_to_string(&pol_path).map_err(io_err(&pol_path))?;
    let policy: RegulatorPolicy =
        serde_json::from_str(&raw).map_err(|e| parse_err(&pol_path, e))?;

    let buses = net.buses;
    let bus_index = |id: &str| -> Result<BusIdx, SystemError> {
        buses
            .iter()
            .position(|b| b.id == id)
            .ok_or_else(|| validation(format!("unknown bus id {id:?}")))
    };
    let root = bus_index(&net.root)?;

    let mut lines = Vec::with_capacity(net.lines.len());
    for l in &net.lines {
        lines.push(Line {
            from: bus_index(&l.from)?,
            to: bus_index(&l.to)?,
            resistance: l.resistance,
            reactance: l.reactance,
            apparent_limit: l.apparent_limit,
        });
    }

    let mut generators = Vec::with_capacity(net.generators.len());
    for g in net.generators {
        generators.push(Generator {
            bus: bus_index(&g.bus)?,
            id: g.id,
            cost: g.cost,
            p_min: g.p_min,
            p_max: g.p_max,
            q_min: g.q_min,
            q_max: g.q_max,
            emission_rates: g.emission_rates,
        });
    }

    // Demand grid; dimensions are inferred from the file and must be dense.
    let dem_path = dir.join("demand.csv");
    let mut rdr = csv::Reader::from_path(&dem_path).map_err(|e| parse_err(&dem_path, e))?;
    let mut cells: Vec<(BusIdx, usize, usize, f64, f64)> = Vec::new();
    let mut days = 0usize;
    let mut hours = 0usize;
    for row in rdr.deserialize::<DemandRow>() {
        let row = row.map_err(|e| parse_err(&dem_path, e))?;
        let b = bus_index(&row.bus)?;
        days = days.max(row.rep_day + 1);
        hours = hours.max(row.hour + 1);
        cells.push((b, row.rep_day, row.hour, row.p_mw, row.q_mvar));
    }
    if cells.is_empty() {
        return Err(validation("demand.csv is empty"));
    }
    let mut demand_p = vec![Series::zeros(days, hours); buses.len()];
    let mut demand_q = vec![Series::zeros(days, hours); buses.len()];
    let mut seen = vec![false; buses.len() * days * hours];
    for (b, r, t, p, q) in cells {
        let k = (b * days + r) * hours + t;
        if seen[k] {
            return Err(validation(format!(
                "demand.csv: duplicate cell (bus {}, day {r}, hour {t})",
                buses[b].id
            )));
        }
        seen[k] = true;
        demand_p[b].0[r][t] = p;
        demand_q[b].0[r][t] = q;
    }
    if !seen.iter().all(|&s| s) {
        return Err(validation(
            "demand.csv must cover the full bus x day x hour grid",
        ));
    }

    // LMP grid.
    let lmp_path = dir.join("lmp.csv");
    let mut rdr = csv::Reader::from_path(&lmp_path).map_err(|e| parse_err(&lmp_path, e))?;
    let mut lmp = Series::zeros(days, hours);
    let mut seen = vec![false; days * hours];
    for row in rdr.deserialize::<LmpRow>() {
        let row = row.map_err(|e| parse_err(&lmp_path, e))?;
        if row.rep_day >= days || row.hour >= hours {
            return Err(validation(format!(
                "lmp.csv index (day {}, hour {}) outside the demand grid",
                row.rep_day, row.hour
            )));
        }
        let k = row.rep_day * hours + row.hour;
        if seen[k] {
            return Err(validation(format!(
                "lmp.csv: duplicate cell (day {}, hour {})",
                row.rep_day, row.hour
            )));
        }
        seen[k] = true;
        lmp.0[row.rep_day][row.hour] = row.lmp_usd_per_mwh;
    }
    if !seen.iter().all(|&s| s) {
        return Err(validation("lmp.csv must cover the full day x hour grid"));
    }

    // External costs: per-(pollutant, bus) rows, "T" rows for the interface,
    // and the two carbon price scalars.
    let cost_path = dir.join("external_costs.csv");
    let mut rdr = csv::Reader::from_path(&cost_path).map_err(|e| parse_err(&cost_path, e))?;
    let mut health_cost = vec![PolMap::default(); buses.len()];
    let mut interface_cost = PolMap::default();
    let mut carbon_tax = None;
    let mut scc = None;
    for row in rdr.deserialize::<CostRow>() {
        let row = row.map_err(|e| parse_err(&cost_path, e))?;
        match row.pollutant.as_str() {
            "gamma" => carbon_tax = Some(row.usd_per_tonne),
            "gamma_sc" => scc = Some(row.usd_per_tonne),
            name => {
                let y = Pollutant::from_str(name).map_err(|e| parse_err(&cost_path, e))?;
                if row.bus == "T" {
                    interface_cost.set(y, row.usd_per_tonne);
                } else {
                    health_cost[bus_index(&row.bus)?].set(y, row.usd_per_tonne);
                }
            }
        }
    }
    let carbon_tax =
        carbon_tax.ok_or_else(|| validation("external_costs.csv is missing the gamma row"))?;
    let scc = scc.ok_or_else(|| validation("external_costs.csv is missing the gamma_sc row"))?;

    let mut transmission_emissions = Vec::with_capacity(Pollutant::COUNT);
    for y in Pollutant::ALL {
        let series = net
            .interface
            .transmission_emissions
            .get(y.name())
            .cloned()
            .unwrap_or_else(|| Series::zeros(days, hours));
        transmission_emissions.push(series);
    }

    let model = SystemModel {
        interface: WholesaleInterface {
            flow_limit: net.interface.flow_limit,
            allow_export: net.interface.allow_export,
            lmp,
            transmission_emissions,
            external_cost: interface_cost,
        },
        external_costs: ExternalCosts {
            health_cost,
            carbon_tax,
            scc,
        },
        policy,
        root,
        hours,
        days,
        demand_p,
        demand_q,
        parent: Vec::new(),
        children: Vec::new(),
        gens_at: Vec::new(),
        buses,
        lines,
        generators,
    };
    wire_and_validate(model)
}

/// Re-derive topology and check every model invariant.
fn wire_and_validate(mut m: SystemModel) -> Result<SystemModel, SystemError> {
    let n = m.buses.len();
    if n == 0 {
        return Err(validation("model has no buses"));
    }
    {
        let mut ids: Vec<&str> = m.buses.iter().map(|b| b.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(validation("duplicate bus ids"));
        }
    }
    if m.lines.len() != n - 1 {
        return Err(SystemError::Topology(format!(
            "radial feeder needs {} lines for {} buses, found {}",
            n - 1,
            n,
            m.lines.len()
        )));
    }

    // Orient lines away from the root by BFS; detect cycles and islands.
    let mut adjacency: Vec<Vec<(BusIdx, LineIdx)>> = vec![Vec::new(); n];
    for (k, l) in m.lines.iter().enumerate() {
        adjacency[l.from].push((l.to, k));
        adjacency[l.to].push((l.from, k));
    }
    let mut parent: Vec<Option<(BusIdx, LineIdx)>> = vec![None; n];
    let mut children: Vec<Vec<(BusIdx, LineIdx)>> = vec![Vec::new(); n];
    let mut visited = vec![false; n];
    let mut queue = std::collections::VecDeque::from([m.root]);
    visited[m.root] = true;
    while let Some(b) = queue.pop_front() {
        for &(other, k) in &adjacency[b] {
            if visited[other] {
                if parent[b].map(|(p, _)| p) != Some(other) {
                    return Err(SystemError::Topology(format!(
                        "cycle through line {} ({} - {})",
                        k, m.buses[m.lines[k].from].id, m.buses[m.lines[k].to].id
                    )));
                }
                continue;
            }
            visited[other] = true;
            parent[other] = Some((b, k));
            children[b].push((other, k));
            if m.lines[k].from != b {
                // store lines oriented parent -> child
                let l = &mut m.lines[k];
                std::mem::swap(&mut l.from, &mut l.to);
            }
            queue.push_back(other);
        }
    }
    if let Some(b) = (0..n).find(|&b| !visited[b]) {
        return Err(SystemError::Topology(format!(
            "bus {} is not connected to the root",
            m.buses[b].id
        )));
    }
    m.parent = parent;
    m.children = children;

    m.gens_at = vec![Vec::new(); n];
    for (i, g) in m.generators.iter().enumerate() {
        if g.bus >= n {
            return Err(validation(format!("generator {} references missing bus", g.id)));
        }
        m.gens_at[g.bus].push(i);
    }

    for b in &m.buses {
        if !(0.0..=1.0).contains(&b.alpha) {
            return Err(validation(format!("bus {}: alpha outside [0,1]", b.id)));
        }
        if b.population <= 0.0 || b.household_size <= 0.0 || b.income <= 0.0 {
            return Err(validation(format!(
                "bus {}: population, household size, and income must be positive",
                b.id
            )));
        }
        if !(b.v_min_sq > 0.0 && b.v_min_sq < b.v_max_sq) {
            return Err(validation(format!("bus {}: voltage bounds disordered", b.id)));
        }
        if !(b.tariff_min > 0.0 && b.tariff_min <= b.tariff_max) {
            return Err(validation(format!("bus {}: tariff bounds disordered", b.id)));
        }
    }
    for (k, l) in m.lines.iter().enumerate() {
        if l.resistance < 0.0 || l.reactance < 0.0 || l.apparent_limit <= 0.0 {
            return Err(validation(format!("line {k}: bad impedance or rating")));
        }
    }
    for g in &m.generators {
        if g.p_min > g.p_max || g.q_min > g.q_max {
            return Err(validation(format!("generator {}: bounds disordered", g.id)));
        }
        if g.cost < 0.0 || g.emission_rates.0.iter().any(|&r| r < 0.0) {
            return Err(validation(format!(
                "generator {}: cost and emission factors must be nonnegative",
                g.id
            )));
        }
    }
    if m.interface.flow_limit <= 0.0 {
        return Err(validation("interface flow limit must be positive"));
    }
    m.interface.lmp.check_grid(m.days, m.hours, "lmp")?;
    for (y, s) in Pollutant::ALL.iter().zip(&m.interface.transmission_emissions) {
        s.check_grid(m.days, m.hours, y.name())?;
        if s.0.iter().flatten().any(|&v| v < 0.0) {
            return Err(validation(format!("negative interface emissions for {y}")));
        }
    }
    if m.interface.external_cost.0.iter().any(|&v| v < 0.0) {
        return Err(validation("negative interface damage price"));
    }
    let ec = &m.external_costs;
    if !(ec.scc >= ec.carbon_tax && ec.carbon_tax >= 0.0) {
        return Err(validation("need scc >= carbon_tax >= 0"));
    }
    for (b, hc) in ec.health_cost.iter().enumerate() {
        for y in Pollutant::ALL {
            let v = hc.get(y);
            if v < 0.0 {
                return Err(validation(format!(
                    "negative damage price for {y} at bus {}",
                    m.buses[b].id
                )));
            }
            if y != Pollutant::Co2 && v == 0.0 {
                return Err(validation(format!(
                    "missing damage price for {y} at bus {}",
                    m.buses[b].id
                )));
            }
        }
    }
    let p = &m.policy;
    if !(p.eb_regulator > 0.0 && p.eb_regulator < 1.0) {
        return Err(validation("policy: eb_regulator outside (0,1)"));
    }
    if let Some(kp) = p.eb_household {
        if !(kp > 0.0 && kp < 1.0) {
            return Err(validation("policy: eb_household outside (0,1)"));
        }
    }
    if p.tou_ratio <= 0.0 || p.rate_of_return < 0.0 || p.avg_tariff_cap <= 0.0 {
        return Err(validation("policy: tou_ratio, rate_of_return, avg_tariff_cap disordered"));
    }
    if p.weights.iter().any(|&w| w <= 0.0) {
        return Err(validation("policy: objective weights must be positive"));
    }
    if p.peak_window.is_empty() || p.peak_window.len() >= m.hours {
        return Err(validation(
            "policy: peak window must be a nonempty strict subset of the day",
        ));
    }
    {
        let mut sorted = p.peak_window.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != p.peak_window.len() || *sorted.last().unwrap() >= m.hours {
            return Err(validation("policy: peak window has duplicates or out-of-range hours"));
        }
    }
    if p.day_weights.len() != m.days || p.day_weights.iter().any(|&w| w <= 0.0) {
        return Err(validation(format!(
            "policy: need {} positive day weights",
            m.days
        )));
    }
    p.capital_cost_daily()?;
    for s in m.demand_p.iter().chain(&m.demand_q) {
        s.check_grid(m.days, m.hours, "demand")?;
    }
    if m.demand_p.iter().flat_map(|s| s.0.iter().flatten()).any(|&v| v < 0.0) {
        return Err(validation("negative inflexible demand"));
    }
    Ok(m)
}

/// Write a model back to a dataset directory in the canonical format.
/// `load_system(save_system(m)) == m` up to nothing: the round trip is exact.
pub fn save_system(m: &SystemModel, dir: &Path) -> Result<(), SystemError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let net = NetworkFile {
        root: m.buses[m.root].id.clone(),
        buses: m.buses.clone(),
        lines: m
            .lines
            .iter()
            .map(|l| LineFile {
                from: m.buses[l.from].id.clone(),
                to: m.buses[l.to].id.clone(),
                resistance: l.resistance,
                reactance: l.reactance,
                apparent_limit: l.apparent_limit,
            })
            .collect(),
        generators: m
            .generators
            .iter()
            .map(|g| GeneratorFile {
                id: g.id.clone(),
                bus: m.buses[g.bus].id.clone(),
                cost: g.cost,
                p_min: g.p_min,
                p_max: g.p_max,
                q_min: g.q_min,
                q_max: g.q_max,
                emission_rates: g.emission_rates,
            })
            .collect(),
        interface: InterfaceFile {
            flow_limit: m.interface.flow_limit,
            allow_export: m.interface.allow_export,
            transmission_emissions: Pollutant::ALL
                .iter()
                .map(|y| {
                    (
                        y.name().to_string(),
                        m.interface.transmission_emissions[y.index()].clone(),
                    )
                })
                .collect(),
        },
    };
    let path = dir.join("network.json");
    let body = serde_json::to_string_pretty(&net).expect("network serialization");
    std::fs::write(&path, body).map_err(io_err(&path))?;

    let path = dir.join("policy.json");
    let body = serde_json::to_string_pretty(&m.policy).expect("policy serialization");
    std::fs::write(&path, body).map_err(io_err(&path))?;

    let path = dir.join("demand.csv");
    let mut out = String::from("bus,rep_day,hour,p_mw,q_mvar\n");
    for (b, bus) in m.buses.iter().enumerate() {
        for r in 0..m.days {
            for t in 0..m.hours {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    bus.id,
                    r,
                    t,
                    m.demand_p[b].at(r, t),
                    m.demand_q[b].at(r, t)
                ));
            }
        }
    }
    std::fs::write(&path, out).map_err(io_err(&path))?;

    let path = dir.join("lmp.csv");
    let mut out = String::from("rep_day,hour,lmp_usd_per_mwh\n");
    for r in 0..m.days {
        for t in 0..m.hours {
            out.push_str(&format!("{},{},{}\n", r, t, m.interface.lmp.at(r, t)));
        }
    }
    std::fs::write(&path, out).map_err(io_err(&path))?;

    let path = dir.join("external_costs.csv");
    let mut out = String::from("pollutant,bus,usd_per_tonne\n");
    for (b, bus) in m.buses.iter().enumerate() {
        for y in Pollutant::ALL {
            let v = m.external_costs.health_cost[b].get(y);
            if v != 0.0 {
                out.push_str(&format!("{},{},{}\n", y.name(), bus.id, v));
            }
        }
    }
    for y in Pollutant::ALL {
        let v = m.interface.external_cost.get(y);
        if v != 0.0 {
            out.push_str(&format!("{},T,{}\n", y.name(), v));
        }
    }
    out.push_str(&format!("gamma,,{}\n", m.external_costs.carbon_tax));
    out.push_str(&format!("gamma_sc,,{}\n", m.external_costs.scc));
    std::fs::write(&path, out).map_err(io_err(&path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annuity_zero_principal() {
        assert_eq!(derive_annuity(0.0, 20, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn annuity_straight_line() {
        assert_eq!(derive_annuity(365_000.0, 1, 0.0).unwrap(), 1000.0);
    }

    #[test]
    fn annuity_matches_amortization_search() {
        // Independent check: bisect for the payment that amortizes the loan
        // to zero over the horizon.
        let (pv, years, rate) = (1_000_000.0, 20u32, 0.05);
        let residual = |annual: f64| {
            let mut balance = pv;
            for _ in 0..years {
                balance = balance * (1.0 + rate) - annual;
            }
            balance
        };
        let (mut lo, mut hi) = (0.0, pv);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if residual(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi) / 365.0;
        let got = derive_annuity(pv, years, rate).unwrap();
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
        assert!((got - 219.8427).abs() < 1e-3, "frozen value drifted: {got}");
    }

    #[test]
    fn annuity_rejects_negative() {
        assert!(derive_annuity(-1.0, 20, 0.05).is_err());
        assert!(derive_annuity(1.0, 20, -0.05).is_err());
        assert!(derive_annuity(1.0, 0, 0.05).is_err());
    }

    #[test]
    fn pollutant_names_round_trip() {
        for y in Pollutant::ALL {
            assert_eq!(Pollutant::from_str(y.name()).unwrap(), y);
        }
    }
}
