//! Single-level equilibrium assembly.
//!
//! The regulator's tariff problem sits above the utility's dispatch problem.
//! Because dispatch is convex, it can be replaced by its first-order
//! optimality system: primal feasibility, one stationarity equality per
//! dispatch variable, and one complementarity pair per inequality. Gluing
//! those rows to the regulator's own constraints (demand closed forms,
//! revenue adequacy, burden caps, tariff structure ties) yields one large
//! nonlinear complementarity system over tariffs, dispatch primals, dispatch
//! multipliers, and flexible demand. [`assemble_kkt`] builds it;
//! [`crate::solver`] minimizes the scalarized objectives over its relaxation.
//!
//! Conventions (shared with [`crate::dispatch`]):
//! - balances are supply-minus-demand; stationarity rows read
//!   `grad(cost) - J^T (duals) - (lower mults) + (upper mults) = 0`;
//! - emission ledger rows are production-minus-ledger, so the CO2 ledger
//!   multipliers `psi`, `chi` equal `-carbon_tax` at any solution;
//! - every complementarity slack is backed by a variable bound: box bounds
//!   pair a primal variable with a multiplier variable, and each line-flow
//!   disk is lifted through a slack variable `s = S^2 - fp^2 - fq^2`.
//!
//! All rows are affine or bilinear, so residuals, Jacobians, and Hessians
//! are analytic ([`crate::expr`]).

use crate::demand::IntervalProfile;
use crate::dispatch::{self, DispatchSolution, LlSolution, TariffSchedule, TariffStructure};
use crate::expr::{Blocks, CdAtom, Nlp, ObjExpr, QuadExpr, VarId};
use crate::system::{BusIdx, Day, Hour, PolMap, Pollutant, Series, SystemModel};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MopecError {
    #[error("assembly: {0}")]
    Assembly(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("point infeasible: {0}")]
    Infeasible(String),
}

/// Peak/off-peak window tag. Windows partition the hours of a day; the
/// demand model allocates a budget across exactly these two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Peak,
    Off,
}

impl Window {
    pub const BOTH: [Window; 2] = [Window::Peak, Window::Off];

    pub fn index(self) -> usize {
        match self {
            Window::Peak => 0,
            Window::Off => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Window::Peak => "p",
            Window::Off => "op",
        }
    }
}

/// Which side of a variable's box the pair's slack lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundSide {
    Lower,
    Upper,
}

/// One complementarity pair: `slack(var) >= 0` perpendicular to `mult >= 0`.
/// The slack is `var - lb` or `ub - var`; the multiplier is itself a
/// variable bounded below by zero.
#[derive(Debug, Clone)]
pub struct CompPair {
    pub name: String,
    pub var: VarId,
    pub side: BoundSide,
    pub mult: VarId,
}

impl CompPair {
    pub fn slack(&self, nlp: &Nlp, x: &[f64]) -> f64 {
        match self.side {
            BoundSide::Lower => x[self.var] - nlp.lb[self.var],
            BoundSide::Upper => nlp.ub[self.var] - x[self.var],
        }
    }

    pub fn mult(&self, x: &[f64]) -> f64 {
        x[self.mult]
    }
}

/// Index arithmetic for the flattened system: interval-major variable and
/// row blocks, then the coupling ("border") block holding tariffs, window
/// demand, emission accounting, and regulator rows.
#[derive(Debug, Clone, Default)]
pub struct NcpLayout {
    pub nb: usize,
    pub ng: usize,
    pub nl: usize,
    pub days: usize,
    pub hours: usize,
    pub root: BusIdx,
    // per-interval variable block
    v_per: usize,
    o_gen_p: usize,
    o_gen_q: usize,
    o_flow_p: usize,
    o_flow_q: usize,
    o_u: usize,
    n_primal: usize,
    o_lam_p: usize,
    o_lam_q: usize,
    o_beta: usize,
    o_beta_ref: usize,
    o_tau: usize,
    o_delta_lo: usize,
    o_delta_hi: usize,
    o_theta_lo: usize,
    o_theta_hi: usize,
    o_mu_lo: usize,
    o_mu_hi: usize,
    o_s: usize,
    o_eta: usize,
    o_d: usize,
    // border variable bases
    b_pi: usize,
    b_dw: usize,
    b_e: usize,
    b_ed: usize,
    b_etot: usize,
    b_psi: usize,
    b_chi: usize,
    pub n_vars: usize,
    // per-interval row block
    e_per: usize,
    r_volt: usize,
    r_vref: usize,
    r_sdef: usize,
    r_st: usize,
    r_share: usize,
    // border row bases
    rb_dw: usize,
    rb_he: usize,
    rb_hsum: usize,
    rb_ste: usize,
    rb_sted: usize,
    rb_adequacy: usize,
    rb_co2: usize,
    rb_tie: usize,
    pub n_ties: usize,
    pub n_eqs: usize,
    pub n_ul_ineqs: usize,
    pub pairs_per_interval: usize,
}

impl NcpLayout {
    fn new(system: &SystemModel, n_ties: usize, non_flat: bool) -> Self {
        let (nb, ng, nl) = (system.n_buses(), system.generators.len(), system.lines.len());
        let (days, hours) = (system.days, system.hours);
        let k = days * hours;
        let mut l = NcpLayout {
            nb,
            ng,
            nl,
            days,
            hours,
            root: system.root,
            ..Default::default()
        };
        // variables within one interval: primals in dispatch order, then
        // balance/voltage duals, then bound multipliers, then the disk lift
        // and its multiplier, then hourly flexible demand
        l.o_gen_p = 2;
        l.o_gen_q = l.o_gen_p + ng;
        l.o_flow_p = l.o_gen_q + ng;
        l.o_flow_q = l.o_flow_p + nl;
        l.o_u = l.o_flow_q + nl;
        l.n_primal = l.o_u + nb;
        l.o_lam_p = l.n_primal;
        l.o_lam_q = l.o_lam_p + nb;
        l.o_beta = l.o_lam_q + nb;
        l.o_beta_ref = l.o_beta + nl;
        l.o_tau = l.o_beta_ref + 1;
        l.o_delta_lo = l.o_tau + 2;
        l.o_delta_hi = l.o_delta_lo + ng;
        l.o_theta_lo = l.o_delta_hi + ng;
        l.o_theta_hi = l.o_theta_lo + ng;
        l.o_mu_lo = l.o_theta_hi + ng;
        l.o_mu_hi = l.o_mu_lo + nb;
        l.o_s = l.o_mu_hi + nb;
        l.o_eta = l.o_s + nl;
        l.o_d = l.o_eta + nl;
        l.v_per = l.o_d + nb;
        // border variables
        l.b_pi = k * l.v_per;
        l.b_dw = l.b_pi + nb * hours;
        l.b_e = l.b_dw + nb * days * 2;
        l.b_ed = l.b_e + Pollutant::COUNT * nb;
        l.b_etot = l.b_ed + Pollutant::COUNT;
        l.b_psi = l.b_etot + 1;
        l.b_chi = l.b_psi + Pollutant::COUNT * nb;
        l.n_vars = l.b_chi + Pollutant::COUNT;
        // rows within one interval: balances, voltage drops, the root
        // reference, disk lifts, stationarity (one per primal), demand shares
        l.r_volt = 2 * nb;
        l.r_vref = l.r_volt + nl;
        l.r_sdef = l.r_vref + 1;
        l.r_st = l.r_sdef + nl;
        l.r_share = l.r_st + l.n_primal;
        l.e_per = l.r_share + nb;
        // border rows
        l.rb_dw = k * l.e_per;
        l.rb_he = l.rb_dw + nb * days * 2;
        l.rb_hsum = l.rb_he + Pollutant::COUNT * nb;
        l.rb_ste = l.rb_hsum + Pollutant::COUNT;
        l.rb_sted = l.rb_ste + Pollutant::COUNT * nb;
        l.rb_adequacy = l.rb_sted + Pollutant::COUNT;
        l.rb_co2 = l.rb_adequacy + 1;
        l.rb_tie = l.rb_co2 + 1;
        l.n_ties = n_ties;
        l.n_eqs = l.rb_tie + n_ties;
        l.n_ul_ineqs = nb + if non_flat { nb } else { 0 } + 1;
        l.pairs_per_interval = 2 + 4 * ng + 2 * nb + nl;
        l
    }

    pub fn intervals(&self) -> usize {
        self.days * self.hours
    }

    fn vbase(&self, r: Day, t: Hour) -> usize {
        (r * self.hours + t) * self.v_per
    }
    fn ebase(&self, r: Day, t: Hour) -> usize {
        (r * self.hours + t) * self.e_per
    }

    // --- variables ---
    pub fn import_p(&self, r: Day, t: Hour) -> VarId {
        self.vbase(r, t)
    }
    pub fn import_q(&self, r: Day, t: Hour) -> VarId {
        self.vbase(r, t) + 1
    }
    pub fn gen_p(&self, r: Day, t: Hour, i: usize) -> VarId {
        self.vbase(r, t) + self.o_gen_p + i
    }
    pub fn gen_q(&self, r: Day, t: Hour, i: usize) -> VarId {
        self.vbase(r, t) + self.o_gen_q + i
    }
    pub fn flow_p(&self, r: Day, t: Hour, l: usize) -> VarId {
        self.vbase(r, t) + self.o_flow_p + l
    }
    pub fn flow_q(&self, r: Day, t: Hour, l: usize) -> VarId {
        self.vbase(r, t) + self.o_flow_q + l
    }
    pub fn u(&self, r: Day, t: Hour, b: BusIdx) -> VarId {
        self.vbase(r, t) + self.o_u + b
    }
    pub fn lam_p(&self, r: Day, t: Hour, b: BusIdx) -> VarId {
        self.vbase(r, t) + self.o_lam_p + b
    }
    pub fn lam_q(&self, r: Day, t: Hour, b: BusIdx) -> VarId {
        self.vbase(r, t) + self.o_lam_q + b
    }
    pub fn beta(&self, r: Day, t: Hour, l: usize) -> VarId {
        self.vbase(r, t) + self.o_beta + l
    }
    pub fn beta_ref(&self, r: Day, t: Hour) -> VarId {
        self.vbase(r, t) + self.o_beta_ref
    }
    pub fn tau_lo(&self, r: Day, t: Hour) -> VarId {
        self.vbase(r, t) + self.o_tau
    }
    pub fn tau_hi(&self, r: Day, t: Hour) -> VarId {
        self.vbase(r, t) + self.o_tau + 1
    }
    pub fn delta_lo(&self, r: Day, t: Hour, i: usize) -> VarId {
        self.vbase(r, t) + self.o_delta_lo + i
    }
    pub fn delta_hi(&self, r: Day, t: Hour, i: usize) -> VarId {
        self.vbase(r, t) + self.o_delta_hi + i
    }
    pub fn theta_lo(&self, r: Day, t: Hour, i: usize) -> VarId {
        self.vbase(r, t) + self.o_theta_lo + i
    }
    pub fn theta_hi(&self, r: Day, t: Hour, i: usize) -> VarId {
        self.vbase(r, t) + self.o_theta_hi + i
    }
    pub fn mu_lo(&self, r: Day, t: Hour, b: BusIdx) -> VarId {
        self.vbase(r, t) + self.o_mu_lo + b
    }
    pub fn mu_hi(&self, r: Day, t: Hour, b: BusIdx) -> VarId {
        self.vbase(r, t) + self.o_mu_hi + b
    }
    pub fn disk_slack(&self, r: Day, t: Hour, l: usize) -> VarId {
        self.vbase(r, t) + self.o_s + l
    }
    pub fn eta(&self, r: Day, t: Hour, l: usize) -> VarId {
        self.vbase(r, t) + self.o_eta + l
    }
    pub fn d(&self, r: Day, t: Hour, b: BusIdx) -> VarId {
        self.vbase(r, t) + self.o_d + b
    }
    pub fn pi(&self, b: BusIdx, t: Hour) -> VarId {
        self.b_pi + b * self.hours + t
    }
    pub fn d_window(&self, b: BusIdx, r: Day, w: Window) -> VarId {
        self.b_dw + (b * self.days + r) * 2 + w.index()
    }
    pub fn e_bus(&self, y: Pollutant, b: BusIdx) -> VarId {
        self.b_e + y.index() * self.nb + b
    }
    pub fn e_total_bus(&self, y: Pollutant) -> VarId {
        self.b_ed + y.index()
    }
    pub fn e_total_co2(&self) -> VarId {
        self.b_etot
    }
    pub fn psi(&self, y: Pollutant, b: BusIdx) -> VarId {
        self.b_psi + y.index() * self.nb + b
    }
    pub fn chi(&self, y: Pollutant) -> VarId {
        self.b_chi + y.index()
    }

    // --- equality rows ---
    pub fn balance_p(&self, r: Day, t: Hour, b: BusIdx) -> usize {
        self.ebase(r, t) + b
    }
    pub fn balance_q(&self, r: Day, t: Hour, b: BusIdx) -> usize {
        self.ebase(r, t) + self.nb + b
    }
    pub fn voltage(&self, r: Day, t: Hour, l: usize) -> usize {
        self.ebase(r, t) + self.r_volt + l
    }
    pub fn voltage_ref(&self, r: Day, t: Hour) -> usize {
        self.ebase(r, t) + self.r_vref
    }
    pub fn disk_def(&self, r: Day, t: Hour, l: usize) -> usize {
        self.ebase(r, t) + self.r_sdef + l
    }
    /// Stationarity row of the primal variable at in-block offset `p`.
    fn st(&self, r: Day, t: Hour, p: usize) -> usize {
        self.ebase(r, t) + self.r_st + p
    }
    pub fn st_import_p(&self, r: Day, t: Hour) -> usize {
        self.st(r, t, 0)
    }
    pub fn st_import_q(&self, r: Day, t: Hour) -> usize {
        self.st(r, t, 1)
    }
    pub fn st_gen_p(&self, r: Day, t: Hour, i: usize) -> usize {
        self.st(r, t, self.o_gen_p + i)
    }
    pub fn st_gen_q(&self, r: Day, t: Hour, i: usize) -> usize {
        self.st(r, t, self.o_gen_q + i)
    }
    pub fn st_flow_p(&self, r: Day, t: Hour, l: usize) -> usize {
        self.st(r, t, self.o_flow_p + l)
    }
    pub fn st_flow_q(&self, r: Day, t: Hour, l: usize) -> usize {
        self.st(r, t, self.o_flow_q + l)
    }
    pub fn st_u(&self, r: Day, t: Hour, b: BusIdx) -> usize {
        self.st(r, t, self.o_u + b)
    }
    pub fn share(&self, r: Day, t: Hour, b: BusIdx) -> usize {
        self.ebase(r, t) + self.r_share + b
    }
    pub fn dw_budget(&self, b: BusIdx, r: Day, w: Window) -> usize {
        self.rb_dw + (b * self.days + r) * 2 + w.index()
    }
    pub fn ledger(&self, y: Pollutant, b: BusIdx) -> usize {
        self.rb_he + y.index() * self.nb + b
    }
    pub fn ledger_sum(&self, y: Pollutant) -> usize {
        self.rb_hsum + y.index()
    }
    pub fn st_e(&self, y: Pollutant, b: BusIdx) -> usize {
        self.rb_ste + y.index() * self.nb + b
    }
    pub fn st_e_total(&self, y: Pollutant) -> usize {
        self.rb_sted + y.index()
    }
    pub fn adequacy(&self) -> usize {
        self.rb_adequacy
    }
    pub fn co2_account(&self) -> usize {
        self.rb_co2
    }

    // --- inequality rows ---
    pub fn eb_row(&self, b: BusIdx) -> usize {
        b
    }
}

/// The flattened single-level system.
///
/// `nlp` holds all variables, equality rows, and inequality rows. The
/// inequality list starts with the regulator rows (burden caps, peak/off-peak
/// floors when the structure is not flat, the average-tariff cap), followed
/// by one relaxed product row per complementarity pair; product-row constants
/// carry the relaxation parameter and are rewritten by [`NcpSystem::apply_rho`].
/// The objective on `nlp` is left zero — [`crate::solver::scalarize`]
/// combines the three components in `objectives`.
#[derive(Debug, Clone)]
pub struct NcpSystem {
    pub nlp: Nlp,
    pub pairs: Vec<CompPair>,
    /// Minimized components: negated economic welfare, health damages,
    /// unpriced carbon.
    pub objectives: [ObjExpr; 3],
    pub structure: TariffStructure,
    /// Burden fraction substituted into the per-bus cap rows.
    pub eb: f64,
    pub layout: NcpLayout,
    product_row0: usize,
}

impl NcpSystem {
    /// Assemble from pre-built pieces. `product_row0` is the index of the
    /// first relaxed product row in `nlp.inequalities`; rows
    /// `product_row0..product_row0+pairs.len()` must be the products, in
    /// pair order. Intended for small hand-built complementarity systems;
    /// network problems come from [`assemble_kkt`].
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        nlp: Nlp,
        pairs: Vec<CompPair>,
        objectives: [ObjExpr; 3],
        structure: TariffStructure,
        eb: f64,
        layout: NcpLayout,
        product_row0: usize,
    ) -> Result<Self, MopecError> {
        if product_row0 + pairs.len() > nlp.inequalities.len() {
            return Err(MopecError::Dimension {
                expected: product_row0 + pairs.len(),
                got: nlp.inequalities.len(),
            });
        }
        for p in &pairs {
            if p.var >= nlp.n() || p.mult >= nlp.n() {
                return Err(MopecError::Assembly(format!(
                    "pair {} references a missing variable",
                    p.name
                )));
            }
        }
        Ok(NcpSystem { nlp, pairs, objectives, structure, eb, layout, product_row0 })
    }

    /// Inequality-row range holding the relaxed complementarity products.
    pub fn product_rows(&self) -> std::ops::Range<usize> {
        self.product_row0..self.product_row0 + self.pairs.len()
    }

    /// Rewrite the relaxation parameter on every product row of `nlp`
    /// (which must be this system's NLP or a clone of it).
    pub fn apply_rho(&self, nlp: &mut Nlp, rho: f64) {
        for j in self.product_rows() {
            nlp.inequalities[j].constant = rho;
        }
    }

    /// The three objective components at a point.
    pub fn objective_values(&self, x: &[f64]) -> [f64; 3] {
        [
            self.objectives[0].eval(x),
            self.objectives[1].eval(x),
            self.objectives[2].eval(x),
        ]
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), MopecError> {
        if x.len() != self.nlp.n() {
            return Err(MopecError::Dimension { expected: self.nlp.n(), got: x.len() });
        }
        Ok(())
    }

    /// Multi-line census of the flattened system: counts per variable group,
    /// row group, and pair kind. Stable format, used for golden-file tests.
    pub fn census(&self) -> String {
        let l = &self.layout;
        let k = l.intervals();
        let np = Pollutant::COUNT;
        let mut s = String::new();
        let mut line = |text: String| {
            s.push_str(&text);
            s.push('\n');
        };
        line(format!("structure {}", self.structure));
        line(format!(
            "network buses={} lines={} generators={} hours={} days={}",
            l.nb, l.nl, l.ng, l.hours, l.days
        ));
        line(format!("intervals {k}"));
        line("vars".into());
        line(format!("  tariff {}", l.nb * l.hours));
        line(format!("  tariff dof {}", l.nb * l.hours - l.n_ties));
        line(format!("  window demand {}", l.nb * l.days * 2));
        line(format!("  hourly demand {}", k * l.nb));
        line(format!("  dispatch primal {}", k * l.n_primal));
        line(format!("  balance dual {}", k * 2 * l.nb));
        line(format!("  voltage dual {}", k * (l.nl + 1)));
        line(format!("  bound mult {}", k * (2 + 4 * l.ng + 2 * l.nb)));
        line(format!("  disk slack+mult {}", k * 2 * l.nl));
        line(format!("  emission ledger {}", np * l.nb + np + 1));
        line(format!("  ledger dual {}", np * l.nb + np));
        line(format!("  total {}", l.n_vars));
        line("equalities".into());
        line(format!("  balance {}", k * 2 * l.nb));
        line(format!("  voltage {}", k * (l.nl + 1)));
        line(format!("  disk def {}", k * l.nl));
        line(format!("  stationarity {}", k * l.n_primal));
        line(format!("  demand share {}", k * l.nb));
        line(format!("  demand budget {}", l.nb * l.days * 2));
        line(format!("  emission ledger {}", np * l.nb + np + 1));
        line(format!("  ledger stationarity {}", np * l.nb + np));
        line("  adequacy 1".into());
        line(format!("  structure ties {}", l.n_ties));
        line(format!("  total {}", l.n_eqs));
        line("inequalities".into());
        line(format!("  burden caps {}", l.nb));
        line(format!(
            "  window floors {}",
            if self.structure == TariffStructure::Flat { 0 } else { l.nb }
        ));
        line("  average cap 1".into());
        line(format!("  relaxed products {}", self.pairs.len()));
        line(format!("  total {}", self.nlp.inequalities.len()));
        line(format!(
            "pairs per interval {} (interface 2, generator boxes {}, voltage boxes {}, disks {})",
            l.pairs_per_interval,
            4 * l.ng,
            2 * l.nb,
            l.nl
        ));
        line(format!("pairs total {}", self.pairs.len()));
        s
    }
}

/// Maximum pair product and minimum pair coordinate at a point: the first is
/// zero only under exact complementarity, the second is negative only if a
/// slack or multiplier went infeasible.
pub fn complementarity_violation(
    ncp: &NcpSystem,
    x: &[f64],
) -> Result<(f64, f64), MopecError> {
    ncp.check_dim(x)?;
    let mut max_prod: f64 = 0.0;
    let mut min_coord = f64::INFINITY;
    for p in &ncp.pairs {
        let s = p.slack(&ncp.nlp, x);
        let m = p.mult(x);
        max_prod = max_prod.max(s * m);
        min_coord = min_coord.min(s.min(m));
    }
    if ncp.pairs.is_empty() {
        min_coord = 0.0;
    }
    Ok((max_prod, min_coord))
}

/// A first-order point of the relaxed NLP: primal values plus the NLP
/// multipliers needed to recover equilibrium-constraint multipliers.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RelaxedPoint {
    pub x: Vec<f64>,
    /// Equality multipliers.
    pub y: Vec<f64>,
    /// Inequality multipliers (regulator rows, then product rows).
    pub w: Vec<f64>,
    /// Lower/upper bound multipliers.
    pub zl: Vec<f64>,
    pub zu: Vec<f64>,
}

/// Stationarity classes for equilibrium constraints, ordered strongest
/// first. `BStationary` is listed for completeness; the recovery used here
/// cannot separate it from `MStationary`, so it is never emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Stationarity {
    Strong,
    MStationary,
    CStationary,
    BStationary,
    None,
}

impl std::fmt::Display for Stationarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stationarity::Strong => "strong",
            Stationarity::MStationary => "M-stationary",
            Stationarity::CStationary => "C-stationary",
            Stationarity::BStationary => "B-stationary",
            Stationarity::None => "none",
        })
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct StationarityReport {
    pub class: Stationarity,
    /// Pairs with both slack and multiplier within `tol` of zero.
    pub bi_active: usize,
    /// Weakest pair: name and its two recovered multipliers.
    pub witness: Option<(String, f64, f64)>,
}

/// Classify the point's stationarity from the signs of equilibrium
/// multipliers recovered at bi-active pairs.
///
/// At a solution of the relaxed NLP with product-row multiplier `sigma`,
/// bound multipliers `z_s` (slack side) and `z_m` (multiplier side) estimate
/// the equilibrium multipliers as `nu_s = z_s - sigma*m` and
/// `nu_m = z_m - sigma*s`. Both nonnegative at every bi-active pair is
/// strong stationarity; one vanishing is M; a nonnegative product is C.
pub fn classify_stationarity(
    ncp: &NcpSystem,
    point: &RelaxedPoint,
    tol: f64,
) -> Result<StationarityReport, MopecError> {
    ncp.check_dim(&point.x)?;
    let nlp = &ncp.nlp;
    if point.y.len() != nlp.equalities.len()
        || point.w.len() != nlp.inequalities.len()
        || point.zl.len() != nlp.n()
        || point.zu.len() != nlp.n()
    {
        return Err(MopecError::Dimension { expected: nlp.equalities.len(), got: point.y.len() });
    }
    let ftol = tol.max(1e-6);
    for (j, e) in nlp.equalities.iter().enumerate() {
        let v = e.eval(&point.x);
        if v.abs() > ftol * (1.0 + e.constant.abs()) {
            return Err(MopecError::Infeasible(format!(
                "equality {} residual {v:.3e}",
                nlp.eq_names[j]
            )));
        }
    }
    for p in &ncp.pairs {
        if p.slack(nlp, &point.x) < -tol || p.mult(&point.x) < -tol {
            return Err(MopecError::Infeasible(format!("pair {} negative", p.name)));
        }
    }

    let mut class = Stationarity::Strong;
    let mut bi_active = 0;
    let mut witness = None;
    for (j, p) in ncp.pairs.iter().enumerate() {
        let s = p.slack(nlp, &point.x);
        let m = p.mult(&point.x);
        if s > tol || m > tol {
            continue;
        }
        bi_active += 1;
        let sigma = point.w[ncp.product_row0 + j];
        let z_s = match p.side {
            BoundSide::Lower => point.zl[p.var],
            BoundSide::Upper => point.zu[p.var],
        };
        let z_m = point.zl[p.mult];
        let nu_s = z_s - sigma * m;
        let nu_m = z_m - sigma * s;
        let pair_class = if nu_s >= -tol && nu_m >= -tol {
            Stationarity::Strong
        } else if nu_s.abs().min(nu_m.abs()) <= tol {
            Stationarity::MStationary
        } else if nu_s * nu_m >= -tol {
            Stationarity::CStationary
        } else {
            Stationarity::None
        };
        if pair_class > class || witness.is_none() {
            witness = Some((p.name.clone(), nu_s, nu_m));
        }
        class = class.max(pair_class);
    }
    Ok(StationarityReport { class, bi_active, witness })
}

impl PartialOrd for Stationarity {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Stationarity {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        fn rank(s: Stationarity) -> u8 {
            match s {
                Stationarity::Strong => 0,
                Stationarity::MStationary => 1,
                Stationarity::BStationary => 2,
                Stationarity::CStationary => 3,
                Stationarity::None => 4,
            }
        }
        rank(*self).cmp(&rank(*other))
    }
}

/// Build the flattened system for one tariff structure at burden fraction
/// `eb`.
pub fn assemble_kkt(
    system: &SystemModel,
    structure: TariffStructure,
    eb: f64,
) -> Result<NcpSystem, MopecError> {
    const INF: f64 = f64::INFINITY;
    if !(eb > 0.0) {
        return Err(MopecError::Assembly(format!("burden fraction {eb} must be positive")));
    }
    let nb = system.n_buses();
    let nl = system.lines.len();
    let (days, hours) = (system.days, system.hours);
    let peak = system.policy.peak_window.clone();
    let off = system.offpeak_window();
    let window_hours = |w: Window| -> &[Hour] {
        match w {
            Window::Peak => &peak,
            Window::Off => &off,
        }
    };
    // inflexible window energies; every window must carry load or the
    // closed-form demand shares are undefined
    let mut energy = vec![vec![[0.0; 2]; days]; nb];
    for b in 0..nb {
        for r in 0..days {
            for w in Window::BOTH {
                let e = system.inflexible_window_energy(b, r, window_hours(w));
                if e <= 0.0 {
                    return Err(MopecError::Assembly(format!(
                        "bus {} day {r} has no inflexible load in the {} window; \
                         demand shares are undefined",
                        system.buses[b].id,
                        w.tag()
                    )));
                }
                energy[b][r][w.index()] = e;
            }
        }
    }

    let non_flat = structure != TariffStructure::Flat;
    // tariff-variable offsets don't depend on the tie count, so a
    // zero-tie layout is enough to enumerate the ties
    let lay0 = NcpLayout::new(system, 0, non_flat);
    let ties = tie_pairs(&lay0, system, structure, &peak, &off);
    let layout = NcpLayout::new(system, ties.len(), non_flat);
    let mut nlp = Nlp::default();
    let gamma = system.external_costs.carbon_tax;
    let weights = &system.policy.day_weights;

    // --- variables, interval-major then border ---
    for r in 0..days {
        for t in 0..hours {
            let pre = format!("r{r}t{t}:");
            let f_lim = system.interface.flow_limit;
            let p_lo = if system.interface.allow_export { -f_lim } else { 0.0 };
            nlp.add_var(format!("{pre}g0"), p_lo, f_lim, 0.0);
            nlp.add_var(format!("{pre}q0"), -INF, INF, 0.0);
            for g in &system.generators {
                nlp.add_var(format!("{pre}g[{}]", g.id), g.p_min, g.p_max, 0.0);
            }
            for g in &system.generators {
                nlp.add_var(format!("{pre}q[{}]", g.id), g.q_min, g.q_max, 0.0);
            }
            for l in 0..nl {
                nlp.add_var(format!("{pre}fp[{l}]"), -INF, INF, 0.0);
            }
            for l in 0..nl {
                nlp.add_var(format!("{pre}fq[{l}]"), -INF, INF, 0.0);
            }
            for b in 0..nb {
                nlp.add_var(
                    format!("{pre}u[{}]", system.buses[b].id),
                    system.buses[b].v_min_sq,
                    system.buses[b].v_max_sq,
                    dispatch::VOLTAGE_REF_SQ,
                );
            }
            for b in 0..nb {
                nlp.add_var(format!("{pre}lam_p[{}]", system.buses[b].id), -INF, INF, 0.0);
            }
            for b in 0..nb {
                nlp.add_var(format!("{pre}lam_q[{}]", system.buses[b].id), -INF, INF, 0.0);
            }
            for l in 0..nl {
                nlp.add_var(format!("{pre}beta[{l}]"), -INF, INF, 0.0);
            }
            nlp.add_var(format!("{pre}beta_ref"), -INF, INF, 0.0);
            nlp.add_var(format!("{pre}tau.lo"), 0.0, INF, 1.0);
            nlp.add_var(format!("{pre}tau.hi"), 0.0, INF, 1.0);
            for kind in ["delta.lo", "delta.hi"] {
                for g in &system.generators {
                    nlp.add_var(format!("{pre}{kind}[{}]", g.id), 0.0, INF, 1.0);
                }
            }
            for kind in ["theta.lo", "theta.hi"] {
                for g in &system.generators {
                    nlp.add_var(format!("{pre}{kind}[{}]", g.id), 0.0, INF, 1.0);
                }
            }
            for kind in ["mu.lo", "mu.hi"] {
                for b in 0..nb {
                    nlp.add_var(format!("{pre}{kind}[{}]", system.buses[b].id), 0.0, INF, 1.0);
                }
            }
            for (l, line) in system.lines.iter().enumerate() {
                nlp.add_var(
                    format!("{pre}s[{l}]"),
                    0.0,
                    INF,
                    line.apparent_limit * line.apparent_limit,
                );
            }
            for l in 0..nl {
                nlp.add_var(format!("{pre}eta[{l}]"), 0.0, INF, 1.0);
            }
            for b in 0..nb {
                nlp.add_var(format!("{pre}d[{}]", system.buses[b].id), 0.0, INF, 0.0);
            }
        }
    }
    for b in 0..nb {
        let bus = &system.buses[b];
        for t in 0..hours {
            nlp.add_var(
                format!("pi[{},t{t}]", bus.id),
                bus.tariff_min,
                bus.tariff_max,
                0.5 * (bus.tariff_min + bus.tariff_max),
            );
        }
    }
    for b in 0..nb {
        for r in 0..days {
            for w in Window::BOTH {
                nlp.add_var(format!("dw[{},r{r},{}]", system.buses[b].id, w.tag()), 0.0, INF, 0.0);
            }
        }
    }
    for y in Pollutant::ALL {
        for b in 0..nb {
            nlp.add_var(format!("e[{y},{}]", system.buses[b].id), -INF, INF, 0.0);
        }
    }
    for y in Pollutant::ALL {
        nlp.add_var(format!("eD[{y}]"), -INF, INF, 0.0);
    }
    let e_if_co2 = system.interface.emissions_total(Pollutant::Co2, weights);
    nlp.add_var("e_total_co2", -INF, INF, e_if_co2);
    for y in Pollutant::ALL {
        let x0 = if y == Pollutant::Co2 { -gamma } else { 0.0 };
        for b in 0..nb {
            nlp.add_var(format!("psi[{y},{}]", system.buses[b].id), -INF, INF, x0);
        }
    }
    for y in Pollutant::ALL {
        let x0 = if y == Pollutant::Co2 { -gamma } else { 0.0 };
        nlp.add_var(format!("chi[{y}]"), -INF, INF, x0);
    }
    debug_assert_eq!(nlp.n(), layout.n_vars);
    let lay = &layout;

    // --- per-interval equality rows ---
    for r in 0..days {
        for t in 0..hours {
            let pre = format!("r{r}t{t}:");
            let w = weights[r];
            for b in 0..nb {
                let mut row = QuadExpr::constant(-system.demand_p[b].at(r, t));
                if b == system.root {
                    row.lin(lay.import_p(r, t), 1.0);
                }
                for &i in &system.gens_at[b] {
                    row.lin(lay.gen_p(r, t, i), 1.0);
                }
                if let Some((_, l)) = system.parent[b] {
                    row.lin(lay.flow_p(r, t, l), 1.0);
                }
                for &(_, l) in &system.children[b] {
                    row.lin(lay.flow_p(r, t, l), -1.0);
                }
                row.lin(lay.d(r, t, b), -1.0);
                nlp.add_equality(format!("{pre}balance_p[{}]", system.buses[b].id), row);
            }
            for b in 0..nb {
                let mut row = QuadExpr::constant(-system.demand_q[b].at(r, t));
                if b == system.root {
                    row.lin(lay.import_q(r, t), 1.0);
                }
                for &i in &system.gens_at[b] {
                    row.lin(lay.gen_q(r, t, i), 1.0);
                }
                if let Some((_, l)) = system.parent[b] {
                    row.lin(lay.flow_q(r, t, l), 1.0);
                }
                for &(_, l) in &system.children[b] {
                    row.lin(lay.flow_q(r, t, l), -1.0);
                }
                nlp.add_equality(format!("{pre}balance_q[{}]", system.buses[b].id), row);
            }
            for (l, line) in system.lines.iter().enumerate() {
                let mut row = QuadExpr::default();
                row.lin(lay.u(r, t, line.from), 1.0)
                    .lin(lay.u(r, t, line.to), -1.0)
                    .lin(lay.flow_p(r, t, l), -2.0 * line.resistance)
                    .lin(lay.flow_q(r, t, l), -2.0 * line.reactance);
                nlp.add_equality(format!("{pre}voltage[{l}]"), row);
            }
            let mut row = QuadExpr::constant(-dispatch::VOLTAGE_REF_SQ);
            row.lin(lay.u(r, t, system.root), 1.0);
            nlp.add_equality(format!("{pre}voltage_ref"), row);
            for (l, line) in system.lines.iter().enumerate() {
                let mut row = QuadExpr::constant(-line.apparent_limit * line.apparent_limit);
                row.lin(lay.disk_slack(r, t, l), 1.0)
                    .quad(lay.flow_p(r, t, l), lay.flow_p(r, t, l), 1.0)
                    .quad(lay.flow_q(r, t, l), lay.flow_q(r, t, l), 1.0);
                nlp.add_equality(format!("{pre}disk[{l}]"), row);
            }

            // stationarity, one row per dispatch primal, in variable order
            let mut row = QuadExpr::constant(w * system.interface.lmp.at(r, t));
            row.lin(lay.lam_p(r, t, system.root), -1.0)
                .lin(lay.tau_lo(r, t), -1.0)
                .lin(lay.tau_hi(r, t), 1.0);
            nlp.add_equality(format!("{pre}st_g0"), row);
            let mut row = QuadExpr::default();
            row.lin(lay.lam_q(r, t, system.root), -1.0);
            nlp.add_equality(format!("{pre}st_q0"), row);
            for (i, g) in system.generators.iter().enumerate() {
                let mut row = QuadExpr::constant(w * g.cost);
                row.lin(lay.lam_p(r, t, g.bus), -1.0)
                    .lin(lay.delta_lo(r, t, i), -1.0)
                    .lin(lay.delta_hi(r, t, i), 1.0);
                for y in Pollutant::ALL {
                    row.lin(lay.psi(y, g.bus), -w * g.emission_rates.get(y));
                }
                nlp.add_equality(format!("{pre}st_g[{}]", g.id), row);
            }
            for (i, g) in system.generators.iter().enumerate() {
                let mut row = QuadExpr::default();
                row.lin(lay.lam_q(r, t, g.bus), -1.0)
                    .lin(lay.theta_lo(r, t, i), -1.0)
                    .lin(lay.theta_hi(r, t, i), 1.0);
                nlp.add_equality(format!("{pre}st_q[{}]", g.id), row);
            }
            for (l, line) in system.lines.iter().enumerate() {
                let mut row = QuadExpr::default();
                row.lin(lay.lam_p(r, t, line.from), 1.0)
                    .lin(lay.lam_p(r, t, line.to), -1.0)
                    .lin(lay.beta(r, t, l), 2.0 * line.resistance)
                    .quad(lay.flow_p(r, t, l), lay.eta(r, t, l), 2.0);
                nlp.add_equality(format!("{pre}st_fp[{l}]"), row);
            }
            for (l, line) in system.lines.iter().enumerate() {
                let mut row = QuadExpr::default();
                row.lin(lay.lam_q(r, t, line.from), 1.0)
                    .lin(lay.lam_q(r, t, line.to), -1.0)
                    .lin(lay.beta(r, t, l), 2.0 * line.reactance)
                    .quad(lay.flow_q(r, t, l), lay.eta(r, t, l), 2.0);
                nlp.add_equality(format!("{pre}st_fq[{l}]"), row);
            }
            for b in 0..nb {
                let mut row = QuadExpr::default();
                if b == system.root {
                    row.lin(lay.beta_ref(r, t), -1.0);
                } else if let Some((_, l)) = system.parent[b] {
                    row.lin(lay.beta(r, t, l), 1.0);
                }
                for &(_, l) in &system.children[b] {
                    row.lin(lay.beta(r, t, l), -1.0);
                }
                row.lin(lay.mu_lo(r, t, b), -1.0).lin(lay.mu_hi(r, t, b), 1.0);
                nlp.add_equality(format!("{pre}st_u[{}]", system.buses[b].id), row);
            }

            // hourly demand follows the inflexible shape within its window
            for b in 0..nb {
                let win = if peak.contains(&t) { Window::Peak } else { Window::Off };
                let mut row = QuadExpr::default();
                row.lin(lay.d(r, t, b), energy[b][r][win.index()])
                    .lin(lay.d_window(b, r, win), -system.demand_p[b].at(r, t));
                nlp.add_equality(format!("{pre}share[{}]", system.buses[b].id), row);
            }
        }
    }

    // --- border equality rows ---
    for b in 0..nb {
        let bus = &system.buses[b];
        let budget = system.flexible_budget(b);
        for r in 0..days {
            for w in Window::BOTH {
                let share = match w {
                    Window::Peak => bus.alpha,
                    Window::Off => 1.0 - bus.alpha,
                };
                let mut row = QuadExpr::constant(-share * budget);
                let total = energy[b][r][w.index()];
                for &t in window_hours(w) {
                    let shape = system.demand_p[b].at(r, t) / total;
                    row.quad(lay.d_window(b, r, w), lay.pi(b, t), shape);
                }
                nlp.add_equality(format!("dw_budget[{},r{r},{}]", bus.id, w.tag()), row);
            }
        }
    }
    for y in Pollutant::ALL {
        for b in 0..nb {
            let mut row = QuadExpr::default();
            row.lin(lay.e_bus(y, b), -1.0);
            for &i in &system.gens_at[b] {
                let rate = system.generators[i].emission_rates.get(y);
                if rate == 0.0 {
                    continue;
                }
                for r in 0..days {
                    for t in 0..hours {
                        row.lin(lay.gen_p(r, t, i), weights[r] * rate);
                    }
                }
            }
            nlp.add_equality(format!("ledger[{y},{}]", system.buses[b].id), row);
        }
    }
    for y in Pollutant::ALL {
        let mut row = QuadExpr::default();
        for b in 0..nb {
            row.lin(lay.e_bus(y, b), 1.0);
        }
        row.lin(lay.e_total_bus(y), -1.0);
        nlp.add_equality(format!("ledger_sum[{y}]"), row);
    }
    for y in Pollutant::ALL {
        for b in 0..nb {
            let mut row = QuadExpr::default();
            row.lin(lay.psi(y, b), 1.0).lin(lay.chi(y), -1.0);
            nlp.add_equality(format!("st_e[{y},{}]", system.buses[b].id), row);
        }
    }
    for y in Pollutant::ALL {
        let mut row = QuadExpr::constant(if y == Pollutant::Co2 { gamma } else { 0.0 });
        row.lin(lay.chi(y), 1.0);
        nlp.add_equality(format!("st_eD[{y}]"), row);
    }
    {
        // revenue covers operating cost plus the allowed return on capital
        let capital = system
            .policy
            .capital_cost_daily()
            .map_err(|e| MopecError::Assembly(e.to_string()))?;
        let mut row = QuadExpr::constant(-(1.0 + system.policy.rate_of_return) * capital);
        for b in 0..nb {
            for t in 0..hours {
                let mut dbar = 0.0;
                for r in 0..days {
                    dbar += weights[r] * system.demand_p[b].at(r, t);
                    row.quad(lay.pi(b, t), lay.d(r, t, b), weights[r]);
                }
                row.lin(lay.pi(b, t), dbar);
            }
        }
        for r in 0..days {
            for t in 0..hours {
                row.lin(lay.import_p(r, t), -weights[r] * system.interface.lmp.at(r, t));
                for (i, g) in system.generators.iter().enumerate() {
                    row.lin(lay.gen_p(r, t, i), -weights[r] * g.cost);
                }
            }
        }
        nlp.add_equality("adequacy", row);
    }
    {
        let mut row = QuadExpr::constant(-e_if_co2);
        row.lin(lay.e_total_co2(), 1.0).lin(lay.e_total_bus(Pollutant::Co2), -1.0);
        nlp.add_equality("co2_account", row);
    }
    for (a, b) in &ties {
        let mut row = QuadExpr::default();
        row.lin(*a, 1.0).lin(*b, -1.0);
        nlp.add_equality(
            format!("tie[{}={}]", nlp.var_names[*a].clone(), nlp.var_names[*b].clone()),
            row,
        );
    }
    debug_assert_eq!(nlp.equalities.len(), layout.n_eqs);

    // --- regulator inequalities ---
    for b in 0..nb {
        let bus = &system.buses[b];
        let hh = bus.households();
        let mut row = QuadExpr::constant(eb * bus.daily_income());
        for t in 0..hours {
            let mut dbar = 0.0;
            for r in 0..days {
                dbar += weights[r] * system.demand_p[b].at(r, t);
                row.quad(lay.pi(b, t), lay.d(r, t, b), -weights[r] / hh);
            }
            row.lin(lay.pi(b, t), -dbar / hh);
        }
        nlp.add_inequality(format!("eb[{}]", bus.id), row);
    }
    if structure != TariffStructure::Flat {
        let nu = system.policy.tou_ratio;
        for b in 0..nb {
            let mut row = QuadExpr::default();
            for &t in peak.iter() {
                row.lin(lay.pi(b, t), 1.0 / peak.len() as f64);
            }
            for &t in off.iter() {
                row.lin(lay.pi(b, t), -nu / off.len() as f64);
            }
            nlp.add_inequality(format!("window_floor[{}]", system.buses[b].id), row);
        }
    }
    {
        let mut row = QuadExpr::constant(2.0 * system.policy.avg_tariff_cap);
        for b in 0..nb {
            for &t in peak.iter() {
                row.lin(lay.pi(b, t), -1.0 / (nb * peak.len()) as f64);
            }
            for &t in off.iter() {
                row.lin(lay.pi(b, t), -1.0 / (nb * off.len()) as f64);
            }
        }
        nlp.add_inequality("avg_cap", row);
    }
    debug_assert_eq!(nlp.inequalities.len(), layout.n_ul_ineqs);
    let product_row0 = nlp.inequalities.len();

    // --- complementarity pairs and their relaxed product rows ---
    let mut pairs = Vec::new();
    for r in 0..days {
        for t in 0..hours {
            let pre = format!("r{r}t{t}:");
            let mut pair = |name: String, var: VarId, side: BoundSide, mult: VarId| {
                pairs.push(CompPair { name, var, side, mult });
            };
            pair(format!("{pre}g0.lo"), lay.import_p(r, t), BoundSide::Lower, lay.tau_lo(r, t));
            pair(format!("{pre}g0.hi"), lay.import_p(r, t), BoundSide::Upper, lay.tau_hi(r, t));
            for (i, g) in system.generators.iter().enumerate() {
                pair(
                    format!("{pre}g[{}].lo", g.id),
                    lay.gen_p(r, t, i),
                    BoundSide::Lower,
                    lay.delta_lo(r, t, i),
                );
                pair(
                    format!("{pre}g[{}].hi", g.id),
                    lay.gen_p(r, t, i),
                    BoundSide::Upper,
                    lay.delta_hi(r, t, i),
                );
            }
            for (i, g) in system.generators.iter().enumerate() {
                pair(
                    format!("{pre}q[{}].lo", g.id),
                    lay.gen_q(r, t, i),
                    BoundSide::Lower,
                    lay.theta_lo(r, t, i),
                );
                pair(
                    format!("{pre}q[{}].hi", g.id),
                    lay.gen_q(r, t, i),
                    BoundSide::Upper,
                    lay.theta_hi(r, t, i),
                );
            }
            for b in 0..nb {
                pair(
                    format!("{pre}u[{}].lo", system.buses[b].id),
                    lay.u(r, t, b),
                    BoundSide::Lower,
                    lay.mu_lo(r, t, b),
                );
                pair(
                    format!("{pre}u[{}].hi", system.buses[b].id),
                    lay.u(r, t, b),
                    BoundSide::Upper,
                    lay.mu_hi(r, t, b),
                );
            }
            for l in 0..nl {
                pair(
                    format!("{pre}disk[{l}]"),
                    lay.disk_slack(r, t, l),
                    BoundSide::Lower,
                    lay.eta(r, t, l),
                );
            }
        }
    }
    debug_assert_eq!(pairs.len(), layout.pairs_per_interval * layout.intervals());
    for p in &pairs {
        let mut row = QuadExpr::constant(1.0);
        match p.side {
            BoundSide::Lower => {
                row.quad(p.var, p.mult, -1.0).lin(p.mult, nlp.lb[p.var]);
            }
            BoundSide::Upper => {
                row.quad(p.var, p.mult, 1.0).lin(p.mult, -nlp.ub[p.var]);
            }
        }
        nlp.add_inequality(format!("cmp:{}", p.name), row);
    }

    // --- block tags: interval-major locals, coupling rows in the border ---
    {
        let k = layout.intervals() as u32;
        let mut var_block = vec![Blocks::BORDER; nlp.n()];
        for blk in 0..layout.intervals() {
            for v in blk * layout.v_per..(blk + 1) * layout.v_per {
                var_block[v] = blk as u32;
            }
        }
        let mut eq_block = vec![Blocks::BORDER; nlp.equalities.len()];
        for blk in 0..layout.intervals() {
            for e in blk * layout.e_per..(blk + 1) * layout.e_per {
                eq_block[e] = blk as u32;
            }
        }
        let mut ineq_block = vec![Blocks::BORDER; nlp.inequalities.len()];
        for j in 0..pairs.len() {
            ineq_block[product_row0 + j] = (j / layout.pairs_per_interval) as u32;
        }
        nlp.blocks = Some(Blocks { n_blocks: k, var_block, eq_block, ineq_block });
    }

    // --- objective components ---
    let mut f_ew_neg = ObjExpr::default();
    let capital = system
        .policy
        .capital_cost_daily()
        .map_err(|e| MopecError::Assembly(e.to_string()))?;
    f_ew_neg.quad.add_const(capital);
    for r in 0..days {
        for t in 0..hours {
            f_ew_neg.quad.lin(lay.import_p(r, t), weights[r] * system.interface.lmp.at(r, t));
            for (i, g) in system.generators.iter().enumerate() {
                f_ew_neg.quad.lin(lay.gen_p(r, t, i), weights[r] * g.cost);
            }
        }
    }
    for b in 0..nb {
        for r in 0..days {
            f_ew_neg.atoms.push(CdAtom {
                coef: -weights[r],
                var1: lay.d_window(b, r, Window::Peak),
                off1: energy[b][r][Window::Peak.index()],
                var2: lay.d_window(b, r, Window::Off),
                off2: energy[b][r][Window::Off.index()],
                alpha: system.buses[b].alpha,
            });
        }
    }
    let mut f_h = ObjExpr::default();
    for y in Pollutant::ALL {
        if y == Pollutant::Co2 {
            continue;
        }
        for b in 0..nb {
            f_h.quad.lin(lay.e_bus(y, b), system.external_costs.health_cost[b].get(y));
        }
        f_h.quad
            .add_const(system.interface.external_cost.get(y) * system.interface.emissions_total(y, weights));
    }
    let mut f_en = ObjExpr::default();
    f_en.quad.lin(lay.e_total_co2(), system.external_costs.scc - gamma);

    let ncp = NcpSystem {
        nlp,
        pairs,
        objectives: [f_ew_neg, f_h, f_en],
        structure,
        eb,
        layout,
        product_row0,
    };
    check_wiring(&ncp)?;
    Ok(ncp)
}

/// Tariff tie pairs (anchor var, tied var) implementing the structure: flat
/// ties everything to one anchor; time-of-use ties each window to a
/// system-wide anchor; locational time-of-use to a per-bus window anchor;
/// locational-hourly has no ties (tariffs never vary across rep days by
/// construction here — there is one variable per (bus, hour)).
fn tie_pairs(
    lay: &NcpLayout,
    system: &SystemModel,
    structure: TariffStructure,
    peak: &[Hour],
    off: &[Hour],
) -> Vec<(VarId, VarId)> {
    let nb = system.n_buses();
    let hours = system.hours;
    let pi = |b: BusIdx, t: Hour| lay.pi(b, t);
    let w0 = |t: Hour| if peak.contains(&t) { peak[0] } else { off[0] };
    let mut ties = Vec::new();
    match structure {
        TariffStructure::Flat => {
            let anchor = pi(0, 0);
            for b in 0..nb {
                for t in 0..hours {
                    if (b, t) != (0, 0) {
                        ties.push((anchor, pi(b, t)));
                    }
                }
            }
        }
        TariffStructure::TimeOfUse => {
            for b in 0..nb {
                for t in 0..hours {
                    if b == 0 && t == w0(t) {
                        continue;
                    }
                    ties.push((pi(0, w0(t)), pi(b, t)));
                }
            }
        }
        TariffStructure::LocationalTimeOfUse => {
            for b in 0..nb {
                for t in 0..hours {
                    if t == w0(t) {
                        continue;
                    }
                    ties.push((pi(b, w0(t)), pi(b, t)));
                }
            }
        }
        TariffStructure::LocationalHourly => {}
    }
    ties
}

/// Every multiplier variable must appear in a stationarity row, every pair
/// variable must exist, and every pair's bound side must be finite.
fn check_wiring(ncp: &NcpSystem) -> Result<(), MopecError> {
    let n = ncp.nlp.n();
    let mut in_eq = vec![false; n];
    for e in &ncp.nlp.equalities {
        for v in e.vars() {
            in_eq[v] = true;
        }
    }
    for p in &ncp.pairs {
        if p.var >= n || p.mult >= n {
            return Err(MopecError::Assembly(format!("pair {} references a missing variable", p.name)));
        }
        let bound = match p.side {
            BoundSide::Lower => ncp.nlp.lb[p.var],
            BoundSide::Upper => ncp.nlp.ub[p.var],
        };
        if !bound.is_finite() {
            return Err(MopecError::Assembly(format!("pair {} has no finite bound", p.name)));
        }
        if !in_eq[p.mult] {
            return Err(MopecError::Assembly(format!(
                "multiplier {} of pair {} appears in no stationarity row",
                ncp.nlp.var_names[p.mult], p.name
            )));
        }
    }
    Ok(())
}

/// Write a dispatch optimum (for a fixed tariff) into a full system point:
/// dispatch primals and duals, disk lifts, demand variables from the
/// profiles, tariffs, and the closed-form ledger multipliers. Every
/// equality row except revenue adequacy and any violated structure tie holds
/// at the result, as does complementarity — the basis of the cross-module
/// soundness checks.
pub fn embed_dispatch(
    ncp: &NcpSystem,
    system: &SystemModel,
    tariff: &TariffSchedule,
    demand: &[Vec<IntervalProfile>],
    ll: &LlSolution,
) -> Result<Vec<f64>, MopecError> {
    let lay = &ncp.layout;
    if demand.len() != lay.nb {
        return Err(MopecError::Dimension { expected: lay.nb, got: demand.len() });
    }
    let mut x = ncp.nlp.x0.clone();
    let sol = &ll.solution;
    let duals = &ll.duals;
    for r in 0..lay.days {
        for t in 0..lay.hours {
            x[lay.import_p(r, t)] = sol.import_p.at(r, t);
            x[lay.import_q(r, t)] = sol.import_q.at(r, t);
            for i in 0..lay.ng {
                x[lay.gen_p(r, t, i)] = sol.gen_p[i].at(r, t);
                x[lay.gen_q(r, t, i)] = sol.gen_q[i].at(r, t);
                x[lay.delta_lo(r, t, i)] = duals.delta_lo[i].at(r, t);
                x[lay.delta_hi(r, t, i)] = duals.delta_hi[i].at(r, t);
                x[lay.theta_lo(r, t, i)] = duals.theta_lo[i].at(r, t);
                x[lay.theta_hi(r, t, i)] = duals.theta_hi[i].at(r, t);
            }
            for (l, line) in system.lines.iter().enumerate() {
                let fp = sol.flow_p[l].at(r, t);
                let fq = sol.flow_q[l].at(r, t);
                x[lay.flow_p(r, t, l)] = fp;
                x[lay.flow_q(r, t, l)] = fq;
                x[lay.disk_slack(r, t, l)] =
                    (line.apparent_limit * line.apparent_limit - fp * fp - fq * fq).max(0.0);
                x[lay.eta(r, t, l)] = duals.eta_scalar[l].at(r, t);
                x[lay.beta(r, t, l)] = duals.beta[l].at(r, t);
            }
            for b in 0..lay.nb {
                x[lay.u(r, t, b)] = sol.voltage_sq[b].at(r, t);
                x[lay.lam_p(r, t, b)] = duals.lambda_p[b].at(r, t);
                x[lay.lam_q(r, t, b)] = duals.lambda_q[b].at(r, t);
                x[lay.mu_lo(r, t, b)] = duals.mu_lo[b].at(r, t);
                x[lay.mu_hi(r, t, b)] = duals.mu_hi[b].at(r, t);
                x[lay.d(r, t, b)] = demand[b][r].values[t];
            }
            x[lay.beta_ref(r, t)] = duals.beta_ref.at(r, t);
            x[lay.tau_lo(r, t)] = duals.tau_lo.at(r, t);
            x[lay.tau_hi(r, t)] = duals.tau_hi.at(r, t);
        }
    }
    for b in 0..lay.nb {
        for t in 0..lay.hours {
            x[lay.pi(b, t)] = tariff.value(b, 0, t);
        }
        for r in 0..lay.days {
            let peak = &system.policy.peak_window;
            for w in Window::BOTH {
                let total: f64 = (0..lay.hours)
                    .filter(|t| peak.contains(t) == (w == Window::Peak))
                    .map(|t| demand[b][r].values[t])
                    .sum();
                x[lay.d_window(b, r, w)] = total;
            }
        }
    }
    let gamma = system.external_costs.carbon_tax;
    for y in Pollutant::ALL {
        for b in 0..lay.nb {
            x[lay.e_bus(y, b)] = sol.emissions_bus[b].get(y);
            x[lay.psi(y, b)] = if y == Pollutant::Co2 { -gamma } else { 0.0 };
        }
        x[lay.e_total_bus(y)] = sol.emissions_total.get(y);
        x[lay.chi(y)] = if y == Pollutant::Co2 { -gamma } else { 0.0 };
    }
    x[lay.e_total_co2()] = sol.emissions_total.get(Pollutant::Co2)
        + system
            .interface
            .emissions_total(Pollutant::Co2, &system.policy.day_weights);
    Ok(x)
}

/// Read a system point back into reporting types: the tariff schedule
/// (snapped exactly onto its structure by averaging within each tied
/// group), the flexible-demand profiles, and the dispatch quantities with
/// the emission ledger recomputed from generation.
pub fn extract_solution(
    ncp: &NcpSystem,
    system: &SystemModel,
    x: &[f64],
) -> Result<(TariffSchedule, Vec<Vec<IntervalProfile>>, DispatchSolution), MopecError> {
    ncp.check_dim(x)?;
    let lay = &ncp.layout;
    let peak = &system.policy.peak_window;
    let in_peak = |t: &Hour| peak.contains(t);

    // group means snap solver roundoff onto the exact tie manifold
    let mut values = vec![Series::zeros(lay.days, lay.hours); lay.nb];
    let group_mean = |sel: &dyn Fn(BusIdx, Hour) -> bool| -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for b in 0..lay.nb {
            for t in 0..lay.hours {
                if sel(b, t) {
                    acc += x[lay.pi(b, t)];
                    n += 1;
                }
            }
        }
        acc / n.max(1) as f64
    };
    for b in 0..lay.nb {
        for t in 0..lay.hours {
            let v = match ncp.structure {
                TariffStructure::Flat => group_mean(&|_, _| true),
                TariffStructure::TimeOfUse => {
                    let w = in_peak(&t);
                    group_mean(&|_, t2| in_peak(&t2) == w)
                }
                TariffStructure::LocationalTimeOfUse => {
                    let w = in_peak(&t);
                    group_mean(&|b2, t2| b2 == b && in_peak(&t2) == w)
                }
                TariffStructure::LocationalHourly => x[lay.pi(b, t)],
            };
            for r in 0..lay.days {
                values[b].0[r][t] = v;
            }
        }
    }
    let tariff = TariffSchedule { structure: ncp.structure, values };

    let mut demand = Vec::with_capacity(lay.nb);
    for b in 0..lay.nb {
        let mut per_day = Vec::with_capacity(lay.days);
        for r in 0..lay.days {
            per_day.push(IntervalProfile {
                values: (0..lay.hours).map(|t| x[lay.d(r, t, b)]).collect(),
                reference: system.demand_p[b].0[r].clone(),
            });
        }
        demand.push(per_day);
    }

    let zero = || Series::zeros(lay.days, lay.hours);
    let mut sol = DispatchSolution {
        import_p: zero(),
        import_q: zero(),
        gen_p: vec![zero(); lay.ng],
        gen_q: vec![zero(); lay.ng],
        flow_p: vec![zero(); lay.nl],
        flow_q: vec![zero(); lay.nl],
        voltage_sq: vec![zero(); lay.nb],
        emissions_bus: vec![PolMap::default(); lay.nb],
        emissions_total: PolMap::default(),
        dispatch_cost: 0.0,
    };
    for r in 0..lay.days {
        let w = system.policy.day_weights[r];
        for t in 0..lay.hours {
            sol.import_p.0[r][t] = x[lay.import_p(r, t)];
            sol.import_q.0[r][t] = x[lay.import_q(r, t)];
            sol.dispatch_cost += w * system.interface.lmp.at(r, t) * x[lay.import_p(r, t)];
            for (i, g) in system.generators.iter().enumerate() {
                let gp = x[lay.gen_p(r, t, i)];
                sol.gen_p[i].0[r][t] = gp;
                sol.gen_q[i].0[r][t] = x[lay.gen_q(r, t, i)];
                sol.dispatch_cost += w * g.cost * gp;
                for y in Pollutant::ALL {
                    let ledger = &mut sol.emissions_bus[g.bus];
                    let prev = ledger.get(y);
                    ledger.set(y, prev + w * g.emission_rates.get(y) * gp);
                }
            }
            for l in 0..lay.nl {
                sol.flow_p[l].0[r][t] = x[lay.flow_p(r, t, l)];
                sol.flow_q[l].0[r][t] = x[lay.flow_q(r, t, l)];
            }
            for b in 0..lay.nb {
                sol.voltage_sq[b].0[r][t] = x[lay.u(r, t, b)];
            }
        }
    }
    for b in 0..lay.nb {
        for y in Pollutant::ALL {
            sol.emissions_total.set(y, sol.emissions_total.get(y) + sol.emissions_bus[b].get(y));
        }
    }
    Ok((tariff, demand, sol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatch::{build_ll, solve_ll, tariff_demand};
    use crate::testfix::two_bus;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn toy_ncp(structure: TariffStructure) -> (crate::system::SystemModel, NcpSystem) {
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        let ncp = assemble_kkt(&sys, structure, 0.09).unwrap();
        (sys, ncp)
    }

    #[test]
    fn census_counts_two_bus_flat() {
        let (_, ncp) = toy_ncp(TariffStructure::Flat);
        let l = &ncp.layout;
        // nb=2 ng=1 nl=1 T=2 R=1
        assert_eq!(l.intervals(), 2);
        // pairs: interface 2 + generator boxes 4 + voltage boxes 4 + disk 1
        assert_eq!(l.pairs_per_interval, 11);
        assert_eq!(ncp.pairs.len(), 22);
        // tariff grid 4, ties reduce to one scalar
        assert_eq!(l.n_ties, 3);
        // per interval: primal 2+2+2+2, duals 2+2+1+1, mults 2+4+4, disk 2, d 2
        let v_per = 8 + 6 + 10 + 2 + 2;
        // border: pi 4 + dw 4 + e 10 + eD 5 + etot 1 + psi 10 + chi 5
        assert_eq!(l.n_vars, 2 * v_per + 39);
        // rows per interval: balances 4 + voltage 1 + ref 1 + disk 1 + st 8 + share 2
        let e_per = 4 + 1 + 1 + 1 + 8 + 2;
        // border rows: dw 4 + ledger 10+5 + st_e 10+5 + adequacy 1 + co2 1 + ties 3
        assert_eq!(l.n_eqs, 2 * e_per + 39);
        // regulator rows: eb 2 + avg 1 (flat: no window floors)
        assert_eq!(l.n_ul_ineqs, 3);
        assert_eq!(ncp.nlp.inequalities.len(), 3 + 22);
        let census = ncp.census();
        assert!(census.contains("tariff dof 1"), "{census}");
        assert!(census.contains("pairs total 22"), "{census}");
    }

    #[test]
    fn tie_counts_by_structure() {
        // two hours, one per window: locational time-of-use already has a
        // free variable per (bus, window), so no ties remain
        for (structure, ties) in [
            (TariffStructure::Flat, 3),
            (TariffStructure::TimeOfUse, 2),
            (TariffStructure::LocationalTimeOfUse, 0),
            (TariffStructure::LocationalHourly, 0),
        ] {
            let (_, ncp) = toy_ncp(structure);
            assert_eq!(ncp.layout.n_ties, ties, "{structure}");
        }
    }

    #[test]
    fn dispatch_optimum_satisfies_equilibrium_rows() {
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        let tariff = TariffSchedule::time_of_use(&sys, 50.0, 35.0);
        let demand = tariff_demand(&sys, &tariff).unwrap();
        let ll = solve_ll(&build_ll(&sys, &tariff, &demand).unwrap()).unwrap();
        let ncp = assemble_kkt(&sys, TariffStructure::TimeOfUse, 0.09).unwrap();
        let x = embed_dispatch(&ncp, &sys, &tariff, &demand, &ll).unwrap();
        let mut worst = (0.0f64, String::new());
        for (j, e) in ncp.nlp.equalities.iter().enumerate() {
            let name = &ncp.nlp.eq_names[j];
            if name == "adequacy" {
                continue; // an arbitrary tariff has no reason to satisfy it
            }
            let v = e.eval(&x).abs();
            if v > worst.0 {
                worst = (v, name.clone());
            }
        }
        assert!(worst.0 <= 1e-6, "worst equality {} = {:.3e}", worst.1, worst.0);
        let (max_prod, min_coord) = complementarity_violation(&ncp, &x).unwrap();
        assert!(max_prod <= 1e-6, "complementarity product {max_prod:.3e}");
        assert!(min_coord >= -1e-9, "pair coordinate {min_coord:.3e}");
        // regulator inequality rows are also respected by this point
        let mut cv = Vec::new();
        ncp.nlp.eval_inequalities(&x, &mut cv);
        for j in 0..ncp.layout.n_ul_ineqs {
            assert!(cv[j] >= -1e-7, "{} = {:.3e}", ncp.nlp.ineq_names[j], cv[j]);
        }
    }

    #[test]
    fn product_rows_follow_rho() {
        let (_, ncp) = toy_ncp(TariffStructure::Flat);
        let mut nlp = ncp.nlp.clone();
        ncp.apply_rho(&mut nlp, 0.37);
        for j in ncp.product_rows() {
            assert_eq!(nlp.inequalities[j].constant, 0.37);
        }
        // at x0 all multipliers are 1 and slacks are at their defaults; the
        // product row value must equal rho - slack*mult
        let x = nlp.x0.clone();
        let j0 = ncp.product_rows().next().unwrap();
        let p = &ncp.pairs[0];
        let expect = 0.37 - p.slack(&nlp, &x) * p.mult(&x);
        assert_relative_eq!(nlp.inequalities[j0].eval(&x), expect, max_relative = 1e-12);
    }

    #[test]
    fn violation_metrics_spot_values() {
        let (_, ncp) = toy_ncp(TariffStructure::Flat);
        let mut x = vec![0.0; ncp.nlp.n()];
        // zero multipliers kill every product; then activate one pair
        let p0 = &ncp.pairs[0]; // interface lower bound at (r0, t0)
        x[p0.var] = ncp.nlp.lb[p0.var] + 0.1;
        x[p0.mult] = 0.2;
        // keep box-bounded vars inside their boxes so slacks stay nonnegative
        for b in 0..ncp.layout.nb {
            for t in 0..ncp.layout.hours {
                x[ncp.layout.u(0, t, b)] = 1.0;
            }
        }
        for l in 0..ncp.layout.nl {
            for t in 0..ncp.layout.hours {
                x[ncp.layout.disk_slack(0, t, l)] = 1.0;
            }
        }
        let (max_prod, min_coord) = complementarity_violation(&ncp, &x).unwrap();
        assert_relative_eq!(max_prod, 0.02, max_relative = 1e-12);
        assert_eq!(min_coord, 0.0);
        let bad = complementarity_violation(&ncp, &x[..5].to_vec());
        assert!(bad.is_err());
    }

    /// Minimal hand-built system for the classification sign conventions:
    /// two variables, one pair, no equalities.
    fn micro_ncp() -> NcpSystem {
        let mut nlp = Nlp::default();
        let xv = nlp.add_var("x", 0.0, f64::INFINITY, 0.0);
        let yv = nlp.add_var("y", 0.0, f64::INFINITY, 0.0);
        let mut prod = QuadExpr::constant(1e-8);
        prod.quad(xv, yv, -1.0);
        nlp.add_inequality("cmp:xy", prod);
        NcpSystem {
            nlp,
            pairs: vec![CompPair {
                name: "xy".into(),
                var: xv,
                side: BoundSide::Lower,
                mult: yv,
            }],
            objectives: [ObjExpr::default(), ObjExpr::default(), ObjExpr::default()],
            structure: TariffStructure::Flat,
            eb: 0.09,
            layout: NcpLayout::default(),
            product_row0: 0,
        }
    }

    fn micro_point(nu_s: f64, nu_m: f64) -> RelaxedPoint {
        RelaxedPoint {
            x: vec![0.0, 0.0],
            y: vec![],
            w: vec![0.0],
            zl: vec![nu_s, nu_m],
            zu: vec![0.0, 0.0],
        }
    }

    #[test]
    fn classification_sign_cases() {
        let ncp = micro_ncp();
        let tol = 1e-8;
        let run = |p: RelaxedPoint| classify_stationarity(&ncp, &p, tol).unwrap();
        assert_eq!(run(micro_point(1.0, 1.0)).class, Stationarity::Strong);
        assert_eq!(run(micro_point(1.0, -1.0)).class, Stationarity::None);
        assert_eq!(run(micro_point(0.0, -5.0)).class, Stationarity::MStationary);
        assert_eq!(run(micro_point(-1.0, -1.0)).class, Stationarity::CStationary);
        // the product-row multiplier drops out when both coordinates are
        // exactly zero ...
        let mut p = micro_point(1.0, 0.0);
        p.w[0] = 3.0;
        assert_eq!(run(p).class, Stationarity::Strong);
        // ... but shifts the recovered multiplier when the pair is bi-active
        // only to within tolerance
        let mut p = micro_point(1.0, 1.0);
        p.x = vec![0.0, 1e-9];
        p.w[0] = 2e9;
        assert_eq!(run(p).class, Stationarity::None);
        // no bi-active pair: strong regardless of multipliers
        let mut p = micro_point(-9.0, -9.0);
        p.x = vec![1.0, 0.0];
        let rep = run(p);
        assert_eq!(rep.class, Stationarity::Strong);
        assert_eq!(rep.bi_active, 0);
        assert!(rep.witness.is_none());
        // infeasible coordinate rejected
        let mut p = micro_point(0.0, 0.0);
        p.x = vec![-1.0, 0.0];
        assert!(classify_stationarity(&ncp, &p, tol).is_err());
    }

    #[test]
    fn strong_class_at_adequate_flat_tariff() {
        // bisect the flat tariff until revenue adequacy holds, so the
        // embedded point passes the classifier's feasibility screen
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        let solve_at = |p: f64| {
            let tariff = TariffSchedule::uniform(&sys, p);
            let demand = tariff_demand(&sys, &tariff).unwrap();
            let ll = solve_ll(&build_ll(&sys, &tariff, &demand).unwrap()).unwrap();
            (tariff, demand, ll)
        };
        let residual_at = |p: f64| {
            let (tariff, demand, ll) = solve_at(p);
            dispatch::revenue_adequacy_residual(&sys, &tariff, &demand, &ll.solution).unwrap()
        };
        let (mut lo, mut hi) = (20.0, 100.0);
        assert!(residual_at(lo) < 0.0 && residual_at(hi) > 0.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if residual_at(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let pi = 0.5 * (lo + hi);
        let (tariff, demand, ll) = solve_at(pi);
        let ncp = assemble_kkt(&sys, TariffStructure::Flat, 0.09).unwrap();
        let x = embed_dispatch(&ncp, &sys, &tariff, &demand, &ll).unwrap();
        let point = RelaxedPoint {
            y: vec![0.0; ncp.nlp.equalities.len()],
            w: vec![0.0; ncp.nlp.inequalities.len()],
            zl: vec![0.0; ncp.nlp.n()],
            zu: vec![0.0; ncp.nlp.n()],
            x,
        };
        // strict complementarity at the dispatch optimum: no bi-active pairs
        let rep = classify_stationarity(&ncp, &point, 1e-7).unwrap();
        assert_eq!(rep.class, Stationarity::Strong);
        assert_eq!(rep.bi_active, 0);
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let (_, ncp) = toy_ncp(TariffStructure::TimeOfUse);
        let mut rng = StdRng::seed_from_u64(7);
        let n = ncp.nlp.n();
        let mut x = vec![0.0; n];
        for i in 0..n {
            let lo = ncp.nlp.lb[i].max(-10.0);
            let hi = ncp.nlp.ub[i].min(10.0);
            x[i] = rng.random_range(lo..=hi) + 0.1;
            x[i] = x[i].clamp(ncp.nlp.lb[i], ncp.nlp.ub[i]);
        }
        let rows: Vec<&QuadExpr> = ncp
            .nlp
            .equalities
            .iter()
            .chain(ncp.nlp.inequalities.iter())
            .collect();
        for (ri, row) in rows.iter().enumerate().step_by(7) {
            let mut tri = Vec::new();
            row.add_jacobian_row(&x, ri, &mut tri);
            let mut dense = vec![0.0; n];
            for (_, c, v) in tri {
                dense[c] += v;
            }
            for i in row.vars().collect::<std::collections::BTreeSet<_>>() {
                let h = 1e-6 * (1.0 + x[i].abs());
                let mut xp = x.clone();
                xp[i] += h;
                let fp = row.eval(&xp);
                xp[i] = x[i] - h;
                let fm = row.eval(&xp);
                let fd = (fp - fm) / (2.0 * h);
                assert_relative_eq!(dense[i], fd, max_relative = 1e-5, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn extract_round_trips_tariff_and_demand() {
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        let tariff = TariffSchedule::time_of_use(&sys, 50.0, 35.0);
        let demand = tariff_demand(&sys, &tariff).unwrap();
        let ll = solve_ll(&build_ll(&sys, &tariff, &demand).unwrap()).unwrap();
        let ncp = assemble_kkt(&sys, TariffStructure::TimeOfUse, 0.09).unwrap();
        let x = embed_dispatch(&ncp, &sys, &tariff, &demand, &ll).unwrap();
        let (tariff2, demand2, sol2) = extract_solution(&ncp, &sys, &x).unwrap();
        assert_eq!(tariff2.structure, TariffStructure::TimeOfUse);
        for b in 0..2 {
            for t in 0..2 {
                assert_relative_eq!(
                    tariff2.value(b, 0, t),
                    tariff.value(b, 0, t),
                    max_relative = 1e-12
                );
                assert_relative_eq!(
                    demand2[b][0].values[t],
                    demand[b][0].values[t],
                    max_relative = 1e-12
                );
            }
        }
        tariff2.validate(&sys).unwrap();
        assert_relative_eq!(
            sol2.emissions_total.get(Pollutant::Co2),
            ll.solution.emissions_total.get(Pollutant::Co2),
            max_relative = 1e-9
        );
        assert_relative_eq!(sol2.dispatch_cost, ll.solution.dispatch_cost, max_relative = 1e-9);
    }

    #[test]
    fn objective_components_match_dispatch_evaluators() {
        let sys = two_bus([25.0, 60.0], 35.0, 6.0);
        let tariff = TariffSchedule::uniform(&sys, 40.0);
        let demand = tariff_demand(&sys, &tariff).unwrap();
        let ll = solve_ll(&build_ll(&sys, &tariff, &demand).unwrap()).unwrap();
        let ncp = assemble_kkt(&sys, TariffStructure::Flat, 0.09).unwrap();
        let x = embed_dispatch(&ncp, &sys, &tariff, &demand, &ll).unwrap();
        let [f0, f1, f2] = ncp.objective_values(&x);
        let ob = dispatch::eval_objectives(&sys, &tariff, &demand, &ll.solution).unwrap();
        assert_relative_eq!(f0, -ob.f_ew, max_relative = 1e-9);
        assert_relative_eq!(f1, ob.f_h, max_relative = 1e-9);
        assert_relative_eq!(f2, ob.f_en, max_relative = 1e-9);
    }

    #[test]
    fn assembly_rejects_empty_windows_and_bad_eb() {
        let mut sys = two_bus([25.0, 60.0], 35.0, 6.0);
        assert!(assemble_kkt(&sys, TariffStructure::Flat, 0.0).is_err());
        // kill the peak-window load at the hub
        sys.demand_p[0].0[0][1] = 0.0;
        assert!(assemble_kkt(&sys, TariffStructure::Flat, 0.09).is_err());
    }
}
