//! Justice-cognizant electricity tariff design for radial distribution feeders.
//!
//! The pipeline models a regulator choosing retail tariffs over a utility that
//! dispatches a LinDistFlow network against wholesale prices and a carbon tax,
//! with Cobb-Douglas flexible demand responding to the tariff. The regulator
//! trades off economic welfare, public-health damages from local pollutants,
//! and unpriced carbon, subject to per-household energy-burden caps and
//! revenue adequacy.
//!
//! The bilevel game is reduced to a single-level complementarity system by
//! replacing the utility's convex dispatch problem with its KKT conditions
//! ([`mopec`]), scalarizing the three regulator objectives, relaxing the
//! complementarity products, and driving the relaxation to zero with a
//! sequence of interior-point solves ([`solver`]). A brute-force tariff grid
//! oracle ([`oracle`]) cross-checks desk-scale results.

pub mod demand;
pub mod dispatch;
pub mod expr;
pub mod ipm;
pub mod linalg;
pub mod mopec;
pub mod oracle;
pub mod solver;
pub mod system;
#[cfg(test)]
pub(crate) mod testfix;

pub use demand::{DemandSplit, IntervalProfile};
pub use dispatch::{
    DispatchDuals, DispatchSolution, LlProgram, ObjectiveBreakdown, TariffSchedule,
    TariffStructure,
};
pub use mopec::{NcpSystem, Stationarity};
pub use oracle::{audit_solution, grid_search, AuditRecord, GridSpec};
pub use solver::{ScholtesSchedule, SolverReport, SolverStatus};
pub use system::{
    Bus, ExternalCosts, Generator, Line, Pollutant, RegulatorPolicy, SystemModel,
    WholesaleInterface,
};
