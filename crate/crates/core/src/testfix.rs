//! Shared in-memory fixtures for unit tests.

use crate::demand::IntervalProfile;
use crate::system::{
    Bus, ExternalCosts, Generator, Line, PolMap, Pollutant, RegulatorPolicy, Series, SystemModel,
    WholesaleInterface,
};

/// Two buses: wholesale root "hub" and a load bus "town" with one generator.
/// Two hours; hour 1 is the peak window. One rep day.
pub(crate) fn two_bus(lmp: [f64; 2], gen_cost: f64, line_limit: f64) -> SystemModel {
    let buses = vec![
        Bus {
            id: "hub".into(),
            population: 10.0,
            household_size: 2.5,
            income: 60_000.0,
            alpha: 0.6,
            v_min_sq: 0.81,
            v_max_sq: 1.21,
            tariff_min: 5.0,
            tariff_max: 100.0,
        },
        Bus {
            id: "town".into(),
            population: 1000.0,
            household_size: 2.5,
            income: 60_000.0,
            alpha: 0.6,
            v_min_sq: 0.81,
            v_max_sq: 1.21,
            tariff_min: 5.0,
            tariff_max: 100.0,
        },
    ];
    let lines = vec![Line {
        from: 0,
        to: 1,
        resistance: 1e-4,
        reactance: 2e-4,
        apparent_limit: line_limit,
    }];
    let mut rates = PolMap::default();
    rates.set(Pollutant::Co2, 0.4);
    rates.set(Pollutant::Nox, 0.001);
    let generators = vec![Generator {
        id: "gt".into(),
        bus: 1,
        cost: gen_cost,
        p_min: 0.0,
        p_max: 20.0,
        q_min: -10.0,
        q_max: 10.0,
        emission_rates: rates,
    }];
    let mut tco2 = Series::zeros(1, 2);
    tco2.0[0] = vec![0.3 * 5.0, 0.3 * 8.0];
    let mut trans = vec![Series::zeros(1, 2); Pollutant::COUNT];
    trans[Pollutant::Co2.index()] = tco2;
    let mut ext_if = PolMap::default();
    ext_if.set(Pollutant::Nox, 10_000.0);
    let mut health = PolMap::default();
    health.set(Pollutant::So2, 30_000.0);
    health.set(Pollutant::Nox, 20_000.0);
    health.set(Pollutant::Ch4, 1_500.0);
    health.set(Pollutant::Pm25, 80_000.0);
    let mut health_hub = health;
    health_hub.set(Pollutant::Nox, 9_000.0);
    let model = SystemModel {
        interface: WholesaleInterface {
            flow_limit: 30.0,
            allow_export: false,
            lmp: Series(vec![lmp.to_vec()]),
            transmission_emissions: trans,
            external_cost: ext_if,
        },
        external_costs: ExternalCosts {
            health_cost: vec![health_hub, health],
            carbon_tax: 20.0,
            scc: 51.0,
        },
        policy: RegulatorPolicy {
            eb_regulator: 0.09,
            eb_household: Some(0.0075),
            tou_ratio: 1.0,
            rate_of_return: 0.11,
            capital_pv: 100_000.0,
            capital_years: 20,
            capital_rate: 0.05,
            avg_tariff_cap: 45.0,
            peak_window: vec![1],
            weights: [1.0, 1.0, 1.0],
            day_weights: vec![1.0],
        },
        root: 0,
        hours: 2,
        days: 1,
        demand_p: vec![Series(vec![vec![0.1, 0.1]]), Series(vec![vec![3.0, 5.0]])],
        demand_q: vec![Series(vec![vec![0.0, 0.0]]), Series(vec![vec![0.5, 1.0]])],
        parent: Vec::new(),
        children: Vec::new(),
        gens_at: Vec::new(),
        buses,
        lines,
        generators,
    };
    SystemModel::assemble(model).expect("fixture must validate")
}

/// Zero flexible-demand profiles shaped like the system's inflexible load.
pub(crate) fn zero_profiles(system: &SystemModel) -> Vec<Vec<IntervalProfile>> {
    (0..system.n_buses())
        .map(|b| {
            (0..system.days)
                .map(|r| IntervalProfile {
                    values: vec![0.0; system.hours],
                    reference: system.demand_p[b].0[r].clone(),
                })
                .collect()
        })
        .collect()
}
