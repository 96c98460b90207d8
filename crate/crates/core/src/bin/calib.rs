//! Scratch calibration probe for the bundled datasets. Not part of the API.
use std::path::Path;
use std::time::Instant;
use tariff_core::dispatch::{
    self, energy_burden, TariffSchedule, TariffStructure,
};
use tariff_core::mopec::assemble_kkt;
use tariff_core::solver::{extract, scholtes_solve, ScholtesSchedule};
use tariff_core::system::{load_system, SystemModel};

fn adequacy_at(system: &SystemModel, pi: f64) -> (f64, Vec<f64>) {
    let tariff = TariffSchedule::uniform(system, pi);
    let demand = dispatch::tariff_demand(system, &tariff).expect("demand");
    let ll = dispatch::solve_ll(&dispatch::build_ll(system, &tariff, &demand).expect("ll"))
        .expect("solve_ll");
    let b = dispatch::eval_objectives(system, &tariff, &demand, &ll.solution).expect("objectives");
    let resid = b.revenue - (1.0 + system.policy.rate_of_return) * b.capital_cost - b.op_cost;
    let burdens = (0..system.n_buses())
        .map(|bi| energy_burden(system, &tariff, &demand, bi).0)
        .collect();
    (resid, burdens)
}

fn flat_root(system: &SystemModel, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let (r, _) = adequacy_at(system, mid);
        if r > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn main() {
    let dir = Path::new("datasets/manhattan7");
    let system = load_system(dir).expect("load manhattan7");
    println!(
        "loaded: {} buses, {} gens, {} hours x {} days, capital {:.1} $/day",
        system.n_buses(),
        system.generators.len(),
        system.hours,
        system.days,
        system.policy.capital_cost_daily().unwrap()
    );

    let t0 = Instant::now();
    let root = flat_root(&system, 16.0, 240.0);
    let (resid, burdens) = adequacy_at(&system, root);
    println!("flat adequacy root pi* = {:.4} (resid {:.3e}), {:.1}s", root, resid, t0.elapsed().as_secs_f64());
    for (b, burden) in burdens.iter().enumerate() {
        println!("  bus {}: burden {:.4}%", system.buses[b].id, 100.0 * burden);
    }
    let kstar = burdens.iter().cloned().fold(0.0_f64, f64::max);
    println!("  flat threshold kappa* = {:.4}%", 100.0 * kstar);

    // flat solves
    for eb in [0.09_f64, 0.10] {
        let t0 = Instant::now();
        let ncp = assemble_kkt(&system, TariffStructure::Flat, eb).expect("assemble");
        println!(
            "  flat eb {:.2}: {} vars, {} eqs, {} pairs",
            eb,
            ncp.nlp.n(),
            ncp.nlp.equalities.len(),
            ncp.pairs.len()
        );
        let rep = scholtes_solve(&system, &ncp, [1.0, 1.0, 1.0], &ScholtesSchedule::default(), None);
        let dt = t0.elapsed().as_secs_f64();
        match rep {
            Ok(rep) => {
                println!(
                    "  flat eb {:.2}: status {:?} in {:.1}s, scalarized {:.6e}",
                    eb, rep.status, dt, rep.scalarized
                );
                if rep.status.is_converged() {
                    let sol = extract(&system, &ncp, &rep).expect("extract");
                    println!(
                        "    pi = {:.4}, worst burden {:.4}%",
                        sol.tariff.value(0, 0, 0),
                        100.0
                            * (0..system.n_buses())
                                .map(|b| energy_burden(&system, &sol.tariff, &sol.demand, b).0)
                                .fold(0.0_f64, f64::max)
                    );
                    let audit = tariff_core::audit_solution(&system, &ncp, &rep, 1e-6);
                    println!("    audit pass = {} ({} checks)", audit.pass, audit.checks);
                }
            }
            Err(e) => println!("  flat eb {:.2}: ERROR {e} after {:.1}s", eb, dt),
        }
    }

    // TOU threshold probe
    for eb in [0.080_f64, 0.084, 0.085, 0.09] {
        let t0 = Instant::now();
        let ncp = assemble_kkt(&system, TariffStructure::TimeOfUse, eb).expect("assemble");
        let rep = scholtes_solve(&system, &ncp, [1.0, 1.0, 1.0], &ScholtesSchedule::default(), None);
        let dt = t0.elapsed().as_secs_f64();
        match rep {
            Ok(rep) => {
                let tag = format!("{:?}", rep.status);
                if rep.status.is_converged() {
                    let sol = extract(&system, &ncp, &rep).expect("extract");
                    let worst = (0..system.n_buses())
                        .map(|b| energy_burden(&system, &sol.tariff, &sol.demand, b).0)
                        .fold(0.0_f64, f64::max);
                    println!(
                        "  tou eb {:.3}: {} in {:.1}s, pi ({:.3},{:.3}), worst burden {:.4}%",
                        eb,
                        tag,
                        dt,
                        sol.tariff.value(0, 0, system.policy.peak_window[0]),
                        sol.tariff.value(0, 0, 0),
                        100.0 * worst
                    );
                } else {
                    println!("  tou eb {:.3}: {} in {:.1}s", eb, tag, dt);
                }
            }
            Err(e) => println!("  tou eb {:.3}: ERROR {e} after {:.1}s", eb, dt),
        }
    }

    // locational tou at the sweep minimum
    let t0 = Instant::now();
    let ncp = assemble_kkt(&system, TariffStructure::LocationalTimeOfUse, 0.06).expect("assemble");
    println!(
        "  loc-tou: {} vars, {} eqs, {} pairs",
        ncp.nlp.n(),
        ncp.nlp.equalities.len(),
        ncp.pairs.len()
    );
    let rep = scholtes_solve(&system, &ncp, [1.0, 1.0, 1.0], &ScholtesSchedule::default(), None);
    let dt = t0.elapsed().as_secs_f64();
    match rep {
        Ok(rep) => println!(
            "  loc-tou eb 0.06: {:?} in {:.1}s, scalarized {:.6e}",
            rep.status, dt, rep.scalarized
        ),
        Err(e) => println!("  loc-tou eb 0.06: ERROR {e} after {:.1}s", dt),
    }

    // twobus sanity
    let system = load_system(Path::new("datasets/twobus")).expect("load twobus");
    let t0 = Instant::now();
    let root = flat_root(&system, 11.0, 119.0);
    let (_, burdens) = adequacy_at(&system, root);
    println!(
        "twobus flat root pi = {:.4} ({:.1}s), worst burden {:.3}%",
        root,
        t0.elapsed().as_secs_f64(),
        100.0 * burdens.iter().cloned().fold(0.0_f64, f64::max)
    );
    let ncp = assemble_kkt(&system, TariffStructure::Flat, 0.10).expect("assemble");
    let t0 = Instant::now();
    let rep = scholtes_solve(&system, &ncp, [1.0, 1.0, 1.0], &ScholtesSchedule::default(), None)
        .expect("solve");
    println!(
        "twobus flat solve: {:?} in {:.1}s, scalarized {:.6e}",
        rep.status,
        t0.elapsed().as_secs_f64(),
        rep.scalarized
    );
}
