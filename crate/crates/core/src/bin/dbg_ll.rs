//! Scratch: single-hour LL subproblem through the IPM with diagnostics.
use std::path::Path;
use tariff_core::dispatch::{self, TariffSchedule};
use tariff_core::ipm::{self, IpmOptions};
use tariff_core::system::load_system;

struct StderrLog;
impl log::Log for StderrLog {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }
    fn log(&self, record: &log::Record) {
        eprintln!("{}", record.args());
    }
    fn flush(&self) {}
}

fn main() {
    log::set_logger(&StderrLog).unwrap();
    log::set_max_level(log::LevelFilter::Trace);
    let system = load_system(Path::new("datasets/manhattan7")).expect("load");
    let pi = 128.0;
    let tariff = TariffSchedule::uniform(&system, pi);
    let demand = dispatch::tariff_demand(&system, &tariff).expect("demand");
    let ll = dispatch::build_ll(&system, &tariff, &demand).expect("ll");
    let nlp = &ll.subproblems[0];
    println!("hour 0: {} vars, {} eqs, {} ineqs", nlp.n(), nlp.equalities.len(), nlp.inequalities.len());
    for (j, e) in nlp.equalities.iter().enumerate() {
        let mut v = vec![0.0; 1];
        let _ = e;
        let _ = v.pop();
        println!("  eq[{j}] {}", nlp.eq_names[j]);
        if j > 18 { break; }
    }
    let opts = IpmOptions { max_iter: 200, ..Default::default() };
    let res = ipm::solve(nlp, None, &opts);
    println!(
        "status {:?}, {} iters, kkt {:.3e}, viol {:.3e}, obj {:.6e}",
        res.status, res.iterations, res.kkt_error, res.constraint_violation, res.objective
    );
    for (i, name) in nlp.var_names.iter().enumerate() {
        println!("  x[{i}] {name} = {:.4} in [{:.1}, {:.1}]", res.x[i], nlp.lb[i], nlp.ub[i]);
        if i > 30 { break; }
    }
}
