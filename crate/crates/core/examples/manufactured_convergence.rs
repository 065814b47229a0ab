//! Observed orders for a damped manufactured solution: first order in time,
//! second order in space.

use cmaflow::flow::{run_flow, Stepper, TimeConfig};
use cmaflow::geometry::{make_domain, DomainKind};
use cmaflow::harness::observed_orders;
use cmaflow::oracle::{damped_manufactured_source, ClosedForm};

fn main() -> cmaflow::Result<()> {
    let domain = make_domain(DomainKind::Ball, 1)?;
    let horizon = 0.5;

    // e^{-t}|z|^2 is quadratic in space, so only the time error remains
    let case = damped_manufactured_source(ClosedForm::exp_decay(1), 1.0, &domain, horizon)?;
    let dts = [0.05, 0.025, 0.0125, 0.00625];
    let mut errors = Vec::new();
    for &dt in &dts {
        let time = TimeConfig::new(horizon, dt, vec![0.0, horizon]);
        let problem = case.problem(domain.clone(), 0.05, Stepper::Implicit, time)?;
        errors.push(run_flow(&problem, None)?.max_error(|x, t| case.exact(x, t)));
    }
    report("dt", &dts, &errors);

    // the quartic is linear in t, so implicit Euler carries no time error
    let case = damped_manufactured_source(ClosedForm::quartic(0.5, 1.0, 1), 1.0, &domain, horizon)?;
    let hs = [0.1, 0.05, 0.025, 0.0125];
    let mut errors = Vec::new();
    for &h in &hs {
        let time = TimeConfig::new(horizon, 0.05, vec![0.0, horizon]);
        let problem = case.problem(domain.clone(), h, Stepper::Implicit, time)?;
        errors.push(run_flow(&problem, None)?.max_error(|x, t| case.exact(x, t)));
    }
    report("h", &hs, &errors);
    Ok(())
}

fn report(label: &str, params: &[f64], errors: &[f64]) {
    for ((p, e), o) in params.iter().zip(errors).zip(observed_orders(params, errors)) {
        match o {
            Some(o) => println!("{label} = {p:<8} error {e:.3e} order {o:.2}"),
            None => println!("{label} = {p:<8} error {e:.3e}"),
        }
    }
}
