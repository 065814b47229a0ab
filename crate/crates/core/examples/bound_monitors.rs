//! A priori bounds along a flow on an ellipsoid: sup |u|, t |u_t|, the gradient
//! and Laplacian on the late window, and tangential positivity at the boundary.

use std::sync::Arc;

use cmaflow::barriers::construct_subsolution;
use cmaflow::estimates::{boundary_tangential, bound_monitors, bound_constants};
use cmaflow::flow::{run_flow, BoundaryData, FlowProblem, Source, Stepper, TimeConfig};
use cmaflow::geometry::{classify_grid, make_domain, DomainKind, ScalarFn};
use cmaflow::initial_data::{build_level, InitialData, InitialKind};

fn main() -> cmaflow::Result<()> {
    let domain = make_domain(DomainKind::Ellipsoid(vec![1.0, 0.8]), 2)?;
    let phi = BoundaryData::new("Re z1", |x, _| x[0]);
    let grid = Arc::new(classify_grid(&domain, 0.2)?);
    let rho = domain.rho_fn();
    let u0: ScalarFn = Arc::new(move |x: &[f64]| x[0] + rho(x));
    let data = InitialData::with_evaluator(InitialKind::Custom("rho + Re z1".into()), u0, true, &domain, &grid)?;
    let time = TimeConfig::new(0.5, 0.05, TimeConfig::quadratic_schedule(0.5, 6));
    let problem = FlowProblem::assemble(domain, grid, Source::constant(-0.5), phi, data, Stepper::Implicit, time)?;

    let traj = run_flow(&problem, None)?;
    let base = build_level(&problem.initial, 1, &problem.domain, &problem.ops, &problem.source, &problem.boundary, None)?;
    let m1 = construct_subsolution(&problem, &base)?.big_m;
    let constants = bound_constants(&problem, problem.initial.bound, m1);
    let report = bound_monitors(&traj, &problem, 0.05, constants)?;
    println!("M_1 = {m1:.4}, ellipticity on the window {:?}", report.ellipticity);
    for m in &report.monitors {
        match m.bound {
            Some(b) => println!("{:<14} {:>12.4e} <= {b:.4e} {}", m.name, m.measured, if m.pass() { "ok" } else { "FAIL" }),
            None => println!("{:<14} {:>12.4e}", m.name, m.measured),
        }
    }
    if let Some(c) = boundary_tangential(&problem, traj.final_state().expect("nonempty")) {
        println!("tangential min eigenvalue at t = T: {c:.4}");
    }
    Ok(())
}

