//! `u = |z|^2 + t` solves the flow with `f = 1`; both steppers reproduce it to
//! rounding error because the scheme is exact on quadratics.

use cmaflow::flow::{run_flow, Stepper, TimeConfig};
use cmaflow::geometry::{make_domain, DomainKind};
use cmaflow::oracle::exact_quadratic_family;

fn main() -> cmaflow::Result<()> {
    for (n, h) in [(1, 0.05), (2, 0.25)] {
        let domain = make_domain(DomainKind::Ball, n)?;
        let case = exact_quadratic_family(1.0, 1.0, n)?;
        let time = TimeConfig::new(0.5, 0.05, TimeConfig::quadratic_schedule(0.5, 5));
        for stepper in [Stepper::Explicit, Stepper::Implicit] {
            let problem = case.problem(domain.clone(), h, stepper, time.clone())?;
            let traj = run_flow(&problem, None)?;
            let err = traj.max_error(|x, t| case.exact(x, t));
            println!(
                "n={n} h={h} {:<8} nodes {:>6} steps {:>5} max error {err:.2e}",
                stepper.as_str(),
                problem.grid.num_nodes(),
                traj.steps.len()
            );
        }
    }
    Ok(())
}
