//! Radial data on the ball reduces the flow to one space dimension; the 1D
//! reference solves that reduction on a refined line grid for comparison.

use cmaflow::flow::{run_cascade, BoundaryData, FlowProblem, Source, Stepper, TimeConfig};
use cmaflow::geometry::{make_domain, DomainKind};
use cmaflow::initial_data::InitialKind;
use cmaflow::oracle::{radial_gap, radial_reference};

fn main() -> cmaflow::Result<()> {
    let c = 0.25;
    let problem = FlowProblem::new(
        make_domain(DomainKind::Ball, 1)?,
        0.05,
        Source::zero(),
        BoundaryData::constant(1.0 - c),
        InitialKind::Bowl(c),
        Stepper::Implicit,
        TimeConfig::new(0.25, 0.0125, TimeConfig::quadratic_schedule(0.25, 6)),
    )?;
    let reference = radial_reference(&problem, 8)?;
    let report = run_cascade(&problem, &[32], 32, 1e-6, 1)?;
    let traj = report.runs[0].trajectory.as_ref().expect("level 32 completed");
    for (j, snap) in traj.snapshots.iter().enumerate() {
        let gap = radial_gap(&reference, j, &problem.grid, &snap.values);
        println!("t = {:.4}  sup |u_grid - u_radial| = {gap:.3e}", snap.time);
    }
    Ok(())
}
