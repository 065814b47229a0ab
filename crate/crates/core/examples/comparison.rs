//! Comparison principle on discrete solutions: the solution with the smaller
//! source and boundary data stays below the other one.

use cmaflow::estimates::comparison_check;
use cmaflow::flow::{run_flow, BoundaryData, FlowProblem, Source, Stepper, TimeConfig};
use cmaflow::geometry::{make_domain, DomainKind};
use cmaflow::initial_data::InitialKind;

fn main() -> cmaflow::Result<()> {
    let domain = make_domain(DomainKind::Ball, 1)?;
    let time = TimeConfig::new(0.25, 0.0125, TimeConfig::quadratic_schedule(0.25, 6));
    let source = Source::new("-u", |_, _, u| -u).with_du(|_, _, _| -1.0);
    let build = |phi: f64, a: f64| {
        FlowProblem::new(
            domain.clone(),
            0.05,
            source.clone(),
            BoundaryData::constant(phi),
            InitialKind::Quadratic(a),
            Stepper::Implicit,
            time.clone(),
        )
    };
    let lower = build(0.9, 0.9)?;
    let upper = build(1.0, 1.0)?;
    let u = run_flow(&lower, None)?;
    let v = run_flow(&upper, None)?;
    let report = comparison_check(&lower.ops, &u, &v, &source, 1e-8, 1e-7)?;
    println!("{report:#?}");
    println!("sup (u - v) exceeds the parabolic-boundary bound by {:.3e}; holds: {}", report.excess(), report.holds());
    Ok(())
}
