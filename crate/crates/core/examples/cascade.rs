//! The approximation cascade for nonsmooth bowl data `max(|z|^2 - 1/4, 0)`:
//! levels are ordered up to `2 eps_k (1 + sup|g_k|)` and close in on each other.

use cmaflow::flow::{run_cascade, BoundaryData, FlowProblem, Source, Stepper, TimeConfig};
use cmaflow::geometry::{make_domain, DomainKind};
use cmaflow::initial_data::InitialKind;

fn main() -> cmaflow::Result<()> {
    let c = 0.25;
    let problem = FlowProblem::new(
        make_domain(DomainKind::Ball, 1)?,
        0.05,
        Source::zero(),
        BoundaryData::constant(1.0 - c),
        InitialKind::Bowl(c),
        Stepper::Implicit,
        TimeConfig::new(0.25, 0.0125, TimeConfig::quadratic_schedule(0.25, 8)),
    )?;
    let report = run_cascade(&problem, &[4, 8, 16, 32], 4, 1e-6, 1)?;
    for run in &report.runs {
        let level = &run.level;
        let steps = run.trajectory.as_ref().map_or(0, |t| t.steps.len());
        println!("m = {:>3} eps_m = {:.3e} steps {steps}", level.m, level.eps_m);
    }
    for p in &report.pairs {
        println!(
            "sup(u_{} - u_{}) = {:+.3e}  bound {:.3e}  {}",
            p.m,
            p.k,
            p.sup_diff,
            p.bound,
            if p.holds { "ok" } else { "VIOLATED" }
        );
    }
    for (k, gap) in &report.gaps {
        println!("gap from level {k}: {gap:.3e}");
    }
    println!("cascade passed: {}", report.passed());
    Ok(())
}
