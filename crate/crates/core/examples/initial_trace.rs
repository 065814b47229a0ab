//! Recovery of nonsmooth initial data: `e(t) = sup |u(t) - u0|` shrinks as
//! `t -> 0`, and the boundary barrier is evaluated on a collar.

use cmaflow::barriers::{construct_subsolution, guan_barrier_check};
use cmaflow::estimates::initial_trace_check;
use cmaflow::flow::{run_cascade, BoundaryData, FlowProblem, Source, Stepper, TimeConfig};
use cmaflow::geometry::{make_domain, DomainKind};
use cmaflow::initial_data::InitialKind;

fn main() -> cmaflow::Result<()> {
    let problem = FlowProblem::new(
        make_domain(DomainKind::Ball, 1)?,
        0.05,
        Source::zero(),
        BoundaryData::new("max(Re z1, 0)", |x, _| x[0].max(0.0)),
        InitialKind::RealPartPositive,
        Stepper::Implicit,
        TimeConfig::new(0.25, 0.0125, TimeConfig::quadratic_schedule(0.25, 10)),
    )?;
    let report = run_cascade(&problem, &[32], 32, 1e-6, 1)?;
    let run = &report.runs[0];
    let traj = run.trajectory.as_ref().expect("level 32 completed");

    let curve = initial_trace_check(&problem, traj, &problem.initial, 0.05 * problem.initial.osc)?;
    for (t, e) in curve.times.iter().zip(&curve.errors) {
        println!("t = {t:.5}  e(t) = {e:.4e}");
    }
    println!(
        "e(t_min) = {:.4e} (threshold {:.4e}), monotone {}, lower barrier (a, A) = {:?} holds {}",
        curve.e_min, curve.threshold, curve.monotone, curve.barrier, curve.barrier_holds
    );

    let sub = construct_subsolution(&problem, &run.level)?;
    println!("subsolution M = {:.4e}, excess over u {:.3e}", sub.big_m, sub.excess_over(traj));
    let barrier = guan_barrier_check(&problem, traj, &sub, 0.05, None, 1e-8)?;
    println!(
        "barrier {:?}: {} of {} collar points satisfied",
        barrier.params,
        barrier.satisfied(),
        barrier.rows.len()
    );
    Ok(())
}
