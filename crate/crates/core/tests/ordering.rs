use cmaflow::barriers::construct_subsolution;
use cmaflow::flow::{run_flow, BoundaryData, FlowProblem, Source, Stepper, TimeConfig};
use cmaflow::geometry::{make_domain, DomainKind};
use cmaflow::initial_data::{build_level, InitialKind};

fn problem(c: f64, stepper: Stepper) -> FlowProblem {
    let domain = make_domain(DomainKind::Ball, 1).unwrap();
    let time = TimeConfig::new(0.25, 0.025, TimeConfig::quadratic_schedule(0.25, 4));
    FlowProblem::new(
        domain,
        0.1,
        Source::new("u-damped", move |_, _, u| -c - u).with_du(|_, _, _| -1.0),
        BoundaryData::constant(1.0),
        InitialKind::Quadratic(1.0),
        stepper,
        time,
    )
    .unwrap()
}

#[test]
fn subsolution_constant_grows_as_source_decreases() {
    let mut last = 0.0;
    for c in [0.0, 0.5, 1.0, 2.0] {
        let p = problem(c, Stepper::Implicit);
        let level = build_level(&p.initial, 1, &p.domain, &p.ops, &p.source, &p.boundary, None).unwrap();
        let m = construct_subsolution(&p, &level).unwrap().big_m;
        assert!(m >= last * (1.0 - 1e-9), "c = {c}: {m} < {last}");
        last = m;
    }
}

#[test]
fn smaller_source_gives_smaller_solution() {
    for stepper in [Stepper::Implicit, Stepper::Explicit] {
        let hi = run_flow(&problem(0.0, stepper), None).unwrap();
        let lo = run_flow(&problem(1.0, stepper), None).unwrap();
        for (a, b) in lo.snapshots.iter().zip(&hi.snapshots) {
            let excess = a.values.iter().zip(&b.values).map(|(x, y)| x - y).fold(f64::MIN, f64::max);
            assert!(excess <= 1e-10, "{} t = {}: {excess}", stepper.as_str(), a.time);
        }
    }
}

#[test]
fn unit_hessian_potential_is_stationary_without_source() {
    let domain = make_domain(DomainKind::Ball, 2).unwrap();
    let time = TimeConfig::new(0.2, 0.05, TimeConfig::quadratic_schedule(0.2, 4));
    let p = FlowProblem::new(
        domain,
        0.25,
        Source::zero(),
        BoundaryData::constant(1.0),
        InitialKind::Quadratic(1.0),
        Stepper::Implicit,
        time,
    )
    .unwrap();
    let tr = run_flow(&p, None).unwrap();
    let err = tr.max_error(|x, _| x.iter().map(|v| v * v).sum());
    assert!(err <= 1e-9, "{err}");
}
