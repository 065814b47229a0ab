use cmaflow::harness::{emit_reports, read_grid_binary, run_experiment, Bundle, ExperimentConfig, LatticeField, Pipeline};

#[test]
fn empty_bundle_writes_header_only_tables() {
    let dir = tempfile::tempdir().unwrap();
    emit_reports(&Bundle::default(), dir.path(), true).unwrap();
    for f in ["summary.csv", "steps.csv", "bounds.csv", "decay.csv", "convergence.csv"] {
        let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
        assert_eq!(text.lines().count(), 1, "{f}: {text}");
    }
    assert!(!dir.path().join("slices.csv").exists());
}

fn bowl_run() -> Bundle {
    let cfg = ExperimentConfig::from_toml_str(
        r#"
[grid]
h = 0.1
[time]
horizon = 0.25
dt = 0.0125
snapshots = 10
[problem]
initial = "bowl"
c = 0.25
[cascade]
run_level = 8
[monitors]
bounds = false
shift = false
"#,
    )
    .unwrap();
    run_experiment(&cfg, Pipeline::Run, 1).unwrap()
}

#[test]
fn decay_table_has_increasing_times() {
    let bundle = bowl_run();
    assert!(bundle.abort.is_none(), "{:?}", bundle.abort);
    let dir = tempfile::tempdir().unwrap();
    emit_reports(&bundle, dir.path(), false).unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join("decay.csv")).unwrap();
    let times: Vec<f64> = rdr.records().map(|r| r.unwrap()[0].parse().unwrap()).collect();
    assert!(times.len() >= 2);
    assert!(times.windows(2).all(|w| w[0] < w[1]), "{times:?}");
}

#[test]
fn binary_snapshots_round_trip() {
    let bundle = bowl_run();
    let traj = bundle.trajectory.as_ref().unwrap();
    let last = traj.final_state().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = emit_reports(&bundle, dir.path(), true).unwrap();
    let bin = written.iter().rev().find(|p| p.extension().is_some_and(|e| e == "bin")).unwrap();
    let field = read_grid_binary(bin).unwrap();
    let direct = LatticeField::from_field(last);
    assert_eq!(field.time.to_bits(), last.time.to_bits());
    assert_eq!(field.values.len(), direct.values.len());
    for (a, b) in field.values.iter().zip(&direct.values) {
        assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
    }
}
