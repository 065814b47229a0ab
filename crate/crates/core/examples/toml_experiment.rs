//! Drives a configured experiment through the harness, as the CLI does, and
//! writes the report tables.

use cmaflow::harness::{emit_reports, run_experiment, ExperimentConfig, Pipeline};

const CONFIG: &str = r#"
seed = 3

[domain]
kind = "ellipsoid"
n = 1
coefficients = [1.2]

[grid]
h = 0.05

[time]
horizon = 0.5
dt = 0.025
snapshots = 12

[problem]
initial = "bowl"
c = 0.3
source = -0.5
damping = 0.5

[cascade]
run_level = 32

[monitors]
shift = false
"#;

fn main() -> cmaflow::Result<()> {
    let cfg = ExperimentConfig::from_toml_str(CONFIG)?;
    let bundle = run_experiment(&cfg, Pipeline::Run, 1)?;
    for c in &bundle.checks {
        println!("{:<24} {:>12.4e} {:?} pass {}", c.name, c.measured, c.bound, c.pass);
    }
    let dir = std::env::temp_dir().join("cmaflow-toml-experiment");
    let files = emit_reports(&bundle, &dir, false)?;
    println!("{} files in {}", files.len(), dir.display());
    Ok(())
}
