//! Writes the final state of a run in the binary lattice format and as a
//! point table, then reads the binary file back.

use std::fs::File;
use std::io::BufWriter;

use cmaflow::flow::{run_flow, Stepper, TimeConfig};
use cmaflow::geometry::{make_domain, DomainKind};
use cmaflow::harness::{read_grid_binary, LatticeField};
use cmaflow::oracle::exact_quadratic_family;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let domain = make_domain(DomainKind::Ball, 1)?;
    let case = exact_quadratic_family(1.0, 1.0, 1)?;
    let time = TimeConfig::new(0.5, 0.05, TimeConfig::quadratic_schedule(0.5, 5));
    let problem = case.problem(domain, 0.1, Stepper::Implicit, time)?;
    let traj = run_flow(&problem, None)?;
    let last = traj.final_state().expect("nonempty trajectory");

    let dir = std::env::temp_dir().join("cmaflow-grid-export");
    std::fs::create_dir_all(&dir)?;
    let bin = dir.join("u_final.bin");
    let field = LatticeField::from_field(last);
    field.write(BufWriter::new(File::create(&bin)?))?;
    problem.grid.write_csv(&dir.join("grid.csv"))?;

    let back = read_grid_binary(&bin)?;
    let interior = back.values.iter().filter(|v| !v.is_nan()).count();
    println!(
        "wrote {} ({} lattice points, {interior} nodes, t = {})",
        bin.display(),
        back.values.len(),
        back.time
    );
    println!("round trip bit-exact: {}", same_bits(&back.values, &field.values));
    Ok(())
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
