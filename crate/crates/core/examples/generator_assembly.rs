//! Assembles the QBD-RAP generator and inspects its structure.

use fluid_qbdrap::fluidq::model_new;
use fluid_qbdrap::medist::{erlang, EpsilonPolicy, ResidualBasis};
use fluid_qbdrap::qbdrap::Scheme;
use nalgebra::DMatrix;

fn main() -> fluid_qbdrap::Result<()> {
    let t = DMatrix::from_row_slice(3, 3, &[-2.0, 1.5, 0.5, 1.0, -1.0, 0.0, 0.5, 0.5, -1.0]);
    let m = model_new(t, vec![1.0, -2.0, 0.5], 2.0)?;
    let (k, p) = (8, 6);
    let d = erlang(p, m.bound() / k as f64)?;
    let eps = EpsilonPolicy::Auto.resolve(&d)?;
    let s = Scheme::new(m, ResidualBasis::build(d, eps)?, k)?;

    let g = s.generator();
    let grid = s.grid();
    println!("K = {k}, order {p}, delta = {}", grid.delta());
    println!("dimension {}, nonzeros {}", g.dim(), g.matrix().nnz());
    println!("max |B e| = {:.2e}", g.conservation_residual());
    println!("smallest off-diagonal entry {:.2e}", g.min_off_diagonal());
    for level in [0, 1, k, k + 1] {
        let r = grid.level_range(level);
        println!("level {level}: rows {}..{}", r.start, r.end);
    }

    let jump = &g.jump().d;
    println!("jump matrix D (rows sum to one):");
    for r in 0..jump.nrows() {
        let row: Vec<String> = jump.row(r).iter().map(|v| format!("{v:8.4}")).collect();
        println!("  {}   sum {:.12}", row.join(" "), jump.row(r).sum());
    }
    Ok(())
}
