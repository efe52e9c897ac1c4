//! Stationary distribution of a three-phase queue, compared with a long
//! transient run.

use fluid_qbdrap::fluidq::{model_new, phase_stationary};
use fluid_qbdrap::medist::{erlang, EpsilonPolicy, ResidualBasis};
use fluid_qbdrap::qbdrap::{stationary_residual, Scheme};
use nalgebra::DMatrix;

fn main() -> fluid_qbdrap::Result<()> {
    let t = DMatrix::from_row_slice(3, 3, &[-2.0, 1.5, 0.5, 1.0, -1.0, 0.0, 0.5, 0.5, -1.0]);
    let m = model_new(t, vec![1.0, -2.0, 0.5], 2.0)?;
    let (k, p) = (8, 8);
    let d = erlang(p, m.bound() / k as f64)?;
    let s = Scheme::new(m.clone(), ResidualBasis::build(d.clone(), EpsilonPolicy::Auto.resolve(&d)?)?, k)?;

    let pi = s.stationary()?;
    println!("residual |pi B| = {:.2e}", stationary_residual(s.generator(), &pi.v));
    let phases = phase_stationary(&m)?;
    for j in 0..3 {
        println!("phase {j}: scheme {:.8}, CTMC {:.8}", pi.phase_marginal()[j], phases[j]);
    }
    for j in 0..3 {
        let cells: Vec<String> = (1..=k).map(|l| format!("{:.4}", pi.level_mass(l, j).unwrap())).collect();
        println!("phase {j} cell masses: {}", cells.join(" "));
    }
    let late = s.transient(1.0, 0, 40.0)?;
    println!("max |pi - v(40)| = {:.2e}", (&pi.v - &late.v).amax());
    Ok(())
}
