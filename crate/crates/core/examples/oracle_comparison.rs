//! Kolmogorov distance between the scheme and simulated paths as the
//! order grows, on one shared sample.

use fluid_qbdrap::fluidq::{model_new, simulate_many};
use fluid_qbdrap::medist::{erlang, EpsilonPolicy, ResidualBasis};
use fluid_qbdrap::qbdrap::Scheme;
use fluid_qbdrap::verify::oracle_compare_samples;
use nalgebra::DMatrix;

fn main() -> fluid_qbdrap::Result<()> {
    let m = model_new(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]), vec![1.0, -1.0], 1.0)?;
    let (x0, i0, t, seed) = (0.5, 0, 2.0, 7);
    let k = 16;
    let sample = simulate_many(&m, x0, i0, t, 100_000, seed)?;
    for p in [1, 4, 16, 64] {
        let d = erlang(p, 1.0 / k as f64)?;
        let s = Scheme::new(m.clone(), ResidualBasis::build(d.clone(), EpsilonPolicy::Auto.resolve(&d)?)?, k)?;
        let r = oracle_compare_samples(&s, x0, i0, t, &sample, seed)?;
        println!(
            "order {p:2}: pooled {:.5}, up {:.5}, down {:.5} (DKW 99% band {:.5})",
            r.pooled, r.per_phase[0], r.per_phase[1], r.dkw
        );
    }
    Ok(())
}
