//! Transient distribution of the two-phase queue and its reconstructed
//! density, printed as a coarse table.

use fluid_qbdrap::fluidq::{ctmc_marginal, model_new};
use fluid_qbdrap::medist::{erlang, EpsilonPolicy, ResidualBasis};
use fluid_qbdrap::qbdrap::{density_profile, Scheme};
use nalgebra::DMatrix;

fn main() -> fluid_qbdrap::Result<()> {
    let m = model_new(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]), vec![1.0, -1.0], 1.0)?;
    let (k, p) = (16, 16);
    let d = erlang(p, 1.0 / k as f64)?;
    let s = Scheme::new(m.clone(), ResidualBasis::build(d.clone(), EpsilonPolicy::Auto.resolve(&d)?)?, k)?;

    for t in [0.25, 1.0, 4.0] {
        let res = s.transient(0.5, 0, t)?;
        let exact = ctmc_marginal(&m, 0, t)?;
        println!("t = {t}: mass {:.12}, phase law {:.6} / {:.6} (exact {:.6} / {:.6})",
            res.total_mass(), res.phase_marginal()[0], res.phase_marginal()[1], exact[0], exact[1]);
        println!("  atoms: P(X=0, down) = {:.5}, P(X=1, up) = {:.5}",
            res.level_mass(0, 1)?, res.level_mass(k + 1, 0)?);
        for j in 0..2 {
            let prof = density_profile(&res, s.kernel(), j, 4)?;
            let row: Vec<String> = prof.iter().step_by(10).map(|(x, f)| format!("{x:.2}:{f:.3}")).collect();
            println!("  phase {j}: {}", row.join(" "));
        }
        println!("  P(0.25 <= X <= 0.75, up) = {:.5}", s.distribution_at(&res, 0.25, 0.75, 0)?);
    }
    Ok(())
}
