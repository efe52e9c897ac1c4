//! Erlang level-time distributions and the residual-time basis.
//!
//! Prints how the variance shrinks with order, which `eps` the automatic
//! policy picks, where the collocation offsets `t_n` land and how well
//! conditioned the change of basis is.

use fluid_qbdrap::medist::{erlang, EpsilonPolicy, ResidualBasis};

fn main() -> fluid_qbdrap::Result<()> {
    let delta = 0.25;
    println!("order  variance     eps(paper)  eps(auto)   t_2        t_p        cond(P)");
    for p in [1, 2, 4, 8, 16, 32, 64] {
        let d = erlang(p, delta)?;
        let paper = d.default_epsilon();
        let eps = EpsilonPolicy::Auto.resolve(&d)?;
        let basis = ResidualBasis::build(d.clone(), eps)?;
        let t = basis.t_points();
        println!(
            "{p:5}  {:.4e}  {paper:.4e}  {eps:.4e}  {:.4e}  {:.4e}  {:.2e}",
            d.variance(),
            t.get(1).copied().unwrap_or(0.0),
            t[t.len() - 1],
            basis.condition()
        );
    }

    // the residual life after t_n, read off the basis orbit
    let d = erlang(8, delta)?;
    let basis = ResidualBasis::build(d.clone(), EpsilonPolicy::Auto.resolve(&d)?)?;
    for (n, &tn) in basis.t_points().iter().enumerate() {
        let orbit = basis.basis_orbit(n);
        let direct = d.residual_orbit(tn)?;
        println!("t_{} = {tn:.4}: |orbit - residual_orbit| = {:.1e}", n + 1, (orbit - direct).amax());
    }
    Ok(())
}
