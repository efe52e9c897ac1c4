//! Measured closing-operator residuals against their bounds across orders.
//!
//! The entry row (t_1 = 0) of the derivative identity is reported
//! separately: there the residual stays near |f'| at every order.

use fluid_qbdrap::fluidq::{model_new, TestFunction};
use fluid_qbdrap::medist::{erlang, EpsilonPolicy, ResidualBasis};
use fluid_qbdrap::qbdrap::Scheme;
use fluid_qbdrap::verify::{check_closing_pointwise, check_derivative_identity, d_lemma_sweep, max_measured, BoundReport};
use nalgebra::DMatrix;

fn split(r: &[BoundReport]) -> (f64, f64) {
    let pick = |entry: bool| {
        r.iter()
            .filter(|x| x.location.map(|l| (l.n == 0) == entry).unwrap_or(false))
            .map(|x| x.measured)
            .fold(0.0, f64::max)
    };
    (pick(true), pick(false))
}

fn main() -> fluid_qbdrap::Result<()> {
    let b = 1.0;
    let m = model_new(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]), vec![1.0, -1.0], b)?;
    let k = 4;
    let orders = [4, 16, 64];
    let schemes: Vec<Scheme> = orders
        .iter()
        .map(|&p| {
            let d = erlang(p, b / k as f64)?;
            Scheme::new(m.clone(), ResidualBasis::build(d.clone(), EpsilonPolicy::Auto.resolve(&d)?)?, k)
        })
        .collect::<fluid_qbdrap::Result<_>>()?;

    for f in TestFunction::corpus(b) {
        println!("{}:", f.name());
        for s in &schemes {
            let c = check_closing_pointwise(s, &f);
            let d = check_derivative_identity(s, &f);
            let (entry, rest) = split(&d);
            println!(
                "  order {:2}: closing {:.4} (bound {:.4}), derivative entry {:.4} other {:.4} (bound {:.4})",
                s.basis().order(),
                max_measured(&c),
                c[0].bound,
                entry,
                rest,
                d[0].bound
            );
        }
        let (mc, sweep) = d_lemma_sweep(&schemes, &f);
        let jumps: Vec<String> = sweep.iter().map(|r| format!("{:.4}", max_measured(r))).collect();
        println!("  jump residuals {} with calibrated M = {mc:.4}", jumps.join(", "));
    }
    Ok(())
}
