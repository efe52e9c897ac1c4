//! Simulated paths of a three-phase fluid queue against the phase law.

use fluid_qbdrap::fluidq::{ctmc_marginal, model_new, simulate_many, simulate_trace, write_trace_csv, EmpiricalCdf};
use nalgebra::DMatrix;

fn main() -> fluid_qbdrap::Result<()> {
    let t = DMatrix::from_row_slice(3, 3, &[-2.0, 1.5, 0.5, 1.0, -1.0, 0.0, 0.5, 0.5, -1.0]);
    let m = model_new(t, vec![1.0, -2.0, 0.5], 2.0)?;

    let trace = simulate_trace(&m, 1.0, 0, 3.0, 42)?;
    let mut out = Vec::new();
    write_trace_csv(&mut out, &trace)?;
    println!("one path, {} events:\n{}", trace.len(), String::from_utf8_lossy(&out));

    let horizon = 2.0;
    let paths = simulate_many(&m, 1.0, 0, horizon, 50_000, 7)?;
    let exact = ctmc_marginal(&m, 0, horizon)?;
    for j in 0..3 {
        let share = paths.iter().filter(|p| p.1 == j).count() as f64 / paths.len() as f64;
        println!("phase {j}: simulated {share:.4}, exact {:.4}", exact[j]);
    }
    let cdf = EmpiricalCdf::new(paths.iter().map(|p| p.0).collect());
    println!("P(X = 0) ~ {:.4}, P(X = b) ~ {:.4}", cdf.eval(0.0), 1.0 - cdf.eval_left(2.0));
    for x in [0.5, 1.0, 1.5] {
        println!("F({x}) ~ {:.4}", cdf.eval(x));
    }
    Ok(())
}
