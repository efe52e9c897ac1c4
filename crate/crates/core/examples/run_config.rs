//! Drives the pipeline from a JSON run configuration, as the binary does.
//!
//! `cargo run --example run_config -- examples/configs/two_phase.json scheme.K=8`

use std::path::PathBuf;

use fluid_qbdrap::config::RunConfig;
use fluid_qbdrap::verify::{generator_gap, max_measured, p1_equivalence};
use fluid_qbdrap::fluidq::TestFunction;

fn main() -> fluid_qbdrap::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/two_phase.json")));
    let overrides: Vec<String> = args.collect();
    let cfg = RunConfig::load(&path, &overrides)?;
    println!("config {} (hash {})", path.display(), cfg.hash());

    let s = cfg.scheme()?;
    for &t in &cfg.task.times {
        let res = s.transient_with(cfg.task.x0, cfg.task.i0, t, cfg.transient_options())?;
        println!("t = {t}: mass {:.12}, phases {:?}", res.total_mass(), res.phase_marginal().as_slice());
    }

    let b = cfg.model.b;
    for f in [TestFunction::cubic(b), TestFunction::sine(b)] {
        let gap = generator_gap(&s, &f, 2.0 * f.g + f.l)?;
        println!("{}: max |BVf - Bf| = {:.4} over {} cases", f.name(), max_measured(&gap.reports), gap.coverage());
    }

    let mut exp = cfg.clone();
    exp.scheme.me_order = 1;
    let r = p1_equivalence(&exp.scheme()?, cfg.task.x0, cfg.task.i0, 1.0)?;
    println!("order 1 against the enumerated QBD: {:.2e}", r.measured);
    Ok(())
}
