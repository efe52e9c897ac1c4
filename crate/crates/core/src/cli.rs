//! Command implementations behind the `fluid-qbdrap` binary. Every command
//! takes a loaded [`RunConfig`], writes its files into the run directory
//! and returns a process exit code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fluidq::{ctmc_marginal, phase_stationary, simulate_many, EmpiricalCdf, TestFunction};
use crate::qbdrap::{cdf_profile, density_profile, Scheme, TransientResult};
use crate::verify::{self, BoundReport};

/// Everything passed.
pub const EXIT_OK: i32 = 0;
/// A hard invariant (conservation, phase law, exponential equivalence,
/// well-formedness) failed.
pub const EXIT_INVARIANT: i32 = 1;
/// The configuration or one of the objects it describes is invalid.
pub const EXIT_INVALID: i32 = 2;
/// A numerical routine failed.
pub const EXIT_COMPUTE: i32 = 3;

pub const SCHEMA_HEADER: &str = "# schema=1\n";

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::SolverDivergence { .. }
        | Error::QuadratureFailure { .. }
        | Error::SingularSolve
        | Error::Overflow(_)
        | Error::NormalizationUnderflow(_)
        | Error::Reducible(_)
        | Error::Io(_) => EXIT_COMPUTE,
        _ => EXIT_INVALID,
    }
}

/// One-line description of an error with its kind.
pub fn describe(e: &Error) -> String {
    format!("{}: {e}", e.kind())
}

/// CSV text with the schema header.
#[derive(Debug, Default)]
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(columns: &[&str]) -> Self {
        let mut text = String::from(SCHEMA_HEADER);
        text.push_str(&columns.join(","));
        text.push('\n');
        Csv { text }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.text)?;
        Ok(())
    }
}

fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn run<F: FnOnce() -> Result<i32>>(f: F) -> i32 {
    match f() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            exit_code(&e)
        }
    }
}

/// Checks the distribution, the model, the basis and the starting point.
pub fn cmd_validate(cfg: &RunConfig) -> i32 {
    run(|| {
        let model = cfg.model()?;
        println!(
            "model: {} phases ({} positive, {} negative), b = {}",
            model.phases(),
            model.plus().len(),
            model.minus().len(),
            model.bound()
        );
        let dist = cfg.distribution(cfg.scheme.me_order)?;
        println!(
            "distribution: {:?} order {}, mean {:.6e}, variance {:.6e}",
            cfg.scheme.me_family,
            dist.order(),
            dist.mean(),
            dist.variance()
        );
        let basis = cfg.basis(cfg.scheme.me_order)?;
        println!(
            "basis: epsilon {:.6e}, t-points in [0, {:.6e}], condition {:.3e}",
            basis.epsilon(),
            basis.t_points().last().copied().unwrap_or(0.0),
            basis.condition()
        );
        let grid = crate::qbdrap::Grid::new(&model, cfg.scheme.k, dist.order())?;
        crate::qbdrap::initial_state(&grid, basis.t_points(), cfg.task.x0, cfg.task.i0)?;
        println!("grid: K = {}, delta = {:.6e}, dimension {}", grid.cells(), grid.delta(), grid.dim());
        println!("ok");
        Ok(EXIT_OK)
    })
}

/// Assembles the generator and writes its blocks, `D` and the index map.
pub fn cmd_build(cfg: &RunConfig) -> i32 {
    run(|| {
        let scheme = cfg.scheme()?;
        let dir = prepare_run_dir(cfg)?;
        write_build(&scheme, &dir)?;
        let gen = scheme.generator();
        let summary = json!({
            "dimension": gen.dim(),
            "nonzeros": gen.matrix().nnz(),
            "conservation_residual": gen.conservation_residual(),
            "min_off_diagonal": gen.min_off_diagonal(),
            "epsilon": scheme.basis().epsilon(),
            "basis_condition": scheme.basis().condition(),
            "kernel_panels": scheme.kernel().panels(),
            "kernel_quad_error": scheme.kernel().quad_error(),
            "jump_quad_error": gen.jump().quad_error,
        });
        write_json(&dir.join("build.json"), &summary)?;
        println!("{}", dir.display());
        Ok(EXIT_OK)
    })
}

fn write_build(scheme: &Scheme, dir: &Path) -> Result<()> {
    let grid = scheme.grid();
    let t = scheme.basis().t_points();
    let mut idx = Csv::new(&["index", "level", "phase", "n", "x"]);
    for i in 0..grid.dim() {
        let (l, j, n) = grid.decode(i)?;
        idx.row(&[i.to_string(), l.to_string(), j.to_string(), n.to_string(), grid.collocation(l, j, n, t).to_string()]);
    }
    idx.write(&dir.join("grid.csv"))?;
    let mut gen = Csv::new(&["row", "col", "value"]);
    let m = scheme.generator().matrix();
    for i in 0..m.nrows() {
        for (j, v) in m.row(i) {
            gen.row(&[i.to_string(), j.to_string(), v.to_string()]);
        }
    }
    gen.write(&dir.join("generator.csv"))?;
    let d = &scheme.generator().jump().d;
    let mut dcsv = Csv::new(&["row", "col", "value"]);
    for i in 0..d.nrows() {
        for j in 0..d.ncols() {
            dcsv.row(&[i.to_string(), j.to_string(), d[(i, j)].to_string()]);
        }
    }
    dcsv.write(&dir.join("jump.csv"))?;
    Ok(())
}

fn dump_result(
    scheme: &Scheme,
    res: &TransientResult,
    points: usize,
    vector: &mut Csv,
    density: &mut Csv,
) -> Result<()> {
    let grid = res.grid();
    let t = res.t.to_string();
    for (i, v) in res.v.iter().enumerate() {
        let (l, j, n) = grid.decode(i)?;
        vector.row(&[t.clone(), i.to_string(), l.to_string(), j.to_string(), n.to_string(), v.to_string()]);
    }
    for j in 0..grid.phases() {
        for (x, f) in density_profile(res, scheme.kernel(), j, points)? {
            density.row(&[t.clone(), x.to_string(), j.to_string(), f.to_string()]);
        }
    }
    Ok(())
}

/// Transient solves at every configured time.
pub fn cmd_transient(cfg: &RunConfig) -> i32 {
    run(|| {
        let scheme = cfg.scheme()?;
        let dir = prepare_run_dir(cfg)?;
        let (x0, i0) = (cfg.task.x0, cfg.task.i0);
        let v0 = scheme.initial_vector(x0, i0)?;
        let mut vector = Csv::new(&["t", "index", "level", "phase", "n", "value"]);
        let mut density = Csv::new(&["t", "x", "phase", "density"]);
        let mut marginal = Csv::new(&["t", "phase", "scheme", "ctmc"]);
        let mut mass = Csv::new(&["t", "mass", "deviation"]);
        let mut worst: f64 = 0.0;
        for &t in &cfg.task.times {
            let res = crate::qbdrap::transient_with(scheme.generator(), &v0, t, cfg.transient_options())?;
            dump_result(&scheme, &res, cfg.task.density_points, &mut vector, &mut density)?;
            let want = ctmc_marginal(scheme.model(), i0, t)?;
            for (j, (a, b)) in res.phase_marginal().iter().zip(want.iter()).enumerate() {
                marginal.row(&[t.to_string(), j.to_string(), a.to_string(), b.to_string()]);
            }
            let dev = res.total_mass() - 1.0;
            worst = worst.max(dev.abs());
            mass.row(&[t.to_string(), res.total_mass().to_string(), dev.to_string()]);
            info!("t = {t}: mass {:.15}", res.total_mass());
        }
        vector.write(&dir.join("vector.csv"))?;
        density.write(&dir.join("density.csv"))?;
        marginal.write(&dir.join("phase_marginal.csv"))?;
        mass.write(&dir.join("mass.csv"))?;
        println!("{}", dir.display());
        if worst > verify::TOL_MASS {
            eprintln!("mass deviation {worst:.3e} exceeds {:.0e}", verify::TOL_MASS);
            return Ok(EXIT_INVARIANT);
        }
        Ok(EXIT_OK)
    })
}

/// Stationary distribution, its densities and the phase marginal.
pub fn cmd_stationary(cfg: &RunConfig) -> i32 {
    run(|| {
        let scheme = cfg.scheme()?;
        let dir = prepare_run_dir(cfg)?;
        let res = scheme.stationary()?;
        let residual = crate::qbdrap::stationary_residual(scheme.generator(), &res.v);
        let mut vector = Csv::new(&["t", "index", "level", "phase", "n", "value"]);
        let mut density = Csv::new(&["t", "x", "phase", "density"]);
        dump_result(&scheme, &res, cfg.task.density_points, &mut vector, &mut density)?;
        vector.write(&dir.join("stationary.csv"))?;
        density.write(&dir.join("stationary_density.csv"))?;
        let want = phase_stationary(scheme.model())?;
        let mut marginal = Csv::new(&["phase", "scheme", "ctmc"]);
        for (j, (a, b)) in res.phase_marginal().iter().zip(want.iter()).enumerate() {
            marginal.row(&[j.to_string(), a.to_string(), b.to_string()]);
        }
        marginal.write(&dir.join("stationary_marginal.csv"))?;
        write_json(
            &dir.join("stationary.json"),
            &json!({ "residual": residual, "mass": res.total_mass() }),
        )?;
        println!("{}", dir.display());
        Ok(EXIT_OK)
    })
}

/// Summary of a verification run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifySummary {
    pub hard_checks: usize,
    pub hard_failures: Vec<String>,
    pub bound_checks: usize,
    pub bound_failures: usize,
    pub warnings: Vec<String>,
    pub generator_case_coverage: Vec<usize>,
    pub jump_constants: Vec<(String, f64)>,
}

fn push_reports(csv: &mut Csv, reports: &[BoundReport]) {
    for r in reports {
        let (l, j, n) = r
            .location
            .map(|loc| (loc.level.to_string(), loc.phase.to_string(), loc.n.to_string()))
            .unwrap_or_default();
        csv.row(&[
            r.quantity.clone(),
            r.function.clone(),
            r.order.to_string(),
            r.cells.to_string(),
            r.variance.to_string(),
            r.epsilon.to_string(),
            l,
            j,
            n,
            r.measured.to_string(),
            r.bound.to_string(),
            r.pass.to_string(),
            r.calibrated.to_string(),
        ]);
    }
}

/// Runs the enabled verification suites and writes `bounds.csv`,
/// `invariants.csv` and `summary.json`.
pub fn cmd_verify(cfg: &RunConfig) -> i32 {
    run(|| {
        let dir = prepare_run_dir(cfg)?;
        let summary = run_verify(cfg, &dir)?;
        write_json(&dir.join("summary.json"), &summary)?;
        println!("{}", dir.display());
        println!(
            "hard checks: {} ({} failed); bound checks: {} ({} over bound)",
            summary.hard_checks,
            summary.hard_failures.len(),
            summary.bound_checks,
            summary.bound_failures
        );
        for w in &summary.warnings {
            println!("warning: {w}");
        }
        for f in &summary.hard_failures {
            println!("FAILED: {f}");
        }
        Ok(if summary.hard_failures.is_empty() { EXIT_OK } else { EXIT_INVARIANT })
    })
}

/// The body of [`cmd_verify`].
pub fn run_verify(cfg: &RunConfig, dir: &Path) -> Result<VerifySummary> {
    let toggles = &cfg.task.verify;
    let (x0, i0) = (cfg.task.x0, cfg.task.i0);
    let times = &cfg.task.times;
    let mut summary = VerifySummary::default();
    let mut invariants = Csv::new(&["quantity", "order", "measured", "tolerance", "pass"]);
    let mut hard = |summary: &mut VerifySummary, reports: Vec<BoundReport>| {
        for r in reports {
            summary.hard_checks += 1;
            invariants.row(&[
                r.quantity.clone(),
                r.order.to_string(),
                r.measured.to_string(),
                r.bound.to_string(),
                r.pass.to_string(),
            ]);
            if !r.pass {
                summary
                    .hard_failures
                    .push(format!("{} (order {}): {:.3e} > {:.0e}", r.quantity, r.order, r.measured, r.bound));
            }
        }
    };

    let scheme = cfg.scheme()?;
    if toggles.conservation {
        let r = verify::conservation_check(&scheme, x0, i0, times)?;
        hard(&mut summary, r);
    }
    if toggles.phase_law {
        let r = verify::phase_law_check_with(&scheme, x0, i0, times, cfg.transient_options())?;
        hard(&mut summary, r);
    }
    if toggles.exponential_equivalence {
        let p1 = cfg.scheme_with_order(1)?;
        let r = times
            .iter()
            .map(|&t| verify::p1_equivalence(&p1, x0, i0, t))
            .collect::<Result<Vec<_>>>()?;
        hard(&mut summary, r);
    }
    if toggles.well_formedness {
        let mut reports = Vec::new();
        for &t in times {
            let res = scheme.transient_with(x0, i0, t, cfg.transient_options())?;
            let w = verify::well_formedness(&scheme, &res, cfg.task.density_points)?;
            let mut r = BoundReport::new(&format!("density floor t={t}"), "", -w.min_density, verify::TOL_NONNEGATIVE, &scheme);
            r.pass = w.pass();
            reports.push(r);
        }
        hard(&mut summary, reports);
    }

    let mut bounds = Csv::new(&[
        "quantity", "function", "order", "K", "variance", "epsilon", "level", "phase", "n", "measured", "bound", "pass",
        "calibrated",
    ]);
    let wants_bounds = toggles.closing || toggles.derivative || toggles.jump || toggles.generator;
    if wants_bounds {
        let sweep: Vec<Scheme> = toggles
            .orders
            .iter()
            .map(|&p| cfg.scheme_with_order(p))
            .collect::<Result<_>>()?;
        let corpus = TestFunction::corpus(cfg.model.b);
        let mut tally = |summary: &mut VerifySummary, reports: &[BoundReport]| {
            summary.bound_checks += reports.len();
            summary.bound_failures += reports.iter().filter(|r| !r.pass).count();
            push_reports(&mut bounds, reports);
        };
        for f in &corpus {
            let (m_jump, jump_reports) = verify::d_lemma_sweep(&sweep, f);
            summary.jump_constants.push((f.name().to_string(), m_jump));
            for (s, jr) in sweep.iter().zip(jump_reports.iter()) {
                if toggles.closing {
                    tally(&mut summary, &verify::check_closing_pointwise(s, f));
                }
                if toggles.derivative {
                    tally(&mut summary, &verify::check_derivative_identity(s, f));
                }
                if toggles.jump {
                    tally(&mut summary, jr);
                }
                if toggles.generator {
                    let gap = verify::generator_gap(s, f, m_jump)?;
                    if gap.coverage() < 6 {
                        summary.warnings.push(format!(
                            "generator gap for {} at order {} covers {} of 6 cases",
                            f.name(),
                            s.basis().order(),
                            gap.coverage()
                        ));
                    }
                    summary.generator_case_coverage.push(gap.coverage());
                    tally(&mut summary, &gap.reports);
                }
            }
        }
        if summary.bound_failures > 0 {
            summary
                .warnings
                .push(format!("{} measured residuals exceed their bounds", summary.bound_failures));
        }
    }
    if toggles.oracle {
        let mut reports = Vec::new();
        for &t in times {
            let r = verify::oracle_compare(&scheme, x0, i0, t, cfg.task.mc_paths, cfg.task.seed)?;
            if r.pooled > r.dkw {
                summary.warnings.push(format!(
                    "t = {t}: Kolmogorov distance {:.4} exceeds the DKW band {:.4}",
                    r.pooled, r.dkw
                ));
            }
            reports.push(r);
        }
        write_json(&dir.join("oracle.json"), &reports)?;
    }
    invariants.write(&dir.join("invariants.csv"))?;
    bounds.write(&dir.join("bounds.csv"))?;
    if !summary.hard_failures.is_empty() {
        warn!("{} hard invariant failures", summary.hard_failures.len());
    }
    Ok(summary)
}

/// Monte Carlo comparison at every configured time.
pub fn cmd_compare(cfg: &RunConfig) -> i32 {
    run(|| {
        let scheme = cfg.scheme()?;
        let dir = prepare_run_dir(cfg)?;
        let (x0, i0) = (cfg.task.x0, cfg.task.i0);
        let mut distances = Csv::new(&["t", "phase", "distance", "dkw"]);
        let mut curves = Csv::new(&["t", "x", "scheme", "empirical"]);
        let mut report = String::new();
        for &t in &cfg.task.times {
            let samples = simulate_many(scheme.model(), x0, i0, t, cfg.task.mc_paths, cfg.task.seed)?;
            let r = verify::oracle_compare_samples(&scheme, x0, i0, t, &samples, cfg.task.seed)?;
            distances.row(&[t.to_string(), "all".into(), r.pooled.to_string(), r.dkw.to_string()]);
            for (j, d) in r.per_phase.iter().enumerate() {
                distances.row(&[t.to_string(), j.to_string(), d.to_string(), r.dkw.to_string()]);
            }
            let res = scheme.transient_with(x0, i0, t, cfg.transient_options())?;
            let ecdf = EmpiricalCdf::new(samples.iter().map(|s| s.0).collect());
            for (x, f) in cdf_profile(&res, scheme.kernel(), None, cfg.task.density_points)? {
                curves.row(&[t.to_string(), x.to_string(), f.to_string(), ecdf.eval(x).to_string()]);
            }
            let _ = writeln!(report, "t = {t}: Kolmogorov distance {:.5} (DKW 99% band {:.5})", r.pooled, r.dkw);
        }
        distances.write(&dir.join("oracle.csv"))?;
        curves.write(&dir.join("cdf.csv"))?;
        print!("{report}");
        println!("{}", dir.display());
        Ok(EXIT_OK)
    })
}
