//! End-to-end checks of the scheme against independent computations.

use fluid_qbdrap::fluidq::{dkw_epsilon, model_new, simulate_many, FluidModel, TestFunction};
use fluid_qbdrap::medist::{erlang, EpsilonPolicy, ResidualBasis};
use fluid_qbdrap::qbdrap::{build_d_with, closing_cell, closing_density, initial_state, Scheme};
use fluid_qbdrap::verify::{
    all_pass, check_closing_pointwise, check_derivative_identity, generator_gap, lemma_factor, max_measured,
    p1_equivalence, phase_law_check,
};
use nalgebra::{DMatrix, RowDVector};

fn two_phase(b: f64) -> FluidModel {
    model_new(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]), vec![1.0, -1.0], b).unwrap()
}

fn scheme(m: &FluidModel, order: usize, k: usize) -> Scheme {
    let d = erlang(order, m.bound() / k as f64).unwrap();
    let eps = EpsilonPolicy::Auto.resolve(&d).unwrap();
    Scheme::new(m.clone(), ResidualBasis::build(d, eps).unwrap(), k).unwrap()
}

/// `e^{Sy}` of the Erlang representation, in closed form.
fn erlang_exp(p: usize, rate: f64, y: f64) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(p, p);
    let mut term = (-rate * y).exp();
    for d in 0..p {
        for i in 0..p - d {
            e[(i, i + d)] = term;
        }
        term *= rate * y / (d + 1) as f64;
    }
    e
}

fn erlang_pdf(p: usize, rate: f64, x: f64) -> f64 {
    let mut v = rate * (-rate * x).exp();
    for k in 1..p {
        v *= rate * x / k as f64;
    }
    v
}

fn erlang_survival(p: usize, rate: f64, x: f64) -> f64 {
    let mut term = (-rate * x).exp();
    let mut sum = term;
    for k in 1..p {
        term *= rate * x / k as f64;
        sum += term;
    }
    sum
}

/// Composite Simpson on `[a, b]` with `n` (even) panels.
fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn jump_matrix_matches_closed_form_quadrature() {
    let (p, mean) = (4, 1.0);
    let dist = erlang(p, mean).unwrap();
    let eps = dist.variance().cbrt();
    let got = build_d_with(&dist, eps, 1e-12).unwrap();
    let rate = p as f64 / mean;
    let upper = mean - eps;
    let mut want = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            let entry = |y: f64| {
                let e = erlang_exp(p, rate, y);
                let row_mass: f64 = e.row(0).sum();
                e[(i, p - 1)] * rate * e[(0, j)] / row_mass
            };
            want[(i, j)] = simpson(entry, 0.0, upper, 4000);
        }
    }
    let tail = erlang_exp(p, rate, upper);
    let tail_mass: f64 = tail.row(0).sum();
    for i in 0..p {
        let col: f64 = tail.row(i).sum();
        for j in 0..p {
            want[(i, j)] += col * tail[(0, j)] / tail_mass;
        }
    }
    assert!((&got.d - &want).amax() < 1e-10, "{}", (&got.d - &want).amax());
    for r in 0..p {
        assert!((got.d.row(r).sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn jumped_entry_orbit_concentrates_near_the_exit() {
    let dist = erlang(64, 1.0).unwrap();
    let var = dist.variance();
    let eps = var.cbrt();
    let d = build_d_with(&dist, eps, 1e-12).unwrap();
    let kern = fluid_qbdrap::qbdrap::ClosingKernel::new(&dist).unwrap();
    let a = dist.alpha() * &d.d;
    let near = (&a * kern.cumulative(3.0 * eps).unwrap())[0];
    assert!(near >= 1.0 - var / (eps * eps), "{near}");
}

#[test]
fn reflection_point_for_positive_phases() {
    let m = two_phase(1.0);
    let s = scheme(&m, 64, 4);
    let f = TestFunction::linear(1.0);
    let g = s.grid();
    let t = s.basis().t_points();
    let (level, j) = (2, 0);
    let vf = closing_cell(&f, s.kernel(), g, level, j);
    let dvf = s.basis().to_residual(&(&s.generator().jump().d * vf));
    let n = t.len() - 1;
    let reflected = (dvf[n] - f.value(g.y(level + 1) - t[n], j)).abs();
    let direct = (dvf[n] - f.value(g.y(level) + t[n], j)).abs();
    assert!(reflected < 0.25 * direct, "{reflected} vs {direct}");
}

/// `e_n V f` for a positive phase from the conditional residual density of
/// the Erlang distribution, folded into the cell by hand.
fn closing_oracle(f: &TestFunction, p: usize, delta: f64, top: f64, tn: f64, j: usize) -> f64 {
    let rate = p as f64 / delta;
    let surv = erlang_survival(p, rate, tn);
    let fold = |x: f64| {
        let r = x % (2.0 * delta);
        if r <= delta {
            r
        } else {
            2.0 * delta - r
        }
    };
    let integrand = |x: f64| erlang_pdf(p, rate, tn + x) / surv * f.value(top - fold(x), j);
    // panels end on the kinks at multiples of delta
    (0..40).map(|m| simpson(&integrand, m as f64 * delta, (m + 1) as f64 * delta, 2000)).sum()
}

#[test]
fn closing_matches_residual_density_quadrature() {
    let m = two_phase(1.0);
    let s = scheme(&m, 16, 4);
    let f = TestFunction::linear(1.0);
    let g = s.grid();
    let t = s.basis().t_points();
    let fac = lemma_factor(s.basis().base().variance());
    for level in 1..=4 {
        let vf = s.basis().to_residual(&closing_cell(&f, s.kernel(), g, level, 0));
        for (n, &tn) in t.iter().enumerate() {
            let want = closing_oracle(&f, 16, g.delta(), g.y(level + 1), tn, 0);
            assert!((vf[n] - want).abs() < 1e-8, "level {level} n {n}: {} vs {want}", vf[n]);
            let point = g.y(level) + tn;
            assert!((want - f.value(point, 0)).abs() <= (2.0 * f.g + f.l) * fac);
        }
    }
    assert!(all_pass(&check_closing_pointwise(&s, &f)));
}

#[test]
fn closing_bound_shrinks_with_order() {
    let m = two_phase(1.0);
    let f = TestFunction::linear(1.0);
    let bounds: Vec<f64> = [4, 16, 64]
        .iter()
        .map(|&p| {
            let r = check_closing_pointwise(&scheme(&m, p, 4), &f);
            assert!(all_pass(&r));
            r[0].bound
        })
        .collect();
    assert!(bounds[0] > bounds[1] && bounds[1] > bounds[2], "{bounds:?}");
}

#[test]
fn derivative_identity_holds_with_a_feasible_window() {
    // delta = 2 keeps Var^{1/3} below delta/3 at order 64, so eps = Var^{1/3}
    let m = two_phase(8.0);
    let s = scheme(&m, 64, 4);
    assert!((s.basis().epsilon() - s.basis().base().variance().cbrt()).abs() < 1e-12);
    let r = check_derivative_identity(&s, &TestFunction::sine(8.0));
    assert!(all_pass(&r), "{}", max_measured(&r));
}

#[test]
fn entry_row_derivative_residual_does_not_vanish() {
    // the entry orbit sits where the folded kernel turns, so S V f there
    // averages f_x with both signs
    let m = two_phase(1.0);
    let f = TestFunction::linear(1.0);
    for p in [16, 64] {
        let r = check_derivative_identity(&scheme(&m, p, 4), &f);
        let entry = r
            .iter()
            .filter(|x| x.location.map(|l| l.n == 0).unwrap_or(false))
            .map(|x| x.measured)
            .fold(0.0, f64::max);
        let rest = r
            .iter()
            .filter(|x| x.location.map(|l| l.n > 0).unwrap_or(false))
            .map(|x| x.measured)
            .fold(0.0, f64::max);
        assert!(entry > 0.5, "order {p}: {entry}");
        assert!(rest < entry, "order {p}: {rest} vs {entry}");
    }
}

#[test]
fn boundary_rows_drop_the_drift() {
    let m = two_phase(1.0);
    let s = scheme(&m, 16, 4);
    let f = TestFunction::linear(1.0);
    let gap = generator_gap(&s, &f, 3.0).unwrap();
    for r in &gap.reports {
        let l = r.location.unwrap();
        if l.level == 0 || l.level == 5 {
            let x = if l.level == 0 { 0.0 } else { 1.0 };
            let drift = (m.rates()[l.phase] * f.derivative(x, l.phase)).abs();
            assert!(r.measured < 0.5 * drift, "{l:?}: {} vs drift {drift}", r.measured);
        }
    }
}

#[test]
fn phase_law_and_exponential_equivalence() {
    let m = two_phase(1.0);
    let s = scheme(&m, 4, 4);
    let reps = phase_law_check(&s, 0.3, 1, &[0.5, 1.0, 3.0]).unwrap();
    assert!(all_pass(&reps));
    let e = scheme(&m, 1, 8);
    for t in [0.0, 0.7, 4.0] {
        assert!(p1_equivalence(&e, 0.3, 0, t).unwrap().pass);
    }
}

#[test]
fn density_integrates_to_cell_mass() {
    let m = two_phase(1.0);
    let s = scheme(&m, 16, 4);
    let res = s.transient(0.4, 0, 0.8).unwrap();
    let g = s.grid();
    for (level, j) in g.interior_blocks() {
        let (lo, hi) = (g.y(level), g.y(level + 1));
        let integral = simpson(|x| closing_density(&res, s.kernel(), level, j, x).unwrap(), lo, hi, 2000);
        let mass = res.level_mass(level, j).unwrap();
        assert!((integral - mass).abs() < 1e-8, "{level},{j}: {integral} vs {mass}");
    }
}

#[test]
fn start_cell_holds_all_mass_at_time_zero() {
    let m = two_phase(1.0);
    let s = scheme(&m, 16, 4);
    let res = s.transient(0.6, 1, 0.0).unwrap();
    let (level, _) = initial_state(s.grid(), s.basis().t_points(), 0.6, 1).unwrap();
    assert!((res.level_mass(level, 1).unwrap() - 1.0).abs() < 1e-14);
    assert!((s.distribution_at(&res, 0.0, 1.0, 1).unwrap() - 1.0).abs() < 1e-10);
}

#[test]
fn distribution_matches_simulation() {
    let m = two_phase(1.0);
    let s = scheme(&m, 16, 16);
    let (x0, i0, t, n) = (0.5, 0, 5.0, 100_000);
    let res = s.transient(x0, i0, t).unwrap();
    let paths = simulate_many(&m, x0, i0, t, n, 11).unwrap();
    let band = dkw_epsilon(n, 0.01) + 0.02;
    let total: f64 = (0..2).map(|j| s.distribution_at(&res, 0.0, 1.0, j).unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-10);
    for j in 0..2 {
        assert_eq!(s.distribution_at(&res, 0.3, 0.3, j).unwrap(), 0.0);
        for (a1, a2) in [(0.0, 0.25), (0.25, 0.5), (0.1, 0.9), (0.6, 1.0)] {
            let got = s.distribution_at(&res, a1, a2, j).unwrap();
            let hits = paths.iter().filter(|&&(x, i)| i == j && x >= a1 && x <= a2).count();
            let want = hits as f64 / n as f64;
            assert!((got - want).abs() < band, "[{a1},{a2}] phase {j}: {got} vs {want}");
        }
    }
}

#[test]
fn long_run_approaches_stationary() {
    let m = two_phase(1.0);
    let s = scheme(&m, 8, 8);
    let pi = s.stationary().unwrap();
    let late = s.transient(0.2, 1, 60.0).unwrap();
    assert!((&pi.v - &late.v).amax() < 1e-8);
    let marg: RowDVector<f64> = pi.phase_marginal();
    assert!((marg[0] - 0.5).abs() < 1e-10 && (marg[1] - 0.5).abs() < 1e-10);
}
