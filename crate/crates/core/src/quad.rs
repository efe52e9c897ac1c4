//! Adaptive Gauss–Kronrod (7/15) quadrature for scalar and vector integrands.

// published 30-digit nodes and weights
#![allow(clippy::excessive_precision)]

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Kronrod abscissae on [-1, 1] (non-negative half, descending). Odd
/// indices are the embedded 7-point Gauss nodes.
pub(crate) const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

pub(crate) const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

/// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7].
pub(crate) const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// The 15 Kronrod nodes on [-1,1] in ascending order with their Kronrod
/// and (possibly zero) Gauss weights.
pub(crate) fn gk15_rule() -> [(f64, f64, f64); 15] {
    let mut out = [(0.0, 0.0, 0.0); 15];
    for k in 0..7 {
        let wg = if k % 2 == 1 { WG[k / 2] } else { 0.0 };
        out[k] = (-XGK[k], WGK[k], wg);
        out[14 - k] = (XGK[k], WGK[k], wg);
    }
    out[7] = (0.0, WGK[7], WG[3]);
    out
}

/// Tolerances for [`integrate_vec`].
#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions {
            abs_tol: 1e-10,
            rel_tol: 1e-12,
            max_intervals: 2000,
        }
    }
}

/// Result of an adaptive integration.
#[derive(Debug, Clone)]
pub struct QuadResult {
    pub value: DVector<f64>,
    /// Max-norm error estimate.
    pub error: f64,
    pub evaluations: usize,
}

struct Segment {
    a: f64,
    b: f64,
    value: DVector<f64>,
    error: f64,
}

fn gk15_segment<F>(f: &mut F, a: f64, b: f64) -> Result<Segment>
where
    F: FnMut(f64) -> Result<DVector<f64>>,
{
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center)?;
    let dim = fc.len();
    let mut kron = &fc * WGK[7];
    let mut gauss = &fc * WG[3];
    let mut fvals: Vec<(DVector<f64>, DVector<f64>)> = Vec::with_capacity(7);
    for k in 0..7 {
        let dx = half * XGK[k];
        let f1 = f(center - dx)?;
        let f2 = f(center + dx)?;
        kron += (&f1 + &f2) * WGK[k];
        if k % 2 == 1 {
            gauss += (&f1 + &f2) * WG[k / 2];
        }
        fvals.push((f1, f2));
    }
    // QUADPACK-style error scaling, componentwise
    let mean = &kron * 0.5;
    let mut error: f64 = 0.0;
    for c in 0..dim {
        let mut resasc = WGK[7] * (fc[c] - mean[c]).abs();
        for k in 0..7 {
            resasc += WGK[k] * ((fvals[k].0[c] - mean[c]).abs() + (fvals[k].1[c] - mean[c]).abs());
        }
        resasc *= half.abs();
        let raw = ((kron[c] - gauss[c]) * half).abs();
        let scaled = if resasc != 0.0 && raw != 0.0 {
            resasc * (200.0 * raw / resasc).powf(1.5).min(1.0)
        } else {
            raw
        };
        error = error.max(scaled);
    }
    Ok(Segment {
        a,
        b,
        value: kron * half,
        error,
    })
}

/// Globally adaptive GK15 integration of a vector-valued integrand over
/// `[a, b]`. Fails with `QuadratureFailure` when the interval budget runs
/// out before the error target is met.
pub fn integrate_vec<F>(mut f: F, a: f64, b: f64, opts: QuadOptions) -> Result<QuadResult>
where
    F: FnMut(f64) -> Result<DVector<f64>>,
{
    if a == b {
        let probe = f(a)?;
        return Ok(QuadResult {
            value: DVector::zeros(probe.len()),
            error: 0.0,
            evaluations: 1,
        });
    }
    let mut segs = vec![gk15_segment(&mut f, a, b)?];
    let mut evals = 15;
    loop {
        let total: DVector<f64> = segs
            .iter()
            .fold(DVector::zeros(segs[0].value.len()), |acc, s| acc + &s.value);
        let err: f64 = segs.iter().map(|s| s.error).sum();
        let target = opts.abs_tol.max(opts.rel_tol * total.amax());
        if err <= target {
            return Ok(QuadResult {
                value: total,
                error: err,
                evaluations: evals,
            });
        }
        if segs.len() >= opts.max_intervals {
            return Err(Error::QuadratureFailure {
                estimate: err,
                tolerance: target,
            });
        }
        let (worst, _) = segs
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .unwrap();
        let s = segs.swap_remove(worst);
        let mid = 0.5 * (s.a + s.b);
        if mid <= s.a || mid >= s.b {
            return Err(Error::QuadratureFailure {
                estimate: err,
                tolerance: target,
            });
        }
        segs.push(gk15_segment(&mut f, s.a, mid)?);
        segs.push(gk15_segment(&mut f, mid, s.b)?);
        evals += 30;
    }
}

/// Scalar convenience wrapper around [`integrate_vec`].
pub fn integrate<F>(mut f: F, a: f64, b: f64, opts: QuadOptions) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> f64,
{
    let r = integrate_vec(|x| Ok(DVector::from_element(1, f(x))), a, b, opts)?;
    Ok((r.value[0], r.error))
}
