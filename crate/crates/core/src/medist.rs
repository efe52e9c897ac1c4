//! Matrix exponential (ME) distributions.
//!
//! A distribution is held as `(alpha, S, s)` with `s = -S e`. The
//! collocation machinery lives in [`ResidualBasis`]: a set of times
//! `0 = t_1 < 2 eps < t_2 < ... < t_p < mean - eps` and the matrix `P` whose
//! row `n` is the normalized orbit `alpha e^{S t_n} / alpha e^{S t_n} e`.
//! Row `n` of `P` is the initial vector of the residual life `Z - t_n`
//! given `Z > t_n`.

use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{DMatrix, DVector, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{condition_number, mexp, ones};

/// Number of points of the density validation grid.
pub const DENSITY_GRID_POINTS: usize = 2000;
/// Validation grid spans `[0, DENSITY_GRID_SPAN * mean]`.
pub const DENSITY_GRID_SPAN: f64 = 10.0;
/// Largest negative density tolerated on the validation grid.
pub const TOL_DENSITY: f64 = 1e-10;
/// Tolerance on `alpha e = 1`.
pub const TOL_MASS: f64 = 1e-10;
/// Condition-number gate for an explicit residual representation.
pub const MAX_BASIS_CONDITION: f64 = 1e8;
/// Jitter retries in [`choose_tpoints`].
pub const TPOINT_RETRIES: usize = 20;
const TPOINT_SEED: u64 = 0x0005_eed7_9017;

/// A matrix exponential distribution `ME(alpha, S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeDistribution {
    alpha: RowDVector<f64>,
    generator: DMatrix<f64>,
    exit: DVector<f64>,
    mean: f64,
    variance: f64,
}

impl MeDistribution {
    /// Validating constructor.
    pub fn new(alpha: RowDVector<f64>, generator: DMatrix<f64>) -> Result<Self> {
        let d = Self::unchecked(alpha, generator)?;
        let sum = d.alpha.sum();
        if (sum - 1.0).abs() > TOL_MASS {
            return Err(Error::AtomAtZero { sum });
        }
        let dev = dominant_real_eigenvalue(&d.generator);
        if dev >= 0.0 {
            return Err(Error::UnstableRepresentation { dev });
        }
        d.check_density_grid()?;
        Ok(d)
    }

    /// Builds the representation and its moments without the density check.
    pub(crate) fn unchecked(alpha: RowDVector<f64>, generator: DMatrix<f64>) -> Result<Self> {
        if !generator.is_square() {
            return Err(Error::NonSquareMatrix {
                rows: generator.nrows(),
                cols: generator.ncols(),
            });
        }
        let p = generator.nrows();
        if alpha.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "alpha has length {} but S is {p}x{p}",
                alpha.len()
            )));
        }
        let dev = dominant_real_eigenvalue(&generator);
        if dev >= 0.0 {
            return Err(Error::UnstableRepresentation { dev });
        }
        let exit = -(&generator * ones(p));
        let neg_inv = (-&generator)
            .try_inverse()
            .ok_or(Error::UnstableRepresentation { dev })?;
        let m1 = &alpha * &neg_inv * ones(p);
        let m2 = &alpha * &neg_inv * &neg_inv * ones(p);
        let mean = m1[0];
        let variance = 2.0 * m2[0] - mean * mean;
        Ok(MeDistribution {
            alpha,
            generator,
            exit,
            mean,
            variance,
        })
    }

    fn check_density_grid(&self) -> Result<()> {
        let h = DENSITY_GRID_SPAN * self.mean / (DENSITY_GRID_POINTS - 1) as f64;
        let step = mexp(&self.generator, h)?;
        let mut orbit = self.alpha.clone();
        for k in 0..DENSITY_GRID_POINTS {
            let value = (&orbit * &self.exit)[0];
            if value < -TOL_DENSITY {
                return Err(Error::NegativeDensity {
                    x: k as f64 * h,
                    value,
                });
            }
            orbit = &orbit * &step;
        }
        Ok(())
    }

    pub fn alpha(&self) -> &RowDVector<f64> {
        &self.alpha
    }

    /// The matrix `S`.
    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    /// The closing vector `s = -S e`.
    pub fn exit(&self) -> &DVector<f64> {
        &self.exit
    }

    pub fn order(&self) -> usize {
        self.alpha.len()
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Same shape, rescaled so that the mean equals `mean`.
    pub fn scaled_to_mean(&self, mean: f64) -> Result<Self> {
        if !(mean > 0.0) {
            return Err(Error::InvalidParameter(format!("mean must be positive, got {mean}")));
        }
        let factor = self.mean / mean;
        Self::unchecked(self.alpha.clone(), &self.generator * factor)
    }

    /// Density `alpha e^{Sx} s`.
    pub fn pdf(&self, x: f64) -> Result<f64> {
        if x < 0.0 {
            return Err(Error::NegativeArgument(x));
        }
        Ok((&self.alpha * mexp(&self.generator, x)? * &self.exit)[0])
    }

    /// Distribution function `1 - alpha e^{Sx} e`.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        Ok(1.0 - self.survival(x)?)
    }

    /// `alpha e^{Sx} e`.
    pub fn survival(&self, x: f64) -> Result<f64> {
        if x < 0.0 {
            return Err(Error::NegativeArgument(x));
        }
        Ok((&self.alpha * mexp(&self.generator, x)? * ones(self.order()))[0])
    }

    /// The orbit `alpha e^{Sx}` normalized to unit sum.
    pub fn residual_orbit(&self, x: f64) -> Result<RowDVector<f64>> {
        let orbit = &self.alpha * mexp(&self.generator, x)?;
        let mass = orbit.sum();
        if mass.abs() < 1e-300 {
            return Err(Error::NormalizationUnderflow(mass));
        }
        Ok(orbit / mass)
    }

    /// The paper-standard `Var(Z)^{1/3}`.
    pub fn default_epsilon(&self) -> f64 {
        self.variance.cbrt()
    }
}

/// Real part of the right-most eigenvalue.
pub fn dominant_real_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Validating constructor, see [`MeDistribution::new`].
pub fn me_new(alpha: RowDVector<f64>, generator: DMatrix<f64>) -> Result<MeDistribution> {
    MeDistribution::new(alpha, generator)
}

/// Erlang distribution with `order` stages and the given mean.
pub fn erlang(order: usize, mean: f64) -> Result<MeDistribution> {
    if order == 0 {
        return Err(Error::InvalidParameter("Erlang order must be at least 1".into()));
    }
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::InvalidParameter(format!("mean must be positive, got {mean}")));
    }
    let rate = order as f64 / mean;
    let mut s = DMatrix::zeros(order, order);
    for i in 0..order {
        s[(i, i)] = -rate;
        if i + 1 < order {
            s[(i, i + 1)] = rate;
        }
    }
    let mut alpha = RowDVector::zeros(order);
    alpha[0] = 1.0;
    MeDistribution::new(alpha, s)
}

pub fn me_pdf(d: &MeDistribution, x: f64) -> Result<f64> {
    d.pdf(x)
}

pub fn me_cdf(d: &MeDistribution, x: f64) -> Result<f64> {
    d.cdf(x)
}

/// Directory of CME parameter files, one per order, named `cme_<p>.txt`.
#[derive(Debug, Clone)]
pub struct CmeCatalog {
    dir: PathBuf,
}

/// Environment variable naming the catalog directory.
pub const CATALOG_ENV: &str = "FLUID_QBDRAP_CME_CATALOG";

impl CmeCatalog {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        CmeCatalog { dir: dir.into() }
    }

    /// Catalog from [`CATALOG_ENV`], if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(CATALOG_ENV).map(|d| CmeCatalog::new(PathBuf::from(d)))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, order: usize) -> PathBuf {
        self.dir.join(format!("cme_{order}.txt"))
    }
}

/// Parses the catalog text format: `p`, then `p` values of alpha, then `p`
/// rows of `S`, all whitespace separated.
pub fn parse_cme(text: &str) -> Result<(RowDVector<f64>, DMatrix<f64>)> {
    let mut tokens = text.split_whitespace();
    let p: usize = tokens
        .next()
        .ok_or_else(|| Error::CatalogFormat("empty file".into()))?
        .parse()
        .map_err(|e| Error::CatalogFormat(format!("order: {e}")))?;
    if p == 0 {
        return Err(Error::CatalogFormat("order 0".into()));
    }
    let mut vals = Vec::with_capacity(p + p * p);
    for tok in tokens {
        vals.push(
            tok.parse::<f64>()
                .map_err(|e| Error::CatalogFormat(format!("value {tok:?}: {e}")))?,
        );
    }
    if vals.len() != p + p * p {
        return Err(Error::CatalogFormat(format!(
            "expected {} values for order {p}, found {}",
            p + p * p,
            vals.len()
        )));
    }
    let alpha = RowDVector::from_row_slice(&vals[..p]);
    let s = DMatrix::from_row_slice(p, p, &vals[p..]);
    Ok((alpha, s))
}

/// Writes a representation in the catalog text format.
pub fn format_cme(alpha: &RowDVector<f64>, s: &DMatrix<f64>) -> String {
    let p = alpha.len();
    let mut out = format!("{p}\n");
    let row: Vec<String> = alpha.iter().map(|v| format!("{v:.17e}")).collect();
    out.push_str(&row.join(" "));
    out.push('\n');
    for i in 0..p {
        let row: Vec<String> = (0..p).map(|j| format!("{:.17e}", s[(i, j)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Loads the concentrated ME of the given order scaled to `mean`. Order 1
/// is the exponential and needs no catalog file.
pub fn cme_load(order: usize, catalog: &CmeCatalog, mean: f64) -> Result<MeDistribution> {
    if order == 1 {
        return erlang(1, mean);
    }
    let path = catalog.entry_path(order);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::MissingCatalogEntry {
        order,
        detail: format!("{}: {e}", path.display()),
    })?;
    let (alpha, s) = parse_cme(&text)?;
    if alpha.len() != order {
        return Err(Error::CatalogFormat(format!(
            "{} declares order {} but was requested as {order}",
            path.display(),
            alpha.len()
        )));
    }
    let base = MeDistribution::unchecked(alpha, s)?;
    let scaled = base.scaled_to_mean(mean)?;
    let d = MeDistribution::new(scaled.alpha.clone(), scaled.generator.clone())?;
    let erlang_var = mean * mean / order as f64;
    if d.variance() >= erlang_var {
        warn!(
            "CME order {order}: variance {:.6e} is not below Erlang variance {:.6e}",
            d.variance(),
            erlang_var
        );
    }
    Ok(d)
}

/// How the construction's `eps` is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonPolicy {
    /// `Var(Z)^{1/3}`; fails when the collocation window is empty.
    Paper,
    /// `Var(Z)^{1/3}` when the window is nonempty, otherwise `mean / 4`.
    #[default]
    Auto,
    /// A fixed value.
    Fixed(f64),
}

impl EpsilonPolicy {
    pub fn resolve(&self, d: &MeDistribution) -> Result<f64> {
        let paper = d.default_epsilon();
        match *self {
            EpsilonPolicy::Fixed(e) => {
                if !(e > 0.0) {
                    return Err(Error::InvalidParameter(format!("epsilon must be positive, got {e}")));
                }
                if d.order() > 1 {
                    check_window(d.mean(), e)?;
                }
                Ok(e)
            }
            EpsilonPolicy::Paper => {
                if d.order() > 1 {
                    check_window(d.mean(), paper)?;
                }
                Ok(paper)
            }
            EpsilonPolicy::Auto => {
                if d.order() == 1 || check_window(d.mean(), paper).is_ok() {
                    Ok(paper)
                } else {
                    Ok(d.mean() / 4.0)
                }
            }
        }
    }
}

fn check_window(delta: f64, epsilon: f64) -> Result<(f64, f64)> {
    let lo = 2.0 * epsilon;
    let hi = delta - epsilon;
    if !(epsilon > 0.0) || lo >= hi {
        return Err(Error::WindowEmpty { lo, hi });
    }
    Ok((lo, hi))
}

/// Equally spaced placement in `(2 eps, mean - eps)` after `t_1 = 0`,
/// without the conditioning gate.
pub fn default_tpoints(d: &MeDistribution, epsilon: f64) -> Result<Vec<f64>> {
    let p = d.order();
    if p == 1 {
        return Ok(vec![0.0]);
    }
    let (lo, hi) = check_window(d.mean(), epsilon)?;
    let step = (hi - lo) / p as f64;
    let mut t = Vec::with_capacity(p);
    t.push(0.0);
    for m in 1..p {
        t.push(lo + m as f64 * step);
    }
    Ok(t)
}

/// Collocation times for which the residual representation is numerically
/// invertible (`cond(P) < MAX_BASIS_CONDITION`). Interior points are
/// jittered multiplicatively by up to 1e-3 on failure.
pub fn choose_tpoints(d: &MeDistribution, epsilon: f64) -> Result<Vec<f64>> {
    let base = default_tpoints(d, epsilon)?;
    if base.len() == 1 {
        return Ok(base);
    }
    let (lo, hi) = check_window(d.mean(), epsilon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(TPOINT_SEED);
    let mut candidate = base.clone();
    let mut last_cond = f64::INFINITY;
    for _ in 0..=TPOINT_RETRIES {
        let proj = projector(d, &candidate)?;
        last_cond = condition_number(&proj);
        if last_cond < MAX_BASIS_CONDITION {
            return Ok(candidate);
        }
        candidate = base
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                if i == 0 {
                    0.0
                } else {
                    (t * (1.0 + 1e-3 * rng.gen::<f64>())).clamp(lo * (1.0 + 1e-12), hi * (1.0 - 1e-12))
                }
            })
            .collect();
        candidate[1..].sort_by(f64::total_cmp);
    }
    Err(Error::SingularBasis {
        condition: last_cond,
    })
}

/// Matrix whose row `n` is `alpha e^{S t_n} / alpha e^{S t_n} e`.
pub fn projector(d: &MeDistribution, t_points: &[f64]) -> Result<DMatrix<f64>> {
    let p = d.order();
    if t_points.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "{} t-points for order {p}",
            t_points.len()
        )));
    }
    let mut proj = DMatrix::zeros(p, p);
    for (n, &t) in t_points.iter().enumerate() {
        let row = d.residual_orbit(t)?;
        proj.set_row(n, &row);
    }
    Ok(proj)
}

/// Collocation basis of an ME distribution with mean `delta`.
///
/// All numerical work is done in the representation of `base`; residual
/// coordinates are obtained by applying [`ResidualBasis::projector`] on the
/// left (`x' = P x` for closing-type column vectors, `a = a' P` for orbit
/// row vectors). When `P` is well conditioned the explicit residual
/// representation `(e_1, P S P^{-1}, P s)` is also available.
#[derive(Debug, Clone)]
pub struct ResidualBasis {
    base: MeDistribution,
    t_points: Vec<f64>,
    epsilon: f64,
    projector: DMatrix<f64>,
    condition: f64,
    residual: Option<MeDistribution>,
}

impl ResidualBasis {
    /// Basis for explicit `t_points`; these must satisfy
    /// `t_1 = 0 < 2 eps < t_2 < ... < t_p < mean - eps`.
    pub fn new(base: MeDistribution, t_points: Vec<f64>, epsilon: f64) -> Result<Self> {
        let proj = projector(&base, &t_points)?;
        Self::assemble(base, t_points, epsilon, proj)
    }

    /// Placement via [`choose_tpoints`]; when no well-conditioned placement
    /// exists the equally spaced points are used and only the forward map
    /// is kept.
    pub fn build(base: MeDistribution, epsilon: f64) -> Result<Self> {
        let t = match choose_tpoints(&base, epsilon) {
            Ok(t) => t,
            Err(Error::SingularBasis { .. }) => default_tpoints(&base, epsilon)?,
            Err(e) => return Err(e),
        };
        Self::new(base, t, epsilon)
    }

    fn assemble(base: MeDistribution, t_points: Vec<f64>, epsilon: f64, proj: DMatrix<f64>) -> Result<Self> {
        validate_tpoints(&t_points, base.mean(), epsilon)?;
        let condition = condition_number(&proj);
        let residual = if condition < MAX_BASIS_CONDITION {
            let inv = proj.clone().try_inverse();
            match inv {
                Some(inv) => {
                    let s = &proj * base.generator() * inv;
                    let mut alpha = RowDVector::zeros(base.order());
                    alpha[0] = 1.0;
                    MeDistribution::unchecked(alpha, s).ok()
                }
                None => None,
            }
        } else {
            None
        };
        Ok(ResidualBasis {
            base,
            t_points,
            epsilon,
            projector: proj,
            condition,
            residual,
        })
    }

    /// The working representation.
    pub fn base(&self) -> &MeDistribution {
        &self.base
    }

    pub fn t_points(&self) -> &[f64] {
        &self.t_points
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Mean of the distribution, the cell width.
    pub fn delta(&self) -> f64 {
        self.base.mean()
    }

    pub fn order(&self) -> usize {
        self.base.order()
    }

    pub fn projector(&self) -> &DMatrix<f64> {
        &self.projector
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Explicit residual representation, when `P` is invertible in floating
    /// point.
    pub fn residual(&self) -> Option<&MeDistribution> {
        self.residual.as_ref()
    }

    /// Working-representation orbit of residual basis vector `e_n`.
    pub fn basis_orbit(&self, n: usize) -> RowDVector<f64> {
        self.projector.row(n).into_owned()
    }

    /// Maps a column quantity (closing vector, `V f`) to residual coordinates.
    pub fn to_residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.projector * x
    }

    /// `e_n s'` for every `n`: the hazard of `Z` at `t_n`.
    pub fn residual_exit(&self) -> DVector<f64> {
        &self.projector * self.base.exit()
    }
}

fn validate_tpoints(t: &[f64], delta: f64, epsilon: f64) -> Result<()> {
    if t.is_empty() || t[0] != 0.0 {
        return Err(Error::InvalidParameter("t_1 must be 0".into()));
    }
    if t.len() == 1 {
        return Ok(());
    }
    let (lo, hi) = check_window(delta, epsilon)?;
    for w in t[1..].windows(2) {
        if !(w[0] < w[1]) {
            return Err(Error::InvalidParameter(format!("t-points not increasing: {t:?}")));
        }
    }
    if !(t[1] > lo && t[t.len() - 1] < hi) {
        return Err(Error::InvalidParameter(format!(
            "interior t-points must lie in ({lo}, {hi}): {t:?}"
        )));
    }
    Ok(())
}

/// Builds the explicit residual representation; fails with
/// `SingularBasis` when `cond(P)` reaches [`MAX_BASIS_CONDITION`].
pub fn reparameterize(d: &MeDistribution, t_points: &[f64], epsilon: f64) -> Result<ResidualBasis> {
    let proj = projector(d, t_points)?;
    let condition = condition_number(&proj);
    if condition >= MAX_BASIS_CONDITION {
        return Err(Error::SingularBasis { condition });
    }
    let basis = ResidualBasis::assemble(d.clone(), t_points.to_vec(), epsilon, proj)?;
    if basis.residual.is_none() {
        return Err(Error::SingularBasis { condition });
    }
    Ok(basis)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp1() -> MeDistribution {
        me_new(RowDVector::from_row_slice(&[1.0]), DMatrix::from_element(1, 1, -1.0)).unwrap()
    }

    #[test]
    fn exponential_moments() {
        let d = exp1();
        assert_eq!(d.order(), 1);
        assert_eq!(d.exit()[0], 1.0);
        assert!((d.mean() - 1.0).abs() < 1e-15);
        assert!((d.variance() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn erlang2_moments() {
        let d = me_new(
            RowDVector::from_row_slice(&[1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[-2.0, 2.0, 0.0, -2.0]),
        )
        .unwrap();
        assert!((d.mean() - 1.0).abs() < 1e-14);
        assert!((d.variance() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn unstable_rejected() {
        let r = me_new(
            RowDVector::from_row_slice(&[0.5, 0.5]),
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]),
        );
        assert!(matches!(r, Err(Error::UnstableRepresentation { .. })));
    }

    #[test]
    fn atom_rejected() {
        let r = me_new(
            RowDVector::from_row_slice(&[0.5, 0.4]),
            DMatrix::from_row_slice(2, 2, &[-2.0, 2.0, 0.0, -2.0]),
        );
        assert!(matches!(r, Err(Error::AtomAtZero { .. })));
    }

    #[test]
    fn non_square_rejected() {
        let r = me_new(RowDVector::from_row_slice(&[1.0, 0.0]), DMatrix::zeros(2, 3));
        assert!(matches!(r, Err(Error::NonSquareMatrix { .. })));
    }

    #[test]
    fn negative_density_rejected() {
        // density (1.5 - 0.5x) e^{-x} changes sign at x = 3
        let r = me_new(
            RowDVector::from_row_slice(&[-0.5, 1.5]),
            DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]),
        );
        assert!(matches!(r, Err(Error::NegativeDensity { .. })), "{r:?}");
    }

    #[test]
    fn erlang_constructor() {
        let d = erlang(1, 1.0).unwrap();
        assert_eq!(d, exp1());
        let d = erlang(16, 0.5).unwrap();
        assert!((d.variance() - 0.015625).abs() < 1e-14);
        assert!((d.mean() - 0.5).abs() < 1e-14);
        assert!(matches!(erlang(0, 1.0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn pdf_cdf_values() {
        let d = exp1();
        assert!((d.pdf(0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(d.cdf(0.0).unwrap().abs() < 1e-15);
        let e2 = erlang(2, 1.0).unwrap();
        // Erlang CDF: 1 - e^{-2x}(1 + 2x)
        let want = 1.0 - (-2f64).exp() * 3.0;
        assert!((e2.cdf(1.0).unwrap() - want).abs() < 1e-14);
        assert!((want - 0.59399).abs() < 1e-5);
        assert!(e2.cdf(200.0).unwrap() > 1.0 - 1e-12);
        assert!(matches!(d.pdf(-1.0), Err(Error::NegativeArgument(_))));
    }

    #[test]
    fn tpoints_exponential() {
        assert_eq!(choose_tpoints(&exp1(), 0.1).unwrap(), vec![0.0]);
    }

    #[test]
    fn tpoints_erlang4() {
        let d = erlang(4, 1.0).unwrap();
        let t = choose_tpoints(&d, 0.05).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t[0], 0.0);
        for w in t.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(t[1] > 0.1 && t[3] < 0.95);
        let p = projector(&d, &t).unwrap();
        assert!(condition_number(&p) < MAX_BASIS_CONDITION);
    }

    #[test]
    fn tpoints_window_empty() {
        let d = erlang(4, 1.0).unwrap();
        assert!(matches!(choose_tpoints(&d, 0.6), Err(Error::WindowEmpty { .. })));
    }

    #[test]
    fn tpoints_singular_for_high_order_erlang() {
        let d = erlang(32, 1.0).unwrap();
        assert!(matches!(choose_tpoints(&d, 0.05), Err(Error::SingularBasis { .. })));
        // forward-only basis still builds
        let b = ResidualBasis::build(d, 0.05).unwrap();
        assert!(b.residual().is_none());
        assert_eq!(b.t_points().len(), 32);
    }

    #[test]
    fn reparameterize_exponential_is_identity() {
        let b = reparameterize(&exp1(), &[0.0], 0.1).unwrap();
        let r = b.residual().unwrap();
        assert_eq!(r.generator()[(0, 0)], -1.0);
        assert_eq!(b.projector()[(0, 0)], 1.0);
    }

    #[test]
    fn reparameterize_erlang2_conditional_survival() {
        let d = erlang(2, 1.0).unwrap();
        let b = reparameterize(&d, &[0.0, 0.5], 0.1).unwrap();
        let r = b.residual().unwrap();
        // P(Z - 0.5 >= x | Z > 0.5) for Erlang(2, rate 2):
        // survival(u) = e^{-2u}(1 + 2u)
        let surv = |u: f64| (-2.0 * u).exp() * (1.0 + 2.0 * u);
        for k in 0..50 {
            let x = k as f64 * 0.1;
            let got = (crate::linalg::unit_row(2, 1) * mexp(r.generator(), x).unwrap() * ones(2))[0];
            let want = surv(0.5 + x) / surv(0.5);
            assert!((got - want).abs() < 1e-12, "x={x}: {got} vs {want}");
        }
        assert_eq!(r.alpha()[0], 1.0);
    }

    #[test]
    fn reparameterize_duplicate_points_singular() {
        let d = erlang(3, 1.0).unwrap();
        let r = reparameterize(&d, &[0.0, 0.4, 0.4], 0.1);
        assert!(matches!(r, Err(Error::SingularBasis { .. })), "{r:?}");
    }

    #[test]
    fn catalog_roundtrip_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let cat = CmeCatalog::new(dir.path());
        assert!(matches!(cme_load(9999, &cat, 1.0), Err(Error::MissingCatalogEntry { .. })));
        assert_eq!(cme_load(1, &cat, 2.0).unwrap(), erlang(1, 2.0).unwrap());
        let e = erlang(3, 1.0).unwrap();
        std::fs::write(cat.entry_path(3), format_cme(e.alpha(), e.generator())).unwrap();
        let d = cme_load(3, &cat, 0.5).unwrap();
        assert!((d.mean() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn catalog_parse_errors() {
        assert!(parse_cme("").is_err());
        assert!(parse_cme("2\n1 0\n-1 1\n").is_err());
        assert!(parse_cme("1\n1\nfoo\n").is_err());
    }
}
