//! The QBD-RAP approximation of a bounded fluid queue.
//!
//! State layout (the single source of truth is [`Grid`]): level 0 holds one
//! entry per negative phase, levels `1..=K` hold `p` entries for every
//! phase (positive phases first, then negative ones, ascending within each
//! group), and level `K+1` holds one entry per positive phase.
//!
//! Everything is assembled in the representation held by
//! [`ResidualBasis::base`]. Residual-basis coordinates are recovered by
//! applying the basis projector to each `p`-block, which is exact because
//! the projector rows sum to one.

use std::collections::VecDeque;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::fluidq::{FluidModel, TestFunction};
use crate::linalg::{expm, mexp, ones, spectral_radius_below_one, CsrMatrix};
use crate::medist::{MeDistribution, ResidualBasis};
use crate::quad::{gk15_rule, integrate_vec, QuadOptions};

/// Tolerance of the quadratures behind `D` and the closing kernel.
pub const TOL_QUAD: f64 = 1e-10;

/// Regular grid of `K` cells on `[0, b]` and the `(level, phase, n)` map.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    k: usize,
    b: f64,
    delta: f64,
    p: usize,
    phases: usize,
    plus: Vec<usize>,
    minus: Vec<usize>,
    /// Slot of each phase inside an interior level.
    slot: Vec<usize>,
    /// Position of each phase in its sign group.
    group_pos: Vec<usize>,
}

impl Grid {
    pub fn new(m: &FluidModel, k: usize, p: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("K must be at least 1".into()));
        }
        if p == 0 {
            return Err(Error::InvalidParameter("order must be at least 1".into()));
        }
        let plus = m.plus().to_vec();
        let minus = m.minus().to_vec();
        let n = m.phases();
        let mut slot = vec![0; n];
        let mut group_pos = vec![0; n];
        for (a, &i) in plus.iter().enumerate() {
            slot[i] = a;
            group_pos[i] = a;
        }
        for (a, &i) in minus.iter().enumerate() {
            slot[i] = plus.len() + a;
            group_pos[i] = a;
        }
        Ok(Grid {
            k,
            b: m.bound(),
            delta: m.bound() / k as f64,
            p,
            phases: n,
            plus,
            minus,
            slot,
            group_pos,
        })
    }

    pub fn cells(&self) -> usize {
        self.k
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn bound(&self) -> f64 {
        self.b
    }

    pub fn order(&self) -> usize {
        self.p
    }

    pub fn phases(&self) -> usize {
        self.phases
    }

    pub fn is_plus(&self, i: usize) -> bool {
        self.plus.binary_search(&i).is_ok()
    }

    pub fn plus(&self) -> &[usize] {
        &self.plus
    }

    pub fn minus(&self) -> &[usize] {
        &self.minus
    }

    /// Breakpoint `y_k = (k - 1) delta` for `k = 1..=K+1`; `y_{K+1} = b`.
    pub fn y(&self, k: usize) -> f64 {
        if k == self.k + 1 {
            self.b
        } else {
            (k as f64 - 1.0) * self.delta
        }
    }

    pub fn dim(&self) -> usize {
        self.minus.len() + self.k * self.phases * self.p + self.plus.len()
    }

    fn level_offset(&self, level: usize) -> usize {
        if level == 0 {
            0
        } else {
            self.minus.len() + (level - 1) * self.phases * self.p
        }
    }

    /// Flat index of `(level, phase, n)`, with `n` zero-based.
    pub fn index(&self, level: usize, phase: usize, n: usize) -> Result<usize> {
        let bad = || Error::InvalidParameter(format!("no state (level {level}, phase {phase}, n {n})"));
        if phase >= self.phases {
            return Err(bad());
        }
        if level == 0 {
            if self.is_plus(phase) || n != 0 {
                return Err(bad());
            }
            Ok(self.group_pos[phase])
        } else if level <= self.k {
            if n >= self.p {
                return Err(bad());
            }
            Ok(self.level_offset(level) + self.slot[phase] * self.p + n)
        } else if level == self.k + 1 {
            if !self.is_plus(phase) || n != 0 {
                return Err(bad());
            }
            Ok(self.level_offset(level) + self.group_pos[phase])
        } else {
            Err(bad())
        }
    }

    /// Inverse of [`Grid::index`].
    pub fn decode(&self, idx: usize) -> Result<(usize, usize, usize)> {
        let nm = self.minus.len();
        if idx < nm {
            return Ok((0, self.minus[idx], 0));
        }
        let interior = self.k * self.phases * self.p;
        if idx < nm + interior {
            let r = idx - nm;
            let per_level = self.phases * self.p;
            let level = r / per_level + 1;
            let within = r % per_level;
            let slot = within / self.p;
            let phase = if slot < self.plus.len() {
                self.plus[slot]
            } else {
                self.minus[slot - self.plus.len()]
            };
            return Ok((level, phase, within % self.p));
        }
        let r = idx - nm - interior;
        if r < self.plus.len() {
            return Ok((self.k + 1, self.plus[r], 0));
        }
        Err(Error::InvalidParameter(format!("index {idx} out of range {}", self.dim())))
    }

    /// Entries of `(level, phase)`: length `p` inside, 1 on the boundary.
    pub fn block(&self, level: usize, phase: usize) -> Result<Range<usize>> {
        let start = self.index(level, phase, 0)?;
        let len = if level == 0 || level == self.k + 1 { 1 } else { self.p };
        Ok(start..start + len)
    }

    /// All entries of a level.
    pub fn level_range(&self, level: usize) -> Range<usize> {
        let start = self.level_offset(level);
        let len = if level == 0 {
            self.minus.len()
        } else if level == self.k + 1 {
            self.plus.len()
        } else {
            self.phases * self.p
        };
        start..start + len
    }

    /// Collocation point `x_{k,i,n}`: `y_k + t_n` for positive phases,
    /// `y_{k+1} - t_n` for negative ones, `0` and `b` on the boundary levels.
    pub fn collocation(&self, level: usize, phase: usize, n: usize, t_points: &[f64]) -> f64 {
        if level == 0 {
            0.0
        } else if level == self.k + 1 {
            self.b
        } else if self.is_plus(phase) {
            self.y(level) + t_points[n]
        } else {
            self.y(level + 1) - t_points[n]
        }
    }

    /// Interior `(level, phase)` pairs in flat order.
    pub fn interior_blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (1..=self.k).flat_map(move |l| self.plus.iter().chain(self.minus.iter()).map(move |&i| (l, i)))
    }
}

/// The orbit jump matrix applied when the sign of the rate changes.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpMatrixD {
    pub d: DMatrix<f64>,
    pub epsilon: f64,
    pub quad_error: f64,
}

/// `D = int_0^{mean-eps} e^{Sy} s a(y) dy + e^{S(mean-eps)} e a(mean-eps)`
/// with `a(y)` the normalized orbit `alpha e^{Sy} / alpha e^{Sy} e`.
pub fn build_d(basis: &ResidualBasis) -> Result<JumpMatrixD> {
    build_d_with(basis.base(), basis.epsilon(), TOL_QUAD)
}

pub fn build_d_with(dist: &MeDistribution, epsilon: f64, tol: f64) -> Result<JumpMatrixD> {
    let p = dist.order();
    let s = dist.generator();
    let exit = dist.exit();
    let upper = (dist.mean() - epsilon).max(0.0);
    let opts = QuadOptions {
        abs_tol: tol,
        rel_tol: 0.0,
        max_intervals: 4000,
    };
    let body = integrate_vec(
        |y| {
            let e = mexp(s, y)?;
            let col = &e * exit;
            let row = dist.alpha() * &e;
            let mass = row.sum();
            if mass.abs() < 1e-300 {
                return Err(Error::NormalizationUnderflow(mass));
            }
            let outer = col * (row / mass);
            Ok(DVector::from_column_slice(outer.as_slice()))
        },
        0.0,
        upper,
        opts,
    )?;
    if body.error > tol {
        return Err(Error::QuadratureFailure {
            estimate: body.error,
            tolerance: tol,
        });
    }
    let mut d = DMatrix::from_column_slice(p, p, body.value.as_slice());
    let e_tail = mexp(s, upper)?;
    let tail_col = &e_tail * ones(p);
    let tail_row = dist.alpha() * &e_tail;
    let mass = tail_row.sum();
    if mass.abs() < 1e-300 {
        return Err(Error::NormalizationUnderflow(mass));
    }
    d += tail_col * (tail_row / mass);
    Ok(JumpMatrixD {
        d,
        epsilon,
        quad_error: body.error,
    })
}

/// Named blocks of the generator, in the notation of the construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorBlocks {
    pub b_pp: DMatrix<f64>,
    pub b_pm: DMatrix<f64>,
    pub b_mp: DMatrix<f64>,
    pub b_mm: DMatrix<f64>,
    /// Interior diagonal block `[[B++, B+-], [B-+, B--]]`.
    pub b0: DMatrix<f64>,
    /// Interior level `k -> k+1`.
    pub b_up: DMatrix<f64>,
    /// Interior level `k -> k-1`.
    pub b_down: DMatrix<f64>,
    /// Lower boundary: within, to level 1, and level 1 to boundary.
    pub lower0: DMatrix<f64>,
    pub lower_up: DMatrix<f64>,
    pub lower_down: DMatrix<f64>,
    /// Upper boundary: within, to level K, and level K to boundary.
    pub upper0: DMatrix<f64>,
    pub upper_down: DMatrix<f64>,
    pub upper_up: DMatrix<f64>,
}

fn block_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols().max(bottom.ncols()));
    out.view_mut((0, 0), top.shape()).copy_from(top);
    out.view_mut((top.nrows(), 0), bottom.shape()).copy_from(bottom);
    out
}

fn block_cols(left: &DMatrix<f64>, right: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(left.nrows().max(right.nrows()), left.ncols() + right.ncols());
    out.view_mut((0, 0), left.shape()).copy_from(left);
    out.view_mut((0, left.ncols()), right.shape()).copy_from(right);
    out
}

impl GeneratorBlocks {
    pub fn new(m: &FluidModel, dist: &MeDistribution, d: &DMatrix<f64>) -> Result<Self> {
        let p = dist.order();
        if d.shape() != (p, p) {
            return Err(Error::DimensionMismatch(format!(
                "D is {}x{} but the order is {p}",
                d.nrows(),
                d.ncols()
            )));
        }
        let np = m.plus().len();
        let nm = m.minus().len();
        let s = dist.generator();
        let exit = DMatrix::from_column_slice(p, 1, dist.exit().as_slice());
        let alpha = DMatrix::from_row_slice(1, p, dist.alpha().as_slice());
        let sa = &exit * &alpha;
        let eye = DMatrix::<f64>::identity(p, p);
        let (cp, cm) = (m.c_plus(), m.c_minus());
        let (tpp, tpm, tmp, tmm) = (m.t_pp(), m.t_pm(), m.t_mp(), m.t_mm());

        let b_pp = cp.kronecker(s) + tpp.kronecker(&eye);
        let b_pm = tpm.kronecker(d);
        let b_mp = tmp.kronecker(d);
        let b_mm = cm.kronecker(s) + tmm.kronecker(&eye);
        let b0 = block_rows(&block_cols(&b_pp, &b_pm), &block_cols(&b_mp, &b_mm));

        let zp = DMatrix::zeros(np * p, np * p);
        let zm = DMatrix::zeros(nm * p, nm * p);
        let zpm = DMatrix::zeros(np * p, nm * p);
        let zmp = DMatrix::zeros(nm * p, np * p);
        let b_up = block_rows(&block_cols(&cp.kronecker(&sa), &zpm), &block_cols(&zmp, &zm));
        let b_down = block_rows(&block_cols(&zp, &zpm), &block_cols(&zmp, &cm.kronecker(&sa)));

        let lower0 = tmm.clone();
        let lower_up = block_cols(&tmp.kronecker(&alpha), &DMatrix::zeros(nm, nm * p));
        let lower_down = block_rows(&DMatrix::zeros(np * p, nm), &cm.kronecker(&exit));
        let upper0 = tpp.clone();
        let upper_down = block_cols(&DMatrix::zeros(np, np * p), &tpm.kronecker(&alpha));
        let upper_up = block_rows(&cp.kronecker(&exit), &DMatrix::zeros(nm * p, np));
        Ok(GeneratorBlocks {
            b_pp,
            b_pm,
            b_mp,
            b_mm,
            b0,
            b_up,
            b_down,
            lower0,
            lower_up,
            lower_down,
            upper0,
            upper_down,
            upper_up,
        })
    }
}

/// The assembled generator.
#[derive(Debug, Clone)]
pub struct BlockGenerator {
    grid: Grid,
    matrix: CsrMatrix,
    blocks: GeneratorBlocks,
    d: JumpMatrixD,
}

fn place(trip: &mut Vec<(usize, usize, f64)>, row0: usize, col0: usize, block: &DMatrix<f64>) {
    for j in 0..block.ncols() {
        for i in 0..block.nrows() {
            let v = block[(i, j)];
            if v != 0.0 {
                trip.push((row0 + i, col0 + j, v));
            }
        }
    }
}

impl BlockGenerator {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn blocks(&self) -> &GeneratorBlocks {
        &self.blocks
    }

    pub fn jump(&self) -> &JumpMatrixD {
        &self.d
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.matrix.to_dense()
    }

    /// `max |(B e)_i|`.
    pub fn conservation_residual(&self) -> f64 {
        self.matrix.row_sums().iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Most negative off-diagonal entry (zero when there is none).
    pub fn min_off_diagonal(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim() {
            for (j, v) in self.matrix.row(i) {
                if i != j {
                    worst = worst.min(v);
                }
            }
        }
        worst
    }

    /// `B x` for a column vector.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.matrix.mul_vec(x.as_slice()))
    }
}

/// Builds `D` from the basis and assembles the generator with `K` cells.
pub fn build_generator(m: &FluidModel, basis: &ResidualBasis, k: usize) -> Result<BlockGenerator> {
    let d = build_d(basis)?;
    assemble_generator(m, basis.base(), d, k)
}

/// Assembles the generator around a given jump matrix.
pub fn assemble_generator(m: &FluidModel, dist: &MeDistribution, d: JumpMatrixD, k: usize) -> Result<BlockGenerator> {
    let grid = Grid::new(m, k, dist.order())?;
    let blocks = GeneratorBlocks::new(m, dist, &d.d)?;
    let mut trip = Vec::new();
    let off = |level: usize| grid.level_range(level).start;
    place(&mut trip, off(0), off(0), &blocks.lower0);
    place(&mut trip, off(0), off(1), &blocks.lower_up);
    place(&mut trip, off(k + 1), off(k + 1), &blocks.upper0);
    place(&mut trip, off(k + 1), off(k), &blocks.upper_down);
    for level in 1..=k {
        let r = off(level);
        place(&mut trip, r, r, &blocks.b0);
        if level == 1 {
            place(&mut trip, r, off(0), &blocks.lower_down);
        } else {
            place(&mut trip, r, off(level - 1), &blocks.b_down);
        }
        if level == k {
            place(&mut trip, r, off(k + 1), &blocks.upper_up);
        } else {
            place(&mut trip, r, off(level + 1), &blocks.b_up);
        }
    }
    let dim = grid.dim();
    Ok(BlockGenerator {
        matrix: CsrMatrix::from_triplets(dim, dim, trip),
        grid,
        blocks,
        d,
    })
}

/// Cell and basis index `(level, n)` of a starting point, `n` zero-based.
pub fn initial_state(grid: &Grid, t_points: &[f64], x0: f64, i0: usize) -> Result<(usize, usize)> {
    let b = grid.bound();
    if i0 >= grid.phases() {
        return Err(Error::InadmissibleStart(format!("phase {i0} does not exist")));
    }
    if !(0.0..=b).contains(&x0) {
        return Err(Error::InadmissibleStart(format!("x0 = {x0} is outside [0, {b}]")));
    }
    let plus = grid.is_plus(i0);
    if x0 == 0.0 && !plus {
        return Ok((0, 0));
    }
    if x0 == b && plus {
        return Ok((grid.cells() + 1, 0));
    }
    let delta = grid.delta();
    let tol = 1e-12 * b.max(1.0);
    let k = grid.cells();
    let n_of = |u: f64| t_points.iter().rposition(|&t| t <= u + tol).unwrap_or(0);
    if plus {
        // [y_l, y_{l+1}) is left-closed
        let mut l = ((x0 / delta).floor() as usize + 1).clamp(1, k);
        if l < k && x0 >= grid.y(l + 1) - tol {
            l += 1;
        }
        Ok((l, n_of((x0 - grid.y(l)).max(0.0))))
    } else {
        // (y_l, y_{l+1}] is right-closed
        let mut l = ((x0 / delta).ceil() as usize).clamp(1, k);
        if l > 1 && x0 <= grid.y(l) + tol {
            l -= 1;
        }
        Ok((l, n_of((grid.y(l + 1) - x0).max(0.0))))
    }
}

/// Initial row vector for `X(0) = x0, phi(0) = i0`: the residual unit
/// vector `e_{k,i,n}` expressed in the working representation.
pub fn initial_vector(grid: &Grid, basis: &ResidualBasis, x0: f64, i0: usize) -> Result<RowDVector<f64>> {
    let (level, n) = initial_state(grid, basis.t_points(), x0, i0)?;
    let mut v = RowDVector::zeros(grid.dim());
    let r = grid.block(level, i0)?;
    if r.len() == 1 {
        v[r.start] = 1.0;
    } else {
        v.columns_mut(r.start, r.len()).copy_from(&basis.basis_orbit(n));
    }
    Ok(v)
}

/// Distribution of the approximating process at time `t`.
#[derive(Debug, Clone)]
pub struct TransientResult {
    pub t: f64,
    pub v: RowDVector<f64>,
    grid: Grid,
}

impl TransientResult {
    pub fn new(grid: Grid, t: f64, v: RowDVector<f64>) -> Self {
        TransientResult { t, v, grid }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn total_mass(&self) -> f64 {
        self.v.sum()
    }

    /// `E[A_{l,j}(t)]` in the working representation (length 1 on the
    /// boundary levels).
    pub fn orbit_mass(&self, level: usize, phase: usize) -> Result<RowDVector<f64>> {
        let r = self.grid.block(level, phase)?;
        Ok(self.v.columns(r.start, r.len()).into_owned())
    }

    /// Probability of `(L(t), phi(t)) = (level, phase)`.
    pub fn level_mass(&self, level: usize, phase: usize) -> Result<f64> {
        Ok(self.orbit_mass(level, phase)?.sum())
    }

    pub fn phase_marginal(&self) -> RowDVector<f64> {
        let mut out = RowDVector::zeros(self.grid.phases());
        for (idx, v) in self.v.iter().enumerate() {
            let (_, phase, _) = self.grid.decode(idx).expect("index in range");
            out[phase] += v;
        }
        out
    }
}

/// Settings of the transient solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransientOptions {
    /// Relative truncation tolerance of each Taylor step.
    pub tol: f64,
    /// Target norm of `h (B - mu I)` per step.
    pub theta: f64,
    pub max_terms: usize,
    pub solver: TransientSolver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransientSolver {
    /// Shifted Taylor series of the action `v e^{Bt}` on the sparse matrix.
    Taylor,
    /// `v e^{Bt}` through a dense matrix exponential.
    Dense,
}

impl Default for TransientOptions {
    fn default() -> Self {
        TransientOptions {
            tol: 1e-16,
            theta: 8.0,
            max_terms: 400,
            solver: TransientSolver::Taylor,
        }
    }
}

/// `v0 e^{Bt}`.
pub fn transient(b: &BlockGenerator, v0: &RowDVector<f64>, t: f64) -> Result<TransientResult> {
    transient_with(b, v0, t, TransientOptions::default())
}

pub fn transient_with(
    b: &BlockGenerator,
    v0: &RowDVector<f64>,
    t: f64,
    opts: TransientOptions,
) -> Result<TransientResult> {
    if v0.len() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "initial vector has length {} but the generator has dimension {}",
            v0.len(),
            b.dim()
        )));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::NegativeArgument(t));
    }
    let mass = v0.sum();
    if (mass - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidParameter(format!("initial vector sums to {mass}")));
    }
    if t == 0.0 {
        return Ok(TransientResult::new(b.grid.clone(), 0.0, v0.clone()));
    }
    let v = match opts.solver {
        TransientSolver::Dense => {
            let e = expm(&(b.to_dense() * t)).map_err(|e| Error::SolverDivergence {
                t,
                detail: e.to_string(),
            })?;
            v0 * e
        }
        TransientSolver::Taylor => taylor_action(&b.matrix, v0.as_slice(), t, &opts)?,
    };
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::SolverDivergence {
            t,
            detail: "non-finite entries".into(),
        });
    }
    Ok(TransientResult::new(b.grid.clone(), t, v))
}

fn taylor_action(a: &CsrMatrix, v0: &[f64], t: f64, opts: &TransientOptions) -> Result<RowDVector<f64>> {
    let n = a.nrows();
    let diag = a.diagonal();
    let mu = diag.iter().cloned().fold(0.0, f64::min);
    // || B - mu I ||_inf
    let norm = (0..n)
        .map(|i| {
            a.row(i)
                .map(|(j, v)| if i == j { (v - mu).abs() } else { v.abs() })
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    let steps = ((norm * t / opts.theta).ceil() as usize).max(1);
    let h = t / steps as f64;
    let decay = (mu * h).exp();
    let mut v = v0.to_vec();
    let mut term = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut acc = vec![0.0; n];
    for _ in 0..steps {
        acc.copy_from_slice(&v);
        term.copy_from_slice(&v);
        let mut converged = false;
        for k in 1..=opts.max_terms {
            a.vec_mul_into(&term, &mut next);
            let scale = h / k as f64;
            for (nx, tm) in next.iter_mut().zip(term.iter()) {
                *nx = (*nx - mu * tm) * scale;
            }
            std::mem::swap(&mut term, &mut next);
            let mut tn = 0.0;
            let mut an = 0.0;
            for (ac, tm) in acc.iter_mut().zip(term.iter()) {
                *ac += tm;
                tn += tm.abs();
                an += ac.abs();
            }
            if !tn.is_finite() {
                return Err(Error::SolverDivergence {
                    t,
                    detail: "Taylor term overflow".into(),
                });
            }
            if k as f64 > norm * h && tn <= opts.tol * an {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::SolverDivergence {
                t,
                detail: format!("Taylor series did not converge in {} terms", opts.max_terms),
            });
        }
        for (vi, ac) in v.iter_mut().zip(acc.iter()) {
            *vi = ac * decay;
        }
    }
    Ok(RowDVector::from_vec(v))
}

/// Checks that every state can reach and be reached from state 0 through
/// the nonzero pattern of `B`.
pub fn check_irreducible(b: &BlockGenerator) -> Result<()> {
    let n = b.dim();
    let mut fwd: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut bwd: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for (j, v) in b.matrix.row(i) {
            if i != j && v != 0.0 {
                fwd[i].push(j);
                bwd[j].push(i);
            }
        }
    }
    for (adj, dir) in [(&fwd, "reached from"), (&bwd, "reach")] {
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if let Some(bad) = seen.iter().position(|s| !s) {
            let (l, i, k) = b.grid.decode(bad)?;
            return Err(Error::Reducible(format!(
                "state (level {l}, phase {i}, n {k}) cannot {dir} state 0"
            )));
        }
    }
    Ok(())
}

/// Stationary row vector `pi B = 0, pi e = 1` by a dense LU solve.
pub fn stationary(b: &BlockGenerator) -> Result<RowDVector<f64>> {
    check_irreducible(b)?;
    let n = b.dim();
    let mut a = b.to_dense().transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let x = a.lu().solve(&rhs).ok_or(Error::SingularSolve)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSolve);
    }
    Ok(x.transpose())
}

/// Largest `|(pi B)_j|`.
pub fn stationary_residual(b: &BlockGenerator, pi: &RowDVector<f64>) -> f64 {
    b.matrix
        .vec_mul(pi.as_slice())
        .iter()
        .fold(0.0, |a, v| a.max(v.abs()))
}

/// Folded closing kernel `k(z) = (e^{Sz} + e^{S(2 delta - z)}) (I - e^{2 S delta})^{-1} s`
/// on `z in [0, delta]`, where `z` is the distance to the exit edge of the
/// cell, with a composite Gauss-Kronrod cache for the closing operator.
#[derive(Debug, Clone)]
pub struct ClosingKernel {
    s: DMatrix<f64>,
    delta: f64,
    e_delta: DMatrix<f64>,
    resolvent: DMatrix<f64>,
    rs: DVector<f64>,
    s_inv: DMatrix<f64>,
    panels: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// Kernel at the nodes, one column per node.
    values: DMatrix<f64>,
    /// `u(z) - u(2 delta - z)` at the nodes.
    odd_values: DMatrix<f64>,
    quad_error: f64,
}

const MAX_PANELS: usize = 4096;

impl ClosingKernel {
    pub fn new(dist: &MeDistribution) -> Result<Self> {
        Self::with_tolerance(dist, TOL_QUAD)
    }

    pub fn with_tolerance(dist: &MeDistribution, tol: f64) -> Result<Self> {
        let p = dist.order();
        let s = dist.generator().clone();
        let delta = dist.mean();
        let e_delta = mexp(&s, delta)?;
        let e_2delta = &e_delta * &e_delta;
        if !spectral_radius_below_one(&e_2delta) {
            return Err(Error::InvalidParameter(
                "spectral radius of e^{2 S delta} is not below one".into(),
            ));
        }
        let resolvent = (DMatrix::identity(p, p) - &e_2delta)
            .try_inverse()
            .ok_or(Error::SingularSolve)?;
        let rs = &resolvent * dist.exit();
        let s_inv = s.clone().try_inverse().ok_or(Error::SingularSolve)?;
        let mut kern = ClosingKernel {
            s,
            delta,
            e_delta,
            resolvent,
            rs,
            s_inv,
            panels: 0,
            nodes: Vec::new(),
            weights: Vec::new(),
            values: DMatrix::zeros(p, 0),
            odd_values: DMatrix::zeros(p, 0),
            quad_error: f64::INFINITY,
        };
        let mut panels = 8;
        loop {
            let err = kern.tabulate(panels)?;
            if err <= tol {
                break;
            }
            if panels >= MAX_PANELS {
                return Err(Error::QuadratureFailure {
                    estimate: err,
                    tolerance: tol,
                });
            }
            panels *= 2;
        }
        Ok(kern)
    }

    /// Fills the node cache with `panels` panels on `[0, delta]` and
    /// returns the Kronrod-Gauss error estimate over a few probe moments.
    fn tabulate(&mut self, panels: usize) -> Result<f64> {
        let p = self.s.nrows();
        let rule = gk15_rule();
        let h = self.delta / panels as f64;
        let step = mexp(&self.s, h)?;
        // u(z) = e^{Sz} R s on 2*panels panels covering [0, 2 delta]
        let mut cur: Vec<DVector<f64>> = rule
            .iter()
            .map(|&(x, _, _)| Ok(mexp(&self.s, 0.5 * h * (1.0 + x))? * &self.rs))
            .collect::<Result<_>>()?;
        let mut u: Vec<Vec<DVector<f64>>> = Vec::with_capacity(2 * panels);
        for _ in 0..2 * panels {
            let next = cur.iter().map(|c| &step * c).collect();
            u.push(std::mem::replace(&mut cur, next));
        }
        let count = 15 * panels;
        let mut nodes = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count);
        let mut gauss = Vec::with_capacity(count);
        let mut values = DMatrix::zeros(p, count);
        let mut odd_values = DMatrix::zeros(p, count);
        for m in 0..panels {
            for (q, &(x, wk, wg)) in rule.iter().enumerate() {
                let col = m * 15 + q;
                nodes.push(m as f64 * h + 0.5 * h * (1.0 + x));
                weights.push(0.5 * h * wk);
                gauss.push(0.5 * h * wg);
                let (near, far) = (&u[m][q], &u[2 * panels - 1 - m][14 - q]);
                values.set_column(col, &(near + far));
                odd_values.set_column(col, &(near - far));
            }
        }
        let mut err: f64 = 0.0;
        let probes: [&dyn Fn(f64) -> f64; 4] = [
            &|_| 1.0,
            &|w| w,
            &|w| w * w,
            &|w| (std::f64::consts::PI * w).cos(),
        ];
        for probe in probes {
            let mut diff = DVector::zeros(p);
            for col in 0..count {
                let f = probe(nodes[col] / self.delta);
                diff += values.column(col) * ((weights[col] - gauss[col]) * f);
            }
            err = err.max(diff.amax());
        }
        self.panels = panels;
        self.nodes = nodes;
        self.weights = weights;
        self.values = values;
        self.odd_values = odd_values;
        self.quad_error = err;
        Ok(err)
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn order(&self) -> usize {
        self.s.nrows()
    }

    pub fn panels(&self) -> usize {
        self.panels
    }

    pub fn quad_error(&self) -> f64 {
        self.quad_error
    }

    pub fn e_delta(&self) -> &DMatrix<f64> {
        &self.e_delta
    }

    pub fn resolvent(&self) -> &DMatrix<f64> {
        &self.resolvent
    }

    // the mean is computed, so a caller's delta may differ in the last bits
    fn check_z(&self, z: f64) -> Result<f64> {
        let slack = 1e-12 * self.delta;
        if !(z >= -slack && z <= self.delta + slack) {
            return Err(Error::InvalidParameter(format!("z = {z} outside [0, {}]", self.delta)));
        }
        Ok(z.clamp(0.0, self.delta))
    }

    /// `k(z)` evaluated directly.
    pub fn kernel(&self, z: f64) -> Result<DVector<f64>> {
        let z = self.check_z(z)?;
        Ok((mexp(&self.s, z)? + mexp(&self.s, 2.0 * self.delta - z)?) * &self.rs)
    }

    /// `W(z) = int_0^z k(w) dw`; `W(delta) = e`.
    pub fn cumulative(&self, z: f64) -> Result<DVector<f64>> {
        let z = self.check_z(z)?;
        let u = |w: f64| -> Result<DVector<f64>> { Ok(mexp(&self.s, w)? * &self.rs) };
        let inner = u(z)? - &self.rs + u(2.0 * self.delta)? - u(2.0 * self.delta - z)?;
        Ok(&self.s_inv * inner)
    }

    /// `k` and `W` on the uniform grid `z_m = m delta / steps`, `m = 0..=steps`.
    pub fn uniform_tables(&self, steps: usize) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        let h = self.delta / steps as f64;
        let step = mexp(&self.s, h)?;
        let mut u = Vec::with_capacity(2 * steps + 1);
        let mut cur = self.rs.clone();
        for _ in 0..=2 * steps {
            let next = &step * &cur;
            u.push(std::mem::replace(&mut cur, next));
        }
        let k = (0..=steps).map(|m| &u[m] + &u[2 * steps - m]).collect();
        let w = (0..=steps)
            .map(|m| &self.s_inv * (&u[m] - &u[0] + &u[2 * steps] - &u[2 * steps - m]))
            .collect();
        Ok((k, w))
    }

    /// `int_0^delta k(z) g(z) dz` on the cached nodes.
    pub fn integrate<G: Fn(f64) -> f64>(&self, g: G) -> DVector<f64> {
        let wf = DVector::from_iterator(
            self.nodes.len(),
            self.nodes.iter().zip(self.weights.iter()).map(|(&z, &w)| w * g(z)),
        );
        &self.values * wf
    }

    /// `int_0^delta (u(z) - u(2 delta - z)) g(z) dz`, the kernel produced by
    /// integrating `S V` by parts.
    pub fn integrate_odd<G: Fn(f64) -> f64>(&self, g: G) -> DVector<f64> {
        let wf = DVector::from_iterator(
            self.nodes.len(),
            self.nodes.iter().zip(self.weights.iter()).map(|(&z, &w)| w * g(z)),
        );
        &self.odd_values * wf
    }
}

/// Distance `z` from `x` to the exit edge of cell `level` for `phase`.
fn cell_coordinate(grid: &Grid, level: usize, phase: usize, x: f64) -> Result<f64> {
    if level == 0 || level > grid.cells() {
        return Err(Error::OutOfCell { level, phase, x });
    }
    let (lo, hi) = (grid.y(level), grid.y(level + 1));
    let tol = 1e-12 * grid.bound().max(1.0);
    if x < lo - tol || x > hi + tol {
        return Err(Error::OutOfCell { level, phase, x });
    }
    let z = if grid.is_plus(phase) { hi - x } else { x - lo };
    Ok(z.clamp(0.0, grid.delta()))
}

/// Reconstructed density of `(X(t), phi(t))` at `(x, phase)` inside cell `level`.
pub fn closing_density(
    res: &TransientResult,
    kern: &ClosingKernel,
    level: usize,
    phase: usize,
    x: f64,
) -> Result<f64> {
    let z = cell_coordinate(res.grid(), level, phase, x)?;
    let a = res.orbit_mass(level, phase)?;
    Ok((a * kern.kernel(z)?)[0])
}

/// Densities of every interior cell of `phase` on `points + 1` equally
/// spaced points per cell, as `(x, density)` pairs.
pub fn density_profile(
    res: &TransientResult,
    kern: &ClosingKernel,
    phase: usize,
    points: usize,
) -> Result<Vec<(f64, f64)>> {
    let grid = res.grid();
    let (k_tab, _) = kern.uniform_tables(points)?;
    let plus = grid.is_plus(phase);
    let h = grid.delta() / points as f64;
    let mut out = Vec::with_capacity(grid.cells() * (points + 1));
    for level in 1..=grid.cells() {
        let a = res.orbit_mass(level, phase)?;
        for m in 0..=points {
            let x = grid.y(level) + m as f64 * h;
            let z = if plus { points - m } else { m };
            out.push((x, (&a * &k_tab[z])[0]));
        }
    }
    Ok(out)
}

/// The closing operator `V f` in the working representation.
pub fn closing_apply(f: &TestFunction, kern: &ClosingKernel, grid: &Grid) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(grid.dim());
    for &j in grid.minus() {
        out[grid.index(0, j, 0)?] = f.value(0.0, j);
    }
    for &j in grid.plus() {
        out[grid.index(grid.cells() + 1, j, 0)?] = f.value(grid.bound(), j);
    }
    for (level, j) in grid.interior_blocks() {
        let v = closing_cell(f, kern, grid, level, j);
        let r = grid.block(level, j)?;
        out.rows_mut(r.start, r.len()).copy_from(&v);
    }
    Ok(out)
}

/// `V_{l,j} f` for one interior cell.
pub fn closing_cell(f: &TestFunction, kern: &ClosingKernel, grid: &Grid, level: usize, j: usize) -> DVector<f64> {
    if grid.is_plus(j) {
        let top = grid.y(level + 1);
        kern.integrate(|z| f.value(top - z, j))
    } else {
        let bottom = grid.y(level);
        kern.integrate(|z| f.value(bottom + z, j))
    }
}

/// Maps a working-representation column vector (for instance `V f` or
/// `B V f`) to residual-basis coordinates block by block.
pub fn to_residual_coordinates(grid: &Grid, basis: &ResidualBasis, x: &DVector<f64>) -> Result<DVector<f64>> {
    let mut out = x.clone();
    for (level, j) in grid.interior_blocks() {
        let r = grid.block(level, j)?;
        let mapped = basis.projector() * x.rows(r.start, r.len());
        out.rows_mut(r.start, r.len()).copy_from(&mapped);
    }
    Ok(out)
}

/// `P(X(t) in [a1, a2], phi(t) = phase)`: boundary atoms in the interval plus
/// the closed-form integral of the reconstructed density over each cell.
pub fn distribution_at(res: &TransientResult, kern: &ClosingKernel, a1: f64, a2: f64, phase: usize) -> Result<f64> {
    let grid = res.grid();
    let b = grid.bound();
    if !(0.0 <= a1 && a1 <= a2 && a2 <= b) {
        return Err(Error::BadInterval { a1, a2 });
    }
    if phase >= grid.phases() {
        return Err(Error::InvalidParameter(format!("phase {phase} out of range")));
    }
    let plus = grid.is_plus(phase);
    let mut total = 0.0;
    if !plus && a1 == 0.0 {
        total += res.level_mass(0, phase)?;
    }
    if plus && a2 == b {
        total += res.level_mass(grid.cells() + 1, phase)?;
    }
    for level in 1..=grid.cells() {
        let (y0, y1) = (grid.y(level), grid.y(level + 1));
        let lo = a1.max(y0);
        let hi = a2.min(y1);
        if lo >= hi {
            continue;
        }
        let a = res.orbit_mass(level, phase)?;
        let (z_lo, z_hi) = if plus { (y1 - hi, y1 - lo) } else { (lo - y0, hi - y0) };
        let delta = grid.delta();
        let w = kern.cumulative(z_hi.min(delta))? - kern.cumulative(z_lo.max(0.0))?;
        total += (a * w)[0];
    }
    Ok(total)
}

/// Distribution function on `points + 1` equally spaced points per cell,
/// as `(x, F(x))` pairs. With `phase = None` this is `P(X(t) <= x)`,
/// otherwise `P(X(t) <= x, phi(t) = phase)`. `F(0)` includes the atom at
/// zero and the last point includes the atom at `b`.
pub fn cdf_profile(res: &TransientResult, kern: &ClosingKernel, phase: Option<usize>, points: usize) -> Result<Vec<(f64, f64)>> {
    let grid = res.grid();
    if let Some(j) = phase {
        if j >= grid.phases() {
            return Err(Error::InvalidParameter(format!("phase {j} out of range")));
        }
    }
    let phases: Vec<usize> = match phase {
        Some(j) => vec![j],
        None => (0..grid.phases()).collect(),
    };
    let (_, w_tab) = kern.uniform_tables(points)?;
    let h = grid.delta() / points as f64;
    let mut out = Vec::with_capacity(grid.cells() * points + 1);
    let mut base = 0.0;
    for &j in &phases {
        if !grid.is_plus(j) {
            base += res.level_mass(0, j)?;
        }
    }
    out.push((0.0, base));
    for level in 1..=grid.cells() {
        let masses: Vec<(bool, RowDVector<f64>)> = phases
            .iter()
            .map(|&j| Ok((grid.is_plus(j), res.orbit_mass(level, j)?)))
            .collect::<Result<_>>()?;
        let total_cell: f64 = masses.iter().map(|(_, a)| a.sum()).sum();
        for m in 1..=points {
            let mut acc = 0.0;
            for (plus, a) in &masses {
                // mass in the first m/points of the cell
                acc += if *plus {
                    a.sum() - (a * &w_tab[points - m])[0]
                } else {
                    (a * &w_tab[m])[0]
                };
            }
            out.push((grid.y(level) + m as f64 * h, base + acc));
        }
        base += total_cell;
    }
    let mut upper = 0.0;
    for &j in &phases {
        if grid.is_plus(j) {
            upper += res.level_mass(grid.cells() + 1, j)?;
        }
    }
    if let Some(last) = out.last_mut() {
        last.1 = base + upper;
    }
    Ok(out)
}

/// `a e^{S |c_i| dt}` normalized to unit mass.
pub fn orbit_step(a: &RowDVector<f64>, basis: &ResidualBasis, m: &FluidModel, phase: usize, dt: f64) -> Result<RowDVector<f64>> {
    if dt < 0.0 {
        return Err(Error::NegativeArgument(dt));
    }
    let speed = m.rates()[phase].abs();
    let next = a * mexp(basis.base().generator(), speed * dt)?;
    let mass = next.sum();
    if !(mass.abs() >= 1e-300) {
        return Err(Error::NormalizationUnderflow(mass));
    }
    Ok(next / mass)
}

/// A complete scheme: model, basis, grid, generator and closing kernel.
#[derive(Debug, Clone)]
pub struct Scheme {
    model: FluidModel,
    basis: ResidualBasis,
    generator: BlockGenerator,
    kernel: ClosingKernel,
}

impl Scheme {
    /// `dist` must have mean `b / k`.
    pub fn new(model: FluidModel, basis: ResidualBasis, k: usize) -> Result<Self> {
        let delta = model.bound() / k as f64;
        if (basis.delta() - delta).abs() > 1e-9 * delta {
            return Err(Error::InvalidParameter(format!(
                "distribution mean {} does not match the cell width {delta}",
                basis.delta()
            )));
        }
        let generator = build_generator(&model, &basis, k)?;
        let kernel = ClosingKernel::new(basis.base())?;
        Ok(Scheme {
            model,
            basis,
            generator,
            kernel,
        })
    }

    /// Scheme with a user supplied jump matrix (used for fault injection).
    pub fn with_jump(model: FluidModel, basis: ResidualBasis, d: JumpMatrixD, k: usize) -> Result<Self> {
        let generator = assemble_generator(&model, basis.base(), d, k)?;
        let kernel = ClosingKernel::new(basis.base())?;
        Ok(Scheme {
            model,
            basis,
            generator,
            kernel,
        })
    }

    pub fn model(&self) -> &FluidModel {
        &self.model
    }

    pub fn basis(&self) -> &ResidualBasis {
        &self.basis
    }

    pub fn grid(&self) -> &Grid {
        self.generator.grid()
    }

    pub fn generator(&self) -> &BlockGenerator {
        &self.generator
    }

    pub fn kernel(&self) -> &ClosingKernel {
        &self.kernel
    }

    pub fn initial_vector(&self, x0: f64, i0: usize) -> Result<RowDVector<f64>> {
        initial_vector(self.grid(), &self.basis, x0, i0)
    }

    pub fn transient(&self, x0: f64, i0: usize, t: f64) -> Result<TransientResult> {
        transient(&self.generator, &self.initial_vector(x0, i0)?, t)
    }

    pub fn transient_with(&self, x0: f64, i0: usize, t: f64, opts: TransientOptions) -> Result<TransientResult> {
        transient_with(&self.generator, &self.initial_vector(x0, i0)?, t, opts)
    }

    pub fn stationary(&self) -> Result<TransientResult> {
        let pi = stationary(&self.generator)?;
        Ok(TransientResult::new(self.grid().clone(), f64::INFINITY, pi))
    }

    pub fn closing_apply(&self, f: &TestFunction) -> Result<DVector<f64>> {
        closing_apply(f, &self.kernel, self.grid())
    }

    pub fn distribution_at(&self, res: &TransientResult, a1: f64, a2: f64, phase: usize) -> Result<f64> {
        distribution_at(res, &self.kernel, a1, a2, phase)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluidq::model_new;
    use crate::medist::{erlang, EpsilonPolicy};

    fn two_phase(b: f64) -> FluidModel {
        model_new(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]), vec![1.0, -1.0], b).unwrap()
    }

    fn basis(order: usize, mean: f64) -> ResidualBasis {
        let d = erlang(order, mean).unwrap();
        let eps = EpsilonPolicy::Auto.resolve(&d).unwrap();
        ResidualBasis::build(d, eps).unwrap()
    }

    #[test]
    fn grid_index_is_bijective() {
        let m = model_new(
            DMatrix::from_row_slice(3, 3, &[-2.0, 1.0, 1.0, 1.0, -1.0, 0.0, 0.5, 0.5, -1.0]),
            vec![-1.0, 2.0, 0.5],
            1.0,
        )
        .unwrap();
        let g = Grid::new(&m, 3, 4).unwrap();
        assert_eq!(g.dim(), 1 + 3 * 3 * 4 + 2);
        let mut seen = vec![false; g.dim()];
        for idx in 0..g.dim() {
            let (l, i, n) = g.decode(idx).unwrap();
            assert_eq!(g.index(l, i, n).unwrap(), idx);
            seen[idx] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert!(g.index(0, 1, 0).is_err());
        assert!(g.index(4, 0, 0).is_err());
        assert!((g.y(4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_dimension() {
        let g = Grid::new(&two_phase(1.0), 1, 3).unwrap();
        assert_eq!(g.dim(), 8);
    }

    #[test]
    fn d_for_exponential_is_one() {
        let d = build_d(&basis(1, 1.0)).unwrap();
        assert!((d.d[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn d_rows_sum_to_one() {
        for order in [2, 4, 16] {
            let d = build_d(&basis(order, 0.25)).unwrap();
            let rs = &d.d * ones(order);
            assert!((rs - ones(order)).amax() < 1e-10, "order {order}");
            assert!(d.d.iter().all(|&v| v >= -1e-14));
        }
    }

    #[test]
    fn generator_rows_sum_to_zero() {
        let m = two_phase(1.0);
        for (order, k) in [(1, 1), (1, 4), (4, 1), (4, 3), (16, 4)] {
            let g = build_generator(&m, &basis(order, 1.0 / k as f64), k).unwrap();
            assert!(g.conservation_residual() < 1e-10, "order {order} K {k}");
            assert!(g.min_off_diagonal() >= -1e-12);
        }
    }

    #[test]
    fn exponential_generator_is_ctmc() {
        let m = two_phase(1.0);
        let g = build_generator(&m, &basis(1, 0.5), 2).unwrap();
        let dense = g.to_dense();
        // level 1 positive phase moves up at rate c / delta = 2
        let up = dense[(g.grid().index(1, 0, 0).unwrap(), g.grid().index(2, 0, 0).unwrap())];
        assert!((up - 2.0).abs() < 1e-12);
        // level 2 positive phase hits the boundary
        let hit = dense[(g.grid().index(2, 0, 0).unwrap(), g.grid().index(3, 0, 0).unwrap())];
        assert!((hit - 2.0).abs() < 1e-12);
    }

    #[test]
    fn initial_vector_cases() {
        let m = two_phase(1.0);
        let bs = basis(4, 0.25);
        let g = Grid::new(&m, 4, 4).unwrap();
        let t = bs.t_points().to_vec();
        assert_eq!(initial_state(&g, &t, 0.0, 1).unwrap(), (0, 0));
        assert_eq!(initial_state(&g, &t, 1.0, 0).unwrap(), (5, 0));
        assert_eq!(initial_state(&g, &t, g.y(2) + t[2], 0).unwrap(), (2, 2));
        assert_eq!(initial_state(&g, &t, 0.25, 0).unwrap(), (2, 0));
        assert_eq!(initial_state(&g, &t, 0.25, 1).unwrap(), (1, 0));
        assert_eq!(initial_state(&g, &t, 0.0, 0).unwrap(), (1, 0));
        assert!(matches!(initial_state(&g, &t, 1.5, 0), Err(Error::InadmissibleStart(_))));
        let v = initial_vector(&g, &bs, 0.3, 0).unwrap();
        assert!((v.sum() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn transient_taylor_matches_dense() {
        let m = two_phase(1.0);
        let g = build_generator(&m, &basis(4, 0.25), 4).unwrap();
        let v0 = initial_vector(g.grid(), &basis(4, 0.25), 0.5, 0).unwrap();
        for &t in &[0.0, 0.3, 2.0] {
            let a = transient(&g, &v0, t).unwrap();
            let dense = TransientOptions {
                solver: TransientSolver::Dense,
                ..Default::default()
            };
            let b = transient_with(&g, &v0, t, dense).unwrap();
            assert!((&a.v - &b.v).amax() < 1e-12, "t = {t}");
            assert!((a.total_mass() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_symmetric_model() {
        let m = two_phase(1.0);
        let g = build_generator(&m, &basis(1, 0.25), 4).unwrap();
        let pi = stationary(&g).unwrap();
        assert!(stationary_residual(&g, &pi) < 1e-10);
        let lower = pi[g.grid().index(0, 1, 0).unwrap()];
        let upper = pi[g.grid().index(5, 0, 0).unwrap()];
        assert!((lower - upper).abs() < 1e-12);
        let v0 = initial_vector(g.grid(), &basis(1, 0.25), 0.0, 1).unwrap();
        let far = transient(&g, &v0, 200.0).unwrap();
        assert!((far.v - pi).amax() < 1e-6);
    }

    #[test]
    fn kernel_scalar_formula() {
        let kern = ClosingKernel::new(&erlang(1, 0.5).unwrap()).unwrap();
        let lam: f64 = 2.0;
        let delta = 0.5;
        for &z in &[0.0, 0.1, 0.37, 0.5] {
            let want = lam * ((-lam * z).exp() + (-lam * (2.0 * delta - z)).exp()) / (1.0 - (-2.0 * lam * delta).exp());
            assert!((kern.kernel(z).unwrap()[0] - want).abs() < 1e-13);
        }
    }

    #[test]
    fn kernel_integrates_to_one() {
        for order in [1, 4, 16, 64] {
            let kern = ClosingKernel::new(&erlang(order, 0.25).unwrap()).unwrap();
            let total = kern.integrate(|_| 1.0);
            assert!((total - ones(order)).amax() < 1e-10, "order {order}");
            assert!((kern.cumulative(0.25).unwrap() - ones(order)).amax() < 1e-10);
            let (k_tab, w_tab) = kern.uniform_tables(50).unwrap();
            let mid = kern.cumulative(0.1).unwrap();
            assert!((&w_tab[20] - mid).amax() < 1e-10);
            assert!((&k_tab[20] - kern.kernel(0.1).unwrap()).amax() < 1e-9);
        }
    }

    #[test]
    fn orbit_step_semigroup() {
        let m = two_phase(1.0);
        let bs = basis(4, 1.0);
        let a = bs.base().alpha().clone();
        assert_eq!(orbit_step(&a, &bs, &m, 0, 0.0).unwrap(), a);
        let two = orbit_step(&orbit_step(&a, &bs, &m, 0, 0.2).unwrap(), &bs, &m, 0, 0.3).unwrap();
        let one = orbit_step(&a, &bs, &m, 0, 0.5).unwrap();
        assert!((two - one).amax() < 1e-13);
    }
}
