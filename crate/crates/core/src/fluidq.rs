//! Bounded fluid queue with regulated boundaries: model validation, the
//! exact generator on smooth test functions, the phase marginal and an
//! event-driven Monte Carlo simulator.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{expm, unit_row};

const TOL_ROW_SUM: f64 = 1e-12;

/// A fluid queue on `[0, b]` modulated by a CTMC with generator `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidModel {
    t: DMatrix<f64>,
    c: Vec<f64>,
    b: f64,
    plus: Vec<usize>,
    minus: Vec<usize>,
}

/// Plain serializable form `{ "T": [[..]], "c": [..], "b": .. }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(rename = "T")]
    pub t: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub b: f64,
}

impl FluidModel {
    pub fn new(t: DMatrix<f64>, c: Vec<f64>, b: f64) -> Result<Self> {
        if !t.is_square() {
            return Err(Error::NonSquareMatrix {
                rows: t.nrows(),
                cols: t.ncols(),
            });
        }
        let n = t.nrows();
        if c.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "T is {n}x{n} but c has {} entries",
                c.len()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                if i != j && !(t[(i, j)] >= 0.0) {
                    return Err(Error::BadGenerator(format!("T[{i}][{j}] = {} is negative", t[(i, j)])));
                }
            }
            let sum: f64 = t.row(i).sum();
            if !(sum.abs() <= TOL_ROW_SUM) {
                return Err(Error::BadGenerator(format!("row {i} sums to {sum:e}")));
            }
        }
        for (i, &ci) in c.iter().enumerate() {
            if ci == 0.0 {
                return Err(Error::ZeroRate { phase: i });
            }
            if !ci.is_finite() {
                return Err(Error::InvalidParameter(format!("c[{i}] = {ci}")));
            }
        }
        if !(b > 0.0) || !b.is_finite() {
            return Err(Error::NonpositiveBound(b));
        }
        let plus = (0..n).filter(|&i| c[i] > 0.0).collect();
        let minus = (0..n).filter(|&i| c[i] < 0.0).collect();
        Ok(FluidModel { t, c, b, plus, minus })
    }

    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        let n = spec.t.len();
        let mut flat = Vec::with_capacity(n * n);
        for (i, row) in spec.t.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} of T has {} entries, expected {n}",
                    row.len()
                )));
            }
            flat.extend_from_slice(row);
        }
        Self::new(DMatrix::from_row_slice(n, n, &flat), spec.c.clone(), spec.b)
    }

    pub fn to_spec(&self) -> ModelSpec {
        ModelSpec {
            t: (0..self.phases()).map(|i| self.t.row(i).iter().copied().collect()).collect(),
            c: self.c.clone(),
            b: self.b,
        }
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn rates(&self) -> &[f64] {
        &self.c
    }

    pub fn bound(&self) -> f64 {
        self.b
    }

    pub fn phases(&self) -> usize {
        self.c.len()
    }

    /// Phases with positive rate, ascending.
    pub fn plus(&self) -> &[usize] {
        &self.plus
    }

    /// Phases with negative rate, ascending.
    pub fn minus(&self) -> &[usize] {
        &self.minus
    }

    pub fn is_plus(&self, i: usize) -> bool {
        self.c[i] > 0.0
    }

    fn sub(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |a, b| self.t[(rows[a], cols[b])])
    }

    pub fn t_pp(&self) -> DMatrix<f64> {
        self.sub(&self.plus, &self.plus)
    }

    pub fn t_pm(&self) -> DMatrix<f64> {
        self.sub(&self.plus, &self.minus)
    }

    pub fn t_mp(&self) -> DMatrix<f64> {
        self.sub(&self.minus, &self.plus)
    }

    pub fn t_mm(&self) -> DMatrix<f64> {
        self.sub(&self.minus, &self.minus)
    }

    /// `diag(|c_i|)` over the positive phases.
    pub fn c_plus(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(self.plus.len(), self.plus.iter().map(|&i| self.c[i])))
    }

    /// `diag(|c_i|)` over the negative phases.
    pub fn c_minus(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.minus.len(),
            self.minus.iter().map(|&i| -self.c[i]),
        ))
    }
}

/// Model constructor, see [`FluidModel::new`].
pub fn model_new(t: DMatrix<f64>, c: Vec<f64>, b: f64) -> Result<FluidModel> {
    FluidModel::new(t, c, b)
}

type PhaseFn = Arc<dyn Fn(f64, usize) -> f64 + Send + Sync>;

/// A test function `f(x, i)` with its derivative and declared constants:
/// `G >= sup|f|`, `L` a Lipschitz constant of `f` in `x`, `G' >= sup|f_x|`,
/// `L'` a Lipschitz constant of `f_x`.
#[derive(Clone)]
pub struct TestFunction {
    name: String,
    f: PhaseFn,
    fx: PhaseFn,
    pub g: f64,
    pub l: f64,
    pub g_prime: f64,
    pub l_prime: f64,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("name", &self.name)
            .field("g", &self.g)
            .field("l", &self.l)
            .field("g_prime", &self.g_prime)
            .field("l_prime", &self.l_prime)
            .finish()
    }
}

fn phase_weight(i: usize) -> f64 {
    1.0 / (1.0 + i as f64)
}

impl TestFunction {
    pub fn custom<F, D>(name: &str, f: F, fx: D, g: f64, l: f64, g_prime: f64, l_prime: f64) -> Self
    where
        F: Fn(f64, usize) -> f64 + Send + Sync + 'static,
        D: Fn(f64, usize) -> f64 + Send + Sync + 'static,
    {
        TestFunction {
            name: name.to_string(),
            f: Arc::new(f),
            fx: Arc::new(fx),
            g,
            l,
            g_prime,
            l_prime,
        }
    }

    /// `f(x, i) = value`.
    pub fn constant(value: f64) -> Self {
        Self::custom("constant", move |_, _| value, |_, _| 0.0, value.abs(), 0.0, 0.0, 0.0)
    }

    /// `f(x, i) = x / (1 + i)`.
    pub fn linear(b: f64) -> Self {
        Self::custom(
            "linear",
            |x, i| x * phase_weight(i),
            |_, i| phase_weight(i),
            b,
            1.0,
            1.0,
            0.0,
        )
    }

    /// `f(x, i) = (x/b)^3 / (1 + i)`.
    pub fn cubic(b: f64) -> Self {
        Self::custom(
            "cubic",
            move |x, i| (x / b).powi(3) * phase_weight(i),
            move |x, i| 3.0 * x * x / (b * b * b) * phase_weight(i),
            1.0,
            3.0 / b,
            3.0 / b,
            6.0 / (b * b),
        )
    }

    /// `f(x, i) = sin(2 pi x / b) / (1 + i)`.
    pub fn sine(b: f64) -> Self {
        let w = 2.0 * std::f64::consts::PI / b;
        Self::custom(
            "sine",
            move |x, i| (w * x).sin() * phase_weight(i),
            move |x, i| w * (w * x).cos() * phase_weight(i),
            1.0,
            w,
            w,
            w * w,
        )
    }

    /// Constants, linear, cubic and sine on `[0, b]`.
    pub fn corpus(b: f64) -> Vec<TestFunction> {
        vec![
            Self::constant(1.5),
            Self::linear(b),
            Self::cubic(b),
            Self::sine(b),
        ]
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self, x: f64, i: usize) -> f64 {
        (self.f)(x, i)
    }

    pub fn derivative(&self, x: f64, i: usize) -> f64 {
        (self.fx)(x, i)
    }

    /// The derivative as a test function in its own right (constants are
    /// not known and set to infinity).
    pub fn derivative_fn(&self) -> TestFunction {
        let fx = self.fx.clone();
        TestFunction {
            name: format!("d/dx {}", self.name),
            f: fx,
            fx: Arc::new(|_, _| f64::NAN),
            g: self.g_prime,
            l: self.l_prime,
            g_prime: f64::INFINITY,
            l_prime: f64::INFINITY,
        }
    }
}

/// `(B f)(x, i)`: `sum_j T_ij f(x, j) + c_i f_x(x, i)` in the interior and
/// at boundary points where the phase pushes away from the boundary; the
/// drift term is dropped at `x = 0, i in N` and `x = b, i in P`.
pub fn fluid_generator_apply(m: &FluidModel, f: &TestFunction, x: f64, i: usize) -> Result<f64> {
    if i >= m.phases() || !(0.0..=m.bound()).contains(&x) {
        return Err(Error::OutOfDomain { x, phase: i });
    }
    let jump: f64 = (0..m.phases()).map(|j| m.t[(i, j)] * f.value(x, j)).sum();
    let held = (x == 0.0 && m.c[i] < 0.0) || (x == m.bound() && m.c[i] > 0.0);
    if held {
        Ok(jump)
    } else {
        Ok(jump + m.c[i] * f.derivative(x, i))
    }
}

/// `e_{i0} e^{T t}`.
pub fn ctmc_marginal(m: &FluidModel, i0: usize, t: f64) -> Result<RowDVector<f64>> {
    if i0 >= m.phases() {
        return Err(Error::InvalidParameter(format!("phase {i0} out of range")));
    }
    if t < 0.0 {
        return Err(Error::NegativeArgument(t));
    }
    Ok(unit_row(m.phases(), i0) * expm(&(&m.t * t))?)
}

/// Stationary distribution of the phase process.
pub fn phase_stationary(m: &FluidModel) -> Result<RowDVector<f64>> {
    let n = m.phases();
    let mut a = m.t.transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let x = a.lu().solve(&rhs).ok_or(Error::SingularSolve)?;
    Ok(x.transpose())
}

/// One event of a simulated path: the state just after time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub t: f64,
    pub x: f64,
    pub phase: usize,
}

fn check_start(m: &FluidModel, x0: f64, i0: usize) -> Result<()> {
    if i0 >= m.phases() || !(0.0..=m.bound()).contains(&x0) {
        return Err(Error::OutOfDomain { x: x0, phase: i0 });
    }
    Ok(())
}

fn advance(m: &FluidModel, x: f64, i: usize, dt: f64) -> f64 {
    (x + m.c[i] * dt).clamp(0.0, m.bound())
}

fn simulate_with<R: Rng>(
    m: &FluidModel,
    x0: f64,
    i0: usize,
    t: f64,
    rng: &mut R,
    mut trace: Option<&mut Vec<TracePoint>>,
) -> (f64, usize) {
    let mut now = 0.0;
    let mut x = x0;
    let mut i = i0;
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(TracePoint { t: 0.0, x, phase: i });
    }
    loop {
        let rate = -m.t[(i, i)];
        let hold = if rate > 0.0 {
            Exp::new(rate).expect("positive rate").sample(rng)
        } else {
            f64::INFINITY
        };
        if now + hold >= t {
            x = advance(m, x, i, t - now);
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(TracePoint { t, x, phase: i });
            }
            return (x, i);
        }
        now += hold;
        x = advance(m, x, i, hold);
        let mut u = rng.gen::<f64>() * rate;
        let mut next = i;
        for j in 0..m.phases() {
            if j == i {
                continue;
            }
            next = j;
            u -= m.t[(i, j)];
            if u < 0.0 {
                break;
            }
        }
        i = next;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(TracePoint { t: now, x, phase: i });
        }
    }
}

fn replication_rng(seed: u64, replication: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication);
    rng
}

/// `(X(t), phi(t))` for one path started at `(x0, i0)`.
pub fn simulate(m: &FluidModel, x0: f64, i0: usize, t: f64, seed: u64) -> Result<(f64, usize)> {
    check_start(m, x0, i0)?;
    if t < 0.0 {
        return Err(Error::NegativeArgument(t));
    }
    let mut rng = replication_rng(seed, 0);
    Ok(simulate_with(m, x0, i0, t, &mut rng, None))
}

/// Path of one replication, one point per phase change plus the endpoints.
pub fn simulate_trace(m: &FluidModel, x0: f64, i0: usize, t: f64, seed: u64) -> Result<Vec<TracePoint>> {
    check_start(m, x0, i0)?;
    if t < 0.0 {
        return Err(Error::NegativeArgument(t));
    }
    let mut rng = replication_rng(seed, 0);
    let mut out = Vec::new();
    simulate_with(m, x0, i0, t, &mut rng, Some(&mut out));
    Ok(out)
}

pub fn write_trace_csv<W: Write>(out: &mut W, trace: &[TracePoint]) -> Result<()> {
    writeln!(out, "# schema=1")?;
    writeln!(out, "t,X,phi")?;
    for p in trace {
        writeln!(out, "{},{},{}", p.t, p.x, p.phase)?;
    }
    Ok(())
}

/// `n` independent endpoints; replication `r` uses stream `r` of `seed`,
/// so results do not depend on the number of worker threads.
pub fn simulate_many(m: &FluidModel, x0: f64, i0: usize, t: f64, n: usize, seed: u64) -> Result<Vec<(f64, usize)>> {
    check_start(m, x0, i0)?;
    if t < 0.0 {
        return Err(Error::NegativeArgument(t));
    }
    let workers = std::thread::available_parallelism().map(|v| v.get()).unwrap_or(1).min(16);
    let chunk = n.div_ceil(workers.max(1)).max(1);
    let mut out = vec![(0.0, 0usize); n];
    std::thread::scope(|scope| {
        for (w, slot) in out.chunks_mut(chunk).enumerate() {
            scope.spawn(move || {
                for (k, cell) in slot.iter_mut().enumerate() {
                    let r = (w * chunk + k) as u64;
                    let mut rng = replication_rng(seed, r);
                    *cell = simulate_with(m, x0, i0, t, &mut rng, None);
                }
            });
        }
    });
    Ok(out)
}

/// Empirical distribution function of a sample.
#[derive(Debug, Clone)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(mut sample: Vec<f64>) -> Self {
        sample.sort_by(f64::total_cmp);
        EmpiricalCdf { sorted: sample }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Fraction of the sample `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        self.sorted.partition_point(|&v| v <= x) as f64 / self.sorted.len() as f64
    }

    /// Fraction of the sample `< x`.
    pub fn eval_left(&self, x: f64) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        self.sorted.partition_point(|&v| v < x) as f64 / self.sorted.len() as f64
    }

    pub fn sample(&self) -> &[f64] {
        &self.sorted
    }
}

/// Half-width of the Dvoretzky-Kiefer-Wolfowitz band at confidence
/// `1 - alpha` for `n` observations.
pub fn dkw_epsilon(n: usize, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / (2.0 * n as f64)).sqrt()
}
