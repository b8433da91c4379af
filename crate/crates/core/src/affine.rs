//! Affine coefficient structure: `b(s, x) = b⁰(s) + B(s)x` and
//! `a(s, x) = A⁰(s) + Σ_i A^i(s) x_i`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

const PSD_TOLERANCE: f64 = -1e-10;

/// Linear interpolation through `(times, values)`, flat outside the knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct LinearCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// Step function: `levels[i]` holds on `[breaks[i-1], breaks[i])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct StepCurve {
    pub breaks: Vec<f64>,
    pub levels: Vec<f64>,
}

/// Scalar term structure on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(untagged)]
pub enum TimeFunction {
    Constant(f64),
    Linear(LinearCurve),
    PiecewiseConstant(StepCurve),
    /// `scale · Π factors`, built internally for coefficient products.
    #[serde(skip)]
    #[schemars(skip)]
    Product {
        factors: Vec<TimeFunction>,
        scale: f64,
    },
}

impl From<f64> for TimeFunction {
    fn from(v: f64) -> Self {
        Self::Constant(v)
    }
}

impl TimeFunction {
    pub fn linear(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let f = Self::Linear(LinearCurve { times, values });
        f.validate()?;
        Ok(f)
    }

    pub fn piecewise_constant(breaks: Vec<f64>, levels: Vec<f64>) -> Result<Self> {
        let f = Self::PiecewiseConstant(StepCurve { breaks, levels });
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let increasing = |t: &[f64]| t.windows(2).all(|w| w[0] < w[1]);
        match self {
            Self::Constant(v) if !v.is_finite() => {
                Err(Error::Validation(format!("non-finite constant {v}")))
            }
            Self::Constant(_) => Ok(()),
            Self::Linear(c) => {
                if c.times.is_empty() || c.times.len() != c.values.len() {
                    return Err(Error::Validation(
                        "linear curve needs equally many (>= 1) times and values".into(),
                    ));
                }
                if !increasing(&c.times) || c.values.iter().chain(&c.times).any(|v| !v.is_finite())
                {
                    return Err(Error::Validation(
                        "linear curve needs finite values at strictly increasing times".into(),
                    ));
                }
                Ok(())
            }
            Self::PiecewiseConstant(c) => {
                if c.levels.len() != c.breaks.len() + 1 {
                    return Err(Error::Validation(
                        "step curve needs one more level than breaks".into(),
                    ));
                }
                if !increasing(&c.breaks) || c.levels.iter().chain(&c.breaks).any(|v| !v.is_finite())
                {
                    return Err(Error::Validation(
                        "step curve needs finite levels and strictly increasing breaks".into(),
                    ));
                }
                Ok(())
            }
            Self::Product { factors, scale } => {
                if !scale.is_finite() {
                    return Err(Error::Validation(format!("non-finite scale {scale}")));
                }
                factors.iter().try_for_each(Self::validate)
            }
        }
    }

    pub fn product(factors: Vec<TimeFunction>, scale: f64) -> Self {
        if let Some(v) = factors
            .iter()
            .map(|f| match f {
                Self::Constant(v) => Some(*v),
                _ => None,
            })
            .try_fold(scale, |acc, v| v.map(|v| acc * v))
        {
            return Self::Constant(v);
        }
        Self::Product { factors, scale }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Self::Constant(v) => *v,
            Self::Linear(c) => {
                let i = c.times.partition_point(|&x| x <= t);
                if i == 0 {
                    c.values[0]
                } else if i == c.times.len() {
                    c.values[i - 1]
                } else {
                    let (t0, t1) = (c.times[i - 1], c.times[i]);
                    let w = (t - t0) / (t1 - t0);
                    c.values[i - 1] * (1.0 - w) + c.values[i] * w
                }
            }
            Self::PiecewiseConstant(c) => c.levels[c.breaks.partition_point(|&x| x <= t)],
            Self::Product { factors, scale } => factors.iter().fold(*scale, |acc, f| acc * f.eval(t)),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Self::Constant(_))
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::Constant(0.0)
    }

    pub fn is_piecewise_constant(&self) -> bool {
        match self {
            Self::PiecewiseConstant(_) => true,
            Self::Product { factors, .. } => factors.iter().any(Self::is_piecewise_constant),
            _ => false,
        }
    }

    /// Continuous version on the grid: step curves are sampled at the nodes
    /// and joined linearly, so each jump becomes a ramp over one step.
    pub fn regularized(&self, grid: &TimeGrid) -> Self {
        match self {
            Self::PiecewiseConstant(_) => {
                let times = grid.times();
                let values = times.iter().map(|&t| self.eval(t)).collect();
                Self::Linear(LinearCurve { times, values })
            }
            Self::Product { factors, scale } => Self::Product {
                factors: factors.iter().map(|f| f.regularized(grid)).collect(),
                scale: *scale,
            },
            other => other.clone(),
        }
    }

    pub fn sup_abs(&self) -> f64 {
        match self {
            Self::Constant(v) => v.abs(),
            Self::Linear(c) => c.values.iter().fold(0.0, |m, v| m.max(v.abs())),
            Self::PiecewiseConstant(c) => c.levels.iter().fold(0.0, |m, v| m.max(v.abs())),
            Self::Product { factors, scale } => {
                factors.iter().fold(scale.abs(), |m, f| m * f.sup_abs())
            }
        }
    }

    /// Lower bound of the curve on `[0, T]`.
    pub fn inf(&self) -> f64 {
        match self {
            Self::Constant(v) => *v,
            Self::Linear(c) => c.values.iter().copied().fold(f64::INFINITY, f64::min),
            Self::PiecewiseConstant(c) => c.levels.iter().copied().fold(f64::INFINITY, f64::min),
            Self::Product { factors, scale } => {
                if *scale >= 0.0 && factors.iter().all(|f| f.inf() >= 0.0) {
                    factors.iter().fold(*scale, |m, f| m * f.inf())
                } else {
                    -self.sup_abs()
                }
            }
        }
    }

    pub fn sample(&self, grid: &TimeGrid) -> Vec<f64> {
        grid.times().into_iter().map(|t| self.eval(t)).collect()
    }

    /// Stable bit-level fingerprint for cache keys.
    pub fn fingerprint(&self, out: &mut Vec<u64>) {
        match self {
            Self::Constant(v) => {
                out.push(0);
                out.push(v.to_bits());
            }
            Self::Linear(c) => {
                out.push(1);
                out.push(c.times.len() as u64);
                out.extend(c.times.iter().chain(&c.values).map(|v| v.to_bits()));
            }
            Self::PiecewiseConstant(c) => {
                out.push(2);
                out.push(c.breaks.len() as u64);
                out.extend(c.breaks.iter().chain(&c.levels).map(|v| v.to_bits()));
            }
            Self::Product { factors, scale } => {
                out.push(3);
                out.push(scale.to_bits());
                out.push(factors.len() as u64);
                for f in factors {
                    f.fingerprint(out);
                }
            }
        }
    }
}

/// Complex term structure `re(t) + i im(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ComplexCurve {
    pub re: TimeFunction,
    #[serde(default = "zero_curve")]
    pub im: TimeFunction,
}

fn zero_curve() -> TimeFunction {
    TimeFunction::Constant(0.0)
}

impl ComplexCurve {
    pub fn zero() -> Self {
        Self {
            re: zero_curve(),
            im: zero_curve(),
        }
    }

    pub fn real(re: TimeFunction) -> Self {
        Self { re, im: zero_curve() }
    }

    pub fn constant(v: Complex64) -> Self {
        Self {
            re: TimeFunction::Constant(v.re),
            im: TimeFunction::Constant(v.im),
        }
    }

    pub fn eval(&self, t: f64) -> Complex64 {
        Complex64::new(self.re.eval(t), self.im.eval(t))
    }

    pub fn is_zero(&self) -> bool {
        self.re.is_zero() && self.im.is_zero()
    }

    pub fn fingerprint(&self, out: &mut Vec<u64>) {
        self.re.fingerprint(out);
        self.im.fingerprint(out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum StateSpace {
    /// `ℝ^d`
    Real,
    /// `ℝ × [0, ∞)^{d-1}`
    HalfLine,
    /// `[0, ∞)^d`
    Orthant,
}

impl StateSpace {
    pub fn is_constrained(&self, component: usize) -> bool {
        match self {
            Self::Real => false,
            Self::HalfLine => component > 0,
            Self::Orthant => true,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, &v)| !self.is_constrained(i) || v >= 0.0)
    }

    /// Componentwise positive part on the constrained coordinates.
    pub fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            if self.is_constrained(i) && *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// How `σ` is obtained from `a`.
#[derive(Debug, Clone, PartialEq)]
pub enum SigmaKind {
    /// Symmetric PSD square root of `a(s, x)`.
    Generic,
    /// `[[η√(1-ρ²), ηρ], [0, σ̄]] √(x₂⁺)`.
    Heston {
        eta: TimeFunction,
        rho: f64,
        sigma_bar: TimeFunction,
    },
}

/// Coefficients frozen at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSample {
    pub b0: DVector<f64>,
    pub b: DMatrix<f64>,
    /// `A⁰, A¹, …, A^d`.
    pub a: Vec<DMatrix<f64>>,
}

impl CoefficientSample {
    pub fn dim(&self) -> usize {
        self.b0.len()
    }

    pub fn drift(&self, x: &[f64]) -> DVector<f64> {
        &self.b0 + &self.b * DVector::from_column_slice(x)
    }

    pub fn diffusion_squared(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = self.a[0].clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                m += &self.a[i + 1] * xi;
            }
        }
        m
    }

    /// `(v A¹ vᵀ, …, v A^d vᵀ)` with the plain transpose.
    pub fn quadratic_form(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.a[1..].iter().map(|m| bilinear(v, m)).collect()
    }

    /// `v A⁰ vᵀ`.
    pub fn constant_quadratic(&self, v: &[Complex64]) -> Complex64 {
        bilinear(v, &self.a[0])
    }

    /// `v B` for a row vector `v`.
    pub fn row_times_b(&self, v: &[Complex64]) -> Vec<Complex64> {
        let d = self.dim();
        (0..d)
            .map(|j| (0..d).map(|i| v[i] * self.b[(i, j)]).sum())
            .collect()
    }

    /// `v b⁰`.
    pub fn row_times_b0(&self, v: &[Complex64]) -> Complex64 {
        v.iter().zip(self.b0.iter()).map(|(a, b)| a * b).sum()
    }

    /// `f + vB + ½ A(v)`, the Riccati nonlinearity.
    pub fn riccati_rhs(&self, f: &[Complex64], v: &[Complex64]) -> Vec<Complex64> {
        let vb = self.row_times_b(v);
        let q = self.quadratic_form(v);
        (0..self.dim()).map(|i| f[i] + vb[i] + 0.5 * q[i]).collect()
    }
}

pub fn bilinear(v: &[Complex64], m: &DMatrix<f64>) -> Complex64 {
    let d = v.len();
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..d {
        if v[i] == Complex64::new(0.0, 0.0) {
            continue;
        }
        let mut row = Complex64::new(0.0, 0.0);
        for j in 0..d {
            row += m[(i, j)] * v[j];
        }
        acc += v[i] * row;
    }
    acc
}

/// Time-dependent affine coefficients of dimension `d`.
#[derive(Debug, Clone)]
pub struct AffineCoefficients {
    dim: usize,
    b0: Vec<TimeFunction>,
    /// Row-major `d × d`.
    b: Vec<TimeFunction>,
    /// `d + 1` row-major `d × d` blocks.
    a: Vec<Vec<TimeFunction>>,
    state_space: StateSpace,
    sigma: SigmaKind,
    approximated: bool,
}

impl AffineCoefficients {
    pub fn new(
        dim: usize,
        b0: Vec<TimeFunction>,
        b: Vec<TimeFunction>,
        a: Vec<Vec<TimeFunction>>,
        state_space: StateSpace,
    ) -> Result<Self> {
        if dim == 0 || b0.len() != dim || b.len() != dim * dim || a.len() != dim + 1 {
            return Err(Error::Validation(format!(
                "affine coefficients of dimension {dim} need b0 of length d, B of d*d entries and d+1 A matrices"
            )));
        }
        for (k, m) in a.iter().enumerate() {
            if m.len() != dim * dim {
                return Err(Error::Validation(format!("A^{k} must have d*d entries")));
            }
            for i in 0..dim {
                for j in 0..i {
                    if m[i * dim + j] != m[j * dim + i] {
                        return Err(Error::Validation(format!(
                            "A^{k} is not symmetric at ({i}, {j})"
                        )));
                    }
                }
            }
        }
        for f in b0.iter().chain(&b).chain(a.iter().flatten()) {
            f.validate()?;
        }
        let approximated = b0
            .iter()
            .chain(&b)
            .chain(a.iter().flatten())
            .any(TimeFunction::is_piecewise_constant);
        Ok(Self {
            dim,
            b0,
            b,
            a,
            state_space,
            sigma: SigmaKind::Generic,
            approximated,
        })
    }

    /// Time-independent coefficients.
    pub fn constant(
        b0: &DVector<f64>,
        b: &DMatrix<f64>,
        a: &[DMatrix<f64>],
        state_space: StateSpace,
    ) -> Result<Self> {
        let d = b0.len();
        if b.shape() != (d, d) || a.iter().any(|m| m.shape() != (d, d)) {
            return Err(Error::Validation("coefficient shapes do not match".into()));
        }
        let mat = |m: &DMatrix<f64>| {
            (0..d * d)
                .map(|k| TimeFunction::Constant(m[(k / d, k % d)]))
                .collect::<Vec<_>>()
        };
        Self::new(
            d,
            b0.iter().map(|&v| TimeFunction::Constant(v)).collect(),
            mat(b),
            a.iter().map(mat).collect(),
            state_space,
        )
    }

    pub(crate) fn with_sigma(mut self, sigma: SigmaKind) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state_space(&self) -> StateSpace {
        self.state_space
    }

    pub fn sigma_kind(&self) -> &SigmaKind {
        &self.sigma
    }

    /// True when some input was a step curve, which violates continuity and
    /// is only approximated after [`regularized`](Self::regularized).
    pub fn is_approximated(&self) -> bool {
        self.approximated
    }

    pub fn regularized(&self, grid: &TimeGrid) -> Self {
        let reg = |v: &Vec<TimeFunction>| v.iter().map(|f| f.regularized(grid)).collect();
        let sigma = match &self.sigma {
            SigmaKind::Generic => SigmaKind::Generic,
            SigmaKind::Heston {
                eta,
                rho,
                sigma_bar,
            } => SigmaKind::Heston {
                eta: eta.regularized(grid),
                rho: *rho,
                sigma_bar: sigma_bar.regularized(grid),
            },
        };
        Self {
            dim: self.dim,
            b0: reg(&self.b0),
            b: reg(&self.b),
            a: self.a.iter().map(reg).collect(),
            state_space: self.state_space,
            sigma,
            approximated: self.approximated,
        }
    }

    pub fn sample(&self, s: f64) -> CoefficientSample {
        let d = self.dim;
        let mat = |m: &[TimeFunction]| DMatrix::from_fn(d, d, |i, j| m[i * d + j].eval(s));
        CoefficientSample {
            b0: DVector::from_iterator(d, self.b0.iter().map(|f| f.eval(s))),
            b: mat(&self.b),
            a: self.a.iter().map(|m| mat(m)).collect(),
        }
    }

    pub fn on_grid(&self, grid: &TimeGrid) -> Vec<CoefficientSample> {
        grid.times().into_iter().map(|t| self.sample(t)).collect()
    }

    pub fn drift(&self, s: f64, x: &[f64]) -> DVector<f64> {
        self.sample(s).drift(x)
    }

    pub fn diffusion_squared(&self, s: f64, x: &[f64]) -> DMatrix<f64> {
        self.sample(s).diffusion_squared(x)
    }

    pub fn quadratic_form_a(&self, s: f64, v: &[Complex64]) -> Vec<Complex64> {
        self.sample(s).quadratic_form(v)
    }

    /// `σ(s, x)` with `σσᵀ = a(s, x)`.
    pub fn sigma_factor(&self, s: f64, x: &[f64]) -> Result<DMatrix<f64>> {
        match &self.sigma {
            SigmaKind::Heston {
                eta,
                rho,
                sigma_bar,
            } => Ok(heston_sigma(eta.eval(s), *rho, sigma_bar.eval(s), x[1])),
            SigmaKind::Generic => psd_sqrt(&self.diffusion_squared(s, x), s),
        }
    }

    /// A constant `c` with `‖b(t,x)‖ + ‖σ(t,x)‖ ≤ c(1 + ‖x‖)` on `[0, T]`,
    /// from entrywise sup norms of the coefficient curves.
    pub fn linear_growth_constant(&self) -> f64 {
        let d = self.dim;
        let sup = |fs: &[TimeFunction]| fs.iter().map(|f| f.sup_abs().powi(2)).sum::<f64>().sqrt();
        let trace_sup = |m: &[TimeFunction]| (0..d).map(|i| m[i * d + i].sup_abs()).sum::<f64>();
        let tr0 = trace_sup(&self.a[0]);
        let tr_rest = self.a[1..]
            .iter()
            .map(|m| trace_sup(m).powi(2))
            .sum::<f64>()
            .sqrt();
        sup(&self.b0) + sup(&self.b) + 0.5 * (1.0 + tr0 + tr_rest)
    }

    /// Checks `a(t_j, x)` is PSD at every grid node for every sample `x`.
    pub fn validate_psd(&self, grid: &TimeGrid, points: &[Vec<f64>]) -> Result<()> {
        for t in grid.times() {
            let c = self.sample(t);
            for x in points {
                if !self.state_space.contains(x) {
                    continue;
                }
                let min = SymmetricEigen::new(c.diffusion_squared(x))
                    .eigenvalues
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                if min < PSD_TOLERANCE * (1.0 + c.diffusion_squared(x).norm()) {
                    return Err(Error::StateSpace {
                        time: t,
                        min_eigenvalue: min,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self, out: &mut Vec<u64>) {
        out.push(self.dim as u64);
        for f in self.b0.iter().chain(&self.b).chain(self.a.iter().flatten()) {
            f.fingerprint(out);
        }
    }
}

pub(crate) fn heston_sigma(eta: f64, rho: f64, sigma_bar: f64, v: f64) -> DMatrix<f64> {
    let sv = v.max(0.0).sqrt();
    DMatrix::from_row_slice(
        2,
        2,
        &[
            eta * (1.0 - rho * rho).max(0.0).sqrt() * sv,
            eta * rho * sv,
            0.0,
            sigma_bar * sv,
        ],
    )
}

fn psd_sqrt(a: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>> {
    let scale = 1.0 + a.norm();
    let eig = SymmetricEigen::new(a.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < PSD_TOLERANCE * scale {
        return Err(Error::StateSpace {
            time: s,
            min_eigenvalue: min,
        });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}
