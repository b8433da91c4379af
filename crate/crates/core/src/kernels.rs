//! Volterra kernels `K(t, s)`, their resolvents of the first kind, and the
//! Riemann-Liouville integral and derivative on a uniform grid.
//!
//! Every quadrature that touches a convolution kernel near its singularity
//! goes through exact cell integrals (closed form for the fractional kernel,
//! tanh-sinh otherwise). Point evaluation at `t = s` is never used.

use std::fmt;
use std::ops::{Add, Mul};
use std::sync::Arc;

use nalgebra::DMatrix;
use num_traits::Zero;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::quadrature::tanh_sinh;
use crate::special::gamma;

const QUAD_TOL: f64 = 1e-13;

pub type GeneralFn = Arc<dyn Fn(f64, f64) -> DMatrix<f64> + Send + Sync>;
pub type ConvolutionFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
/// `(a, b, t) -> ∫_a^b K̄(t - s) ds`.
pub type IntervalIntegralFn = Arc<dyn Fn(f64, f64, f64) -> DMatrix<f64> + Send + Sync>;

#[derive(Clone)]
pub enum KernelKind {
    /// Arbitrary `K(t, s)`.
    General(GeneralFn),
    /// `K(t, s) = K̄(t - s) 1_{s <= t}`.
    Convolution {
        eval: ConvolutionFn,
        interval_integral: Option<IntervalIntegralFn>,
    },
    /// Diagonal `K̄_i(t) = t^{α_i - 1} / Γ(α_i)`.
    Fractional(Vec<f64>),
    Identity,
}

/// Whether operations that lack a closed form may fall back to adaptive
/// quadrature for a general (non-convolution) kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuadraturePolicy {
    #[default]
    ExactOnly,
    AllowAdaptive,
}

#[derive(Clone)]
pub struct Kernel {
    dim: usize,
    kind: KernelKind,
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            KernelKind::General(_) => "General".to_string(),
            KernelKind::Convolution {
                interval_integral, ..
            } => format!(
                "Convolution(exact integral: {})",
                interval_integral.is_some()
            ),
            KernelKind::Fractional(a) => format!("Fractional({a:?})"),
            KernelKind::Identity => "Identity".to_string(),
        };
        f.debug_struct("Kernel")
            .field("dim", &self.dim)
            .field("kind", &kind)
            .finish()
    }
}

impl Kernel {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            kind: KernelKind::Identity,
        }
    }

    /// Diagonal fractional kernel. Exponents must lie in `(0, 1]`; operations
    /// that need square integrability check `α > 1/2` themselves.
    pub fn fractional(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Validation("fractional kernel needs at least one exponent".into()));
        }
        for &a in &alphas {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Validation(format!(
                    "fractional exponent {a} outside (0, 1]"
                )));
            }
        }
        Ok(Self {
            dim: alphas.len(),
            kind: KernelKind::Fractional(alphas),
        })
    }

    pub fn convolution(
        dim: usize,
        eval: ConvolutionFn,
        interval_integral: Option<IntervalIntegralFn>,
    ) -> Self {
        Self {
            dim,
            kind: KernelKind::Convolution {
                eval,
                interval_integral,
            },
        }
    }

    pub fn general(dim: usize, eval: GeneralFn) -> Self {
        Self {
            dim,
            kind: KernelKind::General(eval),
        }
    }

    /// Diagonal gamma kernel `K̄_i(t) = t^{α_i - 1} e^{-λ_i t} / Γ(α_i)`.
    pub fn gamma_kernel(alphas: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        if alphas.len() != rates.len() || alphas.is_empty() {
            return Err(Error::Validation(
                "gamma kernel needs matching, non-empty exponent and rate lists".into(),
            ));
        }
        for (&a, &l) in alphas.iter().zip(&rates) {
            if !(a > 0.0 && a <= 1.0) || !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Validation(format!(
                    "gamma kernel needs α in (0, 1] and λ >= 0, got α = {a}, λ = {l}"
                )));
            }
        }
        let d = alphas.len();
        let norms: Vec<f64> = alphas.iter().map(|&a| 1.0 / gamma(a)).collect();
        let eval: ConvolutionFn = Arc::new(move |t: f64| {
            let mut m = DMatrix::zeros(d, d);
            if t >= 0.0 {
                for i in 0..d {
                    m[(i, i)] = norms[i] * t.powf(alphas[i] - 1.0) * (-rates[i] * t).exp();
                }
            }
            m
        });
        Ok(Self::convolution(d, eval, None))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }

    pub fn is_convolution(&self) -> bool {
        !matches!(self.kind, KernelKind::General(_))
    }

    /// Fractional exponents, treating the identity kernel as `α = 1`.
    pub fn fractional_exponents(&self) -> Option<Vec<f64>> {
        match &self.kind {
            KernelKind::Fractional(a) => Some(a.clone()),
            KernelKind::Identity => Some(vec![1.0; self.dim]),
            _ => None,
        }
    }

    /// Smallest exponent governing the singularity (1 for bounded kernels).
    pub fn min_exponent(&self) -> f64 {
        self.fractional_exponents()
            .map(|a| a.into_iter().fold(1.0, f64::min))
            .unwrap_or(1.0)
    }

    /// True when every off-diagonal entry vanishes (sampled for user kernels).
    pub fn is_diagonal(&self) -> bool {
        match &self.kind {
            KernelKind::Fractional(_) | KernelKind::Identity => true,
            KernelKind::Convolution { eval, .. } => [0.013, 0.1, 0.37, 1.0]
                .iter()
                .all(|&t| off_diagonal_zero(&eval(t))),
            KernelKind::General(eval) => [(0.2, 0.1), (0.9, 0.3), (1.0, 0.0)]
                .iter()
                .all(|&(t, s)| off_diagonal_zero(&eval(t, s))),
        }
    }

    /// `K̄_ii(r)` for convolution-type kernels, `r > 0`.
    pub fn component_value(&self, i: usize, r: f64) -> f64 {
        match &self.kind {
            KernelKind::Fractional(a) => power_kernel(a[i], r),
            KernelKind::Identity => 1.0,
            KernelKind::Convolution { eval, .. } => eval(r)[(i, i)],
            KernelKind::General(eval) => eval(r, 0.0)[(i, i)],
        }
    }

    /// `K̄_ij(r)` for convolution-type kernels.
    pub fn entry_value(&self, i: usize, j: usize, r: f64) -> f64 {
        match &self.kind {
            KernelKind::Fractional(_) | KernelKind::Identity => {
                if i == j {
                    self.component_value(i, r)
                } else {
                    0.0
                }
            }
            KernelKind::Convolution { eval, .. } => eval(r)[(i, j)],
            KernelKind::General(eval) => eval(r, 0.0)[(i, j)],
        }
    }

    pub(crate) fn general_eval(&self) -> Option<&GeneralFn> {
        match &self.kind {
            KernelKind::General(eval) => Some(eval),
            _ => None,
        }
    }

    /// `∫_lo^hi K̄_ij(r) dr` for a convolution-type kernel entry.
    pub(crate) fn entry_cell_integral(&self, i: usize, j: usize, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        match &self.kind {
            KernelKind::Fractional(a) => {
                if i == j {
                    let al = a[i];
                    (hi.powf(al) - lo.powf(al)) / gamma(al + 1.0)
                } else {
                    0.0
                }
            }
            KernelKind::Identity => {
                if i == j {
                    hi - lo
                } else {
                    0.0
                }
            }
            KernelKind::Convolution {
                eval,
                interval_integral,
            } => match interval_integral {
                Some(int) => int(0.0, hi - lo, hi)[(i, j)],
                None => tanh_sinh(|_, da, _| eval(lo + da)[(i, j)], lo, hi, QUAD_TOL).0,
            },
            KernelKind::General(_) => f64::NAN,
        }
    }

    /// `∫_lo^hi (r - lo) K̄_ij(r) dr` for a convolution-type kernel entry.
    pub(crate) fn entry_cell_moment(&self, i: usize, j: usize, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        match &self.kind {
            KernelKind::Fractional(a) => {
                if i == j {
                    power_cell_moment(a[i], lo, hi)
                } else {
                    0.0
                }
            }
            KernelKind::Identity => {
                if i == j {
                    0.5 * (hi - lo) * (hi - lo)
                } else {
                    0.0
                }
            }
            KernelKind::Convolution { eval, .. } => {
                tanh_sinh(|_, da, _| da * eval(lo + da)[(i, j)], lo, hi, QUAD_TOL).0
            }
            KernelKind::General(_) => f64::NAN,
        }
    }

    fn entry_is_zero(&self, i: usize, j: usize) -> bool {
        match &self.kind {
            KernelKind::Fractional(_) | KernelKind::Identity => i != j,
            KernelKind::Convolution { eval, .. } => {
                i != j && [0.013, 0.1, 0.37, 1.0].iter().all(|&t| eval(t)[(i, j)] == 0.0)
            }
            KernelKind::General(_) => false,
        }
    }
}

fn off_diagonal_zero(m: &DMatrix<f64>) -> bool {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

#[inline]
fn power_kernel(alpha: f64, r: f64) -> f64 {
    if alpha == 1.0 {
        1.0
    } else {
        r.powf(alpha - 1.0) / gamma(alpha)
    }
}

/// `∫_lo^hi (r - lo) r^{α-1}/Γ(α) dr`.
fn power_cell_moment(alpha: f64, lo: f64, hi: f64) -> f64 {
    let first = (hi.powf(alpha + 1.0) - lo.powf(alpha + 1.0)) / ((alpha + 1.0) * gamma(alpha));
    let zeroth = (hi.powf(alpha) - lo.powf(alpha)) / gamma(alpha + 1.0);
    first - lo * zeroth
}

/// `K(t, s)`.
pub fn eval_kernel(k: &Kernel, t: f64, s: f64) -> Result<DMatrix<f64>> {
    let d = k.dim;
    match &k.kind {
        KernelKind::Identity => Ok(DMatrix::identity(d, d)),
        KernelKind::General(eval) => Ok(eval(t, s)),
        KernelKind::Fractional(alphas) => {
            if s > t {
                return Ok(DMatrix::zeros(d, d));
            }
            let r = t - s;
            let mut m = DMatrix::zeros(d, d);
            for (i, &a) in alphas.iter().enumerate() {
                if r == 0.0 && a < 1.0 {
                    return Err(Error::Domain(format!(
                        "fractional kernel with α = {a} is singular at t = s = {t}"
                    )));
                }
                m[(i, i)] = power_kernel(a, r);
            }
            Ok(m)
        }
        KernelKind::Convolution { eval, .. } => {
            if s > t {
                return Ok(DMatrix::zeros(d, d));
            }
            let m = eval(t - s);
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!(
                    "convolution kernel is not finite at lag {}",
                    t - s
                )));
            }
            Ok(m)
        }
    }
}

/// `∫_a^b K̄(t - s) ds` for `0 <= a <= b <= t`.
///
/// Closed form for fractional and identity kernels; the supplied interval
/// integral or tanh-sinh for other convolution kernels. General kernels need
/// [`QuadraturePolicy::AllowAdaptive`] and then integrate `K(t, s)` over `s`.
pub fn kernel_interval_integral(
    k: &Kernel,
    a: f64,
    b: f64,
    t: f64,
    policy: QuadraturePolicy,
) -> Result<DMatrix<f64>> {
    if !(0.0 <= a && a <= b && b <= t) {
        return Err(Error::Domain(format!(
            "interval integral needs 0 <= a <= b <= t, got a = {a}, b = {b}, t = {t}"
        )));
    }
    let d = k.dim;
    match &k.kind {
        KernelKind::General(eval) => match policy {
            QuadraturePolicy::ExactOnly => Err(Error::Unsupported(
                "interval integral of a general kernel needs adaptive quadrature (opt in)".into(),
            )),
            QuadraturePolicy::AllowAdaptive => {
                let mut m = DMatrix::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        m[(i, j)] = tanh_sinh(|s, _, _| eval(t, s)[(i, j)], a, b, QUAD_TOL).0;
                    }
                }
                Ok(m)
            }
        },
        KernelKind::Convolution {
            interval_integral: Some(int),
            ..
        } => Ok(int(a, b, t)),
        _ => {
            let mut m = DMatrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    if !k.entry_is_zero(i, j) {
                        m[(i, j)] = k.entry_cell_integral(i, j, t - b, t - a);
                    }
                }
            }
            Ok(m)
        }
    }
}

/// `max_j ∫_0^{t_j} ‖K(t_j, s)‖_F^2 ds`, a check that the kernel is square
/// integrable uniformly on the horizon.
pub fn sup_l2_norm(k: &Kernel, grid: &TimeGrid, policy: QuadraturePolicy) -> Result<f64> {
    let d = k.dim;
    let horizon = grid.horizon();
    match &k.kind {
        KernelKind::Identity => Ok(horizon * d as f64),
        KernelKind::Fractional(alphas) => {
            let mut total = 0.0;
            for &a in alphas {
                if a <= 0.5 {
                    return Err(Error::Validation(format!(
                        "fractional exponent {a} <= 1/2 is not square integrable"
                    )));
                }
                total += horizon.powf(2.0 * a - 1.0) / ((2.0 * a - 1.0) * gamma(a).powi(2));
            }
            Ok(total)
        }
        KernelKind::Convolution { eval, .. } => {
            // monotone in t, so the last node attains the sup
            let v: f64 = tanh_sinh(|_, da, _| eval(da).norm_squared(), 0.0, horizon, 1e-12).0;
            if !v.is_finite() {
                return Err(Error::Validation("kernel is not square integrable".into()));
            }
            Ok(v)
        }
        KernelKind::General(eval) => {
            if policy == QuadraturePolicy::ExactOnly {
                return Err(Error::Unsupported(
                    "L2 norm of a general kernel needs adaptive quadrature (opt in)".into(),
                ));
            }
            let mut sup = 0.0f64;
            for j in 1..=grid.n_steps() {
                let t = grid.time(j);
                let v: f64 =
                    tanh_sinh(|s, _, _| eval(t, s).norm_squared(), 0.0, t, 1e-12).0;
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "kernel is not square integrable at t = {t}"
                    )));
                }
                sup = sup.max(v);
            }
            Ok(sup)
        }
    }
}

/// Product-integration weights of a scalar convolution kernel on a uniform
/// grid, indexed by lag `p = 1..=n` (cell `r ∈ [(p-1)Δ, pΔ]`).
///
/// `near[p]` weights the cell end closer to the target time, `far[p]` the
/// farther one, for a piecewise-linear integrand.
#[derive(Debug, Clone)]
pub struct ScalarLagWeights {
    pub dt: f64,
    pub rect: Vec<f64>,
    pub near: Vec<f64>,
    pub far: Vec<f64>,
}

impl ScalarLagWeights {
    fn from_cells(dt: f64, n: usize, mut cell: impl FnMut(f64, f64) -> (f64, f64)) -> Self {
        let mut rect = vec![0.0; n + 1];
        let mut near = vec![0.0; n + 1];
        let mut far = vec![0.0; n + 1];
        for p in 1..=n {
            let lo = (p - 1) as f64 * dt;
            let hi = p as f64 * dt;
            let (zeroth, moment) = cell(lo, hi);
            rect[p] = zeroth;
            far[p] = moment / dt;
            near[p] = zeroth - far[p];
        }
        Self { dt, rect, near, far }
    }

    /// Weights of `r^{β-1}/Γ(β)`, `β > 0`.
    pub fn power(beta: f64, grid: &TimeGrid) -> Self {
        let g1 = gamma(beta + 1.0);
        Self::from_cells(grid.dt(), grid.n_steps(), |lo, hi| {
            ((hi.powf(beta) - lo.powf(beta)) / g1, power_cell_moment(beta, lo, hi))
        })
    }

    pub fn n(&self) -> usize {
        self.rect.len() - 1
    }

    /// Product-trapezoid weight of node `m` for target node `n` (`m <= n`).
    #[inline]
    pub fn trapezoid(&self, n: usize, m: usize) -> f64 {
        let q = n - m;
        let mut w = 0.0;
        if q >= 1 {
            w += self.far[q];
        }
        if q < n {
            w += self.near[q + 1];
        }
        w
    }
}

/// Lag weights of a convolution kernel, one scalar table per nonzero entry.
#[derive(Debug, Clone)]
pub struct LagWeights {
    dim: usize,
    entries: Vec<Option<ScalarLagWeights>>,
}

impl LagWeights {
    pub fn new(k: &Kernel, grid: &TimeGrid) -> Result<Self> {
        if !k.is_convolution() {
            return Err(Error::Unsupported(
                "lag weights need a convolution-type kernel".into(),
            ));
        }
        let d = k.dim;
        let n = grid.n_steps();
        let dt = grid.dt();
        let mut entries = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                if k.entry_is_zero(i, j) {
                    entries.push(None);
                    continue;
                }
                let w = match (&k.kind, i == j) {
                    (KernelKind::Fractional(a), true) => ScalarLagWeights::power(a[i], grid),
                    (KernelKind::Identity, true) => ScalarLagWeights::power(1.0, grid),
                    _ => ScalarLagWeights::from_cells(dt, n, |lo, hi| {
                        (k.entry_cell_integral(i, j, lo, hi), k.entry_cell_moment(i, j, lo, hi))
                    }),
                };
                entries.push(Some(w));
            }
        }
        Ok(Self { dim: d, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize, j: usize) -> Option<&ScalarLagWeights> {
        self.entries[i * self.dim + j].as_ref()
    }

    /// Diagonal tables; errors if the kernel has off-diagonal entries.
    pub fn diagonal(&self) -> Result<Vec<&ScalarLagWeights>> {
        let d = self.dim;
        for i in 0..d {
            for j in 0..d {
                if i != j && self.entries[i * d + j].is_some() {
                    return Err(Error::Unsupported("kernel is not diagonal".into()));
                }
            }
        }
        Ok((0..d)
            .map(|i| self.entries[i * d + i].as_ref().expect("zero diagonal entry"))
            .collect())
    }

    /// Rectangle weight matrix `∫_{(p-1)Δ}^{pΔ} K̄(r) dr`.
    pub fn rect_matrix(&self, p: usize) -> DMatrix<f64> {
        let d = self.dim;
        DMatrix::from_fn(d, d, |i, j| {
            self.entries[i * d + j].as_ref().map_or(0.0, |w| w.rect[p])
        })
    }
}

/// One diagonal component of a resolvent of the first kind.
#[derive(Debug, Clone, PartialEq)]
pub enum ResolventComponent {
    /// `δ_0`.
    Dirac,
    /// Density `t^{-α}/Γ(1-α)`, `α < 1`.
    PowerLaw { alpha: f64 },
    /// Atom at zero plus a density that is constant on grid cells.
    Discrete { atom: f64, dt: f64, cells: Vec<f64> },
}

impl ResolventComponent {
    pub fn atom(&self) -> f64 {
        match self {
            Self::Dirac => 1.0,
            Self::PowerLaw { .. } => 0.0,
            Self::Discrete { atom, .. } => *atom,
        }
    }

    /// Density at `t > 0`.
    pub fn density(&self, t: f64) -> f64 {
        match self {
            Self::Dirac => 0.0,
            Self::PowerLaw { alpha } => t.powf(-alpha) / gamma(1.0 - alpha),
            Self::Discrete { dt, cells, .. } => {
                let c = (t / dt).floor() as usize;
                cells.get(c).copied().unwrap_or(0.0)
            }
        }
    }

    /// Density mass on `[a, b]` (the atom is excluded).
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        match self {
            Self::Dirac => 0.0,
            Self::PowerLaw { alpha } => {
                (b.powf(1.0 - alpha) - a.powf(1.0 - alpha)) / gamma(2.0 - alpha)
            }
            Self::Discrete { dt, cells, .. } => {
                overlap_sum(*dt, cells, a, b, |lo, hi, _| hi - lo)
            }
        }
    }

    /// `∫_a^b (s - a) ℓ(s) ds`.
    pub fn first_moment(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        match self {
            Self::Dirac => 0.0,
            Self::PowerLaw { alpha } => {
                let first = (b.powf(2.0 - alpha) - a.powf(2.0 - alpha))
                    / ((2.0 - alpha) * gamma(1.0 - alpha));
                first - a * self.integral(a, b)
            }
            Self::Discrete { dt, cells, .. } => overlap_sum(*dt, cells, a, b, |lo, hi, a| {
                0.5 * ((hi - a).powi(2) - (lo - a).powi(2))
            }),
        }
    }

    pub fn total_variation(&self, horizon: f64) -> f64 {
        match self {
            Self::Dirac => 1.0,
            Self::PowerLaw { alpha } => horizon.powf(1.0 - alpha) / gamma(2.0 - alpha),
            Self::Discrete { atom, dt, cells } => {
                atom.abs() + cells.iter().map(|c| c.abs() * dt).sum::<f64>()
            }
        }
    }
}

fn overlap_sum(
    dt: f64,
    cells: &[f64],
    a: f64,
    b: f64,
    piece: impl Fn(f64, f64, f64) -> f64,
) -> f64 {
    let first = ((a / dt).floor() as usize).min(cells.len());
    let mut acc = 0.0;
    for (c, &v) in cells.iter().enumerate().skip(first) {
        let lo = (c as f64 * dt).max(a);
        let hi = ((c + 1) as f64 * dt).min(b);
        if hi <= lo {
            if c as f64 * dt >= b {
                break;
            }
            continue;
        }
        acc += v * piece(lo, hi, a);
    }
    acc
}

/// Diagonal resolvent of the first kind: `K̄ ⋆ L = L ⋆ K̄ = Id`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolventFirstKind {
    components: Vec<ResolventComponent>,
    tv_bound: f64,
}

impl ResolventFirstKind {
    pub fn from_components(components: Vec<ResolventComponent>, horizon: f64) -> Self {
        let tv_bound = components.iter().map(|c| c.total_variation(horizon)).sum();
        Self {
            components,
            tv_bound,
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn component(&self, i: usize) -> &ResolventComponent {
        &self.components[i]
    }

    pub fn components(&self) -> &[ResolventComponent] {
        &self.components
    }

    /// `L({0})`.
    pub fn atom_at_zero(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            self.dim(),
            self.components.iter().map(|c| c.atom()),
        ))
    }

    pub fn density(&self, t: f64) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            self.dim(),
            self.components.iter().map(|c| c.density(t)),
        ))
    }

    /// Sum of the componentwise total variations on `[0, T]`.
    pub fn total_variation_bound(&self) -> f64 {
        self.tv_bound
    }
}

fn check_resolvable(k: &Kernel, grid: &TimeGrid) -> Result<()> {
    if !k.is_convolution() {
        return Err(Error::Unsupported(
            "resolvent of the first kind needs a convolution kernel".into(),
        ));
    }
    if !k.is_diagonal() {
        return Err(Error::Unsupported(
            "resolvent of the first kind is only built for diagonal kernels".into(),
        ));
    }
    for i in 0..k.dim {
        let mut prev = f64::INFINITY;
        let mut nonzero = false;
        for j in 1..=grid.n_steps() {
            let v = k.component_value(i, grid.time(j));
            if !(v >= 0.0) {
                return Err(Error::Unsupported(format!(
                    "kernel component {i} is negative at t = {}",
                    grid.time(j)
                )));
            }
            if v > prev * (1.0 + 1e-12) {
                return Err(Error::Unsupported(format!(
                    "kernel component {i} increases at t = {}",
                    grid.time(j)
                )));
            }
            nonzero |= v > 0.0;
            prev = v;
        }
        if !nonzero {
            return Err(Error::Unsupported(format!(
                "kernel component {i} vanishes identically"
            )));
        }
    }
    Ok(())
}

/// Resolvent of the first kind: analytic for fractional and identity
/// kernels, triangular deconvolution on the grid otherwise.
pub fn resolvent_first_kind(k: &Kernel, grid: &TimeGrid) -> Result<ResolventFirstKind> {
    check_resolvable(k, grid)?;
    match &k.kind {
        KernelKind::Identity => Ok(ResolventFirstKind::from_components(
            vec![ResolventComponent::Dirac; k.dim],
            grid.horizon(),
        )),
        KernelKind::Fractional(alphas) => Ok(ResolventFirstKind::from_components(
            alphas
                .iter()
                .map(|&a| {
                    if a == 1.0 {
                        ResolventComponent::Dirac
                    } else {
                        ResolventComponent::PowerLaw { alpha: a }
                    }
                })
                .collect(),
            grid.horizon(),
        )),
        _ => resolvent_first_kind_discretized(k, grid),
    }
}

/// Discrete resolvent: an atom `1/K̄(0+)` (zero for singular kernels) plus a
/// cellwise-constant density solving `(K̄ ⋆ L)(t_j) = 1` at every node
/// `j >= 1` by forward substitution.
pub fn resolvent_first_kind_discretized(
    k: &Kernel,
    grid: &TimeGrid,
) -> Result<ResolventFirstKind> {
    check_resolvable(k, grid)?;
    let n = grid.n_steps();
    let dt = grid.dt();
    let weights = LagWeights::new(k, grid)?;
    let diag = weights.diagonal()?;
    let mut components = Vec::with_capacity(k.dim);
    for (i, w) in diag.iter().enumerate() {
        let at_zero = match &k.kind {
            KernelKind::Fractional(a) if a[i] < 1.0 => f64::INFINITY,
            _ => k.component_value(i, 0.0),
        };
        let atom = if at_zero.is_finite() && at_zero > 0.0 {
            1.0 / at_zero
        } else {
            0.0
        };
        let mut cells = vec![0.0; n];
        for j in 1..=n {
            let mut rhs = 1.0 - atom * k.component_value(i, grid.time(j));
            for (m, c) in cells.iter().enumerate().take(j - 1) {
                rhs -= c * w.rect[j - m];
            }
            cells[j - 1] = rhs / w.rect[1];
        }
        components.push(ResolventComponent::Discrete { atom, dt, cells });
    }
    Ok(ResolventFirstKind::from_components(components, grid.horizon()))
}

/// `max_{j >= 1} ‖(K̄ ⋆ L)(t_j) - Id‖` by direct tanh-sinh quadrature of the
/// convolution, independent of the lag weights.
pub fn resolvent_identity_error(
    k: &Kernel,
    l: &ResolventFirstKind,
    grid: &TimeGrid,
) -> Result<f64> {
    if k.dim != l.dim() || !k.is_convolution() {
        return Err(Error::Validation(
            "kernel and resolvent must be convolution type of equal dimension".into(),
        ));
    }
    let mut worst = 0.0f64;
    for j in 1..=grid.n_steps() {
        let t = grid.time(j);
        for i in 0..k.dim {
            let v = convolve_component(k, i, l.component(i), t, |r| {
                k.component_value(i, r)
            }) - 1.0;
            worst = worst.max(v.abs());
        }
    }
    Ok(worst)
}

/// `∫_{[0,t]} g(t - s) L_i(ds)` where `g` behaves like `K̄_i` near zero.
fn convolve_component(
    k: &Kernel,
    _i: usize,
    comp: &ResolventComponent,
    t: f64,
    g: impl Fn(f64) -> f64,
) -> f64 {
    let atom_part = if comp.atom() != 0.0 { comp.atom() * g(t) } else { 0.0 };
    let density_part = match comp {
        ResolventComponent::Dirac => 0.0,
        ResolventComponent::PowerLaw { .. } => {
            tanh_sinh(|_, da, db| g(db) * comp.density(da), 0.0, t, QUAD_TOL).0
        }
        ResolventComponent::Discrete { dt, cells, .. } => {
            let mut acc = 0.0;
            for (c, &v) in cells.iter().enumerate() {
                let lo = c as f64 * dt;
                if lo >= t * (1.0 - 1e-14) {
                    break;
                }
                let hi = ((c + 1) as f64 * dt).min(t);
                let local: f64 = tanh_sinh(|_, _, db| g(t - hi + db), lo, hi, QUAD_TOL).0;
                acc += v * local;
            }
            acc
        }
    };
    let _ = k;
    atom_part + density_part
}

/// `((Δ_h K̄) ⋆ L)(t_j)` on the grid, with `Δ_h K̄(t) = K̄((t + h) ∧ T)`.
#[derive(Debug, Clone)]
pub struct ShiftedConvolution {
    pub values: Vec<DMatrix<f64>>,
    pub total_variation: f64,
}

pub fn shifted_kernel_convolution(
    k: &Kernel,
    l: &ResolventFirstKind,
    h: f64,
    grid: &TimeGrid,
) -> Result<ShiftedConvolution> {
    if k.dim != l.dim() || !k.is_convolution() || !k.is_diagonal() {
        return Err(Error::Unsupported(
            "shifted convolution needs a diagonal convolution kernel and matching resolvent".into(),
        ));
    }
    if !(h >= 0.0) {
        return Err(Error::Domain(format!("shift h must be nonnegative, got {h}")));
    }
    let horizon = grid.horizon();
    let d = k.dim;
    let mut values = Vec::with_capacity(grid.n_nodes());
    for j in 0..=grid.n_steps() {
        let t = grid.time(j);
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            let comp = l.component(i);
            let shifted = |r: f64| k.component_value(i, (r + h).min(horizon));
            m[(i, i)] = if j == 0 {
                if h > 0.0 {
                    comp.atom() * shifted(0.0)
                } else {
                    1.0
                }
            } else if h == 0.0 {
                convolve_component(k, i, comp, t, |r| k.component_value(i, r))
            } else {
                // kink where t - s + h = T
                let kink = t + h - horizon;
                if kink > 0.0 && kink < t {
                    let capped = k.component_value(i, horizon);
                    capped * comp.integral(0.0, kink)
                        + comp.atom() * capped
                        + match comp {
                            ResolventComponent::Dirac => 0.0,
                            _ => tanh_sinh(
                                |s, _, _| shifted(t - s) * comp.density(s),
                                kink,
                                t,
                                QUAD_TOL,
                            )
                            .0,
                        }
                } else {
                    convolve_component(k, i, comp, t, shifted)
                }
            };
        }
        values.push(m);
    }
    let mut tv = values[0].norm();
    for w in values.windows(2) {
        tv += (&w[1] - &w[0]).norm();
    }
    Ok(ShiftedConvolution {
        values,
        total_variation: tv,
    })
}

/// Riemann-Liouville integral `(I^β f)(t_j)` by product integration of the
/// piecewise-linear interpolant of `f`. `I^0` is the identity.
pub fn rl_integral<T>(f: &[T], beta: f64, grid: &TimeGrid) -> Result<Vec<T>>
where
    T: Copy + Zero + Add<Output = T> + Mul<f64, Output = T>,
{
    if !(beta >= 0.0) {
        return Err(Error::Domain(format!("RL integral order must be >= 0, got {beta}")));
    }
    if f.len() != grid.n_nodes() {
        return Err(Error::Validation(format!(
            "expected {} samples, got {}",
            grid.n_nodes(),
            f.len()
        )));
    }
    if beta == 0.0 {
        return Ok(f.to_vec());
    }
    let w = ScalarLagWeights::power(beta, grid);
    Ok(product_trapezoid(f, &w))
}

pub(crate) fn product_trapezoid<T>(f: &[T], w: &ScalarLagWeights) -> Vec<T>
where
    T: Copy + Zero + Add<Output = T> + Mul<f64, Output = T>,
{
    let n = f.len() - 1;
    let mut out = vec![T::zero(); n + 1];
    for (target, slot) in out.iter_mut().enumerate().skip(1) {
        let mut acc = T::zero();
        for (m, &fm) in f.iter().enumerate().take(target + 1) {
            acc = acc + fm * w.trapezoid(target, m);
        }
        *slot = acc;
    }
    out
}

/// Riemann-Liouville derivative `D^α f = d/dt I^{1-α} f` as the forward
/// difference quotient of `I^{1-α} f` (backward at the last node).
pub fn rl_derivative<T>(f: &[T], alpha: f64, grid: &TimeGrid) -> Result<Vec<T>>
where
    T: Copy + Zero + Add<Output = T> + Mul<f64, Output = T>,
{
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Domain(format!("RL derivative order {alpha} outside (0, 1]")));
    }
    let integrated = rl_integral(f, 1.0 - alpha, grid)?;
    let n = grid.n_steps();
    let inv_dt = 1.0 / grid.dt();
    let diff = |hi: usize, lo: usize| (integrated[hi] + integrated[lo] * -1.0) * inv_dt;
    let mut out = Vec::with_capacity(n + 1);
    for j in 0..n {
        out.push(diff(j + 1, j));
    }
    out.push(diff(n, n - 1));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use num_complex::Complex64;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn identity_kernel_everywhere() {
        let k = Kernel::identity(3);
        assert_eq!(eval_kernel(&k, 0.4, 0.9).unwrap(), DMatrix::identity(3, 3));
        assert_eq!(eval_kernel(&k, 0.4, 0.4).unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn fractional_alpha_one_is_constant() {
        let k = Kernel::fractional(vec![1.0]).unwrap();
        assert_eq!(eval_kernel(&k, 0.7, 0.2).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn fractional_value_against_gamma_reference() {
        let k = Kernel::fractional(vec![0.6]).unwrap();
        let v = eval_kernel(&k, 1.0, 0.0).unwrap()[(0, 0)];
        assert_abs_diff_eq!(v, 0.671_504_972_442_073_4, epsilon = 1e-13);
    }

    #[test]
    fn singular_point_is_a_domain_error() {
        let k = Kernel::fractional(vec![0.6, 1.0]).unwrap();
        assert!(matches!(eval_kernel(&k, 0.3, 0.3), Err(Error::Domain(_))));
        assert_eq!(eval_kernel(&k, 0.3, 0.5).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn interval_integrals() {
        let p = QuadraturePolicy::ExactOnly;
        let one = Kernel::fractional(vec![1.0]).unwrap();
        assert_abs_diff_eq!(kernel_interval_integral(&one, 0.0, 0.5, 1.0, p).unwrap()[(0, 0)], 0.5);
        let half = Kernel::fractional(vec![0.5]).unwrap();
        assert_abs_diff_eq!(
            kernel_interval_integral(&half, 0.0, 1.0, 1.0, p).unwrap()[(0, 0)],
            2.0 / std::f64::consts::PI.sqrt(),
            epsilon = 1e-14
        );
        // adaptive-quadrature reference
        let k = Kernel::fractional(vec![0.6]).unwrap();
        assert_abs_diff_eq!(
            kernel_interval_integral(&k, 0.2, 0.4, 1.0, p).unwrap()[(0, 0)],
            0.155_193_457_445_733_8,
            epsilon = 1e-10
        );
    }

    #[test]
    fn general_kernel_integral_needs_opt_in() {
        let k = Kernel::general(1, Arc::new(|t: f64, s: f64| DMatrix::from_element(1, 1, t * s)));
        assert!(matches!(
            kernel_interval_integral(&k, 0.0, 1.0, 1.0, QuadraturePolicy::ExactOnly),
            Err(Error::Unsupported(_))
        ));
        let v = kernel_interval_integral(&k, 0.0, 1.0, 2.0, QuadraturePolicy::AllowAdaptive)
            .unwrap()[(0, 0)];
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn convolution_without_exact_integral_uses_quadrature() {
        let frac = Kernel::fractional(vec![0.7]).unwrap();
        let eval: ConvolutionFn = Arc::new(|t: f64| {
            DMatrix::from_element(1, 1, t.powf(-0.3) / gamma(0.7))
        });
        let conv = Kernel::convolution(1, eval, None);
        let p = QuadraturePolicy::ExactOnly;
        for (a, b) in [(0.0, 0.25), (0.3, 0.9), (0.9, 1.0)] {
            let x = kernel_interval_integral(&frac, a, b, 1.0, p).unwrap()[(0, 0)];
            let y = kernel_interval_integral(&conv, a, b, 1.0, p).unwrap()[(0, 0)];
            assert_abs_diff_eq!(x, y, epsilon = 1e-11);
        }
    }

    #[test]
    fn sup_l2_norm_cases() {
        let p = QuadraturePolicy::ExactOnly;
        let g2 = TimeGrid::new(2.0, 10).unwrap();
        assert_abs_diff_eq!(sup_l2_norm(&Kernel::identity(3), &g2, p).unwrap(), 6.0);
        let one = Kernel::fractional(vec![1.0]).unwrap();
        assert_abs_diff_eq!(sup_l2_norm(&one, &grid(10), p).unwrap(), 1.0);
        let k = Kernel::fractional(vec![0.6]).unwrap();
        assert_abs_diff_eq!(
            sup_l2_norm(&k, &grid(10), p).unwrap(),
            2.254_594_640_072_148_5,
            epsilon = 1e-12
        );
        let bad = Kernel::fractional(vec![0.5]).unwrap();
        assert!(matches!(sup_l2_norm(&bad, &grid(10), p), Err(Error::Validation(_))));
    }

    #[test]
    fn sup_l2_norm_stable_under_refinement() {
        let p = QuadraturePolicy::ExactOnly;
        for alpha in [0.55, 0.6, 0.75, 0.9, 1.0] {
            let k = Kernel::fractional(vec![alpha]).unwrap();
            let a = sup_l2_norm(&k, &grid(500), p).unwrap();
            let b = sup_l2_norm(&k, &grid(1000), p).unwrap();
            assert!(a.is_finite() && (a - b).abs() <= 0.01 * b);
        }
        let gk = Kernel::gamma_kernel(vec![0.8], vec![1.0]).unwrap();
        let a = sup_l2_norm(&gk, &grid(500), p).unwrap();
        let b = sup_l2_norm(&gk, &grid(1000), p).unwrap();
        assert!(a.is_finite() && (a - b).abs() <= 0.01 * b);
    }

    #[test]
    fn fractional_kernel_is_nonincreasing() {
        let k = Kernel::fractional(vec![0.65]).unwrap();
        let g = grid(200);
        for j in 1..200 {
            assert!(k.component_value(0, g.time(j + 1)) <= k.component_value(0, g.time(j)));
        }
    }

    #[test]
    fn analytic_resolvents() {
        let g = grid(50);
        let l = resolvent_first_kind(&Kernel::identity(2), &g).unwrap();
        assert_eq!(l.atom_at_zero(), DMatrix::identity(2, 2));
        assert_eq!(l.density(0.3), DMatrix::zeros(2, 2));

        let l = resolvent_first_kind(&Kernel::fractional(vec![0.6]).unwrap(), &g).unwrap();
        assert_eq!(l.atom_at_zero()[(0, 0)], 0.0);
        let t: f64 = 0.37;
        assert_abs_diff_eq!(
            l.density(t)[(0, 0)],
            t.powf(-0.6) / gamma(0.4),
            epsilon = 1e-14
        );
    }

    #[test]
    fn analytic_resolvent_identity_holds() {
        for alpha in [0.6, 0.75, 0.9] {
            let k = Kernel::fractional(vec![alpha]).unwrap();
            let g = grid(100);
            let l = resolvent_first_kind(&k, &g).unwrap();
            let err = resolvent_identity_error(&k, &l, &g).unwrap();
            assert!(err < 1e-9, "alpha {alpha}: {err:e}");
        }
    }

    #[test]
    fn discretized_resolvent_identity_holds() {
        let k = Kernel::fractional(vec![0.75]).unwrap();
        let g = grid(200);
        let l = resolvent_first_kind_discretized(&k, &g).unwrap();
        let err = resolvent_identity_error(&k, &l, &g).unwrap();
        assert!(err < 1e-8, "{err:e}");
        // cell densities approach t^{-α}/Γ(1-α) away from zero
        let exact = ResolventComponent::PowerLaw { alpha: 0.75 };
        let rel = (l.component(0).integral(0.5, 1.0) - exact.integral(0.5, 1.0)).abs()
            / exact.integral(0.5, 1.0);
        assert!(rel < 1e-2, "{rel}");
    }

    #[test]
    fn bounded_kernel_resolvent_has_atom() {
        // K̄(t) = e^{-t}: L = δ_0 + 1·dt
        let k = Kernel::gamma_kernel(vec![1.0], vec![1.0]).unwrap();
        let g = grid(400);
        let l = resolvent_first_kind(&k, &g).unwrap();
        assert_abs_diff_eq!(l.atom_at_zero()[(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(l.component(0).integral(0.0, 1.0), 1.0, epsilon = 1e-3);
        assert!(resolvent_identity_error(&k, &l, &g).unwrap() < 1e-8);
    }

    #[test]
    fn resolvent_rejects_increasing_or_coupled_kernels() {
        let g = grid(20);
        let inc: ConvolutionFn = Arc::new(|t: f64| DMatrix::from_element(1, 1, 1.0 + t));
        let k = Kernel::convolution(1, inc, None);
        assert!(matches!(resolvent_first_kind(&k, &g), Err(Error::Unsupported(_))));
        let coupled: ConvolutionFn =
            Arc::new(|_t: f64| DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]));
        let k = Kernel::convolution(2, coupled, None);
        assert!(matches!(resolvent_first_kind(&k, &g), Err(Error::Unsupported(_))));
    }

    #[test]
    fn shifted_convolution_cases() {
        let g = grid(20);
        let k = Kernel::fractional(vec![0.75]).unwrap();
        let l = resolvent_first_kind(&k, &g).unwrap();
        let zero = shifted_kernel_convolution(&k, &l, 0.0, &g).unwrap();
        for v in &zero.values[1..] {
            assert_abs_diff_eq!(v[(0, 0)], 1.0, epsilon = 1e-9);
        }
        let id = Kernel::identity(2);
        let lid = resolvent_first_kind(&id, &g).unwrap();
        let s = shifted_kernel_convolution(&id, &lid, 0.4, &g).unwrap();
        for v in &s.values {
            assert_eq!(*v, DMatrix::identity(2, 2));
        }
    }

    #[test]
    fn shifted_convolution_is_monotone_and_matches_reference() {
        let g = grid(10);
        let k = Kernel::fractional(vec![0.75]).unwrap();
        let l = resolvent_first_kind(&k, &g).unwrap();
        let s = shifted_kernel_convolution(&k, &l, 0.3, &g).unwrap();
        // reference values from an independent high-precision quadrature
        assert_abs_diff_eq!(s.values[5][(0, 0)], 0.833_959_469_0, epsilon = 1e-8);
        assert_abs_diff_eq!(s.values[10][(0, 0)], 0.925_979_628_3, epsilon = 1e-8);
        for j in 1..10 {
            assert!(s.values[j + 1][(0, 0)] >= s.values[j][(0, 0)]);
        }
        assert!(s.total_variation.is_finite());
    }

    #[test]
    fn rl_integral_basics() {
        let g = grid(100);
        let f: Vec<f64> = g.times().iter().map(|t| t.sin()).collect();
        assert_eq!(rl_integral(&f, 0.0, &g).unwrap(), f);
        let ones = vec![1.0; 101];
        let i1 = rl_integral(&ones, 1.0, &g).unwrap();
        for (j, v) in i1.iter().enumerate() {
            assert_abs_diff_eq!(*v, g.time(j), epsilon = 1e-13);
        }
        let lin: Vec<f64> = g.times();
        let half = rl_integral(&lin, 0.5, &g).unwrap();
        // I^{0.5} t = t^{1.5}/Γ(2.5)
        assert_abs_diff_eq!(half[100], 0.752_252_778_063_675, epsilon = 1e-12);
        assert!(matches!(rl_integral(&ones, -0.1, &g), Err(Error::Domain(_))));
    }

    #[test]
    fn rl_integral_of_complex_samples() {
        let g = grid(50);
        let f: Vec<Complex64> = g.times().iter().map(|&t| Complex64::new(t, -2.0 * t)).collect();
        let v = rl_integral(&f, 0.5, &g).unwrap();
        let expected = 1.0 / gamma(2.5);
        assert_abs_diff_eq!(v[50].re, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(v[50].im, -2.0 * expected, epsilon = 1e-12);
    }

    #[test]
    fn rl_derivative_basics() {
        let g = grid(1000);
        let lin = g.times();
        let d1 = rl_derivative(&lin, 1.0, &g).unwrap();
        for v in &d1[1..999] {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-9);
        }
        let d = rl_derivative(&lin, 0.6, &g).unwrap();
        // D^{0.6} t = Γ(2)/Γ(1.4) t^{0.4}
        assert_abs_diff_eq!(d[500], 0.854_152_134_128_440_6, epsilon = 1e-3);
        assert!(rl_derivative(&lin, 0.0, &g).is_err());
        assert!(rl_derivative(&lin, 1.2, &g).is_err());
    }

    #[test]
    fn derivative_inverts_integral() {
        let g = grid(400);
        let f: Vec<f64> = g.times().iter().map(|&t| t * (-t).exp()).collect();
        let i = rl_integral(&f, 0.5, &g).unwrap();
        let back = rl_derivative(&i, 0.5, &g).unwrap();
        let err = f.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 5e-3, "{err}");
    }

    #[test]
    fn trapezoid_weights_sum_to_kernel_mass() {
        let g = grid(64);
        let w = ScalarLagWeights::power(0.6, &g);
        for n in 1..=64 {
            let total: f64 = (0..=n).map(|m| w.trapezoid(n, m)).sum();
            let mass = g.time(n).powf(0.6) / gamma(1.6);
            assert_abs_diff_eq!(total, mass, epsilon = 1e-12);
        }
    }
}
