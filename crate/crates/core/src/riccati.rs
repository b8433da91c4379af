//! Riccati-Volterra equations for the Fourier-Laplace functional, the
//! functions `φ`, `χ`, `Y₀`, and the two representations of the `Y` process.
//!
//! Everything is marched in reversed time `r = T - t`, where the equation
//! becomes a forward Volterra equation of the second kind:
//! `ψ̃(r) = u K̄(r) + ∫_0^r h(ψ̃(q), T - q) K̄(r - q) dq` with
//! `h(v, s) = f(s) + v B(s) + ½ A(s, v)`.

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::affine::{AffineCoefficients, CoefficientSample, ComplexCurve};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::heston::HestonParams;
use crate::kernels::{
    GeneralFn, Kernel, LagWeights, QuadraturePolicy, ResolventComponent, ResolventFirstKind,
};
use crate::quadrature::tanh_sinh;
use crate::simulate::SimPath;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const SIGN_TOLERANCE: f64 = 1e-10;

/// Terminal weight `u` and running weight `f` of the functional
/// `E[exp(u X_T + ∫_0^T f(s) X_s ds)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FLParams {
    pub u: Vec<Complex64>,
    pub f: Vec<ComplexCurve>,
}

impl FLParams {
    pub fn new(u: Vec<Complex64>, f: Vec<ComplexCurve>) -> Result<Self> {
        if u.is_empty() || u.len() != f.len() {
            return Err(Error::Validation(format!(
                "u has {} components but f has {}",
                u.len(),
                f.len()
            )));
        }
        for c in &f {
            c.re.validate()?;
            c.im.validate()?;
        }
        Ok(Self { u, f })
    }

    /// `f ≡ 0`.
    pub fn terminal(u: Vec<Complex64>) -> Self {
        let f = vec![ComplexCurve::zero(); u.len()];
        Self { u, f }
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    pub fn f_at(&self, t: f64) -> Vec<Complex64> {
        self.f.iter().map(|c| c.eval(t)).collect()
    }

    pub fn f_on_grid(&self, grid: &TimeGrid) -> Vec<Vec<Complex64>> {
        grid.times().into_iter().map(|t| self.f_at(t)).collect()
    }

    pub fn f_is_zero(&self) -> bool {
        self.f.iter().all(ComplexCurve::is_zero)
    }

    pub fn fingerprint(&self, out: &mut Vec<u64>) {
        out.push(self.u.len() as u64);
        for u in &self.u {
            out.push(u.re.to_bits());
            out.push(u.im.to_bits());
        }
        for f in &self.f {
            f.fingerprint(out);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiccatiOptions {
    pub damping: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub blow_up_cap: f64,
    pub check_residual: bool,
    /// Refinement factor of the grid used to re-evaluate the right side.
    pub residual_refinement: usize,
    pub quadrature: QuadraturePolicy,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_iterations: 200,
            tolerance: 1e-12,
            blow_up_cap: 1e6,
            check_residual: true,
            residual_refinement: 4,
            quadrature: QuadraturePolicy::ExactOnly,
        }
    }
}

/// `ψ`, `φ`, `χ` on a grid. Index `j` refers to `t_j`; `phi[j]` and `chi[j]`
/// are `φ(t_j)` and `χ(t_j)`, integrals over `[T - t_j, T]`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub u: Vec<Complex64>,
    pub psi: Vec<Vec<Complex64>>,
    pub phi: Vec<Complex64>,
    pub chi: Vec<Vec<Complex64>>,
    pub y0: Option<Complex64>,
    /// Max over checked nodes of `|ψ - rhs|`; NaN when the check was skipped.
    pub residual_norm: f64,
    pub residual_tolerance: f64,
    pub residual_constant: f64,
    /// Per-node residuals (NaN at unchecked nodes).
    pub residuals: Vec<f64>,
    /// `ψ(T)` is infinite and stored as a cell average.
    pub singular_terminal: bool,
}

impl RiccatiSolution {
    pub fn dim(&self) -> usize {
        self.u.len()
    }

    /// `ψ̃(r_n) = ψ(T - r_n)`.
    pub fn psi_rev(&self, n: usize) -> &[Complex64] {
        &self.psi[self.grid.n_steps() - n]
    }

    pub fn residual_ok(&self) -> bool {
        !(self.residual_norm > self.residual_tolerance)
    }

    /// Sets `Y₀ = φ(T) + χ(T) X₀`.
    pub fn set_initial_state(&mut self, x0: &[f64]) -> Complex64 {
        let n = self.grid.n_steps();
        let y0 = self.phi[n] + dot(&self.chi[n], x0);
        self.y0 = Some(y0);
        y0
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim();
        let mut header = String::from("t");
        for i in 0..d {
            header.push_str(&format!(",psi{}_re,psi{}_im", i + 1, i + 1));
        }
        header.push_str(",phi_re,phi_im,residual\n");
        w.write_all(header.as_bytes())?;
        for (j, t) in self.grid.times().into_iter().enumerate() {
            let mut line = format!("{t}");
            for v in &self.psi[j] {
                line.push_str(&format!(",{},{}", v.re, v.im));
            }
            line.push_str(&format!(
                ",{},{},{}\n",
                self.phi[j].re, self.phi[j].im, self.residuals[j]
            ));
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }
}

pub(crate) fn dot(v: &[Complex64], x: &[f64]) -> Complex64 {
    v.iter().zip(x).map(|(a, b)| a * b).sum()
}

fn max_abs(v: &[Complex64]) -> f64 {
    v.iter().fold(0.0, |m, z| m.max(z.norm()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scheme {
    PredictorCorrector,
    FixedPoint,
}

/// Coefficients and `f` sampled on the grid, indexed in original time.
struct Problem {
    grid: TimeGrid,
    u: Vec<Complex64>,
    coeffs: Vec<CoefficientSample>,
    f: Vec<Vec<Complex64>>,
}

impl Problem {
    fn new(c: &AffineCoefficients, p: &FLParams, grid: TimeGrid) -> Result<Self> {
        if c.dim() != p.dim() {
            return Err(Error::Validation(format!(
                "coefficients have dimension {} but u has {}",
                c.dim(),
                p.dim()
            )));
        }
        Ok(Self {
            grid,
            u: p.u.clone(),
            coeffs: c.regularized(&grid).on_grid(&grid),
            f: p.f_on_grid(&grid),
        })
    }

    fn dim(&self) -> usize {
        self.u.len()
    }

    /// `h` at reversed node `n`.
    fn rhs(&self, n: usize, v: &[Complex64]) -> Vec<Complex64> {
        let j = self.grid.n_steps() - n;
        self.coeffs[j].riccati_rhs(&self.f[j], v)
    }
}

/// Source of product-integration weights in reversed time.
enum Backend {
    Lag {
        weights: LagWeights,
        /// `K̄(r_n)`, the first one replaced by a cell average when singular.
        forcing: Vec<DMatrix<f64>>,
        singular_start: bool,
    },
    General {
        eval: GeneralFn,
        grid: TimeGrid,
        forcing: Vec<DMatrix<f64>>,
        singular_start: bool,
    },
}

impl Backend {
    fn new(k: &Kernel, grid: &TimeGrid, policy: QuadraturePolicy) -> Result<Self> {
        let d = k.dim();
        let n = grid.n_steps();
        let dt = grid.dt();
        if let Some(eval) = k.general_eval() {
            if policy == QuadraturePolicy::ExactOnly {
                return Err(Error::Unsupported(
                    "Riccati weights for a general kernel need adaptive quadrature (opt in)".into(),
                ));
            }
            let horizon = grid.horizon();
            let mut forcing: Vec<DMatrix<f64>> =
                (0..=n).map(|m| eval(horizon, horizon - grid.time(m))).collect();
            let singular_start = forcing[0].iter().any(|v| !v.is_finite());
            if singular_start {
                forcing[0] = DMatrix::from_fn(d, d, |i, j| {
                    tanh_sinh(|s, _, _| eval(horizon, s)[(i, j)], horizon - dt, horizon, 1e-12).0
                        / dt
                });
            }
            return Ok(Self::General {
                eval: eval.clone(),
                grid: *grid,
                forcing,
                singular_start,
            });
        }
        let weights = LagWeights::new(k, grid)?;
        let mut forcing: Vec<DMatrix<f64>> = (0..=n)
            .map(|m| {
                let r = grid.time(m);
                DMatrix::from_fn(d, d, |i, j| {
                    if weights.entry(i, j).is_none() {
                        0.0
                    } else if m == 0 && k.fractional_exponents().is_some_and(|a| a[i] < 1.0) {
                        f64::INFINITY
                    } else {
                        k.entry_value(i, j, r)
                    }
                })
            })
            .collect();
        let singular_start = forcing[0].iter().any(|v| !v.is_finite());
        if singular_start {
            let cell = weights.rect_matrix(1) / dt;
            for (v, c) in forcing[0].iter_mut().zip(cell.iter()) {
                if !v.is_finite() {
                    *v = *c;
                }
            }
        }
        Ok(Self::Lag {
            weights,
            forcing,
            singular_start,
        })
    }

    fn forcing(&self, n: usize) -> &DMatrix<f64> {
        match self {
            Self::Lag { forcing, .. } | Self::General { forcing, .. } => &forcing[n],
        }
    }

    /// True when `u K̄(0)` is infinite for some nonzero `u_i`.
    fn singular_for(&self, u: &[Complex64]) -> bool {
        let (singular, forcing) = match self {
            Self::Lag {
                singular_start,
                forcing,
                ..
            }
            | Self::General {
                singular_start,
                forcing,
                ..
            } => (*singular_start, forcing),
        };
        singular && {
            let _ = forcing;
            u.iter().any(|v| *v != ZERO)
        }
    }

    /// Cell moments `(∫ K, ∫ K (q - r_c)/Δ)` over reversed cell `c` for
    /// target `n`, general kernels only.
    fn general_cell(eval: &GeneralFn, grid: &TimeGrid, n: usize, c: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let horizon = grid.horizon();
        let dt = grid.dt();
        let t = horizon - grid.time(n);
        let lo = grid.time(c);
        let hi = grid.time(c + 1);
        let d = eval(horizon, t).nrows();
        let mut zeroth = DMatrix::zeros(d, d);
        let mut first = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                // s = T - q runs over [T - hi, T - lo]; K(s, t) is singular at s = t
                zeroth[(i, j)] = tanh_sinh(
                    |_, _, db| eval(horizon - (hi - db), t)[(i, j)],
                    lo,
                    hi,
                    1e-12,
                )
                .0;
                first[(i, j)] = tanh_sinh(
                    |_, da, db| eval(horizon - (hi - db), t)[(i, j)] * da / dt,
                    lo,
                    hi,
                    1e-12,
                )
                .0;
            }
        }
        (zeroth, first)
    }

    /// Adds the trapezoid history `Σ_{m<n} h_m W(n, m)` and the rectangle
    /// predictor sum into `trap` and `rect`; returns the implicit weight of
    /// node `n`.
    fn history(
        &self,
        n: usize,
        h: &[Vec<Complex64>],
        trap: &mut [Complex64],
        rect: &mut [Complex64],
    ) -> DMatrix<f64> {
        let d = trap.len();
        match self {
            Self::Lag { weights, .. } => {
                let mut diag = DMatrix::zeros(d, d);
                for i in 0..d {
                    let hi = &h[i];
                    for j in 0..d {
                        let Some(e) = weights.entry(i, j) else {
                            continue;
                        };
                        let mut t = hi[0] * e.far[n];
                        let mut r = hi[0] * e.rect[n];
                        for m in 1..n {
                            let q = n - m;
                            t += hi[m] * (e.far[q] + e.near[q + 1]);
                            r += hi[m] * e.rect[q];
                        }
                        trap[j] += t;
                        rect[j] += r;
                        diag[(i, j)] = e.near[1];
                    }
                }
                diag
            }
            Self::General { eval, grid, .. } => {
                let mut diag = DMatrix::zeros(d, d);
                for c in 0..n {
                    let (zeroth, first) = Self::general_cell(eval, grid, n, c);
                    let left = &zeroth - &first;
                    for i in 0..d {
                        for j in 0..d {
                            trap[j] += h[i][c] * left[(i, j)];
                            rect[j] += h[i][c] * zeroth[(i, j)];
                            if c + 1 < n {
                                trap[j] += h[i][c + 1] * first[(i, j)];
                            }
                        }
                    }
                    if c + 1 == n {
                        diag = first;
                    }
                }
                diag
            }
        }
    }
}

fn row_times(v: &[Complex64], m: &DMatrix<f64>) -> Vec<Complex64> {
    let d = v.len();
    (0..d)
        .map(|j| (0..d).map(|i| v[i] * m[(i, j)]).sum())
        .collect()
}

struct Marched {
    psi_rev: Vec<Vec<Complex64>>,
    h_rev: Vec<Vec<Complex64>>,
}

fn check_cap(v: &[Complex64], n: usize, grid: &TimeGrid, cap: f64) -> Result<()> {
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if !norm.is_finite() || norm > cap {
        let j = grid.n_steps() - n;
        return Err(Error::BlowUp {
            node: j,
            time: grid.time(j),
            norm,
            cap,
        });
    }
    Ok(())
}

fn march(backend: &Backend, problem: &Problem, scheme: Scheme, opts: &RiccatiOptions) -> Result<Marched> {
    let d = problem.dim();
    let grid = problem.grid;
    let n_steps = grid.n_steps();
    let u = &problem.u;
    let mut psi_rev = Vec::with_capacity(n_steps + 1);
    let mut h_rev = Vec::with_capacity(n_steps + 1);
    // component-major copy of h for the history sums
    let mut h_cols: Vec<Vec<Complex64>> = vec![Vec::with_capacity(n_steps + 1); d];

    let psi0 = row_times(u, backend.forcing(0));
    check_cap(&psi0, 0, &grid, opts.blow_up_cap)?;
    let h0 = problem.rhs(0, &psi0);
    for i in 0..d {
        h_cols[i].push(h0[i]);
    }
    psi_rev.push(psi0);
    h_rev.push(h0);

    for n in 1..=n_steps {
        let base = row_times(u, backend.forcing(n));
        let mut trap = base.clone();
        let mut rect = base;
        let diag = backend.history(n, &h_cols, &mut trap, &mut rect);
        let implicit = |x: &[Complex64]| -> Vec<Complex64> {
            let hx = problem.rhs(n, x);
            let add = row_times(&hx, &diag);
            trap.iter().zip(add).map(|(a, b)| a + b).collect()
        };
        check_cap(&rect, n, &grid, opts.blow_up_cap)?;
        let psi = match scheme {
            Scheme::PredictorCorrector => implicit(&rect),
            Scheme::FixedPoint => {
                let mut x = rect;
                let mut converged = false;
                let mut last = f64::INFINITY;
                for _ in 0..opts.max_iterations {
                    let gx = implicit(&x);
                    let next: Vec<Complex64> = x
                        .iter()
                        .zip(&gx)
                        .map(|(a, b)| a * (1.0 - opts.damping) + b * opts.damping)
                        .collect();
                    last = next
                        .iter()
                        .zip(&x)
                        .map(|(a, b)| (a - b).norm())
                        .fold(0.0, f64::max);
                    x = next;
                    check_cap(&x, n, &grid, opts.blow_up_cap)?;
                    if last <= opts.tolerance * (1.0 + max_abs(&x)) {
                        converged = true;
                        break;
                    }
                }
                if !converged {
                    return Err(Error::NoConvergence {
                        node: n_steps - n,
                        iterations: opts.max_iterations,
                        last_update: last,
                    });
                }
                x
            }
        };
        check_cap(&psi, n, &grid, opts.blow_up_cap)?;
        let h = problem.rhs(n, &psi);
        for i in 0..d {
            h_cols[i].push(h[i]);
        }
        psi_rev.push(psi);
        h_rev.push(h);
    }
    Ok(Marched { psi_rev, h_rev })
}

/// Cumulative trapezoid of reversed-time samples.
fn cumulative<F>(n_nodes: usize, dt: f64, mut g: F) -> Vec<Complex64>
where
    F: FnMut(usize) -> Complex64,
{
    let mut out = Vec::with_capacity(n_nodes);
    out.push(ZERO);
    let mut prev = g(0);
    let mut acc = ZERO;
    for n in 1..n_nodes {
        let cur = g(n);
        acc += 0.5 * dt * (prev + cur);
        out.push(acc);
        prev = cur;
    }
    out
}

fn build_solution(
    problem: &Problem,
    marched: Marched,
    singular: bool,
) -> RiccatiSolution {
    let grid = problem.grid;
    let n = grid.n_steps();
    let psi: Vec<Vec<Complex64>> = marched.psi_rev.iter().rev().cloned().collect();
    let mut sol = RiccatiSolution {
        grid,
        u: problem.u.clone(),
        psi,
        phi: Vec::new(),
        chi: Vec::new(),
        y0: None,
        residual_norm: f64::NAN,
        residual_tolerance: f64::INFINITY,
        residual_constant: f64::NAN,
        residuals: vec![f64::NAN; n + 1],
        singular_terminal: singular,
    };
    fill_phi_chi(&mut sol, &problem.coeffs, &problem.f);
    sol
}

fn fill_phi_chi(sol: &mut RiccatiSolution, coeffs: &[CoefficientSample], f: &[Vec<Complex64>]) {
    let grid = sol.grid;
    let n = grid.n_steps();
    let dt = grid.dt();
    let d = sol.dim();
    sol.phi = cumulative(n + 1, dt, |m| {
        let c = &coeffs[n - m];
        let v = &sol.psi[n - m];
        c.row_times_b0(v) + 0.5 * c.constant_quadratic(v)
    });
    let h: Vec<Vec<Complex64>> = (0..=n)
        .map(|m| coeffs[n - m].riccati_rhs(&f[n - m], &sol.psi[n - m]))
        .collect();
    let cols: Vec<Vec<Complex64>> = (0..d)
        .map(|i| {
            cumulative(n + 1, dt, |m| h[m][i])
                .into_iter()
                .map(|v| v + sol.u[i])
                .collect()
        })
        .collect();
    sol.chi = (0..=n).map(|j| (0..d).map(|i| cols[i][j]).collect()).collect();
}

/// Re-evaluates the right side at the coarse nodes with a finer product
/// quadrature of the linearly interpolated `ψ`.
fn check_residual(
    sol: &mut RiccatiSolution,
    kernel: &Kernel,
    c: &AffineCoefficients,
    p: &FLParams,
    h_rev: &[Vec<Complex64>],
    opts: &RiccatiOptions,
) -> Result<()> {
    let grid = sol.grid;
    let n = grid.n_steps();
    let factor = opts.residual_refinement.max(2);
    let fine = grid.refined(factor);
    let backend = Backend::new(kernel, &fine, opts.quadrature)?;
    let problem = Problem::new(c, p, fine)?;
    let d = sol.dim();
    let start = usize::from(sol.singular_terminal);

    let fine_psi: Vec<Vec<Complex64>> = (0..=fine.n_steps())
        .map(|q| {
            let (cell, s) = (q / factor, q % factor);
            if s == 0 {
                sol.psi_rev(cell).to_vec()
            } else {
                let w = s as f64 / factor as f64;
                let (a, b) = (sol.psi_rev(cell), sol.psi_rev(cell + 1));
                a.iter().zip(b).map(|(x, y)| x * (1.0 - w) + y * w).collect()
            }
        })
        .collect();
    let fine_h: Vec<Vec<Complex64>> = (0..=fine.n_steps())
        .map(|q| problem.rhs(q, &fine_psi[q]))
        .collect();
    let cols: Vec<Vec<Complex64>> = (0..d)
        .map(|i| fine_h.iter().map(|h| h[i]).collect())
        .collect();

    let mut worst = 0.0f64;
    for m in start.max(1)..=n {
        let q = m * factor;
        let base = row_times(&sol.u, backend.forcing(q));
        let mut trap = base.clone();
        let mut rect = base;
        let diag = backend.history(q, &cols, &mut trap, &mut rect);
        let own = row_times(&fine_h[q], &diag);
        let rhs: Vec<Complex64> = trap.iter().zip(own).map(|(a, b)| a + b).collect();
        let err = rhs
            .iter()
            .zip(sol.psi_rev(m))
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        sol.residuals[n - m] = err;
        worst = worst.max(err);
    }
    let h_sup = h_rev
        .iter()
        .skip(start)
        .map(|h| max_abs(h))
        .fold(0.0, f64::max);
    let alpha = kernel_order(kernel);
    let order = (2.0 * alpha - 1.0).min(1.0);
    sol.residual_norm = worst;
    sol.residual_constant = 1.0 + h_sup;
    sol.residual_tolerance = 5.0 * grid.dt().powf(order) * sol.residual_constant;
    if !sol.residual_ok() {
        log::warn!(
            "Riccati residual {:.3e} exceeds tolerance {:.3e}",
            sol.residual_norm,
            sol.residual_tolerance
        );
    }
    Ok(())
}

/// Regularity exponent of the kernel near zero: the fractional exponent, or
/// one plus the numerically observed power of `K̄(r)` as `r → 0`.
pub fn kernel_order(k: &Kernel) -> f64 {
    if let Some(a) = k.fractional_exponents() {
        return a.into_iter().fold(1.0, f64::min);
    }
    if !k.is_convolution() {
        return 1.0;
    }
    let mut order = 1.0f64;
    for i in 0..k.dim() {
        let (a, b) = (k.component_value(i, 1e-9), k.component_value(i, 2e-9));
        if a > 0.0 && b > 0.0 {
            let slope = (b / a).ln() / std::f64::consts::LN_2;
            order = order.min((1.0 + slope).clamp(0.5, 1.0));
        }
    }
    order
}

fn solve_with(
    kernel: &Kernel,
    c: &AffineCoefficients,
    p: &FLParams,
    grid: &TimeGrid,
    scheme: Scheme,
    opts: &RiccatiOptions,
) -> Result<RiccatiSolution> {
    if kernel.dim() != c.dim() {
        return Err(Error::Validation(format!(
            "kernel dimension {} does not match coefficients {}",
            kernel.dim(),
            c.dim()
        )));
    }
    let problem = Problem::new(c, p, *grid)?;
    let backend = Backend::new(kernel, grid, opts.quadrature)?;
    let singular = backend.singular_for(&p.u);
    let marched = march(&backend, &problem, scheme, opts)?;
    let h_rev = marched.h_rev.clone();
    let mut sol = build_solution(&problem, marched, singular);
    if opts.check_residual {
        check_residual(&mut sol, kernel, c, p, &h_rev, opts)?;
    }
    Ok(sol)
}

/// Backward product-integration marching with a damped fixed point at each
/// node. Works for convolution kernels and, with adaptive quadrature opted
/// in, for general `K(t, s)`.
pub fn solve_riccati_general(
    kernel: &Kernel,
    c: &AffineCoefficients,
    p: &FLParams,
    grid: &TimeGrid,
    opts: &RiccatiOptions,
) -> Result<RiccatiSolution> {
    solve_with(kernel, c, p, grid, Scheme::FixedPoint, opts)
}

/// Fractional Adams predictor-corrector for the diagonal fractional kernel
/// with exponents `alphas`.
pub fn solve_riccati_fractional(
    alphas: &[f64],
    c: &AffineCoefficients,
    p: &FLParams,
    grid: &TimeGrid,
    opts: &RiccatiOptions,
) -> Result<RiccatiSolution> {
    for &a in alphas {
        if !(a > 0.5 && a <= 1.0) {
            return Err(Error::Validation(format!(
                "fractional Riccati solver needs exponents in (1/2, 1], got {a}"
            )));
        }
    }
    let kernel = Kernel::fractional(alphas.to_vec())?;
    solve_with(&kernel, c, p, grid, Scheme::PredictorCorrector, opts)
}

/// Predictor-corrector marching for any convolution kernel.
pub fn solve_riccati_convolution(
    kernel: &Kernel,
    c: &AffineCoefficients,
    p: &FLParams,
    grid: &TimeGrid,
    opts: &RiccatiOptions,
) -> Result<RiccatiSolution> {
    if !kernel.is_convolution() {
        return Err(Error::Unsupported(
            "predictor-corrector marching needs a convolution kernel".into(),
        ));
    }
    solve_with(kernel, c, p, grid, Scheme::PredictorCorrector, opts)
}

/// Heston Riccati system: `ψ₁` by quadrature of `f₁`, `ψ₂` by the scalar
/// predictor-corrector. Inadmissible `(u, f)` are rejected before solving.
pub fn solve_heston_psi(
    params: &HestonParams,
    p: &FLParams,
    grid: &TimeGrid,
    opts: &RiccatiOptions,
) -> Result<RiccatiSolution> {
    let report = params.validate_admissibility(p, grid)?;
    if let Some(v) = &report.violation {
        return Err(Error::RejectedParameters(v.to_string()));
    }
    let n = grid.n_steps();
    let dt = grid.dt();
    let s = params.sampled(grid);
    let psi1 = &report.psi1;
    let f2: Vec<Complex64> = grid.times().into_iter().map(|t| p.f[1].eval(t)).collect();
    let u2 = p.u[1];

    let weights = LagWeights::new(params.kernel(), grid)?;
    let w = weights.diagonal()?[0].clone();
    let alpha = kernel_order(params.kernel());
    let mut forcing: Vec<f64> = (0..=n)
        .map(|m| params.kernel().component_value(0, grid.time(m)))
        .collect();
    let singular = alpha < 1.0 || !forcing[0].is_finite();
    if singular {
        forcing[0] = w.rect[1] / dt;
    }
    let singular = singular && u2 != ZERO;

    // reversed-time source: h(x) = c0 + c1 x + c2 x²
    let coef = |m: usize| {
        let j = n - m;
        let p1 = psi1[j];
        let c0 = f2[j] + 0.5 * s.eta[j] * s.eta[j] * (p1 * p1 - p1);
        let c1 = s.rho * s.sigma_bar[j] * s.eta[j] * p1 - s.kappa[j];
        let c2 = 0.5 * s.sigma_bar[j] * s.sigma_bar[j];
        (c0, c1, c2)
    };
    let coefs: Vec<(Complex64, Complex64, f64)> = (0..=n).map(coef).collect();
    let h = |m: usize, x: Complex64| {
        let (c0, c1, c2) = coefs[m];
        c0 + c1 * x + c2 * x * x
    };

    let mut psi2_rev = Vec::with_capacity(n + 1);
    let mut h_rev = Vec::with_capacity(n + 1);
    let x0 = u2 * forcing[0];
    psi2_rev.push(x0);
    h_rev.push(h(0, x0));
    let inner: Vec<f64> = (0..n)
        .map(|q| if q == 0 { 0.0 } else { w.far[q] + w.near[q + 1] })
        .collect();
    for m in 1..=n {
        let mut trap = u2 * forcing[m] + h_rev[0] * w.far[m];
        let mut rect = u2 * forcing[m] + h_rev[0] * w.rect[m];
        for (k, hk) in h_rev.iter().enumerate().skip(1) {
            let q = m - k;
            trap += hk * inner[q];
            rect += hk * w.rect[q];
        }
        if !rect.norm().is_finite() || rect.norm() > opts.blow_up_cap {
            return Err(Error::BlowUp {
                node: n - m,
                time: grid.time(n - m),
                norm: rect.norm(),
                cap: opts.blow_up_cap,
            });
        }
        let x = trap + h(m, rect) * w.near[1];
        if !x.norm().is_finite() || x.norm() > opts.blow_up_cap {
            return Err(Error::BlowUp {
                node: n - m,
                time: grid.time(n - m),
                norm: x.norm(),
                cap: opts.blow_up_cap,
            });
        }
        psi2_rev.push(x);
        h_rev.push(h(m, x));
    }

    for (m, v) in psi2_rev.iter().enumerate() {
        if v.re > SIGN_TOLERANCE {
            let j = n - m;
            return Err(Error::NumericalViolation(format!(
                "Re psi2 = {:e} > 0 at node {j} (t = {})",
                v.re,
                grid.time(j)
            )));
        }
    }

    let (kernel2, coeffs) = params.to_affine();
    let problem = Problem::new(&coeffs, p, *grid)?;
    let marched = Marched {
        psi_rev: (0..=n)
            .map(|m| vec![psi1[n - m], psi2_rev[m]])
            .collect(),
        h_rev: (0..=n)
            .map(|m| vec![p.f[0].eval(grid.time(n - m)), h_rev[m]])
            .collect(),
    };
    let h_all = marched.h_rev.clone();
    let mut sol = build_solution(&problem, marched, singular);
    if opts.check_residual {
        check_residual(&mut sol, &kernel2, &coeffs, p, &h_all, opts)?;
    }
    Ok(sol)
}

/// Recomputes `φ` and `χ` from `ψ` by trapezoidal quadrature.
pub fn phi_chi(sol: &mut RiccatiSolution, c: &AffineCoefficients, p: &FLParams) {
    let grid = sol.grid;
    let coeffs = c.regularized(&grid).on_grid(&grid);
    fill_phi_chi(sol, &coeffs, &p.f_on_grid(&grid));
}

/// `Y₀ = u X₀ + ∫_0^T f X₀ + ψ b(s, X₀) + ½ ψ a(s, X₀) ψᵀ ds` by the
/// trapezoid rule, cross-checked against `φ(T) + χ(T) X₀`.
pub fn y0_direct(
    c: &AffineCoefficients,
    p: &FLParams,
    sol: &RiccatiSolution,
    x0: &[f64],
) -> Result<Complex64> {
    let grid = sol.grid;
    let n = grid.n_steps();
    let coeffs = c.regularized(&grid).on_grid(&grid);
    let f = p.f_on_grid(&grid);
    let integrand = |j: usize| {
        let cs = &coeffs[j];
        let v = &sol.psi[j];
        let drift = cs.drift(x0);
        let a = cs.diffusion_squared(x0);
        dot(&f[j], x0)
            + v.iter().zip(drift.iter()).map(|(a, b)| a * b).sum::<Complex64>()
            + 0.5 * crate::affine::bilinear(v, &a)
    };
    let integral = cumulative(n + 1, grid.dt(), |m| integrand(n - m))[n];
    let direct = dot(&p.u, x0) + integral;
    let structural = sol.phi[n] + dot(&sol.chi[n], x0);
    let scale = direct.norm().max(structural.norm()).max(1e-300);
    if (direct - structural).norm() > 1e-6 * scale.max(1.0) {
        return Err(Error::Consistency(format!(
            "Y0 by direct quadrature {direct} differs from phi(T) + chi(T) X0 = {structural}"
        )));
    }
    Ok(direct)
}

/// `Y` along one path by Euler accumulation of
/// `dY = ψ σ(s, X) dW - ½ ψ a(s, X) ψᵀ ds`.
pub fn y_forward_path(
    sol: &RiccatiSolution,
    c: &AffineCoefficients,
    path: &SimPath,
) -> Result<Vec<Complex64>> {
    let grid = sol.grid;
    if !grid.same_as(&path.grid) || path.dim != sol.dim() {
        return Err(Error::Validation(
            "path and Riccati solution must share grid and dimension".into(),
        ));
    }
    let n = grid.n_steps();
    let dt = grid.dt();
    let x0 = path.state(0);
    let y0 = sol.phi[n] + dot(&sol.chi[n], x0);
    let c = c.regularized(&grid);
    let mut out = Vec::with_capacity(n + 1);
    out.push(y0);
    let mut y = y0;
    for k in 0..n {
        let t = grid.time(k);
        let x = path.state(k);
        let psi = &sol.psi[k];
        let sigma = c.sigma_factor(t, x)?;
        let dw = path.increment(k);
        let mut stoch = ZERO;
        for (i, p) in psi.iter().enumerate() {
            let sdw: f64 = (0..sigma.ncols()).map(|l| sigma[(i, l)] * dw[l]).sum();
            stoch += p * sdw;
        }
        let a = c.sample(t).diffusion_squared(x);
        y += stoch - 0.5 * crate::affine::bilinear(psi, &a) * dt;
        out.push(y);
    }
    Ok(out)
}

/// Weights of the past-path representation at node `t_k`.
#[derive(Debug, Clone)]
pub struct PastPathWeights {
    pub node: usize,
    pub t: f64,
    /// `g_t(t_i)` for `i = 0..=k`.
    pub g: Vec<Vec<Complex64>>,
    /// `ψ(t) L({0})`.
    pub atom_term: Vec<Complex64>,
    pub total_variation: f64,
}

/// Cell integrals of each resolvent component on the grid.
struct ResolventCells {
    zeroth: Vec<Vec<f64>>,
    first: Vec<Vec<f64>>,
}

impl ResolventCells {
    fn new(l: &ResolventFirstKind, grid: &TimeGrid) -> Self {
        let n = grid.n_steps();
        let dt = grid.dt();
        let mut zeroth = Vec::with_capacity(l.dim());
        let mut first = Vec::with_capacity(l.dim());
        for comp in l.components() {
            let (z, f): (Vec<f64>, Vec<f64>) = (0..n)
                .map(|c| {
                    let (lo, hi) = (grid.time(c), grid.time(c + 1));
                    match comp {
                        ResolventComponent::Dirac => (0.0, 0.0),
                        _ => (comp.integral(lo, hi), comp.first_moment(lo, hi) / dt),
                    }
                })
                .unzip();
            zeroth.push(z);
            first.push(f);
        }
        Self { zeroth, first }
    }
}

/// `g_t(r) = -∫_{(r, T-t+r]} ψ(t - r + s) L(ds)` at the grid nodes of
/// `[0, t]`, with `ψ` interpolated linearly.
pub fn past_path_weights(
    sol: &RiccatiSolution,
    l: &ResolventFirstKind,
    k: usize,
) -> Result<PastPathWeights> {
    let cells = ResolventCells::new(l, &sol.grid);
    past_path_weights_with(sol, l, &cells, k)
}

fn past_path_weights_with(
    sol: &RiccatiSolution,
    l: &ResolventFirstKind,
    cells: &ResolventCells,
    k: usize,
) -> Result<PastPathWeights> {
    let grid = sol.grid;
    let n = grid.n_steps();
    let d = sol.dim();
    if l.dim() != d {
        return Err(Error::Validation(
            "resolvent and Riccati solution dimensions differ".into(),
        ));
    }
    if k > n {
        return Err(Error::Domain(format!("node {k} beyond the grid")));
    }
    let mut g = vec![vec![ZERO; d]; k + 1];
    for (c, comp) in l.components().iter().enumerate() {
        if matches!(comp, ResolventComponent::Dirac) {
            continue;
        }
        let (z, f) = (&cells.zeroth[c], &cells.first[c]);
        for (i, gi) in g.iter_mut().enumerate() {
            let mut acc = ZERO;
            for q in 0..n - k {
                let cell = i + q;
                acc += sol.psi[k + q][c] * (z[cell] - f[cell]) + sol.psi[k + q + 1][c] * f[cell];
            }
            gi[c] = -acc;
        }
    }
    let atom = l.atom_at_zero();
    let atom_term = row_times(&sol.psi[k], &atom);
    let mut tv = 0.0;
    for w in g.windows(2) {
        tv += w[1].iter().zip(&w[0]).map(|(a, b)| (a - b).norm()).sum::<f64>();
    }
    Ok(PastPathWeights {
        node: k,
        t: grid.time(k),
        g,
        atom_term,
        total_variation: tv,
    })
}

/// `Y_t` from the past path on `[0, t_k]`.
pub fn y_past_path(
    sol: &RiccatiSolution,
    l: &ResolventFirstKind,
    p: &FLParams,
    path: &SimPath,
    k: usize,
) -> Result<Complex64> {
    let w = past_path_weights(sol, l, k)?;
    y_past_path_with(sol, &w, p, path)
}

pub fn y_past_path_with(
    sol: &RiccatiSolution,
    w: &PastPathWeights,
    p: &FLParams,
    path: &SimPath,
) -> Result<Complex64> {
    let grid = sol.grid;
    if !grid.same_as(&path.grid) || path.dim != sol.dim() {
        return Err(Error::Validation(
            "path and Riccati solution must share grid and dimension".into(),
        ));
    }
    let n = grid.n_steps();
    let k = w.node;
    let dt = grid.dt();
    let x = |j: usize| path.raw_state(j);
    let mut y = -dot(&w.g[k], x(0)) + dot(&w.atom_term, x(k));
    for i in 0..k {
        let dg: Vec<Complex64> = w.g[i + 1].iter().zip(&w.g[i]).map(|(a, b)| a - b).collect();
        y += dot(&dg, x(k - i - 1));
    }
    for j in 0..k {
        y += dot(&p.f_at(grid.time(j)), x(j)) * dt;
    }
    y += sol.phi[n - k];
    Ok(y)
}

/// `Y` along a whole path by the past-path formula at every node.
pub fn y_past_path_series(
    sol: &RiccatiSolution,
    l: &ResolventFirstKind,
    p: &FLParams,
    paths: &[&SimPath],
) -> Result<Vec<Vec<Complex64>>> {
    let cells = ResolventCells::new(l, &sol.grid);
    let n = sol.grid.n_steps();
    let mut out = vec![Vec::with_capacity(n + 1); paths.len()];
    for k in 0..=n {
        let w = past_path_weights_with(sol, l, &cells, k)?;
        for (o, path) in out.iter_mut().zip(paths) {
            o.push(y_past_path_with(sol, &w, p, path)?);
        }
    }
    Ok(out)
}

/// Past-path weights matched to the Euler scheme of [`crate::simulate`].
///
/// The scheme writes `X_k - X₀ = Σ_{i<k} R_{k-i} ΔZ_i` with cell weights
/// `R_p = ∫_{(p-1)Δ}^{pΔ} K̄ / Δ`. Its discrete resolvent `C ⋆ R = 1`
/// recovers the increments from the path, and the shifted Riccati weights
/// `Ψ_k(i) = u R_{N-i} + Σ_{j≥k} h(t_j) R_{j-i} Δ` play the role of
/// `ψ(t - r + s)` in `g_t`. The result is `Y_k = c_k + Σ_{j≤k} ĝ_k(j) X_j`.
#[derive(Debug, Clone)]
pub struct SchemePastPath {
    grid: TimeGrid,
    /// `ĝ[k][j][c]` for `j = 0..=k`, the weight of `X_j` at node `k`.
    weights: Vec<Vec<Vec<Complex64>>>,
    /// Deterministic part `φ(T - t_k)`.
    offsets: Vec<Complex64>,
    f: Vec<Vec<Complex64>>,
}

impl SchemePastPath {
    pub fn new(sol: &RiccatiSolution, k: &Kernel, c: &AffineCoefficients, p: &FLParams) -> Result<Self> {
        let grid = sol.grid;
        let n = grid.n_steps();
        let dt = grid.dt();
        let d = sol.dim();
        if !k.is_diagonal() || k.dim() != d || c.dim() != d {
            return Err(Error::Unsupported(
                "scheme past-path weights need a diagonal kernel of matching dimension".into(),
            ));
        }
        let lw = LagWeights::new(k, &grid)?;
        let coeffs = c.regularized(&grid).on_grid(&grid);
        let f = p.f_on_grid(&grid);
        let h: Vec<Vec<Complex64>> = (0..n).map(|j| coeffs[j].riccati_rhs(&f[j], &sol.psi[j])).collect();
        let mut weights: Vec<Vec<Vec<Complex64>>> =
            (0..=n).map(|k_node| vec![vec![ZERO; d]; k_node + 1]).collect();
        for comp in 0..d {
            let entry = lw
                .entry(comp, comp)
                .ok_or_else(|| Error::Validation(format!("kernel component {comp} vanishes")))?;
            let r: Vec<f64> = (0..=n).map(|q| if q == 0 { 0.0 } else { entry.rect[q] / dt }).collect();
            // C ⋆ R = 1 at every node j ≥ 1
            let mut cres = vec![0.0; n];
            for j in 1..=n {
                let mut rhs = 1.0;
                for (m, cm) in cres.iter().enumerate().take(j - 1) {
                    rhs -= cm * r[j - m];
                }
                cres[j - 1] = rhs / r[1];
            }
            let u = p.u[comp];
            let mut shifted: Vec<Complex64> = (0..n).map(|i| u * r[n - i]).collect();
            let mut a = vec![ZERO; n + 1];
            for k_node in (1..=n).rev() {
                if k_node < n {
                    let hk = h[k_node][comp] * dt;
                    for (i, s) in shifted.iter_mut().enumerate().take(k_node) {
                        *s += hk * r[k_node - i];
                    }
                }
                // Σ_{i<k} Ψ_k(i) ΔZ_i = Σ_{i=1}^{k} a_i Z_i by parts
                a[k_node] = shifted[k_node - 1];
                for i in 1..k_node {
                    a[i] = shifted[i - 1] - shifted[i];
                }
                let g = &mut weights[k_node];
                let mut x0_weight = ZERO;
                for j in 1..=k_node {
                    let mut acc = ZERO;
                    for i in j..=k_node {
                        acc += a[i] * cres[i - j];
                    }
                    g[j][comp] = acc;
                    x0_weight -= acc;
                }
                g[0][comp] = x0_weight;
            }
        }
        let offsets = (0..=n).map(|k_node| sol.phi[n - k_node]).collect();
        // X₀ enters through χ(T - t_k)
        for (k_node, w) in weights.iter_mut().enumerate() {
            for comp in 0..d {
                w[0][comp] += sol.chi[n - k_node][comp];
            }
        }
        Ok(Self {
            grid,
            weights,
            offsets,
            f,
        })
    }

    /// `ĝ_k(j)` for `j = 0..=k`.
    pub fn weights(&self, k: usize) -> &[Vec<Complex64>] {
        &self.weights[k]
    }

    /// `Y` at every node of one path, from the raw scheme states.
    pub fn series(&self, path: &SimPath) -> Result<Vec<Complex64>> {
        if !self.grid.same_as(&path.grid) {
            return Err(Error::Validation("path and weights must share the grid".into()));
        }
        let n = self.grid.n_steps();
        let dt = self.grid.dt();
        let mut running = ZERO;
        let mut out = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let mut y = self.offsets[k] + running;
            for (j, g) in self.weights[k].iter().enumerate() {
                y += dot(g, path.raw_state(j));
            }
            out.push(y);
            if k < n {
                running += dot(&self.f[k], path.raw_state(k)) * dt;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::{StateSpace, TimeFunction};
    use nalgebra::DVector;

    fn c64(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn linear_coeffs(lambda: f64) -> AffineCoefficients {
        AffineCoefficients::constant(
            &DVector::zeros(1),
            &DMatrix::from_element(1, 1, lambda),
            &[DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)],
            StateSpace::Real,
        )
        .unwrap()
    }

    #[test]
    fn zero_input_gives_zero_solution() {
        let g = TimeGrid::new(1.0, 50).unwrap();
        let c = linear_coeffs(-0.5);
        let p = FLParams::terminal(vec![ZERO]);
        let k = Kernel::fractional(vec![0.7]).unwrap();
        let mut sol = solve_riccati_general(&k, &c, &p, &g, &RiccatiOptions::default()).unwrap();
        assert!(sol.psi.iter().all(|v| v[0] == ZERO));
        assert!(sol.phi.iter().all(|v| *v == ZERO));
        assert!(sol.chi.iter().all(|v| v[0] == ZERO));
        assert_eq!(sol.set_initial_state(&[1.0]), ZERO);
    }

    #[test]
    fn scalar_ode_with_identity_kernel() {
        // ψ' = -(λψ + ½ a ψ²) backwards, ψ(T) = u: logistic closed form
        let (lambda, a, u) = (-0.8, 0.6, c64(-0.5, 0.3));
        let c = AffineCoefficients::constant(
            &DVector::zeros(1),
            &DMatrix::from_element(1, 1, lambda),
            &[DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, a)],
            StateSpace::Real,
        )
        .unwrap();
        let g = TimeGrid::new(1.0, 400).unwrap();
        let p = FLParams::terminal(vec![u]);
        let sol =
            solve_riccati_general(&Kernel::identity(1), &c, &p, &g, &RiccatiOptions::default())
                .unwrap();
        // dψ̃/dr = λψ̃ + (a/2)ψ̃²  →  ψ̃(r) = λ u e^{λr} / (λ - (a/2) u (e^{λr} - 1))
        for m in 0..=400 {
            let r = g.time(m);
            let e = (lambda * r).exp();
            let exact = lambda * u * e / (lambda - 0.5 * a * u * (e - 1.0));
            assert!((sol.psi_rev(m)[0] - exact).norm() < 1e-5);
        }
        assert!(sol.residual_ok(), "{} > {}", sol.residual_norm, sol.residual_tolerance);
    }

    #[test]
    fn mittag_leffler_linear_case() {
        // u = 0, f = c, b = λ: ψ̃(r) = c r^α E_{α,α+1}(λ r^α)
        let (alpha, lambda, cst) = (0.6, -0.7, 1.3);
        let c = linear_coeffs(lambda);
        let p = FLParams::new(
            vec![ZERO],
            vec![ComplexCurve::real(TimeFunction::Constant(cst))],
        )
        .unwrap();
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let sol =
            solve_riccati_fractional(&[alpha], &c, &p, &g, &RiccatiOptions::default()).unwrap();
        let z: f64 = lambda;
        let mut ml = 0.0;
        for k in 0..200 {
            ml += z.powi(k) / crate::special::gamma(alpha * k as f64 + alpha + 1.0);
        }
        let exact = cst * ml;
        assert!((sol.psi[0][0].re - exact).abs() < 1e-5, "{} vs {exact}", sol.psi[0][0].re);
        assert!(sol.residual_ok());
    }

    #[test]
    fn blow_up_is_reported() {
        // ψ̃' = ψ̃² explodes at r = 1/u
        let c = AffineCoefficients::constant(
            &DVector::zeros(1),
            &DMatrix::zeros(1, 1),
            &[DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 2.0)],
            StateSpace::Real,
        )
        .unwrap();
        let g = TimeGrid::new(1.0, 200).unwrap();
        let p = FLParams::terminal(vec![c64(4.0, 0.0)]);
        let err = solve_riccati_general(&Kernel::identity(1), &c, &p, &g, &RiccatiOptions::default());
        assert!(matches!(err, Err(Error::BlowUp { .. }) | Err(Error::NoConvergence { .. })));
    }

    #[test]
    fn general_kernel_needs_opt_in_and_matches_convolution() {
        let alpha = 0.8;
        let gk: GeneralFn = std::sync::Arc::new(move |t: f64, s: f64| {
            let v = if t > s { (t - s).powf(alpha - 1.0) / crate::special::gamma(alpha) } else { 0.0 };
            DMatrix::from_element(1, 1, v)
        });
        let general = Kernel::general(1, gk);
        let c = linear_coeffs(-0.5);
        let p = FLParams::new(
            vec![ZERO],
            vec![ComplexCurve::real(TimeFunction::Constant(1.0))],
        )
        .unwrap();
        let g = TimeGrid::new(1.0, 40).unwrap();
        assert!(matches!(
            solve_riccati_general(&general, &c, &p, &g, &RiccatiOptions::default()),
            Err(Error::Unsupported(_))
        ));
        let opts = RiccatiOptions {
            quadrature: QuadraturePolicy::AllowAdaptive,
            check_residual: false,
            ..Default::default()
        };
        let a = solve_riccati_general(&general, &c, &p, &g, &opts).unwrap();
        let b = solve_riccati_general(&Kernel::fractional(vec![alpha]).unwrap(), &c, &p, &g, &opts)
            .unwrap();
        for (x, y) in a.psi.iter().zip(&b.psi) {
            assert!((x[0] - y[0]).norm() < 1e-8);
        }
    }

    #[test]
    fn phi_is_linear_in_psi_without_constant_diffusion() {
        let c = AffineCoefficients::constant(
            &DVector::from_vec(vec![0.3]),
            &DMatrix::from_element(1, 1, -0.5),
            &[DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 0.2)],
            StateSpace::Orthant,
        )
        .unwrap();
        let g = TimeGrid::new(1.0, 100).unwrap();
        let p = FLParams::terminal(vec![c64(0.0, 1.0)]);
        let mut sol = solve_riccati_general(&Kernel::identity(1), &c, &p, &g, &RiccatiOptions::default())
            .unwrap();
        let phi = sol.phi.clone();
        for v in sol.psi.iter_mut() {
            v[0] *= 2.0;
        }
        phi_chi(&mut sol, &c, &p);
        for (a, b) in phi.iter().zip(&sol.phi) {
            assert!((2.0 * a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn y0_routes_agree() {
        let c = AffineCoefficients::constant(
            &DVector::from_vec(vec![0.1, 0.3]),
            &DMatrix::from_row_slice(2, 2, &[-0.2, 0.1, 0.0, -0.5]),
            &[
                DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.2]),
                DMatrix::zeros(2, 2),
                DMatrix::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.1]),
            ],
            StateSpace::HalfLine,
        )
        .unwrap();
        let g = TimeGrid::new(1.0, 200).unwrap();
        let p = FLParams::new(
            vec![c64(0.0, 0.7), c64(-0.2, 0.1)],
            vec![ComplexCurve::zero(), ComplexCurve::real(TimeFunction::Constant(-0.3))],
        )
        .unwrap();
        let k = Kernel::fractional(vec![1.0, 0.75]).unwrap();
        let mut sol = solve_riccati_general(&k, &c, &p, &g, &RiccatiOptions::default()).unwrap();
        let x0 = [0.2, 0.05];
        let y0 = sol.set_initial_state(&x0);
        let direct = y0_direct(&c, &p, &sol, &x0).unwrap();
        assert!((y0 - direct).norm() <= 1e-8 * y0.norm().max(1.0));
    }
}
