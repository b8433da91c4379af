//! Monte Carlo simulation of Volterra SDEs by left-point Euler with exact
//! kernel cell weights, and the estimators built on it.
//!
//! Path `i` draws its Brownian increments from a ChaCha8 stream selected by
//! `(seed, i)`, so ensembles do not depend on the thread count. Estimators
//! reduce fixed blocks of paths and merge the blocks in order, which keeps
//! every statistic bit-identical across runs.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::affine::{AffineCoefficients, CoefficientSample, SigmaKind, StateSpace};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::heston::HestonParams;
use crate::kernels::{Kernel, KernelKind, LagWeights, QuadraturePolicy};
use crate::quadrature::tanh_sinh;
use crate::riccati::{dot, FLParams};

/// Paths per reduction block.
pub const BLOCK_SIZE: usize = 1024;
const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeTag {
    /// Left-point Euler with exact kernel cell weights.
    Euler,
    /// Euler with full truncation of the variance.
    EulerFullTruncation,
}

/// One simulated path. `states` are projected onto the state space,
/// `raw_states` are the scheme output before projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPath {
    pub grid: TimeGrid,
    pub dim: usize,
    pub noise_dim: usize,
    pub states: Vec<f64>,
    pub raw_states: Vec<f64>,
    pub increments: Vec<f64>,
}

impl SimPath {
    pub fn new(grid: TimeGrid, dim: usize, noise_dim: usize) -> Self {
        let n = grid.n_steps();
        Self {
            grid,
            dim,
            noise_dim,
            states: vec![0.0; (n + 1) * dim],
            raw_states: vec![0.0; (n + 1) * dim],
            increments: vec![0.0; n * noise_dim],
        }
    }

    #[inline]
    pub fn state(&self, j: usize) -> &[f64] {
        &self.states[j * self.dim..(j + 1) * self.dim]
    }

    #[inline]
    pub fn raw_state(&self, j: usize) -> &[f64] {
        &self.raw_states[j * self.dim..(j + 1) * self.dim]
    }

    #[inline]
    pub fn increment(&self, j: usize) -> &[f64] {
        &self.increments[j * self.noise_dim..(j + 1) * self.noise_dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.grid.n_steps())
    }
}

#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub seed: u64,
    pub dim: usize,
    pub noise_dim: usize,
    pub scheme: SchemeTag,
    pub paths: Vec<SimPath>,
}

/// Fills `out` with `n_steps × m` increments `√Δ Z` for path `path_index`.
pub fn brownian_increments(seed: u64, path_index: u64, grid: &TimeGrid, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    let sd = grid.dt().sqrt();
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = sd * z;
    }
}

/// Sums `factor` consecutive fine increments per coarse step.
pub fn coarsen_increments(fine: &[f64], noise_dim: usize, factor: usize, out: &mut [f64]) {
    let coarse_steps = out.len() / noise_dim;
    for j in 0..coarse_steps {
        for l in 0..noise_dim {
            let mut s = 0.0;
            for q in 0..factor {
                s += fine[(j * factor + q) * noise_dim + l];
            }
            out[j * noise_dim + l] = s;
        }
    }
}

/// `Σ_i a_i b_i` with four accumulators.
#[inline]
fn fast_dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let k = 4 * c;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..n {
        s += a[k] * b[k];
    }
    s
}

/// Kernel weights `∫_{t_i}^{t_{i+1}} K(t_j, s) ds / Δ`.
enum EulerWeights {
    /// Per entry, reversed lag weights `[w_N, …, w_1]` (None for zero entries).
    Lag {
        reversed: Vec<Option<Vec<f64>>>,
        constant: Vec<bool>,
    },
    /// `pairs[j][i]` for a general kernel.
    Pair(Vec<Vec<DMatrix<f64>>>),
}

impl EulerWeights {
    fn new(k: &Kernel, grid: &TimeGrid, policy: QuadraturePolicy) -> Result<Self> {
        let d = k.dim();
        let n = grid.n_steps();
        let dt = grid.dt();
        if let Some(eval) = k.general_eval() {
            if policy == QuadraturePolicy::ExactOnly {
                return Err(Error::Unsupported(
                    "simulation weights of a general kernel need adaptive quadrature (opt in)".into(),
                ));
            }
            let pairs = (0..=n)
                .map(|j| {
                    let t = grid.time(j);
                    (0..j)
                        .map(|i| {
                            let (lo, hi) = (grid.time(i), grid.time(i + 1));
                            DMatrix::from_fn(d, d, |a, b| {
                                tanh_sinh(|s, _, _| eval(t, s)[(a, b)], lo, hi, 1e-12).0 / dt
                            })
                        })
                        .collect()
                })
                .collect();
            return Ok(Self::Pair(pairs));
        }
        let lw = LagWeights::new(k, grid)?;
        let mut reversed = Vec::with_capacity(d * d);
        let mut constant = Vec::with_capacity(d * d);
        let unit = |i: usize| match k.kind() {
            KernelKind::Identity => true,
            KernelKind::Fractional(a) => a[i] == 1.0,
            _ => false,
        };
        for i in 0..d {
            for j in 0..d {
                match lw.entry(i, j) {
                    Some(w) => {
                        reversed.push(Some((0..n).map(|q| w.rect[n - q] / dt).collect()));
                        constant.push(i == j && unit(i));
                    }
                    None => {
                        reversed.push(None);
                        constant.push(false);
                    }
                }
            }
        }
        Ok(Self::Lag { reversed, constant })
    }
}

/// Euler scheme for a generic affine Volterra equation.
pub struct VolterraScheme {
    grid: TimeGrid,
    dim: usize,
    x0: Vec<f64>,
    state_space: StateSpace,
    coeffs: Vec<CoefficientSample>,
    sigma: SigmaKind,
    regularized: AffineCoefficients,
    /// `σ(t_j)` per step when `a` does not depend on the state.
    fixed_sigma: Option<Vec<DMatrix<f64>>>,
    weights: EulerWeights,
}

impl VolterraScheme {
    pub fn new(
        k: &Kernel,
        c: &AffineCoefficients,
        x0: &[f64],
        grid: &TimeGrid,
        policy: QuadraturePolicy,
    ) -> Result<Self> {
        let d = c.dim();
        if k.dim() != d || x0.len() != d {
            return Err(Error::Validation(format!(
                "kernel ({}), coefficients ({d}) and X0 ({}) dimensions differ",
                k.dim(),
                x0.len()
            )));
        }
        let regularized = c.regularized(grid);
        let coeffs = regularized.on_grid(grid);
        let state_free = matches!(c.sigma_kind(), SigmaKind::Generic)
            && coeffs.iter().all(|s| s.a[1..].iter().all(|m| m.iter().all(|v| *v == 0.0)));
        let fixed_sigma = if state_free {
            let zero = vec![0.0; d];
            Some(
                (0..grid.n_steps())
                    .map(|j| regularized.sigma_factor(grid.time(j), &zero))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            grid: *grid,
            dim: d,
            x0: x0.to_vec(),
            state_space: c.state_space(),
            coeffs,
            sigma: c.sigma_kind().clone(),
            regularized,
            fixed_sigma,
            weights: EulerWeights::new(k, grid, policy)?,
        })
    }

    pub fn noise_dim(&self) -> usize {
        match self.sigma {
            SigmaKind::Heston { .. } => 2,
            SigmaKind::Generic => self.dim,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Runs the scheme on the increments already stored in `path`
    /// (`deterministic` ignores them and freezes the noise at zero).
    fn run(&self, path: &mut SimPath, path_index: usize, deterministic: bool) -> Result<()> {
        let d = self.dim;
        let n = self.grid.n_steps();
        let dt = self.grid.dt();
        let m = self.noise_dim();
        // dz[comp][i] = (b_i Δ + σ_i ΔW_i)_comp
        let mut dz = vec![vec![0.0; n]; d];
        path.raw_states[..d].copy_from_slice(&self.x0);
        let mut x = self.x0.clone();
        self.state_space.project(&mut x);
        path.states[..d].copy_from_slice(&x);
        let mut step = vec![0.0; d];
        let mut next = vec![0.0; d];
        for j in 0..n {
            let t = self.grid.time(j);
            let cs = &self.coeffs[j];
            {
                let xs = &path.states[j * d..(j + 1) * d];
                for (a, s) in step.iter_mut().enumerate() {
                    let mut v = cs.b0[a];
                    for (b, x) in xs.iter().enumerate() {
                        v += cs.b[(a, b)] * x;
                    }
                    *s = v * dt;
                }
                if !deterministic {
                    let owned;
                    let sigma = match &self.fixed_sigma {
                        Some(f) => &f[j],
                        None => {
                            owned = self.regularized.sigma_factor(t, xs).map_err(|e| Error::SimulationFailure {
                                path: path_index,
                                step: j,
                                reason: e.to_string(),
                            })?;
                            &owned
                        }
                    };
                    let dw = &path.increments[j * m..(j + 1) * m];
                    for (a, s) in step.iter_mut().enumerate() {
                        for (l, w) in dw.iter().enumerate() {
                            *s += sigma[(a, l)] * w;
                        }
                    }
                }
            }
            for c in 0..d {
                dz[c][j] = step[c];
            }
            match &self.weights {
                EulerWeights::Lag { reversed, constant } => {
                    for a in 0..d {
                        let mut v = self.x0[a];
                        for b in 0..d {
                            let idx = a * d + b;
                            let Some(wr) = &reversed[idx] else { continue };
                            if constant[idx] {
                                v += dz[b][..=j].iter().sum::<f64>() * wr[0];
                            } else {
                                v += fast_dot(&dz[b][..=j], &wr[n - j - 1..]);
                            }
                        }
                        next[a] = v;
                    }
                }
                EulerWeights::Pair(pairs) => {
                    let row = &pairs[j + 1];
                    for a in 0..d {
                        let mut v = self.x0[a];
                        for (i, w) in row.iter().enumerate() {
                            for b in 0..d {
                                v += w[(a, b)] * dz[b][i];
                            }
                        }
                        next[a] = v;
                    }
                }
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::SimulationFailure {
                    path: path_index,
                    step: j + 1,
                    reason: "non-finite state".into(),
                });
            }
            path.raw_states[(j + 1) * d..(j + 2) * d].copy_from_slice(&next);
            self.state_space.project(&mut next);
            path.states[(j + 1) * d..(j + 2) * d].copy_from_slice(&next);
        }
        Ok(())
    }

    pub fn simulate_path(&self, seed: u64, path_index: usize) -> Result<SimPath> {
        let mut path = SimPath::new(self.grid, self.dim, self.noise_dim());
        brownian_increments(seed, path_index as u64, &self.grid, &mut path.increments);
        self.run(&mut path, path_index, false)?;
        Ok(path)
    }
}

/// `X_t = X₀ + ∫ K(t,s) b(s,X_s) ds + ∫ K(t,s) σ(s,X_s) dW_s` by Euler.
pub fn simulate_volterra(
    k: &Kernel,
    c: &AffineCoefficients,
    x0: &[f64],
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    simulate_volterra_with(k, c, x0, grid, n_paths, seed, QuadraturePolicy::ExactOnly)
}

pub fn simulate_volterra_with(
    k: &Kernel,
    c: &AffineCoefficients,
    x0: &[f64],
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    policy: QuadraturePolicy,
) -> Result<PathEnsemble> {
    let scheme = VolterraScheme::new(k, c, x0, grid, policy)?;
    let paths = (0..n_paths)
        .into_par_iter()
        .map(|i| scheme.simulate_path(seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(PathEnsemble {
        grid: *grid,
        n_paths,
        seed,
        dim: c.dim(),
        noise_dim: scheme.noise_dim(),
        scheme: SchemeTag::Euler,
        paths,
    })
}

/// `m(t) = X₀ + ∫ K(t,s) b(s, m(s)) ds` by the same marching without noise.
pub fn mean_path_deterministic(
    k: &Kernel,
    c: &AffineCoefficients,
    x0: &[f64],
    grid: &TimeGrid,
) -> Result<Vec<Vec<f64>>> {
    let mut scheme = VolterraScheme::new(k, c, x0, grid, QuadraturePolicy::ExactOnly)?;
    scheme.state_space = StateSpace::Real;
    let mut path = SimPath::new(*grid, c.dim(), scheme.noise_dim());
    scheme.run(&mut path, 0, true)?;
    Ok((0..grid.n_nodes()).map(|j| path.raw_state(j).to_vec()).collect())
}

/// Full-truncation Euler scheme for `(log S, V)`.
pub struct HestonScheme {
    grid: TimeGrid,
    log_s0: f64,
    v0: f64,
    rho_perp: f64,
    rho: f64,
    eta: Vec<f64>,
    kappa: Vec<f64>,
    theta: Vec<f64>,
    sigma_bar: Vec<f64>,
    /// `[w_N, …, w_1]` with `w_p = ∫_{(p-1)Δ}^{pΔ} k / Δ`.
    reversed: Vec<f64>,
    constant_kernel: bool,
}

impl HestonScheme {
    pub fn new(params: &HestonParams, grid: &TimeGrid) -> Result<Self> {
        let n = grid.n_steps();
        let dt = grid.dt();
        let lw = LagWeights::new(params.kernel(), grid)?;
        let w = lw.entry(0, 0).ok_or_else(|| {
            Error::Validation("variance kernel vanishes identically".into())
        })?;
        let s = params.sampled(grid);
        Ok(Self {
            grid: *grid,
            log_s0: params.s0.ln(),
            v0: params.v0,
            rho_perp: (1.0 - params.rho * params.rho).max(0.0).sqrt(),
            rho: params.rho,
            eta: s.eta,
            kappa: s.kappa,
            theta: s.theta,
            sigma_bar: s.sigma_bar,
            reversed: (0..n).map(|q| w.rect[n - q] / dt).collect(),
            constant_kernel: params.alpha() == Some(1.0),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Runs the scheme on the increments stored in `path`; `dz` is scratch
    /// of length `n_steps`.
    pub fn run(&self, path: &mut SimPath, dz: &mut [f64], path_index: usize) -> Result<()> {
        let n = self.grid.n_steps();
        let dt = self.grid.dt();
        let mut log_s = self.log_s0;
        let mut v_raw = self.v0;
        let mut running = 0.0;
        path.states[0] = log_s;
        path.states[1] = v_raw.max(0.0);
        path.raw_states[0] = log_s;
        path.raw_states[1] = v_raw;
        for j in 0..n {
            let vp = v_raw.max(0.0);
            let sv = vp.sqrt();
            let dw1 = path.increments[2 * j];
            let dw2 = path.increments[2 * j + 1];
            let eta = self.eta[j];
            log_s += eta * sv * (self.rho_perp * dw1 + self.rho * dw2) - 0.5 * eta * eta * vp * dt;
            dz[j] = self.kappa[j] * (self.theta[j] - vp) * dt + self.sigma_bar[j] * sv * dw2;
            v_raw = if self.constant_kernel {
                running += dz[j];
                self.v0 + running
            } else {
                self.v0 + fast_dot(&dz[..=j], &self.reversed[n - j - 1..])
            };
            if !(log_s.is_finite() && v_raw.is_finite()) {
                return Err(Error::SimulationFailure {
                    path: path_index,
                    step: j + 1,
                    reason: "non-finite state".into(),
                });
            }
            path.states[2 * (j + 1)] = log_s;
            path.states[2 * (j + 1) + 1] = v_raw.max(0.0);
            path.raw_states[2 * (j + 1)] = log_s;
            path.raw_states[2 * (j + 1) + 1] = v_raw;
        }
        Ok(())
    }

    pub fn simulate_path(&self, seed: u64, path_index: usize) -> Result<SimPath> {
        let mut path = SimPath::new(self.grid, 2, 2);
        brownian_increments(seed, path_index as u64, &self.grid, &mut path.increments);
        let mut dz = vec![0.0; self.grid.n_steps()];
        self.run(&mut path, &mut dz, path_index)?;
        Ok(path)
    }
}

pub fn simulate_heston(
    params: &HestonParams,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    let scheme = HestonScheme::new(params, grid)?;
    let paths = (0..n_paths)
        .into_par_iter()
        .map(|i| scheme.simulate_path(seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(PathEnsemble {
        grid: *grid,
        n_paths,
        seed,
        dim: 2,
        noise_dim: 2,
        scheme: SchemeTag::EulerFullTruncation,
        paths,
    })
}

/// Heston paths on grids coarsened by `factors` from the same fine
/// increments (factor 1 is the fine grid itself).
pub fn simulate_heston_coupled(
    params: &HestonParams,
    grid: &TimeGrid,
    factors: &[usize],
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PathEnsemble>> {
    let schemes = factors
        .iter()
        .map(|&f| HestonScheme::new(params, &grid.coarsened(f)?))
        .collect::<Result<Vec<_>>>()?;
    let per_path = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut fine = vec![0.0; 2 * grid.n_steps()];
            brownian_increments(seed, i as u64, grid, &mut fine);
            schemes
                .iter()
                .zip(factors)
                .map(|(s, &f)| {
                    let mut path = SimPath::new(*s.grid(), 2, 2);
                    coarsen_increments(&fine, 2, f, &mut path.increments);
                    let mut dz = vec![0.0; s.grid().n_steps()];
                    s.run(&mut path, &mut dz, i)?;
                    Ok(path)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out: Vec<PathEnsemble> = schemes
        .iter()
        .map(|s| PathEnsemble {
            grid: *s.grid(),
            n_paths,
            seed,
            dim: 2,
            noise_dim: 2,
            scheme: SchemeTag::EulerFullTruncation,
            paths: Vec::with_capacity(n_paths),
        })
        .collect();
    for paths in per_path {
        for (e, p) in out.iter_mut().zip(paths) {
            e.paths.push(p);
        }
    }
    Ok(out)
}

/// Welford accumulator with Chan's merge.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningMoments {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RunningMoments {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Self) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn estimate(&self) -> MCEstimate<f64> {
        MCEstimate {
            value: self.mean,
            std_error: (self.variance() / self.n.max(1) as f64).sqrt(),
            n_paths: self.n as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ComplexMoments {
    pub re: RunningMoments,
    pub im: RunningMoments,
}

impl ComplexMoments {
    pub fn push(&mut self, z: Complex64) {
        self.re.push(z.re);
        self.im.push(z.im);
    }

    pub fn merge(&mut self, other: &Self) {
        self.re.merge(&other.re);
        self.im.merge(&other.im);
    }

    pub fn estimate(&self) -> MCEstimate<Complex64> {
        let (r, i) = (self.re.estimate(), self.im.estimate());
        MCEstimate {
            value: Complex64::new(r.value, i.value),
            std_error: Complex64::new(r.std_error, i.std_error),
            n_paths: r.n_paths,
        }
    }
}

/// Sample mean with its standard error (componentwise for complex values).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MCEstimate<T> {
    pub value: T,
    pub std_error: T,
    pub n_paths: usize,
}

impl MCEstimate<Complex64> {
    /// `|value - target|` against `k` standard errors (modulus of the
    /// componentwise errors).
    pub fn within(&self, target: Complex64, k: f64, extra: f64) -> bool {
        (self.value - target).norm() <= k * self.std_error.norm() + extra
    }
}

/// Reduces `n_paths` paths in fixed blocks of [`BLOCK_SIZE`], in parallel,
/// merging block results in block order.
pub fn parallel_reduce<A, S, I, J, F, M>(
    n_paths: usize,
    init: I,
    scratch: J,
    fold: F,
    merge: M,
) -> Result<A>
where
    A: Send,
    I: Fn() -> A + Sync,
    J: Fn() -> S + Sync,
    F: Fn(&mut A, &mut S, usize) -> Result<()> + Sync,
    M: Fn(&mut A, A),
{
    let blocks = n_paths.div_ceil(BLOCK_SIZE);
    let parts: Vec<Result<A>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = init();
            let mut s = scratch();
            for i in b * BLOCK_SIZE..((b + 1) * BLOCK_SIZE).min(n_paths) {
                fold(&mut acc, &mut s, i)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = init();
    for p in parts {
        merge(&mut total, p?);
    }
    Ok(total)
}

/// A scheme for either model family, driven by stored increments.
pub enum PathSimulator {
    Heston(HestonScheme),
    Volterra(VolterraScheme),
}

impl PathSimulator {
    pub fn heston(params: &HestonParams, grid: &TimeGrid) -> Result<Self> {
        Ok(Self::Heston(HestonScheme::new(params, grid)?))
    }

    pub fn volterra(k: &Kernel, c: &AffineCoefficients, x0: &[f64], grid: &TimeGrid) -> Result<Self> {
        Ok(Self::Volterra(VolterraScheme::new(k, c, x0, grid, QuadraturePolicy::ExactOnly)?))
    }

    pub fn grid(&self) -> &TimeGrid {
        match self {
            Self::Heston(s) => s.grid(),
            Self::Volterra(s) => s.grid(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Heston(_) => 2,
            Self::Volterra(s) => s.dim,
        }
    }

    pub fn noise_dim(&self) -> usize {
        match self {
            Self::Heston(_) => 2,
            Self::Volterra(s) => s.noise_dim(),
        }
    }

    pub fn scheme(&self) -> SchemeTag {
        match self {
            Self::Heston(_) => SchemeTag::EulerFullTruncation,
            Self::Volterra(_) => SchemeTag::Euler,
        }
    }

    pub fn new_path(&self) -> SimPath {
        SimPath::new(*self.grid(), self.dim(), self.noise_dim())
    }

    /// Runs on the increments already in `path`.
    pub fn run(&self, path: &mut SimPath, path_index: usize) -> Result<()> {
        match self {
            Self::Heston(s) => {
                let mut dz = vec![0.0; s.grid().n_steps()];
                s.run(path, &mut dz, path_index)
            }
            Self::Volterra(s) => s.run(path, path_index, false),
        }
    }

    pub fn simulate_path(&self, seed: u64, path_index: usize) -> Result<SimPath> {
        let mut path = self.new_path();
        brownian_increments(seed, path_index as u64, self.grid(), &mut path.increments);
        self.run(&mut path, path_index)?;
        Ok(path)
    }

    /// Stored ensemble of `n_paths` paths.
    pub fn ensemble(&self, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
        let paths = (0..n_paths)
            .into_par_iter()
            .map(|i| self.simulate_path(seed, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(PathEnsemble {
            grid: *self.grid(),
            n_paths,
            seed,
            dim: self.dim(),
            noise_dim: self.noise_dim(),
            scheme: self.scheme(),
            paths,
        })
    }
}

/// Statistics gathered while streaming paths. The first component is read
/// as `log S` for `charfn_w`, `strikes` and the spot.
#[derive(Debug, Clone, Default)]
pub struct StreamRequest {
    /// `E[exp(i w X¹_T)]` for each `w`.
    pub charfn_w: Vec<f64>,
    /// `E[(exp(X¹_T) - K)⁺]` for each strike.
    pub strikes: Vec<f64>,
    /// Per-node `E[(X^c_t)^p]` of the projected state, as `(c, p)`.
    pub component_power: Option<(usize, i32)>,
    /// Per-node `E‖X_t‖^p`.
    pub norm_power: Option<u32>,
    /// Per-node means of the raw states.
    pub mean_path: bool,
    /// General Fourier-Laplace functionals.
    pub functionals: Vec<FLParams>,
}

#[derive(Debug, Clone)]
pub struct StreamSummary {
    pub grid: TimeGrid,
    pub charfn: Vec<MCEstimate<Complex64>>,
    pub spot: MCEstimate<f64>,
    pub calls: Vec<MCEstimate<f64>>,
    pub component_moments: Vec<MCEstimate<f64>>,
    pub norm_moments: Vec<MCEstimate<f64>>,
    /// `mean_path[j][c]`.
    pub mean_path: Vec<Vec<MCEstimate<f64>>>,
    pub functionals: Vec<MCEstimate<Complex64>>,
}

impl StreamSummary {
    pub fn norm_moment_report(&self) -> Option<MomentReport> {
        if self.norm_moments.is_empty() {
            None
        } else {
            Some(moment_report(self.norm_moments.clone()))
        }
    }
}

/// Running statistics of a [`StreamRequest`] over paths pushed in order.
#[derive(Clone)]
pub struct StreamAcc {
    dim: usize,
    charfn: Vec<ComplexMoments>,
    spot: RunningMoments,
    calls: Vec<RunningMoments>,
    component: Vec<RunningMoments>,
    norm: Vec<RunningMoments>,
    mean: Vec<Vec<RunningMoments>>,
    functionals: Vec<ComplexMoments>,
    /// `f` of each functional sampled on the grid.
    f_grid: std::sync::Arc<Vec<Vec<Vec<Complex64>>>>,
}

impl StreamAcc {
    pub fn new(req: &StreamRequest, grid: &TimeGrid, dim: usize) -> Self {
        let nodes = grid.n_nodes();
        Self {
            dim,
            charfn: vec![ComplexMoments::default(); req.charfn_w.len()],
            spot: RunningMoments::default(),
            calls: vec![RunningMoments::default(); req.strikes.len()],
            component: vec![RunningMoments::default(); if req.component_power.is_some() { nodes } else { 0 }],
            norm: vec![RunningMoments::default(); if req.norm_power.is_some() { nodes } else { 0 }],
            mean: vec![vec![RunningMoments::default(); dim]; if req.mean_path { nodes } else { 0 }],
            functionals: vec![ComplexMoments::default(); req.functionals.len()],
            f_grid: std::sync::Arc::new(
                req.functionals
                    .iter()
                    .map(|p| if p.f_is_zero() { Vec::new() } else { p.f_on_grid(grid) })
                    .collect(),
            ),
        }
    }

    pub fn push(&mut self, req: &StreamRequest, path: &SimPath, path_index: usize) -> Result<()> {
        let d = self.dim;
        let n = path.grid.n_steps();
        let log_st = path.states[d * n];
        let st = log_st.exp();
        for (acc, w) in self.charfn.iter_mut().zip(&req.charfn_w) {
            acc.push(Complex64::from_polar(1.0, w * log_st));
        }
        self.spot.push(st);
        for (acc, k) in self.calls.iter_mut().zip(&req.strikes) {
            acc.push((st - k).max(0.0));
        }
        if let Some((c, p)) = req.component_power {
            for (j, acc) in self.component.iter_mut().enumerate() {
                acc.push(path.states[d * j + c].powi(p));
            }
        }
        if let Some(p) = req.norm_power {
            for (j, acc) in self.norm.iter_mut().enumerate() {
                let sq: f64 = path.state(j).iter().map(|v| v * v).sum();
                acc.push(sq.sqrt().powi(p as i32));
            }
        }
        for (j, acc) in self.mean.iter_mut().enumerate() {
            for (c, a) in acc.iter_mut().enumerate() {
                a.push(path.raw_states[d * j + c]);
            }
        }
        for ((acc, p), f) in self.functionals.iter_mut().zip(&req.functionals).zip(self.f_grid.iter()) {
            acc.push(functional_value(p, f, path, path_index)?);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.charfn.iter_mut().zip(&other.charfn) {
            a.merge(b);
        }
        self.spot.merge(&other.spot);
        for (a, b) in self.calls.iter_mut().zip(&other.calls) {
            a.merge(b);
        }
        for (a, b) in self.component.iter_mut().zip(&other.component) {
            a.merge(b);
        }
        for (a, b) in self.norm.iter_mut().zip(&other.norm) {
            a.merge(b);
        }
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            for (x, y) in a.iter_mut().zip(b) {
                x.merge(y);
            }
        }
        for (a, b) in self.functionals.iter_mut().zip(&other.functionals) {
            a.merge(b);
        }
    }

    pub fn summary(&self, grid: TimeGrid) -> StreamSummary {
        StreamSummary {
            grid,
            charfn: self.charfn.iter().map(ComplexMoments::estimate).collect(),
            spot: self.spot.estimate(),
            calls: self.calls.iter().map(RunningMoments::estimate).collect(),
            component_moments: self.component.iter().map(RunningMoments::estimate).collect(),
            norm_moments: self.norm.iter().map(RunningMoments::estimate).collect(),
            mean_path: self
                .mean
                .iter()
                .map(|m| m.iter().map(RunningMoments::estimate).collect())
                .collect(),
            functionals: self.functionals.iter().map(ComplexMoments::estimate).collect(),
        }
    }
}

/// `exp(u X_T + Σ_{j<N} f(t_j) X_{t_j} Δ)` on one path, `f` pre-sampled
/// (empty when `f = 0`).
fn functional_value(p: &FLParams, f: &[Vec<Complex64>], path: &SimPath, path_index: usize) -> Result<Complex64> {
    let n = path.grid.n_steps();
    let dt = path.grid.dt();
    let mut e = dot(&p.u, path.terminal());
    for (j, fj) in f.iter().enumerate().take(n) {
        e += dot(fj, path.state(j)) * dt;
    }
    if !(e.re <= MAX_EXPONENT) || !e.im.is_finite() {
        return Err(Error::SimulationFailure {
            path: path_index,
            step: n,
            reason: format!("exponent {e} overflows"),
        });
    }
    Ok(e.exp())
}

/// Streams `n_paths` paths without storing them. `schemes[l]` runs on the
/// fine increments of `grid` coarsened by `factors[l]`, so all levels share
/// the same Brownian path.
pub fn coupled_stream(
    schemes: &[PathSimulator],
    grid: &TimeGrid,
    factors: &[usize],
    n_paths: usize,
    seed: u64,
    req: &StreamRequest,
) -> Result<Vec<StreamSummary>> {
    if schemes.len() != factors.len() || schemes.is_empty() {
        return Err(Error::Validation("one scheme per coarsening factor".into()));
    }
    let m = schemes[0].noise_dim();
    for (s, &f) in schemes.iter().zip(factors) {
        if s.noise_dim() != m || s.grid().n_steps() * f != grid.n_steps() {
            return Err(Error::Validation("scheme grids do not match the coarsening".into()));
        }
        for p in &req.functionals {
            if p.dim() != s.dim() {
                return Err(Error::Validation("functional and model dimensions differ".into()));
            }
        }
    }
    let init = || {
        schemes
            .iter()
            .map(|s| StreamAcc::new(req, s.grid(), s.dim()))
            .collect::<Vec<_>>()
    };
    let scratch = || {
        let fine = vec![0.0; m * grid.n_steps()];
        let paths: Vec<SimPath> = schemes.iter().map(PathSimulator::new_path).collect();
        (fine, paths)
    };
    let accs = parallel_reduce(
        n_paths,
        init,
        scratch,
        |acc, (fine, paths), i| {
            fine.resize(m * grid.n_steps(), 0.0);
            brownian_increments(seed, i as u64, grid, fine);
            for ((s, &f), (a, path)) in schemes.iter().zip(factors).zip(acc.iter_mut().zip(paths.iter_mut())) {
                coarsen_increments(fine, m, f, &mut path.increments);
                s.run(path, i)?;
                a.push(req, path, i)?;
            }
            Ok(())
        },
        |total, part| {
            for (a, b) in total.iter_mut().zip(&part) {
                a.merge(b);
            }
        },
    )?;
    Ok(accs
        .iter()
        .zip(schemes)
        .map(|(a, s)| a.summary(*s.grid()))
        .collect())
}

/// [`coupled_stream`] for the Heston model.
pub fn heston_stream(
    params: &HestonParams,
    grid: &TimeGrid,
    factors: &[usize],
    n_paths: usize,
    seed: u64,
    req: &StreamRequest,
) -> Result<Vec<StreamSummary>> {
    let schemes = factors
        .iter()
        .map(|&f| PathSimulator::heston(params, &grid.coarsened(f)?))
        .collect::<Result<Vec<_>>>()?;
    coupled_stream(&schemes, grid, factors, n_paths, seed, req)
}

/// Per-node `E‖X_t‖^p` and the sup over nodes.
#[derive(Debug, Clone)]
pub struct MomentReport {
    pub per_node: Vec<MCEstimate<f64>>,
    pub sup: f64,
    pub sup_node: usize,
}

fn moment_report(per_node: Vec<MCEstimate<f64>>) -> MomentReport {
    let (sup_node, sup) = per_node
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bn, bv), (j, e)| {
            if e.value > bv {
                (j, e.value)
            } else {
                (bn, bv)
            }
        });
    MomentReport {
        per_node,
        sup,
        sup_node,
    }
}

pub fn moment_estimate(ens: &PathEnsemble, p: u32) -> Result<MomentReport> {
    if p == 0 {
        return Err(Error::Domain("moment order must be >= 1".into()));
    }
    let per_node = (0..ens.grid.n_nodes())
        .map(|j| {
            let mut m = RunningMoments::default();
            for path in &ens.paths {
                let norm = path.state(j).iter().map(|v| v * v).sum::<f64>().sqrt();
                m.push(norm.powi(p as i32));
            }
            m.estimate()
        })
        .collect();
    Ok(moment_report(per_node))
}

/// Per-node `E[(X_t)_c^p]` of one component.
pub fn component_moment_estimate(ens: &PathEnsemble, component: usize, p: i32) -> MomentReport {
    let per_node = (0..ens.grid.n_nodes())
        .map(|j| {
            let mut m = RunningMoments::default();
            for path in &ens.paths {
                m.push(path.state(j)[component].powi(p));
            }
            m.estimate()
        })
        .collect();
    moment_report(per_node)
}

/// Per-node sample means of the raw states.
pub fn mean_path_estimate(ens: &PathEnsemble) -> Vec<Vec<MCEstimate<f64>>> {
    (0..ens.grid.n_nodes())
        .map(|j| {
            (0..ens.dim)
                .map(|c| {
                    let mut m = RunningMoments::default();
                    for path in &ens.paths {
                        m.push(path.raw_state(j)[c]);
                    }
                    m.estimate()
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MartingaleCheck {
    /// Estimate of `E[S_T] - S₀`.
    pub estimate: MCEstimate<f64>,
    pub pass: bool,
}

/// `E[S_T] - S₀` for a Heston ensemble; passes within three standard errors.
pub fn martingale_check(ens: &PathEnsemble) -> MartingaleCheck {
    let mut m = RunningMoments::default();
    let mut s0 = 0.0;
    for path in &ens.paths {
        s0 = path.state(0)[0].exp();
        m.push(path.terminal()[0].exp());
    }
    let mut estimate = m.estimate();
    estimate.value -= s0;
    MartingaleCheck {
        pass: estimate.value.abs() <= 3.0 * estimate.std_error,
        estimate,
    }
}

/// Sample mean of `exp(u X_T + Σ_{j<N} f(t_j) X_{t_j} Δ)`.
pub fn mc_fourier_laplace(ens: &PathEnsemble, p: &FLParams) -> Result<MCEstimate<Complex64>> {
    if p.dim() != ens.dim {
        return Err(Error::Validation("functional and ensemble dimensions differ".into()));
    }
    let f = if p.f_is_zero() { Vec::new() } else { p.f_on_grid(&ens.grid) };
    let mut acc = ComplexMoments::default();
    for (i, path) in ens.paths.iter().enumerate() {
        acc.push(functional_value(p, &f, path, i)?);
    }
    Ok(acc.estimate())
}

pub const BINARY_MAGIC: &[u8; 4] = b"VOLT";
pub const BINARY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleFormat {
    Binary,
    Csv,
}

/// Writes an ensemble one path at a time so large runs never sit in memory.
///
/// Binary layout is little-endian: magic, version u32, d u32, m u32,
/// n_paths u64, n_steps u64, Δ f64, then the projected states
/// `[path][node][component]`. CSV has one row per `(path, node)`.
pub struct EnsembleWriter<W: Write> {
    out: W,
    format: EnsembleFormat,
    dim: usize,
    buf: Vec<u8>,
}

impl<W: Write> EnsembleWriter<W> {
    pub fn new(
        mut out: W,
        format: EnsembleFormat,
        grid: &TimeGrid,
        dim: usize,
        noise_dim: usize,
        n_paths: usize,
    ) -> Result<Self> {
        match format {
            EnsembleFormat::Binary => {
                out.write_all(BINARY_MAGIC)?;
                out.write_all(&BINARY_VERSION.to_le_bytes())?;
                out.write_all(&(dim as u32).to_le_bytes())?;
                out.write_all(&(noise_dim as u32).to_le_bytes())?;
                out.write_all(&(n_paths as u64).to_le_bytes())?;
                out.write_all(&(grid.n_steps() as u64).to_le_bytes())?;
                out.write_all(&grid.dt().to_le_bytes())?;
            }
            EnsembleFormat::Csv => {
                let mut header = String::from("path,node");
                for c in 0..dim {
                    header.push_str(&format!(",x{}", c + 1));
                }
                header.push('\n');
                out.write_all(header.as_bytes())?;
            }
        }
        Ok(Self { out, format, dim, buf: Vec::new() })
    }

    pub fn write_path(&mut self, index: usize, path: &SimPath) -> Result<()> {
        use std::fmt::Write as _;
        self.buf.clear();
        match self.format {
            EnsembleFormat::Binary => {
                for v in &path.states {
                    self.buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            EnsembleFormat::Csv => {
                let mut line = String::new();
                for (j, x) in path.states.chunks(self.dim).enumerate() {
                    let _ = write!(line, "{index},{j}");
                    for v in x {
                        let _ = write!(line, ",{v}");
                    }
                    line.push('\n');
                }
                self.buf.extend_from_slice(line.as_bytes());
            }
        }
        self.out.write_all(&self.buf)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

fn write_ensemble<W: Write>(ens: &PathEnsemble, w: W, format: EnsembleFormat) -> Result<()> {
    let mut writer = EnsembleWriter::new(w, format, &ens.grid, ens.dim, ens.noise_dim, ens.paths.len())?;
    for (i, path) in ens.paths.iter().enumerate() {
        writer.write_path(i, path)?;
    }
    writer.finish()?;
    Ok(())
}

pub fn write_ensemble_csv<W: Write>(ens: &PathEnsemble, w: W) -> Result<()> {
    write_ensemble(ens, w, EnsembleFormat::Csv)
}

pub fn write_ensemble_binary<W: Write>(ens: &PathEnsemble, w: W) -> Result<()> {
    write_ensemble(ens, w, EnsembleFormat::Binary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryEnsemble {
    pub dim: usize,
    pub noise_dim: usize,
    pub n_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub states: Vec<f64>,
}

pub fn read_ensemble_binary<R: Read>(mut r: R) -> Result<BinaryEnsemble> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Validation("not an ensemble file".into()));
    }
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != BINARY_VERSION {
        return Err(Error::Validation(format!("unsupported ensemble version {version}")));
    }
    r.read_exact(&mut u32b)?;
    let dim = u32::from_le_bytes(u32b) as usize;
    r.read_exact(&mut u32b)?;
    let noise_dim = u32::from_le_bytes(u32b) as usize;
    r.read_exact(&mut u64b)?;
    let n_paths = u64::from_le_bytes(u64b) as usize;
    r.read_exact(&mut u64b)?;
    let n_steps = u64::from_le_bytes(u64b) as usize;
    r.read_exact(&mut u64b)?;
    let dt = f64::from_le_bytes(u64b);
    let count = n_paths * (n_steps + 1) * dim;
    let mut states = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u64b)?;
        states.push(f64::from_le_bytes(u64b));
    }
    Ok(BinaryEnsemble {
        dim,
        noise_dim,
        n_paths,
        n_steps,
        dt,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::TimeFunction;
    use crate::special::gamma;

    fn scalar(b0: f64, b: f64, a0: f64, a1: f64, space: StateSpace) -> AffineCoefficients {
        AffineCoefficients::constant(
            &nalgebra::DVector::from_vec(vec![b0]),
            &DMatrix::from_element(1, 1, b),
            &[DMatrix::from_element(1, 1, a0), DMatrix::from_element(1, 1, a1)],
            space,
        )
        .unwrap()
    }

    #[test]
    fn zero_coefficients_freeze_the_state() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let c = scalar(0.0, 0.0, 0.0, 0.0, StateSpace::Real);
        let ens = simulate_volterra(&Kernel::fractional(vec![0.7]).unwrap(), &c, &[0.3], &g, 5, 1).unwrap();
        for p in &ens.paths {
            assert!(p.states.iter().all(|&v| v == 0.3));
        }
        let m = moment_estimate(&ens, 2).unwrap();
        assert!(m.per_node.iter().all(|e| (e.value - 0.09).abs() < 1e-15 && e.std_error == 0.0));
    }

    #[test]
    fn deterministic_linear_decay() {
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let c = scalar(0.0, -1.0, 0.0, 0.0, StateSpace::Real);
        let m = mean_path_deterministic(&Kernel::identity(1), &c, &[1.0], &g).unwrap();
        for (j, x) in m.iter().enumerate() {
            assert!((x[0] - (-g.time(j)).exp()).abs() < 1e-3);
        }
    }

    #[test]
    fn fractional_integral_of_constant_drift() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let c = scalar(1.0, 0.0, 0.0, 0.0, StateSpace::Real);
        let ens = simulate_volterra(&Kernel::fractional(vec![0.6]).unwrap(), &c, &[0.0], &g, 2, 3).unwrap();
        for j in 0..=200 {
            let exact = g.time(j).powf(0.6) / gamma(1.6);
            assert!((ens.paths[0].state(j)[0] - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn reproducible_and_thread_independent() {
        let g = TimeGrid::new(1.0, 50).unwrap();
        let p = HestonParams::constant_fractional(0.6, 1.0, 0.04, -0.7, 2.0, 0.05, 0.3, 1.0).unwrap();
        let a = simulate_heston(&p, &g, 40, 9).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| simulate_heston(&p, &g, 40, 9).unwrap());
        assert_eq!(a.paths, b.paths);
        let c = simulate_heston(&p, &g, 40, 10).unwrap();
        assert_ne!(a.paths[0], c.paths[0]);
    }

    #[test]
    fn heston_special_cases() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let flat = HestonParams::constant_fractional(0.6, 1.5, 0.04, -0.7, 2.0, 0.05, 0.3, 0.0).unwrap();
        let ens = simulate_heston(&flat, &g, 20, 1).unwrap();
        for p in &ens.paths {
            assert!((0..=100).all(|j| (p.state(j)[0] - 1.5f64.ln()).abs() < 1e-15));
        }
        let check = martingale_check(&ens);
        assert_eq!(check.estimate.value, 0.0);

        // σ̄ → 0, α = 1: V follows the mean-reversion ODE
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let ode = HestonParams::constant_fractional(1.0, 1.0, 0.09, 0.0, 2.0, 0.04, 1e-8, 1.0).unwrap();
        let ens = simulate_heston(&ode, &g, 3, 2).unwrap();
        for j in (0..=1000).step_by(100) {
            let exact = 0.04 + 0.05 * (-2.0 * g.time(j)).exp();
            assert!((ens.paths[0].state(j)[1] - exact).abs() < 1e-3);
        }
    }

    #[test]
    fn variance_stays_nonnegative() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let p = HestonParams::constant_fractional(0.55, 1.0, 0.01, -0.9, 1.0, 0.01, 1.0, 1.0).unwrap();
        let ens = simulate_heston(&p, &g, 200, 5).unwrap();
        assert!(ens.paths.iter().all(|p| (0..=100).all(|j| p.state(j)[1] >= 0.0)));
        assert!(ens.paths.iter().any(|p| (0..=100).any(|j| p.raw_state(j)[1] < 0.0)));
    }

    #[test]
    fn increments_are_gaussian() {
        let g = TimeGrid::new(1.0, 500).unwrap();
        let n_paths = 400;
        let mut m = RunningMoments::default();
        let mut buf = vec![0.0; 500];
        for i in 0..n_paths {
            brownian_increments(77, i, &g, &mut buf);
            buf.iter().for_each(|&v| m.push(v));
        }
        let samples = (n_paths * 500) as f64;
        assert!(m.mean.abs() / g.dt().sqrt() <= 4.0 / samples.sqrt());
        assert!((m.variance() / g.dt() - 1.0).abs() < 0.01);
    }

    #[test]
    fn coupled_grids_share_noise() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let p = HestonParams::constant_fractional(1.0, 1.0, 0.04, -0.5, 1.0, 0.04, 0.2, 1.0).unwrap();
        let ens = simulate_heston_coupled(&p, &g, &[1, 2], 4, 3).unwrap();
        for (fine, coarse) in ens[0].paths.iter().zip(&ens[1].paths) {
            let sum: f64 = fine.increments.iter().step_by(2).sum();
            let csum: f64 = coarse.increments.iter().step_by(2).sum();
            assert!((sum - csum).abs() < 1e-12);
        }
        let direct = simulate_heston(&p, &g, 4, 3).unwrap();
        assert_eq!(direct.paths, ens[0].paths);
    }

    #[test]
    fn stream_matches_stored_ensemble() {
        let g = TimeGrid::new(1.0, 40).unwrap();
        let p = HestonParams::constant_fractional(0.7, 1.0, 0.04, -0.7, 2.0, 0.05, 0.3, 1.0).unwrap();
        let req = StreamRequest {
            charfn_w: vec![1.0],
            strikes: vec![1.0],
            component_power: Some((1, 2)),
            mean_path: true,
            ..Default::default()
        };
        let s = heston_stream(&p, &g, &[1], 3000, 4, &req).unwrap();
        let ens = simulate_heston(&p, &g, 3000, 4).unwrap();
        let fl = FLParams::terminal(vec![Complex64::new(0.0, 1.0), Complex64::new(0.0, 0.0)]);
        let mc = mc_fourier_laplace(&ens, &fl).unwrap();
        assert!((mc.value - s[0].charfn[0].value).norm() < 1e-12);
        let m = martingale_check(&ens);
        assert!((m.estimate.value + 1.0 - s[0].spot.value).abs() < 1e-12);
    }

    #[test]
    fn unit_functional_and_overflow() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let p = HestonParams::constant_fractional(0.7, 1.0, 0.04, -0.7, 2.0, 0.05, 0.3, 1.0).unwrap();
        let ens = simulate_heston(&p, &g, 10, 4).unwrap();
        let zero = FLParams::terminal(vec![Complex64::new(0.0, 0.0); 2]);
        let e = mc_fourier_laplace(&ens, &zero).unwrap();
        assert_eq!(e.value, Complex64::new(1.0, 0.0));
        assert_eq!(e.std_error, Complex64::new(0.0, 0.0));
        let huge = FLParams::terminal(vec![Complex64::new(0.0, 0.0), Complex64::new(1e6, 0.0)]);
        assert!(matches!(
            mc_fourier_laplace(&ens, &huge),
            Err(Error::SimulationFailure { .. })
        ));
    }

    #[test]
    fn binary_round_trip() {
        let g = TimeGrid::new(1.0, 7).unwrap();
        let p = HestonParams::constant_fractional(0.7, 1.0, 0.04, -0.7, 2.0, 0.05, 0.3, 1.0).unwrap();
        let ens = simulate_heston(&p, &g, 3, 4).unwrap();
        let mut buf = Vec::new();
        write_ensemble_binary(&ens, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"VOLT");
        let back = read_ensemble_binary(&buf[..]).unwrap();
        assert_eq!(back.n_paths, 3);
        assert_eq!(back.n_steps, 7);
        assert_eq!(back.states[..16], ens.paths[0].states[..]);
        let mut csv = Vec::new();
        write_ensemble_csv(&ens, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("path,node,x1,x2\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 8);
    }

    #[test]
    fn welford_merge_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.1).collect();
        let mut all = RunningMoments::default();
        xs.iter().for_each(|&x| all.push(x));
        let mut a = RunningMoments::default();
        let mut b = RunningMoments::default();
        xs[..300].iter().for_each(|&x| a.push(x));
        xs[300..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert!((a.mean - all.mean).abs() < 1e-12);
        assert!((a.variance() - all.variance()).abs() < 1e-10);
        let _ = TimeFunction::Constant(0.0);
    }
}
