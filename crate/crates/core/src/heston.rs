//! Inhomogeneous Volterra-Heston model for `X = (log S, V)`.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::affine::{AffineCoefficients, SigmaKind, StateSpace, TimeFunction};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernels::{resolvent_first_kind, rl_integral, ConvolutionFn, Kernel, KernelKind};
use crate::riccati::{solve_heston_psi, FLParams, RiccatiOptions, RiccatiSolution};

/// Lower bound imposed on the vol-of-vol curve.
pub const SIGMA_FLOOR: f64 = 1e-8;
const ADMISSIBILITY_SLACK: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct HestonParams {
    pub s0: f64,
    pub v0: f64,
    pub rho: f64,
    pub kappa: TimeFunction,
    pub theta: TimeFunction,
    pub sigma_bar: TimeFunction,
    pub eta: TimeFunction,
    kernel: Kernel,
}

/// Curves sampled at the grid nodes.
#[derive(Debug, Clone)]
pub struct HestonSamples {
    pub rho: f64,
    pub kappa: Vec<f64>,
    pub theta: Vec<f64>,
    pub sigma_bar: Vec<f64>,
    pub eta: Vec<f64>,
}

impl HestonParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        s0: f64,
        v0: f64,
        rho: f64,
        kappa: TimeFunction,
        theta: TimeFunction,
        sigma_bar: TimeFunction,
        eta: TimeFunction,
        kernel: Kernel,
    ) -> Result<Self> {
        if !(s0 > 0.0 && s0.is_finite()) {
            return Err(Error::Validation(format!("S0 must be positive, got {s0}")));
        }
        if !(v0 >= 0.0 && v0.is_finite()) {
            return Err(Error::Validation(format!("V0 must be nonnegative, got {v0}")));
        }
        if !(-1.0..=1.0).contains(&rho) {
            return Err(Error::Validation(format!("rho must lie in [-1, 1], got {rho}")));
        }
        for (name, f) in [("kappa", &kappa), ("theta", &theta), ("eta", &eta)] {
            f.validate()?;
            if f.inf() < 0.0 {
                return Err(Error::Validation(format!("{name} must be nonnegative")));
            }
        }
        sigma_bar.validate()?;
        if sigma_bar.inf() < SIGMA_FLOOR {
            return Err(Error::Validation(format!(
                "sigma_bar must stay above {SIGMA_FLOOR:e}, got minimum {}",
                sigma_bar.inf()
            )));
        }
        if kernel.dim() != 1 || !kernel.is_convolution() {
            return Err(Error::Validation(
                "Heston variance kernel must be a scalar convolution kernel".into(),
            ));
        }
        Ok(Self {
            s0,
            v0,
            rho,
            kappa,
            theta,
            sigma_bar,
            eta,
            kernel,
        })
    }

    /// Constant-coefficient model with the fractional kernel of exponent `alpha`.
    #[allow(clippy::too_many_arguments)]
    pub fn constant_fractional(
        alpha: f64,
        s0: f64,
        v0: f64,
        rho: f64,
        kappa: f64,
        theta: f64,
        sigma_bar: f64,
        eta: f64,
    ) -> Result<Self> {
        Self::new(
            s0,
            v0,
            rho,
            kappa.into(),
            theta.into(),
            sigma_bar.into(),
            eta.into(),
            Kernel::fractional(vec![alpha])?,
        )
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    /// Fractional exponent of the variance kernel, if it has one.
    pub fn alpha(&self) -> Option<f64> {
        self.kernel.fractional_exponents().map(|a| a[0])
    }

    pub fn x0(&self) -> [f64; 2] {
        [self.s0.ln(), self.v0]
    }

    pub fn is_zero_vol(&self) -> bool {
        self.eta.is_zero()
    }

    pub fn is_approximated(&self) -> bool {
        [&self.kappa, &self.theta, &self.sigma_bar, &self.eta]
            .iter()
            .any(|f| f.is_piecewise_constant())
    }

    pub fn sampled(&self, grid: &TimeGrid) -> HestonSamples {
        HestonSamples {
            rho: self.rho,
            kappa: self.kappa.sample(grid),
            theta: self.theta.sample(grid),
            sigma_bar: self.sigma_bar.sample(grid),
            eta: self.eta.sample(grid),
        }
    }

    /// Kernel `diag(1, k)` and coefficients of `(log S, V)`.
    pub fn to_affine(&self) -> (Kernel, AffineCoefficients) {
        let kernel = match self.kernel.kind() {
            KernelKind::Fractional(a) => {
                Kernel::fractional(vec![1.0, a[0]]).expect("exponent already validated")
            }
            KernelKind::Identity => Kernel::identity(2),
            _ => {
                let scalar = self.kernel.clone();
                let eval: ConvolutionFn = Arc::new(move |t: f64| {
                    DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, scalar.component_value(0, t)]))
                });
                Kernel::convolution(2, eval, None)
            }
        };
        let zero = TimeFunction::Constant(0.0);
        let p = |fs: Vec<&TimeFunction>, scale: f64| {
            TimeFunction::product(fs.into_iter().cloned().collect(), scale)
        };
        let b0 = vec![zero.clone(), p(vec![&self.kappa, &self.theta], 1.0)];
        let b = vec![
            zero.clone(),
            p(vec![&self.eta, &self.eta], -0.5),
            zero.clone(),
            p(vec![&self.kappa], -1.0),
        ];
        let cross = p(vec![&self.eta, &self.sigma_bar], self.rho);
        let a2 = vec![
            p(vec![&self.eta, &self.eta], 1.0),
            cross.clone(),
            cross,
            p(vec![&self.sigma_bar, &self.sigma_bar], 1.0),
        ];
        let coeffs = AffineCoefficients::new(
            2,
            b0,
            b,
            vec![vec![zero.clone(); 4], vec![zero; 4], a2],
            StateSpace::HalfLine,
        )
        .expect("Heston coefficients are well formed")
        .with_sigma(SigmaKind::Heston {
            eta: self.eta.clone(),
            rho: self.rho,
            sigma_bar: self.sigma_bar.clone(),
        });
        (kernel, coeffs)
    }

    /// `ψ₁(t) = u₁ + ∫_t^T f₁` on the grid and the first violated
    /// admissibility condition, if any.
    pub fn validate_admissibility(&self, p: &FLParams, grid: &TimeGrid) -> Result<AdmissibilityReport> {
        if p.dim() != 2 {
            return Err(Error::Validation(format!(
                "Heston functional needs two components, got {}",
                p.dim()
            )));
        }
        let n = grid.n_steps();
        let dt = grid.dt();
        let f1: Vec<Complex64> = grid.times().into_iter().map(|t| p.f[0].eval(t)).collect();
        let mut psi1 = vec![p.u[0]; n + 1];
        for j in (0..n).rev() {
            psi1[j] = psi1[j + 1] + 0.5 * dt * (f1[j] + f1[j + 1]);
        }
        let mut violation = None;
        if p.u[1].re > ADMISSIBILITY_SLACK {
            violation = Some(AdmissibilityViolation {
                condition: Condition::TerminalVariance,
                node: n,
                time: grid.horizon(),
                value: p.u[1].re,
            });
        }
        if violation.is_none() {
            for (j, t) in grid.times().into_iter().enumerate() {
                let re1 = psi1[j].re;
                if !(-ADMISSIBILITY_SLACK..=1.0 + ADMISSIBILITY_SLACK).contains(&re1) {
                    violation = Some(AdmissibilityViolation {
                        condition: Condition::LogPriceStrip,
                        node: j,
                        time: t,
                        value: re1,
                    });
                    break;
                }
                let re2 = p.f[1].eval(t).re;
                if re2 > ADMISSIBILITY_SLACK {
                    violation = Some(AdmissibilityViolation {
                        condition: Condition::RunningVariance,
                        node: j,
                        time: t,
                        value: re2,
                    });
                    break;
                }
            }
        }
        Ok(AdmissibilityReport { psi1, violation })
    }

    pub fn solve(&self, p: &FLParams, grid: &TimeGrid, opts: &RiccatiOptions) -> Result<RiccatiSolution> {
        solve_heston_psi(self, p, grid, opts)
    }

    /// Log of `E[exp(u₁ log S_T + u₂ V_T + ∫ f X ds)]` from the Riccati solution.
    pub fn log_charfn_time_zero(
        &self,
        p: &FLParams,
        grid: &TimeGrid,
        opts: &RiccatiOptions,
    ) -> Result<Complex64> {
        let sol = self.solve(p, grid, opts)?;
        self.exponent_from(&sol, grid)
    }

    fn exponent_from(&self, sol: &RiccatiSolution, grid: &TimeGrid) -> Result<Complex64> {
        let n = grid.n_steps();
        let log_weight = sol.psi[0][0];
        let variance_weight = match self.alpha() {
            Some(alpha) => {
                let rev: Vec<Complex64> = (0..=n).map(|m| sol.psi_rev(m)[1]).collect();
                rl_integral(&rev, 1.0 - alpha, grid)?[n]
            }
            None => sol.chi[n][1],
        };
        Ok(sol.phi[n] + log_weight * self.s0.ln() + variance_weight * self.v0)
    }

    /// `E[exp(u X_T + ∫_0^T f(s) X_s ds)]` at time zero.
    pub fn charfn_time_zero(&self, p: &FLParams, grid: &TimeGrid, opts: &RiccatiOptions) -> Result<Complex64> {
        Ok(self.log_charfn_time_zero(p, grid, opts)?.exp())
    }

    /// As [`charfn_time_zero`](Self::charfn_time_zero), memoized in `cache`.
    pub fn charfn_cached(
        &self,
        cache: &CharfnCache,
        p: &FLParams,
        grid: &TimeGrid,
        opts: &RiccatiOptions,
    ) -> Result<Complex64> {
        let mut key = Vec::new();
        self.fingerprint(&mut key);
        p.fingerprint(&mut key);
        key.push(grid.horizon().to_bits());
        key.push(grid.n_steps() as u64);
        if let Some(v) = cache.map.read().expect("cache lock poisoned").get(&key) {
            return Ok(v.exp());
        }
        let v = self.log_charfn_time_zero(p, grid, opts)?;
        cache.map.write().expect("cache lock poisoned").insert(key, v);
        Ok(v.exp())
    }

    /// Checks that the variance kernel admits a nonnegative resolvent.
    pub fn check_kernel(&self, grid: &TimeGrid) -> Result<()> {
        let l = resolvent_first_kind(&self.kernel, grid)?;
        if l.component(0).atom() < 0.0 {
            return Err(Error::Validation("resolvent has a negative atom".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self, out: &mut Vec<u64>) {
        out.extend([self.s0, self.v0, self.rho].map(f64::to_bits));
        for f in [&self.kappa, &self.theta, &self.sigma_bar, &self.eta] {
            f.fingerprint(out);
        }
        match self.kernel.kind() {
            KernelKind::Fractional(a) => {
                out.push(1);
                out.push(a[0].to_bits());
            }
            KernelKind::Identity => out.push(2),
            _ => {
                // user kernels are identified by samples
                out.push(3);
                for t in [1e-3, 0.1, 0.5, 1.0, 2.0] {
                    out.push(self.kernel.component_value(0, t).to_bits());
                }
            }
        }
    }
}

/// Memo of log-characteristic-function values.
#[derive(Debug, Default)]
pub struct CharfnCache {
    map: RwLock<HashMap<Vec<u64>, Complex64>>,
}

impl CharfnCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    /// `Re ψ₁ ∈ [0, 1]`
    LogPriceStrip,
    /// `Re u₂ ≤ 0`
    TerminalVariance,
    /// `Re f₂ ≤ 0`
    RunningVariance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibilityViolation {
    pub condition: Condition,
    pub node: usize,
    pub time: f64,
    pub value: f64,
}

impl fmt::Display for AdmissibilityViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.condition {
            Condition::LogPriceStrip => "Re psi1 outside [0, 1]",
            Condition::TerminalVariance => "Re u2 > 0",
            Condition::RunningVariance => "Re f2 > 0",
        };
        write!(f, "{what}: value {} at node {} (t = {})", self.value, self.node, self.time)
    }
}

#[derive(Debug, Clone)]
pub struct AdmissibilityReport {
    pub psi1: Vec<Complex64>,
    pub violation: Option<AdmissibilityViolation>,
}

impl AdmissibilityReport {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::ComplexCurve;

    fn c64(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn rough() -> HestonParams {
        HestonParams::constant_fractional(0.6, 1.0, 0.04, -0.7, 2.0, 0.05, 0.3, 1.0).unwrap()
    }

    #[test]
    fn affine_structure() {
        let p = HestonParams::constant_fractional(0.7, 1.0, 0.04, 0.0, 1.5, 0.05, 0.4, 1.0).unwrap();
        let (k, c) = p.to_affine();
        assert_eq!(k.fractional_exponents().unwrap(), vec![1.0, 0.7]);
        let s = c.sample(0.3);
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.16]));
        assert!((&s.a[2] - expected).abs().max() < 1e-15);
        assert_eq!(s.a[0], DMatrix::zeros(2, 2));
        assert_eq!(s.a[1], DMatrix::zeros(2, 2));
        let b = c.drift(0.3, &[0.0, 0.09]);
        assert!((b[0] + 0.045).abs() < 1e-15);
        assert!((b[1] - 1.5 * (0.05 - 0.09)).abs() < 1e-15);
    }

    #[test]
    fn admissibility_cases() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let p = rough();
        for w in [-3.0, 0.0, 7.5] {
            let fl = FLParams::terminal(vec![c64(0.0, w), c64(0.0, 0.0)]);
            assert!(p.validate_admissibility(&fl, &g).unwrap().passed());
        }
        let fl = FLParams::terminal(vec![c64(1.0, 0.0), c64(0.0, 0.0)]);
        assert!(p.validate_admissibility(&fl, &g).unwrap().passed());
        let fl = FLParams::terminal(vec![c64(2.0, 0.0), c64(0.0, 0.0)]);
        let r = p.validate_admissibility(&fl, &g).unwrap();
        assert_eq!(r.violation.unwrap().condition, Condition::LogPriceStrip);
        let fl = FLParams::new(
            vec![c64(0.5, 0.0), c64(0.0, 0.0)],
            vec![ComplexCurve::zero(), ComplexCurve::real(TimeFunction::Constant(0.1))],
        )
        .unwrap();
        let r = p.validate_admissibility(&fl, &g).unwrap();
        assert_eq!(r.violation.unwrap().condition, Condition::RunningVariance);
        let fl = FLParams::terminal(vec![c64(0.5, 0.0), c64(0.2, 0.0)]);
        assert!(matches!(
            p.solve(&fl, &g, &RiccatiOptions::default()),
            Err(Error::RejectedParameters(_))
        ));
    }

    #[test]
    fn trivial_functionals() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let p = HestonParams::constant_fractional(0.6, 1.3, 0.04, -0.7, 2.0, 0.05, 0.3, 1.0).unwrap();
        let opts = RiccatiOptions::default();
        let zero = FLParams::terminal(vec![c64(0.0, 0.0), c64(0.0, 0.0)]);
        assert!((p.charfn_time_zero(&zero, &g, &opts).unwrap() - 1.0).norm() < 1e-15);
        let one = FLParams::terminal(vec![c64(1.0, 0.0), c64(0.0, 0.0)]);
        let sol = p.solve(&one, &g, &opts).unwrap();
        assert!(sol.psi.iter().all(|v| v[0] == c64(1.0, 0.0) && v[1].norm() < 1e-15));
        assert!((p.charfn_time_zero(&one, &g, &opts).unwrap() - 1.3).norm() < 1e-13);
    }

    #[test]
    fn sign_and_symmetry() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let p = rough();
        let opts = RiccatiOptions::default();
        for w in [0.5, 2.0, 10.0] {
            let fl = FLParams::terminal(vec![c64(0.0, w), c64(0.0, 0.0)]);
            let sol = p.solve(&fl, &g, &opts).unwrap();
            assert!(sol.psi.iter().all(|v| v[1].re <= 1e-10));
            let a = p.charfn_time_zero(&fl, &g, &opts).unwrap();
            let b = p
                .charfn_time_zero(&FLParams::terminal(vec![c64(0.0, -w), c64(0.0, 0.0)]), &g, &opts)
                .unwrap();
            assert!(a.norm() <= 1.0 + 1e-12);
            assert!((a - b.conj()).norm() < 1e-10);
        }
    }

    #[test]
    fn cache_reuses_values() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let p = rough();
        let cache = CharfnCache::new();
        let fl = FLParams::terminal(vec![c64(0.0, 1.0), c64(0.0, 0.0)]);
        let opts = RiccatiOptions::default();
        let a = p.charfn_cached(&cache, &fl, &g, &opts).unwrap();
        let b = p.charfn_cached(&cache, &fl, &g, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(HestonParams::constant_fractional(0.6, -1.0, 0.04, 0.0, 1.0, 0.1, 0.3, 1.0).is_err());
        assert!(HestonParams::constant_fractional(0.6, 1.0, 0.04, 1.5, 1.0, 0.1, 0.3, 1.0).is_err());
        assert!(HestonParams::constant_fractional(0.6, 1.0, 0.04, 0.0, 1.0, 0.1, 0.0, 1.0).is_err());
    }
}
