//! Cross-validation suite: Monte Carlo against Riccati transforms, the two
//! pathwise formulas for `Y`, sign and structural identities.
//!
//! Every item carries the measured quantity and the tolerance it was held
//! to. Nothing here reads the clock, so a report is a pure function of the
//! configuration.

use num_complex::Complex64;
use serde::Serialize;

use crate::config::{fourier_point, Model, RunConfig};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernels::{resolvent_first_kind, Kernel};
use crate::riccati::{
    dot, solve_heston_psi, solve_riccati_convolution, solve_riccati_fractional, solve_riccati_general,
    y0_direct, y_forward_path, FLParams, RiccatiOptions, RiccatiSolution, SchemePastPath,
};
use crate::simulate::{
    brownian_increments, coarsen_increments, coupled_stream, parallel_reduce, MCEstimate, PathSimulator,
    SimPath, StreamRequest,
};

/// Bound on `Re ψ_c` for components living on `[0, ∞)`.
pub const SIGN_TOLERANCE: f64 = 1e-10;
pub const RESOLVENT_TOLERANCE: f64 = 1e-6;
pub const Y0_TOLERANCE: f64 = 1e-8;
/// Riccati steps per simulation step for the reference transform.
pub const REFERENCE_REFINEMENT: usize = 4;
/// Absolute floor under Monte Carlo budgets, for noiseless models.
pub const ROUNDING_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// Input refused before any solve.
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckItem {
    pub name: String,
    pub status: Status,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckItem {
    fn bound(name: impl Into<String>, measured: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        let status = if measured <= tolerance { Status::Pass } else { Status::Fail };
        Self {
            name: name.into(),
            status,
            measured,
            tolerance,
            detail: detail.into(),
        }
    }

    fn failed(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            status: Status::Fail,
            measured: f64::NAN,
            tolerance: f64::NAN,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub items: Vec<CheckItem>,
    /// Set when the suite could not run to the end.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ValidationReport {
    pub fn new(items: Vec<CheckItem>) -> Self {
        Self {
            passed: items.iter().all(|i| i.status == Status::Pass),
            items,
            error: None,
        }
    }

    pub fn aborted(error: &Error) -> Self {
        Self {
            passed: false,
            items: Vec::new(),
            error: Some(error.to_string()),
        }
    }

    pub fn item(&self, name: &str) -> Option<&CheckItem> {
        self.items.iter().find(|i| i.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Solves the Riccati system of `model` for `p`, with `φ`, `χ` and `Y₀`.
pub fn solve_model(model: &Model, p: &FLParams, grid: &TimeGrid, opts: &RiccatiOptions) -> Result<RiccatiSolution> {
    let (kernel, c, x0) = model.affine();
    let mut sol = match model {
        Model::Heston(h) => solve_heston_psi(h, p, grid, opts)?,
        Model::Generic { .. } => match kernel.fractional_exponents() {
            Some(a) if a.iter().all(|&a| a > 0.5 && a <= 1.0) => solve_riccati_fractional(&a, &c, p, grid, opts)?,
            _ if kernel.is_convolution() => solve_riccati_convolution(&kernel, &c, p, grid, opts)?,
            _ => solve_riccati_general(&kernel, &c, p, grid, opts)?,
        },
    };
    sol.set_initial_state(&x0);
    Ok(sol)
}

/// `E[exp(u X_T + ∫ f X ds)]` at time zero.
pub fn model_transform(model: &Model, p: &FLParams, grid: &TimeGrid, opts: &RiccatiOptions) -> Result<Complex64> {
    match model {
        Model::Heston(h) => h.charfn_time_zero(p, grid, opts),
        Model::Generic { .. } => Ok(solve_model(model, p, grid, opts)?.y0.expect("initial state set").exp()),
    }
}

/// The first violated admissibility condition of `p`, if any. Constrained
/// components need `Re u ≤ 0` and `Re f ≤ 0`; Heston also needs the log
/// price weight inside the strip `[0, 1]`.
pub fn screen(model: &Model, p: &FLParams, grid: &TimeGrid) -> Result<Option<String>> {
    if p.dim() != model.dim() {
        return Err(Error::Validation("functional and model dimensions differ".into()));
    }
    match model {
        Model::Heston(h) => Ok(h.validate_admissibility(p, grid)?.violation.map(|v| v.to_string())),
        Model::Generic { coefficients, .. } => {
            let space = coefficients.state_space();
            for c in 0..p.dim() {
                if !space.is_constrained(c) {
                    continue;
                }
                if p.u[c].re > 0.0 {
                    return Ok(Some(format!("Re u{} = {} > 0", c + 1, p.u[c].re)));
                }
                for t in grid.times() {
                    let v = p.f[c].eval(t).re;
                    if v > 0.0 {
                        return Ok(Some(format!("Re f{} = {v} > 0 at t = {t}", c + 1)));
                    }
                }
            }
            Ok(None)
        }
    }
}

/// One scheme per coarsening factor of `grid`.
pub fn simulators(model: &Model, grid: &TimeGrid, factors: &[usize]) -> Result<Vec<PathSimulator>> {
    factors
        .iter()
        .map(|&f| {
            let g = grid.coarsened(f)?;
            match model {
                Model::Heston(h) => PathSimulator::heston(h, &g),
                Model::Generic {
                    kernel,
                    coefficients,
                    x0,
                } => PathSimulator::volterra(kernel, coefficients, x0, &g),
            }
        })
        .collect()
}

/// `[2^h, …, 2, 1]`: coarsest first.
pub fn halving_factors(halvings: usize) -> Vec<usize> {
    (0..=halvings).rev().map(|h| 1usize << h).collect()
}

/// Monte Carlo estimates of one transform on a sequence of grids.
#[derive(Debug, Clone)]
pub struct TransformComparison {
    pub reference: Complex64,
    /// Coarsest grid first.
    pub steps: Vec<usize>,
    pub estimates: Vec<MCEstimate<Complex64>>,
}

impl TransformComparison {
    pub fn finest(&self) -> &MCEstimate<Complex64> {
        self.estimates.last().expect("at least one level")
    }

    /// `|MC_Δ - MC_2Δ|` for each consecutive pair of levels.
    pub fn bias_ladder(&self) -> Vec<f64> {
        self.estimates.windows(2).map(|w| (w[1].value - w[0].value).norm()).collect()
    }

    pub fn bias(&self) -> f64 {
        self.bias_ladder().last().copied().unwrap_or(0.0)
    }

    pub fn error(&self) -> f64 {
        (self.finest().value - self.reference).norm()
    }

    pub fn budget(&self) -> f64 {
        3.0 * self.finest().std_error.norm() + self.bias() + ROUNDING_FLOOR
    }

    pub fn bias_shrinks(&self) -> bool {
        self.bias_ladder().windows(2).all(|w| w[1] < w[0] || w[1] <= ROUNDING_FLOOR)
    }
}

#[derive(Debug, Clone)]
pub struct TransformStudy {
    pub comparisons: Vec<TransformComparison>,
    /// `E[exp(X¹_T)]` on the finest grid.
    pub spot: MCEstimate<f64>,
}

/// Streams `n_paths` coupled paths and compares each functional with its
/// Riccati value on a grid `REFERENCE_REFINEMENT` times finer.
pub fn compare_transforms(
    model: &Model,
    grid: &TimeGrid,
    halvings: usize,
    n_paths: usize,
    seed: u64,
    functionals: &[FLParams],
    opts: &RiccatiOptions,
) -> Result<TransformStudy> {
    let factors = halving_factors(halvings);
    let schemes = simulators(model, grid, &factors)?;
    let req = StreamRequest {
        functionals: functionals.to_vec(),
        ..Default::default()
    };
    let summaries = coupled_stream(&schemes, grid, &factors, n_paths, seed, &req)?;
    let fine = TimeGrid::new(grid.horizon(), grid.n_steps() * REFERENCE_REFINEMENT)?;
    let comparisons = functionals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(TransformComparison {
                reference: model_transform(model, p, &fine, opts)?,
                steps: summaries.iter().map(|s| s.grid.n_steps()).collect(),
                estimates: summaries.iter().map(|s| s.functionals[i]).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransformStudy {
        comparisons,
        spot: summaries.last().expect("at least one level").spot,
    })
}

/// Pathwise gap between forward Euler accumulation of `Y` and the
/// past-path representation, on a sequence of grids.
#[derive(Debug, Clone)]
pub struct DualStudy {
    /// Coarsest grid first.
    pub steps: Vec<usize>,
    /// `max_{paths, t} |Y_forward - Y_pastpath|` per grid.
    pub max_gap: Vec<f64>,
    /// `max_paths |Y_pastpath(T) - (u X_T + Σ f X Δ)|` per grid.
    pub terminal_gap: Vec<f64>,
}

impl DualStudy {
    /// Least-squares slope of `log gap` against `log Δ`.
    pub fn order(&self) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .steps
            .iter()
            .zip(&self.max_gap)
            .map(|(&n, &g)| (-(n as f64).ln(), g.ln()))
            .collect();
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        sxy / sxx
    }

    pub fn decreasing(&self) -> bool {
        self.max_gap.windows(2).all(|w| w[1] < w[0])
    }

    /// Both formulas agree to rounding on every grid.
    pub fn exact(&self) -> bool {
        self.max_gap.iter().all(|&g| g <= ROUNDING_FLOOR)
    }

    pub fn finest_gap(&self) -> f64 {
        *self.max_gap.last().expect("at least one level")
    }

    pub fn worst_terminal_gap(&self) -> f64 {
        self.terminal_gap.iter().copied().fold(0.0, f64::max)
    }
}

pub fn dual_study(
    model: &Model,
    grid: &TimeGrid,
    halvings: usize,
    n_paths: usize,
    seed: u64,
    p: &FLParams,
    opts: &RiccatiOptions,
) -> Result<DualStudy> {
    if halvings == 0 {
        return Err(Error::Validation("the dual study needs at least one halving".into()));
    }
    let (kernel, c, _) = model.affine();
    let factors = halving_factors(halvings);
    let schemes = simulators(model, grid, &factors)?;
    let levels = factors
        .iter()
        .zip(&schemes)
        .map(|(_, s)| {
            let g = *s.grid();
            let sol = solve_model(model, p, &g, opts)?;
            let past = SchemePastPath::new(&sol, &kernel, &c, p)?;
            Ok((sol, past, p.f_on_grid(&g)))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = schemes[0].noise_dim();
    let nl = factors.len();
    let gaps = parallel_reduce(
        n_paths,
        || vec![0.0f64; 2 * nl],
        || {
            let fine = vec![0.0; m * grid.n_steps()];
            let paths: Vec<SimPath> = schemes.iter().map(PathSimulator::new_path).collect();
            (fine, paths)
        },
        |acc, (fine, paths), i| {
            brownian_increments(seed, i as u64, grid, fine);
            for (l, ((s, &f), path)) in schemes.iter().zip(&factors).zip(paths.iter_mut()).enumerate() {
                coarsen_increments(fine, m, f, &mut path.increments);
                s.run(path, i)?;
                let (sol, past, fg) = &levels[l];
                let fwd = y_forward_path(sol, &c, path)?;
                let pp = past.series(path)?;
                let gap = fwd.iter().zip(&pp).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
                let n = path.grid.n_steps();
                let dt = path.grid.dt();
                let mut target = dot(&p.u, path.raw_state(n));
                for (j, fj) in fg.iter().enumerate().take(n) {
                    target += dot(fj, path.raw_state(j)) * dt;
                }
                acc[l] = acc[l].max(gap);
                acc[nl + l] = acc[nl + l].max((pp[n] - target).norm());
            }
            Ok(())
        },
        |total, part| {
            for (a, b) in total.iter_mut().zip(&part) {
                *a = a.max(*b);
            }
        },
    )?;
    Ok(DualStudy {
        steps: schemes.iter().map(|s| s.grid().n_steps()).collect(),
        max_gap: gaps[..nl].to_vec(),
        terminal_gap: gaps[nl..].to_vec(),
    })
}

/// `max_{t_j} |(K̄ ⋆ L)(t_j) - Id|` for the model's kernel.
pub fn resolvent_check(kernel: &Kernel, grid: &TimeGrid) -> Result<f64> {
    let l = resolvent_first_kind(kernel, grid)?;
    crate::kernels::resolvent_identity_error(kernel, &l, grid)
}

/// Largest `Re ψ_c(t_j)` over constrained components `c`.
pub fn max_constrained_psi(model: &Model, sol: &RiccatiSolution) -> Option<f64> {
    let (_, c, _) = model.affine();
    let space = c.state_space();
    let comps: Vec<usize> = (0..sol.dim()).filter(|&i| space.is_constrained(i)).collect();
    if comps.is_empty() {
        return None;
    }
    Some(
        sol.psi
            .iter()
            .flat_map(|v| comps.iter().map(move |&i| v[i].re))
            .fold(f64::NEG_INFINITY, f64::max),
    )
}

/// `|Y₀ direct - (φ(T) + χ(T) X₀)|`, relative to `max(1, |Y₀|)`.
pub fn y0_gap(model: &Model, p: &FLParams, sol: &RiccatiSolution) -> Result<f64> {
    let (_, c, x0) = model.affine();
    let direct = y0_direct(&c, p, sol, &x0)?;
    let n = sol.grid.n_steps();
    let structural = sol.phi[n] + dot(&sol.chi[n], &x0);
    Ok((direct - structural).norm() / structural.norm().max(1.0))
}

fn fmt_c(z: Complex64) -> String {
    format!("{:.6e}{:+.6e}i", z.re, z.im)
}

/// Runs every item of the suite configured in `cfg`.
pub fn run_validation(cfg: &RunConfig) -> Result<ValidationReport> {
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let task = &cfg.task.validate;
    let opts = RiccatiOptions::default();
    let dim = model.dim();
    let mut items = Vec::new();

    // screen first: rejected inputs are never solved
    let mut functionals: Vec<(String, FLParams)> = task
        .w
        .iter()
        .map(|&w| (format!("w={w}"), fourier_point(w, dim)))
        .collect();
    for f in &task.functionals {
        let p = f.build()?;
        let name = format!("admissibility:{}", f.label);
        match screen(&model, &p, &grid)? {
            Some(why) => items.push(CheckItem {
                name,
                status: Status::Rejected,
                measured: f64::NAN,
                tolerance: 0.0,
                detail: why,
            }),
            None => {
                items.push(CheckItem::bound(name, 0.0, 0.0, "admissible"));
                functionals.push((f.label.clone(), p));
            }
        }
    }
    let admissible = functionals;

    // Riccati solves on the simulation grid
    let mut sign = f64::NEG_INFINITY;
    let mut residual = 0.0f64;
    let mut residual_tol = f64::INFINITY;
    let mut y0 = 0.0f64;
    let mut solve_errors = Vec::new();
    for (label, p) in &admissible {
        match solve_model(&model, p, &grid, &opts) {
            Ok(sol) => {
                if let Some(s) = max_constrained_psi(&model, &sol) {
                    sign = sign.max(s);
                }
                if sol.residual_norm.is_finite() {
                    residual = residual.max(sol.residual_norm);
                    residual_tol = residual_tol.min(sol.residual_tolerance);
                }
                match y0_gap(&model, p, &sol) {
                    Ok(g) => y0 = y0.max(g),
                    Err(e) => solve_errors.push(format!("{label}: {e}")),
                }
            }
            Err(e) => solve_errors.push(format!("{label}: {e}")),
        }
    }
    if !solve_errors.is_empty() {
        items.push(CheckItem::failed("riccati_solve", solve_errors.join("; ")));
    }
    if sign.is_finite() {
        items.push(CheckItem::bound(
            "riccati_sign",
            sign,
            SIGN_TOLERANCE,
            "max Re psi over constrained components and nodes",
        ));
    }
    if residual_tol.is_finite() {
        items.push(CheckItem::bound(
            "riccati_residual",
            residual,
            residual_tol,
            "max residual over solved instances",
        ));
    }
    items.push(CheckItem::bound(
        "y0_identity",
        y0,
        Y0_TOLERANCE,
        "relative gap between direct Y0 and phi(T) + chi(T) X0",
    ));

    // Monte Carlo against Riccati, and E[S_T] = S_0 from the same paths
    let ps: Vec<FLParams> = admissible.iter().map(|(_, p)| p.clone()).collect();
    match compare_transforms(&model, &grid, task.halvings, cfg.mc.n_paths, cfg.mc.seed, &ps, &opts) {
        Ok(study) => {
            for ((label, _), c) in admissible.iter().zip(&study.comparisons) {
                let mut detail = format!(
                    "mc {} se {:.3e} riccati {} bias {:.3e}",
                    fmt_c(c.finest().value),
                    c.finest().std_error.norm(),
                    fmt_c(c.reference),
                    c.bias()
                );
                if c.steps.len() > 2 && !c.bias_shrinks() {
                    detail.push_str(" (bias not shrinking)");
                }
                items.push(CheckItem::bound(format!("transform_mc:{label}"), c.error(), c.budget(), detail));
            }
            if let Model::Heston(h) = &model {
                let spot = study.spot;
                items.push(CheckItem::bound(
                    "martingale",
                    (spot.value - h.s0).abs(),
                    3.0 * spot.std_error + ROUNDING_FLOOR,
                    format!("E[S_T] = {:.6} se {:.2e}", spot.value, spot.std_error),
                ));
            }
        }
        Err(e) => items.push(CheckItem::failed("transform_mc", e.to_string())),
    }

    // Y forward against Y from the past path
    if let Some(&w) = task.w.first() {
        let p = fourier_point(w, dim);
        match dual_study(&model, &grid, task.halvings.max(1), task.dual_paths, cfg.mc.seed, &p, &opts) {
            Ok(study) => {
                let order = study.order();
                let gaps: Vec<String> = study
                    .steps
                    .iter()
                    .zip(&study.max_gap)
                    .map(|(n, g)| format!("{n}:{g:.3e}"))
                    .collect();
                let mut item = CheckItem {
                    name: "dual_y_order".into(),
                    status: if study.exact() || (order >= task.dual_min_order && study.decreasing()) {
                        Status::Pass
                    } else {
                        Status::Fail
                    },
                    measured: order,
                    tolerance: task.dual_min_order,
                    detail: format!("max gap by steps {}", gaps.join(" ")),
                };
                if study.exact() {
                    item.detail.push_str(" (exact)");
                } else if !study.decreasing() {
                    item.detail.push_str(" (not decreasing)");
                }
                items.push(item);
                items.push(CheckItem::bound(
                    "dual_y_terminal",
                    study.worst_terminal_gap(),
                    study.finest_gap().max(ROUNDING_FLOOR),
                    "Y(T) against u X_T + sum f X dt",
                ));
            }
            Err(e) => items.push(CheckItem::failed("dual_y_order", e.to_string())),
        }
    }

    // resolvent of the first kind
    let (kernel, _, _) = model.affine();
    if kernel.is_convolution() {
        match resolvent_check(&kernel, &grid) {
            Ok(err) => items.push(CheckItem::bound(
                "resolvent_identity",
                err,
                RESOLVENT_TOLERANCE,
                "max over nodes of |(K * L)(t) - 1|",
            )),
            Err(e) => items.push(CheckItem::failed("resolvent_identity", e.to_string())),
        }
    }

    Ok(ValidationReport::new(items))
}
