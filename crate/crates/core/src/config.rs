//! Run configuration: a JSON document with a published schema.
//!
//! Times are in years and rates per year. Term structures are a number, a
//! `{times, values}` linear curve or a `{breaks, levels}` step curve.

use nalgebra::DMatrix;
use num_complex::Complex64;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::affine::{AffineCoefficients, ComplexCurve, StateSpace, TimeFunction};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::heston::HestonParams;
use crate::kernels::Kernel;
use crate::riccati::FLParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Heston(HestonConfig),
    Generic(GenericConfig),
}

/// `(log S, V)` with `dS = S η √V dW̃` and a Volterra square-root variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct HestonConfig {
    pub s0: f64,
    pub v0: f64,
    pub rho: f64,
    /// Mean-reversion speed, per year.
    pub kappa: TimeFunction,
    pub theta: TimeFunction,
    /// Volatility of variance; strictly positive.
    pub sigma_bar: TimeFunction,
    pub eta: TimeFunction,
    /// Scalar kernel of the variance equation.
    pub kernel: KernelConfig,
}

/// Generic affine Volterra model of dimension `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GenericConfig {
    pub x0: Vec<f64>,
    pub kernel: KernelConfig,
    /// Drift intercept, `d` curves.
    pub b0: Vec<TimeFunction>,
    /// Drift matrix, `d` rows of `d` curves.
    pub b: Vec<Vec<TimeFunction>>,
    /// `A⁰ … A^d`, each `d` rows of `d` curves.
    pub a: Vec<Vec<Vec<TimeFunction>>>,
    #[serde(default = "default_state_space")]
    pub state_space: StateSpace,
}

fn default_state_space() -> StateSpace {
    StateSpace::Real
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum KernelConfig {
    Identity,
    /// Diagonal `t^{α_i - 1} / Γ(α_i)`.
    Fractional { alphas: Vec<f64> },
    /// Diagonal `t^{α_i - 1} e^{-λ_i t} / Γ(α_i)`.
    Gamma { alphas: Vec<f64>, rates: Vec<f64> },
}

impl KernelConfig {
    pub fn build(&self, dim: usize) -> Result<Kernel> {
        let k = match self {
            Self::Identity => Kernel::identity(dim),
            Self::Fractional { alphas } => Kernel::fractional(alphas.clone())?,
            Self::Gamma { alphas, rates } => Kernel::gamma_kernel(alphas.clone(), rates.clone())?,
        };
        if k.dim() != dim {
            return Err(Error::Config(format!(
                "kernel has dimension {} but the model needs {dim}",
                k.dim()
            )));
        }
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Horizon `T` in years.
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_paths() -> usize {
    10_000
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: default_paths(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default)]
    pub charfn: CharfnTask,
    #[serde(default)]
    pub price: PriceTask,
    #[serde(default)]
    pub simulate: SimulateTask,
    #[serde(default)]
    pub validate: ValidateTask,
}

/// Sweep of `E[exp(i w X¹_T)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CharfnTask {
    #[serde(default = "default_w_ladder")]
    pub w: Vec<f64>,
}

fn default_w_ladder() -> Vec<f64> {
    vec![-5.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 5.0]
}

impl Default for CharfnTask {
    fn default() -> Self {
        Self { w: default_w_ladder() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PriceTask {
    #[serde(default = "default_strikes")]
    pub strikes: Vec<f64>,
    /// Years; defaults to the grid horizon.
    #[serde(default)]
    pub maturity: Option<f64>,
    /// Riccati steps for the characteristic function.
    #[serde(default = "default_price_steps")]
    pub riccati_steps: usize,
}

fn default_strikes() -> Vec<f64> {
    (0..11).map(|i| 0.75 + 0.05 * i as f64).collect()
}

fn default_price_steps() -> usize {
    1000
}

impl Default for PriceTask {
    fn default() -> Self {
        Self {
            strikes: default_strikes(),
            maturity: None,
            riccati_steps: default_price_steps(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleFormat {
    Binary,
    Csv,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SimulateTask {
    #[serde(default = "default_format")]
    pub format: EnsembleFormat,
    /// Order `p` of the reported `sup_t E‖X_t‖^p`.
    #[serde(default = "default_moment")]
    pub moment_power: u32,
}

fn default_format() -> EnsembleFormat {
    EnsembleFormat::Binary
}

fn default_moment() -> u32 {
    4
}

impl Default for SimulateTask {
    fn default() -> Self {
        Self {
            format: default_format(),
            moment_power: default_moment(),
        }
    }
}

/// A complex number as `[re, im]`.
pub type ComplexPair = [f64; 2];

/// Extra functional `E[exp(u X_T + ∫ f X ds)]` to screen and check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FunctionalConfig {
    pub label: String,
    pub u: Vec<ComplexPair>,
    /// Running weights; zero when omitted.
    #[serde(default)]
    pub f: Option<Vec<ComplexCurve>>,
}

impl FunctionalConfig {
    pub fn build(&self) -> Result<FLParams> {
        let u: Vec<Complex64> = self.u.iter().map(|p| Complex64::new(p[0], p[1])).collect();
        match &self.f {
            None => Ok(FLParams::terminal(u)),
            Some(f) => FLParams::new(u, f.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ValidateTask {
    /// Points of `u = (i w, 0, …)` for the Monte Carlo comparison.
    #[serde(default = "default_validate_w")]
    pub w: Vec<f64>,
    /// Grid halvings for the bias estimate.
    #[serde(default = "default_halvings")]
    pub halvings: usize,
    /// Paths used for the pathwise comparison of the two `Y` formulas.
    #[serde(default = "default_dual_paths")]
    pub dual_paths: usize,
    /// Minimum empirical order of the `Y` discrepancy under halving.
    #[serde(default = "default_dual_order")]
    pub dual_min_order: f64,
    #[serde(default)]
    pub functionals: Vec<FunctionalConfig>,
}

fn default_validate_w() -> Vec<f64> {
    vec![1.0, 3.0]
}

fn default_halvings() -> usize {
    2
}

fn default_dual_paths() -> usize {
    100
}

fn default_dual_order() -> f64 {
    0.4
}

impl Default for ValidateTask {
    fn default() -> Self {
        Self {
            w: default_validate_w(),
            halvings: default_halvings(),
            dual_paths: default_dual_paths(),
            dual_min_order: default_dual_order(),
            functionals: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory, overridden by `--out`.
    #[serde(default = "default_dir")]
    pub dir: String,
}

fn default_dir() -> String {
    "out".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_dir() }
    }
}

/// Model ready for computation.
#[derive(Debug, Clone)]
pub enum Model {
    Heston(HestonParams),
    Generic {
        kernel: Kernel,
        coefficients: AffineCoefficients,
        x0: Vec<f64>,
    },
}

impl Model {
    pub fn dim(&self) -> usize {
        match self {
            Self::Heston(_) => 2,
            Self::Generic { x0, .. } => x0.len(),
        }
    }

    /// `(K, c, X₀)` of the affine representation.
    pub fn affine(&self) -> (Kernel, AffineCoefficients, Vec<f64>) {
        match self {
            Self::Heston(p) => {
                let (k, c) = p.to_affine();
                (k, c, p.x0().to_vec())
            }
            Self::Generic {
                kernel,
                coefficients,
                x0,
            } => (kernel.clone(), coefficients.clone(), x0.clone()),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Pretty JSON with every default spelled out; parsing it back and
    /// re-serializing gives the same bytes.
    pub fn canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.n_steps)
    }

    pub fn model(&self) -> Result<Model> {
        match &self.model {
            ModelConfig::Heston(h) => {
                let kernel = h.kernel.build(1)?;
                Ok(Model::Heston(HestonParams::new(
                    h.s0,
                    h.v0,
                    h.rho,
                    h.kappa.clone(),
                    h.theta.clone(),
                    h.sigma_bar.clone(),
                    h.eta.clone(),
                    kernel,
                )?))
            }
            ModelConfig::Generic(g) => {
                let d = g.x0.len();
                if d == 0 {
                    return Err(Error::Config("x0 must not be empty".into()));
                }
                let square = |m: &Vec<Vec<TimeFunction>>, what: &str| -> Result<Vec<TimeFunction>> {
                    if m.len() != d || m.iter().any(|r| r.len() != d) {
                        return Err(Error::Config(format!("{what} must be {d}x{d}")));
                    }
                    Ok(m.iter().flatten().cloned().collect())
                };
                let b = square(&g.b, "b")?;
                let a = g
                    .a
                    .iter()
                    .enumerate()
                    .map(|(i, m)| square(m, &format!("a[{i}]")))
                    .collect::<Result<Vec<_>>>()?;
                let coefficients = AffineCoefficients::new(d, g.b0.clone(), b, a, g.state_space)?;
                Ok(Model::Generic {
                    kernel: g.kernel.build(d)?,
                    coefficients,
                    x0: g.x0.clone(),
                })
            }
        }
    }

    /// Structural and range checks, before any computation.
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        let model = self.model()?;
        if let Model::Generic { coefficients, x0, .. } = &model {
            if !coefficients.state_space().contains(x0) {
                return Err(Error::Config("x0 lies outside the state space".into()));
            }
            coefficients.validate_psd(&grid, std::slice::from_ref(x0))?;
        }
        if self.mc.n_paths == 0 {
            return Err(Error::Config("mc.n_paths must be positive".into()));
        }
        let t = &self.task;
        if t.charfn.w.iter().chain(&t.validate.w).any(|w| !w.is_finite()) {
            return Err(Error::Config("w points must be finite".into()));
        }
        if t.price.strikes.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
            return Err(Error::Config("strikes must be positive".into()));
        }
        if let Some(m) = t.price.maturity {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::Config("maturity must be positive".into()));
            }
        }
        if t.price.riccati_steps == 0 {
            return Err(Error::Config("price.riccati_steps must be positive".into()));
        }
        if t.simulate.moment_power == 0 {
            return Err(Error::Config("simulate.moment_power must be >= 1".into()));
        }
        let levels = 1usize << t.validate.halvings;
        if self.grid.n_steps % levels != 0 {
            return Err(Error::Config(format!(
                "grid.n_steps must be divisible by 2^halvings = {levels}"
            )));
        }
        for f in &t.validate.functionals {
            if f.u.len() != model.dim() {
                return Err(Error::Config(format!(
                    "functional '{}' has {} components, model has {}",
                    f.label,
                    f.u.len(),
                    model.dim()
                )));
            }
            f.build()?;
        }
        Ok(())
    }

    pub fn schema() -> schemars::schema::RootSchema {
        schemars::schema_for!(RunConfig)
    }
}

/// `u = (i w, 0, …, 0)`.
pub fn fourier_point(w: f64, dim: usize) -> FLParams {
    let mut u = vec![Complex64::new(0.0, 0.0); dim];
    u[0] = Complex64::new(0.0, w);
    FLParams::terminal(u)
}

/// Constant `d × d` matrix as nested term structures.
pub fn constant_matrix(m: &DMatrix<f64>) -> Vec<Vec<TimeFunction>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| TimeFunction::Constant(m[(i, j)])).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const ROUGH: &str = r#"{
        "model": {"heston": {
            "s0": 1.0, "v0": 0.04, "rho": -0.7,
            "kappa": {"breaks": [0.5], "levels": [2.0, 1.0]},
            "theta": 0.05, "sigma_bar": {"times": [0.0, 1.0], "values": [0.3, 0.25]},
            "eta": 1.0, "kernel": {"type": "fractional", "alphas": [0.6]}
        }},
        "grid": {"horizon": 1.0, "n_steps": 100},
        "mc": {"n_paths": 500, "seed": 7}
    }"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = RunConfig::from_json(ROUGH).unwrap();
        assert_eq!(cfg.task.validate.w, vec![1.0, 3.0]);
        let canon = cfg.canonical_json();
        let again = RunConfig::from_json(&canon).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.canonical_json(), canon);
        assert!(matches!(cfg.model().unwrap(), Model::Heston(_)));
    }

    #[test]
    fn rejects_bad_documents() {
        let unknown = ROUGH.replace("\"seed\": 7", "\"seed\": 7, \"sede\": 1");
        assert!(matches!(RunConfig::from_json(&unknown), Err(Error::Config(_))));
        let negative = ROUGH.replace("\"s0\": 1.0", "\"s0\": -1.0");
        assert!(RunConfig::from_json(&negative).is_err());
        let odd = ROUGH.replace("\"n_steps\": 100", "\"n_steps\": 101");
        assert!(RunConfig::from_json(&odd).is_err());
        let flat = ROUGH.replace("\"sigma_bar\": {\"times\": [0.0, 1.0], \"values\": [0.3, 0.25]}", "\"sigma_bar\": 0.0");
        assert!(RunConfig::from_json(&flat).is_err());
    }

    #[test]
    fn generic_model() {
        let text = r#"{
            "model": {"generic": {
                "x0": [1.0],
                "kernel": {"type": "identity"},
                "b0": [0.0], "b": [[-1.0]], "a": [[[0.04]], [[0.0]]]
            }},
            "grid": {"horizon": 1.0, "n_steps": 40}
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        match cfg.model().unwrap() {
            Model::Generic { x0, coefficients, .. } => {
                assert_eq!(x0, vec![1.0]);
                assert_eq!(coefficients.state_space(), StateSpace::Real);
            }
            _ => panic!("expected a generic model"),
        }
        let bad = text.replace("[[[0.04]], [[0.0]]]", "[[[-0.04]], [[0.0]]]");
        assert!(RunConfig::from_json(&bad).is_err());
    }
}
