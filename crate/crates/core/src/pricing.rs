//! European options by Fourier inversion along `u₁ = 1/2 + iw`, and
//! Black–Scholes implied volatility.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use libm::erfc;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::heston::{CharfnCache, HestonParams};
use crate::quadrature::GaussLegendre;
use crate::riccati::{FLParams, RiccatiOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum OptionKind {
    Call,
    Put,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptionSpec {
    pub strike: f64,
    pub maturity: f64,
    pub kind: OptionKind,
    /// Continuously compounded, per year.
    pub rate: f64,
}

impl OptionSpec {
    pub fn call(strike: f64, maturity: f64) -> Self {
        Self {
            strike,
            maturity,
            kind: OptionKind::Call,
            rate: 0.0,
        }
    }

    pub fn put(strike: f64, maturity: f64) -> Self {
        Self {
            kind: OptionKind::Put,
            ..Self::call(strike, maturity)
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.strike > 0.0 && self.strike.is_finite()) {
            return Err(Error::Domain(format!("strike must be positive, got {}", self.strike)));
        }
        if !(self.maturity > 0.0 && self.maturity.is_finite()) {
            return Err(Error::Domain(format!("maturity must be positive, got {}", self.maturity)));
        }
        if !self.rate.is_finite() {
            return Err(Error::Domain("rate must be finite".into()));
        }
        Ok(())
    }
}

/// Inversion settings.
#[derive(Debug, Clone)]
pub struct InversionSettings {
    /// Riccati grid steps on `[0, T]`.
    pub n_steps: usize,
    /// Gauss–Legendre nodes per panel.
    pub panel_order: usize,
    /// Nodes of the first pass (a multiple of `panel_order`).
    pub initial_nodes: usize,
    pub initial_upper: f64,
    /// Stop once successive prices differ by less than this.
    pub tolerance: f64,
    /// Relative size of the integrand at the cut-off.
    pub tail_tolerance: f64,
    pub max_doublings: usize,
    pub riccati: RiccatiOptions,
}

impl Default for InversionSettings {
    fn default() -> Self {
        Self {
            n_steps: 1000,
            panel_order: 20,
            initial_nodes: 200,
            initial_upper: 200.0,
            tolerance: 1e-9,
            tail_tolerance: 1e-10,
            max_doublings: 6,
            riccati: RiccatiOptions {
                check_residual: false,
                ..Default::default()
            },
        }
    }
}

/// Characteristic function of `log(S_T / S₀)` at `w - i/2`, memoized.
struct Integrand<'a> {
    params: &'a HestonParams,
    grid: TimeGrid,
    cache: &'a CharfnCache,
    opts: &'a RiccatiOptions,
}

impl Integrand<'_> {
    fn shifted_charfn(&self, w: f64) -> Result<Complex64> {
        let u = Complex64::new(0.5, w);
        let p = FLParams::terminal(vec![u, Complex64::new(0.0, 0.0)]);
        let v = self.params.charfn_cached(self.cache, &p, &self.grid, self.opts)?;
        Ok(v * (-u * self.params.s0.ln()).exp())
    }

    fn many(&self, ws: &[f64]) -> Result<Vec<Complex64>> {
        ws.par_iter().map(|&w| self.shifted_charfn(w)).collect()
    }
}

fn lewis_weight(w: f64, k: f64, phi: Complex64) -> f64 {
    (Complex64::from_polar(1.0, w * k) * phi).re / (w * w + 0.25)
}

/// Prices and diagnostics for one strike.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PriceRow {
    pub strike: f64,
    pub call: f64,
    pub put: f64,
    pub implied_vol: f64,
    pub charfn_evaluations: usize,
}

/// Undiscounted call prices `E[(S_T - K)⁺]` for a strike ladder, sharing
/// the characteristic function across strikes.
pub fn call_ladder(
    params: &HestonParams,
    maturity: f64,
    strikes: &[f64],
    settings: &InversionSettings,
    cache: &CharfnCache,
) -> Result<(Vec<f64>, usize)> {
    for &k in strikes {
        OptionSpec::call(k, maturity).validate()?;
    }
    let s0 = params.s0;
    if params.is_zero_vol() {
        return Ok((strikes.iter().map(|k| (s0 - k).max(0.0)).collect(), 0));
    }
    let grid = TimeGrid::new(maturity, settings.n_steps)?;
    let f = Integrand {
        params,
        grid,
        cache,
        opts: &settings.riccati,
    };
    let log_moneyness: Vec<f64> = strikes.iter().map(|k| (s0 / k).ln()).collect();

    // Extend the range until the integrand envelope |φ|/(w² + 1/4) is negligible.
    let scale = f.shifted_charfn(0.0)?.norm() / 0.25;
    let mut upper = settings.initial_upper;
    loop {
        let env = f.shifted_charfn(upper)?.norm() / (upper * upper + 0.25);
        if env <= settings.tail_tolerance * scale {
            break;
        }
        upper *= 2.0;
        if upper > settings.initial_upper * 2f64.powi(settings.max_doublings as i32) {
            return Err(Error::Pricing(format!(
                "integrand still {env:.3e} (scale {scale:.3e}) at w = {upper}; tail not resolved"
            )));
        }
    }

    let rule = GaussLegendre::new(settings.panel_order);
    let mut breaks = graded_breaks(upper, (settings.initial_nodes / settings.panel_order).max(1));
    let mut evaluations = 0;
    let mut previous: Option<Vec<f64>> = None;
    for _ in 0..=settings.max_doublings {
        let mut nodes = Vec::with_capacity((breaks.len() - 1) * settings.panel_order);
        let mut weights = Vec::with_capacity(nodes.capacity());
        for p in breaks.windows(2) {
            let (a, b) = (p[0], p[1]);
            for (x, w) in rule.nodes.iter().zip(&rule.weights) {
                nodes.push(0.5 * (a + b) + 0.5 * (b - a) * x);
                weights.push(0.5 * (b - a) * w);
            }
        }
        let phis = f.many(&nodes)?;
        evaluations += nodes.len();
        let calls: Vec<f64> = log_moneyness
            .iter()
            .zip(strikes)
            .map(|(&k, &strike)| {
                let integral: f64 = nodes
                    .iter()
                    .zip(&weights)
                    .zip(&phis)
                    .map(|((&w, &q), &phi)| q * lewis_weight(w, k, phi))
                    .sum();
                s0 - (s0 * strike).sqrt() / PI * integral
            })
            .collect();
        if let Some(prev) = &previous {
            let change = prev
                .iter()
                .zip(&calls)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            log::debug!("{} panels on [0, {upper}]: change {change:e}", breaks.len() - 1);
            if change < settings.tolerance {
                return Ok((calls, evaluations));
            }
        }
        previous = Some(calls);
        breaks = bisected(&breaks);
    }
    Err(Error::Pricing(format!(
        "inversion did not settle below {} after {} doublings on [0, {upper}]",
        settings.tolerance, settings.max_doublings
    )))
}

/// Panel breaks on `[0, upper]`, geometrically graded towards zero where
/// the poles of `1/(w² + 1/4)` at `±i/2` sit close to the real line.
fn graded_breaks(upper: f64, panels: usize) -> Vec<f64> {
    let first = 0.5f64.min(upper / panels as f64);
    if panels == 1 || first >= upper {
        return vec![0.0, upper];
    }
    let ratio = (upper / first).powf(1.0 / (panels - 1) as f64);
    let mut b = vec![0.0, first];
    for _ in 1..panels - 1 {
        let next = b[b.len() - 1] * ratio;
        b.push(next);
    }
    b.push(upper);
    b
}

fn bisected(breaks: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * breaks.len() - 1);
    for w in breaks.windows(2) {
        out.push(w[0]);
        out.push(0.5 * (w[0] + w[1]));
    }
    out.push(breaks[breaks.len() - 1]);
    out
}

/// Price of one European option, discounted at `opt.rate`.
pub fn price_european(
    params: &HestonParams,
    opt: &OptionSpec,
    settings: &InversionSettings,
    cache: &CharfnCache,
) -> Result<f64> {
    opt.validate()?;
    let (calls, _) = call_ladder(params, opt.maturity, &[opt.strike], settings, cache)?;
    let call = calls[0];
    let undiscounted = match opt.kind {
        OptionKind::Call => call,
        OptionKind::Put => call - params.s0 + opt.strike,
    };
    Ok((-opt.rate * opt.maturity).exp() * undiscounted)
}

/// Call, put (by parity) and implied volatility for every strike.
pub fn price_table(
    params: &HestonParams,
    maturity: f64,
    strikes: &[f64],
    settings: &InversionSettings,
    cache: &CharfnCache,
) -> Result<Vec<PriceRow>> {
    let (calls, evaluations) = call_ladder(params, maturity, strikes, settings, cache)?;
    let s0 = params.s0;
    strikes
        .iter()
        .zip(calls)
        .map(|(&strike, call)| {
            let opt = OptionSpec::call(strike, maturity);
            // clamp round-off just outside the no-arbitrage band
            let lo = (s0 - strike).max(0.0);
            let clamped = if call < lo && call > lo - 1e-12 { lo } else { call };
            Ok(PriceRow {
                strike,
                call,
                put: call - s0 + strike,
                implied_vol: implied_vol(clamped, &opt, s0)?,
                charfn_evaluations: evaluations,
            })
        })
        .collect()
}

/// Largest parity residual `|C - P - (S₀ - K)|`, bound violation and
/// most negative second difference of `C(K)` (strikes sorted ascending).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TableChecks {
    pub parity: f64,
    pub bound_violation: f64,
    pub min_second_difference: f64,
    pub max_increase: f64,
}

impl TableChecks {
    pub fn passed(&self) -> bool {
        self.parity <= 1e-8
            && self.bound_violation <= 1e-10
            && self.min_second_difference >= -1e-8
            && self.max_increase <= 1e-10
    }
}

pub fn check_table(rows: &[PriceRow], s0: f64) -> TableChecks {
    let mut c = TableChecks {
        parity: 0.0,
        bound_violation: 0.0,
        min_second_difference: f64::INFINITY,
        max_increase: f64::NEG_INFINITY,
    };
    for r in rows {
        c.parity = c.parity.max((r.call - r.put - (s0 - r.strike)).abs());
        let lo = (s0 - r.strike).max(0.0);
        c.bound_violation = c.bound_violation.max(lo - r.call).max(r.call - s0);
    }
    for w in rows.windows(2) {
        c.max_increase = c.max_increase.max(w[1].call - w[0].call);
    }
    for w in rows.windows(3) {
        let (h1, h2) = (w[1].strike - w[0].strike, w[2].strike - w[1].strike);
        let d = (w[2].call - w[1].call) / h2 - (w[1].call - w[0].call) / h1;
        c.min_second_difference = c.min_second_difference.min(d);
    }
    c
}

pub fn write_price_csv<W: Write>(rows: &[PriceRow], mut w: W) -> Result<()> {
    w.write_all(b"strike,call,put,implied_vol,charfn_evaluations\n")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.strike, r.call, r.put, r.implied_vol, r.charfn_evaluations
        )?;
    }
    Ok(())
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Undiscounted Black–Scholes price with total deviation `σ√T`.
pub fn black_scholes(s0: f64, opt: &OptionSpec, sigma: f64) -> f64 {
    let k = opt.strike;
    let sd = sigma * opt.maturity.sqrt();
    let call = if sd <= 0.0 {
        (s0 - k).max(0.0)
    } else {
        let d1 = ((s0 / k).ln() + 0.5 * sd * sd) / sd;
        s0 * norm_cdf(d1) - k * norm_cdf(d1 - sd)
    };
    match opt.kind {
        OptionKind::Call => call,
        OptionKind::Put => call - s0 + k,
    }
}

fn vega(s0: f64, opt: &OptionSpec, sigma: f64) -> f64 {
    let sd = sigma * opt.maturity.sqrt();
    let d1 = ((s0 / opt.strike).ln() + 0.5 * sd * sd) / sd;
    s0 * (-0.5 * d1 * d1).exp() / (2.0 * PI).sqrt() * opt.maturity.sqrt()
}

/// Black–Scholes implied volatility (zero rate) by Newton steps kept inside
/// a bisection bracket.
pub fn implied_vol(price: f64, opt: &OptionSpec, s0: f64) -> Result<f64> {
    opt.validate()?;
    let k = opt.strike;
    let call = match opt.kind {
        OptionKind::Call => price,
        OptionKind::Put => price + s0 - k,
    };
    let lo_bound = (s0 - k).max(0.0);
    if !(call >= lo_bound && call <= s0) {
        return Err(Error::Domain(format!(
            "price {price} outside no-arbitrage bounds [{lo_bound}, {s0}]"
        )));
    }
    if call == lo_bound {
        return Ok(0.0);
    }
    if call == s0 {
        return Err(Error::Domain("price equals the spot; implied volatility is infinite".into()));
    }
    let c = OptionSpec {
        kind: OptionKind::Call,
        ..*opt
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while black_scholes(s0, &c, hi) < call {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Domain("implied volatility above 1e6".into()));
        }
    }
    let mut sigma = 0.5 * (lo + hi);
    for _ in 0..200 {
        let diff = black_scholes(s0, &c, sigma) - call;
        if diff > 0.0 {
            hi = sigma;
        } else {
            lo = sigma;
        }
        let v = vega(s0, &c, sigma);
        let newton = sigma - diff / v;
        let next = if v > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - sigma).abs() < 1e-14 || hi - lo < 1e-14 {
            return Ok(next);
        }
        sigma = next;
    }
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::TimeFunction;
    use crate::kernels::Kernel;

    fn heston(alpha: f64, eta: f64) -> HestonParams {
        HestonParams::constant_fractional(alpha, 1.0, 0.04, -0.7, 2.0, 0.05, 0.3, eta).unwrap()
    }

    #[test]
    fn zero_vol_is_intrinsic() {
        let p = heston(0.6, 0.0);
        let cache = CharfnCache::new();
        let (calls, n) = call_ladder(&p, 1.0, &[0.8, 1.0, 1.2], &InversionSettings::default(), &cache).unwrap();
        assert_eq!(calls, vec![1.0f64 - 0.8, 0.0, 0.0]);
        assert_eq!(n, 0);
    }

    #[test]
    fn ladder_is_arbitrage_free() {
        let p = heston(1.0, 1.0);
        let cache = CharfnCache::new();
        let strikes: Vec<f64> = (0..11).map(|i| 0.75 + 0.05 * i as f64).collect();
        let settings = InversionSettings {
            n_steps: 200,
            ..Default::default()
        };
        let rows = price_table(&p, 1.0, &strikes, &settings, &cache).unwrap();
        let checks = check_table(&rows, 1.0);
        assert!(checks.passed(), "{checks:?}");
        assert!(rows.iter().all(|r| r.implied_vol > 0.1 && r.implied_vol < 0.4));
        // skew from negative correlation
        assert!(rows[0].implied_vol > rows[10].implied_vol);
        let deep = price_european(&p, &OptionSpec::call(1e-6, 1.0), &settings, &cache).unwrap();
        assert!((deep - 1.0).abs() < 1e-5);
    }

    #[test]
    fn implied_vol_round_trip() {
        let opt = OptionSpec::call(1.1, 0.5);
        let price = black_scholes(1.0, &opt, 0.2);
        assert!((implied_vol(price, &opt, 1.0).unwrap() - 0.2).abs() < 1e-10);
        let put = OptionSpec::put(0.9, 2.0);
        let price = black_scholes(1.0, &put, 0.35);
        assert!((implied_vol(price, &put, 1.0).unwrap() - 0.35).abs() < 1e-10);
        assert_eq!(implied_vol(0.0, &opt, 1.0).unwrap(), 0.0);
        assert!(matches!(implied_vol(1.5, &opt, 1.0), Err(Error::Domain(_))));
        let mut last = 0.0;
        for p in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let v = implied_vol(p, &opt, 1.0).unwrap();
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn rejects_bad_strikes() {
        let p = HestonParams::new(
            1.0,
            0.04,
            0.0,
            TimeFunction::Constant(1.0),
            TimeFunction::Constant(0.04),
            TimeFunction::Constant(0.2),
            TimeFunction::Constant(1.0),
            Kernel::fractional(vec![0.7]).unwrap(),
        )
        .unwrap();
        let cache = CharfnCache::new();
        assert!(call_ladder(&p, 1.0, &[-1.0], &InversionSettings::default(), &cache).is_err());
    }
}
