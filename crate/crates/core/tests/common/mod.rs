#![allow(dead_code)]

use num_complex::Complex64;

/// Classical Heston parameters (constant coefficients, η = 1, zero rate).
#[derive(Debug, Clone, Copy)]
pub struct Classical {
    pub s0: f64,
    pub v0: f64,
    pub kappa: f64,
    pub theta: f64,
    pub sigma: f64,
    pub rho: f64,
    pub t: f64,
}

impl Classical {
    /// `E[exp(i z log S_T)]` in the branch-stable form of Albrecher et al.
    pub fn charfn(&self, z: Complex64) -> Complex64 {
        let i = Complex64::new(0.0, 1.0);
        let (k, th, s, r, t) = (self.kappa, self.theta, self.sigma, self.rho, self.t);
        let beta = k - r * s * i * z;
        let d = (beta * beta + s * s * (i * z + z * z)).sqrt();
        let g = (beta - d) / (beta + d);
        let e = (-d * t).exp();
        let c = k * th / (s * s) * ((beta - d) * t - 2.0 * ((1.0 - g * e) / (1.0 - g)).ln());
        let dd = (beta - d) / (s * s) * (1.0 - e) / (1.0 - g * e);
        (i * z * self.s0.ln() + c + dd * self.v0).exp()
    }

    /// Call price from the two-probability representation, integrated by
    /// composite Simpson on a long truncated range.
    pub fn call(&self, strike: f64) -> f64 {
        let i = Complex64::new(0.0, 1.0);
        let lk = strike.ln();
        let phi_minus_i = self.charfn(Complex64::new(0.0, -1.0));
        let p = |j: usize| {
            let integrand = |w: f64| -> f64 {
                let v = if j == 1 {
                    self.charfn(Complex64::new(w, -1.0)) / phi_minus_i
                } else {
                    self.charfn(Complex64::new(w, 0.0))
                };
                ((-i * w * lk).exp() * v / (i * w)).re
            };
            let (a, b, n) = (1e-8, 400.0, 400_000usize);
            let h = (b - a) / n as f64;
            let mut s = integrand(a) + integrand(b);
            for m in 1..n {
                s += integrand(a + m as f64 * h) * if m % 2 == 1 { 4.0 } else { 2.0 };
            }
            0.5 + s * h / 3.0 / std::f64::consts::PI
        };
        self.s0 * p(1) - strike * p(2)
    }
}
