//! Gamma/Beta special functions and a seeded Beta sampler.
//!
//! Ray-query offsets are Beta(λ, μ) variates shifted from `[0, 1]` to
//! `[-1, 1]` with `y = 2x - 1`. The density uses the standard product
//! normalization `Γ(λ+μ) / (Γ(λ)·Γ(μ))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaParams {
    pub lambda: f64,
    pub mu: f64,
}

impl BetaParams {
    pub fn new(lambda: f64, mu: f64) -> Result<Self> {
        let p = Self { lambda, mu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.lambda) && ok(self.mu) {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "beta parameters must be positive and finite, got ({}, {})",
                self.lambda, self.mu
            )))
        }
    }

    pub fn mean(&self) -> f64 {
        self.lambda / (self.lambda + self.mu)
    }

    /// Mean of the shifted offset `2x - 1`.
    pub fn offset_mean(&self) -> f64 {
        2.0 * self.mean() - 1.0
    }

    /// Mode of the unshifted density, when it is interior.
    pub fn mode(&self) -> Option<f64> {
        (self.lambda > 1.0 && self.mu > 1.0)
            .then(|| (self.lambda - 1.0) / (self.lambda + self.mu - 2.0))
    }
}

impl Default for BetaParams {
    fn default() -> Self {
        Self { lambda: 8.0, mu: 2.0 }
    }
}

// Lanczos approximation, g = 7, n = 9.
const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0`.
pub fn log_gamma<T: Real>(x: T) -> Result<T> {
    if !(x > T::zero()) || !x.is_finite() {
        return Err(Error::domain(format!("log_gamma requires x > 0, got {x}")));
    }
    Ok(ln_gamma_unchecked(x))
}

fn ln_gamma_unchecked<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    if x < half {
        // Reflection: Γ(x)Γ(1-x) = π / sin(πx)
        let pi = T::lit(std::f64::consts::PI);
        return (pi / (pi * x).sin().abs()).ln() - ln_gamma_unchecked(T::one() - x);
    }
    let z = x - T::one();
    let mut a = T::lit(LANCZOS_COEF[0]);
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        a += T::lit(c) / (z + T::lit(i as f64));
    }
    let t = z + T::lit(LANCZOS_G) + half;
    T::lit(0.918_938_533_204_672_8) + (z + half) * t.ln() - t + a.ln()
}

/// `ln B(a, b) = ln Γ(a) + ln Γ(b) - ln Γ(a+b)`.
pub fn log_beta_fn<T: Real>(a: T, b: T) -> Result<T> {
    Ok(log_gamma(a)? + log_gamma(b)? - log_gamma(a + b)?)
}

pub fn beta_pdf<T: Real>(x: T, p: &BetaParams) -> Result<T> {
    p.validate()?;
    if !(x > T::zero() && x < T::one()) {
        return Err(Error::domain(format!("beta_pdf requires 0 < x < 1, got {x}")));
    }
    let (a, b) = (T::lit(p.lambda), T::lit(p.mu));
    let ln = -log_beta_fn(a, b)? + (a - T::one()) * x.ln() + (b - T::one()) * (-x).ln_1p();
    Ok(ln.exp())
}

/// Regularized incomplete beta `I_x(λ, μ)`.
pub fn beta_cdf<T: Real>(x: T, p: &BetaParams) -> Result<T> {
    p.validate()?;
    if !(x >= T::zero() && x <= T::one()) {
        return Err(Error::domain(format!("beta_cdf requires 0 <= x <= 1, got {x}")));
    }
    if x == T::zero() {
        return Ok(T::zero());
    }
    if x == T::one() {
        return Ok(T::one());
    }
    let (a, b) = (T::lit(p.lambda), T::lit(p.mu));
    let ln_front = a * x.ln() + b * (-x).ln_1p() - log_beta_fn(a, b)?;
    let front = ln_front.exp();
    // The continued fraction converges fastest below the mean-ish split.
    if x < (a + T::one()) / (a + b + T::lit(2.0)) {
        Ok(front * beta_cont_frac(x, a, b) / a)
    } else {
        Ok(T::one() - front * beta_cont_frac(T::one() - x, b, a) / b)
    }
}

// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_cont_frac<T: Real>(x: T, a: T, b: T) -> T {
    let tiny = T::min_positive_value() / T::epsilon();
    let eps = T::epsilon();
    let one = T::one();
    let (qab, qap, qam) = (a + b, a + one, a - one);
    let mut c = one;
    let mut d = one - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = one / d;
    let mut h = d;
    for m in 1..=500 {
        let m = T::lit(m as f64);
        let m2 = m + m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        let del = d * c;
        h *= del;
        if (del - one).abs() <= eps {
            break;
        }
    }
    h
}

/// One Gamma(shape, 1) variate: Marsaglia-Tsang squeeze/rejection for
/// `shape >= 1`, boosted with `u^(1/shape)` below that.
pub fn sample_gamma(rng: &mut SeededRng, shape: f64) -> f64 {
    if shape < 1.0 {
        let g = sample_gamma(rng, shape + 1.0);
        let u = rng.uniform_open();
        return g * libm::pow(u, 1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / libm::sqrt(9.0 * d);
    loop {
        let x = rng.normal();
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u = rng.uniform_open();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 {
            return d * v;
        }
        if libm::log(u) < 0.5 * x2 + d * (1.0 - v + libm::log(v)) {
            return d * v;
        }
    }
}

/// `n` i.i.d. Beta(λ, μ) variates in the open interval `(0, 1)`.
pub fn sample_beta(rng: &mut SeededRng, p: &BetaParams, n: usize) -> Result<Vec<f64>> {
    p.validate()?;
    if n == 0 {
        return Err(Error::domain("sample count must be >= 1"));
    }
    Ok((0..n).map(|_| sample_beta_one(rng, p)).collect())
}

pub(crate) fn sample_beta_one(rng: &mut SeededRng, p: &BetaParams) -> f64 {
    loop {
        let x = sample_gamma(rng, p.lambda);
        let y = sample_gamma(rng, p.mu);
        let s = x + y;
        if s > 0.0 {
            let b = x / s;
            if b > 0.0 && b < 1.0 {
                return b;
            }
        }
    }
}

/// Shifted offsets `2x - 1` in `(-1, 1)`.
pub fn sample_offsets(rng: &mut SeededRng, p: &BetaParams, n: usize) -> Result<Vec<f64>> {
    Ok(sample_beta(rng, p, n)?.into_iter().map(|x| 2.0 * x - 1.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn log_gamma_known_values() {
        assert_abs_diff_eq!(log_gamma(1.0).unwrap(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(log_gamma(2.0).unwrap(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(log_gamma(5.0).unwrap(), 24f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(log_gamma(5.0).unwrap(), 3.178_053_830_3, epsilon = 1e-10);
        assert_abs_diff_eq!(log_gamma(0.5).unwrap(), 0.572_364_942_9, epsilon = 1e-10);
    }

    #[test]
    fn log_gamma_domain() {
        assert!(log_gamma(0.0).is_err());
        assert!(log_gamma(-1.5).is_err());
        assert!(log_gamma(f64::NAN).is_err());
    }

    #[test]
    fn factorials_exact() {
        let mut fact = 1.0f64;
        for n in 1..=20u32 {
            if n > 1 {
                fact *= (n - 1) as f64;
            }
            let g = log_gamma(n as f64).unwrap().exp();
            assert!(((g - fact) / fact).abs() < 1e-10, "n={n} {g} vs {fact}");
        }
    }

    #[test]
    fn recurrence() {
        let mut x = 0.5;
        while x <= 50.0 {
            let lhs = log_gamma(x + 1.0).unwrap() - log_gamma(x).unwrap();
            assert_abs_diff_eq!(lhs, f64::ln(x), epsilon = 1e-10);
            x += 0.37;
        }
    }

    #[test]
    fn pdf_values() {
        let u = BetaParams::new(1.0, 1.0).unwrap();
        for x in [0.01, 0.3, 0.5, 0.99] {
            assert_abs_diff_eq!(beta_pdf(x, &u).unwrap(), 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(beta_pdf(0.5, &BetaParams::new(2.0, 2.0).unwrap()).unwrap(), 1.5, epsilon = 1e-12);
        // 72 * 0.8^7 * 0.2
        let expect = 72.0 * 0.8f64.powi(7) * 0.2;
        assert_abs_diff_eq!(expect, 3.019_898_88, epsilon = 1e-8);
        assert_abs_diff_eq!(beta_pdf(0.8, &BetaParams::default()).unwrap(), expect, epsilon = 1e-12);
        assert!(beta_pdf(0.0, &u).is_err());
        assert!(beta_pdf(1.0, &u).is_err());
    }

    #[test]
    fn cdf_values() {
        let p = BetaParams::new(3.0, 5.0).unwrap();
        assert_eq!(beta_cdf(0.0, &p).unwrap(), 0.0);
        assert_eq!(beta_cdf(1.0, &p).unwrap(), 1.0);
        assert_abs_diff_eq!(beta_cdf(0.3, &BetaParams::new(1.0, 1.0).unwrap()).unwrap(), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(beta_cdf(0.5, &BetaParams::new(2.0, 2.0).unwrap()).unwrap(), 0.5, epsilon = 1e-12);
        // Closed form for Beta(2,2): 3x^2 - 2x^3
        for x in [0.1, 0.25, 0.7, 0.95] {
            let cf = 3.0 * x * x - 2.0 * x * x * x;
            assert_abs_diff_eq!(beta_cdf(x, &BetaParams::new(2.0, 2.0).unwrap()).unwrap(), cf, epsilon = 1e-12);
        }
        assert!(beta_cdf(1.5, &p).is_err());
        assert!(beta_cdf(-0.1, &p).is_err());
    }

    #[test]
    fn cdf_monotone() {
        for (a, b) in [(1.0, 1.0), (2.0, 8.0), (8.0, 2.0), (0.5, 0.5), (5.0, 5.0)] {
            let p = BetaParams::new(a, b).unwrap();
            let mut prev = 0.0;
            for i in 0..=1000 {
                let c = beta_cdf(i as f64 / 1000.0, &p).unwrap();
                assert!(c >= prev, "({a},{b}) at {i}: {c} < {prev}");
                prev = c;
            }
        }
    }

    #[test]
    fn sampler_determinism_and_range() {
        let p = BetaParams::default();
        let a = sample_beta(&mut SeededRng::new(42), &p, 3).unwrap();
        let b = sample_beta(&mut SeededRng::new(42), &p, 3).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let small = BetaParams::new(0.3, 0.4).unwrap();
        for x in sample_beta(&mut SeededRng::new(3), &small, 5000).unwrap() {
            assert!(x > 0.0 && x < 1.0);
        }
        assert!(sample_beta(&mut SeededRng::new(1), &p, 0).is_err());
        assert!(BetaParams::new(0.0, 1.0).is_err());
    }

    #[test]
    fn shifted_means() {
        for ((a, b), want) in [((1.0, 1.0), 0.0), ((8.0, 2.0), 0.6), ((2.0, 8.0), -0.6)] {
            let p = BetaParams::new(a, b).unwrap();
            let ys = sample_offsets(&mut SeededRng::new(11), &p, 100_000).unwrap();
            let m = ys.iter().sum::<f64>() / ys.len() as f64;
            assert!((m - want).abs() < 0.01, "({a},{b}) mean {m}");
            assert!(ys.iter().all(|y| *y > -1.0 && *y < 1.0));
        }
    }

    #[test]
    fn generic_over_f32() {
        let v: f32 = log_gamma(5.0f32).unwrap();
        assert!((v - 24f32.ln()).abs() < 1e-5);
        let pdf: f32 = beta_pdf(0.5f32, &BetaParams::new(2.0, 2.0).unwrap()).unwrap();
        assert!((pdf - 1.5).abs() < 1e-5);
    }
}
