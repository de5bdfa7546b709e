//! Scalar abstraction shared by the plain `f64` evaluators and the
//! forward-mode dual numbers used for likelihood gradients.

use std::f64::consts::SQRT_2;
use std::ops::{Add, Div, Mul, Neg, Sub};

use libm::erfc;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal CDF.
pub fn norm_cdf(q: f64) -> f64 {
    0.5 * erfc(-q / SQRT_2)
}

pub fn norm_pdf(q: f64) -> f64 {
    (-0.5 * q * q - LN_SQRT_2PI).exp()
}

pub fn norm_logpdf(q: f64) -> f64 {
    -0.5 * q * q - LN_SQRT_2PI
}

/// `log Φ(q)`, accurate in both tails.
pub fn log_norm_cdf(q: f64) -> f64 {
    if q > 5.0 {
        (-0.5 * erfc(q / SQRT_2)).ln_1p()
    } else if q > -30.0 {
        (0.5 * erfc(-q / SQRT_2)).ln()
    } else {
        // asymptotic Mills-ratio expansion
        let q2 = q * q;
        let series = 1.0 - 1.0 / q2 + 3.0 / (q2 * q2) - 15.0 / (q2 * q2 * q2);
        -0.5 * q2 - (-q).ln() - LN_SQRT_2PI + series.ln()
    }
}

/// `φ(q) / Φ(q)` without overflow in the lower tail.
pub fn inverse_mills(q: f64) -> f64 {
    (norm_logpdf(q) - log_norm_cdf(q)).exp()
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Operations needed to evaluate the bivariate likelihood generically.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(&self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn log_norm_cdf(self) -> Self;

    fn softplus(self) -> Self {
        let v = self.val();
        if v > 0.0 {
            self + (-self).exp().ln_1p()
        } else {
            self.exp().ln_1p()
        }
    }

    fn log_sigmoid(self) -> Self {
        -(-self).softplus()
    }

    fn norm_logpdf(self) -> Self {
        self * self * -0.5 - LN_SQRT_2PI
    }

    /// `log(e^a + e^b)`
    fn log_add_exp(self, other: Self) -> Self {
        let (hi, lo) = if self.val() >= other.val() {
            (self, other)
        } else {
            (other, self)
        };
        if lo.val() == f64::NEG_INFINITY {
            return hi;
        }
        hi + (lo - hi).exp().ln_1p()
    }
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(&self) -> f64 {
        *self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    fn log_norm_cdf(self) -> Self {
        log_norm_cdf(self)
    }
}

/// Forward-mode dual number carrying `N` partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }

    /// Independent variable `i`.
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; N];
        d[i] = 1.0;
        Self { v, d }
    }

    /// Lift a point into `N` independent variables.
    pub fn seed(point: &[f64; N]) -> [Self; N] {
        std::array::from_fn(|i| Self::var(point[i], i))
    }

    #[inline]
    fn chain(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x *= dv;
        }
        Self { v, d }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for (x, y) in d.iter_mut().zip(o.d.iter()) {
            *x += y;
        }
        Self { v: self.v + o.v, d }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for (x, y) in d.iter_mut().zip(o.d.iter()) {
            *x -= y;
        }
        Self { v: self.v - o.v, d }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; N];
        for (i, x) in d.iter_mut().enumerate() {
            *x = self.d[i] * o.v + self.v * o.d[i];
        }
        Self { v: self.v * o.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut d = [0.0; N];
        for (i, x) in d.iter_mut().enumerate() {
            *x = (self.d[i] - v * o.d[i]) * inv;
        }
        Self { v, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(self) -> Self {
        self.chain(-self.v, -1.0)
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    fn add(self, o: f64) -> Self {
        Self { v: self.v + o, d: self.d }
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    fn sub(self, o: f64) -> Self {
        Self { v: self.v - o, d: self.d }
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    fn mul(self, o: f64) -> Self {
        self.chain(self.v * o, o)
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    fn div(self, o: f64) -> Self {
        self.chain(self.v / o, 1.0 / o)
    }
}

impl<const N: usize> Scalar for Dual<N> {
    fn cst(v: f64) -> Self {
        Self::constant(v)
    }
    fn val(&self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }
    fn ln_1p(self) -> Self {
        self.chain(self.v.ln_1p(), 1.0 / (1.0 + self.v))
    }
    fn log_norm_cdf(self) -> Self {
        self.chain(log_norm_cdf(self.v), inverse_mills(self.v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn log_norm_cdf_is_continuous_across_branches() {
        for &q in &[-30.0, 5.0] {
            let lo = log_norm_cdf(q - 1e-9);
            let hi = log_norm_cdf(q + 1e-9);
            assert!((lo - hi).abs() < 1e-6 * lo.abs().max(1e-3), "q={q}");
        }
        assert!((log_norm_cdf(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_norm_cdf(-100.0).is_finite());
    }

    #[test]
    fn dual_matches_finite_differences() {
        let f = |x: Dual<2>, y: Dual<2>| ((x * y).exp() + (x / y).ln_1p()).log_norm_cdf() - y.softplus();
        let p = [0.3, 1.7];
        let [x, y] = Dual::<2>::seed(&p);
        let out = f(x, y);
        let g = |a: f64, b: f64| {
            let v = (a * b).exp() + (a / b).ln_1p();
            log_norm_cdf(v) - softplus(b)
        };
        let h = 1e-6;
        let gx = (g(p[0] + h, p[1]) - g(p[0] - h, p[1])) / (2.0 * h);
        let gy = (g(p[0], p[1] + h) - g(p[0], p[1] - h)) / (2.0 * h);
        assert!((out.d[0] - gx).abs() < 1e-7);
        assert!((out.d[1] - gy).abs() < 1e-7);
        assert!((out.v - g(p[0], p[1])).abs() < 1e-14);
    }

    #[test]
    fn log_add_exp_handles_neg_infinity() {
        let a = f64::NEG_INFINITY;
        assert_eq!(Scalar::log_add_exp(a, 1.0), 1.0);
        assert!((Scalar::log_add_exp(0.0f64, 0.0) - LN_2).abs() < 1e-15);
    }
}
