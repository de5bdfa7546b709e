//! Univariate GEV and symmetric bivariate Hüsler-Reiss distributions.
//!
//! The Hüsler-Reiss CDF is written in terms of the unit-exponential margins
//! `x̃ = {1 + ξ(x − μ)/σ}^{−1/ξ}` (so that `F_GEV(x) = exp(−x̃)`):
//!
//! ```text
//! F(x, y) = exp{−V(x̃, ỹ)},
//! V(a, b) = a Φ(1/λ + (λ/2) log(a/b)) + b Φ(1/λ + (λ/2) log(b/a)).
//! ```
//!
//! Larger `λ` means stronger dependence: `λ → 0` gives independent margins
//! and `λ → ∞` gives complete dependence. Writing `q₁`, `q₂` for the two
//! Gaussian arguments, the identity `a φ(q₁) = b φ(q₂)` collapses the
//! partial derivatives of the exponent measure to
//!
//! ```text
//! V_a = Φ(q₁),   V_b = Φ(q₂),   V_ab = −λ φ(q₁) / (2b),
//! ```
//!
//! so the joint density is `F · {Φ(q₁)Φ(q₂) + λφ(q₁)/(2b)} · |a′(x)| |b′(y)|`.
//! All margin transforms are evaluated on the log scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{self, Scalar};

/// Exponent of the power transform used by the shape reparameterization.
pub const C_PSI: f64 = 0.005;

/// Number of entries in a cell's latent parameter vector.
pub const N_PARAMS: usize = 7;

/// Column names of the latent vector, in stacking order.
pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "alpha0",
    "alpha1",
    "beta0",
    "beta1",
    "sigma_star",
    "psi",
    "lambda_star",
];

/// Below this |ξ| the margin transforms use a truncated series in ξ,
/// which reduces exactly to the Gumbel form at ξ = 0.
const XI_SERIES: f64 = 1e-5;
/// Below this |ξ| the plain-`f64` CDF/quantile use the Gumbel closed form.
const XI_GUMBEL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GevParams {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl GevParams {
    pub fn new(mu: f64, sigma: f64, xi: f64) -> Result<Self> {
        let p = Self { mu, sigma, xi };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() {
            return Err(Error::Domain(format!("GEV location must be finite, got {}", self.mu)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Domain(format!("GEV scale must be positive, got {}", self.sigma)));
        }
        if !(self.xi > -0.5 && self.xi < 0.5) {
            return Err(Error::Domain(format!("GEV shape must lie in (-0.5, 0.5), got {}", self.xi)));
        }
        Ok(())
    }

    /// Lower (ξ > 0) or upper (ξ < 0) support endpoint, if finite.
    pub fn support_endpoint(&self) -> Option<f64> {
        if self.xi.abs() < XI_GUMBEL {
            None
        } else {
            Some(self.mu - self.sigma / self.xi)
        }
    }
}

/// Constants of the bounded shape transform `ψ = a + b log{s^c / (1 − s^c)}`
/// with `s = ξ + 1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeTransformConstants {
    pub c_psi: f64,
    pub b_psi: f64,
    pub a_psi: f64,
}

impl ShapeTransformConstants {
    /// Derive `b` and `a` from `c` so that `f(−1/4) = −1/4` and `f′(−1/4) = 1`.
    pub fn from_c(c_psi: f64) -> Self {
        let q = 0.25f64.powf(c_psi);
        let b_psi = 0.25 / c_psi * (1.0 - q);
        let a_psi = -0.25 - b_psi * (q / (1.0 - q)).ln();
        Self { c_psi, b_psi, a_psi }
    }
}

impl Default for ShapeTransformConstants {
    fn default() -> Self {
        Self::from_c(C_PSI)
    }
}

/// Annual time axis and its standardized counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeIndex {
    pub years: Vec<i32>,
    pub t_star: Vec<f64>,
    pub mean_year: f64,
    pub sd_year: f64,
}

impl TimeIndex {
    /// Standardize `years` by their own mean and sample standard deviation.
    pub fn new(years: Vec<i32>) -> Result<Self> {
        let reference = years.clone();
        Self::with_reference(years, &reference)
    }

    /// Standardize `years` using the mean/sd of a reference period.
    pub fn with_reference(years: Vec<i32>, reference: &[i32]) -> Result<Self> {
        if reference.len() < 2 {
            return Err(Error::Domain("time standardization needs at least two reference years".into()));
        }
        if years.is_empty() {
            return Err(Error::Domain("empty year list".into()));
        }
        if years.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("years must be strictly increasing".into()));
        }
        let n = reference.len() as f64;
        let mean_year = reference.iter().map(|&y| y as f64).sum::<f64>() / n;
        let var = reference
            .iter()
            .map(|&y| (y as f64 - mean_year).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        let sd_year = var.sqrt();
        if sd_year <= 0.0 {
            return Err(Error::Domain("reference years have zero spread".into()));
        }
        let t_star = years.iter().map(|&y| (y as f64 - mean_year) / sd_year).collect();
        Ok(Self { years, t_star, mean_year, sd_year })
    }

    /// Contiguous calendar range `start..=end`.
    pub fn span(start: i32, end: i32) -> Result<Self> {
        if end <= start {
            return Err(Error::Domain(format!("invalid year range {start}..={end}")));
        }
        Self::new((start..=end).collect())
    }

    pub fn len(&self) -> usize {
        self.years.len()
    }

    pub fn is_empty(&self) -> bool {
        self.years.is_empty()
    }

    pub fn standardize(&self, year: f64) -> f64 {
        (year - self.mean_year) / self.sd_year
    }
}

/// Latent parameters of one grid cell on the transformed (unconstrained) scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub sigma_star: f64,
    pub psi: f64,
    pub lambda_star: f64,
}

impl CellParams {
    pub fn from_array(a: [f64; N_PARAMS]) -> Self {
        Self {
            alpha0: a[0],
            alpha1: a[1],
            beta0: a[2],
            beta1: a[3],
            sigma_star: a[4],
            psi: a[5],
            lambda_star: a[6],
        }
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        let a: [f64; N_PARAMS] = s
            .try_into()
            .map_err(|_| Error::Domain(format!("expected {N_PARAMS} latent parameters, got {}", s.len())))?;
        Ok(Self::from_array(a))
    }

    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [
            self.alpha0,
            self.alpha1,
            self.beta0,
            self.beta1,
            self.sigma_star,
            self.psi,
            self.lambda_star,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.to_array().iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("latent parameter {} is not finite", PARAM_NAMES[i])));
        }
        if !self.sigma_star.exp().is_normal() || !self.lambda_star.exp().is_normal() {
            return Err(Error::Domain("scale or dependence parameter under/overflows".into()));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_star.exp()
    }

    pub fn xi(&self) -> f64 {
        psi_to_shape(self.psi)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda_star.exp()
    }

    /// Counterfactual margin at standardized time `t_star`.
    pub fn counterfactual(&self, t_star: f64) -> GevParams {
        GevParams { mu: self.alpha0 + self.alpha1 * t_star, sigma: self.sigma(), xi: self.xi() }
    }

    /// Factual margin at standardized time `t_star`.
    pub fn factual(&self, t_star: f64) -> GevParams {
        GevParams { mu: self.beta0 + self.beta1 * t_star, sigma: self.sigma(), xi: self.xi() }
    }
}

// ---------------------------------------------------------------------------
// Margin transforms
// ---------------------------------------------------------------------------

/// Log of the unit-exponential transform of `x` under a GEV margin, along with
/// `log1p(ξ(x−μ)/σ)`. `None` when `x` is outside the support.
#[inline]
fn log_exp_margin<S: Scalar>(x: f64, mu: S, sigma: S, xi: S) -> Option<(S, S)> {
    let z = (S::cst(x) - mu) / sigma;
    let xz = xi * z;
    if !(xz.val() > -1.0) {
        return None;
    }
    let l1p = xz.ln_1p();
    let la = if xi.val().abs() < XI_SERIES {
        // −log1p(ξz)/ξ = −z (1 − ξz/2 + (ξz)²/3 − (ξz)³/4)
        let inner = S::cst(1.0) - xz * 0.5 + xz * xz / 3.0 - xz * xz * xz * 0.25;
        -(z * inner)
    } else {
        -(l1p / xi)
    };
    Some((la, l1p))
}

/// `ξ` and `log(ξ + 1/2)` from the transformed shape `ψ`.
#[inline]
fn shape_from_psi<S: Scalar>(psi: S, k: &ShapeTransformConstants) -> (S, S) {
    let u = (psi - k.a_psi) / k.b_psi;
    let log_s = -((-u).softplus()) / k.c_psi;
    let xi = log_s.exp() - 0.5;
    (xi, log_s)
}

// ---------------------------------------------------------------------------
// Univariate GEV
// ---------------------------------------------------------------------------

pub fn gev_cdf(z: f64, p: &GevParams) -> Result<f64> {
    p.validate()?;
    if p.xi.abs() < XI_GUMBEL {
        return Ok((-(-(z - p.mu) / p.sigma).exp()).exp());
    }
    match log_exp_margin(z, p.mu, p.sigma, p.xi) {
        Some((la, _)) => Ok((-la.exp()).exp()),
        None => Ok(if p.xi > 0.0 { 0.0 } else { 1.0 }),
    }
}

pub fn gev_logpdf(z: f64, p: &GevParams) -> Result<f64> {
    p.validate()?;
    Ok(gev_logpdf_unchecked(z, p.mu, p.sigma, p.xi))
}

#[inline]
fn gev_logpdf_unchecked<S: Scalar>(z: f64, mu: S, sigma: S, xi: S) -> S {
    match log_exp_margin(z, mu, sigma, xi) {
        Some((la, l1p)) => la - sigma.ln() - l1p - la.exp(),
        None => S::cst(f64::NEG_INFINITY),
    }
}

/// Level exceeded with probability `p_exc` in one block.
pub fn return_level(p_exc: f64, p: &GevParams) -> Result<f64> {
    p.validate()?;
    if !(p_exc > 0.0 && p_exc < 1.0) {
        return Err(Error::Domain(format!("exceedance probability must lie in (0,1), got {p_exc}")));
    }
    let y = -(-p_exc).ln_1p();
    let ly = y.ln();
    if p.xi.abs() < XI_GUMBEL {
        Ok(p.mu - p.sigma * ly)
    } else {
        Ok(p.mu + p.sigma * (-p.xi * ly).exp_m1() / p.xi)
    }
}

// ---------------------------------------------------------------------------
// Shape transform and regularizing prior
// ---------------------------------------------------------------------------

pub fn shape_to_psi(xi: f64) -> Result<f64> {
    if !(xi > -0.5 && xi < 0.5) {
        return Err(Error::Domain(format!("shape must lie strictly inside (-0.5, 0.5), got {xi}")));
    }
    let k = ShapeTransformConstants::default();
    let log_sc = k.c_psi * (xi + 0.5).ln();
    Ok(k.a_psi + k.b_psi * (log_sc - (-log_sc.exp_m1()).ln()))
}

/// Inverse shape transform. The result is pinned inside the open interval
/// (−0.5, 0.5) even where the exact value rounds onto an endpoint.
pub fn psi_to_shape(psi: f64) -> f64 {
    let (xi, _) = shape_from_psi(psi, &ShapeTransformConstants::default());
    let lo = -0.5 + f64::EPSILON / 4.0;
    let hi = 0.5 - f64::EPSILON / 4.0;
    xi.clamp(lo, hi)
}

#[inline]
fn psi_log_prior_generic<S: Scalar>(psi: S, k: &ShapeTransformConstants) -> S {
    // Beta(1, 4) on s = ξ + 1/2, pulled back through s = g(ψ) + 1/2:
    // log 4 + 3 log(1 − s) + log s + log σ(−u) − log(b c)
    let u = (psi - k.a_psi) / k.b_psi;
    let log_s = -((-u).softplus()) / k.c_psi;
    let s = log_s.exp();
    (-s).ln_1p() * 3.0 + log_s + (-u).log_sigmoid() + (4.0f64 / (k.b_psi * k.c_psi)).ln()
}

/// Log prior density of `ψ` induced by a Beta(1, 4) law on `ξ + 1/2`.
pub fn psi_log_prior(psi: f64) -> f64 {
    psi_log_prior_generic(psi, &ShapeTransformConstants::default())
}

/// Log density of the shifted Beta(1, 4) law on `ξ ∈ (−0.5, 0.5)`.
pub fn xi_log_prior(xi: f64) -> f64 {
    if !(xi > -0.5 && xi < 0.5) {
        return f64::NEG_INFINITY;
    }
    4.0f64.ln() + 3.0 * (0.5 - xi).ln()
}

/// Derivative `dξ/dψ` of the inverse shape transform.
pub fn psi_to_shape_derivative(psi: f64) -> f64 {
    let k = ShapeTransformConstants::default();
    let u = (psi - k.a_psi) / k.b_psi;
    let log_s = -num::softplus(-u) / k.c_psi;
    log_s.exp() * num::sigmoid(-u) / (k.b_psi * k.c_psi)
}

// ---------------------------------------------------------------------------
// Bivariate Hüsler-Reiss
// ---------------------------------------------------------------------------

pub fn bhr_cdf(x: f64, y: f64, c: &CellParams, t_star: f64) -> Result<f64> {
    c.validate()?;
    let cf = c.counterfactual(t_star);
    let f = c.factual(t_star);
    let lambda = c.lambda();
    // log x̃ with ±∞ for points beyond the support
    let log_margin = |v: f64, p: &GevParams| match log_exp_margin(v, p.mu, p.sigma, p.xi) {
        Some((la, _)) => la,
        None if p.xi > 0.0 => f64::INFINITY,
        None => f64::NEG_INFINITY,
    };
    let la = log_margin(x, &cf);
    let lb = log_margin(y, &f);
    if la == f64::INFINITY || lb == f64::INFINITY {
        return Ok(0.0);
    }
    if la == f64::NEG_INFINITY {
        return Ok((-lb.exp()).exp());
    }
    if lb == f64::NEG_INFINITY {
        return Ok((-la.exp()).exp());
    }
    Ok((-exponent_measure(la, lb, lambda)).exp())
}

/// `V(a, b)` from `log a`, `log b`.
fn exponent_measure(la: f64, lb: f64, lambda: f64) -> f64 {
    let w = la - lb;
    let q1 = 1.0 / lambda + 0.5 * lambda * w;
    let q2 = 1.0 / lambda - 0.5 * lambda * w;
    (la + num::log_norm_cdf(q1)).exp() + (lb + num::log_norm_cdf(q2)).exp()
}

/// Log density of the pair under the cell's BHR law, in any scalar type.
/// Returns `None` on a support violation and `Some(NaN)` if the density
/// bracket degenerates.
#[inline]
pub(crate) fn bhr_logpdf_eta<S: Scalar>(
    x: f64,
    y: f64,
    eta: &[S; N_PARAMS],
    t_star: f64,
    k: &ShapeTransformConstants,
) -> Option<S> {
    let sigma = eta[4].exp();
    let (xi, _) = shape_from_psi(eta[5], k);
    let log_lambda = eta[6];
    let lambda = log_lambda.exp();
    let mu1 = eta[0] + eta[1] * t_star;
    let mu2 = eta[2] + eta[3] * t_star;
    let (la, l1p_a) = log_exp_margin(x, mu1, sigma, xi)?;
    let (lb, l1p_b) = log_exp_margin(y, mu2, sigma, xi)?;

    let w = la - lb;
    let inv_lambda = S::cst(1.0) / lambda;
    let half_lw = lambda * w * 0.5;
    let q1 = inv_lambda + half_lw;
    let q2 = inv_lambda - half_lw;
    let lphi1 = q1.log_norm_cdf();
    let lphi2 = q2.log_norm_cdf();
    let v = (la + lphi1).exp() + (lb + lphi2).exp();
    // log{Φ(q1)Φ(q2) + λ φ(q1) / (2b)}
    let bracket = (lphi1 + lphi2).log_add_exp(log_lambda + q1.norm_logpdf() - lb - std::f64::consts::LN_2);
    let sigma_ln = eta[4];
    let jac = (la - sigma_ln - l1p_a) + (lb - sigma_ln - l1p_b);
    Some(-v + bracket + jac)
}

pub fn bhr_logpdf(x: f64, y: f64, c: &CellParams, t_star: f64) -> Result<f64> {
    c.validate()?;
    let k = ShapeTransformConstants::default();
    match bhr_logpdf_eta(x, y, &c.to_array(), t_star, &k) {
        None => Ok(f64::NEG_INFINITY),
        Some(v) if v.is_nan() => Err(Error::Numerical(format!(
            "non-positive Hüsler-Reiss density bracket at ({x}, {y})"
        ))),
        Some(v) => Ok(v),
    }
}

/// Tail-dependence coefficient `χ = 2 − 2Φ(1/λ)` of the symmetric BHR law.
pub fn bhr_chi(lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("dependence parameter must be positive, got {lambda}")));
    }
    Ok(2.0 * num::norm_cdf(-1.0 / lambda))
}

#[inline]
pub(crate) fn psi_log_prior_eta<S: Scalar>(psi: S, k: &ShapeTransformConstants) -> S {
    psi_log_prior_generic(psi, k)
}
