//! Positive-stable and exponentially tilted positive-stable laws, plus the
//! Fréchet noise distribution.
//!
//! `H(α, δ, θ)` denotes the law with Laplace transform
//! `exp(-δ{(θ+s)^α - θ^α}/α)`. The standard law used for densities below has
//! Laplace transform `exp(-s^α)`, i.e. `H(α, α, 0)`.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Exp1, Open01};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{gl64, integrate_adaptive};
use crate::seed::Rng;

pub const DEFAULT_MAX_TRIES: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltedPsParams {
    pub alpha: f64,
    pub delta: f64,
    pub theta: f64,
}

impl TiltedPsParams {
    pub fn new(alpha: f64, delta: f64, theta: f64) -> Result<Self> {
        let p = Self { alpha, delta, theta };
        p.validate()?;
        Ok(p)
    }

    /// `H(α, α, θ)`, the form used by the process.
    pub fn standard(alpha: f64, theta: f64) -> Result<Self> {
        Self::new(alpha, alpha, theta)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::domain(format!("delta must be positive, got {}", self.delta)));
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(Error::domain(format!("theta must be nonnegative, got {}", self.theta)));
        }
        Ok(())
    }

    /// Probability that one untilted proposal survives the tilt.
    pub fn acceptance_rate(&self) -> f64 {
        (-self.delta * self.theta.powf(self.alpha) / self.alpha).exp()
    }

    pub fn laplace(&self, s: f64) -> f64 {
        let a = self.alpha;
        (-self.delta * ((self.theta + s).powf(a) - self.theta.powf(a)) / a).exp()
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Zolotarev's function `A(u) = sin(αu)^{α/(1-α)} sin((1-α)u) / sin(u)^{1/(1-α)}`.
fn zolotarev(u: f64, alpha: f64) -> f64 {
    let q = alpha / (1.0 - alpha);
    let p = 1.0 / (1.0 - alpha);
    (alpha * u).sin().powf(q) * ((1.0 - alpha) * u).sin() / u.sin().powf(p)
}

/// Draw from `H(α, δ, 0)` by Kanter's representation.
pub fn sample_ps(alpha: f64, delta: f64, rng: &mut Rng) -> Result<f64> {
    check_alpha(alpha)?;
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::domain(format!("delta must be positive, got {delta}")));
    }
    Ok(standard_ps(alpha, rng) * (delta / alpha).powf(1.0 / alpha))
}

fn standard_ps(alpha: f64, rng: &mut Rng) -> f64 {
    loop {
        let u: f64 = PI * rng.sample::<f64, _>(Open01);
        let e: f64 = rng.sample(Exp1);
        let s = (zolotarev(u, alpha) / e).powf((1.0 - alpha) / alpha);
        // Underflow to 0 or overflow to inf is possible for tiny alpha.
        if s > 0.0 && s.is_finite() {
            return s;
        }
    }
}

/// Exact draw from `H(α, δ, θ)` by rejection from the untilted law.
pub fn sample_tilted_ps(params: &TiltedPsParams, rng: &mut Rng, max_tries: u64) -> Result<f64> {
    sample_tilted_ps_counted(params, rng, max_tries).map(|(z, _)| z)
}

/// Like [`sample_tilted_ps`], also returning how many proposals were made.
pub fn sample_tilted_ps_counted(
    params: &TiltedPsParams,
    rng: &mut Rng,
    max_tries: u64,
) -> Result<(f64, u64)> {
    params.validate()?;
    if max_tries == 0 {
        return Err(Error::domain("max_tries must be at least 1"));
    }
    let scale = (params.delta / params.alpha).powf(1.0 / params.alpha);
    for tries in 1..=max_tries {
        let z = standard_ps(params.alpha, rng) * scale;
        if params.theta == 0.0 {
            return Ok((z, tries));
        }
        let e: f64 = rng.sample(Exp1);
        if e >= params.theta * z {
            return Ok((z, tries));
        }
    }
    Err(Error::SamplerExhausted {
        tries: max_tries,
        acceptance_rate: params.acceptance_rate(),
    })
}

// ---------------------------------------------------------------------------
// Density of the standard positive-stable law.
//
// f(x) = (α/(1-α)) x^{-1/(1-α)} (1/π) ∫_0^π A(u) exp(-c A(u)) du,
// c = x^{-α/(1-α)}. With Δ(u) = ln A(u) - ln A(0) the log integrand is
// ℓ0 + Δ - C0 e^Δ, C0 = c A(0). It is unimodal in u. The integral is split at
// the mode and truncated where the integrand has fallen by e^{-50}. When the
// mode is in the right half of (0, π) each piece is integrated in
// s = ln(π - u), which resolves the approach to π; otherwise in u itself.

const TAIL_DROP: f64 = 50.0;
const LAPLACE_LN_THRESHOLD: f64 = 25.0;

/// `ln(sin y / y)` without cancellation for small `y`.
fn ln_sinc(y: f64) -> f64 {
    if y.abs() < 0.1 {
        let y2 = y * y;
        // sin y / y - 1
        let m = -y2 / 6.0 * (1.0 - y2 / 20.0 * (1.0 - y2 / 42.0 * (1.0 - y2 / 72.0 * (1.0 - y2 / 110.0))));
        m.ln_1p()
    } else {
        (y.sin() / y).ln()
    }
}

/// `ln(sin u / u)` given `v = π - u`, accurate at both ends of (0, π).
fn ln_sinc_u(u: f64, v: f64) -> f64 {
    if v < 1.0 {
        (v.sin() / u).ln()
    } else {
        ln_sinc(u)
    }
}

/// `y cot y`, equal to 1 at 0.
fn y_cot_y(y: f64) -> f64 {
    if y.abs() < 1e-8 {
        1.0 - y * y / 3.0
    } else {
        y * y.cos() / y.sin()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Var {
    /// nodes in u
    U,
    /// nodes in s = ln(π - u)
    S,
}

impl Var {
    /// `(u, π - u, ln jacobian)` at coordinate `t`.
    fn point(self, t: f64) -> (f64, f64, f64) {
        match self {
            Var::U => (t, PI - t, 0.0),
            Var::S => {
                let v = t.exp();
                (PI - v, v, t)
            }
        }
    }

    fn coord(self, u: f64) -> f64 {
        match self {
            Var::U => u,
            Var::S => (PI - u).ln(),
        }
    }
}

struct Kernel {
    alpha: f64,
    p: f64,
    q: f64,
    ln_c: f64,
}

struct Layout {
    var: Var,
    /// coordinates of u_lo, u_peak, u_hi
    t: [f64; 3],
    /// Δ at the mode
    delta_star: f64,
    /// c A(u*) at the mode
    c_star: f64,
    /// log integrand at the mode (without jacobian)
    lmax: f64,
}

impl Kernel {
    fn new(x: f64, alpha: f64) -> Self {
        let p = 1.0 / (1.0 - alpha);
        let q = alpha * p;
        Self {
            alpha,
            p,
            q,
            ln_c: -q * x.ln(),
        }
    }

    fn ell0(&self) -> f64 {
        self.q * self.alpha.ln() + (1.0 - self.alpha).ln()
    }

    /// `Δ(u) = ln A(u) - ln A(0)`, given `u` and `v = π - u`.
    fn delta(&self, u: f64, v: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        self.q * ln_sinc(self.alpha * u) + ln_sinc((1.0 - self.alpha) * u) - self.p * ln_sinc_u(u, v)
    }

    /// `∂ ln A / ∂α` at fixed u.
    fn ell_alpha(&self, u: f64, v: f64) -> f64 {
        let a = self.alpha;
        let om2 = (1.0 - a) * (1.0 - a);
        let ratio = if u <= 0.0 { 0.0 } else { ln_sinc(a * u) - ln_sinc_u(u, v) };
        (a.ln() + ratio) / om2 + self.q / a * y_cot_y(a * u) - y_cot_y((1.0 - a) * u) / (1.0 - a)
    }

    /// `C0 = c A(0)`; when huge the integrand is a narrow half-Gaussian at u = 0.
    fn concentrated(&self) -> bool {
        self.ln_c + self.ell0() > LAPLACE_LN_THRESHOLD
    }

    /// Solves `Δ(u) = target` in coordinate `var` (Δ increases with u).
    fn t_of_delta(&self, var: Var, target: f64) -> f64 {
        if target <= 0.0 {
            return var.coord(0.0);
        }
        let (mut lo_u, mut hi_u) = match var {
            Var::U => (0.0, PI),
            Var::S => {
                // bracket in s: lo_s has Δ above target
                let mut s = -1.0f64;
                while self.delta(PI - s.exp(), s.exp()) < target && s > -700.0 {
                    s = 2.0 * s - 1.0;
                }
                (PI.ln(), s)
            }
        };
        // lo_u: Δ below target, hi_u: Δ above target (as coordinates)
        for _ in 0..200 {
            let mid = 0.5 * (lo_u + hi_u);
            let (u, v, _) = var.point(mid);
            if self.delta(u, v) < target {
                lo_u = mid;
            } else {
                hi_u = mid;
            }
            if (hi_u - lo_u).abs() < 1e-15 * (1.0 + mid.abs()) {
                break;
            }
        }
        0.5 * (lo_u + hi_u)
    }

    fn layout(&self) -> Layout {
        let ell0 = self.ell0();
        let delta_star = (-self.ln_c - ell0).max(0.0);
        let c_star = (self.ln_c + ell0 + delta_star).exp();
        let lmax = ell0 + delta_star - c_star;
        // h(d) = d - C* expm1(d) is the log integrand relative to the mode
        let h = |d: f64| d - c_star * d.exp_m1();
        let target = -TAIL_DROP;

        let d_lo = if delta_star == 0.0 || h(-delta_star) >= target {
            -delta_star
        } else {
            let (mut lo, mut hi) = (target.max(-delta_star), 0.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if h(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-14 * (1.0 + lo.abs()) {
                    break;
                }
            }
            0.5 * (lo + hi)
        };
        let mut step = 1.0;
        while h(step) > target {
            step *= 2.0;
        }
        let (mut lo, mut hi) = (0.0, step);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if h(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 * (1.0 + hi) {
                break;
            }
        }
        let d_hi = 0.5 * (lo + hi);

        let var = if delta_star <= self.delta(0.5 * PI, 0.5 * PI) { Var::U } else { Var::S };
        let t = [
            self.t_of_delta(var, delta_star + d_lo),
            self.t_of_delta(var, delta_star),
            self.t_of_delta(var, delta_star + d_hi),
        ];
        Layout {
            var,
            t,
            delta_star,
            c_star,
            lmax,
        }
    }

    /// Log integrand relative to the mode, including the jacobian, and
    /// `c A(u)` at coordinate `t`.
    fn log_integrand(&self, lay: &Layout, t: f64) -> (f64, f64, f64, f64) {
        let (u, v, ln_jac) = lay.var.point(t);
        let d = self.delta(u, v) - lay.delta_star;
        let cae = lay.c_star * d.exp();
        (d - lay.c_star * d.exp_m1() + ln_jac, cae, u, v)
    }

    fn pieces(lay: &Layout) -> [(f64, f64); 2] {
        let [a, b, c] = lay.t;
        [(a.min(b), a.max(b)), (b.min(c), b.max(c))]
    }

    /// Laplace's method at u = 0 with `ln A(u) ≈ ln A(0) + k u²`; relative
    /// error is of order `1/(c A(0))`.
    fn laplace_approx(&self, x: f64) -> PsLogDensity {
        let (a, p, q) = (self.alpha, self.p, self.q);
        let ell0 = self.ell0();
        let ln_cc = self.ln_c + ell0;
        let cc = ln_cc.exp();
        let k = (p - q * a * a - (1.0 - a) * (1.0 - a)) / 6.0;
        let value = self.prefix(x) + ell0 - cc + 0.5 * (PI / k).ln() - 0.5 * ln_cc - 2f64.ln();
        let d_x = -p / x + (cc + 0.5) * q / x;
        let ell0_a = p * p * a.ln();
        let dk = (p * p - (p * p * a * a + 2.0 * q * a) + 2.0 * (1.0 - a)) / 6.0;
        let dln_cc = -p * p * x.ln() + ell0_a;
        let d_alpha = 1.0 / a + p - p * p * x.ln() + ell0_a - (cc + 0.5) * dln_cc - 0.5 * dk / k;
        PsLogDensity { value, d_x, d_alpha }
    }

    fn prefix(&self, x: f64) -> f64 {
        self.q.ln() - self.p * x.ln() - PI.ln()
    }
}

/// Standard positive-stable log density (Laplace transform `exp(-s^α)`),
/// evaluated by adaptive quadrature to relative tolerance 1e-9.
pub fn ps_log_density(x: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::domain(format!("density argument must be positive, got {x}")));
    }
    if alpha == 0.5 {
        return Ok(levy_log_density(x));
    }
    let k = Kernel::new(x, alpha);
    if k.concentrated() {
        return Ok(k.laplace_approx(x).value);
    }
    let lay = k.layout();
    let mut total = 0.0;
    for (a, b) in Kernel::pieces(&lay) {
        if b > a {
            total += integrate_adaptive(|t| k.log_integrand(&lay, t).0.exp(), a, b, 1e-9, 0.0)?;
        }
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::numerical(format!(
            "positive-stable density integral degenerate at x={x}, alpha={alpha}"
        )));
    }
    Ok(k.prefix(x) + lay.lmax + total.ln())
}

/// Closed form at α = 1/2: the InverseGamma(1/2, 1/4) (Lévy) density.
fn levy_log_density(x: f64) -> f64 {
    -(2.0f64.ln()) - 0.5 * PI.ln() - 1.5 * x.ln() - 0.25 / x
}

/// Log density and partial derivatives from a fixed 64+64-node rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsLogDensity {
    pub value: f64,
    pub d_x: f64,
    pub d_alpha: f64,
}

/// Fixed-node evaluation of the standard positive-stable log density with its
/// gradient in `x` and `α`. The node layout moves continuously with the
/// arguments, so the result is a smooth function suitable for differentiation.
pub fn ps_log_density_fixed(x: f64, alpha: f64) -> Result<PsLogDensity> {
    check_alpha(alpha)?;
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::domain(format!("density argument must be positive, got {x}")));
    }
    let k = Kernel::new(x, alpha);
    if k.concentrated() {
        return Ok(k.laplace_approx(x));
    }
    let lay = k.layout();
    let rule = gl64();
    let mut total = 0.0;
    let mut sx = 0.0;
    let mut sa = 0.0;
    let dlnc_da = -x.ln() * k.p * k.p;
    for (a, b) in Kernel::pieces(&lay) {
        if b <= a {
            continue;
        }
        for (t, w) in rule.mapped(a, b) {
            let (lv, cae, u, v) = k.log_integrand(&lay, t);
            let wv = w * lv.exp();
            if wv == 0.0 {
                continue;
            }
            total += wv;
            sx += wv * k.q * cae / x;
            let ea = k.ell_alpha(u, v);
            sa += wv * (ea * (1.0 - cae) - cae * dlnc_da);
        }
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::numerical(format!(
            "positive-stable density integral degenerate at x={x}, alpha={alpha}"
        )));
    }
    let value = k.prefix(x) + lay.lmax + total.ln();
    let d_x = -k.p / x + sx / total;
    let d_alpha = 1.0 / alpha + k.p - x.ln() * k.p * k.p + sa / total;
    Ok(PsLogDensity { value, d_x, d_alpha })
}

/// Log density of `H(α, δ, θ)` at `z`.
pub fn log_density_tilted_ps(z: f64, params: &TiltedPsParams) -> Result<f64> {
    params.validate()?;
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::domain(format!("density argument must be positive, got {z}")));
    }
    let a = params.alpha;
    let scale = (params.delta / a).powf(1.0 / a);
    let base = ps_log_density(z / scale, a)? - scale.ln();
    Ok(base - params.theta * z + params.delta * params.theta.powf(a) / a)
}

// ---------------------------------------------------------------------------

/// Fréchet law with location 0: `P(ε ≤ x) = exp{-(x/scale)^{-shape}}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetParams {
    pub scale: f64,
    pub shape: f64,
}

impl FrechetParams {
    pub fn new(scale: f64, shape: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::domain(format!("Fréchet scale must be positive, got {scale}")));
        }
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(Error::domain(format!("Fréchet shape must be positive, got {shape}")));
        }
        Ok(Self { scale, shape })
    }

    /// The noise law of the process: scale τ, shape 1/α₀.
    pub fn noise(tau: f64, alpha0: f64) -> Result<Self> {
        Self::new(tau, 1.0 / alpha0)
    }
}

pub fn frechet_cdf(x: f64, params: &FrechetParams) -> Result<f64> {
    if !(x > 0.0) || x.is_nan() {
        return Err(Error::domain(format!("Fréchet cdf needs x > 0, got {x}")));
    }
    Ok((-(x / params.scale).powf(-params.shape)).exp())
}

pub fn frechet_log_density(x: f64, params: &FrechetParams) -> Result<f64> {
    if !(x > 0.0) || x.is_nan() {
        return Err(Error::domain(format!("Fréchet density needs x > 0, got {x}")));
    }
    let r = (x / params.scale).ln();
    Ok(params.shape.ln() - params.scale.ln() - (1.0 + params.shape) * r - (-params.shape * r).exp())
}

pub fn frechet_quantile(p: f64, params: &FrechetParams) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("quantile level must lie in (0, 1), got {p}")));
    }
    Ok(params.scale * (-p.ln()).powf(-1.0 / params.shape))
}

pub fn sample_frechet(params: &FrechetParams, rng: &mut Rng) -> f64 {
    let e: f64 = rng.sample(Exp1);
    params.scale * e.powf(-1.0 / params.shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use proptest::prelude::*;

    #[test]
    fn levy_closed_form_value() {
        let v = log_density_tilted_ps(1.0, &TiltedPsParams::standard(0.5, 0.0).unwrap()).unwrap();
        let oracle = (1.0 / (2.0 * PI.sqrt())).ln() - 0.25;
        assert!((v - oracle).abs() < 1e-12);
        assert!((v + 1.51556).abs() < 1e-4);
    }

    #[test]
    fn quadrature_matches_levy_near_half() {
        // the general path evaluated at α=1/2 via the fixed rule
        for &x in &[0.01, 0.2, 1.0, 7.0, 300.0, 1e6] {
            let q = ps_log_density_fixed(x, 0.5).unwrap().value;
            assert!((q - levy_log_density(x)).abs() < 1e-9, "x={x}: {q} vs {}", levy_log_density(x));
        }
    }

    #[test]
    fn fixed_and_adaptive_agree() {
        for &a in &[0.05, 0.2, 0.35, 0.7, 0.9, 0.97] {
            for &x in &[1e-3, 0.05, 0.5, 1.0, 4.0, 100.0, 1e8] {
                let f = ps_log_density_fixed(x, a).unwrap().value;
                let g = ps_log_density(x, a).unwrap();
                assert!((f - g).abs() < 1e-8 * g.abs().max(1.0), "a={a} x={x}: {f} vs {g}");
            }
        }
    }

    #[test]
    fn laplace_branch_continues_quadrature() {
        for &a in &[0.3, 0.6, 0.9] {
            // x giving c A(0) = e^20, inside the quadrature branch
            let k0 = Kernel::new(1.0, a);
            let x = ((20.0 - k0.ell0()) / -k0.q).exp();
            let k = Kernel::new(x, a);
            assert!(!k.concentrated());
            let quad = ps_log_density_fixed(x, a).unwrap();
            let lap = k.laplace_approx(x);
            assert!((quad.value - lap.value).abs() < 1e-7 * quad.value.abs(), "a={a}");
            assert!((quad.d_x - lap.d_x).abs() < 1e-6 * quad.d_x.abs(), "a={a}");
            assert!((quad.d_alpha - lap.d_alpha).abs() < 1e-6 * quad.d_alpha.abs(), "a={a}");
        }
    }

    #[test]
    fn tilt_shift_is_analytic() {
        for &a in &[0.3, 0.5, 0.8] {
            let z = 1.7;
            let f0 = log_density_tilted_ps(z, &TiltedPsParams::standard(a, 0.0).unwrap()).unwrap();
            let f2 = log_density_tilted_ps(z, &TiltedPsParams::standard(a, 2.0).unwrap()).unwrap();
            assert!((f2 - f0 - (-2.0 * z + 2f64.powf(a))).abs() < 1e-12);
        }
    }

    fn normalization(params: TiltedPsParams) -> f64 {
        // integrate in t = ln z
        integrate_adaptive(
            |t| (log_density_tilted_ps(t.exp(), &params).unwrap() + t).exp(),
            -60.0,
            220.0,
            1e-8,
            1e-14,
        )
        .unwrap()
    }

    #[test]
    fn densities_integrate_to_one() {
        for (a, d, th) in [(0.3, 0.3, 0.0), (0.5, 0.5, 1.0), (0.7, 0.7, 4.0), (0.85, 0.85, 0.5), (0.4, 1.3, 0.7)] {
            let total = normalization(TiltedPsParams::new(a, d, th).unwrap());
            assert!((total - 1.0).abs() < 1e-6, "({a},{d},{th}) -> {total}");
        }
    }

    #[test]
    fn fixed_rule_gradients_match_differences() {
        for &a in &[0.1, 0.3, 0.5, 0.75, 0.95] {
            for &x in &[0.02, 0.6, 1.0, 3.0, 50.0] {
                let d = ps_log_density_fixed(x, a).unwrap();
                let h = 1e-6;
                let fx = (ps_log_density_fixed(x * (1.0 + h), a).unwrap().value
                    - ps_log_density_fixed(x * (1.0 - h), a).unwrap().value)
                    / (2.0 * h * x);
                let fa = (ps_log_density_fixed(x, a + h).unwrap().value
                    - ps_log_density_fixed(x, a - h).unwrap().value)
                    / (2.0 * h);
                let rel = |p: f64, q: f64| (p - q).abs() / p.abs().max(q.abs()).max(1e-2);
                assert!(rel(d.d_x, fx) < 1e-6, "a={a} x={x}: d_x {} vs {fx}", d.d_x);
                assert!(rel(d.d_alpha, fa) < 1e-6, "a={a} x={x}: d_a {} vs {fa}", d.d_alpha);
            }
        }
    }

    #[test]
    fn untilted_sampler_laplace() {
        let mut rng = rng_from_seed(21);
        let n = 200_000;
        let m: f64 = (0..n)
            .map(|_| (-sample_ps(0.3, 0.3, &mut rng).unwrap()).exp())
            .sum::<f64>()
            / n as f64;
        assert!((m - (-1.0f64).exp()).abs() < 0.01);
    }

    #[test]
    fn zero_tilt_accepts_first_proposal_and_matches_untilted() {
        let p = TiltedPsParams::standard(0.6, 0.0).unwrap();
        let mut a = rng_from_seed(5);
        let mut b = rng_from_seed(5);
        for _ in 0..100 {
            let (z, tries) = sample_tilted_ps_counted(&p, &mut a, 10).unwrap();
            assert_eq!(tries, 1);
            assert_eq!(z, sample_ps(0.6, 0.6, &mut b).unwrap());
        }
    }

    #[test]
    fn acceptance_rate_matches_transform() {
        let p = TiltedPsParams::standard(0.5, 1.0).unwrap();
        let mut rng = rng_from_seed(8);
        let mut accepted = 0u64;
        let mut proposals = 0u64;
        while proposals < 1_000_000 {
            let (_, t) = sample_tilted_ps_counted(&p, &mut rng, u64::MAX).unwrap();
            accepted += 1;
            proposals += t;
        }
        let rate = accepted as f64 / proposals as f64;
        assert!((rate - (-1.0f64).exp()).abs() < 0.002, "rate {rate}");
    }

    #[test]
    fn exhaustion_is_reported() {
        let p = TiltedPsParams::standard(0.5, 400.0).unwrap();
        let mut rng = rng_from_seed(1);
        match sample_tilted_ps(&p, &mut rng, 5) {
            Err(Error::SamplerExhausted { tries, acceptance_rate }) => {
                assert_eq!(tries, 5);
                assert!(acceptance_rate < 1e-8);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sampler_is_reproducible() {
        let p = TiltedPsParams::standard(0.4, 0.3).unwrap();
        let a: Vec<f64> = {
            let mut r = rng_from_seed(3);
            (0..20).map(|_| sample_tilted_ps(&p, &mut r, 1000).unwrap()).collect()
        };
        let b: Vec<f64> = {
            let mut r = rng_from_seed(3);
            (0..20).map(|_| sample_tilted_ps(&p, &mut r, 1000).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn bad_parameters_rejected() {
        assert!(TiltedPsParams::new(1.0, 0.5, 0.0).is_err());
        assert!(TiltedPsParams::new(0.5, 0.0, 0.0).is_err());
        assert!(TiltedPsParams::new(0.5, 0.5, -1.0).is_err());
        assert!(log_density_tilted_ps(0.0, &TiltedPsParams::standard(0.5, 0.0).unwrap()).is_err());
        let mut rng = rng_from_seed(0);
        assert!(sample_ps(0.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn frechet_examples() {
        let unit = FrechetParams::new(1.0, 1.0).unwrap();
        assert!((frechet_cdf(1.0, &unit).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        for &x in &[0.1, 1.0, 10.0] {
            let p = frechet_cdf(x, &unit).unwrap();
            assert!((frechet_quantile(p, &unit).unwrap() - x).abs() < 1e-12 * x.max(1.0));
        }
        assert!(frechet_cdf(0.0, &unit).is_err());
        assert!(frechet_quantile(1.0, &unit).is_err());
    }

    #[test]
    fn frechet_median_against_draws() {
        let p = FrechetParams::noise(1.0, 0.25).unwrap();
        let med = frechet_quantile(0.5, &p).unwrap();
        assert!((med - 2f64.ln().powf(-0.25)).abs() < 1e-14);
        let mut rng = rng_from_seed(13);
        let n = 1_000_000;
        let below = (0..n).filter(|_| sample_frechet(&p, &mut rng) <= med).count();
        // 99% DKW band
        let eps = ((2.0f64 / 0.01).ln() / (2.0 * n as f64)).sqrt();
        assert!((below as f64 / n as f64 - 0.5).abs() < eps);
    }

    #[test]
    fn frechet_density_integrates() {
        let p = FrechetParams::noise(1.3, 0.6).unwrap();
        let total = integrate_adaptive(
            |t| (frechet_log_density(t.exp(), &p).unwrap() + t).exp(),
            -20.0,
            60.0,
            1e-12,
            1e-15,
        )
        .unwrap();
        assert!((total - 1.0).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn density_gradient_in_z_matches_differences(a in 0.1f64..0.9, lz in -2.0f64..3.0, th in 0.0f64..3.0) {
            let z = lz.exp();
            let p = TiltedPsParams::standard(a, th).unwrap();
            let d = ps_log_density_fixed(z, a).unwrap().d_x - th;
            let h = 1e-5 * z;
            let fd = (log_density_tilted_ps(z + h, &p).unwrap() - log_density_tilted_ps(z - h, &p).unwrap()) / (2.0 * h);
            prop_assert!((d - fd).abs() <= 1e-6 * d.abs().max(1.0), "{} vs {}", d, fd);
        }

        #[test]
        fn frechet_round_trip(scale in 0.1f64..10.0, shape in 0.2f64..8.0, p in 0.001f64..0.999) {
            let f = FrechetParams::new(scale, shape).unwrap();
            let x = frechet_quantile(p, &f).unwrap();
            prop_assert!((frechet_cdf(x, &f).unwrap() - p).abs() < 1e-12);
        }
    }
}
