//! The max-infinitely divisible process
//! `X(s) = ε(s) · {Σ_k ω_k(s)^{1/α} Z_k}^{α₀}`, `Z_k ~ H(α, α, θ_k)`,
//! `ε(s) ~ Fréchet(0, τ, 1/α₀)`: simulation, exact distribution functions and
//! tail dependence summaries.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Scale};
use crate::seed::child_rng;
use crate::spatial_basis::{build_basis, distance, BasisMatrix, KnotConfig, SiteSet};
use crate::stable_dist::{
    check_alpha, sample_frechet, sample_tilted_ps, FrechetParams, TiltedPsParams, DEFAULT_MAX_TRIES,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxIdParams {
    pub alpha0: f64,
    pub tau: f64,
    pub alpha: f64,
    pub theta: Vec<f64>,
}

impl MaxIdParams {
    pub fn new(alpha0: f64, tau: f64, alpha: f64, theta: Vec<f64>) -> Result<Self> {
        let p = Self {
            alpha0,
            tau,
            alpha,
            theta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::domain(format!("alpha0 must be positive, got {}", self.alpha0)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::domain(format!("tau must be positive, got {}", self.tau)));
        }
        if self.theta.is_empty() {
            return Err(Error::domain("at least one knot is required"));
        }
        if let Some(k) = self.theta.iter().position(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(Error::domain(format!("theta[{k}] must be nonnegative and finite")));
        }
        Ok(())
    }

    pub fn n_knots(&self) -> usize {
        self.theta.len()
    }

    /// Untilted knots `D = {k : θ_k = 0}`.
    pub fn untilted(&self) -> Vec<usize> {
        (0..self.theta.len()).filter(|&k| self.theta[k] == 0.0).collect()
    }

    pub fn noise(&self) -> FrechetParams {
        FrechetParams {
            scale: self.tau,
            shape: 1.0 / self.alpha0,
        }
    }

    fn check_basis(&self, basis: &BasisMatrix) -> Result<()> {
        self.validate()?;
        if basis.n_knots() != self.theta.len() {
            return Err(Error::shape(format!(
                "basis has {} knots but {} tilting parameters were given",
                basis.n_knots(),
                self.theta.len()
            )));
        }
        Ok(())
    }
}

/// `ω_kj^{1/α}`, row-major `n_s x K`.
pub fn basis_powers(basis: &BasisMatrix, alpha: f64) -> Vec<f64> {
    basis.weights().iter().map(|w| w.powf(1.0 / alpha)).collect()
}

/// Simulates `n_t` replicates. Replicate `t` draws from its own stream derived
/// from `seed`, so the result does not depend on the thread count.
pub fn simulate_maxid(
    params: &MaxIdParams,
    basis: &BasisMatrix,
    sites: &SiteSet,
    n_t: usize,
    seed: u64,
) -> Result<Field> {
    simulate_maxid_with_latent(params, basis, sites, n_t, seed).map(|(f, _)| f)
}

/// As [`simulate_maxid`], also returning the latent `Z` (row-major `n_t x K`).
pub fn simulate_maxid_with_latent(
    params: &MaxIdParams,
    basis: &BasisMatrix,
    sites: &SiteSet,
    n_t: usize,
    seed: u64,
) -> Result<(Field, Vec<f64>)> {
    params.check_basis(basis)?;
    if basis.n_sites() != sites.len() {
        return Err(Error::shape(format!(
            "basis has {} rows for {} sites",
            basis.n_sites(),
            sites.len()
        )));
    }
    let n_s = sites.len();
    let k = params.n_knots();
    let wpow = basis_powers(basis, params.alpha);
    let ps: Vec<TiltedPsParams> = params
        .theta
        .iter()
        .map(|&th| TiltedPsParams::standard(params.alpha, th))
        .collect::<Result<_>>()?;
    let noise = params.noise();

    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n_t)
        .into_par_iter()
        .map(|t| {
            let mut rng = child_rng(seed, "replicate", t as u64);
            let z: Vec<f64> = ps
                .iter()
                .map(|p| sample_tilted_ps(p, &mut rng, DEFAULT_MAX_TRIES))
                .collect::<Result<_>>()?;
            let x = (0..n_s)
                .map(|j| {
                    let y: f64 = wpow[j * k..(j + 1) * k].iter().zip(&z).map(|(w, z)| w * z).sum();
                    sample_frechet(&noise, &mut rng) * y.powf(params.alpha0)
                })
                .collect();
            Ok((x, z))
        })
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(n_t * n_s);
    let mut latent = Vec::with_capacity(n_t * k);
    for (x, z) in rows {
        values.extend(x);
        latent.extend(z);
    }
    Ok((Field::new(values, n_t, sites.clone(), Scale::Raw)?, latent))
}

/// Matérn correlation with smoothness 5/2 and range `phi`.
pub fn matern52(h: f64, phi: f64) -> f64 {
    let a = 5f64.sqrt() * h / phi;
    (1.0 + a + a * a / 3.0) * (-a).exp()
}

/// Cholesky factor of `a`, adding jitter `1e-10, 1e-9, 1e-8` to the diagonal
/// if the plain factorization fails.
pub fn cholesky_with_jitter(a: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = a.clone().cholesky() {
        return Ok(c.l());
    }
    let n = a.nrows();
    let mut jitter = 1e-10;
    for _ in 0..3 {
        let m = &a + DMatrix::<f64>::identity(n, n) * jitter;
        if let Some(c) = m.cholesky() {
            return Ok(c.l());
        }
        jitter *= 10.0;
    }
    Err(Error::numerical("covariance matrix is not positive definite after jitter"))
}

/// Zero-mean, unit-variance Gaussian field with Matérn correlation.
/// Only `nu = 2.5` is supported.
pub fn simulate_gp_matern(sites: &SiteSet, range_phi: f64, nu: f64, n_t: usize, seed: u64) -> Result<Field> {
    if nu != 2.5 {
        return Err(Error::Unsupported(format!("Matérn smoothness {nu}; only 5/2 is implemented")));
    }
    if !(range_phi > 0.0) {
        return Err(Error::domain("Matérn range must be positive"));
    }
    let n = sites.len();
    let c = sites.coords();
    let cov = DMatrix::from_fn(n, n, |i, j| matern52(distance(&c[i], &c[j]), range_phi));
    let l = cholesky_with_jitter(cov)?;
    let rows: Vec<Vec<f64>> = (0..n_t)
        .into_par_iter()
        .map(|t| {
            let mut rng = child_rng(seed, "gp", t as u64);
            let w = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            (&l * w).iter().copied().collect()
        })
        .collect();
    Field::new(rows.concat(), n_t, sites.clone(), Scale::Raw)
}

// ---------------------------------------------------------------------------
// Exact distribution functions.

/// `Σ_k [(θ_k + b_k)^α - θ_k^α]` given `ln b_k` (use `-inf` for `b_k = 0`).
fn exponent_from_log_b(theta: &[f64], alpha: f64, ln_b: impl Iterator<Item = f64>) -> f64 {
    theta
        .iter()
        .zip(ln_b)
        .map(|(&th, lb)| {
            if lb == f64::NEG_INFINITY {
                0.0
            } else if th == 0.0 {
                (alpha * lb).exp()
            } else {
                let y = lb - th.ln();
                // ln(1 + b/θ)
                let l1p = if y > 30.0 { y + (-y).exp().ln_1p() } else { y.exp().ln_1p() };
                th.powf(alpha) * (alpha * l1p).exp_m1()
            }
        })
        .sum()
}

/// `V_j(x) = -log F_j(x)`.
pub fn marginal_exponent(x: f64, site: usize, params: &MaxIdParams, basis: &BasisMatrix) -> Result<f64> {
    params.check_basis(basis)?;
    if !(x > 0.0) || x.is_nan() {
        return Err(Error::domain(format!("marginal cdf needs x > 0, got {x}")));
    }
    if site >= basis.n_sites() {
        return Err(Error::Index {
            index: site,
            len: basis.n_sites(),
        });
    }
    let lead = (params.tau.ln() - x.ln()) / params.alpha0;
    let ia = 1.0 / params.alpha;
    let ln_b = basis.row(site).iter().map(|&w| if w > 0.0 { lead + ia * w.ln() } else { f64::NEG_INFINITY });
    Ok(exponent_from_log_b(&params.theta, params.alpha, ln_b))
}

pub fn marginal_log_cdf(x: f64, site: usize, params: &MaxIdParams, basis: &BasisMatrix) -> Result<f64> {
    marginal_exponent(x, site, params, basis).map(|v| -v)
}

pub fn marginal_cdf(x: f64, site: usize, params: &MaxIdParams, basis: &BasisMatrix) -> Result<f64> {
    marginal_exponent(x, site, params, basis).map(|v| (-v).exp())
}

/// `1 - F_j(x)` without cancellation in the upper tail.
pub fn marginal_survival(x: f64, site: usize, params: &MaxIdParams, basis: &BasisMatrix) -> Result<f64> {
    marginal_exponent(x, site, params, basis).map(|v| -(-v).exp_m1())
}

/// `-log F(x_1, …, x_{n_s})`.
pub fn joint_exponent(x: &[f64], params: &MaxIdParams, basis: &BasisMatrix) -> Result<f64> {
    params.check_basis(basis)?;
    if x.len() != basis.n_sites() {
        return Err(Error::shape(format!(
            "joint cdf got {} values for {} sites",
            x.len(),
            basis.n_sites()
        )));
    }
    if let Some(j) = x.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::domain(format!("joint cdf needs x > 0, got x[{j}] = {}", x[j])));
    }
    let k = params.n_knots();
    let mut b = vec![0.0; k];
    let tau_part = params.tau.powf(1.0 / params.alpha0);
    for (j, &xj) in x.iter().enumerate() {
        let s = xj.powf(-1.0 / params.alpha0);
        for (kk, &w) in basis.row(j).iter().enumerate() {
            if w > 0.0 {
                b[kk] += w.powf(1.0 / params.alpha) * s;
            }
        }
    }
    let ln_b = b.into_iter().map(|v| if v > 0.0 { (tau_part * v).ln() } else { f64::NEG_INFINITY });
    Ok(exponent_from_log_b(&params.theta, params.alpha, ln_b))
}

pub fn joint_cdf(x: &[f64], params: &MaxIdParams, basis: &BasisMatrix) -> Result<f64> {
    joint_exponent(x, params, basis).map(|v| (-v).exp())
}

/// Checks that `F^{1/s}` equals the joint cdf with `θ/s^{1/α}` and `ω/s`
/// (within 1e-10 in log space, relative for large exponents).
pub fn max_id_root_check(x: &[f64], s: f64, params: &MaxIdParams, basis: &BasisMatrix) -> Result<bool> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::domain("root order must be positive"));
    }
    let lhs = joint_exponent(x, params, basis)? / s;
    let theta = params.theta.iter().map(|t| t / s.powf(1.0 / params.alpha)).collect();
    let scaled = MaxIdParams::new(params.alpha0, params.tau, params.alpha, theta)?;
    let w = basis.weights().iter().map(|w| w / s).collect();
    let b2 = BasisMatrix::from_weights(basis.n_sites(), basis.n_knots(), w, None)?;
    let rhs = joint_exponent(x, &scaled, &b2)?;
    Ok((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0))
}

/// Inverse of the marginal cdf: bisection on `ln x`, then Newton polish.
pub fn marginal_quantile(p: f64, site: usize, params: &MaxIdParams, basis: &BasisMatrix) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("quantile level must lie in (0, 1), got {p}")));
    }
    let target = p.ln();
    let logf = |lx: f64| marginal_log_cdf(lx.exp(), site, params, basis);

    // Seed from the leading-order tail behaviour, then bracket.
    let tc = tail_constants(site, params, basis)?;
    let t = -1.0 / (-p).ln_1p().min(-1e-300);
    let seed = if tc.c_prime > 0.0 {
        params.alpha0 / params.alpha * (tc.c_prime.ln() + t.ln())
    } else if tc.c > 0.0 {
        params.alpha0 * (tc.c.ln() + t.ln())
    } else {
        0.0
    };
    let seed = if seed.is_finite() { seed } else { 0.0 };
    let (mut lo, mut hi) = (seed - 1.0, seed + 1.0);
    let mut step = 1.0;
    while logf(lo)? > target {
        step *= 2.0;
        lo -= step;
        if lo < -700.0 {
            return Err(Error::numerical("quantile bracket underflow"));
        }
    }
    step = 1.0;
    while logf(hi)? < target {
        step *= 2.0;
        hi += step;
        if hi > 700.0 {
            return Err(Error::numerical("quantile bracket overflow"));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if logf(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * (1.0 + mid.abs()) {
            break;
        }
    }
    let mut lx = 0.5 * (lo + hi);
    // Newton in ln x on log F
    for _ in 0..3 {
        let x = lx.exp();
        let f = logf(lx)?;
        let d = dlogf_dlnx(x, site, params, basis);
        if !(d > 0.0) {
            break;
        }
        let next = lx - (f - target) / d;
        if !(next > lo - 1e-9 && next < hi + 1e-9) {
            break;
        }
        lx = next;
    }
    Ok(lx.exp())
}

fn dlogf_dlnx(x: f64, site: usize, params: &MaxIdParams, basis: &BasisMatrix) -> f64 {
    let a = params.alpha;
    let lead = (params.tau / x).powf(1.0 / params.alpha0);
    basis
        .row(site)
        .iter()
        .zip(&params.theta)
        .filter(|(w, _)| **w > 0.0)
        .map(|(&w, &th)| {
            let b = lead * w.powf(1.0 / a);
            a * (th + b).powf(a - 1.0) * b / params.alpha0
        })
        .sum()
}

/// Tail constants of one site: `1 - F_j(x) ≈ c'_j x^{-α/α₀} + c_j x^{-1/α₀} + …`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailConstants {
    pub c: f64,
    pub c_prime: f64,
    pub d: f64,
}

pub fn tail_constants(site: usize, params: &MaxIdParams, basis: &BasisMatrix) -> Result<TailConstants> {
    params.check_basis(basis)?;
    if site >= basis.n_sites() {
        return Err(Error::Index {
            index: site,
            len: basis.n_sites(),
        });
    }
    let (a, a0, tau) = (params.alpha, params.alpha0, params.tau);
    let mut c = 0.0;
    let mut cp = 0.0;
    let mut d = 0.0;
    for (&w, &th) in basis.row(site).iter().zip(&params.theta) {
        if w == 0.0 {
            continue;
        }
        if th == 0.0 {
            cp += w;
        } else {
            c += th.powf(a - 1.0) * w.powf(1.0 / a);
            d += th.powf(a - 2.0) * w.powf(2.0 / a);
        }
    }
    Ok(TailConstants {
        c: a * tau.powf(1.0 / a0) * c,
        c_prime: tau.powf(a / a0) * cp,
        d: a * (a - 1.0) / 2.0 * tau.powf(2.0 / a0) * d,
    })
}

/// `d_ij`; defined only when both sites are covered by an untilted knot.
pub fn pair_constant(i: usize, j: usize, params: &MaxIdParams, basis: &BasisMatrix) -> Result<f64> {
    let ti = tail_constants(i, params, basis)?;
    let tj = tail_constants(j, params, basis)?;
    if ti.c_prime == 0.0 || tj.c_prime == 0.0 {
        return Err(Error::Case {
            i,
            j,
            reason: "d_ij needs both sites covered by an untilted knot".into(),
        });
    }
    let a = params.alpha;
    let (si, sj) = (ti.c_prime.powf(1.0 / a), tj.c_prime.powf(1.0 / a));
    let total: f64 = params
        .untilted()
        .into_iter()
        .map(|k| (basis.get(i, k).powf(1.0 / a) / si + basis.get(j, k).powf(1.0 / a) / sj).powf(a))
        .sum();
    Ok(params.tau.powf(a / params.alpha0) * total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DependenceCase {
    A,
    B,
    C,
    D,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dependence {
    pub case: DependenceCase,
    pub chi: f64,
    pub eta: f64,
}

/// Limiting `χ` and `η` for a site pair.
pub fn theoretical_dependence(i: usize, j: usize, params: &MaxIdParams, basis: &BasisMatrix) -> Result<Dependence> {
    let ti = tail_constants(i, params, basis)?;
    let tj = tail_constants(j, params, basis)?;
    let a = params.alpha;
    let dep = match (ti.c_prime > 0.0, tj.c_prime > 0.0) {
        (false, false) => Dependence {
            case: DependenceCase::A,
            chi: 0.0,
            eta: 0.5,
        },
        (false, true) => Dependence {
            case: DependenceCase::B,
            chi: 0.0,
            eta: a / (a + 1.0),
        },
        (true, false) => Dependence {
            case: DependenceCase::C,
            chi: 0.0,
            eta: a / (a + 1.0),
        },
        (true, true) => {
            let shared = params
                .untilted()
                .into_iter()
                .any(|k| basis.get(i, k) > 0.0 && basis.get(j, k) > 0.0);
            if shared {
                let d = pair_constant(i, j, params, basis)?;
                Dependence {
                    case: DependenceCase::D,
                    chi: 2.0 - d,
                    eta: 1.0,
                }
            } else {
                Dependence {
                    case: DependenceCase::D,
                    chi: 0.0,
                    eta: a,
                }
            }
        }
    };
    Ok(dep)
}

/// `V(1, …, 1)` over the first `n_sites` sites, for the polarized cases.
pub fn extremal_coefficient_untilted(params: &MaxIdParams, basis: &BasisMatrix, n_sites: usize) -> Result<f64> {
    params.check_basis(basis)?;
    if n_sites == 0 || n_sites > basis.n_sites() {
        return Err(Error::Index {
            index: n_sites,
            len: basis.n_sites(),
        });
    }
    if params.theta.iter().all(|&t| t > 0.0) {
        return Ok(n_sites as f64);
    }
    if params.theta.iter().any(|&t| t > 0.0) {
        return Err(Error::Unsupported(
            "extremal coefficient for mixed tilting; use theoretical_dependence for pairs".into(),
        ));
    }
    let a = params.alpha;
    let scale: Vec<f64> = (0..n_sites)
        .map(|j| tail_constants(j, params, basis).map(|t| t.c_prime.powf(1.0 / a)))
        .collect::<Result<_>>()?;
    let total: f64 = (0..params.n_knots())
        .map(|k| {
            (0..n_sites)
                .map(|j| basis.get(j, k).powf(1.0 / a) / scale[j])
                .sum::<f64>()
                .powf(a)
        })
        .sum();
    Ok(params.tau.powf(a / params.alpha0) * total)
}

// ---------------------------------------------------------------------------
// Simulation designs.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    I,
    II,
    III,
    IV,
    V,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(ModelKind::I),
            "II" | "2" => Ok(ModelKind::II),
            "III" | "3" => Ok(ModelKind::III),
            "IV" | "4" => Ok(ModelKind::IV),
            "V" | "5" => Ok(ModelKind::V),
            other => Err(Error::domain(format!("unknown model '{other}', expected I-V"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::I => "I",
            ModelKind::II => "II",
            ModelKind::III => "III",
            ModelKind::IV => "IV",
            ModelKind::V => "V",
        };
        f.write_str(s)
    }
}

/// Generating parameters of one of the five simulation designs on `[0, 10]^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDesign {
    pub kind: ModelKind,
    pub knots: KnotConfig,
    pub params: MaxIdParams,
    /// Matérn range (Model I)
    pub gp_range: f64,
    /// Gaussian kernel bandwidth (Model V)
    pub gauss_rho: f64,
}

impl ModelDesign {
    pub fn new(kind: ModelKind) -> Result<Self> {
        Self::with_alpha(kind, 0.5)
    }

    pub fn with_alpha(kind: ModelKind, alpha: f64) -> Result<Self> {
        // 5 x 5 knots at {1, 3, 5, 7, 9}^2
        let knots = KnotConfig::regular(5, 0.0, 10.0, 3.0)?;
        let theta: Vec<f64> = knots
            .knots()
            .iter()
            .enumerate()
            .map(|(k, c)| match kind {
                ModelKind::II => 0.01 + 0.04 * (k % 5) as f64 / 4.0,
                ModelKind::III => {
                    if c[0] <= 3.0 {
                        0.0
                    } else {
                        0.01 + 0.04 * (k % 5) as f64 / 4.0
                    }
                }
                ModelKind::I | ModelKind::IV | ModelKind::V => 0.0,
            })
            .collect();
        // Model V is max-stable: noise shape and mixing exponent coincide.
        let alpha0 = if kind == ModelKind::V { alpha } else { 0.25 };
        let params = MaxIdParams::new(alpha0, 1.0, alpha, theta)?;
        Ok(Self {
            kind,
            gauss_rho: knots.radius() / 2.0,
            knots,
            params,
            gp_range: 3.0,
        })
    }

    pub fn basis(&self, sites: &SiteSet) -> Result<BasisMatrix> {
        match self.kind {
            ModelKind::V => gaussian_basis(sites, &self.knots, self.gauss_rho),
            _ => build_basis(sites, &self.knots),
        }
    }

    pub fn simulate(&self, sites: &SiteSet, n_t: usize, seed: u64) -> Result<Field> {
        match self.kind {
            ModelKind::I => simulate_gp_matern(sites, self.gp_range, 2.5, n_t, seed),
            _ => simulate_maxid(&self.params, &self.basis(sites)?, sites, n_t, seed),
        }
    }
}

/// Row-standardized Gaussian kernel weights `exp(-d^2 / (2 rho^2))`.
pub fn gaussian_basis(sites: &SiteSet, knots: &KnotConfig, rho: f64) -> Result<BasisMatrix> {
    if !(rho > 0.0) {
        return Err(Error::domain("Gaussian bandwidth must be positive"));
    }
    let k = knots.len();
    let mut w = Vec::with_capacity(sites.len() * k);
    for (j, s) in sites.coords().iter().enumerate() {
        let start = w.len();
        for c in knots.knots() {
            let d = distance(s, c);
            w.push((-d * d / (2.0 * rho * rho)).exp());
        }
        let total: f64 = w[start..].iter().sum();
        if !(total > 0.0) {
            return Err(Error::Coverage { site: j });
        }
        w[start..].iter_mut().for_each(|v| *v /= total);
    }
    BasisMatrix::from_weights(sites.len(), k, w, Some(knots.clone()))
}
