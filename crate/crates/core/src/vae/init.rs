//! Starting values: a least-squares projection onto the basis, per-replicate
//! maximum likelihood for the latent variables with `α₀` profiled out, and an
//! encoder first layer that maps the data onto those latent values.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::grad_tape::Tensor;
use crate::spatial_basis::BasisMatrix;

use super::params::{squash_alpha, DecoderParams, EncoderParams, InitReport, VaeState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitOptions {
    /// Multiplicative ascent steps per replicate and profiling round.
    pub latent_iters: usize,
    /// Alternations between the latent fit and the `α₀` update.
    pub profile_rounds: usize,
    pub train_basis: bool,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            latent_iters: 200,
            profile_rounds: 6,
            train_basis: false,
        }
    }
}

const RIDGE: f64 = 1e-8;

fn basis_power(basis: &BasisMatrix, alpha: f64) -> DMatrix<f64> {
    DMatrix::from_fn(basis.n_sites(), basis.n_knots(), |j, k| {
        let w = basis.get(j, k);
        if w > 0.0 {
            (w.ln() / alpha).exp()
        } else {
            0.0
        }
    })
}

/// `(AᵀA)⁻¹ Aᵀ D` with `A = ω^{1/α}` and `D = diag(1 / mean_t x_tj)`; a
/// ridge of `1e-8` (relative to the mean diagonal) is added when `AᵀA` is
/// singular. Returns the `K x n_s` matrix and whether the ridge was used.
pub fn projection_matrix(fields: &Field, basis: &BasisMatrix, alpha: f64) -> Result<(Tensor, bool)> {
    let (n_s, k) = (basis.n_sites(), basis.n_knots());
    if fields.n_s() != n_s {
        return Err(Error::shape(format!("field has {} sites, basis {n_s}", fields.n_s())));
    }
    let a = basis_power(basis, alpha);
    let ata = a.transpose() * &a;
    let (inv_ata_at, ridge) = match ata.clone().cholesky() {
        Some(c) => (c.solve(&a.transpose()), false),
        None => {
            let scale = (ata.trace() / k as f64).max(f64::MIN_POSITIVE);
            let reg = ata + DMatrix::identity(k, k) * (RIDGE * scale);
            let c = reg
                .cholesky()
                .ok_or_else(|| Error::numerical("ridge-regularized projection is still singular"))?;
            (c.solve(&a.transpose()), true)
        }
    };
    let means: Vec<f64> = (0..n_s)
        .map(|j| fields.site_series(j).iter().sum::<f64>() / fields.n_t() as f64)
        .collect();
    let w = Tensor::from_fn(k, n_s, |r, j| inv_ata_at[(r, j)] / means[j]);
    Ok((w, ridge))
}

/// Maximizes `Σ_j log f(x_j | y_j)` over `z ≥ 0` with `y = A z`, where the
/// objective reduces to `Σ_j [ln y_j - c_j y_j]` and `c_j = (τ / x_j)^{1/α₀}`.
/// Works in a rescaled frame `ĉ = c e^{-m}`; returns `ln z`.
fn fit_latent(a: &DMatrix<f64>, x: &[f64], alpha0: f64, start: &[f64], iters: usize) -> Vec<f64> {
    let (n_s, k) = (a.nrows(), a.ncols());
    let s: Vec<f64> = x.iter().map(|v| -v.ln() / alpha0).collect();
    let smax = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let c: Vec<f64> = s.iter().map(|v| (v - smax).exp()).collect();
    let m = -smax;
    let mut z: Vec<f64> = start.to_vec();
    let y_of = |z: &[f64]| -> Vec<f64> { (0..n_s).map(|j| (0..k).map(|kk| a[(j, kk)] * z[kk]).sum()).collect() };
    // optimal common scale
    let y = y_of(&z);
    let cy: f64 = c.iter().zip(&y).map(|(c, y)| c * y).sum();
    if cy > 0.0 {
        z.iter_mut().for_each(|v| *v *= n_s as f64 / cy);
    }
    let denom: Vec<f64> = (0..k).map(|kk| (0..n_s).map(|j| a[(j, kk)] * c[j]).sum()).collect();
    for _ in 0..iters {
        let y = y_of(&z);
        for kk in 0..k {
            if denom[kk] > 0.0 && z[kk] > 0.0 {
                let num: f64 = (0..n_s).filter(|&j| y[j] > 0.0).map(|j| a[(j, kk)] / y[j]).sum();
                z[kk] *= num / denom[kk];
            }
        }
    }
    z.iter().map(|v| v.ln() + m).collect()
}

fn loglik_given_y(x: &[f64], ln_y: &[f64], alpha0: f64) -> f64 {
    x.iter()
        .zip(ln_y)
        .map(|(&xj, &ly)| {
            let l = xj.ln() - alpha0 * ly;
            -alpha0.ln() - xj.ln() - l / alpha0 - (-l / alpha0).exp()
        })
        .sum()
}

fn ln_y_of(a: &DMatrix<f64>, ln_z: &[f64]) -> Vec<f64> {
    let top = ln_z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (0..a.nrows())
        .map(|j| {
            let s: f64 = ln_z.iter().enumerate().map(|(k, lz)| a[(j, k)] * (lz - top).exp()).sum();
            s.ln() + top
        })
        .collect()
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Least-squares `W` with `W X = Ẑ` (minimum norm when underdetermined),
/// `X` being `n_s x n_t` and `Ẑ` being `K x n_t`.
fn solve_encoder(x: &DMatrix<f64>, zhat: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let (n_s, n_t) = x.shape();
    let rank_ok = |r: &DMatrix<f64>| {
        let d: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
        let top = d.iter().cloned().fold(0.0, f64::max);
        top > 0.0 && d.iter().all(|v| *v > 1e-12 * top)
    };
    if n_s >= n_t {
        let qr = x.clone().qr();
        let r = qr.r();
        if rank_ok(&r) {
            let q = qr.q();
            // M R = Ẑ  ⇔  Rᵀ Mᵀ = Ẑᵀ
            let mt = r
                .transpose()
                .solve_lower_triangular(&zhat.transpose())
                .ok_or_else(|| Error::numerical("triangular solve failed"))?;
            return Ok((mt.transpose() * q.transpose(), false));
        }
    } else {
        let qr = x.transpose().qr();
        let r = qr.r();
        if rank_ok(&r) {
            let q = qr.q();
            let wt = r
                .solve_upper_triangular(&(q.transpose() * zhat.transpose()))
                .ok_or_else(|| Error::numerical("triangular solve failed"))?;
            return Ok((wt.transpose(), false));
        }
    }
    let xtx = x.transpose() * x;
    let scale = (xtx.trace() / n_t as f64).max(f64::MIN_POSITIVE);
    let reg = xtx + DMatrix::identity(n_t, n_t) * (RIDGE * scale);
    let c = reg
        .cholesky()
        .ok_or_else(|| Error::numerical("ridge-regularized encoder solve is singular"))?;
    // W = Ẑ (XᵀX + λI)⁻¹ Xᵀ
    let m = c.solve(&zhat.transpose()).transpose();
    Ok((m * x.transpose(), true))
}

pub fn init_params(fields: &Field, basis: &BasisMatrix) -> Result<VaeState> {
    init_params_with(fields, basis, &InitOptions::default())
}

pub fn init_params_with(fields: &Field, basis: &BasisMatrix, opts: &InitOptions) -> Result<VaeState> {
    let (n_t, n_s, k) = (fields.n_t(), basis.n_sites(), basis.n_knots());
    if fields.n_s() != n_s {
        return Err(Error::shape(format!("field has {} sites, basis {n_s}", fields.n_s())));
    }
    if n_t == 0 {
        return Err(Error::shape("no replicates to initialize from"));
    }
    if let Some(pos) = fields.values().iter().position(|v| !(*v > 0.0)) {
        return Err(Error::domain(format!(
            "training data must be positive (replicate {}, site {})",
            pos / n_s,
            pos % n_s
        )));
    }
    let mut report = InitReport::default();
    let alpha = squash_alpha(std::f64::consts::LN_2);
    let (proj, ridge) = projection_matrix(fields, basis, alpha)?;
    report.ridge_projection = ridge;
    if ridge {
        report
            .warnings
            .push("basis powers are rank deficient; projection used a ridge of 1e-8".into());
    }
    let a = basis_power(basis, alpha);

    let starts: Vec<Vec<f64>> = fields
        .replicates()
        .map(|x| {
            let z: Vec<f64> = (0..k)
                .map(|r| proj.data()[r * n_s..(r + 1) * n_s].iter().zip(x).map(|(w, v)| w * v).sum())
                .collect();
            let top = z.iter().cloned().fold(0.0, f64::max);
            let floor = if top > 0.0 { 1e-3 * top } else { 1.0 };
            z.into_iter().map(|v| v.max(floor)).collect()
        })
        .collect();

    let xs: Vec<&[f64]> = fields.replicates().collect();
    let fit_all = |alpha0: f64| -> Vec<Vec<f64>> {
        xs.par_iter()
            .zip(&starts)
            .map(|(x, s)| fit_latent(&a, x, alpha0, s, opts.latent_iters))
            .collect()
    };
    let mut alpha0: f64 = 0.5;
    let mut ln_z = fit_all(alpha0);
    for _ in 0..opts.profile_rounds {
        let ln_y: Vec<Vec<f64>> = ln_z.iter().map(|lz| ln_y_of(&a, lz)).collect();
        let total = |la: f64| -> f64 {
            let a0 = la.exp();
            xs.iter().zip(&ln_y).map(|(x, ly)| loglik_given_y(x, ly, a0)).sum()
        };
        alpha0 = golden_max(total, 0.02f64.ln(), 3f64.ln(), 1e-6).exp();
        ln_z = fit_all(alpha0);
    }
    report.alpha0 = alpha0;
    report.latent_loglik = xs
        .iter()
        .zip(&ln_z)
        .map(|(x, lz)| loglik_given_y(x, &ln_y_of(&a, lz), alpha0))
        .sum();

    let zhat = DMatrix::from_fn(k, n_t, |r, t| ln_z[t][r].exp());
    if zhat.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("latent starting values overflow; rescale the data"));
    }
    let x = DMatrix::from_fn(n_s, n_t, |j, t| fields.get(t, j));
    let (w1, ridge) = solve_encoder(&x, &zhat)?;
    report.ridge_encoder = ridge;
    if ridge {
        report
            .warnings
            .push("data matrix is rank deficient; encoder solve used a ridge of 1e-8".into());
    }
    let w1 = Tensor::from_fn(k, n_s, |r, j| w1[(r, j)]);
    let encoder = EncoderParams::initial(w1);
    let mut decoder = DecoderParams::initial(basis.clone(), 0.0, alpha0.ln());
    decoder.train_basis = opts.train_basis;
    let mut state = VaeState::new(encoder, decoder)?;
    state.init_report = Some(report);
    Ok(state)
}

#[cfg(test)]
pub(crate) fn latent_fit_for_tests(a: &DMatrix<f64>, x: &[f64], alpha0: f64, iters: usize) -> Vec<f64> {
    fit_latent(a, x, alpha0, &vec![1.0; a.ncols()], iters)
}
