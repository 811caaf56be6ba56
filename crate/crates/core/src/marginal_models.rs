//! Generalized extreme value margins: maximum-likelihood fits, a binned
//! goodness-of-fit test, and transforms to the uniform and unit Fréchet
//! scales.

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::field::{Field, Scale};
use crate::optim::{bfgs, BfgsOptions};

/// Below this `|ξ|` the Gumbel limit is used.
const XI_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GevParams {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl GevParams {
    pub fn new(mu: f64, sigma: f64, xi: f64) -> Result<Self> {
        if !(mu.is_finite() && xi.is_finite() && sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::domain(format!(
                "invalid GEV parameters (mu={mu}, sigma={sigma}, xi={xi})"
            )));
        }
        Ok(Self { mu, sigma, xi })
    }

    /// Upper endpoint `μ − σ/ξ`; infinite unless `ξ < 0`.
    pub fn beta(&self) -> f64 {
        if self.xi < 0.0 {
            self.mu - self.sigma / self.xi
        } else {
            f64::INFINITY
        }
    }

    fn t(&self, y: f64) -> f64 {
        1.0 + self.xi * (y - self.mu) / self.sigma
    }

    pub fn cdf(&self, y: f64) -> f64 {
        let z = (y - self.mu) / self.sigma;
        if self.xi.abs() < XI_EPS {
            return (-(-z).exp()).exp();
        }
        let t = 1.0 + self.xi * z;
        if t <= 0.0 {
            return if self.xi > 0.0 { 0.0 } else { 1.0 };
        }
        (-t.powf(-1.0 / self.xi)).exp()
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!("probability must lie in (0, 1), got {p}")));
        }
        let l = -p.ln();
        Ok(if self.xi.abs() < XI_EPS {
            self.mu - self.sigma * l.ln()
        } else {
            self.mu + self.sigma * (l.powf(-self.xi) - 1.0) / self.xi
        })
    }

    pub fn log_density(&self, y: f64) -> f64 {
        let z = (y - self.mu) / self.sigma;
        if self.xi.abs() < XI_EPS {
            return -self.sigma.ln() - z - (-z).exp();
        }
        let t = 1.0 + self.xi * z;
        if t <= 0.0 {
            return f64::NEG_INFINITY;
        }
        -self.sigma.ln() - (1.0 + 1.0 / self.xi) * t.ln() - t.powf(-1.0 / self.xi)
    }
}

/// Negative log likelihood and its gradient in `(μ, ln σ, ξ)`; `None` when a
/// value lies outside the support.
fn nll_and_grad(y: &[f64], mu: f64, ls: f64, xi: f64) -> Option<(f64, [f64; 3])> {
    let sigma = ls.exp();
    let n = y.len() as f64;
    // keep ξ off zero so the general formulas stay well conditioned
    let xi = if xi.abs() < 1e-6 { 1e-6f64.copysign(xi) } else { xi };
    let (mut sum_lt, mut sum_u) = (0.0, 0.0);
    let (mut g_mu, mut g_ls, mut g_xi) = (0.0, n, 0.0);
    for &v in y {
        let z = (v - mu) / sigma;
        let t = 1.0 + xi * z;
        if !(t > 0.0) {
            return None;
        }
        let lt = t.ln();
        let u = (-lt / xi).exp();
        sum_lt += lt;
        sum_u += u;
        let common = (xi + 1.0 - u) / t;
        g_mu -= common / sigma;
        g_ls -= common * z;
        g_xi += -lt / (xi * xi) + ((1.0 + 1.0 / xi) - u / xi) * z / t + u * lt / (xi * xi);
    }
    let f = n * ls + (1.0 + 1.0 / xi) * sum_lt + sum_u;
    f.is_finite().then_some((f, [g_mu, g_ls, g_xi]))
}

/// Probability-weighted-moment estimates of Hosking, Wallis and Wood.
pub fn gev_pwm(series: &[f64]) -> Result<GevParams> {
    let n = series.len();
    if n < 3 {
        return Err(Error::domain("probability-weighted moments need at least 3 values"));
    }
    let mut x = series.to_vec();
    x.sort_by(f64::total_cmp);
    let nf = n as f64;
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let i = i as f64;
        b0 += v;
        b1 += v * i / (nf - 1.0);
        b2 += v * i * (i - 1.0) / ((nf - 1.0) * (nf - 2.0));
    }
    b0 /= nf;
    b1 /= nf;
    b2 /= nf;
    let c = (2.0 * b1 - b0) / (3.0 * b2 - b0) - 2f64.ln() / 3f64.ln();
    let k = 7.8590 * c + 2.9554 * c * c;
    let (sigma, mu) = if k.abs() < 1e-6 {
        let sigma = (2.0 * b1 - b0) / 2f64.ln();
        (sigma, b0 - 0.5772156649015329 * sigma)
    } else {
        let g = gamma(1.0 + k);
        let sigma = (2.0 * b1 - b0) * k / (g * (1.0 - 2f64.powf(-k)));
        (sigma, b0 + sigma * (g - 1.0) / k)
    };
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Fit("degenerate sample: zero spread".into()));
    }
    GevParams::new(mu, sigma, -k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GevFit {
    pub params: GevParams,
    pub nll: f64,
    /// Asymptotic standard errors of `(μ, σ, ξ)` from the observed
    /// information; NaN when the Hessian is not positive definite.
    pub se: [f64; 3],
    pub iterations: u64,
}

/// Maximum-likelihood GEV fit by BFGS on standardized data, started from the
/// probability-weighted-moment estimates with a few fixed alternative shapes.
pub fn fit_gev_mle(series: &[f64]) -> Result<GevFit> {
    let n = series.len();
    if n < 30 {
        return Err(Error::domain(format!("GEV fit needs at least 30 values, got {n}")));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("GEV fit needs finite values"));
    }
    let m = series.iter().sum::<f64>() / n as f64;
    let s = (series.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
    if !(s > 0.0) {
        return Err(Error::Fit("degenerate sample: zero spread".into()));
    }
    let y: Vec<f64> = series.iter().map(|v| (v - m) / s).collect();
    let pwm = gev_pwm(&y).ok();
    let mut starts: Vec<[f64; 3]> = Vec::new();
    if let Some(p) = pwm {
        starts.push([p.mu, p.sigma.ln(), p.xi.clamp(-0.9, 0.9)]);
    }
    for xi in [0.1, -0.1, 0.0] {
        let sig = 6f64.sqrt() / std::f64::consts::PI;
        starts.push([-0.5772156649015329 * sig, sig.ln(), xi]);
    }
    let mut best: Option<(Vec<f64>, f64, u64)> = None;
    let mut diag = Vec::new();
    for st in starts {
        // an infeasible start is moved to the nearest feasible shape
        let st = if nll_and_grad(&y, st[0], st[1], st[2]).is_some() { st } else { [st[0], st[1], 0.0] };
        let objective = |p: &[f64]| nll_and_grad(&y, p[0], p[1], p[2]).map(|(f, g)| (f, g.to_vec()));
        let opts = BfgsOptions {
            max_iters: 500,
            grad_tol: 1e-6 * n as f64,
        };
        match bfgs(objective, &st, &opts) {
            Some(r) if r.converged => {
                if best.as_ref().map_or(true, |b| r.f < b.1) {
                    best = Some((r.x, r.f, r.iters as u64));
                }
            }
            Some(r) => diag.push(format!(
                "start {st:?}: stopped at {:?} after {} iterations with gradient {:?}",
                r.x, r.iters, r.grad
            )),
            None => diag.push(format!("start {st:?}: objective undefined")),
        }
    }
    let (p, f, iterations) = best.ok_or_else(|| Error::Fit(diag.join("; ")))?;
    let params = GevParams::new(m + s * p[0], s * p[1].exp(), p[2])?;
    let nll = f + n as f64 * s.ln();
    Ok(GevFit {
        params,
        nll,
        se: standard_errors(series, &params),
        iterations,
    })
}

/// Inverse observed information in `(μ, σ, ξ)` by central differences of the
/// analytic gradient.
fn standard_errors(y: &[f64], p: &GevParams) -> [f64; 3] {
    let grad = |q: [f64; 3]| -> Option<[f64; 3]> {
        let (_, g) = nll_and_grad(y, q[0], q[1].ln(), q[2])?;
        // chain rule from ln σ to σ
        Some([g[0], g[1] / q[1], g[2]])
    };
    let base = [p.mu, p.sigma, p.xi];
    let mut h = Matrix3::zeros();
    for c in 0..3 {
        let step = 1e-5 * base[c].abs().max(p.sigma);
        let (mut up, mut dn) = (base, base);
        up[c] += step;
        dn[c] -= step;
        let (Some(gu), Some(gd)) = (grad(up), grad(dn)) else {
            return [f64::NAN; 3];
        };
        for r in 0..3 {
            h[(r, c)] = (gu[r] - gd[r]) / (2.0 * step);
        }
    }
    let h = (h + h.transpose()) * 0.5;
    match h.cholesky() {
        Some(ch) => {
            let inv = ch.inverse();
            [inv[(0, 0)].sqrt(), inv[(1, 1)].sqrt(), inv[(2, 2)].sqrt()]
        }
        None => [f64::NAN; 3],
    }
}

/// `n_bins − 1` interior cut points at the empirical quantiles of `values`.
pub fn cut_points(values: &[f64], n_bins: usize) -> Result<Vec<f64>> {
    if n_bins < 2 {
        return Err(Error::Binning("at least 2 bins are needed".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    if v.len() < n_bins {
        return Err(Error::Binning(format!(
            "{} distinct values cannot fill {n_bins} bins",
            v.len()
        )));
    }
    let mut all = values.to_vec();
    all.sort_by(f64::total_cmp);
    let n = all.len();
    let mut cuts: Vec<f64> = (1..n_bins)
        .map(|b| {
            let h = (n - 1) as f64 * b as f64 / n_bins as f64;
            let (lo, frac) = (h.floor() as usize, h - h.floor());
            all[lo] + frac * (all[(lo + 1).min(n - 1)] - all[lo])
        })
        .collect();
    cuts.dedup();
    if cuts.len() != n_bins - 1 {
        return Err(Error::Binning("ties produce repeated cut points".into()));
    }
    Ok(cuts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GofResult {
    /// `2 Σ O log(O / E)`, referred to a χ² law with `df` degrees of freedom.
    pub stat: f64,
    /// `Σ O log(O / E)` without the factor 2.
    pub raw_stat: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Fitted parameters of the GEV family.
pub const GEV_FITTED: usize = 3;

/// Binned likelihood-ratio statistic of `series` against `cdf` with the given
/// interior cut points; empty bins contribute 0.
pub fn gof_statistic(series: &[f64], cdf: impl Fn(f64) -> f64, cuts: &[f64]) -> Result<GofResult> {
    let n_bins = cuts.len() + 1;
    if n_bins <= GEV_FITTED + 1 {
        return Err(Error::Binning(format!("{n_bins} bins leave no degrees of freedom")));
    }
    if cuts.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Binning("cut points must be strictly increasing".into()));
    }
    let n = series.len() as f64;
    let mut observed = vec![0usize; n_bins];
    for &v in series {
        observed[cuts.partition_point(|c| *c < v)] += 1;
    }
    let mut raw = 0.0;
    let mut prev = 0.0;
    for (b, &o) in observed.iter().enumerate() {
        let f = if b < cuts.len() { cdf(cuts[b]) } else { 1.0 };
        let e = n * (f - prev);
        prev = f;
        if o > 0 {
            if !(e > 0.0) {
                return Ok(GofResult {
                    stat: f64::INFINITY,
                    raw_stat: f64::INFINITY,
                    df: n_bins - GEV_FITTED - 1,
                    p_value: 0.0,
                });
            }
            raw += o as f64 * (o as f64 / e).ln();
        }
    }
    let df = n_bins - GEV_FITTED - 1;
    let stat = 2.0 * raw;
    let chi = ChiSquared::new(df as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(GofResult {
        stat,
        raw_stat: raw,
        df,
        p_value: if stat <= 0.0 { 1.0 } else { chi.sf(stat) },
    })
}

/// `y* = (|ξ|(β − y)/σ)^{1/ξ}`: unit Fréchet when `y` follows the GEV law.
pub fn gev_to_frechet(series: &[f64], params: &GevParams) -> Result<Vec<f64>> {
    if !(params.xi < 0.0) {
        return Err(Error::domain(format!(
            "the Fréchet transform needs a negative shape, got {}",
            params.xi
        )));
    }
    let beta = params.beta();
    series
        .iter()
        .map(|&y| {
            if !(y < beta) {
                return Err(Error::domain(format!("value {y} is outside the support (endpoint {beta})")));
            }
            Ok(params.t(y).powf(1.0 / params.xi))
        })
        .collect()
}

/// Average ranks divided by `n + 1`, with the number of tied values.
pub fn rank_uniform(series: &[f64]) -> (Vec<f64>, usize) {
    let n = series.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| series[a].total_cmp(&series[b]));
    let mut out = vec![0.0; n];
    let mut tied = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && series[idx[j + 1]] == series[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        if j > i {
            tied += j - i + 1;
        }
        for &k in &idx[i..=j] {
            out[k] = rank / (n as f64 + 1.0);
        }
        i = j + 1;
    }
    (out, tied)
}

#[derive(Debug, Clone)]
pub enum UniformMode {
    Empirical,
    /// One fitted law per site.
    Parametric(Vec<GevParams>),
}

/// Site-wise transform to the uniform scale.
pub fn to_uniform(field: &Field, mode: &UniformMode) -> Result<Field> {
    let (n_t, n_s) = (field.n_t(), field.n_s());
    let cols: Vec<Vec<f64>> = match mode {
        UniformMode::Empirical => (0..n_s)
            .into_par_iter()
            .map(|j| rank_uniform(&field.site_series(j)).0)
            .collect(),
        UniformMode::Parametric(params) => {
            if params.len() != n_s {
                return Err(Error::shape(format!("{} fitted laws for {n_s} sites", params.len())));
            }
            (0..n_s)
                .map(|j| field.site_series(j).iter().map(|&v| params[j].cdf(v)).collect())
                .collect()
        }
    };
    let mut values = vec![0.0; n_t * n_s];
    for (j, col) in cols.iter().enumerate() {
        for (t, v) in col.iter().enumerate() {
            values[t * n_s + j] = *v;
        }
    }
    field.with_values(values, Scale::Uniform)
}

/// Inverse of the parametric transform.
pub fn from_uniform(field: &Field, params: &[GevParams]) -> Result<Field> {
    if field.scale() != Scale::Uniform {
        return Err(Error::domain("expected a uniform-scale field"));
    }
    let n_s = field.n_s();
    if params.len() != n_s {
        return Err(Error::shape(format!("{} fitted laws for {n_s} sites", params.len())));
    }
    let values = field
        .values()
        .iter()
        .enumerate()
        .map(|(i, &u)| params[i % n_s].quantile(u))
        .collect::<Result<Vec<f64>>>()?;
    field.with_values(values, Scale::Raw)
}

/// Site-wise GEV fits, in parallel.
pub fn fit_sites(field: &Field) -> Vec<Result<GevFit>> {
    (0..field.n_s())
        .into_par_iter()
        .map(|j| fit_gev_mle(&field.site_series(j)))
        .collect()
}

/// Maximum of `values` within each block; blocks are returned in increasing
/// id order.
pub fn block_max(values: &[f64], block: &[i64]) -> Result<Vec<(i64, f64)>> {
    if values.len() != block.len() {
        return Err(Error::shape(format!(
            "{} values but {} block ids",
            values.len(),
            block.len()
        )));
    }
    let mut out: std::collections::BTreeMap<i64, f64> = std::collections::BTreeMap::new();
    for (&v, &b) in values.iter().zip(block) {
        out.entry(b).and_modify(|m| *m = m.max(v)).or_insert(v);
    }
    Ok(out.into_iter().collect())
}

/// Block maxima of every site series; replicate `t` of `field` belongs to
/// block `block[t]`.
pub fn block_max_field(field: &Field, block: &[i64]) -> Result<Field> {
    let n_s = field.n_s();
    let cols = (0..n_s)
        .map(|j| block_max(&field.site_series(j), block))
        .collect::<Result<Vec<_>>>()?;
    let n_b = cols.first().map_or(0, |c| c.len());
    let mut values = vec![0.0; n_b * n_s];
    for (j, col) in cols.iter().enumerate() {
        for (b, (_, v)) in col.iter().enumerate() {
            values[b * n_s + j] = *v;
        }
    }
    Field::new(values, n_b, field.sites().clone(), field.scale())
}
