//! Empirical tail-dependence summaries and predictive scores.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::field::{Field, Scale};
use crate::marginal_models::{to_uniform, UniformMode};
use crate::quadrature::integrate_adaptive;
use crate::spatial_basis::{distance, Point, SiteSet};
use crate::stable_dist::FrechetParams;
use crate::vae::HoldoutPrediction;

/// Distance tolerance for pairing sites.
pub const CHI_TOL: f64 = 0.001;

/// Empirical `χ_h(u)` with a pointwise 95% binomial envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiCurve {
    pub h: f64,
    pub u_grid: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Number of site pairs at distance `h`.
    pub n_pairs: usize,
    /// Conditioning events behind each estimate.
    pub trials: Vec<u64>,
}

/// Clopper–Pearson interval for `k` successes in `n` trials.
pub fn binomial_interval(k: u64, n: u64, level: f64) -> (f64, f64) {
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let a = (1.0 - level) / 2.0;
    let lo = if k == 0 {
        0.0
    } else {
        Beta::new(k as f64, (n - k + 1) as f64).map_or(0.0, |b| b.inverse_cdf(a))
    };
    let hi = if k == n {
        1.0
    } else {
        Beta::new((k + 1) as f64, (n - k) as f64).map_or(1.0, |b| b.inverse_cdf(1.0 - a))
    };
    (lo, hi)
}

fn check_uniform(field: &Field) -> Result<()> {
    if field.scale() != Scale::Uniform {
        return Err(Error::domain("dependence estimates expect a uniform-scale field"));
    }
    Ok(())
}

fn check_u(u: f64) -> Result<()> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::domain(format!("threshold u must lie in (0, 1), got {u}")));
    }
    Ok(())
}

/// Site pairs `(i, j)`, `i < j`, whose distance is within `tol` of `h`.
pub fn pairs_at_distance(sites: &SiteSet, h: f64, tol: f64) -> Vec<(usize, usize)> {
    let c = sites.coords();
    (0..c.len())
        .flat_map(|i| ((i + 1)..c.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| (distance(&c[i], &c[j]) - h).abs() <= tol)
        .collect()
}

/// Joint and marginal exceedance counts summed over the listed pairs; each
/// pair is counted in both conditioning directions.
fn pair_counts(field: &Field, pairs: &[(usize, usize)], u: f64) -> (u64, u64) {
    let mut both = 0u64;
    let mut single = 0u64;
    for row in field.replicates() {
        for &(i, j) in pairs {
            let (a, b) = (row[i] > u, row[j] > u);
            both += 2 * u64::from(a && b);
            single += u64::from(a) + u64::from(b);
        }
    }
    (both, single)
}

/// `χ̂_h(u) = #{both > u} / #{one > u}` over all pairs at distance `h ± tol`
/// and all replicates, with symmetrized counting.
pub fn empirical_chi_h(uniform_field: &Field, h: f64, tol: f64, u_grid: &[f64]) -> Result<ChiCurve> {
    check_uniform(uniform_field)?;
    u_grid.iter().try_for_each(|&u| check_u(u))?;
    let pairs = pairs_at_distance(uniform_field.sites(), h, tol);
    if pairs.is_empty() {
        return Err(Error::EmptyPairs { h, tol });
    }
    let counts: Vec<(u64, u64)> = u_grid
        .par_iter()
        .map(|&u| pair_counts(uniform_field, &pairs, u))
        .collect();
    let mut curve = ChiCurve {
        h,
        u_grid: u_grid.to_vec(),
        estimate: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
        n_pairs: pairs.len(),
        trials: Vec::new(),
    };
    for (both, single) in counts {
        let (lo, hi) = binomial_interval(both, single, 0.95);
        curve.estimate.push(if single == 0 { f64::NAN } else { both as f64 / single as f64 });
        curve.lower.push(lo);
        curve.upper.push(hi);
        curve.trials.push(single);
    }
    Ok(curve)
}

/// `χ̂_{s₀,s}(u)` between a reference site and every site.
pub fn pairwise_chi_map(uniform_field: &Field, reference_site: usize, u: f64) -> Result<Vec<f64>> {
    check_uniform(uniform_field)?;
    check_u(u)?;
    let n_s = uniform_field.n_s();
    if reference_site >= n_s {
        return Err(Error::Index {
            index: reference_site,
            len: n_s,
        });
    }
    Ok((0..n_s)
        .into_par_iter()
        .map(|j| {
            let (both, single) = pair_counts(uniform_field, &[(reference_site, j)], u);
            if single == 0 {
                f64::NAN
            } else {
                both as f64 / single as f64
            }
        })
        .collect())
}

/// Regular grid of square cells over `[lo, hi]²`, indexed by cell centres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub spacing: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: 10.0,
            spacing: 0.1,
        }
    }
}

impl GridSpec {
    pub fn cells_per_side(&self) -> Result<usize> {
        let n = ((self.hi - self.lo) / self.spacing).round();
        if !(self.spacing > 0.0 && n >= 1.0 && ((self.hi - self.lo) / self.spacing - n).abs() < 1e-9) {
            return Err(Error::domain("grid spacing must divide the side length"));
        }
        Ok(n as usize)
    }

    pub fn cell_area(&self) -> f64 {
        self.spacing * self.spacing
    }

    pub fn sites(&self) -> Result<SiteSet> {
        let n = self.cells_per_side()?;
        SiteSet::grid([self.lo, self.lo], self.spacing, n, n)
    }
}

/// Averaged radius of exceedance over a grid of cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreCurve {
    pub u_grid: Vec<f64>,
    /// Mean over retained replicates; NaN when none is retained.
    pub are_mean: Vec<f64>,
    /// 95% interval for the mean.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Replicates in which the reference cell exceeds `u`.
    pub retained: Vec<usize>,
    pub reference_point: Point,
}

/// ARE from a uniform-scale field on grid cells of area `cell_area`; the
/// reference is the cell at index `reference`.
pub fn are_from_uniform(uniform_field: &Field, reference: usize, u_grid: &[f64], cell_area: f64) -> Result<AreCurve> {
    check_uniform(uniform_field)?;
    u_grid.iter().try_for_each(|&u| check_u(u))?;
    if reference >= uniform_field.n_s() {
        return Err(Error::Index {
            index: reference,
            len: uniform_field.n_s(),
        });
    }
    let z = Normal::standard().inverse_cdf(0.975);
    let mut curve = AreCurve {
        u_grid: u_grid.to_vec(),
        are_mean: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
        retained: Vec::new(),
        reference_point: uniform_field.sites().coord(reference),
    };
    for &u in u_grid {
        let radii: Vec<f64> = uniform_field
            .replicates()
            .filter(|row| row[reference] > u)
            .map(|row| {
                let n_e = row.iter().filter(|v| **v > u).count();
                (cell_area * n_e as f64 / std::f64::consts::PI).sqrt()
            })
            .collect();
        let n = radii.len();
        curve.retained.push(n);
        if n == 0 {
            curve.are_mean.push(f64::NAN);
            curve.lower.push(f64::NAN);
            curve.upper.push(f64::NAN);
            continue;
        }
        let mean = radii.iter().sum::<f64>() / n as f64;
        let half = if n > 1 {
            let var = radii.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1) as f64;
            z * (var / n as f64).sqrt()
        } else {
            0.0
        };
        curve.are_mean.push(mean);
        curve.lower.push((mean - half).max(0.0));
        curve.upper.push(mean + half);
    }
    Ok(curve)
}

/// Simulates with `sampler` on the grid cells, moves each cell to the uniform
/// scale by ranks and computes the ARE around the cell nearest to
/// `reference_point`.
pub fn are_curve(
    sampler: impl FnOnce(&SiteSet) -> Result<Field>,
    reference_point: Point,
    u_grid: &[f64],
    grid: &GridSpec,
) -> Result<AreCurve> {
    let sites = grid.sites()?;
    let field = sampler(&sites)?;
    if field.n_s() != sites.len() {
        return Err(Error::shape(format!(
            "sampler returned {} sites for a grid of {}",
            field.n_s(),
            sites.len()
        )));
    }
    let uniform = to_uniform(&field, &UniformMode::Empirical)?;
    are_from_uniform(&uniform, sites.nearest(&reference_point), u_grid, grid.cell_area())
}

/// A predictive law with enough structure for CRPS by quadrature.
pub trait Forecast {
    fn cdf(&self, x: f64) -> f64;
    fn quantile(&self, p: f64) -> f64;
    /// Bounds on `∫_{-∞}^{a} F²` and `∫_{b}^{∞} (1 − F)²` where `F(a)` and
    /// `1 − F(b)` are tiny.
    fn tail_integrals(&self, a: f64, b: f64) -> (f64, f64);
}

impl Forecast for FrechetParams {
    fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            (-(x / self.scale).powf(-self.shape)).exp()
        }
    }

    fn quantile(&self, p: f64) -> f64 {
        self.scale * (-p.ln()).powf(-1.0 / self.shape)
    }

    fn tail_integrals(&self, a: f64, b: f64) -> (f64, f64) {
        // F ≤ F(a) below a on a support bounded by 0; 1 − F(z) ≤ (z/s)^{-β}
        let lower = self.cdf(a).powi(2) * a.max(0.0);
        let upper = if 2.0 * self.shape > 1.0 {
            self.scale.powf(2.0 * self.shape) * b.powf(1.0 - 2.0 * self.shape) / (2.0 * self.shape - 1.0)
        } else {
            f64::INFINITY
        };
        (lower, upper)
    }
}

/// Gaussian predictive law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianForecast {
    pub mean: f64,
    pub sd: f64,
}

impl Forecast for GaussianForecast {
    fn cdf(&self, x: f64) -> f64 {
        Normal::new(self.mean, self.sd).map_or(f64::NAN, |n| n.cdf(x))
    }

    fn quantile(&self, p: f64) -> f64 {
        Normal::new(self.mean, self.sd).map_or(f64::NAN, |n| n.inverse_cdf(p))
    }

    fn tail_integrals(&self, a: f64, b: f64) -> (f64, f64) {
        // ∫ Φ(z)² dz ≤ ∫ Φ(z) dz = sd (t Φ(t) + φ(t)) at t = (a − mean)/sd
        let n = Normal::standard();
        let part = |t: f64| self.sd * (t * n.cdf(t) + (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt());
        let lo = self.cdf(a) * part((a - self.mean) / self.sd);
        let hi = (1.0 - self.cdf(b)) * part(-(b - self.mean) / self.sd);
        (lo, hi)
    }
}

/// Uniform predictive law on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformForecast {
    pub lo: f64,
    pub hi: f64,
}

impl Forecast for UniformForecast {
    fn cdf(&self, x: f64) -> f64 {
        ((x - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    fn quantile(&self, p: f64) -> f64 {
        self.lo + p * (self.hi - self.lo)
    }

    fn tail_integrals(&self, _a: f64, _b: f64) -> (f64, f64) {
        (0.0, 0.0)
    }
}

const CRPS_TAIL: f64 = 1e-6;

/// `∫ (F(z) − 1{y ≤ z})² dz` by adaptive quadrature between the `1e-6` and
/// `1 − 1e-6` quantiles, plus the tail bounds of the forecast.
pub fn crps_parametric(forecast: &impl Forecast, y: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::domain("observation must be finite"));
    }
    let a = forecast.quantile(CRPS_TAIL);
    let b = forecast.quantile(1.0 - CRPS_TAIL);
    if !(a.is_finite() && b.is_finite() && a <= b) {
        return Err(Error::Contract("forecast quantiles are not ordered".into()));
    }
    let probe: Vec<f64> = (0..=64).map(|i| forecast.cdf(a + (b - a) * i as f64 / 64.0)).collect();
    if probe.windows(2).any(|w| w[1] < w[0]) || probe.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Contract("forecast cdf is not monotone".into()));
    }
    let (lo_tail, hi_tail) = forecast.tail_integrals(a, b);
    let below = |z: f64| forecast.cdf(z).powi(2);
    let above = |z: f64| (1.0 - forecast.cdf(z)).powi(2);
    let quad = |f: &dyn Fn(f64) -> f64, lo: f64, hi: f64| integrate_adaptive(f, lo, hi, 1e-10, 1e-14);
    let mut total = lo_tail + hi_tail;
    if y < a {
        total += quad(&above, y, a)? + quad(&above, a, b)?;
    } else if y > b {
        total += quad(&below, a, b)? + quad(&below, b, y)?;
    } else {
        total += quad(&below, a, y)? + quad(&above, y, b)?;
    }
    Ok(total.max(0.0))
}

/// Sample CRPS `mean|X − y| − ½ mean|X − X′|` of an ensemble.
pub fn crps_ensemble(ensemble: &[f64], y: f64) -> Result<f64> {
    let m = ensemble.len();
    if m == 0 {
        return Err(Error::shape("empty ensemble"));
    }
    let mut x = ensemble.to_vec();
    x.sort_by(f64::total_cmp);
    let mf = m as f64;
    let term1 = x.iter().map(|v| (v - y).abs()).sum::<f64>() / mf;
    // Σ_{i,j} |x_i − x_j| = 2 Σ_i (2i − m + 1) x_(i)
    let pair: f64 = x
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * i as f64 - mf + 1.0) * v)
        .sum::<f64>()
        * 2.0;
    Ok(term1 - 0.5 * pair / (mf * mf))
}

/// `MSPE_t` over the prediction sites: `predictions` and `truth` are stored
/// replicate-major with `n_sites` columns.
pub fn mspe_per_time(predictions: &[f64], truth: &[f64], n_sites: usize) -> Result<Vec<f64>> {
    if predictions.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} observations",
            predictions.len(),
            truth.len()
        )));
    }
    if n_sites == 0 || truth.len() % n_sites != 0 {
        return Err(Error::shape("observations do not form whole replicates"));
    }
    Ok(predictions
        .chunks(n_sites)
        .zip(truth.chunks(n_sites))
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n_sites as f64)
        .collect())
}

/// Linear-interpolated empirical quantile of a sorted sample.
fn sorted_quantile(x: &[f64], p: f64) -> f64 {
    let h = (x.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(x.len() - 1);
    x[lo] + (h - lo as f64) * (x[hi] - x[lo])
}

/// Matched empirical quantiles of `a` and `b` at the given probabilities.
pub fn qq_pairs_at(a: &[f64], b: &[f64], probs: &[f64]) -> Result<Vec<(f64, f64)>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::shape("QQ pairs need non-empty samples"));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::domain("probabilities must lie in [0, 1]"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(probs
        .iter()
        .map(|&p| (sorted_quantile(&a, p), sorted_quantile(&b, p)))
        .collect())
}

/// QQ pairs of two equally long samples at `(i − ½)/n`, `i = 1..n`.
pub fn qq_pairs(a: &[f64], b: &[f64], n_quantiles: usize) -> Result<Vec<(f64, f64)>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("samples of length {} and {}", a.len(), b.len())));
    }
    if n_quantiles == 0 {
        return Err(Error::domain("at least one quantile is needed"));
    }
    let probs: Vec<f64> = (0..n_quantiles)
        .map(|i| (i as f64 + 0.5) / n_quantiles as f64)
        .collect();
    qq_pairs_at(a, b, &probs)
}

/// Holdout skill: CRPS per site (averaged over replicates) and MSPE per
/// replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub crps: Vec<f64>,
    pub mspe: Vec<f64>,
}

/// Scores the parametric predictive laws of `prediction` against the held-out
/// observations `truth` (replicate-major, one column per holdout site).
pub fn crps_table(prediction: &HoldoutPrediction, truth: &Field) -> Result<ScoreTable> {
    let (n_t, n_h) = (prediction.n_t, prediction.n_sites);
    if truth.n_t() != n_t || truth.n_s() != n_h {
        return Err(Error::shape(format!(
            "truth is {} x {}, predictions {n_t} x {n_h}",
            truth.n_t(),
            truth.n_s()
        )));
    }
    let crps = (0..n_h)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for t in 0..n_t {
                s += crps_parametric(&prediction.predictive(t, i), truth.get(t, i))?;
            }
            Ok(s / n_t as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mspe = mspe_per_time(&prediction.point, truth.values(), n_h)?;
    Ok(ScoreTable { crps, mspe })
}

/// CRPS of the climatological forecast: each holdout site's own empirical
/// distribution over all replicates.
pub fn climatology_crps(truth: &Field) -> Result<Vec<f64>> {
    (0..truth.n_s())
        .map(|i| {
            let s = truth.site_series(i);
            let mut total = 0.0;
            for &y in &s {
                total += crps_ensemble(&s, y)?;
            }
            Ok(total / s.len() as f64)
        })
        .collect()
}
