use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Scale};
use crate::seed::child_rng;
use crate::spatial_basis::{wendland_rows, SiteSet};
use crate::stable_dist::{frechet_quantile, sample_frechet, sample_tilted_ps, FrechetParams, TiltedPsParams};

use super::network::{decode_params, draw_eta, encode, reparameterize};
use super::params::VaeState;

fn check_input(state: &VaeState, fields: &Field) -> Result<()> {
    if fields.n_s() != state.n_sites() {
        return Err(Error::shape(format!(
            "field has {} sites, the model {}",
            fields.n_s(),
            state.n_sites()
        )));
    }
    Ok(())
}

fn mix(row: &[f64], z: &[f64], alpha: f64) -> f64 {
    row.iter()
        .zip(z)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, z)| (w.ln() / alpha).exp() * z)
        .sum()
}

/// Encodes every replicate, draws a latent vector, decodes it and adds
/// Fréchet noise: `X*_j = ε_j {Σ_k ω_kj^{1/α_t} z_k}^{α₀}`. Returns
/// `n_draws` ensembles stacked draw by draw (`n_draws * n_t` replicates).
pub fn emulate(state: &VaeState, fields: &Field, n_draws: usize, seed: u64) -> Result<Field> {
    check_input(state, fields)?;
    let n_t = fields.n_t();
    let dec = &state.decoder;
    let noise = FrechetParams::noise(dec.tau(), dec.alpha0())?;
    let a0 = dec.alpha0();
    let k = state.n_knots();
    let rows: Vec<Vec<f64>> = (0..n_draws * n_t)
        .into_par_iter()
        .map(|i| {
            let t = i % n_t;
            let mut rng = child_rng(seed, "emulate", i as u64);
            let (mu, lv) = encode(fields.replicate(t), &state.encoder)?;
            let eta = draw_eta(k, 1, &mut rng).pop().expect("one draw");
            let z = reparameterize(&mu, &lv, &eta);
            let (alpha, _) = decode_params(&z, dec)?;
            Ok((0..dec.omega.n_sites())
                .map(|j| sample_frechet(&noise, &mut rng) * mix(dec.omega.row(j), &z, alpha).powf(a0))
                .collect())
        })
        .collect::<Result<_>>()?;
    Field::new(rows.concat(), n_draws * n_t, fields.sites().clone(), Scale::Raw)
}

/// Proposal budget for prior draws of the latent variables.
const PRIOR_TRIES: u64 = 10_000_000;

/// Like [`emulate`], but the latent vector is redrawn from the decoded prior
/// `Z_k ~ H(α_t, α_t, θ_tk)` instead of being taken from the encoder, so the
/// tilting parameters shape the emulated tails.
pub fn emulate_prior(state: &VaeState, fields: &Field, n_draws: usize, seed: u64) -> Result<Field> {
    check_input(state, fields)?;
    let n_t = fields.n_t();
    let dec = &state.decoder;
    let noise = FrechetParams::noise(dec.tau(), dec.alpha0())?;
    let a0 = dec.alpha0();
    let k = state.n_knots();
    let rows: Vec<Vec<f64>> = (0..n_draws * n_t)
        .into_par_iter()
        .map(|i| {
            let t = i % n_t;
            let mut rng = child_rng(seed, "emulate-prior", i as u64);
            let (mu, lv) = encode(fields.replicate(t), &state.encoder)?;
            let eta = draw_eta(k, 1, &mut rng).pop().expect("one draw");
            let (alpha, theta) = decode_params(&reparameterize(&mu, &lv, &eta), dec)?;
            let z = theta
                .iter()
                .map(|&th| sample_tilted_ps(&TiltedPsParams::standard(alpha, th)?, &mut rng, PRIOR_TRIES))
                .collect::<Result<Vec<f64>>>()?;
            Ok((0..dec.omega.n_sites())
                .map(|j| sample_frechet(&noise, &mut rng) * mix(dec.omega.row(j), &z, alpha).powf(a0))
                .collect())
        })
        .collect::<Result<_>>()?;
    Field::new(rows.concat(), n_draws * n_t, fields.sites().clone(), Scale::Raw)
}

/// Predictions at unobserved sites, replicate-major (`n_t x n_h`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutPrediction {
    pub n_t: usize,
    pub n_sites: usize,
    /// Point predictor: the median of the predictive Fréchet law.
    pub point: Vec<f64>,
    /// Scale `τ y^{α₀}` of the predictive Fréchet law, shape `1/α₀`.
    pub scale: Vec<f64>,
    pub shape: f64,
    /// One emulated value per replicate and site, using a sampled latent.
    pub draw: Vec<f64>,
}

impl HoldoutPrediction {
    pub fn point_at(&self, t: usize, i: usize) -> f64 {
        self.point[t * self.n_sites + i]
    }

    pub fn predictive(&self, t: usize, i: usize) -> FrechetParams {
        FrechetParams {
            scale: self.scale[t * self.n_sites + i],
            shape: self.shape,
        }
    }
}

/// Mixes the encoded latent variables with basis rows at `holdout` sites.
/// The point predictor and predictive law use the encoder mean; `draw` uses a
/// reparameterized sample.
pub fn predict_holdout(state: &VaeState, holdout: &SiteSet, fields: &Field, seed: u64) -> Result<HoldoutPrediction> {
    check_input(state, fields)?;
    let dec = &state.decoder;
    let knots = dec.knots.as_ref().ok_or_else(|| {
        Error::Unsupported("the model has no knot configuration, so new sites cannot be mixed".into())
    })?;
    let rows = wendland_rows(holdout.coords(), knots)?;
    let k = state.n_knots();
    let n_h = holdout.len();
    let (tau, a0) = (dec.tau(), dec.alpha0());
    let noise = FrechetParams::noise(tau, a0)?;
    let med_factor = frechet_quantile(0.5, &FrechetParams::noise(1.0, a0)?)?;
    let per_t: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..fields.n_t())
        .into_par_iter()
        .map(|t| {
            let mut rng = child_rng(seed, "holdout", t as u64);
            let (mu, lv) = encode(fields.replicate(t), &state.encoder)?;
            let (alpha, _) = decode_params(&mu, dec)?;
            let eta = draw_eta(k, 1, &mut rng).pop().expect("one draw");
            let z = reparameterize(&mu, &lv, &eta);
            let (alpha_z, _) = decode_params(&z, dec)?;
            let mut point = Vec::with_capacity(n_h);
            let mut scale = Vec::with_capacity(n_h);
            let mut draw = Vec::with_capacity(n_h);
            for i in 0..n_h {
                let row = &rows[i * k..(i + 1) * k];
                let s = tau * mix(row, &mu, alpha).powf(a0);
                scale.push(s);
                point.push(s * med_factor);
                draw.push(sample_frechet(&noise, &mut rng) * mix(row, &z, alpha_z).powf(a0));
            }
            Ok((point, scale, draw))
        })
        .collect::<Result<_>>()?;
    let mut out = HoldoutPrediction {
        n_t: fields.n_t(),
        n_sites: n_h,
        point: Vec::with_capacity(fields.n_t() * n_h),
        scale: Vec::with_capacity(fields.n_t() * n_h),
        shape: 1.0 / a0,
        draw: Vec::with_capacity(fields.n_t() * n_h),
    };
    for (p, s, d) in per_t {
        out.point.extend(p);
        out.scale.extend(s);
        out.draw.extend(d);
    }
    Ok(out)
}
