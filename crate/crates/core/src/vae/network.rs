//! Encoder, decoder and ELBO, all built on a gradient tape so that the same
//! code serves evaluation and training.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grad_tape::{Gradients, Tape, Tensor, Var};
use crate::seed::Rng;

use super::params::{flatten, DecoderParams, EncoderParams, VaeState, ALPHA_SLOPE, ALPHA_TOP, LOG_SIGMA_FLOOR, PARAM_NAMES};

/// `ln 2 - ln(2π)/2`, the half-normal normalizing constant.
const LN_HALF_NORMAL: f64 = 0.22579135264472744;

/// Parameter leaves on a tape, in [`PARAM_NAMES`] order.
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    pub fn new(tape: &Tape, enc: &EncoderParams, dec: &DecoderParams) -> Self {
        ParamVars(flatten(enc, dec).into_iter().map(|t| tape.leaf(t)).collect())
    }

    fn get(&self, name: &str) -> Var {
        let i = PARAM_NAMES.iter().position(|n| *n == name).expect("known parameter name");
        self.0[i]
    }

    /// Gradients in [`PARAM_NAMES`] order; unused parameters get zeros.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.0.iter().map(|v| grads.wrt_or_zeros(*v, tape.shape(*v))).collect()
    }
}

/// Encoder outputs on a tape: mean and log variance of the latent.
pub struct Encoded {
    pub mu: Var,
    pub log_var: Var,
}

pub fn encode_on_tape(tape: &Tape, p: &ParamVars, x: Var) -> Result<Encoded> {
    let h = tape.relu(tape.add(tape.matvec(p.get("w1"), x)?, p.get("b1"))?);
    let h1 = tape.relu(tape.add(tape.matvec(p.get("w2"), h)?, p.get("b2"))?);
    let mu = tape.relu(tape.add(tape.matvec(p.get("w4"), h1)?, p.get("b4"))?);
    let log_var = tape.add(tape.matvec(p.get("w3"), h1)?, p.get("b3"))?;
    Ok(Encoded { mu, log_var })
}

/// `log σ = max(log σ² / 2, ln 1e-6)`.
pub fn log_sigma_on_tape(tape: &Tape, log_var: Var) -> Var {
    tape.clamp_min(tape.mul_const(log_var, 0.5), LOG_SIGMA_FLOOR)
}

pub struct Decoded {
    pub alpha: Var,
    pub theta: Var,
}

pub fn decode_on_tape(tape: &Tape, p: &ParamVars, z: Var) -> Result<Decoded> {
    let l = tape.relu(tape.add(tape.matvec(p.get("w5"), z)?, p.get("b5"))?);
    let l1 = tape.relu(tape.add(tape.matvec(p.get("w6"), l)?, p.get("b6"))?);
    let theta = tape.relu(tape.add(tape.matvec(p.get("w7"), l1)?, p.get("b7"))?);
    let raw = tape.relu(tape.add(tape.matvec(p.get("w8"), l1)?, p.get("b8"))?);
    let alpha = tape.add_const(tape.mul_const(tape.exp(tape.neg(raw)), -ALPHA_SLOPE), ALPHA_TOP);
    Ok(Decoded { alpha, theta })
}

fn check_x(x: &[f64], n_s: usize) -> Result<()> {
    if x.len() != n_s {
        return Err(Error::shape(format!("replicate has {} values for {n_s} sites", x.len())));
    }
    if let Some(j) = x.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::domain(format!("value at site {j} must be positive and finite, got {}", x[j])));
    }
    Ok(())
}

/// Monte Carlo ELBO of one replicate for given half-normal noise draws
/// (`etas[l]` has one entry per knot). The result is the average over draws of
/// `log p(x | z) + log p(z) - log q(z | x)`.
pub fn elbo_on_tape(tape: &Tape, p: &ParamVars, x: &[f64], etas: &[Vec<f64>]) -> Result<Var> {
    if etas.is_empty() {
        return Err(Error::Contract("at least one Monte Carlo draw is required".into()));
    }
    let xv = tape.vector(x.to_vec());
    let enc = encode_on_tape(tape, p, xv)?;
    let log_sigma = log_sigma_on_tape(tape, enc.log_var);
    let sigma = tape.exp(log_sigma);
    let neg_entropy_part = tape.sum(log_sigma);
    let k = tape.shape(enc.mu).0;
    let mut acc: Option<Var> = None;
    for eta in etas {
        if eta.len() != k {
            return Err(Error::shape(format!("noise draw has {} entries for {k} knots", eta.len())));
        }
        let e = tape.vector(eta.clone());
        let z = tape.add(enc.mu, tape.mul(sigma, e)?)?;
        let dec = decode_on_tape(tape, p, z)?;
        let y = tape.mix(p.get("omega"), dec.alpha, z)?;
        let ll = tape.frechet_loglik(x, y, p.get("log_tau"), p.get("log_alpha0"))?;
        let prior = tape.log_tilted_ps(z, dec.alpha, dec.theta)?;
        // log q = K ln(2/√(2π)) - Σ log σ - Σ η²/2
        let q_const = k as f64 * LN_HALF_NORMAL - eta.iter().map(|v| v * v / 2.0).sum::<f64>();
        let log_q = tape.add_const(tape.neg(neg_entropy_part), q_const);
        let term = tape.sub(tape.add(ll, prior)?, log_q)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(tape.mul_const(acc.expect("nonempty"), 1.0 / etas.len() as f64))
}

/// `L` draws of half-normal noise for `k` knots.
pub fn draw_eta(k: usize, l: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..l)
        .map(|_| {
            (0..k)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(rng);
                    v.abs()
                })
                .collect()
        })
        .collect()
}

/// `(μ, log σ²)` of the variational distribution.
pub fn encode(x: &[f64], enc: &EncoderParams) -> Result<(Vec<f64>, Vec<f64>)> {
    check_x(x, enc.n_sites())?;
    let tape = Tape::new();
    let xv = tape.vector(x.to_vec());
    let leaf = |t: &Tensor| tape.leaf(t.clone());
    let (w1, b1, w2, b2) = (leaf(&enc.w1), leaf(&enc.b1), leaf(&enc.w2), leaf(&enc.b2));
    let (w3, b3, w4, b4) = (leaf(&enc.w3), leaf(&enc.b3), leaf(&enc.w4), leaf(&enc.b4));
    let h = tape.relu(tape.add(tape.matvec(w1, xv)?, b1)?);
    let h1 = tape.relu(tape.add(tape.matvec(w2, h)?, b2)?);
    let mu = tape.relu(tape.add(tape.matvec(w4, h1)?, b4)?);
    let lv = tape.add(tape.matvec(w3, h1)?, b3)?;
    Ok((tape.value(mu).into_data(), tape.value(lv).into_data()))
}

/// `z = μ + σ ⊙ η` with `σ = exp(max(log σ² / 2, ln 1e-6))`.
pub fn reparameterize(mu: &[f64], log_var: &[f64], eta: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(log_var)
        .zip(eta)
        .map(|((m, lv), e)| m + (0.5 * lv).max(LOG_SIGMA_FLOOR).exp() * e)
        .collect()
}

/// `(α_t, θ_t)` from a latent vector.
pub fn decode_params(z: &[f64], dec: &DecoderParams) -> Result<(f64, Vec<f64>)> {
    let k = dec.n_knots();
    if z.len() != k {
        return Err(Error::shape(format!("latent has {} entries for {k} knots", z.len())));
    }
    let tape = Tape::new();
    let leaf = |t: &Tensor| tape.leaf(t.clone());
    let zv = tape.vector(z.to_vec());
    let l = tape.relu(tape.add(tape.matvec(leaf(&dec.w5), zv)?, leaf(&dec.b5))?);
    let l1 = tape.relu(tape.add(tape.matvec(leaf(&dec.w6), l)?, leaf(&dec.b6))?);
    let theta = tape.relu(tape.add(tape.matvec(leaf(&dec.w7), l1)?, leaf(&dec.b7))?);
    let raw = tape.relu(tape.add(tape.matvec(leaf(&dec.w8), l1)?, tape.scalar(dec.b8))?);
    let alpha = super::params::squash_alpha(tape.scalar_value(raw));
    Ok((alpha, tape.value(theta).into_data()))
}

/// `y_j = Σ_k ω_kj^{1/α} z_k`.
pub fn mix_latent(z: &[f64], alpha: f64, dec: &DecoderParams) -> Vec<f64> {
    let k = dec.omega.n_knots();
    (0..dec.omega.n_sites())
        .map(|j| {
            dec.omega.row(j)[..k]
                .iter()
                .zip(z)
                .filter(|(w, _)| **w > 0.0)
                .map(|(w, z)| (w.ln() / alpha).exp() * z)
                .sum()
        })
        .collect()
}

/// `log p(x | z)`: independent Fréchet margins with shape `1/α₀` and scale
/// `τ y_j^{α₀}`.
pub fn decoder_loglik(x: &[f64], z: &[f64], dec: &DecoderParams) -> Result<f64> {
    check_x(x, dec.omega.n_sites())?;
    let (alpha, _) = decode_params(z, dec)?;
    let y = mix_latent(z, alpha, dec);
    let tape = Tape::new();
    let yv = tape.vector(y);
    let (lt, la) = (tape.scalar(dec.log_tau), tape.scalar(dec.log_alpha0));
    let v = tape.frechet_loglik(x, yv, lt, la)?;
    Ok(tape.scalar_value(v))
}

/// ELBO of one replicate at fixed noise draws, with its gradient in
/// [`PARAM_NAMES`] order.
pub fn elbo_and_grad(x: &[f64], state: &VaeState, etas: &[Vec<f64>]) -> Result<(f64, Vec<Tensor>)> {
    check_x(x, state.n_sites())?;
    let tape = Tape::new();
    let p = ParamVars::new(&tape, &state.encoder, &state.decoder);
    let root = elbo_on_tape(&tape, &p, x, etas)?;
    let grads = tape.backward(root)?;
    Ok((tape.scalar_value(root), p.collect(&tape, &grads)))
}

/// ELBO of one replicate at fixed noise draws.
pub fn elbo_at(x: &[f64], state: &VaeState, etas: &[Vec<f64>]) -> Result<f64> {
    check_x(x, state.n_sites())?;
    let tape = Tape::new();
    let p = ParamVars::new(&tape, &state.encoder, &state.decoder);
    let root = elbo_on_tape(&tape, &p, x, etas)?;
    Ok(tape.scalar_value(root))
}

/// Monte Carlo ELBO of one replicate with `l` fresh noise draws.
pub fn elbo(x: &[f64], state: &VaeState, rng: &mut Rng, l: usize) -> Result<f64> {
    if l == 0 {
        return Err(Error::Contract("at least one Monte Carlo draw is required".into()));
    }
    let etas = draw_eta(state.n_knots(), l, rng);
    elbo_at(x, state, &etas)
}
