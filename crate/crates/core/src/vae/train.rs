//! Stochastic gradient ascent with momentum on the summed ELBO.

use std::io::Write;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::grad_tape::Tensor;
use crate::seed::{child_rng, derive_seed};

use super::network::{draw_eta, elbo_and_grad};
use super::params::{VaeState, OMEGA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Target learning rate reached by the warmup.
    pub learning_rate: f64,
    /// Warmup starts here and grows by `warmup_factor` every `warmup_every`
    /// iterations until it reaches `learning_rate`.
    pub initial_learning_rate: f64,
    pub warmup_factor: f64,
    pub warmup_every: usize,
    pub momentum: f64,
    /// Stop once the means of the last two 100-iteration ELBO windows differ
    /// by at most this much.
    pub tolerance: f64,
    /// Replicates per step; `None` uses all of them.
    pub minibatch: Option<usize>,
    pub mc_samples: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub max_retries: usize,
    /// The gradient is rescaled to at most this joint L2 norm before the
    /// momentum update.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            initial_learning_rate: 1e-12,
            warmup_factor: 10.0,
            warmup_every: 100,
            momentum: 0.9,
            tolerance: 1e-3,
            minibatch: None,
            mc_samples: 1,
            max_iters: 2000,
            seed: 0,
            max_retries: 5,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_t: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::domain("momentum must lie in [0, 1)"));
        }
        if self.mc_samples == 0 {
            return Err(Error::domain("mc_samples must be at least 1"));
        }
        if let Some(m) = self.minibatch {
            if m == 0 || m > n_t {
                return Err(Error::domain(format!("minibatch size {m} must lie in 1..={n_t}")));
            }
        }
        if !(self.learning_rate > 0.0 && self.initial_learning_rate > 0.0) {
            return Err(Error::domain("learning rates must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::domain("clip_norm must be positive"));
            }
        }
        if !(self.warmup_factor >= 1.0) || self.warmup_every == 0 {
            return Err(Error::domain("warmup must not shrink the learning rate"));
        }
        Ok(())
    }

    /// Scheduled learning rate at iteration `it`.
    pub fn learning_rate_at(&self, it: usize) -> f64 {
        let steps = (it / self.warmup_every) as i32;
        (self.initial_learning_rate * self.warmup_factor.powi(steps)).min(self.learning_rate)
    }
}

/// `v ← ζ v + ν g`.
pub fn momentum_update(velocity: &mut [Tensor], grad: &[Tensor], momentum: f64, lr: f64) {
    for (v, g) in velocity.iter_mut().zip(grad) {
        v.data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(v, g)| *v = momentum * *v + lr * g);
    }
}

/// Rescales the whole gradient to joint L2 norm at most `max_norm`.
pub fn clip_gradients(grad: &mut [Tensor], max_norm: f64) {
    let n = grad
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if n > max_norm {
        let s = max_norm / n;
        grad.iter_mut()
            .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
}

/// True when the last 100 logged values average within `tol` of the 100 before.
pub fn should_stop(log: &[f64], tol: f64) -> bool {
    let n = log.len();
    if n < 200 {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&log[n - 200..n - 100]) - mean(&log[n - 100..])).abs() <= tol
}

/// Summed ELBO and gradient over the listed replicates. Each replicate draws
/// its noise from a stream keyed by `(step_seed, t)`; terms are summed in the
/// order of `batch` so the result does not depend on scheduling.
pub fn batch_elbo_grad(
    fields: &Field,
    state: &VaeState,
    batch: &[usize],
    mc_samples: usize,
    step_seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let k = state.n_knots();
    let parts: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|&t| {
            let mut rng = child_rng(step_seed, "eta", t as u64);
            let etas = draw_eta(k, mc_samples, &mut rng);
            elbo_and_grad(fields.replicate(t), state, &etas)
        })
        .collect::<Result<_>>()?;
    let mut it = parts.into_iter();
    let (mut total, mut grad) = it.next().ok_or_else(|| Error::Contract("empty minibatch".into()))?;
    for (e, g) in it {
        total += e;
        for (a, b) in grad.iter_mut().zip(&g) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(a, b)| *a += b);
        }
    }
    Ok((total, grad))
}

pub fn train(fields: &Field, config: &TrainConfig, state: VaeState) -> Result<VaeState> {
    train_with_log(fields, config, state, None)
}

/// As [`train`], writing `iter,elbo,lr` lines to `log` when given.
pub fn train_with_log(
    fields: &Field,
    config: &TrainConfig,
    mut state: VaeState,
    mut log: Option<&mut dyn Write>,
) -> Result<VaeState> {
    config.validate(fields.n_t())?;
    if fields.n_s() != state.n_sites() {
        return Err(Error::shape(format!(
            "field has {} sites, the model {}",
            fields.n_s(),
            state.n_sites()
        )));
    }
    if fields.values().iter().any(|v| !(*v > 0.0)) {
        return Err(Error::domain("training data must be positive"));
    }
    let io_err = |e: std::io::Error| Error::Io {
        path: "<training log>".into(),
        source: e,
    };
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "iter,elbo,lr").map_err(io_err)?;
    }
    let n_t = fields.n_t();
    let m = config.minibatch.unwrap_or(n_t);
    let mut lr_scale = 1.0;
    let mut retries = 0;
    let mut it = 0;
    let mut prev: Option<(Vec<Tensor>, Vec<Tensor>)> = None;
    while it < config.max_iters {
        let global = state.iterations + it;
        let mut step_seed = derive_seed(config.seed, "step", global as u64);
        if retries > 0 {
            // fresh noise on a retry: a single unlucky draw near zero can
            // overflow the latent prior regardless of the step size
            step_seed = derive_seed(step_seed, "retry", retries as u64);
        }
        let batch: Vec<usize> = if m == n_t {
            (0..n_t).collect()
        } else {
            let mut rng = child_rng(step_seed, "batch", 0);
            let mut b = sample(&mut rng, n_t, m).into_vec();
            b.sort_unstable();
            b
        };
        let lr = config.learning_rate_at(it) * lr_scale;
        let outcome = batch_elbo_grad(fields, &state, &batch, config.mc_samples, step_seed);
        let failure = match &outcome {
            Ok((e, g)) if e.is_finite() && g.iter().all(|t| t.data().iter().all(|v| v.is_finite())) => None,
            Ok((e, _)) => Some(format!("ELBO {e}")),
            Err(e) if e.is_numerical() || matches!(e, Error::Domain(_)) => Some(e.to_string()),
            Err(_) => return Err(outcome.err().expect("error branch")),
        };
        if let Some(why) = failure {
            retries += 1;
            let Some((prev_p, prev_v)) = prev.take().filter(|_| retries <= config.max_retries) else {
                return Err(Error::Numerical(format!(
                    "training diverged at iteration {global} (learning rate {lr:.3e}, {retries} retries): {why}"
                )));
            };
            // undo the last step and redo it with half the learning rate; the
            // velocity is linear in the rate, so it is halved as well
            state.set_params(prev_p)?;
            state.velocity = prev_v;
            for v in &mut state.velocity {
                v.data_mut().iter_mut().for_each(|x| *x *= 0.5);
            }
            state.elbo_log.pop();
            lr_scale *= 0.5;
            it -= 1;
            continue;
        }
        let (elbo, mut grad) = outcome.expect("checked");
        if prev.is_some() {
            retries = 0;
        }
        state.elbo_log.push(elbo);
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{global},{elbo},{lr:e}").map_err(io_err)?;
        }
        if should_stop(&state.elbo_log, config.tolerance) {
            it += 1;
            break;
        }
        if !state.decoder.train_basis {
            grad[OMEGA].data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        if let Some(c) = config.clip_norm {
            clip_gradients(&mut grad, c);
        }
        prev = Some((state.params(), state.velocity.clone()));
        momentum_update(&mut state.velocity, &grad, config.momentum, lr);
        let mut p = state.params();
        for (p, v) in p.iter_mut().zip(&state.velocity) {
            p.data_mut().iter_mut().zip(v.data()).for_each(|(p, v)| *p += v);
        }
        state.set_params(p)?;
        it += 1;
    }
    state.iterations += it;
    Ok(state)
}
