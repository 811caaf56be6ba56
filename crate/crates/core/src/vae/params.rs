use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad_tape::Tensor;
use crate::spatial_basis::{BasisMatrix, KnotConfig};

/// Lower end of the range of the per-replicate stability parameter.
pub const ALPHA_MIN: f64 = 0.02;
/// Width of that range; `α_t ∈ (0.02, 0.98)`.
pub const ALPHA_SPAN: f64 = 0.96;
/// Floor on `log σ` of the variational distribution.
pub const LOG_SIGMA_FLOOR: f64 = -13.815510557964274; // ln 1e-6

/// Smooth map from the nonnegative head output onto `(0.02, 0.98)`.
/// Affine in `e^{-raw}`; both ends are pulled in by `ALPHA_EDGE` so that
/// `raw = 0` and saturated heads stay strictly inside the interval.
pub fn squash_alpha(raw: f64) -> f64 {
    ALPHA_TOP - ALPHA_SLOPE * (-raw).exp()
}

/// Relative margin kept from each end of the α range.
pub const ALPHA_EDGE: f64 = 1e-9;
/// Supremum of the squashed α.
pub const ALPHA_TOP: f64 = ALPHA_MIN + ALPHA_SPAN * (1.0 - ALPHA_EDGE);
/// Coefficient of `e^{-raw}` in the squash.
pub const ALPHA_SLOPE: f64 = ALPHA_SPAN * (1.0 - 2.0 * ALPHA_EDGE);

/// Parameter names in the order used by gradients and velocities.
pub const PARAM_NAMES: [&str; 19] = [
    "w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4", "w5", "b5", "w6", "b6", "w7", "b7", "w8", "b8",
    "log_tau", "log_alpha0", "omega",
];

/// Index of `omega` in [`PARAM_NAMES`].
pub const OMEGA: usize = 18;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
    pub w4: Tensor,
    pub b1: Tensor,
    pub b2: Tensor,
    pub b3: Tensor,
    pub b4: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub w5: Tensor,
    pub w6: Tensor,
    pub w7: Tensor,
    /// `1 x K` head for the stability parameter
    pub w8: Tensor,
    pub b5: Tensor,
    pub b6: Tensor,
    pub b7: Tensor,
    pub b8: f64,
    pub log_tau: f64,
    pub log_alpha0: f64,
    pub omega: BasisMatrix,
    /// Knots behind `omega`, needed to predict at new sites.
    pub knots: Option<KnotConfig>,
    pub train_basis: bool,
}

impl DecoderParams {
    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn alpha0(&self) -> f64 {
        self.log_alpha0.exp()
    }

    pub fn omega_tensor(&self) -> Tensor {
        Tensor::new(self.omega.n_sites(), self.omega.n_knots(), self.omega.weights().to_vec())
            .expect("basis matrix has consistent shape")
    }
}

fn identity(k: usize) -> Tensor {
    Tensor::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.0 })
}

fn filled(k: usize, v: f64) -> Tensor {
    Tensor::vector(vec![v; k])
}

impl EncoderParams {
    /// Starting values: identity `W2`, `W4`, zero `W3`, `b2 = 1e-5`, `b3 = -3`.
    pub fn initial(w1: Tensor) -> Self {
        let k = w1.rows();
        Self {
            w1,
            w2: identity(k),
            w3: Tensor::zeros(k, k),
            w4: identity(k),
            b1: filled(k, 0.0),
            b2: filled(k, 1e-5),
            b3: filled(k, -3.0),
            b4: filled(k, 0.0),
        }
    }

    pub fn n_knots(&self) -> usize {
        self.w1.rows()
    }

    pub fn n_sites(&self) -> usize {
        self.w1.cols()
    }
}

impl DecoderParams {
    /// Starting values: identity `W5..W7`, biases `1e-6`, zero `W8` and
    /// `b8 = ln 2` so that the initial stability parameter is 1/2.
    pub fn initial(omega: BasisMatrix, log_tau: f64, log_alpha0: f64) -> Self {
        let k = omega.n_knots();
        let knots = omega.knot_config().cloned();
        Self {
            w5: identity(k),
            w6: identity(k),
            w7: identity(k),
            w8: Tensor::zeros(1, k),
            b5: filled(k, 1e-6),
            b6: filled(k, 1e-6),
            b7: filled(k, 1e-6),
            b8: std::f64::consts::LN_2,
            log_tau,
            log_alpha0,
            omega,
            knots,
            train_basis: false,
        }
    }

    pub fn n_knots(&self) -> usize {
        self.w5.rows()
    }
}

/// All trainable quantities, flattened in [`PARAM_NAMES`] order.
pub fn flatten(enc: &EncoderParams, dec: &DecoderParams) -> Vec<Tensor> {
    vec![
        enc.w1.clone(),
        enc.b1.clone(),
        enc.w2.clone(),
        enc.b2.clone(),
        enc.w3.clone(),
        enc.b3.clone(),
        enc.w4.clone(),
        enc.b4.clone(),
        dec.w5.clone(),
        dec.b5.clone(),
        dec.w6.clone(),
        dec.b6.clone(),
        dec.w7.clone(),
        dec.b7.clone(),
        dec.w8.clone(),
        Tensor::scalar(dec.b8),
        Tensor::scalar(dec.log_tau),
        Tensor::scalar(dec.log_alpha0),
        dec.omega_tensor(),
    ]
}

/// Inverse of [`flatten`]. `omega` is projected back onto row-stochastic
/// nonnegative matrices; rows that would vanish keep their previous values.
pub fn assign(enc: &mut EncoderParams, dec: &mut DecoderParams, mut p: Vec<Tensor>) -> Result<()> {
    if p.len() != PARAM_NAMES.len() {
        return Err(Error::shape("parameter list has the wrong length"));
    }
    let old = flatten(enc, dec);
    for (i, (a, b)) in old.iter().zip(&p).enumerate() {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "parameter {} has shape {:?}, expected {:?}",
                PARAM_NAMES[i],
                b.shape(),
                a.shape()
            )));
        }
    }
    let omega = p.pop().expect("length checked");
    let scalar = |t: Tensor| t.item();
    let mut it = p.into_iter();
    let mut next = || it.next().expect("length checked");
    enc.w1 = next();
    enc.b1 = next();
    enc.w2 = next();
    enc.b2 = next();
    enc.w3 = next();
    enc.b3 = next();
    enc.w4 = next();
    enc.b4 = next();
    dec.w5 = next();
    dec.b5 = next();
    dec.w6 = next();
    dec.b6 = next();
    dec.w7 = next();
    dec.b7 = next();
    dec.w8 = next();
    dec.b8 = scalar(next());
    dec.log_tau = scalar(next());
    dec.log_alpha0 = scalar(next());
    if dec.train_basis {
        let (n, k) = omega.shape();
        let mut w = omega.into_data();
        let prev = dec.omega.weights();
        for j in 0..n {
            let row = &mut w[j * k..(j + 1) * k];
            row.iter_mut().for_each(|v| *v = v.max(0.0));
            let s: f64 = row.iter().sum();
            if s > 0.0 && s.is_finite() {
                row.iter_mut().for_each(|v| *v /= s);
            } else {
                row.copy_from_slice(&prev[j * k..(j + 1) * k]);
            }
        }
        dec.omega = BasisMatrix::from_weights(n, k, w, dec.knots.clone())?;
    }
    Ok(())
}

/// Summary of the starting-value search.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub alpha0: f64,
    pub latent_loglik: f64,
    pub ridge_projection: bool,
    pub ridge_encoder: bool,
    pub warnings: Vec<String>,
}

pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeState {
    pub version: u32,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    /// Momentum buffer in [`PARAM_NAMES`] order.
    pub velocity: Vec<Tensor>,
    pub elbo_log: Vec<f64>,
    pub iterations: usize,
    #[serde(default)]
    pub init_report: Option<InitReport>,
}

impl VaeState {
    pub fn new(encoder: EncoderParams, decoder: DecoderParams) -> Result<Self> {
        let velocity = flatten(&encoder, &decoder)
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        let s = Self {
            version: STATE_VERSION,
            encoder,
            decoder,
            velocity,
            elbo_log: Vec::new(),
            iterations: 0,
            init_report: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn n_knots(&self) -> usize {
        self.encoder.n_knots()
    }

    pub fn n_sites(&self) -> usize {
        self.encoder.n_sites()
    }

    pub fn params(&self) -> Vec<Tensor> {
        flatten(&self.encoder, &self.decoder)
    }

    pub fn set_params(&mut self, p: Vec<Tensor>) -> Result<()> {
        assign(&mut self.encoder, &mut self.decoder, p)
    }

    /// Shape and finiteness checks, used after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.version != STATE_VERSION {
            return Err(Error::Contract(format!(
                "state version {} is not supported (expected {STATE_VERSION})",
                self.version
            )));
        }
        let k = self.encoder.n_knots();
        let n_s = self.encoder.n_sites();
        let expect: [(usize, usize); 19] = [
            (k, n_s),
            (k, 1),
            (k, k),
            (k, 1),
            (k, k),
            (k, 1),
            (k, k),
            (k, 1),
            (k, k),
            (k, 1),
            (k, k),
            (k, 1),
            (k, k),
            (k, 1),
            (1, k),
            (1, 1),
            (1, 1),
            (1, 1),
            (n_s, k),
        ];
        let params = self.params();
        for (i, (t, e)) in params.iter().zip(expect).enumerate() {
            if t.shape() != e {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    PARAM_NAMES[i],
                    t.shape(),
                    e
                )));
            }
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("parameter {} is not finite", PARAM_NAMES[i])));
            }
        }
        if self.velocity.len() != params.len()
            || self.velocity.iter().zip(&params).any(|(v, p)| v.shape() != p.shape())
        {
            return Err(Error::shape("velocity does not match the parameters"));
        }
        if self.decoder.omega.max_row_sum_error() > 1e-8 {
            return Err(Error::Contract("basis rows must sum to one".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Contract(format!("state serialization failed: {e}")))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let state: VaeState =
            serde_json::from_str(s).map_err(|e| Error::Contract(format!("invalid state file: {e}")))?;
        state.validate()?;
        Ok(state)
    }
}
