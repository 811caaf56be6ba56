//! Variational autoencoder emulator: the encoder maps a replicate to a
//! half-normal variational law over the latent tilted positive-stable
//! variables, the decoder maps a latent draw to the per-replicate stability
//! and tilting parameters, and the process is reassembled from both.

mod emulate;
mod init;
mod network;
mod params;
mod train;

pub use emulate::{emulate, emulate_prior, predict_holdout, HoldoutPrediction};
pub use init::{init_params, init_params_with, projection_matrix, InitOptions};
pub use network::{
    decode_on_tape, decode_params, decoder_loglik, draw_eta, elbo, elbo_and_grad, elbo_at, elbo_on_tape, encode,
    encode_on_tape, mix_latent, reparameterize, ParamVars,
};
pub use params::{
    flatten, squash_alpha, DecoderParams, EncoderParams, InitReport, VaeState, ALPHA_MIN, ALPHA_SPAN, ALPHA_SLOPE, ALPHA_TOP, ALPHA_EDGE,
    LOG_SIGMA_FLOOR, PARAM_NAMES, STATE_VERSION,
};
pub use train::{batch_elbo_grad, clip_gradients, momentum_update, should_stop, train, train_with_log, TrainConfig};
