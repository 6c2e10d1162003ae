//! Closed-form parameter and FLOP counts.

use super::{ModelConfig, ParamCount};

fn linear(fan_in: usize, fan_out: usize, bias: bool) -> usize {
    fan_in * fan_out + if bias { fan_out } else { 0 }
}

/// Parameter totals derived from the architecture formula alone.
pub fn param_count(cfg: &ModelConfig) -> ParamCount {
    let (m, d, eh) = (cfg.feature_dim, cfg.slot_dim, cfg.encoder_hidden);
    let frozen = linear(cfg.patch_len(), eh, true) + linear(eh, eh, true) + linear(eh, m, true);

    let projection = 2 * linear(m, m, true) + 2 * m + 4 * m;
    let slot_attention = 2 * m
        + 2 * linear(m, d, false)
        + 2 * d
        + linear(d, d, false)
        + 2 * linear(d, 3 * d, true)
        + 2 * d
        + linear(d, cfg.sa_mlp_hidden, true)
        + linear(cfg.sa_mlp_hidden, d, true)
        + cfg.num_slots * d;
    let predictor = cfg.predictor_layers
        * (4 * d + 4 * linear(d, d, true) + linear(d, cfg.predictor_ff, true) + linear(cfg.predictor_ff, d, true));
    let h = cfg.decoder_hidden;
    let decoder = cfg.num_patches() * cfg.pos_dim
        + linear(d + cfg.pos_dim, h, true)
        + (cfg.decoder_layers - 2) * linear(h, h, true)
        + linear(h, m + 1, true);

    ParamCount {
        trainable: projection + slot_attention + predictor + decoder,
        frozen,
    }
}

/// Multiply-adds of every matmul in one forward pass over a `frames`-long video of
/// `height×width` frames.
pub fn matmul_madds(cfg: &ModelConfig, height: usize, width: usize, frames: usize) -> u64 {
    let p = (height / cfg.patch_size) * (width / cfg.patch_size);
    let (m, d, eh, n) = (cfg.feature_dim, cfg.slot_dim, cfg.encoder_hidden, cfg.num_slots);
    let h = cfg.decoder_hidden;

    let encoder = p * cfg.patch_len() * eh + p * eh * eh + p * eh * m + 2 * p * m * m + p * 4 * m;
    let per_iteration = n * d * d            // queries
        + 2 * n * d * p                      // logits and weighted means
        + 2 * n * d * 3 * d                  // GRU
        + 2 * n * d * cfg.sa_mlp_hidden;     // residual MLP
    let slot_attention = 2 * p * m * d + cfg.sa_iterations * per_iteration;
    let decoder = n * d * h
        + p * cfg.pos_dim * h
        + (cfg.decoder_layers - 2) * n * p * h * h
        + n * p * h * (m + 1);
    let predictor = cfg.predictor_layers * (4 * n * d * d + 2 * n * n * d + 2 * n * d * cfg.predictor_ff);

    let per_frame = (encoder + slot_attention + decoder) as u64;
    frames as u64 * per_frame + frames.saturating_sub(1) as u64 * predictor as u64
}

/// FLOPs of one video forward, counted as two per multiply-add.
pub fn flop_count(cfg: &ModelConfig, height: usize, width: usize, frames: usize) -> u64 {
    2 * matmul_madds(cfg, height, width, frames)
}
