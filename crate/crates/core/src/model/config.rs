use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

/// Architecture of one encoder → slot attention → predictor → decoder stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input frame side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    /// Width of the frozen patch MLP.
    pub encoder_hidden: usize,
    /// Feature width `m` seen by slot attention and reconstructed by the decoder.
    pub feature_dim: usize,
    pub slot_dim: usize,
    pub num_slots: usize,
    pub sa_iterations: usize,
    pub sa_mlp_hidden: usize,
    pub predictor_layers: usize,
    pub predictor_heads: usize,
    pub predictor_ff: usize,
    pub decoder_hidden: usize,
    /// Number of linear layers in the decoder MLP.
    pub decoder_layers: usize,
    pub pos_dim: usize,
    /// Standard deviation of the Gaussian noise added to the learned slot init.
    pub slot_noise: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::teacher()
    }
}

impl ModelConfig {
    /// Wide default: stands in for the large frozen backbone.
    pub fn teacher() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            encoder_hidden: 256,
            feature_dim: 96,
            slot_dim: 32,
            num_slots: 5,
            sa_iterations: 2,
            sa_mlp_hidden: 64,
            predictor_layers: 1,
            predictor_heads: 4,
            predictor_ff: 64,
            decoder_hidden: 64,
            decoder_layers: 3,
            pos_dim: 16,
            slot_noise: 0.1,
        }
    }

    /// Narrow default sharing the slot space, predictor and decoder layout with [`Self::teacher`].
    pub fn student() -> Self {
        Self {
            encoder_hidden: 64,
            feature_dim: 32,
            ..Self::teacher()
        }
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch positions `P`.
    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Per-entry scale of the frozen features: `1/sqrt(P·m)`, so a frame's
    /// features have unit total energy.
    pub fn feature_scale(&self) -> f64 {
        1.0 / ((self.num_patches() * self.feature_dim) as f64).sqrt()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_slots < 2 {
            return bad(format!("need at least 2 slots, got {}", self.num_slots));
        }
        if self.sa_iterations < 1 {
            return bad("slot attention needs at least one iteration".into());
        }
        if self.predictor_heads == 0 || self.slot_dim % self.predictor_heads != 0 {
            return bad(format!(
                "slot dim {} not divisible by {} heads",
                self.slot_dim, self.predictor_heads
            ));
        }
        if self.predictor_layers < 1 {
            return bad("predictor needs at least one layer".into());
        }
        if self.decoder_layers < 2 {
            return bad("decoder needs at least two linear layers".into());
        }
        let widths = [
            self.encoder_hidden,
            self.feature_dim,
            self.slot_dim,
            self.sa_mlp_hidden,
            self.predictor_ff,
            self.decoder_hidden,
            self.pos_dim,
        ];
        if widths.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if !(self.slot_noise >= 0.0) {
            return bad("slot noise must be non-negative".into());
        }
        Ok(())
    }
}
