use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strides of the four neck branches, finest first.
pub const NECK_STRIDES: [usize; 4] = [4, 8, 16, 32];
/// Spatial inputs are padded to a multiple of the coarsest stride.
pub const PAD_MULTIPLE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            width: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Resolution the model is trained at. Inputs of any size are accepted;
    /// they are zero-padded, never resized.
    pub image_size: usize,
    pub num_queries: usize,
    /// Decoder width `D`, shared by all pyramid levels.
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub pixel_decoder_layers: usize,
    pub disk_radius: usize,
    pub encoder: EncoderConfig,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_queries: 7,
            hidden_dim: 32,
            num_heads: 4,
            decoder_layers: 9,
            ffn_dim: 64,
            pixel_decoder_layers: 1,
            disk_radius: 5,
            encoder: EncoderConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let e = &self.encoder;
        if self.num_queries == 0 {
            return fail("num_queries must be at least 1".into());
        }
        if self.decoder_layers == 0 {
            return fail("decoder_layers must be at least 1".into());
        }
        if self.hidden_dim == 0 || self.hidden_dim % 2 != 0 {
            return fail(format!("hidden_dim must be even, got {}", self.hidden_dim));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "num_heads {} must divide hidden_dim {}",
                self.num_heads, self.hidden_dim
            ));
        }
        if e.width == 0 || e.width % 2 != 0 || e.heads == 0 || e.width % e.heads != 0 {
            return fail(format!(
                "encoder width {} must be even and divisible by its {} heads",
                e.width, e.heads
            ));
        }
        if !e.patch_size.is_power_of_two() || e.patch_size > PAD_MULTIPLE {
            return fail(format!(
                "patch_size must be a power of two no larger than {PAD_MULTIPLE}, got {}",
                e.patch_size
            ));
        }
        if e.mlp_ratio == 0 || self.ffn_dim == 0 {
            return fail("feed-forward widths must be positive".into());
        }
        if self.disk_radius == 0 {
            return fail("disk_radius must be at least 1".into());
        }
        if self.image_size == 0 || self.image_size % PAD_MULTIPLE != 0 {
            return fail(format!(
                "image_size must be a positive multiple of {PAD_MULTIPLE}, got {}",
                self.image_size
            ));
        }
        Ok(())
    }
}

/// Rounds a spatial size up to the padding multiple.
pub fn padded(n: usize) -> usize {
    n.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE
}
