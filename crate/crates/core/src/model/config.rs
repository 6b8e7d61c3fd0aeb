use crate::attention::SamplingSchedule;
use crate::error::{CoreError, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Transformer width `C`.
    pub hidden: usize,
    pub heads: usize,
    /// Encoded feature levels `L`.
    pub levels: usize,
    /// Clip length `τ`.
    pub frames: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub queries_per_frame: usize,
    pub num_classes: usize,
    pub k_curr: usize,
    pub k_temp: usize,
    pub ffn_hidden: usize,
    /// Channels of the backbone features fed to the model.
    pub input_channels: usize,
    pub mask_width: usize,
    pub mdc_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            levels: 3,
            frames: 6,
            enc_layers: 2,
            dec_layers: 3,
            queries_per_frame: 10,
            num_classes: 3,
            k_curr: 4,
            k_temp: 4,
            ffn_hidden: 256,
            input_channels: 16,
            mask_width: 32,
            mdc_kernel: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Config(m));
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.hidden % 2 != 0 {
            return fail("hidden size must be even for the sine encoding".into());
        }
        if self.levels == 0 || self.frames == 0 || self.queries_per_frame == 0 {
            return fail("levels, frames and queries_per_frame must be positive".into());
        }
        if self.dec_layers == 0 {
            return fail("at least one decoder layer is required".into());
        }
        if self.mdc_kernel % 2 == 0 {
            return fail("mdc_kernel must be odd".into());
        }
        if self.mask_width == 0 || self.ffn_hidden == 0 || self.input_channels == 0 {
            return fail("layer widths must be positive".into());
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<SamplingSchedule> {
        SamplingSchedule::new(self.frames, self.levels, self.k_curr, self.k_temp)
    }

    /// `N = τ * queries_per_frame`.
    pub fn num_queries(&self) -> usize {
        self.frames * self.queries_per_frame
    }

    /// Class logits per query, including the trailing "no object" class.
    pub fn num_logits(&self) -> usize {
        self.num_classes + 1
    }
}
