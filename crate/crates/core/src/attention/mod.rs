//! Dot-product and deformable attention.

mod deform;
mod mha;
mod sampler;
mod schedule;

pub use deform::{deformable_attention, scale_reference, AttentionTrace, DeformAttn};
pub use mha::{multi_head_attention, MultiHeadAttention};
pub use sampler::{count_samples, deformable_sample, SamplerCall};
pub use schedule::{SampleTarget, SamplingSchedule};
