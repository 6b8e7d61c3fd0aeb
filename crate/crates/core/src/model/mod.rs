//! Clip-level encoder/decoder with a mask head.

mod config;
mod decoder;
mod encoder;
mod encoding;

pub use config::ModelConfig;
pub use decoder::{
    align_instance_references, broadcast_references, predict_heads, query_frame, query_slot, refine_boxes, Decoder,
    DecoderLayer, DecoderLayerOutput, LayerInputs, PredictionHeads, SIGMOID_EPS,
};
pub use encoder::{encode_clip, pixel_references, Encoder, EncoderLayer};
pub use encoding::{sine_table, PositionalEncoding};

use clipseg_tensor::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionTrace;
use crate::clip::{ClipLayout, FeatureClip};
use crate::error::{shape_err, Result};
use crate::mask::{filter_positive, MaskHead};
use crate::nn::{init_linear, linear};
use crate::params::{Bound, ParamStore};

/// Backbone features of one clip: the `L` levels the transformer encodes and
/// the finer un-encoded map used only by the mask head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipInput {
    pub features: FeatureClip,
    /// `[C_in, τ, H_raw, W_raw]`
    pub raw: Tensor,
}

/// Forward results for one clip.
pub struct ModelOutput<'t> {
    /// Encoded tokens `[P, C]`.
    pub memory: Var<'t>,
    /// One entry per decoder layer; the last is the model prediction.
    pub layers: Vec<DecoderLayerOutput<'t>>,
    pub layout: ClipLayout,
}

impl<'t> ModelOutput<'t> {
    pub fn last(&self) -> &DecoderLayerOutput<'t> {
        self.layers.last().expect("decoder has at least one layer")
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub pos: PositionalEncoding,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub mask_head: MaskHead,
}

impl Model {
    pub const INPUT_PROJ: &'static str = "input_proj";

    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule()?;
        let c = cfg.hidden;
        let encoder = Encoder::new(cfg.enc_layers, c, cfg.heads, cfg.ffn_hidden, schedule)?;
        let layers = (0..cfg.dec_layers)
            .map(|i| DecoderLayer::new(format!("decoder.{i}"), c, cfg.heads, cfg.ffn_hidden, schedule))
            .collect::<Result<_>>()?;
        let decoder = Decoder {
            layers,
            heads: PredictionHeads {
                hidden: c,
                num_logits: cfg.num_logits(),
            },
            hidden: c,
            frames: cfg.frames,
            queries_per_frame: cfg.queries_per_frame,
        };
        let mask_head = MaskHead {
            hidden: c,
            heads: cfg.heads,
            levels: cfg.levels,
            width: cfg.mask_width,
            raw_channels: cfg.input_channels,
            kernel: cfg.mdc_kernel,
        };
        let pos = PositionalEncoding {
            hidden: c,
            frames: cfg.frames,
            levels: cfg.levels,
        };
        Ok(Self {
            cfg,
            pos,
            encoder,
            decoder,
            mask_head,
        })
    }

    /// Freshly initialized parameters; deterministic in `seed`.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_linear(&mut store, Self::INPUT_PROJ, self.cfg.input_channels, self.cfg.hidden, &mut rng);
        self.pos.init(&mut store);
        self.encoder.init(&mut store, &mut rng);
        self.decoder.init(&mut store, &mut rng);
        self.mask_head.init(&mut store, &mut rng);
        store
    }

    fn check_input(&self, input: &ClipInput) -> Result<()> {
        let f = &input.features;
        if f.channels() != self.cfg.input_channels || f.layout().levels() != self.cfg.levels {
            return Err(shape_err(format!(
                "clip has {} channels and {} levels; model expects {} and {}",
                f.channels(),
                f.layout().levels(),
                self.cfg.input_channels,
                self.cfg.levels
            )));
        }
        Ok(())
    }

    /// Projected input tokens and their positional encoding.
    fn embed<'t>(&self, p: &Bound<'t>, input: &ClipInput, tape: &'t clipseg_tensor::Tape) -> Result<(Var<'t>, Var<'t>)> {
        self.check_input(input)?;
        let tokens = tape.constant(input.features.to_tokens());
        let src = linear(p, Self::INPUT_PROJ, tokens)?;
        let pos = self.pos.tokens(p, input.features.layout())?;
        Ok((src, pos))
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, tape: &'t clipseg_tensor::Tape, input: &ClipInput) -> Result<ModelOutput<'t>> {
        let (src, pos) = self.embed(p, input, tape)?;
        let layout = input.features.layout().clone();
        let memory = self.encoder.forward(p, src, pos, &layout)?;
        let temporal = p.get(PositionalEncoding::TEMPORAL)?;
        let layers = self.decoder.forward(p, memory, temporal, &layout)?;
        Ok(ModelOutput { memory, layers, layout })
    }

    /// Forward pass that also returns the decoder's detached layer inputs.
    pub fn forward_recorded<'t>(
        &self,
        p: &Bound<'t>,
        tape: &'t clipseg_tensor::Tape,
        input: &ClipInput,
    ) -> Result<(ModelOutput<'t>, Vec<LayerInputs>)> {
        let (src, pos) = self.embed(p, input, tape)?;
        let layout = input.features.layout().clone();
        let memory = self.encoder.forward(p, src, pos, &layout)?;
        let temporal = p.get(PositionalEncoding::TEMPORAL)?;
        let (layers, inputs) = self.decoder.forward_recorded(p, memory, temporal, &layout)?;
        Ok((ModelOutput { memory, layers, layout }, inputs))
    }

    /// Forward pass with the decoder's detached inputs held at `frozen`.
    pub fn forward_frozen<'t>(
        &self,
        p: &Bound<'t>,
        tape: &'t clipseg_tensor::Tape,
        input: &ClipInput,
        frozen: &[LayerInputs],
    ) -> Result<ModelOutput<'t>> {
        let (src, pos) = self.embed(p, input, tape)?;
        let layout = input.features.layout().clone();
        let memory = self.encoder.forward(p, src, pos, &layout)?;
        let temporal = p.get(PositionalEncoding::TEMPORAL)?;
        let layers = self.decoder.forward_frozen(p, memory, temporal, &layout, frozen)?;
        Ok(ModelOutput { memory, layers, layout })
    }

    /// Mask logits `[queries.len(), H_raw, W_raw]` for the listed queries of
    /// decoder layer `layer`, each on its own frame.
    pub fn masks<'t>(
        &self,
        p: &Bound<'t>,
        out: &ModelOutput<'t>,
        layer: usize,
        queries: &[usize],
        raw: &Tensor,
    ) -> Result<Var<'t>> {
        let emb = filter_positive(out.layers[layer].embeddings, queries)?;
        let frames: Vec<usize> = queries
            .iter()
            .map(|&q| query_frame(q, self.cfg.queries_per_frame))
            .collect();
        let maps = self.mask_head.attention_maps(p, emb, out.memory, &out.layout, &frames)?;
        self.mask_head.forward(p, out.memory, &out.layout, raw, &maps, &frames)
    }

    /// Sampling locations and weights of every encoder and decoder layer.
    pub fn trace<'t>(
        &self,
        p: &Bound<'t>,
        tape: &'t clipseg_tensor::Tape,
        input: &ClipInput,
    ) -> Result<(Vec<AttentionTrace>, Vec<AttentionTrace>)> {
        let (src, pos) = self.embed(p, input, tape)?;
        let layout = input.features.layout().clone();
        let (x, enc) = self.encoder.trace(p, src, pos, &layout)?;
        let temporal = p.get(PositionalEncoding::TEMPORAL)?;
        let dec = self.decoder.trace(p, x, temporal, &layout)?;
        Ok((enc, dec))
    }
}
