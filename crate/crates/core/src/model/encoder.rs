use clipseg_tensor::{Tensor, Var};
use rand::Rng;

use crate::attention::{AttentionTrace, DeformAttn, SamplingSchedule};
use crate::clip::{ClipLayout, FeatureClip};
use crate::error::Result;
use crate::nn::{ffn, init_ffn, init_layer_norm, layer_norm};
use crate::params::{Bound, ParamStore};

/// Self-attention over all pixels of all levels and frames of a clip, with
/// each sublayer reading a normalized copy of the residual stream.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub prefix: String,
    pub attn: DeformAttn,
    pub ffn_hidden: usize,
}

impl EncoderLayer {
    pub fn new(prefix: impl Into<String>, hidden: usize, heads: usize, ffn_hidden: usize, schedule: SamplingSchedule) -> Result<Self> {
        let prefix = prefix.into();
        Ok(Self {
            attn: DeformAttn::new(format!("{prefix}.attn"), hidden, heads, schedule)?,
            prefix,
            ffn_hidden,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.attn.hidden;
        self.attn.init(store, rng);
        init_layer_norm(store, &format!("{}.norm1", self.prefix), c);
        init_ffn(store, &format!("{}.ffn", self.prefix), c, self.ffn_hidden, rng);
        init_layer_norm(store, &format!("{}.norm2", self.prefix), c);
    }

    fn attention_input<'t>(&self, p: &Bound<'t>, src: Var<'t>) -> Result<Var<'t>> {
        layer_norm(p, &format!("{}.norm1", self.prefix), src)
    }

    /// Sampling locations and weights of this layer's attention.
    pub fn trace<'t>(
        &self,
        p: &Bound<'t>,
        src: Var<'t>,
        pos: Var<'t>,
        frames: &[usize],
        refs: &Tensor,
        layout: &ClipLayout,
    ) -> Result<AttentionTrace> {
        self.attn.trace(p, self.attention_input(p, src)?.add(pos)?, frames, refs, layout)
    }

    /// `src` and `pos` are `[P, C]` clip tokens.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        src: Var<'t>,
        pos: Var<'t>,
        frames: &[usize],
        refs: &Tensor,
        layout: &ClipLayout,
    ) -> Result<Var<'t>> {
        let h = self.attention_input(p, src)?;
        let attended = self.attn.forward(p, h.add(pos)?, frames, refs, h, layout)?;
        let x = src.add(attended)?;
        let h = layer_norm(p, &format!("{}.norm2", self.prefix), x)?;
        Ok(x.add(ffn(p, &format!("{}.ffn", self.prefix), h)?)?)
    }
}

/// Frame of every token and its reference `[P, τ, 2]`: the token's own pixel
/// centre, repeated on every frame.
pub fn pixel_references(layout: &ClipLayout) -> (Vec<usize>, Tensor) {
    let coords = layout.token_coords();
    let t = layout.frames();
    let mut refs = Vec::with_capacity(coords.len() * t * 2);
    for &(_, l, y, x) in &coords {
        let (h, w) = layout.dims()[l];
        let r = [(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64];
        for _ in 0..t {
            refs.extend(r);
        }
    }
    let frames = coords.iter().map(|c| c.0).collect();
    (frames, Tensor::new(vec![coords.len(), t, 2], refs).expect("reference shape"))
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub const NORM: &'static str = "encoder.norm";

    pub fn new(n: usize, hidden: usize, heads: usize, ffn_hidden: usize, schedule: SamplingSchedule) -> Result<Self> {
        let layers = (0..n)
            .map(|i| EncoderLayer::new(format!("encoder.{i}"), hidden, heads, ffn_hidden, schedule))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in &self.layers {
            l.init(store, rng);
        }
        if !self.layers.is_empty() {
            init_layer_norm(store, Self::NORM, self.layers[0].attn.hidden);
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, src: Var<'t>, pos: Var<'t>, layout: &ClipLayout) -> Result<Var<'t>> {
        Ok(self.run(p, src, pos, layout, None)?)
    }

    /// The encoded tokens and every layer's attention trace.
    pub fn trace<'t>(&self, p: &Bound<'t>, src: Var<'t>, pos: Var<'t>, layout: &ClipLayout) -> Result<(Var<'t>, Vec<AttentionTrace>)> {
        let mut traces = Vec::new();
        let out = self.run(p, src, pos, layout, Some(&mut traces))?;
        Ok((out, traces))
    }

    fn run<'t>(
        &self,
        p: &Bound<'t>,
        src: Var<'t>,
        pos: Var<'t>,
        layout: &ClipLayout,
        mut traces: Option<&mut Vec<AttentionTrace>>,
    ) -> Result<Var<'t>> {
        if self.layers.is_empty() {
            return Ok(src);
        }
        let (frames, refs) = pixel_references(layout);
        let mut x = src;
        for layer in &self.layers {
            if let Some(tr) = traces.as_deref_mut() {
                tr.push(layer.trace(p, x, pos, &frames, &refs, layout)?);
            }
            x = layer.forward(p, x, pos, &frames, &refs, layout)?;
        }
        layer_norm(p, Self::NORM, x)
    }
}

/// Runs the encoder on a clip whose channel count equals the model width and
/// returns the encoded clip with the same shapes.
pub fn encode_clip(p: &Bound<'_>, encoder: &Encoder, pos: Var<'_>, clip: &FeatureClip) -> Result<FeatureClip> {
    let tape = pos.tape();
    let src = tape.constant(clip.to_tokens());
    let out = encoder.forward(p, src, pos, clip.layout())?;
    FeatureClip::from_tokens(clip.layout(), &out.value())
}
