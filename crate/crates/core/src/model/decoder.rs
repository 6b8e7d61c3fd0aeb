use clipseg_tensor::{inverse_sigmoid, sigmoid, Tensor, Var};
use rand::Rng;

use crate::attention::{AttentionTrace, DeformAttn, MultiHeadAttention, SamplingSchedule};
use crate::clip::ClipLayout;
use crate::error::{CoreError, Result};
use crate::nn::{ffn, init_ffn, init_layer_norm, init_linear, init_linear_zero, layer_norm, linear};
use crate::params::{Bound, ParamStore};

pub const SIGMOID_EPS: f64 = 1e-6;

/// Predictions of one decoder layer for all `N` queries.
#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerOutput<'t> {
    /// `[N, C]`
    pub embeddings: Var<'t>,
    /// `[N, 4]` normalized `(cx, cy, w, h)`
    pub boxes: Var<'t>,
    /// `[N, num_classes + 1]`
    pub class_logits: Var<'t>,
}

/// Detached inputs a decoder layer starts from: the sampling references and,
/// after the first layer, the box logits being refined.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerInputs {
    /// `[N, τ, 2]`
    pub refs: Tensor,
    /// `[N, 4]`; `None` on the first layer, which refines the learned reference.
    pub prev_logit: Option<Tensor>,
}

/// Query `q` belongs to frame `q / n` and identity slot `q % n`.
pub fn query_frame(q: usize, queries_per_frame: usize) -> usize {
    q / queries_per_frame
}

pub fn query_slot(q: usize, queries_per_frame: usize) -> usize {
    q % queries_per_frame
}

/// Refines `prev` `(cx, cy, w, h)` by `delta` in logit space. Returns the box
/// and the new reference (its centre clamped to `[0, 1]`).
pub fn refine_boxes(prev: [f64; 4], delta: [f64; 4]) -> ([f64; 4], [f64; 2]) {
    let mut b = [0.0; 4];
    for i in 0..4 {
        b[i] = sigmoid(inverse_sigmoid(prev[i], SIGMOID_EPS) + delta[i]);
    }
    (b, [b[0].clamp(0.0, 1.0), b[1].clamp(0.0, 1.0)])
}

/// Per-frame references `[N, τ, 2]`: query `(i, t)` samples frame `t'` around
/// the centre of the box predicted by query `(i, t')`.
pub fn align_instance_references(boxes: &Tensor, queries_per_frame: usize, frames: usize) -> Result<Tensor> {
    let n = queries_per_frame;
    if boxes.shape() != [n * frames, 4] {
        return Err(CoreError::Shape(format!(
            "boxes {:?} should be [{}, 4]",
            boxes.shape(),
            n * frames
        )));
    }
    let mut refs = Vec::with_capacity(n * frames * frames * 2);
    for q in 0..n * frames {
        let slot = query_slot(q, n);
        for f in 0..frames {
            let src = f * n + slot;
            refs.push(boxes.get(&[src, 0]).clamp(0.0, 1.0));
            refs.push(boxes.get(&[src, 1]).clamp(0.0, 1.0));
        }
    }
    Ok(Tensor::new(vec![n * frames, frames, 2], refs)?)
}

/// References `[N, τ, 2]` that repeat each query's own point on every frame.
pub fn broadcast_references(points: &[[f64; 2]], frames: usize) -> Tensor {
    let data = points
        .iter()
        .flat_map(|p| std::iter::repeat_n([p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)], frames).flatten())
        .collect();
    Tensor::new(vec![points.len(), frames, 2], data).expect("reference shape")
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub prefix: String,
    pub self_attn: MultiHeadAttention,
    pub cross: DeformAttn,
    pub ffn_hidden: usize,
}

impl DecoderLayer {
    pub fn new(prefix: impl Into<String>, hidden: usize, heads: usize, ffn_hidden: usize, schedule: SamplingSchedule) -> Result<Self> {
        let prefix = prefix.into();
        Ok(Self {
            self_attn: MultiHeadAttention::new(format!("{prefix}.self_attn"), hidden, heads)?,
            cross: DeformAttn::new(format!("{prefix}.cross"), hidden, heads, schedule)?,
            prefix,
            ffn_hidden,
        })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.cross.hidden;
        self.self_attn.init(store, rng);
        init_layer_norm(store, &self.name("norm1"), c);
        self.cross.init(store, rng);
        init_layer_norm(store, &self.name("norm2"), c);
        init_ffn(store, &self.name("ffn"), c, self.ffn_hidden, rng);
        init_layer_norm(store, &self.name("norm3"), c);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        tgt: Var<'t>,
        query_pos: Var<'t>,
        frames: &[usize],
        refs: &Tensor,
        memory: Var<'t>,
        layout: &ClipLayout,
    ) -> Result<Var<'t>> {
        Ok(self.run(p, tgt, query_pos, frames, refs, memory, layout, false)?.0)
    }

    /// Like [`DecoderLayer::forward`], also tracing the cross-attention.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_traced<'t>(
        &self,
        p: &Bound<'t>,
        tgt: Var<'t>,
        query_pos: Var<'t>,
        frames: &[usize],
        refs: &Tensor,
        memory: Var<'t>,
        layout: &ClipLayout,
    ) -> Result<(Var<'t>, AttentionTrace)> {
        let (out, trace) = self.run(p, tgt, query_pos, frames, refs, memory, layout, true)?;
        Ok((out, trace.expect("traced")))
    }

    #[allow(clippy::too_many_arguments)]
    fn run<'t>(
        &self,
        p: &Bound<'t>,
        tgt: Var<'t>,
        query_pos: Var<'t>,
        frames: &[usize],
        refs: &Tensor,
        memory: Var<'t>,
        layout: &ClipLayout,
        traced: bool,
    ) -> Result<(Var<'t>, Option<AttentionTrace>)> {
        let h = layer_norm(p, &self.name("norm1"), tgt)?;
        let qk = h.add(query_pos)?;
        let (sa, _) = self.self_attn.forward(p, qk, qk, h)?;
        let x = tgt.add(sa)?;
        let query = layer_norm(p, &self.name("norm2"), x)?.add(query_pos)?;
        let trace = if traced {
            Some(self.cross.trace(p, query, frames, refs, layout)?)
        } else {
            None
        };
        let x = x.add(self.cross.forward(p, query, frames, refs, memory, layout)?)?;
        let h = layer_norm(p, &self.name("norm3"), x)?;
        Ok((x.add(ffn(p, &self.name("ffn"), h)?)?, trace))
    }
}

/// Class and box heads shared by every decoder layer.
#[derive(Clone, Debug)]
pub struct PredictionHeads {
    pub hidden: usize,
    pub num_logits: usize,
}

impl PredictionHeads {
    pub const CLASS: &'static str = "head.class";
    pub const BOX: [&'static str; 3] = ["head.box.0", "head.box.1", "head.box.2"];

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.hidden;
        init_linear(store, Self::CLASS, c, self.num_logits, rng);
        init_linear(store, Self::BOX[0], c, c, rng);
        init_linear(store, Self::BOX[1], c, c, rng);
        init_linear_zero(store, Self::BOX[2], c, 4);
    }

    /// Class logits `[N, K+1]` and box deltas `[N, 4]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let logits = linear(p, Self::CLASS, x)?;
        let h = linear(p, Self::BOX[0], x)?.relu();
        let h = linear(p, Self::BOX[1], h)?.relu();
        Ok((logits, linear(p, Self::BOX[2], h)?))
    }
}

/// Applies the shared heads to `embeddings` `[N, C]`.
pub fn predict_heads<'t>(p: &Bound<'t>, heads: &PredictionHeads, embeddings: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    heads.forward(p, embeddings)
}

/// Decoder over `τ * n` object queries with identity slots shared across frames.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub heads: PredictionHeads,
    pub hidden: usize,
    pub frames: usize,
    pub queries_per_frame: usize,
}

impl Decoder {
    pub const CONTENT: &'static str = "query.content";
    pub const POS: &'static str = "query.pos";
    pub const REFERENCE: &'static str = "query.reference";
    /// Normalizes every layer's output before the heads.
    pub const NORM: &'static str = "decoder.norm";

    pub fn num_queries(&self) -> usize {
        self.frames * self.queries_per_frame
    }

    pub fn query_frames(&self) -> Vec<usize> {
        (0..self.num_queries()).map(|q| query_frame(q, self.queries_per_frame)).collect()
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let (n, c) = (self.num_queries(), self.hidden);
        store.insert(Self::CONTENT, Tensor::randn(vec![n, c], 1.0, rng));
        store.insert(Self::POS, Tensor::randn(vec![n, c], 1.0, rng));
        // one starting box per identity slot, shared by its frames
        let slots: Vec<[f64; 4]> = (0..self.queries_per_frame)
            .map(|_| {
                let cx = rng.random_range(0.1..0.9);
                let cy = rng.random_range(0.1..0.9);
                [cx, cy, 0.2, 0.2].map(|v| inverse_sigmoid(v, SIGMOID_EPS))
            })
            .collect();
        let refs = (0..n).flat_map(|q| slots[query_slot(q, self.queries_per_frame)]).collect();
        store.insert(Self::REFERENCE, Tensor::new(vec![n, 4], refs).expect("reference shape"));
        for l in &self.layers {
            l.init(store, rng);
        }
        init_layer_norm(store, Self::NORM, c);
        self.heads.init(store, rng);
    }

    /// Query positions with the temporal embedding of each query's frame added.
    fn query_pos<'t>(&self, p: &Bound<'t>, temporal: Var<'t>) -> Result<Var<'t>> {
        let per_query = temporal.index_select(&self.query_frames())?;
        Ok(p.get(Self::POS)?.add(per_query)?)
    }

    /// `temporal` is the `[τ, C]` temporal embedding table.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        memory: Var<'t>,
        temporal: Var<'t>,
        layout: &ClipLayout,
    ) -> Result<Vec<DecoderLayerOutput<'t>>> {
        Ok(self.run(p, memory, temporal, layout, None, None)?.0)
    }

    /// Like [`Decoder::forward`], also returning each layer's detached inputs.
    pub fn forward_recorded<'t>(
        &self,
        p: &Bound<'t>,
        memory: Var<'t>,
        temporal: Var<'t>,
        layout: &ClipLayout,
    ) -> Result<(Vec<DecoderLayerOutput<'t>>, Vec<LayerInputs>)> {
        self.run(p, memory, temporal, layout, None, None)
    }

    /// Runs with the detached inputs replaced by `frozen`, making the outputs
    /// a smooth function of the parameters (for gradient checking).
    pub fn forward_frozen<'t>(
        &self,
        p: &Bound<'t>,
        memory: Var<'t>,
        temporal: Var<'t>,
        layout: &ClipLayout,
        frozen: &[LayerInputs],
    ) -> Result<Vec<DecoderLayerOutput<'t>>> {
        if frozen.len() != self.layers.len() {
            return Err(CoreError::Shape(format!("{} frozen inputs for {} layers", frozen.len(), self.layers.len())));
        }
        Ok(self.run(p, memory, temporal, layout, None, Some(frozen))?.0)
    }

    /// Sampling traces of every cross-attention layer.
    pub fn trace<'t>(
        &self,
        p: &Bound<'t>,
        memory: Var<'t>,
        temporal: Var<'t>,
        layout: &ClipLayout,
    ) -> Result<Vec<AttentionTrace>> {
        let mut traces = Vec::new();
        self.run(p, memory, temporal, layout, Some(&mut traces), None)?;
        Ok(traces)
    }

    fn run<'t>(
        &self,
        p: &Bound<'t>,
        memory: Var<'t>,
        temporal: Var<'t>,
        layout: &ClipLayout,
        mut traces: Option<&mut Vec<AttentionTrace>>,
        frozen: Option<&[LayerInputs]>,
    ) -> Result<(Vec<DecoderLayerOutput<'t>>, Vec<LayerInputs>)> {
        if layout.frames() != self.frames {
            return Err(CoreError::FrameMismatch {
                schedule: self.frames,
                clip: layout.frames(),
            });
        }
        let tape = memory.tape();
        let frames = self.query_frames();
        let query_pos = self.query_pos(p, temporal)?;
        let mut tgt = p.get(Self::CONTENT)?;
        let mut prev_logit = p.get(Self::REFERENCE)?;
        let init = prev_logit.value();
        let points: Vec<[f64; 2]> = (0..self.num_queries())
            .map(|q| [sigmoid(init.get(&[q, 0])), sigmoid(init.get(&[q, 1]))])
            .collect();
        let mut refs = broadcast_references(&points, self.frames);
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut inputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(f) = frozen {
                refs = f[i].refs.clone();
                if let Some(l) = &f[i].prev_logit {
                    prev_logit = tape.constant(l.clone());
                }
            }
            inputs.push(LayerInputs {
                refs: refs.clone(),
                prev_logit: (i > 0).then(|| (*prev_logit.value()).clone()),
            });
            tgt = match traces.as_deref_mut() {
                Some(tr) => {
                    let (out, trace) = layer.forward_traced(p, tgt, query_pos, &frames, &refs, memory, layout)?;
                    tr.push(trace);
                    out
                }
                None => layer.forward(p, tgt, query_pos, &frames, &refs, memory, layout)?,
            };
            let embeddings = layer_norm(p, Self::NORM, tgt)?;
            let (class_logits, delta) = self.heads.forward(p, embeddings)?;
            let boxes = prev_logit.add(delta)?.sigmoid();
            outputs.push(DecoderLayerOutput {
                embeddings,
                boxes,
                class_logits,
            });
            let bv = boxes.value();
            prev_logit = tape.constant(bv.map(|b| inverse_sigmoid(b, SIGMOID_EPS)));
            refs = align_instance_references(&bv, self.queries_per_frame, self.frames)?;
        }
        Ok((outputs, inputs))
    }
}
