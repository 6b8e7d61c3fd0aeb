use clipseg_tensor::{Tensor, Var};
use rand::Rng;

use super::mdc::Mdc;
use crate::attention::MultiHeadAttention;
use crate::clip::ClipLayout;
use crate::error::{shape_err, Result};
use crate::nn::{init_linear, linear};
use crate::params::{Bound, ParamStore};

/// Rows of `embeddings` `[N, C]` selected by `indices`, in that order.
pub fn filter_positive<'t>(embeddings: Var<'t>, indices: &[usize]) -> Result<Var<'t>> {
    Ok(embeddings.index_select(indices)?)
}

/// Per-query mask prediction on the query's own frame: attention maps between
/// the query and each encoded level, a coarse-to-fine path over the encoded
/// maps with deformable convolutions, and a final stage on the un-encoded
/// finest backbone map.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub hidden: usize,
    pub heads: usize,
    pub levels: usize,
    pub width: usize,
    pub raw_channels: usize,
    pub kernel: usize,
}

impl MaskHead {
    fn maps(&self) -> MultiHeadAttention {
        MultiHeadAttention {
            prefix: "mask.maps".into(),
            hidden: self.hidden,
            heads: self.heads,
        }
    }

    fn stage(&self, level: usize) -> Mdc {
        Mdc {
            prefix: format!("mask.stage.{level}"),
            c_in: self.width + self.heads,
            c_out: self.width,
            k: self.kernel,
        }
    }

    fn final_stage(&self) -> Mdc {
        Mdc {
            prefix: "mask.stage.final".into(),
            c_in: self.width,
            c_out: self.width,
            k: self.kernel,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.maps().init_maps_only(store, rng);
        for l in 0..self.levels {
            init_linear(store, &format!("mask.proj.{l}"), self.hidden, self.width, rng);
            self.stage(l).init(store, rng);
        }
        init_linear(store, "mask.proj.raw", self.raw_channels, self.width, rng);
        self.final_stage().init(store, rng);
        let std = (1.0 / self.width as f64).sqrt();
        store.insert("mask.out.weight", Tensor::randn(vec![1, self.width, 1, 1], std, rng));
        store.insert("mask.out.bias", Tensor::zeros(vec![1]));
    }

    /// Attention of each query over the pixels of its own frame, one
    /// `[N*, M, H_l, W_l]` stack per level. Values are not projected.
    pub fn attention_maps<'t>(
        &self,
        p: &Bound<'t>,
        embeddings: Var<'t>,
        memory: Var<'t>,
        layout: &ClipLayout,
        frames: &[usize],
    ) -> Result<Vec<Var<'t>>> {
        let tape = memory.tape();
        let n = frames.len();
        if embeddings.shape() != [n, self.hidden] {
            return Err(shape_err(format!(
                "embeddings {:?} should be [{n}, {}]",
                embeddings.shape(),
                self.hidden
            )));
        }
        let m = self.heads;
        if n == 0 {
            return Ok(layout
                .dims()
                .iter()
                .map(|&(h, w)| tape.constant(Tensor::zeros(vec![0, m, h, w])))
                .collect());
        }
        let mha = self.maps();
        let q = mha.project_queries(p, embeddings)?;
        let k = mha.project_keys(p, memory)?;
        // queries grouped by frame, then restored to input order
        let mut order = Vec::with_capacity(n);
        let mut groups = Vec::new();
        for t in 0..layout.frames() {
            let rows: Vec<usize> = (0..n).filter(|&i| frames[i] == t).collect();
            if !rows.is_empty() {
                order.extend_from_slice(&rows);
                groups.push((t, rows));
            }
        }
        if order.len() != n {
            return Err(shape_err("query frame out of range"));
        }
        let mut inverse = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i] = pos;
        }
        let mut out = Vec::with_capacity(self.levels);
        for (l, &(h, w)) in layout.dims().iter().enumerate() {
            let mut blocks = Vec::with_capacity(groups.len());
            for (t, rows) in &groups {
                let qt = q.index_select(rows)?;
                let kt = k.narrow(0, layout.map_start(*t, l), h * w)?;
                let per_head = mha.attention_weights(qt, kt)?;
                let stacked: Vec<_> = per_head
                    .iter()
                    .map(|a| a.reshape(vec![rows.len(), 1, h * w]))
                    .collect::<clipseg_tensor::Result<_>>()?;
                blocks.push(Var::concat(&stacked, 1)?);
            }
            let all = Var::concat(&blocks, 0)?.index_select(&inverse)?;
            out.push(all.reshape(vec![n, m, h, w])?);
        }
        Ok(out)
    }

    /// Projects every `[HW, C_in]` map of one level to `[B, width, H, W]`,
    /// picking each query's frame.
    fn frame_maps<'t>(&self, tokens: Var<'t>, starts: &[usize], h: usize, w: usize, frames: &[usize]) -> Result<Var<'t>> {
        let d = tokens.shape()[1];
        let per_frame: Vec<_> = starts
            .iter()
            .map(|&s| tokens.narrow(0, s, h * w)?.t()?.reshape(vec![1, d * h * w]))
            .collect::<clipseg_tensor::Result<_>>()?;
        let stacked = Var::concat(&per_frame, 0)?;
        Ok(stacked.index_select(frames)?.reshape(vec![frames.len(), d, h, w])?)
    }

    /// Mask logits `[N*, H_raw, W_raw]`.
    ///
    /// `raw` is the un-encoded finest backbone map `[C_raw, τ, H_raw, W_raw]`,
    /// equal in size to the finest encoded level or twice as large.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        memory: Var<'t>,
        layout: &ClipLayout,
        raw: &Tensor,
        maps: &[Var<'t>],
        frames: &[usize],
    ) -> Result<Var<'t>> {
        let tape = memory.tape();
        let rs = raw.shape();
        if rs.len() != 4 || rs[0] != self.raw_channels || rs[1] != layout.frames() {
            return Err(shape_err(format!(
                "raw map {rs:?} should be [{}, {}, H, W]",
                self.raw_channels,
                layout.frames()
            )));
        }
        let (hr, wr) = (rs[2], rs[3]);
        let (h0, w0) = layout.dims()[0];
        let upsample_raw = match (hr, wr) {
            _ if (hr, wr) == (h0, w0) => false,
            _ if (hr, wr) == (2 * h0, 2 * w0) => true,
            _ => {
                return Err(shape_err(format!(
                    "raw map {hr}x{wr} is neither the finest level {h0}x{w0} nor twice its size"
                )))
            }
        };
        for l in 1..layout.levels() {
            let (a, b) = (layout.dims()[l - 1], layout.dims()[l]);
            if a != (2 * b.0, 2 * b.1) {
                return Err(shape_err(format!("level {l} ({b:?}) is not half of level {} ({a:?})", l - 1)));
            }
        }
        let b = frames.len();
        if b == 0 {
            return Ok(tape.constant(Tensor::zeros(vec![0, hr, wr])));
        }
        if maps.len() != self.levels {
            return Err(shape_err(format!("{} attention map levels for {} levels", maps.len(), self.levels)));
        }
        let mut x: Option<Var<'t>> = None;
        for l in (0..self.levels).rev() {
            let (h, w) = layout.dims()[l];
            let proj = linear(p, &format!("mask.proj.{l}"), memory)?;
            let starts: Vec<usize> = (0..layout.frames()).map(|t| layout.map_start(t, l)).collect();
            let feat = self.frame_maps(proj, &starts, h, w, frames)?;
            let merged = match x {
                None => feat,
                Some(prev) => prev.upsample_nearest2x()?.add(feat)?,
            };
            let input = Var::concat(&[merged, maps[l]], 1)?;
            x = Some(self.stage(l).forward(p, input)?.relu());
        }
        let mut x = x.expect("at least one level");
        if upsample_raw {
            x = x.upsample_nearest2x()?;
        }
        let raw_tokens = raw_to_tokens(raw);
        let proj = linear(p, "mask.proj.raw", tape.constant(raw_tokens))?;
        let starts: Vec<usize> = (0..layout.frames()).map(|t| t * hr * wr).collect();
        let raw_feat = self.frame_maps(proj, &starts, hr, wr, frames)?;
        let x = self.final_stage().forward(p, x.add(raw_feat)?)?.relu();
        let logits = x.conv2d(p.get("mask.out.weight")?, Some(p.get("mask.out.bias")?))?;
        Ok(logits.reshape(vec![b, hr, wr])?)
    }
}

/// `[C, τ, H, W]` to frame-major pixel tokens `[τ*H*W, C]`.
fn raw_to_tokens(raw: &Tensor) -> Tensor {
    let s = raw.shape();
    let (c, t, plane) = (s[0], s[1], s[2] * s[3]);
    let mut data = Vec::with_capacity(raw.numel());
    for f in 0..t {
        for px in 0..plane {
            for ch in 0..c {
                data.push(raw.data()[(ch * t + f) * plane + px]);
            }
        }
    }
    Tensor::new(vec![t * plane, c], data).expect("raw token shape")
}
