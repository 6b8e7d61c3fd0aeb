use clipseg_tensor::{Tensor, Var};

use crate::clip::ClipLayout;
use crate::error::Result;
use crate::params::{Bound, ParamStore};

/// Fixed 2-D sine table `[h*w, c]`: the first half of the channels encodes
/// the row, the second half the column, each as interleaved sin/cos.
pub fn sine_table(h: usize, w: usize, c: usize) -> Tensor {
    let half = c / 2;
    let freq = |i: usize| 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
    let embed = |pos: f64, i: usize| {
        let v = pos / freq(i);
        if i % 2 == 0 {
            v.sin()
        } else {
            v.cos()
        }
    };
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let py = (y as f64 + 0.5) / h as f64 * two_pi;
        for x in 0..w {
            let px = (x as f64 + 0.5) / w as f64 * two_pi;
            data.extend((0..half).map(|i| embed(py, i)));
            data.extend((0..c - half).map(|i| embed(px, i)));
        }
    }
    Tensor::new(vec![h * w, c], data).expect("sine table shape")
}

/// Spatial sine table plus learned temporal and scale embeddings, all added.
#[derive(Clone, Debug)]
pub struct PositionalEncoding {
    pub hidden: usize,
    pub frames: usize,
    pub levels: usize,
}

impl PositionalEncoding {
    pub const TEMPORAL: &'static str = "pos.temporal";
    pub const SCALE: &'static str = "pos.scale";

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(Self::TEMPORAL, Tensor::zeros(vec![self.frames, self.hidden]));
        store.insert(Self::SCALE, Tensor::zeros(vec![self.levels, self.hidden]));
    }

    /// Encoding of every clip token, `[P, C]`.
    pub fn tokens<'t>(&self, p: &Bound<'t>, layout: &ClipLayout) -> Result<Var<'t>> {
        let tables: Vec<Tensor> = layout.dims().iter().map(|&(h, w)| sine_table(h, w, self.hidden)).collect();
        let coords = layout.token_coords();
        let mut spatial = Vec::with_capacity(coords.len() * self.hidden);
        for &(_, l, y, x) in &coords {
            spatial.extend_from_slice(tables[l].row(y * layout.dims()[l].1 + x));
        }
        let spatial = Tensor::new(vec![coords.len(), self.hidden], spatial)?;
        let frames: Vec<usize> = coords.iter().map(|c| c.0).collect();
        let levels: Vec<usize> = coords.iter().map(|c| c.1).collect();
        let temporal = p.get(Self::TEMPORAL)?.index_select(&frames)?;
        let scale = p.get(Self::SCALE)?.index_select(&levels)?;
        Ok(temporal.add(scale)?.add(temporal.tape().constant(spatial))?)
    }

    /// Temporal embedding of each listed frame, `[frames.len(), C]`.
    pub fn temporal<'t>(&self, p: &Bound<'t>, frames: &[usize]) -> Result<Var<'t>> {
        Ok(p.get(Self::TEMPORAL)?.index_select(frames)?)
    }
}
