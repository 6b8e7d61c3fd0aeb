//! Multi-scale feature clips and their flattened token layout.
//!
//! Inside the model a clip is a `[P, C]` token matrix. Tokens are ordered by
//! frame, then level, then row-major pixel, so map `(t, l)` occupies a
//! contiguous block of rows.

use clipseg_tensor::Tensor;

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipLayout {
    frames: usize,
    dims: Vec<(usize, usize)>,
    level_starts: Vec<usize>,
    per_frame: usize,
}

impl ClipLayout {
    /// `dims[l] = (H_l, W_l)`; sizes must be non-zero and strictly shrink with `l`.
    pub fn new(frames: usize, dims: Vec<(usize, usize)>) -> Result<Self> {
        if frames == 0 || dims.is_empty() {
            return Err(shape_err("a clip needs at least one frame and one level"));
        }
        for (l, &(h, w)) in dims.iter().enumerate() {
            if h == 0 || w == 0 {
                return Err(shape_err(format!("level {l} has an empty extent {h}x{w}")));
            }
            if l > 0 && (h >= dims[l - 1].0 || w >= dims[l - 1].1) {
                return Err(shape_err(format!(
                    "level {l} ({h}x{w}) is not coarser than level {} ({}x{})",
                    l - 1,
                    dims[l - 1].0,
                    dims[l - 1].1
                )));
            }
        }
        let mut level_starts = Vec::with_capacity(dims.len());
        let mut acc = 0;
        for &(h, w) in &dims {
            level_starts.push(acc);
            acc += h * w;
        }
        Ok(Self {
            frames,
            dims,
            level_starts,
            per_frame: acc,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn levels(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[(usize, usize)] {
        &self.dims
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.per_frame
    }

    pub fn num_tokens(&self) -> usize {
        self.frames * self.per_frame
    }

    /// First token row of map `(frame, level)`.
    pub fn map_start(&self, frame: usize, level: usize) -> usize {
        frame * self.per_frame + self.level_starts[level]
    }

    /// `(frame, level, y, x)` of every token, in token order.
    pub fn token_coords(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.num_tokens());
        for t in 0..self.frames {
            for (l, &(h, w)) in self.dims.iter().enumerate() {
                for y in 0..h {
                    for x in 0..w {
                        out.push((t, l, y, x));
                    }
                }
            }
        }
        out
    }

    /// Same spatial pyramid with a different number of frames.
    pub fn with_frames(&self, frames: usize) -> Result<Self> {
        Self::new(frames, self.dims.clone())
    }
}

/// `L` feature maps over `τ` frames; level `l` has shape `[C, τ, H_l, W_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureClip {
    levels: Vec<Tensor>,
    layout: ClipLayout,
    channels: usize,
}

impl FeatureClip {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        let first = levels.first().ok_or_else(|| shape_err("feature clip has no levels"))?;
        if first.rank() != 4 {
            return Err(shape_err(format!("level 0 has shape {:?}, expected [C,T,H,W]", first.shape())));
        }
        let (c, t) = (first.shape()[0], first.shape()[1]);
        let mut dims = Vec::new();
        for (l, lv) in levels.iter().enumerate() {
            let s = lv.shape();
            if s.len() != 4 || s[0] != c || s[1] != t {
                return Err(shape_err(format!(
                    "level {l} has shape {s:?}; all levels must share C={c} and T={t}"
                )));
            }
            dims.push((s[2], s[3]));
        }
        let layout = ClipLayout::new(t, dims)?;
        Ok(Self {
            levels,
            layout,
            channels: c,
        })
    }

    pub fn layout(&self) -> &ClipLayout {
        &self.layout
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.layout.frames()
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    /// Flattens to `[P, C]` in token order.
    pub fn to_tokens(&self) -> Tensor {
        let c = self.channels;
        let mut data = Vec::with_capacity(self.layout.num_tokens() * c);
        for t in 0..self.frames() {
            for (lv, &(h, w)) in self.levels.iter().zip(self.layout.dims()) {
                let plane = h * w;
                let frame_off = t * plane;
                for px in 0..plane {
                    for ch in 0..c {
                        data.push(lv.data()[(ch * self.frames()) * plane + frame_off + px]);
                    }
                }
            }
        }
        Tensor::new(vec![self.layout.num_tokens(), c], data).expect("token count")
    }

    /// Inverse of [`FeatureClip::to_tokens`].
    pub fn from_tokens(layout: &ClipLayout, tokens: &Tensor) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 2 || s[0] != layout.num_tokens() {
            return Err(shape_err(format!(
                "token matrix {s:?} does not fit a layout with {} tokens",
                layout.num_tokens()
            )));
        }
        let c = s[1];
        let frames = layout.frames();
        let mut levels = Vec::with_capacity(layout.levels());
        for (l, &(h, w)) in layout.dims().iter().enumerate() {
            let plane = h * w;
            let mut data = vec![0.0; c * frames * plane];
            for t in 0..frames {
                let start = layout.map_start(t, l);
                for px in 0..plane {
                    let row = tokens.row(start + px);
                    for ch in 0..c {
                        data[(ch * frames + t) * plane + px] = row[ch];
                    }
                }
            }
            levels.push(Tensor::new(vec![c, frames, h, w], data)?);
        }
        Self::new(levels)
    }

    /// Channel-major map `[C, H, W]` of one frame and level.
    pub fn map(&self, frame: usize, level: usize) -> Tensor {
        let lv = &self.levels[level];
        let (h, w) = self.layout.dims()[level];
        let plane = h * w;
        let t = self.frames();
        let mut data = Vec::with_capacity(self.channels * plane);
        for ch in 0..self.channels {
            let off = (ch * t + frame) * plane;
            data.extend_from_slice(&lv.data()[off..off + plane]);
        }
        Tensor::new(vec![self.channels, h, w], data).expect("map shape")
    }

    /// The clip restricted to the listed frames, in the given order.
    pub fn select_frames(&self, frames: &[usize]) -> Result<Self> {
        let mut levels = Vec::with_capacity(self.levels.len());
        for (lv, &(h, w)) in self.levels.iter().zip(self.layout.dims()) {
            let plane = h * w;
            let mut data = Vec::with_capacity(self.channels * frames.len() * plane);
            for ch in 0..self.channels {
                for &f in frames {
                    if f >= self.frames() {
                        return Err(shape_err(format!("frame {f} out of range for {} frames", self.frames())));
                    }
                    let off = (ch * self.frames() + f) * plane;
                    data.extend_from_slice(&lv.data()[off..off + plane]);
                }
            }
            levels.push(Tensor::new(vec![self.channels, frames.len(), h, w], data)?);
        }
        Self::new(levels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn token_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let clip = FeatureClip::new(vec![
            Tensor::randn(vec![3, 2, 4, 4], 1.0, &mut rng),
            Tensor::randn(vec![3, 2, 2, 2], 1.0, &mut rng),
        ])
        .unwrap();
        let tokens = clip.to_tokens();
        assert_eq!(tokens.shape(), &[40, 3]);
        assert_eq!(clip.layout().map_start(1, 1), 36);
        let back = FeatureClip::from_tokens(clip.layout(), &tokens).unwrap();
        assert_eq!(back, clip);
        let m = clip.map(1, 0);
        assert_eq!(m.get(&[2, 3, 1]), tokens.get(&[20 + 13, 2]));
    }

    #[test]
    fn rejects_non_shrinking_levels() {
        assert!(ClipLayout::new(1, vec![(4, 4), (4, 2)]).is_err());
        assert!(ClipLayout::new(1, vec![(4, 4), (0, 2)]).is_err());
        assert!(ClipLayout::new(2, vec![(8, 8), (4, 4)]).is_ok());
    }
}
