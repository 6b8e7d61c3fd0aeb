use std::f64::consts::PI;

use clipseg_tensor::{Tensor, Var};
use rand::Rng;

use super::sampler::deformable_sample;
use super::schedule::SamplingSchedule;
use crate::clip::ClipLayout;
use crate::error::{shape_err, CoreError, Result};
use crate::nn::{init_linear, init_linear_zero, linear};
use crate::params::{Bound, ParamStore};

/// Maps a normalized point to fractional pixel coordinates of an `h x w`
/// level, with pixel centres at integer coordinates.
pub fn scale_reference(p: [f64; 2], h: usize, w: usize) -> [f64; 2] {
    [p[0] * w as f64 - 0.5, p[1] * h as f64 - 0.5]
}

/// Deformable attention over a clip with separate current-frame and temporal
/// projection heads.
///
/// Parameter layout under `prefix`:
///
/// | name            | shape                            |
/// |-----------------|----------------------------------|
/// | `value`         | `C x C`                          |
/// | `output`        | `C x C`                          |
/// | `offset_curr`   | `M*L*K_curr*2 x C`               |
/// | `weight_curr`   | `M*L*K_curr x C`                 |
/// | `offset_temp`   | `M*L*K_temp*(τ-1)*2 x C`         |
/// | `weight_temp`   | `M*L*K_temp*(τ-1) x C`           |
///
/// The temporal heads are absent when `K_temp = 0` or `τ = 1`.
#[derive(Clone, Debug)]
pub struct DeformAttn {
    pub prefix: String,
    pub hidden: usize,
    pub heads: usize,
    pub schedule: SamplingSchedule,
}

/// Sampling locations and normalized weights of one forward pass.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    /// `[Q, M, S, 2]` pixel coordinates on each sample's target level.
    pub locations: Tensor,
    /// `[Q, M, S]`
    pub weights: Tensor,
    pub query_frames: Vec<usize>,
    pub schedule: SamplingSchedule,
}

impl DeformAttn {
    pub fn new(prefix: impl Into<String>, hidden: usize, heads: usize, schedule: SamplingSchedule) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(CoreError::Config(format!(
                "hidden size {hidden} is not divisible by {heads} heads"
            )));
        }
        if schedule.samples_per_head() == 0 {
            return Err(CoreError::EmptySamples);
        }
        Ok(Self {
            prefix: prefix.into(),
            hidden,
            heads,
            schedule,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn has_temporal(&self) -> bool {
        self.schedule.temporal_samples() > 0
    }

    /// Output widths of the four projection heads.
    pub fn head_widths(&self) -> [(String, usize); 4] {
        let s = &self.schedule;
        let m = self.heads;
        let cur = m * s.levels * s.k_curr;
        let temp = m * s.levels * s.k_temp * (s.frames - 1);
        [
            (self.name("offset_curr"), cur * 2),
            (self.name("weight_curr"), cur),
            (self.name("offset_temp"), temp * 2),
            (self.name("weight_temp"), temp),
        ]
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.hidden;
        init_linear(store, &self.name("value"), c, c, rng);
        init_linear(store, &self.name("output"), c, c, rng);
        let s = self.schedule;
        for (name, width) in self.head_widths() {
            if width > 0 {
                init_linear_zero(store, &name, c, width);
            }
        }
        // offsets start on a per-head ray, one step further out per key
        let ray = |m: usize| {
            let theta = 2.0 * PI * m as f64 / self.heads as f64;
            let (sin, cos) = theta.sin_cos();
            let norm = cos.abs().max(sin.abs());
            (cos / norm, sin / norm)
        };
        let mut cur = Vec::with_capacity(self.heads * s.levels * s.k_curr * 2);
        for m in 0..self.heads {
            let (dx, dy) = ray(m);
            for _ in 0..s.levels {
                for k in 0..s.k_curr {
                    cur.push(dx * (k + 1) as f64);
                    cur.push(dy * (k + 1) as f64);
                }
            }
        }
        if !cur.is_empty() {
            store.insert(format!("{}.offset_curr.bias", self.prefix), Tensor::from_vec(cur));
        }
        if self.has_temporal() {
            let mut temp = Vec::new();
            for m in 0..self.heads {
                let (dx, dy) = ray(m);
                for _ in 0..s.levels {
                    for k in 0..s.k_temp {
                        for _ in 0..s.frames - 1 {
                            temp.push(dx * (k + 1) as f64);
                            temp.push(dy * (k + 1) as f64);
                        }
                    }
                }
            }
            store.insert(format!("{}.offset_temp.bias", self.prefix), Tensor::from_vec(temp));
        }
    }

    /// Offsets `[Q, M, S, 2]` in target-level pixels and weights `[Q, M, S]`
    /// normalized jointly over all samples of a head.
    pub fn project_offsets_weights<'t>(&self, p: &Bound<'t>, query: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let q = query.shape()[0];
        let m = self.heads;
        let s = self.schedule;
        let (mut offs, mut logits) = (Vec::new(), Vec::new());
        if s.current_samples() > 0 {
            let n = s.current_samples();
            offs.push(linear(p, &self.name("offset_curr"), query)?.reshape(vec![q, m, n, 2])?);
            logits.push(linear(p, &self.name("weight_curr"), query)?.reshape(vec![q, m, n])?);
        }
        if self.has_temporal() {
            let n = s.temporal_samples();
            offs.push(linear(p, &self.name("offset_temp"), query)?.reshape(vec![q, m, n, 2])?);
            logits.push(linear(p, &self.name("weight_temp"), query)?.reshape(vec![q, m, n])?);
        }
        let offsets = if offs.len() == 1 { offs[0] } else { Var::concat(&offs, 2)? };
        let logits = if logits.len() == 1 { logits[0] } else { Var::concat(&logits, 2)? };
        Ok((offsets, logits.softmax(2)?))
    }

    /// Scaled reference of every sample, `[Q, M, S, 2]`. `refs[q, f]` is the
    /// normalized reference of query `q` on frame `f`.
    pub fn reference_locations(&self, refs: &Tensor, query_frames: &[usize], layout: &ClipLayout) -> Result<Tensor> {
        let s = self.schedule;
        let q = query_frames.len();
        if refs.shape() != [q, s.frames, 2] {
            return Err(shape_err(format!(
                "references {:?} should be [{q}, {}, 2]",
                refs.shape(),
                s.frames
            )));
        }
        if layout.frames() != s.frames {
            return Err(CoreError::FrameMismatch {
                schedule: s.frames,
                clip: layout.frames(),
            });
        }
        let targets: Vec<_> = (0..s.frames).map(|t| s.targets(t)).collect();
        let n = s.samples_per_head();
        let mut out = Vec::with_capacity(q * self.heads * n * 2);
        for (qi, &t) in query_frames.iter().enumerate() {
            for _ in 0..self.heads {
                for tg in &targets[t] {
                    let (h, w) = layout.dims()[tg.level];
                    let r = [refs.get(&[qi, tg.frame, 0]), refs.get(&[qi, tg.frame, 1])];
                    out.extend(scale_reference(r, h, w));
                }
            }
        }
        Ok(Tensor::new(vec![q, self.heads, n, 2], out)?)
    }

    /// Attends from `query` `[Q, C]` (on frames `query_frames`) into the clip
    /// tokens `input` `[P, C]`. `refs` is `[Q, τ, 2]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        query: Var<'t>,
        query_frames: &[usize],
        refs: &Tensor,
        input: Var<'t>,
        layout: &ClipLayout,
    ) -> Result<Var<'t>> {
        let (sampled, _) = self.sample(p, query, query_frames, refs, input, layout)?;
        linear(p, &self.name("output"), sampled)
    }

    fn sample<'t>(
        &self,
        p: &Bound<'t>,
        query: Var<'t>,
        query_frames: &[usize],
        refs: &Tensor,
        input: Var<'t>,
        layout: &ClipLayout,
    ) -> Result<(Var<'t>, (Var<'t>, Var<'t>))> {
        if query.shape() != [query_frames.len(), self.hidden] {
            return Err(shape_err(format!(
                "queries {:?} should be [{}, {}]",
                query.shape(),
                query_frames.len(),
                self.hidden
            )));
        }
        let base = self.reference_locations(refs, query_frames, layout)?;
        let (offsets, weights) = self.project_offsets_weights(p, query)?;
        let loc = offsets.add(query.tape().constant(base))?;
        let value = linear(p, &self.name("value"), input)?;
        let sampled = deformable_sample(value, loc, weights, layout, &self.schedule, query_frames)?;
        Ok((sampled, (loc, weights)))
    }

    /// Sampling locations and weights without running the value path.
    pub fn trace<'t>(
        &self,
        p: &Bound<'t>,
        query: Var<'t>,
        query_frames: &[usize],
        refs: &Tensor,
        layout: &ClipLayout,
    ) -> Result<AttentionTrace> {
        let base = self.reference_locations(refs, query_frames, layout)?;
        let (offsets, weights) = self.project_offsets_weights(p, query)?;
        let locations = offsets.value().zip_map(&base, |a, b| a + b)?;
        Ok(AttentionTrace {
            locations,
            weights: (*weights.value()).clone(),
            query_frames: query_frames.to_vec(),
            schedule: self.schedule,
        })
    }
}

/// Single-frame, single-level deformable attention of one query with `keys`
/// samples per head. `map` is `[C, H, W]`.
pub fn deformable_attention<'t>(
    p: &Bound<'t>,
    attn: &DeformAttn,
    query: Var<'t>,
    reference: [f64; 2],
    map: Var<'t>,
) -> Result<Var<'t>> {
    let s = attn.schedule;
    if s.k_curr == 0 {
        return Err(CoreError::EmptySamples);
    }
    if s.frames != 1 || s.levels != 1 {
        return Err(CoreError::Config("single-map attention needs a 1-frame, 1-level schedule".into()));
    }
    let ms = map.shape();
    if ms.len() != 3 || ms[0] != attn.hidden {
        return Err(shape_err(format!("map {ms:?} should be [{}, H, W]", attn.hidden)));
    }
    let layout = ClipLayout::new(1, vec![(ms[1], ms[2])])?;
    let tokens = map.reshape(vec![ms[0], ms[1] * ms[2]])?.t()?;
    let refs = Tensor::new(vec![1, 1, 2], reference.to_vec())?;
    let q = query.reshape(vec![1, attn.hidden])?;
    Ok(attn.forward(p, q, &[0], &refs, tokens, &layout)?.reshape(vec![attn.hidden])?)
}
