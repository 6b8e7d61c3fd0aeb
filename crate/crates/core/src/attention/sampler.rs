//! Fused multi-frame, multi-level deformable sampling.
//!
//! `out[q, m*Cv + c] = Σ_s attn[q,m,s] * bilinear(value map of s, loc[q,m,s])[m*Cv + c]`

use std::cell::RefCell;

use clipseg_tensor::ops::bilinear_taps;
use clipseg_tensor::{Backward, Tensor, Var};

use super::schedule::SamplingSchedule;
use crate::clip::ClipLayout;
use crate::error::{shape_err, CoreError, Result};

/// Counts from one sampler invocation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerCall {
    pub queries: usize,
    pub heads: usize,
    /// Bilinear samples actually issued.
    pub samples: usize,
}

impl SamplerCall {
    pub fn per_query_per_head(&self) -> f64 {
        self.samples as f64 / (self.queries * self.heads).max(1) as f64
    }
}

thread_local! {
    static TRACE: RefCell<Option<Vec<SamplerCall>>> = const { RefCell::new(None) };
}

/// Runs `f` and returns every sampler call it made on this thread.
pub fn count_samples<R>(f: impl FnOnce() -> R) -> (R, Vec<SamplerCall>) {
    let outer = TRACE.with(|t| t.borrow_mut().replace(Vec::new()));
    let r = f();
    let calls = TRACE.with(|t| {
        let mut slot = t.borrow_mut();
        let mine = slot.take().unwrap_or_default();
        if let Some(mut prev) = outer {
            prev.extend_from_slice(&mine);
            *slot = Some(prev);
        }
        mine
    });
    (r, calls)
}

fn record(call: SamplerCall) {
    TRACE.with(|t| {
        if let Some(v) = t.borrow_mut().as_mut() {
            v.push(call);
        }
    });
}

#[derive(Clone, Copy)]
struct MapRef {
    start: usize,
    h: usize,
    w: usize,
}

struct Plan {
    heads: usize,
    head_dim: usize,
    samples: usize,
    /// `maps[q * samples + s]`
    maps: Vec<MapRef>,
}

impl Plan {
    fn new(layout: &ClipLayout, schedule: &SamplingSchedule, heads: usize, channels: usize, query_frames: &[usize]) -> Self {
        let per_frame: Vec<Vec<MapRef>> = (0..schedule.frames)
            .map(|t| {
                schedule
                    .targets(t)
                    .into_iter()
                    .map(|tg| {
                        let (h, w) = layout.dims()[tg.level];
                        MapRef {
                            start: layout.map_start(tg.frame, tg.level),
                            h,
                            w,
                        }
                    })
                    .collect()
            })
            .collect();
        let maps = query_frames.iter().flat_map(|&t| per_frame[t].iter().copied()).collect();
        Self {
            heads,
            head_dim: channels / heads,
            samples: schedule.samples_per_head(),
            maps,
        }
    }
}

struct DeformSample {
    plan: Plan,
}

impl Backward for DeformSample {
    fn name(&self) -> &'static str {
        "deformable_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (value, loc, attn) = (inputs[0], inputs[1], inputs[2]);
        let Plan {
            heads,
            head_dim: cv,
            samples,
            ..
        } = self.plan;
        let c = heads * cv;
        let q_count = attn.shape()[0];
        let mut dvalue = needs[0].then(|| vec![0.0; value.numel()]);
        let mut dloc = vec![0.0; loc.numel()];
        let mut dattn = vec![0.0; attn.numel()];
        let (vd, ld, ad, gd) = (value.data(), loc.data(), attn.data(), g.data());
        for q in 0..q_count {
            for m in 0..heads {
                let grow = &gd[q * c + m * cv..q * c + (m + 1) * cv];
                for s in 0..samples {
                    let i = (q * heads + m) * samples + s;
                    let map = self.plan.maps[q * samples + s];
                    let taps = bilinear_taps(ld[2 * i], ld[2 * i + 1], map.h, map.w);
                    let a = ad[i];
                    let (mut gs, mut gx, mut gy) = (0.0, 0.0, 0.0);
                    for k in 0..4 {
                        if !taps.valid[k] {
                            continue;
                        }
                        let off = (map.start + taps.index[k]) * c + m * cv;
                        let row = &vd[off..off + cv];
                        let dot: f64 = row.iter().zip(grow).map(|(v, g)| v * g).sum();
                        gs += taps.weight[k] * dot;
                        gx += taps.dx[k] * dot;
                        gy += taps.dy[k] * dot;
                        if let Some(dv) = dvalue.as_mut() {
                            let wgt = a * taps.weight[k];
                            for (d, g) in dv[off..off + cv].iter_mut().zip(grow) {
                                *d += wgt * g;
                            }
                        }
                    }
                    dattn[i] = gs;
                    dloc[2 * i] = a * gx;
                    dloc[2 * i + 1] = a * gy;
                }
            }
        }
        vec![
            dvalue.map(|d| Tensor::new(value.shape().to_vec(), d).unwrap()),
            needs[1].then(|| Tensor::new(loc.shape().to_vec(), dloc).unwrap()),
            needs[2].then(|| Tensor::new(attn.shape().to_vec(), dattn).unwrap()),
        ]
    }
}

/// Samples the projected `value` tokens `[P, C]` at `loc` `[Q, M, S, 2]`
/// (pixel `(x, y)` of each sample's target level) and mixes the samples with
/// `attn` `[Q, M, S]`. Head `m` reads channels `m*C/M .. (m+1)*C/M`.
pub fn deformable_sample<'t>(
    value: Var<'t>,
    loc: Var<'t>,
    attn: Var<'t>,
    layout: &ClipLayout,
    schedule: &SamplingSchedule,
    query_frames: &[usize],
) -> Result<Var<'t>> {
    if layout.frames() != schedule.frames {
        return Err(CoreError::FrameMismatch {
            schedule: schedule.frames,
            clip: layout.frames(),
        });
    }
    if layout.levels() != schedule.levels {
        return Err(shape_err(format!(
            "schedule has {} levels, clip has {}",
            schedule.levels,
            layout.levels()
        )));
    }
    let (vs, ls, as_) = (value.shape(), loc.shape(), attn.shape());
    let samples = schedule.samples_per_head();
    if samples == 0 {
        return Err(CoreError::EmptySamples);
    }
    if as_.len() != 3 || as_[2] != samples || as_[0] != query_frames.len() {
        return Err(shape_err(format!(
            "attention weights {as_:?} do not match {} queries with {samples} samples per head",
            query_frames.len()
        )));
    }
    let (q_count, heads) = (as_[0], as_[1]);
    if ls != [q_count, heads, samples, 2] {
        return Err(shape_err(format!("sampling locations {ls:?} do not match weights {as_:?}")));
    }
    if vs.len() != 2 || vs[0] != layout.num_tokens() || heads == 0 || vs[1] % heads != 0 {
        return Err(shape_err(format!(
            "value tokens {vs:?} do not fit {} tokens split over {heads} heads",
            layout.num_tokens()
        )));
    }
    if let Some(&t) = query_frames.iter().find(|&&t| t >= schedule.frames) {
        return Err(shape_err(format!("query frame {t} out of range")));
    }
    let c = vs[1];
    let plan = Plan::new(layout, schedule, heads, c, query_frames);
    let cv = plan.head_dim;
    let (vv, lv, av) = (value.value(), loc.value(), attn.value());
    let (vd, ld, ad) = (vv.data(), lv.data(), av.data());
    let mut out = vec![0.0; q_count * c];
    let mut issued = 0usize;
    for q in 0..q_count {
        for m in 0..heads {
            let orow = &mut out[q * c + m * cv..q * c + (m + 1) * cv];
            for s in 0..samples {
                let i = (q * heads + m) * samples + s;
                let map = plan.maps[q * samples + s];
                let taps = bilinear_taps(ld[2 * i], ld[2 * i + 1], map.h, map.w);
                issued += 1;
                let a = ad[i];
                for k in 0..4 {
                    if !taps.valid[k] {
                        continue;
                    }
                    let wgt = a * taps.weight[k];
                    let off = (map.start + taps.index[k]) * c + m * cv;
                    for (o, v) in orow.iter_mut().zip(&vd[off..off + cv]) {
                        *o += wgt * v;
                    }
                }
            }
        }
    }
    record(SamplerCall {
        queries: q_count,
        heads,
        samples: issued,
    });
    let value_out = Tensor::new(vec![q_count, c], out)?;
    Ok(value
        .tape()
        .record(&[value, loc, attn], value_out, DeformSample { plan }))
}
