#![allow(dead_code)]

use clipseg_core::attention::DeformAttn;
use clipseg_core::{FeatureClip, ParamStore};
use clipseg_tensor::Tensor;

/// `W x + b` with explicit loops.
pub fn naive_linear(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = store.get(&format!("{name}.weight")).unwrap();
    let b = store.get(&format!("{name}.bias")).unwrap();
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..rows)
        .map(|r| b.data()[r] + (0..cols).map(|c| w.get(&[r, c]) * x[c]).sum::<f64>())
        .collect()
}

pub fn naive_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Bilinear lookup with zero padding, channel slice `[c0, c0 + n)` of a
/// `[C, H, W]` map.
pub fn naive_bilinear(map: &Tensor, x: f64, y: f64, c0: usize, n: usize) -> Vec<f64> {
    let (h, w) = (map.shape()[1] as i64, map.shape()[2] as i64);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let mut out = vec![0.0; n];
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let (xi, yi) = (x0 as i64 + dx, y0 as i64 + dy);
            if xi < 0 || yi < 0 || xi >= w || yi >= h {
                continue;
            }
            for (c, o) in out.iter_mut().enumerate() {
                *o += wx * wy * map.get(&[c0 + c, yi as usize, xi as usize]);
            }
        }
    }
    out
}

/// Reference implementation of the clip attention for one query: every
/// projection, location and sample is spelled out.
pub fn naive_clip_attention(
    store: &ParamStore,
    attn: &DeformAttn,
    z: &[f64],
    frame: usize,
    refs: &[[f64; 2]],
    clip: &FeatureClip,
) -> Vec<f64> {
    let p = &attn.prefix;
    let s = attn.schedule;
    let (m_heads, cv) = (attn.heads, attn.head_dim());
    let c = attn.hidden;
    // value projection applied per frame/level map
    let proj: Vec<Vec<Tensor>> = (0..s.frames)
        .map(|t| {
            (0..s.levels)
                .map(|l| {
                    let map = clip.map(t, l);
                    let (h, w) = (map.shape()[1], map.shape()[2]);
                    let mut out = Tensor::zeros(vec![c, h, w]);
                    for y in 0..h {
                        for x in 0..w {
                            let px: Vec<f64> = (0..c).map(|ch| map.get(&[ch, y, x])).collect();
                            for (ch, v) in naive_linear(store, &format!("{p}.value"), &px).into_iter().enumerate() {
                                out.set(&[ch, y, x], v);
                            }
                        }
                    }
                    out
                })
                .collect()
        })
        .collect();
    let cur_off = naive_linear(store, &format!("{p}.offset_curr"), z);
    let cur_w = naive_linear(store, &format!("{p}.weight_curr"), z);
    let temporal = s.k_temp > 0 && s.frames > 1;
    let (tmp_off, tmp_w) = if temporal {
        (
            naive_linear(store, &format!("{p}.offset_temp"), z),
            naive_linear(store, &format!("{p}.weight_temp"), z),
        )
    } else {
        (vec![], vec![])
    };
    let others: Vec<usize> = (0..s.frames).filter(|&f| f != frame).collect();
    let mut mixed = vec![0.0; c];
    for m in 0..m_heads {
        // (frame, level, dx, dy, logit) for every sample of this head
        let mut samples = Vec::new();
        for l in 0..s.levels {
            for k in 0..s.k_curr {
                let i = (m * s.levels + l) * s.k_curr + k;
                samples.push((frame, l, cur_off[2 * i], cur_off[2 * i + 1], cur_w[i]));
            }
        }
        if temporal {
            for l in 0..s.levels {
                for k in 0..s.k_temp {
                    for (j, &f) in others.iter().enumerate() {
                        let i = ((m * s.levels + l) * s.k_temp + k) * (s.frames - 1) + j;
                        samples.push((f, l, tmp_off[2 * i], tmp_off[2 * i + 1], tmp_w[i]));
                    }
                }
            }
        }
        let logits: Vec<f64> = samples.iter().map(|s| s.4).collect();
        let a = naive_softmax(&logits);
        for (&(f, l, dx, dy, _), &wgt) in samples.iter().zip(&a) {
            let map = &proj[f][l];
            let (h, w) = (map.shape()[1] as f64, map.shape()[2] as f64);
            let x = refs[f][0] * w - 0.5 + dx;
            let y = refs[f][1] * h - 0.5 + dy;
            for (ci, v) in naive_bilinear(map, x, y, m * cv, cv).into_iter().enumerate() {
                mixed[m * cv + ci] += wgt * v;
            }
        }
    }
    naive_linear(store, &format!("{p}.output"), &mixed)
}

pub fn naive_layer_norm(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let g = store.get(&format!("{name}.gamma")).unwrap();
    let b = store.get(&format!("{name}.beta")).unwrap();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| g.data()[i] * (v - mean) / (var + 1e-5).sqrt() + b.data()[i])
        .collect()
}

pub fn naive_ffn(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = naive_linear(store, &format!("{name}.fc1"), x)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    naive_linear(store, &format!("{name}.fc2"), &h)
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}
