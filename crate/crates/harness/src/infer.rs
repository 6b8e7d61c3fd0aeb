//! Sliding-clip inference and stitching.

use clipseg_core::model::{ClipInput, Model};
use clipseg_core::tracker::{select_trajectories, ClipInstance, ClipResult, FrameRecord, TrackStore};
use clipseg_core::ParamStore;
use clipseg_tensor::{sigmoid, Tape, Tensor};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::synth::SyntheticSequence;

/// First frame of each clip: every `stride` frames, plus a final clip
/// flush with the sequence end when the stride does not land on it.
pub fn clip_starts(frames: usize, clip_len: usize, stride: usize) -> Result<Vec<usize>> {
    if frames < clip_len {
        return Err(HarnessError::Config(format!(
            "sequence of {frames} frames is shorter than a clip of {clip_len}"
        )));
    }
    if stride == 0 || stride >= clip_len {
        return Err(HarnessError::Config(format!("stride {stride} does not overlap clips of {clip_len}")));
    }
    let mut starts: Vec<usize> = (0..=frames - clip_len).step_by(stride).collect();
    if *starts.last().expect("at least one start") + clip_len < frames {
        starts.push(frames - clip_len);
    }
    Ok(starts)
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let k = x.shape()[1];
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Runs one clip and keeps the top-`k` trajectories.
pub fn run_clip(model: &Model, params: &ParamStore, input: &ClipInput, start: usize, top_k: usize) -> Result<ClipResult> {
    let cfg = &model.cfg;
    let (n, tau, classes) = (cfg.queries_per_frame, cfg.frames, cfg.num_classes);
    let tape = Tape::new();
    let p = params.bind_frozen(&tape);
    let out = model.forward(&p, &tape, input)?;
    let last = out.last();
    let probs = softmax_rows(&last.class_logits.value());
    let boxes = last.boxes.value();
    let mut object_probs = Tensor::zeros(vec![tau * n, classes]);
    for q in 0..tau * n {
        for c in 0..classes {
            object_probs.set(&[q, c], probs.get(&[q, c]));
        }
    }
    let picks = select_trajectories(&object_probs, top_k, n)?;
    let mut slots: Vec<usize> = picks.iter().map(|s| s.slot).collect();
    slots.sort_unstable();
    slots.dedup();
    let queries: Vec<usize> = slots.iter().flat_map(|&s| (0..tau).map(move |t| t * n + s)).collect();
    let logits = model.masks(&p, &out, cfg.dec_layers - 1, &queries, &input.raw)?.value();
    let (h, w) = (logits.shape()[1], logits.shape()[2]);
    let plane = h * w;
    let instances = picks
        .iter()
        .enumerate()
        .map(|(local_id, pick)| {
            let row = slots.binary_search(&pick.slot).expect("slot was collected");
            let frames = (0..tau)
                .map(|t| {
                    let q = t * n + pick.slot;
                    let m = &logits.data()[(row * tau + t) * plane..(row * tau + t + 1) * plane];
                    FrameRecord {
                        mask: m.iter().map(|&x| sigmoid(x)).collect(),
                        class_probs: probs.row(q).to_vec(),
                        score: probs.get(&[q, pick.class]),
                        bbox: [
                            boxes.get(&[q, 0]),
                            boxes.get(&[q, 1]),
                            boxes.get(&[q, 2]),
                            boxes.get(&[q, 3]),
                        ],
                    }
                })
                .collect();
            ClipInstance {
                local_id,
                label: pick.class,
                frames,
            }
        })
        .collect();
    Ok(ClipResult {
        start,
        frames: tau,
        height: h,
        width: w,
        instances,
    })
}

/// Per-clip results and the stitched tracks of one sequence.
#[derive(Clone, Debug)]
pub struct Inference {
    pub clips: Vec<ClipResult>,
    pub store: TrackStore,
}

pub fn infer_sequence(model: &Model, params: &ParamStore, seq: &SyntheticSequence, cfg: &RunConfig) -> Result<Inference> {
    let tau = cfg.model.frames;
    let mut clips = Vec::new();
    let mut store = TrackStore::new();
    for start in clip_starts(seq.frames(), tau, cfg.stride)? {
        let clip = run_clip(model, params, &seq.clip(start, tau)?, start, cfg.top_k)?;
        store.stitch(&clip, &cfg.stitch)?;
        clips.push(clip);
    }
    Ok(Inference { clips, store })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts() {
        assert_eq!(clip_starts(6, 6, 4).unwrap(), vec![0]);
        assert_eq!(clip_starts(10, 6, 4).unwrap(), vec![0, 4]);
        assert_eq!(clip_starts(12, 6, 4).unwrap(), vec![0, 4, 6]);
        assert_eq!(clip_starts(14, 6, 4).unwrap(), vec![0, 4, 8]);
        assert!(clip_starts(5, 6, 4).is_err());
        assert!(clip_starts(10, 6, 6).is_err());
    }
}
