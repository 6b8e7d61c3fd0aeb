//! Sequence-level evaluation of stitched tracks against ground truth.
//!
//! - Each ground-truth identity is paired with at most one track by a
//!   maximum-total volumetric soft IoU assignment (pairs with IoU 0 are
//!   dropped). `mean_iou` averages the paired IoU over identities, counting
//!   unpaired identities as 0.
//! - `association` is the fraction of (identity, present frame) pairs on
//!   which the identity's paired track overlaps the identity and has the
//!   highest per-frame soft IoU among the paired tracks (ties count as
//!   correct). Unpaired tracks are detection errors, which AP scores.
//! - `ap` is the area under the interpolated precision-recall curve of the
//!   tracks ranked by score. A track is a true positive when its label
//!   matches and its volumetric soft IoU with a not yet matched identity is
//!   at least 0.5; each identity is matched at most once, greedily by score.
//!   Without ground-truth identities AP is 1 when there are no tracks and 0
//!   otherwise.
//! - Identities absent on every frame are not objects of the sequence and
//!   are ignored.
//!
//! Metrics JSON schema:
//!
//! ```json
//! {
//!   "sequences": 2,
//!   "identities": 5,
//!   "mean_iou": 0.93,            // over all identities
//!   "association": 1.0,          // over all (identity, present frame) pairs
//!   "ap": 1.0,                   // mean over sequences
//!   "per_sequence": [
//!     { "name": "seq0000", "tracks": 7, "identities": 3, "mean_iou": 0.9,
//!       "association": 1.0, "ap": 1.0,
//!       "detail": [ { "identity": 0, "track": 2, "iou": 0.91,
//!                     "present_frames": 10, "correct_frames": 10 } ] }
//!   ]
//! }
//! ```
//!
//! `track` is the paired track's identity, or `null`.

use clipseg_core::matching::{hungarian, GroundTruthClip};
use clipseg_core::tracker::{volumetric_soft_iou, TrackStore};
use clipseg_tensor::Tensor;
use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::trackfile::TrackFile;

/// IoU at or above which a track counts as a detection.
pub const AP_IOU: f64 = 0.5;

/// A predicted track over a whole sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTrack {
    pub identity: usize,
    pub label: usize,
    pub score: f64,
    /// Soft mask per frame, `None` where the track has no record.
    pub masks: Vec<Option<Vec<f64>>>,
}

impl EvalTrack {
    pub fn from_store(store: &TrackStore, frames: usize) -> Vec<Self> {
        store
            .tracks
            .iter()
            .map(|t| Self {
                identity: t.identity,
                label: t.label,
                score: t.mean_score(),
                masks: (0..frames).map(|f| t.records.get(&f).map(|r| r.mask.clone())).collect(),
            })
            .collect()
    }

    pub fn from_file(file: &TrackFile, masks: &[clipseg_core::io::SoftMask]) -> Result<Vec<Self>> {
        let per = file.track_masks(masks)?;
        Ok(file
            .tracks
            .iter()
            .zip(per)
            .map(|(t, m)| Self {
                identity: t.identity,
                label: t.label,
                score: t.score,
                masks: m,
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdentityDetail {
    pub identity: usize,
    pub track: Option<usize>,
    pub iou: f64,
    pub present_frames: usize,
    pub correct_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub tracks: usize,
    pub identities: usize,
    pub mean_iou: f64,
    pub association: f64,
    pub ap: f64,
    pub detail: Vec<IdentityDetail>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub sequences: usize,
    pub identities: usize,
    pub mean_iou: f64,
    pub association: f64,
    pub ap: f64,
    pub per_sequence: Vec<SequenceMetrics>,
}

/// Soft masks of a track or identity on every frame, zeros where absent.
fn filled(masks: &[Option<&[f64]>], plane: usize) -> Vec<Vec<f64>> {
    masks
        .iter()
        .map(|m| m.map_or_else(|| vec![0.0; plane], <[f64]>::to_vec))
        .collect()
}

fn iou(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let ra: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
    let rb: Vec<&[f64]> = b.iter().map(Vec::as_slice).collect();
    Ok(volumetric_soft_iou(&ra, &rb)?)
}

/// Interpolated area under the precision-recall curve.
pub fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return if hits.is_empty() { 1.0 } else { 0.0 };
    }
    let mut points = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        points.push((tp as f64 / positives as f64, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        if r > prev_recall {
            let best = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * best;
            prev_recall = r;
        }
    }
    ap
}

pub fn evaluate_sequence(name: &str, tracks: &[EvalTrack], gt: &GroundTruthClip) -> Result<SequenceMetrics> {
    let (frames, plane) = (gt.frames, gt.height * gt.width);
    for t in tracks {
        if t.masks.len() != frames {
            return Err(HarnessError::Eval(format!(
                "track {} covers {} frames, ground truth has {frames}",
                t.identity,
                t.masks.len()
            )));
        }
        if let Some(m) = t.masks.iter().flatten().find(|m| m.len() != plane) {
            return Err(HarnessError::Eval(format!(
                "track {} has a mask of {} pixels, ground truth has {plane}",
                t.identity,
                m.len()
            )));
        }
    }
    let pred: Vec<Vec<Vec<f64>>> = tracks
        .iter()
        .map(|t| filled(&t.masks.iter().map(|m| m.as_deref()).collect::<Vec<_>>(), plane))
        .collect();
    let instances: Vec<_> = gt.instances.iter().filter(|g| g.frames.iter().any(Option::is_some)).collect();
    let truth: Vec<Vec<Vec<f64>>> = instances
        .iter()
        .map(|g| filled(&g.frames.iter().map(|f| f.as_ref().map(|f| f.mask.as_slice())).collect::<Vec<_>>(), plane))
        .collect();
    let (ng, np) = (truth.len(), pred.len());
    let mut vol = Tensor::zeros(vec![ng, np]);
    for (i, g) in truth.iter().enumerate() {
        for (j, p) in pred.iter().enumerate() {
            vol.set(&[i, j], iou(g, p)?);
        }
    }
    let mut paired = vec![None; ng];
    if ng > 0 && np > 0 {
        let assignment = hungarian(&vol.map(|v| -v))?;
        for &(i, j) in &assignment.pairs {
            if vol.get(&[i, j]) > 0.0 {
                paired[i] = Some(j);
            }
        }
    }
    let mut detail = Vec::with_capacity(ng);
    for (i, g) in instances.iter().enumerate() {
        let mut present = 0;
        let mut correct = 0;
        for (t, _) in g.present_frames() {
            present += 1;
            let Some(j) = paired[i] else { continue };
            let frame_iou = |p: usize| iou(&truth[i][t..t + 1], &pred[p][t..t + 1]);
            let mine = frame_iou(j)?;
            let mut best = f64::NEG_INFINITY;
            for p in paired.iter().flatten() {
                best = best.max(frame_iou(*p)?);
            }
            if mine > 0.0 && mine >= best - 1e-12 {
                correct += 1;
            }
        }
        detail.push(IdentityDetail {
            identity: g.identity,
            track: paired[i].map(|j| tracks[j].identity),
            iou: paired[i].map_or(0.0, |j| vol.get(&[i, j])),
            present_frames: present,
            correct_frames: correct,
        });
    }
    let mut order: Vec<usize> = (0..np).collect();
    order.sort_by(|&a, &b| tracks[b].score.total_cmp(&tracks[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; ng];
    let mut hits = Vec::with_capacity(np);
    for &j in &order {
        let best = (0..ng)
            .filter(|&i| !taken[i] && instances[i].class_id == tracks[j].label)
            .map(|i| (i, vol.get(&[i, j])))
            .filter(|&(_, v)| v >= AP_IOU)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((i, _)) = best {
            taken[i] = true;
        }
        hits.push(best.is_some());
    }
    let present: usize = detail.iter().map(|d| d.present_frames).sum();
    let correct: usize = detail.iter().map(|d| d.correct_frames).sum();
    Ok(SequenceMetrics {
        name: name.into(),
        tracks: np,
        identities: ng,
        mean_iou: if ng == 0 { 1.0 } else { detail.iter().map(|d| d.iou).sum::<f64>() / ng as f64 },
        association: if present == 0 { 1.0 } else { correct as f64 / present as f64 },
        ap: average_precision(&hits, ng),
        detail,
    })
}

/// Pools per-sequence results.
pub fn aggregate(per_sequence: Vec<SequenceMetrics>) -> Metrics {
    let details = per_sequence.iter().flat_map(|s| &s.detail);
    let identities = per_sequence.iter().map(|s| s.identities).sum::<usize>();
    let present: usize = details.clone().map(|d| d.present_frames).sum();
    let correct: usize = details.clone().map(|d| d.correct_frames).sum();
    let iou_sum: f64 = details.map(|d| d.iou).sum();
    let n = per_sequence.len();
    Metrics {
        sequences: n,
        identities,
        mean_iou: if identities == 0 { 1.0 } else { iou_sum / identities as f64 },
        association: if present == 0 { 1.0 } else { correct as f64 / present as f64 },
        ap: if n == 0 { 0.0 } else { per_sequence.iter().map(|s| s.ap).sum::<f64>() / n as f64 },
        per_sequence,
    }
}
