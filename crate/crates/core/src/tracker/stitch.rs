use std::collections::BTreeMap;
use std::ops::Range;

use clipseg_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::matching::hungarian;
use crate::tracker::iou::volumetric_soft_iou;

/// Prediction for one instance on one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    /// Soft mask, row-major, values in `[0, 1]`.
    pub mask: Vec<f64>,
    pub class_probs: Vec<f64>,
    pub score: f64,
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipInstance {
    pub local_id: usize,
    pub label: usize,
    /// One record per frame of the clip.
    pub frames: Vec<FrameRecord>,
}

impl ClipInstance {
    pub fn mean_score(&self) -> f64 {
        mean(self.frames.iter().map(|r| r.score))
    }
}

/// Instances predicted on frames `start .. start + frames` of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipResult {
    pub start: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<ClipInstance>,
}

impl ClipResult {
    /// First and last frame, inclusive.
    pub fn span(&self) -> (usize, usize) {
        (self.start, self.start + self.frames - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::Stitch(msg));
        if self.frames == 0 {
            return bad("clip has no frames".into());
        }
        for inst in &self.instances {
            if inst.frames.len() != self.frames {
                return bad(format!("instance {} has {} frames, clip {}", inst.local_id, inst.frames.len(), self.frames));
            }
            for r in &inst.frames {
                if r.mask.len() != self.height * self.width {
                    return bad(format!("instance {} mask has {} pixels", inst.local_id, r.mask.len()));
                }
                if r.mask.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return bad(format!("instance {} mask outside [0, 1]", inst.local_id));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub identity: usize,
    pub label: usize,
    pub records: BTreeMap<usize, FrameRecord>,
    /// Only active tracks take part in stitching.
    pub active: bool,
}

impl Track {
    pub fn mean_score(&self) -> f64 {
        mean(self.records.values().map(|r| r.score))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StitchWeights {
    pub mask: f64,
    pub class: f64,
    pub score: f64,
    /// Matches costlier than this open a new identity instead.
    pub max_cost: Option<f64>,
}

impl Default for StitchWeights {
    fn default() -> Self {
        Self {
            mask: 1.0,
            class: 1.0,
            score: 1.0,
            max_cost: None,
        }
    }
}

impl StitchWeights {
    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            mask: self.mask * alpha,
            class: self.class * alpha,
            score: self.score * alpha,
            max_cost: self.max_cost.map(|c| c * alpha),
        }
    }
}

/// Weighted sum of the three cues given their raw values.
pub fn cue_cost(soft_iou: f64, class_a: usize, class_b: usize, score_a: f64, score_b: f64, w: &StitchWeights) -> f64 {
    let class = if class_a == class_b { -1.0 } else { 0.0 };
    w.mask * -soft_iou + w.class * class + w.score * (score_a - score_b).abs()
}

/// Cost of continuing `track` with `inst` of a clip starting at `clip_start`,
/// comparing masks over the absolute frames `overlap`.
pub fn stitch_cost(
    track: &Track,
    inst: &ClipInstance,
    clip_start: usize,
    overlap: Range<usize>,
    w: &StitchWeights,
) -> Result<f64> {
    if overlap.is_empty() || overlap.start < clip_start {
        return Err(CoreError::Stitch(format!(
            "no overlap between the track and the clip at frame {clip_start}; clip stride must be below clip length"
        )));
    }
    let mut a = Vec::with_capacity(overlap.len());
    let mut b = Vec::with_capacity(overlap.len());
    for t in overlap {
        let rec = track
            .records
            .get(&t)
            .ok_or_else(|| CoreError::Stitch(format!("track {} has no record on frame {t}", track.identity)))?;
        let new = inst
            .frames
            .get(t - clip_start)
            .ok_or_else(|| CoreError::Stitch(format!("instance {} has no frame {t}", inst.local_id)))?;
        a.push(rec.mask.as_slice());
        b.push(new.mask.as_slice());
    }
    let iou = volumetric_soft_iou(&a, &b)?;
    Ok(cue_cost(iou, track.label, inst.label, track.mean_score(), inst.mean_score(), w))
}

/// What one stitch did: `(identity, instance index)` pairs and new identities.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StitchOutcome {
    pub matched: Vec<(usize, usize)>,
    pub opened: Vec<usize>,
}

/// Identities accumulated over a sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackStore {
    pub tracks: Vec<Track>,
    next_identity: usize,
    /// Last frame covered so far.
    frontier: Option<usize>,
}

impl TrackStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frontier(&self) -> Option<usize> {
        self.frontier
    }

    pub fn num_identities(&self) -> usize {
        self.tracks.len()
    }

    pub fn track(&self, identity: usize) -> Option<&Track> {
        self.tracks.iter().find(|t| t.identity == identity)
    }

    fn open(&mut self, inst: &ClipInstance, start: usize) -> usize {
        let identity = self.next_identity;
        self.next_identity += 1;
        self.tracks.push(Track {
            identity,
            label: inst.label,
            records: inst.frames.iter().cloned().enumerate().map(|(i, r)| (start + i, r)).collect(),
            active: true,
        });
        identity
    }

    /// Associates the instances of `next` with the active tracks.
    pub fn stitch(&mut self, next: &ClipResult, w: &StitchWeights) -> Result<StitchOutcome> {
        next.validate()?;
        let (first, last) = next.span();
        let mut outcome = StitchOutcome::default();
        let Some(frontier) = self.frontier else {
            for inst in &next.instances {
                outcome.opened.push(self.open(inst, first));
            }
            self.frontier = Some(last);
            return Ok(outcome);
        };
        if first > frontier || last <= frontier {
            return Err(CoreError::Stitch(format!(
                "clip {first}..={last} does not overlap the tracked frames and extend past frame {frontier}"
            )));
        }
        let active: Vec<usize> = (0..self.tracks.len()).filter(|&i| self.tracks[i].active).collect();
        let mut cost = Tensor::zeros(vec![active.len(), next.instances.len()]);
        for (r, &ti) in active.iter().enumerate() {
            for (c, inst) in next.instances.iter().enumerate() {
                cost.set(&[r, c], stitch_cost(&self.tracks[ti], inst, first, first..frontier + 1, w)?);
            }
        }
        let assignment = hungarian(&cost)?;
        let mut taken = vec![false; next.instances.len()];
        let mut extended = vec![false; active.len()];
        for &(r, c) in &assignment.pairs {
            if w.max_cost.is_some_and(|m| cost.get(&[r, c]) > m) {
                continue;
            }
            let track = &mut self.tracks[active[r]];
            for (i, rec) in next.instances[c].frames.iter().enumerate() {
                track.records.entry(first + i).or_insert_with(|| rec.clone());
            }
            taken[c] = true;
            extended[r] = true;
            outcome.matched.push((track.identity, c));
        }
        for (r, &ti) in active.iter().enumerate() {
            self.tracks[ti].active = extended[r];
        }
        for (c, inst) in next.instances.iter().enumerate() {
            if !taken[c] {
                outcome.opened.push(self.open(inst, first));
            }
        }
        self.frontier = Some(last);
        Ok(outcome)
    }
}

/// Stitches clips in order into a fresh store.
pub fn stitch_sequence(clips: &[ClipResult], w: &StitchWeights) -> Result<TrackStore> {
    let mut store = TrackStore::new();
    for clip in clips {
        store.stitch(clip, w)?;
    }
    Ok(store)
}
