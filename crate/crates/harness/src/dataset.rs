//! On-disk synthetic sequences.
//!
//! A sequence directory holds:
//!
//! - `level{l}.tsr`: encoded backbone level `l`, `[C_in, T, H_l, W_l]`
//! - `raw.tsr`: the raw map `[C_in, T, H/4, W/4]`
//! - `images.tsr`: shape-indicator images `[3, T, H, W]`
//! - `truth.json`: objects, presence and boxes (see [`TruthFile`])
//! - `truth.mskb`: bit-packed ground-truth masks of every present frame,
//!   instance by instance, in frame order

use std::path::Path;

use clipseg_core::io::masks::{load_binary, save_binary};
use clipseg_core::io::BinaryMask;
use clipseg_core::matching::{GroundTruthClip, GtFrame, GtInstance};
use clipseg_tensor::io as tsr;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::synth::{ObjectTrack, SyntheticSequence};

pub const TRUTH_JSON: &str = "truth.json";
pub const TRUTH_MASKS: &str = "truth.mskb";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthInstance {
    pub identity: usize,
    pub class: usize,
    /// `(cx, cy, w, h)` per frame, `null` where absent.
    pub boxes: Vec<Option<[f64; 4]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub canvas: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub levels: usize,
    pub objects: Vec<ObjectTrack>,
    pub instances: Vec<TruthInstance>,
}

fn truth_masks(gt: &GroundTruthClip) -> Vec<BinaryMask> {
    gt.instances
        .iter()
        .flat_map(|inst| inst.present_frames().map(|(_, f)| f))
        .map(|f| BinaryMask {
            height: gt.height,
            width: gt.width,
            bits: f.mask.iter().map(|&v| v >= 0.5).collect(),
        })
        .collect()
}

pub fn save_truth(dir: &Path, gt: &GroundTruthClip, canvas: usize, levels: usize, objects: &[ObjectTrack]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = TruthFile {
        canvas,
        frames: gt.frames,
        height: gt.height,
        width: gt.width,
        levels,
        objects: objects.to_vec(),
        instances: gt
            .instances
            .iter()
            .map(|i| TruthInstance {
                identity: i.identity,
                class: i.class_id,
                boxes: i.frames.iter().map(|f| f.as_ref().map(|f| f.bbox)).collect(),
            })
            .collect(),
    };
    std::fs::write(dir.join(TRUTH_JSON), serde_json::to_string_pretty(&file)?)?;
    save_binary(dir.join(TRUTH_MASKS), &truth_masks(gt))?;
    Ok(())
}

pub fn load_truth(dir: &Path) -> Result<(TruthFile, GroundTruthClip)> {
    let file: TruthFile = serde_json::from_str(&std::fs::read_to_string(dir.join(TRUTH_JSON))?)?;
    let masks = load_binary(dir.join(TRUTH_MASKS))?;
    let bad = |m: String| HarnessError::Eval(format!("{}: {m}", dir.display()));
    let mut next = masks.into_iter();
    let mut instances = Vec::with_capacity(file.instances.len());
    for inst in &file.instances {
        if inst.boxes.len() != file.frames {
            return Err(bad(format!("instance {} has {} frames", inst.identity, inst.boxes.len())));
        }
        let mut frames = Vec::with_capacity(file.frames);
        for b in &inst.boxes {
            frames.push(match b {
                None => None,
                Some(bbox) => {
                    let m = next.next().ok_or_else(|| bad("too few masks".into()))?;
                    if (m.height, m.width) != (file.height, file.width) {
                        return Err(bad(format!("mask is {}x{}", m.height, m.width)));
                    }
                    Some(GtFrame {
                        bbox: *bbox,
                        mask: m.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
                    })
                }
            });
        }
        instances.push(GtInstance {
            identity: inst.identity,
            class_id: inst.class,
            frames,
        });
    }
    if next.next().is_some() {
        return Err(bad("more masks than present frames".into()));
    }
    let gt = GroundTruthClip {
        frames: file.frames,
        height: file.height,
        width: file.width,
        instances,
    };
    Ok((file, gt))
}

pub fn save_sequence(dir: &Path, seq: &SyntheticSequence) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (l, t) in seq.levels.iter().enumerate() {
        tsr::save(dir.join(format!("level{l}.tsr")), t)?;
    }
    tsr::save(dir.join("raw.tsr"), &seq.raw)?;
    tsr::save(dir.join("images.tsr"), &seq.images)?;
    save_truth(dir, &seq.truth, seq.canvas, seq.levels.len(), &seq.objects)
}

pub fn load_sequence(dir: &Path) -> Result<SyntheticSequence> {
    let (file, truth) = load_truth(dir)?;
    let levels = (0..file.levels)
        .map(|l| Ok(tsr::load(dir.join(format!("level{l}.tsr")))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticSequence {
        canvas: file.canvas,
        objects: file.objects,
        images: tsr::load(dir.join("images.tsr"))?,
        levels,
        raw: tsr::load(dir.join("raw.tsr"))?,
        truth,
    })
}

/// Sequence directories under `root`, sorted by name.
pub fn list_sequences(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(TRUTH_JSON).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}
