//! Clip manifests: per-clip predictions that `track` stitches.
//!
//! ```text
//! format name=clipseg-clips version=1
//! sequence frames=10 height=16 width=16
//! clip start=0 frames=6 instances=2 masks=clip0000.msk
//! instance local=0 label=1
//! frame score=0.95 probs=0.01,0.95,0.02,0.02 box=0.5,0.5,0.2,0.2
//! ...
//! ```
//!
//! Each `clip` is followed by `instances` `instance` records, each followed
//! by exactly `frames` `frame` records. The clip's MSK1 file holds one soft
//! mask per frame record, instance by instance.

use std::path::Path;

use clipseg_core::io::masks::{load_soft, save_soft};
use clipseg_core::io::SoftMask;
use clipseg_core::tracker::{ClipInstance, ClipResult, FrameRecord};

use crate::error::{parse_err, Result};
use crate::text::{expect_format, join, records};

const FORMAT: &str = "clipseg-clips";
pub const MANIFEST: &str = "clips.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMeta {
    pub score: f64,
    pub probs: Vec<f64>,
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMeta {
    pub local_id: usize,
    pub label: usize,
    pub frames: Vec<FrameMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipMeta {
    pub start: usize,
    pub frames: usize,
    pub masks: String,
    pub instances: Vec<InstanceMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipManifest {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub clips: Vec<ClipMeta>,
}

impl ClipManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("format name={FORMAT} version=1\n");
        s += &format!("sequence frames={} height={} width={}\n", self.frames, self.height, self.width);
        for c in &self.clips {
            s += &format!(
                "clip start={} frames={} instances={} masks={}\n",
                c.start,
                c.frames,
                c.instances.len(),
                c.masks
            );
            for inst in &c.instances {
                s += &format!("instance local={} label={}\n", inst.local_id, inst.label);
                for f in &inst.frames {
                    s += &format!("frame score={} probs={} box={}\n", f.score, join(&f.probs), join(&f.bbox));
                }
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let what = "clip manifest";
        let recs = records(text, what)?;
        expect_format(&recs, FORMAT, what)?;
        let head = recs.get(1).ok_or_else(|| parse_err(what, 0, "missing `sequence` record"))?;
        let v = head.expect("sequence", &["frames", "height", "width"])?;
        let mut m = Self {
            frames: head.usize(v[0])?,
            height: head.usize(v[1])?,
            width: head.usize(v[2])?,
            clips: Vec::new(),
        };
        let mut rest = recs[2..].iter();
        while let Some(r) = rest.next() {
            let v = r.expect("clip", &["start", "frames", "instances", "masks"])?;
            let (start, frames, count) = (r.usize(v[0])?, r.usize(v[1])?, r.usize(v[2])?);
            if frames == 0 || start.checked_add(frames).map_or(true, |end| end > m.frames) {
                return Err(r.err(format!("clip {start}+{frames} outside {} frames", m.frames)));
            }
            let mut clip = ClipMeta {
                start,
                frames,
                masks: r.file_name(v[3])?.to_string(),
                instances: Vec::new(),
            };
            for _ in 0..count {
                let ir = rest.next().ok_or_else(|| r.err(format!("clip declares {count} instances")))?;
                let iv = ir.expect("instance", &["local", "label"])?;
                let mut inst = InstanceMeta {
                    local_id: ir.usize(iv[0])?,
                    label: ir.usize(iv[1])?,
                    frames: Vec::with_capacity(frames),
                };
                for _ in 0..frames {
                    let fr = rest.next().ok_or_else(|| ir.err(format!("instance needs {frames} frames")))?;
                    let fv = fr.expect("frame", &["score", "probs", "box"])?;
                    inst.frames.push(FrameMeta {
                        score: fr.f64(fv[0])?,
                        probs: fr.list(fv[1])?,
                        bbox: fr.bbox(fv[2])?,
                    });
                }
                clip.instances.push(inst);
            }
            m.clips.push(clip);
        }
        Ok(m)
    }

    /// Manifest entries and mask lists for inferred clips; clip `i` uses
    /// mask file `clip{i:04}.msk`.
    pub fn from_clips(clips: &[ClipResult], frames: usize) -> Result<(Self, Vec<Vec<SoftMask>>)> {
        let (height, width) = clips.first().map_or((0, 0), |c| (c.height, c.width));
        let mut metas = Vec::with_capacity(clips.len());
        let mut masks = Vec::with_capacity(clips.len());
        for (i, c) in clips.iter().enumerate() {
            let mut soft = Vec::new();
            let instances = c
                .instances
                .iter()
                .map(|inst| {
                    let frames = inst
                        .frames
                        .iter()
                        .map(|r| {
                            soft.push(SoftMask::from_f64(c.height, c.width, &r.mask)?);
                            Ok(FrameMeta {
                                score: r.score,
                                probs: r.class_probs.clone(),
                                bbox: r.bbox,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(InstanceMeta {
                        local_id: inst.local_id,
                        label: inst.label,
                        frames,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            metas.push(ClipMeta {
                start: c.start,
                frames: c.frames,
                masks: format!("clip{i:04}.msk"),
                instances,
            });
            masks.push(soft);
        }
        Ok((
            Self {
                frames,
                height,
                width,
                clips: metas,
            },
            masks,
        ))
    }

    /// Rebuilds clip results from this manifest and each clip's masks.
    pub fn to_clips(&self, masks: &[Vec<SoftMask>]) -> Result<Vec<ClipResult>> {
        let what = "clip manifest";
        if masks.len() != self.clips.len() {
            return Err(parse_err(what, 0, format!("{} mask files for {} clips", masks.len(), self.clips.len())));
        }
        let mut out = Vec::with_capacity(self.clips.len());
        for (c, soft) in self.clips.iter().zip(masks) {
            let needed = c.instances.len() * c.frames;
            if soft.len() != needed {
                return Err(parse_err(what, 0, format!("{} holds {} masks, expected {needed}", c.masks, soft.len())));
            }
            let mut next = soft.iter();
            let instances = c
                .instances
                .iter()
                .map(|inst| {
                    let frames = inst
                        .frames
                        .iter()
                        .map(|f| {
                            let m = next.next().expect("count checked");
                            if (m.height, m.width) != (self.height, self.width) {
                                return Err(parse_err(what, 0, format!("{} has a {}x{} mask", c.masks, m.height, m.width)));
                            }
                            Ok(FrameRecord {
                                mask: m.to_f64(),
                                class_probs: f.probs.clone(),
                                score: f.score,
                                bbox: f.bbox,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(ClipInstance {
                        local_id: inst.local_id,
                        label: inst.label,
                        frames,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let clip = ClipResult {
                start: c.start,
                frames: c.frames,
                height: self.height,
                width: self.width,
                instances,
            };
            clip.validate()?;
            out.push(clip);
        }
        Ok(out)
    }
}

pub fn save_clips(dir: &Path, clips: &[ClipResult], frames: usize) -> Result<ClipManifest> {
    std::fs::create_dir_all(dir)?;
    let (manifest, masks) = ClipManifest::from_clips(clips, frames)?;
    for (c, m) in manifest.clips.iter().zip(&masks) {
        save_soft(dir.join(&c.masks), m)?;
    }
    std::fs::write(dir.join(MANIFEST), manifest.to_text())?;
    Ok(manifest)
}

pub fn load_clips(path: &Path) -> Result<(ClipManifest, Vec<ClipResult>)> {
    let manifest = ClipManifest::parse(&std::fs::read_to_string(path)?)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let masks = manifest
        .clips
        .iter()
        .map(|c| Ok(load_soft(dir.join(&c.masks))?))
        .collect::<Result<Vec<_>>>()?;
    let clips = manifest.to_clips(&masks)?;
    Ok((manifest, clips))
}
