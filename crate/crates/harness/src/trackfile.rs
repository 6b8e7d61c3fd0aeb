//! Track files.
//!
//! ```text
//! format name=clipseg-tracks version=1
//! sequence frames=10 height=16 width=16 masks=tracks.msk
//! track identity=0 label=1 score=0.93 records=10 active=true
//! frame t=0 score=0.95 mask=0 box=0.5,0.5,0.2,0.2
//! ...
//! ```
//!
//! Each `track` is followed by exactly `records` `frame` lines with strictly
//! increasing `t`. `mask` indexes the soft masks of the MSK1 file named by
//! `masks`, stored next to the track file. Tracks appear in identity order.

use std::path::Path;

use clipseg_core::io::masks::{load_soft, save_soft};
use clipseg_core::io::SoftMask;
use clipseg_core::tracker::TrackStore;

use crate::error::{parse_err, Result};
use crate::text::{expect_format, join, records};

const FORMAT: &str = "clipseg-tracks";

#[derive(Clone, Debug, PartialEq)]
pub struct FrameEntry {
    pub t: usize,
    pub score: f64,
    pub mask: usize,
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackEntry {
    pub identity: usize,
    pub label: usize,
    pub score: f64,
    pub active: bool,
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackFile {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub masks: String,
    pub tracks: Vec<TrackEntry>,
}

impl TrackFile {
    /// Track file and its masks for a stitched store over `frames` frames.
    pub fn from_store(store: &TrackStore, frames: usize, height: usize, width: usize, masks: &str) -> Result<(Self, Vec<SoftMask>)> {
        let mut soft = Vec::new();
        let mut tracks = Vec::new();
        let mut sorted: Vec<_> = store.tracks.iter().collect();
        sorted.sort_by_key(|t| t.identity);
        for tr in sorted {
            let mut fr = Vec::with_capacity(tr.records.len());
            for (&t, rec) in &tr.records {
                fr.push(FrameEntry {
                    t,
                    score: rec.score,
                    mask: soft.len(),
                    bbox: rec.bbox,
                });
                soft.push(SoftMask::from_f64(height, width, &rec.mask)?);
            }
            tracks.push(TrackEntry {
                identity: tr.identity,
                label: tr.label,
                score: tr.mean_score(),
                active: tr.active,
                frames: fr,
            });
        }
        let file = Self {
            frames,
            height,
            width,
            masks: masks.into(),
            tracks,
        };
        file.validate(soft.len())?;
        Ok((file, soft))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("format name={FORMAT} version=1\n");
        s += &format!(
            "sequence frames={} height={} width={} masks={}\n",
            self.frames, self.height, self.width, self.masks
        );
        for tr in &self.tracks {
            s += &format!(
                "track identity={} label={} score={} records={} active={}\n",
                tr.identity,
                tr.label,
                tr.score,
                tr.frames.len(),
                tr.active
            );
            for f in &tr.frames {
                s += &format!("frame t={} score={} mask={} box={}\n", f.t, f.score, f.mask, join(&f.bbox));
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let what = "track file";
        let recs = records(text, what)?;
        expect_format(&recs, FORMAT, what)?;
        let head = recs.get(1).ok_or_else(|| parse_err(what, 0, "missing `sequence` record"))?;
        let v = head.expect("sequence", &["frames", "height", "width", "masks"])?;
        let mut file = Self {
            frames: head.usize(v[0])?,
            height: head.usize(v[1])?,
            width: head.usize(v[2])?,
            masks: head.file_name(v[3])?.to_string(),
            tracks: Vec::new(),
        };
        let mut rest = recs[2..].iter();
        while let Some(r) = rest.next() {
            let v = r.expect("track", &["identity", "label", "score", "records", "active"])?;
            let count = r.usize(v[3])?;
            let mut tr = TrackEntry {
                identity: r.usize(v[0])?,
                label: r.usize(v[1])?,
                score: r.f64(v[2])?,
                active: r.bool(v[4])?,
                frames: Vec::with_capacity(count.min(file.frames)),
            };
            for _ in 0..count {
                let f = rest.next().ok_or_else(|| r.err(format!("track declares {count} records")))?;
                let fv = f.expect("frame", &["t", "score", "mask", "box"])?;
                tr.frames.push(FrameEntry {
                    t: f.usize(fv[0])?,
                    score: f.f64(fv[1])?,
                    mask: f.usize(fv[2])?,
                    bbox: f.bbox(fv[3])?,
                });
            }
            file.tracks.push(tr);
        }
        file.validate(usize::MAX)?;
        Ok(file)
    }

    /// Structural checks; `masks` is the number of available masks.
    pub fn validate(&self, masks: usize) -> Result<()> {
        let what = "track file";
        let mut last_id = None;
        for tr in &self.tracks {
            if last_id.is_some_and(|id| tr.identity <= id) {
                return Err(parse_err(what, 0, format!("identity {} out of order", tr.identity)));
            }
            last_id = Some(tr.identity);
            let mut prev = None;
            for f in &tr.frames {
                if f.t >= self.frames || prev.is_some_and(|p| f.t <= p) {
                    return Err(parse_err(what, 0, format!("track {} has frame {} out of order", tr.identity, f.t)));
                }
                if f.mask >= masks {
                    return Err(parse_err(what, 0, format!("mask index {} of {masks}", f.mask)));
                }
                prev = Some(f.t);
            }
        }
        Ok(())
    }

    /// Per-track, per-frame soft masks (`None` where a track has no record).
    pub fn track_masks(&self, masks: &[SoftMask]) -> Result<Vec<Vec<Option<Vec<f64>>>>> {
        self.validate(masks.len())?;
        let mut out = Vec::with_capacity(self.tracks.len());
        for tr in &self.tracks {
            let mut per = vec![None; self.frames];
            for f in &tr.frames {
                let m = &masks[f.mask];
                if (m.height, m.width) != (self.height, self.width) {
                    return Err(parse_err("track file", 0, format!("mask {} is {}x{}", f.mask, m.height, m.width)));
                }
                per[f.t] = Some(m.to_f64());
            }
            out.push(per);
        }
        Ok(out)
    }
}

/// Writes `tracks.txt` and its mask file into `dir`.
pub fn save_tracks(dir: &Path, store: &TrackStore, frames: usize, height: usize, width: usize) -> Result<TrackFile> {
    std::fs::create_dir_all(dir)?;
    let (file, masks) = TrackFile::from_store(store, frames, height, width, "tracks.msk")?;
    save_soft(dir.join(&file.masks), &masks)?;
    std::fs::write(dir.join("tracks.txt"), file.to_text())?;
    Ok(file)
}

/// Reads a track file and the masks it references.
pub fn load_tracks(path: &Path) -> Result<(TrackFile, Vec<SoftMask>)> {
    let file = TrackFile::parse(&std::fs::read_to_string(path)?)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let masks = load_soft(dir.join(&file.masks))?;
    file.validate(masks.len())?;
    Ok((file, masks))
}
