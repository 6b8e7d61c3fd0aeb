use crate::error::{CoreError, Result};

/// Box and binary mask of an instance on one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct GtFrame {
    /// `(cx, cy, w, h)` normalized to `[0, 1]`.
    pub bbox: [f64; 4],
    /// Row-major `height * width` values in `{0, 1}`.
    pub mask: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtInstance {
    pub identity: usize,
    pub class_id: usize,
    /// One entry per frame; `None` where the instance is not visible.
    pub frames: Vec<Option<GtFrame>>,
}

impl GtInstance {
    pub fn present(&self, t: usize) -> bool {
        self.frames.get(t).is_some_and(Option::is_some)
    }

    pub fn present_frames(&self) -> impl Iterator<Item = (usize, &GtFrame)> {
        self.frames.iter().enumerate().filter_map(|(t, f)| f.as_ref().map(|f| (t, f)))
    }
}

/// Annotations of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<GtInstance>,
}

impl GroundTruthClip {
    pub fn empty(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            instances: Vec::new(),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for inst in &self.instances {
            let bad = |msg: String| Err(CoreError::Config(format!("instance {}: {msg}", inst.identity)));
            if inst.frames.len() != self.frames {
                return bad(format!("{} frame entries for a {}-frame clip", inst.frames.len(), self.frames));
            }
            if inst.class_id >= num_classes {
                return bad(format!("class {} out of range", inst.class_id));
            }
            for (t, f) in inst.present_frames() {
                if f.mask.len() != self.height * self.width {
                    return bad(format!("frame {t} mask has {} values", f.mask.len()));
                }
                if f.mask.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return bad(format!("frame {t} mask is not binary"));
                }
                if f.bbox.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return bad(format!("frame {t} box outside [0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// Frames `start..start + len`, dropping instances absent throughout.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let instances = self
            .instances
            .iter()
            .filter_map(|inst| {
                let frames: Vec<_> = inst.frames[start..start + len].to_vec();
                frames.iter().any(Option::is_some).then(|| GtInstance {
                    identity: inst.identity,
                    class_id: inst.class_id,
                    frames,
                })
            })
            .collect();
        Self {
            frames: len,
            height: self.height,
            width: self.width,
            instances,
        }
    }
}
