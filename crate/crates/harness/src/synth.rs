//! Synthetic moving-shape sequences and the fixed projection backbone.

use clipseg_core::matching::{GroundTruthClip, GtFrame, GtInstance};
use clipseg_core::model::ClipInput;
use clipseg_core::FeatureClip;
use clipseg_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

/// Shape classes; the class id is the position in [`Shape::ALL`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn class_id(self) -> usize {
        self as usize
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of radius `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            // apex up, base of width 2r at the bottom
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
        }
    }

    /// Distance from the centre to the farthest covered point.
    pub fn extent(self, r: f64) -> f64 {
        match self {
            Shape::Circle => r,
            Shape::Square => 0.85 * r * std::f64::consts::SQRT_2,
            Shape::Triangle => r * std::f64::consts::SQRT_2,
        }
    }
}

/// Generation parameters for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSpec {
    pub canvas: usize,
    pub frames: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub size_min: f64,
    pub size_max: f64,
    pub speed: f64,
    pub occlusion: bool,
    pub visibility: f64,
    pub backbone: Backbone,
}

impl SequenceSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let d = &cfg.data;
        Self {
            canvas: d.canvas,
            frames: d.frames,
            objects_min: d.objects_min,
            objects_max: d.objects_max,
            size_min: d.size_min,
            size_max: d.size_max,
            speed: d.speed,
            occlusion: d.occlusion,
            visibility: d.visibility,
            backbone: if d.learnable_backbone {
                Backbone::identity(d.canvas / d.finest_stride, cfg.model.levels, d.canvas / 4)
            } else {
                Backbone::new(
                    cfg.model.input_channels,
                    d.canvas / d.finest_stride,
                    cfg.model.levels,
                    d.canvas / 4,
                    d.backbone_seed,
                )
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Spec(m));
        if self.frames == 0 || self.canvas == 0 || self.canvas % 4 != 0 {
            return fail(format!("{} frames on a {} canvas", self.frames, self.canvas));
        }
        if self.objects_min > self.objects_max {
            return fail("objects_min exceeds objects_max".into());
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max) {
            return fail(format!("bad size range {}..{}", self.size_min, self.size_max));
        }
        if 2.0 * (self.size_max + 1.0) >= self.canvas as f64 {
            return fail(format!(
                "objects of radius {} do not fit on a {} canvas",
                self.size_max, self.canvas
            ));
        }
        if !(self.speed >= 0.0 && self.speed < self.canvas as f64) {
            return fail(format!("speed {} out of range", self.speed));
        }
        let b = &self.backbone;
        if self.canvas % b.finest != 0 || b.finest % (1 << (b.levels - 1)) != 0 || self.canvas / 4 != b.raw {
            return fail("backbone pyramid does not divide the canvas".into());
        }
        Ok(())
    }
}

/// Fixed random projection of the shape-indicator image pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub channels: usize,
    /// Side of the finest encoded level.
    pub finest: usize,
    pub levels: usize,
    /// Side of the raw map.
    pub raw: usize,
    /// One `[channels, 3]` matrix per level, then one for the raw map.
    pub projections: Vec<Tensor>,
}

impl Backbone {
    pub fn new(channels: usize, finest: usize, levels: usize, raw: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projections = (0..=levels)
            .map(|_| Tensor::randn(vec![channels, Shape::ALL.len()], 1.0, &mut rng))
            .collect();
        Self {
            channels,
            finest,
            levels,
            raw,
            projections,
        }
    }

    /// Pass-through of the pooled shape channels.
    pub fn identity(finest: usize, levels: usize, raw: usize) -> Self {
        let k = Shape::ALL.len();
        let eye = Tensor::new(vec![k, k], (0..k * k).map(|i| if i % (k + 1) == 0 { 1.0 } else { 0.0 }).collect())
            .expect("square");
        Self {
            channels: k,
            finest,
            levels,
            raw,
            projections: vec![eye; levels + 1],
        }
    }

    /// Projects average-pooled `[3, T, H, W]` images to `[channels, T, s, s]`.
    fn project(&self, images: &Tensor, side: usize, proj: &Tensor) -> Tensor {
        let s = images.shape();
        let (k, t, h) = (s[0], s[1], s[2]);
        let f = h / side;
        let area = (f * f) as f64;
        let mut pooled = vec![0.0; k * t * side * side];
        for c in 0..k {
            for fr in 0..t {
                for y in 0..h {
                    for x in 0..h {
                        let v = images.data()[((c * t + fr) * h + y) * h + x];
                        pooled[((c * t + fr) * side + y / f) * side + x / f] += v / area;
                    }
                }
            }
        }
        let plane = t * side * side;
        let mut out = vec![0.0; self.channels * plane];
        for o in 0..self.channels {
            for c in 0..k {
                let w = proj.data()[o * k + c];
                for i in 0..plane {
                    out[o * plane + i] += w * pooled[c * plane + i];
                }
            }
        }
        Tensor::new(vec![self.channels, t, side, side], out).expect("projection shape")
    }

    /// Encoded levels (finest first) and the raw map.
    pub fn features(&self, images: &Tensor) -> (Vec<Tensor>, Tensor) {
        let levels = (0..self.levels)
            .map(|l| self.project(images, self.finest >> l, &self.projections[l]))
            .collect();
        let raw = self.project(images, self.raw, &self.projections[self.levels]);
        (levels, raw)
    }
}

/// One moving object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub identity: usize,
    pub shape: Shape,
    pub radius: f64,
    /// Centre per frame in canvas pixels `(x, y)`.
    pub centers: Vec<[f64; 2]>,
    /// Visible fraction of the object's area per frame.
    pub visibility: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub canvas: usize,
    pub objects: Vec<ObjectTrack>,
    /// Shape-indicator images `[3, T, canvas, canvas]`.
    pub images: Tensor,
    /// Encoded levels `[C_in, T, H_l, W_l]`, finest first.
    pub levels: Vec<Tensor>,
    /// `[C_in, T, canvas/4, canvas/4]`
    pub raw: Tensor,
    /// Masks and boxes at `canvas / 4`.
    pub truth: GroundTruthClip,
}

/// Which object owns each canvas pixel of frame `t` (later objects on top).
fn owners(objects: &[ObjectTrack], t: usize, canvas: usize) -> Vec<Option<usize>> {
    let mut own = vec![None; canvas * canvas];
    for (i, o) in objects.iter().enumerate() {
        let [cx, cy] = o.centers[t];
        let r = o.radius;
        let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
        let y1 = ((cy + r + 1.0).ceil() as usize).min(canvas);
        let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
        let x1 = ((cx + r + 1.0).ceil() as usize).min(canvas);
        for y in y0..y1 {
            for x in x0..x1 {
                if o.shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                    own[y * canvas + x] = Some(i);
                }
            }
        }
    }
    own
}

/// Pixel count of an unoccluded object on frame `t`.
pub fn full_area(o: &ObjectTrack, t: usize, canvas: usize) -> usize {
    owners(std::slice::from_ref(o), t, canvas).iter().filter(|p| p.is_some()).count()
}

fn trajectory(rng: &mut ChaCha8Rng, spec: &SequenceSpec, r: f64) -> Vec<[f64; 2]> {
    let lo = r + 1.0;
    let hi = spec.canvas as f64 - r - 1.0;
    let mut p = [rng.random_range(lo..=hi), rng.random_range(lo..=hi)];
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = spec.speed * rng.random_range(0.5..=1.0);
    let mut v = [speed * angle.cos(), speed * angle.sin()];
    let mut out = Vec::with_capacity(spec.frames);
    for _ in 0..spec.frames {
        out.push(p);
        for a in 0..2 {
            p[a] += v[a];
            // reflect off the margins
            if p[a] < lo {
                p[a] = 2.0 * lo - p[a];
                v[a] = -v[a];
            } else if p[a] > hi {
                p[a] = 2.0 * hi - p[a];
                v[a] = -v[a];
            }
            p[a] = p[a].clamp(lo, hi);
        }
    }
    out
}

fn overlaps(a: &ObjectTrack, b: &ObjectTrack) -> bool {
    a.centers.iter().zip(&b.centers).any(|(p, q)| {
        let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        d <= a.shape.extent(a.radius) + b.shape.extent(b.radius) + 1.0
    })
}

/// Places objects for a sequence. Without occlusion, placements that touch
/// an earlier object are redrawn.
fn place_objects(rng: &mut ChaCha8Rng, spec: &SequenceSpec) -> Result<Vec<ObjectTrack>> {
    let count = rng.random_range(spec.objects_min..=spec.objects_max);
    let mut objects: Vec<ObjectTrack> = Vec::with_capacity(count);
    for identity in 0..count {
        let mut placed = None;
        for _ in 0..200 {
            let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
            let radius = rng.random_range(spec.size_min..=spec.size_max);
            let o = ObjectTrack {
                identity,
                shape,
                radius,
                centers: trajectory(rng, spec, radius),
                visibility: Vec::new(),
            };
            if spec.occlusion || objects.iter().all(|p| !overlaps(p, &o)) {
                placed = Some(o);
                break;
            }
        }
        objects.push(placed.ok_or_else(|| {
            HarnessError::Spec(format!("could not place {count} non-overlapping objects"))
        })?);
    }
    Ok(objects)
}

/// Renders objects with known trajectories into a sequence.
pub fn render(spec: &SequenceSpec, mut objects: Vec<ObjectTrack>) -> Result<SyntheticSequence> {
    spec.validate()?;
    let (canvas, frames) = (spec.canvas, spec.frames);
    for o in &objects {
        if o.centers.len() != frames {
            return Err(HarnessError::Spec(format!(
                "object {} has {} centres for {frames} frames",
                o.identity,
                o.centers.len()
            )));
        }
        let (lo, hi) = (o.radius, canvas as f64 - o.radius);
        if o.centers.iter().any(|c| c.iter().any(|v| !(lo..=hi).contains(v))) {
            return Err(HarnessError::Spec(format!("object {} leaves the canvas", o.identity)));
        }
    }
    let side = canvas / 4;
    let plane = canvas * canvas;
    let mut images = vec![0.0; Shape::ALL.len() * frames * plane];
    let mut gt: Vec<GtInstance> = objects
        .iter()
        .map(|o| GtInstance {
            identity: o.identity,
            class_id: o.shape.class_id(),
            frames: Vec::with_capacity(frames),
        })
        .collect();
    for o in objects.iter_mut() {
        o.visibility.clear();
    }
    for t in 0..frames {
        let own = owners(&objects, t, canvas);
        for (px, who) in own.iter().enumerate() {
            if let Some(i) = who {
                let c = objects[*i].shape.class_id();
                images[(c * frames + t) * plane + px] = 1.0;
            }
        }
        for (i, o) in objects.iter_mut().enumerate() {
            let full = full_area(o, t, canvas);
            let mut count = 0usize;
            let mut block = vec![0usize; side * side];
            let (mut x0, mut y0, mut x1, mut y1) = (canvas, canvas, 0, 0);
            for y in 0..canvas {
                for x in 0..canvas {
                    if own[y * canvas + x] == Some(i) {
                        count += 1;
                        block[(y / 4) * side + x / 4] += 1;
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x + 1);
                        y1 = y1.max(y + 1);
                    }
                }
            }
            let vis = if full == 0 { 0.0 } else { count as f64 / full as f64 };
            o.visibility.push(vis);
            let present = vis >= spec.visibility && block.iter().any(|&n| n >= 8);
            gt[i].frames.push(present.then(|| {
                let c = canvas as f64;
                GtFrame {
                    bbox: [
                        (x0 + x1) as f64 / (2.0 * c),
                        (y0 + y1) as f64 / (2.0 * c),
                        (x1 - x0) as f64 / c,
                        (y1 - y0) as f64 / c,
                    ],
                    mask: block.iter().map(|&n| if n >= 8 { 1.0 } else { 0.0 }).collect(),
                }
            }));
        }
    }
    let images = Tensor::new(vec![Shape::ALL.len(), frames, canvas, canvas], images)?;
    let (levels, raw) = spec.backbone.features(&images);
    Ok(SyntheticSequence {
        canvas,
        objects,
        images,
        levels,
        raw,
        truth: GroundTruthClip {
            frames,
            height: side,
            width: side,
            instances: gt,
        },
    })
}

/// Deterministic in `seed`.
pub fn generate_sequence(seed: u64, spec: &SequenceSpec) -> Result<SyntheticSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = place_objects(&mut rng, spec)?;
    render(spec, objects)
}

/// Seed of sequence `index` in a dataset seeded with `base`.
pub fn sequence_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// `count` sequences from `cfg`, numbered from `first`.
pub fn generate_dataset(cfg: &RunConfig, first: usize, count: usize) -> Result<Vec<SyntheticSequence>> {
    let spec = SequenceSpec::from_config(cfg);
    (first..first + count)
        .map(|i| generate_sequence(sequence_seed(cfg.data.seed, i), &spec))
        .collect()
}

fn frame_slice(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = x.shape();
    let (c, t, plane) = (s[0], s[1], s[2] * s[3]);
    if start + len > t {
        return Err(HarnessError::Spec(format!("frames {start}..{} of {t}", start + len)));
    }
    let mut data = Vec::with_capacity(c * len * plane);
    for ch in 0..c {
        let base = (ch * t + start) * plane;
        data.extend_from_slice(&x.data()[base..base + len * plane]);
    }
    Ok(Tensor::new(vec![c, len, s[2], s[3]], data)?)
}

impl SyntheticSequence {
    pub fn frames(&self) -> usize {
        self.truth.frames
    }

    /// Model input for frames `start..start + len`.
    pub fn clip(&self, start: usize, len: usize) -> Result<ClipInput> {
        let levels = self
            .levels
            .iter()
            .map(|l| frame_slice(l, start, len))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClipInput {
            features: FeatureClip::new(levels)?,
            raw: frame_slice(&self.raw, start, len)?,
        })
    }

    pub fn truth_window(&self, start: usize, len: usize) -> GroundTruthClip {
        self.truth.window(start, len)
    }
}
