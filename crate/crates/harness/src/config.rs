//! Run configuration.
//!
//! Grammar of a config file, one entry per line:
//!
//! ```text
//! file    := line*
//! line    := blank | comment | entry
//! comment := '#' <anything>
//! entry   := key '=' value [comment]
//! key     := segment ('.' segment)*      segment := [a-z][a-z0-9_]*
//! value   := any non-empty text without '#', surrounding spaces trimmed
//! ```
//!
//! Keys may appear at most once per file. Unknown keys are rejected.
//! Command-line overrides use the same `key=value` form and are applied in
//! order after the file, so later overrides win.
//!
//! Recognised keys and their defaults are listed by [`RunConfig::to_pairs`]
//! (`clipseg config` prints them).

use std::collections::BTreeSet;

use clipseg_core::matching::{aux_schedule, LossWeights};
use clipseg_core::model::ModelConfig;
use clipseg_core::tracker::StitchWeights;

use crate::error::{parse_err, HarnessError, Result};

/// One `key = value` entry with its 1-based source line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key.split('.').all(|seg| {
            let mut chars = seg.chars();
            matches!(chars.next(), Some('a'..='z'))
                && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        })
}

fn parse_entry(text: &str, line: usize, what: &'static str) -> Result<Entry> {
    let Some((key, value)) = text.split_once('=') else {
        return Err(parse_err(what, line, "expected `key = value`"));
    };
    let (key, value) = (key.trim(), value.trim());
    if !valid_key(key) {
        return Err(parse_err(what, line, format!("invalid key {key:?}")));
    }
    if value.is_empty() {
        return Err(parse_err(what, line, format!("empty value for {key}")));
    }
    Ok(Entry {
        key: key.into(),
        value: value.into(),
        line,
    })
}

/// Parses config text into entries, in file order.
pub fn parse_config(text: &str) -> Result<Vec<Entry>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split_once('#').map_or(raw, |(b, _)| b).trim();
        if body.is_empty() {
            continue;
        }
        let e = parse_entry(body, line, "config")?;
        if !seen.insert(e.key.clone()) {
            return Err(parse_err("config", line, format!("duplicate key {}", e.key)));
        }
        out.push(e);
    }
    Ok(out)
}

/// Parses one `--set key=value` override.
pub fn parse_override(text: &str) -> Result<Entry> {
    if text.contains('#') || text.contains('\n') {
        return Err(parse_err("override", 0, "`#` and newlines are not allowed"));
    }
    parse_entry(text, 0, "override")
}

/// Synthetic data parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Canvas side in pixels; masks and the raw map live at `canvas / 4`.
    pub canvas: usize,
    /// Frames per sequence.
    pub frames: usize,
    pub sequences: usize,
    /// Downsampling of the finest encoded level; each further level halves.
    pub finest_stride: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Object radius range in canvas pixels.
    pub size_min: f64,
    pub size_max: f64,
    /// Maximum speed in canvas pixels per frame.
    pub speed: f64,
    /// Allow objects to overlap (later objects are drawn on top).
    pub occlusion: bool,
    /// Visible fraction below which an object counts as absent.
    pub visibility: f64,
    pub seed: u64,
    pub backbone_seed: u64,
    /// Feed pooled shape channels straight to the model so the layers
    /// reading them act as a learned backbone; otherwise a fixed seeded
    /// projection sits in front.
    pub learnable_backbone: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            frames: 10,
            sequences: 8,
            finest_stride: 4,
            objects_min: 2,
            objects_max: 3,
            size_min: 6.0,
            size_max: 9.0,
            speed: 2.5,
            occlusion: true,
            visibility: 0.1,
            seed: 0,
            backbone_seed: 7,
            learnable_backbone: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Rate for the layers reading backbone features when the backbone is learnable.
    pub lr_backbone: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Fractions of `iterations` at which the rates are multiplied by `decay_factor`.
    pub decay_at: Vec<f64>,
    pub decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 1e-4,
            lr_backbone: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 0.1,
            decay_at: vec![0.6, 0.9],
            decay_factor: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub model_seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    /// Clip stride `S`.
    pub stride: usize,
    pub loss: LossWeights,
    pub stitch: StitchWeights,
    /// Trajectories kept per clip.
    pub top_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let loss = LossWeights::new(model.dec_layers);
        Self {
            model,
            model_seed: 0,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            stride: 4,
            loss,
            stitch: StitchWeights::default(),
            top_k: 10,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {v:?}")))
}

fn list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn bool_value(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(HarnessError::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults overridden by a config file's text and then by overrides.
    pub fn load(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut entries = match text {
            Some(t) => parse_config(t)?,
            None => Vec::new(),
        };
        for o in overrides {
            entries.push(parse_override(o)?);
        }
        Self::from_entries(&entries)
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut cfg = Self::default();
        // the aux schedule follows the decoder depth unless set explicitly
        let mut aux_set = false;
        for e in entries {
            cfg.set(&e.key, &e.value).map_err(|err| match err {
                HarnessError::Config(msg) if e.line > 0 => parse_err("config", e.line, msg),
                other => other,
            })?;
            aux_set |= e.key == "loss.aux";
        }
        if !aux_set {
            cfg.loss.aux = aux_schedule(cfg.model.dec_layers);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: impl IntoIterator<Item = (K, V)>) -> Result<Self> {
        let entries: Vec<Entry> = pairs
            .into_iter()
            .map(|(k, v)| Entry {
                key: k.as_ref().into(),
                value: v.as_ref().into(),
                line: 0,
            })
            .collect();
        Self::from_entries(&entries)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "model.hidden" => m.hidden = num(key, v)?,
            "model.heads" => m.heads = num(key, v)?,
            "model.levels" => m.levels = num(key, v)?,
            "model.clip_frames" => m.frames = num(key, v)?,
            "model.enc_layers" => m.enc_layers = num(key, v)?,
            "model.dec_layers" => m.dec_layers = num(key, v)?,
            "model.queries" => m.queries_per_frame = num(key, v)?,
            "model.classes" => m.num_classes = num(key, v)?,
            "model.k_curr" => m.k_curr = num(key, v)?,
            "model.k_temp" => m.k_temp = num(key, v)?,
            "model.ffn_hidden" => m.ffn_hidden = num(key, v)?,
            "model.input_channels" => m.input_channels = num(key, v)?,
            "model.mask_width" => m.mask_width = num(key, v)?,
            "model.mdc_kernel" => m.mdc_kernel = num(key, v)?,
            "model.seed" => self.model_seed = num(key, v)?,
            "data.canvas" => d.canvas = num(key, v)?,
            "data.frames" => d.frames = num(key, v)?,
            "data.sequences" => d.sequences = num(key, v)?,
            "data.finest_stride" => d.finest_stride = num(key, v)?,
            "data.objects_min" => d.objects_min = num(key, v)?,
            "data.objects_max" => d.objects_max = num(key, v)?,
            "data.size_min" => d.size_min = num(key, v)?,
            "data.size_max" => d.size_max = num(key, v)?,
            "data.speed" => d.speed = num(key, v)?,
            "data.occlusion" => d.occlusion = bool_value(key, v)?,
            "data.visibility" => d.visibility = num(key, v)?,
            "data.seed" => d.seed = num(key, v)?,
            "data.backbone_seed" => d.backbone_seed = num(key, v)?,
            "data.learnable_backbone" => d.learnable_backbone = bool_value(key, v)?,
            "train.iterations" => t.iterations = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.lr_backbone" => t.lr_backbone = num(key, v)?,
            "train.beta1" => t.beta1 = num(key, v)?,
            "train.beta2" => t.beta2 = num(key, v)?,
            "train.eps" => t.eps = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.clip_norm" => t.clip_norm = num(key, v)?,
            "train.decay_at" => t.decay_at = list(key, v)?,
            "train.decay_factor" => t.decay_factor = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "clip.stride" => self.stride = num(key, v)?,
            "loss.class" => self.loss.class = num(key, v)?,
            "loss.l1" => self.loss.l1 = num(key, v)?,
            "loss.giou" => self.loss.giou = num(key, v)?,
            "loss.dice" => self.loss.dice = num(key, v)?,
            "loss.mask" => self.loss.mask = num(key, v)?,
            "loss.no_object" => self.loss.no_object = num(key, v)?,
            "loss.aux" => self.loss.aux = list(key, v)?,
            "stitch.mask" => self.stitch.mask = num(key, v)?,
            "stitch.class" => self.stitch.class = num(key, v)?,
            "stitch.score" => self.stitch.score = num(key, v)?,
            "stitch.max_cost" => {
                self.stitch.max_cost = match v {
                    "none" => None,
                    _ => Some(num(key, v)?),
                }
            }
            "infer.top_k" => self.top_k = num(key, v)?,
            _ => return Err(HarnessError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let (m, d, t) = (&self.model, &self.data, &self.train);
        let items: Vec<(&str, String)> = vec![
            ("model.hidden", m.hidden.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.levels", m.levels.to_string()),
            ("model.clip_frames", m.frames.to_string()),
            ("model.enc_layers", m.enc_layers.to_string()),
            ("model.dec_layers", m.dec_layers.to_string()),
            ("model.queries", m.queries_per_frame.to_string()),
            ("model.classes", m.num_classes.to_string()),
            ("model.k_curr", m.k_curr.to_string()),
            ("model.k_temp", m.k_temp.to_string()),
            ("model.ffn_hidden", m.ffn_hidden.to_string()),
            ("model.input_channels", m.input_channels.to_string()),
            ("model.mask_width", m.mask_width.to_string()),
            ("model.mdc_kernel", m.mdc_kernel.to_string()),
            ("model.seed", self.model_seed.to_string()),
            ("data.canvas", d.canvas.to_string()),
            ("data.frames", d.frames.to_string()),
            ("data.sequences", d.sequences.to_string()),
            ("data.finest_stride", d.finest_stride.to_string()),
            ("data.objects_min", d.objects_min.to_string()),
            ("data.objects_max", d.objects_max.to_string()),
            ("data.size_min", d.size_min.to_string()),
            ("data.size_max", d.size_max.to_string()),
            ("data.speed", d.speed.to_string()),
            ("data.occlusion", d.occlusion.to_string()),
            ("data.visibility", d.visibility.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.backbone_seed", d.backbone_seed.to_string()),
            ("data.learnable_backbone", d.learnable_backbone.to_string()),
            ("train.iterations", t.iterations.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.lr_backbone", t.lr_backbone.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.decay_at", join(&t.decay_at)),
            ("train.decay_factor", t.decay_factor.to_string()),
            ("train.seed", t.seed.to_string()),
            ("clip.stride", self.stride.to_string()),
            ("loss.class", self.loss.class.to_string()),
            ("loss.l1", self.loss.l1.to_string()),
            ("loss.giou", self.loss.giou.to_string()),
            ("loss.dice", self.loss.dice.to_string()),
            ("loss.mask", self.loss.mask.to_string()),
            ("loss.no_object", self.loss.no_object.to_string()),
            ("loss.aux", join(&self.loss.aux)),
            ("stitch.mask", self.stitch.mask.to_string()),
            ("stitch.class", self.stitch.class.to_string()),
            ("stitch.score", self.stitch.score.to_string()),
            (
                "stitch.max_cost",
                self.stitch.max_cost.map_or("none".into(), |c| c.to_string()),
            ),
            ("infer.top_k", self.top_k.to_string()),
        ];
        items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// The config as file text accepted by [`parse_config`].
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Side of the masks and the raw map.
    pub fn mask_size(&self) -> usize {
        self.data.canvas / 4
    }

    /// `(H, W)` of each encoded level, finest first.
    pub fn level_dims(&self) -> Vec<(usize, usize)> {
        let finest = self.data.canvas / self.data.finest_stride;
        (0..self.model.levels)
            .map(|l| {
                let s = finest >> l;
                (s, s)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Config(m));
        self.model.validate()?;
        self.loss.validate()?;
        if self.loss.aux.len() != self.model.dec_layers {
            return fail(format!(
                "loss.aux has {} weights for {} decoder layers",
                self.loss.aux.len(),
                self.model.dec_layers
            ));
        }
        let tau = self.model.frames;
        if !(self.stride >= 1 && tau > self.stride) {
            return fail(format!("clips must overlap: need clip_frames ({tau}) > stride ({}) >= 1", self.stride));
        }
        let d = &self.data;
        if d.canvas % 4 != 0 || d.canvas == 0 {
            return fail(format!("canvas {} must be a positive multiple of 4", d.canvas));
        }
        if !(d.finest_stride == 4 || d.finest_stride == 8) {
            return fail("finest_stride must be 4 or 8".into());
        }
        let coarsest = (d.canvas / d.finest_stride) >> (self.model.levels - 1);
        if coarsest == 0 || (d.canvas / d.finest_stride) % (1 << (self.model.levels - 1)) != 0 {
            return fail(format!(
                "canvas {} cannot hold {} levels at stride {}",
                d.canvas, self.model.levels, d.finest_stride
            ));
        }
        if d.frames < tau {
            return fail(format!("sequences of {} frames are shorter than a clip ({tau})", d.frames));
        }
        if d.objects_min > d.objects_max {
            return fail("objects_min exceeds objects_max".into());
        }
        if !(d.size_min > 0.0 && d.size_min <= d.size_max) || !(d.speed >= 0.0) {
            return fail("object sizes must satisfy 0 < size_min <= size_max and speed >= 0".into());
        }
        if !(0.0..=1.0).contains(&d.visibility) {
            return fail("visibility must lie in [0, 1]".into());
        }
        if d.learnable_backbone && self.model.input_channels != crate::synth::Shape::ALL.len() {
            return fail(format!(
                "a learnable backbone feeds {} channels, model.input_channels is {}",
                crate::synth::Shape::ALL.len(),
                self.model.input_channels
            ));
        }
        if self.model.num_classes != crate::synth::Shape::ALL.len() {
            return fail(format!(
                "synthetic data has {} classes, model.classes is {}",
                crate::synth::Shape::ALL.len(),
                self.model.num_classes
            ));
        }
        let t = &self.train;
        let rates = [t.lr, t.lr_backbone, t.eps, t.weight_decay, t.clip_norm, t.decay_factor];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return fail("learning rates, eps, weight decay, clip norm and decay factor must be non-negative".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if t.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return fail("decay_at fractions must lie in [0, 1]".into());
        }
        let s = &self.stitch;
        if [s.mask, s.class, s.score].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return fail("stitch weights must be non-negative".into());
        }
        if self.top_k == 0 {
            return fail("infer.top_k must be at least 1".into());
        }
        Ok(())
    }
}
