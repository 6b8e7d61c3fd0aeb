//! Training loop over stride-aligned clips of synthetic sequences.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use clipseg_core::io::Checkpoint;
use clipseg_core::matching::{compute_losses, mask_loss_layers, match_predictions, positives, LossReport};
use clipseg_core::model::Model;
use clipseg_core::ParamStore;
use clipseg_tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::save_truth;
use crate::error::{HarnessError, Result};
use crate::infer::clip_starts;
use crate::optim::{clip_grad_norm, decay_multiplier, Adam};
use crate::synth::SyntheticSequence;

const ITERATION: &str = "trainer.iteration";

/// Parameters trained at the backbone rate when the backbone is learnable:
/// the layers reading backbone features directly.
pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("input_proj.") || name.starts_with("mask.proj.raw.")
}

/// One iteration's log record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub sequence: usize,
    pub start: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossReport,
}

impl fmt::Display for StepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} seq={} start={} lr={} grad_norm={} {}",
            self.iteration, self.sequence, self.start, self.lr, self.grad_norm, self.loss
        )
    }
}

/// Forward results needed for a loss evaluation or update.
struct Evaluated {
    total: f64,
    report: LossReport,
    grads: Option<BTreeMap<String, Tensor>>,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub params: ParamStore,
    pub opt: Adam,
    /// Completed iterations.
    pub iteration: usize,
    /// Where a non-finite loss dumps its batch; the working directory if unset.
    pub dump_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    iteration: usize,
    sequence: usize,
    start: usize,
    loss: BTreeMap<&'a str, f64>,
    non_finite_params: Vec<String>,
    non_finite_grads: Vec<String>,
    param_norms: BTreeMap<String, f64>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone())?;
        let params = model.init(cfg.model_seed);
        let t = &cfg.train;
        let opt = Adam::new(t.beta1, t.beta2, t.eps, t.weight_decay);
        Ok(Self {
            cfg,
            model,
            params,
            opt,
            iteration: 0,
            dump_dir: None,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = RunConfig::from_pairs(&ck.hyperparameters)?;
        let mut tr = Self::new(cfg)?;
        for name in tr.params.names() {
            if !ck.params.contains(name) {
                return Err(HarnessError::Config(format!("checkpoint lacks parameter {name}")));
            }
        }
        tr.params = ck.params.clone();
        tr.opt.load_state(&ck.state)?;
        tr.iteration = ck.state.get(ITERATION).map_or(0, |t| t.item() as usize);
        Ok(tr)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params.clone());
        ck.state = self.opt.state();
        ck.state.insert(ITERATION.into(), Tensor::scalar(self.iteration as f64));
        ck.hyperparameters = self.cfg.to_pairs().into_iter().collect();
        ck
    }

    /// Every `(sequence, clip start)` pair of the dataset.
    pub fn clips(&self, data: &[SyntheticSequence]) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        for (i, s) in data.iter().enumerate() {
            for start in clip_starts(s.frames(), self.cfg.model.frames, self.cfg.stride)? {
                out.push((i, start));
            }
        }
        Ok(out)
    }

    /// Clip trained on at `iteration`: a fresh shuffle of all clips per epoch.
    pub fn sample(&self, clips: &[(usize, usize)], iteration: usize) -> (usize, usize) {
        let epoch = iteration / clips.len();
        let mut order: Vec<usize> = (0..clips.len()).collect();
        let seed = self.cfg.train.seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        clips[order[iteration % clips.len()]]
    }

    /// Main and backbone learning rates at `iteration`. With a fixed
    /// backbone every parameter uses the main rate.
    pub fn rates_at(&self, iteration: usize) -> (f64, f64) {
        let t = &self.cfg.train;
        let m = decay_multiplier(iteration, t.iterations, &t.decay_at, t.decay_factor);
        let backbone = if self.cfg.data.learnable_backbone { t.lr_backbone } else { t.lr };
        (t.lr * m, backbone * m)
    }

    fn evaluate(&self, seq: &SyntheticSequence, start: usize, with_grads: bool) -> Result<Evaluated> {
        let tau = self.cfg.model.frames;
        let n = self.cfg.model.queries_per_frame;
        let input = seq.clip(start, tau)?;
        let gt = seq.truth_window(start, tau);
        gt.validate(self.cfg.model.num_classes)?;
        let tape = Tape::new();
        let p = if with_grads {
            self.params.bind(&tape)
        } else {
            self.params.bind_frozen(&tape)
        };
        let out = self.model.forward(&p, &tape, &input)?;
        let last = out.last();
        if !last.class_logits.value().all_finite() || !last.boxes.value().all_finite() {
            return Ok(Evaluated {
                total: f64::NAN,
                report: LossReport { terms: Vec::new() },
                grads: None,
            });
        }
        let assignment = match_predictions(out.last(), &gt, &self.cfg.loss, n)?;
        let queries: Vec<usize> = positives(&assignment, &gt, n)?.iter().map(|q| q.query).collect();
        let masks = mask_loss_layers(self.cfg.model.dec_layers)
            .into_iter()
            .map(|l| Ok((l, self.model.masks(&p, &out, l, &queries, &input.raw)?)))
            .collect::<Result<Vec<_>>>()?;
        let (loss, report) = compute_losses(&tape, &out.layers, &masks, &assignment, &gt, &self.cfg.loss, n)?;
        let total = loss.value().item();
        let grads = if with_grads && total.is_finite() {
            Some(p.gradients(&tape.backward(loss)?))
        } else {
            None
        };
        Ok(Evaluated { total, report, grads })
    }

    /// Loss of one clip without updating anything.
    pub fn loss_on(&self, seq: &SyntheticSequence, start: usize) -> Result<LossReport> {
        Ok(self.evaluate(seq, start, false)?.report)
    }

    /// Mean total loss over every clip of `data`.
    pub fn mean_loss(&self, data: &[SyntheticSequence]) -> Result<f64> {
        let clips = self.clips(data)?;
        let mut sum = 0.0;
        for &(s, start) in &clips {
            sum += self.evaluate(&data[s], start, false)?.total;
        }
        Ok(sum / clips.len().max(1) as f64)
    }

    fn dump(&self, seq: &SyntheticSequence, sequence: usize, start: usize, ev: &Evaluated) -> Result<PathBuf> {
        let root = self.dump_dir.clone().unwrap_or_else(|| PathBuf::from("."));
        let dir = root.join(format!("nonfinite-iter{}", self.iteration));
        std::fs::create_dir_all(&dir)?;
        let tau = self.cfg.model.frames;
        let input = seq.clip(start, tau)?;
        for (l, t) in input.features.levels().iter().enumerate() {
            clipseg_tensor::io::save(dir.join(format!("level{l}.tsr")), t)?;
        }
        clipseg_tensor::io::save(dir.join("raw.tsr"), &input.raw)?;
        save_truth(&dir, &seq.truth_window(start, tau), seq.canvas, self.cfg.model.levels, &[])?;
        let bad = |t: &Tensor| !t.all_finite();
        let diag = Diagnostic {
            iteration: self.iteration,
            sequence,
            start,
            loss: ev.report.terms.iter().map(|(k, v)| (k.as_str(), *v)).collect(),
            non_finite_params: self.params.iter().filter(|(_, t)| bad(t)).map(|(k, _)| k.clone()).collect(),
            non_finite_grads: ev
                .grads
                .iter()
                .flatten()
                .filter(|(_, t)| bad(t))
                .map(|(k, _)| k.clone())
                .collect(),
            param_norms: self.params.iter().map(|(k, t)| (k.clone(), t.norm_sq().sqrt())).collect(),
        };
        // non-finite values serialize as null
        std::fs::write(dir.join("diagnostic.json"), serde_json::to_string_pretty(&diag)?)?;
        Ok(dir)
    }

    /// One optimisation step on the scheduled clip.
    pub fn step(&mut self, data: &[SyntheticSequence]) -> Result<StepReport> {
        let clips = self.clips(data)?;
        if clips.is_empty() {
            return Err(HarnessError::Config("no training clips".into()));
        }
        let (sequence, start) = self.sample(&clips, self.iteration);
        let ev = self.evaluate(&data[sequence], start, true)?;
        let finite_grads = ev.grads.as_ref().is_some_and(|g| g.values().all(Tensor::all_finite));
        if !ev.total.is_finite() || !finite_grads {
            let dir = self.dump(&data[sequence], sequence, start, &ev)?;
            return Err(HarnessError::NonFinite {
                iteration: self.iteration,
                dump: dir.display().to_string(),
            });
        }
        let mut grads = ev.grads.expect("gradients were computed");
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.train.clip_norm);
        let (lr, backbone) = self.rates_at(self.iteration);
        self.opt
            .step(&mut self.params, &grads, |name| if is_backbone_param(name) { backbone } else { lr })?;
        let report = StepReport {
            iteration: self.iteration,
            sequence,
            start,
            lr,
            grad_norm,
            loss: ev.report,
        };
        self.iteration += 1;
        Ok(report)
    }

    /// Steps until `until` iterations are complete (capped at the configured
    /// total), passing each record to `log`.
    pub fn run(
        &mut self,
        data: &[SyntheticSequence],
        until: usize,
        mut log: impl FnMut(&StepReport),
    ) -> Result<()> {
        let end = until.min(self.cfg.train.iterations);
        while self.iteration < end {
            let r = self.step(data)?;
            log(&r);
        }
        Ok(())
    }
}

/// Writes a loss log: one [`StepReport`] line per iteration.
pub fn write_log(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
