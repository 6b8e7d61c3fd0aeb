use std::fmt;

use clipseg_tensor::{Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::matching::boxes::giou_rows;
use crate::matching::hungarian::{hungarian, Assignment};
use crate::matching::target::GroundTruthClip;
use crate::matching::{trajectory_match_cost, LossWeights};
use crate::model::DecoderLayerOutput;

/// Smoothing added to the numerator and denominator of the dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// A matched query on a frame where its instance is visible.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Positive {
    pub query: usize,
    pub instance: usize,
    pub frame: usize,
}

/// Positives ordered by slot, then frame. Mask logits passed to
/// [`compute_losses`] follow this order.
pub fn positives(assignment: &Assignment, gt: &GroundTruthClip, queries_per_frame: usize) -> Result<Vec<Positive>> {
    let mut out = Vec::new();
    for &(slot, instance) in &assignment.pairs {
        let inst = gt.instances.get(instance).ok_or_else(|| {
            CoreError::Assignment(format!("instance {instance} not in a clip of {}", gt.instances.len()))
        })?;
        if slot >= queries_per_frame {
            return Err(CoreError::Assignment(format!("slot {slot} of {queries_per_frame}")));
        }
        if inst.frames.len() != gt.frames {
            return Err(CoreError::Assignment(format!(
                "instance {instance} spans {} frames, clip has {}",
                inst.frames.len(),
                gt.frames
            )));
        }
        for (t, _) in inst.present_frames() {
            out.push(Positive {
                query: t * queries_per_frame + slot,
                instance,
                frame: t,
            });
        }
    }
    Ok(out)
}

/// Matches the final decoder layer against the ground truth.
pub fn match_predictions(
    layer: &DecoderLayerOutput<'_>,
    gt: &GroundTruthClip,
    weights: &LossWeights,
    queries_per_frame: usize,
) -> Result<Assignment> {
    let probs = softmax_rows(&layer.class_logits.value());
    let cost = trajectory_match_cost(&probs, &layer.boxes.value(), queries_per_frame, gt, weights)?;
    hungarian(&cost)
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let k = x.shape()[1];
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(k.max(1)) {
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

/// Decoder layers that receive a mask loss: the final one and the third.
pub fn mask_loss_layers(dec_layers: usize) -> Vec<usize> {
    let mut v = vec![dec_layers - 1];
    if dec_layers > 3 {
        v.insert(0, 2);
    }
    v
}

/// Named scalar terms of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub terms: Vec<(String, f64)>,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.0 == name).map(|t| t.1)
    }

    fn push(&mut self, name: &str, v: f64) {
        self.terms.push((name.to_string(), v));
    }

    /// Parses `name=value` pairs separated by spaces.
    pub fn parse(line: &str) -> Result<Self> {
        let mut r = Self::default();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| CoreError::Format { what: "loss report", msg: format!("bad term {tok:?}") })?;
            let v: f64 = v
                .parse()
                .map_err(|_| CoreError::Format { what: "loss report", msg: format!("bad value {tok:?}") })?;
            r.push(k, v);
        }
        Ok(r)
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Class, L1 and gIoU terms of one layer.
fn detection_terms<'t>(
    layer: &DecoderLayerOutput<'t>,
    pos: &[Positive],
    gt: &GroundTruthClip,
    weights: &LossWeights,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let logits = layer.class_logits;
    let tape = logits.tape();
    let s = logits.shape();
    let (nq, k) = (s[0], s[1]);
    let no_object = k - 1;
    let mut target = vec![no_object; nq];
    for p in pos {
        target[p.query] = gt.instances[p.instance].class_id;
    }
    let flat: Vec<usize> = target.iter().enumerate().map(|(q, &c)| q * k + c).collect();
    let w: Vec<f64> = target
        .iter()
        .map(|&c| if c == no_object { weights.no_object } else { 1.0 })
        .collect();
    let wsum: f64 = w.iter().sum();
    let picked = logits.log_softmax(1)?.take(&flat)?;
    let class = picked
        .mul(tape.constant(Tensor::from_vec(w)))?
        .sum()
        .scale(-1.0 / wsum);
    if pos.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok((class, zero, zero));
    }
    let queries: Vec<usize> = pos.iter().map(|p| p.query).collect();
    let mut tb = Vec::with_capacity(4 * pos.len());
    for p in pos {
        tb.extend_from_slice(&gt.instances[p.instance].frames[p.frame].as_ref().unwrap().bbox);
    }
    let target_boxes = Tensor::new(vec![pos.len(), 4], tb)?;
    let pred = layer.boxes.index_select(&queries)?;
    let norm = 1.0 / pos.len() as f64;
    let l1 = pred
        .sub(tape.constant(target_boxes.clone()))?
        .abs()
        .sum()
        .scale(norm);
    let g = giou_rows(pred, &target_boxes)?;
    let giou = g.neg().add_scalar(1.0).sum().scale(norm);
    Ok((class, l1, giou))
}

/// Mean binary cross-entropy and mean dice loss of `[P, H, W]` logits.
pub fn mask_terms<'t>(logits: Var<'t>, targets: &Tensor) -> Result<(Var<'t>, Var<'t>)> {
    let tape = logits.tape();
    let s = logits.shape();
    if s.len() != 3 || targets.shape() != s.as_slice() {
        return Err(CoreError::Shape(format!("mask logits {s:?} vs targets {:?}", targets.shape())));
    }
    let p = s[0];
    if p == 0 {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok((zero, zero));
    }
    let hw = s[1] * s[2];
    let m = tape.constant(targets.reshape(vec![p, hw])?);
    let x = logits.reshape(vec![p, hw])?;
    let bce = x.softplus().sub(x.mul(m)?)?.sum().scale(1.0 / (p * hw) as f64);
    let prob = x.sigmoid();
    let inter = prob.mul(m)?.sum_axis(1)?;
    let num = inter.scale(2.0).add_scalar(DICE_SMOOTH);
    let den = prob.sum_axis(1)?.add(m.sum_axis(1)?)?.add_scalar(DICE_SMOOTH);
    let dice = num.div(den)?.neg().add_scalar(1.0).sum().scale(1.0 / p as f64);
    Ok((bce, dice))
}

/// Binary mask targets `[P, H, W]` for the positives.
pub fn mask_targets(pos: &[Positive], gt: &GroundTruthClip) -> Result<Tensor> {
    let mut data = Vec::with_capacity(pos.len() * gt.height * gt.width);
    for p in pos {
        let f = gt.instances[p.instance].frames[p.frame]
            .as_ref()
            .ok_or_else(|| CoreError::Assignment(format!("instance {} absent on frame {}", p.instance, p.frame)))?;
        data.extend_from_slice(&f.mask);
    }
    Ok(Tensor::new(vec![pos.len(), gt.height, gt.width], data)?)
}

/// Total training loss of one clip.
///
/// `masks` pairs a decoder layer index with mask logits of the positives
/// (in [`positives`] order) computed from that layer.
pub fn compute_losses<'t>(
    tape: &'t Tape,
    layers: &[DecoderLayerOutput<'t>],
    masks: &[(usize, Var<'t>)],
    assignment: &Assignment,
    gt: &GroundTruthClip,
    weights: &LossWeights,
    queries_per_frame: usize,
) -> Result<(Var<'t>, LossReport)> {
    if weights.aux.len() != layers.len() {
        return Err(CoreError::Config(format!(
            "{} aux weights for {} decoder layers",
            weights.aux.len(),
            layers.len()
        )));
    }
    let pos = positives(assignment, gt, queries_per_frame)?;
    let last = layers.len() - 1;
    let mut total = tape.constant(Tensor::scalar(0.0));
    let mut report = LossReport::default();
    let mut aux = 0.0;
    let mut final_terms = [0.0; 3];
    for (l, layer) in layers.iter().enumerate() {
        let (class, l1, giou) = detection_terms(layer, &pos, gt, weights)?;
        let det = class
            .scale(weights.class)
            .add(l1.scale(weights.l1))?
            .add(giou.scale(weights.giou))?;
        let contrib = det.scale(weights.aux[l]);
        if l == last {
            final_terms = [class.value().item(), l1.value().item(), giou.value().item()];
        } else {
            aux += contrib.value().item();
        }
        total = total.add(contrib)?;
    }
    let targets = mask_targets(&pos, gt)?;
    let (mut bce_last, mut dice_last, mut mask_aux) = (0.0, 0.0, 0.0);
    for &(l, logits) in masks {
        if l > last {
            return Err(CoreError::Config(format!("mask logits for layer {l} of {}", layers.len())));
        }
        let (bce, dice) = mask_terms(logits, &targets)?;
        let term = bce.scale(weights.mask).add(dice.scale(weights.dice))?;
        if l == last {
            bce_last = bce.value().item();
            dice_last = dice.value().item();
        } else {
            mask_aux += term.value().item();
        }
        total = total.add(term)?;
    }
    report.push("total", total.value().item());
    report.push("class", final_terms[0]);
    report.push("l1", final_terms[1]);
    report.push("giou", final_terms[2]);
    report.push("bce", bce_last);
    report.push("dice", dice_last);
    report.push("aux", aux);
    report.push("mask_aux", mask_aux);
    Ok((total, report))
}

/// Dice loss between soft masks with values in `[0, 1]`.
pub fn dice_loss(pred: &[f64], target: &[f64]) -> f64 {
    let inter: f64 = pred.iter().zip(target).map(|(a, b)| a * b).sum();
    let s: f64 = pred.iter().sum::<f64>() + target.iter().sum::<f64>();
    1.0 - (2.0 * inter + DICE_SMOOTH) / (s + DICE_SMOOTH)
}

/// Mean binary cross-entropy between probabilities, with log arguments
/// floored at `1e-12`.
pub fn binary_cross_entropy(pred: &[f64], target: &[f64]) -> f64 {
    const EPS: f64 = 1e-12;
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| -(t * p.max(EPS).ln() + (1.0 - t) * (1.0 - p).max(EPS).ln()))
        .sum::<f64>()
        / n
}
