use clipseg_tensor::Tensor;

use crate::error::{shape_err, Result};
use crate::matching::boxes::giou;
use crate::matching::target::GroundTruthClip;
use crate::matching::LossWeights;

/// Matching cost `[slots, instances]` summed over the frames on which each
/// instance is present. `probs` is `[τ·n, K+1]` (softmaxed) and `boxes`
/// `[τ·n, 4]`, with query `t·n + slot`.
pub fn trajectory_match_cost(
    probs: &Tensor,
    boxes: &Tensor,
    queries_per_frame: usize,
    gt: &GroundTruthClip,
    weights: &LossWeights,
) -> Result<Tensor> {
    let n = queries_per_frame;
    let (sp, sb) = (probs.shape(), boxes.shape());
    if sp.len() != 2 || sb != [sp[0], 4] || sp[0] != gt.frames * n {
        return Err(shape_err(format!(
            "predictions {sp:?}/{sb:?} do not cover {} frames of {n} queries",
            gt.frames
        )));
    }
    let k = sp[1];
    let mut cost = Tensor::zeros(vec![n, gt.instances.len()]);
    for (j, inst) in gt.instances.iter().enumerate() {
        if inst.class_id + 1 >= k {
            return Err(shape_err(format!("class {} needs more than {k} logits", inst.class_id)));
        }
        for slot in 0..n {
            let mut c = 0.0;
            for (t, f) in inst.present_frames() {
                let q = t * n + slot;
                let b = [boxes.get(&[q, 0]), boxes.get(&[q, 1]), boxes.get(&[q, 2]), boxes.get(&[q, 3])];
                let l1: f64 = b.iter().zip(&f.bbox).map(|(x, y)| (x - y).abs()).sum();
                c += -weights.class * probs.get(&[q, inst.class_id])
                    + weights.l1 * l1
                    + weights.giou * (1.0 - giou(b, f.bbox));
            }
            cost.set(&[slot, j], c);
        }
    }
    Ok(cost)
}
