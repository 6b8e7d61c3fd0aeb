use clipseg_tensor::Tensor;

use crate::error::{shape_err, Result};

/// One selected trajectory label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    pub slot: usize,
    pub class: usize,
    pub score: f64,
}

/// Top-`k` (slot, class) candidates by the class probability averaged over
/// the clip's frames. `probs` is `[τ·n, K]` with query `t·n + slot`; ties keep
/// slot-then-class order. A slot may be selected with several classes.
pub fn select_trajectories(probs: &Tensor, k: usize, queries_per_frame: usize) -> Result<Vec<Selection>> {
    let s = probs.shape();
    let n = queries_per_frame;
    if s.len() != 2 || n == 0 || s[0] % n != 0 || s[0] == 0 {
        return Err(shape_err(format!("class probabilities {s:?} for {n} queries per frame")));
    }
    let (frames, classes) = (s[0] / n, s[1]);
    let mut cands = Vec::with_capacity(n * classes);
    for slot in 0..n {
        for class in 0..classes {
            let sum: f64 = (0..frames).map(|t| probs.get(&[t * n + slot, class])).sum();
            cands.push(Selection {
                slot,
                class,
                score: sum / frames as f64,
            });
        }
    }
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    cands.truncate(k);
    Ok(cands)
}
