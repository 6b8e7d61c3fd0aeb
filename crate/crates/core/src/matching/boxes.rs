use clipseg_tensor::{Tensor, Var};

use crate::error::Result;

/// Smallest side used for box areas, so degenerate boxes keep a tiny area.
pub const MIN_SIDE: f64 = 1e-6;

fn corners(b: [f64; 4]) -> [f64; 4] {
    let (w, h) = (b[2].max(MIN_SIDE), b[3].max(MIN_SIDE));
    [b[0] - w / 2.0, b[1] - h / 2.0, b[0] + w / 2.0, b[1] + h / 2.0]
}

pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (a, b) = (corners(a), corners(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    inter / union
}

/// Generalized IoU of two `(cx, cy, w, h)` boxes, in `(-1, 1]`.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ca, cb) = (corners(a), corners(b));
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    let union = (ca[2] - ca[0]) * (ca[3] - ca[1]) + (cb[2] - cb[0]) * (cb[3] - cb[1]) - inter;
    let hull = (ca[2].max(cb[2]) - ca[0].min(cb[0])) * (ca[3].max(cb[3]) - ca[1].min(cb[1]));
    inter / union - (hull - union) / hull
}

/// Row-wise generalized IoU `[P]` between predicted boxes `[P, 4]` and fixed
/// targets `[P, 4]`, differentiable in the predictions.
pub fn giou_rows<'t>(pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let tape = pred.tape();
    let p = pred.shape()[0];
    let col = |i: usize| pred.narrow(1, i, 1);
    let floor = tape.constant(Tensor::full(vec![p, 1], MIN_SIDE));
    let (cx, cy) = (col(0)?, col(1)?);
    let (w, h) = (col(2)?.maximum(floor)?, col(3)?.maximum(floor)?);
    let px1 = cx.sub(w.scale(0.5))?;
    let px2 = cx.add(w.scale(0.5))?;
    let py1 = cy.sub(h.scale(0.5))?;
    let py2 = cy.add(h.scale(0.5))?;
    let tc: Vec<[f64; 4]> = (0..p)
        .map(|r| corners([target.get(&[r, 0]), target.get(&[r, 1]), target.get(&[r, 2]), target.get(&[r, 3])]))
        .collect();
    let tcol = |i: usize| tape.constant(Tensor::new(vec![p, 1], tc.iter().map(|c| c[i]).collect()).unwrap());
    let (tx1, ty1, tx2, ty2) = (tcol(0), tcol(1), tcol(2), tcol(3));
    let t_area = tape.constant(Tensor::new(vec![p, 1], tc.iter().map(|c| (c[2] - c[0]) * (c[3] - c[1])).collect())?);
    let iw = px2.minimum(tx2)?.sub(px1.maximum(tx1)?)?.relu();
    let ih = py2.minimum(ty2)?.sub(py1.maximum(ty1)?)?.relu();
    let inter = iw.mul(ih)?;
    let union = w.mul(h)?.add(t_area)?.sub(inter)?;
    let hw = px2.maximum(tx2)?.sub(px1.minimum(tx1)?)?;
    let hh = py2.maximum(ty2)?.sub(py1.minimum(ty1)?)?;
    let hull = hw.mul(hh)?;
    let g = inter.div(union)?.sub(hull.sub(union)?.div(hull)?)?;
    Ok(g.reshape(vec![p])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let b = [0.3, 0.4, 0.2, 0.1];
        assert_eq!(giou(b, b), 1.0);
        let far = giou([0.0, 0.0, 0.01, 0.01], [100.0, 100.0, 0.01, 0.01]);
        assert!(far < -0.999 && far > -1.0);
        let touch = giou([0.5, 0.5, 1.0, 1.0], [1.5, 0.5, 1.0, 1.0]);
        assert!(touch.abs() < 1e-15);
        let degenerate = giou([0.5, 0.5, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0]);
        assert_eq!(degenerate, 1.0);
    }
}
