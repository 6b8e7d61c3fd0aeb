use crate::error::{mismatch, Result};
use crate::tape::{Backward, Var};
use crate::tensor::Tensor;

/// The four lattice neighbours of a fractional location `(x, y)` on an
/// `h x w` grid, with their bilinear weights and the weights' partial
/// derivatives. Neighbours outside the grid are marked invalid and
/// contribute zero.
///
/// On an exact lattice coordinate the derivative is that of the cell
/// `[floor(x), floor(x) + 1]` (the interpolant has a kink there).
#[derive(Clone, Copy, Debug, Default)]
pub struct BilinearTaps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub dx: [f64; 4],
    pub dy: [f64; 4],
    pub valid: [bool; 4],
}

pub fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> BilinearTaps {
    let mut taps = BilinearTaps::default();
    if !x.is_finite() || !y.is_finite() {
        return taps;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (x0 + 1.0, y0, fx * (1.0 - fy), 1.0 - fy, -fx),
        (x0, y0 + 1.0, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (x0 + 1.0, y0 + 1.0, fx * fy, fy, fx),
    ];
    for (k, &(cx, cy, wt, dx, dy)) in corners.iter().enumerate() {
        if cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64 {
            taps.index[k] = cy as usize * w + cx as usize;
            taps.weight[k] = wt;
            taps.dx[k] = dx;
            taps.dy[k] = dy;
            taps.valid[k] = true;
        }
    }
    taps
}

struct BilinearSample {
    channels: usize,
    h: usize,
    w: usize,
}

impl Backward for BilinearSample {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (map, points) = (inputs[0], inputs[1]);
        let (c, plane) = (self.channels, self.h * self.w);
        let mut dmap = needs[0].then(|| Tensor::zeros(map.shape().to_vec()));
        let mut dpts = needs[1].then(|| Tensor::zeros(points.shape().to_vec()));
        for (p, pt) in points.data().chunks_exact(2).enumerate() {
            let taps = bilinear_taps(pt[0], pt[1], self.h, self.w);
            let grow = &g.data()[p * c..(p + 1) * c];
            let (mut gx, mut gy) = (0.0, 0.0);
            for k in 0..4 {
                if !taps.valid[k] {
                    continue;
                }
                let idx = taps.index[k];
                for ch in 0..c {
                    let v = map.data()[ch * plane + idx];
                    gx += grow[ch] * v * taps.dx[k];
                    gy += grow[ch] * v * taps.dy[k];
                    if let Some(dm) = dmap.as_mut() {
                        dm.data_mut()[ch * plane + idx] += grow[ch] * taps.weight[k];
                    }
                }
            }
            if let Some(dp) = dpts.as_mut() {
                dp.data_mut()[2 * p] = gx;
                dp.data_mut()[2 * p + 1] = gy;
            }
        }
        vec![dmap, dpts]
    }
}

impl<'t> Var<'t> {
    /// Samples a `[C, H, W]` map at `[P, 2]` fractional pixel locations given
    /// as `(x, y)` = `(column, row)`, returning `[P, C]`. Out-of-map neighbours
    /// read as zero. Differentiable in both the map and the locations.
    pub fn bilinear_sample(self, points: Var<'t>) -> Result<Var<'t>> {
        let (map, pts) = (self.value(), points.value());
        let (sm, sp) = (map.shape(), pts.shape());
        if sm.len() != 3 || sp.len() != 2 || sp[1] != 2 {
            return Err(mismatch("bilinear_sample", sm, sp));
        }
        let (c, h, w) = (sm[0], sm[1], sm[2]);
        let plane = h * w;
        let n = sp[0];
        let mut out = vec![0.0; n * c];
        for (p, pt) in pts.data().chunks_exact(2).enumerate() {
            let taps = bilinear_taps(pt[0], pt[1], h, w);
            let row = &mut out[p * c..(p + 1) * c];
            for k in 0..4 {
                if !taps.valid[k] {
                    continue;
                }
                for (ch, o) in row.iter_mut().enumerate() {
                    *o += taps.weight[k] * map.data()[ch * plane + taps.index[k]];
                }
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self
            .tape()
            .record(&[self, points], value, BilinearSample { channels: c, h, w }))
    }
}
