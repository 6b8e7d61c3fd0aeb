use crate::error::{invalid, mismatch, Result};
use crate::ops::linalg::gemm;
use crate::tape::{Backward, Var};
use crate::tensor::Tensor;

/// Unfolds `[C, H, W]` into `[C*k*k, H*W]` columns for a stride-1,
/// same-padded `k x k` convolution (zero padding).
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut cols = vec![0.0; c * k * k * plane];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * w + ox] = x[ch * plane + iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut x = vec![0.0; c * plane];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[ch * plane + iy as usize * w + ix as usize] += src[oy * w + ox];
                    }
                }
            }
        }
    }
    x
}

/// Plain stride-1 same-padded convolution on raw buffers, returning
/// `[C_out, H*W]`. Accumulates taps in `(c_in, ky, kx)` order.
pub fn conv2d_forward(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    k: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let plane = h * w;
    let cols = im2col(x, c_in, h, w, k);
    let mut out = vec![0.0; c_out * plane];
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_exact_mut(plane.max(1)).zip(b) {
            row.fill(bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(c_out, c_in * k * k, plane, 1.0, weight, false, &cols, false, beta, &mut out);
    out
}

struct Conv2d {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Backward for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (ci, co, h, w, k) = (self.c_in, self.c_out, self.h, self.w, self.k);
        let (x, weight) = (inputs[0], inputs[1]);
        let plane = h * w;
        let kk = ci * k * k;
        let mut dx = needs[0].then(|| vec![0.0; x.numel()]);
        let mut dw = needs[1].then(|| vec![0.0; co * kk]);
        let mut dcols = vec![0.0; kk * plane];
        for b in 0..self.batch {
            let gb = &g.data()[b * co * plane..(b + 1) * co * plane];
            if let Some(dx) = dx.as_mut() {
                gemm(kk, co, plane, 1.0, weight.data(), true, gb, false, 0.0, &mut dcols);
                let img = col2im(&dcols, ci, h, w, k);
                dx[b * ci * plane..(b + 1) * ci * plane].copy_from_slice(&img);
            }
            if let Some(dw) = dw.as_mut() {
                let cols = im2col(&x.data()[b * ci * plane..(b + 1) * ci * plane], ci, h, w, k);
                gemm(co, plane, kk, 1.0, gb, false, &cols, true, 1.0, dw);
            }
        }
        let mut grads = vec![
            dx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
            dw.map(|d| Tensor::new(weight.shape().to_vec(), d).unwrap()),
        ];
        if inputs.len() == 3 {
            grads.push(needs[2].then(|| {
                let mut db = vec![0.0; co];
                for (i, row) in g.data().chunks_exact(plane.max(1)).enumerate() {
                    db[i % co] += row.iter().sum::<f64>();
                }
                Tensor::from_vec(db)
            }));
        }
        grads
    }
}

struct Upsample2x;

/// `(batch, channels, h, w)` of a `[C,H,W]` or `[B,C,H,W]` shape.
fn image_dims(s: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *s {
        [c, h, w] => Some((1, c, h, w)),
        [b, c, h, w] => Some((b, c, h, w)),
        _ => None,
    }
}

impl Backward for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample_nearest2x"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (b, c, h, w) = image_dims(x.shape()).unwrap();
        let mut dx = Tensor::zeros(x.shape().to_vec());
        let d = dx.data_mut();
        for ch in 0..b * c {
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    d[(ch * h + oy / 2) * w + ox / 2] += g.data()[(ch * 2 * h + oy) * 2 * w + ox];
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<'t> Var<'t> {
    /// Stride-1, zero same-padded convolution of `[C_in, H, W]` (or a batch
    /// `[B, C_in, H, W]`) with an odd `[C_out, C_in, k, k]` kernel.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (x, wv) = (self.value(), weight.value());
        let (sx, sw) = (x.shape(), wv.shape());
        let dims = image_dims(sx);
        let Some((batch, c_in, h, w)) = dims.filter(|d| sw.len() == 4 && sw[1] == d.1 && sw[2] == sw[3])
        else {
            return Err(mismatch("conv2d", sx, sw));
        };
        let k = sw[2];
        if k % 2 == 0 {
            return Err(invalid("conv2d", "kernel size must be odd"));
        }
        let c_out = sw[0];
        let bias_value = bias.map(|b| b.value());
        if let Some(b) = &bias_value {
            if b.shape() != [c_out] {
                return Err(mismatch("conv2d", sw, b.shape()));
            }
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(batch * c_out * plane);
        for b in 0..batch {
            out.extend(conv2d_forward(
                &x.data()[b * c_in * plane..(b + 1) * c_in * plane],
                c_in,
                h,
                w,
                wv.data(),
                c_out,
                k,
                bias_value.as_ref().map(|b| b.data()),
            ));
        }
        let mut shape = sx.to_vec();
        shape[sx.len() - 3] = c_out;
        let value = Tensor::new(shape, out)?;
        let op = Conv2d {
            batch,
            c_in,
            c_out,
            h,
            w,
            k,
        };
        Ok(match bias {
            Some(b) => self.tape().record(&[self, weight, b], value, op),
            None => self.tape().record(&[self, weight], value, op),
        })
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]` or `[B, C, H, W]`.
    pub fn upsample_nearest2x(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        let Some((b, c, h, w)) = image_dims(s) else {
            return Err(invalid("upsample_nearest2x", format!("expected [C,H,W], got {s:?}")));
        };
        let mut out = vec![0.0; b * c * 4 * h * w];
        for ch in 0..b * c {
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    out[(ch * 2 * h + oy) * 2 * w + ox] = x.data()[(ch * h + oy / 2) * w + ox / 2];
                }
            }
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        let value = Tensor::new(shape, out)?;
        Ok(self.tape().record(&[self], value, Upsample2x))
    }
}
