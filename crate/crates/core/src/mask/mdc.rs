use clipseg_tensor::ops::{bilinear_taps, gemm};
use clipseg_tensor::{Backward, Tensor, Var};
use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy)]
struct Dims {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Dims {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn taps(&self) -> usize {
        self.k * self.k
    }

    /// Sampling point of tap `j` at output pixel `px`, given its `(dy, dx)` offset.
    fn point(&self, j: usize, px: usize, dy: f64, dx: f64) -> (f64, f64) {
        let pad = (self.k / 2) as f64;
        let (ky, kx) = ((j / self.k) as f64, (j % self.k) as f64);
        let (oy, ox) = ((px / self.w) as f64, (px % self.w) as f64);
        (ox + kx - pad + dx, oy + ky - pad + dy)
    }
}

/// Modulated, deformed columns `[C_in*k*k, H*W]` of batch item `b`, and the
/// unmodulated samples in the same layout.
fn columns(d: &Dims, x: &[f64], off: &[f64], modu: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (plane, kk) = (d.plane(), d.taps());
    let mut cols = vec![0.0; d.c_in * kk * plane];
    let mut raw = vec![0.0; d.c_in * kk * plane];
    for j in 0..kk {
        for px in 0..plane {
            let (sx, sy) = d.point(j, px, off[(2 * j) * plane + px], off[(2 * j + 1) * plane + px]);
            let taps = bilinear_taps(sx, sy, d.h, d.w);
            let m = modu[j * plane + px];
            for ci in 0..d.c_in {
                let img = &x[ci * plane..(ci + 1) * plane];
                let mut s = 0.0;
                for t in 0..4 {
                    if taps.valid[t] {
                        s += taps.weight[t] * img[taps.index[t]];
                    }
                }
                let row = ci * kk + j;
                raw[row * plane + px] = s;
                cols[row * plane + px] = m * s;
            }
        }
    }
    (cols, raw)
}

struct ModulatedDeformConv {
    dims: Dims,
}

impl Backward for ModulatedDeformConv {
    fn name(&self) -> &'static str {
        "modulated_deform_conv"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let d = self.dims;
        let (x, off, modu, weight) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let (plane, kk) = (d.plane(), d.taps());
        let xs = d.c_in * plane;
        let os = 2 * kk * plane;
        let ms = kk * plane;
        let gs = d.c_out * plane;
        let rows = d.c_in * kk;
        let mut dx = vec![0.0; x.numel()];
        let mut doff = vec![0.0; off.numel()];
        let mut dmod = vec![0.0; modu.numel()];
        let mut dw = vec![0.0; weight.numel()];
        let mut db = vec![0.0; d.c_out];
        let mut dcols = vec![0.0; rows * plane];
        for b in 0..d.batch {
            let xb = &x.data()[b * xs..(b + 1) * xs];
            let ob = &off.data()[b * os..(b + 1) * os];
            let mb = &modu.data()[b * ms..(b + 1) * ms];
            let gb = &g.data()[b * gs..(b + 1) * gs];
            if needs[3] {
                let (cols, _) = columns(&d, xb, ob, mb);
                gemm(d.c_out, plane, rows, 1.0, gb, false, &cols, true, 1.0, &mut dw);
            }
            for (o, row) in gb.chunks_exact(plane.max(1)).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
            if !(needs[0] || needs[1] || needs[2]) {
                continue;
            }
            gemm(rows, d.c_out, plane, 1.0, weight.data(), true, gb, false, 0.0, &mut dcols);
            let dxb = &mut dx[b * xs..(b + 1) * xs];
            let dob = &mut doff[b * os..(b + 1) * os];
            let dmb = &mut dmod[b * ms..(b + 1) * ms];
            for j in 0..kk {
                for px in 0..plane {
                    let (sx, sy) = d.point(j, px, ob[(2 * j) * plane + px], ob[(2 * j + 1) * plane + px]);
                    let taps = bilinear_taps(sx, sy, d.h, d.w);
                    let m = mb[j * plane + px];
                    let (mut gm, mut gx, mut gy) = (0.0, 0.0, 0.0);
                    for ci in 0..d.c_in {
                        let dc = dcols[(ci * kk + j) * plane + px];
                        if dc == 0.0 {
                            continue;
                        }
                        let img = &xb[ci * plane..(ci + 1) * plane];
                        let dimg = &mut dxb[ci * plane..(ci + 1) * plane];
                        let (mut s, mut sdx, mut sdy) = (0.0, 0.0, 0.0);
                        for t in 0..4 {
                            if taps.valid[t] {
                                let v = img[taps.index[t]];
                                s += taps.weight[t] * v;
                                sdx += taps.dx[t] * v;
                                sdy += taps.dy[t] * v;
                                dimg[taps.index[t]] += dc * m * taps.weight[t];
                            }
                        }
                        gm += dc * s;
                        gx += dc * m * sdx;
                        gy += dc * m * sdy;
                    }
                    dmb[j * plane + px] += gm;
                    dob[(2 * j) * plane + px] += gy;
                    dob[(2 * j + 1) * plane + px] += gx;
                }
            }
        }
        let mut grads = vec![
            needs[0].then(|| Tensor::new(x.shape().to_vec(), dx).unwrap()),
            needs[1].then(|| Tensor::new(off.shape().to_vec(), doff).unwrap()),
            needs[2].then(|| Tensor::new(modu.shape().to_vec(), dmod).unwrap()),
            needs[3].then(|| Tensor::new(weight.shape().to_vec(), dw).unwrap()),
        ];
        if inputs.len() == 5 {
            grads.push(needs[4].then(|| Tensor::from_vec(db)));
        }
        grads
    }
}

/// Deformable convolution with per-pixel, per-tap offsets and modulation.
///
/// `x` is `[B, C_in, H, W]`, `offsets` `[B, 2*k*k, H, W]` with `(dy, dx)` per
/// tap, `modulation` `[B, k*k, H, W]`, `weight` `[C_out, C_in, k, k]`.
/// Tap `j = ky*k + kx` of output pixel `p` reads `x` bilinearly at
/// `p + (ky - k/2, kx - k/2) + offset_j(p)` and scales it by `modulation_j(p)`.
pub fn modulated_deform_conv<'t>(
    x: Var<'t>,
    offsets: Var<'t>,
    modulation: Var<'t>,
    weight: Var<'t>,
    bias: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let (xv, ov, mv, wv) = (x.value(), offsets.value(), modulation.value(), weight.value());
    let (sx, sw) = (xv.shape(), wv.shape());
    if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
        return Err(shape_err(format!("deformable conv input {sx:?} and kernel {sw:?} are incompatible")));
    }
    let d = Dims {
        batch: sx[0],
        c_in: sx[1],
        c_out: sw[0],
        h: sx[2],
        w: sx[3],
        k: sw[2],
    };
    let kk = d.taps();
    if ov.shape() != [d.batch, 2 * kk, d.h, d.w] || mv.shape() != [d.batch, kk, d.h, d.w] {
        return Err(shape_err(format!(
            "offsets {:?} / modulation {:?} do not match input {sx:?} with a {}x{} kernel",
            ov.shape(),
            mv.shape(),
            d.k,
            d.k
        )));
    }
    let bv = bias.map(|b| b.value());
    if let Some(b) = &bv {
        if b.shape() != [d.c_out] {
            return Err(shape_err(format!("bias {:?} should be [{}]", b.shape(), d.c_out)));
        }
    }
    let plane = d.plane();
    let mut out = vec![0.0; d.batch * d.c_out * plane];
    for b in 0..d.batch {
        let xb = &xv.data()[b * d.c_in * plane..(b + 1) * d.c_in * plane];
        let ob = &ov.data()[b * 2 * kk * plane..(b + 1) * 2 * kk * plane];
        let mb = &mv.data()[b * kk * plane..(b + 1) * kk * plane];
        let (cols, _) = columns(&d, xb, ob, mb);
        let ob_out = &mut out[b * d.c_out * plane..(b + 1) * d.c_out * plane];
        let beta = match &bv {
            Some(bias) => {
                for (row, &v) in ob_out.chunks_exact_mut(plane.max(1)).zip(bias.data()) {
                    row.fill(v);
                }
                1.0
            }
            None => 0.0,
        };
        gemm(d.c_out, d.c_in * kk, plane, 1.0, wv.data(), false, &cols, false, beta, ob_out);
    }
    let value = Tensor::new(vec![d.batch, d.c_out, d.h, d.w], out)?;
    let op = ModulatedDeformConv { dims: d };
    let tape = x.tape();
    Ok(match bias {
        Some(b) => tape.record(&[x, offsets, modulation, weight, b], value, op),
        None => tape.record(&[x, offsets, modulation, weight], value, op),
    })
}

/// Deformable conv block whose offsets and modulation come from a plain
/// convolution of its own input.
///
/// Parameters under `prefix`: `weight [C_out, C_in, k, k]`, `bias [C_out]`,
/// `offset.weight [3*k*k, C_in, k, k]`, `offset.bias [3*k*k]`. The first
/// `2*k*k` offset-branch channels are offsets, the rest modulation logits.
#[derive(Clone, Debug)]
pub struct Mdc {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Mdc {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let fan_in = self.c_in * self.k * self.k;
        let std = (2.0 / fan_in as f64).sqrt();
        let kk = self.k * self.k;
        store.insert(
            format!("{}.weight", self.prefix),
            Tensor::randn(vec![self.c_out, self.c_in, self.k, self.k], std, rng),
        );
        store.insert(format!("{}.bias", self.prefix), Tensor::zeros(vec![self.c_out]));
        store.insert(
            format!("{}.offset.weight", self.prefix),
            Tensor::zeros(vec![3 * kk, self.c_in, self.k, self.k]),
        );
        store.insert(format!("{}.offset.bias", self.prefix), Tensor::zeros(vec![3 * kk]));
    }

    /// `x` is `[B, C_in, H, W]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let kk = self.k * self.k;
        let ow = p.get(&format!("{}.offset.weight", self.prefix))?;
        let ob = p.get(&format!("{}.offset.bias", self.prefix))?;
        let branch = x.conv2d(ow, Some(ob))?;
        let offsets = branch.narrow(1, 0, 2 * kk)?;
        let modulation = branch.narrow(1, 2 * kk, kk)?.sigmoid();
        let w = p.get(&format!("{}.weight", self.prefix))?;
        let b = p.get(&format!("{}.bias", self.prefix))?;
        modulated_deform_conv(x, offsets, modulation, w, Some(b))
    }
}
