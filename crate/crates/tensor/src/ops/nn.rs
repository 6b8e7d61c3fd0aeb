use crate::error::{mismatch, Result, TensorError};
use crate::ops::reduce::split_axis;
use crate::tape::{Backward, Var};
use crate::tensor::Tensor;

/// Applies `f` to every 1-D lane along `axis` (viewed as `[outer, len, inner]`).
fn for_each_lane(
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(&dyn Fn(usize) -> usize, usize),
) {
    let (outer, len, inner) = split_axis(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            f(&|k| base + k * inner, len);
        }
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

struct Softmax {
    axis: usize,
}

impl Backward for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, _: &[&Tensor], y: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut dx = Tensor::zeros(y.shape().to_vec());
        let (yd, gd) = (y.data(), g.data());
        let out = dx.data_mut();
        for_each_lane(y.shape(), self.axis, |at, len| {
            let dot: f64 = (0..len).map(|k| yd[at(k)] * gd[at(k)]).sum();
            for k in 0..len {
                out[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        });
        vec![Some(dx)]
    }
}

struct LogSoftmax {
    axis: usize,
}

impl Backward for LogSoftmax {
    fn name(&self) -> &'static str {
        "log_softmax"
    }

    fn backward(&self, _: &[&Tensor], y: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut dx = Tensor::zeros(y.shape().to_vec());
        let (yd, gd) = (y.data(), g.data());
        let out = dx.data_mut();
        for_each_lane(y.shape(), self.axis, |at, len| {
            let gsum: f64 = (0..len).map(|k| gd[at(k)]).sum();
            for k in 0..len {
                out[at(k)] = gd[at(k)] - yd[at(k)].exp() * gsum;
            }
        });
        vec![Some(dx)]
    }
}

struct LayerNorm {
    eps: f64,
}

impl Backward for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let c = gamma.numel();
        let mut dx = vec![0.0; x.numel()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut xhat = vec![0.0; c];
        let mut dxhat = vec![0.0; c];
        for ((row, grow), dxrow) in x
            .data()
            .chunks_exact(c)
            .zip(g.data().chunks_exact(c))
            .zip(dx.chunks_exact_mut(c))
        {
            let (mean, inv_std) = moments(row, self.eps);
            for j in 0..c {
                xhat[j] = (row[j] - mean) * inv_std;
                dxhat[j] = grow[j] * gamma.data()[j];
                dgamma[j] += grow[j] * xhat[j];
                dbeta[j] += grow[j];
            }
            let m1 = dxhat.iter().sum::<f64>() / c as f64;
            let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
            for j in 0..c {
                dxrow[j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
        vec![
            needs[0].then(|| Tensor::new(x.shape().to_vec(), dx).unwrap()),
            needs[1].then(|| Tensor::from_vec(dgamma)),
            needs[2].then(|| Tensor::from_vec(dbeta)),
        ]
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + eps).sqrt())
}

impl<'t> Var<'t> {
    /// Softmax along `axis`, stabilised by subtracting the lane maximum.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let mut y = Tensor::zeros(x.shape().to_vec());
        let xd = x.data();
        let out = y.data_mut();
        for_each_lane(x.shape(), axis, |at, len| {
            let max = (0..len).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (xd[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        });
        Ok(self.tape().record(&[self], y, Softmax { axis }))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("log_softmax", x.shape(), axis)?;
        let mut y = Tensor::zeros(x.shape().to_vec());
        let xd = x.data();
        let out = y.data_mut();
        for_each_lane(x.shape(), axis, |at, len| {
            let max = (0..len).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..len).map(|k| (xd[at(k)] - max).exp()).sum::<f64>().ln();
            for k in 0..len {
                out[at(k)] = xd[at(k)] - lse;
            }
        });
        Ok(self.tape().record(&[self], y, LogSoftmax { axis }))
    }

    /// Normalises the last axis to zero mean and unit variance, then applies
    /// the affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let c = *x.shape().last().unwrap_or(&0);
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(mismatch("layer_norm", x.shape(), gv.shape()));
        }
        let mut y = Tensor::zeros(x.shape().to_vec());
        if c > 0 {
            for (row, out) in x.data().chunks_exact(c).zip(y.data_mut().chunks_exact_mut(c)) {
                let (mean, inv_std) = moments(row, eps);
                for j in 0..c {
                    out[j] = (row[j] - mean) * inv_std * gv.data()[j] + bv.data()[j];
                }
            }
        }
        Ok(self
            .tape()
            .record(&[self, gamma, beta], y, LayerNorm { eps }))
    }
}
