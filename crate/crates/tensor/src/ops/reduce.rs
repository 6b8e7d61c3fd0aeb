use crate::error::{Result, TensorError};
use crate::tape::{Backward, Var};
use crate::tensor::Tensor;

struct SumAll {
    scale: f64,
}

impl Backward for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(inputs[0].shape().to_vec(), g.item() * self.scale))]
    }
}

/// Sum over one axis, viewing the input as `[outer, len, inner]`.
struct SumAxis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Backward for SumAxis {
    fn name(&self) -> &'static str {
        "sum_axis"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut out = vec![0.0; self.outer * self.len * self.inner];
        for o in 0..self.outer {
            for l in 0..self.len {
                let dst = (o * self.len + l) * self.inner;
                out[dst..dst + self.inner]
                    .copy_from_slice(&g.data()[o * self.inner..(o + 1) * self.inner]);
            }
        }
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), out).unwrap())]
    }
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    /// Sum of all elements as a scalar (shape `[]`).
    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.tape().record(&[self], value, SumAll { scale: 1.0 })
    }

    /// Mean of all elements; zero for an empty tensor.
    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let n = x.numel();
        let scale = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        let value = Tensor::scalar(x.sum() * scale);
        self.tape().record(&[self], value, SumAll { scale })
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "sum_axis",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x.data()[src + i];
                }
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        let value = Tensor::new(new_shape, out)?;
        Ok(self
            .tape()
            .record(&[self], value, SumAxis { outer, len, inner }))
    }
}
