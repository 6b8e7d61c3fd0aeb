use crate::error::{invalid, mismatch, Result, TensorError};
use crate::ops::reduce::split_axis;
use crate::tape::{Backward, Var};
use crate::tensor::{numel, Tensor};

struct Reshape;

impl Backward for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.reshape(inputs[0].shape().to_vec()).unwrap())]
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves axis `perm[i]` of the input to position `i`.
fn permute_data(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let n = x.numel();
    let mut out = vec![0.0; n];
    let rank = perm.len();
    let mut index = vec![0usize; rank];
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut src = 0usize;
    for dst in out.iter_mut() {
        *dst = x.data()[src];
        for ax in (0..rank).rev() {
            index[ax] += 1;
            src += src_strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * index[ax];
            index[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

struct Permute {
    inverse: Vec<usize>,
}

impl Backward for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(permute_data(g, &self.inverse))]
    }
}

struct Concat {
    axis: usize,
}

impl Backward for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let total: usize = inputs.iter().map(|t| t.shape()[self.axis]).sum();
        let (outer, _, inner) = split_axis(g.shape(), self.axis);
        let mut start = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (t, &need) in inputs.iter().zip(needs) {
            let len = t.shape()[self.axis];
            if need {
                let mut out = Vec::with_capacity(t.numel());
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    out.extend_from_slice(&g.data()[base..base + len * inner]);
                }
                grads.push(Some(Tensor::new(t.shape().to_vec(), out).unwrap()));
            } else {
                grads.push(None);
            }
            start += len;
        }
        grads
    }
}

struct Narrow {
    axis: usize,
    start: usize,
}

impl Backward for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (outer, total, inner) = split_axis(x.shape(), self.axis);
        let len = out.shape()[self.axis];
        let mut dx = Tensor::zeros(x.shape().to_vec());
        for o in 0..outer {
            let dst = (o * total + self.start) * inner;
            let src = o * len * inner;
            dx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
        }
        vec![Some(dx)]
    }
}

/// Gathers rows (axis 0 slices); indices may repeat.
struct IndexSelect {
    indices: Vec<usize>,
}

impl Backward for IndexSelect {
    fn name(&self) -> &'static str {
        "index_select"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let row = x.numel() / x.shape()[0].max(1);
        let mut dx = Tensor::zeros(x.shape().to_vec());
        for (k, &i) in self.indices.iter().enumerate() {
            let src = &g.data()[k * row..(k + 1) * row];
            for (d, s) in dx.data_mut()[i * row..(i + 1) * row].iter_mut().zip(src) {
                *d += s;
            }
        }
        vec![Some(dx)]
    }
}

/// Gathers elements of the flattened input.
struct Take {
    indices: Vec<usize>,
}

impl Backward for Take {
    fn name(&self) -> &'static str {
        "take"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut dx = Tensor::zeros(inputs[0].shape().to_vec());
        let d = dx.data_mut();
        for (&i, &gv) in self.indices.iter().zip(g.data()) {
            d[i] += gv;
        }
        vec![Some(dx)]
    }
}

impl<'t> Var<'t> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape().record(&[self], value, Reshape))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let value = permute_data(&x, perm);
        Ok(self.tape().record(&[self], value, Permute { inverse }))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(self) -> Result<Var<'t>> {
        if self.value().rank() != 2 {
            return Err(invalid("t", "expected a 2-D tensor"));
        }
        self.permute(&[1, 0])
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|v| v.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(first.tape().record(parts, value, Concat { axis }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} exceeds extent {}", start + len, shape[axis]),
            ));
        }
        let (outer, total, inner) = split_axis(shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.tape().record(&[self], value, Narrow { axis, start }))
    }

    /// Selects rows (axis-0 slices) by index; repeated indices are allowed.
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if shape.is_empty() {
            return Err(invalid("index_select", "scalar input"));
        }
        let rows = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(invalid("index_select", format!("row {bad} out of range {rows}")));
        }
        let row = numel(&shape[1..]);
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[0] = indices.len();
        let value = Tensor::new(new_shape, out)?;
        Ok(self.tape().record(
            &[self],
            value,
            IndexSelect {
                indices: indices.to_vec(),
            },
        ))
    }

    /// Gathers elements of the flattened tensor into a 1-D result.
    pub fn take(self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
            return Err(invalid("take", format!("index {bad} out of range {}", x.numel())));
        }
        let out = indices.iter().map(|&i| x.data()[i]).collect();
        let value = Tensor::from_vec(out);
        Ok(self.tape().record(
            &[self],
            value,
            Take {
                indices: indices.to_vec(),
            },
        ))
    }
}
