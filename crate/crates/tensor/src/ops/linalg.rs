use crate::error::{mismatch, Result};
use crate::tape::{Backward, Var};
use crate::tensor::Tensor;

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`
/// when `trans_b`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the row-major buffers whose
    // lengths are checked against m, k, n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
}

impl Backward for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (inputs[0], inputs[1]);
        let da = needs[0].then(|| {
            // dA = G · op(B)^T
            let mut out = vec![0.0; m * k];
            gemm(m, n, k, 1.0, g.data(), false, b.data(), !self.trans_b, 0.0, &mut out);
            Tensor::new(a.shape().to_vec(), out).unwrap()
        });
        let db = needs[1].then(|| {
            let mut out = vec![0.0; k * n];
            if self.trans_b {
                // B is n x k: dB = G^T · A
                gemm(n, m, k, 1.0, g.data(), true, a.data(), false, 0.0, &mut out);
            } else {
                gemm(k, m, n, 1.0, a.data(), true, g.data(), false, 0.0, &mut out);
            }
            Tensor::new(b.shape().to_vec(), out).unwrap()
        });
        vec![da, db]
    }
}

struct Linear {
    rows: usize,
    c_in: usize,
    c_out: usize,
}

impl Backward for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (r, ci, co) = (self.rows, self.c_in, self.c_out);
        let (x, w) = (inputs[0], inputs[1]);
        let dx = needs[0].then(|| {
            let mut out = vec![0.0; r * ci];
            gemm(r, co, ci, 1.0, g.data(), false, w.data(), false, 0.0, &mut out);
            Tensor::new(x.shape().to_vec(), out).unwrap()
        });
        let dw = needs[1].then(|| {
            let mut out = vec![0.0; co * ci];
            gemm(co, r, ci, 1.0, g.data(), true, x.data(), false, 0.0, &mut out);
            Tensor::new(w.shape().to_vec(), out).unwrap()
        });
        let mut grads = vec![dx, dw];
        if inputs.len() == 3 {
            grads.push(needs[2].then(|| {
                let mut db = vec![0.0; co];
                for row in g.data().chunks_exact(co.max(1)).take(r) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                Tensor::from_vec(db)
            }));
        }
        grads
    }
}

impl<'t> Var<'t> {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch(op, sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(mismatch(op, sa, sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, a.data(), false, b.data(), trans_b, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self
            .tape()
            .record(&[self, other], value, MatMul { m, k, n, trans_b }))
    }

    /// `y = x · weightᵀ + bias` over the last axis of `x`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let (sx, sw) = (x.shape(), w.shape());
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[1] {
            return Err(mismatch("linear", sx, sw));
        }
        let (c_out, c_in) = (sw[0], sw[1]);
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let mut out = vec![0.0; rows * c_out];
        let bias_value = bias.map(|b| b.value());
        if let Some(b) = &bias_value {
            if b.shape() != [c_out] {
                return Err(mismatch("linear", sw, b.shape()));
            }
            for row in out.chunks_exact_mut(c_out.max(1)) {
                row.copy_from_slice(b.data());
            }
        }
        let beta = if bias_value.is_some() { 1.0 } else { 0.0 };
        gemm(rows, c_in, c_out, 1.0, x.data(), false, w.data(), true, beta, &mut out);
        let mut shape = sx[..sx.len() - 1].to_vec();
        shape.push(c_out);
        let value = Tensor::new(shape, out)?;
        let op = Linear { rows, c_in, c_out };
        Ok(match bias {
            Some(b) => self.tape().record(&[self, weight, b], value, op),
            None => self.tape().record(&[self, weight], value, op),
        })
    }
}
