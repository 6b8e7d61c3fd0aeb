use crate::error::{mismatch, Result};
use crate::tape::{Backward, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

struct Binary(BinaryKind);

impl Backward for Binary {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
            BinaryKind::Max => "maximum",
            BinaryKind::Min => "minimum",
        }
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let pick = |f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            let data = g
                .data()
                .iter()
                .zip(a.data().iter().zip(b.data()))
                .map(|(&g, (&a, &b))| f(g, a, b))
                .collect();
            Tensor::new(g.shape().to_vec(), data).unwrap()
        };
        let (da, db): (Option<Tensor>, Option<Tensor>) = match self.0 {
            BinaryKind::Add => (needs[0].then(|| g.clone()), needs[1].then(|| g.clone())),
            BinaryKind::Sub => (needs[0].then(|| g.clone()), needs[1].then(|| g.scale(-1.0))),
            BinaryKind::Mul => (
                needs[0].then(|| pick(&|g, _, b| g * b)),
                needs[1].then(|| pick(&|g, a, _| g * a)),
            ),
            BinaryKind::Div => (
                needs[0].then(|| pick(&|g, _, b| g / b)),
                needs[1].then(|| pick(&|g, a, b| -g * a / (b * b))),
            ),
            // Ties route the gradient to the first operand.
            BinaryKind::Max => (
                needs[0].then(|| pick(&|g, a, b| if a >= b { g } else { 0.0 })),
                needs[1].then(|| pick(&|g, a, b| if a >= b { 0.0 } else { g })),
            ),
            BinaryKind::Min => (
                needs[0].then(|| pick(&|g, a, b| if a <= b { g } else { 0.0 })),
                needs[1].then(|| pick(&|g, a, b| if a <= b { 0.0 } else { g })),
            ),
        };
        vec![da, db]
    }
}

#[derive(Clone, Copy)]
enum UnaryKind {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Ln,
    Sigmoid,
    Relu,
    Softplus,
    Abs,
    Sqrt,
    Square,
    Tanh,
}

struct Unary(UnaryKind);

fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl UnaryKind {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Scale(s) => x * s,
            UnaryKind::AddScalar(s) => x + s,
            UnaryKind::Exp => x.exp(),
            UnaryKind::Ln => x.ln(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Square => x * x,
            UnaryKind::Tanh => x.tanh(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Neg => -1.0,
            UnaryKind::Scale(s) => s,
            UnaryKind::AddScalar(_) => 1.0,
            UnaryKind::Exp => y,
            UnaryKind::Ln => 1.0 / x,
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Softplus => sigmoid(x),
            UnaryKind::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Sqrt => 0.5 / y,
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Tanh => 1.0 - y * y,
        }
    }
}

impl Backward for Unary {
    fn name(&self) -> &'static str {
        "unary"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let data = g
            .data()
            .iter()
            .zip(x.data().iter().zip(out.data()))
            .map(|(&g, (&x, &y))| g * self.0.derivative(x, y))
            .collect();
        vec![Some(Tensor::new(x.shape().to_vec(), data).unwrap())]
    }
}

/// `x (op) b` where `b`'s shape equals the trailing axes of `x`.
struct Broadcast {
    mul: bool,
}

impl Backward for Broadcast {
    fn name(&self) -> &'static str {
        if self.mul {
            "broadcast_mul"
        } else {
            "broadcast_add"
        }
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, b) = (inputs[0], inputs[1]);
        let inner = b.numel();
        let dx = needs[0].then(|| {
            if self.mul {
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * b.data()[i % inner])
                    .collect();
                Tensor::new(x.shape().to_vec(), data).unwrap()
            } else {
                g.clone()
            }
        });
        let db = needs[1].then(|| {
            let mut acc = vec![0.0; inner];
            if inner > 0 {
                for (row_g, row_x) in g.data().chunks_exact(inner).zip(x.data().chunks_exact(inner)) {
                    for i in 0..inner {
                        acc[i] += if self.mul { row_g[i] * row_x[i] } else { row_g[i] };
                    }
                }
            }
            Tensor::new(b.shape().to_vec(), acc).unwrap()
        });
        vec![dx, db]
    }
}

impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let op = Binary(kind);
        if a.shape() != b.shape() {
            return Err(mismatch(op.name(), a.shape(), b.shape()));
        }
        let value = a.zip_map(&b, |x, y| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
            BinaryKind::Max => x.max(y),
            BinaryKind::Min => x.min(y),
        })?;
        Ok(self.tape().record(&[self, other], value, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Max)
    }

    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Min)
    }

    fn unary(self, kind: UnaryKind) -> Var<'t> {
        let value = self.value().map(|x| kind.apply(x));
        self.tape().record(&[self], value, Unary(kind))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryKind::Neg)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(UnaryKind::Scale(s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(UnaryKind::AddScalar(s))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(UnaryKind::Ln)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryKind::Relu)
    }

    /// `ln(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(self) -> Var<'t> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(UnaryKind::Abs)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryKind::Square)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(UnaryKind::Tanh)
    }

    fn broadcast(self, b: Var<'t>, mul: bool) -> Result<Var<'t>> {
        let (x, bv) = (self.value(), b.value());
        let op = Broadcast { mul };
        let (sx, sb) = (x.shape(), bv.shape());
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(mismatch(op.name(), sx, sb));
        }
        let inner = bv.numel();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let w = bv.data()[i % inner];
                if mul {
                    v * w
                } else {
                    v + w
                }
            })
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.tape().record(&[self, b], value, op))
    }

    /// Adds `b` to every trailing block of `self`; `b.shape()` must equal the
    /// trailing axes of `self.shape()`.
    pub fn broadcast_add(self, b: Var<'t>) -> Result<Var<'t>> {
        self.broadcast(b, false)
    }

    pub fn broadcast_mul(self, b: Var<'t>) -> Result<Var<'t>> {
        self.broadcast(b, true)
    }
}
