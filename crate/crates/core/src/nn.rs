//! Small building blocks shared by the model: linear layers, layer norm and
//! the feed-forward block.

use clipseg_tensor::{Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::params::{xavier_uniform, Bound, ParamStore};

pub const LN_EPS: f64 = 1e-5;

pub fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) {
    store.insert(format!("{name}.weight"), xavier_uniform(c_out, c_in, rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
}

pub fn init_linear_zero(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) {
    store.insert(format!("{name}.weight"), Tensor::zeros(vec![c_out, c_in]));
    store.insert(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
}

pub fn linear<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    Ok(x.linear(w, Some(b))?)
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, c: usize) {
    store.insert(format!("{name}.gamma"), Tensor::ones(vec![c]));
    store.insert(format!("{name}.beta"), Tensor::zeros(vec![c]));
}

pub fn layer_norm<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    let g = p.get(&format!("{name}.gamma"))?;
    let b = p.get(&format!("{name}.beta"))?;
    Ok(x.layer_norm(g, b, LN_EPS)?)
}

pub fn init_ffn<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, hidden: usize, rng: &mut R) {
    init_linear(store, &format!("{name}.fc1"), c, hidden, rng);
    init_linear(store, &format!("{name}.fc2"), hidden, c, rng);
}

/// `fc2(relu(fc1(x)))`.
pub fn ffn<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    let h = linear(p, &format!("{name}.fc1"), x)?.relu();
    linear(p, &format!("{name}.fc2"), h)
}
