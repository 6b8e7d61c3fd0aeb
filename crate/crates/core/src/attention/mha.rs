use clipseg_tensor::Var;
use rand::Rng;

use crate::error::{shape_err, CoreError, Result};
use crate::nn::{init_linear, linear};
use crate::params::{Bound, ParamStore};

/// Scaled dot-product attention with `heads` heads of width `C / heads`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub prefix: String,
    pub hidden: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: impl Into<String>, hidden: usize, heads: usize) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(CoreError::Config(format!(
                "hidden size {hidden} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            prefix: prefix.into(),
            hidden,
            heads,
        })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for part in ["query", "key", "value", "output"] {
            init_linear(store, &self.name(part), self.hidden, self.hidden, rng);
        }
    }

    /// Initializes only the query/key projections (attention maps without values).
    pub fn init_maps_only<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for part in ["query", "key"] {
            init_linear(store, &self.name(part), self.hidden, self.hidden, rng);
        }
    }

    /// Per-head attention `[M, N, K]` of projected queries `[N, C]` over
    /// projected keys `[K, C]`.
    pub fn attention_weights<'t>(&self, q: Var<'t>, k: Var<'t>) -> Result<Vec<Var<'t>>> {
        let cv = self.hidden / self.heads;
        let scale = 1.0 / (cv as f64).sqrt();
        (0..self.heads)
            .map(|m| {
                let qm = q.narrow(1, m * cv, cv)?;
                let km = k.narrow(1, m * cv, cv)?;
                Ok(qm.matmul_nt(km)?.scale(scale).softmax(1)?)
            })
            .collect()
    }

    pub fn project_queries<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        linear(p, &self.name("query"), x)
    }

    pub fn project_keys<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        linear(p, &self.name("key"), x)
    }

    /// Returns the output `[N, C]` and attention `[M, N, K]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        queries: Var<'t>,
        keys: Var<'t>,
        values: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (qs, ks, vs) = (queries.shape(), keys.shape(), values.shape());
        let c = self.hidden;
        if qs.len() != 2 || qs[1] != c || ks.len() != 2 || ks[1] != c || vs != ks {
            return Err(shape_err(format!(
                "attention inputs {qs:?}, {ks:?}, {vs:?} must be [N, {c}], [K, {c}], [K, {c}]"
            )));
        }
        if ks[0] == 0 {
            return Err(shape_err("attention needs at least one key"));
        }
        let (n, k) = (qs[0], ks[0]);
        let cv = c / self.heads;
        let q = self.project_queries(p, queries)?;
        let kp = self.project_keys(p, keys)?;
        let v = linear(p, &self.name("value"), values)?;
        let weights = self.attention_weights(q, kp)?;
        let mut heads = Vec::with_capacity(self.heads);
        for (m, a) in weights.iter().enumerate() {
            heads.push(a.matmul(v.narrow(1, m * cv, cv)?)?);
        }
        let mixed = Var::concat(&heads, 1)?;
        let out = linear(p, &self.name("output"), mixed)?;
        let stacked: Vec<_> = weights
            .iter()
            .map(|a| a.reshape(vec![1, n, k]))
            .collect::<clipseg_tensor::Result<_>>()?;
        Ok((out, Var::concat(&stacked, 0)?))
    }
}

/// Attention of `queries` `[N, C]` over `keys_values` `[K, C]`, keys and
/// values drawn from the same tensor.
pub fn multi_head_attention<'t>(
    p: &Bound<'t>,
    mha: &MultiHeadAttention,
    queries: Var<'t>,
    keys_values: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    mha.forward(p, queries, keys_values, keys_values)
}
