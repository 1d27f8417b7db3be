//! Parameterized building blocks shared by the encoder and the fusion module.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::param::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, fan_in, fan_out),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// `x·W + b` over the last axis of a rank-1 or rank-2 input.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![dim], T::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two linear layers with an activation in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dims: (usize, usize, usize),
        act: Activation,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dims.0, dims.1)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), dims.1, dims.2)?,
            act,
        })
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.activation(h, self.act);
        self.fc2.forward(g, store, h)
    }
}

/// Scale applied to query-key products: `sqrt(d / heads)`.
pub fn attention_scale(d: usize, heads: usize) -> f64 {
    (d as f64 / heads as f64).sqrt()
}

/// Splits already-projected `q[n_q×d]`, `k[n_kv×d]`, `v[n_kv×d]` into heads,
/// attends per head and concatenates the head outputs back to `[n_q×d]`.
/// Returns the concatenated output and each head's attention matrix.
pub fn multi_head_attention<T: Float>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = g.value(q).last_dim();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::config(
            "heads",
            format!("attention dim {d} is not divisible by {heads} heads"),
        ));
    }
    if g.value(k).last_dim() != d || g.value(v).last_dim() != d {
        return Err(Error::shape(
            "multi_head_attention",
            g.value(q).shape(),
            g.value(k).shape(),
        ));
    }
    let dh = d / heads;
    let inv_scale = T::of(1.0 / attention_scale(d, heads));
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_bt(qh, kh)?;
        let scores = g.scale(scores, inv_scale);
        let attn = g.softmax(scores)?;
        outs.push(g.matmul(attn, vh)?);
        maps.push(attn);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    Ok((out, maps))
}

/// Stacks per-head `[n_q×n_kv]` maps into one `[heads×n_q×n_kv]` tensor.
pub fn stack_maps<T: Float>(g: &Graph<T>, maps: &[Var]) -> Tensor<T> {
    let first = g.value(maps[0]).shape().to_vec();
    let mut data = Vec::with_capacity(maps.len() * g.value(maps[0]).len());
    for &m in maps {
        data.extend_from_slice(g.value(m).data());
    }
    let mut shape = vec![maps.len()];
    shape.extend(first);
    Tensor::new(shape, data).expect("maps share a shape")
}
