//! Pre-norm transformer layers with a double residual, stacked with an outer
//! skip connection.
//!
//! All forward functions accept `[L, D]` or a batch `[B, L, D]`; attention
//! runs over the `L` axis independently for each batch entry.

use crate::error::{Error, Result};
use crate::init::{filled, linear_weight, InitRng, LN_EPS};
use crate::params::{push_params, Parameterized};
use crate::tensor::Tensor;

/// Sinusoidal encoding, `e[p, 2i] = sin(p / 10000^(2i/d))`, `e[p, 2i+1] = cos(..)`.
pub fn positional_encoding(seq_len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::config(format!(
            "positional encoding needs an even model width, got {d_model}"
        )));
    }
    let mut data = vec![0.0; seq_len * d_model];
    for pos in 0..seq_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(data, &[seq_len, d_model])
}

/// Views `[L, D]` as `[1, L, D]`; returns the batch size and sequence length.
fn as_batch(z: &Tensor, d_model: usize) -> Result<(Tensor, usize, usize)> {
    match *z.shape() {
        [l, d] if d == d_model => Ok((z.reshape(&[1, l, d])?, 1, l)),
        [b, l, d] if d == d_model => Ok((z.clone(), b, l)),
        _ => Err(Error::config(format!(
            "expected [L, {d_model}] or [B, L, {d_model}], got {:?}",
            z.shape()
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    heads: usize,
    d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(d_model: usize, heads: usize, rng: &mut InitRng) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "model width {d_model} is not divisible by {heads} heads"
            )));
        }
        let mut proj = || -> Result<(Tensor, Tensor)> {
            Ok((
                linear_weight(rng, d_model, d_model)?,
                filled(&[d_model], 0.0)?,
            ))
        };
        let (wq, bq) = proj()?;
        let (wk, bk) = proj()?;
        let (wv, bv) = proj()?;
        let (wo, bo) = proj()?;
        Ok(MultiHeadAttention {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            heads,
            d_model,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `[B, L, D]` → `[B·H, L, dh]`
    fn split_heads(&self, x: &Tensor, b: usize, l: usize) -> Result<Tensor> {
        let dh = self.d_model / self.heads;
        x.reshape(&[b, l, self.heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * self.heads, l, dh])
    }

    fn weights_and_values(&self, z: &Tensor) -> Result<(Tensor, Tensor, usize, usize)> {
        let (z, b, l) = as_batch(z, self.d_model)?;
        let q = self.split_heads(&z.linear(&self.wq, Some(&self.bq))?, b, l)?;
        let k = self.split_heads(&z.linear(&self.wk, Some(&self.bk))?, b, l)?;
        let v = self.split_heads(&z.linear(&self.wv, Some(&self.bv))?, b, l)?;
        let dh = (self.d_model / self.heads) as f64;
        let weights = q.matmul(&k, true)?.scale(1.0 / dh.sqrt()).softmax();
        Ok((weights, v, b, l))
    }

    /// Attention weights, `[B·H, L, L]`.
    pub fn attention_weights(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.weights_and_values(z)?.0)
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (weights, v, b, l) = self.weights_and_values(z)?;
        let dh = self.d_model / self.heads;
        let heads = weights
            .matmul(&v, false)?
            .reshape(&[b, self.heads, l, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, l, self.d_model])?;
        heads.linear(&self.wo, Some(&self.bo))?.reshape(z.shape())
    }
}

impl Parameterized for MultiHeadAttention {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_params!(out, "", ref self.{wq, bq, wk, bk, wv, bv, wo, bo});
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        push_params!(out, "", mut self.{wq, bq, wk, bk, wv, bv, wo, bo});
        out
    }
}

/// `z'' = MHA(LN1(z'))`, output `FFW(LN2(z'' + z')) + z'' + z'`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub attention: MultiHeadAttention,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
    pub ff1_weight: Tensor,
    pub ff1_bias: Tensor,
    pub ff2_weight: Tensor,
    pub ff2_bias: Tensor,
}

impl TransformerLayer {
    pub fn new(d_model: usize, heads: usize, d_ff: usize, rng: &mut InitRng) -> Result<Self> {
        if d_ff == 0 {
            return Err(Error::config("feed-forward width must be positive"));
        }
        let attention = MultiHeadAttention::new(d_model, heads, rng)?;
        Ok(TransformerLayer {
            norm1_gain: filled(&[d_model], 1.0)?,
            norm1_bias: filled(&[d_model], 0.0)?,
            attention,
            norm2_gain: filled(&[d_model], 1.0)?,
            norm2_bias: filled(&[d_model], 0.0)?,
            ff1_weight: linear_weight(rng, d_model, d_ff)?,
            ff1_bias: filled(&[d_ff], 0.0)?,
            ff2_weight: linear_weight(rng, d_ff, d_model)?,
            ff2_bias: filled(&[d_model], 0.0)?,
        })
    }

    pub fn feed_forward(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.ff1_weight, Some(&self.ff1_bias))?
            .relu()
            .linear(&self.ff2_weight, Some(&self.ff2_bias))
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let attended =
            self.attention
                .forward(&z.layer_norm(&self.norm1_gain, &self.norm1_bias, LN_EPS)?)?;
        let skip = attended.add(z)?;
        let ff =
            self.feed_forward(&skip.layer_norm(&self.norm2_gain, &self.norm2_bias, LN_EPS)?)?;
        ff.add(&skip)
    }
}

impl Parameterized for TransformerLayer {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_params!(out, "", ref self.{norm1_gain, norm1_bias});
        for (name, t) in self.attention.parameters() {
            out.push((format!("attention.{name}"), t));
        }
        push_params!(out, "", ref self.{norm2_gain, norm2_bias, ff1_weight, ff1_bias, ff2_weight, ff2_bias});
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        push_params!(out, "", mut self.{norm1_gain, norm1_bias});
        for (name, t) in self.attention.parameters_mut() {
            out.push((format!("attention.{name}"), t));
        }
        push_params!(out, "", mut self.{norm2_gain, norm2_bias, ff1_weight, ff1_bias, ff2_weight, ff2_bias});
        out
    }
}

/// `f(z) = g^K(z + e) + z`.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
    pub positional_encoding: bool,
}

impl TransformerStack {
    pub fn new(
        layers: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        positional_encoding: bool,
        rng: &mut InitRng,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::config(
                "a transformer stack needs at least one layer",
            ));
        }
        if positional_encoding && !d_model.is_multiple_of(2) {
            return Err(Error::config(format!(
                "positional encoding needs an even model width, got {d_model}"
            )));
        }
        let layers = (0..layers)
            .map(|_| TransformerLayer::new(d_model, heads, d_ff, rng))
            .collect::<Result<_>>()?;
        Ok(TransformerStack {
            layers,
            positional_encoding,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let shape = z.shape();
        let (seq, d) = (shape[shape.len().saturating_sub(2)], shape[shape.len() - 1]);
        let mut x = if self.positional_encoding {
            z.add(&positional_encoding(seq, d)?)?
        } else {
            z.clone()
        };
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        x.add(z)
    }
}

impl Parameterized for TransformerStack {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.parameters() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.parameters_mut() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out
    }
}
