use candle_core::{DType, Device, Tensor, Var, D};

use super::config::Activation;
use super::params::{Init, ParamStore};
use crate::error::Result;

/// Large negative additive bias for masked attention logits.
pub const NEG_INF: f64 = -1e9;

fn take(var: Var, trainable: bool) -> Tensor {
    if trainable {
        var.as_tensor().clone()
    } else {
        var.as_detached_tensor()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// `weight` is stored `(out, in)` as in the reference checkpoints.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
        trainable: bool,
    ) -> Result<Self> {
        let weight = store.get(&format!("{prefix}.weight"), &[out_dim, in_dim], weight_init)?;
        let bias = store.get(&format!("{prefix}.bias"), &[out_dim], Init::Const(0.0))?;
        Ok(Self {
            weight: take(weight, trainable),
            bias: take(bias, trainable),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, trainable: bool) -> Result<Self> {
        let weight = store.get(&format!("{prefix}.weight"), &[dim], Init::Const(1.0))?;
        let bias = store.get(&format!("{prefix}.bias"), &[dim], Init::Const(0.0))?;
        Ok(Self {
            weight: take(weight, trainable),
            bias: take(bias, trainable),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    weight: Tensor,
    dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        dim: usize,
        std: f64,
        trainable: bool,
    ) -> Result<Self> {
        let weight = store.get(name, &[rows, dim], Init::Normal(std))?;
        Ok(Self {
            weight: take(weight, trainable),
            dim,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// `ids` is `(batch, len)` u32; returns `(batch, len, dim)`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let flat = ids.flatten_all()?;
        Ok(self.weight.index_select(&flat, 0)?.reshape((b, l, self.dim))?)
    }
}

pub fn activate(x: &Tensor, act: Activation) -> Result<Tensor> {
    Ok(match act {
        Activation::Gelu => x.gelu_erf()?,
        Activation::Silu => x.silu()?,
        Activation::Relu => x.relu()?,
        Activation::Tanh => x.tanh()?,
    })
}

/// Softmax over the last dimension, built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Log-softmax over the last dimension.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Additive key-padding bias `(batch, 1, 1, len)` from a 0/1 mask.
pub fn padding_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, l) = mask.dims2()?;
    Ok(((1.0 - mask)? * NEG_INF)?.reshape((b, 1, 1, l))?)
}

/// Additive causal bias `(1, 1, len, len)`.
pub fn causal_bias(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j > i { NEG_INF } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(v, (1, 1, len, len), device)?.to_dtype(dtype)?)
}

#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        std: f64,
        trainable: bool,
    ) -> Result<Self> {
        let mk = |store: &mut ParamStore, n: &str| {
            Linear::new(store, &format!("{prefix}.{n}"), dim, dim, Init::Normal(std), trainable)
        };
        Ok(Self {
            q: mk(store, "q_proj")?,
            k: mk(store, "k_proj")?,
            v: mk(store, "v_proj")?,
            out: mk(store, "out_proj")?,
            heads,
            head_dim: dim / heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `bias` broadcasts against `(batch, heads, q_len, k_len)`.
    pub fn forward(&self, query: &Tensor, kv: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (b, lq, d) = query.dims3()?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let q = self.split_heads(&(self.q.forward(query)? * scale)?)?;
        let k = self.split_heads(&self.k.forward(kv)?)?;
        let v = self.split_heads(&self.v.forward(kv)?)?;
        let scores = q.matmul(&k.t()?.contiguous()?)?.broadcast_add(bias)?;
        let probs = softmax_last(&scores)?;
        let ctx = probs.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, lq, d))?;
        self.out.forward(&ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_normalizes() {
        let mut store = ParamStore::new(0, DType::F64);
        let ln = LayerNorm::new(&mut store, "ln", 4, true).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [0.0, NEG_INF, 0.0]], &Device::Cpu).unwrap();
        let p = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in &p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p[1][1], 0.0);
        let lp = log_softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        assert!((lp[0][2].exp() - p[0][2]).abs() < 1e-12);
    }

    #[test]
    fn causal_bias_masks_future() {
        let b = causal_bias(3, DType::F64, &Device::Cpu).unwrap();
        let v = b.reshape((3, 3)).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(v[0][1], NEG_INF);
        assert_eq!(v[2][1], 0.0);
    }
}
