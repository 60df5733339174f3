//! Minimal layers on top of `candle-core` with seeded initialisation.
//!
//! Every trainable tensor lives in a [`ParamStore`] under a stable name so
//! checkpoints can be written and restored by name. Randomness (weight
//! init, dropout) always comes from a caller-supplied generator.

use std::collections::HashMap;

use candle_core::{DType, Device, Shape, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    params: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            params: Vec::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn register(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::structural(format!("parameter {name} registered twice")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let out = var.as_tensor().clone();
        self.params.push((name.to_string(), var));
        Ok(out)
    }

    pub fn uniform<S: Into<Shape>>(
        &mut self,
        name: &str,
        shape: S,
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let shape = shape.into();
        let values: Vec<f64> = (0..shape.elem_count())
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let t = Tensor::from_vec(values, shape, &self.device)?;
        self.register(name, t)
    }

    pub fn constant<S: Into<Shape>>(&mut self, name: &str, shape: S, value: f64) -> Result<Tensor> {
        let t = Tensor::full(value, shape, &self.device)?;
        self.register(name, t)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Snapshot of all values as flat `f32` vectors keyed by name.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        self.params
            .iter()
            .map(|(n, v)| {
                let dims = v.dims().to_vec();
                let flat = v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
                Ok((n.clone(), dims, flat))
            })
            .collect()
    }

    /// Overwrites every parameter from `values`; names and shapes must match.
    pub fn import(&self, values: &HashMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::structural(format!(
                "checkpoint has {} tensors, model has {}",
                values.len(),
                self.params.len()
            )));
        }
        for (name, var) in &self.params {
            let (dims, data) = values
                .get(name)
                .ok_or_else(|| Error::structural(format!("checkpoint lacks tensor {name}")))?;
            if dims.as_slice() != var.dims() {
                return Err(Error::structural(format!(
                    "tensor {name}: checkpoint shape {dims:?}, model shape {:?}",
                    var.dims()
                )));
            }
            let t = Tensor::from_slice(data, dims.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) for weights and bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), (out_dim, in_dim), bound, rng)?;
        let bias = if bias {
            Some(store.uniform(&format!("{name}.bias"), out_dim, bound, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.gamma"), dim, 1.0)?,
            beta: store.constant(&format!("{name}.beta"), dim, 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Dropout driven by an explicit generator; a disabled instance is the
/// identity (evaluation mode).
pub struct Dropout<'a> {
    p: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn disabled() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn new(p: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some() && self.p > 0.0
    }

    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        let p = self.p;
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => {
                let scale = 1.0 / (1.0 - p);
                let mask: Vec<f32> = (0..x.elem_count())
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale as f32 })
                    .collect();
                let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
                Ok(x.mul(&mask)?)
            }
            _ => Ok(x.clone()),
        }
    }
}

/// Row-wise softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `softmax((Q K^T + M + B) / sqrt(C)) V` for `q, k: [.., L, C]`, `v: [.., L, Cv]`.
/// `logit_bias` (mask plus relative-position bias) broadcasts against
/// `[.., L, L]`. Returns the output and the attention weights.
pub fn scaled_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    logit_bias: Option<&Tensor>,
    dropout: &mut Dropout,
) -> Result<(Tensor, Tensor)> {
    let c = q.dim(D::Minus1)? as f64;
    let mut logits = q.matmul(&k.t()?)?;
    if let Some(b) = logit_bias {
        logits = logits.broadcast_add(b)?;
    }
    let weights = softmax_last(&(logits / c.sqrt())?)?;
    let dropped = dropout.apply(&weights)?;
    Ok((dropped.matmul(v)?, weights))
}
