//! The x0-predicting denoiser.
//!
//! ```text
//! t  -> sinusoid -> MLP ------------------------------+  T (256)
//! seed (8 x dim, flattened) -> linear -> D (192) -+    |
//! style one-hot            -> linear -> S (64)  --+-> concat + T = Z (256)
//! audio (N x D_raw) -> linear -> A (64) ---------+
//! x_t   (N x dim)   -> linear -> G (256) --------+-> [Z | A | G] per frame -> linear
//!   -> cross-local attention block (window W, one block back, RPE)
//!   -> [out | Z] per frame -> linear
//!   -> self-attention blocks (full mask, RPE) -> norm -> linear -> x0_hat
//! ```
//!
//! Masked seed/style conditions contribute a zero embedding.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::project_features;
use crate::diffusion::X0Model;
use crate::error::{Error, Result};
use crate::masks::{rpe_indices, AttentionMask, MaskKind};
use crate::nn::{scaled_attention, Dropout, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub gesture_dim: usize,
    /// Raw audio feature width fed to the audio projection.
    pub audio_dim: usize,
    pub style_count: usize,
    pub seed_frames: usize,
    pub clip_frames: usize,
    pub heads: usize,
    pub head_channels: usize,
    pub model_channels: usize,
    pub self_attn_layers: usize,
    pub window: usize,
    pub rpe_radius: usize,
    pub dropout: f64,
    pub ff_mult: usize,
    pub timestep_dim: usize,
    pub gesture_emb_dim: usize,
    pub audio_emb_dim: usize,
    pub style_emb_dim: usize,
    pub seed_emb_dim: usize,
    pub diffusion_steps: usize,
    /// Pattern of the local attention stage; `cross_local` unless ablating.
    pub local_pattern: MaskKind,
}

impl DenoiserConfig {
    /// Full-size configuration: 8 heads x 32 channels, 8 self-attention layers, window 11.
    pub fn full(gesture_dim: usize, audio_dim: usize, style_count: usize) -> Self {
        Self {
            gesture_dim,
            audio_dim,
            style_count,
            seed_frames: 8,
            clip_frames: 80,
            heads: 8,
            head_channels: 32,
            model_channels: 256,
            self_attn_layers: 8,
            window: 11,
            rpe_radius: 22,
            dropout: 0.1,
            ff_mult: 4,
            timestep_dim: 256,
            gesture_emb_dim: 256,
            audio_emb_dim: 64,
            style_emb_dim: 64,
            seed_emb_dim: 192,
            diffusion_steps: 1000,
            local_pattern: MaskKind::CrossLocal,
        }
    }

    /// CPU-sized variant: narrower attention and two self-attention layers,
    /// embedding widths unchanged.
    pub fn desk(gesture_dim: usize, audio_dim: usize, style_count: usize) -> Self {
        Self {
            heads: 4,
            head_channels: 16,
            model_channels: 64,
            self_attn_layers: 2,
            ..Self::full(gesture_dim, audio_dim, style_count)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads * self.head_channels != self.model_channels {
            return Err(Error::config(format!(
                "heads ({}) x head channels ({}) must equal model channels ({})",
                self.heads, self.head_channels, self.model_channels
            )));
        }
        if self.seed_emb_dim + self.style_emb_dim != self.timestep_dim {
            return Err(Error::config(
                "seed and style embedding widths must sum to the timestep embedding width",
            ));
        }
        if self.timestep_dim % 2 != 0 {
            return Err(Error::config("timestep embedding width must be even"));
        }
        let positive = [
            self.gesture_dim,
            self.audio_dim,
            self.style_count,
            self.seed_frames,
            self.clip_frames,
            self.window,
            self.ff_mult,
            self.diffusion_steps,
        ];
        if positive.contains(&0) {
            return Err(Error::config("denoiser sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One-hot style vector.
pub fn one_hot(index: usize, count: usize) -> Result<Vec<f64>> {
    if index >= count {
        return Err(Error::validation(format!("style {index} out of {count} styles")));
    }
    let mut v = vec![0.0; count];
    v[index] = 1.0;
    Ok(v)
}

/// Conditioning bundle for one clip, in normalized feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditions {
    pub seed: Array2<f64>,
    pub style: Vec<f64>,
    pub audio: Array2<f64>,
    pub seed_masked: bool,
    pub style_masked: bool,
}

impl Conditions {
    pub fn new(seed: Array2<f64>, style: Vec<f64>, audio: Array2<f64>) -> Result<Self> {
        let ones = style.iter().filter(|v| **v == 1.0).count();
        let zeros = style.iter().filter(|v| **v == 0.0).count();
        if ones != 1 || ones + zeros != style.len() {
            return Err(Error::validation("style must be a one-hot vector"));
        }
        Ok(Self {
            seed,
            style,
            audio,
            seed_masked: false,
            style_masked: false,
        })
    }
}

/// Returns `c` with the given masks set; audio is never masked.
pub fn apply_condition_masks(c: &Conditions, seed_masked: bool, style_masked: bool) -> Conditions {
    Conditions {
        seed_masked,
        style_masked,
        ..c.clone()
    }
}

/// Batched condition tensors.
#[derive(Debug, Clone)]
pub struct ConditionBatch {
    /// `[B, seed_frames * dim]`, frame-major.
    pub seed: Tensor,
    pub style: Tensor,
    pub audio: Tensor,
    /// `[B, 1]`: 1 keeps the embedding, 0 replaces it with zeros.
    pub seed_keep: Tensor,
    pub style_keep: Tensor,
}

impl ConditionBatch {
    pub fn from_conditions(
        conds: &[Conditions],
        config: &DenoiserConfig,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let b = conds.len();
        if b == 0 {
            return Err(Error::validation("empty condition batch"));
        }
        let mut seed = Vec::with_capacity(b * config.seed_frames * config.gesture_dim);
        let mut style = Vec::with_capacity(b * config.style_count);
        let mut audio = Vec::with_capacity(b * config.clip_frames * config.audio_dim);
        let mut seed_keep = Vec::with_capacity(b);
        let mut style_keep = Vec::with_capacity(b);
        let frames = conds[0].audio.nrows();
        for c in conds {
            if c.seed.dim() != (config.seed_frames, config.gesture_dim) {
                return Err(Error::structural(format!(
                    "seed gesture is {:?}, expected ({}, {})",
                    c.seed.dim(),
                    config.seed_frames,
                    config.gesture_dim
                )));
            }
            if c.style.len() != config.style_count {
                return Err(Error::structural(format!(
                    "style vector has {} entries, model has {} styles",
                    c.style.len(),
                    config.style_count
                )));
            }
            if c.audio.ncols() != config.audio_dim || c.audio.nrows() != frames {
                return Err(Error::structural(format!(
                    "audio features are {:?}, expected (frames, {})",
                    c.audio.dim(),
                    config.audio_dim
                )));
            }
            seed.extend(c.seed.iter());
            style.extend(c.style.iter());
            audio.extend(c.audio.iter());
            seed_keep.push(if c.seed_masked { 0.0 } else { 1.0 });
            style_keep.push(if c.style_masked { 0.0 } else { 1.0 });
        }
        let t = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            seed: t(seed, &[b, config.seed_frames * config.gesture_dim])?,
            style: t(style, &[b, config.style_count])?,
            audio: t(audio, &[b, frames, config.audio_dim])?,
            seed_keep: t(seed_keep, &[b, 1])?,
            style_keep: t(style_keep, &[b, 1])?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.seed.dims()[0]
    }

    pub fn frames(&self) -> usize {
        self.audio.dims()[1]
    }
}

/// Pre-norm transformer block with masked multi-head attention and a
/// learned per-head relative-position bias.
#[derive(Debug, Clone)]
struct AttentionBlock {
    norm1: LayerNorm,
    qkv: Linear,
    out: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    rpe: Tensor,
    heads: usize,
    head_channels: usize,
    radius: usize,
}

impl AttentionBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        config: &DenoiserConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = config.model_channels;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), c, 3 * c, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), c, c, true, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), c, config.ff_mult * c, true, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), config.ff_mult * c, c, true, rng)?,
            rpe: store.constant(
                &format!("{name}.rpe"),
                (config.heads, 2 * config.rpe_radius + 1),
                0.0,
            )?,
            heads: config.heads,
            head_channels: config.head_channels,
            radius: config.rpe_radius,
        })
    }

    /// Mask plus relative-position bias, `[H, L, L]`.
    fn logit_bias(&self, mask: &AttentionMask) -> Result<Tensor> {
        let l = mask.size();
        let idx = Tensor::from_vec(rpe_indices(l, self.radius), l * l, self.rpe.device())?;
        let bias = self.rpe.index_select(&idx, 1)?.reshape((self.heads, l, l))?;
        let m = mask.to_tensor(self.rpe.device())?.to_dtype(self.rpe.dtype())?;
        Ok(bias.broadcast_add(&m)?)
    }

    fn forward(&self, x: &Tensor, mask: &AttentionMask, dropout: &mut Dropout) -> Result<Tensor> {
        let (b, l, c) = x.dims3()?;
        let h = self.norm1.forward(x)?;
        let qkv = self
            .qkv
            .forward(&h)?
            .reshape((b, l, 3, self.heads, self.head_channels))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let bias = self.logit_bias(mask)?;
        let (attn, _) = scaled_attention(&q, &k, &v, Some(&bias), dropout)?;
        let attn = attn.transpose(1, 2)?.reshape((b, l, c))?;
        let x = (x + self.out.forward(&attn)?)?;
        let f = self.ff1.forward(&self.norm2.forward(&x)?)?.gelu()?;
        let f = self.ff2.forward(&dropout.apply(&f)?)?;
        Ok((x + f)?)
    }
}

pub struct Denoiser {
    config: DenoiserConfig,
    store: ParamStore,
    time1: Linear,
    time2: Linear,
    seed_proj: Linear,
    style_proj: Linear,
    audio_proj: Linear,
    gesture_proj: Linear,
    cross_in: Linear,
    cross: AttentionBlock,
    self_in: Linear,
    blocks: Vec<AttentionBlock>,
    out_norm: LayerNorm,
    out_proj: Linear,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let c = &config;
        let s = &mut store;
        let r = &mut rng;
        let time1 = Linear::new(s, "time.fc1", c.timestep_dim, c.timestep_dim, true, r)?;
        let time2 = Linear::new(s, "time.fc2", c.timestep_dim, c.timestep_dim, true, r)?;
        let seed_proj = Linear::new(s, "seed", c.seed_frames * c.gesture_dim, c.seed_emb_dim, true, r)?;
        let style_proj = Linear::new(s, "style", c.style_count, c.style_emb_dim, true, r)?;
        let audio_proj = Linear::new(s, "audio", c.audio_dim, c.audio_emb_dim, true, r)?;
        let gesture_proj = Linear::new(s, "gesture", c.gesture_dim, c.gesture_emb_dim, true, r)?;
        let stage_in = c.timestep_dim + c.audio_emb_dim + c.gesture_emb_dim;
        let cross_in = Linear::new(s, "cross.in", stage_in, c.model_channels, true, r)?;
        let cross = AttentionBlock::new(s, "cross.block", c, r)?;
        let self_in = Linear::new(s, "self.in", c.model_channels + c.timestep_dim, c.model_channels, true, r)?;
        let blocks = (0..c.self_attn_layers)
            .map(|i| AttentionBlock::new(s, &format!("self.block{i}"), c, r))
            .collect::<Result<Vec<_>>>()?;
        let out_norm = LayerNorm::new(s, "out.norm", c.model_channels)?;
        let out_proj = Linear::new(s, "out.proj", c.model_channels, c.gesture_dim, true, r)?;
        Ok(Self {
            config,
            store,
            time1,
            time2,
            seed_proj,
            style_proj,
            audio_proj,
            gesture_proj,
            cross_in,
            cross,
            self_in,
            blocks,
            out_norm,
            out_proj,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Transformer sinusoid of each step, `[B, timestep_dim]`.
    pub fn sinusoid(&self, ts: &[usize]) -> Result<Tensor> {
        let d = self.config.timestep_dim;
        let mut v = Vec::with_capacity(ts.len() * d);
        for &t in ts {
            for i in 0..d / 2 {
                let freq = 10000f64.powf(-((2 * i) as f64) / d as f64);
                let a = t as f64 * freq;
                v.push(a.sin());
                v.push(a.cos());
            }
        }
        Ok(Tensor::from_vec(v, (ts.len(), d), self.device())?.to_dtype(self.dtype())?)
    }

    /// Sinusoid followed by the two-layer MLP.
    pub fn embed_timestep(&self, ts: &[usize]) -> Result<Tensor> {
        for &t in ts {
            if t == 0 || t > self.config.diffusion_steps {
                return Err(Error::validation(format!(
                    "noising step {t} outside 1..={}",
                    self.config.diffusion_steps
                )));
            }
        }
        let h = self.time1.forward(&self.sinusoid(ts)?)?.silu()?;
        self.time2.forward(&h)
    }

    /// `Z = [D | S] + T`.
    pub fn build_z(&self, seed_emb: &Tensor, style_emb: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        build_z(seed_emb, style_emb, t_emb)
    }

    /// Embedding of every one-hot style, `style_count x style_emb_dim`.
    pub fn style_embeddings(&self) -> Result<Array2<f64>> {
        let eye = Tensor::eye(self.config.style_count, self.dtype(), self.device())?;
        tensor_to_array(&self.style_proj.forward(&eye)?)
    }

    /// Seed, style and step embeddings combined into `Z`, `[B, timestep_dim]`.
    pub fn condition_vector(&self, ts: &[usize], cond: &ConditionBatch) -> Result<Tensor> {
        let b = cond.batch_size();
        let ts: Vec<usize> = match ts {
            [t] => vec![*t; b],
            _ if ts.len() == b => ts.to_vec(),
            _ => {
                return Err(Error::structural(format!(
                    "{} noising steps for a batch of {b}",
                    ts.len()
                )))
            }
        };
        let d = self
            .seed_proj
            .forward(&cond.seed)?
            .broadcast_mul(&cond.seed_keep)?;
        let s = self
            .style_proj
            .forward(&cond.style)?
            .broadcast_mul(&cond.style_keep)?;
        build_z(&d, &s, &self.embed_timestep(&ts)?)
    }

    fn check_inputs(&self, x_t: &Tensor, cond: &ConditionBatch) -> Result<(usize, usize)> {
        let (b, n, dim) = x_t.dims3()?;
        if dim != self.config.gesture_dim {
            return Err(Error::structural(format!(
                "noisy gesture has {dim} features, model expects {}",
                self.config.gesture_dim
            )));
        }
        if cond.batch_size() != b {
            return Err(Error::structural("condition batch size differs from input"));
        }
        if cond.frames() != n {
            return Err(Error::validation(format!(
                "audio has {} frames, gesture has {n}",
                cond.frames()
            )));
        }
        Ok((b, n))
    }

    fn local_stage(
        &self,
        x_t: &Tensor,
        z: &Tensor,
        cond: &ConditionBatch,
        dropout: &mut Dropout,
    ) -> Result<Tensor> {
        let (b, n, _) = x_t.dims3()?;
        let zs = z.unsqueeze(1)?.broadcast_as((b, n, z.dim(1)?))?.contiguous()?;
        let a = project_features(&cond.audio, &self.audio_proj)?;
        let g = self.gesture_proj.forward(x_t)?;
        let h = self.cross_in.forward(&Tensor::cat(&[&zs, &a, &g], 2)?)?;
        let mask = AttentionMask::build(self.config.local_pattern, n, self.config.window)?;
        self.cross.forward(&h, &mask, dropout)
    }

    /// Output of the local attention stage alone, `[B, N, model_channels]`.
    pub fn cross_local_stage(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        cond: &ConditionBatch,
    ) -> Result<Tensor> {
        self.check_inputs(x_t, cond)?;
        let z = self.condition_vector(ts, cond)?;
        self.local_stage(x_t, &z, cond, &mut Dropout::disabled())
    }

    /// `x0_hat = Denoise(x_t, t, c)` for `x_t: [B, N, dim]`.
    pub fn forward(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        cond: &ConditionBatch,
        dropout: &mut Dropout,
    ) -> Result<Tensor> {
        let (b, n) = self.check_inputs(x_t, cond)?;
        let z = self.condition_vector(ts, cond)?;
        let local = self.local_stage(x_t, &z, cond, dropout)?;
        let zs = z.unsqueeze(1)?.broadcast_as((b, n, z.dim(1)?))?.contiguous()?;
        let mut h = self.self_in.forward(&Tensor::cat(&[&local, &zs], 2)?)?;
        let full = AttentionMask::build(MaskKind::Full, n, 1)?;
        for block in &self.blocks {
            h = block.forward(&h, &full, dropout)?;
        }
        self.out_proj.forward(&self.out_norm.forward(&h)?)
    }

    /// Convenience wrapper for a single unbatched clip in evaluation mode.
    pub fn denoise(&self, x_t: &Array2<f64>, t: usize, cond: &Conditions) -> Result<Array2<f64>> {
        let batch = ConditionBatch::from_conditions(
            std::slice::from_ref(cond),
            &self.config,
            self.dtype(),
            self.device(),
        )?;
        let x = array_to_tensor(x_t, self.dtype(), self.device())?.unsqueeze(0)?;
        let out = self.forward(&x, &[t], &batch, &mut Dropout::disabled())?;
        tensor_to_array(&out.squeeze(0)?)
    }
}

impl X0Model for Denoiser {
    type Cond = ConditionBatch;

    fn predict_x0(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        cond: &ConditionBatch,
        dropout: &mut Dropout,
    ) -> Result<Tensor> {
        self.forward(x_t, ts, cond, dropout)
    }
}

/// `Z = concat(seed_emb, style_emb) + t_emb` along the last axis.
pub fn build_z(seed_emb: &Tensor, style_emb: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
    let ds = seed_emb.dims().last().copied().unwrap_or(0);
    let ss = style_emb.dims().last().copied().unwrap_or(0);
    let ts = t_emb.dims().last().copied().unwrap_or(0);
    if ds + ss != ts {
        return Err(Error::structural(format!(
            "seed ({ds}) + style ({ss}) embeddings do not match step embedding ({ts})"
        )));
    }
    let last = seed_emb.rank() - 1;
    Ok((Tensor::cat(&[seed_emb, style_emb], last)? + t_emb)?)
}

pub fn array_to_tensor(a: &Array2<f64>, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(v, a.dim(), device)?.to_dtype(dtype)?)
}

pub fn tensor_to_array(t: &Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Array2::from_shape_vec((r, c), v).map_err(|e| Error::structural(e.to_string()))
}
