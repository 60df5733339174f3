//! Guided sampling and clip-stitched long-form generation.

use candle_core::Tensor;
use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::denoiser::{apply_condition_masks, one_hot, tensor_to_array, ConditionBatch, Conditions, Denoiser};
use crate::diffusion::{p_reverse_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::motion::{denormalize, normalize, FeatureStats};
use crate::nn::Dropout;

/// `x0 = gamma * D(c1) + (1 - gamma) * D(c2)`.
#[derive(Debug, Clone)]
pub struct GuidanceSpec {
    pub gamma: f64,
    pub c1: Conditions,
    pub c2: Conditions,
}

impl GuidanceSpec {
    pub fn new(gamma: f64, c1: Conditions, c2: Conditions) -> Result<Self> {
        if !gamma.is_finite() {
            return Err(Error::validation("guidance weight must be finite"));
        }
        if c1.audio != c2.audio {
            return Err(Error::validation("both condition bundles must share the same audio"));
        }
        Ok(Self { gamma, c1, c2 })
    }

    /// Plain conditional sampling: `c2` is the fully masked bundle, weight 1.
    pub fn conditional(c: Conditions) -> Self {
        Self {
            gamma: 1.0,
            c2: apply_condition_masks(&c, true, true),
            c1: c,
        }
    }

    pub fn frames(&self) -> usize {
        self.c1.audio.nrows()
    }
}

/// Second term of the guidance combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Counterpart {
    /// Seed and style masked, audio kept.
    Unconditional,
    /// Same seed and audio with another style.
    Style(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SeedPolicy {
    /// Pick one of the given raw-feature seeds (`8 x dim` each) at random.
    DatasetRandom(Vec<Array2<f64>>),
    /// Training-set mean frame repeated.
    Average,
    /// Raw-feature seed supplied by the caller.
    Explicit(Array2<f64>),
}

#[derive(Debug, Clone)]
pub struct LongFormRequest {
    /// Model-ready audio features at the gesture frame rate, `frames x audio_dim`.
    pub audio: Array2<f64>,
    pub style: usize,
    pub counterpart: Counterpart,
    pub gamma: f64,
    pub seed_policy: SeedPolicy,
    /// Frames of linear blend after each clip boundary; 0 disables.
    pub blend_frames: usize,
}

#[derive(Debug, Clone)]
pub struct LongFormOutput {
    /// Denormalized gesture features, one row per audio frame.
    pub frames: Array2<f64>,
    /// Normalized seed fed to each clip.
    pub seeds: Vec<Array2<f64>>,
    /// Normalized generated clips before trimming and blending.
    pub clips: Vec<Array2<f64>>,
}

pub struct Sampler<'a> {
    model: &'a Denoiser,
    schedule: &'a NoiseSchedule,
    stats: &'a FeatureStats,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a Denoiser, schedule: &'a NoiseSchedule, stats: &'a FeatureStats) -> Result<Self> {
        let steps = model.config().diffusion_steps;
        if schedule.steps() != steps {
            return Err(Error::config(format!(
                "schedule has {} steps but the model was built for {steps}",
                schedule.steps()
            )));
        }
        if stats.dim() != model.config().gesture_dim {
            return Err(Error::config(format!(
                "feature stats have {} dims, model has {}",
                stats.dim(),
                model.config().gesture_dim
            )));
        }
        Ok(Self { model, schedule, stats })
    }

    pub fn model(&self) -> &Denoiser {
        self.model
    }

    fn batch(&self, conds: Vec<&Conditions>) -> Result<ConditionBatch> {
        let owned: Vec<Conditions> = conds.into_iter().cloned().collect();
        ConditionBatch::from_conditions(&owned, self.model.config(), self.model.dtype(), self.model.device())
    }

    /// Guided prediction for a batch `x_t: [B, N, dim]`, one spec per row.
    /// Weights of exactly 1 or 0 use a single denoiser pass.
    pub fn guided_x0(&self, x_t: &Tensor, t: usize, specs: &[GuidanceSpec]) -> Result<Tensor> {
        if specs.iter().all(|s| s.gamma == 1.0) {
            let c = self.batch(specs.iter().map(|s| &s.c1).collect())?;
            return self.model.forward(x_t, &[t], &c, &mut Dropout::disabled());
        }
        if specs.iter().all(|s| s.gamma == 0.0) {
            let c = self.batch(specs.iter().map(|s| &s.c2).collect())?;
            return self.model.forward(x_t, &[t], &c, &mut Dropout::disabled());
        }
        let c1 = self.batch(specs.iter().map(|s| &s.c1).collect())?;
        let c2 = self.batch(specs.iter().map(|s| &s.c2).collect())?;
        let d1 = self.model.forward(x_t, &[t], &c1, &mut Dropout::disabled())?;
        let d2 = self.model.forward(x_t, &[t], &c2, &mut Dropout::disabled())?;
        let g: Vec<f64> = specs.iter().map(|s| s.gamma).collect();
        let g = Tensor::from_vec(g, (specs.len(), 1, 1), x_t.device())?.to_dtype(x_t.dtype())?;
        let one_minus = g.affine(-1.0, 1.0)?;
        Ok((d1.broadcast_mul(&g)? + d2.broadcast_mul(&one_minus)?)?)
    }

    fn gaussian(&self, rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Result<Tensor> {
        let n = shape.0 * shape.1 * shape.2;
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Tensor::from_vec(v, shape, self.model.device())?.to_dtype(self.model.dtype())?)
    }

    /// Full reverse chain for a batch of specs sharing one clip length.
    /// Returns normalized clips.
    pub fn sample_normalized(&self, specs: &[GuidanceSpec], rng: &mut ChaCha8Rng) -> Result<Vec<Array2<f64>>> {
        let Some(first) = specs.first() else {
            return Ok(Vec::new());
        };
        let n = first.frames();
        if specs.iter().any(|s| s.frames() != n) {
            return Err(Error::validation("all specs in a batch need the same clip length"));
        }
        let shape = (specs.len(), n, self.model.config().gesture_dim);
        let mut x = self.gaussian(rng, shape)?;
        for t in (1..=self.schedule.steps()).rev() {
            let x0_hat = self.guided_x0(&x, t, specs)?;
            let noise = if t > 1 { Some(self.gaussian(rng, shape)?) } else { None };
            // detached so the chain does not hold every step's graph alive
            x = p_reverse_step(&x, t, &x0_hat.detach(), noise.as_ref(), self.schedule)?.detach();
        }
        (0..specs.len())
            .map(|b| tensor_to_array(&x.get(b)?))
            .collect()
    }

    /// One clip, denormalized.
    pub fn sample_clip(&self, spec: &GuidanceSpec, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        let clip = self.sample_normalized(std::slice::from_ref(spec), rng)?.remove(0);
        denormalize(clip.view(), self.stats)
    }

    fn initial_seed(&self, policy: &SeedPolicy, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        let rows = self.model.config().seed_frames;
        let raw = match policy {
            SeedPolicy::Average => self.stats.mean_frames(rows),
            SeedPolicy::Explicit(seed) => seed.clone(),
            SeedPolicy::DatasetRandom(pool) => {
                if pool.is_empty() {
                    return Err(Error::validation("no dataset seeds to pick from"));
                }
                pool[rng.random_range(0..pool.len())].clone()
            }
        };
        if raw.nrows() != rows {
            return Err(Error::validation(format!("seed has {} frames, expected {rows}", raw.nrows())));
        }
        normalize(raw.view(), self.stats)
    }

    pub fn sample_long(&self, req: &LongFormRequest, rng: &mut ChaCha8Rng) -> Result<LongFormOutput> {
        let cfg = self.model.config();
        let total = req.audio.nrows();
        if total == 0 {
            return Err(Error::validation("empty audio"));
        }
        if req.audio.ncols() != cfg.audio_dim {
            return Err(Error::structural(format!(
                "audio features have {} columns, model expects {}",
                req.audio.ncols(),
                cfg.audio_dim
            )));
        }
        let style_a = one_hot(req.style, cfg.style_count)?;
        let style_b = match req.counterpart {
            Counterpart::Style(s) => Some(one_hot(s, cfg.style_count)?),
            Counterpart::Unconditional => None,
        };
        let n = cfg.clip_frames;
        let clips_needed = total.div_ceil(n);
        let audio = pad_edge(req.audio.view(), clips_needed * n);
        let mut seed = self.initial_seed(&req.seed_policy, rng)?;
        let mut seeds = Vec::with_capacity(clips_needed);
        let mut clips = Vec::with_capacity(clips_needed);
        for k in 0..clips_needed {
            let a = audio.slice(s![k * n..(k + 1) * n, ..]).to_owned();
            let c1 = Conditions::new(seed.clone(), style_a.clone(), a)?;
            let c2 = match &style_b {
                Some(sb) => Conditions {
                    style: sb.clone(),
                    ..c1.clone()
                },
                None => apply_condition_masks(&c1, true, true),
            };
            let spec = GuidanceSpec::new(req.gamma, c1, c2)?;
            let clip = self.sample_normalized(std::slice::from_ref(&spec), rng)?.remove(0);
            log::debug!("clip {}/{clips_needed} sampled", k + 1);
            seeds.push(seed);
            seed = clip.slice(s![n - cfg.seed_frames.., ..]).to_owned();
            clips.push(clip);
        }
        let views: Vec<ArrayView2<f64>> = clips.iter().map(|c| c.view()).collect();
        let mut joined = concatenate(Axis(0), &views).map_err(|e| Error::structural(e.to_string()))?;
        if req.blend_frames > 0 {
            blend_boundaries(&mut joined, n, req.blend_frames);
        }
        let trimmed = joined.slice(s![..total, ..]).to_owned();
        Ok(LongFormOutput {
            frames: denormalize(trimmed.view(), self.stats)?,
            seeds,
            clips,
        })
    }

    /// Long-form generation mixing two styles with weight `gamma`.
    pub fn style_edit(
        &self,
        audio: Array2<f64>,
        style_a: usize,
        style_b: usize,
        gamma: f64,
        seed_policy: SeedPolicy,
        rng: &mut ChaCha8Rng,
    ) -> Result<LongFormOutput> {
        let count = self.model.config().style_count;
        for s in [style_a, style_b] {
            if s >= count {
                return Err(Error::validation(format!("style {s} out of {count} styles")));
            }
        }
        self.sample_long(
            &LongFormRequest {
                audio,
                style: style_a,
                counterpart: Counterpart::Style(style_b),
                gamma,
                seed_policy,
                blend_frames: 0,
            },
            rng,
        )
    }
}

/// Extends `a` to `rows` rows by repeating its last row.
pub fn pad_edge(a: ArrayView2<f64>, rows: usize) -> Array2<f64> {
    let n = a.nrows();
    Array2::from_shape_fn((rows, a.ncols()), |(i, j)| a[(i.min(n - 1), j)])
}

/// Eases the first `width` frames after each boundary from the previous frame.
fn blend_boundaries(frames: &mut Array2<f64>, clip: usize, width: usize) {
    let mut b = clip;
    while b < frames.nrows() {
        let anchor = frames.row(b - 1).to_owned();
        for i in 0..width.min(frames.nrows() - b) {
            let w = (i + 1) as f64 / (width + 1) as f64;
            let mut row = frames.row_mut(b + i);
            row.zip_mut_with(&anchor, |v, a| *v = a + w * (*v - a));
        }
        b += clip;
    }
}
