//! Training loop: condition dropout, AdamW updates, deterministic
//! validation loss and divergence handling.

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{PreparedData, TrainingClip};
use crate::denoiser::{ConditionBatch, Conditions, Denoiser};
use crate::diffusion::{huber_loss, q_sample, sample_timesteps, training_loss, NoiseSchedule, X0Model};
use crate::error::{Error, Result};
use crate::nn::Dropout;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Training examples to consume before stopping.
    pub sample_budget: usize,
    pub diffusion_steps: usize,
    pub cosine_offset: f64,
    /// Probability of masking the seed (and, independently, the style) per example.
    pub mask_prob: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 384,
            sample_budget: 300_000,
            diffusion_steps: 1000,
            cosine_offset: 0.008,
            mask_prob: 0.1,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    /// CPU-sized run: batch 32, 20k examples, higher learning rate.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            sample_budget: 20_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.eps, self.cosine_offset];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config("learning rate, eps and cosine offset must be positive"));
        }
        if self.batch_size == 0 || self.sample_budget == 0 || self.diffusion_steps == 0 {
            return Err(Error::config("batch size, sample budget and step count must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config("mask probability must lie in [0, 1]"));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config("optimizer betas must lie in [0, 1)"));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.diffusion_steps, self.cosine_offset)
    }
}

/// Independent Bernoulli(`p`) draws for `(seed_masked, style_masked)`.
pub fn draw_condition_masks(rng: &mut impl Rng, count: usize, p: f64) -> Vec<(bool, bool)> {
    (0..count).map(|_| (rng.random_bool(p), rng.random_bool(p))).collect()
}

fn clip_conditions(clip: &TrainingClip, style_count: usize) -> Result<Conditions> {
    let mut style = vec![0.0; style_count];
    *style
        .get_mut(clip.style)
        .ok_or_else(|| Error::validation(format!("style {} out of {style_count}", clip.style)))? = 1.0;
    Conditions::new(clip.seed.clone(), style, clip.audio.clone())
}

/// Stacks clip targets into `[B, N, dim]`.
pub fn target_tensor(clips: &[&TrainingClip], dtype: DType, device: &Device) -> Result<Tensor> {
    let (n, dim) = clips[0].target.dim();
    let v: Vec<f64> = clips.iter().flat_map(|c| c.target.iter().copied()).collect();
    Ok(Tensor::from_vec(v, (clips.len(), n, dim), device)?.to_dtype(dtype)?)
}

fn gaussian(rng: &mut ChaCha8Rng, dims: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, dims, device)?.to_dtype(dtype)?)
}

/// Mean Huber loss on `clips` with unmasked conditions, no dropout and
/// noise/steps drawn from a generator seeded with `seed`; identical calls
/// give identical results.
pub fn evaluation_loss(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    clips: &[TrainingClip],
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::validation("no clips to evaluate"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for chunk in clips.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainingClip> = chunk.iter().collect();
        let x0 = target_tensor(&refs, model.dtype(), model.device())?;
        let conds = chunk
            .iter()
            .map(|c| clip_conditions(c, model.config().style_count))
            .collect::<Result<Vec<_>>>()?;
        let cond = ConditionBatch::from_conditions(&conds, model.config(), model.dtype(), model.device())?;
        let ts = sample_timesteps(&mut rng, chunk.len(), schedule.steps());
        let noise = gaussian(&mut rng, x0.dims(), model.dtype(), model.device())?;
        let x_t = q_sample(&x0, &ts, &noise, schedule)?;
        let x0_hat = model.predict_x0(&x_t, &ts, &cond, &mut Dropout::disabled())?;
        let loss = huber_loss(&x0, &x0_hat)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / clips.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub samples_seen: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    pub samples_seen: usize,
    /// Set when training stopped on a non-finite loss; weights are those
    /// from the last successful step.
    pub diverged: Option<String>,
}

pub struct Trainer {
    model: Denoiser,
    schedule: NoiseSchedule,
    optimizer: AdamW,
    config: TrainConfig,
    rng: ChaCha8Rng,
    steps: usize,
    samples_seen: usize,
}

impl Trainer {
    pub fn new(model: Denoiser, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config().diffusion_steps != config.diffusion_steps {
            return Err(Error::config(format!(
                "model uses {} noising steps, training config {}",
                model.config().diffusion_steps,
                config.diffusion_steps
            )));
        }
        let schedule = config.schedule()?;
        let optimizer = AdamW::new(
            model.params().vars(),
            ParamsAdamW {
                lr: config.lr,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.eps,
                weight_decay: config.weight_decay,
            },
        )?;
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        Ok(Self {
            model,
            schedule,
            optimizer,
            config,
            rng,
            steps: 0,
            samples_seen: 0,
        })
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn into_model(self) -> Denoiser {
        self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    /// One optimizer update on `batch`; returns the loss before the update.
    /// A non-finite loss leaves the weights untouched and returns a numeric error.
    pub fn step(&mut self, batch: &[&TrainingClip]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::validation("empty training batch"));
        }
        let (dtype, device) = (self.model.dtype(), self.model.device().clone());
        let style_count = self.model.config().style_count;
        let masks = draw_condition_masks(&mut self.rng, batch.len(), self.config.mask_prob);
        let conds = batch
            .iter()
            .zip(&masks)
            .map(|(c, &(seed_masked, style_masked))| {
                let mut cond = clip_conditions(c, style_count)?;
                cond.seed_masked = seed_masked;
                cond.style_masked = style_masked;
                Ok(cond)
            })
            .collect::<Result<Vec<_>>>()?;
        let cond = ConditionBatch::from_conditions(&conds, self.model.config(), dtype, &device)?;
        let x0 = target_tensor(batch, dtype, &device)?;
        let ts = sample_timesteps(&mut self.rng, batch.len(), self.schedule.steps());
        let noise = gaussian(&mut self.rng, x0.dims(), dtype, &device)?;
        let p = self.model.config().dropout;
        let loss = {
            let mut dropout = Dropout::new(p, &mut self.rng);
            training_loss(&self.model, &x0, &cond, &ts, &noise, &self.schedule, &mut dropout)?
        };
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        self.optimizer.backward_step(&loss)?;
        self.steps += 1;
        self.samples_seen += batch.len();
        Ok(value)
    }

    /// Epochs over shuffled training clips until the sample budget is spent.
    /// `on_epoch` sees each epoch's log and the trainer (for checkpointing).
    pub fn run(
        &mut self,
        data: &PreparedData,
        mut on_epoch: impl FnMut(&EpochLog, &Trainer) -> Result<()>,
    ) -> Result<TrainReport> {
        if data.train.is_empty() {
            return Err(Error::validation("no training clips"));
        }
        let mut report = TrainReport {
            epochs: Vec::new(),
            steps: 0,
            samples_seen: 0,
            diverged: None,
        };
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut epoch = 0;
        'outer: while self.samples_seen < self.config.sample_budget {
            epoch += 1;
            order.shuffle(&mut self.rng);
            let (mut sum, mut count) = (0.0, 0usize);
            for chunk in order.chunks(self.config.batch_size) {
                let remaining = self.config.sample_budget - self.samples_seen;
                let take = chunk.len().min(remaining);
                let batch: Vec<&TrainingClip> = chunk[..take].iter().map(|&i| &data.train[i]).collect();
                match self.step(&batch) {
                    Ok(l) => {
                        sum += l * take as f64;
                        count += take;
                    }
                    Err(Error::Numeric(msg)) => {
                        log::error!("training diverged at step {}: {msg}", self.steps + 1);
                        report.diverged = Some(msg);
                        break 'outer;
                    }
                    Err(e) => return Err(e),
                }
                if self.samples_seen >= self.config.sample_budget {
                    break;
                }
            }
            let val_loss = if data.val.is_empty() {
                None
            } else {
                Some(evaluation_loss(
                    &self.model,
                    &self.schedule,
                    &data.val,
                    self.config.batch_size,
                    self.config.rng_seed ^ 0x5eed,
                )?)
            };
            let log = EpochLog {
                epoch,
                steps: self.steps,
                samples_seen: self.samples_seen,
                train_loss: sum / count.max(1) as f64,
                val_loss,
            };
            log::info!(
                "epoch {epoch}: {} samples, train loss {:.5}, val loss {}",
                self.samples_seen,
                log.train_loss,
                val_loss.map_or("-".to_string(), |v| format!("{v:.5}"))
            );
            on_epoch(&log, self)?;
            report.epochs.push(log);
        }
        report.steps = self.steps;
        report.samples_seen = self.samples_seen;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_dataset, prepare_training_data, split_dataset, ClipOptions, ToyConfig};
    use crate::denoiser::DenoiserConfig;

    fn tiny_model(steps: usize) -> Denoiser {
        let cfg = DenoiserConfig {
            heads: 2,
            head_channels: 8,
            model_channels: 16,
            self_attn_layers: 1,
            diffusion_steps: steps,
            ..DenoiserConfig::desk(121, 13, 6)
        };
        Denoiser::new(cfg, DType::F32, 3).unwrap()
    }

    fn toy_data() -> PreparedData {
        let toy = ToyConfig {
            sequences_per_style: 2,
            seconds: 6.0,
            ..ToyConfig::default()
        };
        let ds = generate_toy_dataset(&toy, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let split = split_dataset(ds.sequences.len(), [8, 1, 1], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        prepare_training_data(&ds, &split, &ClipOptions::default().without_augmentation()).unwrap()
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::desk()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            mask_prob: 1.5,
            ..TrainConfig::desk()
        };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::default().lr, 3e-5);
        assert_eq!(TrainConfig::default().batch_size, 384);
    }

    #[test]
    fn mismatched_steps_are_refused() {
        let model = tiny_model(50);
        assert!(matches!(Trainer::new(model, TrainConfig::desk()), Err(Error::Config(_))));
    }

    #[test]
    fn evaluation_loss_is_repeatable() {
        let data = toy_data();
        let model = tiny_model(100);
        let schedule = NoiseSchedule::cosine(100, 0.008).unwrap();
        let a = evaluation_loss(&model, &schedule, &data.train, 4, 9).unwrap();
        let b = evaluation_loss(&model, &schedule, &data.train, 4, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite() && a > 0.0);
    }

    #[test]
    fn budget_is_respected_and_training_is_reproducible() {
        let data = toy_data();
        let run = || {
            let cfg = TrainConfig {
                batch_size: 4,
                sample_budget: 10,
                diffusion_steps: 100,
                ..TrainConfig::desk()
            };
            let mut trainer = Trainer::new(tiny_model(100), cfg).unwrap();
            let mut seen = 0;
            let report = trainer
                .run(&data, |_, _| {
                    seen += 1;
                    Ok(())
                })
                .unwrap();
            assert_eq!(seen, report.epochs.len());
            (report, trainer.model().params().export().unwrap())
        };
        let (r1, w1) = run();
        let (r2, w2) = run();
        assert_eq!(r1.samples_seen, 10);
        assert_eq!(r1.steps, 3);
        assert_eq!(r1, r2);
        assert_eq!(w1, w2);
    }

    #[test]
    fn mask_draws_are_independent_bernoulli() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = draw_condition_masks(&mut rng, 10_000, 0.1);
        let seed_rate = draws.iter().filter(|d| d.0).count() as f64 / 1e4;
        let style_rate = draws.iter().filter(|d| d.1).count() as f64 / 1e4;
        assert!((seed_rate - 0.1).abs() < 0.01);
        assert!((style_rate - 0.1).abs() < 0.01);
    }
}
