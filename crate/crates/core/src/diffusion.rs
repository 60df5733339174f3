//! Cosine noise schedule, forward noising, x0-parameterised reverse step and
//! the Huber reconstruction loss.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Dropout;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const BETA_MIN: f64 = 1e-5;
pub const BETA_MAX: f64 = 0.999;
pub const HUBER_DELTA: f64 = 1.0;

/// Variance schedule tables, indexed by noising step `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    offset: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// The two numbers that fully determine a schedule; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub offset: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            offset: DEFAULT_COSINE_OFFSET,
        }
    }
}

impl NoiseSchedule {
    /// `alpha_bar(t) = f(t) / f(0)` with `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`;
    /// `beta_t = 1 - alpha_bar(t) / alpha_bar(t-1)` clipped to `[BETA_MIN, BETA_MAX]`.
    /// The stored `alpha_bar` is the running product of the clipped alphas.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::validation("schedule needs at least one step"));
        }
        if !(offset.is_finite() && offset > 0.0) {
            return Err(Error::validation(format!("cosine offset must be positive, got {offset}")));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + offset) / (1.0 + offset);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let betas: Vec<f64> = (1..=steps)
            .map(|t| {
                let ratio = (f(t) / f0) / (f(t - 1) / f0);
                (1.0 - ratio).clamp(BETA_MIN, BETA_MAX)
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            steps,
            offset,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn from_params(p: ScheduleParams) -> Result<Self> {
        Self::cosine(p.steps, p.offset)
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            steps: self.steps,
            offset: self.offset,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            Err(Error::validation(format!(
                "noising step {t} outside 1..={}",
                self.steps
            )))
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior variance `(1 - alpha_bar(t-1)) / (1 - alpha_bar(t)) * beta_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    /// Coefficients of `x0_hat` and `x_t` in the posterior mean.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        (
            ab_prev.sqrt() * self.beta(t) / (1.0 - ab_t),
            self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t),
        )
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::structural(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// One forward step: `sqrt(1 - beta_t) * x_prev + sqrt(beta_t) * noise`.
pub fn q_sample_step(
    x_prev: &Tensor,
    t: usize,
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check(t)?;
    same_shape(x_prev, noise, "q_sample_step")?;
    let b = schedule.beta(t);
    Ok(((x_prev * (1.0 - b).sqrt())? + (noise * b.sqrt())?)?)
}

/// Per-sample coefficient tensor shaped `[B, 1, .., 1]` to broadcast over `like`.
fn per_sample(values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat_n(1, like.rank().saturating_sub(1)));
    Ok(Tensor::from_vec(values, shape, like.device())?.to_dtype(like.dtype())?)
}

/// Closed-form marginal `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise`.
/// `ts` holds one step for the whole tensor or one per leading (batch) index.
pub fn q_sample(
    x0: &Tensor,
    ts: &[usize],
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape(x0, noise, "q_sample")?;
    for &t in ts {
        schedule.check(t)?;
    }
    match ts {
        [t] => {
            let ab = schedule.alpha_bar(*t);
            Ok(((x0 * ab.sqrt())? + (noise * (1.0 - ab).sqrt())?)?)
        }
        _ if x0.rank() > 0 && ts.len() == x0.dim(0)? => {
            let a = per_sample(ts.iter().map(|t| schedule.alpha_bar(*t).sqrt()).collect(), x0)?;
            let s = per_sample(
                ts.iter().map(|t| (1.0 - schedule.alpha_bar(*t)).sqrt()).collect(),
                x0,
            )?;
            Ok((x0.broadcast_mul(&a)? + noise.broadcast_mul(&s)?)?)
        }
        _ => Err(Error::structural(format!(
            "{} noising steps for a tensor of shape {:?}",
            ts.len(),
            x0.dims()
        ))),
    }
}

/// Ancestral step `x_{t-1} = mu(x_t, x0_hat) + sigma_t * noise` with the
/// posterior variance. At `t = 1` the posterior collapses onto `x0_hat`.
pub fn p_reverse_step(
    x_t: &Tensor,
    t: usize,
    x0_hat: &Tensor,
    noise: Option<&Tensor>,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check(t)?;
    same_shape(x_t, x0_hat, "p_reverse_step")?;
    if t == 1 {
        return Ok(x0_hat.clone());
    }
    let (c0, ct) = schedule.posterior_mean_coefs(t);
    let mean = ((x0_hat * c0)? + (x_t * ct)?)?;
    match noise {
        Some(n) => {
            same_shape(x_t, n, "p_reverse_step noise")?;
            Ok((mean + (n * schedule.posterior_variance(t).sqrt())?)?)
        }
        None => Ok(mean),
    }
}

/// Mean Huber loss with `delta = 1`: `0.5 e^2` below delta, `delta (|e| - delta/2)` above.
pub fn huber_loss(x0: &Tensor, x0_hat: &Tensor) -> Result<Tensor> {
    same_shape(x0, x0_hat, "huber_loss")?;
    let a = (x0 - x0_hat)?.abs()?;
    let q = a.clamp(0.0, HUBER_DELTA)?;
    let quad = (q.sqr()? * 0.5)?;
    let lin = ((a - &q)? * HUBER_DELTA)?;
    let loss = (quad + lin)?.mean_all()?;
    let v = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::validation("non-finite values in Huber loss inputs"));
    }
    Ok(loss)
}

/// A network that predicts the clean signal from a noisy one.
pub trait X0Model {
    type Cond;

    fn predict_x0(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        cond: &Self::Cond,
        dropout: &mut Dropout,
    ) -> Result<Tensor>;
}

/// Uniform noising steps in `1..=T`.
pub fn sample_timesteps(rng: &mut impl Rng, batch: usize, steps: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(1..=steps)).collect()
}

/// `Huber(x0, model(q_sample(x0, t, noise), t, c))`.
pub fn training_loss<M: X0Model>(
    model: &M,
    x0: &Tensor,
    cond: &M::Cond,
    ts: &[usize],
    noise: &Tensor,
    schedule: &NoiseSchedule,
    dropout: &mut Dropout,
) -> Result<Tensor> {
    let x_t = q_sample(x0, ts, noise, schedule)?;
    let x0_hat = model.predict_x0(&x_t, ts, cond, dropout)?;
    huber_loss(x0, &x0_hat).map_err(|e| match e {
        Error::Validation(_) => Error::numeric(format!("loss is not finite at steps {ts:?}")),
        other => other,
    })
}
