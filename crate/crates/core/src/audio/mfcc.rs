//! Mel-frequency cepstral coefficients at a 20 fps hop.

use std::sync::Arc;

use ndarray::Array2;
use rustfft::{num_complex::Complex, Fft, FftPlanner};

use super::SAMPLE_RATE;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfccConfig {
    pub window_seconds: f64,
    pub hop_seconds: f64,
    pub mel_bands: usize,
    pub coefficients: usize,
    pub fft_size: usize,
    /// Floor applied to mel energies before the log.
    pub energy_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            window_seconds: 0.025,
            hop_seconds: 0.05,
            mel_bands: 40,
            coefficients: 13,
            fft_size: 512,
            energy_floor: 1e-10,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-style filters over `fft_size / 2 + 1` bins, 0 Hz to Nyquist.
fn mel_filterbank(bands: usize, fft_size: usize, rate: f64) -> Vec<Vec<f64>> {
    let bins = fft_size / 2 + 1;
    let top = hz_to_mel(rate / 2.0);
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64))
        .collect();
    let bin_hz = |b: usize| b as f64 * rate / fft_size as f64;
    (0..bands)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|b| {
                    let f = bin_hz(b);
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

pub struct Mfcc {
    config: MfccConfig,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl Mfcc {
    pub fn new(config: MfccConfig) -> Result<Self> {
        let win = (config.window_seconds * SAMPLE_RATE as f64).round() as usize;
        if win == 0 || win > config.fft_size || config.coefficients > config.mel_bands {
            return Err(Error::config(format!("inconsistent MFCC configuration {config:?}")));
        }
        let window = (0..win)
            .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / win as f64).cos())
            .collect();
        let filters = mel_filterbank(config.mel_bands, config.fft_size, SAMPLE_RATE as f64);
        let m = config.mel_bands as f64;
        let dct = (0..config.coefficients)
            .map(|k| {
                let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
                (0..config.mel_bands)
                    .map(|i| {
                        scale * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / m).cos()
                    })
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(config.fft_size);
        Ok(Self {
            config,
            window,
            filters,
            dct,
            fft,
        })
    }

    pub fn hop(&self) -> usize {
        (self.config.hop_seconds * SAMPLE_RATE as f64).round() as usize
    }

    /// Frame count for a waveform: one frame per started hop.
    pub fn frame_count(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop())
    }

    /// Log mel energies, one row per frame centred at `(k + 1/2) * hop`.
    pub fn log_mel(&self, wave: &[f32]) -> Array2<f64> {
        let hop = self.hop();
        let win = self.window.len();
        let frames = self.frame_count(wave.len());
        let mut out = Array2::zeros((frames, self.config.mel_bands));
        let mut buf = vec![Complex::new(0.0, 0.0); self.config.fft_size];
        for k in 0..frames {
            let start = (k * hop + hop / 2) as isize - (win / 2) as isize;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (n, w) in self.window.iter().enumerate() {
                let idx = start + n as isize;
                if idx >= 0 && (idx as usize) < wave.len() {
                    buf[n] = Complex::new(wave[idx as usize] as f64 * w, 0.0);
                }
            }
            self.fft.process(&mut buf);
            let power: Vec<f64> = buf[..self.config.fft_size / 2 + 1]
                .iter()
                .map(|c| c.norm_sqr())
                .collect();
            for (m, filt) in self.filters.iter().enumerate() {
                let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
                out[(k, m)] = e.max(self.config.energy_floor).ln();
            }
        }
        out
    }

    pub fn compute(&self, wave: &[f32]) -> Result<Array2<f64>> {
        if wave.is_empty() {
            return Err(Error::validation("empty waveform"));
        }
        if wave.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite audio samples"));
        }
        let mel = self.log_mel(wave);
        let mut out = Array2::zeros((mel.nrows(), self.config.coefficients));
        for (k, row) in mel.rows().into_iter().enumerate() {
            for (c, basis) in self.dct.iter().enumerate() {
                out[(k, c)] = basis.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }
}
