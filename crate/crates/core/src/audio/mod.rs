//! Audio conditioning features aligned to the 20 fps gesture timeline.
//!
//! Pipeline: resample to 16 kHz, extract raw frame features (MFCC by
//! default, or a pretrained speech model through [`SpeechFeatureExtractor`]),
//! then linearly interpolate onto the gesture frames. The projection to 64
//! dimensions is a trainable layer and lives in the denoiser.

pub mod mfcc;

use std::path::Path;

use candle_core::Tensor;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
pub use mfcc::{Mfcc, MfccConfig};

pub const SAMPLE_RATE: u32 = 16_000;
pub const MFCC_DIM: usize = 13;
pub const PRETRAINED_DIM: usize = 1024;

/// Which raw representation produced a feature matrix. Recorded in caches
/// and checkpoints; training and sampling must agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Mfcc13,
    PretrainedSpeechModel,
}

impl SourceKind {
    pub fn raw_dim(self) -> usize {
        match self {
            SourceKind::Mfcc13 => MFCC_DIM,
            SourceKind::PretrainedSpeechModel => PRETRAINED_DIM,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            SourceKind::Mfcc13 => 1,
            SourceKind::PretrainedSpeechModel => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(SourceKind::Mfcc13),
            2 => Some(SourceKind::PretrainedSpeechModel),
            _ => None,
        }
    }
}

/// Raw audio features on the gesture timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    pub frames: Array2<f64>,
    pub source_kind: SourceKind,
}

/// A frame-level speech representation computed from 16 kHz mono audio.
pub trait SpeechFeatureExtractor {
    fn kind(&self) -> SourceKind;
    fn extract(&self, wave_16k: &[f32]) -> Result<Array2<f64>>;
}

pub struct MfccExtractor {
    mfcc: Mfcc,
}

impl MfccExtractor {
    pub fn new() -> Self {
        Self {
            mfcc: Mfcc::new(MfccConfig::default()).expect("default MFCC config is valid"),
        }
    }
}

impl Default for MfccExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl SpeechFeatureExtractor for MfccExtractor {
    fn kind(&self) -> SourceKind {
        SourceKind::Mfcc13
    }

    fn extract(&self, wave_16k: &[f32]) -> Result<Array2<f64>> {
        self.mfcc.compute(wave_16k)
    }
}

/// Mono waveform and its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub rate: u32,
}

impl Waveform {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.rate as f64
    }
}

/// Reads 16-bit PCM or 32-bit float WAV, averaging channels to mono.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::format(format!(
                "unsupported WAV encoding {fmt:?} {bits}-bit"
            )))
        }
    };
    let ch = spec.channels.max(1) as usize;
    let samples = interleaved
        .chunks(ch)
        .map(|c| c.iter().sum::<f32>() / ch as f32)
        .collect();
    Ok(Waveform {
        samples,
        rate: spec.sample_rate,
    })
}

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for s in &wave.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Band-limited (Hann-windowed sinc) resampling to 16 kHz. Output length is
/// `round(len * 16000 / rate)`, so duration is kept to within one sample.
pub fn resample_audio(wave: &[f32], source_rate: u32) -> Result<Vec<f32>> {
    if wave.is_empty() {
        return Err(Error::validation("empty waveform"));
    }
    if source_rate == 0 {
        return Err(Error::validation("sample rate must be positive"));
    }
    if wave.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite audio samples"));
    }
    if source_rate == SAMPLE_RATE {
        return Ok(wave.to_vec());
    }
    let ratio = SAMPLE_RATE as f64 / source_rate as f64;
    let out_len = (wave.len() as f64 * ratio).round() as usize;
    let cutoff = ratio.min(1.0);
    let half = 16.0 / cutoff;
    let n = wave.len() as isize;
    Ok((0..out_len)
        .map(|k| {
            let t = k as f64 / ratio;
            let lo = (t - half).ceil().max(0.0) as isize;
            let hi = ((t + half).floor() as isize).min(n - 1);
            let mut acc = 0.0;
            for i in lo..=hi {
                let d = t - i as f64;
                let window = 0.5 * (1.0 + (std::f64::consts::PI * d / half).cos());
                acc += wave[i as usize] as f64 * cutoff * sinc(cutoff * d) * window;
            }
            acc as f32
        })
        .collect())
}

/// Runs `preferred` when given, falling back to MFCC (with a warning) when it
/// is absent or fails. The returned kind says which path produced the data.
pub fn extract_raw_features(
    wave_16k: &[f32],
    preferred: Option<&dyn SpeechFeatureExtractor>,
) -> Result<(Array2<f64>, SourceKind)> {
    if wave_16k.is_empty() {
        return Err(Error::validation("empty waveform"));
    }
    if let Some(ex) = preferred {
        match ex.extract(wave_16k) {
            Ok(m) => return Ok((m, ex.kind())),
            Err(e) => log::warn!(
                "speech feature extractor {:?} unavailable ({e}); falling back to MFCC",
                ex.kind()
            ),
        }
    }
    let mfcc = MfccExtractor::new();
    Ok((mfcc.extract(wave_16k)?, SourceKind::Mfcc13))
}

/// Resamples raw feature rows onto `target_frames` rows by linear
/// interpolation, first row to first row and last row to last row.
pub fn align_to_gesture(raw: ArrayView2<f64>, target_frames: usize) -> Result<Array2<f64>> {
    let l = raw.nrows();
    if l < 2 {
        return Err(Error::validation(format!(
            "need at least 2 raw feature rows to interpolate, got {l}"
        )));
    }
    if target_frames == 0 {
        return Err(Error::validation("target frame count must be positive"));
    }
    if l == target_frames {
        return Ok(raw.to_owned());
    }
    let mut out = Array2::zeros((target_frames, raw.ncols()));
    for i in 0..target_frames {
        let pos = if target_frames == 1 {
            0.0
        } else {
            i as f64 * (l - 1) as f64 / (target_frames - 1) as f64
        };
        let lo = (pos.floor() as usize).min(l - 2);
        let w = pos - lo as f64;
        let (a, b) = (raw.row(lo), raw.row(lo + 1));
        for c in 0..raw.ncols() {
            out[(i, c)] = if w == 0.0 { a[c] } else if w == 1.0 { b[c] } else { a[c] + (b[c] - a[c]) * w };
        }
    }
    Ok(out)
}

/// Full path from a waveform at any rate to raw features on `target_frames`
/// gesture frames.
pub fn prepare_audio_features(
    wave: &Waveform,
    target_frames: usize,
    preferred: Option<&dyn SpeechFeatureExtractor>,
) -> Result<AudioFeatureSequence> {
    let w16 = resample_audio(&wave.samples, wave.rate)?;
    let (raw, kind) = extract_raw_features(&w16, preferred)?;
    let raw = if raw.nrows() < 2 {
        // a clip shorter than two hops: repeat the single row
        ndarray::concatenate(ndarray::Axis(0), &[raw.view(), raw.view()])
            .map_err(|e| Error::structural(e.to_string()))?
    } else {
        raw
    };
    Ok(AudioFeatureSequence {
        frames: align_to_gesture(raw.view(), target_frames)?,
        source_kind: kind,
    })
}

/// Projects aligned raw features (`[.., frames, D_raw]`) to the audio
/// embedding with the model's trainable linear layer.
pub fn project_features(aligned: &Tensor, projection: &Linear) -> Result<Tensor> {
    let d = aligned.dims().last().copied().unwrap_or(0);
    if d != projection.in_dim() {
        return Err(Error::structural(format!(
            "audio features have {d} dims, projection expects {}",
            projection.in_dim()
        )));
    }
    projection.forward(aligned)
}
