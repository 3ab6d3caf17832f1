//! Binaural log-mel featurization and in-batch segment sampling.

use ndarray::{s, Array3};
use rand::Rng;
use thiserror::Error;

use crate::audio_io::{Waveform, SAMPLE_RATE};
use crate::dsp::{hann_window, mel_filterbank, DspError, MelFilterbank, PowerSpectrum, N_MELS};
use crate::seed;

pub const WIN_LENGTH: usize = 800;
pub const HOP_LENGTH: usize = 320;
pub const N_FFT: usize = 2048;
pub const LOG_EPS: f64 = 1e-10;
/// Frame count of a full 10 s clip after padding.
pub const CLIP_FRAMES: usize = 1024;
pub const CLIP_SAMPLES: usize = 10 * SAMPLE_RATE as usize;
pub const SEGMENT_FRAMES: usize = 200;
pub const SEGMENTS_PER_CLIP: usize = 16;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("expected {expected}, got {found}")]
    Shape { expected: String, found: String },
    #[error("non-finite spectrogram value")]
    NonFinite,
    #[error("input too short: {len} samples/frames, need {needed}")]
    TooShort { len: usize, needed: usize },
    #[error(transparent)]
    Audio(#[from] crate::audio_io::AudioError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// `channels × frames × mels` log-mel array (2 × frames × 128).
#[derive(Debug, Clone, PartialEq)]
pub struct BinauralSpectrogram {
    values: Array3<f32>,
}

impl BinauralSpectrogram {
    pub fn from_array(values: Array3<f32>) -> Result<Self, FeatureError> {
        let (c, _, m) = values.dim();
        if c != 2 || m != N_MELS {
            return Err(FeatureError::Shape {
                expected: format!("2 x frames x {N_MELS}"),
                found: format!("{:?}", values.shape()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.dim().1
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    /// Contiguous frame crop `[offset, offset + len)`.
    pub fn crop(&self, offset: usize, len: usize) -> Result<Self, FeatureError> {
        if offset + len > self.frames() {
            return Err(FeatureError::TooShort { len: self.frames(), needed: offset + len });
        }
        Ok(Self { values: self.values.slice(s![.., offset..offset + len, ..]).to_owned() })
    }

    pub fn to_f64(&self) -> Array3<f64> {
        self.values.mapv(|v| v as f64)
    }
}

/// Reusable STFT + mel projection.
pub struct LogMel {
    window: Vec<f64>,
    filterbank: MelFilterbank,
    spectrum: PowerSpectrum,
}

impl Default for LogMel {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMel {
    pub fn new() -> Self {
        Self {
            window: hann_window(WIN_LENGTH),
            filterbank: mel_filterbank(N_FFT).expect("default filterbank is valid"),
            spectrum: PowerSpectrum::new(N_FFT),
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Natural frame count for a centered STFT.
    pub fn natural_frames(samples: usize) -> usize {
        1 + samples / HOP_LENGTH
    }

    /// Log-mel frames of one channel, `ln(mel power + 1e-10)`.
    pub fn channel(&mut self, x: &[f64]) -> Result<Vec<[f64; N_MELS]>, FeatureError> {
        let half = WIN_LENGTH / 2;
        if x.len() <= half {
            return Err(FeatureError::TooShort { len: x.len(), needed: half + 1 });
        }
        let n_frames = Self::natural_frames(x.len());
        let n = x.len() as i64;
        let reflect = |i: i64| -> usize {
            let r = if i < 0 {
                -i
            } else if i >= n {
                2 * (n - 1) - i
            } else {
                i
            };
            r as usize
        };
        let mut frame = vec![0.0; WIN_LENGTH];
        let mut power = vec![0.0; N_FFT / 2 + 1];
        let mut mel = [0.0; N_MELS];
        let mut out = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            let start = (t * HOP_LENGTH) as i64 - half as i64;
            if start >= 0 && start + (WIN_LENGTH as i64) <= n {
                let s = start as usize;
                for (f, (&v, &w)) in frame.iter_mut().zip(x[s..s + WIN_LENGTH].iter().zip(&self.window)) {
                    *f = v * w;
                }
            } else {
                for (i, f) in frame.iter_mut().enumerate() {
                    *f = x[reflect(start + i as i64)] * self.window[i];
                }
            }
            self.spectrum.compute(&frame, &mut power);
            self.filterbank.apply_into(&power, &mut mel);
            for m in mel.iter_mut() {
                *m = (*m + LOG_EPS).ln();
            }
            out.push(mel);
        }
        Ok(out)
    }

    pub fn compute(&mut self, audio: &Waveform) -> Result<BinauralSpectrogram, FeatureError> {
        if audio.n_channels() != 2 {
            return Err(FeatureError::Shape {
                expected: "2 channels".into(),
                found: format!("{} channels", audio.n_channels()),
            });
        }
        audio.require_rate(SAMPLE_RATE)?;
        let samples = audio.samples_per_channel();
        let natural = Self::natural_frames(samples);
        let frames = if samples == CLIP_SAMPLES { CLIP_FRAMES } else { natural };
        let floor = LOG_EPS.ln() as f32;
        let mut values = Array3::from_elem((2, frames, N_MELS), floor);
        for c in 0..2 {
            let rows = self.channel(audio.channel(c))?;
            for (t, row) in rows.iter().take(frames).enumerate() {
                for (m, &v) in row.iter().enumerate() {
                    values[[c, t, m]] = v as f32;
                }
            }
        }
        BinauralSpectrogram::from_array(values)
    }
}

/// Binaural log-mel spectrogram of a 2-channel 32 kHz waveform.
///
/// A 10 s clip yields 1001 STFT frames, right-padded with `ln(1e-10)` to 1024.
pub fn logmel(audio: &Waveform) -> Result<BinauralSpectrogram, FeatureError> {
    LogMel::new().compute(audio)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBatch {
    pub segments: Vec<BinauralSpectrogram>,
    pub parent_ids: Vec<String>,
    pub offsets_frames: Vec<usize>,
}

impl SegmentBatch {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Draws 16 independent 200-frame crops with offsets uniform over `[0, frames-200]`.
pub fn sample_segments(
    spec: &BinauralSpectrogram,
    parent_id: &str,
    seed: u64,
) -> Result<SegmentBatch, FeatureError> {
    sample_segments_n(spec, parent_id, seed, SEGMENTS_PER_CLIP)
}

pub fn sample_segments_n(
    spec: &BinauralSpectrogram,
    parent_id: &str,
    seed: u64,
    count: usize,
) -> Result<SegmentBatch, FeatureError> {
    if spec.frames() < SEGMENT_FRAMES {
        return Err(FeatureError::TooShort { len: spec.frames(), needed: SEGMENT_FRAMES });
    }
    let mut rng = seed::rng(seed);
    let max_offset = spec.frames() - SEGMENT_FRAMES;
    let mut batch = SegmentBatch {
        segments: Vec::with_capacity(count),
        parent_ids: Vec::with_capacity(count),
        offsets_frames: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let off = rng.gen_range(0..=max_offset);
        batch.segments.push(spec.crop(off, SEGMENT_FRAMES)?);
        batch.parent_ids.push(parent_id.to_string());
        batch.offsets_frames.push(off);
    }
    Ok(batch)
}

/// In-batch sampling over several parent clips; parent `i` uses seed `seed ⊕ i`.
pub fn sample_batch(
    parents: &[(&str, &BinauralSpectrogram)],
    seed: u64,
    per_clip: usize,
) -> Result<SegmentBatch, FeatureError> {
    let mut out = SegmentBatch { segments: vec![], parent_ids: vec![], offsets_frames: vec![] };
    for (i, (id, spec)) in parents.iter().enumerate() {
        let b = sample_segments_n(spec, id, seed::item_seed(seed, i as u64), per_clip)?;
        out.segments.extend(b.segments);
        out.parent_ids.extend(b.parent_ids);
        out.offsets_frames.extend(b.offsets_frames);
    }
    Ok(out)
}
