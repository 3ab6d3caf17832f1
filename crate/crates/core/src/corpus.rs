//! Synthetic source and noise clips for toy runs and tests.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio_io::{AudioError, Waveform, SAMPLE_RATE};
use crate::brir::{binauralize, BrirError};
use crate::{dsp, seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Tone,
    Chirp,
    NoiseBurst,
    ClickTrain,
}

impl TargetKind {
    pub const ALL: [TargetKind; 4] = [Self::Tone, Self::Chirp, Self::NoiseBurst, Self::ClickTrain];

    pub fn name(self) -> &'static str {
        match self {
            Self::Tone => "tone",
            Self::Chirp => "chirp",
            Self::NoiseBurst => "noise_burst",
            Self::ClickTrain => "click_train",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseColor {
    White,
    Pink,
    Brown,
}

impl NoiseColor {
    pub const ALL: [NoiseColor; 3] = [Self::White, Self::Pink, Self::Brown];

    pub fn name(self) -> &'static str {
        match self {
            Self::White => "white",
            Self::Pink => "pink",
            Self::Brown => "brown",
        }
    }
}

fn normalize_peak(mut x: Vec<f64>, peak: f64) -> Vec<f64> {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
    x
}

/// On/off gate with 10 ms raised-cosine edges.
fn gate(n: usize, on: &[(usize, usize)]) -> Vec<f64> {
    let ramp = (0.01 * SAMPLE_RATE as f64) as usize;
    let mut g = vec![0.0; n];
    for &(a, b) in on {
        let b = b.min(n);
        let len = b.saturating_sub(a);
        for i in 0..len {
            let edge = i.min(len - 1 - i);
            g[a + i] = if edge < ramp { 0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos() } else { 1.0 };
        }
    }
    g
}

/// Mono target clip of `duration_s` seconds at 32 kHz, peak 0.5.
pub fn target_clip(kind: TargetKind, duration_s: f64, seed: u64) -> Result<Waveform, AudioError> {
    let mut rng = seed::rng(seed);
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let fs = SAMPLE_RATE as f64;
    let x: Vec<f64> = match kind {
        TargetKind::Tone => {
            let f0 = 200.0 * 2f64.powf(rng.gen_range(0.0..5.0));
            let phase = rng.gen_range(0.0..2.0 * PI);
            let harm = rng.gen_range(1..=4);
            let period = rng.gen_range(0.3..1.2);
            let duty = rng.gen_range(0.4..0.9);
            let on: Vec<(usize, usize)> = (0..)
                .map(|k| ((k as f64 * period * fs) as usize, ((k as f64 + duty) * period * fs) as usize))
                .take_while(|&(a, _)| a < n)
                .collect();
            let g = gate(n, &on);
            (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    let s: f64 = (1..=harm).map(|h| (2.0 * PI * f0 * h as f64 * t + phase).sin() / h as f64).sum();
                    s * g[i]
                })
                .collect()
        }
        TargetKind::Chirp => {
            let f_lo: f64 = rng.gen_range(150.0..800.0);
            let f_hi = rng.gen_range(2_000.0..10_000.0);
            let sweep = rng.gen_range(0.25..1.0);
            let up = rng.gen_bool(0.5);
            let mut phase = 0.0;
            (0..n)
                .map(|i| {
                    let frac = (i as f64 / fs / sweep).fract();
                    let r = if up { frac } else { 1.0 - frac };
                    let f = f_lo * (f_hi / f_lo).powf(r);
                    phase += 2.0 * PI * f / fs;
                    phase.sin()
                })
                .collect()
        }
        TargetKind::NoiseBurst => {
            let len = rng.gen_range(0.05..0.3);
            let gap = rng.gen_range(0.1..0.6);
            let mut on = vec![];
            let mut t = rng.gen_range(0.0..gap);
            while t * fs < n as f64 {
                on.push(((t * fs) as usize, ((t + len) * fs) as usize));
                t += len + gap * rng.gen_range(0.5..1.5);
            }
            let g = gate(n, &on);
            // one-pole low-pass for a random spectral tilt
            let a = rng.gen_range(0.0..0.9);
            let mut y = 0.0;
            (0..n)
                .map(|i| {
                    let w: f64 = StandardNormal.sample(&mut rng);
                    y = a * y + (1.0 - a) * w;
                    y * g[i]
                })
                .collect()
        }
        TargetKind::ClickTrain => {
            let rate = rng.gen_range(2.0..20.0);
            let mut x = vec![0.0; n];
            let decay = rng.gen_range(0.0005..0.003) * fs;
            let ring = rng.gen_range(1_000.0..6_000.0);
            let mut t = rng.gen_range(0.0..1.0 / rate);
            while ((t * fs) as usize) < n {
                let start = (t * fs) as usize;
                for k in 0..(decay * 6.0) as usize {
                    if start + k >= n {
                        break;
                    }
                    x[start + k] += (-(k as f64) / decay).exp() * (2.0 * PI * ring * k as f64 / fs).sin();
                }
                t += 1.0 / rate * rng.gen_range(0.8..1.2);
            }
            x
        }
    };
    Waveform::mono(normalize_peak(x, 0.5), SAMPLE_RATE)
}

/// Mono colored noise, unit RMS. Pink uses a sum of first-order sections with
/// staggered poles; brown is leaky-integrated white noise.
pub fn colored_noise(color: NoiseColor, duration_s: f64, seed: u64) -> Result<Waveform, AudioError> {
    let mut rng = seed::rng(seed);
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut x = match color {
        NoiseColor::White => white,
        NoiseColor::Pink => {
            // Kellet's economy filter
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            white
                .iter()
                .map(|&w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseColor::Brown => {
            let mut y = 0.0;
            white
                .iter()
                .map(|&w| {
                    y = 0.995 * y + w;
                    y
                })
                .collect()
        }
    };
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    Waveform::mono(x, SAMPLE_RATE)
}

/// Anechoic binaural rendering of a target clip from one direction, with an
/// independent white noise floor `floor_db` below the target power in each ear.
pub fn localization_clip(
    kind: TargetKind,
    azimuth_deg: f64,
    duration_s: f64,
    floor_db: f64,
    seed: u64,
) -> Result<Waveform, BrirError> {
    let target = target_clip(kind, duration_s, seed)?;
    let brir = binauralize(&[1.0], azimuth_deg, 0.0, SAMPLE_RATE)?;
    let n = target.samples_per_channel();
    let mut ears = dsp::fft_convolve_many(target.channel(0), &[&brir.left, &brir.right])
        .map_err(|e| AudioError::InvalidWaveform(e.to_string()))?;
    let p = dsp::mean_power_multi(&[&ears[0][..n], &ears[1][..n]]);
    let sigma = (p * 10f64.powf(-floor_db / 10.0)).sqrt();
    let mut rng = seed::rng(seed::mix(seed));
    for ear in ears.iter_mut() {
        ear.truncate(n);
        for v in ear.iter_mut() {
            let w: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * w;
        }
    }
    let right = ears.pop().unwrap();
    let left = ears.pop().unwrap();
    Ok(Waveform::stereo(left, right, SAMPLE_RATE)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn band_power(x: &[f64], lo: f64, hi: f64) -> f64 {
        let n = x.len();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let df = SAMPLE_RATE as f64 / n as f64;
        buf[..n / 2].iter().enumerate().filter(|(k, _)| (lo..hi).contains(&(*k as f64 * df))).map(|(_, c)| c.norm_sqr()).sum()
    }

    #[test]
    fn targets_are_deterministic_and_bounded() {
        for kind in TargetKind::ALL {
            let a = target_clip(kind, 2.0, 5).unwrap();
            assert_eq!(a, target_clip(kind, 2.0, 5).unwrap());
            assert_ne!(a, target_clip(kind, 2.0, 6).unwrap());
            assert_eq!(a.samples_per_channel(), 64_000);
            let peak = a.channel(0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((peak - 0.5).abs() < 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn noise_slopes_follow_color() {
        // octave band power ratios 8, 1 and 1/8 for 1/f^0, 1/f and 1/f^2
        let ratio = |c| {
            let x = colored_noise(c, 2.0, 3).unwrap();
            band_power(x.channel(0), 4_000.0, 8_000.0) / band_power(x.channel(0), 500.0, 1_000.0)
        };
        let (w, p, b) = (ratio(NoiseColor::White), ratio(NoiseColor::Pink), ratio(NoiseColor::Brown));
        assert!((w / 8.0 - 1.0).abs() < 0.1, "white {w}");
        assert!((p - 1.0).abs() < 0.3, "pink {p}");
        assert!((b * 8.0 - 1.0).abs() < 0.3, "brown {b}");
        let x = colored_noise(NoiseColor::Pink, 1.0, 1).unwrap();
        let rms = (x.channel(0).iter().map(|v| v * v).sum::<f64>() / 32_000.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-12);
    }

    #[test]
    fn localization_clip_carries_level_cue() {
        let w = localization_clip(TargetKind::NoiseBurst, 90.0, 1.0, 40.0, 2).unwrap();
        assert_eq!(w.samples_per_channel(), 32_000);
        let p = |c: usize| dsp::mean_power(w.channel(c));
        // positive azimuth is to the right
        let (l, r) = (p(0), p(1));
        assert!(r > 1.2 * l, "{l} {r}");
        assert_eq!(w, localization_clip(TargetKind::NoiseBurst, 90.0, 1.0, 40.0, 2).unwrap());
    }
}
