//! Naturalistic scene mixing: `scene = T + b·N` with BRIR-convolved target and noise.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{AudioError, Waveform, SAMPLE_RATE};
use crate::brir::SceneBrirs;
use crate::dsp::{self, DspError};
use crate::features::CLIP_SAMPLES;

pub const FADE_S: f64 = 0.2;
pub const SNR_RANGE_DB: (f64, f64) = (5.0, 40.0);

#[derive(Debug, Error)]
pub enum MixError {
    #[error("noise clip of {len} samples is shorter than {needed} (two fades)")]
    NoiseTooShort { len: usize, needed: usize },
    #[error("SNR {0} dB outside [5, 40]")]
    SnrOutOfRange(f64),
    #[error("expected a mono {0} clip")]
    NotMono(&'static str),
    #[error("scene has no noise BRIR")]
    NoNoise,
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// Unit vector for an azimuth (from +x toward +y) and elevation (up positive).
pub fn direction_vector(azimuth_deg: f64, elevation_deg: f64) -> [f64; 3] {
    let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    [e.cos() * a.cos(), e.cos() * a.sin(), e.sin()]
}

pub fn draw_snr_db<R: Rng>(rng: &mut R) -> f64 {
    rng.gen_range(SNR_RANGE_DB.0..=SNR_RANGE_DB.1)
}

fn fade_len() -> usize {
    (FADE_S * SAMPLE_RATE as f64).round() as usize
}

/// Loops `x` with linear crossfades of `overlap` samples until it reaches `len`.
fn loop_pad(x: &[f64], len: usize, overlap: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    while out.len() < len {
        let start = out.len() - overlap;
        for i in 0..overlap {
            let g = (i + 1) as f64 / (overlap + 1) as f64;
            out[start + i] = (1.0 - g) * out[start + i] + g * x[i];
        }
        out.extend_from_slice(&x[overlap..]);
    }
    out.truncate(len);
    out
}

/// Brings a mono noise clip to exactly 10 s and fades both ends over 200 ms.
///
/// Longer clips are trimmed; shorter ones are looped with 200 ms crossfades.
pub fn prepare_noise(noise: &Waveform) -> Result<Waveform, MixError> {
    if noise.n_channels() != 1 {
        return Err(MixError::NotMono("noise"));
    }
    noise.require_rate(SAMPLE_RATE)?;
    let x = noise.channel(0);
    let n = fade_len();
    if x.len() < 2 * n {
        return Err(MixError::NoiseTooShort { len: x.len(), needed: 2 * n });
    }
    let body = if x.len() >= CLIP_SAMPLES {
        x[..CLIP_SAMPLES].to_vec()
    } else {
        loop_pad(x, CLIP_SAMPLES, n)
    };
    Ok(Waveform::mono(dsp::apply_fade(&body, FADE_S, SAMPLE_RATE)?, SAMPLE_RATE)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub scene_id: String,
    pub target_clip: String,
    pub noise_clip: String,
    pub brir_set: SceneBrirs,
    pub snr_db: f64,
    pub seed: u64,
    /// Forces the noise gain instead of deriving it from the SNR; `Some(0.0)` gives a noiseless scene.
    pub noise_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene_id: String,
    pub target_clip: String,
    pub noise_clip: String,
    pub snr_db: f64,
    pub noise_gain: f64,
    pub source_unit_vector: [f64; 3],
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub n_noise_sources: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedScene {
    pub audio: Waveform,
    pub meta: SceneMeta,
}

/// Convolved target `T` and summed noise field `N`, both stereo and 10 s long.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneComponents {
    pub target: [Vec<f64>; 2],
    pub noise: [Vec<f64>; 2],
}

impl SceneComponents {
    pub fn target_power(&self) -> f64 {
        dsp::mean_power_multi(&[&self.target[0], &self.target[1]])
    }

    pub fn noise_power(&self) -> f64 {
        dsp::mean_power_multi(&[&self.noise[0], &self.noise[1]])
    }
}

fn fit(mut x: Vec<f64>) -> Vec<f64> {
    x.resize(CLIP_SAMPLES, 0.0);
    x
}

fn sum_kernels(kernels: impl Iterator<Item = Vec<f64>>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    for k in kernels {
        if acc.len() < k.len() {
            acc.resize(k.len(), 0.0);
        }
        for (a, v) in acc.iter_mut().zip(&k) {
            *a += v;
        }
    }
    acc
}

/// Per-ear convolutions. The noise BRIRs are summed first, which equals summing
/// the individually convolved noise images.
pub fn render_components(
    brirs: &SceneBrirs,
    target: &Waveform,
    noise: &Waveform,
) -> Result<SceneComponents, MixError> {
    if target.n_channels() != 1 {
        return Err(MixError::NotMono("target"));
    }
    if brirs.noises.is_empty() {
        return Err(MixError::NoNoise);
    }
    target.require_rate(SAMPLE_RATE)?;
    let noise = prepare_noise(noise)?;
    let t = target.channel(0);
    let t = &t[..t.len().min(CLIP_SAMPLES)];
    let mut tc = dsp::fft_convolve_many(t, &[&brirs.source.left, &brirs.source.right])?.into_iter();
    let nl = sum_kernels(brirs.noises.iter().map(|b| b.left.clone()));
    let nr = sum_kernels(brirs.noises.iter().map(|b| b.right.clone()));
    let mut nc = dsp::fft_convolve_many(noise.channel(0), &[&nl, &nr])?.into_iter();
    Ok(SceneComponents {
        target: [fit(tc.next().unwrap()), fit(tc.next().unwrap())],
        noise: [fit(nc.next().unwrap()), fit(nc.next().unwrap())],
    })
}

/// Mixes a scene from its components.
pub fn mix_components(spec: &SceneSpec, parts: &SceneComponents) -> Result<MixedScene, MixError> {
    if !(SNR_RANGE_DB.0..=SNR_RANGE_DB.1).contains(&spec.snr_db) {
        return Err(MixError::SnrOutOfRange(spec.snr_db));
    }
    let b = match spec.noise_gain {
        Some(b) => b,
        None => dsp::snr_scale_from_powers(parts.target_power(), parts.noise_power(), spec.snr_db)?.b,
    };
    let ear = |i: usize| -> Vec<f64> {
        parts.target[i].iter().zip(&parts.noise[i]).map(|(t, n)| t + b * n).collect()
    };
    let audio = Waveform::stereo(ear(0), ear(1), SAMPLE_RATE)?;
    let src = &spec.brir_set.source.meta;
    Ok(MixedScene {
        audio,
        meta: SceneMeta {
            scene_id: spec.scene_id.clone(),
            target_clip: spec.target_clip.clone(),
            noise_clip: spec.noise_clip.clone(),
            snr_db: spec.snr_db,
            noise_gain: b,
            source_unit_vector: direction_vector(src.source_azimuth_deg, src.source_elevation_deg),
            azimuth_deg: src.source_azimuth_deg,
            elevation_deg: src.source_elevation_deg,
            n_noise_sources: spec.brir_set.noises.len(),
            seed: spec.seed,
        },
    })
}

pub fn mix_scene(spec: &SceneSpec, target: &Waveform, noise: &Waveform) -> Result<MixedScene, MixError> {
    let parts = render_components(&spec.brir_set, target, noise)?;
    mix_components(spec, &parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brir::{binauralize, image_source_rir, RoomSpec};
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise_clip(seconds: f64, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        Waveform::mono((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), SAMPLE_RATE).unwrap()
    }

    fn brirs(n_noise: usize) -> SceneBrirs {
        let room = RoomSpec::new([5.0, 4.0, 3.0], 0.5, 3).unwrap();
        let rcv = [2.5, 2.0, 1.5];
        let one = |p: [f64; 3], az: f64| {
            binauralize(&image_source_rir(&room, &p, &rcv, SAMPLE_RATE).unwrap(), az, 0.0, SAMPLE_RATE).unwrap()
        };
        SceneBrirs {
            source: one([4.0, 3.0, 1.5], 30.0),
            noises: (0..n_noise).map(|i| one([1.0, 0.5 + i as f64 * 0.6, 1.0], 200.0 + i as f64 * 10.0)).collect(),
        }
    }

    fn spec(brir_set: SceneBrirs, snr_db: f64) -> SceneSpec {
        SceneSpec {
            scene_id: "s0".into(),
            target_clip: "t".into(),
            noise_clip: "n".into(),
            brir_set,
            snr_db,
            seed: 1,
            noise_gain: None,
        }
    }

    #[test]
    fn axis_directions() {
        let close = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(direction_vector(0.0, 0.0), [1.0, 0.0, 0.0]));
        assert!(close(direction_vector(90.0, 0.0), [0.0, 1.0, 0.0]));
        assert!(close(direction_vector(0.0, 90.0), [0.0, 0.0, 1.0]));
    }

    proptest! {
        #[test]
        fn direction_is_unit(az in -720.0f64..720.0, el in -90.0f64..90.0) {
            let v = direction_vector(az, el);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn long_noise_is_trimmed_and_faded() {
        let out = prepare_noise(&noise_clip(15.0, 1)).unwrap();
        assert_eq!(out.samples_per_channel(), CLIP_SAMPLES);
        assert_eq!(*out.channel(0).last().unwrap(), 0.0);
        assert_eq!(out.channel(0)[0], 0.0);
    }

    #[test]
    fn exact_length_noise_keeps_length() {
        let clip = noise_clip(10.0, 2);
        let out = prepare_noise(&clip).unwrap();
        assert_eq!(out.samples_per_channel(), CLIP_SAMPLES);
        let mid = CLIP_SAMPLES / 2;
        assert_eq!(out.channel(0)[mid], clip.channel(0)[mid]);
    }

    #[test]
    fn short_noise_loops_without_jumps() {
        let f = 440.0;
        let n = 4 * SAMPLE_RATE as usize;
        let x: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / SAMPLE_RATE as f64 + 0.3).sin()).collect();
        let out = prepare_noise(&Waveform::mono(x, SAMPLE_RATE).unwrap()).unwrap();
        let y = out.channel(0);
        assert_eq!(y.len(), CLIP_SAMPLES);
        // a full-scale sine steps by at most 2πf/rate per sample; a crossfade of two
        // such sines adds at most 2/(overlap+1) on top of that
        let bound = 2.0 * std::f64::consts::PI * f / SAMPLE_RATE as f64 + 2.0 / (fade_len() + 1) as f64;
        let max_step = y.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        assert!(max_step <= bound + 1e-12, "step {max_step} > {bound}");
    }

    #[test]
    fn too_short_noise_errors() {
        assert!(matches!(prepare_noise(&noise_clip(0.3, 3)), Err(MixError::NoiseTooShort { .. })));
    }

    #[test]
    fn measured_snr_is_exact() {
        let target = noise_clip(10.0, 4);
        let noise = noise_clip(7.0, 5);
        for snr in [5.0, 17.5, 40.0] {
            let s = spec(brirs(1), snr);
            let parts = render_components(&s.brir_set, &target, &noise).unwrap();
            let mixed = mix_components(&s, &parts).unwrap();
            let b = mixed.meta.noise_gain;
            let measured = dsp::power_db(parts.target_power(), b * b * parts.noise_power());
            assert!((measured - snr).abs() < 1e-6, "{measured} vs {snr}");
            assert_eq!(mixed.audio.n_channels(), 2);
            assert_eq!(mixed.audio.samples_per_channel(), CLIP_SAMPLES);
        }
    }

    #[test]
    fn zero_gain_gives_target_only() {
        let target = noise_clip(10.0, 6);
        let noise = noise_clip(10.0, 7);
        let mut s = spec(brirs(3), 10.0);
        s.noise_gain = Some(0.0);
        let parts = render_components(&s.brir_set, &target, &noise).unwrap();
        let mixed = mix_components(&s, &parts).unwrap();
        assert_eq!(mixed.audio.channel(0), &parts.target[0][..]);
        assert_eq!(mixed.audio.channel(1), &parts.target[1][..]);
    }

    #[test]
    fn diffuse_field_is_sum_of_images() {
        let target = noise_clip(10.0, 8);
        let noise = noise_clip(10.0, 9);
        let set = brirs(3);
        let all = render_components(&set, &target, &noise).unwrap();
        let mut summed = [vec![0.0; CLIP_SAMPLES], vec![0.0; CLIP_SAMPLES]];
        for b in &set.noises {
            let single = SceneBrirs { source: set.source.clone(), noises: vec![b.clone()] };
            let p = render_components(&single, &target, &noise).unwrap();
            for ear in 0..2 {
                for (s, v) in summed[ear].iter_mut().zip(&p.noise[ear]) {
                    *s += v;
                }
            }
        }
        for ear in 0..2 {
            for (a, b) in all.noise[ear].iter().zip(&summed[ear]) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn scaling_target_keeps_snr() {
        let target = noise_clip(10.0, 10);
        let loud = Waveform::mono(target.channel(0).iter().map(|v| 3.0 * v).collect(), SAMPLE_RATE).unwrap();
        let noise = noise_clip(10.0, 11);
        let s = spec(brirs(1), 12.0);
        let a = mix_scene(&s, &target, &noise).unwrap();
        let b = mix_scene(&s, &loud, &noise).unwrap();
        assert!((b.meta.noise_gain / a.meta.noise_gain - 3.0).abs() < 1e-9);
        for (x, y) in a.audio.channel(0).iter().zip(b.audio.channel(0)) {
            assert!((3.0 * x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn mixing_is_deterministic() {
        let target = noise_clip(10.0, 12);
        let noise = noise_clip(6.0, 13);
        let s = spec(brirs(4), 22.0);
        assert_eq!(mix_scene(&s, &target, &noise).unwrap(), mix_scene(&s, &target, &noise).unwrap());
    }

    #[test]
    fn invalid_inputs_error() {
        let target = noise_clip(10.0, 14);
        let noise = noise_clip(10.0, 15);
        assert!(matches!(mix_scene(&spec(brirs(1), 41.0), &target, &noise), Err(MixError::SnrOutOfRange(_))));
        let silent = Waveform::mono(vec![0.0; CLIP_SAMPLES], SAMPLE_RATE).unwrap();
        assert!(matches!(mix_scene(&spec(brirs(1), 10.0), &silent, &noise), Err(MixError::Dsp(DspError::ZeroPower(_)))));
        let mut s = spec(brirs(1), 10.0);
        s.brir_set.noises.clear();
        assert!(matches!(mix_scene(&s, &target, &noise), Err(MixError::NoNoise)));
    }
}
