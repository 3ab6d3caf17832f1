//! Binaural room impulse responses for shoebox rooms.
//!
//! Room acoustics come from the image-source method; the head is a rigid sphere
//! contributing an interaural time difference (Woodworth) and a first-order
//! head-shadow shelf per ear. Directions use the head frame x = front,
//! y = toward the right ear, z = up, with azimuth measured from +x toward +y.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{self, AudioError, WavEncoding, Waveform, SAMPLE_RATE};
use crate::dsp::{add_fractional_impulse, fractional_delay, SINC_HALF_TAPS};
use crate::mixer::direction_vector;
use crate::seed;

pub const SPEED_OF_SOUND: f64 = 343.0;
pub const HEAD_RADIUS_M: f64 = 0.0875;
pub const LISTENER_HEIGHT_M: f64 = 1.5;
pub const SOURCE_DISTANCE_M: (f64, f64) = (1.5, 5.0);
/// Minimum distance of any source from a wall.
pub const WALL_CLEARANCE_M: f64 = 0.1;
/// Minimum distance of a noise source from the listener.
pub const NOISE_MIN_DISTANCE_M: f64 = 0.5;
pub const REJECTION_BUDGET: usize = 10_000;
/// Ear axes sit slightly behind the interaural line.
pub const EAR_AZIMUTH_DEG: f64 = 100.0;
const SHADOW_ALPHA_MIN: f64 = 0.1;
const SHADOW_THETA_MIN_DEG: f64 = 150.0;

#[derive(Debug, Error)]
pub enum BrirError {
    #[error("invalid room: {0}")]
    InvalidRoom(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("source and receiver coincide")]
    Coincident,
    #[error("angle out of range: azimuth {azimuth_deg}, elevation {elevation_deg}")]
    AngleOutOfRange { azimuth_deg: f64, elevation_deg: f64 },
    #[error("rejection budget of {0} draws exhausted")]
    RejectionBudget(usize),
    #[error("energy decay only reaches {reached_db:.1} dB, need -25 dB")]
    InsufficientDecay { reached_db: f64 },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub dims_m: [f64; 3],
    /// Uniform energy absorption coefficient of every wall, in (0, 1].
    pub absorption: f64,
    pub max_order: u32,
}

impl RoomSpec {
    pub fn new(dims_m: [f64; 3], absorption: f64, max_order: u32) -> Result<Self, BrirError> {
        let room = Self { dims_m, absorption, max_order };
        room.validate()?;
        Ok(room)
    }

    pub fn validate(&self) -> Result<(), BrirError> {
        if self.dims_m.iter().any(|&d| !(d > 2.0 * WALL_CLEARANCE_M) || !d.is_finite()) {
            return Err(BrirError::InvalidRoom(format!("dimensions {:?}", self.dims_m)));
        }
        if !(self.absorption > 0.0 && self.absorption <= 1.0) {
            return Err(BrirError::InvalidRoom(format!("absorption {}", self.absorption)));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dims_m.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dims_m;
        2.0 * (x * y + x * z + y * z)
    }

    pub fn reflection_coefficient(&self) -> f64 {
        (1.0 - self.absorption).sqrt()
    }

    /// Eyring estimate of the reverberation time.
    pub fn eyring_rt60(&self) -> f64 {
        if self.absorption >= 1.0 {
            return 0.0;
        }
        -0.161 * self.volume() / (self.surface() * (1.0 - self.absorption).ln())
    }

    /// Absorption that gives `rt60_s` under Eyring's formula.
    pub fn absorption_for_rt60(dims_m: [f64; 3], rt60_s: f64) -> f64 {
        let probe = Self { dims_m, absorption: 0.5, max_order: 0 };
        1.0 - (-0.161 * probe.volume() / (probe.surface() * rt60_s)).exp()
    }

    pub fn contains(&self, p: &[f64; 3], clearance: f64) -> bool {
        p.iter().zip(&self.dims_m).all(|(&v, &d)| v > clearance && v < d - clearance)
    }
}

/// Ranges from which default rooms are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomDefaults {
    pub length_m: (f64, f64),
    pub width_m: (f64, f64),
    pub height_m: (f64, f64),
    /// Eyring reverberation time from which absorption is derived. The specular
    /// image-source decay lands about 1.4 times longer than this estimate.
    pub eyring_rt60_s: (f64, f64),
    pub max_order: u32,
}

impl Default for RoomDefaults {
    fn default() -> Self {
        Self {
            length_m: (4.0, 8.0),
            width_m: (3.5, 6.0),
            height_m: (2.6, 3.4),
            eyring_rt60_s: (0.19, 0.29),
            max_order: 30,
        }
    }
}

impl RoomDefaults {
    pub fn sample(&self, seed: u64) -> RoomSpec {
        let mut rng = seed::rng(seed);
        let mut draw = |r: (f64, f64)| if r.1 > r.0 { rng.gen_range(r.0..r.1) } else { r.0 };
        let dims_m = [draw(self.length_m), draw(self.width_m), draw(self.height_m)];
        let rt60 = draw(self.eyring_rt60_s);
        let absorption = RoomSpec::absorption_for_rt60(dims_m, rt60).clamp(1e-3, 1.0);
        RoomSpec { dims_m, absorption, max_order: self.max_order }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Localized,
    Diffuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePose {
    pub listener_pos_m: [f64; 3],
    pub listener_heading_deg: f64,
    pub source_pos_m: [f64; 3],
    pub noise_positions_m: Vec<[f64; 3]>,
    pub noise_kind: NoiseKind,
}

/// Head-relative polar coordinates of `target` seen from the listener.
pub fn relative_direction(listener: &[f64; 3], heading_deg: f64, target: &[f64; 3]) -> (f64, f64, f64) {
    let v = [target[0] - listener[0], target[1] - listener[1], target[2] - listener[2]];
    let d = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let world_az = v[1].atan2(v[0]).to_degrees();
    let az = (world_az - heading_deg).rem_euclid(360.0);
    let el = if d > 0.0 { (v[2] / d).clamp(-1.0, 1.0).asin().to_degrees() } else { 0.0 };
    (az, el, d)
}

/// Spherical offset drawn by the scene sampler before rejection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceProposal {
    pub distance_m: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

pub fn propose_source<R: Rng>(rng: &mut R) -> SourceProposal {
    SourceProposal {
        distance_m: rng.gen_range(SOURCE_DISTANCE_M.0..=SOURCE_DISTANCE_M.1),
        azimuth_deg: rng.gen_range(0.0..360.0),
        elevation_deg: rng.gen_range(-90.0..=90.0),
    }
}

/// Samples listener, source and noise placement for one scene.
///
/// Listener position, heading and source offset are redrawn jointly until the
/// source lies inside the room. Noise sources are uniform over the interior.
pub fn sample_scene(seed: u64, room: &RoomSpec) -> Result<ScenePose, BrirError> {
    room.validate()?;
    let [lx, ly, lz] = room.dims_m;
    if lz <= LISTENER_HEIGHT_M + WALL_CLEARANCE_M {
        return Err(BrirError::InvalidRoom(format!("height {lz} m below listener height")));
    }
    let mut rng = seed::rng(seed);
    let c = WALL_CLEARANCE_M;
    let mut draws = 0;
    let interior = |rng: &mut rand_chacha::ChaCha8Rng| {
        [rng.gen_range(c..lx - c), rng.gen_range(c..ly - c), rng.gen_range(c..lz - c)]
    };

    let (listener, heading, source) = loop {
        if draws == REJECTION_BUDGET {
            return Err(BrirError::RejectionBudget(REJECTION_BUDGET));
        }
        draws += 1;
        let listener = [rng.gen_range(c..lx - c), rng.gen_range(c..ly - c), LISTENER_HEIGHT_M];
        let heading: f64 = rng.gen_range(0.0..360.0);
        let p = propose_source(&mut rng);
        let dir = direction_vector(p.azimuth_deg + heading, p.elevation_deg);
        let source = [
            listener[0] + p.distance_m * dir[0],
            listener[1] + p.distance_m * dir[1],
            listener[2] + p.distance_m * dir[2],
        ];
        if room.contains(&source, c) {
            break (listener, heading, source);
        }
    };

    let (kind, n_noise) = if rng.gen_bool(0.5) {
        (NoiseKind::Localized, 1)
    } else {
        (NoiseKind::Diffuse, rng.gen_range(3..=5))
    };
    let mut noise_positions_m = Vec::with_capacity(n_noise);
    while noise_positions_m.len() < n_noise {
        if draws == REJECTION_BUDGET {
            return Err(BrirError::RejectionBudget(REJECTION_BUDGET));
        }
        draws += 1;
        let p = interior(&mut rng);
        let d2: f64 = p.iter().zip(&listener).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2.sqrt() >= NOISE_MIN_DISTANCE_M {
            noise_positions_m.push(p);
        }
    }
    Ok(ScenePose {
        listener_pos_m: listener,
        listener_heading_deg: heading,
        source_pos_m: source,
        noise_positions_m,
        noise_kind: kind,
    })
}

/// Image positions and reflection counts along one axis for indices `-n..=n`.
fn axis_images(len: f64, src: f64, n: i64) -> Vec<(f64, u32)> {
    (-n..=n)
        .map(|i| {
            let base = i as f64 * len;
            let pos = if i.rem_euclid(2) == 0 { base + src } else { base + len - src };
            (pos, i.unsigned_abs() as u32)
        })
        .collect()
}

/// Shoebox room impulse response from `src` to `rcv` by the image-source method.
///
/// Every image with at most `max_order` reflections contributes `r^k / d` at
/// delay `d / c`, with `r = sqrt(1 - absorption)`.
pub fn image_source_rir(
    room: &RoomSpec,
    src: &[f64; 3],
    rcv: &[f64; 3],
    rate_hz: u32,
) -> Result<Vec<f64>, BrirError> {
    room.validate()?;
    if !room.contains(src, 0.0) || !room.contains(rcv, 0.0) {
        return Err(BrirError::InvalidPose("source or receiver outside the room".into()));
    }
    let direct: f64 = src.iter().zip(rcv).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if direct < 1e-6 {
        return Err(BrirError::Coincident);
    }
    let n = room.max_order as i64;
    let r = room.reflection_coefficient();
    let images: Vec<Vec<(f64, u32)>> =
        (0..3).map(|a| axis_images(room.dims_m[a], src[a], n)).collect();
    let samples_per_m = rate_hz as f64 / SPEED_OF_SOUND;

    let mut taps: Vec<(f64, f64)> = Vec::new();
    for &(x, kx) in &images[0] {
        let dx2 = (x - rcv[0]).powi(2);
        for &(y, ky) in &images[1] {
            if kx + ky > room.max_order {
                continue;
            }
            let dxy2 = dx2 + (y - rcv[1]).powi(2);
            for &(z, kz) in &images[2] {
                let k = kx + ky + kz;
                if k > room.max_order {
                    continue;
                }
                let amp = r.powi(k as i32);
                if amp == 0.0 {
                    continue;
                }
                let d = (dxy2 + (z - rcv[2]).powi(2)).sqrt();
                taps.push((d * samples_per_m, amp / d));
            }
        }
    }
    let max_delay = taps.iter().map(|t| t.0).fold(0.0, f64::max);
    let mut out = vec![0.0; max_delay.ceil() as usize + SINC_HALF_TAPS + 1];
    for (delay, amp) in taps {
        add_fractional_impulse(&mut out, delay, amp);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrirMeta {
    pub rt60_s: Option<f64>,
    pub source_azimuth_deg: f64,
    pub source_elevation_deg: f64,
    pub distance_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinauralImpulseResponse {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub rate_hz: u32,
    pub meta: BrirMeta,
}

impl BinauralImpulseResponse {
    pub fn energy(&self) -> f64 {
        self.left.iter().chain(&self.right).map(|v| v * v).sum()
    }

    pub fn to_waveform(&self) -> Result<Waveform, AudioError> {
        Waveform::stereo(self.left.clone(), self.right.clone(), self.rate_hz)
    }
}

/// Woodworth interaural time difference in seconds for a lateral angle in radians.
pub fn woodworth_itd(lateral_rad: f64) -> f64 {
    let t = lateral_rad.abs();
    HEAD_RADIUS_M / SPEED_OF_SOUND * (t + t.sin())
}

/// Raw head-shadow shelf gain for an ear at angle `theta_deg` from the source.
fn shadow_alpha(theta_deg: f64) -> f64 {
    (1.0 + SHADOW_ALPHA_MIN / 2.0)
        + (1.0 - SHADOW_ALPHA_MIN / 2.0) * (theta_deg / SHADOW_THETA_MIN_DEG * PI).cos()
}

/// High-frequency shelf gains `(left, right)`, scaled so `αL² + αR² = 2`.
///
/// With equal-pole shelves this makes `|H_L|² + |H_R|² = 2` at every frequency.
pub fn shadow_gains(azimuth_deg: f64, elevation_deg: f64) -> (f64, f64) {
    let dir = direction_vector(azimuth_deg, elevation_deg);
    let ear = |sign: f64| {
        let axis = direction_vector(sign * EAR_AZIMUTH_DEG, 0.0);
        let dot = dir.iter().zip(&axis).map(|(a, b)| a * b).sum::<f64>();
        shadow_alpha(dot.clamp(-1.0, 1.0).acos().to_degrees())
    };
    let (l, r) = (ear(-1.0), ear(1.0));
    let norm = (2.0 / (l * l + r * r)).sqrt();
    (l * norm, r * norm)
}

/// First-order shelf `(1 + jαω/2ω0) / (1 + jω/2ω0)`, `ω0 = c/a`, by bilinear transform.
fn head_shadow(x: &[f64], alpha: f64, rate_hz: u32, tail: usize) -> Vec<f64> {
    let omega0 = SPEED_OF_SOUND / HEAD_RADIUS_M;
    let beta = 2.0 * rate_hz as f64 / (2.0 * omega0);
    let a0 = 1.0 + beta;
    let (b0, b1, a1) = ((1.0 + alpha * beta) / a0, (1.0 - alpha * beta) / a0, (1.0 - beta) / a0);
    let mut y = Vec::with_capacity(x.len() + tail);
    let (mut x1, mut y1) = (0.0, 0.0);
    for i in 0..x.len() + tail {
        let xi = x.get(i).copied().unwrap_or(0.0);
        let yi = b0 * xi + b1 * x1 - a1 * y1;
        y.push(yi);
        x1 = xi;
        y1 = yi;
    }
    y
}

const SHADOW_TAIL: usize = 128;

/// Spherical-head binaural rendering of a mono room impulse response.
pub fn binauralize(
    rir: &[f64],
    azimuth_deg: f64,
    elevation_deg: f64,
    rate_hz: u32,
) -> Result<BinauralImpulseResponse, BrirError> {
    if !(0.0..360.0).contains(&azimuth_deg) || !(-90.0..=90.0).contains(&elevation_deg) {
        return Err(BrirError::AngleOutOfRange { azimuth_deg, elevation_deg });
    }
    let dir = direction_vector(azimuth_deg, elevation_deg);
    let lateral = dir[1].clamp(-1.0, 1.0).asin();
    let itd = woodworth_itd(lateral) * rate_hz as f64;
    let bulk = woodworth_itd(PI / 2.0) * rate_hz as f64 / 2.0;
    // positive lateral angle: source on the right, right ear leads
    let (delay_l, delay_r) = if lateral >= 0.0 {
        (bulk + itd / 2.0, bulk - itd / 2.0)
    } else {
        (bulk - itd / 2.0, bulk + itd / 2.0)
    };
    let (alpha_l, alpha_r) = shadow_gains(azimuth_deg, elevation_deg);
    let extra = bulk.ceil() as usize * 2 + SINC_HALF_TAPS + 1;
    let render = |delay: f64, alpha: f64| {
        let shaded = head_shadow(rir, alpha, rate_hz, SHADOW_TAIL);
        fractional_delay(&shaded, delay, extra)
    };
    Ok(BinauralImpulseResponse {
        left: render(delay_l, alpha_l),
        right: render(delay_r, alpha_r),
        rate_hz,
        meta: BrirMeta {
            rt60_s: None,
            source_azimuth_deg: azimuth_deg,
            source_elevation_deg: elevation_deg,
            distance_m: None,
        },
    })
}

/// Reverberation time of one channel from its Schroeder decay curve.
///
/// A line is fitted to the energy decay curve between -5 and -25 dB and
/// extrapolated to -60 dB.
pub fn rt60_channel(h: &[f64], rate_hz: u32) -> Result<f64, BrirError> {
    let mut edc = vec![0.0; h.len()];
    let mut acc = 0.0;
    for i in (0..h.len()).rev() {
        acc += h[i] * h[i];
        edc[i] = acc;
    }
    let total = acc;
    if !(total > 0.0) {
        return Err(BrirError::InsufficientDecay { reached_db: 0.0 });
    }
    let db: Vec<f64> = edc.iter().map(|&e| 10.0 * (e / total).log10()).collect();
    let start = db.iter().position(|&v| v <= -5.0);
    // crossings inside the final tenth only reflect the truncated tail
    let usable = h.len() - h.len() / 10;
    let end = db[..usable].iter().position(|&v| v <= -25.0);
    let (start, end) = match (start, end) {
        (Some(s), Some(e)) if e > s + 1 => (s, e),
        _ => {
            let reached = db.iter().rev().find(|v| v.is_finite()).copied().unwrap_or(0.0);
            return Err(BrirError::InsufficientDecay { reached_db: reached });
        }
    };
    let n = (end - start + 1) as f64;
    let (mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0);
    for (i, &y) in db[start..=end].iter().enumerate() {
        let t = i as f64 / rate_hz as f64;
        st += t;
        sy += y;
        stt += t * t;
        sty += t * y;
    }
    let slope = (n * sty - st * sy) / (n * stt - st * st);
    if !(slope < 0.0) {
        return Err(BrirError::InsufficientDecay { reached_db: -25.0 });
    }
    Ok(-60.0 / slope)
}

/// RT60 averaged over both ears.
pub fn measure_rt60(brir: &BinauralImpulseResponse) -> Result<f64, BrirError> {
    let l = rt60_channel(&brir.left, brir.rate_hz)?;
    let r = rt60_channel(&brir.right, brir.rate_hz)?;
    Ok(0.5 * (l + r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBrirs {
    pub source: BinauralImpulseResponse,
    pub noises: Vec<BinauralImpulseResponse>,
}

fn render_one(
    room: &RoomSpec,
    pose: &ScenePose,
    pos: &[f64; 3],
) -> Result<BinauralImpulseResponse, BrirError> {
    let rir = image_source_rir(room, pos, &pose.listener_pos_m, SAMPLE_RATE)?;
    let (az, el, d) = relative_direction(&pose.listener_pos_m, pose.listener_heading_deg, pos);
    let mut brir = binauralize(&rir, az, el, SAMPLE_RATE)?;
    brir.meta.distance_m = Some(d);
    brir.meta.rt60_s = measure_rt60(&brir).ok();
    Ok(brir)
}

/// One BRIR for the source and one per noise position, relative to the listener heading.
pub fn render_scene_brirs(room: &RoomSpec, pose: &ScenePose) -> Result<SceneBrirs, BrirError> {
    if !room.contains(&pose.listener_pos_m, 0.0) {
        return Err(BrirError::InvalidPose("listener outside the room".into()));
    }
    if pose.noise_positions_m.is_empty() {
        return Err(BrirError::InvalidPose("no noise positions".into()));
    }
    let source = render_one(room, pose, &pose.source_pos_m)?;
    let noises = pose
        .noise_positions_m
        .iter()
        .map(|p| render_one(room, pose, p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SceneBrirs { source, noises })
}

/// JSON sidecar written next to every exported BRIR WAV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrirSidecar {
    pub rt60_s: Option<f64>,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub distance_m: Option<f64>,
    pub room: Option<RoomSpec>,
    pub seed: Option<u64>,
}

impl BrirSidecar {
    pub fn from_brir(brir: &BinauralImpulseResponse, room: Option<RoomSpec>, seed: Option<u64>) -> Self {
        Self {
            rt60_s: brir.meta.rt60_s,
            azimuth_deg: brir.meta.source_azimuth_deg,
            elevation_deg: brir.meta.source_elevation_deg,
            distance_m: brir.meta.distance_m,
            room,
            seed,
        }
    }
}

pub fn sidecar_path(wav: &Path) -> PathBuf {
    wav.with_extension("json")
}

/// Writes `<wav>` as stereo float32 and `<wav stem>.json` beside it.
pub fn export_brir(wav: &Path, brir: &BinauralImpulseResponse, sidecar: &BrirSidecar) -> Result<(), BrirError> {
    audio_io::write_wav(wav, &brir.to_waveform()?, WavEncoding::Float32)?;
    audio_io::write_json(sidecar_path(wav), sidecar)?;
    Ok(())
}

/// Loads a stereo BRIR WAV; the sidecar is optional for externally supplied files.
pub fn import_brir(wav: &Path) -> Result<BinauralImpulseResponse, BrirError> {
    let w = audio_io::read_wav(wav)?;
    w.require_rate(SAMPLE_RATE)?;
    if w.n_channels() != 2 {
        return Err(BrirError::Audio(AudioError::InvalidWaveform(format!(
            "BRIR must be stereo, found {} channel(s)",
            w.n_channels()
        ))));
    }
    let side = sidecar_path(wav);
    let meta = if side.exists() {
        let s: BrirSidecar = audio_io::read_json(&side)?;
        BrirMeta {
            rt60_s: s.rt60_s,
            source_azimuth_deg: s.azimuth_deg,
            source_elevation_deg: s.elevation_deg,
            distance_m: s.distance_m,
        }
    } else {
        BrirMeta { rt60_s: None, source_azimuth_deg: 0.0, source_elevation_deg: 0.0, distance_m: None }
    };
    let mut ch = w.into_channels();
    let right = ch.pop().unwrap();
    let left = ch.pop().unwrap();
    Ok(BinauralImpulseResponse { left, right, rate_hz: SAMPLE_RATE, meta })
}
