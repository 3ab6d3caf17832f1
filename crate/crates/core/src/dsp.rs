//! Signal-processing kernels shared by the simulator, mixer and featurizer.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::audio_io::SAMPLE_RATE;

pub const N_MELS: usize = 128;
pub const MEL_F_LOW_HZ: f64 = 50.0;
pub const MEL_F_HIGH_HZ: f64 = 16_000.0;
/// Half-width of the windowed-sinc fractional delay kernel (33 taps total).
pub const SINC_HALF_TAPS: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("empty input signal")]
    EmptyInput,
    #[error("signal of {len} samples is shorter than the required {needed}")]
    TooShort { len: usize, needed: usize },
    #[error("{0} signal has zero power")]
    ZeroPower(&'static str),
    #[error("upper frequency {f_high} Hz exceeds Nyquist {nyquist} Hz")]
    AboveNyquist { f_high: f64, nyquist: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Full linear convolution via zero-padded radix-2 FFT.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Result<Vec<f64>, DspError> {
    Ok(fft_convolve_many(x, &[h])?.pop().unwrap())
}

/// Convolves one signal with several kernels, transforming the signal once.
pub fn fft_convolve_many(x: &[f64], kernels: &[&[f64]]) -> Result<Vec<Vec<f64>>, DspError> {
    if x.is_empty() || kernels.iter().any(|h| h.is_empty()) {
        return Err(DspError::EmptyInput);
    }
    let max_h = kernels.iter().map(|h| h.len()).max().unwrap_or(1);
    let n = (x.len() + max_h - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    let mut xf = padded(x, n);
    fwd.process(&mut xf);
    let scale = 1.0 / n as f64;
    Ok(kernels
        .iter()
        .map(|h| {
            let mut hf = padded(h, n);
            fwd.process(&mut hf);
            for (a, b) in hf.iter_mut().zip(&xf) {
                *a *= b;
            }
            inv.process(&mut hf);
            hf[..x.len() + h.len() - 1].iter().map(|c| c.re * scale).collect()
        })
        .collect())
}

fn padded(x: &[f64], n: usize) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (b, &v) in buf.iter_mut().zip(x) {
        b.re = v;
    }
    buf
}

/// Linear fade-in and fade-out over `fade_s` seconds at each end.
///
/// With `N = round(fade_s * rate)` the gain of sample `i < N` is `i / N`, mirrored
/// at the end so that the last sample is zero.
pub fn apply_fade(x: &[f64], fade_s: f64, rate_hz: u32) -> Result<Vec<f64>, DspError> {
    if !(fade_s >= 0.0) {
        return Err(DspError::InvalidArgument(format!("fade length {fade_s}")));
    }
    let n = (fade_s * rate_hz as f64).round() as usize;
    if x.len() < 2 * n {
        return Err(DspError::TooShort { len: x.len(), needed: 2 * n });
    }
    let mut out = x.to_vec();
    let len = out.len();
    for i in 0..n {
        let g = i as f64 / n as f64;
        out[i] *= g;
        out[len - 1 - i] *= g;
    }
    Ok(out)
}

pub fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Mean-square power over several equally weighted channels.
pub fn mean_power_multi(channels: &[&[f64]]) -> f64 {
    let n: usize = channels.iter().map(|c| c.len()).sum();
    if n == 0 {
        return 0.0;
    }
    channels.iter().flat_map(|c| c.iter()).map(|v| v * v).sum::<f64>() / n as f64
}

pub fn power_db(p_signal: f64, p_noise: f64) -> f64 {
    10.0 * (p_signal / p_noise).log10()
}

/// Noise gain `b` that mixes target and noise at a requested SNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrScale {
    pub target_snr_db: f64,
    pub b: f64,
}

pub fn snr_scale(target: &[f64], noise: &[f64], snr_db: f64) -> Result<SnrScale, DspError> {
    snr_scale_from_powers(mean_power(target), mean_power(noise), snr_db)
}

/// `b = sqrt(P_target / (P_noise * 10^(snr/10)))`.
pub fn snr_scale_from_powers(
    p_target: f64,
    p_noise: f64,
    snr_db: f64,
) -> Result<SnrScale, DspError> {
    if !(p_target > 0.0) {
        return Err(DspError::ZeroPower("target"));
    }
    if !(p_noise > 0.0) {
        return Err(DspError::ZeroPower("noise"));
    }
    let b = (p_target / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    if !b.is_finite() || b <= 0.0 {
        return Err(DspError::InvalidArgument(format!("degenerate noise gain {b}")));
    }
    Ok(SnrScale { target_snr_db: snr_db, b })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Unnormalized triangular mel filters, stored sparsely by their support.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub f_low_hz: f64,
    pub f_high_hz: f64,
    pub n_fft: usize,
    pub rate_hz: u32,
    centers_hz: Vec<f64>,
    // (first bin, weights) per filter
    rows: Vec<(usize, Vec<f64>)>,
}

pub fn mel_filterbank(n_fft: usize) -> Result<MelFilterbank, DspError> {
    MelFilterbank::new(n_fft, SAMPLE_RATE, N_MELS, MEL_F_LOW_HZ, MEL_F_HIGH_HZ)
}

impl MelFilterbank {
    pub fn new(
        n_fft: usize,
        rate_hz: u32,
        n_mels: usize,
        f_low_hz: f64,
        f_high_hz: f64,
    ) -> Result<Self, DspError> {
        let nyquist = rate_hz as f64 / 2.0;
        if f_high_hz > nyquist {
            return Err(DspError::AboveNyquist { f_high: f_high_hz, nyquist });
        }
        if n_mels == 0 || n_fft < 2 || !(f_low_hz >= 0.0 && f_low_hz < f_high_hz) {
            return Err(DspError::InvalidArgument(format!(
                "n_mels {n_mels}, n_fft {n_fft}, band {f_low_hz}-{f_high_hz} Hz"
            )));
        }
        let (m_lo, m_hi) = (hz_to_mel(f_low_hz), hz_to_mel(f_high_hz));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = rate_hz as f64 / n_fft as f64;
        let mut rows = Vec::with_capacity(n_mels);
        for k in 0..n_mels {
            let (lo, c, hi) = (edges[k], edges[k + 1], edges[k + 2]);
            let first = ((lo / bin_hz).floor() as usize).min(n_bins - 1);
            let last = ((hi / bin_hz).ceil() as usize).min(n_bins - 1);
            let weights: Vec<f64> = (first..=last)
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    let up = (f - lo) / (c - lo);
                    let down = (hi - f) / (hi - c);
                    up.min(down).max(0.0)
                })
                .collect();
            rows.push((first, weights));
        }
        Ok(Self {
            n_mels,
            f_low_hz,
            f_high_hz,
            n_fft,
            rate_hz,
            centers_hz: edges[1..=n_mels].to_vec(),
            rows,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn center_hz(&self, k: usize) -> f64 {
        self.centers_hz[k]
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Filter weight of mel band `k` at FFT bin `bin`.
    pub fn weight(&self, k: usize, bin: usize) -> f64 {
        let (first, w) = &self.rows[k];
        bin.checked_sub(*first).and_then(|i| w.get(i)).copied().unwrap_or(0.0)
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        (0..self.n_mels)
            .map(|k| (0..self.n_bins()).map(|b| self.weight(k, b)).collect())
            .collect()
    }

    /// Projects a power spectrum (`n_fft/2+1` bins) onto the mel bands.
    pub fn apply_into(&self, power: &[f64], out: &mut [f64]) {
        debug_assert_eq!(power.len(), self.n_bins());
        for ((first, w), o) in self.rows.iter().zip(out.iter_mut()) {
            *o = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
        }
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_mels];
        self.apply_into(power, &mut out);
        out
    }
}

/// Reusable forward FFT of a fixed size returning one-sided power spectra.
pub struct PowerSpectrum {
    n_fft: usize,
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl PowerSpectrum {
    pub fn new(n_fft: usize) -> Self {
        let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
        let scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        Self { n_fft, fft, buf: vec![Complex64::new(0.0, 0.0); n_fft], scratch }
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    /// `frame` is zero-padded to `n_fft`; writes `n_fft/2+1` values of |X|².
    pub fn compute(&mut self, frame: &[f64], out: &mut [f64]) {
        assert!(frame.len() <= self.n_fft);
        for (i, b) in self.buf.iter_mut().enumerate() {
            *b = Complex64::new(frame.get(i).copied().unwrap_or(0.0), 0.0);
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        for (o, c) in out.iter_mut().zip(&self.buf[..self.n_fft / 2 + 1]) {
            *o = c.norm_sqr();
        }
    }
}

/// Adds `amp * delta(t - delay)` to `buf` using a 33-tap Hann-windowed sinc.
///
/// Integer delays reduce to a single tap. Taps falling outside `buf` are dropped.
pub fn add_fractional_impulse(buf: &mut [f64], delay: f64, amp: f64) {
    let center = delay.round();
    if center == delay {
        if delay >= 0.0 && (delay as usize) < buf.len() {
            buf[delay as usize] += amp;
        }
        return;
    }
    let half = SINC_HALF_TAPS as i64;
    let center = center as i64;
    for k in -half..=half {
        let idx = center + k;
        if idx < 0 || idx as usize >= buf.len() {
            continue;
        }
        buf[idx as usize] += amp * windowed_sinc(idx as f64 - delay);
    }
}

/// `sinc(t)` tapered by a Hann window spanning ±(half + 1) samples.
pub fn windowed_sinc(t: f64) -> f64 {
    let width = SINC_HALF_TAPS as f64 + 1.0;
    if t.abs() >= width {
        return 0.0;
    }
    let sinc = if t == 0.0 { 1.0 } else { (PI * t).sin() / (PI * t) };
    sinc * (0.5 + 0.5 * (PI * t / width).cos())
}

/// Signal delayed by a (fractional) number of samples, length `len + extra`.
pub fn fractional_delay(x: &[f64], delay: f64, extra: usize) -> Vec<f64> {
    let mut kernel = vec![0.0; delay.ceil() as usize + SINC_HALF_TAPS + 2];
    add_fractional_impulse(&mut kernel, delay, 1.0);
    let mut out = vec![0.0; x.len() + extra];
    for (i, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (j, &kv) in kernel.iter().enumerate() {
            if kv != 0.0 && i + j < out.len() {
                out[i + j] += xv * kv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn direct_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len() + h.len() - 1];
        for (i, &a) in x.iter().enumerate() {
            for (j, &b) in h.iter().enumerate() {
                y[i + j] += a * b;
            }
        }
        y
    }

    fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn convolve_identity_and_delay() {
        let y = fft_convolve(&[1.0, 2.0, 3.0], &[1.0]).unwrap();
        for (a, b) in y.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let y = fft_convolve(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(y.len(), 5);
        for (a, b) in y.iter().zip([0.0, 0.0, 1.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(fft_convolve(&[], &[1.0]), Err(DspError::EmptyInput));
    }

    #[test]
    fn convolve_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = noise(&mut rng, 1000);
        let h = noise(&mut rng, 257);
        let fast = fft_convolve(&x, &h).unwrap();
        let slow = direct_convolve(&x, &h);
        let scale = slow.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert_eq!(fast.len(), 1256);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-9 * scale);
        }
    }

    proptest! {
        #[test]
        fn convolve_is_linear(seed in 0u64..1000, a in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = noise(&mut rng, 300);
            let y = noise(&mut rng, 300);
            let h = noise(&mut rng, 40);
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
            let lhs = fft_convolve(&mix, &h).unwrap();
            let cx = fft_convolve(&x, &h).unwrap();
            let cy = fft_convolve(&y, &h).unwrap();
            let scale = lhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (a * cx[i] + cy[i])).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn snr_is_reproduced_by_construction(seed in 0u64..1000, snr in 5.0f64..40.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = noise(&mut rng, 2000);
            let n: Vec<f64> = noise(&mut rng, 2000).iter().map(|v| v * 0.3).collect();
            let s = snr_scale(&t, &n, snr).unwrap();
            let bn: Vec<f64> = n.iter().map(|v| v * s.b).collect();
            let measured = power_db(mean_power(&t), mean_power(&bn));
            prop_assert!((measured - snr).abs() < 1e-9);
        }
    }

    #[test]
    fn fade_ramp_values() {
        let x = vec![1.0; 32000];
        let y = apply_fade(&x, 0.2, 32000).unwrap();
        assert_eq!(y[0], 0.0);
        assert_eq!(y[6399], 6399.0 / 6400.0);
        assert_eq!(y[6400], 1.0);
        assert_eq!(*y.last().unwrap(), 0.0);
        assert_eq!(y[16000], 1.0);
        assert_eq!(apply_fade(&x, 0.0, 32000).unwrap(), x);
        assert!(matches!(
            apply_fade(&x[..12000], 0.2, 32000),
            Err(DspError::TooShort { len: 12000, needed: 12800 })
        ));
    }

    #[test]
    fn snr_closed_forms() {
        let t = vec![1.0, -1.0, 1.0, -1.0];
        assert!((snr_scale(&t, &t, 0.0).unwrap().b - 1.0).abs() < 1e-15);
        let t2: Vec<f64> = t.iter().map(|v| v * 2.0).collect();
        assert!((snr_scale(&t2, &t, 0.0).unwrap().b - 2.0).abs() < 1e-15);
        assert_eq!(snr_scale(&t, &[0.0; 4], 10.0), Err(DspError::ZeroPower("noise")));
        assert_eq!(snr_scale(&[0.0; 4], &t, 10.0), Err(DspError::ZeroPower("target")));
    }

    #[test]
    fn filterbank_shape_and_overlap() {
        let fb = mel_filterbank(2048).unwrap();
        assert_eq!(fb.n_mels, 128);
        let dense = fb.dense();
        assert_eq!(dense.len(), 128);
        for row in &dense {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0);
        }
        for k in 0..127 {
            assert!(fb.center_hz(k) < fb.center_hz(k + 1));
            let overlap = dense[k].iter().zip(&dense[k + 1]).any(|(a, b)| *a > 0.0 && *b > 0.0);
            assert!(overlap, "filters {k} and {} do not overlap", k + 1);
        }
        assert!((fb.center_hz(0) - mel_to_hz(hz_to_mel(50.0) + (hz_to_mel(16000.0) - hz_to_mel(50.0)) / 129.0)).abs() < 1e-9);
    }

    #[test]
    fn filterbank_rejects_band_above_nyquist() {
        assert!(matches!(
            MelFilterbank::new(2048, 16000, 128, 50.0, 16000.0),
            Err(DspError::AboveNyquist { .. })
        ));
    }

    #[test]
    fn sine_at_center_excites_its_own_filter() {
        // Each probe tone sits on the FFT bin nearest the filter center and completes
        // an integer number of cycles over the frame, so its spectrum is a single line.
        let n_fft = 2048;
        let fb = mel_filterbank(n_fft).unwrap();
        let mut ps = PowerSpectrum::new(n_fft);
        let mut power = vec![0.0; fb.n_bins()];
        for k in 0..fb.n_mels {
            let bin = (fb.center_hz(k) * n_fft as f64 / 32000.0).round();
            let frame: Vec<f64> =
                (0..n_fft).map(|i| (2.0 * PI * bin * i as f64 / n_fft as f64).sin()).collect();
            ps.compute(&frame, &mut power);
            let resp = fb.apply(&power);
            let best = resp
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(best, k);
        }
    }

    #[test]
    fn hann_windowed_sine_sweep_peaks_at_each_filter() {
        let n_fft = 2048;
        let fb = mel_filterbank(n_fft).unwrap();
        let win = hann_window(800);
        let mut ps = PowerSpectrum::new(n_fft);
        let mut power = vec![0.0; fb.n_bins()];
        for k in 0..fb.n_mels {
            let f = fb.center_hz(k);
            let frame: Vec<f64> = (0..800)
                .map(|i| (2.0 * PI * f * i as f64 / 32000.0).sin() * win[i])
                .collect();
            ps.compute(&frame, &mut power);
            let resp = fb.apply(&power);
            let best = resp.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(best, k);
        }
    }

    #[test]
    fn white_noise_excites_every_band() {
        let n_fft = 2048;
        let fb = mel_filterbank(n_fft).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frame = noise(&mut rng, n_fft);
        let mut ps = PowerSpectrum::new(n_fft);
        let mut power = vec![0.0; fb.n_bins()];
        ps.compute(&frame, &mut power);
        assert!(fb.apply(&power).iter().all(|&v| v > 0.0));
    }

    #[test]
    fn fractional_impulse_has_unit_dc_gain() {
        let mut buf = vec![0.0; 64];
        add_fractional_impulse(&mut buf, 20.37, 1.0);
        let sum: f64 = buf.iter().sum();
        assert!((sum - 1.0).abs() < 0.02, "{sum}");
        let mut buf = vec![0.0; 8];
        add_fractional_impulse(&mut buf, 3.0, 0.5);
        assert_eq!(buf, vec![0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0]);
    }
}
