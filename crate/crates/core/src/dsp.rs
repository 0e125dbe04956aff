//! FFT, magnitude extraction, minimum-phase reconstruction and ITD.

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

/// Linear magnitude floor applied before the dB conversion (−100 dB).
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

/// Largest lag considered by [`estimate_itd`], in seconds.
pub const MAX_ITD_LAG_S: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("FFT length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("empty impulse response")]
    EmptyHrir,
    #[error("left/right lengths differ ({left} vs {right})")]
    UnequalChannels { left: usize, right: usize },
    #[error("{0} channel is silent")]
    SilentChannel(Ear),
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ear {
    Left,
    Right,
}

impl std::fmt::Display for Ear {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ear::Left => "left",
            Ear::Right => "right",
        })
    }
}

/// Binaural impulse response pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Hrir {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub sample_rate: f64,
}

impl Hrir {
    pub fn new(left: Vec<f64>, right: Vec<f64>, sample_rate: f64) -> Result<Self, DspError> {
        if left.len() != right.len() {
            return Err(DspError::UnequalChannels { left: left.len(), right: right.len() });
        }
        if !(sample_rate > 0.0) {
            return Err(DspError::Invalid(format!("sample rate {sample_rate}")));
        }
        Ok(Self { left, right, sample_rate })
    }

    pub fn taps(&self) -> usize {
        self.left.len()
    }
}

/// Binaural dB magnitude over `K` bins per ear: left ear first, then right.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeSpectrum {
    pub bins: Vec<f64>,
    pub frequencies: Vec<f64>,
}

impl MagnitudeSpectrum {
    pub fn k(&self) -> usize {
        self.bins.len() / 2
    }

    pub fn ear(&self, ear: Ear) -> &[f64] {
        let k = self.k();
        match ear {
            Ear::Left => &self.bins[..k],
            Ear::Right => &self.bins[k..],
        }
    }
}

/// In-place iterative radix-2 transform. The inverse is scaled by `1/n`.
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) -> Result<(), DspError> {
    let n = buf.len();
    if !n.is_power_of_two() {
        return Err(DspError::NotPowerOfTwo(n));
    }
    if n > 1 {
        let shift = usize::BITS - n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> shift;
            if j > i {
                buf.swap(i, j);
            }
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let step = Complex64::from_polar(1.0, sign * 2.0 * PI / len as f64);
        for start in (0..n).step_by(len) {
            let mut w = Complex64::new(1.0, 0.0);
            for k in 0..len / 2 {
                let a = buf[start + k];
                let b = buf[start + k + len / 2] * w;
                buf[start + k] = a + b;
                buf[start + k + len / 2] = a - b;
                // Recompute periodically so twiddle drift stays below 1e-15.
                w = if (k + 1) % 16 == 0 {
                    Complex64::from_polar(1.0, sign * 2.0 * PI * (k + 1) as f64 / len as f64)
                } else {
                    w * step
                };
            }
        }
        len <<= 1;
    }
    if inverse {
        let scale = 1.0 / n as f64;
        buf.iter_mut().for_each(|x| *x *= scale);
    }
    Ok(())
}

pub fn fft(signal: &[Complex64], inverse: bool) -> Result<Vec<Complex64>, DspError> {
    let mut buf = signal.to_vec();
    fft_in_place(&mut buf, inverse)?;
    Ok(buf)
}

fn real_fft(signal: &[f64], size: usize) -> Result<Vec<Complex64>, DspError> {
    let mut buf = vec![Complex64::new(0.0, 0.0); size];
    for (b, &s) in buf.iter_mut().zip(signal) {
        b.re = s;
    }
    fft_in_place(&mut buf, false)?;
    Ok(buf)
}

pub fn to_db(linear: f64) -> f64 {
    20.0 * linear.max(MAGNITUDE_FLOOR).log10()
}

pub fn from_db(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// FFT length used for `taps` samples and `k` bins per ear.
pub fn fft_size(taps: usize, k: usize) -> usize {
    taps.max(2 * k).max(1).next_power_of_two()
}

/// Zero-pads each ear, takes bins `1..=k` (DC excluded), floors the linear
/// magnitude at [`MAGNITUDE_FLOOR`] and converts to dB.
pub fn hrir_to_magnitude(h: &Hrir, k: usize) -> Result<MagnitudeSpectrum, DspError> {
    if h.taps() == 0 {
        return Err(DspError::EmptyHrir);
    }
    if k == 0 {
        return Err(DspError::Invalid("K must be positive".into()));
    }
    let n = fft_size(h.taps(), k);
    let mut bins = Vec::with_capacity(2 * k);
    for ch in [&h.left, &h.right] {
        let spec = real_fft(ch, n)?;
        bins.extend(spec[1..=k].iter().map(|c| to_db(c.norm())));
    }
    let frequencies = (1..=k).map(|i| i as f64 * h.sample_rate / n as f64).collect();
    Ok(MagnitudeSpectrum { bins, frequencies })
}

/// Minimum-phase impulse response (length `2K`) for one ear's dB magnitude,
/// via the folded real cepstrum. The missing DC bin repeats bin 1.
pub fn minimum_phase_from_db(ear_db: &[f64]) -> Result<Vec<f64>, DspError> {
    let k = ear_db.len();
    if k == 0 {
        return Err(DspError::Invalid("no bins".into()));
    }
    let n = 2 * k;
    if !n.is_power_of_two() {
        return Err(DspError::NotPowerOfTwo(n));
    }
    if ear_db.iter().any(|v| !v.is_finite()) {
        return Err(DspError::Invalid("non-finite magnitude".into()));
    }
    let ln10_20 = std::f64::consts::LN_10 / 20.0;
    let mut log_mag = vec![0.0; n];
    log_mag[0] = ear_db[0] * ln10_20;
    for i in 1..=k {
        log_mag[i] = ear_db[i - 1] * ln10_20;
    }
    for i in k + 1..n {
        log_mag[i] = log_mag[n - i];
    }
    minimum_phase_from_log(&log_mag)
}

/// Minimum-phase response for a full, even natural-log magnitude spectrum
/// of power-of-two length.
fn minimum_phase_from_log(log_mag: &[f64]) -> Result<Vec<f64>, DspError> {
    let n = log_mag.len();
    let half = n / 2;
    let buf: Vec<Complex64> = log_mag.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut cep = fft(&buf, true)?;
    for (i, c) in cep.iter_mut().enumerate() {
        c.im = 0.0;
        if i > 0 && i < half {
            c.re *= 2.0;
        } else if i > half {
            c.re = 0.0;
        }
    }
    fft_in_place(&mut cep, false)?;
    let mut spec: Vec<Complex64> = cep.iter().map(|c| c.exp()).collect();
    fft_in_place(&mut spec, true)?;
    Ok(spec.iter().map(|c| c.re).collect())
}

pub fn minimum_phase(mag: &MagnitudeSpectrum, ear: Ear) -> Result<Vec<f64>, DspError> {
    minimum_phase_from_db(mag.ear(ear))
}

/// Pure delay of one ear in samples: the lag that best aligns the ear's
/// minimum-phase counterpart with the response itself.
fn excess_delay(ch: &[f64], max_lag: isize) -> Result<isize, DspError> {
    let n = (2 * ch.len()).next_power_of_two();
    let spec = real_fft(ch, n)?;
    let log_mag: Vec<f64> = spec.iter().map(|c| c.norm().max(MAGNITUDE_FLOOR).ln()).collect();
    let min_phase = minimum_phase_from_log(&log_mag)?;
    let taps = ch.len() as isize;
    let xcorr = |lag: isize| -> f64 {
        // Σ m[i] · h[i + lag]
        let lo = 0.max(-lag);
        let hi = taps.min(taps - lag);
        (lo..hi).map(|i| min_phase[i as usize] * ch[(i + lag) as usize]).sum()
    };
    let mut best_lag = 0;
    let mut best = xcorr(0);
    // Search outward from zero so ties resolve toward the smaller |lag|.
    for m in 1..=max_lag {
        for lag in [m, -m] {
            let c = xcorr(lag);
            if c > best {
                best = c;
                best_lag = lag;
            }
        }
    }
    Ok(best_lag)
}

/// Interaural time difference in seconds, positive when the right ear leads.
/// Each ear's delay is the integer-lag cross-correlation maximum against its
/// own minimum-phase counterpart, searched within ±1 ms, so the differing
/// group delays of the two ears' magnitude responses do not bias it.
pub fn estimate_itd(h: &Hrir) -> Result<f64, DspError> {
    if h.taps() == 0 {
        return Err(DspError::EmptyHrir);
    }
    for (ear, ch) in [(Ear::Left, &h.left), (Ear::Right, &h.right)] {
        if ch.iter().all(|&v| v == 0.0) {
            return Err(DspError::SilentChannel(ear));
        }
    }
    let max_lag = ((MAX_ITD_LAG_S * h.sample_rate).round() as isize).min(h.taps() as isize - 1);
    let left = excess_delay(&h.left, max_lag)?;
    let right = excess_delay(&h.right, max_lag)?;
    Ok((left - right) as f64 / h.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn impulse_gives_flat_spectrum() {
        let out = fft(&[c(1.0), c(0.0), c(0.0), c(0.0)], false).unwrap();
        for v in out {
            assert!((v - c(1.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn constant_gives_dc() {
        let out = fft(&[c(2.5); 4], false).unwrap();
        assert!((out[0] - c(10.0)).norm() < 1e-15);
        for v in &out[1..] {
            assert!(v.norm() < 1e-15);
        }
    }

    #[test]
    fn non_power_of_two_rejected() {
        assert_eq!(fft(&[c(1.0); 6], false), Err(DspError::NotPowerOfTwo(6)));
    }

    #[test]
    fn length_one_and_two() {
        assert_eq!(fft(&[c(3.0)], false).unwrap(), vec![c(3.0)]);
        let out = fft(&[c(1.0), c(2.0)], false).unwrap();
        assert!((out[0] - c(3.0)).norm() < 1e-15 && (out[1] - c(-1.0)).norm() < 1e-15);
    }

    #[test]
    fn unit_impulse_is_zero_db() {
        let mut ir = vec![0.0; 64];
        ir[0] = 1.0;
        let h = Hrir::new(ir.clone(), ir, 48_000.0).unwrap();
        let m = hrir_to_magnitude(&h, 32).unwrap();
        assert!(m.bins.iter().all(|v| v.abs() < 1e-12));
        let scaled =
            Hrir::new(h.left.iter().map(|v| v * 10.0).collect(), h.right.iter().map(|v| v * 10.0).collect(), 48_000.0)
                .unwrap();
        let m = hrir_to_magnitude(&scaled, 32).unwrap();
        assert!(m.bins.iter().all(|v| (v - 20.0).abs() < 1e-12));
    }

    #[test]
    fn empty_hrir_rejected() {
        let h = Hrir::new(vec![], vec![], 48_000.0).unwrap();
        assert_eq!(hrir_to_magnitude(&h, 8), Err(DspError::EmptyHrir));
    }

    #[test]
    fn flat_spectrum_min_phase_is_impulse() {
        let h = minimum_phase_from_db(&[0.0; 64]).unwrap();
        assert!((h[0] - 1.0).abs() < 1e-9);
        assert!(h[1..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn itd_identical_channels_is_zero() {
        let ir: Vec<f64> = (0..64).map(|i| (-(i as f64) / 5.0).exp() * ((i as f64) * 0.7).sin()).collect();
        let h = Hrir::new(ir.clone(), ir, 48_000.0).unwrap();
        assert_eq!(estimate_itd(&h).unwrap(), 0.0);
    }

    #[test]
    fn itd_right_delayed() {
        let left: Vec<f64> =
            (0..128).map(|i| if i < 40 { ((i as f64) * 0.9).sin() * (-(i as f64) / 8.0).exp() } else { 0.0 }).collect();
        let mut right = vec![0.0; 128];
        right[10..].copy_from_slice(&left[..118]);
        let h = Hrir::new(left, right, 48_000.0).unwrap();
        assert!((estimate_itd(&h).unwrap() + 10.0 / 48_000.0).abs() < 1e-15);
    }

    #[test]
    fn silent_channel_rejected() {
        let h = Hrir::new(vec![1.0, 0.0], vec![0.0, 0.0], 48_000.0).unwrap();
        assert_eq!(estimate_itd(&h), Err(DspError::SilentChannel(Ear::Right)));
    }
}
