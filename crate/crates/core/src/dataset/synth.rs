//! Spherical-head synthetic HRTFs: single-pole head shadow per ear,
//! subject-specific resonances that drift with elevation, and a Woodworth
//! interaural delay applied to the far ear.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BundleError, HrtfBundle};
use crate::dsp::{self, Hrir};
use crate::graphs::Direction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub subjects: usize,
    pub directions: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub sample_rate: f64,
    /// Head radius range in metres.
    pub head_radius: [f64; 2],
    pub resonances: usize,
    /// Resonance centre frequency range at zero elevation, Hz.
    pub resonance_freq: [f64; 2],
    /// Gaussian standard deviation range, Hz.
    pub resonance_width: [f64; 2],
    pub resonance_gain: [f64; 2],
    /// Octaves of centre-frequency shift per 90° of elevation.
    pub elevation_shift: [f64; 2],
    pub speed_of_sound: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            subjects: 40,
            directions: 200,
            k: 64,
            sample_rate: 48000.0,
            head_radius: [0.07, 0.11],
            resonances: 3,
            resonance_freq: [3000.0, 14000.0],
            resonance_width: [600.0, 2500.0],
            resonance_gain: [-15.0, 12.0],
            elevation_shift: [0.2, 0.6],
            speed_of_sound: 343.0,
        }
    }
}

fn ordered(name: &str, r: [f64; 2]) -> Result<(), BundleError> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(BundleError::Invalid(format!("{name} range {r:?}")));
    }
    Ok(())
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), BundleError> {
        ordered("head_radius", self.head_radius)?;
        if !(self.head_radius[0] > 0.06 && self.head_radius[1] < 0.12) {
            return Err(BundleError::Invalid("head radius range must lie within (0.06, 0.12) m".into()));
        }
        if self.directions < 8 {
            return Err(BundleError::Invalid("at least 8 directions required".into()));
        }
        if self.k == 0 || self.k % 8 != 0 || !self.k.is_power_of_two() {
            return Err(BundleError::Invalid(format!("K = {} must be a power of two divisible by 8", self.k)));
        }
        if self.subjects == 0 {
            return Err(BundleError::Invalid("no subjects".into()));
        }
        ordered("resonance_freq", self.resonance_freq)?;
        ordered("resonance_width", self.resonance_width)?;
        ordered("resonance_gain", self.resonance_gain)?;
        ordered("elevation_shift", self.elevation_shift)?;
        if !(self.resonance_width[0] > 0.0) || !(self.sample_rate > 0.0) || !(self.speed_of_sound > 0.0) {
            return Err(BundleError::Invalid("widths, sample rate and speed of sound must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resonance {
    pub center_hz: f64,
    pub width_hz: f64,
    pub gain_db: f64,
    pub elevation_octaves: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    pub head_radius: f64,
    pub resonances: Vec<Resonance>,
}

fn draw<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

impl SubjectParams {
    pub fn draw<R: Rng>(rng: &mut R, cfg: &SyntheticConfig) -> Self {
        let head_radius = draw(rng, cfg.head_radius);
        let resonances = (0..cfg.resonances)
            .map(|_| Resonance {
                center_hz: draw(rng, cfg.resonance_freq),
                width_hz: draw(rng, cfg.resonance_width),
                gain_db: draw(rng, cfg.resonance_gain),
                elevation_octaves: draw(rng, cfg.elevation_shift),
            })
            .collect();
        Self { head_radius, resonances }
    }

    /// Per-subject parameters in generation order for `cfg`.
    pub fn all(cfg: &SyntheticConfig) -> Vec<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        (0..cfg.subjects).map(|_| Self::draw(&mut rng, cfg)).collect()
    }
}

/// Quasi-uniform grid of `n` directions on an odd number of elevation rings,
/// with per-ring azimuth counts proportional to `cos(elevation)`.
pub fn ring_grid(n: usize) -> Vec<Direction> {
    let mut rings = ((n as f64 / 2.0).sqrt().round() as usize).max(1);
    if rings % 2 == 0 {
        rings += 1;
    }
    let elevations: Vec<f64> = (0..rings).map(|i| -90.0 + 180.0 * (i + 1) as f64 / (rings + 1) as f64).collect();
    let weights: Vec<f64> = elevations.iter().map(|e| e.to_radians().cos()).collect();
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q.floor() as usize).max(1)).collect();
    let mut order: Vec<usize> = (0..rings).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut assigned: usize = counts.iter().sum();
    let mut i = 0;
    while assigned < n {
        counts[order[i % rings]] += 1;
        assigned += 1;
        i += 1;
    }
    while assigned > n {
        let widest = (0..rings).max_by_key(|&r| (counts[r], std::cmp::Reverse(r))).expect("rings");
        counts[widest] -= 1;
        assigned -= 1;
    }
    elevations
        .iter()
        .zip(&counts)
        .flat_map(|(&el, &c)| (0..c).map(move |j| Direction::new(360.0 * j as f64 / c as f64, el).expect("valid")))
        .collect()
}

/// Incidence angle (radians) between the source and each ear axis.
fn incidence(d: Direction) -> (f64, f64) {
    let y = d.unit_vector()[1].clamp(-1.0, 1.0);
    (y.acos(), (-y).acos())
}

/// Single-pole head-shadow filter response in dB.
fn shadow_db(freq: f64, theta_inc: f64, radius: f64, c: f64) -> f64 {
    const ALPHA_MIN: f64 = 0.1;
    const THETA_MIN: f64 = 150.0;
    let alpha = (1.0 + ALPHA_MIN / 2.0) + (1.0 - ALPHA_MIN / 2.0) * (theta_inc.to_degrees() / THETA_MIN * PI).cos();
    let w = 2.0 * PI * freq / (2.0 * c / radius);
    10.0 * ((1.0 + (alpha * w).powi(2)) / (1.0 + w * w)).log10()
}

fn resonance_db(freq: f64, elevation: f64, res: &[Resonance]) -> f64 {
    res.iter()
        .map(|r| {
            let fc = r.center_hz * 2f64.powf(r.elevation_octaves * elevation / 90.0);
            r.gain_db * (-(freq - fc).powi(2) / (2.0 * r.width_hz * r.width_hz)).exp()
        })
        .sum()
}

/// Woodworth interaural delay magnitude in seconds.
pub fn woodworth_itd(radius: f64, lateral: f64, c: f64) -> f64 {
    let b = lateral.abs();
    radius / c * (b + b.sin())
}

/// Minimum-phase HRIR pair of `2K` taps; the far ear is delayed by the
/// Woodworth ITD rounded to whole samples.
pub fn synthesize_hrir(p: &SubjectParams, d: Direction, cfg: &SyntheticConfig) -> Hrir {
    let k = cfg.k;
    let taps = 2 * k;
    let (th_l, th_r) = incidence(d);
    let mut ears = [th_l, th_r].map(|th| {
        let db: Vec<f64> = (1..=k)
            .map(|i| {
                let f = i as f64 * cfg.sample_rate / taps as f64;
                shadow_db(f, th, p.head_radius, cfg.speed_of_sound) + resonance_db(f, d.elevation(), &p.resonances)
            })
            .collect();
        dsp::minimum_phase_from_db(&db).expect("finite spectrum of power-of-two length")
    });
    let lateral = d.lateral_angle();
    let delay = (woodworth_itd(p.head_radius, lateral, cfg.speed_of_sound) * cfg.sample_rate).round() as usize;
    if delay > 0 {
        let far = if lateral > 0.0 { 1 } else { 0 };
        let shifted: Vec<f64> =
            std::iter::repeat_n(0.0, delay.min(taps)).chain(ears[far].iter().copied()).take(taps).collect();
        ears[far] = shifted;
    }
    let [left, right] = ears;
    Hrir { left, right, sample_rate: cfg.sample_rate }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<HrtfBundle, BundleError> {
    cfg.validate()?;
    let directions = ring_grid(cfg.directions);
    let params = SubjectParams::all(cfg);
    let taps = 2 * cfg.k;
    let mut mags = Vec::with_capacity(cfg.subjects * directions.len() * 2 * cfg.k);
    let mut hrirs = Vec::with_capacity(cfg.subjects * directions.len() * 2 * taps);
    for p in &params {
        for &d in &directions {
            let mut h = synthesize_hrir(p, d, cfg);
            for v in h.left.iter_mut().chain(h.right.iter_mut()) {
                *v = *v as f32 as f64;
            }
            let m = dsp::hrir_to_magnitude(&h, cfg.k).map_err(|e| BundleError::Invalid(e.to_string()))?;
            mags.extend(m.bins);
            hrirs.extend(h.left);
            hrirs.extend(h.right);
        }
    }
    let subjects = (0..cfg.subjects).map(|i| format!("synth{i:03}")).collect();
    let provenance = format!(
        "synthetic spherical head: seed {}, {} subjects, {} directions, K {}",
        cfg.seed, cfg.subjects, cfg.directions, cfg.k
    );
    HrtfBundle::new(subjects, directions, cfg.k, cfg.sample_rate, mags, provenance)?.with_hrirs(taps, hrirs)
}
