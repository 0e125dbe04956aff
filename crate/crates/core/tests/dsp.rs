//! Transform, minimum-phase and ITD oracles.

use std::f64::consts::PI;

use graphnf::dataset::{ring_grid, synthesize_hrir, woodworth_itd, SubjectParams, SyntheticConfig};
use graphnf::dsp::{self, Hrir};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive_dft(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = x.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n)
        .map(|k| {
            let s: Complex64 = x
                .iter()
                .enumerate()
                .map(|(t, v)| v * Complex64::from_polar(1.0, sign * 2.0 * PI * ((k * t) % n) as f64 / n as f64))
                .sum();
            if inverse {
                s / n as f64
            } else {
                s
            }
        })
        .collect()
}

#[test]
fn fft_matches_naive_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for p in 0..=10 {
        let n = 1 << p;
        let x: Vec<Complex64> =
            (0..n).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        for inverse in [false, true] {
            let fast = dsp::fft(&x, inverse).unwrap();
            let slow = naive_dft(&x, inverse);
            let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(err < 1e-9, "n = {n}, inverse = {inverse}: {err:e}");
        }
    }
}

proptest! {
    #[test]
    fn itd_flips_sign_when_channels_swap(
        left in proptest::collection::vec(-1.0f64..1.0, 64),
        right in proptest::collection::vec(-1.0f64..1.0, 64),
    ) {
        let a = dsp::estimate_itd(&Hrir::new(left.clone(), right.clone(), 48_000.0).unwrap()).unwrap();
        let b = dsp::estimate_itd(&Hrir::new(right, left, 48_000.0).unwrap()).unwrap();
        prop_assert_eq!(a, -b);
    }

    #[test]
    fn fft_round_trip(x in proptest::collection::vec(-10.0f64..10.0, 64)) {
        let c: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, -v / 3.0)).collect();
        let back = dsp::fft(&dsp::fft(&c, false).unwrap(), true).unwrap();
        for (a, b) in back.iter().zip(&c) {
            prop_assert!((a - b).norm() < 1e-12);
        }
    }

    /// Smooth spectra: a few broad Gaussian bumps over a sloped baseline.
    #[test]
    fn minimum_phase_preserves_magnitude(
        slope in -12.0f64..12.0,
        bumps in proptest::collection::vec((0.1f64..0.9, 0.05f64..0.2, -10.0f64..10.0), 1..4),
        k in prop::sample::select(vec![32usize, 64, 128]),
    ) {
        let db: Vec<f64> = (0..k)
            .map(|i| {
                let x = (i as f64 + 1.0) / k as f64;
                slope * x + bumps.iter().map(|(c, w, g)| g * (-(x - c).powi(2) / (2.0 * w * w)).exp()).sum::<f64>()
            })
            .collect();
        let h = dsp::minimum_phase_from_db(&db).unwrap();
        prop_assert_eq!(h.len(), 2 * k);
        let pair = Hrir::new(h.clone(), h, 48_000.0).unwrap();
        let back = dsp::hrir_to_magnitude(&pair, k).unwrap();
        let rms = (back.ear(dsp::Ear::Left).iter().zip(&db).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / k as f64).sqrt();
        prop_assert!(rms < 1e-3, "RMS {} dB", rms);
    }
}

#[test]
fn minimum_phase_is_causal_energy_front_loaded() {
    let db: Vec<f64> = (0..64).map(|i| -6.0 * (i as f64 / 64.0) + 3.0 * (i as f64 / 10.0).sin()).collect();
    let h = dsp::minimum_phase_from_db(&db).unwrap();
    let total: f64 = h.iter().map(|v| v * v).sum();
    let early: f64 = h[..16].iter().map(|v| v * v).sum();
    assert!(early / total > 0.9);
}

#[test]
fn planted_woodworth_itd_is_recovered() {
    let cfg = SyntheticConfig { k: 64, ..SyntheticConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sample = 1.0 / cfg.sample_rate;
    let mut checked = 0;
    for _ in 0..16 {
        let p = SubjectParams::draw(&mut rng, &cfg);
        for d in ring_grid(120) {
            let h = synthesize_hrir(&p, d, &cfg);
            let lateral = d.lateral_angle();
            // Far-ear delay: a source on the left (positive lateral) reaches the left ear first.
            let planted = -lateral.signum() * woodworth_itd(p.head_radius, lateral, cfg.speed_of_sound);
            let est = dsp::estimate_itd(&h).unwrap();
            assert!((est - planted).abs() <= sample + 1e-12, "{d:?}: estimated {est:e}, planted {planted:e}");
            checked += 1;
        }
    }
    assert_eq!(checked, 1920);
}

#[test]
fn woodworth_values() {
    let (a, c) = (0.0875, 343.0);
    assert_eq!(woodworth_itd(a, 0.0, c), 0.0);
    assert!((woodworth_itd(a, PI / 2.0, c) - a / c * (PI / 2.0 + 1.0)).abs() < 1e-18);
    assert_eq!(woodworth_itd(a, -0.3, c), woodworth_itd(a, 0.3, c));
}

#[test]
fn db_conversions() {
    assert_eq!(dsp::to_db(1.0), 0.0);
    assert!((dsp::to_db(10.0) - 20.0).abs() < 1e-12);
    assert!((dsp::to_db(0.0) - 20.0 * dsp::MAGNITUDE_FLOOR.log10()).abs() < 1e-12);
    assert!((dsp::from_db(dsp::to_db(0.37)) - 0.37).abs() < 1e-15);
}
