//! Metric, baseline, retrieval and graph-construction oracles.

use std::sync::OnceLock;

use graphnf::baselines::{hrtf_selection, linear_interp, linear_interp_weights, nearest_neighbor, SparseField};
use graphnf::dataset::{generate_synthetic, ring_grid, HrtfBundle, SyntheticConfig};
use graphnf::dsp;
use graphnf::features::{build_clue, retrieve, FeatureKind, Measurements, RffEncoder, Standardizer};
use graphnf::graphs::{
    angular_distance, retrieve_directions, retrieve_subjects, Direction, SpatialLayout, SpatialParams,
};
use graphnf::metrics::{evaluate_subject, ild_error, lsd, EvalReport};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bundle() -> &'static HrtfBundle {
    static B: OnceLock<HrtfBundle> = OnceLock::new();
    B.get_or_init(|| {
        generate_synthetic(&SyntheticConfig {
            seed: 3,
            subjects: 9,
            directions: 60,
            k: 16,
            ..SyntheticConfig::default()
        })
        .unwrap()
    })
}

fn direction() -> impl Strategy<Value = Direction> {
    (0.0f64..360.0, -90.0f64..=90.0).prop_map(|(a, e)| Direction::new(a, e).unwrap())
}

#[test]
fn lsd_reference_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h: Vec<f64> = (0..128).map(|_| rng.random_range(-30.0..10.0)).collect();
    assert_eq!(lsd(&h, &h), 0.0);
    let up: Vec<f64> = h.iter().map(|v| v + 20.0).collect();
    assert!((lsd(&up, &h) - 20.0).abs() < 1e-9);
    let mut one_ear = h.clone();
    one_ear[..64].iter_mut().for_each(|v| *v += 6.0);
    assert!((lsd(&one_ear, &h) - 18f64.sqrt()).abs() < 1e-9);
    assert!((ild_error(&one_ear, &h) - 6.0).abs() < 1e-9);
    assert!((18f64.sqrt() - 4.243).abs() < 5e-4);
}

/// Log-spectral distortion written directly over linear magnitudes.
fn lsd_linear(truth: &[f64], pred: &[f64]) -> f64 {
    let n = truth.len() as f64;
    (truth.iter().zip(pred).map(|(t, p)| (20.0 * (p / t).log10()).powi(2)).sum::<f64>() / n).sqrt()
}

proptest! {
    #[test]
    fn lsd_matches_linear_magnitude_form(pairs in proptest::collection::vec((1e-3f64..10.0, 1e-3f64..10.0), 8)) {
        let (t, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let db = |v: &[f64]| v.iter().map(|x| 20.0 * x.log10()).collect::<Vec<_>>();
        prop_assert!((lsd(&db(&p), &db(&t)) - lsd_linear(&t, &p)).abs() < 1e-12);
        prop_assert!((dsp::to_db(p[0]) - db(&p)[0]).abs() < 1e-12);
    }

    #[test]
    fn lsd_is_a_symmetric_scaled_norm(a in proptest::collection::vec(-40.0f64..10.0, 16), b in proptest::collection::vec(-40.0f64..10.0, 16)) {
        prop_assert_eq!(lsd(&a, &b), lsd(&b, &a));
        let norm = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() / 4.0;
        prop_assert!((lsd(&a, &b) - norm).abs() < 1e-12);
    }

    #[test]
    fn angular_distance_matches_haversine(a in direction(), b in direction()) {
        let (la, lb) = (a.elevation().to_radians(), b.elevation().to_radians());
        let dl = (a.azimuth() - b.azimuth()).to_radians();
        let h = ((lb - la) / 2.0).sin().powi(2) + la.cos() * lb.cos() * (dl / 2.0).sin().powi(2);
        let oracle = 2.0 * h.sqrt().min(1.0).asin();
        prop_assert!((angular_distance(a, b) - oracle.to_degrees()).abs() < 1e-6);
        prop_assert_eq!(angular_distance(a, b), angular_distance(b, a));
    }

    #[test]
    fn nearest_neighbor_is_the_brute_force_argmin(seed in any::<u64>(), q in direction()) {
        let b = bundle();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut subset: Vec<usize> = (0..b.direction_count()).collect();
        subset.shuffle(&mut rng);
        subset.truncate(rng.random_range(1..12));
        let field = SparseField::from_bundle(b, 2, &subset);
        let best = subset
            .iter()
            .copied()
            .min_by(|&i, &j| angular_distance(b.directions()[i], q).total_cmp(&angular_distance(b.directions()[j], q)).then(i.cmp(&j)))
            .unwrap();
        prop_assert_eq!(nearest_neighbor(&field, q).unwrap(), b.magnitude(2, best).to_vec());
    }

    #[test]
    fn interpolation_weights_are_a_convex_pair(seed in any::<u64>(), q in direction()) {
        let b = bundle();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut subset: Vec<usize> = (0..b.direction_count()).collect();
        subset.shuffle(&mut rng);
        subset.truncate(rng.random_range(2..20));
        let field = SparseField::from_bundle(b, 0, &subset);
        let w = linear_interp_weights(&field, q).unwrap();
        prop_assert!(!w.is_empty() && w.len() <= 2);
        prop_assert!(w.iter().all(|&(_, x)| (0.0..=1.0).contains(&x)));
        prop_assert!((w.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
        if w.len() == 2 {
            let (d0, d1) = (angular_distance(field.directions[w[0].0], q), angular_distance(field.directions[w[1].0], q));
            prop_assert!((w[0].1 * d0 - w[1].1 * d1).abs() < 1e-9, "inverse-distance weighting");
        }
        let y = linear_interp(&field, q).unwrap();
        for (k, v) in y.iter().enumerate() {
            let lo = field.spectra.iter().map(|s| s[k]).fold(f64::INFINITY, f64::min);
            let hi = field.spectra.iter().map(|s| s[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9);
        }
    }

    #[test]
    fn selection_ignores_candidate_order(seed in any::<u64>(), kind in prop::sample::select(FeatureKind::ALL.to_vec())) {
        let b = bundle();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = Measurements::from_bundle(b, 8, &[0, 17, 33, 50]);
        let mut cands: Vec<usize> = (0..8).collect();
        let first = hrtf_selection(b, &target, &cands, kind).unwrap();
        cands.shuffle(&mut rng);
        prop_assert_eq!(hrtf_selection(b, &target, &cands, kind).unwrap(), first);
    }

    #[test]
    fn subject_retrieval_is_sorted_brute_force(seed in any::<u64>(), m in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cands: Vec<(usize, Vec<f64>)> = (0..8).map(|i| (i * 3, (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())).collect();
        let target: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let dist = |f: &[f64]| f.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let mut oracle: Vec<(f64, usize)> = cands.iter().map(|(id, f)| (dist(f), *id)).collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = oracle.iter().take(m).map(|p| p.1).collect();
        let mut shuffled = cands.clone();
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(retrieve_subjects(&cands, &target, m).unwrap(), expected.clone());
        prop_assert_eq!(retrieve_subjects(&shuffled, &target, m).unwrap(), expected);
    }

    #[test]
    fn spatial_layout_edges_follow_the_kernel(t in 0usize..80, delta in 15.0f64..60.0, a in 0.2f64..1.0, sigma in 0.2f64..2.0) {
        let dirs = ring_grid(80);
        let params = SpatialParams { a, delta_d: delta, sigma };
        let Ok(layout) = SpatialLayout::around(&dirs, dirs[t], &params, true) else { return Ok(()) };
        let n = layout.neighbors.len();
        prop_assert!(layout.adjacency.is_symmetric());
        prop_assert_eq!(layout.adjacency.weight(n, n), Some(1.0));
        let kernel = |d: f64| (-(d / (a * delta)).powi(2) / (2.0 * sigma * sigma)).exp();
        for (i, &di) in layout.neighbors.iter().enumerate() {
            prop_assert!(di != t && angular_distance(dirs[di], dirs[t]) < delta);
            let wt = layout.adjacency.weight(i, n).unwrap();
            prop_assert!((wt - kernel(angular_distance(dirs[di], dirs[t]))).abs() < 1e-12);
            for (j, &dj) in layout.neighbors.iter().enumerate() {
                let d = angular_distance(dirs[di], dirs[dj]);
                match layout.adjacency.weight(i, j) {
                    Some(w) => prop_assert!((i == j || d < a * delta) && (w - kernel(d)).abs() < 1e-12),
                    None => prop_assert!(i != j && d >= a * delta),
                }
            }
        }
    }

    #[test]
    fn rff_features_are_bounded_cosines_and_sines(x in proptest::collection::vec(-3.0f64..3.0, 5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = RffEncoder::new(5, 7, 1.0, &mut rng);
        let y = enc.encode(&x).unwrap();
        prop_assert_eq!(y.len(), 14);
        let b = enc.matrix();
        for j in 0..7 {
            let phase = 2.0 * std::f64::consts::PI * b.row(j).iter().zip(&x).map(|(p, q)| p * q).sum::<f64>();
            prop_assert!((y[j] - phase.cos()).abs() < 1e-12 && (y[7 + j] - phase.sin()).abs() < 1e-12);
        }
        prop_assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn selection_picks_the_smallest_mean_error() {
    let b = bundle();
    let subset = [1, 20, 41];
    let target = Measurements::from_bundle(b, 8, &subset);
    let cands: Vec<usize> = (0..8).collect();
    let ild = |s: &[f64]| s[..16].iter().sum::<f64>() / 16.0 - s[16..].iter().sum::<f64>() / 16.0;
    for kind in [FeatureKind::Lsd, FeatureKind::Ild] {
        let score = |c: usize| {
            subset
                .iter()
                .map(|&d| {
                    let (x, y) = (b.magnitude(c, d), b.magnitude(8, d));
                    match kind {
                        FeatureKind::Lsd => lsd(x, y),
                        _ => (ild(x) - ild(y)).abs(),
                    }
                })
                .sum::<f64>()
                / 3.0
        };
        let best = cands.iter().copied().min_by(|&x, &y| score(x).total_cmp(&score(y))).unwrap();
        assert_eq!(hrtf_selection(b, &target, &cands, kind).unwrap(), best, "{kind:?}");
    }
}

#[test]
fn lsd_retrieval_ranks_by_mean_distance() {
    let b = bundle();
    let target = Measurements::from_bundle(b, 0, &[3, 30]);
    let cands: Vec<usize> = (1..9).collect();
    let got = retrieve(b, &cands, &target, FeatureKind::Lsd, &Standardizer::identity(0), 4).unwrap();
    let mut oracle: Vec<(f64, usize)> = cands
        .iter()
        .map(|&c| ((lsd(b.magnitude(c, 3), b.magnitude(0, 3)) + lsd(b.magnitude(c, 30), b.magnitude(0, 30))) / 2.0, c))
        .collect();
    oracle.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    assert_eq!(got, oracle.iter().take(4).map(|p| p.1).collect::<Vec<_>>());
}

#[test]
fn direction_retrieval_threshold_is_strict() {
    let dirs: Vec<Direction> = [(0.0, 0.0), (20.0, 0.0), (19.999, 0.0), (0.0, 10.0)]
        .iter()
        .map(|&(a, e)| Direction::new(a, e).unwrap())
        .collect();
    let got = retrieve_directions(&dirs, dirs[0], 20.0, true).unwrap();
    assert_eq!(got, vec![2, 3]);
    assert_eq!(retrieve_directions(&dirs, dirs[0], 20.0, false).unwrap(), vec![0, 2, 3]);
}

#[test]
fn standardizer_centers_and_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<Vec<f64>> =
        (0..50).map(|_| (0..3).map(|j| rng.random_range(-1.0..1.0) * (j + 1) as f64 + j as f64).collect()).collect();
    let s = Standardizer::fit(&rows);
    let z: Vec<Vec<f64>> = rows.iter().map(|r| s.apply(r).unwrap()).collect();
    for j in 0..3 {
        let mean = z.iter().map(|r| r[j]).sum::<f64>() / 50.0;
        let var = z.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / 50.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
    let flat = Standardizer::fit(&[vec![2.0], vec![2.0]]);
    assert_eq!(flat.apply(&[2.0]).unwrap(), vec![0.0]);
}

#[test]
fn clue_layout() {
    let d = Direction::new(90.0, -30.0).unwrap();
    let c = build_clue(d, &[0.5, -1.0]);
    assert_eq!(c.len(), 4);
    assert!((c[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-15 && (c[1] + std::f64::consts::PI / 6.0).abs() < 1e-15);
    assert_eq!(&c[2..], &[0.5, -1.0]);
}

#[test]
fn report_aggregates() {
    let b = bundle();
    let truth = b.subject_field(4);
    let mut pred = truth.clone();
    for (i, row) in pred.iter_mut().enumerate() {
        row.iter_mut().for_each(|v| *v += i as f64 / 10.0);
    }
    let measured = [0, 5];
    let entries = evaluate_subject("synth004", b.directions(), &pred, &truth, &measured).unwrap();
    assert_eq!(entries.len(), b.direction_count() - 2);
    let r = EvalReport::new("probe", 3.0, entries);
    let n = (b.direction_count() - 2) as f64;
    let expected: f64 =
        (0..b.direction_count()).filter(|i| !measured.contains(i)).map(|i| i as f64 / 10.0).sum::<f64>() / n;
    assert!((r.mean_lsd - expected).abs() < 1e-9);
    assert!(r.mean_ild_err < 1e-9);
    assert_eq!(r.exceed_count(), (31..60).count());
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 1 + r.entries.len());
    assert!(csv.starts_with("subject,az,el,lsd_db,ild_err_db,exceeds_zeta\n"));
    let by_dir = r.exceedance_by_direction();
    assert_eq!(by_dir.len(), r.entries.len());
    assert!(by_dir.iter().all(|row| row.3 == 1));
}
