mod common;

use std::collections::BTreeMap;

use common::{case, percentile, subject};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfo_core::cones::ConeTable;
use sfo_core::contour::Looking;
use sfo_core::eval::{
    bpe_per_landmark, case_bpe_mm, generate_dataset, plausibility_report, rank_experiment,
    rank_scores, run_suite, summarize, superimpose, MethodConfig, NoiseProfile,
};
use sfo_core::geometry::{
    rotation_about, BinaryMask, Matrix3, Pinhole, Point2, Point3, TriMesh, Vector3,
};
use sfo_core::pnpf::{PoseAngles, ProjectionSolution};
use sfo_core::synth::{CameraParams, MorphologyParams};

fn as_solution(camera: Pinhole) -> ProjectionSolution {
    ProjectionSolution {
        camera,
        scd_mm: 0.0,
        pose_angles_deg: PoseAngles {
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
            gimbal_lock: false,
        },
        reprojection_rms_px: 0.0,
        converged: true,
    }
}

/// Point-to-line distance with the line built from the camera matrices.
fn bpe_oracle(cam: &Pinhole, f: &Point3, px: &Point2) -> f64 {
    let (cx, cy) = (cam.width as f64 / 2.0, cam.height as f64 / 2.0);
    let k_inv = Vector3::new((px.x - cx) / cam.focal, (px.y - cy) / cam.focal, 1.0);
    let d = (cam.rotation.transpose() * k_inv).normalize();
    let c = -(cam.rotation.transpose() * cam.translation);
    let w = f.coords - c;
    (w - d * w.dot(&d)).norm()
}

#[test]
fn per_landmark_bpe_matches_point_to_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..10_000 {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.1..1.0),
        );
        let cam = Pinhole::new(
            rotation_about(&axis.normalize(), rng.random_range(-3.0..3.0)),
            Vector3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(300.0..3000.0),
            ),
            rng.random_range(500.0..4000.0),
            800,
            600,
        )
        .unwrap();
        let f = Point3::new(
            rng.random_range(-90.0..90.0),
            rng.random_range(-90.0..90.0),
            rng.random_range(-90.0..90.0),
        );
        let px = Point2::new(rng.random_range(0.0..800.0), rng.random_range(0.0..600.0));
        let truth = BTreeMap::from([("x".to_string(), f)]);
        let image = BTreeMap::from([("x".to_string(), px)]);
        let got = bpe_per_landmark(&cam, &truth, &image).unwrap()["x"];
        let want = bpe_oracle(&cam, &f, &px);
        assert!(
            (got - want).abs() <= 1e-9 * want.max(1.0),
            "{got} vs {want}"
        );
    }
}

#[test]
fn true_camera_has_zero_bpe_and_a_shift_does_not() {
    for k in 0..6 {
        let s = subject(k);
        for looking in [Looking::Frontal, Looking::Left] {
            let c = case(&s, looking, k as u64);
            assert!(case_bpe_mm(&as_solution(c.camera.clone()), &c).unwrap() < 1e-6);
            let mut moved = c.camera.clone();
            moved.translation += Vector3::new(10.0, 0.0, 0.0);
            assert!(case_bpe_mm(&as_solution(moved), &c).unwrap() > 1.0);
        }
    }
}

proptest! {
    #[test]
    fn rank_ignores_positive_affine_rescaling(
        raw in prop::collection::vec(0u32..1000, 2..12),
        shift in -1e3..1e3f64,
        scale in 0.01..100.0f64,
    ) {
        let scores: Vec<(String, f64)> = raw.iter().enumerate().map(|(i, s)| (format!("s{i}"), *s as f64)).collect();
        let truth = "s0";
        let base = rank_scores("p", truth, scores.clone()).unwrap();
        let moved = rank_scores("p", truth, scores.iter().map(|(k, v)| (k.clone(), v + shift)).collect()).unwrap();
        let scaled = rank_scores("p", truth, scores.iter().map(|(k, v)| (k.clone(), v * scale)).collect()).unwrap();
        prop_assert_eq!(base.rank_of_true, moved.rank_of_true);
        prop_assert_eq!(base.rank_of_true, scaled.rank_of_true);
        prop_assert!(base.scores.windows(2).all(|w| w[0].1 <= w[1].1));
        prop_assert_eq!(base.scores.iter().filter(|(k, _)| k == truth).count(), 1);
    }
}

#[test]
fn frontal_views_back_project_better_than_lateral_ones() {
    let table = ConeTable::default_table();
    let method = MethodConfig::oracle_direction();
    let (mut frontal, mut lateral) = (Vec::new(), Vec::new());
    for k in 0..40 {
        let s = subject(100 + k);
        let bpe: Vec<Option<f64>> = [Looking::Frontal, Looking::Left]
            .into_iter()
            .map(|looking| {
                let c = case(&s, looking, 500 + k as u64);
                let o = superimpose(&c, &s, &method, &table, 0);
                o.solution.map(|sol| case_bpe_mm(&sol, &c).unwrap())
            })
            .collect();
        // Mid-depth points can drive the focal length toward the orthographic limit.
        if let [Some(f), Some(l)] = bpe[..] {
            frontal.push(f);
            lateral.push(l);
        }
    }
    assert!(
        frontal.len() >= 25,
        "only {} paired solutions",
        frontal.len()
    );
    let (mf, ml) = (percentile(&mut frontal, 0.5), percentile(&mut lateral, 0.5));
    assert!(mf <= ml, "median frontal {mf} vs lateral {ml}");
}

#[test]
fn plausibility_share_of_outside_pixels() {
    // 20 x 10 mm plate one metre in front of a 1000 px camera: 200 pixels.
    let v = vec![
        Point3::new(-10.0, -5.0, 0.0),
        Point3::new(10.0, -5.0, 0.0),
        Point3::new(10.0, 5.0, 0.0),
        Point3::new(-10.0, 5.0, 0.0),
    ];
    let plate = TriMesh::new(v, vec![[0, 1, 2], [0, 2, 3], [0, 2, 1], [0, 3, 2]]).unwrap();
    let cam = Pinhole::new(
        Matrix3::identity(),
        Vector3::new(0.0, 0.0, 1000.0),
        1000.0,
        100,
        100,
    )
    .unwrap();
    let mut face = BinaryMask::full(100, 100);
    let r = plausibility_report(&cam, &plate, &face, true);
    assert!(!r.implausible && r.pct_pixels_outside == 0.0);
    for x in 40..46 {
        face.set(x, 45, false);
    }
    let r = plausibility_report(&cam, &plate, &face, true);
    assert!(r.implausible);
    assert!(
        (r.pct_pixels_outside - 3.0).abs() < 1e-12,
        "{}",
        r.pct_pixels_outside
    );
}

#[test]
fn profiles_control_landmark_noise() {
    let table = ConeTable::default_table();
    let (m, c) = (MorphologyParams::default(), CameraParams::default());
    let a = generate_dataset(2, 2, 2, NoiseProfile::A, 3, &m, &c, &table).unwrap();
    assert!(a
        .cases
        .iter()
        .all(|b| b.landmarks_2d == b.ideal_2d && b.noise.landmark_magnitude_px == 0.0));
    let b = generate_dataset(2, 2, 2, NoiseProfile::B, 3, &m, &c, &table).unwrap();
    for bundle in &b.cases {
        for (k, p) in &bundle.landmarks_2d {
            let d = p - bundle.ideal_2d[k];
            assert!(d.x.abs() <= 5.0 && d.y.abs() <= 5.0);
        }
    }
    assert!(b.cases.iter().any(|b| b.landmarks_2d != b.ideal_2d));
    assert_eq!(NoiseProfile::C.direction_noise_deg(), 30.0);
    assert_eq!("c".parse::<NoiseProfile>(), Ok(NoiseProfile::C));
    assert!("D".parse::<NoiseProfile>().is_err());
}

#[test]
fn profile_c_replicates_every_photo_twenty_five_times() {
    let table = ConeTable::default_table();
    let data = generate_dataset(
        2,
        1,
        1,
        NoiseProfile::C,
        4,
        &MorphologyParams::default(),
        &CameraParams::default(),
        &table,
    )
    .unwrap();
    let methods = [MethodConfig::oracle_direction()];
    let result = run_suite(
        &data,
        NoiseProfile::C,
        &methods,
        &[0, 1, 2, 3, 4],
        5,
        &table,
    )
    .unwrap();
    for c in &data.cases {
        let positives: Vec<_> = result
            .records
            .iter()
            .filter(|r| r.photo_id == c.case_id && r.positive)
            .collect();
        assert_eq!(positives.len(), 25);
        let replicates: std::collections::BTreeSet<_> = positives
            .iter()
            .map(|r| (r.seed, r.direction_set))
            .collect();
        assert_eq!(replicates.len(), 25);
    }
    assert_eq!(result.records.len(), data.cases.len() * 2 * 25);
    assert_eq!(result.summary.len(), 2);
    assert_eq!(summarize(&result.records), result.summary);

    let a = run_suite(&data, NoiseProfile::A, &methods, &[0, 1], 5, &table).unwrap();
    assert_eq!(a.records.len(), data.cases.len() * 2 * 2);
}

#[test]
fn singleton_database_ranks_first() {
    let s = subject(11);
    let c = case(&s, Looking::Right, 1);
    let table = ConeTable::default_table();
    for method in [
        MethodConfig::oracle_direction(),
        MethodConfig::full(sfo_core::de::DeConfig {
            population_size: 8,
            max_generations: 3,
            max_seconds: None,
            ..Default::default()
        }),
    ] {
        let r = rank_experiment(&c, std::slice::from_ref(&s), &method, &table, 0).unwrap();
        assert_eq!(r.rank_of_true, 1);
        assert_eq!(r.scores.len(), 1);
    }
}
