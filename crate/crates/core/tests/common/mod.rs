#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sfo_core::cones::ConeTable;
use sfo_core::contour::{CurveMatch, Looking, Pixel, PixelCurve};
use sfo_core::fitness::{AprioriIntervals, DEFAULT_C_INFINITY};
use sfo_core::geometry::{rotation_about, BinaryMask, Matrix3, Pinhole, Point2, Point3, Vector3};
use sfo_core::pnpf::{PoseAngles, ProjectionSolution};
use sfo_core::synth::{
    generate_subject, render_case, CameraParams, CaseBundle, MorphologyParams, SyntheticSubject,
};

pub const IMAGE_W: u32 = 1000;
pub const IMAGE_H: u32 = 800;

/// Random camera looking at a random point cloud, with optional Gaussian
/// image noise of standard deviation `sigma_px`.
pub fn random_pnp_case(
    rng: &mut ChaCha8Rng,
    n: usize,
    sigma_px: f64,
) -> (Pinhole, Vec<Point3>, Vec<Point2>) {
    random_pnp_case_at(rng, n, sigma_px, 600.0..3000.0, 80.0)
}

/// As [`random_pnp_case`] with the camera distance drawn from `distance`
/// and the cloud spanning `±half_extent` mm.
pub fn random_pnp_case_at(
    rng: &mut ChaCha8Rng,
    n: usize,
    sigma_px: f64,
    distance: std::ops::Range<f64>,
    half_extent: f64,
) -> (Pinhole, Vec<Point3>, Vec<Point2>) {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let r = rotation_about(&axis, rng.random_range(0.0..3.0));
    let t = Vector3::new(
        rng.random_range(-50.0..50.0),
        rng.random_range(-50.0..50.0),
        rng.random_range(distance),
    );
    let cam = Pinhole::new(r, t, rng.random_range(800.0..3000.0), IMAGE_W, IMAGE_H).unwrap();
    let world: Vec<Point3> = (0..n)
        .map(|_| {
            let mut c = || rng.random_range(-half_extent..half_extent);
            Point3::new(c(), c(), c())
        })
        .collect();
    let noise = Normal::new(0.0, sigma_px.max(1e-300)).unwrap();
    let image = world
        .iter()
        .map(|p| {
            let f = cam.project(p).unwrap();
            if sigma_px > 0.0 {
                Point2::new(f.x + noise.sample(rng), f.y + noise.sample(rng))
            } else {
                f
            }
        })
        .collect();
    (cam, world, image)
}

pub fn subject(k: usize) -> SyntheticSubject {
    generate_subject(
        &format!("s{k:03}"),
        1000 + k as u64,
        &MorphologyParams::default(),
        &ConeTable::default_table(),
    )
    .unwrap()
}

pub fn case(s: &SyntheticSubject, looking: Looking, seed: u64) -> CaseBundle {
    render_case(
        &format!("{}_{seed}", s.subject_id),
        s,
        looking,
        &CameraParams::default(),
        seed,
    )
    .unwrap()
}

pub fn percentile(v: &mut [f64], q: f64) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let idx = ((v.len() as f64 - 1.0) * q).round() as usize;
    v[idx]
}

/// Exhaustive nearest-pixel matching with lowest-index tie breaks.
pub fn brute_force_match(skull: &[Pixel], face: &[Pixel]) -> Vec<CurveMatch> {
    let d2 = |a: Pixel, b: Pixel| ((a.u - b.u) as i64).pow(2) + ((a.v - b.v) as i64).pow(2);
    let nearest = |p: Pixel, set: &[Pixel]| {
        let mut best = 0;
        for (j, q) in set.iter().enumerate() {
            if d2(p, *q) < d2(p, set[best]) {
                best = j;
            }
        }
        best
    };
    let mut out = Vec::new();
    let mut used = vec![false; face.len()];
    for (i, &s) in skull.iter().enumerate() {
        let j = nearest(s, face);
        used[j] = true;
        out.push(CurveMatch {
            skull_index: i,
            face_index: j,
            s,
            p: face[j],
            d: (d2(s, face[j]) as f64).sqrt(),
        });
    }
    for (j, &p) in face.iter().enumerate() {
        if !used[j] {
            let i = nearest(p, skull);
            out.push(CurveMatch {
                skull_index: i,
                face_index: j,
                s: skull[i],
                p,
                d: (d2(skull[i], p) as f64).sqrt(),
            });
        }
    }
    out.sort_by_key(|m| m.skull_index);
    out
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3 {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(0.1..1.0),
    );
    rotation_about(&axis.normalize(), rng.random_range(-3.1..3.1))
}

pub fn solution(rotation: Matrix3, focal: f64, scd: f64, converged: bool) -> ProjectionSolution {
    ProjectionSolution {
        camera: Pinhole::new(rotation, Vector3::new(0.0, 0.0, scd), focal, 640, 480).unwrap(),
        scd_mm: scd,
        pose_angles_deg: PoseAngles {
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
            gimbal_lock: false,
        },
        reprojection_rms_px: 0.0,
        converged,
    }
}

pub fn random_intervals(rng: &mut ChaCha8Rng) -> AprioriIntervals {
    let fx_min = rng.random_range(200.0..3000.0);
    let fx_max = fx_min + rng.random_range(0.0..3000.0);
    let scd_min = rng.random_range(100.0..2000.0);
    AprioriIntervals {
        fx_min,
        fx_max,
        scd_min,
        scd_max: scd_min + rng.random_range(0.0..2000.0),
        beta_tol_deg: rng.random_range(0.0..40.0),
        reference_pose: random_rotation(rng),
        fx_hard_limit: fx_max + rng.random_range(1.0..4000.0),
        c_infinity: DEFAULT_C_INFINITY,
    }
}

/// Squared interval excess written out as a case analysis.
pub fn outside_sq(x: f64, lo: f64, hi: f64) -> f64 {
    if x < lo {
        (lo - x).powi(2)
    } else if x > hi {
        (x - hi).powi(2)
    } else {
        0.0
    }
}

pub fn camera_oracle(sol: &ProjectionSolution, ap: &AprioriIntervals) -> f64 {
    if !sol.converged || sol.focal() > ap.fx_hard_limit {
        return ap.c_infinity;
    }
    let rel = sol.camera.rotation.transpose() * ap.reference_pose;
    let beta = ((rel.trace() - 1.0) / 2.0)
        .clamp(-1.0, 1.0)
        .acos()
        .to_degrees();
    let beta_out = if beta > ap.beta_tol_deg {
        (beta - ap.beta_tol_deg).powi(2)
    } else {
        0.0
    };
    outside_sq(sol.focal(), ap.fx_min, ap.fx_max)
        + outside_sq(sol.scd_mm, ap.scd_min, ap.scd_max)
        + beta_out
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> BinaryMask {
    let mut m = BinaryMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            m.set(x, y, rng.random_bool(density));
        }
    }
    m
}

pub fn pll_oracle(m: &[CurveMatch], looking: Looking) -> f64 {
    let d: Vec<f64> = m.iter().map(|x| x.d).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let spread = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - d.iter().cloned().fold(f64::INFINITY, f64::min);
    let first = (d[0] - mean).abs();
    let last = (d[d.len() - 1] - mean).abs();
    let (c1, cn) = (first > 0.25 * mean, last > 0.25 * mean);
    let conv = if c1 && cn {
        2.0 * (first + last)
    } else if c1 {
        4.0 * first
    } else if cn {
        4.0 * last
    } else {
        0.0
    };
    let wrong = m
        .iter()
        .filter(|x| match looking {
            Looking::Frontal => x.s.v >= x.p.v,
            Looking::Left => x.s.u <= x.p.u,
            Looking::Right => x.s.u >= x.p.u,
        })
        .count();
    spread + conv + 1000.0 * wrong as f64
}

pub fn random_curve(rng: &mut ChaCha8Rng) -> PixelCurve {
    let n = rng.random_range(1..30);
    let (u0, v0) = (rng.random_range(-20..20), rng.random_range(-20..20));
    let mut pts = vec![Pixel::new(u0, v0)];
    for _ in 1..n {
        let last = *pts.last().unwrap();
        pts.push(Pixel::new(
            last.u + rng.random_range(-1..=2),
            last.v + rng.random_range(-1..=1),
        ));
    }
    PixelCurve::new(pts)
}
