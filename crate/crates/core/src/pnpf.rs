//! Camera pose and focal length from 3D-2D correspondences.
//!
//! A Hartley-normalized DLT gives the initial projection matrix; the focal
//! length and extrinsics are factored out of it and then refined by
//! Levenberg-Marquardt on `(rotation, translation, focal)` with an analytic
//! Jacobian. The principal point is fixed at the image centre.

use nalgebra::{Matrix3x4, Rotation3, SMatrix, SVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Matrix3, Pinhole, Point2, Point3, Vector3};

/// Minimum number of correspondences accepted by the solver.
pub const MIN_POINTS: usize = 6;

const COPLANAR_TOL: f64 = 1e-6;
const MAX_ITERATIONS: usize = 100;
/// Reprojection RMS above which alternative initializations are tried.
const FALLBACK_RMS_PX: f64 = 1.0;
/// Focal guesses for the fallback, as multiples of the larger image side.
const FALLBACK_FOCAL_FACTORS: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PnpfError {
    #[error("need at least {MIN_POINTS} correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("world points are coplanar or collinear")]
    DegenerateConfiguration,
    #[error("refinement did not reach a usable camera")]
    NoConvergence,
    #[error("{world} world points but {image} image points")]
    LengthMismatch { world: usize, image: usize },
    #[error("image size must be non-zero")]
    InvalidImageSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub landmark: String,
    pub world: Point3,
    pub image: Point2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub gimbal_lock: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSolution {
    pub camera: Pinhole,
    pub scd_mm: f64,
    /// Head pose relative to the camera, against [`frontal_head_frame`].
    pub pose_angles_deg: PoseAngles,
    pub reprojection_rms_px: f64,
    pub converged: bool,
}

impl ProjectionSolution {
    pub fn focal(&self) -> f64 {
        self.camera.focal
    }
}

/// Camera rotation that views the skull frame (+X right, +Y anterior,
/// +Z superior) straight from the front with the head upright.
pub fn frontal_head_frame() -> Matrix3 {
    Matrix3::new(-1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, -1.0, 0.0)
}

/// ZYX Tait-Bryan angles of `camera.rotation * head_frameᵀ`, in degrees.
pub fn camera_to_pose_angles(camera: &Pinhole, head_frame: &Matrix3) -> PoseAngles {
    rotation_to_zyx(&(camera.rotation * head_frame.transpose()))
}

pub(crate) fn rotation_to_zyx(r: &Matrix3) -> PoseAngles {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let gimbal_lock = (pitch.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-6_f64.to_radians();
    let (yaw, roll) = if gimbal_lock {
        ((-r[(0, 1)]).atan2(r[(1, 1)]), 0.0)
    } else {
        (r[(1, 0)].atan2(r[(0, 0)]), r[(2, 1)].atan2(r[(2, 2)]))
    };
    PoseAngles {
        yaw: yaw.to_degrees(),
        pitch: pitch.to_degrees(),
        roll: roll.to_degrees(),
        gimbal_lock,
    }
}

/// `Rz(yaw) * Ry(pitch) * Rx(roll)`, angles in degrees.
pub fn zyx_to_rotation(yaw: f64, pitch: f64, roll: f64) -> Matrix3 {
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw.to_radians());
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), pitch.to_radians());
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), roll.to_radians());
    (rz * ry * rx).into_inner()
}

pub fn solve_pnpf(
    corrs: &[Correspondence],
    width: u32,
    height: u32,
) -> Result<ProjectionSolution, PnpfError> {
    let world: Vec<Point3> = corrs.iter().map(|c| c.world).collect();
    let image: Vec<Point2> = corrs.iter().map(|c| c.image).collect();
    solve_pnpf_points(&world, &image, width, height)
}

/// Same as [`solve_pnpf`] on parallel slices.
pub fn solve_pnpf_points(
    world: &[Point3],
    image: &[Point2],
    width: u32,
    height: u32,
) -> Result<ProjectionSolution, PnpfError> {
    if world.len() != image.len() {
        return Err(PnpfError::LengthMismatch {
            world: world.len(),
            image: image.len(),
        });
    }
    if world.len() < MIN_POINTS {
        return Err(PnpfError::TooFewPoints(world.len()));
    }
    if width == 0 || height == 0 {
        return Err(PnpfError::InvalidImageSize);
    }
    let centroid =
        Point3::from(world.iter().map(|p| p.coords).sum::<Vector3>() / world.len() as f64);
    if is_degenerate(world, &centroid) {
        return Err(PnpfError::DegenerateConfiguration);
    }
    let cx = width as f64 / 2.0;
    let cy = height as f64 / 2.0;
    let centred: Vec<Point2> = image
        .iter()
        .map(|p| Point2::new(p.x - cx, p.y - cy))
        .collect();

    let mut best: Option<Refined> =
        dlt_initial(world, &centred).map(|init| refine(world, &centred, init));
    let acceptable = |r: &Option<Refined>| {
        r.as_ref()
            .is_some_and(|r| r.converged && (r.cost / world.len() as f64).sqrt() < FALLBACK_RMS_PX)
    };
    if !acceptable(&best) {
        // Near-affine views leave the linear focal estimate unreliable; restart
        // from scaled-orthographic poses over a spread of focal lengths.
        let size = width.max(height) as f64;
        for k in FALLBACK_FOCAL_FACTORS {
            let Some(init) = weak_perspective_initial(world, &centred, k * size) else {
                continue;
            };
            let r = refine(world, &centred, init);
            let better = match &best {
                None => true,
                Some(b) => (r.converged, -r.cost) > (b.converged, -b.cost),
            };
            if better {
                best = Some(r);
            }
        }
    }
    let refined = best.ok_or(PnpfError::NoConvergence)?;
    let State {
        rotation,
        translation,
        focal,
    } = refined.state;
    if !(focal > 0.0 && focal.is_finite() && translation.iter().all(|t| t.is_finite())) {
        return Err(PnpfError::NoConvergence);
    }
    if world
        .iter()
        .any(|p| (rotation * p.coords + translation).z <= 0.0)
    {
        return Err(PnpfError::NoConvergence);
    }
    let camera = Pinhole::new(rotation.into_inner(), translation, focal, width, height)
        .map_err(|_| PnpfError::NoConvergence)?;
    let scd_mm = (camera.center() - centroid).norm();
    let rms = (refined.cost / world.len() as f64).sqrt();
    Ok(ProjectionSolution {
        pose_angles_deg: camera_to_pose_angles(&camera, &frontal_head_frame()),
        camera,
        scd_mm,
        reprojection_rms_px: rms,
        converged: refined.converged,
    })
}

/// Relative thickness `sqrt(λmin / λmax)` of the point cloud below tolerance.
fn is_degenerate(world: &[Point3], centroid: &Point3) -> bool {
    let mut cov = Matrix3::zeros();
    for p in world {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov).eigenvalues;
    let max = eig.max();
    let min = eig.min().max(0.0);
    max <= 0.0 || (min / max).sqrt() < COPLANAR_TOL
}

#[derive(Debug, Clone, Copy)]
struct State {
    rotation: Rotation3<f64>,
    translation: Vector3,
    focal: f64,
}

/// Linear estimate of `P = λ K [R | t]` with `K = diag(f, f, 1)`.
fn dlt_initial(world: &[Point3], image: &[Point2]) -> Option<State> {
    let n = world.len() as f64;
    let c3 = world.iter().map(|p| p.coords).sum::<Vector3>() / n;
    let s3 = world.iter().map(|p| (p.coords - c3).norm()).sum::<f64>() / n;
    let c2 = image
        .iter()
        .map(|p| p.coords)
        .sum::<nalgebra::Vector2<f64>>()
        / n;
    let s2 = image.iter().map(|p| (p.coords - c2).norm()).sum::<f64>() / n;
    if !(s3 > 0.0 && s2 > 0.0) {
        return None;
    }
    let k3 = 3f64.sqrt() / s3;
    let k2 = 2f64.sqrt() / s2;

    // Normal equations AᵀA of the 2n x 12 DLT system.
    let mut ata = SMatrix::<f64, 12, 12>::zeros();
    for (p, q) in world.iter().zip(image) {
        let x = (p.coords - c3) * k3;
        let u = (q.coords - c2) * k2;
        let xh = [x.x, x.y, x.z, 1.0];
        let mut r1 = SVector::<f64, 12>::zeros();
        let mut r2 = SVector::<f64, 12>::zeros();
        for j in 0..4 {
            r1[j] = xh[j];
            r1[8 + j] = -u.x * xh[j];
            r2[4 + j] = xh[j];
            r2[8 + j] = -u.y * xh[j];
        }
        ata += r1 * r1.transpose() + r2 * r2.transpose();
    }
    let eig = SymmetricEigen::new(ata);
    let (imin, _) = eig.eigenvalues.argmin();
    let h = eig.eigenvectors.column(imin);
    let pn = Matrix3x4::from_row_slice(h.as_slice());

    // Undo normalization: P = T2⁻¹ Pn T3.
    let t3 = nalgebra::Matrix4::new(
        k3,
        0.0,
        0.0,
        -k3 * c3.x, //
        0.0,
        k3,
        0.0,
        -k3 * c3.y, //
        0.0,
        0.0,
        k3,
        -k3 * c3.z, //
        0.0,
        0.0,
        0.0,
        1.0,
    );
    let t2_inv = Matrix3::new(1.0 / k2, 0.0, c2.x, 0.0, 1.0 / k2, c2.y, 0.0, 0.0, 1.0);
    let p = t2_inv * pn * t3;

    let m = p.fixed_view::<3, 3>(0, 0);
    let n3 = m.row(2).norm();
    if n3 <= 0.0 {
        return None;
    }
    let focal = (m.row(0).norm() + m.row(1).norm()) / (2.0 * n3);
    if !(focal > 0.0 && focal.is_finite()) {
        return None;
    }
    let kinv = Matrix3::from_diagonal(&Vector3::new(1.0 / focal, 1.0 / focal, 1.0));
    let mut q = kinv * p;
    // Depth sign from the centroid.
    let depth = q
        .row(2)
        .dot(&nalgebra::RowVector4::new(c3.x, c3.y, c3.z, 1.0));
    if depth < 0.0 {
        q = -q;
    }
    let qm: Matrix3 = q.fixed_view::<3, 3>(0, 0).into_owned();
    let svd = qm.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let r = u * vt;
    if r.determinant() < 0.0 {
        return None;
    }
    let scale = svd.singular_values.sum() / 3.0;
    if scale <= 0.0 {
        return None;
    }
    let translation = q.column(3) / scale;
    let mut rotation = Rotation3::from_matrix_unchecked(r);
    rotation.renormalize();
    Some(State {
        rotation,
        translation,
        focal,
    })
}

/// Pose from a least-squares affine camera `u = A x + b`, placed at the depth
/// where `focal` reproduces the affine scale.
fn weak_perspective_initial(world: &[Point3], image: &[Point2], focal: f64) -> Option<State> {
    let n = world.len() as f64;
    let c3 = world.iter().map(|p| p.coords).sum::<Vector3>() / n;
    let c2 = image
        .iter()
        .map(|p| p.coords)
        .sum::<nalgebra::Vector2<f64>>()
        / n;
    let mut xtx = Matrix3::zeros();
    let mut xtu = nalgebra::Matrix3x2::<f64>::zeros();
    for (p, q) in world.iter().zip(image) {
        let x = p.coords - c3;
        let u = q.coords - c2;
        xtx += x * x.transpose();
        xtu += x * u.transpose();
    }
    let a = xtx.try_inverse()? * xtu;
    let (a1, a2) = (a.column(0).into_owned(), a.column(1).into_owned());
    let s = (a1.norm() + a2.norm()) / 2.0;
    if !(s > 0.0 && s.is_finite()) {
        return None;
    }
    let r1 = a1.try_normalize(1e-300)?;
    let r2 = (a2 - r1 * r1.dot(&a2)).try_normalize(1e-300)?;
    let r3 = r1.cross(&r2);
    let r = Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()]);
    let mut rotation = Rotation3::from_matrix_unchecked(r);
    rotation.renormalize();
    let depth = focal / s;
    let translation = Vector3::new(c2.x / s, c2.y / s, depth) - rotation * c3;
    Some(State {
        rotation,
        translation,
        focal,
    })
}

struct Refined {
    state: State,
    cost: f64,
    converged: bool,
}

/// Sum of squared residuals; `None` when a point falls behind the camera.
fn cost(world: &[Point3], image: &[Point2], s: &State) -> Option<f64> {
    let mut c = 0.0;
    for (p, q) in world.iter().zip(image) {
        let x = s.rotation * p.coords + s.translation;
        if x.z <= 0.0 {
            return None;
        }
        let du = s.focal * x.x / x.z - q.x;
        let dv = s.focal * x.y / x.z - q.y;
        c += du * du + dv * dv;
    }
    Some(c)
}

fn normal_equations(
    world: &[Point3],
    image: &[Point2],
    s: &State,
) -> (SMatrix<f64, 7, 7>, SVector<f64, 7>) {
    let mut jtj = SMatrix::<f64, 7, 7>::zeros();
    let mut jtr = SVector::<f64, 7>::zeros();
    let f = s.focal;
    for (p, q) in world.iter().zip(image) {
        let rx = s.rotation * p.coords;
        let x = rx + s.translation;
        let iz = 1.0 / x.z;
        let (a, b) = (x.x * iz, x.y * iz);
        let res = [f * a - q.x, f * b - q.y];
        // d(u, v)/dXc
        let du = Vector3::new(f * iz, 0.0, -f * a * iz);
        let dv = Vector3::new(0.0, f * iz, -f * b * iz);
        // dXc/dω = -[RX]×, so (dXc/dω)ᵀ g = RX × g.
        let rows = [(du, a), (dv, b)];
        for (k, (g, df)) in rows.iter().enumerate() {
            let jw = rx.cross(g);
            let j = SVector::<f64, 7>::from_column_slice(&[jw.x, jw.y, jw.z, g.x, g.y, g.z, *df]);
            jtj += j * j.transpose();
            jtr += j * res[k];
        }
    }
    (jtj, jtr)
}

fn refine(world: &[Point3], image: &[Point2], init: State) -> Refined {
    let mut state = init;
    let Some(mut current) = cost(world, image, &state) else {
        return Refined {
            state,
            cost: f64::INFINITY,
            converged: false,
        };
    };
    let mut mu = 1e-3;
    let mut converged = false;
    let scale = world.len() as f64;
    for _ in 0..MAX_ITERATIONS {
        if current / scale < 1e-24 {
            converged = true;
            break;
        }
        let (jtj, jtr) = normal_equations(world, image, &state);
        if jtr.amax() < 1e-12 * (1.0 + current) {
            converged = true;
            break;
        }
        let mut improved = false;
        while mu < 1e16 {
            let mut a = jtj;
            for i in 0..7 {
                a[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let delta = -chol.solve(&jtr);
            let dw = Vector3::new(delta[0], delta[1], delta[2]);
            let trial = State {
                rotation: Rotation3::new(dw) * state.rotation,
                translation: state.translation + Vector3::new(delta[3], delta[4], delta[5]),
                focal: state.focal + delta[6],
            };
            let trial_cost = if trial.focal > 0.0 {
                cost(world, image, &trial)
            } else {
                None
            };
            match trial_cost {
                Some(c) if c < current => {
                    let step_small = dw.norm() < 1e-14
                        && delta.rows(3, 3).norm() < 1e-12 * (1.0 + state.translation.norm())
                        && delta[6].abs() < 1e-12 * state.focal;
                    let rel = (current - c) / current.max(f64::MIN_POSITIVE);
                    state = trial;
                    current = c;
                    mu = (mu * 0.3).max(1e-12);
                    improved = true;
                    if rel < 1e-12 || step_small {
                        converged = true;
                    }
                    break;
                }
                _ => mu *= 10.0,
            }
        }
        if !improved {
            // No descent direction left: a (local) minimum to working precision.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    state.rotation.renormalize();
    let current = cost(world, image, &state).unwrap_or(f64::INFINITY);
    Refined {
        state,
        cost: current,
        converged: converged && current.is_finite(),
    }
}

/// Residual vector of a camera over correspondences, `[du_0, dv_0, ...]`.
pub fn reprojection_residuals(camera: &Pinhole, world: &[Point3], image: &[Point2]) -> Vec<f64> {
    let pp = camera.principal_point();
    let mut out = Vec::with_capacity(2 * world.len());
    for (p, q) in world.iter().zip(image) {
        let x = camera.to_camera(p);
        out.push(pp.x + camera.focal * x.x / x.z - q.x);
        out.push(pp.y + camera.focal * x.y / x.z - q.y);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_about, rotation_angle_deg};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(rng: &mut ChaCha8Rng, n: usize) -> (Pinhole, Vec<Point3>, Vec<Point2>) {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let r = rotation_about(&axis, rng.random_range(0.0..3.0));
        let t = Vector3::new(
            rng.random_range(-50.0..50.0),
            rng.random_range(-50.0..50.0),
            rng.random_range(600.0..3000.0),
        );
        let cam = Pinhole::new(r, t, rng.random_range(800.0..3000.0), 1000, 800).unwrap();
        let pts: Vec<Point3> = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-80.0..80.0),
                    rng.random_range(-80.0..80.0),
                    rng.random_range(-80.0..80.0),
                )
            })
            .collect();
        let img = pts.iter().map(|p| cam.project(p).unwrap()).collect();
        (cam, pts, img)
    }

    #[test]
    fn exact_recovery_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let (cam, pts, img) = random_case(&mut rng, 10);
            let sol = solve_pnpf_points(&pts, &img, 1000, 800).unwrap();
            assert!(sol.converged);
            assert!(
                sol.reprojection_rms_px < 1e-6,
                "rms {}",
                sol.reprojection_rms_px
            );
            assert!((sol.camera.focal - cam.focal).abs() / cam.focal < 1e-6);
            assert!(rotation_angle_deg(&sol.camera.rotation, &cam.rotation).unwrap() < 1e-4);
        }
    }

    #[test]
    fn coplanar_points_are_degenerate() {
        let pts: Vec<Point3> = (0..6)
            .map(|i| Point3::new(i as f64, (i * i) as f64, 0.0))
            .collect();
        let img: Vec<Point2> = (0..6)
            .map(|i| Point2::new(i as f64, 2.0 * i as f64))
            .collect();
        assert_eq!(
            solve_pnpf_points(&pts, &img, 100, 100),
            Err(PnpfError::DegenerateConfiguration)
        );
        assert_eq!(
            solve_pnpf_points(&pts[..5], &img[..5], 100, 100),
            Err(PnpfError::TooFewPoints(5))
        );
    }

    #[test]
    fn pose_angles() {
        let cam = Pinhole::new(
            frontal_head_frame(),
            Vector3::new(0.0, 0.0, 1000.0),
            1000.0,
            10,
            10,
        )
        .unwrap();
        let a = camera_to_pose_angles(&cam, &frontal_head_frame());
        assert!(a.yaw.abs() < 1e-12 && a.pitch.abs() < 1e-12 && a.roll.abs() < 1e-12);
        let yawed = Pinhole {
            rotation: zyx_to_rotation(30.0, 0.0, 0.0) * frontal_head_frame(),
            ..cam.clone()
        };
        let a = camera_to_pose_angles(&yawed, &frontal_head_frame());
        assert!((a.yaw - 30.0).abs() < 1e-9 && a.pitch.abs() < 1e-9 && a.roll.abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let (y, p, r) = (
                rng.random_range(-179.0..179.0),
                rng.random_range(-89.0..89.0),
                rng.random_range(-179.0..179.0),
            );
            let m = zyx_to_rotation(y, p, r);
            let a = rotation_to_zyx(&m);
            assert!((zyx_to_rotation(a.yaw, a.pitch, a.roll) - m).amax() < 1e-9);
            assert!(!a.gimbal_lock);
        }
        let lock = rotation_to_zyx(&zyx_to_rotation(20.0, 90.0, 0.0));
        assert!(lock.gimbal_lock);
    }
}
