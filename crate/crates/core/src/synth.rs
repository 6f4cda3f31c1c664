//! Procedural subjects and rendered identification cases with exact ground
//! truth.
//!
//! A skull is a star-shaped surface around the origin: the smooth maximum of
//! a cranial and a facial ellipsoid, scaled per axis and given a mild
//! left/right asymmetry. The face is the same surface pushed outward along
//! each direction by a soft-tissue thickness field interpolated (inverse
//! distance weighting) through the ground-truth facial landmarks and a set of
//! background nodes. Skull and face share one sphere triangulation with the
//! face radius strictly larger at every vertex, so the face polyhedron
//! contains the skull polyhedron and every projected skull pixel is covered
//! by the face.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cones::{decode_cone, encode_cone, ConeError, ConeSpec, ConeTable, Genotype};
use crate::contour::{region_curve, segment_region, ContourError, Looking, PixelCurve, Surface};
use crate::fitness::AprioriIntervals;
use crate::geometry::{
    rasterize_silhouette, rotation_about, BinaryMask, GeometryError, Matrix3, Pinhole, Point2,
    Point3, TriMesh, Vector3,
};
use crate::pnpf::{frontal_head_frame, zyx_to_rotation, MIN_POINTS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid morphology: {0}")]
    InvalidMorphology(String),
    #[error("invalid camera parameters: {0}")]
    InvalidCamera(String),
    #[error("only {0} landmarks visible after repeated camera draws")]
    TooFewVisible(usize),
    #[error(transparent)]
    Cone(#[from] ConeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Contour(#[from] ContourError),
}

/// Landmarks used only to delimit contour regions, as `(name, azimuth,
/// elevation)` in degrees. Azimuth is measured from anterior (+Y) towards the
/// subject's right (+X).
const SKULL_AUXILIARY: [(&str, f64, f64); 3] = [
    ("infradentale", 0.0, -42.0),
    ("mental_foramen_l", -22.0, -52.0),
    ("mental_foramen_r", 22.0, -52.0),
];
const FACE_AUXILIARY: [(&str, f64, f64); 3] = [
    ("stomion", 0.0, -38.0),
    ("cheilion_l", -20.0, -36.0),
    ("cheilion_r", 20.0, -36.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MorphologyParams {
    /// Range of the uniform global scale factor.
    pub global_scale: (f64, f64),
    /// Per-axis scale factors are `1 ± axis_scale_jitter`.
    pub axis_scale_jitter: f64,
    /// Maximum left/right asymmetry factor; 0 gives mirror-symmetric skulls.
    pub asymmetry: f64,
    /// Landmark direction jitter around the template, in degrees.
    pub landmark_jitter_deg: f64,
    /// Elevation rings and azimuth steps of the sphere triangulation.
    pub rings: usize,
    pub segments: usize,
    /// Soft-tissue thickness away from the landmarks, in mm.
    pub background_thickness_mm: f64,
}

impl Default for MorphologyParams {
    fn default() -> Self {
        Self {
            global_scale: (0.9, 1.1),
            axis_scale_jitter: 0.06,
            asymmetry: 0.03,
            landmark_jitter_deg: 3.0,
            rings: 30,
            segments: 60,
            background_thickness_mm: 5.0,
        }
    }
}

impl MorphologyParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |s: &str| Err(SynthError::InvalidMorphology(s.into()));
        if !(self.global_scale.0 > 0.0 && self.global_scale.0 <= self.global_scale.1) {
            return bad("global scale range must be positive and ordered");
        }
        if !(0.0..0.5).contains(&self.axis_scale_jitter) {
            return bad("axis scale jitter must lie in [0, 0.5)");
        }
        if !(0.0..0.3).contains(&self.asymmetry) {
            return bad("asymmetry must lie in [0, 0.3)");
        }
        if !(0.0..=10.0).contains(&self.landmark_jitter_deg) {
            return bad("landmark jitter must lie in [0, 10] degrees");
        }
        if self.rings < 4 || self.segments < 8 {
            return bad("triangulation too coarse");
        }
        if self.background_thickness_mm <= 0.0 {
            return bad("background thickness must be positive");
        }
        Ok(())
    }
}

/// Record of an axis perturbation applied to a subject's cone priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionPerturbation {
    pub max_angle_deg: f64,
    pub seed: u64,
    /// Rotation applied to each cone axis, in degrees.
    pub angles_deg: BTreeMap<String, f64>,
    /// Landmarks whose ground-truth vector now lies outside the cone.
    pub truth_outside_cone: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSubject {
    pub subject_id: String,
    pub skull_mesh: TriMesh,
    pub face_mesh: TriMesh,
    /// Cranial landmarks, including the region-delimiting auxiliaries.
    pub cranial_landmarks: BTreeMap<String, Point3>,
    /// Facial landmarks keyed by facial name, including auxiliaries.
    pub face_landmarks: BTreeMap<String, Point3>,
    /// Ground-truth soft-tissue vectors keyed by cranial name.
    pub soft_tissue_vectors: BTreeMap<String, Vector3>,
    /// Cone priors in genotype order.
    pub cone_specs: Vec<ConeSpec>,
    /// Cranial name to facial name.
    pub facial_names: BTreeMap<String, String>,
    /// Direction vectors a fixed-vector method would use, keyed by cranial
    /// name: the ground-truth directions, rotated along with the cone axes
    /// when perturbed.
    pub prior_directions: BTreeMap<String, Vector3>,
    pub frankfurt_normal: Vector3,
    pub direction_perturbation: Option<DirectionPerturbation>,
}

impl SyntheticSubject {
    pub fn landmark_order(&self) -> Arc<[String]> {
        self.cone_specs.iter().map(|c| c.landmark.clone()).collect()
    }

    /// `F_i = C_i + ST_i` keyed by cranial name.
    pub fn facial_points(&self) -> BTreeMap<String, Point3> {
        self.soft_tissue_vectors
            .iter()
            .map(|(k, st)| (k.clone(), self.cranial_landmarks[k] + st))
            .collect()
    }

    /// Genotype reproducing the ground-truth vectors under the current cones.
    pub fn ground_truth_genotype(&self) -> Result<Genotype, ConeError> {
        let mut values = Vec::with_capacity(3 * self.cone_specs.len());
        for spec in &self.cone_specs {
            let st = self
                .soft_tissue_vectors
                .get(&spec.landmark)
                .ok_or_else(|| ConeError::MissingSpec(spec.landmark.clone()))?;
            values.extend_from_slice(&encode_cone(spec, st)?);
        }
        Genotype::new(values, self.landmark_order())
    }
}

fn direction(az_deg: f64, el_deg: f64) -> Vector3 {
    let (a, e) = (az_deg.to_radians(), el_deg.to_radians());
    Vector3::new(e.cos() * a.sin(), e.cos() * a.cos(), e.sin())
}

fn az_el(d: &Vector3) -> (f64, f64) {
    (
        d.x.atan2(d.y).to_degrees(),
        d.z.clamp(-1.0, 1.0).asin().to_degrees(),
    )
}

/// Distance from the origin to an ellipsoid along unit direction `d`; the
/// origin must lie inside the ellipsoid.
fn ellipsoid_radius(d: &Vector3, centre: &Vector3, semi: &Vector3) -> f64 {
    let a = d.component_div(semi).norm_squared();
    let b = -2.0
        * d.component_mul(centre)
            .component_div(&semi.component_mul(semi))
            .sum();
    let c = centre.component_div(semi).norm_squared() - 1.0;
    (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)
}

/// Radial skull shape of one subject.
#[derive(Debug, Clone)]
struct SkullShape {
    scale: Vector3,
    asymmetry: f64,
}

impl SkullShape {
    const CRANIUM_CENTRE: [f64; 3] = [0.0, -8.0, 20.0];
    const CRANIUM_SEMI: [f64; 3] = [70.0, 92.0, 76.0];
    const FACE_CENTRE: [f64; 3] = [0.0, 28.0, -42.0];
    const FACE_SEMI: [f64; 3] = [48.0, 52.0, 68.0];
    const BLEND: f64 = 8.0;

    /// Radius of the unscaled template along unit `d`.
    fn template_radius(&self, d: &Vector3) -> f64 {
        let r1 = ellipsoid_radius(d, &Self::CRANIUM_CENTRE.into(), &Self::CRANIUM_SEMI.into());
        let r2 = ellipsoid_radius(d, &Self::FACE_CENTRE.into(), &Self::FACE_SEMI.into());
        (r1.powf(Self::BLEND) + r2.powf(Self::BLEND)).powf(1.0 / Self::BLEND)
            * (1.0 + self.asymmetry * d.x)
    }

    /// Radius of the scaled skull along unit `d`.
    fn radius(&self, d: &Vector3) -> f64 {
        let pre = d.component_div(&self.scale).normalize();
        self.template_radius(&pre) * pre.component_mul(&self.scale).norm()
    }
}

/// Inverse-distance-weighted field on the unit sphere.
#[derive(Debug, Clone)]
struct ThicknessField {
    nodes: Vec<(Vector3, f64)>,
}

impl ThicknessField {
    const POWER: i32 = 3;

    fn at(&self, d: &Vector3) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (n, t) in &self.nodes {
            let dist2 = (d - n).norm_squared();
            if dist2 < 1e-24 {
                return *t;
            }
            let w = 1.0 / dist2.powf(Self::POWER as f64 / 2.0);
            num += w * t;
            den += w;
        }
        num / den
    }
}

fn fibonacci_sphere(n: usize) -> Vec<Vector3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Unit directions and outward faces of a UV sphere with poles on ±Z.
fn sphere_grid(rings: usize, segments: usize) -> (Vec<Vector3>, Vec<[u32; 3]>) {
    let mut dirs = vec![Vector3::z()];
    for i in 1..=rings {
        let theta = PI * i as f64 / (rings + 1) as f64;
        for j in 0..segments {
            let phi = 2.0 * PI * j as f64 / segments as f64;
            dirs.push(Vector3::new(
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                theta.cos(),
            ));
        }
    }
    dirs.push(-Vector3::z());
    let south = (dirs.len() - 1) as u32;
    let idx = |i: usize, j: usize| (1 + (i - 1) * segments + (j % segments)) as u32;
    let mut faces = Vec::new();
    for j in 0..segments {
        faces.push([0, idx(1, j), idx(1, j + 1)]);
        faces.push([south, idx(rings, j + 1), idx(rings, j)]);
    }
    for i in 1..rings {
        for j in 0..segments {
            let (a, b, c, d) = (idx(i, j), idx(i, j + 1), idx(i + 1, j + 1), idx(i + 1, j));
            faces.push([a, d, c]);
            faces.push([a, c, b]);
        }
    }
    (dirs, faces)
}

fn radial_mesh(
    dirs: &[Vector3],
    faces: &[[u32; 3]],
    radius: impl Fn(&Vector3) -> f64,
) -> Result<TriMesh, GeometryError> {
    let verts = dirs.iter().map(|d| Point3::from(d * radius(d))).collect();
    let mesh = TriMesh::new(verts, faces.to_vec())?;
    if mesh.signed_volume() < 0.0 {
        let flipped = mesh.faces().iter().map(|f| [f[0], f[2], f[1]]).collect();
        return TriMesh::new(mesh.vertices().to_vec(), flipped);
    }
    Ok(mesh)
}

/// Builds one procedural subject. Deterministic in `seed`.
pub fn generate_subject(
    subject_id: &str,
    seed: u64,
    params: &MorphologyParams,
    table: &ConeTable,
) -> Result<SyntheticSubject, SynthError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let global = rng.random_range(params.global_scale.0..=params.global_scale.1);
    let mut jitter = || 1.0 + params.axis_scale_jitter * (2.0 * rng.random::<f64>() - 1.0);
    let scale = Vector3::new(jitter(), jitter(), jitter()) * global;
    let asymmetry = params.asymmetry * (2.0 * rng.random::<f64>() - 1.0);
    let shape = SkullShape { scale, asymmetry };

    // Landmark directions: template plus jitter, mirrored across the
    // midline for bilateral pairs; the right side picks up extra jitter in
    // proportion to the asymmetry.
    let mut dirs: BTreeMap<String, Vector3> = BTreeMap::new();
    let jit = params.landmark_jitter_deg;
    let place = |name: &str,
                 template: Vector3,
                 rng: &mut ChaCha8Rng,
                 dirs: &mut BTreeMap<String, Vector3>| {
        let (az, el) = az_el(&template);
        let (daz, del) = (
            jit * (2.0 * rng.random::<f64>() - 1.0),
            jit * (2.0 * rng.random::<f64>() - 1.0),
        );
        if let Some(base) = name.strip_suffix("_l") {
            let (xa, xe) = (rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            let k = 20.0 * asymmetry.abs();
            dirs.insert(name.to_string(), direction(az - daz, el + del));
            dirs.insert(
                format!("{base}_r"),
                direction(-az + daz + k * xa, el + del + k * xe),
            );
        } else if name.ends_with("_r") {
            // Placed together with its left partner.
        } else {
            let az = if template.x.abs() < 1e-12 {
                az
            } else {
                az + daz
            };
            dirs.insert(name.to_string(), direction(az, el + del));
        }
    };
    for c in &table.cones {
        place(&c.landmark, Vector3::from(c.axis), &mut rng, &mut dirs);
    }
    for (name, az, el) in SKULL_AUXILIARY {
        place(name, direction(az, el), &mut rng, &mut dirs);
    }
    for c in &table.cones {
        if !dirs.contains_key(&c.landmark) {
            return Err(SynthError::InvalidMorphology(format!(
                "{} has no left partner",
                c.landmark
            )));
        }
    }

    let cranial: BTreeMap<String, Point3> = dirs
        .iter()
        .map(|(k, d)| (k.clone(), Point3::from(d * shape.radius(d))))
        .collect();
    let specs = table.specs_for(&cranial)?;

    // Ground-truth vectors: axis tilted by at most half the aperture, depth
    // kept 5% away from either bound, and the facial landmark at least 1 mm
    // outside the skull along its own direction.
    let mut st_vectors = BTreeMap::new();
    let mut nodes = Vec::new();
    for spec in &specs {
        let mut accepted = None;
        for _ in 0..200 {
            let p1 = rng.random_range(0.05..=0.95);
            let p2 = rng.random_range(0.0..=0.5);
            let p3 = rng.random::<f64>();
            let st = decode_cone(spec, p1, p2, p3)?;
            let f = spec.apex + st;
            let d = f.coords.normalize();
            let t = f.coords.norm() - shape.radius(&d);
            if t >= 1.0 {
                accepted = Some((st, d, t));
                break;
            }
        }
        let (st, d, t) = accepted.ok_or_else(|| {
            SynthError::InvalidMorphology(format!(
                "no outward soft-tissue vector for {}",
                spec.landmark
            ))
        })?;
        st_vectors.insert(spec.landmark.clone(), st);
        nodes.push((d, t));
    }
    let landmark_nodes: Vec<Vector3> = nodes.iter().map(|(d, _)| *d).collect();
    for d in fibonacci_sphere(96) {
        if landmark_nodes
            .iter()
            .all(|n| n.dot(&d) < 10f64.to_radians().cos())
        {
            nodes.push((d, params.background_thickness_mm));
        }
    }
    let field = ThicknessField { nodes };
    let face_radius = |d: &Vector3| shape.radius(d) + field.at(d);

    let (grid, faces) = sphere_grid(params.rings, params.segments);
    let skull_mesh = radial_mesh(&grid, &faces, |d| shape.radius(d))?;
    let face_mesh = radial_mesh(&grid, &faces, face_radius)?;

    let mut face_landmarks = BTreeMap::new();
    let mut facial_names = BTreeMap::new();
    for spec in &specs {
        let prior = table.prior(&spec.landmark).expect("spec built from table");
        face_landmarks.insert(prior.facial.clone(), spec.apex + st_vectors[&spec.landmark]);
        facial_names.insert(spec.landmark.clone(), prior.facial.clone());
    }
    let mut aux_dirs = BTreeMap::new();
    for (name, az, el) in FACE_AUXILIARY {
        place(name, direction(az, el), &mut rng, &mut aux_dirs);
    }
    for (k, d) in aux_dirs {
        face_landmarks.insert(k, Point3::from(d * face_radius(&d)));
    }
    let prior_directions = st_vectors
        .iter()
        .map(|(k, v)| (k.clone(), v.normalize()))
        .collect();

    Ok(SyntheticSubject {
        subject_id: subject_id.to_string(),
        skull_mesh,
        face_mesh,
        cranial_landmarks: cranial,
        face_landmarks,
        soft_tissue_vectors: st_vectors,
        cone_specs: specs,
        facial_names,
        prior_directions,
        frankfurt_normal: Vector3::z(),
        direction_perturbation: None,
    })
}

/// Rotates every cone axis (and the matching prior direction) by an angle
/// uniform in `[0, max_angle_deg]` about a random axis perpendicular to it.
/// Ground-truth vectors are left untouched.
pub fn perturb_st_directions(
    subject: &SyntheticSubject,
    max_angle_deg: f64,
    seed: u64,
) -> SyntheticSubject {
    let mut out = subject.clone();
    if max_angle_deg <= 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut angles = BTreeMap::new();
    let mut outside = Vec::new();
    for spec in &mut out.cone_specs {
        let angle = rng.random_range(0.0..=max_angle_deg);
        let phi = rng.random_range(0.0..2.0 * PI);
        let (u, w) = spec.azimuth_basis();
        let perp = u * phi.cos() + w * phi.sin();
        let rot = rotation_about(&perp, angle.to_radians());
        spec.axis = (rot * spec.axis).normalize();
        if let Some(d) = out.prior_directions.get_mut(&spec.landmark) {
            *d = (rot * *d).normalize();
        }
        angles.insert(spec.landmark.clone(), angle);
        if encode_cone(spec, &out.soft_tissue_vectors[&spec.landmark]).is_err() {
            outside.push(spec.landmark.clone());
        }
    }
    out.direction_perturbation = Some(DirectionPerturbation {
        max_angle_deg,
        seed,
        angles_deg: angles,
        truth_outside_cone: outside,
    });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraParams {
    pub focal_px: (f64, f64),
    pub scd_mm: (f64, f64),
    /// Uniform yaw/pitch/roll jitter about the canonical view, in degrees.
    pub jitter_deg: f64,
    /// Accepted projected face height; draws outside are rejected.
    pub face_height_px: (f64, f64),
    pub margin_px: (u32, u32),
    /// Relative half-widths of the a-priori focal and distance intervals.
    pub focal_tolerance: f64,
    pub scd_tolerance: f64,
    pub beta_tol_deg: f64,
    pub max_attempts: usize,
}

impl Default for CameraParams {
    fn default() -> Self {
        Self {
            focal_px: (800.0, 3000.0),
            scd_mm: (600.0, 3000.0),
            jitter_deg: 10.0,
            face_height_px: (160.0, 320.0),
            margin_px: (10, 40),
            focal_tolerance: 0.05,
            scd_tolerance: 0.10,
            beta_tol_deg: 10.0,
            max_attempts: 500,
        }
    }
}

impl CameraParams {
    fn validate(&self) -> Result<(), SynthError> {
        let ok = |r: (f64, f64)| r.0 > 0.0 && r.0 <= r.1;
        if !(ok(self.focal_px) && ok(self.scd_mm) && ok(self.face_height_px)) {
            return Err(SynthError::InvalidCamera(
                "ranges must be positive and ordered".into(),
            ));
        }
        if self.margin_px.0 > self.margin_px.1 || self.jitter_deg < 0.0 || self.max_attempts == 0 {
            return Err(SynthError::InvalidCamera(
                "bad margin, jitter or attempt count".into(),
            ));
        }
        Ok(())
    }
}

/// Landmark noise applied to a bundle.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub landmark_magnitude_px: f64,
    pub landmark_seed: Option<u64>,
    /// `E_i` per visible landmark, keyed by cranial name.
    pub landmark_offsets: BTreeMap<String, [f64; 2]>,
}

/// One photograph of one subject plus everything known about it.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseBundle {
    pub case_id: String,
    pub subject_id: String,
    pub looking: Looking,
    pub camera: Pinhole,
    /// Observed 2D landmarks keyed by cranial name.
    pub landmarks_2d: BTreeMap<String, Point2>,
    /// Exact projections of the ground-truth facial landmarks.
    pub ideal_2d: BTreeMap<String, Point2>,
    pub visibility: BTreeMap<String, bool>,
    pub face_mask: Option<BinaryMask>,
    pub facial_curve: Option<PixelCurve>,
    /// Ground-truth facial landmarks keyed by cranial name.
    pub ground_truth_facial: BTreeMap<String, Point3>,
    pub ground_truth_genotype: Genotype,
    pub apriori: AprioriIntervals,
    pub noise: NoiseRecord,
}

impl CaseBundle {
    pub fn width(&self) -> u32 {
        self.camera.width
    }

    pub fn height(&self) -> u32 {
        self.camera.height
    }

    pub fn visible_count(&self) -> usize {
        self.visibility.values().filter(|v| **v).count()
    }

    /// Image rows of the observed glabella and metopion, bounding the
    /// forehead curve.
    pub fn forehead_span(&self) -> Option<(f64, f64)> {
        Some((
            self.landmarks_2d.get("glabella")?.y,
            self.landmarks_2d.get("metopion")?.y,
        ))
    }
}

/// Canonical camera rotation for a view, before jitter.
pub fn canonical_rotation(looking: Looking) -> Matrix3 {
    match looking {
        Looking::Frontal => frontal_head_frame(),
        // Camera on the subject's left (-X) looking towards +X.
        Looking::Left => Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
        // Camera on the subject's right (+X) looking towards -X.
        Looking::Right => Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, -1.0, -1.0, 0.0, 0.0),
    }
}

fn face_normal(subject: &SyntheticSubject, p: &Point3) -> Vector3 {
    // Area-weighted normal of face triangles near the point.
    let mut n = Vector3::zeros();
    for f in subject.face_mesh.faces() {
        let [a, b, c] = [0, 1, 2].map(|k| subject.face_mesh.vertices()[f[k] as usize]);
        let centre = Point3::from((a.coords + b.coords + c.coords) / 3.0);
        let d2 = (centre - p).norm_squared();
        if d2 < 15.0 * 15.0 {
            let w = (-d2 / (2.0 * 6.0 * 6.0)).exp();
            n += (b - a).cross(&(c - a)) * w;
        }
    }
    n.try_normalize(1e-12)
        .unwrap_or_else(|| p.coords.normalize())
}

fn ray_hits_mesh(mesh: &TriMesh, origin: &Point3, dir: &Vector3, t_min: f64, t_max: f64) -> bool {
    mesh.faces().iter().any(|f| {
        let [a, b, c] = [0, 1, 2].map(|k| mesh.vertices()[f[k] as usize]);
        let (e1, e2) = (b - a, c - a);
        let pv = dir.cross(&e2);
        let det = e1.dot(&pv);
        if det.abs() < 1e-12 {
            return false;
        }
        let inv = 1.0 / det;
        let tv = origin - a;
        let u = tv.dot(&pv) * inv;
        if !(0.0..=1.0).contains(&u) {
            return false;
        }
        let qv = tv.cross(&e1);
        let v = dir.dot(&qv) * inv;
        if v < 0.0 || u + v > 1.0 {
            return false;
        }
        let t = e2.dot(&qv) * inv;
        t > t_min && t < t_max
    })
}

/// Minimum cosine between the surface normal and the direction to the
/// camera for a landmark to count as facing it.
const FACING_COS: f64 = -0.25;
/// Occluder hits closer than this to the landmark are ignored, in mm.
const SELF_HIT_MM: f64 = 2.0;

/// Visibility of each facial landmark (keyed by cranial name) from a camera.
pub fn landmark_visibility(subject: &SyntheticSubject, camera: &Pinhole) -> BTreeMap<String, bool> {
    let centre = camera.center();
    subject
        .facial_points()
        .into_iter()
        .map(|(k, f)| {
            let to_cam = centre - f;
            let dist = to_cam.norm();
            let dir = to_cam / dist;
            let facing = face_normal(subject, &f).dot(&dir) > FACING_COS;
            let visible = facing && !ray_hits_mesh(&subject.face_mesh, &f, &dir, SELF_HIT_MM, dist);
            (k, visible)
        })
        .collect()
}

/// Renders one view of a subject. Deterministic in `seed`.
pub fn render_case(
    case_id: &str,
    subject: &SyntheticSubject,
    looking: Looking,
    params: &CameraParams,
    seed: u64,
) -> Result<CaseBundle, SynthError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let facial = subject.facial_points();
    let face_height = {
        let zs = subject.face_mesh.vertices().iter().map(|v| v.z);
        let (lo, hi) = zs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), z| {
            (a.min(z), b.max(z))
        });
        hi - lo
    };
    let mut best_visible = 0;
    for _ in 0..params.max_attempts {
        let focal = rng.random_range(params.focal_px.0..=params.focal_px.1);
        let scd = rng.random_range(params.scd_mm.0..=params.scd_mm.1);
        let j = params.jitter_deg;
        let (yaw, pitch, roll) = (
            rng.random_range(-j..=j),
            rng.random_range(-j..=j),
            rng.random_range(-j..=j),
        );
        let margin = rng.random_range(params.margin_px.0..=params.margin_px.1) as f64;
        let height_px = focal * face_height / scd;
        if height_px < params.face_height_px.0 || height_px > params.face_height_px.1 {
            continue;
        }
        let rotation = zyx_to_rotation(yaw, pitch, roll) * canonical_rotation(looking);
        // Optical axis through the centroid of the facial landmarks.
        let centroid =
            Point3::from(facial.values().map(|p| p.coords).sum::<Vector3>() / facial.len() as f64);
        let forward = rotation.row(2).transpose();
        let eye = centroid - forward * scd;
        let translation = -(rotation * eye.coords);
        // Symmetric image around the principal point that holds the face.
        let probe = Pinhole::new(rotation, translation, focal, 2, 2)?;
        let mut half = nalgebra::Vector2::new(0.0f64, 0.0f64);
        for v in subject.face_mesh.vertices() {
            let p = probe.project(v)?;
            half.x = half.x.max((p.x - 1.0).abs());
            half.y = half.y.max((p.y - 1.0).abs());
        }
        let width = (2.0 * (half.x + margin)).ceil() as u32;
        let height = (2.0 * (half.y + margin)).ceil() as u32;
        let camera = Pinhole::new(rotation, translation, focal, width, height)?;

        let visibility = landmark_visibility(subject, &camera);
        let visible: Vec<&String> = visibility
            .iter()
            .filter(|(_, v)| **v)
            .map(|(k, _)| k)
            .collect();
        best_visible = best_visible.max(visible.len());
        if visible.len() < MIN_POINTS {
            continue;
        }
        let ideal: BTreeMap<String, Point2> = facial
            .iter()
            .map(|(k, f)| Ok((k.clone(), camera.project(f)?)))
            .collect::<Result<_, GeometryError>>()?;

        let face_mask = rasterize_silhouette(&subject.face_mesh, &camera);
        let region = segment_region(
            &subject.face_mesh,
            looking.region(),
            Surface::Face,
            &subject.face_landmarks,
            &subject.frankfurt_normal,
        )?;
        let span = match looking {
            Looking::Frontal => None,
            _ => Some((ideal["glabella"].y, ideal["metopion"].y)),
        };
        let facial_curve = region_curve(&region, &camera, looking, span)?;

        let visible_centroid = {
            let pts: Vec<&Point3> = visible.iter().map(|k| &facial[*k]).collect();
            Point3::from(pts.iter().map(|p| p.coords).sum::<Vector3>() / pts.len() as f64)
        };
        let scd_gt = (camera.center() - visible_centroid).norm();
        let apriori = AprioriIntervals {
            fx_min: focal * (1.0 - params.focal_tolerance),
            fx_max: focal * (1.0 + params.focal_tolerance),
            scd_min: scd_gt * (1.0 - params.scd_tolerance),
            scd_max: scd_gt * (1.0 + params.scd_tolerance),
            beta_tol_deg: params.beta_tol_deg,
            reference_pose: rotation,
            ..AprioriIntervals::default()
        };
        return Ok(CaseBundle {
            case_id: case_id.to_string(),
            subject_id: subject.subject_id.clone(),
            looking,
            camera,
            landmarks_2d: ideal.clone(),
            ideal_2d: ideal,
            visibility,
            face_mask: Some(face_mask),
            facial_curve: Some(facial_curve),
            ground_truth_facial: facial,
            ground_truth_genotype: subject.ground_truth_genotype()?,
            apriori,
            noise: NoiseRecord::default(),
        });
    }
    Err(SynthError::TooFewVisible(best_visible))
}

/// Adds `E_i`, uniform per component in `[-magnitude, magnitude]`, to every
/// visible 2D landmark. Deterministic in `seed`.
pub fn perturb_landmarks(bundle: &CaseBundle, magnitude_px: f64, seed: u64) -> CaseBundle {
    let mut out = bundle.clone();
    if magnitude_px <= 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offsets = BTreeMap::new();
    for (name, p) in out.landmarks_2d.iter_mut() {
        if !bundle.visibility.get(name).copied().unwrap_or(false) {
            continue;
        }
        let e = [
            rng.random_range(-magnitude_px..=magnitude_px),
            rng.random_range(-magnitude_px..=magnitude_px),
        ];
        p.x += e[0];
        p.y += e[1];
        offsets.insert(name.clone(), e);
    }
    out.noise = NoiseRecord {
        landmark_magnitude_px: magnitude_px,
        landmark_seed: Some(seed),
        landmark_offsets: offsets,
    };
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_grid_is_closed() {
        let (dirs, faces) = sphere_grid(6, 12);
        let mesh = radial_mesh(&dirs, &faces, |_| 1.0).unwrap();
        assert!(mesh.is_closed_outward());
        let v = mesh.signed_volume();
        assert!(v > 0.8 * 4.0 / 3.0 * PI && v < 4.0 / 3.0 * PI);
    }

    #[test]
    fn ellipsoid_radius_lands_on_surface() {
        let c = Vector3::new(1.0, -2.0, 3.0);
        let s = Vector3::new(10.0, 7.0, 9.0);
        for d in fibonacci_sphere(50) {
            let r = ellipsoid_radius(&d, &c, &s);
            let p = d * r - c;
            assert!((p.component_div(&s).norm_squared() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn thickness_field_interpolates_nodes() {
        let f = ThicknessField {
            nodes: vec![(Vector3::x(), 3.0), (Vector3::y(), 7.0)],
        };
        assert_eq!(f.at(&Vector3::x()), 3.0);
        let mid = f.at(&Vector3::new(1.0, 1.0, 0.0).normalize());
        assert!((mid - 5.0).abs() < 1e-12);
    }

    #[test]
    fn canonical_views_are_rotations() {
        for l in [Looking::Frontal, Looking::Left, Looking::Right] {
            assert!(crate::geometry::is_rotation(&canonical_rotation(l), 1e-12));
        }
    }
}
