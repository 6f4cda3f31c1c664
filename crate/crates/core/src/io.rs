//! On-disk subjects and case bundles, manifests with checksums, and overlay
//! renders.
//!
//! A subject directory holds `manifest.json`, `skull.obj`, `face.obj` and
//! `landmarks.json`. A case directory holds `manifest.json`, `case.json`,
//! optionally `face_mask.pgm` and `facial_curve.csv`. Every manifest lists
//! its files with SHA-256 checksums that are verified on load.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cones::{ConeSpec, Genotype};
use crate::contour::{Looking, Pixel, PixelCurve};
use crate::fitness::AprioriIntervals;
use crate::geometry::{
    rasterize_window, BinaryMask, GeometryError, Pinhole, Point2, Point3, TriMesh, Vector3,
};
use crate::synth::{CaseBundle, DirectionPerturbation, NoiseRecord, SyntheticSubject};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("manifest kind is {found:?}, expected {expected:?}")]
    Kind {
        found: String,
        expected: &'static str,
    },
    #[error("manifest does not list {0}")]
    MissingEntry(&'static str),
    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, reason: impl ToString) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(fs_err(parent))?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(fs_err(&tmp))?;
        f.write_all(bytes).map_err(fs_err(&tmp))?;
        f.sync_all().map_err(fs_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(fs_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let bytes = fs::read(path).map_err(fs_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| format_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// `subject` or `case`.
    pub kind: String,
    pub subject_id: String,
    pub case_id: Option<String>,
    pub files: BTreeMap<String, FileEntry>,
    pub noise_record: Option<NoiseRecord>,
}

impl Manifest {
    fn new(kind: &str, subject_id: &str, case_id: Option<&str>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.into(),
            subject_id: subject_id.into(),
            case_id: case_id.map(Into::into),
            files: BTreeMap::new(),
            noise_record: None,
        }
    }

    fn add(&mut self, dir: &Path, role: &str, name: &str, bytes: &[u8]) -> Result<(), IoError> {
        write_atomic(&dir.join(name), bytes)?;
        self.files.insert(
            role.into(),
            FileEntry {
                path: name.into(),
                sha256: sha256_hex(bytes),
            },
        );
        Ok(())
    }

    /// Reads and checks the manifest of `dir`.
    pub fn load(dir: &Path, expected_kind: &'static str) -> Result<Self, IoError> {
        let m: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        if m.format_version != FORMAT_VERSION {
            return Err(IoError::Version {
                found: m.format_version,
            });
        }
        if m.kind != expected_kind {
            return Err(IoError::Kind {
                found: m.kind,
                expected: expected_kind,
            });
        }
        Ok(m)
    }

    /// Bytes of a listed file after checksum verification.
    pub fn read(&self, dir: &Path, role: &'static str) -> Result<Vec<u8>, IoError> {
        let e = self.files.get(role).ok_or(IoError::MissingEntry(role))?;
        let path = dir.join(&e.path);
        let bytes = fs::read(&path).map_err(fs_err(&path))?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(IoError::Checksum(path));
        }
        Ok(bytes)
    }

    pub fn has(&self, role: &str) -> bool {
        self.files.contains_key(role)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SubjectRecord {
    cranial_landmarks: BTreeMap<String, Point3>,
    face_landmarks: BTreeMap<String, Point3>,
    soft_tissue_vectors: BTreeMap<String, Vector3>,
    cone_specs: Vec<ConeSpec>,
    facial_names: BTreeMap<String, String>,
    prior_directions: BTreeMap<String, Vector3>,
    frankfurt_normal: Vector3,
    direction_perturbation: Option<DirectionPerturbation>,
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("record serializes");
    s.push('\n');
    s.into_bytes()
}

pub fn save_subject(dir: &Path, s: &SyntheticSubject) -> Result<(), IoError> {
    let mut m = Manifest::new("subject", &s.subject_id, None);
    m.add(
        dir,
        "skull_mesh",
        "skull.obj",
        s.skull_mesh.to_obj_string().as_bytes(),
    )?;
    m.add(
        dir,
        "face_mesh",
        "face.obj",
        s.face_mesh.to_obj_string().as_bytes(),
    )?;
    let rec = SubjectRecord {
        cranial_landmarks: s.cranial_landmarks.clone(),
        face_landmarks: s.face_landmarks.clone(),
        soft_tissue_vectors: s.soft_tissue_vectors.clone(),
        cone_specs: s.cone_specs.clone(),
        facial_names: s.facial_names.clone(),
        prior_directions: s.prior_directions.clone(),
        frankfurt_normal: s.frankfurt_normal,
        direction_perturbation: s.direction_perturbation.clone(),
    };
    m.add(dir, "landmarks", "landmarks.json", &json_bytes(&rec))?;
    write_json(&dir.join(MANIFEST_FILE), &m)
}

fn parse_mesh(dir: &Path, m: &Manifest, role: &'static str) -> Result<TriMesh, IoError> {
    let bytes = m.read(dir, role)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| format_err(dir, e))?;
    TriMesh::from_obj_str(text)
        .map_err(|e: GeometryError| format_err(&dir.join(&m.files[role].path), e))
}

pub fn load_subject(dir: &Path) -> Result<SyntheticSubject, IoError> {
    let m = Manifest::load(dir, "subject")?;
    let skull_mesh = parse_mesh(dir, &m, "skull_mesh")?;
    let face_mesh = parse_mesh(dir, &m, "face_mesh")?;
    let rec: SubjectRecord = serde_json::from_slice(&m.read(dir, "landmarks")?)
        .map_err(|e| format_err(&dir.join("landmarks.json"), e))?;
    Ok(SyntheticSubject {
        subject_id: m.subject_id,
        skull_mesh,
        face_mesh,
        cranial_landmarks: rec.cranial_landmarks,
        face_landmarks: rec.face_landmarks,
        soft_tissue_vectors: rec.soft_tissue_vectors,
        cone_specs: rec.cone_specs,
        facial_names: rec.facial_names,
        prior_directions: rec.prior_directions,
        frankfurt_normal: rec.frankfurt_normal,
        direction_perturbation: rec.direction_perturbation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CaseRecord {
    looking: Looking,
    camera: Pinhole,
    landmarks_2d: BTreeMap<String, Point2>,
    ideal_2d: BTreeMap<String, Point2>,
    visibility: BTreeMap<String, bool>,
    ground_truth_facial: BTreeMap<String, Point3>,
    ground_truth_genotype: Genotype,
    apriori: AprioriIntervals,
}

/// Curve as `u,v` lines under a header.
pub fn curve_to_csv(c: &PixelCurve) -> String {
    let mut s = String::from("u,v\n");
    for p in &c.points {
        s.push_str(&format!("{},{}\n", p.u, p.v));
    }
    s
}

pub fn curve_from_csv(text: &str) -> Result<PixelCurve, String> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (u, v) = line
            .split_once(',')
            .ok_or_else(|| format!("line {}: expected u,v", i + 1))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<i32>()
                .map_err(|_| format!("line {}: bad integer", i + 1))
        };
        points.push(Pixel::new(parse(u)?, parse(v)?));
    }
    Ok(PixelCurve::new(points))
}

pub fn save_case(dir: &Path, c: &CaseBundle) -> Result<(), IoError> {
    let mut m = Manifest::new("case", &c.subject_id, Some(&c.case_id));
    let rec = CaseRecord {
        looking: c.looking,
        camera: c.camera.clone(),
        landmarks_2d: c.landmarks_2d.clone(),
        ideal_2d: c.ideal_2d.clone(),
        visibility: c.visibility.clone(),
        ground_truth_facial: c.ground_truth_facial.clone(),
        ground_truth_genotype: c.ground_truth_genotype.clone(),
        apriori: c.apriori.clone(),
    };
    m.add(dir, "case", "case.json", &json_bytes(&rec))?;
    if let Some(mask) = &c.face_mask {
        m.add(dir, "face_mask", "face_mask.pgm", mask.to_pgm().as_bytes())?;
    }
    if let Some(curve) = &c.facial_curve {
        m.add(
            dir,
            "facial_curve",
            "facial_curve.csv",
            curve_to_csv(curve).as_bytes(),
        )?;
    }
    m.noise_record = Some(c.noise.clone());
    write_json(&dir.join(MANIFEST_FILE), &m)
}

pub fn load_case(dir: &Path) -> Result<CaseBundle, IoError> {
    let m = Manifest::load(dir, "case")?;
    let rec: CaseRecord = serde_json::from_slice(&m.read(dir, "case")?)
        .map_err(|e| format_err(&dir.join("case.json"), e))?;
    let face_mask = if m.has("face_mask") {
        let bytes = m.read(dir, "face_mask")?;
        Some(BinaryMask::from_pgm(&bytes).map_err(|e| format_err(&dir.join("face_mask.pgm"), e))?)
    } else {
        None
    };
    let facial_curve = if m.has("facial_curve") {
        let bytes = m.read(dir, "facial_curve")?;
        let text = String::from_utf8(bytes).map_err(|e| format_err(dir, e))?;
        Some(curve_from_csv(&text).map_err(|e| format_err(&dir.join("facial_curve.csv"), e))?)
    } else {
        None
    };
    Ok(CaseBundle {
        case_id: m.case_id.clone().unwrap_or_default(),
        subject_id: m.subject_id.clone(),
        looking: rec.looking,
        camera: rec.camera,
        landmarks_2d: rec.landmarks_2d,
        ideal_2d: rec.ideal_2d,
        visibility: rec.visibility,
        face_mask,
        facial_curve,
        ground_truth_facial: rec.ground_truth_facial,
        ground_truth_genotype: rec.ground_truth_genotype,
        apriori: rec.apriori,
        noise: m.noise_record.unwrap_or_default(),
    })
}

/// 8-bit RGB raster written as binary PPM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0; 3]; width * height],
        }
    }

    pub fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }
}

pub const FACE_GRAY: [u8; 3] = [110, 110, 110];
pub const SKULL_OUTLINE: [u8; 3] = [255, 40, 40];
pub const OBSERVED_MARK: [u8; 3] = [60, 120, 255];
pub const ESTIMATE_MARK: [u8; 3] = [40, 220, 60];

/// Face mask in gray, skull silhouette boundary in red, observed landmarks
/// as blue circles and projected estimates as green dots.
pub fn render_overlay(
    face_mask: Option<&BinaryMask>,
    skull_mesh: &TriMesh,
    camera: &Pinhole,
    observed: &[Point2],
    estimated: &[Point2],
) -> RgbImage {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut img = RgbImage::new(w, h);
    if let Some(mask) = face_mask {
        for (x, y) in mask.iter_set() {
            if x < w && y < h {
                img.put(x as i64, y as i64, FACE_GRAY);
            }
        }
    }
    let skull = rasterize_window(skull_mesh, camera, false);
    let sm = &skull.mask;
    let inside = |x: i64, y: i64| {
        x >= 0
            && y >= 0
            && (x as usize) < sm.width()
            && (y as usize) < sm.height()
            && sm.get(x as usize, y as usize)
    };
    for (x, y) in sm.iter_set() {
        let (xi, yi) = (x as i64, y as i64);
        if !(inside(xi - 1, yi) && inside(xi + 1, yi) && inside(xi, yi - 1) && inside(xi, yi + 1)) {
            img.put(xi + skull.x0 as i64, yi + skull.y0 as i64, SKULL_OUTLINE);
        }
    }
    for p in observed {
        let (cx, cy) = (p.x.floor() as i64, p.y.floor() as i64);
        for k in 0..32 {
            let a = k as f64 * std::f64::consts::TAU / 32.0;
            img.put(
                cx + (4.0 * a.cos()).round() as i64,
                cy + (4.0 * a.sin()).round() as i64,
                OBSERVED_MARK,
            );
        }
    }
    for p in estimated {
        let (cx, cy) = (p.x.floor() as i64, p.y.floor() as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                img.put(cx + dx, cy + dy, ESTIMATE_MARK);
            }
        }
    }
    img
}
