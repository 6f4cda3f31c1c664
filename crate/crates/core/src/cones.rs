//! Soft-tissue cones and the genotype that parameterizes them.
//!
//! Each cranial landmark `C_i` carries a cone: apex at `C_i`, axis along the
//! expected soft-tissue growth direction, depth bounded by `[depth_min,
//! depth_max]` and half-angle bounded by `aperture_deg`. Three unit-interval
//! parameters pick one soft-tissue vector inside it:
//!
//! * `p1` interpolates the depth linearly between the bounds,
//! * `p2` scales the angle away from the axis,
//! * `p3` is the azimuth about the axis, as a fraction of a full turn.
//!
//! The azimuth origin is `normalize(axis × Z)`, or `X` when the axis is
//! (anti)parallel to `Z`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::TAU;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point3, Vector3};

/// Default upper bound for the aperture, in degrees.
pub const DEFAULT_APERTURE_DEG: f64 = 40.0;

const AXIS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConeError {
    #[error("cone axis for {0} is not unit length")]
    DegenerateAxis(String),
    #[error("invalid cone for {landmark}: {reason}")]
    InvalidSpec { landmark: String, reason: String },
    #[error("no cone for landmark {0}")]
    MissingSpec(String),
    #[error("invalid genotype: {0}")]
    InvalidGenotype(String),
    #[error("invalid bilateral pairing: {0}")]
    InvalidPairing(String),
    #[error("vector lies outside the cone of {0}")]
    OutsideCone(String),
    #[error("malformed cone table: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    pub landmark: String,
    pub apex: Point3,
    pub axis: Vector3,
    pub depth_min: f64,
    pub depth_max: f64,
    pub aperture_deg: f64,
}

impl ConeSpec {
    pub fn new(
        landmark: impl Into<String>,
        apex: Point3,
        axis: Vector3,
        depth_min: f64,
        depth_max: f64,
        aperture_deg: f64,
    ) -> Result<Self, ConeError> {
        let spec = Self {
            landmark: landmark.into(),
            apex,
            axis,
            depth_min,
            depth_max,
            aperture_deg,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ConeError> {
        let invalid = |reason: &str| ConeError::InvalidSpec {
            landmark: self.landmark.clone(),
            reason: reason.into(),
        };
        if !(self.depth_min > 0.0 && self.depth_min <= self.depth_max && self.depth_max.is_finite())
        {
            return Err(invalid("depths must satisfy 0 < min <= max"));
        }
        if !(0.0..=DEFAULT_APERTURE_DEG).contains(&self.aperture_deg) {
            return Err(invalid("aperture must lie in [0, 40] degrees"));
        }
        if !self.apex.coords.iter().all(|c| c.is_finite()) {
            return Err(invalid("apex is not finite"));
        }
        self.check_axis()
    }

    fn check_axis(&self) -> Result<(), ConeError> {
        if (self.axis.norm() - 1.0).abs() > AXIS_TOL {
            return Err(ConeError::DegenerateAxis(self.landmark.clone()));
        }
        Ok(())
    }

    /// Orthonormal `(u, w)` spanning the plane perpendicular to the axis.
    pub fn azimuth_basis(&self) -> (Vector3, Vector3) {
        azimuth_basis(&self.axis)
    }

    pub fn depth_range(&self) -> f64 {
        self.depth_max - self.depth_min
    }

    /// Same cone with a different axis (used by direction perturbation).
    pub fn with_axis(&self, axis: Vector3) -> Self {
        Self {
            axis,
            ..self.clone()
        }
    }
}

pub(crate) fn azimuth_basis(axis: &Vector3) -> (Vector3, Vector3) {
    let c = axis.cross(&Vector3::z());
    let u = if c.norm() < 1e-6 {
        // Project X off the axis so u stays exactly perpendicular.
        (Vector3::x() - axis * axis.x).normalize()
    } else {
        c.normalize()
    };
    (u, axis.cross(&u))
}

/// Soft-tissue vector for parameters `(p1, p2, p3)`, each in `[0, 1]`.
pub fn decode_cone(spec: &ConeSpec, p1: f64, p2: f64, p3: f64) -> Result<Vector3, ConeError> {
    spec.check_axis()?;
    Ok(decode_unchecked(spec, p1, p2, p3))
}

#[inline]
pub(crate) fn decode_unchecked(spec: &ConeSpec, p1: f64, p2: f64, p3: f64) -> Vector3 {
    let depth = spec.depth_min + p1 * spec.depth_range();
    let alpha = (p2 * spec.aperture_deg).to_radians();
    if alpha == 0.0 {
        return spec.axis * depth;
    }
    let (u, w) = spec.azimuth_basis();
    let theta = p3 * TAU;
    let dir = spec.axis * alpha.cos() + (u * theta.cos() + w * theta.sin()) * alpha.sin();
    dir * depth
}

/// Inverse of [`decode_cone`]: parameters that reproduce `st`.
///
/// A vector on the axis encodes with `p3 = 0`; a zero-width depth range
/// or zero aperture encodes the corresponding parameter as 0.
pub fn encode_cone(spec: &ConeSpec, st: &Vector3) -> Result<[f64; 3], ConeError> {
    spec.check_axis()?;
    let outside = || ConeError::OutsideCone(spec.landmark.clone());
    let depth = st.norm();
    let tol = 1e-9 * spec.depth_max.max(1.0);
    if depth < spec.depth_min - tol || depth > spec.depth_max + tol {
        return Err(outside());
    }
    let p1 = if spec.depth_range() > 0.0 {
        ((depth - spec.depth_min) / spec.depth_range()).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let dir = st / depth;
    let (u, w) = spec.azimuth_basis();
    let (a, b) = (dir.dot(&u), dir.dot(&w));
    let alpha = a.hypot(b).atan2(dir.dot(&spec.axis)).to_degrees();
    if alpha > spec.aperture_deg + 1e-9 {
        return Err(outside());
    }
    let p2 = if spec.aperture_deg > 0.0 {
        (alpha / spec.aperture_deg).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let p3 = if a.hypot(b) > 0.0 {
        b.atan2(a).rem_euclid(TAU) / TAU
    } else {
        0.0
    };
    Ok([p1, p2, if p3 >= 1.0 { 0.0 } else { p3 }])
}

/// Flat cone-parameter vector, three entries per landmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genotype {
    pub values: Vec<f64>,
    pub landmark_order: Arc<[String]>,
}

impl Genotype {
    pub fn new(values: Vec<f64>, landmark_order: Arc<[String]>) -> Result<Self, ConeError> {
        if values.len() != 3 * landmark_order.len() {
            return Err(ConeError::InvalidGenotype(format!(
                "{} values for {} landmarks",
                values.len(),
                landmark_order.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ConeError::InvalidGenotype(format!(
                "component {v} outside [0, 1]"
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = landmark_order.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(ConeError::InvalidGenotype(format!(
                "duplicate landmark {dup}"
            )));
        }
        Ok(Self {
            values,
            landmark_order,
        })
    }

    pub fn params(&self, i: usize) -> [f64; 3] {
        [
            self.values[3 * i],
            self.values[3 * i + 1],
            self.values[3 * i + 2],
        ]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `F_i = C_i + ST_i` for every landmark of the genotype, in genotype order.
pub fn genotype_to_facial_landmarks(
    g: &Genotype,
    specs: &[ConeSpec],
) -> Result<Vec<(String, Point3)>, ConeError> {
    let by_name: HashMap<&str, &ConeSpec> =
        specs.iter().map(|s| (s.landmark.as_str(), s)).collect();
    g.landmark_order
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let spec = by_name
                .get(name.as_str())
                .ok_or_else(|| ConeError::MissingSpec(name.clone()))?;
            let [p1, p2, p3] = g.params(i);
            Ok((name.clone(), spec.apex + decode_cone(spec, p1, p2, p3)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilateralPairing {
    pub pairs: Vec<(String, String)>,
    pub coupling_weight: f64,
}

impl Default for BilateralPairing {
    fn default() -> Self {
        Self {
            pairs: Vec::new(),
            coupling_weight: 0.9,
        }
    }
}

impl BilateralPairing {
    pub fn new(pairs: Vec<(String, String)>, coupling_weight: f64) -> Result<Self, ConeError> {
        if !(0.0..=1.0).contains(&coupling_weight) {
            return Err(ConeError::InvalidPairing(format!(
                "weight {coupling_weight} outside [0, 1]"
            )));
        }
        let mut seen = HashSet::new();
        for (a, b) in &pairs {
            for n in [a, b] {
                if !seen.insert(n.as_str()) {
                    return Err(ConeError::InvalidPairing(format!(
                        "{n} appears in two pairs"
                    )));
                }
            }
        }
        Ok(Self {
            pairs,
            coupling_weight,
        })
    }
}

/// Draws one genotype: independent uniform parameters, except that the
/// second member of each bilateral pair is `w * first + (1 - w) * fresh`.
pub fn sample_with_bilateral_coupling<R: Rng + ?Sized>(
    rng: &mut R,
    pairing: &BilateralPairing,
    landmark_order: &Arc<[String]>,
) -> Genotype {
    let mut values: Vec<f64> = (0..3 * landmark_order.len())
        .map(|_| rng.random::<f64>())
        .collect();
    let index: HashMap<&str, usize> = landmark_order
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let w = pairing.coupling_weight;
    for (a, b) in &pairing.pairs {
        let (Some(&ia), Some(&ib)) = (index.get(a.as_str()), index.get(b.as_str())) else {
            continue;
        };
        for k in 0..3 {
            let fresh = values[3 * ib + k];
            values[3 * ib + k] = (w * values[3 * ia + k] + (1.0 - w) * fresh).clamp(0.0, 1.0);
        }
    }
    Genotype {
        values,
        landmark_order: Arc::clone(landmark_order),
    }
}

/// One row of a cone table: the per-landmark prior, without the apex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConePrior {
    pub landmark: String,
    /// Name of the matching facial landmark.
    pub facial: String,
    pub axis: [f64; 3],
    pub depth_min: f64,
    pub depth_max: f64,
    #[serde(default = "default_aperture")]
    pub aperture_deg: f64,
}

fn default_aperture() -> f64 {
    DEFAULT_APERTURE_DEG
}

/// Cone priors plus the bilateral pairs, as read from a TOML table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeTable {
    #[serde(default = "default_weight")]
    pub coupling_weight: f64,
    #[serde(default)]
    pub pairs: Vec<(String, String)>,
    #[serde(rename = "cone")]
    pub cones: Vec<ConePrior>,
}

fn default_weight() -> f64 {
    0.9
}

const DEFAULT_TABLE: &str = include_str!("../data/cones_default.toml");

impl ConeTable {
    pub fn from_toml_str(s: &str) -> Result<Self, ConeError> {
        let mut table: Self = toml::from_str(s).map_err(|e| ConeError::Parse(e.to_string()))?;
        for c in &mut table.cones {
            let axis = Vector3::from(c.axis);
            let n = axis.norm();
            if !(n > 0.0 && n.is_finite()) {
                return Err(ConeError::DegenerateAxis(c.landmark.clone()));
            }
            if (n - 1.0).abs() > 1e-12 {
                c.axis = (axis / n).into();
            }
        }
        let mut seen = HashSet::new();
        if let Some(dup) = table
            .cones
            .iter()
            .find(|c| !seen.insert(c.landmark.as_str()))
        {
            return Err(ConeError::Parse(format!(
                "duplicate landmark {}",
                dup.landmark
            )));
        }
        table.pairing()?;
        for c in &table.cones {
            table.spec_at(c, Point3::origin())?;
        }
        Ok(table)
    }

    /// The table shipped with the crate.
    pub fn default_table() -> Self {
        Self::from_toml_str(DEFAULT_TABLE).expect("bundled cone table is valid")
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("cone table serializes")
    }

    pub fn landmark_order(&self) -> Arc<[String]> {
        self.cones.iter().map(|c| c.landmark.clone()).collect()
    }

    pub fn pairing(&self) -> Result<BilateralPairing, ConeError> {
        BilateralPairing::new(self.pairs.clone(), self.coupling_weight)
    }

    pub fn prior(&self, landmark: &str) -> Option<&ConePrior> {
        self.cones.iter().find(|c| c.landmark == landmark)
    }

    fn spec_at(&self, prior: &ConePrior, apex: Point3) -> Result<ConeSpec, ConeError> {
        ConeSpec::new(
            prior.landmark.clone(),
            apex,
            Vector3::from(prior.axis),
            prior.depth_min,
            prior.depth_max,
            prior.aperture_deg,
        )
    }

    /// Cone specs anchored at the given cranial landmarks, in table order.
    pub fn specs_for(
        &self,
        cranial: &BTreeMap<String, Point3>,
    ) -> Result<Vec<ConeSpec>, ConeError> {
        self.cones
            .iter()
            .map(|c| {
                let apex = cranial
                    .get(&c.landmark)
                    .ok_or_else(|| ConeError::MissingSpec(c.landmark.clone()))?;
                self.spec_at(c, *apex)
            })
            .collect()
    }
}
