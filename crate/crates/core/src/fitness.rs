//! Composite overlay fitness: landmark reprojection error, camera
//! plausibility, skull-outside-face area and contour parallelism.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cones::{decode_unchecked, ConeError, ConeSpec, Genotype};
use crate::contour::{
    curve_penalty, region_curve, segment_region, ContourError, Looking, PixelCurve, Surface,
};
use crate::geometry::{
    rasterize_window, rotation_angle_deg, BinaryMask, Matrix3, Point2, Point3, TriMesh,
};
use crate::pnpf::{solve_pnpf_points, ProjectionSolution};
use crate::synth::{CaseBundle, SyntheticSubject};

pub const DEFAULT_C_INFINITY: f64 = 1e12;
pub const DEFAULT_FX_HARD_LIMIT: f64 = 10_000.0;
/// Weight of each skull pixel falling outside the face.
pub const SKOF_PIXEL_WEIGHT: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitnessError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("empty landmark list")]
    Empty,
    #[error("case lacks {0}, required by an enabled term")]
    IncompleteCase(&'static str),
    #[error("landmark {0} missing from case or skull")]
    MissingLandmark(String),
    #[error("invalid a-priori intervals: {0}")]
    InvalidIntervals(&'static str),
    #[error(transparent)]
    Cone(#[from] ConeError),
    #[error(transparent)]
    Contour(#[from] ContourError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AprioriIntervals {
    pub fx_min: f64,
    pub fx_max: f64,
    pub scd_min: f64,
    pub scd_max: f64,
    pub beta_tol_deg: f64,
    /// Camera rotation of the expected pose.
    pub reference_pose: Matrix3,
    pub fx_hard_limit: f64,
    pub c_infinity: f64,
}

impl Default for AprioriIntervals {
    fn default() -> Self {
        Self {
            fx_min: 0.0,
            fx_max: DEFAULT_FX_HARD_LIMIT,
            scd_min: 0.0,
            scd_max: f64::MAX,
            beta_tol_deg: 180.0,
            reference_pose: Matrix3::identity(),
            fx_hard_limit: DEFAULT_FX_HARD_LIMIT,
            c_infinity: DEFAULT_C_INFINITY,
        }
    }
}

impl AprioriIntervals {
    pub fn validate(&self) -> Result<(), FitnessError> {
        if !(self.fx_min <= self.fx_max && self.scd_min <= self.scd_max) {
            return Err(FitnessError::InvalidIntervals("min must not exceed max"));
        }
        if self.beta_tol_deg < 0.0 {
            return Err(FitnessError::InvalidIntervals(
                "pose tolerance must be non-negative",
            ));
        }
        if self.fx_hard_limit <= self.fx_max {
            return Err(FitnessError::InvalidIntervals(
                "focal hard limit must exceed fx_max",
            ));
        }
        Ok(())
    }
}

/// Terms to include and how to score failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitnessConfig {
    pub use_camera: bool,
    pub use_skof: bool,
    pub use_pll: bool,
    /// Replaces the case's own intervals when present.
    pub intervals: Option<AprioriIntervals>,
    /// Overrides the intervals' C∞ when present.
    pub c_infinity: Option<f64>,
    /// Parallelism term when either contour cannot be extracted or matched.
    pub pll_failure_penalty: f64,
}

impl Default for FitnessConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl FitnessConfig {
    pub fn full() -> Self {
        Self {
            use_camera: true,
            use_skof: true,
            use_pll: true,
            intervals: None,
            c_infinity: None,
            pll_failure_penalty: 1e6,
        }
    }

    /// Landmark error plus camera penalty only.
    pub fn mse_camera() -> Self {
        Self {
            use_skof: false,
            use_pll: false,
            ..Self::full()
        }
    }

    pub fn with_skof() -> Self {
        Self {
            use_pll: false,
            ..Self::full()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("fitness config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessBreakdown {
    pub mse_pix: f64,
    pub p_cam: f64,
    pub p_skof: f64,
    pub p_pll: f64,
    pub total: f64,
    pub solution: Option<ProjectionSolution>,
}

impl FitnessBreakdown {
    fn new(
        mse_pix: f64,
        p_cam: f64,
        p_skof: f64,
        p_pll: f64,
        solution: Option<ProjectionSolution>,
    ) -> Self {
        Self {
            mse_pix,
            p_cam,
            p_skof,
            p_pll,
            total: mse_pix + p_cam + p_skof + p_pll,
            solution,
        }
    }
}

pub fn mse_pix(projected: &[Point2], observed: &[Point2]) -> Result<f64, FitnessError> {
    if projected.len() != observed.len() {
        return Err(FitnessError::LengthMismatch(
            projected.len(),
            observed.len(),
        ));
    }
    if projected.is_empty() {
        return Err(FitnessError::Empty);
    }
    let sum: f64 = projected
        .iter()
        .zip(observed)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok(sum / projected.len() as f64)
}

fn excess(value: f64, lo: f64, hi: f64) -> f64 {
    let below = (lo - value).max(0.0);
    let above = (value - hi).max(0.0);
    below * below + above * above
}

pub fn camera_penalty(sol: &ProjectionSolution, ap: &AprioriIntervals) -> f64 {
    let fx = sol.focal();
    if !sol.converged || fx > ap.fx_hard_limit || !fx.is_finite() {
        return ap.c_infinity;
    }
    let collapse = if fx == 0.0 { ap.c_infinity } else { 0.0 };
    let dbeta = rotation_angle_deg(&sol.camera.rotation, &ap.reference_pose).unwrap_or(180.0);
    let dbeta_excess = (dbeta - ap.beta_tol_deg).max(0.0);
    collapse
        + excess(fx, ap.fx_min, ap.fx_max)
        + excess(sol.scd_mm, ap.scd_min, ap.scd_max)
        + dbeta_excess * dbeta_excess
}

pub fn skof_penalty(skull_mask: &BinaryMask, face_mask: &BinaryMask) -> Result<f64, FitnessError> {
    let outside = skull_mask.count_outside(face_mask).map_err(|_| {
        FitnessError::DimensionMismatch(
            (skull_mask.width(), skull_mask.height()),
            (face_mask.width(), face_mask.height()),
        )
    })?;
    Ok(SKOF_PIXEL_WEIGHT * outside as f64)
}

/// One photograph paired with one candidate skull, with everything that
/// does not depend on the genotype precomputed.
#[derive(Debug, Clone)]
pub struct SfoProblem {
    pub landmark_order: Arc<[String]>,
    specs: Vec<ConeSpec>,
    /// Genotype slots of the landmarks visible in the photograph.
    visible: Vec<usize>,
    observed: Vec<Point2>,
    width: u32,
    height: u32,
    looking: Looking,
    intervals: AprioriIntervals,
    config: FitnessConfig,
    skull_mesh: Arc<TriMesh>,
    face_mask: Option<Arc<BinaryMask>>,
    skull_region: Option<TriMesh>,
    face_curve: Option<PixelCurve>,
    span_landmarks: Option<(Point3, Point3)>,
}

impl SfoProblem {
    /// Pairs `case` with `skull`; the skull need not be the one photographed.
    pub fn new(
        case: &CaseBundle,
        skull: &SyntheticSubject,
        config: &FitnessConfig,
    ) -> Result<Self, FitnessError> {
        let order = skull.landmark_order();
        let mut visible = Vec::new();
        let mut observed = Vec::new();
        for (i, name) in order.iter().enumerate() {
            if case.visibility.get(name).copied().unwrap_or(false) {
                let p = case
                    .landmarks_2d
                    .get(name)
                    .ok_or_else(|| FitnessError::MissingLandmark(name.clone()))?;
                visible.push(i);
                observed.push(*p);
            }
        }
        let mut intervals = config
            .intervals
            .clone()
            .unwrap_or_else(|| case.apriori.clone());
        if let Some(c) = config.c_infinity {
            intervals.c_infinity = c;
        }
        intervals.validate()?;
        let face_mask = if config.use_skof {
            Some(Arc::new(
                case.face_mask
                    .clone()
                    .ok_or(FitnessError::IncompleteCase("a face mask"))?,
            ))
        } else {
            None
        };
        let (skull_region, face_curve, span_landmarks) = if config.use_pll {
            let curve = case
                .facial_curve
                .clone()
                .ok_or(FitnessError::IncompleteCase("a facial curve"))?;
            let region = segment_region(
                &skull.skull_mesh,
                case.looking.region(),
                Surface::Skull,
                &skull.cranial_landmarks,
                &skull.frankfurt_normal,
            )?;
            let span = match case.looking {
                Looking::Frontal => None,
                _ => {
                    let get = |k: &str| {
                        skull
                            .cranial_landmarks
                            .get(k)
                            .copied()
                            .ok_or_else(|| FitnessError::MissingLandmark(k.into()))
                    };
                    Some((get("glabella")?, get("metopion")?))
                }
            };
            (Some(region), Some(curve), span)
        } else {
            (None, None, None)
        };
        Ok(Self {
            landmark_order: order,
            specs: skull.cone_specs.clone(),
            visible,
            observed,
            width: case.width(),
            height: case.height(),
            looking: case.looking,
            intervals,
            config: config.clone(),
            skull_mesh: Arc::new(skull.skull_mesh.clone()),
            face_mask,
            skull_region,
            face_curve,
            span_landmarks,
        })
    }

    pub fn dimension(&self) -> usize {
        3 * self.specs.len()
    }

    pub fn visible_count(&self) -> usize {
        self.visible.len()
    }

    pub fn intervals(&self) -> &AprioriIntervals {
        &self.intervals
    }

    /// Facial landmarks of the visible slots decoded from raw genotype values.
    pub fn visible_facial_points(&self, values: &[f64]) -> Vec<Point3> {
        self.visible
            .iter()
            .map(|&i| {
                let s = &self.specs[i];
                s.apex + decode_unchecked(s, values[3 * i], values[3 * i + 1], values[3 * i + 2])
            })
            .collect()
    }

    /// Scores raw genotype values; numerical failures become penalties.
    pub fn evaluate(&self, values: &[f64]) -> FitnessBreakdown {
        let world = self.visible_facial_points(values);
        self.evaluate_points(&world)
    }

    /// Scores an explicit set of facial landmarks, one per visible slot.
    pub fn evaluate_points(&self, world: &[Point3]) -> FitnessBreakdown {
        let c_inf = self.intervals.c_infinity;
        let sol = match solve_pnpf_points(world, &self.observed, self.width, self.height) {
            Ok(s) if s.converged => s,
            Ok(s) => return FitnessBreakdown::new(0.0, c_inf, 0.0, 0.0, Some(s)),
            Err(_) => return FitnessBreakdown::new(0.0, c_inf, 0.0, 0.0, None),
        };
        let projected: Vec<Point2> = world
            .iter()
            .map(|p| sol.camera.project_camera_point(&sol.camera.to_camera(p)))
            .collect();
        let mse = mse_pix(&projected, &self.observed).unwrap_or(c_inf);
        let p_cam = if self.config.use_camera {
            camera_penalty(&sol, &self.intervals)
        } else {
            0.0
        };
        let p_skof = match &self.face_mask {
            Some(face) => {
                let skull = rasterize_window(&self.skull_mesh, &sol.camera, true);
                SKOF_PIXEL_WEIGHT * skull.count_outside(face) as f64
            }
            None => 0.0,
        };
        let p_pll = match (&self.skull_region, &self.face_curve) {
            (Some(region), Some(face)) => self
                .pll(region, face, &sol)
                .unwrap_or(self.config.pll_failure_penalty),
            _ => 0.0,
        };
        FitnessBreakdown::new(mse, p_cam, p_skof, p_pll, Some(sol))
    }

    fn pll(&self, region: &TriMesh, face: &PixelCurve, sol: &ProjectionSolution) -> Option<f64> {
        let span = match self.span_landmarks {
            Some((a, b)) => Some((
                sol.camera.project(&a).ok()?.y,
                sol.camera.project(&b).ok()?.y,
            )),
            None => None,
        };
        let skull = region_curve(region, &sol.camera, self.looking, span).ok()?;
        curve_penalty(&skull, face, self.looking)
            .ok()
            .map(|b| b.total)
            .filter(|t| t.is_finite())
    }
}

/// Scores `g` against a case whose photographed subject is `skull`.
pub fn evaluate_candidate(
    g: &Genotype,
    case: &CaseBundle,
    skull: &SyntheticSubject,
    config: &FitnessConfig,
) -> Result<FitnessBreakdown, FitnessError> {
    let problem = SfoProblem::new(case, skull, config)?;
    if g.landmark_order.as_ref() != problem.landmark_order.as_ref() {
        return Err(FitnessError::LengthMismatch(g.len(), problem.dimension()));
    }
    Ok(problem.evaluate(&g.values))
}
