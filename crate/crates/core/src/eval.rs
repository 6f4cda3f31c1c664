//! Identification-rank experiments, back-projection error and overlay
//! plausibility.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cones::{ConeError, ConeTable};
use crate::contour::{Looking, RegionKind};
use crate::de::{run as run_de, DeConfig};
use crate::fitness::{mse_pix, FitnessConfig, SfoProblem, DEFAULT_C_INFINITY};
use crate::geometry::{
    backproject_ray, point_to_ray_distance_mm, rasterize_window, BinaryMask, Pinhole, Point2,
    Point3, TriMesh,
};
use crate::pnpf::{solve_pnpf_points, ProjectionSolution};
use crate::synth::{
    generate_subject, perturb_landmarks, perturb_st_directions, render_case, CameraParams,
    CaseBundle, MorphologyParams, SynthError, SyntheticSubject,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("projection solution did not converge")]
    NotConverged,
    #[error("no ground-truth landmarks")]
    NoLandmarks,
    #[error("no 2D location for landmark {0}")]
    MissingLandmark(String),
    #[error("skull database does not contain subject {0}")]
    TrueSkullMissing(String),
    #[error("invalid suite: {0}")]
    InvalidSuite(&'static str),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Cone(#[from] ConeError),
}

/// Distance from each ground-truth facial landmark to the ray through its
/// 2D location, keyed by landmark.
pub fn bpe_per_landmark(
    camera: &Pinhole,
    ground_truth: &BTreeMap<String, Point3>,
    image: &BTreeMap<String, Point2>,
) -> Result<BTreeMap<String, f64>, EvalError> {
    ground_truth
        .iter()
        .map(|(k, f)| {
            let p = image
                .get(k)
                .ok_or_else(|| EvalError::MissingLandmark(k.clone()))?;
            let ray = backproject_ray(camera, p);
            Ok((
                k.clone(),
                point_to_ray_distance_mm(f, &ray.origin, &ray.dir),
            ))
        })
        .collect()
}

/// Mean back-projection error in mm over every ground-truth landmark.
pub fn bpe_mm(
    solution: &ProjectionSolution,
    ground_truth: &BTreeMap<String, Point3>,
    image: &BTreeMap<String, Point2>,
) -> Result<f64, EvalError> {
    if !solution.converged {
        return Err(EvalError::NotConverged);
    }
    if ground_truth.is_empty() {
        return Err(EvalError::NoLandmarks);
    }
    let per = bpe_per_landmark(&solution.camera, ground_truth, image)?;
    Ok(per.values().sum::<f64>() / per.len() as f64)
}

/// BPE of a solution against a bundle: rays pass through the bundle's 2D
/// landmarks, which for occluded landmarks are their exact projections.
pub fn case_bpe_mm(solution: &ProjectionSolution, bundle: &CaseBundle) -> Result<f64, EvalError> {
    bpe_mm(solution, &bundle.ground_truth_facial, &bundle.landmarks_2d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub photo_id: String,
    /// `(skull_id, score)` sorted by score, then skull id.
    pub scores: Vec<(String, f64)>,
    pub rank_of_true: usize,
}

/// Sorts scores ascending (ties by skull id) and locates the true skull.
pub fn rank_scores(
    photo_id: &str,
    true_skull: &str,
    mut scores: Vec<(String, f64)>,
) -> Result<RankResult, EvalError> {
    scores.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let pos = scores
        .iter()
        .position(|(id, _)| id == true_skull)
        .ok_or_else(|| EvalError::TrueSkullMissing(true_skull.to_string()))?;
    Ok(RankResult {
        photo_id: photo_id.to_string(),
        scores,
        rank_of_true: pos + 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityReport {
    pub implausible: bool,
    pub pct_pixels_outside: f64,
    pub is_positive_pair: bool,
}

pub fn plausibility_report(
    camera: &Pinhole,
    skull_mesh: &TriMesh,
    face_mask: &BinaryMask,
    is_positive_pair: bool,
) -> PlausibilityReport {
    let skull = rasterize_window(skull_mesh, camera, true);
    let total = skull.mask.count();
    if total == 0 {
        return PlausibilityReport {
            implausible: true,
            pct_pixels_outside: 100.0,
            is_positive_pair,
        };
    }
    let outside = skull.count_outside(face_mask);
    PlausibilityReport {
        implausible: outside > 0,
        pct_pixels_outside: 100.0 * outside as f64 / total as f64,
        is_positive_pair,
    }
}

/// How a photograph-skull pair is scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum MethodKind {
    /// Soft-tissue genotypes optimized by differential evolution.
    Evolutionary {
        fitness: FitnessConfig,
        de: DeConfig,
    },
    /// Fixed soft-tissue vectors along the skull's prior directions at
    /// mid-range depth, solved once and scored by landmark MSE.
    OracleDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub name: String,
    #[serde(flatten)]
    pub kind: MethodKind,
}

impl MethodConfig {
    pub fn full(de: DeConfig) -> Self {
        Self {
            name: "cones_full".into(),
            kind: MethodKind::Evolutionary {
                fitness: FitnessConfig::full(),
                de,
            },
        }
    }

    pub fn oracle_direction() -> Self {
        Self {
            name: "oracle_direction".into(),
            kind: MethodKind::OracleDirection,
        }
    }
}

/// Result of superimposing one photograph on one skull.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub score: f64,
    pub solution: Option<ProjectionSolution>,
    pub time_s: f64,
}

/// Fixed-vector facial landmarks for the visible slots of `bundle`.
fn oracle_points(bundle: &CaseBundle, skull: &SyntheticSubject) -> Vec<(Point3, Point2)> {
    skull
        .cone_specs
        .iter()
        .filter(|s| bundle.visibility.get(&s.landmark).copied().unwrap_or(false))
        .filter_map(|s| {
            let dir = skull.prior_directions.get(&s.landmark)?;
            let depth = 0.5 * (s.depth_min + s.depth_max);
            Some((s.apex + dir * depth, *bundle.landmarks_2d.get(&s.landmark)?))
        })
        .collect()
}

/// Superimposes `bundle` on `skull` with `method`; failures score C∞.
pub fn superimpose(
    bundle: &CaseBundle,
    skull: &SyntheticSubject,
    method: &MethodConfig,
    table: &ConeTable,
    seed: u64,
) -> PairOutcome {
    let start = Instant::now();
    let (score, solution) = match &method.kind {
        MethodKind::OracleDirection => {
            let (world, image): (Vec<Point3>, Vec<Point2>) =
                oracle_points(bundle, skull).into_iter().unzip();
            match solve_pnpf_points(&world, &image, bundle.width(), bundle.height()) {
                Ok(sol) if sol.converged => {
                    let proj: Vec<Point2> = world
                        .iter()
                        .filter_map(|p| sol.camera.project(p).ok())
                        .collect();
                    let mse = mse_pix(&proj, &image).unwrap_or(DEFAULT_C_INFINITY);
                    (mse, Some(sol))
                }
                _ => (DEFAULT_C_INFINITY, None),
            }
        }
        MethodKind::Evolutionary { fitness, de } => {
            let problem = SfoProblem::new(bundle, skull, fitness);
            let pairing = table.pairing();
            match (problem, pairing) {
                (Ok(p), Ok(pairing)) => {
                    let cfg = DeConfig { seed, ..de.clone() };
                    match run_de(&p, &pairing, &cfg) {
                        Ok(r) => (r.breakdown.total, r.breakdown.solution),
                        Err(_) => (p.intervals().c_infinity, None),
                    }
                }
                _ => (DEFAULT_C_INFINITY, None),
            }
        }
    };
    PairOutcome {
        score,
        solution,
        time_s: start.elapsed().as_secs_f64(),
    }
}

/// Runs `bundle` against every skull and ranks the true subject.
pub fn rank_experiment(
    bundle: &CaseBundle,
    skull_db: &[SyntheticSubject],
    method: &MethodConfig,
    table: &ConeTable,
    seed: u64,
) -> Result<RankResult, EvalError> {
    let scores = skull_db
        .iter()
        .map(|s| {
            (
                s.subject_id.clone(),
                superimpose(bundle, s, method, table, seed).score,
            )
        })
        .collect();
    rank_scores(&bundle.case_id, &bundle.subject_id, scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NoiseProfile {
    /// Exact landmarks and exact cone priors.
    A,
    /// Landmarks displaced by up to ±5 px per component.
    B,
    /// Landmark noise plus cone axes rotated by up to 30°.
    C,
}

impl NoiseProfile {
    pub fn landmark_noise_px(self) -> f64 {
        match self {
            NoiseProfile::A => 0.0,
            NoiseProfile::B | NoiseProfile::C => 5.0,
        }
    }

    pub fn direction_noise_deg(self) -> f64 {
        match self {
            NoiseProfile::C => 30.0,
            _ => 0.0,
        }
    }
}

impl std::str::FromStr for NoiseProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Self::A),
            "B" => Ok(Self::B),
            "C" => Ok(Self::C),
            _ => Err(format!("unknown noise profile {s:?}; expected A, B or C")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub subjects: usize,
    pub frontal_views: usize,
    pub lateral_views: usize,
    pub profile: NoiseProfile,
    pub methods: Vec<MethodConfig>,
    pub seeds: Vec<u64>,
    /// Independent direction-perturbation sets; only used by profile C.
    pub direction_sets: usize,
    /// Seed of subject and case generation.
    pub data_seed: u64,
    pub morphology: MorphologyParams,
    pub camera: CameraParams,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            subjects: 6,
            frontal_views: 5,
            lateral_views: 5,
            profile: NoiseProfile::A,
            methods: vec![
                MethodConfig::full(DeConfig::default()),
                MethodConfig::oracle_direction(),
            ],
            seeds: vec![0, 1, 2],
            direction_sets: 5,
            data_seed: 0,
            morphology: MorphologyParams::default(),
            camera: CameraParams::default(),
        }
    }
}

/// Subjects and photographs of an experiment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub subjects: Vec<SyntheticSubject>,
    pub cases: Vec<CaseBundle>,
}

pub fn subject_id(k: usize) -> String {
    format!("subject_{k:03}")
}

/// Deterministic subject seed `k` under `data_seed`.
pub fn subject_seed(data_seed: u64, k: usize) -> u64 {
    data_seed.wrapping_mul(1_000_003).wrapping_add(k as u64)
}

/// Deterministic case seed.
pub fn case_seed(data_seed: u64, subject: usize, view: usize) -> u64 {
    data_seed
        .wrapping_mul(7_919)
        .wrapping_add(((subject as u64) << 20) | view as u64)
        ^ 0x5eed_ca5e
}

/// View `v` of `frontal + lateral`: frontal first, laterals alternate left
/// and right.
pub fn view_looking(v: usize, frontal: usize) -> Looking {
    if v < frontal {
        Looking::Frontal
    } else if (v - frontal).is_multiple_of(2) {
        Looking::Left
    } else {
        Looking::Right
    }
}

/// Generates subjects and their photographs, with the profile's landmark
/// noise applied.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    subjects: usize,
    frontal: usize,
    lateral: usize,
    profile: NoiseProfile,
    data_seed: u64,
    morphology: &MorphologyParams,
    camera: &CameraParams,
    table: &ConeTable,
) -> Result<Dataset, EvalError> {
    let subs: Vec<SyntheticSubject> = (0..subjects)
        .into_par_iter()
        .map(|k| {
            generate_subject(
                &subject_id(k),
                subject_seed(data_seed, k),
                morphology,
                table,
            )
        })
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..subjects)
        .flat_map(|k| (0..frontal + lateral).map(move |v| (k, v)))
        .collect();
    let cases = jobs
        .into_par_iter()
        .map(|(k, v)| {
            let seed = case_seed(data_seed, k, v);
            let id = format!("{}_view_{v:02}", subject_id(k));
            let case = render_case(&id, &subs[k], view_looking(v, frontal), camera, seed)?;
            Ok(perturb_landmarks(
                &case,
                profile.landmark_noise_px(),
                seed ^ 0x0015_e000,
            ))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(Dataset {
        subjects: subs,
        cases,
    })
}

/// One photograph-skull superimposition in a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub profile: NoiseProfile,
    pub pose: String,
    pub photo_id: String,
    pub skull_id: String,
    pub seed: u64,
    pub direction_set: usize,
    pub positive: bool,
    pub score: f64,
    pub rank_of_true: usize,
    /// Only for the true pair.
    pub bpe_mm: Option<f64>,
    pub time_s: f64,
    pub implausible: bool,
    pub pct_pixels_outside: f64,
}

impl RunRecord {
    pub const CSV_HEADER: &'static str = "method,profile,pose,photo_id,skull_id,seed,direction_set,positive,score,rank_of_true,bpe_mm,time_s,implausible,pct_pixels_outside";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:?},{},{},{},{},{},{},{:e},{},{},{:.6},{},{:.6}",
            self.method,
            self.profile,
            self.pose,
            self.photo_id,
            self.skull_id,
            self.seed,
            self.direction_set,
            self.positive,
            self.score,
            self.rank_of_true,
            self.bpe_mm.map(|b| format!("{b:.6}")).unwrap_or_default(),
            self.time_s,
            self.implausible,
            self.pct_pixels_outside
        )
    }
}

pub fn pose_label(looking: Looking) -> &'static str {
    match looking.region() {
        RegionKind::ChinJaw => "frontal",
        RegionKind::Forehead => "lateral",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub pose: String,
    pub mean_rank: f64,
    pub mean_bpe_mm: f64,
    pub mean_time_s: f64,
    pub worst_implausible_pct: f64,
}

pub const SUMMARY_HEADER: &str =
    "method,pose,mean_rank,mean_bpe_mm,mean_time_s,worst_implausible_pct";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{:.4}\n",
            r.method, r.pose, r.mean_rank, r.mean_bpe_mm, r.mean_time_s, r.worst_implausible_pct
        ));
    }
    s
}

pub fn records_csv(records: &[RunRecord]) -> String {
    let mut s = format!("{}\n", RunRecord::CSV_HEADER);
    for r in records {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    s
}

/// Aggregates records per (method, pose). Mean rank and BPE run over true
/// pairs; the implausibility percentage is the share of true-pair overlays
/// with any skull pixel outside the face, maximized over (seed, direction
/// set) replicates.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.method.clone(), r.pose.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((method, pose), rs)| {
            let positives: Vec<&&RunRecord> = rs.iter().filter(|r| r.positive).collect();
            let n = positives.len().max(1) as f64;
            let mean_rank = positives.iter().map(|r| r.rank_of_true as f64).sum::<f64>() / n;
            let bpes: Vec<f64> = positives.iter().filter_map(|r| r.bpe_mm).collect();
            let mean_bpe_mm = if bpes.is_empty() {
                f64::NAN
            } else {
                bpes.iter().sum::<f64>() / bpes.len() as f64
            };
            let mean_time_s = rs.iter().map(|r| r.time_s).sum::<f64>() / rs.len() as f64;
            let mut replicates: BTreeMap<(u64, usize), (usize, usize)> = BTreeMap::new();
            for r in &positives {
                let e = replicates.entry((r.seed, r.direction_set)).or_default();
                e.0 += r.implausible as usize;
                e.1 += 1;
            }
            let worst_implausible_pct = replicates
                .values()
                .map(|(bad, all)| 100.0 * *bad as f64 / *all as f64)
                .fold(0.0, f64::max);
            SummaryRow {
                method,
                pose,
                mean_rank,
                mean_bpe_mm,
                mean_time_s,
                worst_implausible_pct,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

/// Runs every method against every (photo, skull, seed, direction set) of a
/// dataset. Records are ordered by method, photo, seed, set, skull.
pub fn run_suite(
    dataset: &Dataset,
    profile: NoiseProfile,
    methods: &[MethodConfig],
    seeds: &[u64],
    direction_sets: usize,
    table: &ConeTable,
) -> Result<SuiteResult, EvalError> {
    if dataset.subjects.is_empty() || seeds.is_empty() || methods.is_empty() {
        return Err(EvalError::InvalidSuite(
            "subjects, seeds and methods must be non-empty",
        ));
    }
    let sets = if profile.direction_noise_deg() > 0.0 {
        direction_sets.max(1)
    } else {
        1
    };
    // Skull databases per direction set.
    let dbs: Vec<Vec<SyntheticSubject>> = (0..sets)
        .map(|set| {
            dataset
                .subjects
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let seed = 0xd1_5eed_u64
                        .wrapping_mul(set as u64 + 1)
                        .wrapping_add(k as u64);
                    perturb_st_directions(s, profile.direction_noise_deg(), seed)
                })
                .collect()
        })
        .collect();
    let mut jobs = Vec::new();
    for (mi, _) in methods.iter().enumerate() {
        for (ci, _) in dataset.cases.iter().enumerate() {
            for &seed in seeds {
                for set in 0..sets {
                    for si in 0..dataset.subjects.len() {
                        jobs.push((mi, ci, seed, set, si));
                    }
                }
            }
        }
    }
    let outcomes: Vec<PairOutcome> = jobs
        .par_iter()
        .map(|&(mi, ci, seed, set, si)| {
            superimpose(&dataset.cases[ci], &dbs[set][si], &methods[mi], table, seed)
        })
        .collect();

    let mut records = Vec::with_capacity(jobs.len());
    for (chunk_jobs, chunk) in jobs
        .chunks(dataset.subjects.len())
        .zip(outcomes.chunks(dataset.subjects.len()))
    {
        let (mi, ci, seed, set, _) = chunk_jobs[0];
        let case = &dataset.cases[ci];
        let scores = chunk_jobs
            .iter()
            .zip(chunk)
            .map(|(j, o)| (dbs[set][j.4].subject_id.clone(), o.score))
            .collect();
        let rank = rank_scores(&case.case_id, &case.subject_id, scores)?;
        for (&(_, _, _, _, si), o) in chunk_jobs.iter().zip(chunk) {
            let skull = &dbs[set][si];
            let positive = skull.subject_id == case.subject_id;
            let plaus = match (&o.solution, &case.face_mask) {
                (Some(sol), Some(mask)) => {
                    plausibility_report(&sol.camera, &skull.skull_mesh, mask, positive)
                }
                _ => PlausibilityReport {
                    implausible: true,
                    pct_pixels_outside: 100.0,
                    is_positive_pair: positive,
                },
            };
            let bpe = match (&o.solution, positive) {
                (Some(sol), true) => case_bpe_mm(sol, case).ok(),
                _ => None,
            };
            records.push(RunRecord {
                method: methods[mi].name.clone(),
                profile,
                pose: pose_label(case.looking).to_string(),
                photo_id: case.case_id.clone(),
                skull_id: skull.subject_id.clone(),
                seed,
                direction_set: set,
                positive,
                score: o.score,
                rank_of_true: rank.rank_of_true,
                bpe_mm: bpe,
                time_s: o.time_s,
                implausible: plaus.implausible,
                pct_pixels_outside: plaus.pct_pixels_outside,
            });
        }
    }
    let summary = summarize(&records);
    Ok(SuiteResult { records, summary })
}

/// Generates the dataset described by `config` and runs the suite on it.
pub fn experiment_suite(config: &SuiteConfig, table: &ConeTable) -> Result<SuiteResult, EvalError> {
    if config.subjects < 2 {
        return Err(EvalError::InvalidSuite(
            "at least two subjects are required",
        ));
    }
    let data = generate_dataset(
        config.subjects,
        config.frontal_views,
        config.lateral_views,
        config.profile,
        config.data_seed,
        &config.morphology,
        &config.camera,
        table,
    )?;
    run_suite(
        &data,
        config.profile,
        &config.methods,
        &config.seeds,
        config.direction_sets,
        table,
    )
}
