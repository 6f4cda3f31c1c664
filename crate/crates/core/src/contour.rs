//! Skull and face contour curves and the parallelism penalty between them.
//!
//! Frontal views compare the lower chin-jaw outline; lateral views compare
//! the forehead profile. A curve goes through four steps: the region is cut
//! out of the mesh, its silhouette is rendered and scanned for the relevant
//! boundary, the raw pixels are cleaned into one ordered 8-connected path,
//! and finally the skull and face curves are trimmed to a common extent and
//! matched pixel to pixel.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    clip_to_half_spaces, cut_mesh_between_planes, rasterize_window, GeometryError, Pinhole, Plane,
    Point2, Point3, TriMesh, Vector3,
};

/// Fixed cost of one pair on the wrong side of its counterpart.
pub const SIDE_VIOLATION_PENALTY: f64 = 1000.0;
/// Endpoint deviation, as a fraction of the mean distance, that counts as
/// convergence or divergence.
pub const CONVERGENCE_FRACTION: f64 = 0.25;
/// Fraction of a curve's length used to estimate its terminal normal.
pub const TERMINAL_FRACTION: f64 = 0.2;
/// A terminal ray passing this close to the counterpart's endpoint counts as
/// hitting it, absorbing pixel quantization of nearly aligned ends.
pub const END_HIT_TOLERANCE_PX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContourError {
    #[error("landmark {0} is required for this region")]
    MissingLandmark(String),
    #[error("region is empty")]
    EmptyResult,
    #[error("projected region yields fewer than two boundary pixels")]
    TooSmallProjection,
    #[error("every pixel of the curve is isolated")]
    AllIsolated,
    #[error("terminal normals do not meet the other curve")]
    NoIntersection,
    #[error("curve pairing is empty")]
    EmptyPairing,
    #[error("view {looking:?} does not fit region {kind:?}")]
    ViewMismatch { kind: RegionKind, looking: Looking },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionKind {
    ChinJaw,
    Forehead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Looking {
    Frontal,
    /// Face turned towards the image's left edge (profile on the left).
    Left,
    /// Face turned towards the image's right edge.
    Right,
}

impl Looking {
    pub fn region(self) -> RegionKind {
        match self {
            Looking::Frontal => RegionKind::ChinJaw,
            Looking::Left | Looking::Right => RegionKind::Forehead,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Surface {
    Skull,
    Face,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i32; 2]", into = "[i32; 2]")]
pub struct Pixel {
    pub u: i32,
    pub v: i32,
}

impl Pixel {
    pub fn new(u: i32, v: i32) -> Self {
        Self { u, v }
    }

    pub fn to_point(self) -> Point2 {
        Point2::new(self.u as f64, self.v as f64)
    }

    fn dist2(self, o: Pixel) -> i64 {
        let du = (self.u - o.u) as i64;
        let dv = (self.v - o.v) as i64;
        du * du + dv * dv
    }

    fn chebyshev(self, o: Pixel) -> i32 {
        (self.u - o.u).abs().max((self.v - o.v).abs())
    }
}

impl From<[i32; 2]> for Pixel {
    fn from([u, v]: [i32; 2]) -> Self {
        Self { u, v }
    }
}

impl From<Pixel> for [i32; 2] {
    fn from(p: Pixel) -> Self {
        [p.u, p.v]
    }
}

/// Open pixel path.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PixelCurve {
    pub points: Vec<Pixel>,
}

impl PixelCurve {
    pub fn new(points: Vec<Pixel>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// True when consecutive points are distinct 8-neighbours.
    pub fn is_connected(&self) -> bool {
        self.points.windows(2).all(|w| w[0].chebyshev(w[1]) == 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveMatch {
    pub skull_index: usize,
    pub face_index: usize,
    pub s: Pixel,
    pub p: Pixel,
    pub d: f64,
}

/// Matched skull/face pixels ordered along the skull curve.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CurvePairing {
    pub matches: Vec<CurveMatch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PllBreakdown {
    pub delta_d: f64,
    pub p_conv: f64,
    pub p_int: f64,
    pub total: f64,
}

fn landmark<'a>(map: &'a BTreeMap<String, Point3>, name: &str) -> Result<&'a Point3, ContourError> {
    map.get(name)
        .ok_or_else(|| ContourError::MissingLandmark(name.to_string()))
}

/// Landmark names bounding a region on the given surface.
pub fn region_landmarks(kind: RegionKind, surface: Surface) -> &'static [&'static str] {
    match (kind, surface) {
        (RegionKind::Forehead, _) => &["glabella", "metopion"],
        (RegionKind::ChinJaw, Surface::Skull) => {
            &["infradentale", "mental_foramen_l", "mental_foramen_r"]
        }
        (RegionKind::ChinJaw, Surface::Face) => &["stomion", "cheilion_l", "cheilion_r"],
    }
}

/// Cuts the anatomical region out of a skull or face mesh.
///
/// Forehead: the slab between the two planes through glabella and metopion
/// that are parallel to the Frankfurt plane. Chin-jaw: below the
/// Frankfurt-parallel plane through the upper landmark and between the two
/// sagittal planes through the lateral pair.
pub fn segment_region(
    mesh: &TriMesh,
    kind: RegionKind,
    surface: Surface,
    landmarks: &BTreeMap<String, Point3>,
    frankfurt_normal: &Vector3,
) -> Result<TriMesh, ContourError> {
    let names = region_landmarks(kind, surface);
    let up = frankfurt_normal
        .try_normalize(1e-12)
        .ok_or(GeometryError::ZeroNormal)?;
    let cut = match kind {
        RegionKind::Forehead => {
            let a = Plane::new(*landmark(landmarks, names[0])?, up)?;
            let b = Plane::new(*landmark(landmarks, names[1])?, up)?;
            if (a.signed_distance(&b.point)).abs() < 1e-9 {
                return Err(ContourError::EmptyResult);
            }
            cut_mesh_between_planes(mesh, &a, &b)
        }
        RegionKind::ChinJaw => {
            let top = *landmark(landmarks, names[0])?;
            let left = *landmark(landmarks, names[1])?;
            let right = *landmark(landmarks, names[2])?;
            let across = right - left;
            let lateral = (across - up * across.dot(&up))
                .try_normalize(1e-12)
                .ok_or(ContourError::EmptyResult)?;
            let planes = [
                Plane::new(top, -up)?,
                Plane::new(left, lateral)?,
                Plane::new(right, -lateral)?,
            ];
            clip_to_half_spaces(mesh, &planes)
        }
    };
    cut.map_err(|e| match e {
        GeometryError::EmptyResult => ContourError::EmptyResult,
        other => other.into(),
    })
}

/// Scans the rendered region for the boundary relevant to `looking`.
///
/// Frontal (chin-jaw): the lowest pixel of every column. Lateral
/// (forehead): the outermost pixel of every row on the facing side, kept
/// only between the image rows in `span` (the projected glabella and
/// metopion heights, in either order).
pub fn detect_curve(
    region: &TriMesh,
    camera: &Pinhole,
    looking: Looking,
    span: Option<(f64, f64)>,
) -> Result<PixelCurve, ContourError> {
    let win = rasterize_window(region, camera, false);
    let (w, h) = (win.mask.width(), win.mask.height());
    let bits = win.mask.bits();
    let mut points = Vec::new();
    match looking {
        Looking::Frontal => {
            for x in 0..w {
                if let Some(y) = (0..h).rev().find(|&y| bits[y * w + x]) {
                    points.push(Pixel::new((x + win.x0) as i32, (y + win.y0) as i32));
                }
            }
        }
        Looking::Left | Looking::Right => {
            let (lo, hi) = match span {
                Some((a, b)) => (a.min(b), a.max(b)),
                None => (f64::NEG_INFINITY, f64::INFINITY),
            };
            for y in 0..h {
                let v = (y + win.y0) as f64;
                if v < lo || v > hi {
                    continue;
                }
                let row = &bits[y * w..(y + 1) * w];
                let x = if looking == Looking::Left {
                    row.iter().position(|&b| b)
                } else {
                    row.iter().rposition(|&b| b)
                };
                if let Some(x) = x {
                    points.push(Pixel::new((x + win.x0) as i32, (y + win.y0) as i32));
                }
            }
        }
    }
    if points.len() < 2 {
        return Err(ContourError::TooSmallProjection);
    }
    Ok(PixelCurve::new(points))
}

const NEIGHBOURS_4: [(i32, i32); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
const NEIGHBOURS_8: [(i32, i32); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];

/// Points of the straight segment from `a` to `b`, both included.
pub fn bresenham(a: Pixel, b: Pixel) -> Vec<Pixel> {
    let (mut x, mut y) = (a.u, a.v);
    let dx = (b.u - a.u).abs();
    let dy = -(b.v - a.v).abs();
    let sx = if a.u < b.u { 1 } else { -1 };
    let sy = if a.v < b.v { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = vec![a];
    while (x, y) != (b.u, b.v) {
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
        out.push(Pixel::new(x, y));
    }
    out
}

/// Cleans a raw boundary into one ordered 8-connected path.
///
/// Pixels with no other pixel within Chebyshev distance 2 are dropped. Each
/// remaining 8-connected fragment is walked from its lowest point along the
/// dominant axis (stepping to 4-neighbours first, then to the neighbour with
/// the fewest onward options); side branches the walk cannot reach are
/// dropped. Fragments are then chained in dominant-axis order and the gaps
/// bridged with straight pixel segments.
pub fn refine_curve(raw: &PixelCurve) -> Result<PixelCurve, ContourError> {
    let mut unique: Vec<Pixel> = raw.points.clone();
    unique.sort();
    unique.dedup();
    let all: HashSet<Pixel> = unique.iter().copied().collect();
    let kept: Vec<Pixel> = unique
        .iter()
        .copied()
        .filter(|p| {
            (-2..=2).any(|du| {
                (-2..=2)
                    .any(|dv| (du, dv) != (0, 0) && all.contains(&Pixel::new(p.u + du, p.v + dv)))
            })
        })
        .collect();
    if kept.is_empty() {
        return Err(ContourError::AllIsolated);
    }
    let (umin, umax) = kept
        .iter()
        .fold((i32::MAX, i32::MIN), |(a, b), p| (a.min(p.u), b.max(p.u)));
    let (vmin, vmax) = kept
        .iter()
        .fold((i32::MAX, i32::MIN), |(a, b), p| (a.min(p.v), b.max(p.v)));
    let along_u = umax - umin >= vmax - vmin;
    let key = |p: &Pixel| if along_u { (p.u, p.v) } else { (p.v, p.u) };

    let mut remaining: HashSet<Pixel> = kept.iter().copied().collect();
    let mut fragments: Vec<Vec<Pixel>> = Vec::new();
    let mut order = kept.clone();
    order.sort_by_key(key);
    for seed in order {
        if !remaining.contains(&seed) {
            continue;
        }
        let component = flood(seed, &remaining);
        for p in &component {
            remaining.remove(p);
        }
        let start = *component
            .iter()
            .min_by_key(|p| key(p))
            .expect("component is non-empty");
        let set: HashSet<Pixel> = component.into_iter().collect();
        let mut path = walk(start, &set);
        if key(&path[0]) > key(path.last().expect("path is non-empty")) {
            path.reverse();
        }
        fragments.push(path);
    }
    fragments.sort_by_key(|f| key(&f[0]));

    let mut points: Vec<Pixel> = Vec::new();
    for frag in fragments {
        if let Some(&last) = points.last() {
            let bridge = bresenham(last, frag[0]);
            points.extend_from_slice(&bridge[1..bridge.len() - 1]);
        }
        for p in frag {
            if points.last() != Some(&p) {
                points.push(p);
            }
        }
    }
    Ok(PixelCurve::new(points))
}

fn flood(seed: Pixel, pool: &HashSet<Pixel>) -> Vec<Pixel> {
    let mut seen = HashSet::from([seed]);
    let mut stack = vec![seed];
    let mut out = Vec::new();
    while let Some(p) = stack.pop() {
        out.push(p);
        for (du, dv) in NEIGHBOURS_8 {
            let q = Pixel::new(p.u + du, p.v + dv);
            if pool.contains(&q) && seen.insert(q) {
                stack.push(q);
            }
        }
    }
    out
}

fn walk(start: Pixel, set: &HashSet<Pixel>) -> Vec<Pixel> {
    let mut visited = HashSet::from([start]);
    let mut path = vec![start];
    let mut cur = start;
    let unvisited_degree = |p: Pixel, visited: &HashSet<Pixel>| {
        NEIGHBOURS_8
            .iter()
            .filter(|(du, dv)| {
                let q = Pixel::new(p.u + du, p.v + dv);
                set.contains(&q) && !visited.contains(&q)
            })
            .count()
    };
    loop {
        let mut best: Option<(usize, usize, Pixel)> = None;
        for (rank, group) in [&NEIGHBOURS_4[..], &NEIGHBOURS_8[4..]].iter().enumerate() {
            for (du, dv) in group.iter() {
                let q = Pixel::new(cur.u + du, cur.v + dv);
                if !set.contains(&q) || visited.contains(&q) {
                    continue;
                }
                let cand = (rank, unvisited_degree(q, &visited), q);
                if best.is_none_or(|b| (cand.0, cand.1, cand.2) < b) {
                    best = Some(cand);
                }
            }
        }
        let Some((_, _, next)) = best else { break };
        visited.insert(next);
        path.push(next);
        cur = next;
    }
    path
}

/// Averaged unit normal over the terminal fraction of `c` at one end,
/// oriented towards `towards` (the counterpart's point nearest that end).
fn terminal_normal(
    c: &[Pixel],
    at_start: bool,
    towards: Point2,
) -> Option<(Point2, nalgebra::Vector2<f64>)> {
    let n = c.len();
    let k = ((TERMINAL_FRACTION * n as f64).ceil() as usize).clamp(2, n);
    let (end, inner) = if at_start {
        (c[0], c[k - 1])
    } else {
        (c[n - 1], c[n - k])
    };
    let t = inner.to_point() - end.to_point();
    let t = t.try_normalize(1e-12)?;
    let mut normal = nalgebra::Vector2::new(-t.y, t.x);
    let origin = end.to_point();
    if normal.dot(&(towards - origin)) < 0.0 {
        normal = -normal;
    }
    Some((origin, normal))
}

/// Parameter along `c` (segment index plus fraction) where the ray first
/// meets the polyline, or else the endpoint it passes within
/// [`END_HIT_TOLERANCE_PX`] of.
fn ray_hit(origin: Point2, dir: nalgebra::Vector2<f64>, c: &[Pixel]) -> Option<f64> {
    let cross = |a: nalgebra::Vector2<f64>, b: nalgebra::Vector2<f64>| a.x * b.y - a.y * b.x;
    let mut best: Option<(f64, f64)> = None;
    let mut consider = |t: f64, s: f64| {
        if t >= -1e-9 && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, s));
        }
    };
    if c.len() == 1 {
        return None;
    }
    for (i, w) in c.windows(2).enumerate() {
        let a = w[0].to_point();
        let e = w[1].to_point() - a;
        let denom = cross(dir, e);
        let ao = a - origin;
        if denom.abs() < 1e-12 {
            continue;
        }
        let t = cross(ao, e) / denom;
        let s = cross(ao, dir) / denom;
        if (-1e-9..=1.0 + 1e-9).contains(&s) {
            consider(t, i as f64 + s.clamp(0.0, 1.0));
        }
    }
    if let Some((_, s)) = best {
        return Some(s);
    }
    let last = c.len() - 1;
    [(0, c[0]), (last, c[last])]
        .into_iter()
        .filter_map(|(idx, p)| {
            let w = p.to_point() - origin;
            let t = w.dot(&dir);
            (t >= -1e-9 && cross(dir, w).abs() <= END_HIT_TOLERANCE_PX).then_some((t, idx as f64))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, s)| s)
}

/// Point of `c` closest to `q`; ties go to the lower index.
fn nearest_point(c: &[Pixel], q: Pixel) -> Point2 {
    let mut best = c[0];
    for &p in c {
        if p.dist2(q) < best.dist2(q) {
            best = p;
        }
    }
    best.to_point()
}

/// Cuts both curves to a common extent.
///
/// At each end, the averaged normal over the terminal 20% of one curve is
/// cast towards the other curve; where it hits, the other curve is cut. A
/// curve that already ends inside its counterpart's extent is left alone at
/// that end. Curves are matched end to end after orienting the face curve
/// like the skull curve.
pub fn trim_curves(
    skull: &PixelCurve,
    face: &PixelCurve,
) -> Result<(PixelCurve, PixelCurve), ContourError> {
    if skull.len() < 2 || face.len() < 2 {
        return Err(ContourError::NoIntersection);
    }
    let a = &skull.points;
    let mut b = face.points.clone();
    let d = |p: Pixel, q: Pixel| (p.dist2(q) as f64).sqrt();
    let (an, bn) = (a.len(), b.len());
    let reversed =
        d(a[0], b[0]) + d(a[an - 1], b[bn - 1]) > d(a[0], b[bn - 1]) + d(a[an - 1], b[0]);
    if reversed {
        b.reverse();
    }
    let mut a_range = (0usize, an - 1);
    let mut b_range = (0usize, bn - 1);
    for at_start in [true, false] {
        let (ea, eb) = if at_start {
            (a[0], b[0])
        } else {
            (a[an - 1], b[bn - 1])
        };
        let hit_b = terminal_normal(a, at_start, nearest_point(&b, ea))
            .and_then(|(o, n)| ray_hit(o, n, &b));
        let hit_a =
            terminal_normal(&b, at_start, nearest_point(a, eb)).and_then(|(o, n)| ray_hit(o, n, a));
        if hit_a.is_none() && hit_b.is_none() {
            return Err(ContourError::NoIntersection);
        }
        if let Some(s) = hit_b {
            let idx = s.round() as usize;
            if at_start {
                b_range.0 = b_range.0.max(idx);
            } else {
                b_range.1 = b_range.1.min(idx);
            }
        }
        if let Some(s) = hit_a {
            let idx = s.round() as usize;
            if at_start {
                a_range.0 = a_range.0.max(idx);
            } else {
                a_range.1 = a_range.1.min(idx);
            }
        }
    }
    let fix = |(lo, hi): (usize, usize), n: usize| {
        if hi > lo {
            (lo, hi)
        } else {
            let mid = lo.min(n - 2);
            (mid, mid + 1)
        }
    };
    let (a0, a1) = fix(a_range, an);
    let (b0, b1) = fix(b_range, bn);
    let mut bt = b[b0..=b1].to_vec();
    if reversed {
        bt.reverse();
    }
    Ok((PixelCurve::new(a[a0..=a1].to_vec()), PixelCurve::new(bt)))
}

/// Nearest-point index lookup over a fixed pixel set.
struct NearestIndex {
    /// `(u, v, original index)` sorted by `u`, then index.
    sorted: Vec<(i32, i32, usize)>,
}

impl NearestIndex {
    fn new(points: &[Pixel]) -> Self {
        let mut sorted: Vec<(i32, i32, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (p.u, p.v, i))
            .collect();
        sorted.sort_unstable();
        Self { sorted }
    }

    /// Nearest point; ties go to the lowest original index.
    fn nearest(&self, q: Pixel) -> (usize, i64) {
        let start = self.sorted.partition_point(|&(u, _, _)| u < q.u);
        let mut best = (i64::MAX, usize::MAX);
        let mut check = |&(u, v, i): &(i32, i32, usize)| {
            let du = (u - q.u) as i64;
            if du * du > best.0 {
                return false;
            }
            let dv = (v - q.v) as i64;
            let cand = (du * du + dv * dv, i);
            if cand < best {
                best = cand;
            }
            true
        };
        for e in &self.sorted[start..] {
            if !check(e) {
                break;
            }
        }
        for e in self.sorted[..start].iter().rev() {
            if !check(e) {
                break;
            }
        }
        (best.1, best.0)
    }
}

/// Pairs every skull pixel with its nearest face pixel, then every face
/// pixel left unpaired with its nearest skull pixel. Ties go to the lower
/// curve index; the result is ordered by skull index.
pub fn match_curves(skull: &PixelCurve, face: &PixelCurve) -> CurvePairing {
    if skull.is_empty() || face.is_empty() {
        return CurvePairing::default();
    }
    let face_index = NearestIndex::new(&face.points);
    let mut used = vec![false; face.len()];
    let mut matches: Vec<CurveMatch> = Vec::with_capacity(skull.len() + face.len() / 4);
    for (i, &s) in skull.points.iter().enumerate() {
        let (j, d2) = face_index.nearest(s);
        used[j] = true;
        matches.push(CurveMatch {
            skull_index: i,
            face_index: j,
            s,
            p: face.points[j],
            d: (d2 as f64).sqrt(),
        });
    }
    let skull_index = NearestIndex::new(&skull.points);
    for (j, &p) in face.points.iter().enumerate() {
        if used[j] {
            continue;
        }
        let (i, d2) = skull_index.nearest(p);
        matches.push(CurveMatch {
            skull_index: i,
            face_index: j,
            s: skull.points[i],
            p,
            d: (d2 as f64).sqrt(),
        });
    }
    matches.sort_by_key(|m| m.skull_index);
    CurvePairing { matches }
}

/// `Δd + P_conv + P_int` over a curve pairing.
///
/// `Δd` is the spread of the pair distances. With `d̄` their mean and
/// `δ₁`, `δ_N` the deviations of the first and last pair, `P_conv` is
/// `2(δ₁ + δ_N)` when both exceed `0.25 d̄`, `4 δ_e` when only end `e` does,
/// and 0 otherwise. `P_int` charges 1000 per pair with the skull on the
/// wrong side: at or below the face in frontal views, at or beyond the
/// profile in lateral ones.
pub fn parallelism_penalty(
    pairing: &CurvePairing,
    kind: RegionKind,
    looking: Looking,
) -> Result<PllBreakdown, ContourError> {
    if looking.region() != kind {
        return Err(ContourError::ViewMismatch { kind, looking });
    }
    let m = &pairing.matches;
    if m.is_empty() {
        return Err(ContourError::EmptyPairing);
    }
    let (min, max, sum) = m
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY, 0.0), |(lo, hi, s), x| {
            (lo.min(x.d), hi.max(x.d), s + x.d)
        });
    let mean = sum / m.len() as f64;
    let delta_d = max - min;
    let d1 = (m[0].d - mean).abs();
    let dn = (m[m.len() - 1].d - mean).abs();
    let thr = CONVERGENCE_FRACTION * mean;
    let p_conv = match (d1 > thr, dn > thr) {
        (true, true) => 2.0 * (d1 + dn),
        (true, false) => 4.0 * d1,
        (false, true) => 4.0 * dn,
        (false, false) => 0.0,
    };
    let violations = m
        .iter()
        .filter(|x| match looking {
            Looking::Frontal => x.s.v >= x.p.v,
            Looking::Left => x.s.u <= x.p.u,
            Looking::Right => x.s.u >= x.p.u,
        })
        .count();
    let p_int = SIDE_VIOLATION_PENALTY * violations as f64;
    Ok(PllBreakdown {
        delta_d,
        p_conv,
        p_int,
        total: delta_d + p_conv + p_int,
    })
}

/// Segmented region to refined curve in one call.
pub fn region_curve(
    region: &TriMesh,
    camera: &Pinhole,
    looking: Looking,
    span: Option<(f64, f64)>,
) -> Result<PixelCurve, ContourError> {
    refine_curve(&detect_curve(region, camera, looking, span)?)
}

/// Trim, match and score a skull curve against a face curve.
pub fn curve_penalty(
    skull: &PixelCurve,
    face: &PixelCurve,
    looking: Looking,
) -> Result<PllBreakdown, ContourError> {
    let (s, f) = trim_curves(skull, face)?;
    parallelism_penalty(&match_curves(&s, &f), looking.region(), looking)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(u0: i32, u1: i32, v: i32) -> PixelCurve {
        PixelCurve::new((u0..=u1).map(|u| Pixel::new(u, v)).collect())
    }

    #[test]
    fn bresenham_endpoints_and_connectivity() {
        let l = bresenham(Pixel::new(0, 0), Pixel::new(7, -3));
        assert_eq!(l[0], Pixel::new(0, 0));
        assert_eq!(*l.last().unwrap(), Pixel::new(7, -3));
        assert!(PixelCurve::new(l).is_connected());
    }

    #[test]
    fn refine_keeps_continuous_curve() {
        let c = line(3, 40, 10);
        assert_eq!(refine_curve(&c).unwrap(), c);
    }

    #[test]
    fn refine_bridges_gap_and_drops_speck() {
        let mut pts: Vec<Pixel> = (0..=20).map(|u| Pixel::new(u, 5)).collect();
        pts.extend((31..=50).map(|u| Pixel::new(u, 8)));
        pts.push(Pixel::new(25, 30));
        let r = refine_curve(&PixelCurve::new(pts)).unwrap();
        assert!(r.is_connected());
        assert!(!r.points.contains(&Pixel::new(25, 30)));
        for p in r.points.iter().filter(|p| p.u > 20 && p.u < 31) {
            // Distance to the straight segment (20,5)-(31,8).
            let (a, b) = (
                nalgebra::Vector2::new(20.0, 5.0),
                nalgebra::Vector2::new(31.0, 8.0),
            );
            let x = nalgebra::Vector2::new(p.u as f64, p.v as f64);
            let e = (b - a).normalize();
            let r = x - a;
            assert!((r - e * r.dot(&e)).norm() <= 1.0);
        }
    }

    #[test]
    fn refine_rejects_all_isolated() {
        let c = PixelCurve::new(vec![Pixel::new(0, 0), Pixel::new(10, 10)]);
        assert_eq!(refine_curve(&c), Err(ContourError::AllIsolated));
    }

    #[test]
    fn trim_equal_segments_unchanged() {
        let (a, b) = (line(0, 40, 0), line(0, 40, 10));
        let (ta, tb) = trim_curves(&a, &b).unwrap();
        assert_eq!((ta, tb), (a, b));
    }

    #[test]
    fn trim_longer_segment() {
        let a = line(0, 40, 0);
        let b = line(-6, 46, 10);
        let (ta, tb) = trim_curves(&a, &b).unwrap();
        assert_eq!(ta, a);
        assert!(tb.points[0].u.abs() <= 1);
        assert!((tb.points.last().unwrap().u - 40).abs() <= 1);
        // Reversed face curve comes back in its original orientation.
        let mut rb = b.clone();
        rb.points.reverse();
        let (_, trb) = trim_curves(&a, &rb).unwrap();
        assert!(trb.points[0].u > trb.points.last().unwrap().u);
    }

    #[test]
    fn matching_constant_offset() {
        let m = match_curves(&line(0, 30, 0), &line(0, 30, 7));
        assert_eq!(m.matches.len(), 31);
        assert!(m.matches.iter().all(|x| x.d == 7.0));
        let same = match_curves(&line(0, 30, 0), &line(0, 30, 0));
        assert!(same.matches.iter().all(|x| x.d == 0.0));
    }

    fn pairing(ds: &[f64], skull_above: bool) -> CurvePairing {
        CurvePairing {
            matches: ds
                .iter()
                .enumerate()
                .map(|(i, &d)| CurveMatch {
                    skull_index: i,
                    face_index: i,
                    s: Pixel::new(i as i32, if skull_above { 0 } else { 20 }),
                    p: Pixel::new(i as i32, 10),
                    d,
                })
                .collect(),
        }
    }

    #[test]
    fn penalty_examples() {
        let p = parallelism_penalty(
            &pairing(&[5.0; 12], true),
            RegionKind::ChinJaw,
            Looking::Frontal,
        )
        .unwrap();
        assert_eq!(p, PllBreakdown::default());
        let mut ds = vec![10.0; 19];
        ds.push(16.0);
        let p = parallelism_penalty(&pairing(&ds, true), RegionKind::ChinJaw, Looking::Frontal)
            .unwrap();
        assert!((p.p_conv - 4.0 * 5.7).abs() < 1e-9);
        assert!((p.delta_d - 6.0).abs() < 1e-12);
        let p = parallelism_penalty(
            &pairing(&[3.0; 3], false),
            RegionKind::ChinJaw,
            Looking::Frontal,
        )
        .unwrap();
        assert_eq!(p.p_int, 3000.0);
        assert!(parallelism_penalty(
            &pairing(&[1.0], true),
            RegionKind::Forehead,
            Looking::Frontal
        )
        .is_err());
    }

    #[test]
    fn pixel_serializes_as_pair() {
        let c = PixelCurve::new(vec![Pixel::new(1, 2), Pixel::new(2, 3)]);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(s, r#"{"points":[[1,2],[2,3]]}"#);
        assert_eq!(serde_json::from_str::<PixelCurve>(&s).unwrap(), c);
    }
}
