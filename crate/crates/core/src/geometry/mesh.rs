use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use super::{GeometryError, Matrix3, Point3, Vector3};

/// Faces with an area below this (mm²) are treated as degenerate and dropped.
const MIN_FACE_AREA: f64 = 1e-12;

/// Indexed triangle mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Point3>,
    faces: Vec<[u32; 3]>,
}

impl TriMesh {
    /// Builds a mesh, rejecting out-of-range indices and silently dropping
    /// zero-area faces. A mesh without any face left is an error.
    pub fn new(vertices: Vec<Point3>, faces: Vec<[u32; 3]>) -> Result<Self, GeometryError> {
        let n = vertices.len();
        if let Some(v) = vertices
            .iter()
            .find(|v| !v.coords.iter().all(|c| c.is_finite()))
        {
            return Err(GeometryError::InvalidMesh(format!(
                "non-finite vertex {v:?}"
            )));
        }
        let mut kept = Vec::with_capacity(faces.len());
        for f in faces {
            if f.iter().any(|&i| i as usize >= n) {
                return Err(GeometryError::InvalidMesh(format!(
                    "face {f:?} indexes past {n} vertices"
                )));
            }
            if triangle_area(
                &vertices[f[0] as usize],
                &vertices[f[1] as usize],
                &vertices[f[2] as usize],
            ) > MIN_FACE_AREA
            {
                kept.push(f);
            }
        }
        if kept.is_empty() {
            return Err(GeometryError::InvalidMesh(
                "mesh has no non-degenerate face".into(),
            ));
        }
        Ok(Self {
            vertices,
            faces: kept,
        })
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn triangle(&self, i: usize) -> [Point3; 3] {
        let f = self.faces[i];
        [
            self.vertices[f[0] as usize],
            self.vertices[f[1] as usize],
            self.vertices[f[2] as usize],
        ]
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len())
            .map(|i| {
                let [a, b, c] = self.triangle(i);
                triangle_area(&a, &b, &c)
            })
            .sum()
    }

    /// Signed enclosed volume; positive for a closed mesh with outward
    /// counter-clockwise faces.
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|i| {
                let [a, b, c] = self.triangle(i);
                a.coords.dot(&b.coords.cross(&c.coords)) / 6.0
            })
            .sum()
    }

    /// True when every directed edge has exactly one opposite twin and the
    /// enclosed volume is positive, i.e. the mesh is a closed, consistently
    /// outward-oriented surface.
    pub fn is_closed_outward(&self) -> bool {
        let mut directed: HashMap<(u32, u32), u32> = HashMap::with_capacity(self.faces.len() * 3);
        for f in &self.faces {
            for k in 0..3 {
                *directed.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &count)| count == 1 && directed.get(&(b, a)) == Some(&1))
            && self.signed_volume() > 0.0
    }

    pub fn transformed(&self, rotation: &Matrix3, translation: &Vector3) -> Self {
        Self {
            vertices: self
                .vertices
                .iter()
                .map(|v| Point3::from(rotation * v.coords + translation))
                .collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn centroid(&self) -> Point3 {
        let sum = self
            .vertices
            .iter()
            .fold(Vector3::zeros(), |acc, v| acc + v.coords);
        Point3::from(sum / self.vertices.len() as f64)
    }

    /// Wavefront-style ASCII serialization (`v` and `f` records, 1-based).
    pub fn to_obj_string(&self) -> String {
        let mut out = String::with_capacity(self.vertices.len() * 40 + self.faces.len() * 20);
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        out
    }

    /// Parses `v`/`f` records. Polygonal faces are fan-triangulated; texture
    /// and normal indices (`f 1/2/3 ...`) are ignored.
    pub fn from_obj_str(text: &str) -> Result<Self, GeometryError> {
        let parse_err = |line: usize, reason: &str| GeometryError::Parse {
            format: "obj",
            reason: format!("line {}: {reason}", line + 1),
        };
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let xyz: Vec<f64> = it
                        .take(3)
                        .map(|s| {
                            s.parse::<f64>()
                                .map_err(|_| parse_err(ln, "bad coordinate"))
                        })
                        .collect::<Result<_, _>>()?;
                    if xyz.len() != 3 {
                        return Err(parse_err(ln, "vertex needs three coordinates"));
                    }
                    vertices.push(Point3::new(xyz[0], xyz[1], xyz[2]));
                }
                Some("f") => {
                    let idx: Vec<u32> = it
                        .map(|s| {
                            let head = s.split('/').next().unwrap_or("");
                            match head.parse::<i64>() {
                                Ok(i) if i > 0 => Ok((i - 1) as u32),
                                Ok(i) if i < 0 && (-i) as usize <= vertices.len() => {
                                    Ok((vertices.len() as i64 + i) as u32)
                                }
                                _ => Err(parse_err(ln, "bad face index")),
                            }
                        })
                        .collect::<Result<_, _>>()?;
                    if idx.len() < 3 {
                        return Err(parse_err(ln, "face needs at least three vertices"));
                    }
                    for k in 1..idx.len() - 1 {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Self::new(vertices, faces)
    }
}

pub(crate) fn triangle_area(a: &Point3, b: &Point3, c: &Point3) -> f64 {
    (b - a).cross(&(c - a)).norm() / 2.0
}

/// Oriented plane. Its positive half-space is the side the normal points to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub point: Point3,
    pub normal: Vector3,
}

impl Plane {
    pub fn new(point: Point3, normal: Vector3) -> Result<Self, GeometryError> {
        let normal = normal
            .try_normalize(1e-12)
            .ok_or(GeometryError::ZeroNormal)?;
        Ok(Self { point, normal })
    }

    pub fn signed_distance(&self, p: &Point3) -> f64 {
        self.normal.dot(&(p - self.point))
    }

    pub fn flipped(&self) -> Self {
        Self {
            point: self.point,
            normal: -self.normal,
        }
    }
}

/// Clips `mesh` to the intersection of the closed positive half-spaces of
/// `planes`. Straddling triangles are cut exactly at each plane; shared cut
/// edges produce shared vertices.
pub fn clip_to_half_spaces(mesh: &TriMesh, planes: &[Plane]) -> Result<TriMesh, GeometryError> {
    // Vertex ids below `n_orig` refer to input vertices, the rest to cut points.
    let n_orig = mesh.vertices.len() as u32;
    let mut extra: Vec<Point3> = Vec::new();
    let mut cuts: HashMap<(u32, u32, usize), u32> = HashMap::new();
    let mut out_faces: Vec<[u32; 3]> = Vec::with_capacity(mesh.faces.len());

    let mut poly: Vec<u32> = Vec::with_capacity(8);
    let mut next: Vec<u32> = Vec::with_capacity(8);
    for f in &mesh.faces {
        poly.clear();
        poly.extend_from_slice(f);
        for (pi, plane) in planes.iter().enumerate() {
            next.clear();
            let pos = |id: u32, extra: &Vec<Point3>| -> Point3 {
                if id < n_orig {
                    mesh.vertices[id as usize]
                } else {
                    extra[(id - n_orig) as usize]
                }
            };
            for k in 0..poly.len() {
                let a = poly[k];
                let b = poly[(k + 1) % poly.len()];
                let pa = pos(a, &extra);
                let pb = pos(b, &extra);
                let da = plane.signed_distance(&pa);
                let db = plane.signed_distance(&pb);
                if da >= 0.0 {
                    next.push(a);
                }
                if (da > 0.0 && db < 0.0) || (da < 0.0 && db > 0.0) {
                    let key = (a.min(b), a.max(b), pi);
                    let id = *cuts.entry(key).or_insert_with(|| {
                        // Interpolate from the lower id so both triangles
                        // sharing the edge get bit-identical points.
                        let (p0, d0, p1, d1) = if a < b {
                            (pa, da, pb, db)
                        } else {
                            (pb, db, pa, da)
                        };
                        let t = d0 / (d0 - d1);
                        let mut p = p0 + (p1 - p0) * t;
                        // Snap residual rounding onto the plane.
                        let r = plane.signed_distance(&p);
                        if r < 0.0 {
                            p -= plane.normal * r;
                        }
                        extra.push(p);
                        n_orig + extra.len() as u32 - 1
                    });
                    next.push(id);
                }
            }
            std::mem::swap(&mut poly, &mut next);
            if poly.len() < 3 {
                break;
            }
        }
        if poly.len() >= 3 {
            for k in 1..poly.len() - 1 {
                out_faces.push([poly[0], poly[k], poly[k + 1]]);
            }
        }
    }

    // Compact: keep used vertices, original ones first in input order.
    let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
    for f in &out_faces {
        for &i in f {
            remap.insert(i, 0);
        }
    }
    let mut vertices = Vec::with_capacity(remap.len());
    for (old, new) in remap.iter_mut() {
        *new = vertices.len() as u32;
        vertices.push(if *old < n_orig {
            mesh.vertices[*old as usize]
        } else {
            extra[(*old - n_orig) as usize]
        });
    }
    let faces: Vec<[u32; 3]> = out_faces
        .iter()
        .map(|f| [remap[&f[0]], remap[&f[1]], remap[&f[2]]])
        .collect();
    TriMesh::new(vertices, faces).map_err(|_| GeometryError::EmptyResult)
}

/// Keeps the part of `mesh` lying in the closed slab bounded by planes `a`
/// and `b`. Each plane is oriented towards the other one, so the input
/// normals' signs do not matter.
pub fn cut_mesh_between_planes(
    mesh: &TriMesh,
    a: &Plane,
    b: &Plane,
) -> Result<TriMesh, GeometryError> {
    let toward = |p: &Plane, q: &Plane| -> Option<Plane> {
        let d = p.signed_distance(&q.point);
        if d.abs() <= 1e-12 {
            None
        } else if d > 0.0 {
            Some(*p)
        } else {
            Some(p.flipped())
        }
    };
    let (pa, pb) = match (toward(a, b), toward(b, a)) {
        (Some(pa), Some(pb)) => (pa, pb),
        // Coincident planes: a zero-thickness slab holds no area.
        (None, None) if a.normal.cross(&b.normal).norm() < 1e-9 => {
            return Err(GeometryError::EmptyResult)
        }
        // Intersecting planes through each other's reference point: orient
        // both along their given normals.
        (pa, pb) => (pa.unwrap_or(*a), pb.unwrap_or(*b)),
    };
    clip_to_half_spaces(mesh, &[pa, pb])
}
