use std::fmt::Write as _;

use nalgebra::Vector2;

use super::{GeometryError, Pinhole, Point2, TriMesh, Vector3};

/// Geometry closer than this to the camera plane (mm) is clipped away.
const NEAR_MM: f64 = 1e-3;

/// Row-major binary image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn clear(&mut self) {
        self.bits.fill(false);
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Set pixels as `(x, y)` pairs in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    fn check_same_size(&self, other: &Self) -> Result<(), GeometryError> {
        if self.width != other.width || self.height != other.height {
            return Err(GeometryError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    pub fn union(&self, other: &Self) -> Result<Self, GeometryError> {
        self.check_same_size(other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a || *b)
                .collect(),
        })
    }

    /// Number of pixels set here and clear in `other`.
    pub fn count_outside(&self, other: &Self) -> Result<usize, GeometryError> {
        self.check_same_size(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && !**b)
            .count())
    }

    /// ASCII portable graymap (P2), 0 for clear and 255 for set pixels.
    pub fn to_pgm(&self) -> String {
        let mut out = String::with_capacity(self.bits.len() * 4 + 32);
        let _ = writeln!(out, "P2\n{} {}\n255", self.width, self.height);
        for row in self.bits.chunks(self.width.max(1)) {
            let line: Vec<&str> = row.iter().map(|&b| if b { "255" } else { "0" }).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Reads an ASCII (P2) or binary (P5, 8-bit) graymap; any non-zero
    /// sample is a set pixel.
    pub fn from_pgm(data: &[u8]) -> Result<Self, GeometryError> {
        let err = |reason: &str| GeometryError::Parse {
            format: "pgm",
            reason: reason.into(),
        };
        let mut pos = 0usize;
        let mut header = Vec::with_capacity(4);
        while header.len() < 4 {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < data.len() && !data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(err("truncated header"));
            }
            header.push(std::str::from_utf8(&data[start..pos]).map_err(|_| err("header"))?);
        }
        let magic = header[0];
        let width: usize = header[1].parse().map_err(|_| err("width"))?;
        let height: usize = header[2].parse().map_err(|_| err("height"))?;
        let maxval: usize = header[3].parse().map_err(|_| err("maxval"))?;
        let n = width * height;
        let bits = match magic {
            "P2" => {
                let body = std::str::from_utf8(&data[pos..]).map_err(|_| err("body"))?;
                let bits: Vec<bool> = body
                    .split_whitespace()
                    .map(|s| {
                        s.parse::<usize>()
                            .map(|v| v != 0)
                            .map_err(|_| err("sample"))
                    })
                    .collect::<Result<_, _>>()?;
                if bits.len() != n {
                    return Err(err("sample count does not match dimensions"));
                }
                bits
            }
            "P5" => {
                if maxval > 255 {
                    return Err(err("16-bit P5 is not supported"));
                }
                let body = &data[pos + 1..];
                if body.len() < n {
                    return Err(err("truncated raster"));
                }
                body[..n].iter().map(|&b| b != 0).collect()
            }
            _ => return Err(err("unsupported magic number")),
        };
        Ok(Self {
            width,
            height,
            bits,
        })
    }
}

/// `ceil` via integer truncation; plain `f64::ceil` is a library call on
/// baseline x86-64.
#[inline]
fn fast_ceil(x: f64) -> i64 {
    let i = x as i64;
    if (i as f64) < x {
        i + 1
    } else {
        i
    }
}

#[inline]
fn fast_floor(x: f64) -> i64 {
    let i = x as i64;
    if (i as f64) > x {
        i - 1
    } else {
        i
    }
}

/// Sets every pixel whose centre lies inside the closed triangle `a b c`.
pub(crate) fn fill_triangle(mask: &mut BinaryMask, a: Point2, b: Point2, c: Point2) {
    let (w, h) = (mask.width as i64, mask.height as i64);
    if w == 0 || h == 0 {
        return;
    }
    // Sort by y: a on top, c at the bottom.
    let (mut a, mut b, mut c) = (a, b, c);
    if a.y > b.y {
        std::mem::swap(&mut a, &mut b);
    }
    if b.y > c.y {
        std::mem::swap(&mut b, &mut c);
    }
    if a.y > b.y {
        std::mem::swap(&mut a, &mut b);
    }
    if !(a.y.is_finite()
        && c.y.is_finite()
        && a.x.is_finite()
        && b.x.is_finite()
        && c.x.is_finite())
    {
        return;
    }
    let row0 = fast_ceil((a.y - 0.5).max(-1.0)).max(0);
    let row1 = fast_floor((c.y - 0.5).min(h as f64)).min(h - 1);
    if row0 > row1 {
        return;
    }
    let slope = |p: Point2, q: Point2| {
        if q.y > p.y {
            (q.x - p.x) / (q.y - p.y)
        } else {
            0.0
        }
    };
    let (s_ac, s_ab, s_bc) = (slope(a, c), slope(a, b), slope(b, c));
    for row in row0..=row1 {
        let yc = row as f64 + 0.5;
        let (mut lo, mut hi) = if c.y > a.y {
            let x = a.x + (yc - a.y) * s_ac;
            (x, x)
        } else {
            (a.x.min(c.x), a.x.max(c.x))
        };
        if yc <= b.y {
            if b.y > a.y {
                let x = a.x + (yc - a.y) * s_ab;
                lo = lo.min(x);
                hi = hi.max(x);
            } else {
                lo = lo.min(a.x.min(b.x));
                hi = hi.max(a.x.max(b.x));
            }
        }
        if yc >= b.y {
            if c.y > b.y {
                let x = b.x + (yc - b.y) * s_bc;
                lo = lo.min(x);
                hi = hi.max(x);
            } else {
                lo = lo.min(b.x.min(c.x));
                hi = hi.max(b.x.max(c.x));
            }
        }
        let col0 = fast_ceil((lo - 0.5).max(-1.0)).max(0);
        let col1 = fast_floor((hi - 0.5).min(w as f64)).min(w - 1);
        if col0 > col1 {
            continue;
        }
        let base = row as usize * mask.width;
        mask.bits[base + col0 as usize..=base + col1 as usize].fill(true);
    }
}

/// Rasterizes `mesh` into `mask` (which is not cleared first). Mask pixel
/// `(x, y)` stands for image pixel `(x + origin.0, y + origin.1)`. With
/// `cull_back`, triangles facing away from the camera are skipped; for a
/// closed outward-oriented mesh this leaves the silhouette unchanged.
pub(crate) fn rasterize_into(
    mesh: &TriMesh,
    camera: &Pinhole,
    mask: &mut BinaryMask,
    cull_back: bool,
    origin: (i64, i64),
) {
    let shift = Vector2::new(origin.0 as f64, origin.1 as f64);
    let to_mask = |v: &Vector3| camera.project_camera_point(v) - shift;
    let cam: Vec<Vector3> = mesh
        .vertices()
        .iter()
        .map(|v| camera.to_camera(v))
        .collect();
    let proj: Vec<Point2> = cam
        .iter()
        .map(|v| {
            if v.z > NEAR_MM {
                to_mask(v)
            } else {
                Point2::origin()
            }
        })
        .collect();
    let mut poly: Vec<Vector3> = Vec::with_capacity(4);
    for f in mesh.faces() {
        let idx = [f[0] as usize, f[1] as usize, f[2] as usize];
        let [a, b, c] = idx.map(|i| cam[i]);
        if cull_back && (b - a).cross(&(c - a)).dot(&a) > 0.0 {
            continue;
        }
        let inside = [a.z > NEAR_MM, b.z > NEAR_MM, c.z > NEAR_MM];
        if inside.iter().all(|&i| i) {
            fill_triangle(mask, proj[idx[0]], proj[idx[1]], proj[idx[2]]);
            continue;
        }
        if !inside.iter().any(|&i| i) {
            continue;
        }
        poly.clear();
        let tri = [a, b, c];
        for k in 0..3 {
            let (p, q) = (tri[k], tri[(k + 1) % 3]);
            let (pin, qin) = (p.z > NEAR_MM, q.z > NEAR_MM);
            if pin {
                poly.push(p);
            }
            if pin != qin {
                let t = (NEAR_MM - p.z) / (q.z - p.z);
                let mut x = p + (q - p) * t;
                x.z = NEAR_MM * (1.0 + 1e-12);
                poly.push(x);
            }
        }
        let projected: Vec<Point2> = poly.iter().map(to_mask).collect();
        for k in 1..projected.len().saturating_sub(1) {
            fill_triangle(mask, projected[0], projected[k], projected[k + 1]);
        }
    }
}

/// Silhouette restricted to the image-clamped bounding box of the
/// projected mesh.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct WindowMask {
    pub mask: BinaryMask,
    pub x0: usize,
    pub y0: usize,
}

impl WindowMask {
    pub fn count_outside(&self, full: &BinaryMask) -> usize {
        let w = self.mask.width;
        let mut n = 0;
        for (row, bits) in self.mask.bits.chunks(w.max(1)).enumerate() {
            let base = (row + self.y0) * full.width + self.x0;
            let other = &full.bits[base..base + w];
            n += bits.iter().zip(other).filter(|(a, b)| **a && !**b).count();
        }
        n
    }
}

pub(crate) fn rasterize_window(mesh: &TriMesh, camera: &Pinhole, cull_back: bool) -> WindowMask {
    let (w, h) = (camera.width as f64, camera.height as f64);
    let (mut lo, mut hi) = (
        Vector2::new(f64::INFINITY, f64::INFINITY),
        Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
    );
    let mut whole = false;
    for v in mesh.vertices() {
        let c = camera.to_camera(v);
        if c.z <= NEAR_MM {
            whole = true;
            break;
        }
        let p = camera.project_camera_point(&c);
        lo = lo.inf(&p.coords);
        hi = hi.sup(&p.coords);
    }
    let (x0, y0, x1, y1) = if whole {
        (0.0, 0.0, w, h)
    } else {
        (
            (lo.x - 1.0).floor().clamp(0.0, w),
            (lo.y - 1.0).floor().clamp(0.0, h),
            (hi.x + 1.0).ceil().clamp(0.0, w),
            (hi.y + 1.0).ceil().clamp(0.0, h),
        )
    };
    let mut mask = BinaryMask::new((x1 - x0) as usize, (y1 - y0) as usize);
    rasterize_into(mesh, camera, &mut mask, cull_back, (x0 as i64, y0 as i64));
    WindowMask {
        mask,
        x0: x0 as usize,
        y0: y0 as usize,
    }
}

/// Binary silhouette of `mesh` seen through `camera`: a pixel is set iff its
/// centre is covered by at least one projected triangle.
pub fn rasterize_silhouette(mesh: &TriMesh, camera: &Pinhole) -> BinaryMask {
    let mut mask = BinaryMask::new(camera.width as usize, camera.height as usize);
    rasterize_into(mesh, camera, &mut mask, false, (0, 0));
    mask
}

#[cfg(test)]
mod tests {
    use super::super::mesh::tests::unit_cube;
    use super::super::{Matrix3, Point3};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn front_camera(size: u32) -> Pinhole {
        Pinhole::new(
            Matrix3::identity(),
            Vector3::new(0.0, 0.0, 1000.0),
            1000.0,
            size,
            size,
        )
        .unwrap()
    }

    fn square(half: f64, z: f64) -> TriMesh {
        TriMesh::new(
            vec![
                Point3::new(-half, -half, z),
                Point3::new(half, -half, z),
                Point3::new(half, half, z),
                Point3::new(-half, half, z),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn covering_triangle_sets_every_pixel() {
        let mesh = TriMesh::new(
            vec![
                Point3::new(-5000.0, -5000.0, 0.0),
                Point3::new(5000.0, -5000.0, 0.0),
                Point3::new(0.0, 9000.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let m = rasterize_silhouette(&mesh, &front_camera(64));
        assert_eq!(m.count(), 64 * 64);
    }

    #[test]
    fn geometry_behind_camera_is_invisible() {
        let m = rasterize_silhouette(&square(100.0, -3000.0), &front_camera(64));
        assert!(m.is_empty());
    }

    #[test]
    fn square_area_matches_projection() {
        // 60 mm half-width at 1000 mm with f = 1000 px -> 120 px side.
        let m = rasterize_silhouette(&square(60.0, 0.0), &front_camera(512));
        let expected = 120.0 * 120.0;
        assert!(((m.count() as f64) - expected).abs() / expected < 0.02);
        // Offset, odd-sized square.
        let mesh =
            square(37.3, 0.0).transformed(&Matrix3::identity(), &Vector3::new(12.7, -40.1, 0.0));
        let m = rasterize_silhouette(&mesh, &front_camera(512));
        let expected = 74.6 * 74.6;
        assert!(((m.count() as f64) - expected).abs() / expected < 0.02);
    }

    #[test]
    fn straddling_near_plane_is_clipped() {
        let mesh = TriMesh::new(
            vec![
                Point3::new(-100.0, -100.0, 0.0),
                Point3::new(100.0, -100.0, 0.0),
                Point3::new(0.0, 100.0, -1500.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let m = rasterize_silhouette(&mesh, &front_camera(256));
        assert!(!m.is_empty());
    }

    #[test]
    fn union_of_parts_is_or_of_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cam = front_camera(128);
        for _ in 0..20 {
            let mut verts = Vec::new();
            let mut faces = Vec::new();
            for k in 0..6u32 {
                for _ in 0..3 {
                    verts.push(Point3::new(
                        rng.random_range(-80.0..80.0),
                        rng.random_range(-80.0..80.0),
                        rng.random_range(-200.0..200.0),
                    ));
                }
                faces.push([3 * k, 3 * k + 1, 3 * k + 2]);
            }
            let whole = TriMesh::new(verts.clone(), faces.clone()).unwrap();
            let a = TriMesh::new(verts.clone(), faces[..3].to_vec()).unwrap();
            let b = TriMesh::new(verts, faces[3..].to_vec()).unwrap();
            let mw = rasterize_silhouette(&whole, &cam);
            let mab = rasterize_silhouette(&a, &cam)
                .union(&rasterize_silhouette(&b, &cam))
                .unwrap();
            assert_eq!(mw, mab);
        }
    }

    #[test]
    fn back_face_culling_preserves_closed_silhouette() {
        let cube = unit_cube().transformed(
            &crate::geometry::rotation_about(&Vector3::new(1.0, 0.4, 0.2), 0.9),
            &Vector3::new(-0.5, -0.3, 0.1),
        );
        let cube = TriMesh::new(
            cube.vertices()
                .iter()
                .map(|v| Point3::from(v.coords * 150.0))
                .collect(),
            cube.faces().to_vec(),
        )
        .unwrap();
        let cam = front_camera(300);
        let full = rasterize_silhouette(&cube, &cam);
        let mut culled = BinaryMask::new(300, 300);
        rasterize_into(&cube, &cam, &mut culled, true, (0, 0));
        assert_eq!(full, culled);
    }

    #[test]
    fn window_matches_full_raster() {
        let cube = unit_cube();
        let cube = TriMesh::new(
            cube.vertices()
                .iter()
                .map(|v| Point3::from(v.coords * 90.0 + Vector3::new(-20.0, 10.0, 0.0)))
                .collect(),
            cube.faces().to_vec(),
        )
        .unwrap();
        let cam = Pinhole::new(
            crate::geometry::rotation_about(&Vector3::new(0.2, 1.0, 0.1), 0.4),
            Vector3::new(10.0, -5.0, 800.0),
            900.0,
            400,
            300,
        )
        .unwrap();
        let full = rasterize_silhouette(&cube, &cam);
        let win = rasterize_window(&cube, &cam, true);
        let mut rebuilt = BinaryMask::new(400, 300);
        for (x, y) in win.mask.iter_set() {
            rebuilt.set(x + win.x0, y + win.y0, true);
        }
        assert_eq!(rebuilt, full);
        let face = BinaryMask::new(400, 300);
        assert_eq!(win.count_outside(&face), full.count());
    }

    #[test]
    fn pgm_round_trip_and_count_outside() {
        let mut a = BinaryMask::new(7, 5);
        a.set(1, 1, true);
        a.set(6, 4, true);
        let back = BinaryMask::from_pgm(a.to_pgm().as_bytes()).unwrap();
        assert_eq!(a, back);
        let mut p5 = b"P5\n# c\n7 5\n255\n".to_vec();
        p5.extend(a.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
        assert_eq!(BinaryMask::from_pgm(&p5).unwrap(), a);
        let mut b = BinaryMask::new(7, 5);
        b.set(1, 1, true);
        assert_eq!(a.count_outside(&b).unwrap(), 1);
        assert!(a.count_outside(&BinaryMask::new(5, 7)).is_err());
    }
}
