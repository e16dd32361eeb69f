//! Projective geometry primitives shared by all pipeline stages: homography
//! estimation (normalized DLT inside RANSAC), point projection, and bilinear
//! sampling of vector fields.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("need at least 4 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate point configuration (collinear or rank-deficient)")]
    DegenerateConfiguration,
    #[error("no consensus: best inlier fraction {best:.3} below minimum {min:.3}")]
    NoConsensus { best: f64, min: f64 },
    #[error("point maps to infinity under this homography")]
    PointAtInfinity,
    #[error("homography matrix is singular")]
    Singular,
}

/// A 2D point in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// A source/destination point pair with a confidence weight in [0, 1].
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    pub src: Point2,
    pub dst: Point2,
    pub weight: f64,
}

impl Correspondence {
    pub fn new(src: Point2, dst: Point2, weight: f64) -> Self {
        Self {
            src,
            dst,
            weight: weight.clamp(0.0, 1.0),
        }
    }
}

/// RANSAC parameters. `seed` makes the estimate fully reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iters: usize,
    pub inlier_threshold: f64,
    pub min_inlier_fraction: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            inlier_threshold: 1.5,
            min_inlier_fraction: 0.3,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_iters < 1 {
            return Err("ransac.max_iters must be >= 1".into());
        }
        if !(self.inlier_threshold > 0.0) {
            return Err("ransac.inlier_threshold must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.min_inlier_fraction) {
            return Err("ransac.min_inlier_fraction must be in [0,1]".into());
        }
        Ok(())
    }

    /// Derive a per-frame config so each frame's estimate is independently
    /// reproducible regardless of processing order.
    pub fn for_frame(&self, frame_index: u64) -> Self {
        let mut c = self.clone();
        c.seed = self
            .seed
            .wrapping_add(frame_index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        c
    }
}

/// A 3x3 projective transform, normalized so m[2][2] = 1 whenever that entry
/// is nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
    normalized: bool,
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
            normalized: true,
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        let mut m = Matrix3::identity();
        m[(0, 2)] = dx;
        m[(1, 2)] = dy;
        Self {
            m,
            normalized: true,
        }
    }

    /// Wrap a raw matrix, rejecting singular ones. The matrix is rescaled so
    /// m[2][2] = 1 when that entry is nonzero.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let det = m.determinant();
        if !det.is_finite() || det.abs() < 1e-15 {
            return Err(GeometryError::Singular);
        }
        let w = m[(2, 2)];
        if w.abs() > 1e-12 {
            Ok(Self {
                m: m / w,
                normalized: true,
            })
        } else {
            Ok(Self {
                m,
                normalized: false,
            })
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn inverse(&self) -> Result<Homography, GeometryError> {
        let inv = self.m.try_inverse().ok_or(GeometryError::Singular)?;
        Homography::from_matrix(inv)
    }

    /// Compose: (self ∘ other)(p) = self(other(p)).
    pub fn compose(&self, other: &Homography) -> Result<Homography, GeometryError> {
        Homography::from_matrix(self.m * other.m)
    }

    /// Apply the transform with perspective divide.
    pub fn project(&self, p: Point2) -> Result<Point2, GeometryError> {
        let v = self.m * Vector3::new(p.x, p.y, 1.0);
        if v.z.abs() < 1e-12 {
            return Err(GeometryError::PointAtInfinity);
        }
        Ok(Point2::new(v.x / v.z, v.y / v.z))
    }
}

/// Standard projective application, see [`Homography::project`].
pub fn project(h: &Homography, p: Point2) -> Result<Point2, GeometryError> {
    h.project(p)
}

fn centroid_and_scale(points: impl Iterator<Item = Point2> + Clone) -> (Point2, f64) {
    let mut cx = 0.0;
    let mut cy = 0.0;
    let mut n = 0usize;
    for p in points.clone() {
        cx += p.x;
        cy += p.y;
        n += 1;
    }
    let nf = n as f64;
    cx /= nf;
    cy /= nf;
    let mut mean_dist = 0.0;
    for p in points {
        mean_dist += (p.x - cx).hypot(p.y - cy);
    }
    mean_dist /= nf;
    let s = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    (Point2::new(cx, cy), s)
}

fn similarity_transform(c: Point2, s: f64) -> Matrix3<f64> {
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Signed triangle area times two.
fn triangle_area2(a: Point2, b: Point2, c: Point2) -> f64 {
    ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)).abs()
}

/// True when any 3 of the given source points are collinear relative to the
/// bounding-box scale of the set.
fn has_collinear_triple(pts: &[Point2]) -> bool {
    let (mut minx, mut miny, mut maxx, mut maxy) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in pts {
        minx = minx.min(p.x);
        miny = miny.min(p.y);
        maxx = maxx.max(p.x);
        maxy = maxy.max(p.y);
    }
    let bbox_area = ((maxx - minx) * (maxy - miny)).max(1e-12);
    let tol = 1e-6 * bbox_area;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            for k in (j + 1)..pts.len() {
                if triangle_area2(pts[i], pts[j], pts[k]) * 0.5 < tol {
                    return true;
                }
            }
        }
    }
    false
}

/// Normalized DLT homography fit minimizing algebraic error.
///
/// Points are Hartley-normalized (centroid shift plus isotropic scaling to
/// mean distance sqrt(2)) before the SVD solve.
pub fn estimate_homography_dlt(corrs: &[Correspondence]) -> Result<Homography, GeometryError> {
    let n = corrs.len();
    if n < 4 {
        return Err(GeometryError::TooFewPoints(n));
    }
    if n == 4 {
        let src: Vec<Point2> = corrs.iter().map(|c| c.src).collect();
        if has_collinear_triple(&src) {
            return Err(GeometryError::DegenerateConfiguration);
        }
    }

    let (cs, ss) = centroid_and_scale(corrs.iter().map(|c| c.src));
    let (cd, sd) = centroid_and_scale(corrs.iter().map(|c| c.dst));
    let t_src = similarity_transform(cs, ss);
    let t_dst = similarity_transform(cd, sd);

    // Pad to at least 9 rows: the thin SVD of a 2Nx9 system with 2N < 9
    // would not expose the nullspace vector.
    let mut a = DMatrix::<f64>::zeros((2 * n).max(9), 9);
    for (k, c) in corrs.iter().enumerate() {
        let x = ss * (c.src.x - cs.x);
        let y = ss * (c.src.y - cs.y);
        let u = sd * (c.dst.x - cd.x);
        let v = sd * (c.dst.y - cd.y);

        a[(2 * k, 0)] = -x;
        a[(2 * k, 1)] = -y;
        a[(2 * k, 2)] = -1.0;
        a[(2 * k, 6)] = u * x;
        a[(2 * k, 7)] = u * y;
        a[(2 * k, 8)] = u;

        a[(2 * k + 1, 3)] = -x;
        a[(2 * k + 1, 4)] = -y;
        a[(2 * k + 1, 5)] = -1.0;
        a[(2 * k + 1, 6)] = v * x;
        a[(2 * k + 1, 7)] = v * y;
        a[(2 * k + 1, 8)] = v;
    }

    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or(GeometryError::DegenerateConfiguration)?;

    // nalgebra does not guarantee singular-value ordering: locate the two
    // smallest explicitly for both the solution and the rank check.
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&i, &j| {
        svd.singular_values[i]
            .partial_cmp(&svd.singular_values[j])
            .unwrap()
    });
    let smallest = idx[0];
    let second = idx[1];
    let largest = *idx.last().unwrap();
    if svd.singular_values[second] <= 1e-10 * svd.singular_values[largest].max(1e-300) {
        // Nullspace dimension > 1: the system does not pin down a unique H.
        return Err(GeometryError::DegenerateConfiguration);
    }

    let h = vt.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);

    let t_dst_inv = t_dst
        .try_inverse()
        .ok_or(GeometryError::DegenerateConfiguration)?;
    let denorm = t_dst_inv * hn * t_src;
    Homography::from_matrix(denorm).map_err(|_| GeometryError::DegenerateConfiguration)
}

fn reprojection_error(h: &Homography, c: &Correspondence) -> f64 {
    match h.project(c.src) {
        Ok(p) => p.dist(&c.dst),
        Err(_) => f64::INFINITY,
    }
}

/// Robust homography fit: seeded minimal 4-point sampling, consensus scoring,
/// then a final DLT refit on the consensus set. The returned mask marks
/// correspondences whose reprojection error under the refit model is within
/// the threshold. Deterministic for a fixed seed.
pub fn estimate_homography_ransac(
    corrs: &[Correspondence],
    cfg: &RansacConfig,
) -> Result<(Homography, Vec<bool>), GeometryError> {
    let n = corrs.len();
    if n < 4 {
        return Err(GeometryError::TooFewPoints(n));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best_count = 0usize;
    let mut best_h: Option<Homography> = None;

    for _ in 0..cfg.max_iters {
        let mut pick = [0usize; 4];
        for slot in 0..4 {
            loop {
                let cand = rng.gen_range(0..n);
                if !pick[..slot].contains(&cand) {
                    pick[slot] = cand;
                    break;
                }
            }
        }
        let sample: Vec<Correspondence> = pick.iter().map(|&i| corrs[i]).collect();
        let h = match estimate_homography_dlt(&sample) {
            Ok(h) => h,
            Err(_) => continue,
        };
        let count = corrs
            .iter()
            .filter(|c| reprojection_error(&h, c) <= cfg.inlier_threshold)
            .count();
        if count > best_count {
            best_count = count;
            best_h = Some(h);
            if count == n {
                break;
            }
        }
    }

    let best_fraction = best_count as f64 / n as f64;
    if best_fraction < cfg.min_inlier_fraction || best_h.is_none() {
        return Err(GeometryError::NoConsensus {
            best: best_fraction,
            min: cfg.min_inlier_fraction,
        });
    }
    let best_h = best_h.unwrap();

    // Refit on the consensus set; fall back to the minimal-sample model when
    // the consensus configuration is itself degenerate.
    let consensus: Vec<Correspondence> = corrs
        .iter()
        .filter(|c| reprojection_error(&best_h, c) <= cfg.inlier_threshold)
        .copied()
        .collect();
    let refit = estimate_homography_dlt(&consensus).unwrap_or(best_h);

    let mask: Vec<bool> = corrs
        .iter()
        .map(|c| reprojection_error(&refit, c) <= cfg.inlier_threshold)
        .collect();
    let final_fraction = mask.iter().filter(|&&b| b).count() as f64 / n as f64;
    if final_fraction < cfg.min_inlier_fraction {
        return Err(GeometryError::NoConsensus {
            best: final_fraction,
            min: cfg.min_inlier_fraction,
        });
    }
    Ok((refit, mask))
}

/// A dense 2D vector field on a row-major lattice, sampled in lattice
/// coordinates with clamped (replicate) borders.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    cols: usize,
    rows: usize,
    data: Vec<[f64; 2]>,
}

impl VectorField {
    pub fn zeros(cols: usize, rows: usize) -> Self {
        Self {
            cols,
            rows,
            data: vec![[0.0; 2]; cols * rows],
        }
    }

    pub fn from_data(cols: usize, rows: usize, data: Vec<[f64; 2]>) -> Self {
        assert_eq!(data.len(), cols * rows);
        Self { cols, rows, data }
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn get(&self, col: usize, row: usize) -> [f64; 2] {
        self.data[row * self.cols + col]
    }

    pub fn get_mut(&mut self, col: usize, row: usize) -> &mut [f64; 2] {
        &mut self.data[row * self.cols + col]
    }

    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.data
    }

    /// Clamped bilinear sample at lattice coordinates (x across columns,
    /// y across rows). Exact on fields affine in (x, y) and at lattice nodes.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 2] {
        bilinear_at(self.cols, self.rows, |c, r| self.get(c, r), x, y)
    }
}

/// Clamped bilinear blend of the 4 lattice samples surrounding (x, y).
pub fn bilinear_at<F>(cols: usize, rows: usize, get: F, x: f64, y: f64) -> [f64; 2]
where
    F: Fn(usize, usize) -> [f64; 2],
{
    let maxc = (cols - 1) as f64;
    let maxr = (rows - 1) as f64;
    let x = x.clamp(0.0, maxc);
    let y = y.clamp(0.0, maxr);
    let x0 = x.floor().min(maxc - 1.0).max(0.0);
    let y0 = y.floor().min(maxr - 1.0).max(0.0);
    let fx = x - x0;
    let fy = y - y0;
    let (c0, r0) = (x0 as usize, y0 as usize);
    let c1 = (c0 + 1).min(cols - 1);
    let r1 = (r0 + 1).min(rows - 1);
    let v00 = get(c0, r0);
    let v10 = get(c1, r0);
    let v01 = get(c0, r1);
    let v11 = get(c1, r1);
    let mut out = [0.0; 2];
    for a in 0..2 {
        let top = v00[a] * (1.0 - fx) + v10[a] * fx;
        let bot = v01[a] * (1.0 - fx) + v11[a] * fx;
        out[a] = top * (1.0 - fy) + bot * fy;
    }
    out
}

/// Bilinear sample of a vector field at lattice coordinates, clamped at the
/// border.
pub fn bilinear_sample(field: &VectorField, p: Point2) -> [f64; 2] {
    field.sample(p.x, p.y)
}

/// Exact homography mapping the unit square (0,0),(1,0),(1,1),(0,1) onto the
/// quad [q00, q10, q11, q01]. Returns None for degenerate quads.
///
/// This is the classical projective texture-mapping construction; it is used
/// for cell-local homographies where a full DLT solve would be wasteful.
pub fn unit_square_to_quad(q: &[Point2; 4]) -> Option<Matrix3<f64>> {
    let (p0, p1, p2, p3) = (q[0], q[1], q[2], q[3]);
    let dx1 = p1.x - p2.x;
    let dx2 = p3.x - p2.x;
    let dy1 = p1.y - p2.y;
    let dy2 = p3.y - p2.y;
    let sx = p0.x - p1.x + p2.x - p3.x;
    let sy = p0.y - p1.y + p2.y - p3.y;
    let den = dx1 * dy2 - dx2 * dy1;
    if den.abs() < 1e-12 {
        return None;
    }
    let g = (sx * dy2 - dx2 * sy) / den;
    let h = (dx1 * sy - sx * dy1) / den;
    let a = p1.x - p0.x + g * p1.x;
    let b = p3.x - p0.x + h * p3.x;
    let c = p0.x;
    let d = p1.y - p0.y + g * p1.y;
    let e = p3.y - p0.y + h * p3.y;
    let f = p0.y;
    let m = Matrix3::new(a, b, c, d, e, f, g, h, 1.0);
    if m.determinant().abs() < 1e-12 {
        return None;
    }
    Some(m)
}

/// Homography mapping the axis-aligned rectangle with origin (x0, y0) and
/// size (w, h) onto the quad [top-left, top-right, bottom-right, bottom-left].
pub fn rect_to_quad(
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    quad: &[Point2; 4],
) -> Option<Matrix3<f64>> {
    let unit = unit_square_to_quad(quad)?;
    // rect -> unit square
    let to_unit = Matrix3::new(
        1.0 / w,
        0.0,
        -x0 / w,
        0.0,
        1.0 / h,
        -y0 / h,
        0.0,
        0.0,
        1.0,
    );
    Some(unit * to_unit)
}

/// Apply a raw 3x3 matrix to a point with perspective divide. Returns None
/// when the point maps to infinity.
pub fn apply_matrix(m: &Matrix3<f64>, p: Point2) -> Option<Point2> {
    let v = m * Vector3::new(p.x, p.y, 1.0);
    if v.z.abs() < 1e-12 {
        return None;
    }
    Some(Point2::new(v.x / v.z, v.y / v.z))
}
