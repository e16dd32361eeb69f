//! Stage 2, motion propagation: sparse keypoint motion is densified onto a
//! regular vertex lattice through a blend of per-cluster homographies, then
//! refined by directly minimizing a confidence-weighted consistency
//! objective with projection and structure regularizers.

use crate::geometry::{
    apply_matrix, estimate_homography_ransac, rect_to_quad, GeometryError, Homography, Point2,
    RansacConfig, VectorField,
};
use crate::observer::MotionSample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PropagationError {
    #[error("empty motion sample")]
    EmptySample,
    #[error("grid spec mismatch")]
    SpecMismatch,
}

/// A uniform vertex lattice covering the frame, borders included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub frame_width: usize,
    pub frame_height: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, frame_width: usize, frame_height: usize) -> Self {
        assert!(rows >= 2 && cols >= 2, "grid needs at least 2x2 vertices");
        Self {
            rows,
            cols,
            frame_width,
            frame_height,
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_width(&self) -> f64 {
        self.frame_width as f64 / (self.cols - 1) as f64
    }

    pub fn cell_height(&self) -> f64 {
        self.frame_height as f64 / (self.rows - 1) as f64
    }

    pub fn vertex_pos(&self, row: usize, col: usize) -> Point2 {
        Point2::new(col as f64 * self.cell_width(), row as f64 * self.cell_height())
    }

    /// Pixel coordinates to continuous lattice coordinates.
    pub fn to_lattice(&self, p: Point2) -> (f64, f64) {
        (p.x / self.cell_width(), p.y / self.cell_height())
    }

    /// Cell indices (col, row) containing the point, clamped into range.
    pub fn cell_of(&self, p: Point2) -> (usize, usize) {
        let (lx, ly) = self.to_lattice(p);
        let c = (lx.floor() as isize).clamp(0, self.cols as isize - 2) as usize;
        let r = (ly.floor() as isize).clamp(0, self.rows as isize - 2) as usize;
        (c, r)
    }
}

/// Per-vertex 2D displacement field on a [`GridSpec`] lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMotionField {
    pub spec: GridSpec,
    pub frame_index: u64,
    field: VectorField,
}

impl GridMotionField {
    pub fn zeros(spec: GridSpec, frame_index: u64) -> Self {
        Self {
            spec,
            frame_index,
            field: VectorField::zeros(spec.cols, spec.rows),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 2] {
        self.field.get(col, row)
    }

    pub fn set(&mut self, row: usize, col: usize, v: [f64; 2]) {
        *self.field.get_mut(col, row) = v;
    }

    pub fn vectors(&self) -> &[[f64; 2]] {
        self.field.data()
    }

    pub fn vectors_mut(&mut self) -> &mut [[f64; 2]] {
        self.field.data_mut()
    }

    /// Bilinear sample at pixel coordinates.
    pub fn sample_pixel(&self, p: Point2) -> [f64; 2] {
        let (lx, ly) = self.spec.to_lattice(p);
        self.field.sample(lx, ly)
    }

    pub fn add(&self, other: &GridMotionField) -> Result<GridMotionField, PropagationError> {
        if self.spec != other.spec {
            return Err(PropagationError::SpecMismatch);
        }
        let mut out = self.clone();
        for (o, b) in out.vectors_mut().iter_mut().zip(other.vectors()) {
            o[0] += b[0];
            o[1] += b[1];
        }
        Ok(out)
    }

    /// Writes one `frame,row,col,dx,dy` line per vertex.
    pub fn write_dump<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for row in 0..self.spec.rows {
            for col in 0..self.spec.cols {
                let v = self.get(row, col);
                writeln!(w, "{},{},{},{},{}", self.frame_index, row, col, v[0], v[1])?;
            }
        }
        Ok(())
    }
}

/// K-means cluster of keypoint motions, before homography fitting.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub members: Vec<usize>,
}

/// A motion cluster with its fitted homography model.
#[derive(Debug, Clone)]
pub struct HomographyCluster {
    pub homography: Homography,
    pub member_indices: Vec<usize>,
    pub centroid: Point2,
    pub inlier_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagationConfig {
    /// Number of homography clusters (K-means groups).
    pub k_homo: usize,
    pub kmeans_iters: usize,
    /// Sigma of the distance softmax blending cluster projections, in
    /// pixels; 0 resolves to 2 grid-cell diagonals at runtime.
    pub fusion_temperature: f64,
    pub residual_iters: usize,
    pub residual_step: f64,
    pub lambda_kp: f64,
    pub lambda_proj: f64,
    pub lambda_struct: f64,
    pub charbonnier_eps: f64,
    /// Evaluate the rotated-edge form of the structure penalty instead of
    /// the plain orthogonality form.
    pub struct_literal: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            k_homo: 2,
            kmeans_iters: 10,
            fusion_temperature: 0.0,
            residual_iters: 30,
            residual_step: 0.5,
            lambda_kp: 10.0,
            lambda_proj: 40.0,
            lambda_struct: 40.0,
            charbonnier_eps: 1e-3,
            struct_literal: false,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k_homo < 1 {
            return Err("propagation.k_homo must be >= 1".into());
        }
        if self.kmeans_iters < 1 {
            return Err("propagation.kmeans_iters must be >= 1".into());
        }
        if self.residual_step <= 0.0 {
            return Err("propagation.residual_step must be > 0".into());
        }
        if self.charbonnier_eps <= 0.0 {
            return Err("propagation.charbonnier_eps must be > 0".into());
        }
        if self.lambda_kp < 0.0 || self.lambda_proj < 0.0 || self.lambda_struct < 0.0 {
            return Err("propagation loss weights must be >= 0".into());
        }
        Ok(())
    }

    fn sigma(&self, spec: &GridSpec) -> f64 {
        if self.fusion_temperature > 0.0 {
            self.fusion_temperature
        } else {
            2.0 * spec.cell_width().hypot(spec.cell_height())
        }
    }
}

fn charbonnier2(sq: f64, eps: f64) -> f64 {
    (sq + eps * eps).sqrt()
}

/// Seeded K-means over standardized (x, y, u, v) features, so displacement
/// structure separates motion groups even when it is small next to the
/// position spread. K collapses to the number of distinct displacement
/// vectors.
pub fn cluster_displacements(
    m: &MotionSample,
    cfg: &PropagationConfig,
    seed: u64,
) -> Result<Vec<ClusterAssignment>, PropagationError> {
    let n = m.len();
    if n == 0 {
        return Err(PropagationError::EmptySample);
    }
    let raw: Vec<[f64; 4]> = (0..n)
        .map(|i| {
            [
                m.keypoints[i].x,
                m.keypoints[i].y,
                m.displacements[i][0],
                m.displacements[i][1],
            ]
        })
        .collect();
    let mut mean = [0.0f64; 4];
    for f in &raw {
        for a in 0..4 {
            mean[a] += f[a];
        }
    }
    for a in &mut mean {
        *a /= n as f64;
    }
    let mut std = [0.0f64; 4];
    for f in &raw {
        for a in 0..4 {
            std[a] += (f[a] - mean[a]).powi(2);
        }
    }
    for a in &mut std {
        *a = (*a / n as f64).sqrt();
    }
    let feats: Vec<[f64; 4]> = raw
        .iter()
        .map(|f| {
            let mut z = [0.0f64; 4];
            for a in 0..4 {
                z[a] = if std[a] > 1e-9 {
                    (f[a] - mean[a]) / std[a]
                } else {
                    0.0
                };
            }
            z
        })
        .collect();

    let mut distinct: Vec<[f64; 2]> = Vec::new();
    for d in &m.displacements {
        if !distinct.iter().any(|e| e[0] == d[0] && e[1] == d[1]) {
            distinct.push(*d);
        }
    }
    let k = cfg.k_homo.min(distinct.len()).min(n).max(1);
    if k == 1 {
        return Ok(vec![ClusterAssignment {
            members: (0..n).collect(),
        }]);
    }

    let dist2 = |a: &[f64; 4], b: &[f64; 4]| -> f64 {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2) + (a[3] - b[3]).powi(2)
    };

    // k-means++ seeding.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<[f64; 4]> = Vec::with_capacity(k);
    centers.push(feats[rng.gen_range(0..n)]);
    while centers.len() < k {
        let d2: Vec<f64> = feats
            .iter()
            .map(|f| {
                centers
                    .iter()
                    .map(|c| dist2(f, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // All points coincide with existing centers.
            break;
        }
        let mut pick = rng.gen_range(0.0..total);
        let mut chosen = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            pick -= d;
            if pick <= 0.0 {
                chosen = i;
                break;
            }
        }
        centers.push(feats[chosen]);
    }
    let k = centers.len();

    let mut assign = vec![0usize; n];
    for _ in 0..cfg.kmeans_iters {
        for (i, f) in feats.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = dist2(f, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assign[i] = best;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let mut acc = [0.0f64; 4];
            let mut count = 0usize;
            for (i, f) in feats.iter().enumerate() {
                if assign[i] == c {
                    for a in 0..4 {
                        acc[a] += f[a];
                    }
                    count += 1;
                }
            }
            if count > 0 {
                for a in 0..4 {
                    center[a] = acc[a] / count as f64;
                }
            }
        }
    }

    let mut clusters: Vec<ClusterAssignment> = (0..k)
        .map(|_| ClusterAssignment { members: Vec::new() })
        .collect();
    for (i, &c) in assign.iter().enumerate() {
        clusters[c].members.push(i);
    }
    clusters.retain(|c| !c.members.is_empty());
    Ok(clusters)
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

/// Fit one homography per cluster with RANSAC. The fitted model is the
/// backward map (p -> p - u), taking current-frame positions to their
/// previous-frame locations, so that the fused base field g - H(g)
/// reproduces the observed displacements at the keypoints. Clusters too
/// small for a projective fit, or without consensus, fall back to the
/// translation model at the member-median displacement.
pub fn fit_cluster_homographies(
    m: &MotionSample,
    clusters: &[ClusterAssignment],
    ransac: &RansacConfig,
) -> Vec<HomographyCluster> {
    clusters
        .iter()
        .map(|cluster| {
            let members = &cluster.members;
            let mut cx = 0.0;
            let mut cy = 0.0;
            for &i in members {
                cx += m.keypoints[i].x;
                cy += m.keypoints[i].y;
            }
            let centroid = Point2::new(cx / members.len() as f64, cy / members.len() as f64);

            let corrs: Vec<crate::geometry::Correspondence> = members
                .iter()
                .map(|&i| {
                    let p = m.keypoints[i];
                    let d = m.displacements[i];
                    crate::geometry::Correspondence::new(
                        p,
                        Point2::new(p.x - d[0], p.y - d[1]),
                        m.confidences[i],
                    )
                })
                .collect();

            let fallback = |members: &[usize]| -> HomographyCluster {
                let mut dx: Vec<f64> = members.iter().map(|&i| m.displacements[i][0]).collect();
                let mut dy: Vec<f64> = members.iter().map(|&i| m.displacements[i][1]).collect();
                HomographyCluster {
                    homography: Homography::translation(-median(&mut dx), -median(&mut dy)),
                    member_indices: members.to_vec(),
                    centroid,
                    inlier_fraction: 1.0,
                }
            };

            if corrs.len() < 4 {
                return fallback(members);
            }
            match estimate_homography_ransac(&corrs, ransac) {
                Ok((h, mask)) => {
                    let inliers = mask.iter().filter(|&&b| b).count();
                    HomographyCluster {
                        homography: h,
                        member_indices: members.clone(),
                        centroid,
                        inlier_fraction: inliers as f64 / mask.len() as f64,
                    }
                }
                Err(GeometryError::NoConsensus { .. }) | Err(_) => fallback(members),
            }
        })
        .collect()
}

/// Blend cluster projections at every vertex with distance-softmax weights
/// and return the base motion g - g_hat. The clusters hold backward maps,
/// so at a keypoint the base reproduces its observed displacement. Weights
/// at each vertex sum to 1.
pub fn fuse_grid_prior(
    clusters: &[HomographyCluster],
    m: &MotionSample,
    spec: &GridSpec,
    cfg: &PropagationConfig,
) -> GridMotionField {
    let mut out = GridMotionField::zeros(*spec, m.frame_index);
    if clusters.is_empty() {
        return out;
    }
    let sigma = cfg.sigma(spec);
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            let g = spec.vertex_pos(row, col);
            // Nearest-member distance per cluster drives the softmax.
            let mut logits = Vec::with_capacity(clusters.len());
            for cl in clusters {
                let d2 = cl
                    .member_indices
                    .iter()
                    .map(|&i| {
                        let p = m.keypoints[i];
                        (p.x - g.x).powi(2) + (p.y - g.y).powi(2)
                    })
                    .fold(f64::INFINITY, f64::min);
                let d2 = if d2.is_finite() {
                    d2
                } else {
                    (cl.centroid.x - g.x).powi(2) + (cl.centroid.y - g.y).powi(2)
                };
                logits.push(-d2 * inv_two_sigma2);
            }
            let max_logit = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|&l| (l - max_logit).exp()).collect();
            let wsum: f64 = weights.iter().sum();

            let mut ghat = [0.0f64; 2];
            for (cl, &w) in clusters.iter().zip(&weights) {
                let proj = cl.homography.project(g).unwrap_or(g);
                ghat[0] += w / wsum * proj.x;
                ghat[1] += w / wsum * proj.y;
            }
            out.set(row, col, [g.x - ghat[0], g.y - ghat[1]]);
        }
    }
    out
}

/// Softmax blend weights at one vertex, exposed for the weight-sum property.
pub fn fusion_weights_at(
    clusters: &[HomographyCluster],
    m: &MotionSample,
    spec: &GridSpec,
    cfg: &PropagationConfig,
    vertex: Point2,
) -> Vec<f64> {
    let sigma = cfg.sigma(spec);
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    let logits: Vec<f64> = clusters
        .iter()
        .map(|cl| {
            let d2 = cl
                .member_indices
                .iter()
                .map(|&i| {
                    let p = m.keypoints[i];
                    (p.x - vertex.x).powi(2) + (p.y - vertex.y).powi(2)
                })
                .fold(f64::INFINITY, f64::min);
            -d2 * inv_two_sigma2
        })
        .collect();
    let max_logit = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let expd: Vec<f64> = logits.iter().map(|&l| (l - max_logit).exp()).collect();
    let sum: f64 = expd.iter().sum();
    expd.into_iter().map(|e| e / sum).collect()
}

/// Confidence-weighted keypoint consistency loss (Charbonnier penalty on the
/// displacement residual at each keypoint).
pub fn loss_kp(dg: &GridMotionField, m: &MotionSample, eps: f64) -> f64 {
    loss_kp_grad(dg, m, eps).0
}

/// Value and analytic gradient with respect to every vertex displacement.
pub fn loss_kp_grad(dg: &GridMotionField, m: &MotionSample, eps: f64) -> (f64, GridMotionField) {
    let spec = dg.spec;
    let mut grad = GridMotionField::zeros(spec, dg.frame_index);
    let n = m.len();
    if n == 0 {
        return (0.0, grad);
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let p = m.keypoints[i];
        let omega = m.confidences[i];
        let pred = dg.sample_pixel(p);
        let rx = m.displacements[i][0] - pred[0];
        let ry = m.displacements[i][1] - pred[1];
        let c = charbonnier2(rx * rx + ry * ry, eps);
        total += omega * c;
        if omega == 0.0 {
            continue;
        }
        // d c / d pred = (pred - u) / c, routed to the 4 cell corners by
        // their bilinear weights.
        let gx = omega * inv_n * (-rx) / c;
        let gy = omega * inv_n * (-ry) / c;
        let (lx, ly) = spec.to_lattice(p);
        let lx = lx.clamp(0.0, (spec.cols - 1) as f64);
        let ly = ly.clamp(0.0, (spec.rows - 1) as f64);
        let c0 = (lx.floor() as usize).min(spec.cols - 2);
        let r0 = (ly.floor() as usize).min(spec.rows - 2);
        let fx = lx - c0 as f64;
        let fy = ly - r0 as f64;
        let wts = [
            (c0, r0, (1.0 - fx) * (1.0 - fy)),
            (c0 + 1, r0, fx * (1.0 - fy)),
            (c0, r0 + 1, (1.0 - fx) * fy),
            (c0 + 1, r0 + 1, fx * fy),
        ];
        for (cc, rr, w) in wts {
            let v = grad.get(rr, cc);
            grad.set(rr, cc, [v[0] + gx * w, v[1] + gy * w]);
        }
    }
    (total * inv_n, grad)
}

/// Predicted displacement at p from the local cell homography induced by the
/// displaced cell corners; falls back to the bilinear field sample for
/// degenerate cells.
fn local_homography_displacement(dg: &GridMotionField, p: Point2) -> [f64; 2] {
    let spec = dg.spec;
    let (c, r) = spec.cell_of(p);
    let corners_rest = [
        spec.vertex_pos(r, c),
        spec.vertex_pos(r, c + 1),
        spec.vertex_pos(r + 1, c + 1),
        spec.vertex_pos(r + 1, c),
    ];
    let quad = [
        offset(corners_rest[0], dg.get(r, c)),
        offset(corners_rest[1], dg.get(r, c + 1)),
        offset(corners_rest[2], dg.get(r + 1, c + 1)),
        offset(corners_rest[3], dg.get(r + 1, c)),
    ];
    match rect_to_quad(
        corners_rest[0].x,
        corners_rest[0].y,
        spec.cell_width(),
        spec.cell_height(),
        &quad,
    ) {
        Some(mtx) => match apply_matrix(&mtx, p) {
            Some(q) => [q.x - p.x, q.y - p.y],
            None => dg.sample_pixel(p),
        },
        None => dg.sample_pixel(p),
    }
}

/// Homography-based projection loss: the keypoint displacement is compared
/// against the displacement induced by the enclosing cell's exact corner
/// homography.
pub fn loss_proj(dg: &GridMotionField, m: &MotionSample, eps: f64) -> f64 {
    let n = m.len();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let omega = m.confidences[i];
        let p = m.keypoints[i];
        let pred = local_homography_displacement(dg, p);
        let rx = m.displacements[i][0] - pred[0];
        let ry = m.displacements[i][1] - pred[1];
        total += omega * charbonnier2(rx * rx + ry * ry, eps);
    }
    total / n as f64
}

/// Gradient of [`loss_proj`] via central differences on the displaced cell
/// corners of each keypoint (the cell homography has no convenient closed
/// derivative; each keypoint touches only 8 scalars).
pub fn loss_proj_grad(dg: &GridMotionField, m: &MotionSample, eps: f64) -> (f64, GridMotionField) {
    let spec = dg.spec;
    let mut grad = GridMotionField::zeros(spec, dg.frame_index);
    let n = m.len();
    if n == 0 {
        return (0.0, grad);
    }
    let inv_n = 1.0 / n as f64;
    let step = 1e-4;
    let mut work = dg.clone();
    let mut total = 0.0;

    for i in 0..n {
        let omega = m.confidences[i];
        let p = m.keypoints[i];
        let pred = local_homography_displacement(dg, p);
        let rx = m.displacements[i][0] - pred[0];
        let ry = m.displacements[i][1] - pred[1];
        total += omega * charbonnier2(rx * rx + ry * ry, eps);
        if omega == 0.0 {
            continue;
        }
        let (c, r) = spec.cell_of(p);
        let corners = [(r, c), (r, c + 1), (r + 1, c + 1), (r + 1, c)];
        for (rr, cc) in corners {
            for axis in 0..2 {
                let orig = work.get(rr, cc);
                let mut plus = orig;
                plus[axis] += step;
                work.set(rr, cc, plus);
                let term_plus = {
                    let d = local_homography_displacement(&work, p);
                    let rx = m.displacements[i][0] - d[0];
                    let ry = m.displacements[i][1] - d[1];
                    charbonnier2(rx * rx + ry * ry, eps)
                };
                let mut minus = orig;
                minus[axis] -= step;
                work.set(rr, cc, minus);
                let term_minus = {
                    let d = local_homography_displacement(&work, p);
                    let rx = m.displacements[i][0] - d[0];
                    let ry = m.displacements[i][1] - d[1];
                    charbonnier2(rx * rx + ry * ry, eps)
                };
                work.set(rr, cc, orig);
                let g = omega * inv_n * (term_plus - term_minus) / (2.0 * step);
                let v = grad.get(rr, cc);
                let mut nv = v;
                nv[axis] += g;
                grad.set(rr, cc, nv);
            }
        }
    }
    (total * inv_n, grad)
}

fn offset(p: Point2, d: [f64; 2]) -> Point2 {
    Point2::new(p.x + d[0], p.y + d[1])
}

/// Structure-preservation penalty on the deformed lattice: per cell, the
/// squared cosine between the two edges leaving the anchor vertex (0 on an
/// orthogonal grid). `literal` evaluates the rotated-edge variant instead,
/// which is 1 on the undeformed grid.
pub fn loss_struct(spec: &GridSpec, dg: &GridMotionField, literal: bool) -> f64 {
    loss_struct_grad(spec, dg, literal).0
}

/// Value plus analytic gradient with respect to vertex displacements.
pub fn loss_struct_grad(
    spec: &GridSpec,
    dg: &GridMotionField,
    literal: bool,
) -> (f64, GridMotionField) {
    let mut grad = GridMotionField::zeros(*spec, dg.frame_index);
    let cells = ((spec.rows - 1) * (spec.cols - 1)) as f64;
    if cells == 0.0 {
        return (0.0, grad);
    }
    let inv_cells = 1.0 / cells;
    let mut total = 0.0;

    for r in 0..spec.rows - 1 {
        for c in 0..spec.cols - 1 {
            let a = deformed(spec, dg, r, c);
            let b = deformed(spec, dg, r, c + 1);
            let d = deformed(spec, dg, r + 1, c);
            let e1 = [b.x - a.x, b.y - a.y];
            let e2 = [d.x - a.x, d.y - a.y];
            let n1 = (e1[0] * e1[0] + e1[1] * e1[1]).sqrt();
            let n2 = (e2[0] * e2[0] + e2[1] * e2[1]).sqrt();
            if n1 < 1e-12 || n2 < 1e-12 {
                total += 1.0; // max penalty for a collapsed edge
                continue;
            }
            let u1 = [e1[0] / n1, e1[1] / n1];
            let u2raw = [e2[0] / n2, e2[1] / n2];
            // literal variant measures alignment with the 90-degree-rotated
            // second edge.
            let u2 = if literal {
                [-u2raw[1], u2raw[0]]
            } else {
                u2raw
            };
            let cosv = u1[0] * u2[0] + u1[1] * u2[1];
            total += cosv * cosv;

            // d(cos)/d(e1) = (u2 - cos*u1)/n1 ; d(cos)/d(e2') = (u1 - cos*u2)/n2
            // with e2' the (possibly rotated) edge; un-rotate for the raw e2.
            let scale = 2.0 * cosv * inv_cells;
            let de1 = [
                scale * (u2[0] - cosv * u1[0]) / n1,
                scale * (u2[1] - cosv * u1[1]) / n1,
            ];
            let de2p = [
                scale * (u1[0] - cosv * u2[0]) / n2,
                scale * (u1[1] - cosv * u2[1]) / n2,
            ];
            let de2 = if literal {
                // e2' = R90(e2); pull back through the rotation.
                [de2p[1], -de2p[0]]
            } else {
                de2p
            };
            add_grad(&mut grad, r, c + 1, de1);
            add_grad(&mut grad, r + 1, c, de2);
            add_grad(&mut grad, r, c, [-de1[0] - de2[0], -de1[1] - de2[1]]);
        }
    }
    (total * inv_cells, grad)
}

fn deformed(spec: &GridSpec, dg: &GridMotionField, r: usize, c: usize) -> Point2 {
    let p = spec.vertex_pos(r, c);
    let d = dg.get(r, c);
    Point2::new(p.x + d[0], p.y + d[1])
}

fn add_grad(grad: &mut GridMotionField, r: usize, c: usize, v: [f64; 2]) {
    let cur = grad.get(r, c);
    grad.set(r, c, [cur[0] + v[0], cur[1] + v[1]]);
}

/// Combined propagation objective at dg = base + res.
pub fn propagation_objective(dg: &GridMotionField, m: &MotionSample, cfg: &PropagationConfig) -> f64 {
    cfg.lambda_kp * loss_kp(dg, m, cfg.charbonnier_eps)
        + cfg.lambda_proj * loss_proj(dg, m, cfg.charbonnier_eps)
        + cfg.lambda_struct * loss_struct(&dg.spec, dg, cfg.struct_literal)
}

fn objective_grad(
    dg: &GridMotionField,
    m: &MotionSample,
    cfg: &PropagationConfig,
) -> (f64, GridMotionField) {
    let (lk, gk) = loss_kp_grad(dg, m, cfg.charbonnier_eps);
    let (lp, gp) = loss_proj_grad(dg, m, cfg.charbonnier_eps);
    let (ls, gs) = loss_struct_grad(&dg.spec, dg, cfg.struct_literal);
    let mut grad = GridMotionField::zeros(dg.spec, dg.frame_index);
    for (((o, a), b), c) in grad
        .vectors_mut()
        .iter_mut()
        .zip(gk.vectors())
        .zip(gp.vectors())
        .zip(gs.vectors())
    {
        o[0] = cfg.lambda_kp * a[0] + cfg.lambda_proj * b[0] + cfg.lambda_struct * c[0];
        o[1] = cfg.lambda_kp * a[1] + cfg.lambda_proj * b[1] + cfg.lambda_struct * c[1];
    }
    (
        cfg.lambda_kp * lk + cfg.lambda_proj * lp + cfg.lambda_struct * ls,
        grad,
    )
}

/// Per-frame residual refinement: gradient descent on the propagation
/// objective starting from a zero residual, with step halving on
/// non-decrease. The final objective never exceeds the initial one.
pub fn solve_residual(
    m: &MotionSample,
    base: &GridMotionField,
    cfg: &PropagationConfig,
) -> GridMotionField {
    let mut res = GridMotionField::zeros(base.spec, base.frame_index);
    if cfg.residual_iters == 0 || m.is_empty() {
        return res;
    }
    let mut step = cfg.residual_step;
    let mut cur = base.clone();
    let mut cur_loss = propagation_objective(&cur, m, cfg);
    for _ in 0..cfg.residual_iters {
        let (_, grad) = objective_grad(&cur, m, cfg);
        let mut cand = cur.clone();
        for (v, g) in cand.vectors_mut().iter_mut().zip(grad.vectors()) {
            v[0] -= step * g[0];
            v[1] -= step * g[1];
        }
        let cand_loss = propagation_objective(&cand, m, cfg);
        if cand_loss <= cur_loss {
            cur = cand;
            cur_loss = cand_loss;
        } else {
            step *= 0.5;
            if step < 1e-9 {
                break;
            }
        }
    }
    for (r, (c, b)) in res
        .vectors_mut()
        .iter_mut()
        .zip(cur.vectors().iter().zip(base.vectors()))
    {
        r[0] = c[0] - b[0];
        r[1] = c[1] - b[1];
    }
    res
}

/// Full stage-2 pipeline: cluster, fit, fuse, refine. An empty sample yields
/// a zero field.
pub fn propagate(
    m: &MotionSample,
    spec: &GridSpec,
    cfg: &PropagationConfig,
    ransac: &RansacConfig,
) -> GridMotionField {
    if m.is_empty() {
        return GridMotionField::zeros(*spec, m.frame_index);
    }
    let kmeans_seed = ransac.seed ^ 0xA5A5_5A5A_DEAD_BEEF;
    let clusters = match cluster_displacements(m, cfg, kmeans_seed) {
        Ok(c) => c,
        Err(_) => return GridMotionField::zeros(*spec, m.frame_index),
    };
    let fitted = fit_cluster_homographies(m, &clusters, ransac);
    let base = fuse_grid_prior(&fitted, m, spec, cfg);
    let res = solve_residual(m, &base, cfg);
    base.add(&res).expect("same spec by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample_from(points: &[(f64, f64)], disp: &[(f64, f64)], dims: (usize, usize)) -> MotionSample {
        MotionSample {
            keypoints: points.iter().map(|&(x, y)| Point2::new(x, y)).collect(),
            displacements: disp.iter().map(|&(u, v)| [u, v]).collect(),
            confidences: vec![1.0; points.len()],
            frame_index: 1,
            frame_width: dims.0,
            frame_height: dims.1,
        }
    }

    fn spec16(w: usize, h: usize) -> GridSpec {
        GridSpec::new(16, 16, w, h)
    }

    #[test]
    fn cluster_identical_displacements_collapse() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (10.0 * i as f64, 5.0)).collect();
        let disp = vec![(2.0, 0.0); 10];
        let m = sample_from(&pts, &disp, (160, 120));
        let cfg = PropagationConfig::default();
        let clusters = cluster_displacements(&m, &cfg, 7).unwrap();
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].members.len(), 10);
    }

    #[test]
    fn cluster_two_planar_groups_split() {
        let mut pts = Vec::new();
        let mut disp = Vec::new();
        for i in 0..20 {
            pts.push((10.0 + (i % 5) as f64 * 8.0, 10.0 + (i / 5) as f64 * 8.0));
            disp.push((5.0, 0.0));
        }
        for i in 0..20 {
            pts.push((120.0 + (i % 5) as f64 * 8.0, 10.0 + (i / 5) as f64 * 8.0));
            disp.push((-5.0, 0.0));
        }
        let m = sample_from(&pts, &disp, (180, 60));
        let cfg = PropagationConfig::default();
        let clusters = cluster_displacements(&m, &cfg, 3).unwrap();
        assert_eq!(clusters.len(), 2);
        for cl in &clusters {
            let d0 = m.displacements[cl.members[0]];
            assert!(
                cl.members.iter().all(|&i| m.displacements[i] == d0),
                "cluster mixes displacement groups"
            );
        }
    }

    #[test]
    fn cluster_k1_takes_all() {
        let pts: Vec<(f64, f64)> = (0..6).map(|i| (i as f64 * 13.0, i as f64 * 7.0)).collect();
        let disp: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, -(i as f64))).collect();
        let m = sample_from(&pts, &disp, (100, 100));
        let cfg = PropagationConfig {
            k_homo: 1,
            ..Default::default()
        };
        let clusters = cluster_displacements(&m, &cfg, 1).unwrap();
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].members.len(), 6);
    }

    #[test]
    fn cluster_empty_sample_errors() {
        let m = MotionSample::default();
        assert_eq!(
            cluster_displacements(&m, &PropagationConfig::default(), 0).err(),
            Some(PropagationError::EmptySample)
        );
    }

    #[test]
    fn cluster_deterministic_per_seed() {
        let pts: Vec<(f64, f64)> = (0..40)
            .map(|i| ((i * 37 % 160) as f64, (i * 53 % 120) as f64))
            .collect();
        let disp: Vec<(f64, f64)> = (0..40)
            .map(|i| if i % 2 == 0 { (3.0, 1.0) } else { (-2.0, 0.5) })
            .collect();
        let m = sample_from(&pts, &disp, (160, 120));
        let cfg = PropagationConfig::default();
        let a = cluster_displacements(&m, &cfg, 42).unwrap();
        let b = cluster_displacements(&m, &cfg, 42).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.members, y.members);
        }
    }

    #[test]
    fn fit_exact_homography_cluster() {
        // Scene motion generated by a known backward map: u(p) = p - B(p).
        let truth = Homography::from_matrix(nalgebra::Matrix3::new(
            1.02, 0.01, 4.0, -0.015, 0.99, -2.0, 1e-5, -2e-5, 1.0,
        ))
        .unwrap();
        let mut pts = Vec::new();
        let mut disp = Vec::new();
        for i in 0..5 {
            for j in 0..4 {
                let p = Point2::new(20.0 + 30.0 * i as f64, 15.0 + 30.0 * j as f64);
                let q = truth.project(p).unwrap();
                pts.push((p.x, p.y));
                disp.push((p.x - q.x, p.y - q.y));
            }
        }
        let m = sample_from(&pts, &disp, (160, 120));
        let clusters = vec![ClusterAssignment {
            members: (0..m.len()).collect(),
        }];
        let fitted = fit_cluster_homographies(&m, &clusters, &RansacConfig::default());
        assert_eq!(fitted.len(), 1);
        let d = (fitted[0].homography.matrix() - truth.matrix()).norm();
        assert!(d < 1e-6, "frobenius {d}");
        assert!((fitted[0].inlier_fraction - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_small_cluster_falls_back_to_median_translation() {
        let m = sample_from(
            &[(10.0, 10.0), (30.0, 10.0), (20.0, 30.0)],
            &[(1.0, 2.0), (1.5, 2.5), (0.5, 1.5)],
            (100, 100),
        );
        let clusters = vec![ClusterAssignment {
            members: vec![0, 1, 2],
        }];
        let fitted = fit_cluster_homographies(&m, &clusters, &RansacConfig::default());
        let h = fitted[0].homography.matrix();
        // Backward map: median displacement (1.0, 2.0) negated.
        assert_relative_eq!(h[(0, 2)], -1.0);
        assert_relative_eq!(h[(1, 2)], -2.0);
    }

    #[test]
    fn fit_zero_motion_gives_identity() {
        let pts: Vec<(f64, f64)> = (0..8)
            .map(|i| (10.0 + 17.0 * (i % 4) as f64, 10.0 + 23.0 * (i / 4) as f64))
            .collect();
        let disp = vec![(0.0, 0.0); 8];
        let m = sample_from(&pts, &disp, (100, 100));
        let clusters = vec![ClusterAssignment {
            members: (0..8).collect(),
        }];
        let fitted = fit_cluster_homographies(&m, &clusters, &RansacConfig::default());
        let d = (fitted[0].homography.matrix() - nalgebra::Matrix3::identity()).norm();
        assert!(d < 1e-9);
    }

    #[test]
    fn fuse_identity_cluster_zero_base() {
        let m = sample_from(&[(50.0, 50.0)], &[(0.0, 0.0)], (160, 120));
        let cluster = HomographyCluster {
            homography: Homography::identity(),
            member_indices: vec![0],
            centroid: Point2::new(50.0, 50.0),
            inlier_fraction: 1.0,
        };
        let spec = spec16(160, 120);
        let base = fuse_grid_prior(&[cluster], &m, &spec, &PropagationConfig::default());
        for v in base.vectors() {
            assert!(v[0].abs() < 1e-12 && v[1].abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_translation_cluster_base_matches_displacement() {
        // A (5, -3) observed displacement corresponds to the backward map
        // translation(-5, 3); the fused base reproduces the displacement.
        let m = sample_from(&[(50.0, 50.0)], &[(5.0, -3.0)], (160, 120));
        let cluster = HomographyCluster {
            homography: Homography::translation(-5.0, 3.0),
            member_indices: vec![0],
            centroid: Point2::new(50.0, 50.0),
            inlier_fraction: 1.0,
        };
        let spec = spec16(160, 120);
        let base = fuse_grid_prior(&[cluster], &m, &spec, &PropagationConfig::default());
        for v in base.vectors() {
            assert_relative_eq!(v[0], 5.0, epsilon = 1e-9);
            assert_relative_eq!(v[1], -3.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn fuse_two_clusters_blend_by_distance() {
        // Left cluster moves +4, right cluster -4; tight sigma localizes
        // each side and the exact midline blends to zero. 17 columns over a
        // 160 px frame put column 8 exactly on the midline at x = 80.
        let mut pts = vec![];
        for i in 0..5 {
            pts.push((5.0, 10.0 + 20.0 * i as f64));
        }
        for i in 0..5 {
            pts.push((155.0, 10.0 + 20.0 * i as f64));
        }
        let mut disp = vec![(4.0, 0.0); 5];
        disp.extend(vec![(-4.0, 0.0); 5]);
        let m = sample_from(&pts, &disp, (160, 120));
        let left = HomographyCluster {
            homography: Homography::translation(-4.0, 0.0),
            member_indices: (0..5).collect(),
            centroid: Point2::new(5.0, 50.0),
            inlier_fraction: 1.0,
        };
        let right = HomographyCluster {
            homography: Homography::translation(4.0, 0.0),
            member_indices: (5..10).collect(),
            centroid: Point2::new(155.0, 50.0),
            inlier_fraction: 1.0,
        };
        let spec = GridSpec::new(16, 17, 160, 120);
        let cfg = PropagationConfig {
            fusion_temperature: 8.0,
            ..Default::default()
        };
        let base = fuse_grid_prior(&[left.clone(), right.clone()], &m, &spec, &cfg);
        // Leftmost column tracks +4, rightmost -4, midline blends to 0.
        assert_relative_eq!(base.get(5, 0)[0], 4.0, epsilon = 1e-3);
        assert_relative_eq!(base.get(5, 16)[0], -4.0, epsilon = 1e-3);
        assert!(base.get(5, 8)[0].abs() < 1e-6);

        // Weights sum to 1 at every vertex.
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                let w = fusion_weights_at(
                    &[left.clone(), right.clone()],
                    &m,
                    &spec,
                    &cfg,
                    spec.vertex_pos(r, c),
                );
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn loss_kp_floor_and_zero_weight() {
        let spec = spec16(160, 120);
        let m = sample_from(&[(40.0, 40.0), (100.0, 60.0)], &[(0.0, 0.0), (0.0, 0.0)], (160, 120));
        let dg = GridMotionField::zeros(spec, 1);
        let eps = 1e-3;
        assert_relative_eq!(loss_kp(&dg, &m, eps), eps, epsilon = 1e-12);

        let mut m0 = m.clone();
        m0.confidences = vec![0.0, 0.0];
        assert_eq!(loss_kp(&dg, &m0, eps), 0.0);
    }

    #[test]
    fn loss_kp_single_residual_magnitude() {
        let spec = spec16(160, 120);
        let m = sample_from(&[(40.0, 40.0)], &[(3.0, 0.0)], (160, 120));
        let dg = GridMotionField::zeros(spec, 1);
        let expect = (9.0f64 + 1e-6).sqrt();
        assert_relative_eq!(loss_kp(&dg, &m, 1e-3), expect, epsilon = 1e-12);
    }

    #[test]
    fn loss_proj_consistent_with_translation() {
        let spec = spec16(160, 120);
        let eps = 1e-3;
        // Zero field, zero displacements -> floor.
        let m = sample_from(&[(40.0, 40.0)], &[(0.0, 0.0)], (160, 120));
        let dg = GridMotionField::zeros(spec, 1);
        assert_relative_eq!(loss_proj(&dg, &m, eps), eps, epsilon = 1e-12);

        // Global translation field with matching per-point displacement.
        let mut dg_t = GridMotionField::zeros(spec, 1);
        for v in dg_t.vectors_mut() {
            *v = [2.0, 0.0];
        }
        let m_match = sample_from(&[(40.0, 40.0), (90.0, 70.0)], &[(2.0, 0.0), (2.0, 0.0)], (160, 120));
        assert_relative_eq!(loss_proj(&dg_t, &m_match, eps), eps, epsilon = 1e-9);

        // Corners carry (2,0) but the observation is zero: per-point term ~ 2.
        let m_zero = sample_from(&[(40.0, 40.0)], &[(0.0, 0.0)], (160, 120));
        let l = loss_proj(&dg_t, &m_zero, eps);
        assert_relative_eq!(l, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn loss_struct_cases() {
        let spec = GridSpec::new(9, 9, 160, 160);
        let zero = GridMotionField::zeros(spec, 0);
        assert_relative_eq!(loss_struct(&spec, &zero, false), 0.0, epsilon = 1e-12);
        // literal variant evaluates to 1 on the undeformed grid
        assert_relative_eq!(loss_struct(&spec, &zero, true), 1.0, epsilon = 1e-12);

        // Pure shear x' = x + 0.5 y: every cell value (0.5/sqrt(1.25))^2 = 0.2.
        let mut shear = GridMotionField::zeros(spec, 0);
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                let p = spec.vertex_pos(r, c);
                shear.set(r, c, [0.5 * p.y, 0.0]);
            }
        }
        assert_relative_eq!(loss_struct(&spec, &shear, false), 0.2, epsilon = 1e-9);

        // Global rotation preserves angles.
        let ang = 0.3f64;
        let (s, co) = ang.sin_cos();
        let mut rot = GridMotionField::zeros(spec, 0);
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                let p = spec.vertex_pos(r, c);
                let q = Point2::new(co * p.x - s * p.y, s * p.x + co * p.y);
                rot.set(r, c, [q.x - p.x, q.y - p.y]);
            }
        }
        assert!(loss_struct(&spec, &rot, false) < 1e-12);

        // Uniform scaling also preserves angles.
        let mut scaled = GridMotionField::zeros(spec, 0);
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                let p = spec.vertex_pos(r, c);
                scaled.set(r, c, [0.3 * p.x, 0.3 * p.y]);
            }
        }
        assert!(loss_struct(&spec, &scaled, false) < 1e-12);
    }

    #[test]
    fn solve_residual_descends_single_keypoint() {
        let spec = spec16(160, 120);
        let m = sample_from(&[(75.0, 55.0)], &[(4.0, 0.0)], (160, 120));
        let base = GridMotionField::zeros(spec, 1);
        let cfg = PropagationConfig {
            lambda_proj: 0.0,
            lambda_struct: 0.0,
            ..Default::default()
        };
        let res = solve_residual(&m, &base, &cfg);
        let dg = base.add(&res).unwrap();
        let l = loss_kp(&dg, &m, cfg.charbonnier_eps);
        assert!(l < 0.5, "loss_kp after descent: {l}");
        let pred = dg.sample_pixel(Point2::new(75.0, 55.0));
        assert!(pred[0] > 3.0, "prediction moved toward observation: {pred:?}");
    }

    #[test]
    fn solve_residual_stays_put_when_optimal() {
        let spec = spec16(160, 120);
        let m = sample_from(&[(40.0, 40.0), (120.0, 80.0)], &[(2.0, 1.0), (2.0, 1.0)], (160, 120));
        let mut base = GridMotionField::zeros(spec, 1);
        for v in base.vectors_mut() {
            *v = [2.0, 1.0];
        }
        let cfg = PropagationConfig::default();
        let res = solve_residual(&m, &base, &cfg);
        let norm: f64 = res.vectors().iter().map(|v| v[0].abs() + v[1].abs()).sum();
        assert!(norm < 1e-3, "residual norm {norm}");
    }

    #[test]
    fn solve_residual_zero_iters_identity() {
        let spec = spec16(160, 120);
        let m = sample_from(&[(40.0, 40.0)], &[(4.0, 0.0)], (160, 120));
        let base = GridMotionField::zeros(spec, 1);
        let cfg = PropagationConfig {
            residual_iters: 0,
            ..Default::default()
        };
        let res = solve_residual(&m, &base, &cfg);
        assert!(res.vectors().iter().all(|v| v[0] == 0.0 && v[1] == 0.0));
    }

    #[test]
    fn solver_never_increases_objective() {
        let spec = spec16(160, 120);
        let mut pts = Vec::new();
        let mut disp = Vec::new();
        for i in 0..30 {
            pts.push(((i * 31 % 150) as f64 + 5.0, (i * 47 % 110) as f64 + 5.0));
            disp.push(((i % 5) as f64 - 2.0, (i % 3) as f64 - 1.0));
        }
        let m = sample_from(&pts, &disp, (160, 120));
        let base = GridMotionField::zeros(spec, 1);
        let cfg = PropagationConfig::default();
        let l0 = propagation_objective(&base, &m, &cfg);
        let res = solve_residual(&m, &base, &cfg);
        let l1 = propagation_objective(&base.add(&res).unwrap(), &m, &cfg);
        assert!(l1 <= l0, "objective increased: {l0} -> {l1}");
    }

    #[test]
    fn propagate_empty_sample_zero_field() {
        let spec = spec16(160, 120);
        let m = MotionSample {
            frame_width: 160,
            frame_height: 120,
            ..Default::default()
        };
        let dg = propagate(&m, &spec, &PropagationConfig::default(), &RansacConfig::default());
        assert!(dg.vectors().iter().all(|v| v[0] == 0.0 && v[1] == 0.0));
    }

    #[test]
    fn propagate_global_translation() {
        let mut pts = Vec::new();
        let mut disp = Vec::new();
        for i in 0..8 {
            for j in 0..6 {
                pts.push((10.0 + 20.0 * i as f64, 10.0 + 20.0 * j as f64));
                disp.push((3.0, -2.0));
            }
        }
        let m = sample_from(&pts, &disp, (170, 130));
        let spec = spec16(170, 130);
        let dg = propagate(&m, &spec, &PropagationConfig::default(), &RansacConfig::default());
        for v in dg.vectors() {
            assert!(
                (v[0] - 3.0).abs() < 0.3 && (v[1] + 2.0).abs() < 0.3,
                "vertex {v:?} expected about (3, -2)"
            );
        }
    }

    #[test]
    fn multi_homography_halves_two_plane_residual() {
        // Two planes translating in opposite directions; K=2 should explain
        // keypoint motion far better than a single cluster.
        let mut pts = Vec::new();
        let mut disp = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                pts.push((6.0 + 11.0 * i as f64, 8.0 + 17.0 * j as f64));
                disp.push((4.0, 0.0));
            }
        }
        for i in 0..6 {
            for j in 0..6 {
                pts.push((96.0 + 11.0 * i as f64, 8.0 + 17.0 * j as f64));
                disp.push((-4.0, 0.0));
            }
        }
        let m = sample_from(&pts, &disp, (160, 120));
        let spec = spec16(160, 120);
        let ransac = RansacConfig::default();

        let residual_for = |k: usize| -> f64 {
            let cfg = PropagationConfig {
                k_homo: k,
                residual_iters: 0,
                fusion_temperature: 10.0,
                ..Default::default()
            };
            let clusters = cluster_displacements(&m, &cfg, 5).unwrap();
            let fitted = fit_cluster_homographies(&m, &clusters, &ransac);
            let base = fuse_grid_prior(&fitted, &m, &spec, &cfg);
            // Mean keypoint displacement error of the base field alone.
            (0..m.len())
                .map(|i| {
                    let pred = base.sample_pixel(m.keypoints[i]);
                    let rx = m.displacements[i][0] - pred[0];
                    let ry = m.displacements[i][1] - pred[1];
                    (rx * rx + ry * ry).sqrt()
                })
                .sum::<f64>()
                / m.len() as f64
        };

        let r1 = residual_for(1);
        let r2 = residual_for(2);
        assert!(
            r2 <= 0.5 * r1,
            "K=2 residual {r2} not half of K=1 residual {r1}"
        );
    }
}
