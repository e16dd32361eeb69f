//! Stage 1, motion estimation: keypoint detection from multiple built-in
//! detectors, NMS fusion, per-cell homogenization, dense backward flow,
//! keypoint-guided flow fusion, and motion sampling at keypoints.

mod detect;
mod lk;

pub use detect::{detect_keypoints, shi_tomasi_response_map};
pub use lk::{estimate_dense_flow, estimate_sparse_flow, track_point, Pyramid};

use lk::{estimate_dense_flow_pyr, estimate_sparse_flow_pyr};

use crate::frame::Frame;
use crate::geometry::Point2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ObserverError {
    #[error("empty frame")]
    EmptyFrame,
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("flow import failed: {0}")]
    FlowImport(String),
}

/// Identifies the origin of a detected keypoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorId {
    ShiTomasi,
    Fast9,
    Imported,
}

impl DetectorId {
    pub fn as_str(&self) -> &'static str {
        match self {
            DetectorId::ShiTomasi => "shi_tomasi",
            DetectorId::Fast9 => "fast9",
            DetectorId::Imported => "imported",
        }
    }
}

impl std::str::FromStr for DetectorId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shi_tomasi" => Ok(DetectorId::ShiTomasi),
            "fast9" => Ok(DetectorId::Fast9),
            "imported" => Ok(DetectorId::Imported),
            other => Err(format!("unknown detector id '{other}'")),
        }
    }
}

/// A detected keypoint with a confidence score in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredKeypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
    pub detector_id: DetectorId,
}

impl ScoredKeypoint {
    pub fn pos(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<ScoredKeypoint>,
    pub frame_index: u64,
}

impl KeypointSet {
    pub fn new(frame_index: u64) -> Self {
        Self {
            points: Vec::new(),
            frame_index,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-pixel causal flow for the pair (t-1, t), sampled on frame t's
/// lattice: f(x) is the forward content motion, so the content at pixel x
/// sat at x - f(x) in the previous frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    uv: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            uv: vec![[0.0; 2]; width * height],
        }
    }

    pub fn from_vectors(width: usize, height: usize, uv: Vec<[f32; 2]>) -> Self {
        assert_eq!(uv.len(), width * height);
        Self { width, height, uv }
    }

    pub fn vectors(&self) -> &[[f32; 2]] {
        &self.uv
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        self.uv[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, uv: [f32; 2]) {
        self.uv[y * self.width + x] = uv;
    }

    /// Border-clamped bilinear sample at real pixel coordinates.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 2] {
        crate::geometry::bilinear_at(
            self.width,
            self.height,
            |c, r| {
                let v = self.get(c, r);
                [v[0] as f64, v[1] as f64]
            },
            x,
            y,
        )
    }
}

/// Binary mask marking keypoint neighborhoods where dense flow is trusted
/// directly.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMask {
    pub width: usize,
    pub height: usize,
    bits: Vec<bool>,
}

impl GuidanceMask {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Sparse motion observation: keypoint positions, their displacements, and
/// per-keypoint confidence weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MotionSample {
    pub keypoints: Vec<Point2>,
    pub displacements: Vec<[f64; 2]>,
    pub confidences: Vec<f64>,
    pub frame_index: u64,
    pub frame_width: usize,
    pub frame_height: usize,
}

impl MotionSample {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

/// Per-detector fusion weights; a zero weight disables the detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorWeights {
    pub shi_tomasi: f64,
    pub fast9: f64,
    pub imported: f64,
}

impl Default for DetectorWeights {
    fn default() -> Self {
        Self {
            shi_tomasi: 1.0,
            fast9: 1.0,
            imported: 1.0,
        }
    }
}

impl DetectorWeights {
    pub fn for_id(&self, id: DetectorId) -> f64 {
        match id {
            DetectorId::ShiTomasi => self.shi_tomasi,
            DetectorId::Fast9 => self.fast9,
            DetectorId::Imported => self.imported,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserverConfig {
    pub detector_weights: DetectorWeights,
    /// Joint NMS suppression/merge radius in pixels.
    pub nms_radius: f64,
    /// Homogenization grid cell counts.
    pub grid_gx: usize,
    pub grid_gy: usize,
    /// Keypoints kept per homogenization cell.
    pub per_cell_k: usize,
    /// Minimum separation between kept keypoints within a cell (pixels).
    pub min_separation: f64,
    /// Guidance-mask radius around candidate keypoints (pixels).
    pub mask_radius: f64,
    pub pyramid_levels: usize,
    /// Lucas-Kanade window side length in pixels (odd).
    pub lk_window: usize,
    pub lk_iters: usize,
    /// Cap on candidates returned by a single detector.
    pub max_candidates: usize,
    /// Shi-Tomasi quality fraction of the per-frame max response.
    pub shi_quality: f64,
    /// FAST-9 intensity threshold on [0,1] luma.
    pub fast_threshold: f64,
    /// Dense-flow lattice stride in pixels.
    pub dense_stride: usize,
    /// Neighbors used by inverse-distance flow interpolation.
    pub idw_neighbors: usize,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self {
            detector_weights: DetectorWeights::default(),
            nms_radius: 4.0,
            grid_gx: 16,
            grid_gy: 16,
            per_cell_k: 2,
            min_separation: 8.0,
            mask_radius: 16.0,
            pyramid_levels: 3,
            lk_window: 21,
            lk_iters: 30,
            max_candidates: 2000,
            shi_quality: 0.01,
            fast_threshold: 0.08,
            dense_stride: 8,
            idw_neighbors: 16,
        }
    }
}

impl ObserverConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.nms_radius <= 0.0 {
            return Err("observer.nms_radius must be > 0".into());
        }
        if self.grid_gx == 0 || self.grid_gy == 0 {
            return Err("observer.grid_gx/grid_gy must be >= 1".into());
        }
        if self.per_cell_k == 0 {
            return Err("observer.per_cell_k must be >= 1".into());
        }
        if self.min_separation <= 0.0 {
            return Err("observer.min_separation must be > 0".into());
        }
        if self.mask_radius <= 0.0 {
            return Err("observer.mask_radius must be > 0".into());
        }
        if self.pyramid_levels == 0 {
            return Err("observer.pyramid_levels must be >= 1".into());
        }
        if self.lk_window < 3 || self.lk_window % 2 == 0 {
            return Err("observer.lk_window must be odd and >= 3".into());
        }
        if self.dense_stride == 0 {
            return Err("observer.dense_stride must be >= 1".into());
        }
        if self.idw_neighbors == 0 {
            return Err("observer.idw_neighbors must be >= 1".into());
        }
        Ok(())
    }
}

/// NMS fusion of multiple detector proposals (weighted by per-detector
/// weights): greedy by descending weighted score; proposals within the NMS
/// radius of a kept point merge into it at the score-weighted mean position.
pub fn fuse_detections(sets: &[KeypointSet], cfg: &ObserverConfig) -> KeypointSet {
    let frame_index = sets.first().map(|s| s.frame_index).unwrap_or(0);
    let mut pool: Vec<ScoredKeypoint> = Vec::new();
    for set in sets {
        for kp in &set.points {
            let w = cfg.detector_weights.for_id(kp.detector_id);
            if w <= 0.0 {
                continue;
            }
            pool.push(ScoredKeypoint {
                score: (kp.score * w).clamp(0.0, 1.0),
                ..*kp
            });
        }
    }
    pool.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.y.partial_cmp(&b.y).unwrap())
            .then_with(|| a.x.partial_cmp(&b.x).unwrap())
    });

    let r2 = cfg.nms_radius * cfg.nms_radius;
    let mut taken = vec![false; pool.len()];
    let mut out = KeypointSet::new(frame_index);
    for i in 0..pool.len() {
        if taken[i] {
            continue;
        }
        taken[i] = true;
        let seed = pool[i];
        let mut wsum = seed.score;
        let mut px = seed.x * seed.score;
        let mut py = seed.y * seed.score;
        for j in (i + 1)..pool.len() {
            if taken[j] {
                continue;
            }
            let dx = pool[j].x - seed.x;
            let dy = pool[j].y - seed.y;
            if dx * dx + dy * dy <= r2 {
                taken[j] = true;
                wsum += pool[j].score;
                px += pool[j].x * pool[j].score;
                py += pool[j].y * pool[j].score;
            }
        }
        let (x, y) = if wsum > 0.0 {
            (px / wsum, py / wsum)
        } else {
            (seed.x, seed.y)
        };
        out.points.push(ScoredKeypoint {
            x,
            y,
            score: seed.score,
            detector_id: seed.detector_id,
        });
    }
    out
}

/// Per-cell top-k selection with a minimum separation constraint, spreading
/// keypoints evenly over a Gx x Gy grid.
pub fn homogenize(
    set: &KeypointSet,
    width: usize,
    height: usize,
    cfg: &ObserverConfig,
) -> KeypointSet {
    let gx = cfg.grid_gx;
    let gy = cfg.grid_gy;
    let cell_w = width as f64 / gx as f64;
    let cell_h = height as f64 / gy as f64;
    let mut cells: Vec<Vec<ScoredKeypoint>> = vec![Vec::new(); gx * gy];
    for kp in &set.points {
        let cx = ((kp.x / cell_w) as usize).min(gx - 1);
        let cy = ((kp.y / cell_h) as usize).min(gy - 1);
        cells[cy * gx + cx].push(*kp);
    }
    let tau2 = cfg.min_separation * cfg.min_separation;
    let mut out = KeypointSet::new(set.frame_index);
    for cell in &mut cells {
        cell.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| a.y.partial_cmp(&b.y).unwrap())
                .then_with(|| a.x.partial_cmp(&b.x).unwrap())
        });
        let mut kept: Vec<ScoredKeypoint> = Vec::new();
        for kp in cell.iter() {
            if kept.len() >= cfg.per_cell_k {
                break;
            }
            let far_enough = kept.iter().all(|k| {
                let dx = k.x - kp.x;
                let dy = k.y - kp.y;
                dx * dx + dy * dy >= tau2
            });
            if far_enough {
                kept.push(*kp);
            }
        }
        out.points.extend(kept);
    }
    out
}

/// Mask set to 1 within a circular neighborhood of the given radius around
/// each candidate keypoint. An empty candidate set yields an all-zero mask.
pub fn build_guidance_mask(
    candidates: &KeypointSet,
    radius: f64,
    width: usize,
    height: usize,
) -> GuidanceMask {
    let mut bits = vec![false; width * height];
    let r = radius.max(0.0);
    let ri = r.ceil() as isize;
    let r2 = r * r;
    for kp in &candidates.points {
        let cx = kp.x.round() as isize;
        let cy = kp.y.round() as isize;
        for dy in -ri..=ri {
            let y = cy + dy;
            if y < 0 || y >= height as isize {
                continue;
            }
            for dx in -ri..=ri {
                let x = cx + dx;
                if x < 0 || x >= width as isize {
                    continue;
                }
                let ddx = x as f64 - kp.x;
                let ddy = y as f64 - kp.y;
                if ddx * ddx + ddy * ddy <= r2 {
                    bits[y as usize * width + x as usize] = true;
                }
            }
        }
    }
    GuidanceMask {
        width,
        height,
        bits,
    }
}

/// Bucketed nearest-neighbor lookup over candidate positions.
struct NeighborGrid {
    cell: f64,
    gx: usize,
    gy: usize,
    buckets: Vec<Vec<usize>>,
}

impl NeighborGrid {
    fn build(points: &[Point2], width: usize, height: usize) -> Self {
        let n = points.len().max(1);
        // Aim for a few points per bucket.
        let cell = ((width * height) as f64 / n as f64).sqrt().max(4.0);
        let gx = ((width as f64 / cell).ceil() as usize).max(1);
        let gy = ((height as f64 / cell).ceil() as usize).max(1);
        let mut buckets = vec![Vec::new(); gx * gy];
        for (i, p) in points.iter().enumerate() {
            let bx = ((p.x / cell) as usize).min(gx - 1);
            let by = ((p.y / cell) as usize).min(gy - 1);
            buckets[by * gx + bx].push(i);
        }
        Self {
            cell,
            gx,
            gy,
            buckets,
        }
    }

    /// Indices of (at least) the k nearest points, by expanding bucket rings.
    fn nearest(&self, x: f64, y: f64, k: usize, points: &[Point2], out: &mut Vec<(f64, usize)>) {
        out.clear();
        let bx = ((x / self.cell) as isize).clamp(0, self.gx as isize - 1);
        let by = ((y / self.cell) as isize).clamp(0, self.gy as isize - 1);
        let max_ring = self.gx.max(self.gy) as isize;
        let mut ring = 0isize;
        while ring <= max_ring {
            for dy in -ring..=ring {
                for dx in -ring..=ring {
                    if dx.abs() != ring && dy.abs() != ring {
                        continue;
                    }
                    let cx = bx + dx;
                    let cy = by + dy;
                    if cx < 0 || cy < 0 || cx >= self.gx as isize || cy >= self.gy as isize {
                        continue;
                    }
                    for &i in &self.buckets[cy as usize * self.gx + cx as usize] {
                        let d2 = (points[i].x - x).powi(2) + (points[i].y - y).powi(2);
                        out.push((d2, i));
                    }
                }
            }
            // One extra ring after reaching k guards against closer points in
            // adjacent buckets.
            if out.len() >= k && ring >= 1 {
                break;
            }
            ring += 1;
        }
        out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.truncate(k);
    }
}

/// Keypoint-guided flow fusion: inside the guidance mask the dense flow is
/// used directly; outside it is replaced by inverse-distance-weighted
/// interpolation (power 2) of the dense flow sampled at the candidate
/// keypoints. An empty candidate set returns the dense flow unchanged.
pub fn fuse_flow(
    dense: &FlowField,
    candidates: &KeypointSet,
    mask: &GuidanceMask,
) -> Result<FlowField, ObserverError> {
    if dense.width != mask.width || dense.height != mask.height {
        return Err(ObserverError::DimensionMismatch(
            dense.width,
            dense.height,
            mask.width,
            mask.height,
        ));
    }
    if candidates.is_empty() {
        return Ok(dense.clone());
    }
    let positions: Vec<Point2> = candidates.points.iter().map(|k| k.pos()).collect();
    let flows: Vec<[f64; 2]> = positions
        .iter()
        .map(|p| dense.sample(p.x, p.y))
        .collect();
    let grid = NeighborGrid::build(&positions, dense.width, dense.height);
    let k = 16.min(positions.len());

    let mut out = dense.clone();
    let mut scratch = Vec::new();
    for y in 0..dense.height {
        for x in 0..dense.width {
            if mask.get(x, y) {
                continue;
            }
            grid.nearest(x as f64, y as f64, k, &positions, &mut scratch);
            let mut wsum = 0.0;
            let mut acc = [0.0f64; 2];
            let mut exact: Option<usize> = None;
            for &(d2, i) in &scratch {
                if d2 < 1e-12 {
                    exact = Some(i);
                    break;
                }
                let w = 1.0 / d2; // inverse distance, power 2
                wsum += w;
                acc[0] += w * flows[i][0];
                acc[1] += w * flows[i][1];
            }
            let v = if let Some(i) = exact {
                flows[i]
            } else if wsum > 0.0 {
                [acc[0] / wsum, acc[1] / wsum]
            } else {
                let g = dense.get(x, y);
                [g[0] as f64, g[1] as f64]
            };
            out.set(x, y, [v[0] as f32, v[1] as f32]);
        }
    }
    Ok(out)
}

/// Sample the fused flow at the homogenized keypoints and assemble the
/// motion observation vector. Confidences default to the keypoint scores;
/// the observer stage overrides them with tracking-consistency weights.
pub fn sample_motion(fused: &FlowField, kp: &KeypointSet) -> MotionSample {
    let mut m = MotionSample {
        frame_index: kp.frame_index,
        frame_width: fused.width,
        frame_height: fused.height,
        ..Default::default()
    };
    for p in &kp.points {
        m.keypoints.push(p.pos());
        m.displacements.push(fused.sample(p.x, p.y));
        m.confidences.push(p.score);
    }
    m
}

/// Keypoints imported from file, grouped by frame index.
pub type ImportedKeypoints = std::collections::HashMap<u64, Vec<ScoredKeypoint>>;

/// Dense-flow provider hook for the stage: built-in LK or `.flo` import.
pub trait DenseFlowSource: Send {
    fn dense_flow(
        &mut self,
        prev: &Frame,
        cur: &Frame,
        cfg: &ObserverConfig,
    ) -> Result<FlowField, ObserverError>;
}

/// Built-in dense flow: coarse LK on a stride lattice, bilinearly upsampled.
pub struct BuiltinDenseFlow;

impl DenseFlowSource for BuiltinDenseFlow {
    fn dense_flow(
        &mut self,
        prev: &Frame,
        cur: &Frame,
        cfg: &ObserverConfig,
    ) -> Result<FlowField, ObserverError> {
        estimate_dense_flow(prev, cur, cfg)
    }
}

/// The stage-1 observer: owns the previous frame and produces one
/// `MotionSample` per incoming frame from `{I_(t-1), I_t}` only.
pub struct MotionObserver {
    cfg: ObserverConfig,
    prev: Option<(Frame, Pyramid)>,
    imported: Option<ImportedKeypoints>,
    flow_source: Option<Box<dyn DenseFlowSource>>,
}

impl MotionObserver {
    pub fn new(cfg: ObserverConfig) -> Self {
        Self {
            cfg,
            prev: None,
            imported: None,
            flow_source: None,
        }
    }

    pub fn with_imported_keypoints(mut self, imported: ImportedKeypoints) -> Self {
        self.imported = Some(imported);
        self
    }

    /// Override the built-in dense flow (e.g. with a `.flo` importer).
    pub fn with_flow_source(mut self, src: Box<dyn DenseFlowSource>) -> Self {
        self.flow_source = Some(src);
        self
    }

    pub fn config(&self) -> &ObserverConfig {
        &self.cfg
    }

    /// Detect, fuse, and homogenize keypoints for one frame. Returns the
    /// candidate set (pre-homogenization) and the uniformized set.
    pub fn detect_and_select(
        &self,
        frame: &Frame,
    ) -> Result<(KeypointSet, KeypointSet), ObserverError> {
        let mut sets = Vec::new();
        if self.cfg.detector_weights.shi_tomasi > 0.0 {
            sets.push(detect_keypoints(frame, DetectorId::ShiTomasi, &self.cfg)?);
        }
        if self.cfg.detector_weights.fast9 > 0.0 {
            sets.push(detect_keypoints(frame, DetectorId::Fast9, &self.cfg)?);
        }
        if let Some(imported) = &self.imported {
            if self.cfg.detector_weights.imported > 0.0 {
                if let Some(points) = imported.get(&frame.index) {
                    sets.push(KeypointSet {
                        points: points.clone(),
                        frame_index: frame.index,
                    });
                }
            }
        }
        let candidates = fuse_detections(&sets, &self.cfg);
        let selected = homogenize(&candidates, frame.width, frame.height, &self.cfg);
        Ok((candidates, selected))
    }

    /// Process one frame. The first frame (no previous) yields an empty
    /// sample; afterwards the output depends only on the current pair.
    pub fn process(&mut self, frame: &Frame) -> Result<MotionSample, ObserverError> {
        if frame.is_empty() {
            return Err(ObserverError::EmptyFrame);
        }
        let cur_pyr = Pyramid::of_frame(frame, self.cfg.pyramid_levels);
        let (prev, prev_pyr) = match self.prev.replace((frame.clone(), cur_pyr)) {
            Some(p) => p,
            None => {
                return Ok(MotionSample {
                    frame_index: frame.index,
                    frame_width: frame.width,
                    frame_height: frame.height,
                    ..Default::default()
                })
            }
        };
        if prev.width != frame.width || prev.height != frame.height {
            return Err(ObserverError::DimensionMismatch(
                prev.width,
                prev.height,
                frame.width,
                frame.height,
            ));
        }
        let cur_pyr = &self.prev.as_ref().unwrap().1;
        let dims = (frame.width, frame.height);

        let (candidates, selected) = self.detect_and_select(frame)?;
        let dense = match &mut self.flow_source {
            Some(src) => src.dense_flow(&prev, frame, &self.cfg)?,
            None => estimate_dense_flow_pyr(&prev_pyr, cur_pyr, dims, &self.cfg),
        };
        let mask = build_guidance_mask(
            &candidates,
            self.cfg.mask_radius,
            frame.width,
            frame.height,
        );
        let fused = fuse_flow(&dense, &candidates, &mask)?;

        // Displacements come from the fused field; confidences from the
        // forward-backward consistency of an independent sparse track.
        let mut sample = sample_motion(&fused, &selected);
        let tracked = estimate_sparse_flow_pyr(&prev_pyr, cur_pyr, dims, &selected, &self.cfg)?;
        sample.confidences = tracked.confidences;
        Ok(sample)
    }

    pub fn reset(&mut self) {
        self.prev = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(x: f64, y: f64, score: f64) -> ScoredKeypoint {
        ScoredKeypoint {
            x,
            y,
            score,
            detector_id: DetectorId::ShiTomasi,
        }
    }

    #[test]
    fn fuse_single_detector_is_plain_nms() {
        let cfg = ObserverConfig::default();
        let set = KeypointSet {
            points: vec![kp(10.0, 10.0, 0.9), kp(11.0, 10.0, 0.5), kp(30.0, 30.0, 0.7)],
            frame_index: 0,
        };
        let fused = fuse_detections(&[set], &cfg);
        assert_eq!(fused.len(), 2);
        assert!(fused.points.iter().any(|p| (p.score - 0.9).abs() < 1e-12));
        assert!(fused.points.iter().any(|p| (p.score - 0.7).abs() < 1e-12));
    }

    #[test]
    fn fuse_merges_coincident_proposals_with_weighted_mean() {
        let mut cfg = ObserverConfig::default();
        cfg.detector_weights = DetectorWeights {
            shi_tomasi: 1.0,
            fast9: 0.5,
            imported: 0.0,
        };
        let a = KeypointSet {
            points: vec![kp(10.0, 10.0, 0.8)],
            frame_index: 0,
        };
        let b = KeypointSet {
            points: vec![ScoredKeypoint {
                x: 12.0,
                y: 10.0,
                score: 0.6,
                detector_id: DetectorId::Fast9,
            }],
            frame_index: 0,
        };
        let fused = fuse_detections(&[a, b], &cfg);
        assert_eq!(fused.len(), 1);
        let p = fused.points[0];
        // weighted scores 0.8 and 0.3; merged position is their score-weighted mean
        let expect_x = (0.8 * 10.0 + 0.3 * 12.0) / 1.1;
        assert!((p.x - expect_x).abs() < 1e-9);
        assert!((p.score - 0.8).abs() < 1e-12);
    }

    #[test]
    fn fuse_keeps_distant_points() {
        let cfg = ObserverConfig::default();
        let set = KeypointSet {
            points: vec![kp(10.0, 10.0, 0.9), kp(10.0 + 2.0 * cfg.nms_radius, 10.0, 0.8)],
            frame_index: 0,
        };
        assert_eq!(fuse_detections(&[set], &cfg).len(), 2);
    }

    #[test]
    fn homogenize_keeps_top_scored_per_cell() {
        let mut cfg = ObserverConfig::default();
        cfg.grid_gx = 1;
        cfg.grid_gy = 1;
        cfg.per_cell_k = 1;
        let set = KeypointSet {
            points: (0..10).map(|i| kp(5.0 + i as f64, 5.0, 0.1 * i as f64)).collect(),
            frame_index: 0,
        };
        let out = homogenize(&set, 100, 100, &cfg);
        assert_eq!(out.len(), 1);
        assert!((out.points[0].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn homogenize_enforces_min_separation() {
        let mut cfg = ObserverConfig::default();
        cfg.grid_gx = 1;
        cfg.grid_gy = 1;
        cfg.per_cell_k = 2;
        cfg.min_separation = 8.0;
        let set = KeypointSet {
            points: vec![kp(50.0, 50.0, 0.9), kp(54.0, 50.0, 0.8)], // tau/2 apart
            frame_index: 0,
        };
        let out = homogenize(&set, 100, 100, &cfg);
        assert_eq!(out.len(), 1);
        assert!((out.points[0].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn homogenize_keeps_k_mutually_separated() {
        let mut cfg = ObserverConfig::default();
        cfg.grid_gx = 1;
        cfg.grid_gy = 1;
        cfg.per_cell_k = 3;
        cfg.min_separation = 8.0;
        let set = KeypointSet {
            points: vec![kp(10.0, 10.0, 0.9), kp(30.0, 10.0, 0.8), kp(10.0, 30.0, 0.7)],
            frame_index: 0,
        };
        assert_eq!(homogenize(&set, 100, 100, &cfg).len(), 3);
    }

    #[test]
    fn homogenize_separation_holds_per_cell() {
        // Property: every surviving pair within the same cell is >= tau apart
        // and per-cell counts never exceed k.
        let mut cfg = ObserverConfig::default();
        cfg.grid_gx = 4;
        cfg.grid_gy = 4;
        cfg.per_cell_k = 2;
        cfg.min_separation = 6.0;
        let mut points = Vec::new();
        let mut v = 1u32;
        for i in 0..200 {
            // cheap LCG for a scattered deterministic cloud
            v = v.wrapping_mul(1664525).wrapping_add(1013904223);
            let x = (v >> 8) as f64 % 128.0;
            v = v.wrapping_mul(1664525).wrapping_add(1013904223);
            let y = (v >> 8) as f64 % 128.0;
            points.push(kp(x, y, (i as f64 % 97.0) / 97.0));
        }
        let out = homogenize(
            &KeypointSet {
                points,
                frame_index: 0,
            },
            128,
            128,
            &cfg,
        );
        let cell = |p: &ScoredKeypoint| {
            (
                ((p.x / 32.0) as usize).min(3),
                ((p.y / 32.0) as usize).min(3),
            )
        };
        let mut counts = std::collections::HashMap::new();
        for p in &out.points {
            *counts.entry(cell(p)).or_insert(0usize) += 1;
        }
        assert!(counts.values().all(|&c| c <= 2));
        for i in 0..out.points.len() {
            for j in (i + 1)..out.points.len() {
                let (a, b) = (&out.points[i], &out.points[j]);
                if cell(a) == cell(b) {
                    let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                    assert!(d >= cfg.min_separation);
                }
            }
        }
    }

    #[test]
    fn guidance_mask_counts_exact_disk() {
        let set = KeypointSet {
            points: vec![kp(10.0, 10.0, 1.0)],
            frame_index: 0,
        };
        let mask = build_guidance_mask(&set, 3.0, 32, 32);
        // Exhaustive scan: pixels with distance <= 3 from (10,10).
        let mut expect = 0;
        for y in 0..32 {
            for x in 0..32 {
                let d2 = (x as f64 - 10.0).powi(2) + (y as f64 - 10.0).powi(2);
                let inside = d2 <= 9.0;
                if inside {
                    expect += 1;
                }
                assert_eq!(mask.get(x, y), inside, "pixel {x},{y}");
            }
        }
        assert_eq!(expect, 29);
        assert_eq!(mask.count_ones(), 29);
    }

    #[test]
    fn guidance_mask_empty_and_saturated() {
        let empty = KeypointSet::new(0);
        let mask = build_guidance_mask(&empty, 5.0, 16, 16);
        assert_eq!(mask.count_ones(), 0);
        let one = KeypointSet {
            points: vec![kp(8.0, 8.0, 1.0)],
            frame_index: 0,
        };
        let all = build_guidance_mask(&one, 1000.0, 16, 16);
        assert_eq!(all.count_ones(), 256);
    }

    #[test]
    fn fuse_flow_identity_under_full_mask() {
        let mut dense = FlowField::zeros(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                dense.set(x, y, [x as f32, y as f32]);
            }
        }
        let set = KeypointSet {
            points: vec![kp(8.0, 8.0, 1.0)],
            frame_index: 0,
        };
        let mask = build_guidance_mask(&set, 1000.0, 16, 16);
        let fused = fuse_flow(&dense, &set, &mask).unwrap();
        assert_eq!(fused, dense);
    }

    #[test]
    fn fuse_flow_single_candidate_constant_outside() {
        let mut dense = FlowField::zeros(16, 16);
        dense.set(8, 8, [2.0, -1.0]);
        let set = KeypointSet {
            points: vec![kp(8.0, 8.0, 1.0)],
            frame_index: 0,
        };
        // all-zero mask: interpolation everywhere
        let mask = GuidanceMask {
            width: 16,
            height: 16,
            bits: vec![false; 256],
        };
        let fused = fuse_flow(&dense, &set, &mask).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(fused.get(x, y), [2.0, -1.0]);
            }
        }
    }

    #[test]
    fn fuse_flow_symmetric_idw() {
        let mut dense = FlowField::zeros(21, 5);
        dense.set(0, 2, [1.0, 0.0]);
        dense.set(20, 2, [3.0, 0.0]);
        let set = KeypointSet {
            points: vec![kp(0.0, 2.0, 1.0), kp(20.0, 2.0, 1.0)],
            frame_index: 0,
        };
        let mask = GuidanceMask {
            width: 21,
            height: 5,
            bits: vec![false; 105],
        };
        let fused = fuse_flow(&dense, &set, &mask).unwrap();
        let mid = fused.get(10, 2);
        assert!((mid[0] - 2.0).abs() < 1e-6);
        assert!(mid[1].abs() < 1e-6);
        // exact at the sample sites
        assert_eq!(fused.get(0, 2), [1.0, 0.0]);
        assert_eq!(fused.get(20, 2), [3.0, 0.0]);
    }

    #[test]
    fn fuse_flow_empty_candidates_passthrough() {
        let mut dense = FlowField::zeros(8, 8);
        dense.set(3, 3, [5.0, 5.0]);
        let empty = KeypointSet::new(0);
        let mask = build_guidance_mask(&empty, 4.0, 8, 8);
        let fused = fuse_flow(&dense, &empty, &mask).unwrap();
        assert_eq!(fused, dense);
    }

    #[test]
    fn sample_motion_constant_and_linear_fields() {
        let mut constant = FlowField::zeros(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                constant.set(x, y, [2.0, -1.0]);
            }
        }
        let set = KeypointSet {
            points: vec![kp(5.2, 7.9, 1.0), kp(20.0, 3.0, 0.5)],
            frame_index: 3,
        };
        let m = sample_motion(&constant, &set);
        assert_eq!(m.len(), 2);
        for d in &m.displacements {
            assert!((d[0] - 2.0).abs() < 1e-9 && (d[1] + 1.0).abs() < 1e-9);
        }

        let mut linear = FlowField::zeros(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                linear.set(x, y, [0.5 * x as f32, 0.0]);
            }
        }
        let set = KeypointSet {
            points: vec![kp(10.25, 16.0, 1.0)],
            frame_index: 0,
        };
        let m = sample_motion(&linear, &set);
        assert!((m.displacements[0][0] - 0.5 * 10.25).abs() < 1e-6);

        let zero = FlowField::zeros(32, 32);
        let m = sample_motion(&zero, &set);
        assert_eq!(m.displacements[0], [0.0, 0.0]);
    }
}
