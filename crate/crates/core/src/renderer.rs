//! Stage 3b, motion compensation: difference field between smoothed and raw
//! trajectories, backward-mapped frame warping, and the border crop/zoom
//! policy that removes invalid margins.

use crate::frame::Frame;
use crate::propagation::{GridSpec, PropagationError};
use crate::smoother::VertexField;
use serde::{Deserialize, Serialize};

/// What to do about the invalid margins the warp leaves near frame borders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BorderPolicy {
    /// Crop the accumulated border excursion and zoom back to full size.
    #[default]
    CropZoom,
    /// Leave replicated borders visible (full field of view preserved).
    NoCrop,
}

/// Per-vertex compensation displacements M_t = S_t - O_t.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensationField {
    pub spec: GridSpec,
    vectors: Vec<[f64; 2]>,
}

impl CompensationField {
    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            spec,
            vectors: vec![[0.0; 2]; spec.vertex_count()],
        }
    }

    pub fn from_vectors(spec: GridSpec, vectors: Vec<[f64; 2]>) -> Self {
        assert_eq!(vectors.len(), spec.vertex_count());
        Self { spec, vectors }
    }

    pub fn constant(spec: GridSpec, dx: f64, dy: f64) -> Self {
        Self {
            spec,
            vectors: vec![[dx, dy]; spec.vertex_count()],
        }
    }

    pub fn vectors(&self) -> &[[f64; 2]] {
        &self.vectors
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 2] {
        self.vectors[row * self.spec.cols + col]
    }

    /// Bilinear sample at pixel coordinates.
    pub fn sample_pixel(&self, x: f64, y: f64) -> [f64; 2] {
        let (lx, ly) = self.spec.to_lattice(crate::geometry::Point2::new(x, y));
        crate::geometry::bilinear_at(
            self.spec.cols,
            self.spec.rows,
            |c, r| self.vectors[r * self.spec.cols + c],
            lx,
            ly,
        )
    }
}

/// M_t = S_t - O_t, element-wise.
pub fn compensation_field(
    s_t: &VertexField,
    o_t: &VertexField,
    spec: GridSpec,
) -> Result<CompensationField, PropagationError> {
    if s_t.len() != spec.vertex_count() || o_t.len() != spec.vertex_count() {
        return Err(PropagationError::SpecMismatch);
    }
    let vectors = s_t
        .iter()
        .zip(o_t)
        .map(|(s, o)| [s[0] - o[0], s[1] - o[1]])
        .collect();
    Ok(CompensationField::from_vectors(spec, vectors))
}

/// Backward-mapped warp as continuous values, one f64 per sample: output
/// pixel x reads the input at x - M(x) with bilinear resampling and
/// replicated borders. Kept separate from the quantized path so tests can
/// compare against a naive resampler at full precision.
pub fn warp_frame_dense(frame: &Frame, field: &CompensationField) -> Vec<f64> {
    let (w, h, ch) = (frame.width, frame.height, frame.channels);
    let mut out = vec![0.0f64; w * h * ch];
    let data = frame.data();
    let maxx = (w - 1) as f64;
    let maxy = (h - 1) as f64;
    for y in 0..h {
        for x in 0..w {
            let m = field.sample_pixel(x as f64, y as f64);
            let sx = (x as f64 - m[0]).clamp(0.0, maxx);
            let sy = (y as f64 - m[1]).clamp(0.0, maxy);
            let x0 = (sx.floor() as usize).min(w - 1);
            let y0 = (sy.floor() as usize).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for c in 0..ch {
                let v00 = data[(y0 * w + x0) * ch + c] as f64;
                let v10 = data[(y0 * w + x1) * ch + c] as f64;
                let v01 = data[(y1 * w + x0) * ch + c] as f64;
                let v11 = data[(y1 * w + x1) * ch + c] as f64;
                let top = v00 * (1.0 - fx) + v10 * fx;
                let bot = v01 * (1.0 - fx) + v11 * fx;
                out[(y * w + x) * ch + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Quantized backward warp; the zero field reproduces the input exactly.
pub fn warp_frame(frame: &Frame, field: &CompensationField) -> Frame {
    let dense = warp_frame_dense(frame, field);
    let data: Vec<u8> = dense.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    Frame::new(frame.index, frame.width, frame.height, frame.channels, data).unwrap()
}

/// Border geometry and the Appendix-style crop/scale factors derived from a
/// compensation field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BorderReport {
    /// Per-side horizontal border thickness in pixels.
    pub b_hor: f64,
    /// Per-side vertical border thickness in pixels.
    pub b_ver: f64,
    /// Preserved-content ratio (W-2b)(H-2b)/(WH).
    pub crop_ratio: f64,
    pub scale_w: f64,
    pub scale_h: f64,
    /// Isotropic factor max(scale_w, scale_h).
    pub scale_iso: f64,
}

impl BorderReport {
    pub fn from_borders(b_hor: f64, b_ver: f64, width: usize, height: usize) -> Self {
        let w = width as f64;
        let h = height as f64;
        let b_hor = b_hor.clamp(0.0, w / 2.0 - 0.5);
        let b_ver = b_ver.clamp(0.0, h / 2.0 - 0.5);
        let wc = w - 2.0 * b_hor;
        let hc = h - 2.0 * b_ver;
        let scale_w = w / wc;
        let scale_h = h / hc;
        Self {
            b_hor,
            b_ver,
            crop_ratio: (wc * hc) / (w * h),
            scale_w,
            scale_h,
            scale_iso: scale_w.max(scale_h),
        }
    }

    pub fn identity() -> Self {
        Self {
            b_hor: 0.0,
            b_ver: 0.0,
            crop_ratio: 1.0,
            scale_w: 1.0,
            scale_h: 1.0,
            scale_iso: 1.0,
        }
    }
}

/// Maximum inward excursion of the warped frame boundary per axis. With the
/// backward mapping, output pixels near an edge lose content when the
/// compensation pushes their source outside the input; the per-side maxima
/// over the boundary vertices bound that loss (the field is linear along
/// each edge, so vertex extrema are exact).
pub fn measure_borders(field: &CompensationField, width: usize, height: usize) -> BorderReport {
    let spec = &field.spec;
    let mut left = 0.0f64;
    let mut right = 0.0f64;
    let mut top = 0.0f64;
    let mut bottom = 0.0f64;
    for r in 0..spec.rows {
        left = left.max(field.get(r, 0)[0]);
        right = right.max(-field.get(r, spec.cols - 1)[0]);
    }
    for c in 0..spec.cols {
        top = top.max(field.get(0, c)[1]);
        bottom = bottom.max(-field.get(spec.rows - 1, c)[1]);
    }
    BorderReport::from_borders(left.max(right), top.max(bottom), width, height)
}

/// Causal border accumulator: tracks per-frame excursions over a sliding
/// window so the zoom factor adapts without pumping frame to frame.
#[derive(Debug, Clone)]
pub struct BorderTracker {
    window: usize,
    width: usize,
    height: usize,
    history: Vec<(f64, f64)>,
}

impl BorderTracker {
    pub fn new(window: usize, width: usize, height: usize) -> Self {
        Self {
            window: window.max(1),
            width,
            height,
            history: Vec::new(),
        }
    }

    pub fn observe(&mut self, field: &CompensationField) -> BorderReport {
        let r = measure_borders(field, self.width, self.height);
        self.history.push((r.b_hor, r.b_ver));
        if self.history.len() > self.window {
            self.history.remove(0);
        }
        self.current()
    }

    pub fn current(&self) -> BorderReport {
        let b_hor = self.history.iter().map(|p| p.0).fold(0.0, f64::max);
        let b_ver = self.history.iter().map(|p| p.1).fold(0.0, f64::max);
        BorderReport::from_borders(b_hor, b_ver, self.width, self.height)
    }
}

/// Central crop of size (W/s, H/s) isotropically rescaled back to (W, H) by
/// bilinear resampling. s = 1 is the identity.
pub fn apply_crop_zoom(frame: &Frame, report: &BorderReport) -> Frame {
    let s = report.scale_iso.max(1.0);
    if s == 1.0 {
        return frame.clone();
    }
    let (w, h, ch) = (frame.width, frame.height, frame.channels);
    let data = frame.data();
    let crop_w = w as f64 / s;
    let crop_h = h as f64 / s;
    let x_off = (w as f64 - crop_w) / 2.0;
    let y_off = (h as f64 - crop_h) / 2.0;
    let mut out = vec![0u8; w * h * ch];
    for y in 0..h {
        for x in 0..w {
            // Pixel-center mapping: output center (x+0.5) lands at the crop
            // position scaled by crop/full, which is exact for s = 1.
            let sx = (x_off + (x as f64 + 0.5) * crop_w / w as f64 - 0.5)
                .clamp(0.0, (w - 1) as f64);
            let sy = (y_off + (y as f64 + 0.5) * crop_h / h as f64 - 0.5)
                .clamp(0.0, (h - 1) as f64);
            let x0 = (sx.floor() as usize).min(w - 1);
            let y0 = (sy.floor() as usize).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for c in 0..ch {
                let v00 = data[(y0 * w + x0) * ch + c] as f64;
                let v10 = data[(y0 * w + x1) * ch + c] as f64;
                let v01 = data[(y1 * w + x0) * ch + c] as f64;
                let v11 = data[(y1 * w + x1) * ch + c] as f64;
                let top = v00 * (1.0 - fx) + v10 * fx;
                let bot = v01 * (1.0 - fx) + v11 * fx;
                out[(y * w + x) * ch + c] = (top * (1.0 - fy) + bot * fy)
                    .round()
                    .clamp(0.0, 255.0) as u8;
            }
        }
    }
    Frame::new(frame.index, w, h, ch, out).unwrap()
}
