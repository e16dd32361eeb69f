//! Pyramidal Lucas-Kanade tracking, the built-in causal flow observer.
//!
//! Reported displacements are the forward content motion between the frame
//! pair: the content at pixel x of the current frame sat at x - u(x) in the
//! previous frame.

use super::{FlowField, KeypointSet, MotionSample, ObserverConfig, ObserverError};
use crate::frame::{Frame, GrayImage};

/// Minimum eigenvalue (per pixel) of the LK normal matrix below which a
/// track is declared lost.
const MIN_EIGEN_PER_PIXEL: f32 = 1e-6;
const CONVERGENCE_EPS: f32 = 0.01;

pub struct Pyramid {
    levels: Vec<GrayImage>,
}

impl Pyramid {
    pub fn build(gray: GrayImage, levels: usize) -> Self {
        let mut v = vec![gray];
        for _ in 1..levels {
            let next = v.last().unwrap().half_size();
            if next.width < 8 || next.height < 8 {
                break;
            }
            v.push(next);
        }
        Self { levels: v }
    }

    pub fn of_frame(frame: &Frame, levels: usize) -> Self {
        Self::build(frame.to_luma_f32(), levels)
    }
}

/// Single-level LK iteration: returns the displacement d such that
/// `search(p + d) ~= template(p)` in a window around p, or None on failure.
fn lk_at_level(
    template: &GrayImage,
    search: &GrayImage,
    px: f32,
    py: f32,
    init: [f32; 2],
    half: isize,
    iters: usize,
) -> Option<[f32; 2]> {
    let n = (2 * half + 1) * (2 * half + 1);
    // Sample the template patch once (with a 1 px apron) and take central
    // differences inside the buffer.
    let ext = half + 1;
    let side = (2 * ext + 1) as usize;
    let mut patch = vec![0.0f32; side * side];
    for dy in -ext..=ext {
        for dx in -ext..=ext {
            patch[((dy + ext) * side as isize + dx + ext) as usize] =
                template.sample(px + dx as f32, py + dy as f32);
        }
    }
    let at = |dx: isize, dy: isize| patch[((dy + ext) * side as isize + dx + ext) as usize];

    let mut tv = Vec::with_capacity(n as usize);
    let mut gx = Vec::with_capacity(n as usize);
    let mut gy = Vec::with_capacity(n as usize);
    let mut a = 0.0f32;
    let mut b = 0.0f32;
    let mut c = 0.0f32;
    for dy in -half..=half {
        for dx in -half..=half {
            let v = at(dx, dy);
            let dgx = 0.5 * (at(dx + 1, dy) - at(dx - 1, dy));
            let dgy = 0.5 * (at(dx, dy + 1) - at(dx, dy - 1));
            tv.push(v);
            gx.push(dgx);
            gy.push(dgy);
            a += dgx * dgx;
            b += dgx * dgy;
            c += dgy * dgy;
        }
    }
    let half_trace = 0.5 * (a + c);
    let det_part = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let min_eig = half_trace - det_part;
    if min_eig < MIN_EIGEN_PER_PIXEL * n as f32 {
        return None;
    }
    let det = a * c - b * b;
    if det.abs() < 1e-12 {
        return None;
    }

    let mut d = init;
    for _ in 0..iters {
        let mut e1 = 0.0f32;
        let mut e2 = 0.0f32;
        let mut k = 0usize;
        for dy in -half..=half {
            for dx in -half..=half {
                let x = px + dx as f32 + d[0];
                let y = py + dy as f32 + d[1];
                let diff = tv[k] - search.sample(x, y);
                e1 += gx[k] * diff;
                e2 += gy[k] * diff;
                k += 1;
            }
        }
        let step_x = (c * e1 - b * e2) / det;
        let step_y = (a * e2 - b * e1) / det;
        d[0] += step_x;
        d[1] += step_y;
        if step_x.abs() < CONVERGENCE_EPS && step_y.abs() < CONVERGENCE_EPS {
            break;
        }
        if !d[0].is_finite() || !d[1].is_finite() {
            return None;
        }
    }
    // Reject tracks that wander far outside the search image.
    let tx = px + d[0];
    let ty = py + d[1];
    if tx < -(half as f32) || ty < -(half as f32) {
        return None;
    }
    if tx > search.width as f32 + half as f32 || ty > search.height as f32 + half as f32 {
        return None;
    }
    Some(d)
}

/// Coarse-to-fine track of one point from `template` into `search`.
pub(crate) fn track_pyramid(
    template: &Pyramid,
    search: &Pyramid,
    px: f32,
    py: f32,
    cfg: &ObserverConfig,
) -> Option<[f32; 2]> {
    let levels = template.levels.len().min(search.levels.len());
    let half = (cfg.lk_window / 2) as isize;
    let mut d = [0.0f32; 2];
    for level in (0..levels).rev() {
        let scale = (1 << level) as f32;
        let t = &template.levels[level];
        let s = &search.levels[level];
        let lx = px / scale;
        let ly = py / scale;
        d = lk_at_level(t, s, lx, ly, d, half, cfg.lk_iters)?;
        if level > 0 {
            d[0] *= 2.0;
            d[1] *= 2.0;
        }
    }
    Some(d)
}

/// Track one point of the current frame to its previous-frame location and
/// return the forward displacement u = p_cur - p_prev, or None on failure.
pub fn track_point(
    prev: &Frame,
    cur: &Frame,
    x: f64,
    y: f64,
    cfg: &ObserverConfig,
) -> Option<[f64; 2]> {
    let prev_pyr = Pyramid::build(prev.to_luma_f32(), cfg.pyramid_levels);
    let cur_pyr = Pyramid::build(cur.to_luma_f32(), cfg.pyramid_levels);
    track_pyramid(&cur_pyr, &prev_pyr, x as f32, y as f32, cfg)
        .map(|d| [-d[0] as f64, -d[1] as f64])
}

/// Per-keypoint forward displacements with forward-backward consistency
/// confidences: omega = score * exp(-fb_error), clamped to [0, 1]; failed
/// tracks get zero displacement and zero confidence.
pub fn estimate_sparse_flow(
    prev: &Frame,
    cur: &Frame,
    pts: &KeypointSet,
    cfg: &ObserverConfig,
) -> Result<MotionSample, ObserverError> {
    if prev.width != cur.width || prev.height != cur.height {
        return Err(ObserverError::DimensionMismatch(
            prev.width,
            prev.height,
            cur.width,
            cur.height,
        ));
    }
    let prev_pyr = Pyramid::of_frame(prev, cfg.pyramid_levels);
    let cur_pyr = Pyramid::of_frame(cur, cfg.pyramid_levels);
    estimate_sparse_flow_pyr(&prev_pyr, &cur_pyr, (cur.width, cur.height), pts, cfg)
}

pub(crate) fn estimate_sparse_flow_pyr(
    prev_pyr: &Pyramid,
    cur_pyr: &Pyramid,
    dims: (usize, usize),
    pts: &KeypointSet,
    cfg: &ObserverConfig,
) -> Result<MotionSample, ObserverError> {
    let mut sample = MotionSample {
        frame_index: pts.frame_index,
        frame_width: dims.0,
        frame_height: dims.1,
        ..Default::default()
    };
    for kp in &pts.points {
        sample.keypoints.push(kp.pos());
        let to_prev = track_pyramid(cur_pyr, prev_pyr, kp.x as f32, kp.y as f32, cfg);
        let (disp, omega) = match to_prev {
            Some(d) => {
                // Track the matched previous-frame point back into the
                // current frame; the return error gauges reliability.
                let qx = kp.x as f32 + d[0];
                let qy = kp.y as f32 + d[1];
                match track_pyramid(prev_pyr, cur_pyr, qx, qy, cfg) {
                    Some(back) => {
                        let rx = qx + back[0] - kp.x as f32;
                        let ry = qy + back[1] - kp.y as f32;
                        let fb = (rx * rx + ry * ry).sqrt() as f64;
                        let omega = (kp.score * (-fb).exp()).clamp(0.0, 1.0);
                        // Forward motion is the negated cur-to-prev track.
                        ([-d[0] as f64, -d[1] as f64], omega)
                    }
                    None => ([0.0, 0.0], 0.0),
                }
            }
            None => ([0.0, 0.0], 0.0),
        };
        sample.displacements.push(disp);
        sample.confidences.push(omega);
    }
    Ok(sample)
}

/// Built-in dense causal flow: LK on a stride lattice, failures filled
/// with the median of successful lattice vectors, bilinearly upsampled to
/// full resolution. Vectors are forward content motion per pixel.
pub fn estimate_dense_flow(
    prev: &Frame,
    cur: &Frame,
    cfg: &ObserverConfig,
) -> Result<FlowField, ObserverError> {
    if prev.width != cur.width || prev.height != cur.height {
        return Err(ObserverError::DimensionMismatch(
            prev.width,
            prev.height,
            cur.width,
            cur.height,
        ));
    }
    let prev_pyr = Pyramid::of_frame(prev, cfg.pyramid_levels);
    let cur_pyr = Pyramid::of_frame(cur, cfg.pyramid_levels);
    Ok(estimate_dense_flow_pyr(
        &prev_pyr,
        &cur_pyr,
        (cur.width, cur.height),
        cfg,
    ))
}

pub(crate) fn estimate_dense_flow_pyr(
    prev_pyr: &Pyramid,
    cur_pyr: &Pyramid,
    dims: (usize, usize),
    cfg: &ObserverConfig,
) -> FlowField {
    let (w, h) = dims;
    let stride = cfg.dense_stride.max(1);
    let nx = (w + stride - 1) / stride;
    let ny = (h + stride - 1) / stride;
    let mut lattice: Vec<Option<[f32; 2]>> = vec![None; nx * ny];
    let mut oks: Vec<[f32; 2]> = Vec::new();
    for gy in 0..ny {
        for gx in 0..nx {
            let px = ((gx * stride) as f32 + stride as f32 / 2.0).min(w as f32 - 1.0);
            let py = ((gy * stride) as f32 + stride as f32 / 2.0).min(h as f32 - 1.0);
            let d = track_pyramid(cur_pyr, prev_pyr, px, py, cfg).map(|d| [-d[0], -d[1]]);
            if let Some(v) = d {
                oks.push(v);
            }
            lattice[gy * nx + gx] = d;
        }
    }
    let fill = median2(&oks);
    let values: Vec<[f64; 2]> = lattice
        .iter()
        .map(|v| {
            let v = v.unwrap_or(fill);
            [v[0] as f64, v[1] as f64]
        })
        .collect();

    let mut field = FlowField::zeros(w, h);
    let sx = stride as f64;
    for y in 0..h {
        for x in 0..w {
            let gx = (x as f64 - sx / 2.0) / sx;
            let gy = (y as f64 - sx / 2.0) / sx;
            let v = crate::geometry::bilinear_at(nx, ny, |c, r| values[r * nx + c], gx, gy);
            field.set(x, y, [v[0] as f32, v[1] as f32]);
        }
    }
    field
}

fn median2(v: &[[f32; 2]]) -> [f32; 2] {
    if v.is_empty() {
        return [0.0, 0.0];
    }
    let mut xs: Vec<f32> = v.iter().map(|p| p[0]).collect();
    let mut ys: Vec<f32> = v.iter().map(|p| p[1]).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    [xs[xs.len() / 2], ys[ys.len() / 2]]
}
