//! Built-in corner detectors: Shi-Tomasi (minimum eigenvalue of the
//! structure tensor) and FAST-9.

use super::{DetectorId, KeypointSet, ObserverConfig, ObserverError, ScoredKeypoint};
use crate::frame::{Frame, GrayImage};

/// Absolute response floor: flat frames produce no detections.
const SHI_ABS_FLOOR: f32 = 1e-6;
const FAST_SCORE_FLOOR: f64 = 1e-9;

/// Detect keypoints with one built-in detector. Scores are normalized to
/// [0, 1] by the per-frame maximum; at most `max_candidates` points are
/// returned (highest scores first).
pub fn detect_keypoints(
    frame: &Frame,
    detector: DetectorId,
    cfg: &ObserverConfig,
) -> Result<KeypointSet, ObserverError> {
    if frame.is_empty() {
        return Err(ObserverError::EmptyFrame);
    }
    let gray = frame.to_luma_f32();
    let mut points = match detector {
        DetectorId::ShiTomasi => shi_tomasi(&gray, cfg),
        DetectorId::Fast9 => fast9(&gray, cfg),
        DetectorId::Imported => Vec::new(),
    };
    points.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.y.partial_cmp(&b.y).unwrap())
            .then_with(|| a.x.partial_cmp(&b.x).unwrap())
    });
    points.truncate(cfg.max_candidates);
    Ok(KeypointSet {
        points,
        frame_index: frame.index,
    })
}

/// Min-eigenvalue response of the 3x3-summed structure tensor at every pixel.
/// Exposed for test oracles that scan the raw response surface.
pub fn shi_tomasi_response_map(gray: &GrayImage) -> Vec<f32> {
    let (w, h) = (gray.width, gray.height);
    let mut ix = vec![0.0f32; w * h];
    let mut iy = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let xi = x as isize;
            let yi = y as isize;
            // Sobel gradients with clamped borders.
            let gx = (gray.at_clamped(xi + 1, yi - 1) - gray.at_clamped(xi - 1, yi - 1))
                + 2.0 * (gray.at_clamped(xi + 1, yi) - gray.at_clamped(xi - 1, yi))
                + (gray.at_clamped(xi + 1, yi + 1) - gray.at_clamped(xi - 1, yi + 1));
            let gy = (gray.at_clamped(xi - 1, yi + 1) - gray.at_clamped(xi - 1, yi - 1))
                + 2.0 * (gray.at_clamped(xi, yi + 1) - gray.at_clamped(xi, yi - 1))
                + (gray.at_clamped(xi + 1, yi + 1) - gray.at_clamped(xi + 1, yi - 1));
            ix[y * w + x] = gx * 0.125;
            iy[y * w + x] = gy * 0.125;
        }
    }
    let mut resp = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut a = 0.0f32;
            let mut b = 0.0f32;
            let mut c = 0.0f32;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let gx = ix[yy * w + xx];
                    let gy = iy[yy * w + xx];
                    a += gx * gx;
                    b += gx * gy;
                    c += gy * gy;
                }
            }
            // Smaller eigenvalue of [[a, b], [b, c]].
            let half_trace = 0.5 * (a + c);
            let det_part = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            resp[y * w + x] = half_trace - det_part;
        }
    }
    resp
}

fn shi_tomasi(gray: &GrayImage, cfg: &ObserverConfig) -> Vec<ScoredKeypoint> {
    let (w, h) = (gray.width, gray.height);
    let resp = shi_tomasi_response_map(gray);
    let max_resp = resp.iter().cloned().fold(0.0f32, f32::max);
    if max_resp <= SHI_ABS_FLOOR {
        return Vec::new();
    }
    let thresh = (cfg.shi_quality as f32 * max_resp).max(SHI_ABS_FLOOR);
    let mut out = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let v = resp[y * w + x];
            if v < thresh {
                continue;
            }
            // 3x3 local maximum keeps one point per corner plateau.
            let mut is_max = true;
            'nms: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nv = resp[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
                    if nv > v || (nv == v && (dy < 0 || (dy == 0 && dx < 0))) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                out.push(ScoredKeypoint {
                    x: x as f64,
                    y: y as f64,
                    score: (v / max_resp) as f64,
                    detector_id: DetectorId::ShiTomasi,
                });
            }
        }
    }
    out
}

/// Bresenham circle of radius 3 used by FAST.
const FAST_CIRCLE: [(isize, isize); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

fn fast9(gray: &GrayImage, cfg: &ObserverConfig) -> Vec<ScoredKeypoint> {
    let (w, h) = (gray.width, gray.height);
    if w < 7 || h < 7 {
        return Vec::new();
    }
    let t = cfg.fast_threshold as f32;
    let mut raw: Vec<(usize, usize, f64)> = Vec::new();
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            let c = gray.at(x, y);
            let mut brighter = [false; 16];
            let mut darker = [false; 16];
            for (i, (dx, dy)) in FAST_CIRCLE.iter().enumerate() {
                let p = gray.at((x as isize + dx) as usize, (y as isize + dy) as usize);
                brighter[i] = p > c + t;
                darker[i] = p < c - t;
            }
            let arc = |flags: &[bool; 16]| -> bool {
                let mut run = 0;
                // Wrap around by scanning twice.
                for i in 0..32 {
                    if flags[i % 16] {
                        run += 1;
                        if run >= 9 {
                            return true;
                        }
                    } else {
                        run = 0;
                    }
                }
                false
            };
            if arc(&brighter) || arc(&darker) {
                // Score: mean absolute contrast over the circle beyond t.
                let mut s = 0.0f32;
                for (dx, dy) in FAST_CIRCLE.iter() {
                    let p = gray.at((x as isize + dx) as usize, (y as isize + dy) as usize);
                    s += (p - c).abs().max(t) - t;
                }
                raw.push((x, y, s as f64 / 16.0));
            }
        }
    }
    // 3x3 non-max suppression on the FAST score.
    let mut score_map = std::collections::HashMap::new();
    for &(x, y, s) in &raw {
        score_map.insert((x, y), s);
    }
    let max_score = raw.iter().map(|r| r.2).fold(0.0f64, f64::max);
    if max_score <= FAST_SCORE_FLOOR {
        return Vec::new();
    }
    let mut out = Vec::new();
    for &(x, y, s) in &raw {
        let mut is_max = true;
        'nms: for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                if let Some(&ns) = score_map.get(&(
                    (x as isize + dx) as usize,
                    (y as isize + dy) as usize,
                )) {
                    if ns > s || (ns == s && (dy < 0 || (dy == 0 && dx < 0))) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
        }
        if is_max {
            out.push(ScoredKeypoint {
                x: x as f64,
                y: y as f64,
                score: s / max_score,
                detector_id: DetectorId::Fast9,
            });
        }
    }
    out
}
