//! Evaluation metrics: cropping ratio, distortion value, stability score,
//! and PSNR, all derived from per-frame homographies between video pairs.

use crate::frame::Frame;
use crate::geometry::{
    estimate_homography_ransac, Correspondence, Homography, Point2, RansacConfig,
};
use crate::observer::{detect_keypoints, estimate_sparse_flow, DetectorId, ObserverConfig};
use nalgebra::Matrix2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("frame dimension mismatch")]
    DimensionMismatch,
    #[error("no frame produced a valid homography")]
    AllFramesInvalid,
    #[error("need at least {min} valid frames, got {got}")]
    TooShort { min: usize, got: usize },
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Per-frame homographies with validity flags; invalid frames are excluded
/// from every aggregate.
#[derive(Debug, Clone)]
pub struct FrameTransformSeries {
    pub transforms: Vec<Option<Homography>>,
}

impl FrameTransformSeries {
    pub fn from_valid(transforms: Vec<Homography>) -> Self {
        Self {
            transforms: transforms.into_iter().map(Some).collect(),
        }
    }

    pub fn valid(&self) -> impl Iterator<Item = &Homography> {
        self.transforms.iter().filter_map(|t| t.as_ref())
    }

    pub fn valid_count(&self) -> usize {
        self.valid().count()
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub cropping: f64,
    pub distortion: f64,
    pub stability: f64,
    pub stability_input: f64,
    /// Mean PSNR in dB over frames with finite values; None when every
    /// frame pair is identical (infinite PSNR).
    pub psnr_mean: Option<f64>,
    pub frames: usize,
    pub valid_frames: usize,
    #[serde(skip)]
    pub per_frame: Vec<FrameTrace>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FrameTrace {
    pub frame: u64,
    pub cropping: Option<f64>,
    pub distortion: Option<f64>,
    pub psnr: Option<f64>,
}

/// Estimate one global homography per frame pair (input -> stabilized) by
/// tracking detected corners between the pair; frames without consensus are
/// flagged invalid.
pub fn estimate_frame_transforms(
    inputs: &[Frame],
    outputs: &[Frame],
    ransac: &RansacConfig,
) -> Result<FrameTransformSeries, MetricsError> {
    if inputs.len() != outputs.len() {
        return Err(MetricsError::LengthMismatch(inputs.len(), outputs.len()));
    }
    let cfg = ObserverConfig::default();
    let mut transforms = Vec::with_capacity(inputs.len());
    for (t, (a, b)) in inputs.iter().zip(outputs).enumerate() {
        if a.width != b.width || a.height != b.height {
            return Err(MetricsError::DimensionMismatch);
        }
        transforms.push(pair_homography(a, b, &cfg, &ransac.for_frame(t as u64)));
    }
    let series = FrameTransformSeries { transforms };
    if series.valid_count() == 0 {
        return Err(MetricsError::AllFramesInvalid);
    }
    Ok(series)
}

fn pair_homography(
    a: &Frame,
    b: &Frame,
    cfg: &ObserverConfig,
    ransac: &RansacConfig,
) -> Option<Homography> {
    let kps = detect_keypoints(a, DetectorId::ShiTomasi, cfg).ok()?;
    if kps.len() < 8 {
        return None;
    }
    // Track from frame a into frame b: estimate_sparse_flow treats its
    // second argument as the tracked (current) frame, so feed (b, a); its
    // displacements are b-to-a motion, so a's content sits at p - d in b.
    let sample = estimate_sparse_flow(b, a, &kps, cfg).ok()?;
    let corrs: Vec<Correspondence> = (0..sample.len())
        .filter(|&i| sample.confidences[i] > 0.1)
        .map(|i| {
            let p = sample.keypoints[i];
            let d = sample.displacements[i];
            Correspondence::new(p, Point2::new(p.x - d[0], p.y - d[1]), sample.confidences[i])
        })
        .collect();
    if corrs.len() < 8 {
        return None;
    }
    estimate_homography_ransac(&corrs, ransac).ok().map(|(h, _)| h)
}

/// Mean preserved field-of-view fraction: the four input corners are
/// projected, the axis-aligned interior box is intersected with the
/// viewport, and the per-frame ratio is min(width, height) preservation.
pub fn cropping_ratio(
    series: &FrameTransformSeries,
    width: usize,
    height: usize,
) -> Result<f64, MetricsError> {
    if series.valid_count() == 0 {
        return Err(MetricsError::AllFramesInvalid);
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for h in series.valid() {
        if let Some(r) = frame_crop_ratio(h, width, height) {
            sum += r;
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::AllFramesInvalid);
    }
    Ok(sum / n as f64)
}

pub fn frame_crop_ratio(h: &Homography, width: usize, height: usize) -> Option<f64> {
    let w = width as f64;
    let hh = height as f64;
    let tl = h.project(Point2::new(0.0, 0.0)).ok()?;
    let tr = h.project(Point2::new(w, 0.0)).ok()?;
    let bl = h.project(Point2::new(0.0, hh)).ok()?;
    let br = h.project(Point2::new(w, hh)).ok()?;
    let left = tl.x.max(bl.x).max(0.0);
    let right = tr.x.min(br.x).min(w);
    let top = tl.y.max(tr.y).max(0.0);
    let bottom = bl.y.min(br.y).min(hh);
    let wr = ((right - left) / w).clamp(0.0, 1.0);
    let hr = ((bottom - top) / hh).clamp(0.0, 1.0);
    Some(wr.min(hr))
}

/// Worst-frame anisotropy of the affine block: min over frames of
/// sigma_min/sigma_max of the upper-left 2x2 after normalization.
pub fn distortion_value(series: &FrameTransformSeries) -> Result<f64, MetricsError> {
    if series.valid_count() == 0 {
        return Err(MetricsError::AllFramesInvalid);
    }
    let mut min_ratio = f64::INFINITY;
    for h in series.valid() {
        min_ratio = min_ratio.min(frame_distortion(h));
    }
    Ok(min_ratio)
}

pub fn frame_distortion(h: &Homography) -> f64 {
    let m = h.matrix();
    let a = Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    let svd = a.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax <= 0.0 {
        0.0
    } else {
        smin / smax
    }
}

/// Trajectory channels extracted from an accumulated transform series.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryChannels {
    /// Magnitude of the accumulated translation per frame.
    pub translation: Vec<f64>,
    /// Rotation proxy arctan(s_x / s_y) per frame.
    pub rotation: Vec<f64>,
}

/// Accumulate per-frame relative transforms into absolute trajectory
/// signals: translation magnitude and the scale-ratio rotation proxy.
pub fn accumulate_trajectory(series: &FrameTransformSeries) -> TrajectoryChannels {
    let mut acc = Homography::identity();
    let mut translation = Vec::new();
    let mut rotation = Vec::new();
    for h in series.valid() {
        if let Ok(next) = h.compose(&acc) {
            acc = next;
        }
        let m = acc.matrix();
        translation.push(m[(0, 2)].hypot(m[(1, 2)]));
        let sx = m[(0, 0)].hypot(m[(1, 0)]);
        let sy = m[(0, 1)].hypot(m[(1, 1)]);
        rotation.push((sx / sy.max(1e-12)).atan());
    }
    TrajectoryChannels {
        translation,
        rotation,
    }
}

/// Energy spectrum |X_m|^2 of a real signal for bins 0..=n/2.
pub fn half_spectrum(signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    buf.iter().take(n / 2 + 1).map(|c| c.norm_sqr()).collect()
}

/// Low-frequency energy ratio of one channel: bins 2..=6 over all non-DC
/// bins of the half spectrum. A channel with no non-DC energy scores 1.
pub fn channel_stability(signal: &[f64]) -> f64 {
    let spec = half_spectrum(signal);
    let total: f64 = spec.iter().skip(1).sum();
    if total <= 1e-12 {
        return 1.0;
    }
    let low: f64 = spec.iter().skip(2).take(5).sum();
    low / total
}

/// Stability score: the minimum of the translation- and rotation-channel
/// low-frequency energy ratios. Needs at least 12 valid frames so bins 2-6
/// exist in the half spectrum.
pub fn stability_score(series: &FrameTransformSeries) -> Result<f64, MetricsError> {
    let n = series.valid_count();
    if n < 12 {
        return Err(MetricsError::TooShort { min: 12, got: n });
    }
    let ch = accumulate_trajectory(series);
    let st = channel_stability(&ch.translation);
    let sr = channel_stability(&ch.rotation);
    Ok(st.min(sr))
}

/// Peak signal-to-noise ratio in dB; identical frames saturate to infinity.
pub fn psnr(reference: &Frame, test: &Frame) -> Result<f64, MetricsError> {
    if reference.width != test.width
        || reference.height != test.height
        || reference.channels != test.channels
    {
        return Err(MetricsError::DimensionMismatch);
    }
    let n = reference.data().len();
    let mse: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// Full metric evaluation of a stabilized sequence against its input.
pub fn evaluate(
    inputs: &[Frame],
    outputs: &[Frame],
    ransac: &RansacConfig,
) -> Result<MetricsReport, MetricsError> {
    if inputs.len() != outputs.len() {
        return Err(MetricsError::LengthMismatch(inputs.len(), outputs.len()));
    }
    if inputs.is_empty() {
        return Err(MetricsError::AllFramesInvalid);
    }
    let (w, h) = (inputs[0].width, inputs[0].height);
    let warp_series = estimate_frame_transforms(inputs, outputs, ransac)?;
    let cropping = cropping_ratio(&warp_series, w, h)?;
    let distortion = distortion_value(&warp_series)?;

    // Stability compares the temporal smoothness of the output video against
    // the input video, each measured from consecutive-frame homographies.
    let relative = |frames: &[Frame]| -> Result<FrameTransformSeries, MetricsError> {
        estimate_frame_transforms(&frames[..frames.len() - 1], &frames[1..], ransac)
    };
    let stability = if outputs.len() >= 13 {
        stability_score(&relative(outputs)?)?
    } else {
        1.0
    };
    let stability_input = if inputs.len() >= 13 {
        stability_score(&relative(inputs)?)?
    } else {
        1.0
    };

    let mut traces = Vec::new();
    let mut psnr_sum = 0.0;
    let mut psnr_n = 0usize;
    for (i, (a, b)) in inputs.iter().zip(outputs).enumerate() {
        let p = psnr(a, b)?;
        let (pc, pd) = match &warp_series.transforms[i] {
            Some(hom) => (frame_crop_ratio(hom, w, h), Some(frame_distortion(hom))),
            None => (None, None),
        };
        if p.is_finite() {
            psnr_sum += p;
            psnr_n += 1;
        }
        traces.push(FrameTrace {
            frame: a.index,
            cropping: pc,
            distortion: pd,
            psnr: p.is_finite().then_some(p),
        });
    }
    Ok(MetricsReport {
        cropping,
        distortion,
        stability,
        stability_input,
        psnr_mean: (psnr_n > 0).then(|| psnr_sum / psnr_n as f64),
        frames: inputs.len(),
        valid_frames: warp_series.valid_count(),
        per_frame: traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    fn series_of(hs: Vec<Homography>) -> FrameTransformSeries {
        FrameTransformSeries::from_valid(hs)
    }

    #[test]
    fn identity_series_perfect_metrics() {
        let s = series_of(vec![Homography::identity(); 20]);
        assert_relative_eq!(cropping_ratio(&s, 100, 100).unwrap(), 1.0);
        assert_relative_eq!(distortion_value(&s).unwrap(), 1.0);
        assert_relative_eq!(stability_score(&s).unwrap(), 1.0);
    }

    #[test]
    fn cropping_uniform_scale_and_translation() {
        // 0.8x scale about the center of a 100x100 frame.
        let m = Matrix3::new(0.8, 0.0, 10.0, 0.0, 0.8, 10.0, 0.0, 0.0, 1.0);
        let s = series_of(vec![Homography::from_matrix(m).unwrap(); 4]);
        assert_relative_eq!(cropping_ratio(&s, 100, 100).unwrap(), 0.8, epsilon = 1e-9);

        let t = series_of(vec![Homography::translation(10.0, 0.0)]);
        assert_relative_eq!(cropping_ratio(&t, 100, 100).unwrap(), 0.9, epsilon = 1e-9);
    }

    #[test]
    fn distortion_anisotropy_and_min_rule() {
        let aniso = Homography::from_matrix(Matrix3::new(
            2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0,
        ))
        .unwrap();
        assert_relative_eq!(frame_distortion(&aniso), 0.5);
        let s = series_of(vec![Homography::identity(), aniso]);
        assert_relative_eq!(distortion_value(&s).unwrap(), 0.5);
        // Rotations have unit singular-value ratio.
        let ang = 0.7f64;
        let (sn, cs) = ang.sin_cos();
        let rot = Homography::from_matrix(Matrix3::new(
            cs, -sn, 0.0, sn, cs, 0.0, 0.0, 0.0, 1.0,
        ))
        .unwrap();
        assert_relative_eq!(frame_distortion(&rot), 1.0, epsilon = 1e-12);
    }

    /// Relative translation series whose accumulated x-path is `path`.
    fn relative_series_from_path(path: &[f64]) -> FrameTransformSeries {
        let mut hs = Vec::new();
        let mut prev = 0.0;
        for &p in path {
            hs.push(Homography::translation(p - prev, 0.0));
            prev = p;
        }
        series_of(hs)
    }

    #[test]
    fn stability_sinusoid_bins() {
        let n = 64;
        // Low-frequency sinusoid at bin 3 rides on a positive offset so the
        // magnitude channel carries the bin-3 tone undistorted.
        let low: Vec<f64> = (0..n)
            .map(|t| 50.0 + 10.0 * (2.0 * std::f64::consts::PI * 3.0 * t as f64 / n as f64).sin())
            .collect();
        let s = stability_score(&relative_series_from_path(&low)).unwrap();
        assert!(s > 0.98, "low-frequency path should be stable: {s}");

        let high: Vec<f64> = (0..n)
            .map(|t| 50.0 + 10.0 * (2.0 * std::f64::consts::PI * 20.0 * t as f64 / n as f64).sin())
            .collect();
        let s = stability_score(&relative_series_from_path(&high)).unwrap();
        assert!(s < 0.02, "high-frequency path should be unstable: {s}");

        // Constant trajectory: zero non-DC energy scores 1 by convention.
        let s = stability_score(&relative_series_from_path(&vec![5.0; 32])).unwrap();
        assert_relative_eq!(s, 1.0);
    }

    #[test]
    fn stability_invariant_to_constant_offset() {
        let n = 64;
        let base: Vec<f64> = (0..n)
            .map(|t| 40.0 + 3.0 * (2.0 * std::f64::consts::PI * 5.0 * t as f64 / n as f64).sin())
            .collect();
        let offset: Vec<f64> = base.iter().map(|v| v + 17.0).collect();
        let a = stability_score(&relative_series_from_path(&base)).unwrap();
        let b = stability_score(&relative_series_from_path(&offset)).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-9);
    }

    #[test]
    fn stability_requires_12_frames() {
        let s = series_of(vec![Homography::identity(); 11]);
        assert!(matches!(
            stability_score(&s),
            Err(MetricsError::TooShort { min: 12, got: 11 })
        ));
    }

    #[test]
    fn psnr_reference_points() {
        let a = Frame::filled(0, 10, 10, 0);
        let b = Frame::filled(0, 10, 10, 255);
        assert_relative_eq!(psnr(&a, &b).unwrap(), 0.0);
        assert!(psnr(&a, &a).unwrap().is_infinite());

        // MSE = 1 -> 10 log10(255^2) ~ 48.13 dB.
        let mut data = vec![7u8; 100];
        data.iter_mut().for_each(|v| *v += 1);
        let c = Frame::new(0, 10, 10, 1, vec![7u8; 100]).unwrap();
        let d = Frame::new(0, 10, 10, 1, data).unwrap();
        assert_relative_eq!(psnr(&c, &d).unwrap(), 48.1308, epsilon = 1e-3);
    }

    #[test]
    fn psnr_monotone_in_noise() {
        let base = Frame::filled(0, 32, 32, 100);
        let noisy = |amp: i32, seed: u64| -> Frame {
            let mut v = seed;
            let data: Vec<u8> = base
                .data()
                .iter()
                .map(|&p| {
                    v = v.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let n = ((v >> 33) % (2 * amp as u64 + 1)) as i32 - amp;
                    (p as i32 + n).clamp(0, 255) as u8
                })
                .collect();
            Frame::new(0, 32, 32, 1, data).unwrap()
        };
        let p1 = psnr(&base, &noisy(2, 9)).unwrap();
        let p2 = psnr(&base, &noisy(8, 9)).unwrap();
        let p3 = psnr(&base, &noisy(25, 9)).unwrap();
        assert!(p1 > p2 && p2 > p3, "{p1} {p2} {p3}");
    }

    #[test]
    fn estimate_transforms_identity_and_shift() {
        let frame = |shift: isize| -> Frame {
            let mut data = vec![0u8; 128 * 96];
            for y in 0..96 {
                for x in 0..128 {
                    let sx = x as isize + shift;
                    let cx = sx.div_euclid(7);
                    let cy = (y as isize).div_euclid(7);
                    let mut v = (cx.wrapping_mul(0x9E37) ^ cy.wrapping_mul(0x85EB)) as u64;
                    v = v.wrapping_mul(0x2545F4914F6CDD1D);
                    data[y * 128 + x] = (v >> 56) as u8;
                }
            }
            Frame::new(0, 128, 96, 1, data).unwrap()
        };
        let a = frame(0);
        let ransac = RansacConfig::default();
        let s = estimate_frame_transforms(&[a.clone()], &[a.clone()], &ransac).unwrap();
        let h = s.transforms[0].as_ref().unwrap();
        let d = (h.matrix() - Matrix3::identity()).norm();
        assert!(d < 1e-2, "identity recovery frobenius {d}");

        let b = frame(-5); // content moved +5 to the right
        let s = estimate_frame_transforms(&[a], &[b], &ransac).unwrap();
        let h = s.transforms[0].as_ref().unwrap();
        assert!((h.matrix()[(0, 2)] - 5.0).abs() < 0.3, "tx {}", h.matrix()[(0, 2)]);
        assert!(h.matrix()[(1, 2)].abs() < 0.3);
    }

    #[test]
    fn blank_frames_are_invalid() {
        let blank = Frame::filled(0, 64, 64, 128);
        assert!(matches!(
            estimate_frame_transforms(&[blank.clone()], &[blank], &RansacConfig::default()),
            Err(MetricsError::AllFramesInvalid)
        ));
    }
}
