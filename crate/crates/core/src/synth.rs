//! Synthetic sequences with known camera paths: textured scenes rendered
//! under controllable smooth motion plus spectrally separated jitter, with
//! analytic ground-truth homographies and grid motion. Also hosts the
//! exhaustive tap-lattice reference used to bound the kernel solver.

use crate::frame::Frame;
use crate::geometry::Homography;
use crate::observer::MotionSample;
use crate::propagation::{GridMotionField, GridSpec};
use crate::smoother::{
    smooth_step, solve_kernels, total_objective, KernelScope, KernelSet, SmootherConfig,
    TrajectoryBuffer,
};
use nalgebra::Matrix3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("need at least {min} frames, got {got}")]
    TooFewFrames { min: usize, got: usize },
    #[error("scene texture does not cover the warped viewport at frame {0}")]
    ViewportUnderflow(usize),
}

/// High-frequency disturbance added on top of the smooth path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum JitterProfile {
    /// Strict sign alternation: +amp, -amp, +amp, ...
    Alternating { amplitude: f64 },
    /// Seeded sum of sinusoids in the top quarter of the sequence spectrum.
    HighBand { amplitude: f64 },
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub frames: usize,
    /// Peak amplitude of the smooth translation component in pixels.
    pub smooth_amplitude: f64,
    /// Peak rotation of the smooth component in radians.
    pub smooth_rotation: f64,
    pub jitter: JitterProfile,
    pub seed: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            frames: 120,
            smooth_amplitude: 6.0,
            smooth_rotation: 0.0,
            jitter: JitterProfile::Alternating { amplitude: 2.0 },
            seed: 0,
        }
    }
}

/// Per-frame pose parameters (applied about the frame center).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub tx: f64,
    pub ty: f64,
    pub rotation: f64,
    pub scale: f64,
}

impl PoseParams {
    pub fn identity() -> Self {
        Self {
            tx: 0.0,
            ty: 0.0,
            rotation: 0.0,
            scale: 1.0,
        }
    }
}

/// A generated camera path with its smooth and jitter components exposed
/// separately; total = smooth + jitter per frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthTrajectory {
    pub smooth: Vec<PoseParams>,
    pub jitter: Vec<PoseParams>,
}

impl SynthTrajectory {
    pub fn len(&self) -> usize {
        self.smooth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.smooth.is_empty()
    }

    pub fn total(&self, t: usize) -> PoseParams {
        let s = self.smooth[t];
        let j = self.jitter[t];
        PoseParams {
            tx: s.tx + j.tx,
            ty: s.ty + j.ty,
            rotation: s.rotation + j.rotation,
            scale: s.scale * j.scale,
        }
    }
}

/// Deterministic smooth path plus additive jitter. The smooth component is
/// band-limited below bin 6 of the sequence DFT; the jitter band sits above
/// the three-quarter mark.
pub fn gen_trajectory(cfg: &TrajectoryConfig) -> Result<SynthTrajectory, SynthError> {
    let n = cfg.frames;
    if n < 16 {
        return Err(SynthError::TooFewFrames { min: 16, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Smooth translation: two low bins with seeded phases.
    let phase_x = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase_y = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut smooth = Vec::with_capacity(n);
    for t in 0..n {
        let w = std::f64::consts::TAU * t as f64 / n as f64;
        smooth.push(PoseParams {
            tx: cfg.smooth_amplitude * ((2.0 * w + phase_x).sin() + 0.5 * (3.0 * w).cos()),
            ty: cfg.smooth_amplitude * 0.8 * ((2.0 * w + phase_y).cos() + 0.4 * (4.0 * w).sin()),
            rotation: cfg.smooth_rotation * (w + phase_x).sin(),
            scale: 1.0,
        });
    }

    let mut jrng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x517C_C1B7_2722_0A95));
    let jitter: Vec<PoseParams> = match cfg.jitter {
        JitterProfile::None => vec![PoseParams::identity(); n],
        JitterProfile::Alternating { amplitude } => (0..n)
            .map(|t| {
                let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
                PoseParams {
                    tx: amplitude * sign,
                    ty: amplitude * sign,
                    rotation: 0.0,
                    scale: 1.0,
                }
            })
            .collect(),
        JitterProfile::HighBand { amplitude } => {
            // Three bins in the top quarter of the spectrum.
            let bins = [n * 3 / 8, n * 5 / 12, (n / 2).saturating_sub(1)];
            let phases: Vec<(f64, f64)> = bins
                .iter()
                .map(|_| {
                    (
                        jrng.gen_range(0.0..std::f64::consts::TAU),
                        jrng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            (0..n)
                .map(|t| {
                    let mut tx = 0.0;
                    let mut ty = 0.0;
                    for (&b, &(px, py)) in bins.iter().zip(&phases) {
                        let w = std::f64::consts::TAU * b as f64 * t as f64 / n as f64;
                        tx += (w + px).sin();
                        ty += (w + py).sin();
                    }
                    PoseParams {
                        tx: amplitude * tx / bins.len() as f64,
                        ty: amplitude * ty / bins.len() as f64,
                        rotation: 0.0,
                        scale: 1.0,
                    }
                })
                .collect()
        }
    };
    Ok(SynthTrajectory { smooth, jitter })
}

/// A procedurally textured scene; an optional second plane (with its own
/// translation multiplier) exercises multi-plane motion.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub texture_seed: u64,
    /// Texture cell size in pixels; smaller produces denser corners.
    pub cell: usize,
    /// Optional foreground plane: horizontal span [x0, x1) in frame
    /// fractions plus a translation multiplier relative to the background.
    pub foreground: Option<ForegroundPlane>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForegroundPlane {
    pub x0_frac: f64,
    pub x1_frac: f64,
    /// Foreground translation = background translation * multiplier.
    pub motion_multiplier: f64,
}

impl Default for SynthScene {
    fn default() -> Self {
        Self {
            texture_seed: 1,
            cell: 6,
            foreground: None,
        }
    }
}

impl SynthScene {
    fn texel(&self, x: isize, y: isize, plane: u64) -> u8 {
        let cx = x.div_euclid(self.cell as isize);
        let cy = y.div_euclid(self.cell as isize);
        let mut v = (cx.wrapping_mul(73_856_093) ^ cy.wrapping_mul(19_349_663)) as u64;
        v ^= self.texture_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ plane.wrapping_mul(0xC2B2_AE35);
        v = v.wrapping_mul(0x2545_F491_4F6C_DD1D);
        (32 + (v >> 56) % 192) as u8
    }
}

/// Similarity transform mapping frame coordinates to scene coordinates for
/// pose p (rotation and scale about the frame center, then translation).
fn pose_to_scene(pose: &PoseParams, w: f64, h: f64) -> Matrix3<f64> {
    let (cx, cy) = (w / 2.0, h / 2.0);
    let (s, c) = pose.rotation.sin_cos();
    let k = 1.0 / pose.scale;
    // scene = R^-1 S^-1 (frame - center - t) + center
    let m = Matrix3::new(
        k * c,
        k * s,
        cx - k * (c * (cx + pose.tx) + s * (cy + pose.ty)),
        -k * s,
        k * c,
        cy - k * (-s * (cx + pose.tx) + c * (cy + pose.ty)),
        0.0,
        0.0,
        1.0,
    );
    m
}

/// The forward pose matrix (scene to frame) for ground-truth composition.
fn pose_to_frame(pose: &PoseParams, w: f64, h: f64) -> Matrix3<f64> {
    pose_to_scene(pose, w, h).try_inverse().unwrap()
}

/// Rendered sequence with analytic ground truth.
pub struct RenderedSequence {
    pub frames: Vec<Frame>,
    /// Per-frame absolute pose (scene -> frame) as homographies.
    pub absolute: Vec<Homography>,
    /// Per-frame backward relative homography (frame t -> frame t-1 content
    /// positions); identity at t = 0.
    pub backward: Vec<Homography>,
    /// Ground-truth grid motion per frame: dg(g) = g - backward(g).
    pub true_motion: Vec<GridMotionField>,
}

/// Render a trajectory over a scene. The margin around the frame must stay
/// inside the texture for every frame.
pub fn render_sequence(
    scene: &SynthScene,
    traj: &SynthTrajectory,
    width: usize,
    height: usize,
    grid: (usize, usize),
) -> Result<RenderedSequence, SynthError> {
    let (w, h) = (width as f64, height as f64);
    let spec = GridSpec::new(grid.0, grid.1, width, height);
    let mut frames = Vec::with_capacity(traj.len());
    let mut absolute = Vec::with_capacity(traj.len());
    let mut backward = Vec::with_capacity(traj.len());
    let mut true_motion = Vec::with_capacity(traj.len());

    // Texture budget: max pose excursion must stay within this margin.
    let margin = 0.25 * w.min(h);

    for t in 0..traj.len() {
        let pose = traj.total(t);
        if pose.tx.abs() + w * (pose.scale - 1.0).abs() > margin
            || pose.ty.abs() + h * (pose.scale - 1.0).abs() > margin
            || pose.rotation.abs() * w.max(h) * 0.5 > margin
        {
            return Err(SynthError::ViewportUnderflow(t));
        }
        let to_scene = pose_to_scene(&pose, w, h);
        let fg_to_scene = scene.foreground.map(|fg| {
            let fg_pose = PoseParams {
                tx: pose.tx * fg.motion_multiplier,
                ty: pose.ty * fg.motion_multiplier,
                rotation: pose.rotation,
                scale: pose.scale,
            };
            (fg, pose_to_scene(&fg_pose, w, h))
        });

        let mut data = vec![0u8; width * height];
        for y in 0..height {
            for x in 0..width {
                let (plane, m) = match &fg_to_scene {
                    Some((fg, fg_m)) => {
                        let fx0 = fg.x0_frac * w;
                        let fx1 = fg.x1_frac * w;
                        if (x as f64) >= fx0 && (x as f64) < fx1 {
                            (1u64, fg_m)
                        } else {
                            (0u64, &to_scene)
                        }
                    }
                    None => (0u64, &to_scene),
                };
                let sx = m[(0, 0)] * x as f64 + m[(0, 1)] * y as f64 + m[(0, 2)];
                let sy = m[(1, 0)] * x as f64 + m[(1, 1)] * y as f64 + m[(1, 2)];
                // Bilinear over the procedural texture.
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let (xi, yi) = (x0 as isize, y0 as isize);
                let v00 = scene.texel(xi, yi, plane) as f64;
                let v10 = scene.texel(xi + 1, yi, plane) as f64;
                let v01 = scene.texel(xi, yi + 1, plane) as f64;
                let v11 = scene.texel(xi + 1, yi + 1, plane) as f64;
                let v = (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy)
                    + (v01 * (1.0 - fx) + v11 * fx) * fy;
                data[y * width + x] = v.round() as u8;
            }
        }
        frames.push(Frame::new(t as u64, width, height, 1, data).unwrap());

        let abs = Homography::from_matrix(pose_to_frame(&pose, w, h)).unwrap();
        let back = if t == 0 {
            Homography::identity()
        } else {
            // frame t coords -> scene -> frame t-1 coords
            let prev = traj.total(t - 1);
            Homography::from_matrix(pose_to_frame(&prev, w, h) * to_scene).unwrap()
        };
        let mut dg = GridMotionField::zeros(spec, t as u64);
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                let g = spec.vertex_pos(r, c);
                let q = back.project(g).unwrap_or(g);
                dg.set(r, c, [g.x - q.x, g.y - q.y]);
            }
        }
        absolute.push(abs);
        backward.push(back);
        true_motion.push(dg);
    }
    Ok(RenderedSequence {
        frames,
        absolute,
        backward,
        true_motion,
    })
}

/// Drive a tiny 2x2 buffer with a 1D series as a rigid x-translation of the
/// whole mesh: O_t(v).x = rest.x(v) + (series[t] - series[0]).
fn advance_1d(buf: &mut TrajectoryBuffer, t: usize, series: &[f64]) {
    let mut dg = GridMotionField::zeros(buf.spec, t as u64);
    if t > 0 {
        let delta = series[t] - series[t - 1];
        for d in dg.vectors_mut() {
            d[0] = delta;
        }
    }
    buf.append_and_integrate(&dg).unwrap();
}

/// Exhaustive per-frame tap search over the lattice {0, 0.25, ..., 2}^3,
/// minimizing the same smoothing objective the solver uses. Returns the
/// smoothed series (re-anchored to the input's start) and the per-frame
/// objectives achieved.
pub fn oracle_smooth(series: &[f64], cfg: &SmootherConfig) -> (Vec<f64>, Vec<f64>) {
    let spec = GridSpec::new(2, 2, 8, 8);
    let mut buf = TrajectoryBuffer::new(spec, cfg.window);
    let m = MotionSample::default();
    let lattice: Vec<f64> = (0..=8).map(|i| i as f64 * 0.25).collect();
    let rest = TrajectoryBuffer::rest_positions(&spec);
    let anchor = series.first().copied().unwrap_or(0.0);
    let mut out = Vec::with_capacity(series.len());
    let mut objs = Vec::with_capacity(series.len());
    for t in 0..series.len() {
        advance_1d(&mut buf, t, series);
        let past = buf.smoothed_history().to_vec();
        let raw = buf.raw_history().to_vec();
        let mut best = (f64::INFINITY, KernelSet::zeros(KernelScope::Global, 4));
        if past.is_empty() {
            let cand = smooth_step(&buf, &best.1, cfg.lambda_blend);
            best.0 = total_objective(&cand, &past, &raw, &m, &spec, cfg);
        } else {
            for &k1 in &lattice {
                for &k2 in &lattice {
                    for &k3 in &lattice {
                        let k = KernelSet::global([k1, k2, k3], [k1, k2, k3]);
                        let cand = smooth_step(&buf, &k, cfg.lambda_blend);
                        let obj = total_objective(&cand, &past, &raw, &m, &spec, cfg);
                        if obj < best.0 {
                            best = (obj, k);
                        }
                    }
                }
            }
        }
        let cand = smooth_step(&buf, &best.1, cfg.lambda_blend);
        out.push(cand[0][0] - rest[0][0] + anchor);
        objs.push(best.0);
        buf.push_smoothed(cand);
    }
    (out, objs)
}

/// Run the gradient solver over the same 1D drive as [`oracle_smooth`],
/// returning the smoothed series and per-frame achieved objectives.
pub fn solver_smooth_1d(series: &[f64], cfg: &SmootherConfig) -> (Vec<f64>, Vec<f64>) {
    let spec = GridSpec::new(2, 2, 8, 8);
    let mut buf = TrajectoryBuffer::new(spec, cfg.window);
    let m = MotionSample::default();
    let rest = TrajectoryBuffer::rest_positions(&spec);
    let anchor = series.first().copied().unwrap_or(0.0);
    let mut kernels = KernelSet::zeros(cfg.scope, spec.vertex_count());
    let mut out = Vec::with_capacity(series.len());
    let mut objs = Vec::with_capacity(series.len());
    for t in 0..series.len() {
        advance_1d(&mut buf, t, series);
        kernels = solve_kernels(&buf, &m, cfg, &kernels);
        let cand = smooth_step(&buf, &kernels, cfg.lambda_blend);
        let past = buf.smoothed_history().to_vec();
        let raw = buf.raw_history().to_vec();
        objs.push(total_objective(&cand, &past, &raw, &m, &spec, cfg));
        out.push(cand[0][0] - rest[0][0] + anchor);
        buf.push_smoothed(cand);
    }
    (out, objs)
}
