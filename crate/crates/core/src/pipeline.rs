//! Three-worker asynchronous execution: motion estimation, propagation, and
//! compensation stages decoupled by bounded FIFO queues with back-pressure.
//! A sequential mode runs the identical stage objects in a plain loop and
//! must produce bit-identical output.

use crate::frame::Frame;
use crate::observer::{MotionObserver, MotionSample, ObserverError};
use crate::propagation::{propagate, GridMotionField, GridSpec, PropagationConfig};
use crate::renderer::{
    apply_crop_zoom, compensation_field, warp_frame, BorderPolicy, BorderTracker,
};
use crate::smoother::{SmootherConfig, TrajectorySmoother};
use crossbeam_channel::bounded;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("source error: {0}")]
    Source(String),
    #[error("sink error: {0}")]
    Sink(String),
    #[error("stage error: {0}")]
    Stage(String),
    #[error("worker panicked: {0}")]
    Poisoned(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueueConfig {
    pub capacity_me_mp: usize,
    pub capacity_mp_mc: usize,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            capacity_me_mp: 8,
            capacity_mp_mc: 8,
        }
    }
}

impl QueueConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.capacity_me_mp < 1 || self.capacity_mp_mc < 1 {
            return Err("queues.capacity_* must be >= 1".into());
        }
        Ok(())
    }
}

/// Mean per-frame service times of the three stages, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub t_est: f64,
    pub t_prop: f64,
    pub t_smooth: f64,
}

impl StageTimings {
    pub fn max(&self) -> f64 {
        self.t_est.max(self.t_prop).max(self.t_smooth)
    }

    pub fn sum(&self) -> f64 {
        self.t_est + self.t_prop + self.t_smooth
    }
}

/// Closed-form pipeline performance model: throughput is bounded by the
/// slowest stage, speedup is the serial-to-bottleneck ratio, and queue
/// memory is capacity times message size (16 bytes per keypoint for the
/// motion packet, 8 bytes per vertex for the grid packet).
pub fn predict_performance(
    t: &StageTimings,
    q: &QueueConfig,
    keypoint_cap: usize,
    grid_vertices: usize,
) -> (f64, f64, usize) {
    let bottleneck = t.max();
    let fps_max = if bottleneck > 0.0 { 1.0 / bottleneck } else { f64::INFINITY };
    let speedup = if bottleneck > 0.0 { t.sum() / bottleneck } else { 1.0 };
    let mem = q.capacity_me_mp * keypoint_cap * 16 + q.capacity_mp_mc * grid_vertices * 8;
    (fps_max, speedup, mem)
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub frames: u64,
    pub wall_time_s: f64,
    pub measured_fps: f64,
    pub predicted_fps: f64,
    pub speedup_predicted: f64,
    pub speedup_measured: f64,
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    pub stage_occupancy: [f64; 3],
    pub stage_means_ms: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    #[default]
    Pipeline,
    Sequential,
}

pub trait FrameSource: Send {
    /// Next frame, or None at end of stream.
    fn next_frame(&mut self) -> Result<Option<Frame>, String>;
}

pub trait FrameSink: Send {
    fn consume(&mut self, frame: Frame) -> Result<(), String>;
}

/// Stage 1 worker surface: one motion sample per frame.
pub trait MotionStage: Send {
    fn process(&mut self, frame: &Frame) -> Result<MotionSample, String>;
}

/// Stage 2 worker surface: densify a motion sample onto the grid.
pub trait PropagationStage: Send {
    fn process(&mut self, m: &MotionSample) -> GridMotionField;
}

/// Stage 3 worker surface: smooth, compensate, and render one frame.
pub trait CompensationStage: Send {
    fn process(&mut self, frame: &Frame, m: &MotionSample, dg: &GridMotionField) -> Frame;
}

pub struct StageSet {
    pub motion: Box<dyn MotionStage>,
    pub propagation: Box<dyn PropagationStage>,
    pub compensation: Box<dyn CompensationStage>,
}

struct Msg1 {
    frame: Frame,
    m: MotionSample,
    ingest: Instant,
}

struct Msg2 {
    frame: Frame,
    m: MotionSample,
    dg: GridMotionField,
    ingest: Instant,
}

#[derive(Default)]
struct StageStats {
    busy: Duration,
    frames: u64,
}

/// Drive frames from source to sink through the three stages. The pipeline
/// mode runs one worker thread per stage connected by the bounded queues;
/// sequential mode runs the same stage objects in a loop. Outputs are
/// emitted in input order exactly once and are identical across modes.
pub fn run_pipeline(
    source: &mut dyn FrameSource,
    sink: &mut dyn FrameSink,
    stages: &mut StageSet,
    queues: &QueueConfig,
    mode: ExecMode,
) -> Result<PipelineReport, PipelineError> {
    match mode {
        ExecMode::Sequential => run_sequential(source, sink, stages),
        ExecMode::Pipeline => run_threaded(source, sink, stages, queues),
    }
}

fn run_sequential(
    source: &mut dyn FrameSource,
    sink: &mut dyn FrameSink,
    stages: &mut StageSet,
) -> Result<PipelineReport, PipelineError> {
    let start = Instant::now();
    let mut st = [StageStats::default(), StageStats::default(), StageStats::default()];
    let mut latencies = Vec::new();
    loop {
        let frame = source.next_frame().map_err(PipelineError::Source)?;
        let Some(frame) = frame else { break };
        let ingest = Instant::now();

        let t0 = Instant::now();
        let m = stages
            .motion
            .process(&frame)
            .map_err(PipelineError::Stage)?;
        st[0].busy += t0.elapsed();
        st[0].frames += 1;

        let t0 = Instant::now();
        let dg = stages.propagation.process(&m);
        st[1].busy += t0.elapsed();
        st[1].frames += 1;

        let t0 = Instant::now();
        let out = stages.compensation.process(&frame, &m, &dg);
        st[2].busy += t0.elapsed();
        st[2].frames += 1;

        latencies.push(ingest.elapsed());
        sink.consume(out).map_err(PipelineError::Sink)?;
    }
    Ok(build_report(start.elapsed(), st, latencies))
}

fn run_threaded(
    source: &mut dyn FrameSource,
    sink: &mut dyn FrameSink,
    stages: &mut StageSet,
    queues: &QueueConfig,
) -> Result<PipelineReport, PipelineError> {
    let start = Instant::now();
    let (tx1, rx1) = bounded::<Msg1>(queues.capacity_me_mp);
    let (tx2, rx2) = bounded::<Msg2>(queues.capacity_mp_mc);

    let StageSet {
        motion,
        propagation,
        compensation,
    } = stages;

    let mut result: Result<(), PipelineError> = Ok(());
    let mut stats = [StageStats::default(), StageStats::default(), StageStats::default()];
    let mut latencies: Vec<Duration> = Vec::new();

    std::thread::scope(|scope| {
        let h_est = scope.spawn(move || {
            let mut st = StageStats::default();
            let res = loop {
                let frame = match source.next_frame() {
                    Ok(Some(f)) => f,
                    Ok(None) => break Ok(()),
                    Err(e) => break Err(PipelineError::Source(e)),
                };
                let ingest = Instant::now();
                let t0 = Instant::now();
                let m = match motion.process(&frame) {
                    Ok(m) => m,
                    Err(e) => break Err(PipelineError::Stage(e)),
                };
                st.busy += t0.elapsed();
                st.frames += 1;
                // A closed queue means downstream shut down; stop quietly
                // and let its error surface.
                if tx1.send(Msg1 { frame, m, ingest }).is_err() {
                    break Ok(());
                }
            };
            drop(tx1);
            (res, st)
        });

        let h_prop = scope.spawn(move || {
            let mut st = StageStats::default();
            while let Ok(msg) = rx1.recv() {
                let t0 = Instant::now();
                let dg = propagation.process(&msg.m);
                st.busy += t0.elapsed();
                st.frames += 1;
                if tx2
                    .send(Msg2 {
                        frame: msg.frame,
                        m: msg.m,
                        dg,
                        ingest: msg.ingest,
                    })
                    .is_err()
                {
                    break;
                }
            }
            drop(tx2);
            (Ok::<(), PipelineError>(()), st)
        });

        let h_comp = scope.spawn(move || {
            let mut st = StageStats::default();
            let mut lats = Vec::new();
            let mut res = Ok(());
            while let Ok(msg) = rx2.recv() {
                let t0 = Instant::now();
                let out = compensation.process(&msg.frame, &msg.m, &msg.dg);
                st.busy += t0.elapsed();
                st.frames += 1;
                lats.push(msg.ingest.elapsed());
                if let Err(e) = sink.consume(out) {
                    res = Err(PipelineError::Sink(e));
                    break;
                }
            }
            // Dropping rx2 here closes the chain upstream on early exit.
            (res, st, lats)
        });

        match h_est.join() {
            Ok((res, st)) => {
                stats[0] = st;
                if let Err(e) = res {
                    result = Err(e);
                }
            }
            Err(_) => result = Err(PipelineError::Poisoned("motion stage")),
        }
        match h_prop.join() {
            Ok((res, st)) => {
                stats[1] = st;
                if let Err(e) = res {
                    result = Err(e);
                }
            }
            Err(_) => result = Err(PipelineError::Poisoned("propagation stage")),
        }
        match h_comp.join() {
            Ok((res, st, lats)) => {
                stats[2] = st;
                latencies = lats;
                if let Err(e) = res {
                    result = Err(e);
                }
            }
            Err(_) => result = Err(PipelineError::Poisoned("compensation stage")),
        }
    });

    result?;
    Ok(build_report(start.elapsed(), stats, latencies))
}

fn build_report(
    wall: Duration,
    stats: [StageStats; 3],
    mut latencies: Vec<Duration>,
) -> PipelineReport {
    let frames = stats[2].frames;
    let wall_s = wall.as_secs_f64().max(1e-12);
    let means: Vec<f64> = stats
        .iter()
        .map(|s| {
            if s.frames > 0 {
                s.busy.as_secs_f64() / s.frames as f64
            } else {
                0.0
            }
        })
        .collect();
    let timings = StageTimings {
        t_est: means[0],
        t_prop: means[1],
        t_smooth: means[2],
    };
    let bottleneck = timings.max();
    latencies.sort();
    let pct = |p: f64| -> f64 {
        if latencies.is_empty() {
            return 0.0;
        }
        let idx = ((latencies.len() as f64 - 1.0) * p).round() as usize;
        latencies[idx].as_secs_f64() * 1e3
    };
    PipelineReport {
        frames,
        wall_time_s: wall_s,
        measured_fps: frames as f64 / wall_s,
        predicted_fps: if bottleneck > 0.0 { 1.0 / bottleneck } else { 0.0 },
        speedup_predicted: if bottleneck > 0.0 {
            timings.sum() / bottleneck
        } else {
            1.0
        },
        // Measured against the serial-time estimate of the same run.
        speedup_measured: if frames > 0 {
            timings.sum() * frames as f64 / wall_s
        } else {
            1.0
        },
        latency_p50_ms: pct(0.5),
        latency_p95_ms: pct(0.95),
        stage_occupancy: [
            stats[0].busy.as_secs_f64() / wall_s,
            stats[1].busy.as_secs_f64() / wall_s,
            stats[2].busy.as_secs_f64() / wall_s,
        ],
        stage_means_ms: [means[0] * 1e3, means[1] * 1e3, means[2] * 1e3],
    }
}

// ---------------------------------------------------------------------------
// Real stage implementations

pub struct ObserverStage {
    observer: MotionObserver,
}

impl ObserverStage {
    pub fn new(observer: MotionObserver) -> Self {
        Self { observer }
    }
}

impl MotionStage for ObserverStage {
    fn process(&mut self, frame: &Frame) -> Result<MotionSample, String> {
        self.observer.process(frame).map_err(|e: ObserverError| e.to_string())
    }
}

pub struct PropagatorStage {
    pub spec: GridSpec,
    pub cfg: PropagationConfig,
    pub ransac: crate::geometry::RansacConfig,
    pub dump: Option<Box<dyn Write + Send>>,
}

impl PropagatorStage {
    pub fn new(spec: GridSpec, cfg: PropagationConfig, ransac: crate::geometry::RansacConfig) -> Self {
        Self {
            spec,
            cfg,
            ransac,
            dump: None,
        }
    }
}

impl PropagationStage for PropagatorStage {
    fn process(&mut self, m: &MotionSample) -> GridMotionField {
        let dg = propagate(m, &self.spec, &self.cfg, &self.ransac.for_frame(m.frame_index));
        if let Some(w) = &mut self.dump {
            let _ = dg.write_dump(w);
        }
        dg
    }
}

pub struct CompensatorStage {
    smoother: TrajectorySmoother,
    tracker: BorderTracker,
    policy: BorderPolicy,
    pub dump: Option<Box<dyn Write + Send>>,
}

impl CompensatorStage {
    pub fn new(
        spec: GridSpec,
        cfg: SmootherConfig,
        policy: BorderPolicy,
        border_window: usize,
    ) -> Self {
        Self {
            smoother: TrajectorySmoother::new(spec, cfg),
            tracker: BorderTracker::new(border_window, spec.frame_width, spec.frame_height),
            policy,
            dump: None,
        }
    }
}

impl CompensationStage for CompensatorStage {
    fn process(&mut self, frame: &Frame, m: &MotionSample, dg: &GridMotionField) -> Frame {
        let (s_t, o_t) = self
            .smoother
            .smooth_frame(dg, m)
            .expect("grid spec fixed at construction");
        if let Some(w) = &mut self.dump {
            let _ = self.smoother.write_dump(w, frame.index, &s_t, &o_t);
        }
        let spec = self.smoother.buffer().spec;
        let field = compensation_field(&s_t, &o_t, spec).expect("spec matches");
        let warped = warp_frame(frame, &field);
        match self.policy {
            BorderPolicy::NoCrop => {
                self.tracker.observe(&field);
                warped
            }
            BorderPolicy::CropZoom => {
                let report = self.tracker.observe(&field);
                apply_crop_zoom(&warped, &report)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Sleep-injected stages for benchmarking the pipeline laws

pub struct SleepMotionStage(pub Duration);

impl MotionStage for SleepMotionStage {
    fn process(&mut self, frame: &Frame) -> Result<MotionSample, String> {
        std::thread::sleep(self.0);
        Ok(MotionSample {
            frame_index: frame.index,
            frame_width: frame.width,
            frame_height: frame.height,
            ..Default::default()
        })
    }
}

pub struct SleepPropagationStage {
    pub spec: GridSpec,
    pub sleep: Duration,
}

impl PropagationStage for SleepPropagationStage {
    fn process(&mut self, m: &MotionSample) -> GridMotionField {
        std::thread::sleep(self.sleep);
        GridMotionField::zeros(self.spec, m.frame_index)
    }
}

pub struct SleepCompensationStage(pub Duration);

impl CompensationStage for SleepCompensationStage {
    fn process(&mut self, frame: &Frame, _m: &MotionSample, _dg: &GridMotionField) -> Frame {
        std::thread::sleep(self.0);
        frame.clone()
    }
}

/// Stage set for a given run configuration over in-memory structures.
pub fn real_stages(
    spec: GridSpec,
    observer: MotionObserver,
    prop_cfg: PropagationConfig,
    smoother_cfg: SmootherConfig,
    ransac: crate::geometry::RansacConfig,
    policy: BorderPolicy,
    border_window: usize,
) -> StageSet {
    StageSet {
        motion: Box::new(ObserverStage::new(observer)),
        propagation: Box::new(PropagatorStage::new(spec, prop_cfg, ransac)),
        compensation: Box::new(CompensatorStage::new(spec, smoother_cfg, policy, border_window)),
    }
}

pub fn sleep_stages(spec: GridSpec, sleeps: [Duration; 3]) -> StageSet {
    StageSet {
        motion: Box::new(SleepMotionStage(sleeps[0])),
        propagation: Box::new(SleepPropagationStage {
            spec,
            sleep: sleeps[1],
        }),
        compensation: Box::new(SleepCompensationStage(sleeps[2])),
    }
}

/// In-memory source over a frame vector.
pub struct VecSource {
    frames: std::vec::IntoIter<Frame>,
}

impl VecSource {
    pub fn new(frames: Vec<Frame>) -> Self {
        Self {
            frames: frames.into_iter(),
        }
    }
}

impl FrameSource for VecSource {
    fn next_frame(&mut self) -> Result<Option<Frame>, String> {
        Ok(self.frames.next())
    }
}

/// In-memory sink collecting frames.
#[derive(Default)]
pub struct VecSink {
    pub frames: Vec<Frame>,
}

impl FrameSink for VecSink {
    fn consume(&mut self, frame: Frame) -> Result<(), String> {
        self.frames.push(frame);
        Ok(())
    }
}
