//! Subcommand implementations.

use crate::io::{
    load_keypoints, load_sequence, save_frame, DirSink, DirSource, FloFlowSource, RawSink,
    RawSource, SequenceFormat,
};
use crate::CliError;
use clap::Args;
use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;
use vstab_core::config::RunConfig;
use vstab_core::metrics as met;
use vstab_core::observer::MotionObserver;
use vstab_core::pipeline::{
    predict_performance, real_stages, run_pipeline, sleep_stages, ExecMode, FrameSink,
    FrameSource, PipelineReport, QueueConfig, StageTimings, VecSink, VecSource,
};
use vstab_core::synth::{
    gen_trajectory, render_sequence, JitterProfile, SynthScene, TrajectoryConfig,
};

pub struct AuxInputs {
    pub dump_trajectories: Option<PathBuf>,
    pub dump_grid: Option<PathBuf>,
    pub flow_dir: Option<PathBuf>,
    pub keypoints: Option<PathBuf>,
}

fn open_writer(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = open_writer(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .and_then(|_| serde_json::to_writer(std::io::sink(), &()))
        .map_err(|e| CliError::Io(format!("cannot serialize {}: {e}", path.display())))?;
    w.write_all(b"\n")
        .map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct StabilizeArgs {
    /// Input frame directory (PNG/PGM) or raw gray8 file with --raw-size.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory (or raw file in raw mode).
    #[arg(long)]
    pub output: PathBuf,
    /// Treat input/output as raw planar gray8 streams of WxH frames.
    #[arg(long, value_name = "WxH")]
    pub raw_size: Option<String>,
    /// Report path (default: <output>/report.json, or alongside raw output).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Serialize)]
struct StabilizeReport<'a> {
    #[serde(flatten)]
    pipeline: &'a PipelineReport,
    mode: &'a ExecMode,
    config: &'a RunConfig,
}

fn parse_size(s: &str) -> Result<(usize, usize), CliError> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| CliError::Config(format!("--raw-size '{s}' is not WxH")))?;
    let w = w
        .parse()
        .map_err(|_| CliError::Config(format!("bad width in --raw-size '{s}'")))?;
    let h = h
        .parse()
        .map_err(|_| CliError::Config(format!("bad height in --raw-size '{s}'")))?;
    Ok((w, h))
}

pub fn stabilize(cfg: &RunConfig, aux: &AuxInputs, args: StabilizeArgs) -> Result<(), CliError> {
    if !args.input.exists() {
        return Err(CliError::Io(format!(
            "input {} does not exist",
            args.input.display()
        )));
    }

    // Probe frame dimensions before constructing stages.
    let (mut source, mut sink, dims): (Box<dyn FrameSource>, Box<dyn FrameSink>, (usize, usize)) =
        match &args.raw_size {
            Some(s) => {
                let (w, h) = parse_size(s)?;
                let src = RawSource::new(&args.input, w, h)?;
                let snk = RawSink::new(&args.output)?;
                (Box::new(src), Box::new(snk), (w, h))
            }
            None => {
                let (src, format) = DirSource::new(&args.input)?;
                let first = crate::io::list_frames(&args.input)?;
                let probe = crate::io::load_frame(&first[0], 0)?;
                let snk = DirSink::new(&args.output, format)?;
                (Box::new(src), Box::new(snk), (probe.width, probe.height))
            }
        };

    let spec = cfg.grid.spec_for(dims.0, dims.1);
    let mut observer = MotionObserver::new(cfg.observer.clone());
    if let Some(path) = &aux.keypoints {
        observer = observer.with_imported_keypoints(load_keypoints(path)?);
    }
    if let Some(dir) = &aux.flow_dir {
        observer = observer.with_flow_source(Box::new(FloFlowSource::new(dir)));
    }
    let mut propagator =
        vstab_core::pipeline::PropagatorStage::new(spec, cfg.propagation.clone(), cfg.ransac_seeded());
    if let Some(path) = &aux.dump_grid {
        propagator.dump = Some(Box::new(open_writer(path)?));
    }
    let mut compensator = vstab_core::pipeline::CompensatorStage::new(
        spec,
        cfg.smoother.clone(),
        cfg.border_policy,
        cfg.border_window,
    );
    if let Some(path) = &aux.dump_trajectories {
        compensator.dump = Some(Box::new(open_writer(path)?));
    }
    let mut stages = vstab_core::pipeline::StageSet {
        motion: Box::new(vstab_core::pipeline::ObserverStage::new(observer)),
        propagation: Box::new(propagator),
        compensation: Box::new(compensator),
    };

    let report = run_pipeline(
        source.as_mut(),
        sink.as_mut(),
        &mut stages,
        &cfg.queues,
        cfg.mode,
    )
    .map_err(|e| CliError::Io(e.to_string()))?;

    let report_path = args.report.unwrap_or_else(|| {
        if args.raw_size.is_some() {
            args.output.with_extension("report.json")
        } else {
            args.output.join("report.json")
        }
    });
    write_json(
        &report_path,
        &StabilizeReport {
            pipeline: &report,
            mode: &cfg.mode,
            config: cfg,
        },
    )?;
    println!(
        "stabilized {} frames at {:.2} fps (report: {})",
        report.frames,
        report.measured_fps,
        report_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Original (unstable) sequence directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Stabilized sequence directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Metrics report JSON path (default: stdout).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Optional per-frame trace CSV `frame,Ct,Dt,psnr`.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Optional trajectory spectrum CSV `bin,translation_power,rotation_power`.
    #[arg(long)]
    pub spectrum_csv: Option<PathBuf>,
}

pub fn metrics(cfg: &RunConfig, args: MetricsArgs) -> Result<(), CliError> {
    let inputs = load_sequence(&args.input)?;
    let outputs = load_sequence(&args.output)?;
    if inputs.len() != outputs.len() {
        return Err(CliError::LengthMismatch(format!(
            "input has {} frames but output has {}",
            inputs.len(),
            outputs.len()
        )));
    }
    let ransac = cfg.ransac_seeded();
    let report =
        met::evaluate(&inputs, &outputs, &ransac).map_err(|e| CliError::Other(e.to_string()))?;

    if let Some(path) = &args.csv {
        let mut w = open_writer(path)?;
        writeln!(w, "frame,Ct,Dt,psnr").map_err(|e| CliError::Io(e.to_string()))?;
        for t in &report.per_frame {
            let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "inf".into());
            writeln!(
                w,
                "{},{},{},{}",
                t.frame,
                fmt(t.cropping),
                fmt(t.distortion),
                fmt(t.psnr)
            )
            .map_err(|e| CliError::Io(e.to_string()))?;
        }
    }

    if let Some(path) = &args.spectrum_csv {
        let rel = met::estimate_frame_transforms(
            &outputs[..outputs.len() - 1],
            &outputs[1..],
            &ransac,
        )
        .map_err(|e| CliError::Other(e.to_string()))?;
        let ch = met::accumulate_trajectory(&rel);
        let ts = met::half_spectrum(&ch.translation);
        let rs = met::half_spectrum(&ch.rotation);
        let mut w = open_writer(path)?;
        writeln!(w, "bin,translation_power,rotation_power")
            .map_err(|e| CliError::Io(e.to_string()))?;
        for (i, (t, r)) in ts.iter().zip(&rs).enumerate() {
            writeln!(w, "{i},{t:.9},{r:.9}").map_err(|e| CliError::Io(e.to_string()))?;
        }
    }

    match &args.report {
        Some(path) => write_json(path, &report)?,
        None => {
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| CliError::Other(e.to_string()))?;
            println!("{text}");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Per-stage sleep durations in ms, e.g. 10,10,10; omits real work.
    #[arg(long, value_name = "A,B,C")]
    pub stage_sleep: Option<String>,
    /// Number of frames to push through.
    #[arg(long, default_value_t = 300)]
    pub frames: usize,
    /// Synthetic frame size for real-workload runs.
    #[arg(long, default_value = "320x240")]
    pub size: String,
    /// Report JSON path (default: stdout).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Serialize)]
struct BenchReport {
    #[serde(flatten)]
    pipeline: PipelineReport,
    sequential_wall_time_s: f64,
    speedup_vs_sequential: f64,
    predicted_fps_model: f64,
    predicted_speedup_model: f64,
    predicted_queue_bytes: usize,
}

pub fn bench(cfg: &RunConfig, args: BenchArgs) -> Result<(), CliError> {
    let (w, h) = parse_size(&args.size)?;
    let spec = cfg.grid.spec_for(w, h);

    let make_frames = |n: usize| -> Vec<vstab_core::Frame> {
        match args.stage_sleep {
            // Sleep mode measures scheduling, not pixels: tiny frames.
            Some(_) => (0..n)
                .map(|i| vstab_core::Frame::filled(i as u64, 16, 12, (i % 251) as u8))
                .collect(),
            None => {
                let traj = gen_trajectory(&TrajectoryConfig {
                    frames: n.max(16),
                    smooth_amplitude: 3.0,
                    smooth_rotation: 0.0,
                    jitter: JitterProfile::Alternating { amplitude: 2.0 },
                    seed: cfg.seed,
                })
                .expect("trajectory");
                render_sequence(&SynthScene::default(), &traj, w, h, (cfg.grid.rows, cfg.grid.cols))
                    .expect("render")
                    .frames
                    .into_iter()
                    .take(n)
                    .collect()
            }
        }
    };

    let sleeps: Option<[Duration; 3]> = match &args.stage_sleep {
        None => None,
        Some(s) => {
            let parts: Vec<&str> = s.split(',').collect();
            if parts.len() != 3 {
                return Err(CliError::Config(format!(
                    "--stage-sleep '{s}' is not A,B,C"
                )));
            }
            let ms: Result<Vec<f64>, _> = parts.iter().map(|p| p.trim().parse::<f64>()).collect();
            let ms =
                ms.map_err(|_| CliError::Config(format!("--stage-sleep '{s}' has bad number")))?;
            Some([
                Duration::from_secs_f64(ms[0] / 1e3),
                Duration::from_secs_f64(ms[1] / 1e3),
                Duration::from_secs_f64(ms[2] / 1e3),
            ])
        }
    };

    let run_mode = |mode: ExecMode| -> Result<PipelineReport, CliError> {
        let mut stages = match sleeps {
            Some(s) => sleep_stages(spec, s),
            None => real_stages(
                spec,
                MotionObserver::new(cfg.observer.clone()),
                cfg.propagation.clone(),
                cfg.smoother.clone(),
                cfg.ransac_seeded(),
                cfg.border_policy,
                cfg.border_window,
            ),
        };
        let mut source = VecSource::new(make_frames(args.frames));
        let mut sink = VecSink::default();
        run_pipeline(&mut source, &mut sink, &mut stages, &cfg.queues, mode)
            .map_err(|e| CliError::Other(e.to_string()))
    };

    let pipe = run_mode(ExecMode::Pipeline)?;
    let seq = run_mode(ExecMode::Sequential)?;

    // The model prediction uses the sequential run's mean stage times.
    let timings = StageTimings {
        t_est: seq.stage_means_ms[0] / 1e3,
        t_prop: seq.stage_means_ms[1] / 1e3,
        t_smooth: seq.stage_means_ms[2] / 1e3,
    };
    let kp_cap = cfg.observer.grid_gx * cfg.observer.grid_gy * cfg.observer.per_cell_k;
    let (fps_model, speedup_model, queue_bytes) = predict_performance(
        &timings,
        &QueueConfig {
            capacity_me_mp: cfg.queues.capacity_me_mp,
            capacity_mp_mc: cfg.queues.capacity_mp_mc,
        },
        kp_cap,
        spec.vertex_count(),
    );

    let report = BenchReport {
        speedup_vs_sequential: seq.wall_time_s / pipe.wall_time_s,
        sequential_wall_time_s: seq.wall_time_s,
        predicted_fps_model: fps_model,
        predicted_speedup_model: speedup_model,
        predicted_queue_bytes: queue_bytes,
        pipeline: pipe,
    };
    match &args.report {
        Some(path) => write_json(path, &report)?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?
        ),
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for frames and trajectory.json.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 120)]
    pub frames: usize,
    #[arg(long, default_value = "320x240")]
    pub size: String,
    #[arg(long, default_value_t = 4.0)]
    pub smooth_amplitude: f64,
    #[arg(long, default_value_t = 0.0)]
    pub smooth_rotation: f64,
    /// Jitter profile: alternating, highband, or none.
    #[arg(long, default_value = "alternating")]
    pub jitter: String,
    #[arg(long, default_value_t = 2.0)]
    pub jitter_amplitude: f64,
    #[arg(long, default_value_t = 0)]
    pub synth_seed: u64,
    /// Add a counter-moving foreground plane (two-plane scene).
    #[arg(long)]
    pub two_plane: bool,
}

#[derive(Serialize)]
struct TrajectorySidecar<'a> {
    frames: usize,
    width: usize,
    height: usize,
    smooth: &'a [vstab_core::synth::PoseParams],
    jitter: &'a [vstab_core::synth::PoseParams],
    total: Vec<vstab_core::synth::PoseParams>,
}

pub fn synth(args: SynthArgs) -> Result<(), CliError> {
    let (w, h) = parse_size(&args.size)?;
    let jitter = match args.jitter.as_str() {
        "alternating" => JitterProfile::Alternating {
            amplitude: args.jitter_amplitude,
        },
        "highband" => JitterProfile::HighBand {
            amplitude: args.jitter_amplitude,
        },
        "none" => JitterProfile::None,
        other => {
            return Err(CliError::Config(format!(
                "unknown jitter profile '{other}'"
            )))
        }
    };
    let traj = gen_trajectory(&TrajectoryConfig {
        frames: args.frames,
        smooth_amplitude: args.smooth_amplitude,
        smooth_rotation: args.smooth_rotation,
        jitter,
        seed: args.synth_seed,
    })
    .map_err(|e| CliError::Config(e.to_string()))?;
    let scene = SynthScene {
        texture_seed: args.synth_seed.wrapping_add(1),
        foreground: args.two_plane.then_some(vstab_core::synth::ForegroundPlane {
            x0_frac: 0.5,
            x1_frac: 1.0,
            motion_multiplier: -1.0,
        }),
        ..Default::default()
    };
    let seq = render_sequence(&scene, &traj, w, h, (16, 16))
        .map_err(|e| CliError::Config(e.to_string()))?;

    std::fs::create_dir_all(&args.output)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", args.output.display())))?;
    for frame in &seq.frames {
        save_frame(&args.output, frame, SequenceFormat::Png)?;
    }
    let sidecar = TrajectorySidecar {
        frames: args.frames,
        width: w,
        height: h,
        smooth: &traj.smooth,
        jitter: &traj.jitter,
        total: (0..traj.len()).map(|t| traj.total(t)).collect(),
    };
    write_json(&args.output.join("trajectory.json"), &sidecar)?;
    println!(
        "wrote {} synthetic frames to {}",
        seq.frames.len(),
        args.output.display()
    );
    Ok(())
}
