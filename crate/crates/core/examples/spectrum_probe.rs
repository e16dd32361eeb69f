//! Diagnostic: spectral breakdown of smoothed trajectories.

use vstab_core::metrics::half_spectrum;
use vstab_core::observer::MotionSample;
use vstab_core::geometry::Point2;
use vstab_core::propagation::GridSpec;
use vstab_core::smoother::{SmootherConfig, TrajectoryBuffer, TrajectorySmoother};
use vstab_core::synth::{gen_trajectory, render_sequence, JitterProfile, SynthScene, TrajectoryConfig};

fn main() {
    for (amp, with_kp) in [(2.0, true), (2.0, false), (6.0, true), (6.0, false)] {
        let traj = gen_trajectory(&TrajectoryConfig {
            frames: 120,
            smooth_amplitude: amp,
            smooth_rotation: 0.0,
            jitter: JitterProfile::Alternating { amplitude: 2.0 },
            seed: 2,
        }).unwrap();
        let seq = render_sequence(&SynthScene::default(), &traj, 128, 96, (8, 8)).unwrap();
        let spec = GridSpec::new(8, 8, 128, 96);
        let mut smoother = TrajectorySmoother::new(spec, SmootherConfig::default());
        let rest = TrajectoryBuffer::rest_positions(&spec);
        let m = if with_kp {
            MotionSample {
                keypoints: (0..24).map(|i| Point2::new(12.0 + 21.0*(i%6) as f64, 10.0 + 19.0*(i/6) as f64)).collect(),
                displacements: vec![[0.0,0.0];24],
                confidences: vec![1.0;24],
                frame_index: 0, frame_width: 128, frame_height: 96,
            }
        } else { MotionSample::default() };
        let mean = |v: &[[f64;2]]| {
            let n = v.len() as f64;
            let s = v.iter().zip(&rest).fold([0.0;2], |a,(b,r)| [a[0]+b[0]-r[0], a[1]+b[1]-r[1]]);
            [s[0]/n, s[1]/n]
        };
        let mut o_path = Vec::new();
        let mut s_path = Vec::new();
        for dg in &seq.true_motion {
            let (s_t, o_t) = smoother.smooth_frame(dg, &m).unwrap();
            o_path.push(mean(&o_t));
            s_path.push(mean(&s_t));
        }
        let band = |p: &[[f64;2]], lo: usize, hi: usize| -> f64 {
            let xs: Vec<f64> = p.iter().map(|v| v[0]).collect();
            let ys: Vec<f64> = p.iter().map(|v| v[1]).collect();
            half_spectrum(&xs)[lo..hi].iter().sum::<f64>() + half_spectrum(&ys)[lo..hi].iter().sum::<f64>()
        };
        let n2 = 61;
        let stability = |p: &[[f64;2]]| -> f64 {
            // magnitude-channel score like the metric
            let mags: Vec<f64> = p.iter().map(|v| (v[0].powi(2)+v[1].powi(2)).sqrt()).collect();
            let sp = half_spectrum(&mags);
            let total: f64 = sp[1..].iter().sum();
            if total <= 1e-12 { 1.0 } else { sp[2..7].iter().sum::<f64>() / total }
        };
        println!(
            "amp={amp} kp={with_kp}: S bands: bin1={:.4} bins2-6={:.4} mid={:.4} top={:.4} | O bin1={:.2} 2-6={:.2} top={:.2} | score O={:.3} S={:.3}",
            band(&s_path, 1, 2), band(&s_path, 2, 7), band(&s_path, 7, 46), band(&s_path, 46, n2),
            band(&o_path, 1, 2), band(&o_path, 2, 7), band(&o_path, 46, n2),
            stability(&o_path), stability(&s_path),
        );
    }
}
