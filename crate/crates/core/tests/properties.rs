//! Property tests over the spec invariants.

use proptest::prelude::*;
use vstab_core::geometry::{bilinear_sample, Homography, Point2, VectorField};
use vstab_core::metrics::channel_stability;
use vstab_core::observer::MotionSample;
use vstab_core::propagation::{loss_kp, GridMotionField, GridSpec};
use vstab_core::smoother::{
    smooth_step, KernelSet, SmootherConfig, TrajectoryBuffer,
};

fn well_conditioned_h() -> impl Strategy<Value = Homography> {
    (
        -0.15f64..0.15,
        -0.15f64..0.15,
        -20.0f64..20.0,
        -0.15f64..0.15,
        -0.15f64..0.15,
        -20.0f64..20.0,
        -5e-5f64..5e-5,
        -5e-5f64..5e-5,
    )
        .prop_map(|(a, b, tx, c, d, ty, g, h)| {
            let m = nalgebra::Matrix3::new(1.0 + a, b, tx, c, 1.0 + d, ty, g, h, 1.0);
            Homography::from_matrix(m).unwrap()
        })
}

proptest! {
    #[test]
    fn project_round_trips_through_inverse(
        h in well_conditioned_h(),
        x in 0.0f64..640.0,
        y in 0.0f64..480.0,
    ) {
        let p = Point2::new(x, y);
        let inv = h.inverse().unwrap();
        let back = inv.project(h.project(p).unwrap()).unwrap();
        prop_assert!(back.dist(&p) < 1e-9);
    }

    #[test]
    fn bilinear_exact_on_affine_fields(
        ax in -3.0f64..3.0,
        ay in -3.0f64..3.0,
        b in -10.0f64..10.0,
        x in 0.0f64..4.0,
        y in 0.0f64..3.0,
    ) {
        let mut f = VectorField::zeros(5, 4);
        for r in 0..4 {
            for c in 0..5 {
                *f.get_mut(c, r) = [ax * c as f64 + ay * r as f64 + b, b - ax * r as f64];
            }
        }
        let v = bilinear_sample(&f, Point2::new(x, y));
        prop_assert!((v[0] - (ax * x + ay * y + b)).abs() < 1e-9);
        prop_assert!((v[1] - (b - ax * y)).abs() < 1e-9);
    }

    #[test]
    fn alpha_weights_sum_to_one(delta_max in 1usize..8, tau in 0.1f64..10.0) {
        let cfg = SmootherConfig { tau_time: tau, ..Default::default() };
        let w = cfg.alpha_weights(delta_max);
        prop_assert_eq!(w.len(), delta_max);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // Monotone decay with distance.
        for pair in w.windows(2) {
            prop_assert!(pair[0] > pair[1]);
        }
    }

    #[test]
    fn constants_are_fixed_points_for_nonnegative_taps(
        k1 in 0.0f64..2.0,
        k2 in 0.0f64..2.0,
        k3 in 0.0f64..2.0,
        value in -50.0f64..50.0,
    ) {
        let spec = GridSpec::new(2, 2, 10, 10);
        let mut buf = TrajectoryBuffer::new(spec, 7);
        buf.append_and_integrate(&GridMotionField::zeros(spec, 0)).unwrap();
        // Constant history equal to a shifted rest grid.
        let shifted: Vec<[f64; 2]> = TrajectoryBuffer::rest_positions(&spec)
            .iter()
            .map(|p| [p[0] + value, p[1] - value])
            .collect();
        for _ in 0..3 {
            buf.push_smoothed(shifted.clone());
        }
        // O_t equals the same constant.
        let mut dg = GridMotionField::zeros(spec, 1);
        for d in dg.vectors_mut() {
            d[0] = value;
            d[1] = -value;
        }
        buf.append_and_integrate(&dg).unwrap();
        let k = KernelSet::global([k1, k2, k3], [k3, k1, k2]);
        let s = smooth_step(&buf, &k, 100.0);
        for (sv, hv) in s.iter().zip(&shifted) {
            prop_assert!((sv[0] - hv[0]).abs() < 1e-9);
            prop_assert!((sv[1] - hv[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn smooth_step_bounded_for_bounded_inputs(
        k1 in -2.0f64..2.0,
        k2 in -2.0f64..2.0,
        k3 in -2.0f64..2.0,
        h1 in -30.0f64..30.0,
        h2 in -30.0f64..30.0,
        h3 in -30.0f64..30.0,
        o in -30.0f64..30.0,
    ) {
        let spec = GridSpec::new(2, 2, 10, 10);
        let mut buf = TrajectoryBuffer::new(spec, 7);
        buf.append_and_integrate(&GridMotionField::zeros(spec, 0)).unwrap();
        for h in [h1, h2, h3] {
            buf.push_smoothed(vec![[h, h]; 4]);
        }
        let mut dg = GridMotionField::zeros(spec, 1);
        let rest = TrajectoryBuffer::rest_positions(&spec);
        for (d, r) in dg.vectors_mut().iter_mut().zip(&rest) {
            d[0] = o - r[0];
            d[1] = o - r[1];
        }
        buf.append_and_integrate(&dg).unwrap();
        let k = KernelSet::global([k1, k2, k3], [k1, k2, k3]);
        let s = smooth_step(&buf, &k, 100.0);
        // |S| <= max history magnitude + |O| for any taps (denominator >= 1
        // and each history term is scaled by lambda k / (1 + lambda sum|k|)).
        let bound = h1.abs().max(h2.abs()).max(h3.abs()) + o.abs() + 1e-9;
        for sv in &s {
            prop_assert!(sv[0].abs() <= bound, "{} > {}", sv[0], bound);
        }
    }

    #[test]
    fn loss_kp_floor_attained_iff_exact(
        ux in -4.0f64..4.0,
        uy in -4.0f64..4.0,
        offset in 0.5f64..3.0,
    ) {
        let spec = GridSpec::new(4, 4, 90, 90);
        let m = MotionSample {
            keypoints: vec![Point2::new(30.0, 30.0), Point2::new(60.0, 60.0)],
            displacements: vec![[ux, uy]; 2],
            confidences: vec![1.0; 2],
            frame_index: 0,
            frame_width: 90,
            frame_height: 90,
        };
        let eps = 1e-3;
        // Exact match attains the floor.
        let mut exact = GridMotionField::zeros(spec, 0);
        for v in exact.vectors_mut() {
            *v = [ux, uy];
        }
        prop_assert!((loss_kp(&exact, &m, eps) - eps).abs() < 1e-12);
        // Any offset strictly exceeds it.
        let mut off = exact.clone();
        for v in off.vectors_mut() {
            v[0] += offset;
        }
        prop_assert!(loss_kp(&off, &m, eps) > eps + offset / 2.0);
    }

    #[test]
    fn stability_invariant_to_dc_offset(
        amp in 0.5f64..10.0,
        bin in 1usize..12,
        offset in -40.0f64..40.0,
    ) {
        let n = 48;
        let base: Vec<f64> = (0..n)
            .map(|t| 60.0 + amp * (std::f64::consts::TAU * bin as f64 * t as f64 / n as f64).sin())
            .collect();
        let shifted: Vec<f64> = base.iter().map(|v| v + offset).collect();
        let a = channel_stability(&base);
        let b = channel_stability(&shifted);
        prop_assert!((a - b).abs() < 1e-9);
    }
}
