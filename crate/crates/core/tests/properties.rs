//! Property tests over the public API.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use slidewin::factors::linearize;
use slidewin::hwmodel::{
    cholesky_schedule, cholesky_speedup, cost_report, power_model, schedule_from_ops, AuditOptions, PowerParams,
    ScheduleConfig, ScheduleMode, WindowActivity, WindowDims,
};
use slidewin::io::{stream_from_json, stream_to_json, window_from_json, window_to_json};
use slidewin::linsolve::{cholesky, solve_blocks, SchurBlocks};
use slidewin::model::{validate, WindowProblem};
use slidewin::nls::{cost, lm_solve_observed, LmConfig};
use slidewin::reconfig::{select, LookupTable, Provenance, TableEntry};
use slidewin::scenegen::{generate, ImuNoise, PerturbMagnitudes, SceneConfig};

fn cfg(n: usize, m: usize, mode: ScheduleMode) -> ScheduleConfig {
    ScheduleConfig {
        n,
        update_units: m,
        schur_lanes: 1,
        mode,
    }
}

fn window(n_keyframes: usize, per_kf: usize, seed: u64, noise: bool) -> WindowProblem {
    let scene = generate(&SceneConfig {
        n_keyframes,
        n_features: n_keyframes * per_kf,
        pixel_noise_sigma: if noise { 1e-3 } else { 0.0 },
        imu_noise: if noise {
            ImuNoise {
                accel_sigma: 1e-2,
                gyro_sigma: 1e-3,
                bias_rw_sigma: 1e-3,
            }
        } else {
            ImuNoise::default()
        },
        perturbation: PerturbMagnitudes {
            position: 0.1,
            rotation: 0.05,
            velocity: 0.1,
            bias: 0.01,
            inv_depth: 0.1,
        },
        seed,
        ..Default::default()
    })
    .unwrap();
    scene.windows[0].clone()
}

fn spd(n: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |r, c| entries[(r * 31 + c * 7) % entries.len()]);
    &a * a.transpose() + DMatrix::identity(n, n) * n as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_is_monotone_in_units(n in 1usize..300, m in 1usize..16) {
        for mode in [ScheduleMode::Sequential, ScheduleMode::Pipelined] {
            prop_assert!(cholesky_schedule(&cfg(n, m + 1, mode)) <= cholesky_schedule(&cfg(n, m, mode)));
        }
        prop_assert!(
            cholesky_schedule(&cfg(n, m, ScheduleMode::Pipelined))
                <= cholesky_schedule(&cfg(n, m, ScheduleMode::Sequential))
        );
    }

    #[test]
    fn pipelined_speedup_is_at_most_m_plus_one(n in 1usize..300, m in 1usize..=8) {
        let s = cholesky_speedup(&cfg(n, m, ScheduleMode::Pipelined));
        prop_assert!(s <= (m + 1) as f64, "n={n} m={m} speedup {s}");
    }

    #[test]
    fn schedule_of_measured_counts_matches_model(n in 1usize..40, m in 1usize..9, seed in any::<u64>()) {
        let entries: Vec<f64> = (0..17).map(|k| ((seed >> (k % 60)) & 0xff) as f64 / 255.0 - 0.5).collect();
        let f = cholesky(&spd(n, &entries)).unwrap();
        for mode in [ScheduleMode::Sequential, ScheduleMode::Pipelined] {
            prop_assert_eq!(
                schedule_from_ops(&f.evaluate_ops, &f.update_ops, m, mode),
                cholesky_schedule(&cfg(n, m, mode))
            );
        }
    }

    #[test]
    fn reported_ratios_are_quotients_of_raw_counts(
        n_keyframes in 2usize..16,
        per_kf in 1usize..12,
        span in 1usize..6,
        m in 1usize..10,
        lanes in 1usize..5,
        user in 1usize..100,
    ) {
        let dims = WindowDims { n_keyframes, n_features: n_keyframes * per_kf, co_obs_span: span };
        let schedule = ScheduleConfig { n: dims.n_states(), update_units: m, schur_lanes: lanes, mode: ScheduleMode::Pipelined };
        let trace = vec![WindowActivity {
            window: 0, iterations: 3, max_iterations: 10, schur_lanes: 1, max_schur_lanes: lanes,
            update_units: 1, max_update_units: m, cycles: 1000, max_cycles: 4000, reconfigured: true,
        }];
        let power = power_model(&trace, &PowerParams::default());
        let r = cost_report(&schedule, &dims, &AuditOptions::default(), user, Some(power)).unwrap();
        let d = r.ratios();
        let w = &r.memory_words;
        let q = |a: usize, b: usize| a as f64 / b as f64;
        prop_assert_eq!(d.cholesky_speedup, r.cycles_cholesky_sequential_baseline as f64 / r.cycles_cholesky as f64);
        prop_assert_eq!(d.imu_jacobian_reduction, 1.0 - q(w.imu_jacobian, w.imu_jacobian_dense));
        prop_assert_eq!(d.schur_x_ratio, q(w.u + w.w + w.x_naive + w.v, w.u + w.w + w.x + w.v));
        prop_assert_eq!(d.schur_combined_ratio, q(w.u_dense + w.w + w.x_naive + w.v, w.u + w.w + w.x + w.v));
        prop_assert_eq!(d.s_structured_vs_dense, q(w.s_dense_baseline, w.s_structured));
        prop_assert_eq!(d.s_structured_vs_half, q(w.s_symmetric_half, w.s_structured));
        prop_assert_eq!(d.update_units_vs_zero_stall, q(r.unit_counts.zero_stall_update_units, r.unit_counts.update_units));
        prop_assert_eq!(d.update_units_vs_user_baseline, q(r.unit_counts.user_baseline_update_units, r.unit_counts.update_units));
        prop_assert_eq!(d.energy_ratio, Some(power.always_max.total() / power.adaptive.total()));
        prop_assert_eq!(r.cycles_total, r.cycles_cholesky + r.cycles_schur);
        prop_assert_eq!(w.x, 0);
    }

    #[test]
    fn schur_step_equals_dense_step(ns in 1usize..30, nf in 1usize..40, seed in any::<u64>()) {
        let entries: Vec<f64> = (0..23).map(|k| ((seed.rotate_left(k * 3)) & 0xffff) as f64 / 65535.0 - 0.5).collect();
        let v0 = spd(ns, &entries);
        let w = DMatrix::from_fn(ns, nf, |r, c| entries[(r * 5 + c * 11) % entries.len()]);
        let u = DVector::from_fn(nf, |k, _| 0.5 + entries[k % entries.len()].abs());
        // V dominates W·U⁻¹·Wᵀ so the full system is positive definite.
        let mut v = v0;
        for f in 0..nf {
            v += w.column(f) * w.column(f).transpose() / u[f];
        }
        let blocks = SchurBlocks {
            u,
            w,
            v,
            b_f: DVector::from_fn(nf, |k, _| entries[(k * 3) % entries.len()]),
            b_s: DVector::from_fn(ns, |k, _| entries[(k * 7 + 1) % entries.len()]),
        };
        let (dx_s, dx_f, counts, _) = solve_blocks(&blocks).unwrap();
        let (a, b) = blocks.full_system();
        let dense = a.lu().solve(&b).unwrap();
        let mut got = DVector::zeros(nf + ns);
        got.rows_mut(0, nf).copy_from(&dx_f);
        got.rows_mut(nf, ns).copy_from(&dx_s);
        prop_assert!((&got - &dense).norm() <= 1e-8 * dense.norm().max(1e-300));
        prop_assert_eq!(counts.u_divisions, nf as u64);
    }

    #[test]
    fn select_is_pure(count in 0usize..400, n_entries in 1usize..6, width in 1usize..80) {
        let entries: Vec<TableEntry> = (0..n_entries)
            .map(|k| TableEntry {
                iterations: 1 + k % 10,
                schur_lanes: 1 + k,
                update_units: 1 + k % 8,
                flagged: false,
                scenes: 3,
                median_ate: Some(1e-5),
            })
            .collect();
        let table = LookupTable {
            bucket_width: width,
            target_accuracy: 1e-4,
            max_iterations: 10,
            max_schur_lanes: n_entries,
            max_update_units: 8,
            features_per_lane: 64,
            fallback: TableEntry { iterations: 10, schur_lanes: n_entries, update_units: 8, flagged: true, scenes: 0, median_ate: None },
            entries,
            provenance: Provenance { scene_seeds: vec![1, 2, 3], date: "x".into() },
        };
        let mut w = window(2, 2, 1, false);
        // Replicate features to reach the requested count.
        let template = w.features[0].clone();
        let obs = w.observations.iter().find(|o| o.feature_id == template.id).unwrap().clone();
        w.features.clear();
        w.observations.clear();
        for k in 0..count {
            let mut f = template.clone();
            f.id = 1000 + k;
            w.features.push(f);
            let mut o = obs.clone();
            o.feature_id = 1000 + k;
            w.observations.push(o);
        }
        let before = w.clone();
        let a = select(&table, &w);
        let b = select(&table, &w);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&w, &before);
        prop_assert!(a.iterations >= 1 && a.iterations <= table.max_iterations);
        prop_assert!(a.schur_lanes >= 1 && a.update_units >= 1);
        let entry = table.entry(count);
        prop_assert_eq!(a.iterations, entry.iterations);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn window_round_trips_bit_exactly(n_keyframes in 2usize..6, per_kf in 1usize..6, seed in any::<u64>()) {
        let w = window(n_keyframes, per_kf, seed, true);
        let text = stream_to_json(std::slice::from_ref(&w), None).unwrap();
        let back = stream_from_json(&text).unwrap();
        prop_assert_eq!(&back.windows[0], &w);
        let again = window_from_json(&window_to_json(&w), w.gravity).unwrap();
        prop_assert_eq!(&again, &w);
        prop_assert_eq!(stream_to_json(&back.windows, None).unwrap(), text);
    }

    #[test]
    fn validate_is_idempotent_and_pure(n_keyframes in 2usize..5, seed in any::<u64>(), flip in 0usize..8) {
        let mut w = window(n_keyframes, 3, seed, false);
        if flip < w.features.len() {
            w.features[flip].inv_depth = -w.features[flip].inv_depth;
        }
        let before = w.clone();
        let first = validate(&w);
        let second = validate(&w);
        prop_assert_eq!(&first, &second);
        prop_assert_eq!(&w, &before);
        prop_assert_eq!(first.is_empty(), flip >= w.features.len());
    }

    #[test]
    fn cost_is_half_the_stacked_squared_residual(n_keyframes in 2usize..6, seed in any::<u64>()) {
        let w = window(n_keyframes, 4, seed, true);
        let lin = linearize(&w);
        let mut sum = 0.0;
        for b in &lin.visual.blocks {
            sum += b.residual.norm_squared();
        }
        for f in &lin.imu {
            sum += f.residual.norm_squared();
        }
        if let Some(p) = &lin.prior {
            sum += p.residual.norm_squared();
        }
        let c = cost(&w);
        prop_assert!((c - 0.5 * sum).abs() <= 1e-12 * c.max(1e-300), "{c} vs {}", 0.5 * sum);
    }

    #[test]
    fn solver_keeps_unit_quaternions_and_monotone_cost(n_keyframes in 3usize..6, seed in any::<u64>()) {
        let w = window(n_keyframes, 8, seed, true);
        let mut worst: f64 = 0.0;
        let (_, stats) = lm_solve_observed(&w, &LmConfig::default(), |_, s| {
            for k in &s.keyframes {
                worst = worst.max((k.q.quaternion().norm() - 1.0).abs());
            }
        })
        .unwrap();
        prop_assert!(worst <= 1e-9, "quaternion norm drift {worst:e}");
        prop_assert!(stats.cost_trace.windows(2).all(|c| c[1] <= c[0]));
        prop_assert!(stats.iterations_run <= LmConfig::default().max_iterations);
    }
}

#[test]
fn large_n_speedup_approaches_unit_count() {
    for m in 1..=8 {
        let s = cholesky_speedup(&cfg(500, m, ScheduleMode::Pipelined));
        assert!((s - m as f64).abs() <= 0.1 * m as f64, "m={m} speedup {s}");
    }
}
