use super::*;
use crate::order_params::meta_generalization_error;
use std::f64::consts::PI;

fn cfg(n: usize, k: usize, m: usize, p: usize, v: usize, eta_j: f64, eta_w: f64) -> ModelConfig {
    ModelConfig {
        n,
        k,
        m,
        p,
        v,
        eta_w,
        eta_j,
    }
}

fn fig2(n: usize) -> ModelConfig {
    cfg(n, 3, 3, 100, 100, 6.0, 4.0)
}

fn plain() -> VariantConfig {
    VariantConfig::default()
}

fn unit_rows(rows: usize, n: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, n, |i, j| if i == j { scale } else { 0.0 })
}

#[test]
fn init_overlaps_concentrate() {
    let c = fig2(1000);
    let s = init_sim(&c, &plain(), 11).unwrap();
    let p = measure_order_params(&s).unwrap();
    let tol = 5.0 / 1000f64.sqrt();
    for k in 0..3 {
        assert!((p.q()[(k, k)] - 1.0).abs() < tol);
        assert!((p.t()[(k, k)] - 1.0).abs() < tol);
    }
}

#[test]
fn matched_init_hits_half_identity() {
    let c = fig2(1000);
    let mut s = init_sim(&c, &plain(), 11).unwrap();
    s.match_init().unwrap();
    let p = measure_order_params(&s).unwrap();
    for a in 0..3 {
        for b in 0..3 {
            let target = if a == b { 0.5 } else { 0.0 };
            assert!((p.q()[(a, b)] - target).abs() < 1e-12);
        }
    }
}

#[test]
fn init_is_deterministic() {
    let c = fig2(200);
    let a = init_sim(&c, &plain(), 5).unwrap();
    let b = init_sim(&c, &plain(), 5).unwrap();
    assert_eq!(a.j, b.j);
    assert_eq!(a.b, b.b);
    let other = init_sim(&c, &plain(), 6).unwrap();
    assert_ne!(a.j, other.j);
}

#[test]
fn initial_overlaps_are_small() {
    let n = 1000;
    let c = fig2(n);
    let bound = 5.0 / (n as f64).sqrt();
    let mut inside = 0;
    let mut total = 0;
    for seed in 0..100 {
        let s = init_sim(&c, &plain(), seed).unwrap();
        let p = measure_order_params(&s).unwrap();
        for r in p.r().iter() {
            total += 1;
            if r.abs() <= bound {
                inside += 1;
            }
        }
    }
    assert!(inside as f64 >= 0.99 * total as f64);
}

#[test]
fn with_overlaps_reproduces_targets() {
    let c = cfg(300, 3, 2, 10, 10, 1.0, 1.0);
    let q = DMatrix::from_row_slice(3, 3, &[0.8, 0.1, 0.0, 0.1, 0.6, 0.05, 0.0, 0.05, 0.7]);
    let r = DMatrix::from_row_slice(3, 2, &[0.5, 0.1, 0.0, 0.4, 0.2, 0.0]);
    let t = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
    let target = OrderParams::new(q, r, t).unwrap();
    let s = SimState::with_overlaps(&c, &plain(), &target, 3).unwrap();
    let got = measure_order_params(&s).unwrap();
    assert!((got.block_matrix() - target.block_matrix()).amax() < 1e-12);
}

#[test]
fn zero_task_vector_gives_zero_labels() {
    let c = fig2(100);
    let s = init_sim(&c, &plain(), 1).unwrap();
    let task = generate_task_with(&s, 0, Some(&[0.0, 0.0, 0.0]));
    assert!(task.train_sigma.iter().chain(&task.val_sigma).all(|&x| x == 0.0));
}

#[test]
fn hand_label() {
    let c = cfg(4, 1, 1, 1, 1, 1.0, 1.0);
    let b = unit_rows(1, 4, 1.0);
    let j = unit_rows(1, 4, 0.5);
    let s = SimState::from_parts(&c, &plain(), &b, &j, 0).unwrap();
    let teacher = Teacher {
        u: vec![1.0],
        delta_b: None,
        rows: None,
    };
    let sigma = teacher.clean_label(&s, &[2.0, 0.0, 0.0, 0.0]);
    assert!((sigma - libm::erf(2f64.sqrt())).abs() < 1e-15);
    assert!((sigma - 0.9545).abs() < 5e-5);
}

#[test]
fn label_noise_variance() {
    let c = cfg(20, 2, 2, 100, 100, 1.0, 1.0);
    let v = VariantConfig::l2_noise(0.0, 0.01);
    let s = init_sim(&c, &v, 2).unwrap();
    let mut st = RunningStats::default();
    for t in 0..50 {
        let task = generate_task_with(&s, t, None);
        for d in task.train_noise.iter().chain(&task.val_noise) {
            st.push(*d);
        }
        for ((xi, sigma), d) in task.train_xi.chunks_exact(20).zip(&task.train_sigma).zip(&task.train_noise) {
            let teacher = Teacher {
                u: task.u.clone(),
                delta_b: None,
                rows: None,
            };
            assert!((sigma - d - teacher.clean_label(&s, xi)).abs() < 1e-12);
        }
    }
    assert_eq!(st.count(), 10_000);
    assert!((st.variance() - 0.01).abs() < 0.001);
}

#[test]
fn perturbed_teacher_rows() {
    let c = cfg(50, 2, 2, 5, 5, 1.0, 1.0);
    let v = VariantConfig::gamma(0.9);
    let s = init_sim(&c, &v, 8).unwrap();
    let task = generate_task_with(&s, 0, None);
    let db = task.delta_b.as_ref().unwrap();
    let s2 = (1.0 - 0.81f64).sqrt();
    let teacher = Teacher::draw(&s, &mut TaskRngs::training(8, 0), None);
    for m in 0..2 {
        for (i, x) in teacher.row(&s, m).iter().enumerate() {
            assert!((x - (0.9 * s.b_row(m)[i] + s2 * db[m * 50 + i])).abs() < 1e-15);
        }
    }
    assert!(generate_task_with(&init_sim(&c, &plain(), 8).unwrap(), 0, None).delta_b.is_none());
}

#[test]
fn zero_inner_rate_gives_zero_head() {
    let c = cfg(100, 3, 3, 20, 20, 1.0, 0.0);
    let s = init_sim(&c, &plain(), 1).unwrap();
    let task = generate_task(&s);
    assert_eq!(inner_adapt(&s, &task), vec![0.0; 3]);
}

fn solve_erf_arg(target: f64) -> f64 {
    let mut x = 0.0;
    for _ in 0..60 {
        x -= (act(Activation::Erf, x) - target) / act_prime(Activation::Erf, x);
    }
    x
}

#[test]
fn hand_inner_step() {
    let c = cfg(2, 1, 1, 1, 1, 1.0, 2.0);
    let x = solve_erf_arg(0.2);
    let j = DMatrix::from_row_slice(1, 2, &[x, 0.0]);
    let b = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
    let s = SimState::from_parts(&c, &plain(), &b, &j, 0).unwrap();
    let task = TaskData {
        u: vec![1.0],
        delta_b: None,
        train_xi: vec![1.0, 0.0],
        train_sigma: vec![0.5],
        train_noise: vec![0.0],
        val_xi: vec![],
        val_sigma: vec![],
        val_noise: vec![],
    };
    let w = inner_adapt(&s, &task);
    assert!((w[0] - 0.2).abs() < 1e-12);
}

#[test]
fn head_mean_matches_overlaps() {
    let c = cfg(500, 3, 3, 100, 1, 1.0, 4.0);
    let s = init_sim(&c, &plain(), 9).unwrap();
    let p = measure_order_params(&s).unwrap();
    let u = [0.7, -1.2, 0.4];
    let mut stats = vec![RunningStats::default(); 3];
    for t in 0..1000 {
        let task = generate_task_with(&s, t, Some(&u));
        for (st, w) in stats.iter_mut().zip(inner_adapt(&s, &task)) {
            st.push(w);
        }
    }
    for k in 0..3 {
        let mut expect = 0.0;
        for m in 0..3 {
            let f = 2.0 / PI
                * (p.r()[(k, m)] / ((1.0 + p.q()[(k, k)]).sqrt() * (1.0 + p.t()[(m, m)]).sqrt())).asin();
            expect += u[m] * f;
        }
        expect *= 4.0 / 3f64.sqrt() / 3f64.sqrt();
        let st = &stats[k];
        assert!((st.mean() - expect).abs() < 3.0 * st.std_err(), "k={k}: {} vs {expect}", st.mean());
    }
}

#[test]
fn outer_update_identities() {
    let c = cfg(100, 3, 3, 20, 20, 2.0, 1.0);
    let mut s = init_sim(&c, &plain(), 4).unwrap();
    let task = generate_task(&s);
    let before = s.j.clone();
    outer_update(&mut s, &task, &[0.0; 3]);
    assert_eq!(s.j, before);
    assert_eq!(s.task_count(), 1);

    let c0 = cfg(100, 3, 3, 20, 20, 0.0, 1.0);
    let mut s0 = init_sim(&c0, &plain(), 4).unwrap();
    let task = generate_task(&s0);
    let w = inner_adapt(&s0, &task);
    let before = s0.j.clone();
    outer_update(&mut s0, &task, &w);
    assert_eq!(s0.j, before);
}

#[test]
fn hand_outer_step() {
    let (n, eta_j) = (3, 1.5);
    let c = cfg(n, 1, 1, 1, 1, eta_j, 1.0);
    let j = DMatrix::from_row_slice(1, 3, &[0.3, -0.2, 0.5]);
    let b = DMatrix::from_row_slice(1, 3, &[0.1, 0.4, -0.6]);
    let s0 = SimState::from_parts(&c, &plain(), &b, &j, 0).unwrap();
    let xi = [1.0, 2.0, -0.5];
    let sigma = 0.37;
    let w = 0.8;
    let task = TaskData {
        u: vec![1.0],
        delta_b: None,
        train_xi: vec![],
        train_sigma: vec![],
        train_noise: vec![],
        val_xi: xi.to_vec(),
        val_sigma: vec![sigma],
        val_noise: vec![0.0],
    };
    let mut s = s0.clone();
    outer_update(&mut s, &task, &[w]);

    let x: f64 = 0.3 * 1.0 + -0.2 * 2.0 + 0.5 * -0.5;
    let g = libm::erf(x / 2f64.sqrt());
    let gp = (2.0 / PI).sqrt() * (-x * x / 2.0).exp();
    let h = (sigma - w * g) * w * gp;
    for i in 0..3 {
        let expect = j[(0, i)] + eta_j / (n as f64) * h * xi[i];
        assert!((s.j_row(0)[i] - expect).abs() < 1e-12);
    }

    let v = VariantConfig::l2_noise(0.2, 0.0);
    let mut sd = SimState::from_parts(&c, &v, &b, &j, 0).unwrap();
    outer_update(&mut sd, &task, &[w]);
    for i in 0..3 {
        let expect = (1.0 - 0.2 * eta_j / n as f64) * j[(0, i)] + eta_j / (n as f64) * h * xi[i];
        assert!((sd.j_row(0)[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn fused_step_matches_explicit_pipeline() {
    for v in [plain(), VariantConfig::gamma(0.8), VariantConfig::l2_noise(0.1, 0.05), VariantConfig::linear()] {
        let c = cfg(64, 3, 2, 7, 5, 2.0, 3.0);
        let mut a = init_sim(&c, &v, 21).unwrap();
        let mut b = a.clone();
        for _ in 0..3 {
            let wa = step(&mut a);
            let task = generate_task(&b);
            let wb = inner_adapt(&b, &task);
            outer_update(&mut b, &task, &wb);
            assert_eq!(wa, wb);
            assert_eq!(a.j, b.j);
        }
    }
}

#[test]
fn measurement_identities() {
    let c = cfg(4, 2, 2, 1, 1, 1.0, 1.0);
    let j = unit_rows(2, 4, 1.0 / 2f64.sqrt());
    let b = DMatrix::from_row_slice(2, 4, &[1.0, 0.5, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0]);
    let s = SimState::from_parts(&c, &plain(), &b, &j, 0).unwrap();
    let p = measure_order_params(&s).unwrap();
    assert!((p.q()[(0, 0)] - 0.5).abs() < 1e-15);
    assert!((p.q()[(1, 1)] - 0.5).abs() < 1e-15);

    let s = SimState::from_parts(&c, &plain(), &b, &b, 0).unwrap();
    let p = measure_order_params(&s).unwrap();
    assert_eq!(p.r(), p.t());
    assert_eq!(p.q(), p.t());
}

fn fig3_state(n: usize, eta_w: f64) -> SimState {
    let c = cfg(n, 3, 3, 1, 1, 1.0, eta_w);
    let params = OrderParams::fig3_init(3, 3);
    let params = params.with_qr(params.q().clone(), DMatrix::zeros(3, 3)).unwrap();
    SimState::with_overlaps(&c, &plain(), &params, 13).unwrap()
}

#[test]
fn empirical_error_without_adaptation() {
    let s = fig3_state(500, 0.0);
    let est = empirical_meta_error(&s, 400, 50).unwrap();
    let theory = meta_generalization_error(&measure_order_params(&s).unwrap(), s.config(), s.variant()).unwrap();
    assert!((theory - 0.2229642).abs() < 1e-6);
    assert!((est.mean - theory).abs() < 3.0 * est.std_err, "{est:?} vs {theory}");
}

#[test]
fn empirical_error_silent_teacher() {
    let s = fig3_state(100, 3.0);
    let est = empirical_meta_error_with(&s, 5, 10, Some(&[0.0; 3])).unwrap();
    assert_eq!(est.mean, 0.0);
}

#[test]
fn empirical_error_matches_closed_form_at_start() {
    let mut s = init_sim(&fig2(1000), &plain(), 3).unwrap();
    s.match_init().unwrap();
    let est = empirical_meta_error(&s, 300, 50).unwrap();
    let theory = meta_generalization_error(&measure_order_params(&s).unwrap(), s.config(), s.variant()).unwrap();
    assert!((est.mean - theory).abs() < 3.0 * est.std_err, "{est:?} vs {theory}");
}

#[test]
fn empirical_error_rejects_empty_sizes() {
    let s = fig3_state(50, 1.0);
    assert!(empirical_meta_error(&s, 0, 5).is_err());
    assert!(empirical_meta_error(&s, 5, 0).is_err());
}

#[test]
fn stream_without_tasks_has_initial_sample() {
    let c = fig2(1000);
    let mut s = init_sim(&c, &plain(), 1).unwrap();
    let opts = StreamOptions {
        alpha_max: 0.0005,
        record_every: 0.1,
        eps_tasks: 0,
        ..Default::default()
    };
    let tr = run_stream(&mut s, &opts).unwrap();
    assert_eq!(tr.len(), 1);
    assert_eq!(tr.schedule, vec![0.0]);
    assert!(tr.eps_empirical[0].is_nan());
    assert!(tr.stop.is_complete());
}

#[test]
fn frozen_head_keeps_overlaps() {
    let c = cfg(200, 3, 3, 20, 20, 3.0, 0.0);
    let mut s = init_sim(&c, &plain(), 1).unwrap();
    let j0 = s.j.clone();
    let opts = StreamOptions {
        alpha_max: 0.5,
        record_every: 0.1,
        eps_tasks: 2,
        eps_test: 5,
        ..Default::default()
    };
    let tr = run_stream(&mut s, &opts).unwrap();
    assert_eq!(tr.len(), 6);
    assert_eq!(s.j, j0);
    for p in &tr.states {
        assert_eq!(p.q(), tr.states[0].q());
        assert_eq!(p.r(), tr.states[0].r());
    }
}

#[test]
fn frozen_representation_keeps_overlaps() {
    let c = cfg(200, 3, 3, 20, 20, 0.0, 4.0);
    let mut s = init_sim(&c, &plain(), 1).unwrap();
    let j0 = s.j.clone();
    let opts = StreamOptions {
        alpha_max: 0.2,
        record_every: 0.1,
        eps_tasks: 0,
        ..Default::default()
    };
    run_stream(&mut s, &opts).unwrap();
    assert_eq!(s.j, j0);
}

#[test]
fn streams_are_reproducible() {
    let c = cfg(100, 2, 2, 10, 10, 3.0, 3.0);
    let base = init_sim(&c, &plain(), 7).unwrap();
    let opts = StreamOptions {
        alpha_max: 0.5,
        record_every: 0.1,
        eps_tasks: 2,
        eps_test: 5,
        ma_window: 0.2,
    };
    let a = run_ensemble(&base, &[1, 2], &opts).unwrap();
    let b = run_ensemble(&base, &[1, 2], &opts).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.schedule, y.schedule);
        assert_eq!(x.eps_empirical, y.eps_empirical);
        assert_eq!(x.eps_ma, y.eps_ma);
        for (p, q) in x.states.iter().zip(&y.states) {
            assert_eq!(p.r(), q.r());
        }
    }
    assert_ne!(a[0].states.last().unwrap().r(), a[1].states.last().unwrap().r());
}

#[test]
fn divergent_run_stops_early() {
    let c = cfg(50, 2, 2, 10, 10, 1e6, 1e3);
    let mut s = init_sim(&c, &VariantConfig::linear(), 1).unwrap();
    let opts = StreamOptions {
        alpha_max: 50.0,
        record_every: 1.0,
        eps_tasks: 0,
        ..Default::default()
    };
    let tr = run_stream(&mut s, &opts).unwrap();
    assert!(matches!(tr.stop, crate::order_params::StopReason::NonFinite { .. }));
    assert!(*tr.schedule.last().unwrap() < 50.0);
}
