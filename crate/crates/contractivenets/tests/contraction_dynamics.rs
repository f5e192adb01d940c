//! Trajectory-level invariants: certified compositions forget their initial
//! conditions at the promised rates, the integrators converge at their
//! theoretical orders, and recorded fixtures replay exactly.

use contractivenets::certificates::certify_abs;
use contractivenets::composition::{
    build_hierarchical_l, build_l, block_metric, ComposedNetwork, InterconnectionMask,
    SubnetworkSpec,
};
use contractivenets::dynamics::{
    contraction_rate, simulate, Activation, InputSequence, Method, Trajectory,
};
use contractivenets::numerics::{Matrix, Vector};
use contractivenets::rng::StreamRng;
use contractivenets::samplers::{build_svd_subnet, SvdSubnetParams};
use std::collections::BTreeMap;

fn sample_abs_subnet(n: usize, density: f64, scale: f64, rng: &mut StreamRng) -> SubnetworkSpec {
    loop {
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.uniform01() < density {
                    w[(i, j)] = rng.uniform(-scale, scale);
                }
            }
        }
        if let Ok(cert) = certify_abs(&w, 1.0) {
            return SubnetworkSpec::from_certificate(cert);
        }
    }
}

fn svd_subnet(n: usize, rng: &mut StreamRng) -> SubnetworkSpec {
    let mut params = SvdSubnetParams::random(n, 1.0, rng);
    // keep singular values comfortably below 1 so the subnetwork rate is
    // high, and Φ well conditioned so the reflected L blocks (which scale
    // with metric ratios) stay integrable at the fixture step size
    for s in params.sigma_raw.iter_mut() {
        *s = rng.uniform(-2.0, 0.0);
    }
    for p in params.phi_raw.iter_mut() {
        *p = rng.uniform(0.7, 1.2);
    }
    let built = build_svd_subnet(&params).unwrap();
    SubnetworkSpec {
        w: built.w,
        metric: built.metric.to_dense(),
        g: 1.0,
        cert: built.cert,
    }
}

/// Mixed certified composition with a random (scaled) B.
fn mixed_fixture(p: usize, n_sub: usize, rng: &mut StreamRng) -> ComposedNetwork {
    let subnets: Vec<SubnetworkSpec> = (0..p)
        .map(|k| {
            if k % 2 == 0 {
                sample_abs_subnet(n_sub, 0.3, 0.35, rng)
            } else {
                svd_subnet(n_sub, rng)
            }
        })
        .collect();
    let n = p * n_sub;
    let scale = 0.5 / (n as f64).sqrt();
    let b = Matrix::from_fn(n, n, |_, _| rng.uniform(-scale, scale));
    ComposedNetwork::assemble(
        subnets,
        InterconnectionMask::full(p),
        b,
        1.0,
        Matrix::identity(n, n),
        Vector::zeros(n),
        Matrix::identity(n, n),
        Vector::zeros(n),
        false,
    )
    .unwrap()
}

fn metric_distance(m: &Matrix, a: &Vector, b: &Vector) -> f64 {
    let d = a - b;
    (m * &d).dot(&d).max(0.0).sqrt()
}

#[test]
fn certified_fixtures_forget_initial_conditions() {
    let mut rng = StreamRng::new(404);
    for fixture in 0..3 {
        let net = mixed_fixture(2 + fixture, 4, &mut rng);
        let n = net.n_total();
        let dt = 1e-2;
        let steps = 4000; // 40 time units
        for trial in 0..20 {
            let inputs = InputSequence::from_fn(steps, n, dt, |t, i| {
                0.5 * ((0.7 * t + i as f64).sin() + (0.13 * t).cos())
            });
            let x0a = Vector::from_fn(n, |_, _| rng.uniform(-1.0, 1.0));
            let x0b = Vector::from_fn(n, |_, _| rng.uniform(-1.0, 1.0));
            let ta = simulate(&x0a, &inputs, &net, Activation::Relu, Method::Euler).unwrap();
            let tb = simulate(&x0b, &inputs, &net, Activation::Relu, Method::Euler).unwrap();
            let d0 = metric_distance(&net.block_metric, &ta.states[0], &tb.states[0]);
            // monotone after the 1τ transient, checked until the distance is
            // three decades below the 1e-6 target (beyond that, discretization
            // noise at the floating-point floor dominates)
            let floor = 1e-9 * d0;
            let mut prev = f64::INFINITY;
            for (k, t) in ta.times.iter().enumerate() {
                let d = metric_distance(&net.block_metric, &ta.states[k], &tb.states[k]);
                if *t >= 1.0 && d > floor {
                    assert!(
                        d <= prev * (1.0 + 1e-9),
                        "fixture {fixture} trial {trial}: distance grew at t={t}"
                    );
                    prev = d;
                }
            }
            let d_end = metric_distance(
                &net.block_metric,
                ta.states.last().unwrap(),
                tb.states.last().unwrap(),
            );
            assert!(
                d_end <= 1e-6 * d0,
                "fixture {fixture} trial {trial}: d(40) = {d_end:.3e} vs d(0) = {d0:.3e}"
            );
        }
    }
}

#[test]
fn bounded_input_keeps_state_bounded() {
    let mut rng = StreamRng::new(405);
    let net = mixed_fixture(3, 4, &mut rng);
    let n = net.n_total();
    let inputs = InputSequence::from_fn(6000, n, 0.01, |t, i| ((t + i as f64) * 0.37).sin() * 2.0);
    let x0 = Vector::from_fn(n, |_, _| rng.uniform(-3.0, 3.0));
    let traj = simulate(&x0, &inputs, &net, Activation::Relu, Method::Euler).unwrap();
    let worst = traj
        .states
        .iter()
        .flat_map(|x| x.iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    assert!(worst.is_finite());
    assert!(worst < 1e3, "state grew to {worst}");
}

/// Observed convergence order of each integrator against a fine reference:
/// errors at dt and dt/2 should shrink at the method's order (≥0.9 for
/// Euler, ≥3.5 for the fourth-order method). Constant input keeps the
/// right-hand side smooth so the orders are clean.
#[test]
fn integrator_orders_match_theory() {
    let mut rng = StreamRng::new(406);
    let subnet = sample_abs_subnet(4, 0.4, 0.3, &mut rng);
    let net = ComposedNetwork::single(subnet, 1.0).unwrap();
    let x0 = Vector::from_column_slice(&[0.8, -0.6, 0.4, -0.2]);
    let u = Vector::from_column_slice(&[0.5, -0.3, 0.2, 0.4]);
    let horizon = 2.0;

    let end_state = |dt: f64, method: Method| -> Vector {
        let steps = (horizon / dt).round() as usize;
        let inputs = InputSequence::constant(&u, steps, dt);
        simulate(&x0, &inputs, &net, Activation::Tanh, method)
            .unwrap()
            .states
            .last()
            .unwrap()
            .clone()
    };
    let reference = end_state(1e-5, Method::Rk4);

    let order = |method: Method, dt: f64| -> f64 {
        let e1 = (end_state(dt, method) - &reference).norm();
        let e2 = (end_state(dt / 2.0, method) - &reference).norm();
        (e1 / e2).log2()
    };
    let euler_order = order(Method::Euler, 0.02);
    assert!(euler_order >= 0.9, "Euler order {euler_order}");
    let rk4_order = order(Method::Rk4, 0.05);
    assert!(rk4_order >= 3.5, "RK4 order {rk4_order}");
}

#[test]
fn hierarchical_composition_contracts_empirically() {
    let mut rng = StreamRng::new(407);
    let subnets: Vec<SubnetworkSpec> = (0..3)
        .map(|_| sample_abs_subnet(3, 0.4, 0.3, &mut rng))
        .collect();
    let mut blocks = BTreeMap::new();
    blocks.insert((1usize, 0usize), Matrix::from_fn(3, 3, |_, _| rng.uniform(-1.0, 1.0)));
    blocks.insert((2usize, 1usize), Matrix::from_fn(3, 3, |_, _| rng.uniform(-1.0, 1.0)));
    blocks.insert((2usize, 0usize), Matrix::from_fn(3, 3, |_, _| rng.uniform(-0.5, 0.5)));
    let l = build_hierarchical_l(&blocks, &subnets).unwrap();
    // assemble manually: hierarchical L is not metric-skew, so bypass the
    // skew verification by injecting L directly through a control-mode shell
    let n = 9;
    let mut net = ComposedNetwork::assemble(
        subnets.clone(),
        InterconnectionMask::empty(3),
        Matrix::zeros(n, n),
        1.0,
        Matrix::identity(n, n),
        Vector::zeros(n),
        Matrix::identity(n, n),
        Vector::zeros(n),
        true,
    )
    .unwrap();
    net.l = l;
    let inputs = InputSequence::from_fn(6000, n, 0.01, |t, i| (t * 0.4 + i as f64).sin() * 0.5);
    let xa = Vector::from_fn(n, |_, _| rng.uniform(-1.0, 1.0));
    let xb = Vector::from_fn(n, |_, _| rng.uniform(-1.0, 1.0));
    let ta = simulate(&xa, &inputs, &net, Activation::Relu, Method::Euler).unwrap();
    let tb = simulate(&xb, &inputs, &net, Activation::Relu, Method::Euler).unwrap();
    let fit = contraction_rate(&ta, &tb, &Matrix::identity(n, n), 5.0).unwrap();
    assert!(fit.rate > 0.0, "hierarchy rate {} not positive", fit.rate);
}

/// The skew interconnection leaves the composed metric distance dynamics
/// untouched even for large B: cross-check build_l output in simulation.
#[test]
fn large_feedback_does_not_break_contraction() {
    let mut rng = StreamRng::new(408);
    let subnets: Vec<SubnetworkSpec> = (0..2)
        .map(|_| sample_abs_subnet(4, 0.3, 0.3, &mut rng))
        .collect();
    let n = 8;
    let b = Matrix::from_fn(n, n, |_, _| rng.uniform(-0.8, 0.8));
    let mask = InterconnectionMask::full(2);
    let l = build_l(&b, &subnets, &mask).unwrap();
    let mtilde = block_metric(&subnets, &[1.0, 1.0]).unwrap();
    contractivenets::composition::verify_interconnection(&l, &mtilde).unwrap();
    let net = ComposedNetwork::assemble(
        subnets,
        mask,
        b,
        1.0,
        Matrix::identity(n, n),
        Vector::zeros(n),
        Matrix::identity(n, n),
        Vector::zeros(n),
        false,
    )
    .unwrap();
    // dt small enough for the explicit scheme under this feedback strength
    let inputs = InputSequence::zeros(4000, n, 5e-3);
    let xa = Vector::from_fn(n, |_, _| rng.uniform(-1.0, 1.0));
    let xb = Vector::from_fn(n, |_, _| rng.uniform(-1.0, 1.0));
    let ta = simulate(&xa, &inputs, &net, Activation::Relu, Method::Rk4).unwrap();
    let tb = simulate(&xb, &inputs, &net, Activation::Relu, Method::Rk4).unwrap();
    let fit = contraction_rate(&ta, &tb, &net.block_metric, 1.0).unwrap();
    assert!(fit.rate > 0.0, "rate {}", fit.rate);
    assert!(fit.r2 > 0.9, "r² {}", fit.r2);
}

#[test]
fn slope_monitor_diagnostic_on_sinusoid_drive() {
    // differentiable activation, slowly varying input: the monitor measures
    // how often the slope-derivative condition holds along the trajectory
    let mut rng = StreamRng::new(409);
    let subnet = sample_abs_subnet(3, 0.4, 0.3, &mut rng);
    let w = subnet.w.clone();
    let net = ComposedNetwork::single(subnet, 1.0).unwrap();
    // P = I witnesses some rate c for gW − I; pick c from the static part
    let gw_minus_i = &w - Matrix::identity(3, 3);
    let static_lam = contractivenets::numerics::max_eig_sym(
        &contractivenets::numerics::sym_part(&(&gw_minus_i * 2.0)).unwrap(),
    )
    .unwrap();
    let c = (-static_lam) * 0.9;
    assert!(c > 0.0);
    let inputs = InputSequence::from_fn(4000, 3, 0.01, |t, i| (0.05 * t + i as f64).sin() * 0.4);
    let traj = simulate(
        &Vector::zeros(3),
        &inputs,
        &net,
        Activation::Tanh,
        Method::Rk4,
    )
    .unwrap();
    let report = contractivenets::dynamics::monitor_theorem6(
        &w,
        &traj,
        Activation::Tanh,
        &contractivenets::numerics::Diagonal::identity(3),
        c,
        1.0,
        c * 0.25,
    )
    .unwrap();
    assert!(report.checked > 0);
    assert!(
        report.fraction_ok > 0.5,
        "slowly varying drive should satisfy the slope condition most of the time \
         (fraction {})",
        report.fraction_ok
    );
}

// ---- golden trajectory fixture ----

fn golden_fixture_net() -> ComposedNetwork {
    let mut rng = StreamRng::new(20_24);
    let subnets = vec![
        sample_abs_subnet(3, 0.4, 0.3, &mut rng),
        sample_abs_subnet(2, 0.5, 0.3, &mut rng),
    ];
    let n = 5;
    let b = Matrix::from_fn(n, n, |_, _| rng.uniform(-0.6, 0.6));
    ComposedNetwork::assemble(
        subnets,
        InterconnectionMask::full(2),
        b,
        1.0,
        Matrix::identity(n, n),
        Vector::zeros(n),
        Matrix::identity(n, n),
        Vector::zeros(n),
        false,
    )
    .unwrap()
}

fn golden_fixture_trajectory() -> Trajectory {
    let net = golden_fixture_net();
    let inputs = InputSequence::from_fn(200, 5, 0.05, |t, i| (t + 0.3 * i as f64).sin() * 0.4);
    let x0 = Vector::from_column_slice(&[0.1, -0.2, 0.3, -0.4, 0.5]);
    simulate(&x0, &inputs, &net, Activation::Relu, Method::Rk4).unwrap()
}

fn golden_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden/trajectory_small.csv")
}

/// Regenerates the recorded fixture; run manually with
/// `cargo test --test contraction_dynamics bless_golden -- --ignored`.
#[test]
#[ignore]
fn bless_golden_trajectory() {
    let traj = golden_fixture_trajectory();
    std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).unwrap();
    std::fs::write(golden_path(), buf).unwrap();
}

#[test]
fn golden_trajectory_replays_exactly() {
    let recorded = Trajectory::read_csv(
        &std::fs::read_to_string(golden_path()).expect("golden fixture present"),
    )
    .unwrap();
    let fresh = golden_fixture_trajectory();
    assert_eq!(recorded.times.len(), fresh.times.len());
    for (a, b) in recorded.states.iter().zip(&fresh.states) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "replay diverged from recording");
        }
    }
}
