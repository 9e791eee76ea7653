use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use teleslice_core::config::ControlConfig;
use teleslice_core::control::{adjust_gain, GainCertificate, razumikhin_feasible, synthesize_gain, Plant};
use teleslice_core::rng::{stream, Stream};

/// `x(k+1) = (A - BK) x(k) + A_d x(k - delay)` from a unit initial history.
fn simulate_sup_norm(plant: &Plant, k: &DMatrix<f64>, delay: usize, steps: usize) -> f64 {
    let a_cl = plant.closed_loop(k);
    let n = plant.n_states();
    let x0 = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut hist: std::collections::VecDeque<DVector<f64>> = (0..=delay).map(|_| x0.clone()).collect();
    let mut sup: f64 = 1.0;
    for _ in 0..steps {
        let x = hist.back().unwrap();
        let xd = hist.front().unwrap();
        let next = &a_cl * x + &plant.ad * xd;
        sup = sup.max(next.norm());
        if !sup.is_finite() {
            return f64::INFINITY;
        }
        hist.push_back(next);
        hist.pop_front();
    }
    sup
}

/// A double integrator with randomized sampling, coupling and a small
/// perturbation of the drift matrix.
fn random_plant(seed: u64) -> (Plant, ControlConfig) {
    let mut rng = stream(seed, Stream::Init);
    let axes = rng.random_range(1..=2);
    let dt = rng.random_range(0.005..0.02);
    let coupling = rng.random_range(0.0..0.4);
    let mut plant = Plant::double_integrator(axes, dt, coupling);
    let n = plant.n_states();
    for i in 0..n {
        for j in 0..n {
            plant.a[(i, j)] += rng.random_range(-0.002..0.002);
        }
    }
    let cfg = ControlConfig {
        sampling_interval_s: dt,
        max_delay_steps: rng.random_range(0..=4),
        ..Default::default()
    };
    (plant, cfg)
}

#[test]
fn certified_gains_stay_bounded_at_every_certified_delay() {
    let start = std::time::Instant::now();
    let mut certified = 0;
    for seed in 0..50 {
        let (plant, cfg) = random_plant(seed);
        let Ok(cert) = synthesize_gain(&plant, &cfg, cfg.max_delay_steps) else {
            continue;
        };
        certified += 1;
        assert!(cert.max_block_eigenvalue < 0.0);
        assert!(cert.lyap_matrix.clone().symmetric_eigenvalues().min() > 0.0);
        for d in 0..=cert.max_delay {
            let sup = simulate_sup_norm(&plant, &cert.gain, d, 10_000);
            assert!(sup < 1e3, "plant {seed}, delay {d}: sup norm {sup}");
        }
    }
    assert!(certified >= 45, "only {certified} of 50 plants certified");
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn default_plant_double_delay_adjustment_is_locally_nearest() {
    let cfg = ControlConfig::default();
    let plant = Plant::from_config(&cfg).unwrap();
    let nominal = synthesize_gain(&plant, &cfg, cfg.max_delay_steps).unwrap();
    let observed = 2 * cfg.max_delay_steps;
    let adj = adjust_gain(&plant, &nominal, observed, &cfg, Some(5)).unwrap();
    assert!(adj.distance > 0.0);
    assert!(razumikhin_feasible(&plant, &adj.adjusted, cfg.decay_rate, observed).is_ok());

    // grid axes: toward the nominal gain, and a fixed direction orthogonal to it
    let toward = &adj.adjusted - &adj.nominal;
    let d = toward.norm();
    let u1 = &toward / d;
    let probe = DMatrix::from_fn(u1.nrows(), u1.ncols(), |i, j| ((i * 7 + j * 3) as f64).sin());
    let mut u2 = &probe - &u1 * u1.dot(&probe);
    u2 /= u2.norm();
    let h = 0.05 * d;
    for i in -2i32..=2 {
        for j in -2i32..=2 {
            if i == 0 && j == 0 {
                continue;
            }
            let k = &adj.adjusted + &u1 * (i as f64 * h) + &u2 * (j as f64 * h);
            let closer = (&k - &adj.nominal).norm_squared() < adj.distance;
            let feasible = razumikhin_feasible(&plant, &k, cfg.decay_rate, observed).is_ok();
            assert!(!(closer && feasible), "grid point ({i}, {j}) is feasible and closer");
        }
    }
}

#[test]
fn adjustment_distance_is_zero_iff_nominal_already_feasible() {
    let base = ControlConfig::default();
    let plant = Plant::from_config(&base).unwrap();
    let nominal = synthesize_gain(&plant, &base, base.max_delay_steps).unwrap();
    for observed in base.max_delay_steps + 1..=base.history_steps {
        let feasible = razumikhin_feasible(&plant, &nominal.gain, base.decay_rate, observed).is_ok();
        let adj = adjust_gain(&plant, &nominal, observed, &base, None).unwrap();
        assert_eq!(adj.distance == 0.0, feasible, "delay {observed}");
    }
    // a gain certified far beyond the nominal bound needs no adjustment below it
    let strong = synthesize_gain(&plant, &base, 9).unwrap();
    let adj = adjust_gain(&plant, &recertify(&plant, &strong, &base), 5, &base, None).unwrap();
    assert_eq!(adj.distance, 0.0);
}

/// Re-certify a gain at the nominal delay bound so it can act as a nominal.
fn recertify(plant: &Plant, cert: &GainCertificate, cfg: &ControlConfig) -> GainCertificate {
    razumikhin_feasible(plant, &cert.gain, cfg.decay_rate, cfg.max_delay_steps).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn margin_never_improves_with_a_longer_delay_bound(seed in 0u64..10_000) {
        let (plant, cfg) = random_plant(seed);
        let Ok(cert) = synthesize_gain(&plant, &cfg, 2) else { return Ok(()) };
        let margin = |t: usize| razumikhin_feasible(&plant, &cert.gain, cfg.decay_rate, t)
            .map(|c| c.margin)
            .unwrap_or_else(|e| e.margin);
        let mut prev = margin(0);
        for t in 1..=8 {
            let m = margin(t);
            prop_assert!(m >= prev - 1e-9 * prev.abs().max(1.0), "T={}: {} after {}", t, m, prev);
            prev = m;
        }
    }
}
