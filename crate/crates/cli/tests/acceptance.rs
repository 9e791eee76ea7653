//! Acceptance report: one PASS/FAIL line per primary criterion.
//!
//! Runs as a plain binary (`harness = false`) so the report is always shown.
//! Training five agents for 300 episodes dominates the runtime.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use teleslice_core::channel::{
    compute_rates, sample_channel, slice_labels, validate_allocation, LinkBudget, PrbAllocation,
};
use teleslice_core::config::{Config, ControlConfig, NetworkConfig, QueueConfig};
use teleslice_core::control::{synthesize_gain, GainBook, Plant};
use teleslice_core::drl::{train, TrainedAgents};
use teleslice_core::objective::{calibrated_root_rate, sample_delay, violation_probability};
use teleslice_core::queues::{arrival_pmf, sample_urllc_arrivals, step_queues, SliceQueues};
use teleslice_core::rng::{stream, Stream};
use teleslice_core::robot::{di_value, DiComponents};
use teleslice_core::sim::experiments::{compare_policies, run_experiment, tracking_trial, SweepKind};
use teleslice_core::sim::{EpisodeTrace, PolicyKind};

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn rates_match_reference() -> (bool, String) {
    let start = Instant::now();
    let mut rng = stream(101, Stream::Channel);
    let mut worst: f64 = 0.0;
    for case in 0..1000u64 {
        let n = rng.random_range(1..=6);
        let k = rng.random_range(n..=8);
        let net = NetworkConfig {
            num_prbs: k,
            n_embb: n / 2,
            n_urllc: n - n / 2,
            bandwidth_hz: rng.random_range(1e6..20e6),
            transmit_power_dbm: rng.random_range(0.0..30.0),
            ..Default::default()
        };
        let scale = rng.random_range(0.2..3.0);
        let ch = sample_channel(&mut rng, n, k, scale, case);
        let mut owners: Vec<usize> = (0..k).map(|j| if j < n { j } else { rng.random_range(0..n) }).collect();
        for j in (1..k).rev() {
            owners.swap(j, rng.random_range(0..=j));
        }
        let alloc = PrbAllocation::from_owners(n, &owners);
        let got = compute_rates(&ch, &alloc, &LinkBudget::from_config(&net), &slice_labels(net.n_embb, net.n_urllc))
            .expect("feasible instance")
            .rates;
        // independent evaluation from the link-budget definitions
        let b = net.bandwidth_hz / k as f64;
        let p = 10f64.powf((net.transmit_power_dbm - 30.0) / 10.0);
        let s2 = 10f64.powf((net.noise_variance_dbm - 30.0) / 10.0);
        for (i, &g) in got.iter().enumerate() {
            let want: f64 = (0..k)
                .filter(|&j| owners[j] == i)
                .map(|j| b * (1.0 + p * ch.gains[[i, j]].powi(2) / s2).log2())
                .sum();
            worst = worst.max((g - want).abs() / want.abs().max(f64::MIN_POSITIVE));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (worst <= 1e-12 && secs < 5.0, format!("max relative error {worst:.2e}, {secs:.2} s"))
}

fn arrivals_normalized() -> (bool, String) {
    let mut worst: f64 = 0.0;
    for &(rate, window) in &[(0.5, 1.0), (10.0, 0.5), (50.0, 1.0), (49.0, 0.02), (100.0, 0.5), (2.0, 20.0)] {
        let s: f64 = (0..=200).map(|k| arrival_pmf(k, rate, window)).sum();
        worst = worst.max((s - 1.0).abs());
    }
    let cfg = QueueConfig::default();
    let mut rng = stream(202, Stream::Arrivals);
    let n = 100_000;
    let mean = (0..n)
        .map(|_| sample_urllc_arrivals(&mut rng, 20e6, 0.0, 1.0, &cfg).count as f64)
        .sum::<f64>()
        / n as f64;
    let want = cfg.base_arrival_rate - cfg.arrival_sensitivity * 20.0;
    let rel = (mean - want).abs() / want;
    (
        worst <= 1e-9 && rel < 0.01,
        format!("max |sum - 1| {worst:.2e}; Monte Carlo mean {mean:.3} vs {want} ({:.3}%)", rel * 100.0),
    )
}

fn queue_laws() -> (bool, String) {
    let mut rng = stream(303, Stream::Arrivals);
    let mut violations = 0;
    let mut unclamped = 0;
    for _ in 0..10_000 {
        let (nu, ne) = (rng.random_range(1..4), rng.random_range(1..4));
        let mut q = SliceQueues::new(ne, nu);
        for _ in 0..rng.random_range(1..30) {
            // eighths keep the arithmetic exact
            let draw = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.random_range(0..400) as f64 / 8.0).collect()
            };
            let (ua, ud, ea, ed) = (draw(&mut rng, nu), draw(&mut rng, nu), draw(&mut rng, ne), draw(&mut rng, ne));
            let next = step_queues(&q, &ua, &ud, &ea, &ed);
            let pairs = q.urllc.iter().zip(&next.urllc).zip(ua.iter().zip(&ud));
            let pairs = pairs.chain(q.embb.iter().zip(&next.embb).zip(ea.iter().zip(&ed)));
            for ((&before, &after), (&a, &d)) in pairs {
                let free = before + a - d;
                if after < 0.0 || (free > 0.0 && after != free) || (free <= 0.0 && after != 0.0) {
                    violations += 1;
                }
                if free > 0.0 {
                    unclamped += 1;
                }
            }
            q = next;
        }
    }
    // stability at load 0.8 on a fixed 10 Mbps link
    let cfg = QueueConfig::default();
    let tau = 0.01;
    let mean_arrivals = (cfg.base_arrival_rate - cfg.arrival_sensitivity * 10.0) * tau;
    let mut q = SliceQueues::new(0, 1);
    let mut trace = Vec::with_capacity(10_000);
    let mut arr_rng = stream(304, Stream::Arrivals);
    for _ in 0..10_000 {
        let a = sample_urllc_arrivals(&mut arr_rng, 10e6, 0.0, tau, &cfg).count as f64;
        q = step_queues(&q, &[a], &[mean_arrivals / 0.8], &[], &[]);
        trace.push(q.f());
    }
    let n = trace.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = trace.iter().sum::<f64>() / n;
    let (sxy, sxx) = trace.iter().enumerate().fold((0.0, 0.0), |(sxy, sxx), (i, &v)| {
        let dx = i as f64 - mx;
        (sxy + dx * (v - my), sxx + dx * dx)
    });
    let slope = sxy / sxx;
    let limit = 0.01 * mean_arrivals;
    (
        violations == 0 && slope.abs() < limit,
        format!("{violations} law violations over {unclamped} unclamped steps; backlog slope {slope:.2e} (limit {limit:.2e})"),
    )
}

fn dexterity_index() -> (bool, String) {
    let mut rng = stream(404, Stream::Reference);
    let mut outside = 0;
    for _ in 0..100_000 {
        let c = DiComponents {
            tracking_error: rng.random_range(0.0..50.0),
            orientation_error_deg: rng.random_range(0.0..360.0),
            curvature: rng.random_range(0.0..5.0),
        };
        let v = di_value(&c);
        if !(0.0..=1.0).contains(&v) {
            outside += 1;
        }
    }
    let anchor = |t, o, c| {
        di_value(&DiComponents {
            tracking_error: t,
            orientation_error_deg: o,
            curvature: c,
        })
    };
    let anchors = [anchor(0.0, 0.0, 0.0), anchor(10.0, 180.0, 1.0), anchor(5.0, 90.0, 0.5)];
    let exact = anchors == [1.0, 0.0, 0.5];
    (outside == 0 && exact, format!("{outside} of 1e5 outside [0,1]; anchors {anchors:?}"))
}

fn delay_tail() -> (bool, String) {
    let q = QueueConfig::default();
    let net = NetworkConfig::default();
    let mut rng = stream(505, Stream::Delays);
    let n = 1_000_000;
    let freq = |rng: &mut rand_chacha::ChaCha8Rng, r: f64| {
        (0..n).filter(|_| sample_delay(rng, r, &q) > net.delay_deadline_s).count() as f64 / n as f64
    };
    let mut worst: f64 = 0.0;
    for r in [2e6, 5e6, 8e6, 15e6] {
        worst = worst.max((freq(&mut rng, r) - violation_probability(r, &q, &net)).abs());
    }
    let root = calibrated_root_rate(&q, &net);
    let at_root = freq(&mut rng, root);
    (
        worst < 0.005 && (at_root - 0.05).abs() <= 0.005,
        format!("max |freq - tail| {worst:.4}; at root rate {:.3} Mbps frequency {at_root:.4}", root / 1e6),
    )
}

fn certificate_soundness() -> (bool, String) {
    let start = Instant::now();
    let mut certified = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = stream(seed, Stream::Init);
        let axes = rng.random_range(1..=2);
        let dt = rng.random_range(0.005..0.02);
        let mut plant = Plant::double_integrator(axes, dt, rng.random_range(0.0..0.4));
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
        let Ok(cert) = synthesize_gain(&plant, &cfg, cfg.max_delay_steps) else {
            continue;
        };
        certified += 1;
        let a_cl = plant.closed_loop(&cert.gain);
        for d in 0..=cert.max_delay {
            let x0 = DVector::from_element(n, 1.0 / (n as f64).sqrt());
            let mut hist: std::collections::VecDeque<DVector<f64>> = (0..=d).map(|_| x0.clone()).collect();
            for _ in 0..10_000 {
                let next = &a_cl * hist.back().unwrap() + &plant.ad * hist.front().unwrap();
                worst = worst.max(next.norm());
                hist.push_back(next);
                hist.pop_front();
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        certified == 50 && worst < 1e3 && secs < 60.0,
        format!("{certified}/50 plants certified, worst sup norm {worst:.3}, {secs:.1} s"),
    )
}

fn gain_adjustment(cfg: &Config, book: &GainBook) -> (bool, String) {
    let delay = 2 * cfg.control.max_delay_steps;
    let mut wins = 0;
    let (mut nominal, mut adjusted) = (0.0, 0.0);
    for seed in 0..20 {
        let t = tracking_trial(cfg, book, seed, delay, 500).expect("tracking trial");
        if t.mean_error_adjusted < t.mean_error_nominal {
            wins += 1;
        }
        nominal += t.mean_error_nominal / 20.0;
        adjusted += t.mean_error_adjusted / 20.0;
    }
    (
        wins >= 16 && adjusted < nominal,
        format!("delay {delay} steps: adjusted better on {wins}/20 seeds; mean error nominal {nominal:.4}, adjusted {adjusted:.4}"),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn convergence(cfg: &Config, book: &GainBook) -> (bool, String, TrainedAgents) {
    let mut ok_seeds = 0;
    let mut details = Vec::new();
    let mut slowest: f64 = 0.0;
    let mut first = None;
    for seed in 0..5u64 {
        let mut c = cfg.clone();
        c.drl.seed = seed;
        let start = Instant::now();
        let trained = train::train(&c, book, |_| {}).expect("training");
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let total: Vec<f64> = trained.curve.iter().map(|r| r.reward_embb + r.reward_urllc).collect();
        let g: Vec<f64> = trained.curve.iter().map(|r| r.g_mean).collect();
        let n = total.len();
        let w = 50.min(n);
        let d = (n / 10).max(1);
        let (r0, r1) = (mean(&total[..w]), mean(&total[n - w..]));
        let (g0, g1) = (mean(&g[..d]), mean(&g[n - d..]));
        if r1 > r0 && g1 < g0 {
            ok_seeds += 1;
        }
        details.push(format!("seed {seed}: reward {r0:.2}->{r1:.2}, G {g0:.1}->{g1:.1}"));
        if first.is_none() {
            first = Some(trained);
        }
    }
    (
        ok_seeds >= 4 && slowest < 900.0,
        format!("{ok_seeds}/5 seeds improve both; slowest run {slowest:.0} s; {}", details.join("; ")),
        first.expect("at least one seed"),
    )
}

fn check_allocations(traces: &[EpisodeTrace], checked: &mut usize) -> usize {
    let mut bad = 0;
    for t in traces {
        let n = t.n_embb + t.n_urllc;
        for r in &t.records {
            *checked += 1;
            let alloc = PrbAllocation::from_owners(n, &r.owners);
            if validate_allocation(&alloc, n, r.owners.len()).is_err() || r.prbs_embb + r.prbs_urllc != r.owners.len() {
                bad += 1;
            }
        }
    }
    bad
}

fn run_cli(bin: &str, dir: &Path, args: &[&str]) -> bool {
    Command::new(bin)
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism() -> (bool, String) {
    let bin = env!("CARGO_BIN_EXE_teleslice");
    let tmp = tempfile::tempdir().expect("temp dir");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let train_args = ["train", "--episodes", "5", "--seed", "7"];
    if !run_cli(bin, &a, &train_args) || !run_cli(bin, &b, &train_args) {
        return (false, "train run failed".into());
    }
    let ca = std::fs::read(a.join("checkpoint.json")).unwrap_or_default();
    let cb = std::fs::read(b.join("checkpoint.json")).unwrap_or_default();
    let ckpt = a.join("checkpoint.json");
    let ckpt = ckpt.to_str().expect("utf-8 path");
    let eval_args = ["evaluate", "--checkpoint", ckpt, "--seed", "3", "--reps", "2"];
    let (ea, eb) = (tmp.path().join("ea"), tmp.path().join("eb"));
    if !run_cli(bin, &ea, &eval_args) || !run_cli(bin, &eb, &eval_args) {
        return (false, "evaluate run failed".into());
    }
    let mut traces_equal = true;
    let mut n_traces = 0;
    for seed in [3, 4] {
        let name = format!("trace_drl_seed{seed}.csv");
        let x = std::fs::read(ea.join(&name)).unwrap_or_default();
        let y = std::fs::read(eb.join(&name)).unwrap_or_default();
        traces_equal &= !x.is_empty() && x == y;
        n_traces += 1;
    }
    (
        !ca.is_empty() && ca == cb && traces_equal,
        format!(
            "checkpoints identical: {}; {n_traces} trace CSV pairs identical: {traces_equal}",
            !ca.is_empty() && ca == cb
        ),
    )
}

fn main() {
    // `cargo test -- --list` and filters come through here too
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut report = Report { failed: 0 };
    let cfg = Config::default();
    let book = GainBook::new(&cfg.control).expect("default plant synthesizes");

    let (ok, d) = rates_match_reference();
    report.line("rate oracle", ok, d);
    let (ok, d) = arrivals_normalized();
    report.line("arrival normalization", ok, d);
    let (ok, d) = queue_laws();
    report.line("queue laws", ok, d);
    let (ok, d) = dexterity_index();
    report.line("dexterity index", ok, d);
    let (ok, d) = delay_tail();
    report.line("delay tail consistency", ok, d);
    let (ok, d) = certificate_soundness();
    report.line("certificate soundness", ok, d);
    let (ok, d) = gain_adjustment(&cfg, &book);
    report.line("gain adjustment", ok, d);
    let (ok, d, agents) = convergence(&cfg, &book);
    report.line("training convergence", ok, d);

    let mut checked = 0;
    let mut infeasible = 0;
    let seeds: Vec<u64> = (1000..1020).collect();
    let (cmp, drl_traces, pf_traces) = compare_policies(&agents, &cfg, &book, &seeds, 1).expect("comparison");
    infeasible += check_allocations(&drl_traces, &mut checked);
    infeasible += check_allocations(&pf_traces, &mut checked);
    let (vd, vp) = (cmp.drl.mean("violation_frequency"), cmp.pf.mean("violation_frequency"));
    let rel = |m: &str| (cmp.drl.mean(m) - cmp.pf.mean(m)).abs() / cmp.pf.mean(m);
    let (re, ru) = (rel("rate_embb_mbps"), rel("rate_urllc_mbps"));
    report.line(
        "DRL vs PF",
        vd <= vp && re < 0.15 && ru < 0.15,
        format!(
            "violations DRL {vd:.5} vs PF {vp:.5}; rate gap eMBB {:.1}%, URLLC {:.1}% (DRL {:.2}/{:.2} Mbps, PF {:.2}/{:.2} Mbps)",
            re * 100.0,
            ru * 100.0,
            cmp.drl.mean("rate_embb_mbps"),
            cmp.drl.mean("rate_urllc_mbps"),
            cmp.pf.mean("rate_embb_mbps"),
            cmp.pf.mean("rate_urllc_mbps")
        ),
    );

    let mut sweep = |kind: SweepKind, values: &[&str], policy: PolicyKind| {
        values
            .iter()
            .map(|v| {
                let c = kind.apply(&cfg, v).expect("sweep value");
                let b = GainBook::new(&c.control).expect("gain book");
                let agents = (policy == PolicyKind::Drl).then_some(&agents);
                let (r, traces) = run_experiment(policy, agents, &c, &b, &seeds, 1).expect("sweep point");
                infeasible += check_allocations(&traces, &mut checked);
                r
            })
            .collect::<Vec<_>>()
    };
    let ray = sweep(SweepKind::RayleighScale, &["0.5", "1.0", "1.5", "2.0"], PolicyKind::Drl);
    let di = sweep(SweepKind::DiLevel, &["low-di", "moderate-di", "high-di"], PolicyKind::Pf);
    let series = |rs: &[teleslice_core::ExperimentResult], m: &str| rs.iter().map(|r| r.mean(m)).collect::<Vec<_>>();
    let nondecreasing = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0]);
    let (e, u) = (series(&ray, "rate_embb_mbps"), series(&ray, "rate_urllc_mbps"));
    let (dis, dep) = (series(&di, "di"), series(&di, "urllc_departure_mbps"));
    let mut order: Vec<usize> = (0..dis.len()).collect();
    order.sort_by(|&a, &b| dis[a].total_cmp(&dis[b]));
    let inverse = order.windows(2).all(|w| dep[w[1]] < dep[w[0]]);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
    report.line(
        "sweep trends",
        nondecreasing(&e) && nondecreasing(&u) && inverse,
        format!(
            "Rayleigh 0.5..2.0 eMBB [{}] URLLC [{}] Mbps; DI low/moderate/high [{}] -> URLLC departures [{}] Mbps",
            fmt(&e),
            fmt(&u),
            fmt(&dis),
            fmt(&dep)
        ),
    );

    report.line(
        "feasibility",
        infeasible == 0 && checked > 0,
        format!("{infeasible} infeasible of {checked} evaluation allocations; every training step is validated before execution"),
    );

    let (ok, d) = determinism();
    report.line("determinism", ok, d);

    println!("{} of 12 primary criteria failed", report.failed);
    if report.failed > 0 {
        std::process::exit(1);
    }
}
