//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::time::{Duration, Instant};

use fedeve::data::{gen_synthetic, heterogeneity, partition_dirichlet, subset_distribution_gap};
use fedeve::drift::{normality_diagnostic, subset_variance_bruteforce, subset_variance_closed_form};
use fedeve::experiment::{mask_keys, parse_config, GdOracle, Simulator};
use fedeve::model::{forward_loss, init_params, loss_and_grad, Batch, ModelSpec};
use fedeve::seed;
use fedeve::server::{fuse_gaussians, fused_variance, kalman_gain, DriftEstimates, FedEveState};
use fedeve::ParamVector;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// shared desk-scale setup for the training criteria

const SEEDS: u64 = 5;
const ROUNDS: usize = 300;

fn desk_config(method: &str, isolation: &str, alpha: f64, seed: u64, extra: &str) -> String {
    format!(
        r#"{{
            "dataset": {{"synthetic": {{"n_classes": 10, "input_dim": 20, "per_class": 500, "separation": 2.5, "seed": 1}}}},
            "partition": {{"dirichlet": {{"alpha": {alpha}}}}},
            "drift_isolation": "{isolation}",
            "n_clients": 100, "clients_per_round": 10, "rounds": {ROUNDS},
            "method": "{method}",
            "local": {{"eta_l": 0.5, "epochs": 3, "batch_size": 20}},
            "eval_every": {ROUNDS}, "seed": {seed}{extra}
        }}"#
    )
}

fn final_accuracy(text: &str) -> f64 {
    let mut sim = Simulator::new(parse_config(text).unwrap()).unwrap();
    let logs = sim.run().unwrap();
    100.0 * logs.last().unwrap().acc.unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------

fn simpson_weight(i: usize, n: usize) -> f64 {
    if i == 0 || i == n {
        1.0
    } else if i % 2 == 1 {
        4.0
    } else {
        2.0
    }
}

/// Product of two Gaussian densities integrated on a fine grid (Simpson).
fn grid_fuse(mu1: f64, s1: f64, mu2: f64, s2: f64) -> (f64, f64) {
    let spread = s1.max(s2).sqrt();
    let lo = mu1.min(mu2) - 12.0 * spread;
    let hi = mu1.max(mu2) + 12.0 * spread;
    let n = 400_000; // even
    let h = (hi - lo) / n as f64;
    let log_p = |x: f64| -(x - mu1).powi(2) / (2.0 * s1) - (x - mu2).powi(2) / (2.0 * s2);
    let peak = (0..=n).map(|i| log_p(lo + i as f64 * h)).fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut m1) = (0.0, 0.0);
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let p = simpson_weight(i, n) * (log_p(x) - peak).exp();
        z += p;
        m1 += p * x;
    }
    let mean = m1 / z;
    // central second moment, recomputed around the mean to avoid cancellation
    let mut var = 0.0;
    for i in 0..=n {
        let x = lo + i as f64 * h;
        var += simpson_weight(i, n) * (log_p(x) - peak).exp() * (x - mean) * (x - mean);
    }
    (mean, var / z)
}

fn criterion_1() -> Outcome {
    let mut rng = seed::rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let mu1 = rng.random_range(-5.0..5.0);
        let mu2 = rng.random_range(-5.0..5.0);
        let s1 = 10f64.powf(rng.random_range(-1.0..0.7));
        let s2 = 10f64.powf(rng.random_range(-1.0..0.7));
        let (mean, var) = fuse_gaussians(mu1, s1, mu2, s2).unwrap();
        let (gm, gv) = grid_fuse(mu1, s1, mu2, s2);
        // mean error is measured against max(|mean|, std) so means near 0 stay meaningful
        let mean_err = (mean - gm).abs() / mean.abs().max(var.sqrt());
        let var_err = (var - gv).abs() / var;
        worst = worst.max(mean_err).max(var_err);
    }
    outcome(worst < 1e-6, format!("50 pairs, worst relative error {worst:.2e} (tol 1e-6)"))
}

fn criterion_2() -> Outcome {
    let mut rng = seed::rng(202);
    let mut violations = 0;
    let mut mismatches = 0;
    let mut literal_differs = 0;
    for _ in 0..10_000 {
        let prior = 10f64.powf(rng.random_range(-12.0..4.0));
        let sigma_r2 = 10f64.powf(rng.random_range(-12.0..4.0));
        // oracle: direct product-of-Gaussians variance
        let expected = prior * sigma_r2 / (prior + sigma_r2);
        let fused = fused_variance(prior, sigma_r2).unwrap();
        if fused > prior.min(sigma_r2) {
            violations += 1;
        }
        // the filter's posterior (1 − G)·σ̂² after one observe step from σ² = 0
        let mut state = FedEveState::new(ParamVector::zeros(1), 1.0);
        let upd = ParamVector::from(vec![0.5]);
        state
            .observe_update(&upd, DriftEstimates { sigma_q2: prior, sigma_r2 }, None)
            .unwrap();
        if state.sigma2.to_bits() != expected.to_bits() || fused.to_bits() != expected.to_bits() {
            mismatches += 1;
        }
        let g = kalman_gain(prior, sigma_r2).unwrap();
        let literal = (1.0 - g) * prior;
        if literal != expected {
            literal_differs += 1;
        }
    }
    outcome(
        violations == 0 && mismatches == 0,
        format!(
            "10^4 instances: {violations} bound violations, {mismatches} inexact posteriors \
             (evaluating (1-G)*s literally would differ in {literal_differs})"
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = seed::rng(303);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=10);
        let s = rng.random_range(1..=n);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        // population variance with N − 1 denominator
        let mu = values.iter().sum::<f64>() / n as f64;
        let var_n1 = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let formula = var_n1 / s as f64 * (1.0 - s as f64 / n as f64);
        let brute = subset_variance_bruteforce(&values, s).unwrap();
        let closed = subset_variance_closed_form(&values, s).unwrap();
        worst = worst.max((brute - formula).abs()).max((closed - formula).abs());
    }
    outcome(worst <= 1e-10, format!("100 instances, worst |diff| {worst:.2e} (tol 1e-10)"))
}

fn criterion_4() -> Outcome {
    let data = gen_synthetic(10, 4, 300, 1.0, 404).unwrap();
    let plan = partition_dirichlet(&data, 100, 0.3, 404).unwrap();
    let h = heterogeneity(&plan);
    let mut rng = seed::rng(405);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for s in [2usize, 5, 10] {
        let mc: f64 = (0..5000)
            .map(|_| {
                let clients: Vec<usize> = (0..s).map(|_| rng.random_range(0..100)).collect();
                subset_distribution_gap(&plan, &clients)
            })
            .sum::<f64>()
            / 5000.0;
        let rel = (mc / (h / s as f64) - 1.0).abs();
        worst = worst.max(rel);
        parts.push(format!("|S|={s}: {:+.1}%", 100.0 * (mc / (h / s as f64) - 1.0)));
    }
    outcome(worst <= 0.10, format!("H={h:.4}; {} (tol ±10%)", parts.join(", ")))
}

/// Central differences of the loss, taken coordinate by coordinate.
fn numeric_grad(spec: &ModelSpec, w: &ParamVector, batch: &Batch<'_>) -> Vec<f64> {
    let eps = 1e-5;
    (0..w.len())
        .map(|i| {
            let mut plus = w.clone();
            plus[i] += eps;
            let mut minus = w.clone();
            minus[i] -= eps;
            (forward_loss(spec, &plus, batch).unwrap() - forward_loss(spec, &minus, batch).unwrap()) / (2.0 * eps)
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (m, make) in [
        ModelSpec::logistic as fn(usize, usize) -> ModelSpec,
        |d, c| ModelSpec::mlp(d, 6, c),
    ]
    .iter()
    .enumerate()
    {
        for inst in 0..20u64 {
            let seed = 500 + 100 * m as u64 + inst;
            let (d, c) = (3 + (inst as usize % 4), 2 + (inst as usize % 3));
            let data = gen_synthetic(c, d, 4, 1.5, seed).unwrap();
            let spec = make(d, c).with_init_scale(0.8);
            let w = init_params(&spec, seed).unwrap();
            // non-zero biases too
            let mut w = w;
            let mut rng = seed::rng(seed);
            for v in w.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
            let batch = Batch::full(&data).unwrap();
            let (_, g) = loss_and_grad(&spec, &w, &batch).unwrap();
            let num = numeric_grad(&spec, &w, &batch);
            let diff = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = g.norm().max(num.iter().map(|v| v * v).sum::<f64>().sqrt()).max(1e-12);
            worst = worst.max(diff / scale);
            count += 1;
        }
    }
    outcome(worst < 1e-5, format!("{count} instances (logistic + mlp), worst relative error {worst:.2e} (tol 1e-5)"))
}

fn criterion_6() -> Outcome {
    let text = r#"{
        "dataset": {"synthetic": {"n_classes": 10, "input_dim": 20, "per_class": 100, "separation": 2.0, "seed": 3}},
        "partition": "iid", "drift_isolation": "none",
        "n_clients": 1, "clients_per_round": 1, "rounds": 100,
        "method": "fedavg", "server": {"eta_g": 1.0},
        "local": {"eta_l": 0.5, "epochs": 1, "batch_size": 1000000},
        "model": {"kind": "mlp", "input_dim": 20, "hidden_dim": 16, "n_classes": 10, "init_scale": 0.3},
        "eval_every": 1000, "seed": 6
    }"#;
    let config = parse_config(text).unwrap();
    let mut sim = Simulator::new(config.clone()).unwrap();
    // reference trajectory: plain full-batch gradient descent written out here
    let spec = sim.spec().clone();
    let data = sim.train_data().clone();
    let mut w = sim.params().clone();
    let mut first_diff = None;
    for t in 0..100 {
        sim.step().unwrap();
        let batch = Batch::full(&data).unwrap();
        let (_, g) = loss_and_grad(&spec, &w, &batch).unwrap();
        for (wi, gi) in w.iter_mut().zip(g.iter()) {
            *wi -= 0.5 * gi;
        }
        if first_diff.is_none() && !sim.params().bit_eq(&w) {
            first_diff = Some(t);
        }
    }
    // the library's own GD driver must agree as well
    let mut oracle = GdOracle::new(&config).unwrap();
    for _ in 0..100 {
        oracle.step().unwrap();
    }
    let oracle_ok = oracle.params().bit_eq(&w);
    match first_diff {
        None if oracle_ok => outcome(true, "100 steps bit-identical (simulator, GD loop, gd oracle)"),
        None => outcome(false, "simulator matches the GD loop but the gd oracle does not"),
        Some(t) => outcome(false, format!("trajectories differ from step {t}")),
    }
}

fn round_lines(text: &str) -> (String, ParamVector) {
    let mut sim = Simulator::new(parse_config(text).unwrap()).unwrap();
    let mut out = Vec::new();
    sim.run_to(&mut out).unwrap();
    let jsonl = String::from_utf8(out).unwrap();
    let rounds: Vec<&str> = jsonl.lines().filter(|l| !l.contains("\"summary\"")).collect();
    let masked = mask_keys(&rounds.join("\n"), &["ms", "g_kal", "sigma_q2", "sigma_r2"]);
    (masked, sim.params().clone())
}

fn criterion_7() -> Outcome {
    let base = |method: &str, extra: &str| {
        format!(
            r#"{{
            "dataset": {{"synthetic": {{"n_classes": 10, "input_dim": 20, "per_class": 200, "separation": 2.5, "seed": 1}}}},
            "partition": {{"dirichlet": {{"alpha": 0.1}}}},
            "n_clients": 50, "clients_per_round": 10, "rounds": 50,
            "method": "{method}", "local": {{"eta_l": 0.3, "epochs": 2, "batch_size": 10}},
            "period_drift_every": 5, "seed": 77{extra}
        }}"#
        )
    };
    let (fedavg, w_avg) = round_lines(&base("fedavg", ""));
    let (fedeve, w_eve) = round_lines(&base(
        "fedeve",
        r#", "server": {"force_gain": 1.0, "broadcast_prediction": false}"#,
    ));
    let lines = fedavg.lines().count();
    if fedavg == fedeve && w_avg.bit_eq(&w_eve) {
        outcome(true, format!("{lines} round records and final parameters byte-identical"))
    } else if fedavg == fedeve {
        outcome(false, "records match but final parameters differ")
    } else {
        let first = fedavg.lines().zip(fedeve.lines()).position(|(a, b)| a != b);
        outcome(false, format!("records differ first at round {first:?}"))
    }
}

fn criterion_8() -> Outcome {
    let modes = ["none", "client_only", "period_only", "both"];
    let medians: Vec<f64> = modes
        .iter()
        .map(|mode| {
            let accs: Vec<f64> = (0..SEEDS)
                .map(|s| final_accuracy(&desk_config("fedavg", mode, 0.01, s, "")))
                .collect();
            median(accs)
        })
        .collect();
    let (none, client, period, both) = (medians[0], medians[1], medians[2], medians[3]);
    let pass = none >= client && client > period && period >= both && client - period >= 2.0;
    outcome(
        pass,
        format!(
            "medians none {none:.2} / client_only {client:.2} / period_only {period:.2} / both {both:.2}; \
             client_only - period_only = {:.2} (need >= 2)",
            client - period
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for alpha in [1.0, 0.1, 0.01] {
        let acc = |method: &str| {
            let accs: Vec<f64> = (0..SEEDS)
                .map(|s| final_accuracy(&desk_config(method, "both", alpha, s, "")))
                .collect();
            mean(&accs)
        };
        let (avg, avgm, eve) = (acc("fedavg"), acc("fedavgm"), acc("fedeve"));
        pass &= eve >= avg;
        if alpha == 0.01 {
            pass &= eve - avg >= 0.5 && eve >= avgm - 0.3;
        }
        parts.push(format!("a={alpha}: fedeve {eve:.2} fedavg {avg:.2} fedavgm {avgm:.2}"));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_10() -> Outcome {
    let gains = |alpha: f64| {
        let mut all = Vec::new();
        for s in 0..3 {
            let mut sim = Simulator::new(parse_config(&desk_config("fedeve", "both", alpha, s, "")).unwrap()).unwrap();
            all.extend(sim.run().unwrap().iter().map(|l| l.g_kal.unwrap()));
        }
        median(all)
    };
    let (skewed, iid) = (gains(0.01), gains(1e6));
    outcome(skewed > iid, format!("median G: alpha=0.01 {skewed:.4}, alpha=1e6 {iid:.4}"))
}

fn criterion_11() -> Outcome {
    let mut rng = seed::rng(1111);
    let normal: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let exp = Exp::new(1.0).unwrap();
    let skewed: Vec<f64> = (0..100_000).map(|_| exp.sample(&mut rng)).collect();
    let a = normality_diagnostic(&normal).unwrap();
    let b = normality_diagnostic(&skewed).unwrap();
    let pass = a.skewness.abs() < 0.03 && a.excess_kurtosis.abs() < 0.06 && b.jb_stat > 1000.0;
    outcome(
        pass,
        format!(
            "normal: skew {:+.4}, ex.kurt {:+.4}; exponential: JB {:.0}",
            a.skewness, a.excess_kurtosis, b.jb_stat
        ),
    )
}

fn criterion_12() -> Outcome {
    let mut mismatched = Vec::new();
    for method in ["fedavg", "fedavgm", "fedeve"] {
        for s in 0..SEEDS {
            let text = desk_config(method, "both", 0.01, s, "");
            let run = |threads: Option<usize>| {
                let mut sim = Simulator::new(parse_config(&text).unwrap()).unwrap();
                if let Some(n) = threads {
                    sim = sim.with_threads(n).unwrap();
                }
                let mut out = Vec::new();
                sim.run_to(&mut out).unwrap();
                fedeve::experiment::mask_timing(&String::from_utf8(out).unwrap())
            };
            let a = run(Some(1));
            let b = run(Some(4));
            let c = run(None);
            if a != b || a != c {
                mismatched.push(format!("{method}/seed{s}"));
            }
        }
    }
    outcome(
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("{} runs identical with 1, 4 and default worker threads", 3 * SEEDS)
        } else {
            format!("differences in {}", mismatched.join(", "))
        },
    )
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 12] = [
        ("1  gaussian fusion vs grid integration", Duration::from_secs(5), criterion_1),
        ("2  variance reduction and exact posterior", Duration::from_secs(1), criterion_2),
        ("3  subset sampling variance identity", Duration::from_secs(5), criterion_3),
        ("4  heterogeneity law E[D_S] = H/|S|", Duration::from_secs(30), criterion_4),
        ("5  analytic vs finite-difference gradients", Duration::from_secs(10), criterion_5),
        ("6  single-client fedavg equals centralized GD", Duration::from_secs(5), criterion_6),
        ("7  fedeve with G=1 reduces to fedavg", Duration::from_secs(30), criterion_7),
        ("8  drift isolation ordering", Duration::from_secs(600), criterion_8),
        ("9  method ordering across alpha", Duration::from_secs(1800), criterion_9),
        ("10 kalman gain grows with heterogeneity", Duration::from_secs(600), criterion_10),
        ("11 normality diagnostic sanity", Duration::from_secs(5), criterion_11),
        ("12 determinism across worker threads", Duration::from_secs(1800), criterion_12),
    ];
    let mut failed = 0;
    for (name, budget, run) in criteria {
        let start = Instant::now();
        let result = run();
        let took = start.elapsed();
        let in_time = took <= budget;
        let pass = result.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] criterion {name}: {} ({:.2}s{})",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            took.as_secs_f64(),
            if in_time { String::new() } else { format!(", over {}s budget", budget.as_secs()) }
        );
    }
    println!("acceptance: {} of 12 criteria passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
