//! End-to-end acceptance checks. Runs without the libtest harness so every
//! `criterion N: PASS|FAIL` line is printed; exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use dpbrem::accountant::PrivacyConfig;
use dpbrem::harness::{run_experiment, simulate, ExperimentConfig};
use dpbrem::verify::{
    accountant_suite, gradients_suite, momentum_suite, run_suite, secure_suite, sensitivity_suite, shamir_suite, SuiteReport,
};

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn config(name: &str, overrides: &[(&str, String)]) -> ExperimentConfig {
    let text = std::fs::read_to_string(config_path(name)).unwrap();
    ExperimentConfig::from_toml_str(&text, overrides.iter().map(|(k, v)| (format!("DPBREM__{k}"), v.clone()))).unwrap()
}

fn report(n: usize, pass: bool, detail: &str) {
    println!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

fn suite(n: usize, r: &SuiteReport, started: Instant, budget_s: f64) -> bool {
    print!("{r}");
    let secs = started.elapsed().as_secs_f64();
    let ok = r.passed() && secs < budget_s;
    let failed: Vec<&str> = r.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    let budget = if budget_s.is_finite() { format!(" of {budget_s}s") } else { String::new() };
    report(n, ok, &format!("{} checks, failed {failed:?}, {secs:.2}s{budget}", r.checks.len()));
    ok
}

fn criterion_01_accountant_golden_values() -> bool {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for (sigma, expected) in [(0.15, 1.0), (0.06, 3.0), (0.029, 8.0)] {
        // p * n = 30 dominates R / 2C = 0.5.
        let cfg = PrivacyConfig {
            rounds: 1000,
            q: 1.0,
            p: 0.05,
            n_records: 600,
            record_bound: 1.0,
            client_bound: 1.0,
            sigma,
            delta: 1e-6,
        };
        let eps = cfg.report().unwrap().epsilon;
        let rel = (eps - expected).abs() / expected;
        println!("  sigma {sigma}: epsilon {eps:.6} vs {expected} (rel {rel:.4})");
        worst = worst.max(rel);
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = worst <= 0.05 && secs < 1.0;
    report(1, ok, &format!("worst relative error {worst:.4}, tolerance 0.05, {secs:.3}s"));
    // The oracle suite pins the same formula to independently computed values.
    let pinned = accountant_suite().unwrap();
    print!("{pinned}");
    ok && pinned.passed()
}

fn criterion_02_clipping_distance() -> bool {
    let t = Instant::now();
    suite(2, &run_suite("clipping").unwrap(), t, 10.0)
}

fn criterion_03_sensitivity_brute_force() -> bool {
    let t = Instant::now();
    suite(3, &sensitivity_suite().unwrap(), t, 60.0)
}

fn criterion_04_momentum_closed_form() -> bool {
    let t = Instant::now();
    suite(4, &momentum_suite(100, 50, 3), t, f64::INFINITY)
}

fn criterion_05_gradients() -> bool {
    let t = Instant::now();
    suite(5, &gradients_suite(100, 2).unwrap(), t, f64::INFINITY)
}

fn criterion_06_shamir() -> bool {
    let t = Instant::now();
    suite(6, &shamir_suite(100, 4).unwrap(), t, f64::INFINITY)
}

fn criterion_07_secure_integrity() -> bool {
    let t = Instant::now();
    suite(7, &secure_suite(200, 100_000, 5).unwrap(), t, f64::INFINITY)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn criterion_08_robustness_ordering() -> bool {
    let started = Instant::now();
    let seeds = 1..=5u64;
    let acc = |rule: &str, byz: f64| -> f64 {
        let runs: Vec<f64> = seeds
            .clone()
            .map(|s| {
                let cfg = config(
                    "robustness.toml",
                    &[("SEED", s.to_string()), ("RULE__KIND", rule.into()), ("ATTACK__BYZ_FRACTION", byz.to_string())],
                );
                simulate(&cfg).unwrap().summary.final_accuracy
            })
            .collect();
        mean(&runs)
    };
    let brem0 = acc("dp_brem", 0.0);
    let fedsgd0 = acc("dp_fedsgd", 0.0);
    let brem_ipm = acc("dp_brem", 0.2);
    let lfh_ipm = acc("dp_lfh", 0.2);
    let secs = started.elapsed().as_secs_f64();
    let a = (brem0 - fedsgd0).abs() <= 0.02;
    let b = brem_ipm >= lfh_ipm + 0.05;
    let c = brem0 - brem_ipm <= 0.15;
    println!("  dp_brem clean {brem0:.4}, dp_fedsgd clean {fedsgd0:.4}, dp_brem ipm {brem_ipm:.4}, dp_lfh ipm {lfh_ipm:.4}");
    let ok = a && b && c && secs < 600.0;
    report(8, ok, &format!("parity {a}, beats dp_lfh {b}, drop {:.4} ok {c}, {secs:.1}s", brem0 - brem_ipm));
    ok
}

fn mean_agg_error(overrides: &[(&str, String)]) -> f64 {
    let per_seed: Vec<f64> = (1..=30u64)
        .map(|s| {
            let mut o = overrides.to_vec();
            o.push(("SEED", s.to_string()));
            let rows = simulate(&config("monotonicity.toml", &o)).unwrap().rows;
            let errs: Vec<f64> = rows.iter().filter_map(|r| r.agg_error_sq).collect();
            mean(&errs)
        })
        .collect();
    mean(&per_seed)
}

fn criterion_09_aggregation_error_monotone() -> bool {
    let started = Instant::now();
    let by_sigma: Vec<f64> =
        [0.0, 0.05, 0.1, 0.2].iter().map(|s| mean_agg_error(&[("PRIVACY__SIGMA", s.to_string())])).collect();
    // 20 clients: fractions 0, 0.1, 0.2, 0.4 give |B| = 0, 2, 4, 8.
    let by_byz: Vec<f64> =
        [0.0, 0.1, 0.2, 0.4].iter().map(|f| mean_agg_error(&[("ATTACK__BYZ_FRACTION", f.to_string())])).collect();
    let secs = started.elapsed().as_secs_f64();
    println!("  by sigma {by_sigma:?}\n  by |B| {by_byz:?}");
    let strict = by_sigma.windows(2).all(|w| w[1] > w[0]);
    let nondecreasing = by_byz.windows(2).all(|w| w[1] >= w[0]);
    let ok = strict && nondecreasing && secs < 600.0;
    report(9, ok, &format!("sigma strictly increasing {strict}, |B| nondecreasing {nondecreasing}, {secs:.1}s"));
    ok
}

fn criterion_10_determinism() -> bool {
    let mut ok = true;
    for (name, extra) in [
        ("smoke.toml", vec![]),
        ("robustness.toml", vec![("ROUNDS", "40".to_string())]),
        ("secure.toml", vec![]),
    ] {
        let mut bytes = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().unwrap();
            let mut o = extra.clone();
            o.push(("OUTPUT__DIR", dir.path().to_string_lossy().into_owned()));
            if name == "secure.toml" {
                o.push(("SECURE__TRANSCRIPT", dir.path().join("t.jsonl").to_string_lossy().into_owned()));
            }
            let (_, files) = run_experiment(&config(name, &o)).unwrap();
            bytes.push(std::fs::read(files.metrics).unwrap());
        }
        let same = bytes[0] == bytes[1];
        println!("  {name}: {} bytes, identical {same}", bytes[0].len());
        ok &= same;
    }
    report(10, ok, "metrics byte-identical across repeated runs");
    ok
}

fn main() -> ExitCode {
    let criteria: [(usize, fn() -> bool); 10] = [
        (1, criterion_01_accountant_golden_values),
        (2, criterion_02_clipping_distance),
        (3, criterion_03_sensitivity_brute_force),
        (4, criterion_04_momentum_closed_form),
        (5, criterion_05_gradients),
        (6, criterion_06_shamir),
        (7, criterion_07_secure_integrity),
        (8, criterion_08_robustness_ordering),
        (9, criterion_09_aggregation_error_monotone),
        (10, criterion_10_determinism),
    ];
    let mut failed = Vec::new();
    for (n, check) in criteria {
        let ok = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| {
            report(n, false, "panicked");
            false
        });
        if !ok {
            failed.push(n);
        }
    }
    println!("acceptance: {}/{} criteria pass; failing {failed:?}", criteria.len() - failed.len(), criteria.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
