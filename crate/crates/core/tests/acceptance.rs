//! Acceptance suite: every criterion at its stated tolerance, one PASS/FAIL
//! line each. Run with `cargo test --test acceptance`.
//!
//! The last criterion reruns every experiment with the same seeds and
//! compares the rendered CSVs byte for byte.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use postbc::experiments::*;
use postbc::report::{to_csv, MetricRow};

struct Outcome {
    passed: bool,
    detail: String,
    /// Every CSV the criterion produced, for the determinism rerun.
    csv: Vec<String>,
}

fn summarize(checks: &[MetricRow]) -> String {
    checks
        .iter()
        .filter(|c| c.passed.is_some())
        .map(|c| format!("{}={:.4}", c.metric, c.value))
        .collect::<Vec<_>>()
        .join(" ")
}

fn from_checks(checks: &[MetricRow], csv: Vec<String>) -> Outcome {
    Outcome { passed: all_passed(checks), detail: summarize(checks), csv }
}

fn c1_c2() -> postbc::Result<(Outcome, Outcome)> {
    let res = prop1_experiment(&Prop1Config::default())?;
    let csv = vec![to_csv(&res.studies), to_csv(&res.metrics), to_csv(&res.finetune), to_csv(&res.checks)];
    let c1: Vec<MetricRow> =
        res.checks.iter().filter(|c| c.metric.starts_with("bc_collapsed_minus")).cloned().collect();
    let c2: Vec<MetricRow> =
        res.checks.iter().filter(|c| !c.metric.starts_with("bc_collapsed_minus")).cloned().collect();
    Ok((from_checks(&c1, csv.clone()), from_checks(&c2, csv)))
}

fn c3_c4() -> postbc::Result<(Outcome, Outcome)> {
    let cfg = TabularSuiteConfig::default();
    let rows = tabular_suite(&cfg)?;
    let csv = vec![to_csv(&rows)];
    let cov = suite_coverage_checks(&rows);
    let sub = suite_subopt_checks(&rows, &cfg.ts)?;
    Ok((from_checks(&cov, csv.clone()), from_checks(&sub, csv)))
}

fn c5() -> postbc::Result<Outcome> {
    let (rows, checks) = prop2_experiment(&Prop2Config::default())?;
    Ok(from_checks(&checks, vec![to_csv(&rows), to_csv(&checks)]))
}

fn c6() -> postbc::Result<Outcome> {
    let (rows, checks) = thm2_experiment(&Thm2Config::default())?;
    Ok(from_checks(&checks, vec![to_csv(&rows), to_csv(&checks)]))
}

fn c7() -> postbc::Result<Outcome> {
    let rows = gaussian_check(&GaussianCheckConfig::default())?;
    let opt: Vec<_> = rows.iter().filter(|r| r.sampler == "optimization").collect();
    let detail = opt.iter().map(|r| format!("{}={:.4}", r.quantity, r.empirical)).collect::<Vec<_>>().join(" ");
    Ok(Outcome { passed: opt.iter().all(|r| r.passed), detail, csv: vec![to_csv(&rows)] })
}

fn c8() -> postbc::Result<Outcome> {
    let rows = ensemble_check(&EnsembleCheckConfig::default())?;
    let frob: Vec<MetricRow> = rows.iter().filter(|r| r.metric == "cov_frobenius_rel_err").cloned().collect();
    Ok(from_checks(&frob, vec![to_csv(&rows)]))
}

fn c9() -> postbc::Result<Outcome> {
    let rows = gradient_check_default(0)?;
    let worst = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    Ok(Outcome {
        passed: rows.len() == 30 && rows.iter().all(|r| r.passed),
        detail: format!("coords={} max_rel_err={worst:.2e}", rows.len()),
        csv: vec![to_csv(&rows)],
    })
}

fn c10() -> postbc::Result<Outcome> {
    let res = fig1_experiment(&Fig1Config::default())?;
    Ok(from_checks(&res.checks, vec![to_csv(&res.cov), to_csv(&res.samples), to_csv(&res.metrics)]))
}

fn c11() -> postbc::Result<Outcome> {
    let res = bon_experiment(&BonConfig::default())?;
    Ok(from_checks(&res.checks, vec![to_csv(&res.rows)]))
}

type Runner = fn() -> postbc::Result<Vec<Outcome>>;

fn runners() -> Vec<(&'static [&'static str], &'static [u64], Runner)> {
    // (criterion labels, runtime budgets in seconds, runner)
    vec![
        (&["1 prop1 failure rate", "2 prop1 finetuning impossibility"], &[5, 30], || c1_c2().map(|(a, b)| vec![a, b])),
        (&["3 thm1 coverage", "4 thm1 suboptimality"], &[120, 120], || c3_c4().map(|(a, b)| vec![a, b])),
        (&["5 prop2 tradeoff"], &[60], || c5().map(|a| vec![a])),
        (&["6 thm2 scaling"], &[60], || c6().map(|a| vec![a])),
        (&["7 gaussian sampler"], &[10], || c7().map(|a| vec![a])),
        (&["8 ensemble calibration"], &[30], || c8().map(|a| vec![a])),
        (&["9 gradient correctness"], &[10], || c9().map(|a| vec![a])),
        (&["10 fork figure behavior"], &[300], || c10().map(|a| vec![a])),
        (&["11 best-of-n improvement"], &[600], || c11().map(|a| vec![a])),
    ]
}

fn main() -> ExitCode {
    // Let `cargo test -- --list` and filters behave sensibly.
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }

    let mut all_ok = true;
    let mut first_csv: Vec<String> = Vec::new();
    for (labels, budgets, run) in runners() {
        let start = Instant::now();
        let outcomes = run();
        let elapsed = start.elapsed();
        match outcomes {
            Ok(outcomes) => {
                // Criteria sharing one run split its wall time evenly.
                let share = elapsed / labels.len() as u32;
                for ((label, budget), o) in labels.iter().zip(budgets.iter()).zip(outcomes) {
                    let in_time = share <= Duration::from_secs(*budget);
                    let ok = o.passed && in_time;
                    all_ok &= ok;
                    println!(
                        "criterion {label}: {} ({:.1}s, budget {budget}s{}) {}",
                        if ok { "PASS" } else { "FAIL" },
                        share.as_secs_f64(),
                        if in_time { "" } else { ", over budget" },
                        o.detail
                    );
                    first_csv.extend(o.csv);
                }
            }
            Err(e) => {
                all_ok = false;
                for label in labels.iter() {
                    println!("criterion {label}: FAIL (error: {e})");
                }
            }
        }
    }

    let start = Instant::now();
    let mut second_csv: Vec<String> = Vec::new();
    let mut rerun_ok = true;
    for (_, _, run) in runners() {
        match run() {
            Ok(outcomes) => second_csv.extend(outcomes.into_iter().flat_map(|o| o.csv)),
            Err(_) => rerun_ok = false,
        }
    }
    let identical = rerun_ok && first_csv == second_csv;
    let bytes: usize = first_csv.iter().map(String::len).sum();
    all_ok &= identical;
    println!(
        "criterion 12 determinism: {} ({:.1}s) csv_files={} bytes={bytes}",
        if identical { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64(),
        first_csv.len()
    );

    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
