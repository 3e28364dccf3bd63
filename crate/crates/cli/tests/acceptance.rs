//! Acceptance criteria 1-9, one PASS/FAIL line each.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use gplar_core::checks::{
    chain_rule_suite, cg_suite, cholesky_diagonal_suite, gradient_check_instance, increases, isotropic_suite,
    jitter_iterations, kl_monte_carlo_suite, kronecker_suite, reference_training_summary, sampler_suite,
    JITTER_LEVELS,
};
use gplar_core::toy_model::REFERENCE_STEPS;
use gplar_core::Result;

const SEED: u64 = 0;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { passed, detail })
}

fn within_budget(v: Result<Verdict>, elapsed: Duration, budget: Option<Duration>) -> Verdict {
    let mut v = v.unwrap_or_else(|e| Verdict { passed: false, detail: format!("error: {e}") });
    if let Some(b) = budget {
        if elapsed > b {
            v.passed = false;
            v.detail.push_str(&format!("; over budget {:.0?}", b));
        }
    }
    v
}

fn criterion_1() -> Result<Verdict> {
    let gap = chain_rule_suite(SEED, 100)?;
    verdict(gap <= 1e-8, format!("max |chain - joint| / (1 + |joint|) = {gap:.3e} over 100 instances"))
}

fn criterion_2() -> Result<Verdict> {
    let gap = sampler_suite(SEED, &[2, 16, 64, 256], &[1, 4])?;
    verdict(gap <= 1e-8, format!("max entrywise seq/para gap = {gap:.3e}"))
}

fn criterion_3() -> Result<Verdict> {
    let gap = cholesky_diagonal_suite(SEED, 50)?;
    verdict(gap <= 1e-10, format!("max |sigma_t - chol(K)_tt| = {gap:.3e} over 50 Grams"))
}

fn criterion_4() -> Result<Verdict> {
    let z = kl_monte_carlo_suite(SEED, 20, 100_000)?;
    let iso = isotropic_suite(SEED, 20)?;
    verdict(
        z <= 3.0 && iso <= 1e-10,
        format!("worst Monte-Carlo z = {z:.3}; isotropic gap = {iso:.3e}"),
    )
}

fn criterion_5() -> Result<Verdict> {
    let err = kronecker_suite(SEED)?;
    verdict(err <= 1e-8, format!("max det / inverse relative error = {err:.3e}"))
}

fn criterion_6() -> Result<Verdict> {
    let lens = [64, 128, 256, 512];
    let err = cg_suite(SEED, &lens)?;
    let mut trend = Vec::new();
    let mut rises = 0;
    for len in lens {
        let iters = jitter_iterations(SEED, len, &JITTER_LEVELS)?;
        rises += increases(&iters);
        trend.push(format!("L={len}:{iters:?}"));
    }
    verdict(
        err <= 1e-6 && rises == 0,
        format!("max CG relative error = {err:.3e}; iterations vs jitter {}", trend.join(" ")),
    )
}

fn criterion_7() -> Result<Verdict> {
    let blocks = gradient_check_instance(SEED)?;
    let (name, worst) = blocks.iter().fold(("", 0.0_f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    verdict(
        worst <= 1e-4,
        format!("{} blocks, worst relative error {worst:.3e} ({name})", blocks.len()),
    )
}

fn criterion_8() -> Result<Verdict> {
    let s = reference_training_summary(SEED, REFERENCE_STEPS)?;
    verdict(
        s.non_finite == 0 && s.worst_smoothed_drop <= 1e-3 && s.final_gp > s.final_isotropic,
        format!(
            "non-finite = {}, worst smoothed drop = {:.3e}, final ELBO/token GP {:.4} vs isotropic {:.4}",
            s.non_finite, s.worst_smoothed_drop, s.final_gp, s.final_isotropic
        ),
    )
}

fn criterion_9() -> Result<Verdict> {
    let run = || {
        Command::new(env!("CARGO_BIN_EXE_gplar"))
            .args(["check", "--seed", &SEED.to_string()])
            .output()
            .expect("gplar binary runs")
    };
    let (a, b) = (run(), run());
    let same = a.stdout == b.stdout && !a.stdout.is_empty();
    verdict(
        same && a.status.success() && b.status.success(),
        format!(
            "{} bytes, identical = {same}, exit codes {:?} / {:?}",
            a.stdout.len(),
            a.status.code(),
            b.status.code()
        ),
    )
}

fn main() -> ExitCode {
    type Criterion = (usize, fn() -> Result<Verdict>, Option<Duration>);
    let criteria: [Criterion; 9] = [
        (1, criterion_1, Some(Duration::from_secs(5))),
        (2, criterion_2, Some(Duration::from_secs(10))),
        (3, criterion_3, None),
        (4, criterion_4, None),
        (5, criterion_5, None),
        (6, criterion_6, None),
        (7, criterion_7, None),
        (8, criterion_8, Some(Duration::from_secs(120))),
        (9, criterion_9, None),
    ];
    let mut failures = 0;
    for (id, f, budget) in criteria {
        let start = Instant::now();
        let result = f();
        let elapsed = start.elapsed();
        let v = within_budget(result, elapsed, budget);
        let status = if v.passed { "PASS" } else { "FAIL" };
        println!("criterion {id}: {status} ({:.2}s) {}", elapsed.as_secs_f64(), v.detail);
        failures += usize::from(!v.passed);
    }
    if failures == 0 {
        println!("acceptance: all 9 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
