//! Independent oracles and the invariant suite run by `gplar check`.
//!
//! Every check compares an implementation path against a route that does
//! not share its code: explicit Kronecker materialization, Schur complements
//! versus the Cholesky diagonal, central finite differences, Monte-Carlo
//! expectations.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;

use crate::iterative::{cg_solve, CgConfig, DenseOperator, Preconditioner};
use crate::kernels::{build_gram, GramMatrix, KernelFamily, KernelSpec, TimeGrid};
use crate::latent_prior::{chain_logdensity, conditional_law, joint_logdensity, LatentTrajectory};
use crate::linalg::{kron_identities_check, solve_chol_vec};
use crate::samplers::{sample_parallel, sample_sequential, NoiseBlock};
use crate::toy_model::{elbo_and_grads, evaluate, param_blocks, reference_run, StepMetrics, ToyParams, REFERENCE_STEPS};
use crate::variational::{kl_isotropic_special_case, kl_monte_carlo, kl_to_gp_prior, DiagonalPosterior, KlCap};
use crate::{rng, Result};

/// Random RBF or Matérn spec: `ℓ ∈ [0.05, 1]`, `σ² ∈ [0.5, 2]`,
/// `nugget ∈ [0, 0.05]`, default jitter.
pub fn random_kernel_spec<R: Rng + ?Sized>(g: &mut R) -> KernelSpec<f64> {
    let family = match g.random_range(0..4) {
        0 => KernelFamily::Rbf,
        1 => KernelFamily::Matern12,
        2 => KernelFamily::Matern32,
        _ => KernelFamily::Matern52,
    };
    let ell = g.random_range(0.05..1.0);
    let var = g.random_range(0.5..2.0);
    let nugget = g.random_range(0.0..0.05);
    KernelSpec::new(family, ell, var).expect("ranges are valid").with_nugget(nugget)
}

/// Gram matrix of a random spec on a random strictly increasing grid.
pub fn random_gram<R: Rng + ?Sized>(g: &mut R, len: usize) -> Result<GramMatrix<f64>> {
    let spec = random_kernel_spec(g);
    let mut times: Vec<f64> = (0..len).map(|_| g.random_range(0.0..1.0)).collect();
    times.sort_by(f64::total_cmp);
    // spread duplicates and keep everything inside (0, 1]
    let times = times.iter().enumerate().map(|(i, t)| (t + i as f64 + 1.0) / (len as f64 + 1.0)).collect();
    build_gram(&spec, &TimeGrid::new(times)?)
}

/// `|chain - joint| / (1 + |joint|)`.
pub fn chain_rule_gap(gram: &GramMatrix<f64>, traj: &LatentTrajectory<f64>) -> Result<f64> {
    let chain = chain_logdensity(gram, traj)?;
    let joint = joint_logdensity(gram, traj)?;
    Ok((chain - joint).abs() / (1.0 + joint.abs()))
}

/// Max entrywise difference between sequential and Cholesky samples on one
/// noise block.
pub fn sampler_gap(gram: &GramMatrix<f64>, d_z: usize, noise: &NoiseBlock<f64>) -> Result<f64> {
    let a = sample_sequential(gram, d_z, noise)?;
    let b = sample_parallel(gram, d_z, noise)?;
    Ok((a.z() - b.z()).iter().fold(0.0, |m, d| m.max(d.abs())))
}

/// Max over `t` of `|sqrt(Schur complement) - chol(K)_tt|`.
pub fn cholesky_diagonal_gap(gram: &GramMatrix<f64>) -> Result<f64> {
    let diag = gram.chol().diag();
    let mut worst = 0.0_f64;
    for t in 1..=gram.len() {
        let law = conditional_law(gram, t)?;
        worst = worst.max((law.std_dev() - diag[t - 1]).abs());
    }
    Ok(worst)
}

/// Random diagonal posterior with `μ ~ N(0, 1)`, `logvar ~ U(-1.5, 0.5)`.
pub fn random_posterior<R: Rng + ?Sized>(g: &mut R, len: usize, d_z: usize) -> DiagonalPosterior<f64> {
    let mu = rng::standard_normal_matrix(g, len, d_z);
    let lv = Array2::from_shape_simple_fn((len, d_z), || g.random_range(-1.5..0.5));
    DiagonalPosterior::new(mu, lv).expect("finite by construction")
}

/// Closed-form KL, its Monte-Carlo estimate and the standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlComparison {
    pub closed_form: f64,
    pub monte_carlo: f64,
    pub stderr: f64,
}

impl KlComparison {
    pub fn z_score(&self) -> f64 {
        (self.closed_form - self.monte_carlo).abs() / self.stderr
    }
}

pub fn kl_vs_monte_carlo<R: Rng + ?Sized>(
    q: &DiagonalPosterior<f64>,
    gram: &GramMatrix<f64>,
    n_samples: usize,
    g: &mut R,
) -> Result<KlComparison> {
    let closed_form = kl_to_gp_prior(q, gram)?;
    let (monte_carlo, stderr) = kl_monte_carlo(q, gram, n_samples, g)?;
    Ok(KlComparison { closed_form, monte_carlo, stderr })
}

/// `|KL(q, σ² I) via Cholesky - isotropic closed form|`.
pub fn isotropic_gap(q: &DiagonalPosterior<f64>, sigma2: f64) -> Result<f64> {
    let g = GramMatrix::isotropic(q.len(), sigma2)?;
    Ok((kl_to_gp_prior(q, &g)? - kl_isotropic_special_case(q, sigma2)?).abs())
}

/// `||x_cg - x_chol|| / ||x_chol||` and the CG iteration count.
pub fn cg_vs_cholesky(gram: &GramMatrix<f64>, b: &Array1<f64>, cfg: &CgConfig<f64>) -> Result<(f64, usize)> {
    let (x, report) = cg_solve(&DenseOperator(gram.matrix().view()), b.view(), cfg)?;
    let exact = solve_chol_vec(gram.chol(), b.view())?;
    let err = (&x - &exact).mapv(|v| v * v).sum().sqrt() / exact.mapv(|v| v * v).sum().sqrt();
    Ok((err, report.iterations))
}

/// Finite-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Worst relative error `|a - n| / max(|a|, |n|, GRAD_FLOOR)` per parameter
/// block between the analytic gradient `a` and central differences `n`.
pub fn gradient_check(
    params: &ToyParams<f64>,
    xs: &[ArrayView2<f64>],
    eps: &[Array2<f64>],
    grid: &TimeGrid<f64>,
    beta: f64,
    cap: KlCap<f64>,
) -> Result<Vec<(&'static str, f64)>> {
    let (_, grads) = elbo_and_grads(params, xs, eps, grid, beta, cap)?;
    let analytic = grads.to_flat();
    let base = params.to_flat();
    let loss_at = |flat: &[f64]| -> Result<f64> {
        Ok(evaluate(&params.with_flat(flat)?, xs, eps, grid, beta, cap)?.loss)
    };
    let mut out = Vec::new();
    let mut offset = 0;
    for (name, size) in param_blocks(params.d_x(), params.d_z()) {
        let mut worst = 0.0_f64;
        for i in offset..offset + size {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += FD_STEP;
            minus[i] -= FD_STEP;
            let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * FD_STEP);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
        }
        out.push((name, worst));
        offset += size;
    }
    Ok(out)
}

/// Small gradient-check instance: `L = 6`, `d_z = 2`, `d_x = 3`, two
/// sequences, RBF prior with nugget, `β = 0.7`, no cap.
pub fn gradient_check_instance(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let (len, d_z, d_x) = (6, 2, 3);
    let grid = TimeGrid::linspace_open(len)?;
    let kernel = KernelSpec::rbf(0.35, 1.3)?.with_nugget(0.02);
    let mut g = rng::substream(seed, "check/gradient");
    let mut params = ToyParams::init(d_x, d_z, kernel, seed);
    // move biases off zero so every block has a non-trivial gradient
    params.encoder.b_mu = rng::standard_normal_matrix(&mut g, 1, d_z).row(0).to_owned() * 0.3;
    params.encoder.b_lv = rng::standard_normal_matrix(&mut g, 1, d_z).row(0).to_owned() * 0.3;
    params.decoder.c = rng::standard_normal_matrix(&mut g, 1, d_x).row(0).to_owned() * 0.3;
    params.decoder.log_obs_var = -0.4;
    let xs: Vec<Array2<f64>> = (0..2).map(|_| rng::standard_normal_matrix(&mut g, len, d_x)).collect();
    let eps: Vec<Array2<f64>> = (0..2).map(|_| rng::standard_normal_matrix(&mut g, len, d_z)).collect();
    let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
    gradient_check(&params, &views, &eps, &grid, 0.7, KlCap::none())
}

/// Moving average with `window`, then require each consecutive value to be
/// no lower than its predecessor minus `slack`. Returns the worst drop.
pub fn smoothed_worst_drop(series: &[f64], window: usize) -> f64 {
    if series.len() < window + 1 || window == 0 {
        return 0.0;
    }
    let w = window as f64;
    let mut sum: f64 = series[..window].iter().sum();
    let mut prev = sum / w;
    let mut worst = 0.0_f64;
    for k in window..series.len() {
        sum += series[k] - series[k - window];
        let cur = sum / w;
        worst = worst.max(prev - cur);
        prev = cur;
    }
    worst
}

/// Worst [`chain_rule_gap`] over random instances with `L <= 32`, `d_z <= 8`.
pub fn chain_rule_suite(seed: u64, instances: usize) -> Result<f64> {
    let mut g = rng::substream(seed, "check/chain");
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let len = g.random_range(1..=32);
        let d_z = g.random_range(1..=8);
        let gram = random_gram(&mut g, len)?;
        let traj = LatentTrajectory::new(rng::standard_normal_matrix(&mut g, len, d_z))?;
        worst = worst.max(chain_rule_gap(&gram, &traj)?);
    }
    Ok(worst)
}

/// Worst [`sampler_gap`] over every `(L, d_z)` pair.
pub fn sampler_suite(seed: u64, lens: &[usize], dims: &[usize]) -> Result<f64> {
    let mut g = rng::substream(seed, "check/sampler");
    let mut worst = 0.0_f64;
    for &len in lens {
        for &d_z in dims {
            let gram = random_gram(&mut g, len)?;
            let noise = NoiseBlock::standard(len, d_z, seed, &format!("check/noise/{len}/{d_z}"));
            worst = worst.max(sampler_gap(&gram, d_z, &noise)?);
        }
    }
    Ok(worst)
}

/// Worst [`cholesky_diagonal_gap`] over random Grams with `L <= 64`.
pub fn cholesky_diagonal_suite(seed: u64, instances: usize) -> Result<f64> {
    let mut g = rng::substream(seed, "check/cholesky");
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let len = g.random_range(1..=64);
        worst = worst.max(cholesky_diagonal_gap(&random_gram(&mut g, len)?)?);
    }
    Ok(worst)
}

/// Worst z-score of closed-form KL against Monte Carlo, `L <= 8`, `d_z <= 4`.
/// Instance `i` uses substream `check/kl/i`.
pub fn kl_monte_carlo_suite(seed: u64, instances: usize, samples: usize) -> Result<f64> {
    let scores: Vec<f64> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut g = rng::substream(seed, &format!("check/kl/{i}"));
            let len = g.random_range(1..=8);
            let d_z = g.random_range(1..=4);
            let gram = random_gram(&mut g, len)?;
            let q = random_posterior(&mut g, len, d_z);
            Ok(kl_vs_monte_carlo(&q, &gram, samples, &mut g)?.z_score())
        })
        .collect::<Result<_>>()?;
    Ok(scores.into_iter().fold(0.0, f64::max))
}

/// Worst [`isotropic_gap`] over random posteriors and variances.
pub fn isotropic_suite(seed: u64, instances: usize) -> Result<f64> {
    let mut g = rng::substream(seed, "check/isotropic");
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let len = g.random_range(1..=32);
        let d_z = g.random_range(1..=4);
        let q = random_posterior(&mut g, len, d_z);
        worst = worst.max(isotropic_gap(&q, g.random_range(0.2..3.0))?);
    }
    Ok(worst)
}

/// Worst determinant / inverse relative error of the explicit Kronecker
/// product, over shapes with `L * d_z <= 64`.
pub fn kronecker_suite(seed: u64) -> Result<f64> {
    let mut g = rng::substream(seed, "check/kronecker");
    let mut worst = 0.0_f64;
    for (len, d_z) in [(1usize, 1usize), (2, 8), (4, 3), (8, 8), (16, 4), (32, 2), (64, 1)] {
        let r = kron_identities_check(&random_gram(&mut g, len)?, d_z)?;
        worst = worst.max(r.det_rel_err).max(r.inv_rel_err);
    }
    Ok(worst)
}

/// RBF Gram (`ℓ = 0.2`, `σ² = 1`) with absolute jitter on the open grid.
pub fn jittered_rbf_gram(len: usize, jitter: f64) -> Result<GramMatrix<f64>> {
    build_gram(&KernelSpec::rbf(0.2, 1.0)?.with_jitter(jitter), &TimeGrid::linspace_open(len)?)
}

/// Worst CG-versus-Cholesky relative error on jittered RBF Grams.
pub fn cg_suite(seed: u64, lens: &[usize]) -> Result<f64> {
    let mut worst = 0.0_f64;
    for &len in lens {
        let gram = jittered_rbf_gram(len, 1e-2)?;
        let mut g = rng::substream(seed, &format!("check/cg/{len}"));
        let b: Array1<f64> = (0..len).map(|_| rng::standard_normal(&mut g)).collect();
        let cfg = CgConfig::new(1e-11, 10 * len, Preconditioner::None)?;
        worst = worst.max(cg_vs_cholesky(&gram, &b, &cfg)?.0);
    }
    Ok(worst)
}

/// CG iterations (`tol = 1e-6`) for one right-hand side at each jitter level.
pub fn jitter_iterations(seed: u64, len: usize, jitters: &[f64]) -> Result<Vec<usize>> {
    let mut g = rng::substream(seed, &format!("check/jitter/{len}"));
    let b: Array1<f64> = (0..len).map(|_| rng::standard_normal(&mut g)).collect();
    let cfg = CgConfig::new(1e-6, 10 * len, Preconditioner::None)?;
    jitters
        .iter()
        .map(|&j| {
            let gram = jittered_rbf_gram(len, j)?;
            Ok(cg_solve(&DenseOperator(gram.matrix().view()), b.view(), &cfg)?.1.iterations)
        })
        .collect()
}

/// Summary of a paired GP / isotropic reference run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSummary {
    pub final_gp: f64,
    pub final_isotropic: f64,
    pub worst_smoothed_drop: f64,
    pub non_finite: usize,
}

/// Smoothing window for [`TrainingSummary::worst_smoothed_drop`].
pub const SMOOTHING_WINDOW: usize = 50;

pub fn reference_training_summary(seed: u64, steps: usize) -> Result<TrainingSummary> {
    let run = reference_run(seed, steps)?;
    let elbo = |h: &[StepMetrics<f64>]| h.iter().map(|r| r.elbo_tok).collect::<Vec<_>>();
    let gp = elbo(&run.gp.history);
    let iso = elbo(&run.isotropic.history);
    let non_finite = [&run.gp.history, &run.isotropic.history]
        .iter()
        .flat_map(|h| h.iter())
        .flat_map(|r| [r.elbo_tok, r.ll_tok, r.kl_tok_raw, r.kl_tok_capped, r.beta, r.lengthscale, r.variance])
        .chain(run.gp.params.to_flat())
        .chain(run.isotropic.params.to_flat())
        .filter(|v| !v.is_finite())
        .count();
    let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
    Ok(TrainingSummary {
        final_gp: last(&gp),
        final_isotropic: last(&iso),
        worst_smoothed_drop: smoothed_worst_drop(&gp, SMOOTHING_WINDOW),
        non_finite,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Measured statistic, compared against `threshold`.
    pub value: f64,
    pub threshold: f64,
}

impl CheckOutcome {
    /// Passes when `value <= threshold`.
    pub fn at_most(name: &'static str, value: f64, threshold: f64) -> Self {
        CheckOutcome { name, passed: value <= threshold, value, threshold }
    }

    /// Passes when `value > threshold`.
    pub fn above(name: &'static str, value: f64, threshold: f64) -> Self {
        CheckOutcome { name, passed: value > threshold, value, threshold }
    }
}

/// Jitter levels, increasing, for the CG iteration-count trend.
pub const JITTER_LEVELS: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

/// Number of places where `xs` strictly increases.
pub fn increases(xs: &[usize]) -> usize {
    xs.windows(2).filter(|w| w[1] > w[0]).count()
}

/// The full invariant suite. Deterministic given `seed`.
pub fn run_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let train = reference_training_summary(seed, REFERENCE_STEPS)?;
    let grad = gradient_check_instance(seed)?.iter().fold(0.0_f64, |m, (_, e)| m.max(*e));
    Ok(vec![
        CheckOutcome::at_most("chain_rule_identity", chain_rule_suite(seed, 100)?, 1e-8),
        CheckOutcome::at_most("sampler_equivalence", sampler_suite(seed, &[2, 16, 64, 256], &[1, 4])?, 1e-8),
        CheckOutcome::at_most("cholesky_diagonal_identity", cholesky_diagonal_suite(seed, 50)?, 1e-10),
        CheckOutcome::at_most("kl_monte_carlo_z", kl_monte_carlo_suite(seed, 20, 100_000)?, 3.0),
        CheckOutcome::at_most("kl_isotropic_reduction", isotropic_suite(seed, 20)?, 1e-10),
        CheckOutcome::at_most("kronecker_identities", kronecker_suite(seed)?, 1e-8),
        CheckOutcome::at_most("cg_vs_cholesky", cg_suite(seed, &[64, 128, 256, 512])?, 1e-6),
        CheckOutcome::at_most(
            "cg_iterations_vs_jitter",
            increases(&jitter_iterations(seed, 256, &JITTER_LEVELS)?) as f64,
            0.0,
        ),
        CheckOutcome::at_most("gradient_check", grad, 1e-4),
        CheckOutcome::at_most("train_non_finite", train.non_finite as f64, 0.0),
        CheckOutcome::at_most("train_smoothed_elbo_drop", train.worst_smoothed_drop, 1e-3),
        CheckOutcome::above("train_gp_minus_isotropic", train.final_gp - train.final_isotropic, 0.0),
    ])
}

/// `printf("%.*e")`: mantissa with `prec` decimals, signed two-digit exponent.
pub fn format_sci(v: f64, prec: usize) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    let s = format!("{v:.prec$e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

/// Fixed-width pass/fail table; values printed as `%.6e`.
pub fn format_table(rows: &[CheckOutcome]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<28} {:>6} {:>14} {:>10}", "check", "status", "value", "threshold");
    for r in rows {
        let status = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(
            s,
            "{:<28} {:>6} {:>14} {:>10}",
            r.name,
            status,
            format_sci(r.value, 6),
            format_sci(r.threshold, 1)
        );
    }
    s
}
