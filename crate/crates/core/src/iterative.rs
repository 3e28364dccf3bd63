//! Matrix-free conjugate gradients and stochastic trace estimation.

use std::time::Instant;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::kernels::{build_gram, KernelSpec, TimeGrid};
use crate::variational::DiagonalPosterior;
use crate::kernels::GramMatrix;
use crate::{rng, Error, Result, Scalar};

/// Symmetric positive-definite operator on length-`dim` vectors.
pub trait LinearOperator<F>: Sync {
    fn dim(&self) -> usize;

    /// `y = A x`.
    fn apply(&self, x: ArrayView1<F>, y: &mut Array1<F>);

    /// Diagonal of `A`, when cheaply available (enables Jacobi).
    fn diagonal(&self) -> Option<Array1<F>> {
        None
    }
}

/// Dense symmetric matrix as an operator.
#[derive(Debug, Clone, Copy)]
pub struct DenseOperator<'a, F>(pub ArrayView2<'a, F>);

impl<F: Scalar> LinearOperator<F> for DenseOperator<'_, F> {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, x: ArrayView1<F>, y: &mut Array1<F>) {
        ndarray::linalg::general_mat_vec_mul(F::one(), &self.0, &x, F::zero(), y);
    }

    fn diagonal(&self) -> Option<Array1<F>> {
        Some(self.0.diag().to_owned())
    }
}

/// `A + shift * I` without copying `A`.
#[derive(Debug, Clone, Copy)]
pub struct Shifted<'a, F, A: ?Sized> {
    pub inner: &'a A,
    pub shift: F,
}

impl<F: Scalar, A: LinearOperator<F> + ?Sized> LinearOperator<F> for Shifted<'_, F, A> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, x: ArrayView1<F>, y: &mut Array1<F>) {
        self.inner.apply(x, y);
        y.scaled_add(self.shift, &x);
    }

    fn diagonal(&self) -> Option<Array1<F>> {
        self.inner.diagonal().map(|d| d + self.shift)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preconditioner {
    #[default]
    None,
    Jacobi,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgConfig<F> {
    /// Relative residual target `||Ax - b|| <= tol ||b||`.
    pub tol: F,
    pub max_iters: usize,
    pub preconditioner: Preconditioner,
}

impl<F: Scalar> CgConfig<F> {
    pub fn new(tol: F, max_iters: usize, preconditioner: Preconditioner) -> Result<Self> {
        if !(tol > F::zero() && tol < F::one()) {
            return Err(Error::InvalidArgument(format!("CG tolerance must lie in (0, 1), got {tol}")));
        }
        if max_iters == 0 {
            return Err(Error::InvalidArgument("CG needs max_iters >= 1".into()));
        }
        Ok(CgConfig { tol, max_iters, preconditioner })
    }

    /// `tol = 1e-6`, `max_iters = 10 * dim`, no preconditioner.
    pub fn for_dim(dim: usize) -> Self {
        CgConfig { tol: F::lit(1e-6), max_iters: 10 * dim.max(1), preconditioner: Preconditioner::None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgReport<F> {
    pub iterations: usize,
    /// Absolute recursive residual norm at exit.
    pub final_residual: F,
    pub converged: bool,
    /// Residual norm after each iteration, starting with `||b||`.
    pub residual_history: Vec<F>,
}

fn norm<F: Scalar>(v: &Array1<F>) -> F {
    v.dot(v).sqrt()
}

/// Preconditioned conjugate gradients from `x = 0`.
///
/// Not converging within `max_iters` is reported, not raised.
pub fn cg_solve<F: Scalar, A: LinearOperator<F> + ?Sized>(
    op: &A,
    b: ArrayView1<F>,
    cfg: &CgConfig<F>,
) -> Result<(Array1<F>, CgReport<F>)> {
    let n = op.dim();
    if b.len() != n {
        return Err(Error::DimensionMismatch(format!("operator is {n}-dimensional, rhs has {}", b.len())));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("CG right-hand side".into()));
    }
    let inv_diag = match cfg.preconditioner {
        Preconditioner::None => None,
        Preconditioner::Jacobi => {
            let d = op
                .diagonal()
                .ok_or_else(|| Error::InvalidArgument("Jacobi preconditioning needs the operator diagonal".into()))?;
            if d.iter().any(|v| !(*v > F::zero())) {
                return Err(Error::InvalidArgument("Jacobi preconditioning needs a positive diagonal".into()));
            }
            Some(d.mapv(|v| F::one() / v))
        }
    };
    let precondition = |r: &Array1<F>| match &inv_diag {
        Some(m) => r * m,
        None => r.clone(),
    };

    let b_norm = norm(&b.to_owned());
    let target = cfg.tol * b_norm;
    let mut x = Array1::zeros(n);
    let mut r = b.to_owned();
    let mut history = vec![b_norm];
    if b_norm == F::zero() {
        return Ok((x, CgReport { iterations: 0, final_residual: F::zero(), converged: true, residual_history: history }));
    }
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut ap = Array1::zeros(n);
    let mut res = b_norm;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        op.apply(p.view(), &mut ap);
        let pap = p.dot(&ap);
        if !(pap > F::zero()) {
            // loss of positive definiteness or exact breakdown
            break;
        }
        let alpha = rz / pap;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        iterations += 1;
        res = norm(&r);
        history.push(res);
        if res <= target {
            break;
        }
        z = precondition(&r);
        let rz_next = r.dot(&z);
        let beta = rz_next / rz;
        rz = rz_next;
        p.zip_mut_with(&z, |pi, &zi| *pi = zi + beta * *pi);
    }
    Ok((x, CgReport { iterations, final_residual: res, converged: res <= target, residual_history: history }))
}

/// Hutchinson estimate of `trace(K^{-1} A)` for diagonal `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEstimate<F> {
    pub estimate: F,
    pub stderr: F,
    pub all_converged: bool,
    pub total_iterations: usize,
}

/// Rademacher probes `v`, one CG solve `K x = A v` each, sample `v^T x`.
/// Probe `i` draws from substream `hutchinson/i` of `seed`.
pub fn hutchinson_trace_inv<F: Scalar, A: LinearOperator<F> + ?Sized>(
    op: &A,
    a_diag: ArrayView1<F>,
    n_probes: usize,
    cfg: &CgConfig<F>,
    seed: u64,
) -> Result<TraceEstimate<F>> {
    if n_probes < 2 {
        return Err(Error::InvalidArgument("Hutchinson needs at least two probes".into()));
    }
    let n = op.dim();
    if a_diag.len() != n {
        return Err(Error::DimensionMismatch(format!("diagonal has {} entries, operator is {n}", a_diag.len())));
    }
    let samples: Vec<(F, CgReport<F>)> = (0..n_probes)
        .into_par_iter()
        .map(|i| {
            let mut g = rng::substream(seed, &format!("hutchinson/{i}"));
            let v: Array1<F> = (0..n).map(|_| rng::rademacher(&mut g)).collect();
            let av = &v * &a_diag;
            let (x, report) = cg_solve(op, av.view(), cfg)?;
            Ok((v.dot(&x), report))
        })
        .collect::<Result<_>>()?;
    let m = F::from_usize_lossy(n_probes);
    let mean = samples.iter().map(|(s, _)| *s).sum::<F>() / m;
    let var = samples.iter().map(|(s, _)| (*s - mean) * (*s - mean)).sum::<F>() / (m - F::one());
    Ok(TraceEstimate {
        estimate: mean,
        stderr: (var / m).sqrt(),
        all_converged: samples.iter().all(|(_, r)| r.converged),
        total_iterations: samples.iter().map(|(_, r)| r.iterations).sum(),
    })
}

/// Power-iteration steps used by [`estimate_condition_number`].
pub const POWER_ITERATIONS: usize = 50;

fn rayleigh_power<F: Scalar>(
    mut apply: impl FnMut(&Array1<F>) -> Result<Array1<F>>,
    n: usize,
    seed: u64,
    stream: &str,
) -> Result<F> {
    let mut g = rng::substream(seed, stream);
    let mut v: Array1<F> = (0..n).map(|_| rng::standard_normal(&mut g)).collect();
    let mut lambda = F::zero();
    for _ in 0..POWER_ITERATIONS {
        let nv = norm(&v);
        v.mapv_inplace(|x| x / nv);
        let w = apply(&v)?;
        lambda = v.dot(&w);
        v = w;
    }
    Ok(lambda)
}

/// `λ_max(A) / λ_min(A)` from power iteration on `A` and on `A^{-1}`
/// (inverse applied by CG).
pub fn estimate_condition_number<F: Scalar, A: LinearOperator<F> + ?Sized>(
    op: &A,
    cfg: &CgConfig<F>,
    seed: u64,
) -> Result<F> {
    let n = op.dim();
    let lmax = rayleigh_power(
        |v| {
            let mut y = Array1::zeros(n);
            op.apply(v.view(), &mut y);
            Ok(y)
        },
        n,
        seed,
        "kappa/max",
    )?;
    let inv_max = rayleigh_power(|v| Ok(cg_solve(op, v.view(), cfg)?.0), n, seed, "kappa/min")?;
    Ok(lmax * inv_max)
}

/// One row of the CG benchmark table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub kappa_est: f64,
    pub iters_mean: f64,
    pub iters_std: f64,
    pub wall_ms_mean: f64,
}

/// CG iterations and wall time on `spec`'s Gram matrix for each length, over
/// `trials` random right-hand sides (substream `bench/L/trial`).
pub fn bench_cg<F: Scalar>(
    spec: &KernelSpec<F>,
    lengths: &[usize],
    cfg: &CgConfig<F>,
    trials: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    if lengths.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("lengths must be sorted ascending".into()));
    }
    lengths
        .iter()
        .map(|&len| {
            let grid = TimeGrid::linspace_open(len)?;
            let gram = build_gram(spec, &grid)?;
            let op = DenseOperator(gram.matrix().view());
            let kappa = estimate_condition_number(&op, cfg, seed)?;
            let mut iters = Vec::with_capacity(trials);
            let mut wall = Vec::with_capacity(trials);
            for trial in 0..trials {
                let mut g = rng::substream(seed, &format!("bench/{len}/{trial}"));
                let b: Array1<F> = (0..len).map(|_| rng::standard_normal(&mut g)).collect();
                let start = Instant::now();
                let (_, report) = cg_solve(&op, b.view(), cfg)?;
                wall.push(start.elapsed().as_secs_f64() * 1e3);
                iters.push(report.iterations as f64);
            }
            let (iters_mean, iters_std) = mean_std(&iters);
            let (wall_ms_mean, _) = mean_std(&wall);
            Ok(BenchRow { len, kappa_est: kappa.to_f64_lossy(), iters_mean, iters_std, wall_ms_mean })
        })
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// KL to the GP prior with every `K^{-1}` application done by CG and the
/// trace term estimated by Hutchinson; the log-determinant stays exact.
///
/// Returns the estimate and its standard error (from the trace term).
pub fn kl_via_cg<F: Scalar>(
    q: &DiagonalPosterior<F>,
    gram: &GramMatrix<F>,
    n_probes: usize,
    cfg: &CgConfig<F>,
    seed: u64,
) -> Result<(F, F)> {
    if q.len() != gram.len() {
        return Err(Error::DimensionMismatch("posterior and Gram matrix differ in length".into()));
    }
    let op = DenseOperator(gram.matrix().view());
    let s_sum: Array1<F> = q.logvar().mapv(|lv| lv.exp()).sum_axis(ndarray::Axis(1));
    let trace = hutchinson_trace_inv(&op, s_sum.view(), n_probes, cfg, seed)?;
    let mut maha = F::zero();
    for col in q.mu().columns() {
        let (x, _) = cg_solve(&op, col, cfg)?;
        maha = maha + col.dot(&x);
    }
    let n = F::from_usize_lossy(q.len());
    let d = F::from_usize_lossy(q.dim());
    let sum_logvar = q.logvar().sum();
    let half = F::lit(0.5);
    let kl = half * (trace.estimate + maha - n * d + d * gram.logdet() - sum_logvar);
    Ok((kl, half * trace.stderr))
}
