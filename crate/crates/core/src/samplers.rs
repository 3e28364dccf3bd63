//! Prior samplers driven by explicit noise.
//!
//! Sequential conditioning and block Cholesky sampling are the same lower
//! triangular map applied to the same noise, so on a shared [`NoiseBlock`]
//! they agree to rounding error.

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::kernels::GramMatrix;
use crate::latent_prior::{precompute_conditionals, LatentTrajectory};
use crate::{rng, Error, Result, Scalar};

/// Standard normal draws, one row per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBlock<F> {
    pub eps: Array2<F>,
    pub seed: u64,
}

impl<F: Scalar> NoiseBlock<F> {
    pub fn new(eps: Array2<F>, seed: u64) -> Self {
        NoiseBlock { eps, seed }
    }

    /// Draws from the named substream of `seed` (see [`crate::rng`]).
    pub fn standard(rows: usize, cols: usize, seed: u64, stream: &str) -> Self {
        let eps = rng::standard_normal_matrix(&mut rng::substream(seed, stream), rows, cols);
        NoiseBlock { eps, seed }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        NoiseBlock { eps: Array2::zeros((rows, cols)), seed: 0 }
    }

    pub fn rows(&self) -> usize {
        self.eps.nrows()
    }
}

fn check_noise<F: Scalar>(noise: &NoiseBlock<F>, rows: usize, d_z: usize) -> Result<()> {
    if noise.eps.dim() != (rows, d_z) {
        return Err(Error::DimensionMismatch(format!(
            "noise is {:?}, expected ({rows}, {d_z})",
            noise.eps.dim()
        )));
    }
    Ok(())
}

/// `z_t = μ_t(z_{<t}) + σ_t ε_t` for `t = 1..L`.
pub fn sample_sequential<F: Scalar>(
    gram: &GramMatrix<F>,
    d_z: usize,
    noise: &NoiseBlock<F>,
) -> Result<LatentTrajectory<F>> {
    check_noise(noise, gram.len(), d_z)?;
    continue_sequential(gram, Array2::zeros((0, d_z)).view(), noise)
}

/// `Z = chol(K) E`.
pub fn sample_parallel<F: Scalar>(
    gram: &GramMatrix<F>,
    d_z: usize,
    noise: &NoiseBlock<F>,
) -> Result<LatentTrajectory<F>> {
    check_noise(noise, gram.len(), d_z)?;
    LatentTrajectory::new(gram.chol().matrix().dot(&noise.eps))
}

/// Keeps `prefix` as rows `1..T0` and continues with sequential conditioning
/// on the growing history. `noise` covers steps `T0+1..L` only.
pub fn sample_conditioned<F: Scalar>(
    gram: &GramMatrix<F>,
    prefix: ArrayView2<F>,
    noise: &NoiseBlock<F>,
) -> Result<LatentTrajectory<F>> {
    let t0 = prefix.nrows();
    if t0 >= gram.len() {
        return Err(Error::InvalidArgument(format!(
            "prefix length {t0} must be smaller than the horizon {}",
            gram.len()
        )));
    }
    if prefix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prefix".into()));
    }
    check_noise(noise, gram.len() - t0, prefix.ncols())?;
    continue_sequential(gram, prefix, noise)
}

fn continue_sequential<F: Scalar>(
    gram: &GramMatrix<F>,
    prefix: ArrayView2<F>,
    noise: &NoiseBlock<F>,
) -> Result<LatentTrajectory<F>> {
    let laws = precompute_conditionals(gram)?;
    let t0 = prefix.nrows();
    let mut z = Array2::zeros((gram.len(), prefix.ncols()));
    z.slice_mut(s![..t0, ..]).assign(&prefix);
    for (t, law) in laws.iter().enumerate().skip(t0) {
        let (history, mut rest) = z.view_mut().split_at(Axis(0), t);
        let mean = history.t().dot(&law.weights);
        let sd = law.std_dev();
        let mut row = rest.row_mut(0);
        row.assign(&mean);
        row.scaled_add(sd, &noise.eps.row(t - t0));
    }
    LatentTrajectory::new(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    Sequential,
    Parallel,
}

/// `n` independent trajectories; trajectory `i` uses substream `sample/i`.
pub fn sample_batch<F: Scalar>(
    gram: &GramMatrix<F>,
    d_z: usize,
    n: usize,
    seed: u64,
    mode: SamplerMode,
) -> Result<Vec<LatentTrajectory<F>>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let noise = NoiseBlock::standard(gram.len(), d_z, seed, &format!("sample/{i}"));
            match mode {
                SamplerMode::Sequential => sample_sequential(gram, d_z, &noise),
                SamplerMode::Parallel => sample_parallel(gram, d_z, &noise),
            }
        })
        .collect()
}

/// Sample mean (`L x d`) and temporal covariance (`L x L`) averaged over the
/// latent coordinates, with the unbiased `1 / (N - 1)` normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMoments<F> {
    pub mean: Array2<F>,
    pub cov: Array2<F>,
}

pub fn empirical_moments<F: Scalar>(samples: &[LatentTrajectory<F>]) -> Result<EmpiricalMoments<F>> {
    let first = samples.first().ok_or_else(|| Error::Empty("no samples".into()))?;
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let dim = first.z().dim();
    if samples.iter().any(|s| s.z().dim() != dim) {
        return Err(Error::DimensionMismatch("samples differ in shape".into()));
    }
    let n = F::from_usize_lossy(samples.len());
    let mut mean = Array2::zeros(dim);
    for s in samples {
        mean += s.z();
    }
    mean.mapv_inplace(|v| v / n);
    let mut cov = Array2::zeros((dim.0, dim.0));
    for s in samples {
        let c = s.z() - &mean;
        cov += &c.dot(&c.t());
    }
    let denom = (n - F::one()) * F::from_usize_lossy(dim.1);
    cov.mapv_inplace(|v| v / denom);
    Ok(EmpiricalMoments { mean, cov })
}
