//! Linear-Gaussian VAE with the GP latent prior.
//!
//! The encoder maps each observation `x_t` to `q(z_t | x_t)`, the decoder maps
//! `z_t` back to a Gaussian over `x_t`, and the prior couples the `z_t` across
//! time through the Gram matrix. Everything is small enough that gradients
//! are written out by hand and checked against finite differences.

mod objective;
mod train;

pub use objective::{elbo_and_grads, evaluate, BatchMetrics, ToyGradients};
pub use train::{
    isotropic_ablation, reference_config, reference_data_kernel, reference_dataset, reference_decoder, reference_run,
    train, REFERENCE_STEPS, ReferenceRun, StepMetrics, TrainConfig, TrainError, TrainOutcome,
};

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::kernels::{build_gram, KernelSpec, TimeGrid};
use crate::samplers::{sample_parallel, NoiseBlock};
use crate::variational::clamp_logvar;
use crate::{rng, Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearEncoder<F> {
    /// `d_x x d_z`
    pub w_mu: Array2<F>,
    pub b_mu: Array1<F>,
    /// `d_x x d_z`
    pub w_lv: Array2<F>,
    pub b_lv: Array1<F>,
}

impl<F: Scalar> LinearEncoder<F> {
    pub fn zeros(d_x: usize, d_z: usize) -> Self {
        LinearEncoder {
            w_mu: Array2::zeros((d_x, d_z)),
            b_mu: Array1::zeros(d_z),
            w_lv: Array2::zeros((d_x, d_z)),
            b_lv: Array1::zeros(d_z),
        }
    }

    /// Posterior means and clamped log-variances, both `L x d_z`.
    pub fn encode(&self, x: ArrayView2<F>) -> (Array2<F>, Array2<F>) {
        let mu = x.dot(&self.w_mu) + &self.b_mu;
        let lv = (x.dot(&self.w_lv) + &self.b_lv).mapv(clamp_logvar);
        (mu, lv)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearDecoder<F> {
    /// `d_z x d_x`
    pub v: Array2<F>,
    pub c: Array1<F>,
    pub log_obs_var: F,
}

impl<F: Scalar> LinearDecoder<F> {
    pub fn decode(&self, z: ArrayView2<F>) -> Array2<F> {
        z.dot(&self.v) + &self.c
    }

    pub fn obs_var(&self) -> F {
        clamp_logvar(self.log_obs_var).exp()
    }
}

/// Everything the trainer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams<F> {
    pub encoder: LinearEncoder<F>,
    pub decoder: LinearDecoder<F>,
    /// Only `raw_lengthscale` and `raw_variance` are trained.
    pub kernel: KernelSpec<F>,
}

/// Names and sizes of the parameter blocks, in flattening order.
pub fn param_blocks(d_x: usize, d_z: usize) -> Vec<(&'static str, usize)> {
    vec![
        ("encoder.w_mu", d_x * d_z),
        ("encoder.b_mu", d_z),
        ("encoder.w_lv", d_x * d_z),
        ("encoder.b_lv", d_z),
        ("decoder.v", d_z * d_x),
        ("decoder.c", d_x),
        ("decoder.log_obs_var", 1),
        ("kernel.raw_lengthscale", 1),
        ("kernel.raw_variance", 1),
    ]
}

impl<F: Scalar> ToyParams<F> {
    /// Small random weights (substream `train/init`), zero biases, unit
    /// observation variance.
    pub fn init(d_x: usize, d_z: usize, kernel: KernelSpec<F>, seed: u64) -> Self {
        let mut g = rng::substream(seed, "train/init");
        let scale = F::lit(0.1);
        let mut draw = |r: usize, c: usize| rng::standard_normal_matrix::<F, _>(&mut g, r, c) * scale;
        ToyParams {
            encoder: LinearEncoder {
                w_mu: draw(d_x, d_z),
                b_mu: Array1::zeros(d_z),
                w_lv: draw(d_x, d_z),
                b_lv: Array1::zeros(d_z),
            },
            decoder: LinearDecoder { v: draw(d_z, d_x), c: Array1::zeros(d_x), log_obs_var: F::zero() },
            kernel,
        }
    }

    pub fn d_x(&self) -> usize {
        self.encoder.w_mu.nrows()
    }

    pub fn d_z(&self) -> usize {
        self.encoder.w_mu.ncols()
    }

    pub fn to_flat(&self) -> Vec<F> {
        let e = &self.encoder;
        let d = &self.decoder;
        e.w_mu
            .iter()
            .chain(e.b_mu.iter())
            .chain(e.w_lv.iter())
            .chain(e.b_lv.iter())
            .chain(d.v.iter())
            .chain(d.c.iter())
            .copied()
            .chain([d.log_obs_var, self.kernel.raw_lengthscale, self.kernel.raw_variance])
            .collect()
    }

    /// Same shapes and kernel family as `self`, values from `flat`.
    pub fn with_flat(&self, flat: &[F]) -> Result<Self> {
        let blocks = param_blocks(self.d_x(), self.d_z());
        let total: usize = blocks.iter().map(|(_, n)| n).sum();
        if flat.len() != total {
            return Err(Error::DimensionMismatch(format!("expected {total} parameters, got {}", flat.len())));
        }
        let mut out = self.clone();
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut dyn Iterator<Item = &mut F>| {
            for v in dst {
                *v = it.next().expect("length checked");
            }
        };
        fill(&mut out.encoder.w_mu.iter_mut());
        fill(&mut out.encoder.b_mu.iter_mut());
        fill(&mut out.encoder.w_lv.iter_mut());
        fill(&mut out.encoder.b_lv.iter_mut());
        fill(&mut out.decoder.v.iter_mut());
        fill(&mut out.decoder.c.iter_mut());
        fill(&mut std::iter::once(&mut out.decoder.log_obs_var));
        fill(&mut std::iter::once(&mut out.kernel.raw_lengthscale));
        fill(&mut std::iter::once(&mut out.kernel.raw_variance));
        Ok(out)
    }
}

/// Synthetic sequences together with the latents that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    pub grid: TimeGrid<F>,
    /// `L x d_x` each.
    pub sequences: Vec<Array2<F>>,
    /// `L x d_z` each; diagnostics only.
    pub latents: Vec<Array2<F>>,
}

impl<F: Scalar> Dataset<F> {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// `z ~ GP prior` via the Cholesky sampler, `x_t = V^T z_t + c + noise`.
///
/// Sequence `i` uses substreams `synth/latent/i` and `synth/obs/i`.
pub fn synth_dataset<F: Scalar>(
    kernel: &KernelSpec<F>,
    decoder_true: &LinearDecoder<F>,
    n_seqs: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Dataset<F>> {
    let grid = TimeGrid::linspace_open(seq_len)?;
    let gram = build_gram(kernel, &grid)?;
    let d_z = decoder_true.v.nrows();
    let d_x = decoder_true.v.ncols();
    if decoder_true.c.len() != d_x {
        return Err(Error::DimensionMismatch("decoder bias length differs from d_x".into()));
    }
    let obs_sd = decoder_true.obs_var().sqrt();
    let mut sequences = Vec::with_capacity(n_seqs);
    let mut latents = Vec::with_capacity(n_seqs);
    for i in 0..n_seqs {
        let noise = NoiseBlock::standard(seq_len, d_z, seed, &format!("synth/latent/{i}"));
        let z = sample_parallel(&gram, d_z, &noise)?.into_inner();
        let mut g = rng::substream(seed, &format!("synth/obs/{i}"));
        let obs: Array2<F> = rng::standard_normal_matrix(&mut g, seq_len, d_x);
        let x = decoder_true.decode(z.view()) + obs * obs_sd;
        sequences.push(x);
        latents.push(z);
    }
    Ok(Dataset { grid, sequences, latents })
}

/// Lag-1 autocorrelation of each observed coordinate, pooled over sequences.
pub fn lag1_autocorrelation<F: Scalar>(sequences: &[Array2<F>]) -> F {
    let mut num = F::zero();
    let mut den = F::zero();
    for x in sequences {
        let n = F::from_usize_lossy(x.nrows());
        for col in x.columns() {
            let mean = col.sum() / n;
            for t in 0..col.len() {
                let a = col[t] - mean;
                den = den + a * a;
                if t + 1 < col.len() {
                    num = num + a * (col[t + 1] - mean);
                }
            }
        }
    }
    num / den
}

/// Random `L x d_z` reparameterization noise for every sequence.
pub(crate) fn draw_noise<F: Scalar, R: Rng + ?Sized>(g: &mut R, count: usize, len: usize, d_z: usize) -> Vec<Array2<F>> {
    (0..count).map(|_| rng::standard_normal_matrix(g, len, d_z)).collect()
}
