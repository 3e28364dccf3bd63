use ndarray::{array, ArrayView2};
use rand::seq::index;
use thiserror::Error;

use super::objective::{elbo_and_grads, evaluate, ToyGradients};
use super::{draw_noise, synth_dataset, Dataset, LinearDecoder, ToyParams};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::variational::{BetaSchedule, KlCap};
use crate::{rng, Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<F> {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: F,
    pub seed: u64,
    pub seq_len: usize,
    pub d_z: usize,
    pub d_x: usize,
    /// Initial prior kernel.
    pub kernel: KernelSpec<F>,
    pub schedule: BetaSchedule<F>,
    pub cap: KlCap<F>,
    /// Update `raw_lengthscale` / `raw_variance` jointly with the networks.
    pub train_kernel: bool,
}

impl<F: Scalar> TrainConfig<F> {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("d_z", self.d_z),
            ("d_x", self.d_x),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate >= F::zero() && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be finite and >= 0".into()));
        }
        self.kernel.validate()?;
        self.schedule.validate()
    }
}

/// One row of the training log. Quantities are measured on the full dataset
/// with fixed evaluation noise, before that step's update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics<F> {
    pub step: usize,
    pub elbo_tok: F,
    pub ll_tok: F,
    pub kl_tok_raw: F,
    pub kl_tok_capped: F,
    pub beta: F,
    pub lengthscale: F,
    pub variance: F,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<F> {
    pub params: ToyParams<F>,
    pub history: Vec<StepMetrics<F>>,
}

#[derive(Debug, Error)]
pub enum TrainError<F: Scalar> {
    #[error("invalid training setup: {0}")]
    Setup(#[from] Error),

    /// Non-finite values or a failed factorization mid-run. `last_good` holds
    /// the parameters before the failing step.
    #[error("training diverged at step {step}: {cause}")]
    Diverged {
        step: usize,
        cause: Error,
        last_good: Box<ToyParams<F>>,
        history: Vec<StepMetrics<F>>,
    },
}

fn apply_update<F: Scalar>(params: &mut ToyParams<F>, g: &ToyGradients<F>, lr: F, train_kernel: bool) {
    let e = &mut params.encoder;
    e.w_mu.scaled_add(-lr, &g.encoder.w_mu);
    e.b_mu.scaled_add(-lr, &g.encoder.b_mu);
    e.w_lv.scaled_add(-lr, &g.encoder.w_lv);
    e.b_lv.scaled_add(-lr, &g.encoder.b_lv);
    let d = &mut params.decoder;
    d.v.scaled_add(-lr, &g.decoder.v);
    d.c.scaled_add(-lr, &g.decoder.c);
    d.log_obs_var = d.log_obs_var - lr * g.decoder.log_obs_var;
    if train_kernel {
        params.kernel.raw_lengthscale = params.kernel.raw_lengthscale - lr * g.raw_lengthscale;
        params.kernel.raw_variance = params.kernel.raw_variance - lr * g.raw_variance;
    }
}

/// Plain gradient ascent on the β-ELBO.
///
/// Step `k` draws its minibatch and reparameterization noise from substream
/// `train/step/k`; the logged metrics use substream `train/eval`.
pub fn train<F: Scalar>(cfg: &TrainConfig<F>, data: &Dataset<F>) -> Result<TrainOutcome<F>, TrainError<F>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("dataset has no sequences".into()).into());
    }
    if data.grid.len() != cfg.seq_len || data.sequences.iter().any(|x| x.dim() != (cfg.seq_len, cfg.d_x)) {
        return Err(Error::DimensionMismatch("dataset shape differs from the training config".into()).into());
    }
    let all: Vec<ArrayView2<F>> = data.sequences.iter().map(|x| x.view()).collect();
    let eval_noise = draw_noise::<F, _>(&mut rng::substream(cfg.seed, "train/eval"), all.len(), cfg.seq_len, cfg.d_z);

    let mut params = ToyParams::init(cfg.d_x, cfg.d_z, cfg.kernel.clone(), cfg.seed);
    let mut history: Vec<StepMetrics<F>> = Vec::with_capacity(cfg.steps);
    let mut beta = cfg.schedule.beta_max;
    let mut observed = cfg.schedule.kl_target;

    for step in 0..cfg.steps {
        beta = cfg.schedule.step(step, beta, observed);
        let outcome = (|| -> Result<(StepMetrics<F>, ToyGradients<F>)> {
            let m = evaluate(&params, &all, &eval_noise, &data.grid, beta, cfg.cap)?;
            let mut g = rng::substream(cfg.seed, &format!("train/step/{step}"));
            let batch: Vec<ArrayView2<F>> = if cfg.batch_size >= all.len() {
                all.clone()
            } else {
                let mut idx = index::sample(&mut g, all.len(), cfg.batch_size).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| all[i]).collect()
            };
            let noise = draw_noise(&mut g, batch.len(), cfg.seq_len, cfg.d_z);
            let (_, grads) = elbo_and_grads(&params, &batch, &noise, &data.grid, beta, cfg.cap)?;
            if grads.to_flat().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("gradient".into()));
            }
            let row = StepMetrics {
                step,
                elbo_tok: m.elbo_tok,
                ll_tok: m.ll_tok,
                kl_tok_raw: m.kl_tok_raw,
                kl_tok_capped: m.kl_tok_capped,
                beta,
                lengthscale: params.kernel.lengthscale(),
                variance: params.kernel.variance(),
            };
            Ok((row, grads))
        })();
        match outcome {
            Ok((row, grads)) => {
                observed = row.kl_tok_raw;
                history.push(row);
                apply_update(&mut params, &grads, cfg.learning_rate, cfg.train_kernel);
            }
            Err(cause) => {
                return Err(TrainError::Diverged { step, cause, last_good: Box::new(params), history });
            }
        }
    }
    Ok(TrainOutcome { params, history })
}

/// Latent prior of the reference synthetic data.
pub fn reference_data_kernel() -> KernelSpec<f64> {
    KernelSpec::rbf(0.25, 1.0).expect("valid").with_nugget(0.01)
}

/// Ground-truth decoder of the reference synthetic data (`d_z = 2`, `d_x = 4`).
pub fn reference_decoder() -> LinearDecoder<f64> {
    LinearDecoder {
        v: array![[1.0, 0.5, -0.3, 0.8], [-0.4, 0.9, 0.7, 0.2]],
        c: array![0.2, -0.1, 0.0, 0.3],
        log_obs_var: (0.05f64).ln(),
    }
}

/// Steps of the reference run.
pub const REFERENCE_STEPS: usize = 1000;

/// Reference run: 64 sequences of length 32, GP prior initialized at
/// `ℓ = 0.5`, full-batch gradient ascent on the plain (`β = 1`, uncapped)
/// ELBO so that the logged objective is the one being optimized.
pub fn reference_config(seed: u64, steps: usize) -> TrainConfig<f64> {
    TrainConfig {
        steps,
        batch_size: 64,
        learning_rate: 0.01,
        seed,
        seq_len: 32,
        d_z: 2,
        d_x: 4,
        kernel: KernelSpec::rbf(0.5, 1.0).expect("valid").with_nugget(0.01),
        schedule: BetaSchedule::constant(1.0).expect("valid"),
        cap: KlCap::none(),
        train_kernel: true,
    }
}

/// The isotropic-prior ablation of [`reference_config`]: `K = σ² I`.
pub fn isotropic_ablation(cfg: &TrainConfig<f64>) -> TrainConfig<f64> {
    let mut out = cfg.clone();
    out.kernel = KernelSpec::new(KernelFamily::White, 1.0, cfg.kernel.variance())
        .expect("valid")
        .with_nugget(cfg.kernel.nugget_rel);
    out
}

pub fn reference_dataset(seed: u64) -> Result<Dataset<f64>> {
    synth_dataset(&reference_data_kernel(), &reference_decoder(), 64, 32, seed)
}

/// Paired GP-prior and isotropic-prior runs on identical data and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRun {
    pub gp: TrainOutcome<f64>,
    pub isotropic: TrainOutcome<f64>,
}

pub fn reference_run(seed: u64, steps: usize) -> Result<ReferenceRun> {
    let data = reference_dataset(seed)?;
    let cfg = reference_config(seed, steps);
    let unwrap = |r: Result<TrainOutcome<f64>, TrainError<f64>>| match r {
        Ok(o) => Ok(o),
        Err(TrainError::Setup(e)) => Err(e),
        Err(TrainError::Diverged { cause, .. }) => Err(cause),
    };
    let gp = unwrap(train(&cfg, &data))?;
    let isotropic = unwrap(train(&isotropic_ablation(&cfg), &data))?;
    Ok(ReferenceRun { gp, isotropic })
}
