//! Diagonal posterior, KL to the correlated prior, β control and the ELBO.

use ndarray::Array2;
use rand::Rng;

use crate::kernels::GramMatrix;
use crate::latent_prior::{joint_logdensity, LatentTrajectory};
use crate::{linalg, rng, Error, Result, Scalar};

/// Log-variances are clamped to this symmetric range before exponentiation.
pub const LOGVAR_CLAMP: f64 = 30.0;

pub fn clamp_logvar<F: Scalar>(v: F) -> F {
    let c = F::lit(LOGVAR_CLAMP);
    v.max(-c).min(c)
}

/// `q(z_{1:L}) = prod_t N(μ_t, diag(exp(logvar_t)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalPosterior<F> {
    mu: Array2<F>,
    logvar: Array2<F>,
}

impl<F: Scalar> DiagonalPosterior<F> {
    /// Checks shapes and finiteness, then clamps `logvar`.
    pub fn new(mu: Array2<F>, logvar: Array2<F>) -> Result<Self> {
        if mu.dim() != logvar.dim() {
            return Err(Error::DimensionMismatch(format!(
                "mu is {:?}, logvar is {:?}",
                mu.dim(),
                logvar.dim()
            )));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior mean".into()));
        }
        if logvar.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior log-variance".into()));
        }
        Ok(DiagonalPosterior { mu, logvar: logvar.mapv(clamp_logvar) })
    }

    pub fn mu(&self) -> &Array2<F> {
        &self.mu
    }

    pub fn logvar(&self) -> &Array2<F> {
        &self.logvar
    }

    pub fn len(&self) -> usize {
        self.mu.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.mu.ncols()
    }

    /// Reparameterized draw `μ + exp(logvar / 2) ⊙ ε`.
    pub fn reparameterize(&self, eps: &Array2<F>) -> Result<Array2<F>> {
        if eps.dim() != self.mu.dim() {
            return Err(Error::DimensionMismatch("noise shape differs from posterior".into()));
        }
        let half = F::lit(0.5);
        let mut z = self.logvar.mapv(|lv| (half * lv).exp());
        z *= eps;
        z += &self.mu;
        Ok(z)
    }

    /// `log q(z)`.
    pub fn log_density(&self, z: &Array2<F>) -> F {
        let half = F::lit(0.5);
        let log_2pi = F::lit(2.0 * std::f64::consts::PI).ln();
        let mut acc = F::zero();
        for ((m, lv), x) in self.mu.iter().zip(self.logvar.iter()).zip(z.iter()) {
            let d = *x - *m;
            acc = acc - half * (log_2pi + *lv + d * d / lv.exp());
        }
        acc
    }
}

/// `KL(q || N(0, K ⊗ I_d))` in nats for the whole trajectory.
///
/// Uses the cached factor: the trace term needs `diag(K^{-1})` and the
/// Mahalanobis term is `||C^{-1} M||_F^2`.
pub fn kl_to_gp_prior<F: Scalar>(q: &DiagonalPosterior<F>, gram: &GramMatrix<F>) -> Result<F> {
    if q.len() != gram.len() {
        return Err(Error::DimensionMismatch(format!(
            "posterior has {} steps, Gram matrix is {}x{}",
            q.len(),
            gram.len(),
            gram.len()
        )));
    }
    let inv_diag = gram.inverse_diagonal();
    let mut trace = F::zero();
    let mut sum_logvar = F::zero();
    for ((t, _), lv) in q.logvar.indexed_iter() {
        trace = trace + inv_diag[t] * lv.exp();
        sum_logvar = sum_logvar + *lv;
    }
    let white = linalg::solve_lower_mat(gram.chol(), q.mu.view())?;
    let maha = white.iter().map(|v| *v * *v).sum::<F>();
    let n = F::from_usize_lossy(q.len());
    let d = F::from_usize_lossy(q.dim());
    Ok(F::lit(0.5) * (trace + maha - n * d + d * gram.logdet() - sum_logvar))
}

pub fn kl_per_token<F: Scalar>(q: &DiagonalPosterior<F>, gram: &GramMatrix<F>) -> Result<F> {
    Ok(kl_to_gp_prior(q, gram)? / F::from_usize_lossy(q.len()))
}

/// Closed-form `KL(q || N(0, σ² I))`.
pub fn kl_isotropic_special_case<F: Scalar>(q: &DiagonalPosterior<F>, sigma2: F) -> Result<F> {
    if !(sigma2 > F::zero() && sigma2.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma2 must be positive, got {sigma2}")));
    }
    let log_s2 = sigma2.ln();
    let total = q
        .mu
        .iter()
        .zip(q.logvar.iter())
        .map(|(m, lv)| (lv.exp() + *m * *m) / sigma2 - F::one() + log_s2 - *lv)
        .sum::<F>();
    Ok(F::lit(0.5) * total)
}

/// Monte-Carlo estimate of `E_q[log q - log p]` and its standard error.
pub fn kl_monte_carlo<F: Scalar, R: Rng + ?Sized>(
    q: &DiagonalPosterior<F>,
    gram: &GramMatrix<F>,
    n_samples: usize,
    rng: &mut R,
) -> Result<(F, F)> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument("need at least two Monte-Carlo samples".into()));
    }
    let mut sum = 0.0_f64;
    let mut sum_sq = 0.0_f64;
    for _ in 0..n_samples {
        let eps = rng::standard_normal_matrix(rng, q.len(), q.dim());
        let z = q.reparameterize(&eps)?;
        let log_q = q.log_density(&z);
        let log_p = joint_logdensity(gram, &LatentTrajectory::new(z)?)?;
        let v = (log_q - log_p).to_f64_lossy();
        sum += v;
        sum_sq += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok((F::lit(mean), F::lit((var / n).sqrt())))
}

/// Upper clamp on the per-token KL inside the training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlCap<F>(F);

impl<F: Scalar> KlCap<F> {
    /// `cap` may be `+inf` (no clamp) but must be positive.
    pub fn new(cap: F) -> Result<Self> {
        if !(cap > F::zero()) || cap.is_nan() {
            return Err(Error::InvalidArgument(format!("KL cap must be positive, got {cap}")));
        }
        Ok(KlCap(cap))
    }

    pub fn none() -> Self {
        KlCap(F::infinity())
    }

    pub fn value(&self) -> F {
        self.0
    }
}

/// `min(kl_tok, cap)`.
pub fn kl_capped<F: Scalar>(kl_tok: F, cap: KlCap<F>) -> F {
    kl_tok.min(cap.0)
}

/// Linear warm-up to `beta_max`, then a multiplicative controller that
/// pushes the observed KL/token toward `kl_target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSchedule<F> {
    pub beta_max: F,
    pub warmup_steps: usize,
    pub kl_target: F,
    pub adapt_rate: F,
    pub beta_min: F,
}

impl<F: Scalar> BetaSchedule<F> {
    pub fn new(beta_max: F, warmup_steps: usize, kl_target: F, adapt_rate: F, beta_min: F) -> Result<Self> {
        let s = BetaSchedule { beta_max, warmup_steps, kl_target, adapt_rate, beta_min };
        s.validate()?;
        Ok(s)
    }

    /// Controller defaults: `η = 0.01`, `beta_min = 1e-4`.
    pub fn with_defaults(beta_max: F, warmup_steps: usize, kl_target: F) -> Result<Self> {
        Self::new(beta_max, warmup_steps, kl_target, F::lit(0.01), F::lit(1e-4))
    }

    /// Constant `β` (no warm-up, no adaptation).
    pub fn constant(beta: F) -> Result<Self> {
        Self::new(beta, 0, F::one(), F::zero(), beta)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.beta_max > F::zero()
            && self.beta_min > F::zero()
            && self.beta_min <= self.beta_max
            && self.kl_target > F::zero()
            && self.adapt_rate >= F::zero()
            && [self.beta_max, self.beta_min, self.kl_target, self.adapt_rate].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid beta schedule {self:?}")))
        }
    }

    /// `β` for `step` given the previous value and the last observed KL/token.
    pub fn step(&self, step: usize, current_beta: F, observed_kl_tok: F) -> F {
        let raw = if step < self.warmup_steps {
            self.beta_max * F::from_usize_lossy(step) / F::from_usize_lossy(self.warmup_steps)
        } else {
            let drift = self.adapt_rate * (observed_kl_tok - self.kl_target);
            let next = current_beta * drift.exp();
            if next.is_nan() {
                current_beta
            } else {
                next
            }
        };
        raw.max(self.beta_min).min(self.beta_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms<F> {
    /// `ll/token - KL/token`.
    pub elbo_pure: F,
    /// `-(ll/token - β min(KL/token, cap))`.
    pub loss_train: F,
}

pub fn elbo<F: Scalar>(loglik_per_token: F, kl_tok: F, beta: F, cap: KlCap<F>) -> ElboTerms<F> {
    ElboTerms {
        elbo_pure: loglik_per_token - kl_tok,
        loss_train: -(loglik_per_token - beta * kl_capped(kl_tok, cap)),
    }
}
