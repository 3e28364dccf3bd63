use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use super::{LinearDecoder, LinearEncoder, ToyParams};
use crate::kernels::{build_gram, sigmoid, GramMatrix, TimeGrid};
use crate::variational::{elbo, kl_capped, kl_to_gp_prior, DiagonalPosterior, KlCap, LOGVAR_CLAMP};
use crate::{Error, Result, Scalar};

/// Batch averages of the per-token quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMetrics<F> {
    pub elbo_tok: F,
    pub ll_tok: F,
    pub kl_tok_raw: F,
    pub kl_tok_capped: F,
    pub loss: F,
}

/// `d loss / d params`, same layout as [`ToyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGradients<F> {
    pub encoder: LinearEncoder<F>,
    pub decoder: LinearDecoder<F>,
    pub raw_lengthscale: F,
    pub raw_variance: F,
}

impl<F: Scalar> ToyGradients<F> {
    fn zeros(d_x: usize, d_z: usize) -> Self {
        ToyGradients {
            encoder: LinearEncoder::zeros(d_x, d_z),
            decoder: LinearDecoder { v: Array2::zeros((d_z, d_x)), c: Array1::zeros(d_x), log_obs_var: F::zero() },
            raw_lengthscale: F::zero(),
            raw_variance: F::zero(),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        self.encoder.w_mu += &other.encoder.w_mu;
        self.encoder.b_mu += &other.encoder.b_mu;
        self.encoder.w_lv += &other.encoder.w_lv;
        self.encoder.b_lv += &other.encoder.b_lv;
        self.decoder.v += &other.decoder.v;
        self.decoder.c += &other.decoder.c;
        self.decoder.log_obs_var = self.decoder.log_obs_var + other.decoder.log_obs_var;
    }

    /// Flattened in [`super::param_blocks`] order.
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
            .chain([d.log_obs_var, self.raw_lengthscale, self.raw_variance])
            .collect()
    }
}

struct SequenceTerms<F> {
    ll_tok: F,
    kl_tok: F,
    kl_capped: F,
    loss: F,
    grads: Option<ToyGradients<F>>,
    /// `w (D + M M^T)` for the kernel gradient, with `w = β 1[KL < cap] / L`.
    kernel_load: Option<(F, Array2<F>)>,
}

fn inside_clamp<F: Scalar>(v: F) -> F {
    if v.abs() < F::lit(LOGVAR_CLAMP) {
        F::one()
    } else {
        F::zero()
    }
}

fn sequence_terms<F: Scalar>(
    params: &ToyParams<F>,
    x: ArrayView2<F>,
    eps: &Array2<F>,
    gram: &GramMatrix<F>,
    k_inv: Option<&Array2<F>>,
    beta: F,
    cap: KlCap<F>,
) -> Result<SequenceTerms<F>> {
    let enc = &params.encoder;
    let dec = &params.decoder;
    let len = x.nrows();
    let d_x = x.ncols();
    let n = F::from_usize_lossy(len);
    let two = F::lit(2.0);
    let half = F::lit(0.5);

    let mu = x.dot(&enc.w_mu) + &enc.b_mu;
    let lv_pre = x.dot(&enc.w_lv) + &enc.b_lv;
    let q = DiagonalPosterior::new(mu, lv_pre.clone())?;
    let z = q.reparameterize(eps)?;
    let resid = &x - &dec.decode(z.view());
    let s_obs = dec.obs_var();
    let sq = resid.iter().map(|r| *r * *r).sum::<F>();
    let ll_tok = (-(n * F::from_usize_lossy(d_x) / two) * (F::lit(2.0 * std::f64::consts::PI) * s_obs).ln()
        - sq / (two * s_obs))
        / n;
    if !ll_tok.is_finite() {
        return Err(Error::NonFinite("reconstruction log-likelihood".into()));
    }
    let kl_tok = kl_to_gp_prior(&q, gram)? / n;
    if !kl_tok.is_finite() {
        return Err(Error::NonFinite("KL to the GP prior".into()));
    }
    let capped = kl_capped(kl_tok, cap);
    let loss = elbo(ll_tok, kl_tok, beta, cap).loss_train;

    let Some(k_inv) = k_inv else {
        return Ok(SequenceTerms { ll_tok, kl_tok, kl_capped: capped, loss, grads: None, kernel_load: None });
    };

    // reconstruction: d(-ll_tok)/d xhat = -R / (s L)
    let g_xhat = resid.mapv(|r| -r / (s_obs * n));
    let g_v = z.t().dot(&g_xhat);
    let g_c = g_xhat.sum_axis(Axis(0));
    let g_lov = (F::from_usize_lossy(d_x) / two - sq / (two * s_obs * n)) * inside_clamp(dec.log_obs_var);
    let g_z = g_xhat.dot(&dec.v.t());

    let sd = q.logvar().mapv(|lv| (half * lv).exp());
    let mut g_mu = g_z.clone();
    let mut g_lv = &g_z * eps * &sd * half;

    // KL enters only through β·min(KL/L, cap)
    let kl_weight = if beta != F::zero() && kl_tok < cap.value() { beta / n } else { F::zero() };
    let mut kernel_load = None;
    if kl_weight != F::zero() {
        let mu = q.mu();
        g_mu.scaled_add(kl_weight, &k_inv.dot(mu));
        let k_inv_diag = k_inv.diag();
        Zip::indexed(&mut g_lv).and(q.logvar()).for_each(|(t, _), g, lv| {
            *g = *g + kl_weight * half * (k_inv_diag[t] * lv.exp() - F::one());
        });
        let mut load = mu.dot(&mu.t());
        let s_rows = q.logvar().mapv(|lv| lv.exp()).sum_axis(Axis(1));
        for (t, s) in s_rows.iter().enumerate() {
            load[[t, t]] = load[[t, t]] + *s;
        }
        kernel_load = Some((kl_weight, load * kl_weight));
    }
    Zip::from(&mut g_lv).and(&lv_pre).for_each(|g, pre| *g = *g * inside_clamp(*pre));

    let grads = ToyGradients {
        encoder: LinearEncoder {
            w_mu: x.t().dot(&g_mu),
            b_mu: g_mu.sum_axis(Axis(0)),
            w_lv: x.t().dot(&g_lv),
            b_lv: g_lv.sum_axis(Axis(0)),
        },
        decoder: LinearDecoder { v: g_v, c: g_c, log_obs_var: g_lov },
        raw_lengthscale: F::zero(),
        raw_variance: F::zero(),
    };
    Ok(SequenceTerms { ll_tok, kl_tok, kl_capped: capped, loss, grads: Some(grads), kernel_load })
}

fn run<F: Scalar>(
    params: &ToyParams<F>,
    xs: &[ArrayView2<F>],
    eps: &[Array2<F>],
    grid: &TimeGrid<F>,
    beta: F,
    cap: KlCap<F>,
    want_grads: bool,
) -> Result<(BatchMetrics<F>, Option<ToyGradients<F>>)> {
    if xs.is_empty() {
        return Err(Error::Empty("batch has no sequences".into()));
    }
    if xs.len() != eps.len() {
        return Err(Error::DimensionMismatch("one noise block per sequence required".into()));
    }
    let (d_x, d_z) = (params.d_x(), params.d_z());
    for (x, e) in xs.iter().zip(eps) {
        if x.dim() != (grid.len(), d_x) || e.dim() != (grid.len(), d_z) {
            return Err(Error::DimensionMismatch(format!(
                "sequence {:?} / noise {:?} do not match L = {}, d_x = {d_x}, d_z = {d_z}",
                x.dim(),
                e.dim(),
                grid.len()
            )));
        }
    }
    let gram = build_gram(&params.kernel, grid)?;
    let k_inv = want_grads.then(|| gram.inverse());

    // ordered collect keeps the reduction independent of thread count
    let terms: Vec<SequenceTerms<F>> = xs
        .par_iter()
        .zip(eps.par_iter())
        .map(|(x, e)| sequence_terms(params, *x, e, &gram, k_inv.as_ref(), beta, cap))
        .collect::<Result<_>>()?;

    let b = F::from_usize_lossy(terms.len());
    let mean = |f: &dyn Fn(&SequenceTerms<F>) -> F| terms.iter().map(f).sum::<F>() / b;
    let ll_tok = mean(&|t| t.ll_tok);
    let kl_tok_raw = mean(&|t| t.kl_tok);
    let metrics = BatchMetrics {
        elbo_tok: ll_tok - kl_tok_raw,
        ll_tok,
        kl_tok_raw,
        kl_tok_capped: mean(&|t| t.kl_capped),
        loss: mean(&|t| t.loss),
    };
    if !metrics.loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let Some(k_inv) = k_inv else {
        return Ok((metrics, None));
    };

    let mut grads = ToyGradients::zeros(d_x, d_z);
    let mut weight = F::zero();
    let mut load = Array2::<F>::zeros((grid.len(), grid.len()));
    for t in &terms {
        grads.add_assign(t.grads.as_ref().expect("gradients requested"));
        if let Some((w, l)) = &t.kernel_load {
            weight = weight + *w;
            load += l;
        }
    }
    let inv_b = F::one() / b;
    grads.encoder.w_mu *= inv_b;
    grads.encoder.b_mu *= inv_b;
    grads.encoder.w_lv *= inv_b;
    grads.encoder.b_lv *= inv_b;
    grads.decoder.v *= inv_b;
    grads.decoder.c *= inv_b;
    grads.decoder.log_obs_var = grads.decoder.log_obs_var * inv_b;

    if weight != F::zero() {
        // dKL/dK = ½ (d K^{-1} - K^{-1} (D + M M^T) K^{-1}), weighted and batch-averaged
        let half = F::lit(0.5);
        let d = F::from_usize_lossy(d_z);
        let sandwich = k_inv.dot(&load).dot(&k_inv);
        let g_k = (&k_inv * (weight * d) - &sandwich) * (half * inv_b);

        let spec = &params.kernel;
        let var = spec.variance();
        let times = grid.times();
        let jitter = spec.jitter_abs;
        let k = gram.matrix();
        let mut g_var = F::zero();
        let mut g_ell = F::zero();
        for ((i, j), g) in g_k.indexed_iter() {
            let model = if i == j { k[[i, j]] - jitter } else { k[[i, j]] };
            g_var = g_var + *g * model / var;
            g_ell = g_ell + *g * spec.d_lengthscale_lag((times[i] - times[j]).abs());
        }
        grads.raw_variance = g_var * sigmoid(spec.raw_variance);
        grads.raw_lengthscale = g_ell * sigmoid(spec.raw_lengthscale);
    }
    Ok((metrics, Some(grads)))
}

/// Batch metrics and the analytic gradient of the mean training loss.
///
/// `eps[i]` is the reparameterization noise for sequence `xs[i]`; the prior
/// Gram matrix is rebuilt from `params.kernel` on `grid`.
pub fn elbo_and_grads<F: Scalar>(
    params: &ToyParams<F>,
    xs: &[ArrayView2<F>],
    eps: &[Array2<F>],
    grid: &TimeGrid<F>,
    beta: F,
    cap: KlCap<F>,
) -> Result<(BatchMetrics<F>, ToyGradients<F>)> {
    let (m, g) = run(params, xs, eps, grid, beta, cap, true)?;
    Ok((m, g.expect("gradients requested")))
}

/// Metrics only.
pub fn evaluate<F: Scalar>(
    params: &ToyParams<F>,
    xs: &[ArrayView2<F>],
    eps: &[Array2<F>],
    grid: &TimeGrid<F>,
    beta: F,
    cap: KlCap<F>,
) -> Result<BatchMetrics<F>> {
    Ok(run(params, xs, eps, grid, beta, cap, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelFamily, KernelSpec};
    use crate::toy_model::ToyParams;

    #[test]
    fn beta_zero_removes_kl_from_loss_and_kernel_gradient() {
        let grid = TimeGrid::linspace_open(5).unwrap();
        let p = ToyParams::init(3, 2, KernelSpec::rbf(0.4, 1.0).unwrap(), 1);
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 * 0.3 - j as f64 * 0.2).sin());
        let eps = vec![Array2::from_elem((5, 2), 0.1)];
        let (m, g) = elbo_and_grads(&p, &[x.view()], &eps, &grid, 0.0, KlCap::none()).unwrap();
        assert_eq!(m.loss, -m.ll_tok);
        assert_eq!(g.raw_lengthscale, 0.0);
        assert_eq!(g.raw_variance, 0.0);
    }

    #[test]
    fn zero_encoder_under_identity_prior_has_no_kl_pull_on_mean() {
        let grid = TimeGrid::linspace_open(4).unwrap();
        let white = KernelSpec::new(KernelFamily::White, 1.0, 1.0).unwrap().with_jitter(0.0);
        let mut p = ToyParams::init(2, 2, white, 3);
        p.encoder = LinearEncoder::zeros(2, 2);
        // variance = softplus(raw) must be exactly 1 for q to equal the prior
        p.kernel.raw_variance = crate::kernels::softplus_inv(1.0);
        p.decoder.v.fill(0.0);
        let x = Array2::<f64>::zeros((4, 2));
        let eps = vec![Array2::zeros((4, 2))];
        let (_, g) = elbo_and_grads(&p, &[x.view()], &eps, &grid, 1.0, KlCap::none()).unwrap();
        assert!(g.encoder.b_mu.iter().all(|v| v.abs() < 1e-12));
        assert!(g.encoder.w_mu.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn exact_decoder_has_zero_output_gradient() {
        let grid = TimeGrid::linspace_open(3).unwrap();
        let mut p = ToyParams::init(2, 2, KernelSpec::rbf(0.5_f64, 1.0).unwrap(), 5);
        p.decoder.v = Array2::eye(2);
        p.decoder.c = Array1::zeros(2);
        let z = ndarray::array![[0.3, -0.2], [0.1, 0.4], [-0.5, 0.0]];
        // zero noise: z equals the encoder mean; pick the encoder so the mean equals the data
        p.encoder = LinearEncoder::zeros(2, 2);
        p.encoder.w_mu = Array2::eye(2);
        let eps = vec![Array2::zeros((3, 2))];
        let (_, g) = elbo_and_grads(&p, &[z.view()], &eps, &grid, 0.0, KlCap::none()).unwrap();
        assert!(g.decoder.v.iter().chain(g.decoder.c.iter()).all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn shape_errors() {
        let grid = TimeGrid::linspace_open(3).unwrap();
        let p = ToyParams::init(2, 2, KernelSpec::rbf(0.5, 1.0).unwrap(), 5);
        let x = Array2::<f64>::zeros((4, 2));
        let eps = vec![Array2::zeros((3, 2))];
        assert!(elbo_and_grads(&p, &[x.view()], &eps, &grid, 1.0, KlCap::none()).is_err());
        assert!(elbo_and_grads(&p, &[], &[], &grid, 1.0, KlCap::none()).is_err());
    }
}
