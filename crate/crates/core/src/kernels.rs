//! Stationary covariance kernels on the unit interval and their Gram matrices.

use std::sync::OnceLock;

use ndarray::{Array1, Array2};

use crate::linalg::{self, LowerTriangular};
use crate::{Error, Result, Scalar};

/// Numerically stable `log(1 + e^x)`.
pub fn softplus<F: Scalar>(x: F) -> F {
    if x > F::lit(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv<F: Scalar>(y: F) -> F {
    if y > F::lit(30.0) {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Derivative of [`softplus`].
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// One component of a spectral-mixture kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureComponent<F> {
    pub weight: F,
    pub mean: F,
    pub scale: F,
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelFamily<F> {
    Rbf,
    Matern12,
    Matern32,
    Matern52,
    /// `sum_q w_q exp(-2 pi^2 tau^2 s_q^2) cos(2 pi mu_q tau)`, scaled by the
    /// variance. Ignores the lengthscale.
    SpectralMixture(Vec<MixtureComponent<F>>),
    /// `variance * [t == s]`: the isotropic prior `K = variance * I`.
    White,
}

impl<F> KernelFamily<F> {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Rbf => "rbf",
            KernelFamily::Matern12 => "matern12",
            KernelFamily::Matern32 => "matern32",
            KernelFamily::Matern52 => "matern52",
            KernelFamily::SpectralMixture(_) => "spectral_mixture",
            KernelFamily::White => "white",
        }
    }
}

/// Kernel family plus hyperparameters.
///
/// Lengthscale and variance are stored unconstrained and mapped through
/// [`softplus`]. `nugget_rel` is part of the model (scaled by the variance);
/// `jitter_abs` is a purely numerical diagonal addition.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec<F> {
    pub family: KernelFamily<F>,
    pub raw_lengthscale: F,
    pub raw_variance: F,
    pub nugget_rel: F,
    pub jitter_abs: F,
}

/// Default jitter relative to the variance.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-6;

impl<F: Scalar> KernelSpec<F> {
    /// Spec from constrained `lengthscale` and `variance`, no nugget, and the
    /// default jitter `1e-6 * variance`.
    pub fn new(family: KernelFamily<F>, lengthscale: F, variance: F) -> Result<Self> {
        if !(lengthscale > F::zero() && lengthscale.is_finite()) {
            return Err(Error::InvalidSpec(format!("lengthscale must be positive, got {lengthscale}")));
        }
        if !(variance > F::zero() && variance.is_finite()) {
            return Err(Error::InvalidSpec(format!("variance must be positive, got {variance}")));
        }
        let spec = KernelSpec {
            family,
            raw_lengthscale: softplus_inv(lengthscale),
            raw_variance: softplus_inv(variance),
            nugget_rel: F::zero(),
            jitter_abs: F::lit(DEFAULT_RELATIVE_JITTER) * variance,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_raw(
        family: KernelFamily<F>,
        raw_lengthscale: F,
        raw_variance: F,
        nugget_rel: F,
        jitter_abs: F,
    ) -> Result<Self> {
        let spec = KernelSpec { family, raw_lengthscale, raw_variance, nugget_rel, jitter_abs };
        spec.validate()?;
        Ok(spec)
    }

    pub fn rbf(lengthscale: F, variance: F) -> Result<Self> {
        Self::new(KernelFamily::Rbf, lengthscale, variance)
    }

    pub fn with_nugget(mut self, nugget_rel: F) -> Self {
        self.nugget_rel = nugget_rel;
        self
    }

    pub fn with_jitter(mut self, jitter_abs: F) -> Self {
        self.jitter_abs = jitter_abs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |name: &str, v: F| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidSpec(format!("{name} is not finite")))
            }
        };
        finite("raw_lengthscale", self.raw_lengthscale)?;
        finite("raw_variance", self.raw_variance)?;
        finite("nugget_rel", self.nugget_rel)?;
        finite("jitter_abs", self.jitter_abs)?;
        if self.nugget_rel < F::zero() {
            return Err(Error::InvalidSpec("nugget_rel must be >= 0".into()));
        }
        if self.jitter_abs < F::zero() {
            return Err(Error::InvalidSpec("jitter_abs must be >= 0".into()));
        }
        if let KernelFamily::SpectralMixture(components) = &self.family {
            if components.is_empty() {
                return Err(Error::InvalidSpec("spectral mixture needs at least one component".into()));
            }
            for (q, c) in components.iter().enumerate() {
                finite("mixture weight", c.weight)?;
                finite("mixture mean", c.mean)?;
                finite("mixture scale", c.scale)?;
                if c.weight < F::zero() {
                    return Err(Error::InvalidSpec(format!("mixture weight {q} is negative")));
                }
            }
        }
        Ok(())
    }

    /// `(lengthscale, variance)` after the softplus map.
    pub fn constrain(&self) -> (F, F) {
        (softplus(self.raw_lengthscale), softplus(self.raw_variance))
    }

    pub fn lengthscale(&self) -> F {
        softplus(self.raw_lengthscale)
    }

    pub fn variance(&self) -> F {
        softplus(self.raw_variance)
    }

    /// Amount added to every Gram diagonal entry: `variance * nugget + jitter`.
    pub fn diagonal_addition(&self) -> F {
        self.variance() * self.nugget_rel + self.jitter_abs
    }

    /// Off-grid kernel value `k(t, s)` without nugget or jitter.
    pub fn eval(&self, t: F, s: F) -> Result<F> {
        self.validate()?;
        for x in [t, s] {
            if !(x.is_finite() && x >= F::zero() && x <= F::one()) {
                return Err(Error::InvalidGrid(format!("time {x} outside [0, 1]")));
            }
        }
        Ok(self.eval_lag((t - s).abs()))
    }

    /// Kernel as a function of the absolute lag. Assumes a validated spec.
    pub fn eval_lag(&self, tau: F) -> F {
        let (ell, var) = self.constrain();
        let r = tau / ell;
        let three = F::lit(3.0).sqrt();
        let five = F::lit(5.0).sqrt();
        match &self.family {
            KernelFamily::Rbf => var * (-(r * r) / F::lit(2.0)).exp(),
            KernelFamily::Matern12 => var * (-r).exp(),
            KernelFamily::Matern32 => var * (F::one() + three * r) * (-three * r).exp(),
            KernelFamily::Matern52 => {
                var * (F::one() + five * r + F::lit(5.0) * r * r / F::lit(3.0)) * (-five * r).exp()
            }
            KernelFamily::SpectralMixture(components) => {
                let two_pi = F::lit(2.0 * std::f64::consts::PI);
                let two_pi2 = F::lit(2.0 * std::f64::consts::PI * std::f64::consts::PI);
                var * components
                    .iter()
                    .map(|c| {
                        c.weight
                            * (-two_pi2 * tau * tau * c.scale * c.scale).exp()
                            * (two_pi * c.mean * tau).cos()
                    })
                    .sum::<F>()
            }
            KernelFamily::White => {
                if tau == F::zero() {
                    var
                } else {
                    F::zero()
                }
            }
        }
    }

    /// `d k(tau) / d lengthscale` (constrained lengthscale).
    pub fn d_lengthscale_lag(&self, tau: F) -> F {
        let (ell, var) = self.constrain();
        let r = tau / ell;
        let three = F::lit(3.0).sqrt();
        let five = F::lit(5.0).sqrt();
        // dk/dr, then dr/dell = -r / ell
        let dk_dr = match &self.family {
            KernelFamily::Rbf => -var * r * (-(r * r) / F::lit(2.0)).exp(),
            KernelFamily::Matern12 => -var * (-r).exp(),
            KernelFamily::Matern32 => -F::lit(3.0) * var * r * (-three * r).exp(),
            KernelFamily::Matern52 => {
                -var * F::lit(5.0) / F::lit(3.0) * r * (F::one() + five * r) * (-five * r).exp()
            }
            KernelFamily::SpectralMixture(_) | KernelFamily::White => return F::zero(),
        };
        dk_dr * (-r / ell)
    }
}

/// Ordered evaluation times of the latent process.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<F> {
    times: Vec<F>,
}

impl<F: Scalar> TimeGrid<F> {
    /// Strictly increasing times in `(0, 1]`.
    pub fn new(times: Vec<F>) -> Result<Self> {
        Self::checked(times, false)
    }

    /// `1/L, 2/L, ..., 1`.
    pub fn linspace_open(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidGrid("grid needs at least one point".into()));
        }
        let n = F::from_usize_lossy(len);
        Self::new((1..=len).map(|i| F::from_usize_lossy(i) / n).collect())
    }

    /// `linspace(0, 1, L)`, including `t = 0`. Compatibility grid; the only
    /// constructor that admits a zero time.
    pub fn linspace_unit(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidGrid("grid needs at least one point".into()));
        }
        let times = if len == 1 {
            vec![F::zero()]
        } else {
            let denom = F::from_usize_lossy(len - 1);
            (0..len).map(|i| F::from_usize_lossy(i) / denom).collect()
        };
        Self::checked(times, true)
    }

    fn checked(times: Vec<F>, allow_zero: bool) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidGrid("grid needs at least one point".into()));
        }
        for (i, &t) in times.iter().enumerate() {
            let low_ok = if allow_zero { t >= F::zero() } else { t > F::zero() };
            if !(t.is_finite() && low_ok && t <= F::one()) {
                return Err(Error::InvalidGrid(format!("time {i} = {t} outside (0, 1]")));
            }
            if i > 0 && times[i - 1] >= t {
                return Err(Error::InvalidGrid(format!("times not strictly increasing at index {i}")));
            }
        }
        Ok(TimeGrid { times })
    }

    pub fn times(&self) -> &[F] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Kernel matrix plus diagonal nugget: the model covariance on the grid,
/// without numerical jitter.
pub fn model_covariance<F: Scalar>(spec: &KernelSpec<F>, grid: &TimeGrid<F>) -> Result<Array2<F>> {
    spec.validate()?;
    let t = grid.times();
    let n = t.len();
    let nugget = spec.variance() * spec.nugget_rel;
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        k[[i, i]] = spec.eval_lag(F::zero()) + nugget;
        for j in 0..i {
            let v = spec.eval_lag((t[i] - t[j]).abs());
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    Ok(k)
}

/// Symmetric positive-definite temporal covariance with its Cholesky factor.
#[derive(Debug)]
pub struct GramMatrix<F> {
    k: Array2<F>,
    chol: LowerTriangular<F>,
    inv_diag: OnceLock<Array1<F>>,
}

impl<F: Scalar> Clone for GramMatrix<F> {
    fn clone(&self) -> Self {
        GramMatrix { k: self.k.clone(), chol: self.chol.clone(), inv_diag: OnceLock::new() }
    }
}

impl<F: Scalar> GramMatrix<F> {
    /// Factor an explicit covariance (e.g. loaded from disk).
    pub fn from_matrix(k: Array2<F>) -> Result<Self> {
        let k = linalg::symmetrized(k.view())?;
        let chol = linalg::cholesky(k.view())?;
        Ok(GramMatrix { k, chol, inv_diag: OnceLock::new() })
    }

    /// `sigma2 * I`.
    pub fn isotropic(len: usize, sigma2: F) -> Result<Self> {
        if !(sigma2 > F::zero() && sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma2 must be positive, got {sigma2}")));
        }
        Self::from_matrix(Array2::eye(len) * sigma2)
    }

    pub fn matrix(&self) -> &Array2<F> {
        &self.k
    }

    pub fn chol(&self) -> &LowerTriangular<F> {
        &self.chol
    }

    pub fn len(&self) -> usize {
        self.k.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.nrows() == 0
    }

    pub fn logdet(&self) -> F {
        linalg::logdet_from_chol(&self.chol)
    }

    /// Diagonal of `K^{-1}`, computed once from the factor.
    pub fn inverse_diagonal(&self) -> &Array1<F> {
        self.inv_diag.get_or_init(|| {
            let linv = self.chol.inverse();
            // (K^{-1})_tt = sum_i (L^{-1})_{it}^2
            linv.columns().into_iter().map(|c| c.dot(&c)).collect()
        })
    }

    /// Explicit `K^{-1}` from the factor.
    pub fn inverse(&self) -> Array2<F> {
        let linv = self.chol.inverse();
        linv.t().dot(&linv)
    }
}

/// Gram matrix on `grid`: kernel values plus `variance * nugget + jitter` on
/// the diagonal, factored.
pub fn build_gram<F: Scalar>(spec: &KernelSpec<F>, grid: &TimeGrid<F>) -> Result<GramMatrix<F>> {
    let mut k = model_covariance(spec, grid)?;
    for i in 0..k.nrows() {
        k[[i, i]] = k[[i, i]] + spec.jitter_abs;
    }
    GramMatrix::from_matrix(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rbf(ell: f64, var: f64) -> KernelSpec<f64> {
        KernelSpec::rbf(ell, var).unwrap().with_jitter(0.0)
    }

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0_f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(100.0_f64) - 100.0).abs() < 1e-12);
        let tiny = softplus(-100.0_f64);
        assert!(tiny > 0.0 && tiny < 1e-40);
        for y in [1e-3_f64, 0.5, 1.0, 7.0, 45.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn sigmoid_is_softplus_derivative() {
        for x in [-40.0_f64, -3.0, 0.0, 0.7, 12.0] {
            let h = 1e-6;
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!((sigmoid(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn kernel_eval_examples() {
        let spec = rbf(1.0, 1.0);
        assert!((spec.eval(0.5, 0.5).unwrap() - 1.0).abs() < 1e-15);
        assert!((spec.eval(0.0, 1.0).unwrap() - 0.6065306597126334).abs() < 1e-12);
        let m12 = KernelSpec::new(KernelFamily::Matern12, 0.5_f64, 2.0).unwrap();
        assert!((m12.eval(0.3, 0.3).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn kernel_eval_rejects_non_finite_spec() {
        let mut spec = rbf(1.0, 1.0);
        spec.raw_variance = f64::NAN;
        assert!(matches!(spec.eval(0.1, 0.2), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn matern_closed_forms() {
        let tau = 0.3_f64;
        let ell = 0.4_f64;
        let r = tau / ell;
        let m32 = KernelSpec::new(KernelFamily::Matern32, ell, 1.0).unwrap();
        let m52 = KernelSpec::new(KernelFamily::Matern52, ell, 1.0).unwrap();
        let s3 = 3f64.sqrt() * r;
        let s5 = 5f64.sqrt() * r;
        assert!((m32.eval(0.1, 0.4).unwrap() - (1.0 + s3) * (-s3).exp()).abs() < 1e-14);
        assert!((m52.eval(0.1, 0.4).unwrap() - (1.0 + s5 + s5 * s5 / 3.0) * (-s5).exp()).abs() < 1e-14);
    }

    #[test]
    fn lengthscale_derivative_matches_finite_difference() {
        let families = [
            KernelFamily::Rbf,
            KernelFamily::Matern12,
            KernelFamily::Matern32,
            KernelFamily::Matern52,
        ];
        for family in families {
            for tau in [0.0, 0.05, 0.3, 0.9] {
                let ell = 0.37;
                let h = 1e-6;
                let at = |l: f64| KernelSpec::new(family.clone(), l, 1.3).unwrap().eval_lag(tau);
                let fd = (at(ell + h) - at(ell - h)) / (2.0 * h);
                let an = KernelSpec::new(family.clone(), ell, 1.3).unwrap().d_lengthscale_lag(tau);
                assert!((fd - an).abs() < 1e-7, "{} tau={tau}: {fd} vs {an}", family.name());
            }
        }
    }

    #[test]
    fn gram_examples() {
        let one = TimeGrid::new(vec![0.5]).unwrap();
        let g = build_gram(&rbf(1.0, 1.0), &one).unwrap();
        assert_eq!(g.matrix()[[0, 0]], 1.0);

        let unit = TimeGrid::linspace_unit(2).unwrap();
        let g = build_gram(&rbf(1.0, 1.0), &unit).unwrap();
        let c = (-0.5f64).exp();
        assert_eq!(g.matrix()[[0, 0]], 1.0);
        assert!((g.matrix()[[0, 1]] - c).abs() < 1e-15);
        assert_eq!(g.matrix()[[0, 1]], g.matrix()[[1, 0]]);
    }

    #[test]
    fn single_point_gram_is_variance_times_one_plus_nugget_plus_jitter() {
        let spec = KernelSpec::rbf(0.3_f64, 2.5).unwrap().with_nugget(0.1).with_jitter(1e-3);
        let g = build_gram(&spec, &TimeGrid::new(vec![1.0]).unwrap()).unwrap();
        let expected = 2.5 * (1.0 + 0.1) + 1e-3;
        assert!((g.matrix()[[0, 0]] - expected).abs() < 1e-14);
    }

    #[test]
    fn white_kernel_gives_scaled_identity() {
        let spec = KernelSpec::new(KernelFamily::White, 1.0, 2.0).unwrap().with_jitter(0.0);
        let g = build_gram(&spec, &TimeGrid::linspace_open(4).unwrap()).unwrap();
        assert!((g.matrix() - &(Array2::<f64>::eye(4) * 2.0)).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn not_positive_definite_reports_pivot() {
        // duplicated information without jitter: RBF with a huge lengthscale is numerically rank one
        let spec = rbf(1e4, 1.0);
        let err = build_gram(&spec, &TimeGrid::linspace_open(6).unwrap()).unwrap_err();
        match err {
            Error::NotPositiveDefinite { pivot, .. } => assert!(pivot >= 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn grids() {
        assert_eq!(TimeGrid::<f64>::linspace_open(4).unwrap().times(), &[0.25, 0.5, 0.75, 1.0]);
        assert_eq!(TimeGrid::<f64>::linspace_unit(3).unwrap().times(), &[0.0, 0.5, 1.0]);
        assert!(TimeGrid::new(vec![0.0, 0.5]).is_err());
        assert!(TimeGrid::new(vec![0.5, 0.5]).is_err());
        assert!(TimeGrid::new(vec![0.5, 1.5]).is_err());
        assert!(TimeGrid::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn spectral_mixture_requires_nonnegative_weights() {
        let bad = KernelFamily::SpectralMixture(vec![MixtureComponent { weight: -1.0, mean: 1.0, scale: 1.0 }]);
        assert!(KernelSpec::new(bad, 1.0, 1.0).is_err());
    }

    #[test]
    fn inverse_diagonal_matches_explicit_inverse() {
        let spec = KernelSpec::rbf(0.3_f64, 1.0).unwrap().with_nugget(0.05);
        let g = build_gram(&spec, &TimeGrid::linspace_open(7).unwrap()).unwrap();
        let inv = g.inverse();
        for (t, d) in g.inverse_diagonal().iter().enumerate() {
            assert!((inv[[t, t]] - d).abs() < 1e-10 * d.abs());
        }
    }
}
