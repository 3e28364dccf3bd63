//! Causal factorization of the GP latent prior.
//!
//! Under `z_{1:L} ~ N(0, K ⊗ I_d)` each step is Gaussian given its past,
//! `z_t | z_{<t} ~ N(w_t^T z_{<t}, σ_t² I_d)`, with
//! `w_t = K_{<t,<t}^{-1} k_{<t,t}` and `σ_t² = K_tt - k_{t,<t} w_t`.
//! The product of these conditionals is the joint density.

use ndarray::{s, Array1, Array2, ArrayView2};

use crate::kernels::GramMatrix;
use crate::linalg;
use crate::{Error, Result, Scalar};

/// Conditional variance below `DEGENERACY_RATIO * K_tt` is treated as a
/// degenerate prior rather than silently clamped.
pub const DEGENERACY_RATIO: f64 = 1e-12;

/// Latent path `z_{1:L}` stored as an `L x d` matrix, row `t` is `z_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory<F> {
    z: Array2<F>,
}

impl<F: Scalar> LatentTrajectory<F> {
    pub fn new(z: Array2<F>) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent trajectory".into()));
        }
        Ok(LatentTrajectory { z })
    }

    pub fn z(&self) -> &Array2<F> {
        &self.z
    }

    pub fn into_inner(self) -> Array2<F> {
        self.z
    }

    /// Number of time steps `L`.
    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    /// Latent dimension `d`.
    pub fn dim(&self) -> usize {
        self.z.ncols()
    }
}

/// `p(z_t | z_{<t})`: regression weights on the history and an isotropic
/// variance shared by all latent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalLaw<F> {
    pub weights: Array1<F>,
    pub variance: F,
}

impl<F: Scalar> ConditionalLaw<F> {
    pub fn std_dev(&self) -> F {
        self.variance.sqrt()
    }
}

fn check_variance<F: Scalar>(step: usize, variance: F, prior: F) -> Result<()> {
    if !(variance >= F::lit(DEGENERACY_RATIO) * prior) || !variance.is_finite() {
        return Err(Error::Degenerate { step, variance: variance.to_f64_lossy() });
    }
    Ok(())
}

/// Conditional law of step `t_index` (1-based) by Schur complement on the
/// leading block of the cached factor.
pub fn conditional_law<F: Scalar>(gram: &GramMatrix<F>, t_index: usize) -> Result<ConditionalLaw<F>> {
    let n = gram.len();
    if t_index == 0 || t_index > n {
        return Err(Error::IndexOutOfRange { index: t_index, len: n });
    }
    let k = gram.matrix();
    let t = t_index - 1;
    let prior = k[[t, t]];
    if t == 0 {
        return Ok(ConditionalLaw { weights: Array1::zeros(0), variance: prior });
    }
    let block = gram.chol().leading(t);
    let cross = k.slice(s![..t, t]);
    let weights = linalg::solve_chol_vec(&block, cross)?;
    let variance = prior - cross.dot(&weights);
    check_variance(t_index, variance, prior)?;
    Ok(ConditionalLaw { weights, variance })
}

/// `w^T H` for a `(t-1) x d` history `H`.
pub fn conditional_mean<F: Scalar>(law: &ConditionalLaw<F>, history: ArrayView2<F>) -> Result<Array1<F>> {
    if history.nrows() != law.weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "history has {} rows, law conditions on {}",
            history.nrows(),
            law.weights.len()
        )));
    }
    Ok(history.t().dot(&law.weights))
}

/// All `L` conditional laws from the single cached factor `K = C C^T`.
///
/// With `z = C ε`, step `t` has mean `C_{t,<t} C_{<t}^{-1} z_{<t}`, so the
/// weights solve `C_{<t}^T w = C_{t,<t}^T` and the variance is `C_tt²`.
pub fn precompute_conditionals<F: Scalar>(gram: &GramMatrix<F>) -> Result<Vec<ConditionalLaw<F>>> {
    let c = gram.chol();
    let cm = c.matrix();
    let k = gram.matrix();
    (0..gram.len())
        .map(|t| {
            let variance = cm[[t, t]] * cm[[t, t]];
            check_variance(t + 1, variance, k[[t, t]])?;
            let weights = if t == 0 {
                Array1::zeros(0)
            } else {
                linalg::solve_upper_t_vec(&c.leading(t), cm.slice(s![t, ..t]))?
            };
            Ok(ConditionalLaw { weights, variance })
        })
        .collect()
}

fn check_traj<F: Scalar>(gram: &GramMatrix<F>, traj: &LatentTrajectory<F>) -> Result<()> {
    if traj.len() != gram.len() {
        return Err(Error::DimensionMismatch(format!(
            "trajectory has {} steps, Gram matrix is {}x{}",
            traj.len(),
            gram.len(),
            gram.len()
        )));
    }
    Ok(())
}

/// `sum_t log N(z_t; μ_t(z_{<t}), σ_t² I)`.
pub fn chain_logdensity<F: Scalar>(gram: &GramMatrix<F>, traj: &LatentTrajectory<F>) -> Result<F> {
    check_traj(gram, traj)?;
    let laws = precompute_conditionals(gram)?;
    Ok(chain_logdensity_with(&laws, traj.z().view()))
}

pub(crate) fn chain_logdensity_with<F: Scalar>(laws: &[ConditionalLaw<F>], z: ArrayView2<F>) -> F {
    let d = F::from_usize_lossy(z.ncols());
    let two = F::lit(2.0);
    let two_pi = F::lit(2.0 * std::f64::consts::PI);
    laws.iter()
        .enumerate()
        .map(|(t, law)| {
            let mean = z.slice(s![..t, ..]).t().dot(&law.weights);
            let resid = &z.row(t) - &mean;
            -d / two * (two_pi * law.variance).ln() - resid.dot(&resid) / (two * law.variance)
        })
        .sum()
}

/// `log N(vec Z; 0, K ⊗ I_d)` evaluated on the `L x d` layout.
pub fn joint_logdensity<F: Scalar>(gram: &GramMatrix<F>, traj: &LatentTrajectory<F>) -> Result<F> {
    check_traj(gram, traj)?;
    let z = traj.z();
    let n = F::from_usize_lossy(z.nrows());
    let d = F::from_usize_lossy(z.ncols());
    let two = F::lit(2.0);
    // trace(Z^T K^{-1} Z) = ||C^{-1} Z||_F^2
    let white = linalg::solve_lower_mat(gram.chol(), z.view())?;
    let quad = white.iter().map(|v| *v * *v).sum::<F>();
    Ok(-(n * d / two) * F::lit(2.0 * std::f64::consts::PI).ln() - d / two * gram.logdet() - quad / two)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bivariate(c: f64) -> GramMatrix<f64> {
        GramMatrix::from_matrix(array![[1.0, c], [c, 1.0]]).unwrap()
    }

    #[test]
    fn bivariate_conditioning() {
        let c = 0.6;
        let g = bivariate(c);
        let first = conditional_law(&g, 1).unwrap();
        assert_eq!(first.weights.len(), 0);
        assert_eq!(first.variance, 1.0);
        let second = conditional_law(&g, 2).unwrap();
        assert!((second.weights[0] - c).abs() < 1e-15);
        assert!((second.variance - (1.0 - c * c)).abs() < 1e-15);

        let laws = precompute_conditionals(&g).unwrap();
        assert_eq!(laws[0].variance, 1.0);
        assert!((laws[1].weights[0] - c).abs() < 1e-15);
        assert!((laws[1].variance - (1.0 - c * c)).abs() < 1e-15);
    }

    #[test]
    fn diagonal_prior_has_zero_weights() {
        let g = GramMatrix::from_matrix(Array2::from_diag(&array![2.0_f64, 3.0, 5.0])).unwrap();
        let law = conditional_law(&g, 3).unwrap();
        assert_eq!(law.weights, array![0.0, 0.0]);
        assert_eq!(law.variance, 5.0);
        for (t, law) in precompute_conditionals(&g).unwrap().iter().enumerate() {
            assert!(law.weights.iter().all(|w| *w == 0.0));
            assert!((law.variance - [2.0, 3.0, 5.0][t]).abs() < 1e-14);
        }
    }

    #[test]
    fn index_out_of_range() {
        let g = bivariate(0.1);
        assert_eq!(conditional_law(&g, 0).unwrap_err(), Error::IndexOutOfRange { index: 0, len: 2 });
        assert_eq!(conditional_law(&g, 3).unwrap_err(), Error::IndexOutOfRange { index: 3, len: 2 });
    }

    #[test]
    fn degenerate_variance_is_an_error() {
        // factorizable, but the second step is almost fully determined by the first
        let c = 1.0 - 1e-14;
        let g = bivariate(c);
        assert!(matches!(conditional_law(&g, 2), Err(Error::Degenerate { step: 2, .. })));
        assert!(matches!(precompute_conditionals(&g), Err(Error::Degenerate { step: 2, .. })));
    }

    #[test]
    fn conditional_mean_examples() {
        let empty = ConditionalLaw { weights: Array1::<f64>::zeros(0), variance: 1.0 };
        assert_eq!(conditional_mean(&empty, Array2::zeros((0, 3)).view()).unwrap(), Array1::zeros(3));
        let law = ConditionalLaw { weights: array![0.5], variance: 0.75 };
        assert_eq!(conditional_mean(&law, array![[2.0, -4.0]].view()).unwrap(), array![1.0, -2.0]);
        let zero = ConditionalLaw { weights: array![0.0, 0.0], variance: 1.0 };
        assert_eq!(conditional_mean(&zero, array![[1.0], [7.0]].view()).unwrap(), array![0.0]);
        assert!(conditional_mean(&law, array![[1.0], [2.0]].view()).is_err());
    }

    #[test]
    fn logdensity_examples() {
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let g1 = GramMatrix::from_matrix(array![[1.0]]).unwrap();
        let z1 = LatentTrajectory::new(array![[0.0]]).unwrap();
        assert!((chain_logdensity(&g1, &z1).unwrap() + half_log_2pi).abs() < 1e-15);
        assert!((joint_logdensity(&g1, &z1).unwrap() + half_log_2pi).abs() < 1e-15);

        let g2 = GramMatrix::<f64>::from_matrix(Array2::eye(2)).unwrap();
        let z2 = LatentTrajectory::new(Array2::zeros((2, 1))).unwrap();
        assert!((chain_logdensity(&g2, &z2).unwrap() + 2.0 * half_log_2pi).abs() < 1e-15);

        let g3 = GramMatrix::<f64>::from_matrix(Array2::eye(3)).unwrap();
        let z3 = LatentTrajectory::new(Array2::zeros((3, 2))).unwrap();
        assert!((joint_logdensity(&g3, &z3).unwrap() + 6.0 * half_log_2pi).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch() {
        let g = bivariate(0.3);
        let z = LatentTrajectory::new(Array2::zeros((3, 1))).unwrap();
        assert!(matches!(chain_logdensity(&g, &z), Err(Error::DimensionMismatch(_))));
        assert!(matches!(joint_logdensity(&g, &z), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn non_finite_trajectory_rejected() {
        assert!(LatentTrajectory::new(array![[f64::NAN]]).is_err());
    }
}
