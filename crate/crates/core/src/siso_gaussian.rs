//! Gaussian soft-in-soft-out detector.
//!
//! The prior on the symbols is postulated Gaussian, `N(b̃, W)` with
//! `W = diag(1 - b̃²)`, and the belief `Q(b) = N(μ, Σ)` is unrestricted, so the
//! free energy is minimised in closed form. Extrinsic LLRs follow from either
//! a leave-one-out prior (hybrid / sequential) or Gaussian division by the
//! user's own prior (flooding).

use nalgebra::{DMatrix, DVector};

use crate::channel::ChannelInstance;
use crate::detect_linear::GaussianBelief;
use crate::error::{Error, Result};
use crate::linalg::{gauss_jordan_inverse, Cholesky, SymMatrix};
use crate::llr::{clamp_llr, gaussian_soft_bit, soft_bit};

const DEGENERATE_TOL: f64 = 1e-12;

/// Gaussian prior `N(b̃, diag(w))`, `w_k = 1 - b̃_k²` (floored).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    btilde: DVector<f64>,
    w: DVector<f64>,
}

impl GaussianPrior {
    /// Soft bits are pulled inside the variance floor.
    pub fn new(btilde: DVector<f64>) -> Result<Self> {
        if let Some(k) = btilde.iter().position(|b| !(b.abs() <= 1.0)) {
            return Err(Error::DomainError(k));
        }
        let btilde = btilde.map(gaussian_soft_bit);
        let w = btilde.map(|b| 1.0 - b * b);
        Ok(GaussianPrior { btilde, w })
    }

    pub fn uninformative(k: usize) -> Self {
        GaussianPrior {
            btilde: DVector::zeros(k),
            w: DVector::from_element(k, 1.0),
        }
    }

    pub fn from_llr(llr: &DVector<f64>) -> Self {
        Self::new(llr.map(soft_bit)).expect("tanh is bounded")
    }

    pub fn btilde(&self) -> &DVector<f64> {
        &self.btilde
    }

    pub fn w(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.btilde.len()
    }

    pub fn is_empty(&self) -> bool {
        self.btilde.is_empty()
    }

    /// The prior with user `k` reset to `N(0, 1)`.
    pub fn leave_out(&self, k: usize) -> Self {
        let mut p = self.clone();
        p.btilde[k] = 0.0;
        p.w[k] = 1.0;
        p
    }
}

/// Extrinsic LLRs with the per-user intermediates that produced them.
#[derive(Debug, Clone)]
pub struct ExtResult {
    pub llr_mud: DVector<f64>,
    /// Numerator mean (`μ'_k` for hybrid, `μ̌_k` for flooding).
    pub mean: DVector<f64>,
    /// `α_k` (hybrid) or `α̌_k` (flooding).
    pub alpha: DVector<f64>,
}

fn check(ch: &ChannelInstance, y: &DVector<f64>, prior: &GaussianPrior) -> Result<()> {
    for len in [y.len(), prior.len()] {
        if len != ch.k() {
            return Err(Error::LengthMismatch {
                expected: ch.k(),
                actual: len,
            });
        }
    }
    Ok(())
}

/// `M = ARA + σ² W⁻¹`.
fn precision_scaled(ch: &ChannelInstance, w: &DVector<f64>) -> DMatrix<f64> {
    let mut m = ch.gram();
    for i in 0..w.len() {
        m[(i, i)] += ch.sigma2() / w[i];
    }
    m
}

/// Free energy of `Q = N(μ, Σ)` under the prior `N(b̃, W)`.
///
/// `KL(Q ‖ prior) + E_Q‖r - SAb‖² / (2σ²)` with `rᵀr / (2σ²)` and the Gaussian
/// normalisers dropped.
pub fn free_energy_gauss(
    ch: &ChannelInstance,
    y: &DVector<f64>,
    prior: &GaussianPrior,
    q: &GaussianBelief,
) -> Result<f64> {
    check(ch, y, prior)?;
    let chol = Cholesky::new(q.sigma.as_matrix()).map_err(|_| Error::SingularCovariance)?;
    let k = ch.k() as f64;
    let g = ch.gram();
    let sig = q.sigma.as_matrix();
    let diff = &q.mu - prior.btilde();
    let mut kl = -k - chol.log_det();
    for i in 0..ch.k() {
        let w = prior.w()[i];
        kl += sig[(i, i)] / w + diff[i] * diff[i] / w + w.ln();
    }
    let data = q.mu.dot(&(&g * &q.mu)) + (&g * sig).trace() - 2.0 * ch.amplitudes().component_mul(y).dot(&q.mu);
    Ok(0.5 * kl + data / (2.0 * ch.sigma2()))
}

/// Gradient of [`free_energy_gauss`] with respect to `(μ, Σ)`.
pub fn free_energy_gauss_gradient(
    ch: &ChannelInstance,
    y: &DVector<f64>,
    prior: &GaussianPrior,
    q: &GaussianBelief,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check(ch, y, prior)?;
    let s2 = ch.sigma2();
    let g = ch.gram();
    let winv = prior.w().map(|w| 1.0 / w);
    let g_mu = (&q.mu - prior.btilde()).component_mul(&winv) + (&g * &q.mu - ch.amplitudes().component_mul(y)) / s2;
    let sigma_inv = Cholesky::new(q.sigma.as_matrix())
        .map_err(|_| Error::SingularCovariance)?
        .inverse();
    let g_sigma = (DMatrix::from_diagonal(&winv) - sigma_inv + g / s2) * 0.5;
    Ok((g_mu, g_sigma))
}

/// Exact minimiser: `μ = b̃ + M⁻¹ A (y - R A b̃)`, `Σ = σ² M⁻¹`, `M = ARA + σ²W⁻¹`.
pub fn solve_gauss(ch: &ChannelInstance, y: &DVector<f64>, prior: &GaussianPrior) -> Result<GaussianBelief> {
    check(ch, y, prior)?;
    let chol = Cholesky::new(&precision_scaled(ch, prior.w()))?;
    let rhs = ch.amplitudes().component_mul(y) - ch.gram() * prior.btilde();
    let mu = prior.btilde() + chol.solve(&rhs);
    let sigma = SymMatrix::symmetrize(chol.inverse() * ch.sigma2());
    Ok(GaussianBelief { mu, sigma })
}

/// Extrinsic LLR of one user under the leave-one-out prior.
///
/// Returns `(LLR, μ'_k, α_k)`.
pub fn ext_hybrid_user(ch: &ChannelInstance, y: &DVector<f64>, prior: &GaussianPrior, k: usize) -> Result<(f64, f64, f64)> {
    check(ch, y, prior)?;
    let loo = prior.leave_out(k);
    let chol = Cholesky::new(&precision_scaled(ch, loo.w()))?;
    let rhs = ch.amplitudes().component_mul(y) - ch.gram() * loo.btilde();
    let mu_k = chol.solve(&rhs)[k];
    let mut e = DVector::zeros(ch.k());
    e[k] = 1.0;
    // 1 - α_k is the leave-one-out posterior variance of b_k.
    let one_minus_alpha = ch.sigma2() * chol.solve(&e)[k];
    if one_minus_alpha < DEGENERATE_TOL {
        return Err(Error::DegeneratePrior {
            user: k,
            value: one_minus_alpha,
        });
    }
    Ok((clamp_llr(2.0 * mu_k / one_minus_alpha), mu_k, 1.0 - one_minus_alpha))
}

/// Extrinsic LLRs for all users, each from its own leave-one-out prior.
pub fn ext_hybrid(ch: &ChannelInstance, y: &DVector<f64>, prior: &GaussianPrior) -> Result<ExtResult> {
    let k = ch.k();
    let mut out = ExtResult {
        llr_mud: DVector::zeros(k),
        mean: DVector::zeros(k),
        alpha: DVector::zeros(k),
    };
    for u in 0..k {
        let (l, m, a) = ext_hybrid_user(ch, y, prior, u)?;
        out.llr_mud[u] = l;
        out.mean[u] = m;
        out.alpha[u] = a;
    }
    Ok(out)
}

/// Soft interference cancellation followed by an MMSE filter against the
/// residual interference, written directly from the two-stage description.
///
/// Uses Gauss-Jordan inverses so that it shares no code with [`ext_hybrid`].
pub fn wang_poor_oracle(ch: &ChannelInstance, y: &DVector<f64>, prior: &GaussianPrior) -> Result<ExtResult> {
    check(ch, y, prior)?;
    let k = ch.k();
    let a = ch.amplitudes();
    let r_inv = gauss_jordan_inverse(ch.correlation().as_matrix())?;
    let decorr = &r_inv * y;
    let mut out = ExtResult {
        llr_mud: DVector::zeros(k),
        mean: DVector::zeros(k),
        alpha: DVector::zeros(k),
    };
    for u in 0..k {
        let mut bt = prior.btilde().clone();
        let mut w = prior.w().clone();
        bt[u] = 0.0;
        w[u] = 1.0;
        // C_k = (A W_k A + σ² R⁻¹)⁻¹
        let mut m = &r_inv * ch.sigma2();
        for i in 0..k {
            m[(i, i)] += a[i] * a[i] * w[i];
        }
        let c = gauss_jordan_inverse(&m)?;
        let residual = &decorr - a.component_mul(&bt);
        let z = a[u] * c.row(u).dot(&residual.transpose());
        let alpha = a[u] * a[u] * c[(u, u)];
        if 1.0 - alpha < DEGENERATE_TOL {
            return Err(Error::DegeneratePrior {
                user: u,
                value: 1.0 - alpha,
            });
        }
        out.llr_mud[u] = clamp_llr(2.0 * z / (1.0 - alpha));
        out.mean[u] = z;
        out.alpha[u] = alpha;
    }
    Ok(out)
}

/// Extrinsic LLRs from one shared solve with the full prior.
///
/// `C = (AWA + σ²R⁻¹)⁻¹`, `μ̌_k = A_k e_kᵀ C (R⁻¹y - A b̃_k)`,
/// `α̌_k = w_k A_k² C_kk` and `LLR = 2μ̌_k / (1 - α̌_k)`.
pub fn ext_flooding(ch: &ChannelInstance, y: &DVector<f64>, prior: &GaussianPrior) -> Result<ExtResult> {
    check(ch, y, prior)?;
    let k = ch.k();
    let a = ch.amplitudes();
    let w = prior.w();
    let bt = prior.btilde();
    let mut m = ch.correlation_inverse().as_matrix() * ch.sigma2();
    for i in 0..k {
        m[(i, i)] += a[i] * a[i] * w[i];
    }
    let chol = Cholesky::new(&m)?;
    let c = chol.inverse();
    let v = ch.correlation_inverse().as_matrix() * y - a.component_mul(bt);
    let cv = &c * v;
    let mut out = ExtResult {
        llr_mud: DVector::zeros(k),
        mean: DVector::zeros(k),
        alpha: DVector::zeros(k),
    };
    for u in 0..k {
        let a2c = a[u] * a[u] * c[(u, u)];
        let mu = a[u] * cv[u] + bt[u] * a2c;
        let alpha = w[u] * a2c;
        if 1.0 - alpha < DEGENERATE_TOL {
            return Err(Error::DegeneratePrior {
                user: u,
                value: 1.0 - alpha,
            });
        }
        out.llr_mud[u] = clamp_llr(2.0 * mu / (1.0 - alpha));
        out.mean[u] = mu;
        out.alpha[u] = alpha;
    }
    Ok(out)
}

/// Flooding extrinsic LLRs by explicit Gaussian division of the posterior
/// marginal `N(μ_k, Σ_kk)` by the prior `N(b̃_k, w_k)`.
pub fn ext_flooding_direct(ch: &ChannelInstance, y: &DVector<f64>, prior: &GaussianPrior) -> Result<DVector<f64>> {
    let q = solve_gauss(ch, y, prior)?;
    let mut llr = DVector::zeros(ch.k());
    for u in 0..ch.k() {
        let s = q.sigma[(u, u)];
        llr[u] = clamp_llr(2.0 * (q.mu[u] / s - prior.btilde()[u] / prior.w()[u]));
    }
    Ok(llr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::make_equicorrelated;
    use crate::detect_linear::mmse;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_channel(a: f64, sigma2: f64) -> ChannelInstance {
        ChannelInstance::from_spreading(DMatrix::identity(1, 1), DVector::from_element(1, a), sigma2).unwrap()
    }

    fn random_prior(k: usize, rng: &mut impl Rng) -> GaussianPrior {
        GaussianPrior::new(DVector::from_fn(k, |_, _| rng.random_range(-0.95..0.95))).unwrap()
    }

    #[test]
    fn prior_floor_and_leave_out() {
        let p = GaussianPrior::new(DVector::from_vec(vec![1.0, -0.5])).unwrap();
        assert!(p.w()[0] >= crate::llr::VAR_FLOOR * 0.999);
        assert_abs_diff_eq!(p.w()[1], 0.75, epsilon = 1e-12);
        let l = p.leave_out(1);
        assert_eq!(l.btilde()[1], 0.0);
        assert_eq!(l.w()[1], 1.0);
        assert!(GaussianPrior::new(DVector::from_vec(vec![1.5])).is_err());
    }

    #[test]
    fn zero_prior_solution_is_mmse() {
        let ch = make_equicorrelated(4, 0.7).unwrap().with_sigma2(0.3).unwrap();
        let y = DVector::from_vec(vec![0.2, -1.0, 1.7, 0.4]);
        let q = solve_gauss(&ch, &y, &GaussianPrior::uninformative(4)).unwrap();
        let m = mmse(&ch, &y).unwrap();
        assert!((q.mu - m.mu).amax() < 1e-12);
        assert!((q.sigma.as_matrix() - m.sigma.as_matrix()).amax() < 1e-12);
    }

    #[test]
    fn saturated_prior_dominates() {
        let ch = make_equicorrelated(3, 0.5).unwrap();
        let y = DVector::from_vec(vec![-3.0, 0.1, 2.0]);
        let prior = GaussianPrior::new(DVector::from_vec(vec![1.0, -1.0, 1.0])).unwrap();
        let q = solve_gauss(&ch, &y, &prior).unwrap();
        assert!((q.mu - prior.btilde()).amax() < 1e-4);
    }

    #[test]
    fn solve_matches_generic_formula() {
        let ch = make_equicorrelated(2, 0.7).unwrap().with_sigma2(0.5).unwrap();
        let y = DVector::from_vec(vec![0.9, -0.3]);
        let bt = DVector::from_vec(vec![0.5, -0.5]);
        let prior = GaussianPrior::new(bt.clone()).unwrap();
        let q = solve_gauss(&ch, &y, &prior).unwrap();
        // Σ = (σ⁻²ARA + W⁻¹)⁻¹ and μ = Σ (σ⁻² A y + W⁻¹ b̃), via Gauss-Jordan.
        let winv = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / 0.75, 1.0 / 0.75]));
        let prec = ch.gram() / 0.5 + &winv;
        let sigma = gauss_jordan_inverse(&prec).unwrap();
        let mu = &sigma * (y / 0.5 + winv * bt);
        assert!((q.mu - mu).amax() < 1e-12);
        assert!((q.sigma.as_matrix() - sigma).amax() < 1e-12);
    }

    #[test]
    fn minimiser_has_zero_gradient_and_beats_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ch = make_equicorrelated(4, 0.7).unwrap().with_sigma2(0.4).unwrap();
        let y = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
        let prior = random_prior(4, &mut rng);
        let q = solve_gauss(&ch, &y, &prior).unwrap();
        let (gm, gs) = free_energy_gauss_gradient(&ch, &y, &prior, &q).unwrap();
        assert!(gm.norm() < 1e-8 && gs.norm() < 1e-8);
        let f0 = free_energy_gauss(&ch, &y, &prior, &q).unwrap();
        let mut bumped = q.clone();
        bumped.mu[0] += 0.01;
        assert!(f0 < free_energy_gauss(&ch, &y, &prior, &bumped).unwrap());
        for _ in 0..1000 {
            let mut p = q.clone();
            p.mu += DVector::from_fn(4, |_, _| rng.random_range(-0.1..0.1));
            let d = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-0.02..0.02));
            p.sigma = SymMatrix::symmetrize(q.sigma.as_matrix() + &d * d.transpose());
            assert!(f0 <= free_energy_gauss(&ch, &y, &prior, &p).unwrap());
        }
    }

    #[test]
    fn scalar_free_energy_reduction() {
        let (s2, y) = (0.7, 0.4);
        let ch = scalar_channel(1.0, s2);
        let prior = GaussianPrior::uninformative(1);
        let (mu, v) = (0.3, 0.2);
        let q = GaussianBelief {
            mu: DVector::from_element(1, mu),
            sigma: SymMatrix::new(DMatrix::from_element(1, 1, v)).unwrap(),
        };
        let expected = 0.5 * (v + mu * mu - 1.0 - v.ln()) + (mu * mu + v - 2.0 * y * mu) / (2.0 * s2);
        let f = free_energy_gauss(&ch, &DVector::from_element(1, y), &prior, &q).unwrap();
        assert_abs_diff_eq!(f, expected, epsilon = 1e-14);

        let ch2 = ch.with_sigma2(2.0 * s2).unwrap();
        let f2 = free_energy_gauss(&ch2, &DVector::from_element(1, y), &prior, &q).unwrap();
        let expected2 = 0.5 * (v + mu * mu - 1.0 - v.ln()) + (mu * mu + v - 2.0 * y * mu) / (4.0 * s2);
        assert_abs_diff_eq!(f2, expected2, epsilon = 1e-12);
    }

    #[test]
    fn single_user_extrinsics_are_matched_filter() {
        let (a, s2, y) = (1.3, 0.45, -0.8);
        let ch = scalar_channel(a, s2);
        let yv = DVector::from_element(1, y);
        for bt in [0.0, 0.6, -0.9] {
            let prior = GaussianPrior::new(DVector::from_element(1, bt)).unwrap();
            let expected = 2.0 * a * y / s2;
            assert_abs_diff_eq!(ext_hybrid(&ch, &yv, &prior).unwrap().llr_mud[0], expected, epsilon = 1e-12);
            assert_abs_diff_eq!(wang_poor_oracle(&ch, &yv, &prior).unwrap().llr_mud[0], expected, epsilon = 1e-12);
            assert_abs_diff_eq!(ext_flooding(&ch, &yv, &prior).unwrap().llr_mud[0], expected, epsilon = 1e-10);
            assert_abs_diff_eq!(ext_flooding_direct(&ch, &yv, &prior).unwrap()[0], expected, epsilon = 1e-8);
        }
    }

    #[test]
    fn hybrid_matches_two_stage_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ch = make_equicorrelated(4, 0.7).unwrap().with_sigma2(0.6).unwrap();
        for trial in 0..50 {
            let y = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            let prior = if trial == 0 {
                GaussianPrior::uninformative(4)
            } else {
                random_prior(4, &mut rng)
            };
            let h = ext_hybrid(&ch, &y, &prior).unwrap();
            let o = wang_poor_oracle(&ch, &y, &prior).unwrap();
            assert!((&h.mean - &o.mean).amax() < 1e-12);
            for k in 0..4 {
                assert!((h.llr_mud[k] - o.llr_mud[k]).abs() <= 1e-10 * o.llr_mud[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn flooding_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ch = make_equicorrelated(4, 0.7).unwrap().with_sigma2(0.5).unwrap();
        for _ in 0..50 {
            let y = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            let prior = random_prior(4, &mut rng);
            let e = ext_flooding(&ch, &y, &prior).unwrap().llr_mud;
            let d = ext_flooding_direct(&ch, &y, &prior).unwrap();
            for k in 0..4 {
                assert!((e[k] - d[k]).abs() <= 1e-10 * d[k].abs().max(1.0), "{e} vs {d}");
            }
        }
    }

    #[test]
    fn zero_prior_flooding_equals_hybrid() {
        let ch = make_equicorrelated(3, 0.7).unwrap().with_sigma2(0.8).unwrap();
        let y = DVector::from_vec(vec![0.5, -1.0, 0.25]);
        let p = GaussianPrior::uninformative(3);
        let f = ext_flooding(&ch, &y, &p).unwrap().llr_mud;
        let h = ext_hybrid(&ch, &y, &p).unwrap().llr_mud;
        assert!((f - h).amax() < 1e-10);
    }
}
