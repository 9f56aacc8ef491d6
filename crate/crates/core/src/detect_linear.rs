//! Uncoded linear detectors and their coordinate-descent (SIC) forms.
//!
//! Everything works on the matched-filter output `y = Sᵀr`, which is a
//! sufficient statistic: `Aᵀ Sᵀ S A = A R A` and `Aᵀ Sᵀ r = A y`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::ChannelInstance;
use crate::error::{Error, Result};
use crate::linalg::{Cholesky, SymMatrix};

/// Gaussian belief `Q(b) = N(mu, sigma)`.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub mu: DVector<f64>,
    pub sigma: SymMatrix,
}

/// Per-coordinate box constraint used by clipped SIC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipBox {
    lo: f64,
    hi: f64,
}

impl ClipBox {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(Error::config("clip", format!("need lo < hi, got [{lo}, {hi}]")));
        }
        Ok(ClipBox { lo, hi })
    }

    pub fn unbounded() -> Self {
        ClipBox {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn project(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

impl Default for ClipBox {
    /// The BPSK alphabet range `[-1, 1]`.
    fn default() -> Self {
        ClipBox { lo: -1.0, hi: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SicTarget {
    Mmse,
    Decorrelator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOrder {
    Cyclic,
    /// A fresh random permutation of the users every sweep.
    AlmostCyclic { seed: u64 },
    /// Each step updates the coordinate with the largest pending change.
    GaussSouthwell,
}

#[derive(Debug, Clone)]
pub struct SicOptions {
    pub clip: ClipBox,
    pub target: SicTarget,
    pub sweeps: usize,
    pub order: UpdateOrder,
    /// Stop once a full sweep moves no coordinate by more than this.
    pub tol: f64,
}

impl SicOptions {
    pub fn new(clip: ClipBox, target: SicTarget, sweeps: usize) -> Self {
        SicOptions {
            clip,
            target,
            sweeps,
            order: UpdateOrder::Cyclic,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SicOutcome {
    pub mu: DVector<f64>,
    pub sweeps_run: usize,
}

/// Hessian (times σ²) of the free energy in μ: `ARA` or `ARA + σ²I`.
fn hessian(ch: &ChannelInstance, target: SicTarget) -> DMatrix<f64> {
    let mut h = ch.gram();
    if target == SicTarget::Mmse {
        for i in 0..h.nrows() {
            h[(i, i)] += ch.sigma2();
        }
    }
    h
}

fn check_len(ch: &ChannelInstance, y: &DVector<f64>) -> Result<()> {
    if y.len() != ch.k() {
        return Err(Error::LengthMismatch {
            expected: ch.k(),
            actual: y.len(),
        });
    }
    Ok(())
}

fn closed_form(ch: &ChannelInstance, y: &DVector<f64>, target: SicTarget) -> Result<GaussianBelief> {
    check_len(ch, y)?;
    let chol = Cholesky::new(&hessian(ch, target))?;
    let mu = chol.solve(&ch.amplitudes().component_mul(y));
    let sigma = SymMatrix::symmetrize(chol.inverse() * ch.sigma2());
    Ok(GaussianBelief { mu, sigma })
}

/// Zero-forcing detector: `μ = (ARA)⁻¹ A y`, `Σ = σ²(ARA)⁻¹`.
pub fn decorrelate(ch: &ChannelInstance, y: &DVector<f64>) -> Result<GaussianBelief> {
    closed_form(ch, y, SicTarget::Decorrelator)
}

/// Linear MMSE detector: `μ = (ARA + σ²I)⁻¹ A y`, `Σ = σ²(ARA + σ²I)⁻¹`.
pub fn mmse(ch: &ChannelInstance, y: &DVector<f64>) -> Result<GaussianBelief> {
    closed_form(ch, y, SicTarget::Mmse)
}

/// Posterior-mean family `(ARA + α²I)⁻¹ A y`.
pub fn pme_alpha(ch: &ChannelInstance, y: &DVector<f64>, alpha2: f64) -> Result<DVector<f64>> {
    check_len(ch, y)?;
    if !(alpha2 >= 0.0) {
        return Err(Error::config("alpha2", "must be non-negative"));
    }
    let mut h = ch.gram();
    for i in 0..h.nrows() {
        h[(i, i)] += alpha2;
    }
    Ok(Cholesky::new(&h)?.solve(&ch.amplitudes().component_mul(y)))
}

/// Free energy of the flat-prior Gaussian postulate, additive constants dropped.
pub fn free_energy_decorrelator(ch: &ChannelInstance, y: &DVector<f64>, q: &GaussianBelief) -> Result<f64> {
    gaussian_free_energy(ch, y, q, SicTarget::Decorrelator)
}

/// Free energy of the `N(0, I)`-prior Gaussian postulate, additive constants dropped.
pub fn free_energy_mmse(ch: &ChannelInstance, y: &DVector<f64>, q: &GaussianBelief) -> Result<f64> {
    gaussian_free_energy(ch, y, q, SicTarget::Mmse)
}

fn gaussian_free_energy(
    ch: &ChannelInstance,
    y: &DVector<f64>,
    q: &GaussianBelief,
    target: SicTarget,
) -> Result<f64> {
    check_len(ch, y)?;
    let h = hessian(ch, target);
    let chol = Cholesky::new(q.sigma.as_matrix()).map_err(|_| Error::SingularCovariance)?;
    let quad = q.mu.dot(&(&h * &q.mu)) + (&h * q.sigma.as_matrix()).trace()
        - 2.0 * ch.amplitudes().component_mul(y).dot(&q.mu);
    Ok(-0.5 * chol.log_det() + quad / (2.0 * ch.sigma2()))
}

/// Gradient of the linear-detector free energy with respect to `(μ, Σ)`.
pub fn free_energy_gradient(
    ch: &ChannelInstance,
    y: &DVector<f64>,
    q: &GaussianBelief,
    target: SicTarget,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_len(ch, y)?;
    let h = hessian(ch, target);
    let s2 = ch.sigma2();
    let g_mu = (&h * &q.mu - ch.amplitudes().component_mul(y)) / s2;
    let sigma_inv = Cholesky::new(q.sigma.as_matrix())
        .map_err(|_| Error::SingularCovariance)?
        .inverse();
    let g_sigma = h / (2.0 * s2) - sigma_inv * 0.5;
    Ok((g_mu, g_sigma))
}

/// Coordinate descent from `μ = 0`; returns the final mean.
pub fn sic(ch: &ChannelInstance, y: &DVector<f64>, clip: ClipBox, target: SicTarget, sweeps: usize) -> Result<DVector<f64>> {
    Ok(sic_run(ch, y, &SicOptions::new(clip, target, sweeps), |_, _| {})?.mu)
}

/// Coordinate descent with full control; `observe(k, μ)` runs after every
/// single-coordinate update.
pub fn sic_run(
    ch: &ChannelInstance,
    y: &DVector<f64>,
    opts: &SicOptions,
    mut observe: impl FnMut(usize, &DVector<f64>),
) -> Result<SicOutcome> {
    check_len(ch, y)?;
    if opts.sweeps == 0 {
        return Err(Error::config("sweeps", "must be at least 1"));
    }
    let k = ch.k();
    let h = hessian(ch, opts.target);
    let ay = ch.amplitudes().component_mul(y);
    let mut mu = DVector::zeros(k);
    let mut order: Vec<usize> = (0..k).collect();
    let mut rng = match opts.order {
        UpdateOrder::AlmostCyclic { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let target_of = |mu: &DVector<f64>, i: usize| {
        let off = h.row(i).dot(&mu.transpose()) - h[(i, i)] * mu[i];
        opts.clip.project((ay[i] - off) / h[(i, i)])
    };

    let mut sweeps_run = 0;
    while sweeps_run < opts.sweeps {
        sweeps_run += 1;
        let mut max_step: f64 = 0.0;
        for step in 0..k {
            let i = match opts.order {
                UpdateOrder::Cyclic => step,
                UpdateOrder::AlmostCyclic { .. } => {
                    if step == 0 {
                        order.shuffle(rng.as_mut().expect("seeded"));
                    }
                    order[step]
                }
                UpdateOrder::GaussSouthwell => (0..k)
                    .map(|i| (i, (target_of(&mu, i) - mu[i]).abs()))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
                    .0,
            };
            let new = target_of(&mu, i);
            max_step = max_step.max((new - mu[i]).abs());
            mu[i] = new;
            observe(i, &mu);
        }
        if max_step < opts.tol {
            break;
        }
    }
    Ok(SicOutcome { mu, sweeps_run })
}

/// Box-constrained KKT violation of `μ` for the given target.
///
/// Zero (to rounding) at the constrained minimiser.
pub fn kkt_violation(ch: &ChannelInstance, y: &DVector<f64>, mu: &DVector<f64>, clip: ClipBox, target: SicTarget) -> f64 {
    let h = hessian(ch, target);
    let g = &h * mu - ch.amplitudes().component_mul(y);
    let scale = ch.amplitudes().component_mul(y).amax().max(1.0);
    let mut worst: f64 = 0.0;
    for i in 0..mu.len() {
        let at_lo = (mu[i] - clip.lo()).abs() <= 1e-12 * scale;
        let at_hi = (mu[i] - clip.hi()).abs() <= 1e-12 * scale;
        let v = if at_lo {
            (-g[i]).max(0.0)
        } else if at_hi {
            g[i].max(0.0)
        } else {
            g[i].abs()
        };
        worst = worst.max(v);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::make_equicorrelated;
    use approx::assert_abs_diff_eq;

    fn diag_channel(a: &[f64], sigma2: f64) -> ChannelInstance {
        let k = a.len();
        ChannelInstance::from_spreading(DMatrix::identity(k, k), DVector::from_row_slice(a), sigma2).unwrap()
    }

    #[test]
    fn decorrelator_noiseless_recovers_symbols() {
        let ch = make_equicorrelated(4, 0.7).unwrap();
        let b = DVector::from_vec(vec![1.0, -1.0, -1.0, 1.0]);
        let y = ch.correlation().as_matrix() * ch.amplitudes().component_mul(&b);
        let q = decorrelate(&ch, &y).unwrap();
        assert!((q.mu - b).amax() < 1e-10);
    }

    #[test]
    fn decorrelator_diagonal_case() {
        let ch = diag_channel(&[2.0, 3.0], 0.5);
        let q = decorrelate(&ch, &DVector::from_vec(vec![2.0, -3.0])).unwrap();
        assert_abs_diff_eq!(q.mu[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(q.mu[1], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(q.sigma[(0, 0)], 0.5 / 4.0, epsilon = 1e-14);
        assert_abs_diff_eq!(q.sigma[(1, 1)], 0.5 / 9.0, epsilon = 1e-14);
        assert_abs_diff_eq!(q.sigma[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn decorrelator_two_user_inverse_oracle() {
        let ch = make_equicorrelated(2, 0.5).unwrap();
        let y = DVector::from_vec(vec![0.37, -1.21]);
        // (R)^-1 for [[1, .5], [.5, 1]] is (1/0.75) [[1, -.5], [-.5, 1]].
        let det = 0.75;
        let expected = [(y[0] - 0.5 * y[1]) / det, (y[1] - 0.5 * y[0]) / det];
        let q = decorrelate(&ch, &y).unwrap();
        assert_abs_diff_eq!(q.mu[0], expected[0], epsilon = 1e-10);
        assert_abs_diff_eq!(q.mu[1], expected[1], epsilon = 1e-10);
    }

    #[test]
    fn mmse_orthogonal_decouples() {
        let ch = diag_channel(&[0.5, 2.0, 1.5], 0.3);
        let y = DVector::from_vec(vec![0.4, -2.2, 1.0]);
        let q = mmse(&ch, &y).unwrap();
        for k in 0..3 {
            let a = ch.amplitudes()[k];
            assert_abs_diff_eq!(q.mu[k], a * y[k] / (a * a + 0.3), epsilon = 1e-14);
        }
    }

    #[test]
    fn mmse_tends_to_decorrelator() {
        let ch = make_equicorrelated(3, 0.6).unwrap().with_sigma2(1e-10).unwrap();
        let y = DVector::from_vec(vec![0.9, -0.2, 1.4]);
        let a = mmse(&ch, &y).unwrap().mu;
        let b = decorrelate(&ch, &y).unwrap().mu;
        assert!((a - b).amax() < 1e-6);
    }

    #[test]
    fn mmse_zero_gradient() {
        let ch = make_equicorrelated(4, 0.7).unwrap().with_sigma2(0.4).unwrap();
        let y = DVector::from_vec(vec![1.0, -0.5, 0.25, 2.0]);
        let q = mmse(&ch, &y).unwrap();
        let (gm, gs) = free_energy_gradient(&ch, &y, &q, SicTarget::Mmse).unwrap();
        assert!(gm.norm() < 1e-8);
        assert!(gs.norm() < 1e-8);
    }

    #[test]
    fn pme_family_endpoints() {
        let ch = make_equicorrelated(3, 0.4).unwrap().with_sigma2(0.2).unwrap();
        let y = DVector::from_vec(vec![0.3, 1.1, -0.8]);
        let m = mmse(&ch, &y).unwrap().mu;
        let d = decorrelate(&ch, &y).unwrap().mu;
        assert!((pme_alpha(&ch, &y, 0.2).unwrap() - m).amax() < 1e-12);
        assert!((pme_alpha(&ch, &y, 0.0).unwrap() - d).amax() < 1e-12);
        let big = pme_alpha(&ch, &y, 1e8).unwrap();
        let mf = ch.amplitudes().component_mul(&y);
        assert!(big.dot(&mf) / (big.norm() * mf.norm()) > 0.9999);
    }

    #[test]
    fn sic_first_sweep_by_hand() {
        let s2 = 0.25;
        let ch = make_equicorrelated(2, 0.7).unwrap().with_sigma2(s2).unwrap();
        let y = DVector::from_vec(vec![0.8, -1.3]);
        let opts = SicOptions::new(ClipBox::unbounded(), SicTarget::Mmse, 1);
        let mu = sic_run(&ch, &y, &opts, |_, _| {}).unwrap().mu;
        let mu1 = y[0] / (1.0 + s2);
        let mu2 = (y[1] - 0.7 * mu1) / (1.0 + s2);
        assert_abs_diff_eq!(mu[0], mu1, epsilon = 1e-15);
        assert_abs_diff_eq!(mu[1], mu2, epsilon = 1e-15);
    }

    #[test]
    fn sic_converges_to_mmse() {
        let ch = make_equicorrelated(4, 0.7).unwrap().with_sigma2(0.5).unwrap();
        let y = DVector::from_vec(vec![1.2, -0.4, 0.3, -1.9]);
        let mu = sic(&ch, &y, ClipBox::unbounded(), SicTarget::Mmse, 200).unwrap();
        assert!((mu - mmse(&ch, &y).unwrap().mu).amax() < 1e-8);
    }

    #[test]
    fn sic_decorrelator_target_fixed_point() {
        let ch = ChannelInstance::from_correlation(
            make_equicorrelated(3, 0.5).unwrap().correlation(),
            DVector::from_vec(vec![0.7, 1.3, 2.0]),
            0.1,
        )
        .unwrap();
        let y = DVector::from_vec(vec![0.4, -1.0, 2.5]);
        let mu = sic(&ch, &y, ClipBox::unbounded(), SicTarget::Decorrelator, 2000).unwrap();
        assert!((mu - decorrelate(&ch, &y).unwrap().mu).amax() < 1e-8);
    }

    #[test]
    fn inactive_box_matches_unclipped() {
        let ch = make_equicorrelated(3, 0.3).unwrap().with_sigma2(1.0).unwrap();
        let y = DVector::from_vec(vec![0.2, -0.1, 0.3]);
        let a = sic(&ch, &y, ClipBox::default(), SicTarget::Mmse, 100).unwrap();
        let b = sic(&ch, &y, ClipBox::unbounded(), SicTarget::Mmse, 100).unwrap();
        assert!(a.amax() < 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn clipped_limit_is_kkt_point() {
        let ch = make_equicorrelated(4, 0.7).unwrap().with_sigma2(0.05).unwrap();
        let y = DVector::from_vec(vec![3.0, -2.5, 0.1, 2.2]);
        let mu = sic(&ch, &y, ClipBox::default(), SicTarget::Mmse, 500).unwrap();
        assert!(mu.iter().any(|v| v.abs() == 1.0));
        assert!(kkt_violation(&ch, &y, &mu, ClipBox::default(), SicTarget::Mmse) < 1e-8);
    }

    #[test]
    fn relaxed_orders_reach_the_same_point() {
        let ch = make_equicorrelated(4, 0.7).unwrap().with_sigma2(0.3).unwrap();
        let y = DVector::from_vec(vec![0.5, 1.5, -0.7, 0.0]);
        let star = mmse(&ch, &y).unwrap().mu;
        for order in [UpdateOrder::AlmostCyclic { seed: 4 }, UpdateOrder::GaussSouthwell] {
            let mut opts = SicOptions::new(ClipBox::unbounded(), SicTarget::Mmse, 400);
            opts.order = order;
            let mu = sic_run(&ch, &y, &opts, |_, _| {}).unwrap().mu;
            assert!((mu - &star).amax() < 1e-8, "{order:?}");
        }
    }

    #[test]
    fn clip_box_validation() {
        assert!(ClipBox::new(1.0, -1.0).is_err());
        assert_eq!(ClipBox::default().project(3.0), 1.0);
    }
}
