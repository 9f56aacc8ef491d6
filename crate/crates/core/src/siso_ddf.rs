//! Decorrelating decision-feedback soft detector.
//!
//! The whitened model `ȳ = F A b + n̄` (with `R = FᵀF`, `F` lower triangular)
//! is causal in the detection order: `ȳ_k` only involves users detected at or
//! before `k`. One forward pass of mean-field updates restricted to that
//! triangular structure gives the soft DDF detector.

use nalgebra::DVector;

use crate::channel::ChannelInstance;
use crate::error::{Error, Result};
use crate::linalg::{factor_ftf, LowerTriangular, SymMatrix};
use crate::llr::{clamp_llr, clamp_m, soft_bit};
use crate::siso_discrete::{serial_update, DiscreteBelief};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum OrderPolicy {
    /// Strongest user first; ties keep index order.
    #[default]
    AmplitudeDescending,
    AsGiven,
    Custom(Vec<usize>),
}

/// Detection order as a list of user indices.
pub fn detection_order(ch: &ChannelInstance, policy: &OrderPolicy) -> Result<Vec<usize>> {
    let k = ch.k();
    match policy {
        OrderPolicy::AsGiven => Ok((0..k).collect()),
        OrderPolicy::AmplitudeDescending => {
            let a = ch.amplitudes();
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&i, &j| (a[j] * a[j]).total_cmp(&(a[i] * a[i])));
            Ok(order)
        }
        OrderPolicy::Custom(perm) => {
            validate_permutation(perm, k)?;
            Ok(perm.clone())
        }
    }
}

pub(crate) fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::InvalidPermutation(format!("length {} for {n} entries", perm.len())));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::InvalidPermutation(format!("entry {p} repeated or out of range")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Whitening factor and feedback coefficients for one detection order.
#[derive(Debug, Clone)]
pub struct DdfPrecompute {
    order: Vec<usize>,
    f: LowerTriangular,
    /// Amplitudes in detection order.
    a: DVector<f64>,
    sigma2: f64,
}

impl DdfPrecompute {
    pub fn new(ch: &ChannelInstance, order: &[usize]) -> Result<Self> {
        validate_permutation(order, ch.k())?;
        let r = ch.correlation();
        let r_perm = SymMatrix::new(nalgebra::DMatrix::from_fn(ch.k(), ch.k(), |i, j| r[(order[i], order[j])]))?;
        Ok(DdfPrecompute {
            order: order.to_vec(),
            f: factor_ftf(&r_perm)?,
            a: DVector::from_fn(ch.k(), |i, _| ch.amplitudes()[order[i]]),
            sigma2: ch.sigma2(),
        })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn factor(&self) -> &LowerTriangular {
        &self.f
    }

    /// `ȳ` in detection order from the matched-filter output in user order.
    pub fn whiten(&self, y: &DVector<f64>) -> DVector<f64> {
        let y_perm = DVector::from_fn(self.order.len(), |i, _| y[self.order[i]]);
        self.f.solve_transpose(&y_perm)
    }

    /// `η̄_iᵀ ȳ = A_i F_ii ȳ_i` for detection position `i`.
    pub fn eta_ybar(&self, ybar: &DVector<f64>, i: usize) -> f64 {
        self.a[i] * self.f[(i, i)] * ybar[i]
    }

    /// `β̄_i`: `A_i F_ii A_j F_ij` for `j < i`, zero elsewhere.
    pub fn feedback(&self, i: usize) -> DVector<f64> {
        let scale = self.a[i] * self.f[(i, i)];
        DVector::from_fn(self.a.len(), |j, _| if j < i { scale * self.a[j] * self.f[(i, j)] } else { 0.0 })
    }
}

/// One causal pass over whitened data `ybar` (detection order).
///
/// Priors, beliefs and extrinsic LLRs are in user order.
pub fn ddf_pass(pre: &DdfPrecompute, ybar: &DVector<f64>, prior_llr: &DVector<f64>) -> Result<(DiscreteBelief, DVector<f64>)> {
    ddf_pass_with(pre, ybar, prior_llr, true)
}

/// [`ddf_pass`] with the decision feedback optionally switched off.
pub fn ddf_pass_with(
    pre: &DdfPrecompute,
    ybar: &DVector<f64>,
    prior_llr: &DVector<f64>,
    feedback: bool,
) -> Result<(DiscreteBelief, DVector<f64>)> {
    let k = pre.order.len();
    for len in [ybar.len(), prior_llr.len()] {
        if len != k {
            return Err(Error::LengthMismatch { expected: k, actual: len });
        }
    }
    let mut m_perm = DVector::zeros(k);
    let mut m = DVector::zeros(k);
    let mut ext = DVector::zeros(k);
    for i in 0..k {
        let u = pre.order[i];
        let mut stat = pre.eta_ybar(ybar, i);
        if feedback {
            stat -= pre.feedback(i).dot(&m_perm);
        }
        let data = 2.0 / pre.sigma2 * stat;
        let pos = prior_llr[u] + data;
        m_perm[i] = clamp_m(soft_bit(pos));
        m[u] = m_perm[i];
        ext[u] = clamp_llr(data);
    }
    Ok((DiscreteBelief::new(m)?, ext))
}

/// Uncoded DDF-aided detection: one DDF pass, then `sweeps` serial mean-field
/// sweeps in detection order with zero priors.
pub fn ddf_aided_uncoded(ch: &ChannelInstance, pre: &DdfPrecompute, y: &DVector<f64>, sweeps: usize) -> Result<DiscreteBelief> {
    let zero = DVector::zeros(ch.k());
    let (mut q, _) = ddf_pass(pre, &pre.whiten(y), &zero)?;
    for _ in 0..sweeps {
        q = serial_update(ch, y, &zero, &q, pre.order())?.0;
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::make_equicorrelated;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn with_amps(a: &[f64]) -> ChannelInstance {
        let k = a.len();
        make_equicorrelated(k, 0.3).unwrap().with_amplitudes(DVector::from_row_slice(a)).unwrap()
    }

    #[test]
    fn order_policies() {
        assert_eq!(detection_order(&with_amps(&[1.0, 1.0, 1.0]), &OrderPolicy::AmplitudeDescending).unwrap(), vec![0, 1, 2]);
        assert_eq!(detection_order(&with_amps(&[2.0, 1.0]), &OrderPolicy::AmplitudeDescending).unwrap(), vec![0, 1]);
        assert_eq!(detection_order(&with_amps(&[1.0, 3.0, 2.0]), &OrderPolicy::AmplitudeDescending).unwrap(), vec![1, 2, 0]);
        assert_eq!(detection_order(&with_amps(&[1.0, 3.0]), &OrderPolicy::AsGiven).unwrap(), vec![0, 1]);
        assert!(detection_order(&with_amps(&[1.0, 3.0]), &OrderPolicy::Custom(vec![1, 1])).is_err());
        assert!(detection_order(&with_amps(&[1.0, 3.0]), &OrderPolicy::Custom(vec![0])).is_err());
    }

    #[test]
    fn single_user_pass() {
        let ch = ChannelInstance::from_spreading(DMatrix::identity(1, 1), DVector::from_element(1, 1.4), 0.5).unwrap();
        let pre = DdfPrecompute::new(&ch, &[0]).unwrap();
        let y = DVector::from_element(1, -0.3);
        let ybar = pre.whiten(&y);
        assert_eq!(ybar, y);
        let (q, ext) = ddf_pass(&pre, &ybar, &DVector::zeros(1)).unwrap();
        assert_abs_diff_eq!(q.m()[0], (1.4 * -0.3 / 0.5f64).tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(ext[0], 2.0 * 1.4 * -0.3 / 0.5, epsilon = 1e-12);
    }

    #[test]
    fn two_user_noiseless_decisions() {
        let ch = make_equicorrelated(2, 0.7).unwrap().with_sigma2(1e-6).unwrap();
        let b = DVector::from_vec(vec![1.0, -1.0]);
        let y = ch.correlation().as_matrix() * &b;
        let pre = DdfPrecompute::new(&ch, &[0, 1]).unwrap();
        // F = [[√0.51, 0], [0.7, 1]]: ȳ = F b = [√0.51, -0.3].
        let ybar = pre.whiten(&y);
        assert_abs_diff_eq!(ybar[0], 0.51f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(ybar[1], -0.3, epsilon = 1e-12);
        let (q, _) = ddf_pass(&pre, &ybar, &DVector::zeros(2)).unwrap();
        assert_eq!(q.m()[0].signum(), 1.0);
        assert_eq!(q.m()[1].signum(), -1.0);
    }

    #[test]
    fn feedback_structure() {
        let ch = with_amps(&[1.0, 2.0, 0.5, 1.5]);
        let pre = DdfPrecompute::new(&ch, &[3, 1, 0, 2]).unwrap();
        let f = pre.factor().as_matrix();
        let back = f.transpose() * f;
        for i in 0..4 {
            for j in 0..4 {
                let (u, v) = (pre.order()[i], pre.order()[j]);
                assert_abs_diff_eq!(back[(i, j)], ch.correlation()[(u, v)], epsilon = 1e-12);
            }
            let beta = pre.feedback(i);
            for j in i..4 {
                assert_eq!(beta[j], 0.0);
            }
        }
    }

    #[test]
    fn causality_and_open_loop() {
        let ch = with_amps(&[1.0, 0.8, 1.2]);
        let pre = DdfPrecompute::new(&ch, &[0, 1, 2]).unwrap();
        let ybar = DVector::from_vec(vec![0.4, -0.9, 0.2]);
        let prior = DVector::zeros(3);
        let (q, _) = ddf_pass(&pre, &ybar, &prior).unwrap();
        let mut later = ybar.clone();
        later[2] = 5.0;
        let (q2, _) = ddf_pass(&pre, &later, &prior).unwrap();
        assert_eq!(q.m()[0], q2.m()[0]);
        assert_eq!(q.m()[1], q2.m()[1]);

        let (open, _) = ddf_pass_with(&pre, &ybar, &prior, false).unwrap();
        for i in 0..3 {
            let expected = (pre.eta_ybar(&ybar, i) / ch.sigma2()).tanh();
            assert_abs_diff_eq!(open.m()[i], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn extrinsic_ignores_own_prior() {
        let ch = with_amps(&[1.0, 0.8, 1.2]);
        let pre = DdfPrecompute::new(&ch, &[2, 0, 1]).unwrap();
        let ybar = DVector::from_vec(vec![0.4, -0.9, 0.2]);
        let prior = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let (q, ext) = ddf_pass(&pre, &ybar, &prior).unwrap();
        for u in 0..3 {
            assert_abs_diff_eq!(q.m()[u], ((prior[u] + ext[u]) / 2.0).tanh(), epsilon = 1e-12);
        }
    }
}
