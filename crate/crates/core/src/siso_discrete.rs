//! Discrete (mean-field) soft-in-soft-out detector.
//!
//! The belief is a product of Bernoulli factors parameterised by their means
//! `m_k ∈ (-1, 1)`. The free energy is convex in each coordinate, whose exact
//! minimiser is `m_k = tanh(LLR_k / 2)`; sweeping the users gives the serial
//! update, and dropping the sweep gives the one-shot soft canceller.

use nalgebra::{DMatrix, DVector};

use crate::channel::ChannelInstance;
use crate::error::{Error, Result};
use crate::llr::{clamp_llr, clamp_m, soft_bit, softplus};

/// Factorised binary belief `Q(b) = Π_k Q(b_k)` with means `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteBelief {
    m: DVector<f64>,
}

impl DiscreteBelief {
    pub fn new(m: DVector<f64>) -> Result<Self> {
        if let Some(k) = m.iter().position(|v| !(v.abs() < 1.0)) {
            return Err(Error::DomainError(k));
        }
        Ok(DiscreteBelief { m })
    }

    pub fn zeros(k: usize) -> Self {
        DiscreteBelief { m: DVector::zeros(k) }
    }

    pub fn m(&self) -> &DVector<f64> {
        &self.m
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.m
    }
}

/// Per-channel quantities of the mean-field update.
///
/// In the matched-filter domain `η_kᵀ r = A_k y_k` and `β_k` is column `k` of
/// `B = ARA - diag(ARA)`.
#[derive(Debug, Clone)]
pub struct McColumns {
    a: DVector<f64>,
    beta: DMatrix<f64>,
    sigma2: f64,
}

impl McColumns {
    pub fn new(ch: &ChannelInstance) -> Self {
        let mut beta = ch.gram();
        beta.fill_diagonal(0.0);
        McColumns {
            a: ch.amplitudes().clone(),
            beta,
            sigma2: ch.sigma2(),
        }
    }

    pub fn k(&self) -> usize {
        self.a.len()
    }

    pub fn beta(&self) -> &DMatrix<f64> {
        &self.beta
    }

    pub fn eta_r(&self, y: &DVector<f64>, k: usize) -> f64 {
        self.a[k] * y[k]
    }

    /// `(2/σ²)(η_kᵀr - β_kᵀm)`: the channel's contribution to user `k`'s LLR.
    pub fn data_llr(&self, y: &DVector<f64>, m: &DVector<f64>, k: usize) -> f64 {
        let interference = self.beta.column(k).dot(m);
        2.0 / self.sigma2 * (self.eta_r(y, k) - interference)
    }
}

fn check(ch: &ChannelInstance, y: &DVector<f64>, prior_llr: &DVector<f64>) -> Result<()> {
    for len in [y.len(), prior_llr.len()] {
        if len != ch.k() {
            return Err(Error::LengthMismatch {
                expected: ch.k(),
                actual: len,
            });
        }
    }
    Ok(())
}

/// `KL(Bern((1+m)/2) ‖ Bern(σ(λ)))` for a prior LLR `λ`.
pub(crate) fn bernoulli_kl(m: f64, prior_llr: f64) -> f64 {
    let qp = 0.5 * (1.0 + m);
    let qm = 0.5 * (1.0 - m);
    let log_qp = m.ln_1p() - std::f64::consts::LN_2;
    let log_qm = (-m).ln_1p() - std::f64::consts::LN_2;
    qp * (log_qp + softplus(-prior_llr)) + qm * (log_qm + softplus(prior_llr))
}

/// Mean-field free energy.
///
/// `Σ_k KL(Q_k ‖ prior_k) + (1/2σ²)[mᵀBm - 2(Ay)ᵀm + tr(ARA)]`. It differs from
/// `Σ_b Q(b) log Q(b)/p(b, r)` by the constant `‖r‖²/(2σ²) + (N/2)log(2πσ²)`.
pub fn free_energy_disc(ch: &ChannelInstance, y: &DVector<f64>, prior_llr: &DVector<f64>, q: &DiscreteBelief) -> Result<f64> {
    check(ch, y, prior_llr)?;
    let m = q.m();
    if m.len() != ch.k() {
        return Err(Error::LengthMismatch {
            expected: ch.k(),
            actual: m.len(),
        });
    }
    if let Some(k) = m.iter().position(|v| !(v.abs() < 1.0)) {
        return Err(Error::DomainError(k));
    }
    let mc = McColumns::new(ch);
    let kl: f64 = (0..ch.k()).map(|k| bernoulli_kl(m[k], prior_llr[k])).sum();
    let a = ch.amplitudes();
    let quad = m.dot(&(mc.beta() * m)) - 2.0 * a.component_mul(y).dot(m) + a.dot(a);
    Ok(kl + quad / (2.0 * ch.sigma2()))
}

/// One coordinate update; returns the posterior LLR of user `k`.
fn update_coordinate(mc: &McColumns, y: &DVector<f64>, prior: f64, m: &mut DVector<f64>, k: usize) -> f64 {
    let llr = prior + mc.data_llr(y, m, k);
    m[k] = clamp_m(soft_bit(llr));
    clamp_llr(llr)
}

/// One serial sweep in `order`, each coordinate set to its exact minimiser.
///
/// Returns the updated belief and the posterior LLRs (entries of users not in
/// `order` are zero).
pub fn serial_update(
    ch: &ChannelInstance,
    y: &DVector<f64>,
    prior_llr: &DVector<f64>,
    q: &DiscreteBelief,
    order: &[usize],
) -> Result<(DiscreteBelief, DVector<f64>)> {
    serial_update_observed(ch, y, prior_llr, q, order, |_, _| {})
}

/// [`serial_update`] with a callback after every coordinate update.
pub fn serial_update_observed(
    ch: &ChannelInstance,
    y: &DVector<f64>,
    prior_llr: &DVector<f64>,
    q: &DiscreteBelief,
    order: &[usize],
    mut observe: impl FnMut(usize, &DVector<f64>),
) -> Result<(DiscreteBelief, DVector<f64>)> {
    check(ch, y, prior_llr)?;
    if let Some(&bad) = order.iter().find(|&&k| k >= ch.k()) {
        return Err(Error::InvalidPermutation(format!("user {bad} out of range")));
    }
    let mc = McColumns::new(ch);
    let mut m = q.m().clone();
    let mut pos = DVector::zeros(ch.k());
    for &k in order {
        pos[k] = update_coordinate(&mc, y, prior_llr[k], &mut m, k);
        observe(k, &m);
    }
    Ok((DiscreteBelief { m }, pos))
}

/// Soft interference cancellation with the prior means and no iteration:
/// `LLR_k = (2/σ²) A_k (y_k - Σ_{j≠k} R_kj A_j b̃_j)`, `b̃ = tanh(prior / 2)`.
///
/// Never consults user `k`'s own prior, and does not guarantee a free-energy
/// decrease.
pub fn ext_one_shot(ch: &ChannelInstance, y: &DVector<f64>, prior_llr: &DVector<f64>) -> Result<DVector<f64>> {
    check(ch, y, prior_llr)?;
    let mc = McColumns::new(ch);
    let bt = prior_llr.map(soft_bit);
    Ok(DVector::from_fn(ch.k(), |k, _| clamp_llr(mc.data_llr(y, &bt, k))))
}

/// Uncoded serial updates from `m = 0` with zero priors.
pub fn tanh_sic(ch: &ChannelInstance, y: &DVector<f64>, sweeps: usize) -> Result<DiscreteBelief> {
    if sweeps == 0 {
        return Err(Error::config("sweeps", "must be at least 1"));
    }
    let zero = DVector::zeros(ch.k());
    let order: Vec<usize> = (0..ch.k()).collect();
    let mut q = DiscreteBelief::zeros(ch.k());
    for _ in 0..sweeps {
        q = serial_update(ch, y, &zero, &q, &order)?.0;
    }
    Ok(q)
}

/// Largest `|m_k - tanh(LLR_k(m) / 2)|`: zero exactly at a stationary point.
pub fn stationarity_residual(ch: &ChannelInstance, y: &DVector<f64>, prior_llr: &DVector<f64>, q: &DiscreteBelief) -> f64 {
    let mc = McColumns::new(ch);
    (0..ch.k())
        .map(|k| (q.m()[k] - (0.5 * (prior_llr[k] + mc.data_llr(y, q.m(), k))).tanh()).abs())
        .fold(0.0, f64::max)
}
