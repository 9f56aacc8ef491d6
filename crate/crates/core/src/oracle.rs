//! Exponential-cost exact references: enumeration over all symbol vectors,
//! exhaustive MAP decoding, dense grid search and closed-form Gaussian
//! conditioning. Intended for tests and small instances.

use nalgebra::{DMatrix, DVector};

use crate::channel::ChannelInstance;
use crate::coding::ConvCode;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::gauss_jordan_inverse;
use crate::llr::{bit_to_symbol, softplus};
use crate::siso_discrete::{bernoulli_kl, DiscreteBelief, McColumns};

pub const MAX_ENUM_USERS: usize = 16;
pub const MAX_GRID_USERS: usize = 3;
pub const MAX_MAP_BITS: usize = 20;

/// `log Σ exp(x_i)` with max subtraction.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + v.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

/// Symbol of user `k` in enumeration index `idx` (bit set means -1).
fn sym(idx: usize, k: usize) -> f64 {
    if idx >> k & 1 == 1 {
        -1.0
    } else {
        1.0
    }
}

fn symbols(idx: usize, k: usize) -> DVector<f64> {
    DVector::from_fn(k, |j, _| sym(idx, j))
}

/// `log p(b = ±1)` under a prior LLR.
fn log_prior(llr: f64, b: f64) -> f64 {
    if b > 0.0 {
        -softplus(-llr)
    } else {
        -softplus(llr)
    }
}

/// Full joint table `log p(r | b) + log p(b)` over all `2^K` symbol vectors,
/// including the Gaussian normaliser.
fn log_joint_table(ch: &ChannelInstance, r: &DVector<f64>, priors: &DVector<f64>) -> Result<Vec<f64>> {
    let k = ch.k();
    if k > MAX_ENUM_USERS {
        return Err(Error::TooLarge(k));
    }
    if r.len() != ch.n() || priors.len() != k {
        return Err(Error::DimensionMismatch("received vector or priors do not match the channel".into()));
    }
    let s2 = ch.sigma2();
    let norm = -0.5 * ch.n() as f64 * (2.0 * std::f64::consts::PI * s2).ln();
    let sa = ch.spreading() * DMatrix::from_diagonal(ch.amplitudes());
    Ok((0..1usize << k)
        .map(|idx| {
            let b = symbols(idx, k);
            let resid = r - &sa * &b;
            let lp: f64 = (0..k).map(|j| log_prior(priors[j], b[j])).sum();
            norm - resid.norm_squared() / (2.0 * s2) + lp
        })
        .collect())
}

/// Exact posterior over all symbol vectors.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    /// `p(b | r)`, indexed so that bit `k` of the index set means `b_k = -1`.
    pub joint: Vec<f64>,
    /// `(p(b_k = +1 | r), p(b_k = -1 | r))` per user.
    pub marginals: Vec<(f64, f64)>,
    log_marginals: Vec<(f64, f64)>,
}

impl ExactPosterior {
    pub fn llr(&self, k: usize) -> f64 {
        self.log_marginals[k].0 - self.log_marginals[k].1
    }
}

/// `p(b | r) ∝ p(r | b) Π_k p(b_k)` by enumeration (`K <= 16`).
pub fn exact_posterior(ch: &ChannelInstance, r: &DVector<f64>, priors: &DVector<f64>) -> Result<ExactPosterior> {
    let table = log_joint_table(ch, r, priors)?;
    let k = ch.k();
    let z = log_sum_exp(table.iter().copied());
    let joint: Vec<f64> = table.iter().map(|l| (l - z).exp()).collect();
    let log_marginals: Vec<(f64, f64)> = (0..k)
        .map(|u| {
            let plus = log_sum_exp(table.iter().enumerate().filter(|(i, _)| i >> u & 1 == 0).map(|(_, &l)| l));
            let minus = log_sum_exp(table.iter().enumerate().filter(|(i, _)| i >> u & 1 == 1).map(|(_, &l)| l));
            (plus - z, minus - z)
        })
        .collect();
    let marginals = log_marginals.iter().map(|&(p, m)| (p.exp(), m.exp())).collect();
    Ok(ExactPosterior {
        joint,
        marginals,
        log_marginals,
    })
}

/// Exact extrinsic LLR of user `k`, computed two ways.
///
/// The first marginalises the likelihood over the other users with their
/// priors (own prior never enters); the second divides the posterior marginal
/// by the prior. Returns both.
pub fn exact_ext(ch: &ChannelInstance, r: &DVector<f64>, priors: &DVector<f64>, k: usize) -> Result<(f64, f64)> {
    if k >= ch.k() {
        return Err(Error::DimensionMismatch(format!("user {k} of {}", ch.k())));
    }
    let mut without_own = priors.clone();
    without_own[k] = 0.0;
    let table = log_joint_table(ch, r, &without_own)?;
    let plus = log_sum_exp(table.iter().enumerate().filter(|(i, _)| i >> k & 1 == 0).map(|(_, &l)| l));
    let minus = log_sum_exp(table.iter().enumerate().filter(|(i, _)| i >> k & 1 == 1).map(|(_, &l)| l));
    let by_marginalisation = plus - minus;
    let by_division = exact_posterior(ch, r, priors)?.llr(k) - priors[k];
    Ok((by_marginalisation, by_division))
}

/// `Σ_b Q(b) log Q(b)/p(b, r)` for a factorised `Q` with means `m`.
pub fn enumerated_free_energy(ch: &ChannelInstance, r: &DVector<f64>, priors: &DVector<f64>, m: &DVector<f64>) -> Result<f64> {
    let table = log_joint_table(ch, r, priors)?;
    let k = ch.k();
    let mut f = 0.0;
    for (idx, lj) in table.iter().enumerate() {
        let log_q: f64 = (0..k).map(|u| (0.5 * (1.0 + sym(idx, u) * m[u])).ln()).sum();
        let q = log_q.exp();
        if q > 0.0 {
            f += q * (log_q - lj);
        }
    }
    Ok(f)
}

/// Dense grid search for the minimiser of the mean-field free energy
/// (`K <= 3`). Grid points run from `-1 + step` to `1 - step`.
pub fn grid_min_fdisc(ch: &ChannelInstance, y: &DVector<f64>, priors: &DVector<f64>, step: f64) -> Result<DiscreteBelief> {
    let k = ch.k();
    if k > MAX_GRID_USERS {
        return Err(Error::TooLarge(k));
    }
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::config("grid_step", "must lie in (0, 1)"));
    }
    let n = ((2.0 / step).round() as usize).saturating_sub(1);
    let axis: Vec<f64> = (1..=n).map(|i| -1.0 + i as f64 * step).filter(|v| v.abs() < 1.0).collect();
    let rows = axis.len();
    let total = rows.pow(k as u32);
    let per_row = total / rows;
    // F(m) = Σ_k KL_k(m_k) + (1/2σ²)(mᵀBm - 2(Ay)ᵀm) + const, tabulated per axis.
    let mc = McColumns::new(ch);
    let s2 = ch.sigma2();
    let kl: Vec<Vec<f64>> = (0..k).map(|u| axis.iter().map(|&v| bernoulli_kl(v, priors[u])).collect()).collect();
    let beta = mc.beta();
    let best = Execution::Parallel.map(rows, |i0| {
        let mut best = (f64::INFINITY, vec![0usize; k]);
        let mut idx = vec![0usize; k];
        for rest in 0..per_row {
            let mut code = i0 * per_row + rest;
            for slot in idx.iter_mut() {
                *slot = code % rows;
                code /= rows;
            }
            let mut f = 0.0;
            for u in 0..k {
                let mu = axis[idx[u]];
                f += kl[u][idx[u]] - mc.eta_r(y, u) * mu / s2;
                for v in 0..u {
                    f += beta[(u, v)] * mu * axis[idx[v]] / s2;
                }
            }
            if f < best.0 {
                best = (f, idx.clone());
            }
        }
        best
    });
    let (_, idx) = best.into_iter().fold((f64::INFINITY, vec![0; k]), |a, b| if b.0 < a.0 { b } else { a });
    let m = DVector::from_fn(k, |u, _| axis[idx[u]]);
    DiscreteBelief::new(m)
}

/// Bitwise MAP decoding by enumerating every information word.
///
/// Returns `(coded posterior LLRs, information posterior LLRs)`.
pub fn exhaustive_map_decode(code: &ConvCode, channel_llr: &[f64], prior_info: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let steps = channel_llr.len() / 2;
    let info_len = steps - code.steps(0);
    if info_len == 0 || info_len > MAX_MAP_BITS || code.coded_len(info_len) != channel_llr.len() {
        return Err(Error::TooLarge(info_len));
    }
    let mut metrics = Vec::with_capacity(1 << info_len);
    let mut words = Vec::with_capacity(1 << info_len);
    for w in 0..1usize << info_len {
        let info: Vec<u8> = (0..info_len).map(|i| (w >> i & 1) as u8).collect();
        let coded = code.encode(&info)?;
        let mut metric: f64 = coded.iter().zip(channel_llr).map(|(&c, l)| 0.5 * bit_to_symbol(c) * l).sum();
        if !prior_info.is_empty() {
            metric += info.iter().zip(prior_info).map(|(&u, l)| 0.5 * bit_to_symbol(u) * l).sum::<f64>();
        }
        metrics.push(metric);
        words.push((info, coded));
    }
    let llr_of = |select: &dyn Fn(usize) -> u8| -> f64 {
        let zero = log_sum_exp(metrics.iter().enumerate().filter(|(i, _)| select(*i) == 0).map(|(_, &m)| m));
        let one = log_sum_exp(metrics.iter().enumerate().filter(|(i, _)| select(*i) == 1).map(|(_, &m)| m));
        zero - one
    };
    let coded = (0..channel_llr.len()).map(|j| llr_of(&|i| words[i].1[j])).collect();
    let info = (0..info_len).map(|t| llr_of(&|i| words[i].0[t])).collect();
    Ok((coded, info))
}

/// Posterior of `b ~ N(m0, P)` given `r = SAb + n` by the gain form
/// `m = m0 + G(r - SAm0)`, `C = P - G SA P`, `G = P (SA)ᵀ (SA P (SA)ᵀ + σ²I)⁻¹`.
pub fn gaussian_conditioning(
    ch: &ChannelInstance,
    r: &DVector<f64>,
    m0: &DVector<f64>,
    p: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let h = ch.spreading() * DMatrix::from_diagonal(ch.amplitudes());
    let mut innov = &h * p * h.transpose();
    for i in 0..ch.n() {
        innov[(i, i)] += ch.sigma2();
    }
    let gain = p * h.transpose() * gauss_jordan_inverse(&innov)?;
    let mean = m0 + &gain * (r - &h * m0);
    let cov = p - &gain * &h * p;
    Ok((mean, cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{make_equicorrelated, SymbolBlock};
    use crate::detect_linear::mmse;
    use crate::siso_discrete::{free_energy_disc, serial_update, stationarity_residual};
    use approx::assert_abs_diff_eq;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn concentrates_at_high_snr() {
        let ch = make_equicorrelated(2, 0.7).unwrap().with_sigma2(1e-4).unwrap();
        let b = [1.0, -1.0];
        let blk = SymbolBlock::from_users(&[vec![b[0]], vec![b[1]]]).unwrap();
        let r = ch.with_sigma2(0.0).unwrap().transmit(&blk, 0).unwrap().r_at(0);
        let post = exact_posterior(&ch, &r, &DVector::zeros(2)).unwrap();
        // index with bit 1 set: b = [+1, -1]
        assert!(post.joint[0b10] > 0.999);
        assert_abs_diff_eq!(post.joint.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn orthogonal_marginals_factorise() {
        let ch = ChannelInstance::from_spreading(DMatrix::identity(3, 3), DVector::from_vec(vec![1.0, 0.5, 2.0]), 0.7).unwrap();
        let r = DVector::from_vec(vec![0.3, -0.8, 0.1]);
        let post = exact_posterior(&ch, &r, &DVector::zeros(3)).unwrap();
        for k in 0..3 {
            let l = 2.0 * ch.amplitudes()[k] * r[k] / 0.7;
            assert_abs_diff_eq!(post.marginals[k].0, sigmoid(l), epsilon = 1e-12);
            assert_abs_diff_eq!(post.marginals[k].0 + post.marginals[k].1, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_user_extrinsic_ignores_prior() {
        let ch = ChannelInstance::from_spreading(DMatrix::identity(1, 1), DVector::from_element(1, 1.3), 0.4).unwrap();
        let r = DVector::from_element(1, -0.2);
        let (a, b) = exact_ext(&ch, &r, &DVector::from_element(1, 2.5), 0).unwrap();
        let expected = 2.0 * 1.3 * -0.2 / 0.4;
        assert_abs_diff_eq!(a, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(b, expected, epsilon = 1e-12);
        let post = exact_posterior(&ch, &r, &DVector::from_element(1, 2.5)).unwrap();
        assert_abs_diff_eq!(post.marginals[0].0, sigmoid(2.5 + expected), epsilon = 1e-12);
    }

    #[test]
    fn two_routes_to_extrinsic_agree() {
        let ch = make_equicorrelated(3, 0.7).unwrap().with_sigma2(0.5).unwrap();
        let r = ch.spreading() * DVector::from_vec(vec![0.4, -1.1, 0.9]);
        let priors = DVector::from_vec(vec![1.0, -0.5, 3.0]);
        for k in 0..3 {
            let (a, b) = exact_ext(&ch, &r, &priors, k).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn too_large() {
        let ch = make_equicorrelated(17, 0.1).unwrap();
        assert!(matches!(
            exact_posterior(&ch, &DVector::zeros(17), &DVector::zeros(17)),
            Err(Error::TooLarge(17))
        ));
        let ch4 = make_equicorrelated(4, 0.1).unwrap();
        assert!(grid_min_fdisc(&ch4, &DVector::zeros(4), &DVector::zeros(4), 0.1).is_err());
    }

    #[test]
    fn mean_field_free_energy_equals_enumeration() {
        let ch = make_equicorrelated(2, 0.7).unwrap().with_sigma2(0.6).unwrap();
        let r = ch.spreading() * DVector::from_vec(vec![0.7, -0.2]);
        let y = ch.matched_filter(&r);
        let priors = DVector::from_vec(vec![0.8, -1.5]);
        for m in [[0.1, 0.2], [-0.9, 0.5], [0.99, -0.99]] {
            let m = DVector::from_row_slice(&m);
            let e = enumerated_free_energy(&ch, &r, &priors, &m).unwrap();
            let f = free_energy_disc(&ch, &y, &priors, &DiscreteBelief::new(m).unwrap()).unwrap();
            let constant = r.norm_squared() / (2.0 * 0.6) + 0.5 * ch.n() as f64 * (2.0 * std::f64::consts::PI * 0.6).ln();
            assert!((e - (f + constant)).abs() < 1e-10, "{e} vs {}", f + constant);
        }
    }

    #[test]
    fn grid_minimiser_single_user_stationary() {
        let ch = ChannelInstance::from_spreading(DMatrix::identity(1, 1), DVector::from_element(1, 1.0), 0.8).unwrap();
        let y = DVector::from_element(1, 0.3);
        let priors = DVector::from_element(1, 0.4);
        let q = grid_min_fdisc(&ch, &y, &priors, 1e-3).unwrap();
        let exact = ((0.4 + 2.0 * 0.3 / 0.8) / 2.0f64).tanh();
        assert!((q.m()[0] - exact).abs() <= 1e-3);
        assert!(stationarity_residual(&ch, &y, &priors, &q) < 2e-3);
    }

    #[test]
    fn grid_minimiser_orthogonal_separable() {
        let ch = ChannelInstance::from_spreading(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 0.6]), 0.5).unwrap();
        let y = DVector::from_vec(vec![-0.2, 0.5]);
        let priors = DVector::from_vec(vec![1.0, -0.3]);
        let q = grid_min_fdisc(&ch, &y, &priors, 1e-2).unwrap();
        for k in 0..2 {
            let exact = (0.5 * (priors[k] + 2.0 * ch.amplitudes()[k] * y[k] / 0.5)).tanh();
            assert!((q.m()[k] - exact).abs() <= 1e-2);
        }
    }

    #[test]
    fn serial_fixed_point_near_grid_minimiser() {
        let ch = make_equicorrelated(2, 0.7).unwrap().with_sigma2(0.6).unwrap();
        let y = DVector::from_vec(vec![0.5, -0.1]);
        let priors = DVector::from_vec(vec![0.3, 0.0]);
        let g = grid_min_fdisc(&ch, &y, &priors, 1e-3).unwrap();
        let mut q = g.clone();
        for _ in 0..500 {
            q = serial_update(&ch, &y, &priors, &q, &[0, 1]).unwrap().0;
        }
        assert!(stationarity_residual(&ch, &y, &priors, &q) < 1e-8);
        assert!((q.m() - g.m()).amax() <= 1e-3);
    }

    #[test]
    fn gaussian_postulate_matches_conditioning() {
        let ch = make_equicorrelated(3, 0.7).unwrap().with_sigma2(0.4).unwrap();
        let r = ch.spreading() * DVector::from_vec(vec![1.0, 0.3, -0.6]);
        let (mean, cov) = gaussian_conditioning(&ch, &r, &DVector::zeros(3), &DMatrix::identity(3, 3)).unwrap();
        let q = mmse(&ch, &ch.matched_filter(&r)).unwrap();
        assert!((mean - q.mu).amax() < 1e-10);
        assert!((cov - q.sigma.as_matrix()).amax() < 1e-10);
    }

    #[test]
    fn log_sum_exp_stable() {
        assert_abs_diff_eq!(log_sum_exp([1000.0, 1000.0]), 1000.0 + 2f64.ln(), epsilon = 1e-12);
        assert_eq!(log_sum_exp([f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
