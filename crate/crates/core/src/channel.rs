//! Synchronous CDMA signal model.
//!
//! `r = S A b + n` per channel use, matched-filter output `y = Sᵀ r` and the
//! whitened statistic `ȳ = F⁻ᵀ y` where `R = SᵀS = FᵀF`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{factor_ftf, spd_inverse, LowerTriangular, SymMatrix};

const UNIT_NORM_TOL: f64 = 1e-12;
const MAX_SPREADING_DRAWS: usize = 100;

#[derive(Debug, Clone)]
pub struct ChannelInstance {
    s: DMatrix<f64>,
    a: DVector<f64>,
    sigma2: f64,
    r: SymMatrix,
    r_inv: SymMatrix,
    f: LowerTriangular,
}

impl ChannelInstance {
    /// Builds an instance from an `N×K` spreading matrix with unit-norm columns.
    ///
    /// `sigma2 = 0` is accepted and means a noiseless channel.
    pub fn from_spreading(s: DMatrix<f64>, a: DVector<f64>, sigma2: f64) -> Result<Self> {
        let k = s.ncols();
        if k == 0 || s.nrows() == 0 {
            return Err(Error::DimensionMismatch("empty spreading matrix".into()));
        }
        if a.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "{} amplitudes for {} users",
                a.len(),
                k
            )));
        }
        for (col, c) in s.column_iter().enumerate() {
            if (c.norm() - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::DimensionMismatch(format!(
                    "spreading column {col} has norm {}",
                    c.norm()
                )));
            }
        }
        validate_params(&a, sigma2)?;
        let r = SymMatrix::symmetrize(s.transpose() * &s);
        let f = factor_ftf(&r)?;
        let r_inv = spd_inverse(&r)?;
        Ok(ChannelInstance {
            s,
            a,
            sigma2,
            r,
            r_inv,
            f,
        })
    }

    /// Builds an `N = K` instance whose signature correlation is exactly `r`.
    ///
    /// Detectors see `S` only through `R` and `Sᵀr`, so `S = F` is used.
    pub fn from_correlation(r: &SymMatrix, a: DVector<f64>, sigma2: f64) -> Result<Self> {
        let f = factor_ftf(r)?;
        let s = f.as_matrix().clone();
        // Column norms of F equal sqrt(R_kk); renormalise so R keeps a unit diagonal.
        let norms: Vec<f64> = s.column_iter().map(|c| c.norm()).collect();
        let mut s = s;
        for (j, n) in norms.iter().enumerate() {
            s.column_mut(j).unscale_mut(*n);
        }
        Self::from_spreading(s, a, sigma2)
    }

    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    pub fn k(&self) -> usize {
        self.s.ncols()
    }

    pub fn spreading(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn amplitudes(&self) -> &DVector<f64> {
        &self.a
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn correlation(&self) -> &SymMatrix {
        &self.r
    }

    pub fn correlation_inverse(&self) -> &SymMatrix {
        &self.r_inv
    }

    pub fn whitening_factor(&self) -> &LowerTriangular {
        &self.f
    }

    /// `AᵀSᵀSA = A R A`.
    pub fn gram(&self) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k, k, |i, j| self.a[i] * self.r[(i, j)] * self.a[j])
    }

    pub fn with_amplitudes(&self, a: DVector<f64>) -> Result<Self> {
        if a.len() != self.k() {
            return Err(Error::DimensionMismatch(format!(
                "{} amplitudes for {} users",
                a.len(),
                self.k()
            )));
        }
        validate_params(&a, self.sigma2)?;
        Ok(ChannelInstance { a, ..self.clone() })
    }

    pub fn with_sigma2(&self, sigma2: f64) -> Result<Self> {
        validate_params(&self.a, sigma2)?;
        Ok(ChannelInstance {
            sigma2,
            ..self.clone()
        })
    }

    /// Per-user SNR `A_k²/σ²` in dB.
    pub fn snr_db(&self, user: usize) -> f64 {
        10.0 * (self.a[user] * self.a[user] / self.sigma2).log10()
    }

    /// Matched filter `y = Sᵀ r` for one chip vector.
    pub fn matched_filter(&self, r: &DVector<f64>) -> DVector<f64> {
        self.s.transpose() * r
    }

    pub fn whiten(&self, y: &DVector<f64>) -> DVector<f64> {
        self.f.solve_transpose(y)
    }

    /// Sends one block through the channel with noise seeded by `rng_seed`.
    pub fn transmit(&self, blk: &SymbolBlock, rng_seed: u64) -> Result<Observation> {
        if blk.k() != self.k() {
            return Err(Error::DimensionMismatch(format!(
                "block has {} users, channel has {}",
                blk.k(),
                self.k()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let sd = self.sigma2.sqrt();
        let t_len = blk.len();
        let n = self.n();
        let k = self.k();
        let sa = &self.s * DMatrix::from_diagonal(&self.a);
        let mut r = DMatrix::zeros(t_len, n);
        let mut y = DMatrix::zeros(t_len, k);
        let mut ybar = DMatrix::zeros(t_len, k);
        for t in 0..t_len {
            let b_t = blk.b.row(t).transpose();
            let mut r_t = &sa * b_t;
            if sd > 0.0 {
                for v in r_t.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += sd * z;
                }
            }
            let y_t = self.matched_filter(&r_t);
            let ybar_t = self.whiten(&y_t);
            r.set_row(t, &r_t.transpose());
            y.set_row(t, &y_t.transpose());
            ybar.set_row(t, &ybar_t.transpose());
        }
        Ok(Observation { r, y, ybar })
    }
}

fn validate_params(a: &DVector<f64>, sigma2: f64) -> Result<()> {
    if let Some(k) = a.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::config("amplitudes", format!("amplitude {k} must be positive")));
    }
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::config("sigma2", "noise variance must be non-negative"));
    }
    Ok(())
}

/// `K` users with equal cross-correlation `rho`, unit amplitudes and `σ² = 1`.
pub fn make_equicorrelated(k: usize, rho: f64) -> Result<ChannelInstance> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidCorrelation(rho));
    }
    if k == 0 {
        return Err(Error::DimensionMismatch("no users".into()));
    }
    let r = SymMatrix::new(DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { rho }))?;
    ChannelInstance::from_correlation(&r, DVector::from_element(k, 1.0), 1.0)
}

/// Random `±1/√N` signatures, unit amplitudes and `σ² = 1`.
///
/// Redraws (deterministically) while `SᵀS` is not positive definite.
pub fn make_random_spreading(n: usize, k: usize, seed: u64) -> Result<ChannelInstance> {
    if k == 0 || k > n {
        return Err(Error::DimensionMismatch(format!(
            "random spreading needs 1 <= K <= N, got N={n}, K={k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chip = 1.0 / (n as f64).sqrt();
    for _ in 0..MAX_SPREADING_DRAWS {
        let s = DMatrix::from_fn(n, k, |_, _| if rng.random::<bool>() { chip } else { -chip });
        match ChannelInstance::from_spreading(s, DVector::from_element(k, 1.0), 1.0) {
            Ok(ch) => return Ok(ch),
            Err(Error::NotPositiveDefinite { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::RankDeficient(MAX_SPREADING_DRAWS))
}

/// `T×K` block of BPSK symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolBlock {
    b: DMatrix<f64>,
}

impl SymbolBlock {
    pub fn new(b: DMatrix<f64>) -> Result<Self> {
        if let Some(pos) = b.iter().position(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::config("symbols", format!("entry {pos} is not +-1")));
        }
        Ok(SymbolBlock { b })
    }

    /// Builds a block from per-user symbol streams of equal length.
    pub fn from_users(users: &[Vec<f64>]) -> Result<Self> {
        let k = users.len();
        let t = users.first().map_or(0, Vec::len);
        if users.iter().any(|u| u.len() != t) {
            return Err(Error::DimensionMismatch("user streams differ in length".into()));
        }
        Self::new(DMatrix::from_fn(t, k, |i, j| users[j][i]))
    }

    pub fn len(&self) -> usize {
        self.b.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.b.nrows() == 0
    }

    pub fn k(&self) -> usize {
        self.b.ncols()
    }

    pub fn symbols(&self) -> &DMatrix<f64> {
        &self.b
    }
}

/// Received, matched-filtered and whitened signals, one row per channel use.
#[derive(Debug, Clone)]
pub struct Observation {
    pub r: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub ybar: DMatrix<f64>,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.r.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.r.nrows() == 0
    }

    pub fn r_at(&self, t: usize) -> DVector<f64> {
        self.r.row(t).transpose()
    }

    pub fn y_at(&self, t: usize) -> DVector<f64> {
        self.y.row(t).transpose()
    }

    pub fn ybar_at(&self, t: usize) -> DVector<f64> {
        self.ybar.row(t).transpose()
    }
}
