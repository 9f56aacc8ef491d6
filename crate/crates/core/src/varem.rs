//! Variational EM: joint estimation of amplitudes `a` and noise variance `σ²`
//! around the turbo detector.
//!
//! The parameter free energy for fixed beliefs (means `μ_t`, diagonal or full
//! covariances `Σ_t`) is
//!
//! ```text
//! F(a, σ²) = Σ_t [ (‖r_t − S M_t a‖² + aᵀ(R∘Σ_t)a) / (2σ²) + (N/2) log σ² ]
//!          + ‖a − ã‖² / (2ς²)
//! ```
//!
//! with `M_t = diag(μ_t)`. The M-step minimises it over `a` (old `σ²`) and
//! then over `σ²` (new `a`).

use nalgebra::{DMatrix, DVector};

use crate::channel::{ChannelInstance, Observation};
use crate::coding::Decoder;
use crate::error::{Error, Result};
use crate::linalg::{spd_solve, SymMatrix};
use crate::llr::soft_bit;
use crate::turbo::{LlrFrame, TurboOptions, TurboState};

/// Lower bound on the noise-variance estimate.
pub const SIGMA2_FLOOR: f64 = 1e-9;
/// Lower bound on the initial noise-variance estimate.
pub const SIGMA2_INIT_FLOOR: f64 = 1e-3;
/// Smallest amplitude handed to the detector.
pub const AMPLITUDE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EmState {
    pub a_hat: DVector<f64>,
    pub sigma2_hat: f64,
    pub a_tilde: DVector<f64>,
    /// Prior variance `ς²` of `ã`; `f64::INFINITY` is a flat prior, `0` pins `a = ã`.
    pub varsigma2: f64,
    /// Block length.
    pub t: usize,
    /// Whether the M-step updates `σ²`.
    pub estimate_sigma2: bool,
}

impl EmState {
    /// `a⁽⁰⁾ = ã`, `σ²⁽⁰⁾` from the received energy minus the prior signal energy.
    pub fn initial(obs: &Observation, a_tilde: DVector<f64>, varsigma2: f64) -> Result<Self> {
        if obs.is_empty() {
            return Err(Error::DimensionMismatch("empty observation".into()));
        }
        if varsigma2.is_nan() || varsigma2 < 0.0 {
            return Err(Error::config("varsigma", "prior variance must be non-negative"));
        }
        let n = obs.r.ncols() as f64;
        let energy = obs.r.norm_squared() / (n * obs.len() as f64);
        let sigma2_hat = (energy - a_tilde.norm_squared() / n).max(SIGMA2_INIT_FLOOR);
        Ok(EmState {
            a_hat: a_tilde.clone(),
            sigma2_hat,
            a_tilde,
            varsigma2,
            t: obs.len(),
            estimate_sigma2: true,
        })
    }

    /// Known parameters: `ς² = 0` and `σ²` pinned, so the M-step is a no-op.
    pub fn known(ch: &ChannelInstance, t: usize) -> Self {
        EmState {
            a_hat: ch.amplitudes().clone(),
            sigma2_hat: ch.sigma2().max(SIGMA2_FLOOR),
            a_tilde: ch.amplitudes().clone(),
            varsigma2: 0.0,
            t,
            estimate_sigma2: false,
        }
    }

    /// The receiver's channel model: true geometry, estimated parameters.
    pub fn receiver(&self, geometry: &ChannelInstance) -> Result<ChannelInstance> {
        let a = self.a_hat.map(|v| v.max(AMPLITUDE_FLOOR));
        geometry.with_amplitudes(a)?.with_sigma2(self.sigma2_hat.max(SIGMA2_FLOOR))
    }
}

#[derive(Debug, Clone)]
pub enum SecondMoments {
    /// Per-symbol variances, `T×K`.
    Diagonal(DMatrix<f64>),
    /// Full per-symbol covariances.
    Full(Vec<SymMatrix>),
}

/// Beliefs consumed by the M-step.
#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    /// `T×K` means.
    pub mean: DMatrix<f64>,
    pub second: SecondMoments,
}

impl PosteriorSummary {
    /// BPSK beliefs `m` with variances `1 − m²`.
    pub fn discrete(m: DMatrix<f64>) -> Result<Self> {
        if let Some(i) = m.iter().position(|v| !(v.abs() <= 1.0)) {
            return Err(Error::DomainError(i));
        }
        let var = m.map(|v| 1.0 - v * v);
        Ok(PosteriorSummary {
            mean: m,
            second: SecondMoments::Diagonal(var),
        })
    }

    /// Posterior estimates `tanh(L/2)` from `T×K` posterior LLRs.
    pub fn from_llr(post: &DMatrix<f64>) -> Self {
        let m = post.map(soft_bit);
        let var = m.map(|v| 1.0 - v * v);
        PosteriorSummary {
            mean: m,
            second: SecondMoments::Diagonal(var),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }

    /// `R ∘ Σ_t`.
    fn hadamard(&self, r: &SymMatrix, t: usize) -> DMatrix<f64> {
        let k = self.mean.ncols();
        match &self.second {
            SecondMoments::Diagonal(v) => DMatrix::from_fn(k, k, |i, j| if i == j { r[(i, i)] * v[(t, i)] } else { 0.0 }),
            SecondMoments::Full(s) => DMatrix::from_fn(k, k, |i, j| r[(i, j)] * s[t][(i, j)]),
        }
    }
}

/// Sufficient statistics of the beliefs for the parameter free energy.
struct Stats {
    /// `Σ_t (M_t R M_t + R∘Σ_t)`.
    quad: DMatrix<f64>,
    /// `Σ_t M_t y_t`.
    lin: DVector<f64>,
    /// `Σ_t ‖r_t‖²`.
    energy: f64,
    /// `N T`.
    nt: f64,
}

fn stats(geometry: &ChannelInstance, obs: &Observation, post: &PosteriorSummary) -> Result<Stats> {
    let k = geometry.k();
    if post.len() != obs.len() || post.mean.ncols() != k || obs.y.ncols() != k {
        return Err(Error::DimensionMismatch(format!(
            "beliefs {}x{}, observation {}x{}, {} users",
            post.len(),
            post.mean.ncols(),
            obs.len(),
            obs.y.ncols(),
            k
        )));
    }
    if let SecondMoments::Full(s) = &post.second {
        if s.len() != post.len() || s.iter().any(|m| m.dim() != k) {
            return Err(Error::DimensionMismatch("covariance list does not match beliefs".into()));
        }
    }
    let r = geometry.correlation();
    let mut quad = DMatrix::zeros(k, k);
    let mut lin = DVector::zeros(k);
    for t in 0..obs.len() {
        let mu = post.mean.row(t);
        quad += DMatrix::from_fn(k, k, |i, j| mu[i] * r[(i, j)] * mu[j]);
        quad += post.hadamard(r, t);
        lin += obs.y.row(t).transpose().component_mul(&mu.transpose());
    }
    Ok(Stats {
        quad,
        lin,
        energy: obs.r.norm_squared(),
        nt: (obs.r.ncols() * obs.len()) as f64,
    })
}

impl Stats {
    /// `Σ_t E‖r_t − S M_t a‖² + aᵀ(R∘Σ_t)a`.
    fn residual(&self, a: &DVector<f64>) -> f64 {
        self.energy - 2.0 * a.dot(&self.lin) + a.dot(&(&self.quad * a))
    }
}

fn prior_term(state: &EmState, a: &DVector<f64>) -> f64 {
    if state.varsigma2.is_infinite() {
        0.0
    } else {
        (a - &state.a_tilde).norm_squared() / (2.0 * state.varsigma2)
    }
}

/// Parameter free energy at `(a, σ²)`; the prior uses `state.a_tilde`, `state.varsigma2`.
pub fn em_free_energy(
    geometry: &ChannelInstance,
    obs: &Observation,
    post: &PosteriorSummary,
    state: &EmState,
    a: &DVector<f64>,
    sigma2: f64,
) -> Result<f64> {
    let st = stats(geometry, obs, post)?;
    Ok(st.residual(a) / (2.0 * sigma2) + 0.5 * st.nt * sigma2.ln() + prior_term(state, a))
}

/// Analytic `(∂F/∂a, ∂F/∂σ⁻²)` of [`em_free_energy`].
pub fn em_free_energy_gradient(
    geometry: &ChannelInstance,
    obs: &Observation,
    post: &PosteriorSummary,
    state: &EmState,
    a: &DVector<f64>,
    sigma2: f64,
) -> Result<(DVector<f64>, f64)> {
    let st = stats(geometry, obs, post)?;
    let mut ga = (&st.quad * a - &st.lin) / sigma2;
    if state.varsigma2.is_finite() {
        ga += (a - &state.a_tilde) / state.varsigma2;
    }
    let g_prec = 0.5 * st.residual(a) - 0.5 * st.nt * sigma2;
    Ok((ga, g_prec))
}

fn mstep(geometry: &ChannelInstance, obs: &Observation, post: &PosteriorSummary, state: &EmState) -> Result<EmState> {
    let st = stats(geometry, obs, post)?;
    let a_hat = if state.varsigma2 == 0.0 {
        state.a_tilde.clone()
    } else {
        let ratio = if state.varsigma2.is_infinite() { 0.0 } else { state.sigma2_hat / state.varsigma2 };
        let mut lhs = st.quad.clone();
        for i in 0..lhs.nrows() {
            lhs[(i, i)] += ratio;
        }
        let rhs = &st.lin + &state.a_tilde * ratio;
        spd_solve(&SymMatrix::symmetrize(lhs), &rhs)?
    };
    let sigma2_hat = if state.estimate_sigma2 {
        (st.residual(&a_hat) / st.nt).max(SIGMA2_FLOOR)
    } else {
        state.sigma2_hat
    };
    Ok(EmState {
        a_hat,
        sigma2_hat,
        ..state.clone()
    })
}

/// M-step for Gaussian beliefs (diagonal or full covariances).
pub fn mstep_gauss(geometry: &ChannelInstance, obs: &Observation, post: &PosteriorSummary, state: &EmState) -> Result<EmState> {
    mstep(geometry, obs, post, state)
}

/// M-step for discrete beliefs; second moments must be diagonal.
pub fn mstep_disc(geometry: &ChannelInstance, obs: &Observation, post: &PosteriorSummary, state: &EmState) -> Result<EmState> {
    if matches!(post.second, SecondMoments::Full(_)) {
        return Err(Error::DimensionMismatch("discrete beliefs carry diagonal second moments".into()));
    }
    mstep(geometry, obs, post, state)
}

/// Outcome of [`run_varem`].
#[derive(Debug, Clone)]
pub struct EmRun {
    pub frames: Vec<LlrFrame>,
    /// `states[0]` is the initial state, `states[j]` follows outer iteration `j`.
    pub states: Vec<EmState>,
}

/// Alternates E-step (detector + decoders at the current estimates) and
/// M-step (on posterior estimates `tanh((mud + dec)/2)`) for `opts.outer`
/// iterations.
pub fn run_varem(
    geometry: &ChannelInstance,
    obs: &Observation,
    dec: &dyn Decoder,
    opts: &TurboOptions,
    state0: EmState,
) -> Result<EmRun> {
    let mut turbo = TurboState::new(geometry.k(), obs.len(), opts.clone())?;
    let mut states = vec![state0];
    let mut frames = Vec::with_capacity(opts.outer);
    for _ in 0..opts.outer {
        let state = states.last().expect("initial state");
        let rx = state.receiver(geometry)?;
        let frame = turbo.step(&rx, obs, dec)?;
        let post = PosteriorSummary::from_llr(&frame.post);
        let next = mstep(geometry, obs, &post, state)?;
        frames.push(frame);
        states.push(next);
    }
    Ok(EmRun { frames, states })
}
