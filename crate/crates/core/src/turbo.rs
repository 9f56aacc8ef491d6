//! The turbo loop: soft detectors exchanging extrinsic LLRs with per-user
//! decoders under the sequential, flooding and hybrid schedules.
//!
//! All LLR matrices are `T×K` (one row per channel use, one column per user).

use nalgebra::{DMatrix, DVector};

use crate::channel::{ChannelInstance, Observation};
use crate::coding::Decoder;
use crate::error::{Error, Result};
use crate::llr::{clamp_llr, clamp_m, soft_bit};
use crate::siso_ddf::{ddf_pass, detection_order, DdfPrecompute, OrderPolicy};
use crate::siso_discrete::McColumns;
use crate::siso_gaussian::{ext_flooding, ext_hybrid, ext_hybrid_user, GaussianPrior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    /// Detect one user, decode it at once, move to the next user.
    Sequential,
    /// Detect all users with their own priors, then decode all.
    #[default]
    Flooding,
    /// Detect all users with leave-one-out priors, then decode all.
    Hybrid,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sequential" => Ok(Schedule::Sequential),
            "flooding" => Ok(Schedule::Flooding),
            "hybrid" => Ok(Schedule::Hybrid),
            other => Err(Error::config("schedule", format!("unknown schedule `{other}`"))),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::Sequential => "sequential",
            Schedule::Flooding => "flooding",
            Schedule::Hybrid => "hybrid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DetectorKind {
    #[default]
    Gaussian,
    Discrete,
    /// A DDF pass in the first outer iteration, discrete sweeps afterwards.
    DdfAided,
}

impl std::str::FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(DetectorKind::Gaussian),
            "discrete" => Ok(DetectorKind::Discrete),
            "ddf-aided" | "ddf_aided" | "ddf" => Ok(DetectorKind::DdfAided),
            other => Err(Error::config("detector", format!("unknown detector `{other}`"))),
        }
    }
}

impl std::fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DetectorKind::Gaussian => "gaussian",
            DetectorKind::Discrete => "discrete",
            DetectorKind::DdfAided => "ddf-aided",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurboOptions {
    pub detector: DetectorKind,
    pub schedule: Schedule,
    /// Outer (detector-decoder) iterations `J`.
    pub outer: usize,
    /// Inner serial sweeps `I` of the discrete detector.
    pub inner: usize,
    pub order: OrderPolicy,
}

impl Default for TurboOptions {
    fn default() -> Self {
        TurboOptions {
            detector: DetectorKind::Gaussian,
            schedule: Schedule::Flooding,
            outer: 5,
            inner: 6,
            order: OrderPolicy::AmplitudeDescending,
        }
    }
}

/// LLRs produced by one outer iteration.
#[derive(Debug, Clone)]
pub struct LlrFrame {
    /// Detector extrinsics.
    pub mud: DMatrix<f64>,
    /// Decoder extrinsics (the next iteration's priors).
    pub dec: DMatrix<f64>,
    /// `mud + dec`.
    pub post: DMatrix<f64>,
    /// Decoder posteriors on information bits, per user.
    pub info_post: Vec<Vec<f64>>,
}

impl LlrFrame {
    /// Soft symbol estimates `tanh(post / 2)`.
    pub fn soft_symbols(&self) -> DMatrix<f64> {
        self.post.map(soft_bit)
    }
}

/// Message state carried between outer iterations.
#[derive(Debug, Clone)]
pub struct TurboState {
    opts: TurboOptions,
    llr_dec: DMatrix<f64>,
    m: DMatrix<f64>,
    iteration: usize,
}

fn row(m: &DMatrix<f64>, t: usize) -> DVector<f64> {
    m.row(t).transpose()
}

/// `base[p..] ++ base[..p]` where `base[p] = user`.
fn rotated(base: &[usize], user: usize) -> Vec<usize> {
    let p = base.iter().position(|&u| u == user).expect("user in order");
    base[p..].iter().chain(&base[..p]).copied().collect()
}

impl TurboState {
    pub fn new(users: usize, frame_len: usize, opts: TurboOptions) -> Result<Self> {
        if opts.outer == 0 {
            return Err(Error::config("outer_iterations", "must be at least 1"));
        }
        if opts.inner == 0 && opts.detector != DetectorKind::Gaussian {
            return Err(Error::config("inner_iterations", "must be at least 1"));
        }
        Ok(TurboState {
            opts,
            llr_dec: DMatrix::zeros(frame_len, users),
            m: DMatrix::zeros(frame_len, users),
            iteration: 0,
        })
    }

    pub fn options(&self) -> &TurboOptions {
        &self.opts
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn llr_dec(&self) -> &DMatrix<f64> {
        &self.llr_dec
    }

    /// Discrete beliefs `m` (zero for the Gaussian detector).
    pub fn beliefs(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Runs one outer iteration against the channel model `ch`.
    pub fn step(&mut self, ch: &ChannelInstance, obs: &Observation, dec: &dyn Decoder) -> Result<LlrFrame> {
        let (t_len, k) = self.llr_dec.shape();
        if obs.len() != t_len || ch.k() != k {
            return Err(Error::DimensionMismatch(format!(
                "state is {t_len}x{k}, observation has {} rows, channel {} users",
                obs.len(),
                ch.k()
            )));
        }
        let mut frame = LlrFrame {
            mud: DMatrix::zeros(t_len, k),
            dec: DMatrix::zeros(t_len, k),
            post: DMatrix::zeros(t_len, k),
            info_post: vec![Vec::new(); k],
        };
        match (self.opts.detector, self.iteration) {
            (DetectorKind::Gaussian, _) => self.gaussian(ch, obs, dec, &mut frame)?,
            (DetectorKind::DdfAided, 0) => self.ddf_first(ch, obs, dec, &mut frame)?,
            (DetectorKind::Discrete, _) => self.discrete(ch, obs, dec, &mut frame, (0..k).collect())?,
            (DetectorKind::DdfAided, _) => {
                let order = detection_order(ch, &self.opts.order)?;
                self.discrete(ch, obs, dec, &mut frame, order)?
            }
        }
        frame.dec.copy_from(&self.llr_dec);
        frame.post = &frame.mud + &frame.dec;
        self.iteration += 1;
        Ok(frame)
    }

    fn decode_user(&mut self, user: usize, dec: &dyn Decoder, frame: &mut LlrFrame) -> Result<()> {
        let mud: Vec<f64> = frame.mud.column(user).iter().copied().collect();
        let out = dec.decode(user, &mud)?;
        if out.extrinsic.len() != mud.len() {
            return Err(Error::LengthMismatch {
                expected: mud.len(),
                actual: out.extrinsic.len(),
            });
        }
        for (t, e) in out.extrinsic.into_iter().enumerate() {
            self.llr_dec[(t, user)] = clamp_llr(e);
        }
        frame.info_post[user] = out.info_posterior;
        Ok(())
    }

    fn decode_all(&mut self, dec: &dyn Decoder, frame: &mut LlrFrame) -> Result<()> {
        for u in 0..self.llr_dec.ncols() {
            self.decode_user(u, dec, frame)?;
        }
        Ok(())
    }

    fn gaussian(&mut self, ch: &ChannelInstance, obs: &Observation, dec: &dyn Decoder, frame: &mut LlrFrame) -> Result<()> {
        let (t_len, k) = self.llr_dec.shape();
        match self.opts.schedule {
            Schedule::Sequential => {
                for u in 0..k {
                    for t in 0..t_len {
                        let prior = GaussianPrior::from_llr(&row(&self.llr_dec, t));
                        frame.mud[(t, u)] = ext_hybrid_user(ch, &obs.y_at(t), &prior, u)?.0;
                    }
                    self.decode_user(u, dec, frame)?;
                }
            }
            Schedule::Flooding | Schedule::Hybrid => {
                for t in 0..t_len {
                    let prior = GaussianPrior::from_llr(&row(&self.llr_dec, t));
                    let y = obs.y_at(t);
                    let ext = if self.opts.schedule == Schedule::Flooding {
                        ext_flooding(ch, &y, &prior)?
                    } else {
                        ext_hybrid(ch, &y, &prior)?
                    };
                    frame.mud.set_row(t, &ext.llr_mud.transpose());
                }
                self.decode_all(dec, frame)?;
            }
        }
        Ok(())
    }

    /// Inner serial sweeps for one channel use; returns the last data LLR of
    /// every user touched.
    fn sweep(mc: &McColumns, y: &DVector<f64>, prior: &DVector<f64>, m: &mut DVector<f64>, order: &[usize], inner: usize) -> DVector<f64> {
        let mut data = DVector::zeros(m.len());
        for _ in 0..inner {
            for &l in order {
                data[l] = mc.data_llr(y, m, l);
                m[l] = clamp_m(soft_bit(prior[l] + data[l]));
            }
        }
        data
    }

    fn discrete(
        &mut self,
        ch: &ChannelInstance,
        obs: &Observation,
        dec: &dyn Decoder,
        frame: &mut LlrFrame,
        base: Vec<usize>,
    ) -> Result<()> {
        let (t_len, k) = self.llr_dec.shape();
        let mc = McColumns::new(ch);
        let inner = self.opts.inner;
        match self.opts.schedule {
            Schedule::Flooding => {
                for t in 0..t_len {
                    let y = obs.y_at(t);
                    let prior = row(&self.llr_dec, t);
                    let mut m = row(&self.m, t);
                    let data = Self::sweep(&mc, &y, &prior, &mut m, &base, inner);
                    self.m.set_row(t, &m.transpose());
                    frame.mud.set_row(t, &data.map(clamp_llr).transpose());
                }
                self.decode_all(dec, frame)?;
            }
            Schedule::Sequential | Schedule::Hybrid => {
                for u in 0..k {
                    let order = rotated(&base, u);
                    for t in 0..t_len {
                        let y = obs.y_at(t);
                        // The user's own decoder message is withheld for its inner loop.
                        let mut prior = row(&self.llr_dec, t);
                        prior[u] = 0.0;
                        let mut m = row(&self.m, t);
                        let data = Self::sweep(&mc, &y, &prior, &mut m, &order, inner);
                        self.m.set_row(t, &m.transpose());
                        frame.mud[(t, u)] = clamp_llr(data[u]);
                    }
                    if self.opts.schedule == Schedule::Sequential {
                        self.decode_user(u, dec, frame)?;
                    }
                }
                if self.opts.schedule == Schedule::Hybrid {
                    self.decode_all(dec, frame)?;
                }
            }
        }
        Ok(())
    }

    /// First DDF-aided iteration: one causal DDF pass.
    fn ddf_first(&mut self, ch: &ChannelInstance, obs: &Observation, dec: &dyn Decoder, frame: &mut LlrFrame) -> Result<()> {
        let (t_len, k) = self.llr_dec.shape();
        let order = detection_order(ch, &self.opts.order)?;
        let pre = DdfPrecompute::new(ch, &order)?;
        let ybar: Vec<DVector<f64>> = (0..t_len).map(|t| pre.whiten(&obs.y_at(t))).collect();
        match self.opts.schedule {
            Schedule::Flooding | Schedule::Hybrid => {
                for (t, yb) in ybar.iter().enumerate() {
                    let (q, ext) = ddf_pass(&pre, yb, &row(&self.llr_dec, t))?;
                    self.m.set_row(t, &q.m().transpose());
                    frame.mud.set_row(t, &ext.transpose());
                }
                self.decode_all(dec, frame)?;
            }
            Schedule::Sequential => {
                // Users in detection order; each decoded user feeds back
                // tanh((EXT + LLR_dec) / 2) to the users after it.
                for (i, &u) in order.iter().enumerate() {
                    let beta = pre.feedback(i);
                    for (t, yb) in ybar.iter().enumerate() {
                        let m_perm = DVector::from_fn(k, |j, _| self.m[(t, order[j])]);
                        let stat = pre.eta_ybar(yb, i) - beta.dot(&m_perm);
                        frame.mud[(t, u)] = clamp_llr(2.0 / ch.sigma2() * stat);
                    }
                    self.decode_user(u, dec, frame)?;
                    for t in 0..t_len {
                        self.m[(t, u)] = clamp_m(soft_bit(frame.mud[(t, u)] + self.llr_dec[(t, u)]));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Runs `opts.outer` iterations from the zero-message initial state.
pub fn run_turbo(ch: &ChannelInstance, obs: &Observation, dec: &dyn Decoder, opts: &TurboOptions) -> Result<Vec<LlrFrame>> {
    let mut state = TurboState::new(ch.k(), obs.len(), opts.clone())?;
    (0..opts.outer).map(|_| state.step(ch, obs, dec)).collect()
}

/// Gaussian SISO detection under a Table-I schedule.
pub fn run_schedule_gauss(
    ch: &ChannelInstance,
    obs: &Observation,
    dec: &dyn Decoder,
    schedule: Schedule,
    outer: usize,
) -> Result<Vec<LlrFrame>> {
    let opts = TurboOptions {
        detector: DetectorKind::Gaussian,
        schedule,
        outer,
        ..TurboOptions::default()
    };
    run_turbo(ch, obs, dec, &opts)
}

/// Discrete SISO detection under a Table-II schedule with `inner` sweeps.
pub fn run_schedule_disc(
    ch: &ChannelInstance,
    obs: &Observation,
    dec: &dyn Decoder,
    schedule: Schedule,
    outer: usize,
    inner: usize,
) -> Result<Vec<LlrFrame>> {
    let opts = TurboOptions {
        detector: DetectorKind::Discrete,
        schedule,
        outer,
        inner,
        ..TurboOptions::default()
    };
    run_turbo(ch, obs, dec, &opts)
}

/// DDF-aided discrete detection: DDF in the first outer iteration.
pub fn ddf_aided_discrete(
    ch: &ChannelInstance,
    obs: &Observation,
    dec: &dyn Decoder,
    schedule: Schedule,
    outer: usize,
    inner: usize,
    order: OrderPolicy,
) -> Result<Vec<LlrFrame>> {
    let opts = TurboOptions {
        detector: DetectorKind::DdfAided,
        schedule,
        outer,
        inner,
        order,
    };
    run_turbo(ch, obs, dec, &opts)
}
