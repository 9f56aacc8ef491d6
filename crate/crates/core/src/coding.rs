//! Per-user channel coding: rate-1/2 feedforward convolutional codes, a
//! log-domain BCJR decoder, interleavers and the decoder bank used by the
//! turbo loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::derive_seed;
use crate::llr::{bit_to_symbol, clamp_llr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Termination {
    /// `memory` zero tail bits return the encoder to state 0.
    #[default]
    Terminated,
    Truncated,
}

/// Rate-1/2 feedforward convolutional code.
///
/// Generators are binary strings, most significant (current input) tap first:
/// output `j` at time `t` is `Σ_i g_j[i] u_{t-i}` mod 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvCode {
    gens: [u32; 2],
    labels: [String; 2],
    memory: usize,
    termination: Termination,
}

impl ConvCode {
    pub fn new(g1: &str, g2: &str, termination: Termination) -> Result<Self> {
        let parse = |g: &str| -> Result<u32> {
            if g.is_empty() || g.len() > 16 || !g.chars().all(|c| c == '0' || c == '1') {
                return Err(Error::InvalidCode(format!("generator `{g}` is not a binary string of length 1..=16")));
            }
            let v = u32::from_str_radix(g, 2).expect("validated binary");
            if v == 0 {
                return Err(Error::InvalidCode(format!("generator `{g}` is zero")));
            }
            Ok(v)
        };
        if g1.len() != g2.len() {
            return Err(Error::InvalidCode(format!("generators `{g1}` and `{g2}` differ in length")));
        }
        let gens = [parse(g1)?, parse(g2)?];
        Ok(ConvCode {
            gens,
            labels: [g1.to_string(), g2.to_string()],
            memory: g1.len() - 1,
            termination,
        })
    }

    /// Parses `"10011,11101"`.
    pub fn parse(spec: &str, termination: Termination) -> Result<Self> {
        let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
        match parts.as_slice() {
            [a, b] => Self::new(a, b, termination),
            _ => Err(Error::InvalidCode(format!("expected two comma-separated generators, got `{spec}`"))),
        }
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn num_states(&self) -> usize {
        1 << self.memory
    }

    pub fn termination(&self) -> Termination {
        self.termination
    }

    pub fn generators(&self) -> (&str, &str) {
        (&self.labels[0], &self.labels[1])
    }

    /// Trellis steps for `info_len` information bits.
    pub fn steps(&self, info_len: usize) -> usize {
        match self.termination {
            Termination::Terminated => info_len + self.memory,
            Termination::Truncated => info_len,
        }
    }

    pub fn coded_len(&self, info_len: usize) -> usize {
        2 * self.steps(info_len)
    }

    /// `(next_state, [c0, c1])` for input `u` in `state`.
    ///
    /// The state holds `u_{t-1} … u_{t-m}`, most recent in the high bit.
    fn transition(&self, state: usize, u: usize) -> (usize, [u8; 2]) {
        let m = self.memory;
        let reg = ((u << m) | state) as u32;
        let out = [(self.gens[0] & reg).count_ones() as u8 & 1, (self.gens[1] & reg).count_ones() as u8 & 1];
        let next = if m == 0 { 0 } else { (u << (m - 1)) | (state >> 1) };
        (next, out)
    }

    /// Coded bits, two per trellis step.
    pub fn encode(&self, info: &[u8]) -> Result<Vec<u8>> {
        if info.is_empty() {
            return Err(Error::InvalidCode("empty information block".into()));
        }
        if let Some(b) = info.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidCode(format!("information bit {b} is not 0/1")));
        }
        let mut state = 0;
        let mut out = Vec::with_capacity(self.coded_len(info.len()));
        for t in 0..self.steps(info.len()) {
            let u = info.get(t).copied().unwrap_or(0) as usize;
            let (next, c) = self.transition(state, u);
            out.extend_from_slice(&c);
            state = next;
        }
        Ok(out)
    }

    /// Coded BPSK symbols (0 → +1, 1 → -1).
    pub fn encode_symbols(&self, info: &[u8]) -> Result<Vec<f64>> {
        Ok(self.encode(info)?.into_iter().map(bit_to_symbol).collect())
    }
}

/// Exact `log(e^a + e^b)`.
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[derive(Debug, Clone)]
pub struct BcjrOutput {
    /// Coded-bit posterior minus the channel input.
    pub extrinsic: Vec<f64>,
    pub posterior: Vec<f64>,
    pub info_posterior: Vec<f64>,
}

/// Log-domain forward-backward APP decoding.
///
/// Branch metric `½ Σ_j c̃_j L_j + ½ ũ L_prior` with `c̃, ũ ∈ {±1}`.
/// `prior_info` may be empty (uniform priors).
pub fn bcjr_decode(code: &ConvCode, channel_llr: &[f64], prior_info: &[f64]) -> Result<BcjrOutput> {
    if !channel_llr.len().is_multiple_of(2) {
        return Err(Error::LengthMismatch {
            expected: channel_llr.len() + 1,
            actual: channel_llr.len(),
        });
    }
    let steps = channel_llr.len() / 2;
    let info_len = match code.termination {
        Termination::Terminated => steps.checked_sub(code.memory).filter(|&l| l > 0),
        Termination::Truncated => Some(steps).filter(|&l| l > 0),
    }
    .ok_or(Error::LengthMismatch {
        expected: code.coded_len(1),
        actual: channel_llr.len(),
    })?;
    if !prior_info.is_empty() && prior_info.len() != info_len {
        return Err(Error::LengthMismatch {
            expected: info_len,
            actual: prior_info.len(),
        });
    }
    let ns = code.num_states();
    let trans: Vec<[(usize, [u8; 2]); 2]> = (0..ns).map(|s| [code.transition(s, 0), code.transition(s, 1)]).collect();
    let inputs = |t: usize| if t < info_len { 2 } else { 1 };
    let gamma = |t: usize, u: usize, c: [u8; 2]| -> f64 {
        let mut g = 0.0;
        for j in 0..2 {
            g += 0.5 * bit_to_symbol(c[j]) * channel_llr[2 * t + j];
        }
        if t < info_len && !prior_info.is_empty() {
            g += 0.5 * bit_to_symbol(u as u8) * prior_info[t];
        }
        g
    };

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![vec![neg; ns]; steps + 1];
    alpha[0][0] = 0.0;
    for t in 0..steps {
        for s in 0..ns {
            let a = alpha[t][s];
            if a == neg {
                continue;
            }
            for u in 0..inputs(t) {
                let (next, c) = trans[s][u];
                alpha[t + 1][next] = log_add(alpha[t + 1][next], a + gamma(t, u, c));
            }
        }
        let top = alpha[t + 1].iter().copied().fold(neg, f64::max);
        alpha[t + 1].iter_mut().for_each(|v| *v -= top);
    }
    let mut beta = vec![vec![neg; ns]; steps + 1];
    match code.termination {
        Termination::Terminated => beta[steps][0] = 0.0,
        Termination::Truncated => beta[steps].fill(0.0),
    }
    for t in (0..steps).rev() {
        for s in 0..ns {
            let mut acc = neg;
            for u in 0..inputs(t) {
                let (next, c) = trans[s][u];
                acc = log_add(acc, gamma(t, u, c) + beta[t + 1][next]);
            }
            beta[t][s] = acc;
        }
        let top = beta[t].iter().copied().fold(neg, f64::max);
        beta[t].iter_mut().for_each(|v| *v -= top);
    }

    let mut posterior = vec![0.0; 2 * steps];
    let mut info_posterior = vec![0.0; info_len];
    for t in 0..steps {
        let mut coded = [[neg; 2]; 2];
        let mut info = [neg; 2];
        for s in 0..ns {
            if alpha[t][s] == neg {
                continue;
            }
            for u in 0..inputs(t) {
                let (next, c) = trans[s][u];
                let metric = alpha[t][s] + gamma(t, u, c) + beta[t + 1][next];
                for j in 0..2 {
                    coded[j][c[j] as usize] = log_add(coded[j][c[j] as usize], metric);
                }
                info[u] = log_add(info[u], metric);
            }
        }
        for j in 0..2 {
            posterior[2 * t + j] = coded[j][0] - coded[j][1];
        }
        if t < info_len {
            info_posterior[t] = info[0] - info[1];
        }
    }
    let extrinsic = posterior.iter().zip(channel_llr).map(|(p, l)| p - l).collect();
    Ok(BcjrOutput {
        extrinsic,
        posterior,
        info_posterior,
    })
}

/// Block permutation: `interleave(x)[i] = x[perm[i]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interleaver {
    perm: Vec<usize>,
}

impl Interleaver {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        crate::siso_ddf::validate_permutation(&perm, perm.len())?;
        Ok(Interleaver { perm })
    }

    pub fn identity(n: usize) -> Self {
        Interleaver { perm: (0..n).collect() }
    }

    pub fn random(n: usize, seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Interleaver { perm }
    }

    /// The interleaver of `user` under `master_seed`.
    pub fn for_user(n: usize, master_seed: u64, user: usize) -> Self {
        Self::random(n, derive_seed(master_seed, &[0x1e7e_a5e5, user as u64]))
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    fn check<T>(&self, x: &[T]) -> Result<()> {
        if x.len() != self.perm.len() {
            return Err(Error::LengthMismatch {
                expected: self.perm.len(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn interleave<T: Copy>(&self, x: &[T]) -> Result<Vec<T>> {
        self.check(x)?;
        Ok(self.perm.iter().map(|&p| x[p]).collect())
    }

    pub fn deinterleave<T: Copy + Default>(&self, x: &[T]) -> Result<Vec<T>> {
        self.check(x)?;
        let mut out = vec![T::default(); x.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            out[p] = x[i];
        }
        Ok(out)
    }
}

/// What a per-user decoder returns to the turbo loop.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// Extrinsic LLRs on the transmitted symbols, in channel order.
    pub extrinsic: Vec<f64>,
    /// Posterior LLRs on the information bits.
    pub info_posterior: Vec<f64>,
}

/// A bank of per-user soft decoders.
pub trait Decoder: Sync {
    /// Consumes detector extrinsics for one user (channel order).
    fn decode(&self, user: usize, llr_mud: &[f64]) -> Result<DecodeOutput>;
}

/// No code: zero extrinsic information, information bits are the symbols.
#[derive(Debug, Clone, Copy, Default)]
pub struct Uncoded;

impl Decoder for Uncoded {
    fn decode(&self, _user: usize, llr_mud: &[f64]) -> Result<DecodeOutput> {
        Ok(DecodeOutput {
            extrinsic: vec![0.0; llr_mud.len()],
            info_posterior: llr_mud.to_vec(),
        })
    }
}

/// Returns its input as the extrinsic; useful for tracing schedules.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassThrough;

impl Decoder for PassThrough {
    fn decode(&self, _user: usize, llr_mud: &[f64]) -> Result<DecodeOutput> {
        Ok(DecodeOutput {
            extrinsic: llr_mud.to_vec(),
            info_posterior: llr_mud.to_vec(),
        })
    }
}

/// Per-user convolutional code plus interleaver.
#[derive(Debug, Clone)]
pub struct ConvDecoderBank {
    code: ConvCode,
    info_len: usize,
    interleavers: Vec<Interleaver>,
}

impl ConvDecoderBank {
    pub fn new(code: ConvCode, users: usize, info_len: usize, master_seed: u64) -> Result<Self> {
        if info_len == 0 {
            return Err(Error::config("block_len", "must be at least 1"));
        }
        let n = code.coded_len(info_len);
        let interleavers = (0..users).map(|u| Interleaver::for_user(n, master_seed, u)).collect();
        Ok(ConvDecoderBank {
            code,
            info_len,
            interleavers,
        })
    }

    pub fn code(&self) -> &ConvCode {
        &self.code
    }

    pub fn info_len(&self) -> usize {
        self.info_len
    }

    /// Channel uses per frame.
    pub fn frame_len(&self) -> usize {
        self.code.coded_len(self.info_len)
    }

    pub fn interleaver(&self, user: usize) -> &Interleaver {
        &self.interleavers[user]
    }

    /// Encoded, interleaved BPSK symbols of one user.
    pub fn transmit_symbols(&self, user: usize, info: &[u8]) -> Result<Vec<f64>> {
        if info.len() != self.info_len {
            return Err(Error::LengthMismatch {
                expected: self.info_len,
                actual: info.len(),
            });
        }
        self.interleavers[user].interleave(&self.code.encode_symbols(info)?)
    }
}

impl Decoder for ConvDecoderBank {
    fn decode(&self, user: usize, llr_mud: &[f64]) -> Result<DecodeOutput> {
        let il = self.interleavers.get(user).ok_or(Error::LengthMismatch {
            expected: self.interleavers.len(),
            actual: user + 1,
        })?;
        let coded = il.deinterleave(llr_mud)?;
        let out = bcjr_decode(&self.code, &coded, &[])?;
        let ext: Vec<f64> = out.extrinsic.into_iter().map(clamp_llr).collect();
        Ok(DecodeOutput {
            extrinsic: il.interleave(&ext)?,
            info_posterior: out.info_posterior,
        })
    }
}
