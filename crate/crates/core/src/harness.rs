//! Seeded Monte-Carlo BER simulation and CSV reporting.
//!
//! Noise is fixed at `σ² = 10^(−snr/10)` for each grid point; users that follow
//! the grid have unit amplitude, users pinned to a fixed SNR are scaled
//! relative to it. Every trial draws its bits, noise, signatures and prior
//! amplitude errors from streams derived from `(seed, trial)`, so the same
//! trial sees the same random numbers at every grid point.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::channel::{make_equicorrelated, make_random_spreading, ChannelInstance, SymbolBlock};
use crate::coding::{ConvCode, ConvDecoderBank, Decoder, Termination, Uncoded};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, with_threads, Execution};
use crate::llr::{bit_to_symbol, hard_bit};
use crate::siso_ddf::OrderPolicy;
use crate::turbo::{run_turbo, DetectorKind, Schedule, TurboOptions};
use crate::varem::{run_varem, EmState, AMPLITUDE_FLOOR, SIGMA2_FLOOR};

/// Noise floor handed to the receiver on a noiseless channel.
const RX_SIGMA2_FLOOR: f64 = 1e-9;

const STREAM_BITS: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_SPREADING: u64 = 2;
const STREAM_PRIOR: u64 = 3;
const STREAM_FIXED: u64 = u64::MAX;

/// Built-in configurations: `(name, text)`.
pub const PRESETS: &[(&str, &str)] = &[
    ("scenario-i", include_str!("../../../presets/scenario-i")),
    ("scenario-ii", include_str!("../../../presets/scenario-ii")),
    ("ddf-two-user", include_str!("../../../presets/ddf-two-user")),
];

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelSpec {
    Equicorrelated { users: usize, rho: f64 },
    /// Random ±1/√N signatures; `per_trial` redraws them every trial.
    Random { chips: usize, users: usize, per_trial: bool },
}

impl ChannelSpec {
    pub fn users(&self) -> usize {
        match *self {
            ChannelSpec::Equicorrelated { users, .. } | ChannelSpec::Random { users, .. } => users,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub channel: ChannelSpec,
    /// `None` transmits uncoded BPSK.
    pub code: Option<ConvCode>,
    /// Information bits per user per frame.
    pub info_bits: usize,
    pub turbo: TurboOptions,
    pub snr_db: Vec<f64>,
    /// Per-user SNR: `None` follows the grid, `Some(db)` is fixed. Empty means all follow.
    pub user_snr_db: Vec<Option<f64>>,
    /// Standard deviation of the prior amplitude error; `0` means known amplitudes.
    pub varsigma: f64,
    pub estimate_sigma2: bool,
    pub seed: u64,
    /// Minimum number of frames per grid point.
    pub trials: usize,
    /// Extra frames are simulated until every iteration has this many errors...
    pub min_errors: u64,
    /// ...or this many frames have been run.
    pub max_trials: usize,
    pub per_user: bool,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "custom".into(),
            channel: ChannelSpec::Equicorrelated { users: 2, rho: 0.0 },
            code: None,
            info_bits: 256,
            turbo: TurboOptions::default(),
            snr_db: vec![6.0],
            user_snr_db: Vec::new(),
            varsigma: 0.0,
            estimate_sigma2: false,
            seed: 1,
            trials: 10,
            min_errors: 100,
            max_trials: 10,
            per_user: false,
            threads: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{v}`"))),
    }
}

/// A comma-separated list, or an inclusive range `start:step:stop`.
pub fn parse_grid(key: &str, v: &str) -> Result<Vec<f64>> {
    let v = v.trim();
    if v.contains(':') {
        let parts: Vec<f64> = v.split(':').map(|p| parse_num(key, p)).collect::<Result<_>>()?;
        let [start, step, stop] = parts[..] else {
            return Err(Error::config(key, "range must be start:step:stop"));
        };
        if !(step > 0.0) || stop < start {
            return Err(Error::config(key, "range needs step > 0 and stop >= start"));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
        return Ok((0..n).map(|i| start + step * i as f64).collect());
    }
    v.split(',').map(|p| parse_num(key, p)).collect()
}

impl ScenarioConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config("line", format!("{}: expected `key = value`", no + 1)));
            };
            let k = k.trim().to_string();
            if kv.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(&k, "given twice"));
            }
        }
        Self::from_map(kv)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("file", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::config("preset", format!("unknown preset `{name}`")))?;
        Self::parse(text)
    }

    fn from_map(mut kv: BTreeMap<String, String>) -> Result<Self> {
        let mut take = |k: &str| kv.remove(k);
        let mut cfg = ScenarioConfig::default();
        if let Some(v) = take("name") {
            cfg.name = v;
        }
        let users: usize = match take("users") {
            Some(v) => parse_num("users", &v)?,
            None => 2,
        };
        let channel = take("channel").unwrap_or_else(|| "equicorrelated".into());
        let rho = take("rho");
        let chips = take("chips");
        let spreading = take("spreading");
        cfg.channel = match channel.as_str() {
            "equicorrelated" => {
                if chips.is_some() || spreading.is_some() {
                    return Err(Error::config("channel", "chips/spreading only apply to random channels"));
                }
                let rho = rho.map(|v| parse_num("rho", &v)).transpose()?.unwrap_or(0.0);
                ChannelSpec::Equicorrelated { users, rho }
            }
            "random" => {
                if rho.is_some() {
                    return Err(Error::config("rho", "only applies to equicorrelated channels"));
                }
                let chips = chips.ok_or_else(|| Error::config("chips", "required for random channels"))?;
                let per_trial = match spreading.as_deref().unwrap_or("fixed") {
                    "fixed" => false,
                    "per-trial" => true,
                    other => return Err(Error::config("spreading", format!("expected fixed or per-trial, got `{other}`"))),
                };
                ChannelSpec::Random {
                    chips: parse_num("chips", &chips)?,
                    users,
                    per_trial,
                }
            }
            other => return Err(Error::config("channel", format!("unknown channel `{other}`"))),
        };
        let termination = match take("termination").as_deref() {
            None | Some("terminated") => Termination::Terminated,
            Some("truncated") => Termination::Truncated,
            Some(other) => return Err(Error::config("termination", format!("unknown termination `{other}`"))),
        };
        cfg.code = match take("code") {
            None => None,
            Some(v) if v == "none" => None,
            Some(v) => Some(ConvCode::parse(&v, termination).map_err(|e| Error::config("code", e.to_string()))?),
        };
        if let Some(v) = take("info_bits") {
            cfg.info_bits = parse_num("info_bits", &v)?;
        }
        if let Some(v) = take("detector") {
            cfg.turbo.detector = v.parse()?;
        }
        if let Some(v) = take("schedule") {
            cfg.turbo.schedule = v.parse()?;
        }
        if let Some(v) = take("outer_iterations") {
            cfg.turbo.outer = parse_num("outer_iterations", &v)?;
        }
        if let Some(v) = take("inner_iterations") {
            cfg.turbo.inner = parse_num("inner_iterations", &v)?;
        }
        if let Some(v) = take("order") {
            cfg.turbo.order = match v.as_str() {
                "amplitude" => OrderPolicy::AmplitudeDescending,
                "as-given" => OrderPolicy::AsGiven,
                // 1-based, like the CSV user column.
                list => OrderPolicy::Custom(
                    list.split(',')
                        .map(|p| match parse_num::<usize>("order", p)? {
                            0 => Err(Error::config("order", "users are numbered from 1")),
                            u => Ok(u - 1),
                        })
                        .collect::<Result<_>>()?,
                ),
            };
        }
        if let Some(v) = take("snr_db") {
            cfg.snr_db = parse_grid("snr_db", &v)?;
        }
        if let Some(v) = take("user_snr_db") {
            cfg.user_snr_db = v
                .split(',')
                .map(|p| match p.trim() {
                    "sweep" => Ok(None),
                    x => parse_num("user_snr_db", x).map(Some),
                })
                .collect::<Result<_>>()?;
        }
        if let Some(v) = take("varsigma") {
            cfg.varsigma = parse_num("varsigma", &v)?;
        }
        if let Some(v) = take("estimate_sigma2") {
            cfg.estimate_sigma2 = parse_bool("estimate_sigma2", &v)?;
        }
        if let Some(v) = take("seed") {
            cfg.seed = parse_num("seed", &v)?;
        }
        if let Some(v) = take("trials") {
            cfg.trials = parse_num("trials", &v)?;
            cfg.max_trials = cfg.trials;
        }
        if let Some(v) = take("min_errors") {
            cfg.min_errors = parse_num("min_errors", &v)?;
        }
        if let Some(v) = take("max_trials") {
            cfg.max_trials = parse_num("max_trials", &v)?;
        }
        if let Some(v) = take("per_user") {
            cfg.per_user = parse_bool("per_user", &v)?;
        }
        if let Some(v) = take("threads") {
            cfg.threads = Some(parse_num("threads", &v)?);
        }
        if let Some(k) = kv.keys().next() {
            return Err(Error::config(k, "unknown key"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.channel.users();
        if k == 0 {
            return Err(Error::config("users", "must be at least 1"));
        }
        match self.channel {
            ChannelSpec::Equicorrelated { rho, .. } if !(0.0..1.0).contains(&rho) => {
                return Err(Error::config("rho", "must lie in [0, 1)"));
            }
            ChannelSpec::Random { chips, users, .. } if chips < users => {
                return Err(Error::config("chips", "need at least as many chips as users"));
            }
            _ => {}
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| s.is_nan()) {
            return Err(Error::config("snr_db", "grid must be non-empty"));
        }
        if !self.user_snr_db.is_empty() {
            if self.user_snr_db.len() != k {
                return Err(Error::config("user_snr_db", format!("expected {k} entries")));
            }
            if self.user_snr_db.iter().any(|u| u.is_some_and(|v| !v.is_finite())) {
                return Err(Error::config("user_snr_db", "fixed values must be finite"));
            }
            if self.user_snr_db.iter().any(Option::is_some) && self.snr_db.iter().any(|s| !s.is_finite()) {
                return Err(Error::config("snr_db", "fixed-SNR users need a finite grid"));
            }
        }
        if self.turbo.outer == 0 {
            return Err(Error::config("outer_iterations", "must be at least 1"));
        }
        if self.turbo.inner == 0 {
            return Err(Error::config("inner_iterations", "must be at least 1"));
        }
        if let OrderPolicy::Custom(p) = &self.turbo.order {
            crate::siso_ddf::validate_permutation(p, k).map_err(|e| Error::config("order", e.to_string()))?;
        }
        if self.info_bits == 0 {
            return Err(Error::config("info_bits", "must be at least 1"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        if self.max_trials < self.trials {
            return Err(Error::config("max_trials", "must be at least `trials`"));
        }
        if !(self.varsigma >= 0.0 && self.varsigma.is_finite()) {
            return Err(Error::config("varsigma", "must be finite and non-negative"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads", "must be at least 1"));
        }
        Ok(())
    }

    fn estimates_parameters(&self) -> bool {
        self.varsigma > 0.0 || self.estimate_sigma2
    }

    /// `(amplitudes, σ²)` at a grid point.
    fn levels(&self, snr_db: f64) -> (DVector<f64>, f64) {
        let k = self.channel.users();
        let sigma2 = 10f64.powf(-snr_db / 10.0);
        let a = DVector::from_fn(k, |u, _| match self.user_snr_db.get(u).copied().flatten() {
            Some(fixed) => 10f64.powf((fixed - snr_db) / 20.0),
            None => 1.0,
        });
        (a, sigma2)
    }
}

/// Error counts for one (SNR, iteration, user) cell; `user = None` pools users.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BerCell {
    pub snr_db: f64,
    pub iteration: usize,
    pub user: Option<usize>,
    pub bits: u64,
    pub errors: u64,
}

impl BerCell {
    pub fn ber(&self) -> f64 {
        if self.bits == 0 {
            0.0
        } else {
            self.errors as f64 / self.bits as f64
        }
    }

    /// Binomial standard error of [`BerCell::ber`].
    pub fn std_err(&self) -> f64 {
        if self.bits == 0 {
            return 0.0;
        }
        let p = self.ber();
        (p * (1.0 - p) / self.bits as f64).sqrt()
    }

    pub fn ci95(&self) -> f64 {
        1.96 * self.std_err()
    }
}

/// Mean parameter estimates after an outer iteration (0 = initial).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmPoint {
    pub snr_db: f64,
    pub iteration: usize,
    pub sigma2_hat: f64,
    pub a_hat_rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BerReport {
    pub cells: Vec<BerCell>,
    pub em: Vec<EmPoint>,
    /// Frames simulated per grid point.
    pub trials: Vec<usize>,
    pub per_user: bool,
}

impl BerReport {
    pub fn cell(&self, snr_db: f64, iteration: usize, user: Option<usize>) -> Option<&BerCell> {
        self.cells
            .iter()
            .find(|c| c.snr_db == snr_db && c.iteration == iteration && c.user == user)
    }

    /// Pooled cell of the last iteration at `snr_db`.
    pub fn final_cell(&self, snr_db: f64) -> Option<&BerCell> {
        self.cells
            .iter()
            .filter(|c| c.snr_db == snr_db && c.user.is_none())
            .max_by_key(|c| c.iteration)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("snr_db,iteration,user,bits,errors,ber,ci95\n");
        for c in self.cells.iter().filter(|c| c.user.is_some() == self.per_user) {
            let user = c.user.map_or_else(|| "all".to_string(), |u| (u + 1).to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6e},{:.6e}",
                c.snr_db,
                c.iteration,
                user,
                c.bits,
                c.errors,
                c.ber(),
                c.ci95()
            );
        }
        out
    }

    pub fn em_csv(&self) -> String {
        let mut out = String::from("snr_db,iteration,sigma2_hat,a_hat_rmse\n");
        for p in &self.em {
            let _ = writeln!(out, "{},{},{:.9e},{:.9e}", p.snr_db, p.iteration, p.sigma2_hat, p.a_hat_rmse);
        }
        out
    }
}

/// Per-frame counts: `errors[iteration][user]`, EM `(σ̂², rmse)` per iteration.
struct TrialOutcome {
    errors: Vec<Vec<u64>>,
    em: Vec<(f64, f64)>,
}

struct Simulator<'a> {
    cfg: &'a ScenarioConfig,
    bank: Option<ConvDecoderBank>,
    fixed_geometry: Option<ChannelInstance>,
}

impl<'a> Simulator<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.channel.users();
        let fixed = derive_seed(cfg.seed, &[STREAM_FIXED]);
        let bank = cfg
            .code
            .clone()
            .map(|code| ConvDecoderBank::new(code, k, cfg.info_bits, fixed))
            .transpose()?;
        let fixed_geometry = match cfg.channel {
            ChannelSpec::Equicorrelated { users, rho } => Some(make_equicorrelated(users, rho)?),
            ChannelSpec::Random { chips, users, per_trial: false } => Some(make_random_spreading(chips, users, fixed)?),
            ChannelSpec::Random { per_trial: true, .. } => None,
        };
        Ok(Simulator { cfg, bank, fixed_geometry })
    }

    fn trial(&self, snr_db: f64, trial: usize) -> Result<TrialOutcome> {
        let cfg = self.cfg;
        let k = cfg.channel.users();
        let seed = |stream| derive_seed(cfg.seed, &[trial as u64, stream]);

        let mut rng = ChaCha8Rng::seed_from_u64(seed(STREAM_BITS));
        let info: Vec<Vec<u8>> = (0..k).map(|_| (0..cfg.info_bits).map(|_| rng.random_range(0..2u8)).collect()).collect();
        let users: Vec<Vec<f64>> = match &self.bank {
            Some(bank) => info.iter().enumerate().map(|(u, b)| bank.transmit_symbols(u, b)).collect::<Result<_>>()?,
            None => info.iter().map(|b| b.iter().map(|&x| bit_to_symbol(x)).collect()).collect(),
        };
        let blk = SymbolBlock::from_users(&users)?;

        let geometry = match (&self.fixed_geometry, &cfg.channel) {
            (Some(g), _) => g.clone(),
            (None, ChannelSpec::Random { chips, users, .. }) => make_random_spreading(*chips, *users, seed(STREAM_SPREADING))?,
            (None, _) => unreachable!("only per-trial random channels lack a fixed geometry"),
        };
        let (a, sigma2) = cfg.levels(snr_db);
        let ch = geometry.with_amplitudes(a.clone())?.with_sigma2(sigma2)?;
        let obs = ch.transmit(&blk, seed(STREAM_NOISE))?;

        let decoder: &dyn Decoder = match &self.bank {
            Some(b) => b,
            None => &Uncoded,
        };
        let (frames, em) = if cfg.estimates_parameters() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed(STREAM_PRIOR));
            let a_tilde = a.map(|v| {
                let z: f64 = rng.sample(StandardNormal);
                (v + cfg.varsigma * z).max(AMPLITUDE_FLOOR)
            });
            let mut state = EmState::initial(&obs, a_tilde, cfg.varsigma * cfg.varsigma)?;
            if !cfg.estimate_sigma2 {
                state.sigma2_hat = sigma2.max(SIGMA2_FLOOR);
                state.estimate_sigma2 = false;
            }
            let run = run_varem(&ch, &obs, decoder, &cfg.turbo, state)?;
            let em = run
                .states
                .iter()
                .map(|s| (s.sigma2_hat, ((&s.a_hat - &a).norm_squared() / k as f64).sqrt()))
                .collect();
            (run.frames, em)
        } else {
            let rx = ch.with_sigma2(sigma2.max(RX_SIGMA2_FLOOR))?;
            (run_turbo(&rx, &obs, decoder, &cfg.turbo)?, Vec::new())
        };

        let errors = frames
            .iter()
            .map(|f| {
                (0..k)
                    .map(|u| {
                        f.info_post[u]
                            .iter()
                            .zip(&info[u])
                            .filter(|(l, b)| hard_bit(**l) != **b)
                            .count() as u64
                    })
                    .collect()
            })
            .collect();
        Ok(TrialOutcome { errors, em })
    }
}

/// Runs the configured simulation with an explicit execution policy.
pub fn run_scenario_with(cfg: &ScenarioConfig, exec: Execution) -> Result<BerReport> {
    let sim = Simulator::new(cfg)?;
    let k = cfg.channel.users();
    let j = cfg.turbo.outer;
    let mut report = BerReport {
        cells: Vec::new(),
        em: Vec::new(),
        trials: Vec::new(),
        per_user: cfg.per_user,
    };
    for &snr in &cfg.snr_db {
        let mut errors = vec![vec![0u64; k]; j];
        let mut em_sum = vec![(0.0, 0.0); if cfg.estimates_parameters() { j + 1 } else { 0 }];
        let mut done = 0;
        while done < cfg.max_trials {
            let batch = if done < cfg.trials { cfg.trials - done } else { cfg.trials.min(cfg.max_trials - done) };
            let outcomes = with_threads(cfg.threads, || exec.map(batch, |i| sim.trial(snr, done + i)));
            for o in outcomes {
                let o = o?;
                for (acc, e) in errors.iter_mut().zip(&o.errors) {
                    for (a, v) in acc.iter_mut().zip(e) {
                        *a += v;
                    }
                }
                for (acc, (s, r)) in em_sum.iter_mut().zip(&o.em) {
                    acc.0 += s;
                    acc.1 += r;
                }
            }
            done += batch;
            let fewest = errors.iter().map(|e| e.iter().sum::<u64>()).min().unwrap_or(0);
            if fewest >= cfg.min_errors {
                break;
            }
        }
        let bits = (cfg.info_bits * done) as u64;
        for (it, e) in errors.iter().enumerate() {
            report.cells.push(BerCell {
                snr_db: snr,
                iteration: it + 1,
                user: None,
                bits: bits * k as u64,
                errors: e.iter().sum(),
            });
            for (u, &eu) in e.iter().enumerate() {
                report.cells.push(BerCell {
                    snr_db: snr,
                    iteration: it + 1,
                    user: Some(u),
                    bits,
                    errors: eu,
                });
            }
        }
        for (it, (s, r)) in em_sum.iter().enumerate() {
            report.em.push(EmPoint {
                snr_db: snr,
                iteration: it,
                sigma2_hat: s / done as f64,
                a_hat_rmse: r / done as f64,
            });
        }
        report.trials.push(done);
    }
    Ok(report)
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<BerReport> {
    run_scenario_with(cfg, Execution::default())
}

/// The configuration with a single user, known parameters and the same code,
/// frame length and SNR grid.
pub fn single_user_config(cfg: &ScenarioConfig) -> ScenarioConfig {
    ScenarioConfig {
        name: format!("{}-single-user", cfg.name),
        channel: ChannelSpec::Equicorrelated { users: 1, rho: 0.0 },
        turbo: TurboOptions {
            detector: DetectorKind::Gaussian,
            schedule: Schedule::Flooding,
            outer: 1,
            inner: 1,
            order: OrderPolicy::AmplitudeDescending,
        },
        user_snr_db: Vec::new(),
        varsigma: 0.0,
        estimate_sigma2: false,
        per_user: false,
        ..cfg.clone()
    }
}

/// Single-user bound: one user with perfect channel knowledge.
pub fn single_user_bound(cfg: &ScenarioConfig) -> Result<BerReport> {
    run_scenario(&single_user_config(cfg))
}
