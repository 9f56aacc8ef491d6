//! Channel instance files for `vfemud detect`.
//!
//! Same `key = value` format as scenario configs. Matrices and blocks of
//! vectors are written row by row, rows separated by `;`, entries by `,`:
//!
//! ```text
//! spreading = 0.6, 0.8; 0.8, -0.6   # N×K, unit-norm columns
//! amplitudes = 1, 0.5
//! sigma2 = 0.25
//! received = 0.9, 1.1; -0.2, 0.4   # one chip vector per symbol interval
//! ```
//!
//! `correlation` (K×K) may replace `spreading`, and `matched` (matched-filter
//! outputs, K per interval) may replace `received`. A correlation-only
//! instance needs `matched`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use vfemud::linalg::SymMatrix;
use vfemud::siso_ddf::{ddf_aided_uncoded, detection_order, DdfPrecompute, OrderPolicy};
use vfemud::siso_discrete::{serial_update, DiscreteBelief, McColumns};
use vfemud::siso_gaussian::{ext_flooding, ext_hybrid, GaussianPrior};
use vfemud::llr::clamp_llr;
use vfemud::{ChannelInstance, DetectorKind, Error, Result, Schedule};

pub struct Instance {
    ch: ChannelInstance,
    /// Matched-filter outputs, one per symbol interval.
    y: Vec<DVector<f64>>,
}

fn rows(key: &str, v: &str) -> Result<Vec<Vec<f64>>> {
    v.split(';')
        .map(|row| {
            row.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| Error::config(key, format!("cannot parse `{}`", x.trim()))))
                .collect()
        })
        .collect()
}

fn matrix(key: &str, v: &str) -> Result<DMatrix<f64>> {
    let r = rows(key, v)?;
    let ncols = r[0].len();
    if r.iter().any(|row| row.len() != ncols) {
        return Err(Error::config(key, "rows differ in length"));
    }
    Ok(DMatrix::from_fn(r.len(), ncols, |i, j| r[i][j]))
}

impl Instance {
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
            if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::config(k.trim(), "given twice"));
            }
        }
        let mut take = |k: &str| kv.remove(k);

        let a = match take("amplitudes") {
            Some(v) => DVector::from_vec(rows("amplitudes", &v)?.concat()),
            None => return Err(Error::config("amplitudes", "missing")),
        };
        let sigma2: f64 = match take("sigma2") {
            Some(v) => v.parse().map_err(|_| Error::config("sigma2", format!("cannot parse `{v}`")))?,
            None => return Err(Error::config("sigma2", "missing")),
        };
        if sigma2 <= 0.0 {
            return Err(Error::config("sigma2", "must be positive"));
        }
        let bad = |field: &'static str| move |e: Error| Error::config(field, e.to_string());
        let spreading = take("spreading");
        let from_correlation = spreading.is_none();
        let ch = match (spreading, take("correlation")) {
            (Some(s), None) => ChannelInstance::from_spreading(matrix("spreading", &s)?, a, sigma2).map_err(bad("spreading"))?,
            (None, Some(r)) => {
                let r = SymMatrix::new(matrix("correlation", &r)?).map_err(bad("correlation"))?;
                ChannelInstance::from_correlation(&r, a, sigma2).map_err(bad("correlation"))?
            }
            _ => return Err(Error::config("spreading", "give exactly one of `spreading` and `correlation`")),
        };
        let y = match (take("received"), take("matched")) {
            (Some(_), None) if from_correlation => {
                return Err(Error::config("received", "a correlation-only instance needs `matched`"))
            }
            (Some(r), None) => rows("received", &r)?
                .into_iter()
                .map(|r| {
                    if r.len() != ch.n() {
                        return Err(Error::config("received", format!("expected {} chips, got {}", ch.n(), r.len())));
                    }
                    Ok(ch.matched_filter(&DVector::from_vec(r)))
                })
                .collect::<Result<_>>()?,
            (None, Some(y)) => rows("matched", &y)?
                .into_iter()
                .map(|y| {
                    if y.len() != ch.k() {
                        return Err(Error::config("matched", format!("expected {} users, got {}", ch.k(), y.len())));
                    }
                    Ok(DVector::from_vec(y))
                })
                .collect::<Result<_>>()?,
            _ => return Err(Error::config("received", "give exactly one of `received` and `matched`")),
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::config(k, "unknown key"));
        }
        Ok(Instance { ch, y })
    }

    /// Extrinsic LLRs per symbol interval under uninformative priors.
    pub fn detect(&self, detector: DetectorKind, schedule: Schedule, sweeps: usize) -> Result<Vec<DVector<f64>>> {
        let k = self.ch.k();
        let zero = DVector::zeros(k);
        let mc = McColumns::new(&self.ch);
        let pre = match detector {
            DetectorKind::DdfAided => Some(DdfPrecompute::new(
                &self.ch,
                &detection_order(&self.ch, &OrderPolicy::AmplitudeDescending)?,
            )?),
            _ => None,
        };
        self.y
            .iter()
            .map(|y| match detector {
                DetectorKind::Gaussian => {
                    let prior = GaussianPrior::uninformative(k);
                    let ext = match schedule {
                        Schedule::Flooding => ext_flooding(&self.ch, y, &prior)?,
                        Schedule::Hybrid | Schedule::Sequential => ext_hybrid(&self.ch, y, &prior)?,
                    };
                    Ok(ext.llr_mud)
                }
                DetectorKind::Discrete => {
                    let order: Vec<usize> = (0..k).collect();
                    let mut q = DiscreteBelief::zeros(k);
                    for _ in 0..sweeps {
                        q = serial_update(&self.ch, y, &zero, &q, &order)?.0;
                    }
                    Ok(DVector::from_fn(k, |u, _| clamp_llr(mc.data_llr(y, q.m(), u))))
                }
                DetectorKind::DdfAided => {
                    let q = ddf_aided_uncoded(&self.ch, pre.as_ref().expect("built above"), y, sweeps)?;
                    Ok(DVector::from_fn(k, |u, _| clamp_llr(mc.data_llr(y, q.m(), u))))
                }
            })
            .collect()
    }
}
