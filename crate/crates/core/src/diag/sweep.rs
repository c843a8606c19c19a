use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{evaluate_ppl, CalibrationSet, Model};
use crate::recon::{quantize_model, QuantScheme, ReconConfig};

use super::rmse::accumulated_rmse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Rank,
    CalibSamples,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Rank => "rank",
            SweepAxis::CalibSamples => "calib_samples",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(SweepAxis::Rank),
            "calib_samples" | "calib-samples" => Ok(SweepAxis::CalibSamples),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    /// Final held-in reconstruction loss of the last block.
    pub calib_loss: f64,
    /// Accumulated RMSE after the last block on the held-out set.
    pub heldout_rmse: f64,
    pub ppl: f64,
}

/// Sorted, duplicate-free sweep values.
pub fn sweep_values(values: &[usize]) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    if v.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("duplicate sweep values".into()));
    }
    if v[0] == 0 {
        return Err(Error::Config("sweep values must be positive".into()));
    }
    Ok(v)
}

/// One quantize-and-evaluate run per value with the shared seed. For the
/// calibration-size axis the leading `value` sequences of `calib` are used.
pub fn run_sweep(
    fp: &Model,
    calib: &CalibrationSet,
    heldout: &CalibrationSet,
    rcfg: &ReconConfig,
    scheme: &QuantScheme,
    axis: SweepAxis,
    values: &[usize],
) -> Result<Vec<SweepRow>> {
    let values = sweep_values(values)?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in &values {
        let mut cfg = rcfg.clone();
        let set = match axis {
            SweepAxis::Rank => {
                cfg.rank = value;
                calib.clone()
            }
            SweepAxis::CalibSamples => {
                if value > calib.len() {
                    return Err(Error::Config(format!(
                        "{value} calibration samples requested, {} available",
                        calib.len()
                    )));
                }
                calib.take(value)
            }
        };
        let (q, report) = quantize_model(fp, &set, &cfg, scheme)?;
        let curve = accumulated_rmse(fp, &q, heldout)?;
        rows.push(SweepRow {
            value,
            calib_loss: report.blocks.last().map_or(0.0, |b| b.final_loss),
            heldout_rmse: curve.last().copied().unwrap_or(0.0),
            ppl: evaluate_ppl(&q, heldout)?,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(axis: SweepAxis, rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([axis.to_string().as_str(), "calib_loss", "heldout_rmse", "ppl"])?;
    for r in rows {
        w.write_record([
            r.value.to_string(),
            format!("{:e}", r.calib_loss),
            format!("{:e}", r.heldout_rmse),
            format!("{:.6}", r.ppl),
        ])?;
    }
    w.flush()?;
    Ok(())
}
