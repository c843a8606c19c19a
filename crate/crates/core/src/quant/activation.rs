use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{affine_qparams, fake_quant, Granularity, QParams, QuantMode, QuantSpec};

/// Running minima / maxima for static calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeStats {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
    pub sample_count: usize,
}

impl RangeStats {
    pub fn merge(&self, other: &RangeStats) -> Result<RangeStats> {
        if self.min.len() != other.min.len() {
            return Err(Error::Calibration("merging stats of different granularity".into()));
        }
        Ok(RangeStats {
            min: self.min.iter().zip(&other.min).map(|(a, b)| a.min(*b)).collect(),
            max: self.max.iter().zip(&other.max).map(|(a, b)| a.max(*b)).collect(),
            sample_count: self.sample_count + other.sample_count,
        })
    }

    /// Grid per tracked slice.
    pub fn qparams(&self, bits: u32, axis: Option<usize>) -> Result<QParams> {
        if self.sample_count == 0 {
            return Err(Error::Calibration("range statistics are empty".into()));
        }
        let parts = self
            .min
            .iter()
            .zip(&self.max)
            .map(|(&lo, &hi)| affine_qparams(lo, hi, bits))
            .collect::<Result<Vec<_>>>()?;
        Ok(match axis {
            None => parts.into_iter().next().expect("one slice"),
            Some(a) => QParams::stack(&parts, a),
        })
    }
}

fn observe(x: &Tensor, granularity: Granularity) -> Result<RangeStats> {
    match granularity {
        Granularity::PerTensor => {
            let lo = x.data().iter().copied().fold(f32::INFINITY, f32::min);
            let hi = x.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
            Ok(RangeStats {
                min: vec![lo],
                max: vec![hi],
                sample_count: 1,
            })
        }
        Granularity::PerChannel { axis } => {
            let shape = x.shape();
            if axis >= shape.len() {
                return Err(Error::Config(format!("axis {axis} for shape {shape:?}")));
            }
            let extent = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut min = vec![f32::INFINITY; extent];
            let mut max = vec![f32::NEG_INFINITY; extent];
            for (i, &v) in x.data().iter().enumerate() {
                let k = (i / inner) % extent;
                min[k] = min[k].min(v);
                max[k] = max[k].max(v);
            }
            Ok(RangeStats {
                min,
                max,
                sample_count: 1,
            })
        }
        Granularity::PerToken => Err(Error::Config(
            "per-token ranges are dynamic and cannot be calibrated".into(),
        )),
    }
}

/// Absolute min / max over a calibration stream.
pub fn calibrate_static<'a>(
    stream: impl IntoIterator<Item = &'a Tensor>,
    spec: &QuantSpec,
) -> Result<RangeStats> {
    if spec.mode != QuantMode::Static {
        return Err(Error::Config("calibrate_static needs a static spec".into()));
    }
    let mut acc: Option<RangeStats> = None;
    for x in stream {
        if x.is_empty() {
            continue;
        }
        let s = observe(x, spec.granularity)?;
        acc = Some(match acc {
            None => s,
            Some(a) => a.merge(&s)?,
        });
    }
    acc.ok_or_else(|| Error::Calibration("empty calibration stream".into()))
}

fn spec_axis(granularity: Granularity) -> Option<usize> {
    match granularity {
        Granularity::PerTensor => None,
        Granularity::PerChannel { axis } => Some(axis),
        Granularity::PerToken => Some(0),
    }
}

/// Activation grid for `x` under `spec`: calibrated for static specs,
/// derived from `x` itself for dynamic ones.
pub fn activation_qparams(x: &Tensor, spec: &QuantSpec, stats: Option<&RangeStats>) -> Result<QParams> {
    spec.validate_for(x.shape())?;
    let axis = spec_axis(spec.granularity);
    match spec.mode {
        QuantMode::Static => {
            let stats = stats.ok_or_else(|| {
                Error::Config("static activation quantization without calibrated ranges".into())
            })?;
            stats.qparams(spec.bits, axis)
        }
        QuantMode::Dynamic => {
            let stats = match spec.granularity {
                Granularity::PerToken => observe(x, Granularity::PerChannel { axis: 0 })?,
                g => observe(x, g)?,
            };
            stats.qparams(spec.bits, axis)
        }
    }
}

pub fn quant_activation(x: &Tensor, spec: &QuantSpec, stats: Option<&RangeStats>) -> Result<Tensor> {
    let qp = activation_qparams(x, spec, stats)?;
    fake_quant(x, &qp, spec.bits)
}

/// Per-token asymmetric fake quantization of cached keys and values.
pub fn quant_kv_cache(k: &Tensor, v: &Tensor, bits: u32) -> Result<(Tensor, Tensor)> {
    let spec = QuantSpec::per_token(bits)?;
    Ok((
        quant_activation(k, &spec, None)?,
        quant_activation(v, &spec, None)?,
    ))
}
