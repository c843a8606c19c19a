//! Uniform asymmetric fake quantization.
//!
//! Every grid is `step · (q − zero_point)` for integers `q ∈ [0, 2^bits − 1]`.
//! Rounding is `f32::round`, which resolves ties away from zero.

pub mod activation;
mod rtn;

pub use activation::{calibrate_static, quant_activation, quant_kv_cache, RangeStats};
pub use rtn::{rtn_init_weight, RtnInit, SHRINK_CANDIDATES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest admissible step.
pub const MIN_STEP: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One grid per index along `axis`.
    PerChannel { axis: usize },
    /// One grid per row of a `[tokens × features]` tensor.
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Static,
    Dynamic,
}

/// Bit-width, granularity and calibration mode for one tensor role. Always asymmetric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub granularity: Granularity,
    pub mode: QuantMode,
}

impl QuantSpec {
    pub fn new(bits: u32, granularity: Granularity, mode: QuantMode) -> Result<Self> {
        check_bits(bits)?;
        if granularity == Granularity::PerToken && mode == QuantMode::Static {
            return Err(Error::Config(
                "per-token quantization derives its range at runtime and cannot be static".into(),
            ));
        }
        Ok(Self {
            bits,
            granularity,
            mode,
        })
    }

    pub fn per_tensor_static(bits: u32) -> Result<Self> {
        Self::new(bits, Granularity::PerTensor, QuantMode::Static)
    }

    pub fn per_token(bits: u32) -> Result<Self> {
        Self::new(bits, Granularity::PerToken, QuantMode::Dynamic)
    }

    /// Checks that the granularity is meaningful for a tensor of this rank.
    pub fn validate_for(&self, shape: &[usize]) -> Result<()> {
        match self.granularity {
            Granularity::PerChannel { axis } if axis >= shape.len() => Err(Error::Config(format!(
                "per-channel axis {axis} invalid for tensor of rank {}",
                shape.len()
            ))),
            Granularity::PerToken if shape.len() != 2 => Err(Error::Config(
                "per-token quantization needs a [tokens x features] tensor".into(),
            )),
            _ => Ok(()),
        }
    }
}

pub fn check_bits(bits: u32) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(Error::Config(format!("bit-width {bits} outside [2, 8]")));
    }
    Ok(())
}

/// Largest integer code for a bit-width.
pub fn qmax(bits: u32) -> f32 {
    ((1u32 << bits) - 1) as f32
}

/// Step sizes and zero points, either one pair (`axis == None`) or one pair per
/// index along `axis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QParams {
    pub step: Vec<f32>,
    pub zero_point: Vec<i32>,
    pub axis: Option<usize>,
}

impl QParams {
    pub fn scalar(step: f32, zero_point: i32) -> Self {
        Self {
            step: vec![step],
            zero_point: vec![zero_point],
            axis: None,
        }
    }

    /// Concatenates scalar grids into a per-slice set along `axis`.
    pub fn stack(parts: &[QParams], axis: usize) -> Self {
        Self {
            step: parts.iter().flat_map(|p| p.step.iter().copied()).collect(),
            zero_point: parts.iter().flat_map(|p| p.zero_point.iter().copied()).collect(),
            axis: Some(axis),
        }
    }

    pub fn len(&self) -> usize {
        self.step.len()
    }

    pub fn is_empty(&self) -> bool {
        self.step.is_empty()
    }

    pub fn validate(&self, bits: u32) -> Result<()> {
        let top = (1i32 << bits) - 1;
        if self.step.len() != self.zero_point.len() || self.step.is_empty() {
            return Err(Error::Config("step / zero_point length mismatch".into()));
        }
        if self.step.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Range("step must be positive and finite".into()));
        }
        if self.zero_point.iter().any(|&z| z < 0 || z > top) {
            return Err(Error::Range(format!("zero point outside [0, {top}]")));
        }
        Ok(())
    }

    /// Index into `step` / `zero_point` for each element of a tensor of `shape`.
    fn index_fn(&self, shape: &[usize]) -> Result<impl Fn(usize) -> usize> {
        let (inner, extent) = match self.axis {
            None => (1usize, 1usize),
            Some(axis) => {
                if axis >= shape.len() {
                    return Err(Error::dim(
                        "fake_quant",
                        format!("axis {axis} for shape {shape:?}"),
                    ));
                }
                let inner: usize = shape[axis + 1..].iter().product();
                (inner, shape[axis])
            }
        };
        if extent != self.step.len() {
            return Err(Error::dim(
                "fake_quant",
                format!("{} grids for extent {extent}", self.step.len()),
            ));
        }
        Ok(move |idx: usize| (idx / inner) % extent)
    }
}

/// Asymmetric grid covering `[lo, hi]` widened to include zero.
///
/// When one end of the widened range is zero the step is adjusted within a
/// couple of ulps so that the other end is an exact grid point whenever such a
/// step exists.
pub fn affine_qparams(lo: f32, hi: f32, bits: u32) -> Result<QParams> {
    check_bits(bits)?;
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Range(format!("non-finite range [{lo}, {hi}]")));
    }
    if lo > hi {
        return Err(Error::Range(format!("lo {lo} > hi {hi}")));
    }
    let top = qmax(bits);
    let constant = lo == hi;
    let lo = lo.min(0.0);
    let hi = hi.max(0.0);
    if hi - lo == 0.0 {
        return Ok(QParams::scalar(MIN_STEP, 1 << (bits - 1)));
    }
    let mut step = ((hi as f64 - lo as f64) / top as f64) as f32;
    let mut zp = (-(lo as f64) * top as f64 / (hi as f64 - lo as f64)).round() as f32;
    if lo == 0.0 || hi == 0.0 {
        let target = if lo == 0.0 { hi } else { -lo };
        match exact_endpoint_step(step, target, top) {
            Some(s) => step = s,
            // A constant value must survive; a coarser grid with the value
            // on code `k` always exists (k = 1 at worst).
            None if constant => {
                let (s, k) = (1..top as u32)
                    .rev()
                    .find_map(|k| exact_endpoint_step(target / k as f32, target, k as f32).map(|s| (s, k)))
                    .unwrap_or((target, 1));
                step = s;
                zp = if lo < 0.0 { k as f32 } else { 0.0 };
            }
            None => {}
        }
    }
    let step = step.max(MIN_STEP);
    Ok(QParams::scalar(step, zp.clamp(0.0, top) as i32))
}

fn exact_endpoint_step(step: f32, target: f32, k: f32) -> Option<f32> {
    let hits = |s: f32| s > 0.0 && s * k == target && (target / s).round() == k;
    let (mut down, mut up) = (step, step);
    if hits(step) {
        return Some(step);
    }
    for _ in 0..4 {
        down = down.next_down();
        up = up.next_up();
        if hits(down) {
            return Some(down);
        }
        if hits(up) {
            return Some(up);
        }
    }
    None
}

/// Quantize-dequantize one value.
#[inline]
pub fn fake_quant_scalar(x: f32, step: f32, zero_point: f32, top: f32) -> f32 {
    step * (((x / step).round() + zero_point).clamp(0.0, top) - zero_point)
}

/// True when the rounded code of `x` lies inside the grid (clamp inactive).
#[inline]
pub fn in_grid(x: f32, step: f32, zero_point: f32, top: f32) -> bool {
    let q = (x / step).round() + zero_point;
    (0.0..=top).contains(&q)
}

pub fn fake_quant(x: &Tensor, qp: &QParams, bits: u32) -> Result<Tensor> {
    Ok(fake_quant_masked(x, qp, bits)?.0)
}

/// Fake quantization plus the straight-through mask (1 where the clamp is inactive).
pub fn fake_quant_masked(x: &Tensor, qp: &QParams, bits: u32) -> Result<(Tensor, Vec<bool>)> {
    qp.validate(bits)?;
    let top = qmax(bits);
    let index = qp.index_fn(x.shape())?;
    let mut out = Vec::with_capacity(x.len());
    let mut mask = Vec::with_capacity(x.len());
    for (i, &v) in x.data().iter().enumerate() {
        let k = index(i);
        let (s, z) = (qp.step[k], qp.zero_point[k] as f32);
        out.push(fake_quant_scalar(v, s, z, top));
        mask.push(in_grid(v, s, z, top));
    }
    Ok((Tensor::from_vec(x.shape().to_vec(), out)?, mask))
}
