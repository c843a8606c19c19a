use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{
    activation::activation_qparams, calibrate_static, fake_quant_masked, QuantSpec, RangeStats,
};
use crate::tensor::Tensor;

/// Activation tensors inside a block where fake quantization may be inserted.
/// Normalization and softmax inputs are never among them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActSite {
    /// Normalized input to the Q/K/V projections.
    AttnIn,
    /// Rotated queries entering `Q·Kᵀ`.
    Query,
    /// Rotated keys at the cache write point.
    Key,
    /// Values at the cache write point.
    Value,
    /// Softmax output entering `P·V`.
    Probs,
    /// Attention output entering the output projection.
    AttnOut,
    /// Normalized input to the gate / up projections.
    FfnIn,
    /// Gated product entering the down projection.
    FfnMid,
}

impl ActSite {
    pub const ALL: [ActSite; 8] = [
        ActSite::AttnIn,
        ActSite::Query,
        ActSite::Key,
        ActSite::Value,
        ActSite::Probs,
        ActSite::AttnOut,
        ActSite::FfnIn,
        ActSite::FfnMid,
    ];

    /// Sites governed by the activation quantizer (keys / values belong to the KV cache).
    pub const ACTIVATION: [ActSite; 6] = [
        ActSite::AttnIn,
        ActSite::Query,
        ActSite::Probs,
        ActSite::AttnOut,
        ActSite::FfnIn,
        ActSite::FfnMid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActSite::AttnIn => "attn_in",
            ActSite::Query => "query",
            ActSite::Key => "key",
            ActSite::Value => "value",
            ActSite::Probs => "probs",
            ActSite::AttnOut => "attn_out",
            ActSite::FfnIn => "ffn_in",
            ActSite::FfnMid => "ffn_mid",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_kv(self) -> bool {
        matches!(self, ActSite::Key | ActSite::Value)
    }
}

impl fmt::Display for ActSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActSite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ActSite::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown activation site `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub enum ActQuant {
    #[default]
    Off,
    /// One calibrated grid per site.
    PerTensorStatic {
        bits: u32,
        ranges: BTreeMap<ActSite, RangeStats>,
    },
    /// Grid per token row, computed at runtime.
    PerToken { bits: u32 },
}

/// Inference-time quantization of one block's activations and KV cache.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockQuant {
    pub act: ActQuant,
    pub kv_bits: Option<u32>,
}

impl BlockQuant {
    pub fn is_off(&self) -> bool {
        self.act == ActQuant::Off && self.kv_bits.is_none()
    }
}

/// Interception point for activations during a block forward pass.
pub trait SiteHook {
    /// Returns the activation to use downstream and, when quantized, the
    /// straight-through mask (true where the clamp is inactive).
    fn apply(&mut self, site: ActSite, x: Tensor) -> Result<(Tensor, Option<Vec<bool>>)>;
}

/// Leaves every activation untouched.
pub struct NoHook;

impl SiteHook for NoHook {
    fn apply(&mut self, _site: ActSite, x: Tensor) -> Result<(Tensor, Option<Vec<bool>>)> {
        Ok((x, None))
    }
}

/// Applies a [`BlockQuant`], optionally skipping dropped sites.
pub struct QuantHook<'a> {
    quant: &'a BlockQuant,
    dropped: [bool; 8],
    /// When false, KV sites are left in full precision.
    kv_enabled: bool,
}

impl<'a> QuantHook<'a> {
    pub fn new(quant: &'a BlockQuant) -> Self {
        Self {
            quant,
            dropped: [false; 8],
            kv_enabled: true,
        }
    }

    /// Sites with `dropped[site.index()]` pass through unquantized.
    pub fn with_dropped(mut self, dropped: [bool; 8]) -> Self {
        self.dropped = dropped;
        self
    }

    pub fn without_kv(mut self) -> Self {
        self.kv_enabled = false;
        self
    }
}

impl SiteHook for QuantHook<'_> {
    fn apply(&mut self, site: ActSite, x: Tensor) -> Result<(Tensor, Option<Vec<bool>>)> {
        if self.dropped[site.index()] {
            return Ok((x, None));
        }
        if site.is_kv() {
            return match self.quant.kv_bits {
                Some(bits) if self.kv_enabled => {
                    let spec = QuantSpec::per_token(bits)?;
                    let qp = activation_qparams(&x, &spec, None)?;
                    let (y, mask) = fake_quant_masked(&x, &qp, bits)?;
                    Ok((y, Some(mask)))
                }
                _ => Ok((x, None)),
            };
        }
        match &self.quant.act {
            ActQuant::Off => Ok((x, None)),
            ActQuant::PerToken { bits } => {
                let spec = QuantSpec::per_token(*bits)?;
                let qp = activation_qparams(&x, &spec, None)?;
                let (y, mask) = fake_quant_masked(&x, &qp, *bits)?;
                Ok((y, Some(mask)))
            }
            ActQuant::PerTensorStatic { bits, ranges } => {
                let stats = ranges.get(&site).ok_or_else(|| {
                    Error::Config(format!("no calibrated range for activation site `{site}`"))
                })?;
                let qp = stats.qparams(*bits, None)?;
                let (y, mask) = fake_quant_masked(&x, &qp, *bits)?;
                Ok((y, Some(mask)))
            }
        }
    }
}

/// Collects per-tensor min / max at the activation sites without modifying them.
#[derive(Debug, Default)]
pub struct RangeRecorder {
    pub ranges: BTreeMap<ActSite, RangeStats>,
}

impl SiteHook for RangeRecorder {
    fn apply(&mut self, site: ActSite, x: Tensor) -> Result<(Tensor, Option<Vec<bool>>)> {
        if ActSite::ACTIVATION.contains(&site) && !x.is_empty() {
            let spec = QuantSpec::per_tensor_static(8)?;
            let s = calibrate_static([&x], &spec)?;
            let merged = match self.ranges.get(&site) {
                Some(prev) => prev.merge(&s)?,
                None => s,
            };
            self.ranges.insert(site, merged);
        }
        Ok((x, None))
    }
}
