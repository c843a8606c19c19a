use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrq::{RoundVariant, DEFAULT_U2_STD};
use crate::model::LinearId;
use crate::quant::check_bits;

/// How activations take part in quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    /// Static per-tensor activation grids, active (with dropping) during reconstruction.
    PerTensorStaticWa,
    /// Weights reconstructed alone; per-token activation grids added afterwards.
    PerTokenWa,
    WeightOnly,
}

impl PipelineMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PipelineMode::PerTensorStaticWa => "per_tensor_static_wa",
            PipelineMode::PerTokenWa => "per_token_wa",
            PipelineMode::WeightOnly => "weight_only",
        }
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-tensor-static" | "per_tensor_static_wa" => Ok(PipelineMode::PerTensorStaticWa),
            "per-token" | "per_token_wa" => Ok(PipelineMode::PerTokenWa),
            "weight-only" | "weight_only" => Ok(PipelineMode::WeightOnly),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

/// Bit widths and activation handling for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantScheme {
    pub mode: PipelineMode,
    pub bits_w: u32,
    pub bits_a: u32,
    pub bits_kv: Option<u32>,
}

impl Default for QuantScheme {
    fn default() -> Self {
        Self {
            mode: PipelineMode::WeightOnly,
            bits_w: 4,
            bits_a: 8,
            bits_kv: None,
        }
    }
}

impl QuantScheme {
    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits_w)?;
        check_bits(self.bits_a)?;
        if let Some(b) = self.bits_kv {
            check_bits(b)?;
        }
        Ok(())
    }

    pub fn weight_only(bits_w: u32) -> Self {
        Self {
            bits_w,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Defaults to 0.5 when activations are quantized during reconstruction.
    pub quant_drop_prob: Option<f64>,
    pub seed: u64,
    pub variant: RoundVariant,
    pub rank: usize,
    pub u2_std: f32,
    /// Held-in loss is measured every this many iterations (and at the end).
    pub eval_every: usize,
    /// Leading calibration samples forming the held-in batch.
    pub held_in_samples: usize,
    /// Per-layer rounding variant overrides.
    pub layer_variants: BTreeMap<LinearId, RoundVariant>,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 2,
            lr: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            quant_drop_prob: None,
            seed: 0,
            variant: RoundVariant::Lrq,
            rank: 8,
            u2_std: DEFAULT_U2_STD,
            eval_every: 20,
            held_in_samples: 8,
            layer_variants: BTreeMap::new(),
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.held_in_samples == 0 {
            return Err(Error::Config("batch_size, eval_every and held_in_samples must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(p) = self.quant_drop_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("quant_drop_prob {p} outside [0, 1]")));
            }
        }
        if self.rank == 0 && self.needs_rank() {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        Ok(())
    }

    fn needs_rank(&self) -> bool {
        std::iter::once(&self.variant)
            .chain(self.layer_variants.values())
            .any(|v| matches!(v, RoundVariant::Lrq | RoundVariant::LrqNoBias))
    }

    pub fn variant_for(&self, id: LinearId) -> RoundVariant {
        self.layer_variants.get(&id).copied().unwrap_or(self.variant)
    }

    pub fn drop_prob(&self, mode: PipelineMode) -> f64 {
        match mode {
            PipelineMode::PerTensorStaticWa => self.quant_drop_prob.unwrap_or(0.5),
            _ => 0.0,
        }
    }
}
