//! Learnable rounding for weights.
//!
//! A weight is quantized as
//!
//! ```text
//! Ŵ = s1 ⊙ (clamp(round(W / (s1 ⊙ exp(S))) + z, 0, 2^b − 1) − z)
//! ```
//!
//! with `s1` and `z` per output channel. FlexRound learns a full scale matrix
//! `S`; the low-rank form uses `S = L2·U2 + r2 + c2`, where the row vector
//! `r2 [C_out×1]` and column vector `c2 [1×C_in]` broadcast over `L2·U2`.
//! With `S = 0` both reduce to round-to-nearest.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{qmax, rtn_init_weight, Granularity, QParams};
use crate::rng::Rng;
use crate::tensor::{broadcast_add_rc, matmul, Tensor};

pub const DEFAULT_U2_STD: f32 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoundVariant {
    #[serde(rename = "rtn")]
    Rtn,
    #[serde(rename = "flexround")]
    FlexRound,
    #[serde(rename = "lrq")]
    Lrq,
    /// Low-rank scales without the row / column vectors.
    #[serde(rename = "lrq-no-bias")]
    LrqNoBias,
}

impl RoundVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            RoundVariant::Rtn => "rtn",
            RoundVariant::FlexRound => "flexround",
            RoundVariant::Lrq => "lrq",
            RoundVariant::LrqNoBias => "lrq-no-bias",
        }
    }

    pub fn is_learnable(self) -> bool {
        self != RoundVariant::Rtn
    }
}

impl fmt::Display for RoundVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoundVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtn" => Ok(RoundVariant::Rtn),
            "flexround" => Ok(RoundVariant::FlexRound),
            "lrq" => Ok(RoundVariant::Lrq),
            "lrq-no-bias" | "lrq_no_bias" => Ok(RoundVariant::LrqNoBias),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrqParams {
    pub s1: QParams,
    pub l2: Tensor,
    pub u2: Tensor,
    pub r2: Tensor,
    pub c2: Tensor,
    pub rank: usize,
    /// False for the variant whose `r2`, `c2` stay pinned at zero.
    pub with_bias: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlexParams {
    pub s1: QParams,
    pub s2: Tensor,
}

/// Per-layer quantization state for any rounding variant.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightParams {
    Rtn { s1: QParams },
    Flex(FlexParams),
    Lrq(LrqParams),
}

impl WeightParams {
    pub fn init(
        w: &Tensor,
        bits: u32,
        variant: RoundVariant,
        rank: usize,
        rng: &mut Rng,
        u2_std: f32,
    ) -> Result<Self> {
        Ok(match variant {
            RoundVariant::Rtn => WeightParams::Rtn {
                s1: rtn_init_weight(w, bits, Granularity::PerChannel { axis: 0 })?.qparams,
            },
            RoundVariant::FlexRound => WeightParams::Flex(init_flexround(w, bits)?),
            RoundVariant::Lrq => WeightParams::Lrq(init_lrq(w, bits, rank, rng, u2_std)?),
            RoundVariant::LrqNoBias => {
                let mut p = init_lrq(w, bits, rank, rng, u2_std)?;
                p.with_bias = false;
                WeightParams::Lrq(p)
            }
        })
    }

    pub fn variant(&self) -> RoundVariant {
        match self {
            WeightParams::Rtn { .. } => RoundVariant::Rtn,
            WeightParams::Flex(_) => RoundVariant::FlexRound,
            WeightParams::Lrq(p) if p.with_bias => RoundVariant::Lrq,
            WeightParams::Lrq(_) => RoundVariant::LrqNoBias,
        }
    }

    pub fn s1(&self) -> &QParams {
        match self {
            WeightParams::Rtn { s1 } => s1,
            WeightParams::Flex(p) => &p.s1,
            WeightParams::Lrq(p) => &p.s1,
        }
    }

    pub fn s1_mut(&mut self) -> &mut QParams {
        match self {
            WeightParams::Rtn { s1 } => s1,
            WeightParams::Flex(p) => &mut p.s1,
            WeightParams::Lrq(p) => &mut p.s1,
        }
    }

    /// The scale matrix `S`, or `None` for round-to-nearest.
    pub fn scale(&self) -> Result<Option<Tensor>> {
        match self {
            WeightParams::Rtn { .. } => Ok(None),
            WeightParams::Flex(p) => Ok(Some(p.s2.clone())),
            WeightParams::Lrq(p) => scale_matrix(p).map(Some),
        }
    }

    pub fn dequantize(&self, w: &Tensor, bits: u32) -> Result<Tensor> {
        match self.scale()? {
            None => dequantize_scaled(w, self.s1(), None, bits),
            Some(s) => dequantize_scaled(w, self.s1(), Some(&s), bits),
        }
    }

    /// Number of values the optimizer updates for this layer.
    pub fn learnable_count(&self) -> usize {
        match self {
            WeightParams::Rtn { .. } => 0,
            WeightParams::Flex(p) => p.s1.len() + p.s2.len(),
            WeightParams::Lrq(p) => {
                let bias = if p.with_bias { p.r2.len() + p.c2.len() } else { 0 };
                p.s1.len() + p.l2.len() + p.u2.len() + bias
            }
        }
    }
}

pub fn init_flexround(w: &Tensor, bits: u32) -> Result<FlexParams> {
    let init = rtn_init_weight(w, bits, Granularity::PerChannel { axis: 0 })?;
    Ok(FlexParams {
        s1: init.qparams,
        s2: Tensor::zeros(w.shape()),
    })
}

/// `L2 = 0`, `U2 ~ N(0, u2_std²)`, `r2 = c2 = 0`; `s1` from round-to-nearest.
///
/// Ranks up to `min(C_out, C_in)` are accepted so that the full-rank ceiling can
/// be compared against FlexRound.
pub fn init_lrq(w: &Tensor, bits: u32, rank: usize, rng: &mut Rng, u2_std: f32) -> Result<LrqParams> {
    let (c_out, c_in) = w.dims2()?;
    if rank == 0 || rank > c_out.min(c_in) {
        return Err(Error::Config(format!(
            "rank {rank} invalid for a {c_out}x{c_in} weight"
        )));
    }
    let init = rtn_init_weight(w, bits, Granularity::PerChannel { axis: 0 })?;
    Ok(LrqParams {
        s1: init.qparams,
        l2: Tensor::zeros(&[c_out, rank]),
        u2: rng.normal_tensor(&[rank, c_in], u2_std),
        r2: Tensor::zeros(&[c_out, 1]),
        c2: Tensor::zeros(&[1, c_in]),
        rank,
        with_bias: true,
    })
}

/// `L2·U2 + r2 + c2`.
pub fn scale_matrix(p: &LrqParams) -> Result<Tensor> {
    let lu = matmul(&p.l2, &p.u2)?;
    broadcast_add_rc(&lu, &p.r2, &p.c2)
}

pub fn dequantize_lrq(w: &Tensor, p: &LrqParams, bits: u32) -> Result<Tensor> {
    let s = scale_matrix(p)?;
    dequantize_scaled(w, &p.s1, Some(&s), bits)
}

pub fn dequantize_flexround(w: &Tensor, p: &FlexParams, bits: u32) -> Result<Tensor> {
    dequantize_scaled(w, &p.s1, Some(&p.s2), bits)
}

/// Shared kernel: per-output-channel step, optional element-wise log-scale.
pub fn dequantize_scaled(w: &Tensor, s1: &QParams, scale: Option<&Tensor>, bits: u32) -> Result<Tensor> {
    let (rows, cols) = w.dims2()?;
    if s1.len() != rows {
        return Err(Error::dim(
            "dequantize",
            format!("{} step sizes for {rows} output channels", s1.len()),
        ));
    }
    if let Some(s) = scale {
        w.expect_same_shape(s, "dequantize")?;
    }
    let top = qmax(bits);
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let step = s1.step[i];
        let zp = s1.zero_point[i] as f32;
        for j in 0..cols {
            let x = w.at(i, j);
            let denom = match scale {
                Some(s) => step * s.at(i, j).exp(),
                None => step,
            };
            let q = ((x / denom).round() + zp).clamp(0.0, top);
            out.push(step * (q - zp));
        }
    }
    Tensor::from_vec(vec![rows, cols], out)
}

/// `(C_out, C_in)` of a linear layer and how many such layers a block holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub c_out: usize,
    pub c_in: usize,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamRatio {
    pub weights: u64,
    /// `L2` and `U2` entries only.
    pub low_rank: u64,
    /// `L2`, `U2`, `r2`, `c2` and `s1`.
    pub full: u64,
    pub low_rank_percent: f64,
    pub full_percent: f64,
}

/// Ratio of learnable low-rank parameters to pre-trained weights, in percent.
pub fn learnable_param_ratio(layers: &[LayerDims], rank: usize) -> Result<ParamRatio> {
    let mut weights = 0u64;
    let mut low_rank = 0u64;
    let mut extra = 0u64;
    for l in layers {
        if l.c_out == 0 || l.c_in == 0 || l.count == 0 {
            return Err(Error::Config(format!("non-positive layer dims {l:?}")));
        }
        let (o, i, n, r) = (l.c_out as u64, l.c_in as u64, l.count as u64, rank as u64);
        weights += o * i * n;
        low_rank += (o * r + r * i) * n;
        extra += (o + i + o) * n;
    }
    let full = low_rank + extra;
    Ok(ParamRatio {
        weights,
        low_rank,
        full,
        low_rank_percent: 100.0 * low_rank as f64 / weights as f64,
        full_percent: 100.0 * full as f64 / weights as f64,
    })
}

/// Parses `"4x4096x4096+3x4096x11008"` (count x C_out x C_in terms joined by `+` or `,`).
pub fn parse_layer_dims(spec: &str) -> Result<Vec<LayerDims>> {
    spec.split(['+', ','])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|term| {
            let nums = term
                .split(['x', 'X', '*'])
                .map(|n| n.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("bad dims term `{term}`: {e}")))?;
            match nums.as_slice() {
                [count, c_out, c_in] => Ok(LayerDims {
                    c_out: *c_out,
                    c_in: *c_in,
                    count: *count,
                }),
                [c_out, c_in] => Ok(LayerDims {
                    c_out: *c_out,
                    c_in: *c_in,
                    count: 1,
                }),
                _ => Err(Error::Config(format!("bad dims term `{term}`"))),
            }
        })
        .collect()
}

/// Dims of one decoder block with hidden size `d` and FFN width `d_ff`:
/// four `d×d` attention projections, gate and up `d_ff×d`, down `d×d_ff`.
pub fn block_layer_dims(d: usize, d_ff: usize) -> Vec<LayerDims> {
    vec![
        LayerDims { c_out: d, c_in: d, count: 4 },
        LayerDims { c_out: d_ff, c_in: d, count: 2 },
        LayerDims { c_out: d, c_in: d_ff, count: 1 },
    ]
}
