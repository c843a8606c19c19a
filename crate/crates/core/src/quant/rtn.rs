use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{affine_qparams, check_bits, fake_quant_scalar, qmax, Granularity, QParams};

/// Shrink factors tried when searching for the step of a weight grid:
/// `0.30, 0.31, …, 1.20`.
pub const SHRINK_CANDIDATES: usize = 91;

fn shrink_factor(i: usize) -> f32 {
    (30 + i) as f32 / 100.0
}

/// Result of round-to-nearest weight initialization.
#[derive(Debug, Clone)]
pub struct RtnInit {
    pub qparams: QParams,
    pub dequant: Tensor,
    /// `‖W − Ŵ‖²`.
    pub loss: f64,
}

fn slice_loss(xs: &[f32], qp: &QParams, top: f32) -> f64 {
    let (s, z) = (qp.step[0], qp.zero_point[0] as f32);
    xs.iter()
        .map(|&x| {
            let d = x as f64 - fake_quant_scalar(x, s, z, top) as f64;
            d * d
        })
        .sum()
}

/// Best grid for one slice of weights: min/max range shrunk by each candidate
/// factor, first strict minimum of the squared error wins.
fn search_slice(xs: &[f32], bits: u32) -> Result<(QParams, f64)> {
    let top = qmax(bits);
    let lo = xs.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut best: Option<(QParams, f64)> = None;
    for i in 0..SHRINK_CANDIDATES {
        let beta = shrink_factor(i);
        let qp = affine_qparams(lo * beta, hi * beta, bits)?;
        let loss = slice_loss(xs, &qp, top);
        if best.as_ref().is_none_or(|(_, l)| loss < *l) {
            best = Some((qp, loss));
        }
    }
    Ok(best.expect("candidate set is non-empty"))
}

/// Round-to-nearest initialization of a `[C_out × C_in]` weight.
///
/// `PerChannel { axis: 0 }` (one grid per output channel) is the weight
/// default; `PerTensor` uses a single grid.
pub fn rtn_init_weight(w: &Tensor, bits: u32, granularity: Granularity) -> Result<RtnInit> {
    check_bits(bits)?;
    let (rows, cols) = w.dims2()?;
    if !w.is_finite() {
        return Err(Error::Range("weight contains non-finite values".into()));
    }
    let top = qmax(bits);
    match granularity {
        Granularity::PerTensor => {
            let (qp, loss) = search_slice(w.data(), bits)?;
            let (s, z) = (qp.step[0], qp.zero_point[0] as f32);
            let dequant = w.map(|x| fake_quant_scalar(x, s, z, top));
            Ok(RtnInit {
                qparams: qp,
                dequant,
                loss,
            })
        }
        Granularity::PerChannel { axis: 0 } | Granularity::PerToken => {
            let mut parts = Vec::with_capacity(rows);
            let mut data = Vec::with_capacity(rows * cols);
            let mut loss = 0.0;
            for i in 0..rows {
                let row = w.row(i);
                let (qp, l) = search_slice(row, bits)?;
                let (s, z) = (qp.step[0], qp.zero_point[0] as f32);
                data.extend(row.iter().map(|&x| fake_quant_scalar(x, s, z, top)));
                loss += l;
                parts.push(qp);
            }
            Ok(RtnInit {
                qparams: QParams::stack(&parts, 0),
                dequant: Tensor::from_vec(vec![rows, cols], data)?,
                loss,
            })
        }
        Granularity::PerChannel { axis: 1 } => {
            let t = rtn_init_weight(&w.transpose()?, bits, Granularity::PerChannel { axis: 0 })?;
            Ok(RtnInit {
                qparams: QParams {
                    axis: Some(1),
                    ..t.qparams
                },
                dequant: t.dequant.transpose()?,
                loss: t.loss,
            })
        }
        Granularity::PerChannel { axis } => Err(Error::Config(format!(
            "per-channel axis {axis} invalid for a 2-D weight"
        ))),
    }
}
