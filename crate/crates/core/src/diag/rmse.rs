use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{block_forward, CalibrationSet, Model, NoHook};
use crate::recon::embed_set;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub tag: String,
    pub block: usize,
    pub rmse: f64,
}

/// Accumulated block-output RMSE, one row per block per sample tag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RmseCurve {
    pub rows: Vec<RmseRow>,
}

impl RmseCurve {
    pub fn values(&self, tag: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.tag == tag).map(|r| r.rmse).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tag", "block", "rmse"])?;
        for r in &self.rows {
            w.write_record([r.tag.clone(), r.block.to_string(), format!("{:e}", r.rmse)])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn pooled_rmse(a: &[Tensor], b: &[Tensor]) -> f64 {
    let (mut s, mut n) = (0.0f64, 0usize);
    for (x, y) in a.iter().zip(b) {
        for (&p, &q) in x.data().iter().zip(y.data()) {
            let d = p as f64 - q as f64;
            s += d * d;
        }
        n += x.len();
    }
    (s / n.max(1) as f64).sqrt()
}

/// RMSE between the full-precision stream through `fp` and the quantized
/// stream through `q` (with its inference quantization), after every block.
pub fn accumulated_rmse(fp: &Model, q: &Model, samples: &CalibrationSet) -> Result<Vec<f64>> {
    if !fp.is_architecturally_equal(q) {
        return Err(Error::Config("models differ in architecture".into()));
    }
    let mut xs = embed_set(fp, samples)?;
    let mut xts = embed_set(q, samples)?;
    let mut out = Vec::with_capacity(fp.blocks.len());
    for i in 0..fp.blocks.len() {
        xs = xs
            .par_iter()
            .map(|x| block_forward(&fp.config, &fp.blocks[i], x, None, &mut NoHook).map(|(o, _)| o))
            .collect::<Result<_>>()?;
        xts = xts.par_iter().map(|x| q.run_block(i, x, None)).collect::<Result<_>>()?;
        out.push(pooled_rmse(&xs, &xts));
    }
    Ok(out)
}

pub fn rmse_curve(fp: &Model, q: &Model, sets: &[(&str, &CalibrationSet)]) -> Result<RmseCurve> {
    let mut rows = Vec::new();
    for (tag, set) in sets {
        for (block, rmse) in accumulated_rmse(fp, q, set)?.into_iter().enumerate() {
            rows.push(RmseRow {
                tag: tag.to_string(),
                block,
                rmse,
            });
        }
    }
    Ok(RmseCurve { rows })
}
