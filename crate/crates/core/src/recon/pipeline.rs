use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::container::weight_params_tensors;
use crate::model::{block_forward, ActQuant, BlockQuant, CalibrationSet, LinearId, Model, NoHook, RangeRecorder};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::config::{PipelineMode, QuantScheme, ReconConfig};
use super::reconstruct::{dequantize_block, draw_drops, reconstruct_block, DropMask};
use super::report::ReconReport;

/// Block inputs for every calibration sample.
pub fn embed_set(model: &Model, calib: &CalibrationSet) -> Result<Vec<Tensor>> {
    if calib.is_empty() {
        return Err(Error::Ingestion("calibration set is empty".into()));
    }
    if calib.vocab_size > model.config.vocab_size {
        return Err(Error::Config(format!(
            "calibration vocabulary {} exceeds model vocabulary {}",
            calib.vocab_size, model.config.vocab_size
        )));
    }
    if calib.seq_len() > model.config.max_seq_len {
        return Err(Error::Config("calibration sequences exceed max_seq_len".into()));
    }
    calib.sequences.iter().map(|s| model.embed_tokens(s)).collect()
}

/// Runs block `index` of `model` over every stream entry using `quant`.
pub fn advance(model: &Model, index: usize, xs: &[Tensor], quant: &BlockQuant) -> Result<Vec<Tensor>> {
    advance_dropped(model, index, xs, quant, &vec![[false; 8]; xs.len()])
}

/// [`advance`] with activation quantization skipped at the sites marked in
/// each sample's mask.
pub fn advance_dropped(
    model: &Model,
    index: usize,
    xs: &[Tensor],
    quant: &BlockQuant,
    drops: &[DropMask],
) -> Result<Vec<Tensor>> {
    if drops.len() != xs.len() {
        return Err(Error::Config("one drop mask per stream entry".into()));
    }
    xs.par_iter()
        .zip(drops)
        .map(|(x, d)| {
            if quant.is_off() {
                block_forward(&model.config, &model.blocks[index], x, None, &mut NoHook).map(|(o, _)| o)
            } else {
                let mut hook = crate::model::QuantHook::new(quant).with_dropped(*d);
                block_forward(&model.config, &model.blocks[index], x, None, &mut hook).map(|(o, _)| o)
            }
        })
        .collect()
}

fn calibrate_ranges(model: &Model, index: usize, xts: &[Tensor], bits: u32) -> Result<BlockQuant> {
    let mut rec = RangeRecorder::default();
    for x in xts {
        block_forward(&model.config, &model.blocks[index], x, None, &mut rec)?;
    }
    Ok(BlockQuant {
        act: ActQuant::PerTensorStatic { bits, ranges: rec.ranges },
        kv_bits: None,
    })
}

pub fn layer_prefix(block: usize, id: LinearId) -> String {
    format!("blocks.{block}.{id}")
}

/// [`quantize_model_observed`] without an observer.
pub fn quantize_model(
    model: &Model,
    calib: &CalibrationSet,
    rcfg: &ReconConfig,
    scheme: &QuantScheme,
) -> Result<(Model, ReconReport)> {
    quantize_model_observed(model, calib, rcfg, scheme, &mut |_, _, _| {})
}

/// Sequential block-wise reconstruction over the full-precision stream `X`
/// and the quantized stream `X̃`, then the post-hoc activation / KV grids of
/// the chosen mode.
///
/// `observe(i, X, X̃)` sees the streams entering block `i` before it is
/// reconstructed. The returned model carries the dequantized weights, the
/// learned rounding parameters as sidecar tensors and its inference-time
/// quantization settings.
pub fn quantize_model_observed(
    model: &Model,
    calib: &CalibrationSet,
    rcfg: &ReconConfig,
    scheme: &QuantScheme,
    observe: &mut dyn FnMut(usize, &[Tensor], &[Tensor]),
) -> Result<(Model, ReconReport)> {
    rcfg.validate()?;
    scheme.validate()?;
    let mut q = model.clone();
    q.clear_quant();
    q.sidecar.clear();
    let mut xs = embed_set(model, calib)?;
    let mut xts = xs.clone();
    let mut reports = Vec::with_capacity(model.blocks.len());
    let mut layers = BTreeMap::new();

    for i in 0..model.blocks.len() {
        observe(i, &xs, &xts);
        let stream_quant = match scheme.mode {
            PipelineMode::PerTensorStaticWa => calibrate_ranges(model, i, &xts, scheme.bits_a)?,
            _ => BlockQuant::default(),
        };
        let (params, report) =
            reconstruct_block(&model.config, &model.blocks[i], i, &xs, &xts, rcfg, scheme, &stream_quant)
                .map_err(|e| match e {
                    Error::Numeric { site, detail } => Error::Training {
                        block: i,
                        detail: format!("{site}: {detail}"),
                    },
                    other => other,
                })?;
        q.blocks[i] = dequantize_block(&model.blocks[i], &params, scheme.bits_w)?;
        for (id, p) in LinearId::ALL.iter().zip(&params) {
            let prefix = layer_prefix(i, *id);
            layers.insert(prefix.clone(), p.variant().as_str().to_string());
            q.sidecar.extend(weight_params_tensors(&prefix, p));
        }
        q.quant[i] = stream_quant;
        reports.push(report);
        if i + 1 < model.blocks.len() {
            xs = advance(model, i, &xs, &BlockQuant::default())?;
            // The quantized stream drops activation grids per sample like the
            // reconstruction itself, so that always dropping reduces to
            // weight-only quantization.
            let mut rng = Rng::new(rcfg.seed).fork(i as u64).fork(4);
            let p = rcfg.drop_prob(scheme.mode);
            let drops: Vec<DropMask> = xts.iter().map(|_| draw_drops(&mut rng, p)).collect();
            xts = advance_dropped(&q, i, &xts, &q.quant[i], &drops)?;
        }
    }

    for bq in &mut q.quant {
        match scheme.mode {
            PipelineMode::PerTensorStaticWa => {}
            PipelineMode::PerTokenWa => bq.act = ActQuant::PerToken { bits: scheme.bits_a },
            PipelineMode::WeightOnly => bq.act = ActQuant::Off,
        }
        bq.kv_bits = scheme.bits_kv;
    }
    q.metadata = serde_json::json!({
        "scheme": scheme,
        "recon": rcfg,
        "layers": layers,
    });
    Ok((
        q,
        ReconReport {
            scheme: scheme.clone(),
            config: rcfg.clone(),
            blocks: reports,
        },
    ))
}

/// Applies round-to-nearest to every linear layer and the scheme's
/// activation / KV settings, with no reconstruction.
pub fn quantize_rtn(model: &Model, scheme: &QuantScheme) -> Result<Model> {
    scheme.validate()?;
    if scheme.mode == PipelineMode::PerTensorStaticWa {
        return Err(Error::Config("static activation grids need calibration data".into()));
    }
    let mut q = model.clone();
    q.clear_quant();
    for b in &mut q.blocks {
        for l in &mut b.linears {
            *l = crate::quant::rtn_init_weight(l, scheme.bits_w, crate::quant::Granularity::PerChannel { axis: 0 })?
                .dequant;
        }
    }
    for bq in &mut q.quant {
        if scheme.mode == PipelineMode::PerTokenWa {
            bq.act = ActQuant::PerToken { bits: scheme.bits_a };
        }
        bq.kv_bits = scheme.bits_kv;
    }
    Ok(q)
}
