use rayon::prelude::*;

use crate::error::{Error, Result};

use super::calib::CalibrationSet;
use super::Model;

/// Summed next-token negative log-likelihood (nats) and the number of
/// predicted positions.
pub fn sequence_nll(model: &Model, tokens: &[u32]) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Ok((0.0, 0));
    }
    let logits = model.forward(&tokens[..tokens.len() - 1])?;
    let mut total = 0.0f64;
    for (i, &target) in tokens[1..].iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        total += lse - row[target as usize] as f64;
    }
    if !total.is_finite() {
        return Err(Error::Numeric {
            site: "evaluation".into(),
            detail: "non-finite log-likelihood".into(),
        });
    }
    Ok((total, tokens.len() - 1))
}

/// Teacher-forced perplexity `exp(mean NLL)` over every predicted position.
pub fn evaluate_ppl(model: &Model, corpus: &CalibrationSet) -> Result<f64> {
    evaluate_ppl_partitioned(model, corpus, corpus.len().max(1))
}

/// Same quantity, evaluated in batches of `batch` sequences. Per-sequence
/// sums are combined in corpus order so the result does not depend on
/// `batch`.
pub fn evaluate_ppl_partitioned(model: &Model, corpus: &CalibrationSet, batch: usize) -> Result<f64> {
    if batch == 0 {
        return Err(Error::Config("evaluation batch must be at least 1".into()));
    }
    let mut per_seq = Vec::with_capacity(corpus.len());
    for chunk in corpus.sequences.chunks(batch) {
        let part: Vec<(f64, usize)> = chunk
            .par_iter()
            .map(|s| sequence_nll(model, s))
            .collect::<Result<_>>()?;
        per_seq.extend(part);
    }
    let (nll, count) = per_seq
        .iter()
        .fold((0.0f64, 0usize), |(a, n), &(b, m)| (a + b, n + m));
    if count == 0 {
        return Err(Error::Ingestion("evaluation corpus has no predicted positions".into()));
    }
    Ok((nll / count as f64).exp())
}
