//! Full-precision training of the toy model on a synthetic language, so the
//! quantization experiments start from weights that encode real structure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recon::Adam;
use crate::rng::Rng;
use crate::tensor::{matmul, matmul_tn, Tensor};

use super::block::{inv_rms, rms_norm_backward};
use super::calib::SyntheticLanguage;
use super::hooks::NoHook;
use super::{block_backward, block_forward, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub language: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 8,
            seq_len: 32,
            lr: 3e-3,
            language: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

struct Grads {
    embed: Tensor,
    lm_head: Tensor,
    final_norm: Tensor,
    blocks: Vec<(Tensor, Tensor, [Tensor; 7])>,
}

/// Mean next-token cross entropy of one sequence and its gradient.
fn loss_and_grads(model: &Model, tokens: &[u32]) -> Result<(f64, Grads)> {
    let cfg = &model.config;
    let inputs = &tokens[..tokens.len() - 1];
    let targets = &tokens[1..];
    let n = inputs.len();

    let mut h = model.embed_tokens(inputs)?;
    let mut traces = Vec::with_capacity(model.blocks.len());
    for b in &model.blocks {
        let (out, tr) = block_forward(cfg, b, &h, None, &mut NoHook)?;
        traces.push(tr);
        h = out;
    }
    let inv = inv_rms(&h, cfg.norm_eps);
    let normed = super::block::rms_norm(&h, &model.final_norm, cfg.norm_eps);
    let logits = crate::tensor::matmul_nt(&normed, &model.lm_head)?;

    let mut loss = 0.0f64;
    let mut dlogits = Tensor::zeros(logits.shape());
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let t = targets[i] as usize;
        loss += z.ln() + max - row[t] as f64;
        let dr = dlogits.row_mut(i);
        for (j, e) in exps.iter().enumerate() {
            dr[j] = ((e / z - if j == t { 1.0 } else { 0.0 }) / n as f64) as f32;
        }
    }
    loss /= n as f64;

    let d_lm = matmul_tn(&dlogits, &normed)?;
    let d_normed = matmul(&dlogits, &model.lm_head)?;
    let mut d_final = vec![0.0f32; cfg.d_model];
    let mut dh = rms_norm_backward(&h, &model.final_norm, &inv, &d_normed, &mut d_final);

    let mut blocks = Vec::with_capacity(model.blocks.len());
    for (b, tr) in model.blocks.iter().zip(&traces).rev() {
        let g = block_backward(cfg, b, tr, &dh)?;
        dh = g.dx;
        blocks.push((g.attn_norm, g.ffn_norm, g.linears));
    }
    blocks.reverse();

    let mut d_embed = Tensor::zeros(model.embed.shape());
    for (i, &t) in inputs.iter().enumerate() {
        for (a, &b) in d_embed.row_mut(t as usize).iter_mut().zip(dh.row(i)) {
            *a += b;
        }
    }
    Ok((
        loss,
        Grads {
            embed: d_embed,
            lm_head: d_lm,
            final_norm: Tensor::from_vec(vec![cfg.d_model], d_final)?,
            blocks,
        },
    ))
}

fn accumulate(acc: &mut Option<Grads>, g: Grads) -> Result<()> {
    match acc {
        None => *acc = Some(g),
        Some(a) => {
            a.embed.add_assign(&g.embed)?;
            a.lm_head.add_assign(&g.lm_head)?;
            a.final_norm.add_assign(&g.final_norm)?;
            for (x, y) in a.blocks.iter_mut().zip(g.blocks) {
                x.0.add_assign(&y.0)?;
                x.1.add_assign(&y.1)?;
                for (p, q) in x.2.iter_mut().zip(y.2.iter()) {
                    p.add_assign(q)?;
                }
            }
        }
    }
    Ok(())
}

fn params_mut(model: &mut Model) -> Vec<&mut [f32]> {
    let mut out: Vec<&mut [f32]> = vec![
        model.embed.data_mut(),
        model.lm_head.data_mut(),
        model.final_norm.data_mut(),
    ];
    for b in &mut model.blocks {
        out.push(b.attn_norm.data_mut());
        out.push(b.ffn_norm.data_mut());
        for l in &mut b.linears {
            out.push(l.data_mut());
        }
    }
    out
}

fn grad_slices(g: &Grads) -> Vec<&[f32]> {
    let mut out: Vec<&[f32]> = vec![g.embed.data(), g.lm_head.data(), g.final_norm.data()];
    for (a, f, l) in &g.blocks {
        out.push(a.data());
        out.push(f.data());
        for t in l {
            out.push(t.data());
        }
    }
    out
}

/// Trains `model` in place on sequences from the synthetic language whose
/// vocabulary matches the model's.
pub fn train_toy_model(model: &mut Model, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.steps == 0 || cfg.batch == 0 || cfg.seq_len < 2 {
        return Err(Error::Config("training needs steps, batch >= 1 and seq_len >= 2".into()));
    }
    if cfg.seq_len > model.config.max_seq_len {
        return Err(Error::Config("training seq_len exceeds max_seq_len".into()));
    }
    let lang = SyntheticLanguage::new(cfg.language, model.config.vocab_size);
    let mut rng = Rng::new(cfg.seed);
    let sizes: Vec<usize> = params_mut(model).iter().map(|p| p.len()).collect();
    let mut opt = Adam::new(cfg.lr, &sizes);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let seqs: Vec<Vec<u32>> = (0..cfg.batch).map(|_| lang.sample(&mut rng, cfg.seq_len)).collect();
        let results: Vec<(f64, Grads)> = {
            use rayon::prelude::*;
            let m: &Model = model;
            seqs.par_iter().map(|s| loss_and_grads(m, s)).collect::<Result<_>>()?
        };
        let mut acc = None;
        let mut loss = 0.0;
        for (l, g) in results {
            loss += l;
            accumulate(&mut acc, g)?;
        }
        loss /= cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Training {
                block: 0,
                detail: format!("toy model loss diverged at step {step}"),
            });
        }
        losses.push(loss);
        let mut g = acc.expect("batch >= 1");
        let inv = 1.0 / cfg.batch as f32;
        for t in [&mut g.embed, &mut g.lm_head, &mut g.final_norm] {
            *t = t.scale(inv);
        }
        for (a, f, l) in &mut g.blocks {
            *a = a.scale(inv);
            *f = f.scale(inv);
            for t in l.iter_mut() {
                *t = t.scale(inv);
            }
        }
        let grads = grad_slices(&g);
        opt.step(&mut params_mut(model), &grads);
    }
    Ok(TrainReport {
        initial_loss: losses[0],
        final_loss: *losses.last().expect("steps >= 1"),
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn full_gradient_matches_finite_differences() {
        let m = Model::random(ModelConfig::toy(10, 8, 2, 2), 2).unwrap();
        let tokens = [1u32, 4, 4, 7, 2, 9];
        let (_, g) = loss_and_grads(&m, &tokens).unwrap();
        let h = 1e-2f32;
        let probes: [(&str, usize); 4] = [("embed", 12), ("lm_head", 5), ("final_norm", 3), ("wv0", 9)];
        for (name, idx) in probes {
            let mut plus = m.clone();
            let mut minus = m.clone();
            let (gp, tp, tm): (f32, &mut Tensor, &mut Tensor) = match name {
                "embed" => (g.embed.data()[idx], &mut plus.embed, &mut minus.embed),
                "lm_head" => (g.lm_head.data()[idx], &mut plus.lm_head, &mut minus.lm_head),
                "final_norm" => (g.final_norm.data()[idx], &mut plus.final_norm, &mut minus.final_norm),
                _ => (g.blocks[0].2[2].data()[idx], &mut plus.blocks[0].linears[2], &mut minus.blocks[0].linears[2]),
            };
            tp.data_mut()[idx] += h;
            tm.data_mut()[idx] -= h;
            let lp = loss_and_grads(&plus, &tokens).unwrap().0;
            let lm = loss_and_grads(&minus, &tokens).unwrap().0;
            let fd = (lp - lm) / (2.0 * h as f64);
            assert!(
                (fd - gp as f64).abs() <= 2e-2 * fd.abs().max(0.02),
                "{name}[{idx}]: fd {fd} vs {gp}"
            );
        }
    }

    #[test]
    fn training_reduces_loss() {
        let mut m = Model::random(ModelConfig::toy(16, 16, 2, 1), 0).unwrap();
        let cfg = TrainConfig {
            steps: 60,
            batch: 4,
            seq_len: 16,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let r = train_toy_model(&mut m, &cfg).unwrap();
        assert!(r.final_loss < 0.8 * r.initial_loss, "{} -> {}", r.initial_loss, r.final_loss);
    }
}
