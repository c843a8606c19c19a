use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lrq::WeightParams;
use crate::model::{block_backward, block_forward, ActSite, Block, BlockQuant, LinearId, ModelConfig, NoHook, QuantHook};
use crate::quant::MIN_STEP;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::config::{PipelineMode, QuantScheme, ReconConfig};
use super::report::{BlockReport, TrajectoryPoint};
use super::ste::{learnable_slices_mut, learnable_sizes, weight_grads};
use super::Adam;

/// Rounding parameters of the seven linear layers of one block.
pub type BlockParams = Vec<WeightParams>;

/// Which activation sites are left unquantized for one sample.
pub type DropMask = [bool; 8];

const NO_DROP: DropMask = [false; 8];

/// Activation quantization applied to the quantized path while reconstructing.
#[derive(Debug, Clone, Copy)]
pub struct ActContext<'a> {
    pub quant: &'a BlockQuant,
    pub enabled: bool,
}

impl<'a> ActContext<'a> {
    pub fn off(quant: &'a BlockQuant) -> Self {
        Self { quant, enabled: false }
    }
}

pub fn init_block_params(
    block: &Block,
    bits: u32,
    cfg: &ReconConfig,
    rng: &mut Rng,
) -> Result<BlockParams> {
    LinearId::ALL
        .iter()
        .map(|&id| {
            let w = block.linear(id);
            let rank = cfg.rank.min(w.rows().min(w.cols()));
            WeightParams::init(w, bits, cfg.variant_for(id), rank, rng, cfg.u2_std)
        })
        .collect()
}

pub fn dequantize_block(block: &Block, params: &BlockParams, bits: u32) -> Result<Block> {
    let lin: Vec<Tensor> = LinearId::ALL
        .iter()
        .zip(params)
        .map(|(&id, p)| p.dequantize(block.linear(id), bits))
        .collect::<Result<_>>()?;
    Ok(block.with_linears(lin.try_into().expect("seven layers")))
}

fn sample_forward(
    cfg: &ModelConfig,
    qblock: &Block,
    xt: &Tensor,
    act: ActContext<'_>,
    drop: &DropMask,
) -> Result<(Tensor, crate::model::BlockTrace)> {
    if act.enabled {
        let mut hook = QuantHook::new(act.quant).with_dropped(*drop).without_kv();
        block_forward(cfg, qblock, xt, None, &mut hook)
    } else {
        block_forward(cfg, qblock, xt, None, &mut NoHook)
    }
}

fn sq_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Mean squared error of the quantized block over a batch.
pub fn block_loss(
    cfg: &ModelConfig,
    qblock: &Block,
    xts: &[&Tensor],
    targets: &[&Tensor],
    act: ActContext<'_>,
    drops: &[DropMask],
) -> Result<f64> {
    let parts: Vec<(f64, usize)> = (0..xts.len())
        .into_par_iter()
        .map(|k| {
            let (out, _) = sample_forward(cfg, qblock, xts[k], act, &drops[k])?;
            Ok((sq_err(&out, targets[k]), out.len()))
        })
        .collect::<Result<_>>()?;
    let (s, n) = parts.iter().fold((0.0, 0), |(a, m), &(b, k)| (a + b, m + k));
    Ok(s / n.max(1) as f64)
}

/// Loss and straight-through gradients for every learnable tensor of the
/// block, in [`learnable_slices_mut`] order per layer.
#[allow(clippy::too_many_arguments)]
pub fn ste_gradients(
    cfg: &ModelConfig,
    block: &Block,
    params: &BlockParams,
    bits: u32,
    xts: &[&Tensor],
    targets: &[&Tensor],
    act: ActContext<'_>,
    drops: &[DropMask],
) -> Result<(f64, Vec<Vec<Vec<f32>>>)> {
    let qblock = dequantize_block(block, params, bits)?;
    let total: usize = targets.iter().map(|t| t.len()).sum();
    let per_sample: Vec<(f64, [Tensor; 7])> = (0..xts.len())
        .into_par_iter()
        .map(|k| {
            let (out, trace) = sample_forward(cfg, &qblock, xts[k], act, &drops[k])?;
            let diff = out.sub(targets[k])?;
            let loss = diff.sum_sq();
            let dout = diff.scale(2.0 / total as f32);
            let g = block_backward(cfg, &qblock, &trace, &dout)?;
            Ok((loss, g.linears))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut dw: Option<[Tensor; 7]> = None;
    for (l, g) in per_sample {
        loss += l;
        match &mut dw {
            None => dw = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g.iter()) {
                    a.add_assign(b)?;
                }
            }
        }
    }
    let dw = dw.ok_or_else(|| Error::Config("empty reconstruction batch".into()))?;
    let grads = LinearId::ALL
        .iter()
        .zip(params)
        .zip(dw.iter())
        .map(|((&id, p), g)| weight_grads(block.linear(id), p, bits, g))
        .collect::<Result<_>>()?;
    Ok((loss / total.max(1) as f64, grads))
}

pub(crate) fn draw_drops(rng: &mut Rng, p: f64) -> DropMask {
    let mut d = NO_DROP;
    for site in ActSite::ACTIVATION {
        d[site.index()] = rng.bernoulli(p);
    }
    d
}

/// Optimizes the rounding parameters of one block so that its output on the
/// quantized stream `xts` matches the full-precision output on `xs`.
///
/// `act` carries the activation grids for the static mode; other modes ignore
/// it. The returned parameters are the best ones seen on the held-in batch.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_block(
    cfg: &ModelConfig,
    block: &Block,
    index: usize,
    xs: &[Tensor],
    xts: &[Tensor],
    rcfg: &ReconConfig,
    scheme: &QuantScheme,
    act: &BlockQuant,
) -> Result<(BlockParams, BlockReport)> {
    rcfg.validate()?;
    if xs.is_empty() || xs.len() != xts.len() {
        return Err(Error::Config("reconstruction needs matching, non-empty streams".into()));
    }
    let started = Instant::now();
    let base = Rng::new(rcfg.seed).fork(index as u64);
    let mut init_rng = base.fork(1);
    let mut batch_rng = base.fork(2);
    let mut drop_rng = base.fork(3);

    let targets: Vec<Tensor> = xs
        .par_iter()
        .map(|x| block_forward(cfg, block, x, None, &mut NoHook).map(|(o, _)| o))
        .collect::<Result<_>>()?;
    let static_act = scheme.mode == PipelineMode::PerTensorStaticWa;
    let ctx = ActContext {
        quant: act,
        enabled: static_act,
    };
    let p_drop = rcfg.drop_prob(scheme.mode);

    let held = rcfg.held_in_samples.min(xs.len());
    let held_x: Vec<&Tensor> = xts[..held].iter().collect();
    let held_t: Vec<&Tensor> = targets[..held].iter().collect();
    let held_drops: Vec<DropMask> = (0..held)
        .map(|_| if static_act { draw_drops(&mut drop_rng, p_drop) } else { NO_DROP })
        .collect();
    let eval = |params: &BlockParams| -> Result<f64> {
        let qb = dequantize_block(block, params, scheme.bits_w)?;
        block_loss(cfg, &qb, &held_x, &held_t, ctx, &held_drops)
    };

    let mut params = init_block_params(block, scheme.bits_w, rcfg, &mut init_rng)?;
    let initial = eval(&params)?;
    if !initial.is_finite() {
        return Err(Error::Training {
            block: index,
            detail: "non-finite initial loss".into(),
        });
    }
    let mut trajectory = vec![TrajectoryPoint {
        iteration: 0,
        loss: initial,
    }];
    let mut best = (params.clone(), initial, 0usize);

    let sizes: Vec<usize> = params.iter().flat_map(learnable_sizes).collect();
    let learnable: usize = sizes.iter().sum();
    if learnable > 0 {
        let mut opt = Adam::new(rcfg.lr, &sizes);
        opt.beta1 = rcfg.adam_beta1;
        opt.beta2 = rcfg.adam_beta2;
        opt.eps = rcfg.adam_eps;
        for it in 1..=rcfg.iterations {
            let picks: Vec<usize> = (0..rcfg.batch_size).map(|_| batch_rng.below(xs.len())).collect();
            let drops: Vec<DropMask> = picks
                .iter()
                .map(|_| if static_act { draw_drops(&mut drop_rng, p_drop) } else { NO_DROP })
                .collect();
            let bx: Vec<&Tensor> = picks.iter().map(|&k| &xts[k]).collect();
            let bt: Vec<&Tensor> = picks.iter().map(|&k| &targets[k]).collect();
            let (loss, grads) = ste_gradients(cfg, block, &params, scheme.bits_w, &bx, &bt, ctx, &drops)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    block: index,
                    detail: format!("non-finite loss at iteration {it}"),
                });
            }
            if initial > 0.0 && loss > 1e6 * initial {
                return Err(Error::Training {
                    block: index,
                    detail: format!("diverged at iteration {it}: loss {loss:e} vs initial {initial:e}"),
                });
            }
            let flat_grads: Vec<&[f32]> = grads.iter().flatten().map(Vec::as_slice).collect();
            let mut flat_params: Vec<&mut [f32]> = params.iter_mut().flat_map(learnable_slices_mut).collect();
            opt.step(&mut flat_params, &flat_grads);
            for p in &mut params {
                for s in &mut p.s1_mut().step {
                    *s = s.max(MIN_STEP);
                }
            }
            if it % rcfg.eval_every == 0 || it == rcfg.iterations {
                let l = eval(&params)?;
                trajectory.push(TrajectoryPoint { iteration: it, loss: l });
                if l < best.1 {
                    best = (params.clone(), l, it);
                }
            }
        }
    }
    let (params, final_loss, best_iteration) = best;
    let report = BlockReport {
        block: index,
        variant: rcfg.variant,
        initial_loss: initial,
        final_loss,
        best_iteration,
        learnable_params: learnable,
        trajectory,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}
