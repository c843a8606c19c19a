//! Forward and reverse-mode passes of one pre-norm block.
//!
//! ```text
//! a  = rmsnorm(x)            → [attn_in]
//! q, k, v = a·Wqᵀ, a·Wkᵀ, a·Wvᵀ
//! q, k = rope(q), rope(k)    → [query], [key], [value]
//! P  = softmax(q·kᵀ/√d_h)    → [probs]     (causal)
//! o  = P·v                   → [attn_out]
//! h  = x + o·Woᵀ
//! f  = rmsnorm(h)            → [ffn_in]
//! m  = silu(f·Wgᵀ) ⊙ f·Wuᵀ   → [ffn_mid]
//! y  = h + m·Wdᵀ
//! ```
//!
//! Bracketed names are [`ActSite`]s handed to the hook. The backward pass
//! treats each quantized site as identity inside its grid and zero outside.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

use super::hooks::{ActSite, SiteHook};
use super::{Block, LinearId, ModelConfig};

/// Keys (after rotation) and values of all previous positions.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    pub k: Option<Tensor>,
    pub v: Option<Tensor>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.k.as_ref().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

type Mask = Option<Vec<bool>>;

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    x: Tensor,
    inv_rms_attn: Vec<f32>,
    a_q: Tensor,
    mask_a: Mask,
    q_s: Tensor,
    mask_q: Mask,
    k_s: Tensor,
    mask_k: Mask,
    v_s: Tensor,
    mask_v: Mask,
    probs: Vec<Tensor>,
    probs_s: Vec<Tensor>,
    mask_p: Vec<Mask>,
    o_q: Tensor,
    mask_o: Mask,
    h1: Tensor,
    inv_rms_ffn: Vec<f32>,
    f_q: Tensor,
    mask_f: Mask,
    gate: Tensor,
    up: Tensor,
    m_q: Tensor,
    mask_m: Mask,
    pos0: usize,
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub dx: Tensor,
    /// Indexed by [`LinearId::index`].
    pub linears: [Tensor; 7],
    pub attn_norm: Tensor,
    pub ffn_norm: Tensor,
}

pub(crate) fn inv_rms(x: &Tensor, eps: f32) -> Vec<f32> {
    let n = x.cols();
    (0..x.rows())
        .map(|i| {
            let ms = x.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / n as f64;
            (1.0 / (ms + eps as f64).sqrt()) as f32
        })
        .collect()
}

fn apply_norm(x: &Tensor, gain: &Tensor, inv: &[f32]) -> Tensor {
    let mut out = x.clone();
    for (i, &r) in inv.iter().enumerate() {
        for (o, &g) in out.row_mut(i).iter_mut().zip(gain.data()) {
            *o = *o * r * g;
        }
    }
    out
}

pub(crate) fn rms_norm(x: &Tensor, gain: &Tensor, eps: f32) -> Tensor {
    apply_norm(x, gain, &inv_rms(x, eps))
}

/// Returns `dx` and accumulates into `dgain`.
pub(crate) fn rms_norm_backward(x: &Tensor, gain: &Tensor, inv: &[f32], dy: &Tensor, dgain: &mut [f32]) -> Tensor {
    let n = x.cols();
    let mut dx = Tensor::zeros(x.shape());
    for (i, &r) in inv.iter().enumerate() {
        let (xr, dyr) = (x.row(i), dy.row(i));
        let dot: f64 = xr
            .iter()
            .zip(dyr)
            .zip(gain.data())
            .map(|((&xv, &d), &g)| d as f64 * g as f64 * xv as f64)
            .sum();
        let coef = (r as f64).powi(3) * dot / n as f64;
        let row = dx.row_mut(i);
        for j in 0..n {
            let g = gain.data()[j];
            row[j] = (r as f64 * g as f64 * dyr[j] as f64 - xr[j] as f64 * coef) as f32;
            dgain[j] += dyr[j] * xr[j] * r;
        }
    }
    dx
}

fn rope_tables(cfg: &ModelConfig, pos0: usize, len: usize) -> (Vec<f32>, Vec<f32>) {
    let half = cfg.head_dim() / 2;
    let mut cos = Vec::with_capacity(len * half);
    let mut sin = Vec::with_capacity(len * half);
    for p in pos0..pos0 + len {
        for i in 0..half {
            let freq = (cfg.rope_base as f64).powf(-2.0 * i as f64 / cfg.head_dim() as f64);
            let angle = p as f64 * freq;
            cos.push(angle.cos() as f32);
            sin.push(angle.sin() as f32);
        }
    }
    (cos, sin)
}

/// Rotates consecutive pairs within each head; `inverse` applies the transpose.
fn rope(cfg: &ModelConfig, x: &Tensor, pos0: usize, inverse: bool) -> Tensor {
    let hd = cfg.head_dim();
    let half = hd / 2;
    let (cos, sin) = rope_tables(cfg, pos0, x.rows());
    let mut out = x.clone();
    for t in 0..x.rows() {
        let row = out.row_mut(t);
        for h in 0..cfg.n_heads {
            for i in 0..half {
                let (c, mut s) = (cos[t * half + i], sin[t * half + i]);
                if inverse {
                    s = -s;
                }
                let a = h * hd + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * c - x1 * s;
                row[a + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}

fn head_slice(x: &Tensor, h: usize, hd: usize) -> Tensor {
    let mut data = Vec::with_capacity(x.rows() * hd);
    for t in 0..x.rows() {
        data.extend_from_slice(&x.row(t)[h * hd..(h + 1) * hd]);
    }
    Tensor::from_vec(vec![x.rows(), hd], data).expect("head slice shape")
}

fn add_head_slice(dst: &mut Tensor, src: &Tensor, h: usize, hd: usize) {
    for t in 0..src.rows() {
        for (d, s) in dst.row_mut(t)[h * hd..(h + 1) * hd].iter_mut().zip(src.row(t)) {
            *d += s;
        }
    }
}

fn apply_mask(g: &mut Tensor, mask: &Mask) {
    if let Some(m) = mask {
        for (v, &keep) in g.data_mut().iter_mut().zip(m) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}

fn silu(z: f32) -> f32 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f32) -> f32 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

fn append_rows(prev: Option<&Tensor>, new: &Tensor) -> Result<Tensor> {
    match prev {
        None => Ok(new.clone()),
        Some(p) => Tensor::vstack(&[p.clone(), new.clone()]),
    }
}

fn check_finite(t: &Tensor, site: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            site: site.to_string(),
            detail: "non-finite values".into(),
        })
    }
}

/// One block over `x [tokens × d]`. With a cache, positions continue after
/// the cached ones and the new keys / values are appended.
pub fn block_forward(
    cfg: &ModelConfig,
    block: &Block,
    x: &Tensor,
    cache: Option<&mut KvCache>,
    hook: &mut dyn SiteHook,
) -> Result<(Tensor, BlockTrace)> {
    check_finite(x, "block input")?;
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let t = x.rows();
    if x.cols() != d {
        return Err(Error::dim("block_forward", format!("input {:?}, d_model {d}", x.shape())));
    }
    let pos0 = cache.as_ref().map_or(0, |c| c.len());
    if pos0 + t > cfg.max_seq_len {
        return Err(Error::Config(format!(
            "sequence length {} exceeds max_seq_len {}",
            pos0 + t,
            cfg.max_seq_len
        )));
    }

    let inv_rms_attn = inv_rms(x, cfg.norm_eps);
    let a = apply_norm(x, &block.attn_norm, &inv_rms_attn);
    let (a_q, mask_a) = hook.apply(ActSite::AttnIn, a)?;
    let q = matmul_nt(&a_q, block.linear(LinearId::Wq))?;
    let k = matmul_nt(&a_q, block.linear(LinearId::Wk))?;
    let v = matmul_nt(&a_q, block.linear(LinearId::Wv))?;
    let q = rope(cfg, &q, pos0, false);
    let k = rope(cfg, &k, pos0, false);
    let (q_s, mask_q) = hook.apply(ActSite::Query, q)?;
    let (k_new, mask_k) = hook.apply(ActSite::Key, k)?;
    let (v_new, mask_v) = hook.apply(ActSite::Value, v)?;

    let (k_s, v_s) = match cache {
        Some(c) => {
            let k_all = append_rows(c.k.as_ref(), &k_new)?;
            let v_all = append_rows(c.v.as_ref(), &v_new)?;
            c.k = Some(k_all.clone());
            c.v = Some(v_all.clone());
            (k_all, v_all)
        }
        None => (k_new, v_new),
    };
    let tk = k_s.rows();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut o = Tensor::zeros(&[t, d]);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    let mut probs_s = Vec::with_capacity(cfg.n_heads);
    let mut mask_p = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = head_slice(&q_s, h, hd);
        let kh = head_slice(&k_s, h, hd);
        let vh = head_slice(&v_s, h, hd);
        let scores = matmul_nt(&qh, &kh)?;
        let mut p = Tensor::zeros(&[t, tk]);
        for i in 0..t {
            let limit = pos0 + i + 1;
            let srow = &scores.row(i)[..limit];
            let max = srow.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64 * scale;
            let exps: Vec<f64> = srow.iter().map(|&s| (s as f64 * scale - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (dst, e) in p.row_mut(i)[..limit].iter_mut().zip(&exps) {
                *dst = (e / z) as f32;
            }
        }
        let (ps, mp) = hook.apply(ActSite::Probs, p.clone())?;
        let oh = matmul(&ps, &vh)?;
        add_head_slice(&mut o, &oh, h, hd);
        probs.push(p);
        probs_s.push(ps);
        mask_p.push(mp);
    }
    let (o_q, mask_o) = hook.apply(ActSite::AttnOut, o)?;
    let attn = matmul_nt(&o_q, block.linear(LinearId::Wo))?;
    check_finite(&attn, "attention")?;
    let h1 = x.add(&attn)?;

    let inv_rms_ffn = inv_rms(&h1, cfg.norm_eps);
    let f = apply_norm(&h1, &block.ffn_norm, &inv_rms_ffn);
    let (f_q, mask_f) = hook.apply(ActSite::FfnIn, f)?;
    let gate = matmul_nt(&f_q, block.linear(LinearId::Gate))?;
    let up = matmul_nt(&f_q, block.linear(LinearId::Up))?;
    let m = Tensor::from_vec(
        gate.shape().to_vec(),
        gate.data()
            .iter()
            .zip(up.data())
            .map(|(&g, &u)| silu(g) * u)
            .collect(),
    )?;
    let (m_q, mask_m) = hook.apply(ActSite::FfnMid, m)?;
    let ffn = matmul_nt(&m_q, block.linear(LinearId::Down))?;
    check_finite(&ffn, "ffn")?;
    let out = h1.add(&ffn)?;

    let trace = BlockTrace {
        x: x.clone(),
        inv_rms_attn,
        a_q,
        mask_a,
        q_s,
        mask_q,
        k_s,
        mask_k,
        v_s,
        mask_v,
        probs,
        probs_s,
        mask_p,
        o_q,
        mask_o,
        h1,
        inv_rms_ffn,
        f_q,
        mask_f,
        gate,
        up,
        m_q,
        mask_m,
        pos0,
    };
    Ok((out, trace))
}

/// Reverse-mode pass for a forward run without a cache.
pub fn block_backward(cfg: &ModelConfig, block: &Block, tr: &BlockTrace, dout: &Tensor) -> Result<BlockGrads> {
    if tr.pos0 != 0 {
        return Err(Error::Config("backward through a cached forward pass".into()));
    }
    let hd = cfg.head_dim();
    let d = cfg.d_model;
    let t = tr.x.rows();
    let mut attn_norm = vec![0.0f32; d];
    let mut ffn_norm = vec![0.0f32; d];

    // FFN
    let mut dh1 = dout.clone();
    let d_down = matmul_tn(dout, &tr.m_q)?;
    let mut dm = matmul(dout, block.linear(LinearId::Down))?;
    apply_mask(&mut dm, &tr.mask_m);
    let mut dgate = dm.clone();
    let mut dup = dm;
    for (((dg, du), &g), &u) in dgate
        .data_mut()
        .iter_mut()
        .zip(dup.data_mut().iter_mut())
        .zip(tr.gate.data())
        .zip(tr.up.data())
    {
        let dmv = *dg;
        *dg = dmv * u * silu_grad(g);
        *du = dmv * silu(g);
    }
    let d_gate_w = matmul_tn(&dgate, &tr.f_q)?;
    let d_up_w = matmul_tn(&dup, &tr.f_q)?;
    let mut df = matmul(&dgate, block.linear(LinearId::Gate))?;
    df.add_assign(&matmul(&dup, block.linear(LinearId::Up))?)?;
    apply_mask(&mut df, &tr.mask_f);
    dh1.add_assign(&rms_norm_backward(&tr.h1, &block.ffn_norm, &tr.inv_rms_ffn, &df, &mut ffn_norm))?;

    // attention
    let mut dx = dh1.clone();
    let d_o_w = matmul_tn(&dh1, &tr.o_q)?;
    let mut d_o = matmul(&dh1, block.linear(LinearId::Wo))?;
    apply_mask(&mut d_o, &tr.mask_o);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Tensor::zeros(&[t, d]);
    let mut dk = Tensor::zeros(&[t, d]);
    let mut dv = Tensor::zeros(&[t, d]);
    for h in 0..cfg.n_heads {
        let doh = head_slice(&d_o, h, hd);
        let vh = head_slice(&tr.v_s, h, hd);
        let qh = head_slice(&tr.q_s, h, hd);
        let kh = head_slice(&tr.k_s, h, hd);
        let mut dp = matmul_nt(&doh, &vh)?;
        let dvh = matmul_tn(&tr.probs_s[h], &doh)?;
        apply_mask(&mut dp, &tr.mask_p[h]);
        let p = &tr.probs[h];
        let mut ds = Tensor::zeros(&[t, t]);
        for i in 0..t {
            let limit = i + 1;
            let (pr, dpr) = (&p.row(i)[..limit], &dp.row(i)[..limit]);
            let dot: f64 = pr.iter().zip(dpr).map(|(&a, &b)| a as f64 * b as f64).sum();
            for (j, dst) in ds.row_mut(i)[..limit].iter_mut().enumerate() {
                *dst = (pr[j] as f64 * (dpr[j] as f64 - dot) * scale) as f32;
            }
        }
        add_head_slice(&mut dq, &matmul(&ds, &kh)?, h, hd);
        add_head_slice(&mut dk, &matmul_tn(&ds, &qh)?, h, hd);
        add_head_slice(&mut dv, &dvh, h, hd);
    }
    apply_mask(&mut dq, &tr.mask_q);
    apply_mask(&mut dk, &tr.mask_k);
    apply_mask(&mut dv, &tr.mask_v);
    let dq = rope(cfg, &dq, 0, true);
    let dk = rope(cfg, &dk, 0, true);
    let d_q_w = matmul_tn(&dq, &tr.a_q)?;
    let d_k_w = matmul_tn(&dk, &tr.a_q)?;
    let d_v_w = matmul_tn(&dv, &tr.a_q)?;
    let mut da = matmul(&dq, block.linear(LinearId::Wq))?;
    da.add_assign(&matmul(&dk, block.linear(LinearId::Wk))?)?;
    da.add_assign(&matmul(&dv, block.linear(LinearId::Wv))?)?;
    apply_mask(&mut da, &tr.mask_a);
    dx.add_assign(&rms_norm_backward(&tr.x, &block.attn_norm, &tr.inv_rms_attn, &da, &mut attn_norm))?;

    Ok(BlockGrads {
        dx,
        linears: [d_q_w, d_k_w, d_v_w, d_o_w, d_gate_w, d_up_w, d_down],
        attn_norm: Tensor::from_vec(vec![d], attn_norm)?,
        ffn_norm: Tensor::from_vec(vec![d], ffn_norm)?,
    })
}
