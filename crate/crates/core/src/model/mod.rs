//! Toy decoder-only transformer: pre-norm rotary attention and a gated FFN.

pub(crate) mod block;
pub mod calib;
pub mod container;
mod eval;
mod hooks;
mod train;

pub use block::{block_backward, block_forward, BlockGrads, BlockTrace, KvCache};
pub use calib::{make_calibration, CalibSource, CalibrationSet, SyntheticLanguage};
pub use eval::{evaluate_ppl, evaluate_ppl_partitioned, sequence_nll};
pub use hooks::{ActQuant, ActSite, BlockQuant, NoHook, QuantHook, RangeRecorder, SiteHook};
pub use train::{train_toy_model, TrainConfig, TrainReport};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{matmul_nt, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub max_seq_len: usize,
    pub rope_base: f32,
    pub norm_eps: f32,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize, d_model: usize, n_heads: usize, n_blocks: usize) -> Self {
        Self {
            vocab_size,
            d_model,
            n_heads,
            d_ff: 2 * d_model,
            n_blocks,
            max_seq_len: 256,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible into {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config("rotary embedding needs an even head dim".into()));
        }
        if self.vocab_size == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("vocab_size, d_ff and max_seq_len must be positive".into()));
        }
        Ok(())
    }
}

/// The seven linear layers of a block, stored `[C_out × C_in]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearId {
    Wq,
    Wk,
    Wv,
    Wo,
    Gate,
    Up,
    Down,
}

impl LinearId {
    pub const ALL: [LinearId; 7] = [
        LinearId::Wq,
        LinearId::Wk,
        LinearId::Wv,
        LinearId::Wo,
        LinearId::Gate,
        LinearId::Up,
        LinearId::Down,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LinearId::Wq => "wq",
            LinearId::Wk => "wk",
            LinearId::Wv => "wv",
            LinearId::Wo => "wo",
            LinearId::Gate => "gate",
            LinearId::Up => "up",
            LinearId::Down => "down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LinearId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LinearId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LinearId::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown linear layer `{s}`")))
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub ffn_norm: Tensor,
    /// Indexed by [`LinearId::index`].
    pub linears: [Tensor; 7],
}

impl Block {
    pub fn random(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let ff = cfg.d_ff;
        let proj = 1.0 / (d as f32).sqrt();
        let out = proj / (2.0 * cfg.n_blocks.max(1) as f32).sqrt();
        let down = 1.0 / (ff as f32).sqrt() / (2.0 * cfg.n_blocks.max(1) as f32).sqrt();
        Self {
            attn_norm: Tensor::full(&[d], 1.0),
            ffn_norm: Tensor::full(&[d], 1.0),
            linears: [
                rng.normal_tensor(&[d, d], proj),
                rng.normal_tensor(&[d, d], proj),
                rng.normal_tensor(&[d, d], proj),
                rng.normal_tensor(&[d, d], out),
                rng.normal_tensor(&[ff, d], proj),
                rng.normal_tensor(&[ff, d], proj),
                rng.normal_tensor(&[d, ff], down),
            ],
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, ff) = (cfg.d_model, cfg.d_ff);
        Self {
            attn_norm: Tensor::full(&[d], 1.0),
            ffn_norm: Tensor::full(&[d], 1.0),
            linears: [
                Tensor::zeros(&[d, d]),
                Tensor::zeros(&[d, d]),
                Tensor::zeros(&[d, d]),
                Tensor::zeros(&[d, d]),
                Tensor::zeros(&[ff, d]),
                Tensor::zeros(&[ff, d]),
                Tensor::zeros(&[d, ff]),
            ],
        }
    }

    pub fn linear(&self, id: LinearId) -> &Tensor {
        &self.linears[id.index()]
    }

    pub fn linear_mut(&mut self, id: LinearId) -> &mut Tensor {
        &mut self.linears[id.index()]
    }

    /// Copy with the given linear weights swapped in.
    pub fn with_linears(&self, linears: [Tensor; 7]) -> Block {
        Block {
            attn_norm: self.attn_norm.clone(),
            ffn_norm: self.ffn_norm.clone(),
            linears,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
    /// Inference-time activation / KV quantization, one entry per block.
    pub quant: Vec<BlockQuant>,
    /// Extra tensors saved alongside the weights (learned rounding parameters).
    pub sidecar: BTreeMap<String, Tensor>,
    /// Free-form description of how the weights were produced.
    pub metadata: serde_json::Value,
}

impl Model {
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let d = config.d_model;
        let embed = rng.normal_tensor(&[config.vocab_size, d], 1.0);
        let blocks = (0..config.n_blocks)
            .map(|_| Block::random(&config, &mut rng))
            .collect();
        let lm_head = rng.normal_tensor(&[config.vocab_size, d], 1.0 / (d as f32).sqrt());
        Ok(Self {
            quant: vec![BlockQuant::default(); config.n_blocks],
            embed,
            blocks,
            final_norm: Tensor::full(&[d], 1.0),
            lm_head,
            sidecar: BTreeMap::new(),
            metadata: serde_json::Value::Null,
            config,
        })
    }

    /// Embedding rows for a token sequence.
    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Tensor> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            let t = t as usize;
            if t >= self.config.vocab_size {
                return Err(Error::Config(format!(
                    "token id {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            data.extend_from_slice(self.embed.row(t));
        }
        Tensor::from_vec(vec![tokens.len(), d], data)
    }

    /// Runs block `index` with this model's inference quantization.
    pub fn run_block(&self, index: usize, x: &Tensor, cache: Option<&mut KvCache>) -> Result<Tensor> {
        let mut hook = QuantHook::new(&self.quant[index]);
        let (out, _) = block_forward(&self.config, &self.blocks[index], x, cache, &mut hook)?;
        Ok(out)
    }

    pub fn head(&self, h: &Tensor) -> Result<Tensor> {
        let normed = block::rms_norm(h, &self.final_norm, self.config.norm_eps);
        matmul_nt(&normed, &self.lm_head)
    }

    /// Teacher-forced logits `[tokens × vocab]`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut h = self.embed_tokens(tokens)?;
        for i in 0..self.blocks.len() {
            h = self.run_block(i, &h, None)?;
        }
        self.head(&h)
    }

    /// Logits computed one token at a time through per-block KV caches.
    pub fn forward_incremental(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut caches: Vec<KvCache> = (0..self.blocks.len()).map(|_| KvCache::default()).collect();
        let mut rows = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let mut h = self.embed_tokens(&[t])?;
            for (i, cache) in caches.iter_mut().enumerate() {
                h = self.run_block(i, &h, Some(cache))?;
            }
            rows.push(self.head(&h)?);
        }
        Tensor::vstack(&rows)
    }

    pub fn is_architecturally_equal(&self, other: &Model) -> bool {
        self.config == other.config
    }

    pub fn clear_quant(&mut self) {
        self.quant = vec![BlockQuant::default(); self.blocks.len()];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::random(ModelConfig::toy(16, 8, 2, 2), 3).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::toy(16, 8, 3, 1);
        assert!(c.validate().is_err());
        c.n_heads = 4;
        assert!(c.validate().is_ok());
        c.n_heads = 8;
        assert!(c.validate().is_err(), "odd head dim");
    }

    #[test]
    fn linear_ids_round_trip() {
        for id in LinearId::ALL {
            assert_eq!(id.as_str().parse::<LinearId>().unwrap(), id);
        }
    }

    #[test]
    fn incremental_matches_full() {
        let m = tiny();
        let tokens = [1u32, 5, 2, 9, 9, 0, 15, 3];
        let full = m.forward(&tokens).unwrap();
        let inc = m.forward_incremental(&tokens).unwrap();
        for (a, b) in full.data().iter().zip(inc.data()) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn causal() {
        let m = tiny();
        let a = m.forward(&[1, 2, 3, 4, 5, 6]).unwrap();
        let b = m.forward(&[1, 2, 3, 9, 0, 11]).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn rejects_out_of_vocab() {
        assert!(tiny().forward(&[16]).is_err());
    }
}
