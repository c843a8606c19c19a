//! `.lrqm` tensor container.
//!
//! ```text
//! "LRQM" | version: u32 LE | header_len: u64 LE | header JSON (UTF-8)
//! zero padding to a 64-byte boundary
//! payload: little-endian f32 tensors, each starting on a 64-byte boundary
//! ```
//!
//! Header offsets are relative to the start of the payload. Tensors are
//! written in name order and the header is serialized with sorted keys, so
//! identical models produce identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrq::{FlexParams, LrqParams, RoundVariant, WeightParams};
use crate::quant::{QParams, RangeStats};
use crate::tensor::Tensor;

use super::hooks::{ActQuant, ActSite, BlockQuant};
use super::{Block, LinearId, Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"LRQM";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, TensorEntry>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes tensors in the given order.
pub fn encode_container(metadata: &serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut entries = BTreeMap::new();
    let mut cursor = 0usize;
    for (name, t) in tensors {
        let nbytes = t.len() * 4;
        if entries
            .insert(
                name.clone(),
                TensorEntry {
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset: cursor as u64,
                    nbytes: nbytes as u64,
                },
            )
            .is_some()
        {
            return Err(Error::format(name.clone(), "duplicate tensor name"));
        }
        cursor = align_up(cursor + nbytes);
    }
    let header = serde_json::to_vec(&Header {
        metadata: metadata.clone(),
        tensors: entries,
    })?;
    let payload_start = align_up(4 + 4 + 8 + header.len());
    let mut out = Vec::with_capacity(payload_start + cursor);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.resize(payload_start, 0);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.resize(payload_start + align_up(out.len() - payload_start), 0);
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<(serde_json::Value, BTreeMap<String, Tensor>)> {
    if bytes.len() < 16 {
        return Err(Error::format("magic", "file shorter than the fixed preamble"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format("magic", "expected \"LRQM\""));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format("header_len", "header runs past end of file"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::format("header", e.to_string()))?;
    let payload_start = align_up(header_end);
    let payload = bytes.get(payload_start..).unwrap_or(&[]);

    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    let mut tensors = BTreeMap::new();
    for (name, e) in &header.tensors {
        if e.dtype != "f32" {
            return Err(Error::format(format!("{name}.dtype"), format!("unsupported dtype {}", e.dtype)));
        }
        let count: usize = e.shape.iter().product();
        if e.nbytes != (count * 4) as u64 {
            return Err(Error::format(format!("{name}.nbytes"), "does not match shape"));
        }
        if e.offset % ALIGN as u64 != 0 {
            return Err(Error::format(format!("{name}.offset"), "not 64-byte aligned"));
        }
        let end = e
            .offset
            .checked_add(e.nbytes)
            .filter(|&end| end <= payload.len() as u64)
            .ok_or_else(|| Error::format(format!("{name}.offset"), "tensor extends past payload"))?;
        spans.push((e.offset, end, name));
        let raw = &payload[e.offset as usize..end as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name.clone(), Tensor::from_vec(e.shape.clone(), data)?);
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 && w[1].1 > w[1].0 {
            return Err(Error::format(
                format!("{}.offset", w[1].2),
                format!("overlaps `{}`", w[0].2),
            ));
        }
    }
    Ok((header.metadata, tensors))
}

fn bq_name(i: usize, rest: &str) -> String {
    format!("blocks.{i}.{rest}")
}

fn qparams_tensors(prefix: &str, s1: &QParams, out: &mut Vec<(String, Tensor)>) {
    out.push((format!("{prefix}.s1_step"), Tensor::from_vec(vec![s1.len()], s1.step.clone()).expect("len")));
    out.push((
        format!("{prefix}.s1_zero_point"),
        Tensor::from_vec(vec![s1.len()], s1.zero_point.iter().map(|&z| z as f32).collect()).expect("len"),
    ));
}

/// Sidecar tensors describing learned rounding parameters of one layer.
pub fn weight_params_tensors(prefix: &str, p: &WeightParams) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    qparams_tensors(prefix, p.s1(), &mut out);
    match p {
        WeightParams::Rtn { .. } => {}
        WeightParams::Flex(f) => out.push((format!("{prefix}.s2"), f.s2.clone())),
        WeightParams::Lrq(l) => {
            out.push((format!("{prefix}.l2"), l.l2.clone()));
            out.push((format!("{prefix}.u2"), l.u2.clone()));
            if l.with_bias {
                out.push((format!("{prefix}.r2"), l.r2.clone()));
                out.push((format!("{prefix}.c2"), l.c2.clone()));
            }
        }
    }
    out
}

/// Inverse of [`weight_params_tensors`].
pub fn weight_params_from_tensors(
    prefix: &str,
    variant: RoundVariant,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<WeightParams> {
    let get = |k: &str| {
        tensors
            .get(&format!("{prefix}.{k}"))
            .cloned()
            .ok_or_else(|| Error::format(format!("{prefix}.{k}"), "missing sidecar tensor"))
    };
    let step = get("s1_step")?.into_data();
    let zero_point = get("s1_zero_point")?.data().iter().map(|&z| z as i32).collect();
    let s1 = QParams {
        step,
        zero_point,
        axis: Some(0),
    };
    Ok(match variant {
        RoundVariant::Rtn => WeightParams::Rtn { s1 },
        RoundVariant::FlexRound => WeightParams::Flex(FlexParams { s1, s2: get("s2")? }),
        RoundVariant::Lrq | RoundVariant::LrqNoBias => {
            let l2 = get("l2")?;
            let u2 = get("u2")?;
            let with_bias = variant == RoundVariant::Lrq;
            let (r2, c2) = if with_bias {
                (get("r2")?, get("c2")?)
            } else {
                (Tensor::zeros(&[l2.rows(), 1]), Tensor::zeros(&[1, u2.cols()]))
            };
            WeightParams::Lrq(LrqParams {
                s1,
                rank: l2.cols(),
                l2,
                u2,
                r2,
                c2,
                with_bias,
            })
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantMeta {
    act: String,
    act_bits: Option<u32>,
    kv_bits: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    config: ModelConfig,
    quant: Vec<QuantMeta>,
    info: serde_json::Value,
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let mut owned: Vec<(String, Tensor)> = vec![
        ("embed".into(), model.embed.clone()),
        ("final_norm".into(), model.final_norm.clone()),
        ("lm_head".into(), model.lm_head.clone()),
    ];
    let mut quant = Vec::with_capacity(model.blocks.len());
    for (i, b) in model.blocks.iter().enumerate() {
        owned.push((bq_name(i, "attn_norm"), b.attn_norm.clone()));
        owned.push((bq_name(i, "ffn_norm"), b.ffn_norm.clone()));
        for id in LinearId::ALL {
            owned.push((bq_name(i, id.as_str()), b.linear(id).clone()));
        }
        let q = model.quant.get(i).cloned().unwrap_or_default();
        let (act, act_bits) = match &q.act {
            ActQuant::Off => ("off".to_string(), None),
            ActQuant::PerToken { bits } => ("per_token".to_string(), Some(*bits)),
            ActQuant::PerTensorStatic { bits, ranges } => {
                for (site, r) in ranges {
                    owned.push((
                        bq_name(i, &format!("act.{site}.min")),
                        Tensor::from_vec(vec![r.min.len()], r.min.clone())?,
                    ));
                    owned.push((
                        bq_name(i, &format!("act.{site}.max")),
                        Tensor::from_vec(vec![r.max.len()], r.max.clone())?,
                    ));
                }
                ("per_tensor_static".to_string(), Some(*bits))
            }
        };
        quant.push(QuantMeta {
            act,
            act_bits,
            kv_bits: q.kv_bits,
        });
    }
    for (k, t) in &model.sidecar {
        owned.push((k.clone(), t.clone()));
    }
    owned.sort_by(|a, b| a.0.cmp(&b.0));
    let meta = serde_json::to_value(ModelMeta {
        config: model.config.clone(),
        quant,
        info: model.metadata.clone(),
    })?;
    let refs: Vec<(String, &Tensor)> = owned.iter().map(|(k, t)| (k.clone(), t)).collect();
    encode_container(&meta, &refs)
}

fn take(tensors: &mut BTreeMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| Error::format(name, "missing tensor"))?;
    if t.shape() != shape {
        return Err(Error::format(name, format!("shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let (meta, mut tensors) = decode_container(bytes)?;
    let meta: ModelMeta =
        serde_json::from_value(meta).map_err(|e| Error::format("metadata", e.to_string()))?;
    let cfg = meta.config;
    cfg.validate()
        .map_err(|e| Error::format("metadata.config", e.to_string()))?;
    let (v, d, ff) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
    let embed = take(&mut tensors, "embed", &[v, d])?;
    let final_norm = take(&mut tensors, "final_norm", &[d])?;
    let lm_head = take(&mut tensors, "lm_head", &[v, d])?;
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    let mut quant = Vec::with_capacity(cfg.n_blocks);
    if meta.quant.len() != cfg.n_blocks {
        return Err(Error::format("metadata.quant", "one entry per block required"));
    }
    for i in 0..cfg.n_blocks {
        let shapes = [[d, d], [d, d], [d, d], [d, d], [ff, d], [ff, d], [d, ff]];
        let mut lin = Vec::with_capacity(7);
        for (id, shape) in LinearId::ALL.iter().zip(shapes) {
            lin.push(take(&mut tensors, &bq_name(i, id.as_str()), &shape)?);
        }
        blocks.push(Block {
            attn_norm: take(&mut tensors, &bq_name(i, "attn_norm"), &[d])?,
            ffn_norm: take(&mut tensors, &bq_name(i, "ffn_norm"), &[d])?,
            linears: lin.try_into().expect("seven layers"),
        });
        let qm = &meta.quant[i];
        let act = match (qm.act.as_str(), qm.act_bits) {
            ("off", _) => ActQuant::Off,
            ("per_token", Some(bits)) => ActQuant::PerToken { bits },
            ("per_tensor_static", Some(bits)) => {
                let mut ranges = BTreeMap::new();
                for site in ActSite::ACTIVATION {
                    let lo = tensors.remove(&bq_name(i, &format!("act.{site}.min")));
                    let hi = tensors.remove(&bq_name(i, &format!("act.{site}.max")));
                    if let (Some(lo), Some(hi)) = (lo, hi) {
                        ranges.insert(
                            site,
                            RangeStats {
                                min: lo.into_data(),
                                max: hi.into_data(),
                                sample_count: 1,
                            },
                        );
                    }
                }
                ActQuant::PerTensorStatic { bits, ranges }
            }
            (other, _) => {
                return Err(Error::format(
                    format!("metadata.quant[{i}].act"),
                    format!("unknown or incomplete mode `{other}`"),
                ))
            }
        };
        quant.push(BlockQuant {
            act,
            kv_bits: qm.kv_bits,
        });
    }
    Ok(Model {
        config: cfg,
        embed,
        blocks,
        final_norm,
        lm_head,
        quant,
        sidecar: tensors,
        metadata: meta.info,
    })
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn model() -> Model {
        let mut m = Model::random(ModelConfig::toy(12, 8, 2, 2), 4).unwrap();
        let mut ranges = BTreeMap::new();
        ranges.insert(
            ActSite::AttnIn,
            RangeStats {
                min: vec![-1.0],
                max: vec![2.0],
                sample_count: 3,
            },
        );
        m.quant[1] = BlockQuant {
            act: ActQuant::PerTensorStatic { bits: 8, ranges },
            kv_bits: Some(8),
        };
        m.quant[0].act = ActQuant::PerToken { bits: 6 };
        m.metadata = serde_json::json!({"note": "test"});
        m
    }

    fn clear_counts(m: &mut Model) {
        for q in &mut m.quant {
            if let ActQuant::PerTensorStatic { ranges, .. } = &mut q.act {
                for r in ranges.values_mut() {
                    r.sample_count = 1;
                }
            }
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = model();
        let mut rng = Rng::new(1);
        let w = m.blocks[0].linear(LinearId::Wq).clone();
        let p = WeightParams::init(&w, 4, RoundVariant::Lrq, 2, &mut rng, 0.01).unwrap();
        for (k, t) in weight_params_tensors("blocks.0.wq.lrq", &p) {
            m.sidecar.insert(k, t);
        }
        let bytes = encode_model(&m).unwrap();
        let back = decode_model(&bytes).unwrap();
        clear_counts(&mut m);
        assert_eq!(back, m);
        let p2 = weight_params_from_tensors("blocks.0.wq.lrq", RoundVariant::Lrq, &back.sidecar).unwrap();
        assert_eq!(p2, p);
        assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn payload_is_aligned() {
        let bytes = encode_model(&model()).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[..4], MAGIC);
        let header: Header = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        for e in header.tensors.values() {
            assert_eq!(e.offset % 64, 0);
        }
        assert_eq!((bytes.len() - align_up(16 + header_len)) % 64, 0);
    }

    fn rewrite_header(bytes: &[u8], f: impl FnOnce(&mut Header)) -> Vec<u8> {
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        let payload = bytes[align_up(16 + header_len)..].to_vec();
        f(&mut header);
        let hb = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(hb.len() as u64).to_le_bytes());
        out.extend_from_slice(&hb);
        out.resize(align_up(out.len()), 0);
        out.extend_from_slice(&payload);
        out
    }

    #[test]
    fn out_of_bounds_offset_is_format_error() {
        let bytes = encode_model(&model()).unwrap();
        let bad = rewrite_header(&bytes, |h| {
            h.tensors.get_mut("embed").unwrap().offset = 1 << 30;
        });
        match decode_model(&bad) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "embed.offset"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overlapping_offsets_are_format_error() {
        let bytes = encode_model(&model()).unwrap();
        let bad = rewrite_header(&bytes, |h| {
            let off = h.tensors["embed"].offset;
            h.tensors.get_mut("lm_head").unwrap().offset = off;
        });
        assert!(matches!(decode_model(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_and_malformed() {
        let bytes = encode_model(&model()).unwrap();
        assert!(matches!(decode_model(&bytes[..bytes.len() - 64]), Err(Error::Format { .. })));
        assert!(matches!(decode_model(&bytes[..10]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Format { field, .. }) if field == "magic"));
        let mut bad = bytes.clone();
        bad[20] = b'#';
        assert!(matches!(decode_model(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn physical_order_does_not_matter() {
        let mut rng = Rng::new(9);
        let named: Vec<(String, Tensor)> = (0..6)
            .map(|i| (format!("t{i}"), rng.normal_tensor(&[i + 1, 3], 1.0)))
            .collect();
        let meta = serde_json::json!({});
        let forward: Vec<(String, &Tensor)> = named.iter().map(|(k, t)| (k.clone(), t)).collect();
        let mut reversed = forward.clone();
        reversed.reverse();
        reversed.swap(1, 4);
        let (_, a) = decode_container(&encode_container(&meta, &forward).unwrap()).unwrap();
        let (_, b) = decode_container(&encode_container(&meta, &reversed).unwrap()).unwrap();
        assert_eq!(a, b);
        for (k, t) in &named {
            assert_eq!(&a[k], t);
        }
    }
}
