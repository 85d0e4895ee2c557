//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, a JSON header
//! (kind, configs, tensor index), then little-endian f32 tensor data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::net::{DenoiserNet, NetConfig};
use crate::diffusion::schedule::{make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraSet};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"DSPLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Base,
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    net: NetConfig,
    schedule: Option<ScheduleSpec>,
    lora_rank: Option<usize>,
    lora_scale: Option<f64>,
    tensors: Vec<TensorEntry>,
}

fn encode(header_base: Header, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<Vec<u8>> {
    let mut header = header_base;
    let mut offset = 0;
    header.tensors = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
            offset += t.len() * 4;
            e
        })
        .collect();
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json);
    for t in tensors.values() {
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Header, BTreeMap<String, Tensor<f32>>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body_start])?;
    let body = &bytes[body_start..];
    let mut tensors = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 4;
        if end > body.len() {
            return Err(Error::Checkpoint(format!("tensor {} runs past end of file", e.name)));
        }
        let data = body[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(e.name.clone(), Tensor::new(&e.shape, data)?);
    }
    Ok((header, tensors))
}

pub fn encode_net(net: &DenoiserNet, schedule: &NoiseSchedule) -> Result<Vec<u8>> {
    let header = Header {
        kind: CheckpointKind::Base,
        net: net.config().clone(),
        schedule: Some(ScheduleSpec {
            steps: schedule.steps,
            beta_start: schedule.beta_start,
            beta_end: schedule.beta_end,
        }),
        lora_rank: None,
        lora_scale: None,
        tensors: Vec::new(),
    };
    encode(header, net.params())
}

pub fn decode_net(bytes: &[u8]) -> Result<(DenoiserNet, NoiseSchedule)> {
    let (header, tensors) = decode(bytes)?;
    if header.kind != CheckpointKind::Base {
        return Err(Error::Checkpoint("expected a base network checkpoint, found adapters".into()));
    }
    let s = header.schedule.ok_or_else(|| Error::Checkpoint("base checkpoint without schedule".into()))?;
    let schedule = make_schedule(s.steps, s.beta_start, s.beta_end)?;
    Ok((DenoiserNet::from_params(header.net, tensors)?, schedule))
}

pub fn encode_lora(lora: &LoraSet, net: &NetConfig) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    for (name, ad) in &lora.adapters {
        tensors.insert(format!("{name}.lora_a"), ad.a.clone());
        tensors.insert(format!("{name}.lora_b"), ad.b.clone());
    }
    let header = Header {
        kind: CheckpointKind::Adapter,
        net: net.clone(),
        schedule: None,
        lora_rank: Some(lora.rank),
        lora_scale: Some(lora.scale),
        tensors: Vec::new(),
    };
    encode(header, &tensors)
}

/// Adapters plus the config of the network they were trained for.
pub fn decode_lora(bytes: &[u8]) -> Result<(LoraSet, NetConfig)> {
    let (header, mut tensors) = decode(bytes)?;
    if header.kind != CheckpointKind::Adapter {
        return Err(Error::Checkpoint("expected an adapter checkpoint".into()));
    }
    let rank = header.lora_rank.ok_or_else(|| Error::Checkpoint("adapter checkpoint without rank".into()))?;
    let scale = header.lora_scale.ok_or_else(|| Error::Checkpoint("adapter checkpoint without scale".into()))?;
    let names: Vec<String> = tensors
        .keys()
        .filter_map(|k| k.strip_suffix(".lora_a").map(str::to_string))
        .collect();
    let mut adapters = BTreeMap::new();
    for name in names {
        let a = tensors.remove(&format!("{name}.lora_a")).expect("listed");
        let b = tensors
            .remove(&format!("{name}.lora_b"))
            .ok_or_else(|| Error::Checkpoint(format!("adapter {name} lacks its B matrix")))?;
        adapters.insert(name, LoraAdapter { a, b });
    }
    Ok((LoraSet { rank, scale, adapters }, header.net))
}

pub fn save_net(net: &DenoiserNet, schedule: &NoiseSchedule, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_net(net, schedule)?)?;
    Ok(())
}

pub fn load_net(path: impl AsRef<Path>) -> Result<(DenoiserNet, NoiseSchedule)> {
    decode_net(&fs::read(path)?)
}

pub fn save_lora(lora: &LoraSet, net: &NetConfig, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_lora(lora, net)?)?;
    Ok(())
}

pub fn load_lora(path: impl AsRef<Path>) -> Result<(LoraSet, NetConfig)> {
    decode_lora(&fs::read(path)?)
}
