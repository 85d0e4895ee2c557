//! Toy multi-view noise predictor.
//!
//! A three-level convolutional encoder/decoder over four views at once. Each
//! attention block flattens all four views into one token sequence, so every
//! pixel attends to every pixel of every view. Conditioning is a sinusoidal
//! timestep embedding plus a perceptron over the flattened camera extrinsics.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::numerics::{Element, Graph, Tensor, Var};

pub const VIEWS: usize = 4;
/// Attention blocks in forward order.
pub const ATTENTION_LAYERS: [&str; 5] = ["enc1", "enc2", "mid", "dec2", "dec1"];
pub const PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Channel widths at 1/2, 1/4 and 1/8 resolution.
    pub channels: [usize; 3],
    pub time_dim: usize,
    pub emb_dim: usize,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { channels: [16, 32, 64], time_dim: 32, emb_dim: 64, init_seed: 0 }
    }
}

enum Init {
    Zero,
    Normal(f64),
}

fn param_specs(cfg: &NetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let [c0, c1, c2] = cfg.channels;
    let (td, ed) = (cfg.time_dim, cfg.emb_dim);
    let mut specs = Vec::new();
    let linear = |specs: &mut Vec<_>, name: &str, i: usize, o: usize| {
        specs.push((format!("{name}.w"), vec![i, o], Init::Normal(1.0 / (i as f64).sqrt())));
        specs.push((format!("{name}.b"), vec![o], Init::Zero));
    };
    linear(&mut specs, "time.l1", td, ed);
    linear(&mut specs, "time.l2", ed, ed);
    linear(&mut specs, "cam.l1", 16, ed);
    linear(&mut specs, "cam.l2", ed, ed);
    fn conv(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, ci: usize, co: usize, k: usize, gain: f64) {
        specs.push((format!("{name}.w"), vec![co, ci, k, k], Init::Normal(gain / ((ci * k * k) as f64).sqrt())));
        specs.push((format!("{name}.b"), vec![co], Init::Zero));
    }
    fn res(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, ci: usize, co: usize, ed: usize) {
        conv(specs, &format!("{name}.c1"), ci, co, 3, 1.0);
        specs.push((format!("{name}.emb.w"), vec![ed, co], Init::Normal(1.0 / (ed as f64).sqrt())));
        specs.push((format!("{name}.emb.b"), vec![co], Init::Zero));
        conv(specs, &format!("{name}.c2"), co, co, 3, 0.5);
        if ci != co {
            specs.push((format!("{name}.skip.w"), vec![co, ci, 1, 1], Init::Normal(1.0 / (ci as f64).sqrt())));
        }
    }
    fn attn(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize) {
        for p in PROJECTIONS {
            let gain = if p == "o" { 0.5 } else { 1.0 };
            specs.push((format!("{name}.attn.{p}"), vec![d, d], Init::Normal(gain / (d as f64).sqrt())));
        }
    }
    conv(&mut specs, "stem", 3, c0, 3, 1.0);
    conv(&mut specs, "down1", c0, c0, 3, 1.0);
    res(&mut specs, "enc1.res", c0, c0, ed);
    attn(&mut specs, "enc1", c0);
    conv(&mut specs, "down2", c0, c1, 3, 1.0);
    res(&mut specs, "enc2.res", c1, c1, ed);
    attn(&mut specs, "enc2", c1);
    conv(&mut specs, "down3", c1, c2, 3, 1.0);
    res(&mut specs, "mid.res", c2, c2, ed);
    attn(&mut specs, "mid", c2);
    conv(&mut specs, "up2", c2, c1, 3, 1.0);
    res(&mut specs, "dec2.res", 2 * c1, c1, ed);
    attn(&mut specs, "dec2", c1);
    conv(&mut specs, "up1", c1, c0, 3, 1.0);
    res(&mut specs, "dec1.res", 2 * c0, c0, ed);
    attn(&mut specs, "dec1", c0);
    conv(&mut specs, "up0", c0, c0, 3, 1.0);
    res(&mut specs, "dec0.res", 2 * c0, c0, ed);
    conv(&mut specs, "out", c0, 3, 3, 0.5);
    specs
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    config: NetConfig,
    params: BTreeMap<String, Tensor<f32>>,
}

/// Which leaves of a forward pass should report gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapters,
}

/// Attention keys and values per layer index, for KV replacement.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCache<T> {
    pub layers: BTreeMap<usize, (Tensor<T>, Tensor<T>)>,
}

pub enum KvMode<'a, T> {
    Off,
    /// Store K/V of layers with index >= `from_layer`.
    Record { from_layer: usize, store: &'a mut KvCache<T> },
    /// Use stored K/V in layers with index >= `from_layer`.
    Replace { from_layer: usize, store: &'a KvCache<T> },
}

pub struct Forward<'a, T> {
    pub adapters: Option<&'a LoraSet>,
    pub trainable: Trainable,
    pub kv: KvMode<'a, T>,
    /// Drop the camera embedding from the conditioning.
    pub zero_camera: bool,
    /// Receives each attention matrix in layer order.
    pub attention_probe: Option<&'a mut Vec<Tensor<T>>>,
}

impl<T> Default for Forward<'_, T> {
    fn default() -> Self {
        Forward { adapters: None, trainable: Trainable::Nothing, kv: KvMode::Off, zero_camera: false, attention_probe: None }
    }
}

impl<'a, T> Forward<'a, T> {
    pub fn with_adapters(adapters: Option<&'a LoraSet>) -> Self {
        Forward { adapters, ..Default::default() }
    }
}

pub struct NetOutput {
    /// Predicted noise, [4, 3, H, W].
    pub eps: Var,
    /// Second-to-last decoder block output, [4, C0, H/2, W/2].
    pub feature: Var,
    /// Leaf handle of every parameter and adapter used, by name.
    pub leaves: BTreeMap<String, Var>,
}

/// First attention layer index whose K/V are shared for a given fraction.
pub fn kv_first_layer(fraction: f64) -> usize {
    let l = ATTENTION_LAYERS.len() as f64;
    ((fraction * l) - 1e-9).ceil().max(0.0) as usize
}

pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

impl DenoiserNet {
    pub fn new(config: NetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let params = param_specs(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zero => vec![0.0f32; n],
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("finite std");
                        (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
                    }
                };
                (name, Tensor::new(&shape, data).expect("spec shape"))
            })
            .collect();
        DenoiserNet { config, params }
    }

    /// Rebuilds a net from named tensors, checking them against the config.
    pub fn from_params(config: NetConfig, params: BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, got {}", specs.len(), params.len())));
        }
        for (name, shape, _) in &specs {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!("tensor {name}: shape {:?}, expected {shape:?}", t.shape())))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        Ok(DenoiserNet { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<f32>> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Names and (d_out, d_in) of every attention projection.
    pub fn attention_projections(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for layer in ATTENTION_LAYERS {
            for p in PROJECTIONS {
                let name = format!("{layer}.attn.{p}");
                let s = self.params[&name].shape();
                out.push((name, s[0], s[1]));
            }
        }
        out
    }

    /// Records one forward pass on `g`. `x` is [4, 3, H, W] with H and W
    /// divisible by 8.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        t: usize,
        cams: &[CameraPose],
        fwd: &mut Forward<'_, T>,
    ) -> Result<NetOutput> {
        let s = g.shape(x).to_vec();
        if cams.len() != VIEWS {
            return Err(Error::ViewCount { expected: VIEWS, got: cams.len() });
        }
        if s.len() != 4 || s[0] != VIEWS || s[1] != 3 || s[2] % 8 != 0 || s[3] % 8 != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::Shape(format!("expected [4,3,H,W] with H, W multiples of 8, got {s:?}")));
        }
        let mut b = Builder { net: self, g, fwd, leaves: BTreeMap::new(), attn_index: 0 };

        let temb: Vec<f64> = (0..VIEWS).flat_map(|_| timestep_embedding(t as f64, self.config.time_dim)).collect();
        let temb = b.g.constant(Tensor::from_f64(&[VIEWS, self.config.time_dim], &temb)?);
        let h = b.linear(temb, "time.l1")?;
        let h = b.g.silu(h);
        let mut cond = b.linear(h, "time.l2")?;
        if !b.fwd.zero_camera {
            let ext: Vec<f64> = cams.iter().flat_map(|c| c.extrinsics_flat()).collect();
            let ext = b.g.constant(Tensor::from_f64(&[VIEWS, 16], &ext)?);
            let h = b.linear(ext, "cam.l1")?;
            let h = b.g.silu(h);
            let c = b.linear(h, "cam.l2")?;
            cond = b.g.add(cond, c)?;
        }
        let cond = b.g.silu(cond);

        let h0 = b.conv(x, "stem", 1, 1)?;
        let h = b.conv(h0, "down1", 2, 1)?;
        let h = b.res(h, cond, "enc1.res")?;
        let e1 = b.attention(h, "enc1")?;
        let h = b.conv(e1, "down2", 2, 1)?;
        let h = b.res(h, cond, "enc2.res")?;
        let e2 = b.attention(h, "enc2")?;
        let h = b.conv(e2, "down3", 2, 1)?;
        let h = b.res(h, cond, "mid.res")?;
        let m = b.attention(h, "mid")?;

        let h = b.g.upsample_nearest2(m)?;
        let h = b.conv(h, "up2", 1, 1)?;
        let h = b.g.concat(&[h, e2], 1)?;
        let h = b.res(h, cond, "dec2.res")?;
        let d2 = b.attention(h, "dec2")?;
        let h = b.g.upsample_nearest2(d2)?;
        let h = b.conv(h, "up1", 1, 1)?;
        let h = b.g.concat(&[h, e1], 1)?;
        let h = b.res(h, cond, "dec1.res")?;
        let feature = b.attention(h, "dec1")?;
        let h = b.g.upsample_nearest2(feature)?;
        let h = b.conv(h, "up0", 1, 1)?;
        let h = b.g.concat(&[h, h0], 1)?;
        let h = b.res(h, cond, "dec0.res")?;
        let h = b.g.silu(h);
        let eps = b.conv(h, "out", 1, 1)?;
        Ok(NetOutput { eps, feature, leaves: b.leaves })
    }

    /// Noise prediction without gradients.
    pub fn predict<T: Element>(
        &self,
        x: &Tensor<T>,
        t: usize,
        cams: &[CameraPose],
        fwd: &mut Forward<'_, T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, t, cams, fwd)?;
        Ok(g.value(out.eps).clone())
    }
}

struct Builder<'n, 'g, 'f, 'a, T: Element> {
    net: &'n DenoiserNet,
    g: &'g mut Graph<T>,
    fwd: &'f mut Forward<'a, T>,
    leaves: BTreeMap<String, Var>,
    attn_index: usize,
}

impl<T: Element> Builder<'_, '_, '_, '_, T> {
    fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let t = self
            .net
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?
            .cast::<T>();
        let v = if self.fwd.trainable == Trainable::Base { self.g.param(t) } else { self.g.constant(t) };
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add(y, b)
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.g.conv2d(x, w, Some(b), stride, pad)
    }

    fn res(&mut self, x: Var, cond: Var, name: &str) -> Result<Var> {
        let a = self.g.silu(x);
        let h = self.conv(a, &format!("{name}.c1"), 1, 1)?;
        let e = self.linear(cond, &format!("{name}.emb"))?;
        let h = self.g.add_channel(h, e)?;
        let h = self.g.silu(h);
        let h = self.conv(h, &format!("{name}.c2"), 1, 1)?;
        let skip_name = format!("{name}.skip.w");
        let skip = if self.net.params.contains_key(&skip_name) {
            let w = self.p(&skip_name)?;
            self.g.conv2d(x, w, None, 1, 0)?
        } else {
            x
        };
        self.g.add(skip, h)
    }

    /// Projection weight with any attached low-rank update folded in.
    fn projection(&mut self, name: &str) -> Result<Var> {
        let w = self.p(name)?;
        let Some(set) = self.fwd.adapters else { return Ok(w) };
        let Some(ad) = set.adapters.get(name) else { return Ok(w) };
        let train = self.fwd.trainable == Trainable::Adapters;
        let leaf = |g: &mut Graph<T>, t: &Tensor<f32>| if train { g.param(t.cast()) } else { g.constant(t.cast()) };
        let a = leaf(self.g, &ad.a);
        let b = leaf(self.g, &ad.b);
        self.leaves.insert(format!("lora.{name}.a"), a);
        self.leaves.insert(format!("lora.{name}.b"), b);
        let ba = self.g.matmul(b, a)?;
        let ba = self.g.scale(ba, set.scale);
        self.g.add(w, ba)
    }

    fn attention(&mut self, x: Var, name: &str) -> Result<Var> {
        let layer = self.attn_index;
        self.attn_index += 1;
        let s = self.g.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let tokens = self.g.permute(x, &[0, 2, 3, 1])?;
        let tokens = self.g.reshape(tokens, &[n * h * w, c])?;
        let wq = self.projection(&format!("{name}.attn.q"))?;
        let wk = self.projection(&format!("{name}.attn.k"))?;
        let wv = self.projection(&format!("{name}.attn.v"))?;
        let wo = self.projection(&format!("{name}.attn.o"))?;
        let q = self.g.matmul_nt(tokens, wq)?;
        let (mut k, mut v) = (None, None);
        match &mut self.fwd.kv {
            KvMode::Replace { from_layer, store } if layer >= *from_layer => {
                let (ks, vs) = store
                    .layers
                    .get(&layer)
                    .ok_or_else(|| Error::InvalidArgument(format!("no stored keys/values for attention layer {layer}")))?;
                if ks.shape() != [n * h * w, c] || vs.shape() != [n * h * w, c] {
                    return Err(Error::Shape(format!("stored keys {:?} do not fit layer {layer}", ks.shape())));
                }
                k = Some(self.g.constant(ks.clone()));
                v = Some(self.g.constant(vs.clone()));
            }
            _ => {}
        }
        let k = match k {
            Some(k) => k,
            None => self.g.matmul_nt(tokens, wk)?,
        };
        let v = match v {
            Some(v) => v,
            None => self.g.matmul_nt(tokens, wv)?,
        };
        if let KvMode::Record { from_layer, store } = &mut self.fwd.kv {
            if layer >= *from_layer {
                store.layers.insert(layer, (self.g.value(k).clone(), self.g.value(v).clone()));
            }
        }
        let scores = self.g.matmul_nt(q, k)?;
        let scores = self.g.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = self.g.softmax(scores)?;
        if let Some(probe) = self.fwd.attention_probe.as_deref_mut() {
            probe.push(self.g.value(attn).clone());
        }
        let o = self.g.matmul(attn, v)?;
        let o = self.g.matmul_nt(o, wo)?;
        let out = self.g.add(tokens, o)?;
        let out = self.g.reshape(out, &[n, h, w, c])?;
        self.g.permute(out, &[0, 3, 1, 2])
    }
}
