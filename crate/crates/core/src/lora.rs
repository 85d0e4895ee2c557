//! Low-rank adapters on the attention projections and the identity
//! fine-tune that fits them to the four views of one scene.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::diffusion::net::{DenoiserNet, Forward, Trainable, VIEWS};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Graph, Tensor};

/// `ΔW = scale · B · A` for one projection `W` of shape (d_out, d_in).
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// (rank, d_in)
    pub a: Tensor<f32>,
    /// (d_out, rank), zero at attach time.
    pub b: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraSet {
    pub rank: usize,
    pub scale: f64,
    pub adapters: BTreeMap<String, LoraAdapter>,
}

impl LoraSet {
    /// Fresh adapters on every attention projection of `net`; `B = 0`.
    pub fn new(net: &DenoiserNet, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("LoRA rank must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adapters = BTreeMap::new();
        for (name, d_out, d_in) in net.attention_projections() {
            if rank > d_out.min(d_in) {
                return Err(Error::InvalidArgument(format!(
                    "LoRA rank {rank} exceeds min({d_out}, {d_in}) of {name}"
                )));
            }
            let dist = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("finite std");
            let a: Vec<f32> = (0..rank * d_in).map(|_| dist.sample(&mut rng) as f32).collect();
            adapters.insert(
                name,
                LoraAdapter {
                    a: Tensor::new(&[rank, d_in], a)?,
                    b: Tensor::zeros(&[d_out, rank]),
                },
            );
        }
        Ok(LoraSet { rank, scale: alpha / rank as f64, adapters })
    }

    pub fn num_params(&self) -> usize {
        self.adapters.values().map(|a| a.a.len() + a.b.len()).sum()
    }

    /// True when every `B` is exactly zero, so the adapters are inert.
    pub fn is_identity(&self) -> bool {
        self.adapters.values().all(|a| a.b.data().iter().all(|&v| v == 0.0))
    }
}

/// A base network together with adapters; the base is never modified.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedNet {
    pub base: DenoiserNet,
    pub lora: LoraSet,
}

pub fn attach(net: DenoiserNet, rank: usize, seed: u64) -> Result<AdaptedNet> {
    let lora = LoraSet::new(&net, rank, rank as f64, seed)?;
    Ok(AdaptedNet { base: net, lora })
}

pub fn detach(adapted: AdaptedNet) -> (DenoiserNet, LoraSet) {
    (adapted.base, adapted.lora)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub rank: usize,
    /// Adapter scale numerator; the effective scale is alpha / rank.
    pub alpha: Option<f64>,
    pub views: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { learning_rate: 5e-4, steps: 300, rank: 16, alpha: None, views: 4, seed: 0 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("lora.learning_rate must be positive".into()));
        }
        if self.views != VIEWS {
            return Err(Error::ViewCount { expected: VIEWS, got: self.views });
        }
        Ok(())
    }
}

/// What the fine-tune loop reports after each step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneStep {
    pub step: usize,
    /// Timestep used for each view in this step.
    pub timesteps: Vec<usize>,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub lora: LoraSet,
    pub losses: Vec<f64>,
}

/// Mean squared noise-prediction error of `net` (with optional adapters) on
/// `z` noised to step `t` with the given `eps`.
pub fn identity_loss(
    net: &DenoiserNet,
    lora: Option<&LoraSet>,
    schedule: &NoiseSchedule,
    z: &Tensor<f32>,
    cams: &[CameraPose],
    t: usize,
    eps: &Tensor<f32>,
) -> Result<f64> {
    let x_t = noised(schedule, z, t, eps)?;
    let pred = net.predict(&x_t, t, cams, &mut Forward::with_adapters(lora))?;
    let n = pred.len() as f64;
    Ok(pred.data().iter().zip(eps.data()).map(|(&p, &e)| ((p - e) as f64).powi(2)).sum::<f64>() / n)
}

pub(crate) fn noised(schedule: &NoiseSchedule, z: &Tensor<f32>, t: usize, eps: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (a, b) = schedule.coefficients(t);
    z.zip_map(eps, |z, e| (a * z as f64 + b * e as f64) as f32)
}

pub(crate) fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Fits fresh adapters to the four views `z` ([4, 3, H, W], model range)
/// while the base network stays frozen. Every step draws one timestep shared
/// by all views and independent noise per view.
pub fn finetune_identity(
    net: &DenoiserNet,
    schedule: &NoiseSchedule,
    z: &Tensor<f32>,
    cams: &[CameraPose],
    cfg: &FinetuneConfig,
    mut hook: impl FnMut(&FinetuneStep),
) -> Result<FinetuneResult> {
    cfg.validate()?;
    let views = z.shape().first().copied().unwrap_or(0);
    if views != VIEWS || cams.len() != VIEWS {
        return Err(Error::ViewCount { expected: VIEWS, got: if views != VIEWS { views } else { cams.len() } });
    }
    let mut lora = LoraSet::new(net, cfg.rank, cfg.alpha.unwrap_or(cfg.rank as f64), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1a5a);
    let adam_cfg = AdamConfig::with_lr(cfg.learning_rate);
    let mut opt: BTreeMap<String, Adam> = BTreeMap::new();
    for (name, ad) in &lora.adapters {
        opt.insert(format!("lora.{name}.a"), Adam::new(adam_cfg, ad.a.len()));
        opt.insert(format!("lora.{name}.b"), Adam::new(adam_cfg, ad.b.len()));
    }
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let t = rng.random_range(1..=schedule.steps);
        let eps = gaussian_tensor(&mut rng, z.shape());
        let x_t = noised(schedule, z, t, &eps)?;
        let mut g = Graph::<f32>::new();
        let x = g.constant(x_t);
        let target = g.constant(eps);
        let mut fwd = Forward { adapters: Some(&lora), trainable: Trainable::Adapters, ..Default::default() };
        let out = net.forward(&mut g, x, t, cams, &mut fwd)?;
        let loss = g.mse(out.eps, target)?;
        let loss_value = g.value(loss).item()? as f64;
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteGradient { iteration: step });
        }
        let mut grads = g.backward(loss)?;
        for (name, ad) in lora.adapters.iter_mut() {
            for (suffix, tensor) in [("a", &mut ad.a), ("b", &mut ad.b)] {
                let key = format!("lora.{name}.{suffix}");
                let grad = grads.take(out.leaves[&key]).expect("adapter gradient");
                if !grad.all_finite() {
                    return Err(Error::NonFiniteGradient { iteration: step });
                }
                opt.get_mut(&key).expect("optimizer").step(tensor.data_mut(), grad.data());
            }
        }
        losses.push(loss_value);
        hook(&FinetuneStep { step, timesteps: vec![t; VIEWS], loss: loss_value });
    }
    Ok(FinetuneResult { lora, losses })
}
