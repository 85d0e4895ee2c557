//! Multi-view denoising pretraining on rendered scenes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::diffusion::net::{DenoiserNet, Forward, Trainable, VIEWS};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::lora::{gaussian_tensor, noised};
use crate::numerics::{Adam, AdamConfig, Graph, Tensor};

/// Four views of one scene in model range, with their cameras.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    /// [4, 3, H, W]
    pub views: Tensor<f32>,
    pub cams: Vec<CameraPose>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 3000, learning_rate: 1e-3, clip_norm: 1.0, seed: 0 }
    }
}

/// Trains every base parameter on `L = E‖ε − ε_θ(√ᾱ_t x + √(1−ᾱ_t) ε, t, c)‖²`
/// with one scene (all four views, one shared t) per step. Returns the loss
/// of every step.
pub fn pretrain_mv(
    net: &mut DenoiserNet,
    schedule: &NoiseSchedule,
    data: &[TrainSample],
    cfg: &TrainConfig,
    mut hook: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for s in data {
        if s.cams.len() != VIEWS || s.views.shape().first() != Some(&VIEWS) {
            return Err(Error::ViewCount { expected: VIEWS, got: s.cams.len() });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt: BTreeMap<String, Adam> = net
        .params()
        .iter()
        .map(|(k, v)| (k.clone(), Adam::new(AdamConfig::with_lr(cfg.learning_rate), v.len())))
        .collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let sample = &data[rng.random_range(0..data.len())];
        let t = rng.random_range(1..=schedule.steps);
        let eps = gaussian_tensor(&mut rng, sample.views.shape());
        let x_t = noised(schedule, &sample.views, t, &eps)?;
        let mut g = Graph::<f32>::new();
        let x = g.constant(x_t);
        let target = g.constant(eps);
        let mut fwd = Forward { trainable: Trainable::Base, ..Default::default() };
        let out = net.forward(&mut g, x, t, &sample.cams, &mut fwd)?;
        let loss = g.mse(out.eps, target)?;
        let value = g.value(loss).item()? as f64;
        let mut grads = g.backward(loss)?;
        let mut named: Vec<(String, Tensor<f32>)> = Vec::with_capacity(out.leaves.len());
        let mut norm2 = 0.0f64;
        for (name, var) in &out.leaves {
            let grad = grads.take(*var).expect("parameter gradient");
            norm2 += grad.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            named.push((name.clone(), grad));
        }
        if !value.is_finite() || !norm2.is_finite() {
            return Err(Error::NonFiniteGradient { iteration: step });
        }
        let factor = if cfg.clip_norm > 0.0 && norm2.sqrt() > cfg.clip_norm { cfg.clip_norm / norm2.sqrt() } else { 1.0 };
        for (name, mut grad) in named {
            if factor != 1.0 {
                grad.data_mut().iter_mut().for_each(|v| *v = (*v as f64 * factor) as f32);
            }
            let p = net.params_mut().get_mut(&name).expect("parameter");
            opt.get_mut(&name).expect("optimizer").step(p.data_mut(), grad.data());
        }
        losses.push(value);
        hook(step, value);
    }
    Ok(losses)
}
