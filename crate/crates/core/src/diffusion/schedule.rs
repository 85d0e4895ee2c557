//! Linear-β noise schedule and the deterministic DDIM update pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// ᾱ_0..ᾱ_T with ᾱ_0 = 1.
    alpha_bar: Vec<f64>,
}

/// Linear β from `beta_start` to `beta_end` over `steps` training steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(0.0 <= beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for s in 1..=steps {
        let beta = if steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * (s - 1) as f64 / (steps - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { steps, beta_start, beta_end, alpha_bar })
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Signal and noise coefficients (√ᾱ_t, √(1−ᾱ_t)).
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alpha_bar[t];
        (a.sqrt(), (1.0 - a).sqrt())
    }

    /// Timesteps 0 = t_0 < t_1 < ... < t_n = T of an n-stride sampler.
    pub fn strided(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.steps {
            return Err(Error::InvalidArgument(format!("cannot take {n} strides of a {}-step schedule", self.steps)));
        }
        Ok((0..=n).map(|k| (k * self.steps + n / 2) / n).collect())
    }
}

/// One DDIM sampling step from `x_t` (ᾱ = `ab_t`) to the previous stride
/// (ᾱ = `ab_prev`). `noise` is required when `sigma > 0`.
pub fn ddim_sample_step<T: Element>(
    x_t: &Tensor<T>,
    ab_t: f64,
    ab_prev: f64,
    eps: &Tensor<T>,
    sigma: f64,
    noise: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if x_t.shape() != eps.shape() {
        return Err(Error::Shape(format!("latent {:?} vs eps {:?}", x_t.shape(), eps.shape())));
    }
    let dir2 = 1.0 - ab_prev - sigma * sigma;
    if sigma < 0.0 || dir2 < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sigma {sigma} too large for alpha_bar_prev {ab_prev}"
        )));
    }
    let noise = match (sigma > 0.0, noise) {
        (false, _) => None,
        (true, Some(n)) if n.shape() == x_t.shape() => Some(n),
        (true, _) => return Err(Error::InvalidArgument("sigma > 0 needs a noise tensor of the latent shape".into())),
    };
    let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (pa, dir) = (ab_prev.sqrt(), dir2.sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&x, &e))| {
            let (x, e) = (x.as_f64(), e.as_f64());
            let x0 = (x - sb * e) / sa;
            let mut v = pa * x0 + dir * e;
            if let Some(n) = noise {
                v += sigma * n.data()[i].as_f64();
            }
            T::from_f64(v)
        })
        .collect();
    Tensor::new(x_t.shape(), data)
}

/// Deterministic DDIM inversion from the previous stride (ᾱ = `ab_prev`) up
/// to ᾱ = `ab_t`.
pub fn ddim_invert_step<T: Element>(x_prev: &Tensor<T>, ab_t: f64, ab_prev: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if x_prev.shape() != eps.shape() {
        return Err(Error::Shape(format!("latent {:?} vs eps {:?}", x_prev.shape(), eps.shape())));
    }
    let ratio = (ab_t / ab_prev).sqrt();
    let (pb, sb) = ((1.0 - ab_prev).sqrt(), (1.0 - ab_t).sqrt());
    let data = x_prev
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| {
            let (x, e) = (x.as_f64(), e.as_f64());
            T::from_f64(ratio * (x - pb * e) + sb * e)
        })
        .collect();
    Tensor::new(x_prev.shape(), data)
}
