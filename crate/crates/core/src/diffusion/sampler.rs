//! Multi-stride DDIM inversion and sampling over any noise predictor.

use crate::diffusion::schedule::{ddim_invert_step, ddim_sample_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// Anything that predicts noise for a latent at a timestep.
pub trait EpsModel<T: Element> {
    fn eps(&mut self, x: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

impl<T: Element, F: FnMut(&Tensor<T>, usize) -> Result<Tensor<T>>> EpsModel<T> for F {
    fn eps(&mut self, x: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self(x, t)
    }
}

/// Inverts `x0` up through strides `1..=upto` of `timesteps`. Returns the
/// latents after each stride (`upto` entries).
///
/// With `refine > 0`, each stride is re-solved by fixed-point iteration so
/// that a sampling step from the result lands back on its input.
pub fn ddim_invert<T: Element>(
    model: &mut impl EpsModel<T>,
    schedule: &NoiseSchedule,
    timesteps: &[usize],
    x0: &Tensor<T>,
    upto: usize,
    refine: usize,
) -> Result<Vec<Tensor<T>>> {
    if upto >= timesteps.len() {
        return Err(Error::InvalidArgument(format!("stride {upto} beyond {} timesteps", timesteps.len() - 1)));
    }
    let mut out = Vec::with_capacity(upto);
    let mut x = x0.clone();
    for k in 1..=upto {
        let (tp, t) = (timesteps[k - 1], timesteps[k]);
        let (ab_p, ab_t) = (schedule.alpha_bar(tp), schedule.alpha_bar(t));
        let mut next = ddim_invert_step(&x, ab_t, ab_p, &model.eps(&x, t)?)?;
        for _ in 0..refine {
            next = ddim_invert_step(&x, ab_t, ab_p, &model.eps(&next, t)?)?;
        }
        if !next.all_finite() {
            return Err(Error::NonFiniteLatent { step: k });
        }
        x = next;
        out.push(x.clone());
    }
    Ok(out)
}

/// Deterministic sampling from stride `from` down to t = 0.
pub fn ddim_sample<T: Element>(
    model: &mut impl EpsModel<T>,
    schedule: &NoiseSchedule,
    timesteps: &[usize],
    x_t: &Tensor<T>,
    from: usize,
) -> Result<Tensor<T>> {
    if from >= timesteps.len() {
        return Err(Error::InvalidArgument(format!("stride {from} beyond {} timesteps", timesteps.len() - 1)));
    }
    let mut x = x_t.clone();
    for k in (1..=from).rev() {
        let (t, tp) = (timesteps[k], timesteps[k - 1]);
        let eps = model.eps(&x, t)?;
        x = ddim_sample_step(&x, schedule.alpha_bar(t), schedule.alpha_bar(tp), &eps, 0.0, None)?;
        if !x.all_finite() {
            return Err(Error::NonFiniteLatent { step: k - 1 });
        }
    }
    Ok(x)
}
