//! Refitting the masked Gaussians to the edited views, and image metrics.

use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::gsplat::{logit, sigmoid, GaussianCloud};
use crate::image::RgbImage;
use crate::numerics::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::render::{RenderOptions, SplatTape};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefitConfig {
    pub iterations: usize,
    pub lr_position: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub ssim_weight: f64,
    /// Telemetry granularity in iterations.
    pub report_every: usize,
}

impl Default for RefitConfig {
    fn default() -> Self {
        RefitConfig {
            iterations: 5000,
            lr_position: 1.6e-4,
            lr_color: 2.5e-3,
            lr_opacity: 0.05,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            ssim_weight: 0.2,
            report_every: 100,
        }
    }
}

impl RefitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("refit.iterations must be at least 1".into()));
        }
        let rates = [self.lr_position, self.lr_color, self.lr_opacity, self.lr_scale, self.lr_rotation];
        if rates.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("refit learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ssim_weight) {
            return Err(Error::Config("refit.ssim_weight must lie in [0, 1]".into()));
        }
        if self.report_every == 0 {
            return Err(Error::Config("refit.report_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefitRecord {
    pub iter: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct RefitResult {
    pub cloud: GaussianCloud,
    /// Mean loss over the views at every iteration, before its update.
    pub losses: Vec<f64>,
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b / (s * s));
        }
    }
    w
}

/// Channels of an interleaved image as a [3, 1, H, W] tensor.
fn planar(img: &RgbImage) -> Tensor<f64> {
    let hw = img.width * img.height;
    let mut out = vec![0.0; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            out[c * hw + p] = img.data[p * 3 + c];
        }
    }
    Tensor::new(&[3, 1, img.height, img.width], out).expect("image shape")
}

/// Mean SSIM of `x` against `y`, both [3, 1, H, W], with a zero-padded
/// Gaussian window.
fn ssim_graph(g: &mut Graph<f64>, x: Var, y: Var) -> Result<Var> {
    let w = g.constant(Tensor::new(&[1, 1, SSIM_WINDOW, SSIM_WINDOW], gaussian_window())?);
    let pad = SSIM_WINDOW / 2;
    let mx = g.conv2d(x, w, None, 1, pad)?;
    let my = g.conv2d(y, w, None, 1, pad)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let exx = g.conv2d(xx, w, None, 1, pad)?;
    let eyy = g.conv2d(yy, w, None, 1, pad)?;
    let exy = g.conv2d(xy, w, None, 1, pad)?;
    let mx2 = g.mul(mx, mx)?;
    let my2 = g.mul(my, my)?;
    let mxy = g.mul(mx, my)?;
    let sxx = g.sub(exx, mx2)?;
    let syy = g.sub(eyy, my2)?;
    let sxy = g.sub(exy, mxy)?;
    let n1 = g.scale(mxy, 2.0);
    let n1 = g.add_scalar(n1, SSIM_C1);
    let n2 = g.scale(sxy, 2.0);
    let n2 = g.add_scalar(n2, SSIM_C2);
    let d1 = g.add(mx2, my2)?;
    let d1 = g.add_scalar(d1, SSIM_C1);
    let d2 = g.add(sxx, syy)?;
    let d2 = g.add_scalar(d2, SSIM_C2);
    let num = g.mul(n1, n2)?;
    let den = g.mul(d1, d2)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

fn check_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape(format!("images {}x{} and {}x{} differ", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

/// Structural similarity averaged over pixels and channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_dims(a, b)?;
    let mut g = Graph::new();
    let x = g.constant(planar(a));
    let y = g.constant(planar(b));
    let s = ssim_graph(&mut g, x, y)?;
    g.value(s).item()
}

/// Peak signal-to-noise ratio in dB for images in [0, 1]; identical images
/// give `f64::INFINITY`.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data.len().max(1) as f64;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// `(1 − w)·mean|x − y| + w·(1 − SSIM)` and its gradient with respect to the
/// interleaved pixels of `rendered`.
pub fn image_loss(rendered: &RgbImage, target: &RgbImage, ssim_weight: f64) -> Result<(f64, Vec<f64>)> {
    check_dims(rendered, target)?;
    // An exact match is the global minimum; returning its exact zero gradient
    // keeps rounding residue in the SSIM terms from being amplified by Adam.
    if rendered.data == target.data {
        return Ok((0.0, vec![0.0; rendered.data.len()]));
    }
    let n = rendered.data.len() as f64;
    let l1_scale = (1.0 - ssim_weight) / n;
    let mut l1 = 0.0;
    let mut out: Vec<f64> = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(x, y)| {
            let d = x - y;
            l1 += d.abs();
            if d == 0.0 {
                0.0
            } else {
                l1_scale * d.signum()
            }
        })
        .collect();
    let mut g = Graph::new();
    let x = g.param(planar(rendered));
    let y = g.constant(planar(target));
    let s = ssim_graph(&mut g, x, y)?;
    let value = l1_scale * l1 + ssim_weight * (1.0 - g.value(s).item()?);
    let grad = g.backward(s)?.take(x).expect("image gradient");
    let hw = rendered.width * rendered.height;
    for p in 0..hw {
        for c in 0..3 {
            out[p * 3 + c] -= ssim_weight * grad.data()[c * hw + p];
        }
    }
    Ok((value, out))
}

/// Adam state of one masked Gaussian, one optimizer per parameter group.
struct Slot {
    index: usize,
    mu: Adam,
    color: Adam,
    opacity: Adam,
    scale: Adam,
    rot: Adam,
}

/// Fits the masked Gaussians of `cloud` to `targets` seen from `cams`. Every
/// Gaussian outside the mask is left untouched.
pub fn refit(
    cloud: &GaussianCloud,
    targets: &[RgbImage],
    cams: &[CameraPose],
    options: RenderOptions,
    cfg: &RefitConfig,
    mut hook: impl FnMut(&RefitRecord),
) -> Result<RefitResult> {
    cfg.validate()?;
    let mask = cloud.mask().filter(|m| !m.is_empty()).ok_or(Error::EmptyMask)?.clone();
    if targets.len() != cams.len() || targets.is_empty() {
        return Err(Error::ViewCount { expected: cams.len(), got: targets.len() });
    }
    for (t, c) in targets.iter().zip(cams) {
        if t.width != c.width || t.height != c.height {
            return Err(Error::Shape(format!("target {}x{} for a {}x{} camera", t.width, t.height, c.width, c.height)));
        }
    }
    let adam = |lr: f64, n: usize| Adam::new(AdamConfig::with_lr(lr), n);
    let mut slots: Vec<Slot> = mask
        .iter()
        .map(|&index| Slot {
            index,
            mu: adam(cfg.lr_position, 3),
            color: adam(cfg.lr_color, 3),
            opacity: adam(cfg.lr_opacity, 1),
            scale: adam(cfg.lr_scale, 3),
            rot: adam(cfg.lr_rotation, 4),
        })
        .collect();
    let mut out = cloud.clone();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let views = targets.len() as f64;
    for iter in 0..cfg.iterations {
        let mut total = 0.0;
        let mut grads = vec![crate::render::GaussianGrad::default(); out.len()];
        for (target, cam) in targets.iter().zip(cams) {
            let mut tape = SplatTape::new();
            let img = tape.forward(&out, cam, options)?;
            let (loss, d_rgb) = image_loss(&img.rgb, target, cfg.ssim_weight)?;
            total += loss / views;
            let d_alpha = vec![0.0; img.alpha.len()];
            let d_rgb: Vec<f64> = d_rgb.iter().map(|v| v / views).collect();
            for (acc, gr) in grads.iter_mut().zip(tape.backward(&d_rgb, &d_alpha, Some(&mask))?) {
                for k in 0..3 {
                    acc.mu[k] += gr.mu[k];
                    acc.scale[k] += gr.scale[k];
                    acc.color[k] += gr.color[k];
                }
                for k in 0..4 {
                    acc.rot[k] += gr.rot[k];
                }
                acc.opacity += gr.opacity;
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFiniteGradient { iteration: iter });
        }
        losses.push(total);
        if iter % cfg.report_every == 0 || iter + 1 == cfg.iterations {
            hook(&RefitRecord { iter, loss: total });
        }
        for slot in &mut slots {
            let gr = &grads[slot.index];
            let all = gr.mu.iter().chain(&gr.scale).chain(&gr.color).chain(&gr.rot).chain([&gr.opacity]);
            if !all.clone().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { iteration: iter });
            }
            let gs = &mut out.gaussians[slot.index];
            slot.mu.step(&mut gs.mu, &gr.mu);
            slot.color.step(&mut gs.color, &gr.color);
            for c in &mut gs.color {
                *c = c.clamp(0.0, 1.0);
            }
            // opacity and scale are optimized as logit and log; values are
            // written back only when a step moved them, since the round trip
            // through the transform is not bit-exact
            let mut lo = [logit(gs.opacity)];
            let before = lo;
            slot.opacity.step(&mut lo, &[gr.opacity * gs.opacity * (1.0 - gs.opacity)]);
            if lo != before {
                gs.opacity = sigmoid(lo[0]).clamp(1e-6, 1.0 - 1e-6);
            }
            let mut ls = gs.scale.map(f64::ln);
            let before = ls;
            let dls: [f64; 3] = std::array::from_fn(|k| gr.scale[k] * gs.scale[k]);
            slot.scale.step(&mut ls, &dls);
            for k in 0..3 {
                if ls[k] != before[k] {
                    gs.scale[k] = ls[k].exp();
                }
            }
            let before = gs.rot;
            slot.rot.step(&mut gs.rot, &gr.rot);
            let n = gs.rot.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gs.rot != before && n > 0.0 {
                gs.rot = gs.rot.map(|v| v / n);
            }
        }
    }
    Ok(RefitResult { cloud: out, losses })
}
