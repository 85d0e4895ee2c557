//! Multi-view drag editing in the DDIM latent: inversion, motion supervision,
//! point tracking and key/value-sharing denoising.

use serde::{Deserialize, Serialize};

use crate::camera::{project_all, rasterize_mask, CameraPose, PointPick};
use crate::diffusion::net::{kv_first_layer, DenoiserNet, Forward, KvCache, KvMode, VIEWS};
use crate::diffusion::sampler::ddim_invert;
use crate::diffusion::schedule::{ddim_sample_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::gsplat::GaussianCloud;
use crate::image::Mask;
use crate::lora::LoraSet;
use crate::numerics::{bilinear_taps, Adam, AdamConfig, Element, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DragConfig {
    /// DDIM strides used for inversion and sampling.
    pub ddim_steps: usize,
    /// Editing step as a fraction of the stride count.
    pub t_edit: f64,
    pub max_iters: usize,
    pub latent_lr: f64,
    pub lambda: f64,
    pub r1: usize,
    pub r2: usize,
    pub stop_radius: f64,
    /// Unconditional model, so any value yields the plain prediction.
    pub guidance_scale: f64,
    pub kv_share_layer_fraction: f64,
    pub kv_share_from_step: usize,
    /// Fixed-point refinements per inversion stride.
    pub inversion_refine: usize,
}

impl Default for DragConfig {
    fn default() -> Self {
        DragConfig {
            ddim_steps: 50,
            t_edit: 0.7,
            max_iters: 80,
            latent_lr: 0.01,
            lambda: 0.1,
            r1: 1,
            r2: 3,
            stop_radius: 1.0,
            guidance_scale: 1.0,
            kv_share_layer_fraction: 0.8,
            kv_share_from_step: 0,
            inversion_refine: 2,
        }
    }
}

impl DragConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("drag.{m}")));
        if self.ddim_steps == 0 {
            return bad("ddim_steps must be at least 1");
        }
        if !(self.t_edit > 0.0 && self.t_edit <= 1.0) {
            return bad("t_edit must lie in (0, 1]");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if !(self.latent_lr > 0.0) {
            return bad("latent_lr must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.r2 < self.r1 {
            return bad("r2 must be at least r1");
        }
        if !(self.stop_radius >= 0.0) {
            return bad("stop_radius must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.kv_share_layer_fraction) {
            return bad("kv_share_layer_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Stride index at which the latent is edited.
    pub fn edit_stride(&self) -> usize {
        ((self.t_edit * self.ddim_steps as f64).round() as usize).clamp(1, self.ddim_steps)
    }
}

/// Handles and targets of one view, in latent pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewHandles {
    pub handles: Vec<[f64; 2]>,
    pub targets: Vec<[f64; 2]>,
}

impl ViewHandles {
    pub fn mean_distance(&self) -> f64 {
        if self.handles.is_empty() {
            return 0.0;
        }
        self.handles.iter().zip(&self.targets).map(|(h, g)| dist(*h, *g)).sum::<f64>() / self.handles.len() as f64
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Projects the 3D picks into every view and rasterizes the Gaussian mask.
pub fn project_request(
    cloud: &GaussianCloud,
    cams: &[CameraPose],
    picks: &PointPick,
) -> Result<(Vec<ViewHandles>, Vec<Mask>)> {
    picks.validate_counts()?;
    let mut handles = Vec::with_capacity(cams.len());
    let mut masks = Vec::with_capacity(cams.len());
    for cam in cams {
        let clamp = |p: [f64; 2]| [p[0].clamp(0.0, (cam.width - 1) as f64), p[1].clamp(0.0, (cam.height - 1) as f64)];
        handles.push(ViewHandles {
            handles: project_all(&picks.starts, cam)?.into_iter().map(clamp).collect(),
            targets: project_all(&picks.ends, cam)?.into_iter().map(clamp).collect(),
        });
        masks.push(rasterize_mask(cloud, cam));
    }
    Ok((handles, masks))
}

/// DDIM inversion of the clean views up to the editing stride.
#[derive(Clone, Debug)]
pub struct Inversion {
    pub timesteps: Vec<usize>,
    /// Latents after strides 1..=edit_stride; the last one is z_t.
    pub trajectory: Vec<Tensor<f32>>,
}

impl Inversion {
    pub fn stride(&self) -> usize {
        self.trajectory.len()
    }

    pub fn latent(&self) -> &Tensor<f32> {
        self.trajectory.last().expect("non-empty trajectory")
    }
}

fn check_views(z: &Tensor<f32>, cams: &[CameraPose]) -> Result<()> {
    let views = z.shape().first().copied().unwrap_or(0);
    if views != VIEWS {
        return Err(Error::ViewCount { expected: VIEWS, got: views });
    }
    if cams.len() != VIEWS {
        return Err(Error::ViewCount { expected: VIEWS, got: cams.len() });
    }
    Ok(())
}

pub fn invert(
    net: &DenoiserNet,
    lora: Option<&LoraSet>,
    schedule: &NoiseSchedule,
    z0: &Tensor<f32>,
    cams: &[CameraPose],
    cfg: &DragConfig,
) -> Result<Inversion> {
    cfg.validate()?;
    check_views(z0, cams)?;
    let timesteps = schedule.strided(cfg.ddim_steps)?;
    let mut model = |x: &Tensor<f32>, t: usize| net.predict(x, t, cams, &mut Forward::with_adapters(lora));
    let trajectory = ddim_invert(&mut model, schedule, &timesteps, z0, cfg.edit_stride(), cfg.inversion_refine)?;
    Ok(Inversion { timesteps, trajectory })
}

/// Keys and values of the unedited denoising path, one cache per sampling
/// step counted from the editing stride down.
#[derive(Clone, Debug, Default)]
pub struct SharedKv {
    pub steps: Vec<KvCache<f32>>,
    pub from_layer: usize,
}

/// Plain DDIM sampling from z_t, recording the attention keys and values
/// that the edited path will reuse.
pub fn reconstruct(
    net: &DenoiserNet,
    lora: Option<&LoraSet>,
    schedule: &NoiseSchedule,
    inversion: &Inversion,
    cams: &[CameraPose],
    cfg: &DragConfig,
) -> Result<(Tensor<f32>, SharedKv)> {
    let from_layer = kv_first_layer(cfg.kv_share_layer_fraction);
    let mut shared = SharedKv { steps: Vec::new(), from_layer };
    let ts = &inversion.timesteps;
    let mut x = inversion.latent().clone();
    for k in (1..=inversion.stride()).rev() {
        let mut store = KvCache::default();
        let eps = {
            let mut fwd = Forward { adapters: lora, kv: KvMode::Record { from_layer, store: &mut store }, ..Default::default() };
            net.predict(&x, ts[k], cams, &mut fwd)?
        };
        shared.steps.push(store);
        x = ddim_sample_step(&x, schedule.alpha_bar(ts[k]), schedule.alpha_bar(ts[k - 1]), &eps, 0.0, None)?;
        if !x.all_finite() {
            return Err(Error::NonFiniteLatent { step: k - 1 });
        }
    }
    Ok((x.map(|v| v.clamp(-1.0, 1.0)), shared))
}

/// Samples the edited latent down to t = 0. From sampling step
/// `kv_share_from_step` on, attention layers at or above the shared layer
/// take their keys and values from the unedited path.
#[allow(clippy::too_many_arguments)]
pub fn consistent_denoise(
    net: &DenoiserNet,
    lora: Option<&LoraSet>,
    schedule: &NoiseSchedule,
    timesteps: &[usize],
    edited: &Tensor<f32>,
    shared: &SharedKv,
    cams: &[CameraPose],
    cfg: &DragConfig,
) -> Result<Tensor<f32>> {
    check_views(edited, cams)?;
    let stride = cfg.edit_stride();
    if stride >= timesteps.len() {
        return Err(Error::InvalidArgument(format!("stride {stride} beyond {} timesteps", timesteps.len() - 1)));
    }
    let mut x = edited.clone();
    for (i, k) in (1..=stride).rev().enumerate() {
        let mut fwd = Forward::with_adapters(lora);
        if i >= cfg.kv_share_from_step {
            let store = shared.steps.get(i).ok_or(Error::MissingTrajectoryStep(k))?;
            fwd.kv = KvMode::Replace { from_layer: shared.from_layer, store };
        }
        let eps = net.predict(&x, timesteps[k], cams, &mut fwd)?;
        x = ddim_sample_step(&x, schedule.alpha_bar(timesteps[k]), schedule.alpha_bar(timesteps[k - 1]), &eps, 0.0, None)?;
        if !x.all_finite() {
            return Err(Error::NonFiniteLatent { step: k - 1 });
        }
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

/// Maps a latent pixel coordinate onto a feature grid `scale` times coarser,
/// so sampling the coarse grid equals sampling its bilinear upsampling.
fn feature_coord(p: [f64; 2], scale: f64) -> [f64; 2] {
    [(p[0] + 0.5) / scale - 0.5, (p[1] + 0.5) / scale - 0.5]
}

/// Feature vector of `feat` [C, h, w] at latent position `p`.
pub fn sample_feature<T: Element>(feat: &Tensor<T>, p: [f64; 2], scale: f64) -> Vec<f64> {
    let s = feat.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let q = feature_coord(p, scale);
    let taps = bilinear_taps(q[0], q[1], h, w);
    let d = feat.data();
    (0..c).map(|ch| taps.iter().map(|&(i, wt)| d[ch * h * w + i].as_f64() * wt).sum()).collect()
}

/// Integer offsets of the square patch of radius `r` in row-major order.
pub fn patch_offsets(r: usize) -> Vec<[f64; 2]> {
    let r = r as i64;
    (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| [dx as f64, dy as f64])).collect()
}

/// Moves each handle to the patch offset whose feature is nearest (L1) to
/// its reference feature. `feat` is [C, h, w] at `scale` latent pixels per
/// cell over a `width` × `height` latent. Ties go to the earliest row-major
/// offset; a handle with no in-bounds candidate stays put.
pub fn track_points<T: Element>(
    feat: &Tensor<T>,
    scale: f64,
    width: usize,
    height: usize,
    reference: &[Vec<f64>],
    handles: &[[f64; 2]],
    r2: usize,
) -> Vec<[f64; 2]> {
    let offsets = patch_offsets(r2);
    handles
        .iter()
        .zip(reference)
        .map(|(&h, f_ref)| {
            let mut best: Option<(f64, [f64; 2])> = None;
            for o in &offsets {
                let q = [h[0] + o[0], h[1] + o[1]];
                if q[0] < 0.0 || q[1] < 0.0 || q[0] > (width - 1) as f64 || q[1] > (height - 1) as f64 {
                    continue;
                }
                let f = sample_feature(feat, q, scale);
                let d: f64 = f.iter().zip(f_ref).map(|(a, b)| (a - b).abs()).sum();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, q));
                }
            }
            match best {
                Some((_, q)) => q,
                None => {
                    log::warn!("tracking patch around ({:.2}, {:.2}) lies outside the image; handle frozen", h[0], h[1]);
                    h
                }
            }
        })
        .collect()
}

/// Unit step from `h` toward `g`, or `None` once within `stop_radius`.
pub fn unit_direction(h: [f64; 2], g: [f64; 2], stop_radius: f64) -> Option<[f64; 2]> {
    let d = dist(h, g);
    (d > stop_radius).then(|| [(g[0] - h[0]) / d, (g[1] - h[1]) / d])
}

/// Graph nodes of the motion-supervision loss.
pub struct MotionLoss {
    pub total: Var,
    pub per_view: Vec<Var>,
}

/// Builds the loss on `g` from the features [4, C, h, w] and the one-step
/// denoised latent [4, 3, H, W] of the current edit. `reference_prev` is the
/// one-step denoised latent of the unedited z_t. Returns `None` when every
/// handle is within the stop radius.
///
/// Per handle with direction d, every q of the radius-r1 patch contributes
/// the channel-mean of |F(q + d) − sg(F(q))|; the mask term adds
/// λ·Σ|(ẑ_{t−1} − ẑ⁰_{t−1}) ⊙ (1 − M)|.
pub fn motion_supervision_loss<T: Element>(
    g: &mut Graph<T>,
    feature: Var,
    latent_prev: Var,
    reference_prev: &Tensor<T>,
    views: &[ViewHandles],
    masks: &[Mask],
    cfg: &DragConfig,
) -> Result<Option<MotionLoss>> {
    let fs = g.shape(feature).to_vec();
    let ls = g.shape(latent_prev).to_vec();
    if fs.len() != 4 || ls.len() != 4 || fs[0] != ls[0] || ls[1] != 3 {
        return Err(Error::Shape(format!("features {fs:?} and latents {ls:?} do not pair up")));
    }
    let (n, c, (height, width)) = (fs[0], fs[1], (ls[2], ls[3]));
    if views.len() != n || masks.len() != n {
        return Err(Error::ViewCount { expected: n, got: views.len().min(masks.len()) });
    }
    let scale = width as f64 / fs[3] as f64;
    let directions: Vec<Vec<Option<[f64; 2]>>> = views
        .iter()
        .map(|v| v.handles.iter().zip(&v.targets).map(|(&h, &t)| unit_direction(h, t, cfg.stop_radius)).collect())
        .collect();
    if directions.iter().flatten().all(Option::is_none) {
        return Ok(None);
    }
    let offsets = patch_offsets(cfg.r1);
    let clamp = |p: [f64; 2]| [p[0].clamp(0.0, (width - 1) as f64), p[1].clamp(0.0, (height - 1) as f64)];
    let mut per_view = Vec::with_capacity(n);
    for v in 0..n {
        let fv = g.slice(feature, 0, v, v + 1)?;
        let fv = g.reshape(fv, &[c, fs[2], fs[3]])?;
        let fixed = g.detach(fv);
        let (mut moved, mut anchors) = (Vec::new(), Vec::new());
        for (h, d) in views[v].handles.iter().zip(&directions[v]) {
            let Some(d) = d else { continue };
            for o in &offsets {
                let q = clamp([h[0] + o[0], h[1] + o[1]]);
                anchors.push(feature_coord(q, scale));
                moved.push(feature_coord([q[0] + d[0], q[1] + d[1]], scale));
            }
        }
        let mut terms = Vec::new();
        if !moved.is_empty() {
            let a = g.bilinear_sample(fv, &moved)?;
            let b = g.bilinear_sample(fixed, &anchors)?;
            let l = g.l1(a, b)?;
            terms.push(g.scale(l, 1.0 / c as f64));
        }
        let m = &masks[v];
        if m.width != width || m.height != height {
            return Err(Error::Shape(format!("mask {}x{} for a {width}x{height} latent", m.width, m.height)));
        }
        if cfg.lambda > 0.0 && m.data.iter().any(|&b| !b) {
            let hw = width * height;
            let keep: Vec<f64> = (0..3 * hw).map(|i| if m.data[i % hw] { 0.0 } else { 1.0 }).collect();
            let keep = g.constant(Tensor::from_f64(&[3, height, width], &keep)?);
            let zv = g.slice(latent_prev, 0, v, v + 1)?;
            let zv = g.reshape(zv, &[3, height, width])?;
            let r = g.constant(reference_prev.index0(v)?);
            let diff = g.sub(zv, r)?;
            let diff = g.mul(diff, keep)?;
            let diff = g.abs(diff);
            let s = g.sum(diff);
            terms.push(g.scale(s, cfg.lambda));
        }
        let mut total = g.constant(Tensor::scalar(T::zero()));
        for t in terms {
            total = g.add(total, t)?;
        }
        per_view.push(total);
    }
    let mut total = per_view[0];
    for &p in &per_view[1..] {
        total = g.add(total, p)?;
    }
    Ok(Some(MotionLoss { total, per_view }))
}

/// One DDIM step from `x` (at `ab_t`) to `ab_prev` on the graph.
fn graph_ddim_step<T: Element>(g: &mut Graph<T>, x: Var, eps: Var, ab_t: f64, ab_prev: f64) -> Result<Var> {
    let (a, b) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (ap, bp) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let xs = g.scale(x, ap / a);
    let es = g.scale(eps, bp - ap * b / a);
    g.add(xs, es)
}

/// Per-view state reported after each drag iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub loss: f64,
    pub handles: Vec<[f64; 2]>,
    pub distance: f64,
}

/// One telemetry line of the drag loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DragRecord {
    pub iter: usize,
    pub loss: f64,
    /// Handles of all views after tracking, view-major.
    pub handles: Vec<[f64; 2]>,
    pub per_view: Vec<ViewRecord>,
}

pub struct DragInputs<'a> {
    pub net: &'a DenoiserNet,
    pub lora: Option<&'a LoraSet>,
    pub schedule: &'a NoiseSchedule,
    /// Clean views, [4, 3, H, W] in model range.
    pub views: &'a Tensor<f32>,
    pub cams: &'a [CameraPose],
    pub handles: &'a [ViewHandles],
    pub masks: &'a [Mask],
}

#[derive(Clone, Debug)]
pub struct DragOutput {
    /// Edited views after key/value-sharing denoising, [4, 3, H, W].
    pub edited: Tensor<f32>,
    /// Optimized latent at the editing step.
    pub latent: Tensor<f32>,
    /// Unedited inverted latent at the editing step.
    pub inverted: Tensor<f32>,
    /// Plain reconstruction of the unedited latent.
    pub reconstruction: Tensor<f32>,
    pub telemetry: Vec<DragRecord>,
    pub converged: bool,
    pub initial_distance: f64,
    pub final_distance: f64,
    pub final_handles: Vec<ViewHandles>,
}

fn mean_distance(views: &[ViewHandles]) -> f64 {
    views.iter().map(ViewHandles::mean_distance).sum::<f64>() / views.len().max(1) as f64
}

/// Features [C, h, w] of view `v` from a [4, C, h, w] tensor.
fn view_features<T: Element>(feat: &Tensor<T>, v: usize) -> Result<Tensor<T>> {
    feat.index0(v)
}

/// The full editing loop: invert, then alternate motion supervision, a latent
/// update and point tracking until every handle reaches its target or
/// `max_iters` updates are spent, then denoise with shared keys and values.
pub fn run_drag(inputs: &DragInputs<'_>, cfg: &DragConfig, mut hook: impl FnMut(&DragRecord)) -> Result<DragOutput> {
    cfg.validate()?;
    let DragInputs { net, lora, schedule, views, cams, handles, masks } = *inputs;
    check_views(views, cams)?;
    if handles.len() != VIEWS {
        return Err(Error::ViewCount { expected: VIEWS, got: handles.len() });
    }
    if masks.len() != VIEWS {
        return Err(Error::ViewCount { expected: VIEWS, got: masks.len() });
    }
    let count = handles[0].handles.len();
    if handles.iter().any(|v| v.handles.len() != count || v.targets.len() != count) {
        return Err(Error::InvalidArgument("every view needs the same number of handles and targets".into()));
    }
    let (height, width) = (views.shape()[2], views.shape()[3]);

    let inversion = invert(net, lora, schedule, views, cams, cfg)?;
    let (reconstruction, shared) = reconstruct(net, lora, schedule, &inversion, cams, cfg)?;
    let stride = inversion.stride();
    let t = inversion.timesteps[stride];
    let (ab_t, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(inversion.timesteps[stride - 1]));

    let mut state: Vec<ViewHandles> = handles.to_vec();
    let initial_distance = mean_distance(&state);
    let mut latent = inversion.latent().clone();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.latent_lr), latent.len());
    let mut telemetry = Vec::new();
    let mut reference: Option<(Vec<Vec<Vec<f64>>>, Tensor<f32>)> = None;
    let mut pending: Option<(f64, Vec<f64>)> = None;
    let mut converged = false;

    for k in 0..=cfg.max_iters {
        let mut g = Graph::<f32>::new();
        let x = g.param(latent.clone());
        let out = net.forward(&mut g, x, t, cams, &mut Forward::with_adapters(lora))?;
        let feat = g.value(out.feature).clone();
        let scale = width as f64 / feat.shape()[3] as f64;
        let prev = graph_ddim_step(&mut g, x, out.eps, ab_t, ab_prev)?;

        let (ref_feats, ref_prev) = reference.get_or_insert_with(|| {
            let feats = (0..VIEWS)
                .map(|v| {
                    let fv = view_features(&feat, v).expect("view slice");
                    state[v].handles.iter().map(|&h| sample_feature(&fv, h, scale)).collect()
                })
                .collect();
            (feats, g.value(prev).clone())
        });

        if let Some((loss, per_view)) = pending.take() {
            for (v, s) in state.iter_mut().enumerate() {
                let fv = view_features(&feat, v)?;
                s.handles = track_points(&fv, scale, width, height, &ref_feats[v], &s.handles, cfg.r2);
            }
            let record = DragRecord {
                iter: k - 1,
                loss,
                handles: state.iter().flat_map(|s| s.handles.iter().copied()).collect(),
                per_view: state
                    .iter()
                    .zip(per_view)
                    .map(|(s, l)| ViewRecord { loss: l, handles: s.handles.clone(), distance: s.mean_distance() })
                    .collect(),
            };
            hook(&record);
            telemetry.push(record);
        }
        if k == cfg.max_iters {
            break;
        }
        let Some(loss) = motion_supervision_loss(&mut g, out.feature, prev, ref_prev, &state, masks, cfg)? else {
            converged = true;
            break;
        };
        let total = g.value(loss.total).item()?.as_f64();
        let mut per_view = Vec::with_capacity(VIEWS);
        for &v in &loss.per_view {
            per_view.push(g.value(v).item()?.as_f64());
        }
        let mut grads = g.backward(loss.total)?;
        let grad = grads.take(x).expect("latent gradient");
        if !total.is_finite() || !grad.all_finite() {
            return Err(Error::NonFiniteGradient { iteration: k });
        }
        opt.step(latent.data_mut(), grad.data());
        pending = Some((total, per_view));
    }

    let edited = consistent_denoise(net, lora, schedule, &inversion.timesteps, &latent, &shared, cams, cfg)?;
    let final_distance = mean_distance(&state);
    let inverted = inversion.latent().clone();
    Ok(DragOutput { edited, latent, inverted, reconstruction, telemetry, converged, initial_distance, final_distance, final_handles: state })
}
