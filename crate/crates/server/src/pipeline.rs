//! The edit workflow stages shared by the command line and the service.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dragsplat_core::camera::{orbit_cameras, CameraPose, PointPick};
use dragsplat_core::config::PipelineConfig;
use dragsplat_core::diffusion::{DenoiserNet, NoiseSchedule, VIEWS};
use dragsplat_core::dragedit::{project_request, run_drag, DragInputs, DragOutput, DragRecord};
use dragsplat_core::gsplat::GaussianCloud;
use dragsplat_core::image::RgbImage;
use dragsplat_core::lora::{finetune_identity, FinetuneResult, FinetuneStep};
use dragsplat_core::lora::LoraSet;
use dragsplat_core::numerics::Tensor;
use dragsplat_core::refit::{refit, RefitRecord, RefitResult};
use dragsplat_core::scenes::{drag_case, images_to_latent, latent_to_images, render_views};
use dragsplat_core::{Error, Result};

/// Distance between start and end of the generated demo drag.
pub const DEMO_OFFSET: f64 = 0.3;

/// The pretrained denoiser every stage runs on.
pub struct Model {
    pub net: DenoiserNet,
    pub schedule: NoiseSchedule,
}

/// Loads the network for `cfg` from `cache_dir`, pretraining it on a miss.
pub fn load_model(cfg: &PipelineConfig, cache_dir: &Path) -> Result<Model> {
    let steps = cfg.pretrain.steps;
    let (net, schedule) = cfg.pretrained(cache_dir, |step, loss| {
        if (step + 1) % 100 == 0 || step + 1 == steps {
            log::info!("pretrain step {}/{steps} loss {loss:.4}", step + 1);
        }
    })?;
    Ok(Model { net, schedule })
}

/// The picks file and request body: 3D start/end pairs plus an optional
/// Gaussian mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Picks {
    pub starts: Vec<[f64; 3]>,
    pub ends: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<usize>>,
}

impl Picks {
    pub fn point_pick(&self) -> Result<PointPick> {
        PointPick::new(self.starts.clone(), self.ends.clone())
    }

    pub fn from_pick(pick: &PointPick, mask: Option<Vec<usize>>) -> Self {
        Picks { starts: pick.starts.clone(), ends: pick.ends.clone(), mask }
    }
}

/// A generated scene with its mask set, and a drag of one of its Gaussians.
pub fn demo_case(seed: u64) -> Result<(GaussianCloud, Picks)> {
    let (cloud, pick) = drag_case(seed, DEMO_OFFSET)?;
    let mask = cloud.mask_indices();
    Ok((cloud, Picks::from_pick(&pick, Some(mask))))
}

/// Four cameras of equal size whose sides the denoiser can downsample.
pub fn check_cameras(cams: &[CameraPose]) -> Result<()> {
    if cams.len() != VIEWS {
        return Err(Error::ViewCount { expected: VIEWS, got: cams.len() });
    }
    for c in cams {
        c.validate()?;
        if c.width != cams[0].width || c.height != cams[0].height {
            return Err(Error::InvalidArgument("all cameras must share one image size".into()));
        }
        if c.width % 8 != 0 || c.height % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "camera size {}x{} is not a multiple of 8",
                c.width, c.height
            )));
        }
    }
    Ok(())
}

pub fn default_cameras(cloud: &GaussianCloud, cfg: &PipelineConfig) -> Result<Vec<CameraPose>> {
    orbit_cameras(cloud, &cfg.rig)
}

/// Clean renders of the four views as a model-range latent.
pub fn view_latent(cloud: &GaussianCloud, cams: &[CameraPose], cfg: &PipelineConfig) -> Result<Tensor<f32>> {
    images_to_latent(&render_views(cloud, cams, cfg.render)?)
}

/// Identity adapters for the scene's own views. The top-level seed is mixed
/// into the adapter seed so one `seed` reproduces a whole run.
pub fn fit_lora(
    model: &Model,
    cloud: &GaussianCloud,
    cams: &[CameraPose],
    cfg: &PipelineConfig,
    hook: impl FnMut(&FinetuneStep),
) -> Result<FinetuneResult> {
    check_cameras(cams)?;
    let z = view_latent(cloud, cams, cfg)?;
    let mut ft = cfg.lora.clone();
    ft.seed = ft.seed.wrapping_add(cfg.seed);
    finetune_identity(&model.net, &model.schedule, &z, cams, &ft, hook)
}

/// Drags the picks in all four views. The cloud's mask decides which pixels
/// may change.
pub fn drag(
    model: &Model,
    lora: Option<&LoraSet>,
    cloud: &GaussianCloud,
    cams: &[CameraPose],
    picks: &PointPick,
    cfg: &PipelineConfig,
    hook: impl FnMut(&DragRecord),
) -> Result<DragOutput> {
    check_cameras(cams)?;
    let z = view_latent(cloud, cams, cfg)?;
    let (handles, masks) = project_request(cloud, cams, picks)?;
    let inputs = DragInputs {
        net: &model.net,
        lora,
        schedule: &model.schedule,
        views: &z,
        cams,
        handles: &handles,
        masks: &masks,
    };
    run_drag(&inputs, &cfg.drag, hook)
}

/// Refits the masked Gaussians to the edited views.
pub fn refit_to_views(
    cloud: &GaussianCloud,
    edited: &Tensor<f32>,
    cams: &[CameraPose],
    cfg: &PipelineConfig,
    hook: impl FnMut(&RefitRecord),
) -> Result<RefitResult> {
    let targets = latent_to_images(edited)?;
    refit(cloud, &targets, cams, cfg.render, &cfg.refit, hook)
}

pub fn edited_images(edited: &Tensor<f32>) -> Result<Vec<RgbImage>> {
    latent_to_images(edited)
}

#[derive(Serialize, Deserialize)]
struct ViewsFile {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Lossless encoding of an edited [4, 3, H, W] latent.
pub fn encode_views(t: &Tensor<f32>) -> Vec<u8> {
    let f = ViewsFile { shape: t.shape().to_vec(), data: t.data().to_vec() };
    serde_json::to_vec(&f).expect("views serialize")
}

pub fn decode_views(bytes: &[u8]) -> Result<Tensor<f32>> {
    let f: ViewsFile = serde_json::from_slice(bytes)?;
    let t = Tensor::new(&f.shape, f.data)?;
    if t.shape().len() != 4 || t.shape()[0] != VIEWS || t.shape()[1] != 3 {
        return Err(Error::Shape(format!("edited views must be [4, 3, H, W], got {:?}", t.shape())));
    }
    Ok(t)
}

/// One line of a JSON-lines telemetry file.
pub fn json_line(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string(value).expect("telemetry serialize");
    s.push('\n');
    s
}
