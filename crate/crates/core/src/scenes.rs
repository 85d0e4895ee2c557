//! Procedurally generated Gaussian objects and their four-view renders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{orbit_cameras, CameraPose, PointPick, RigConfig};
use crate::diffusion::TrainSample;
use crate::error::{Error, Result};
use crate::gsplat::{Gaussian, GaussianCloud};
use crate::image::RgbImage;
use crate::numerics::Tensor;
use crate::render::{splat, RenderOptions};

/// A small object built from two to four coloured ellipsoidal parts.
pub fn procedural_scene(seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = rng.random_range(2..=4);
    let mut gaussians = Vec::new();
    for _ in 0..parts {
        let center: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.45..0.45));
        let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.45));
        let hue = rng.random_range(0.0..6.0);
        let base = hue_to_rgb(hue, rng.random_range(0.55..1.0));
        let count = rng.random_range(8..=16);
        for _ in 0..count {
            // rejection-sample a point inside the unit ball
            let u = loop {
                let u: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                    break u;
                }
            };
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
            gaussians.push(Gaussian {
                mu: std::array::from_fn(|k| center[k] + radii[k] * u[k]),
                scale: std::array::from_fn(|_| rng.random_range(0.06..0.16)),
                rot: q.map(|v| v / n),
                color: std::array::from_fn(|k| (base[k] + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0)),
                opacity: rng.random_range(0.6..0.95),
            });
        }
    }
    GaussianCloud::new(gaussians)
}

fn hue_to_rgb(h: f64, value: f64) -> [f64; 3] {
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let lift = 0.15;
    [lift + (value - lift) * r, lift + (value - lift) * g, lift + (value - lift) * b]
}

pub fn render_views(cloud: &GaussianCloud, cams: &[CameraPose], opts: RenderOptions) -> Result<Vec<RgbImage>> {
    cams.iter().map(|c| splat(cloud, c, opts).map(|r| r.rgb)).collect()
}

/// Stacks images into a [N, 3, H, W] latent in model range.
pub fn images_to_latent(images: &[RgbImage]) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = images.iter().map(|i| i.to_latent()).collect();
    if parts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Tensor::stack(&parts)
}

pub fn latent_to_images(latent: &Tensor<f32>) -> Result<Vec<RgbImage>> {
    let n = latent.shape().first().copied().unwrap_or(0);
    (0..n).map(|i| RgbImage::from_latent(&latent.index0(i)?)).collect()
}

/// Renders `count` procedural scenes from the default rig.
pub fn training_set(count: usize, rig: &RigConfig, seed: u64) -> Result<Vec<TrainSample>> {
    (0..count)
        .map(|i| {
            let cloud = procedural_scene(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            let cams = orbit_cameras(&cloud, rig)?;
            let views = images_to_latent(&render_views(&cloud, &cams, RenderOptions::default())?)?;
            Ok(TrainSample { views, cams })
        })
        .collect()
}

/// A drag test case: a procedural scene whose mask is the part nearest the
/// start point, and one start/end pair moving that Gaussian's center.
pub fn drag_case(seed: u64, offset: f64) -> Result<(GaussianCloud, PointPick)> {
    let mut cloud = procedural_scene(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd4a9_0000);
    let pick = rng.random_range(0..cloud.len());
    let start = cloud.gaussians[pick].mu;
    let dir = loop {
        let u: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.2 && n <= 1.0 {
            break u.map(|v| v / n);
        }
    };
    let end = std::array::from_fn(|k| start[k] + offset * dir[k]);
    let radius = 0.35;
    let mask: Vec<usize> = (0..cloud.len())
        .filter(|&i| {
            let mu = cloud.gaussians[i].mu;
            (0..3).map(|k| (mu[k] - start[k]).powi(2)).sum::<f64>() <= radius * radius
        })
        .collect();
    cloud.set_mask(&mask)?;
    Ok((cloud, PointPick::new(vec![start], vec![end])?))
}
