use dragsplat_core::camera::{orbit_cameras, CameraPose, RigConfig};
use dragsplat_core::gsplat::{Gaussian, GaussianCloud};
use dragsplat_core::image::RgbImage;
use dragsplat_core::refit::*;
use dragsplat_core::render::RenderOptions;
use dragsplat_core::scenes::render_views;
use dragsplat_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
    RgbImage { width: w, height: h, data: (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect() }
}

/// SSIM by explicit window sums over the zero-padded image, channel by channel.
fn ssim_oracle(a: &RgbImage, b: &RgbImage) -> f64 {
    let (w, h) = (a.width as i64, a.height as i64);
    let r = 5i64;
    let g: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * 1.5 * 1.5)).exp()).collect();
    let s: f64 = g.iter().sum();
    let px = |img: &RgbImage, x: i64, y: i64, c: usize| {
        if x < 0 || y < 0 || x >= w || y >= h {
            0.0
        } else {
            img.data[((y * w + x) * 3) as usize + c]
        }
    };
    let mut total = 0.0;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let k = g[(dy + r) as usize] * g[(dx + r) as usize] / (s * s);
                        let (p, q) = (px(a, x + dx, y + dy, c), px(b, x + dx, y + dy, c));
                        mx += k * p;
                        my += k * q;
                        xx += k * p * p;
                        yy += k * q * q;
                        xy += k * p * q;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                let sxy = xy - mx * my;
                let (sxx, syy) = (xx - mx * mx, yy - my * my);
                total += (2.0 * mx * my + c1) * (2.0 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
            }
        }
    }
    total / (3 * w * h) as f64
}

#[test]
fn ssim_matches_direct_window_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (w, h) in [(16, 16), (13, 7)] {
        let a = random_image(&mut rng, w, h);
        let b = random_image(&mut rng, w, h);
        let got = ssim(&a, &b).unwrap();
        assert!((got - ssim_oracle(&a, &b)).abs() < 1e-12, "{got}");
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
    let a = RgbImage::new(4, 4);
    assert!(matches!(ssim(&a, &RgbImage::new(4, 5)), Err(Error::Shape(_))));
}

#[test]
fn psnr_examples() {
    let zero = RgbImage::filled(8, 8, [0.0; 3]);
    let one = RgbImage::filled(8, 8, [1.0; 3]);
    assert_eq!(psnr(&zero, &zero).unwrap(), f64::INFINITY);
    assert!(psnr(&zero, &one).unwrap().abs() < 1e-12);
    let near = RgbImage::filled(8, 8, [0.01; 3]);
    assert!((psnr(&zero, &near).unwrap() - 40.0).abs() < 1e-9);
    assert!(matches!(psnr(&zero, &RgbImage::new(8, 9)), Err(Error::Shape(_))));
}

#[test]
fn image_loss_value_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_image(&mut rng, 12, 10);
    let b = random_image(&mut rng, 12, 10);
    let w = 0.2;
    let (value, grad) = image_loss(&a, &b, w).unwrap();
    let l1 = a.masked_l1(&b, |_| true);
    assert!((value - ((1.0 - w) * l1 + w * (1.0 - ssim_oracle(&a, &b)))).abs() < 1e-12);
    let (zero, flat) = image_loss(&a, &a, w).unwrap();
    assert_eq!(zero, 0.0);
    assert!(flat.iter().all(|&v| v == 0.0));
    let h = 1e-6;
    for i in (0..a.data.len()).step_by(7) {
        let mut p = a.clone();
        let mut m = a.clone();
        p.data[i] += h;
        m.data[i] -= h;
        let num = (image_loss(&p, &b, w).unwrap().0 - image_loss(&m, &b, w).unwrap().0) / (2.0 * h);
        assert!((grad[i] - num).abs() < 1e-7, "pixel {i}: {} vs {num}", grad[i]);
    }
}

fn three_blobs() -> GaussianCloud {
    GaussianCloud::new(vec![
        Gaussian::isotropic([0.0, 0.0, 0.0], 0.25, [0.8, 0.2, 0.2], 0.9),
        Gaussian::isotropic([0.35, 0.1, -0.2], 0.15, [0.2, 0.7, 0.3], 0.8),
        Gaussian::isotropic([-0.3, -0.2, 0.25], 0.18, [0.2, 0.3, 0.9], 0.85),
    ])
}

fn rig(cloud: &GaussianCloud) -> Vec<CameraPose> {
    orbit_cameras(cloud, &RigConfig { width: 16, height: 16, ..RigConfig::default() }).unwrap()
}

fn max_drift(a: &GaussianCloud, b: &GaussianCloud) -> f64 {
    let mut d = 0.0f64;
    for (x, y) in a.gaussians.iter().zip(&b.gaussians) {
        let xs = x.mu.iter().chain(&x.scale).chain(&x.color).chain(&x.rot).chain([&x.opacity]);
        let ys = y.mu.iter().chain(&y.scale).chain(&y.color).chain(&y.rot).chain([&y.opacity]);
        for (p, q) in xs.zip(ys) {
            d = d.max((p - q).abs());
        }
    }
    d
}

#[test]
fn original_renders_are_a_fixed_point() {
    let mut cloud = three_blobs();
    cloud.set_mask(&[0, 1, 2]).unwrap();
    let cams = rig(&cloud);
    let targets = render_views(&cloud, &cams, RenderOptions::default()).unwrap();
    let cfg = RefitConfig { iterations: 120, ..RefitConfig::default() };
    let mut records = Vec::new();
    let r = refit(&cloud, &targets, &cams, RenderOptions::default(), &cfg, |rec| records.push(rec.clone())).unwrap();
    let drift = max_drift(&cloud, &r.cloud);
    assert!(drift < 1e-3, "{drift}");
    assert_eq!(r.losses.len(), 120);
    assert!((r.losses[119] - r.losses[0]).abs() < 1e-6);
    let avg: Vec<f64> = r.losses.windows(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    assert!(avg.windows(2).all(|p| p[1] <= p[0] + 1e-12));
    let iters: Vec<usize> = records.iter().map(|r| r.iter).collect();
    assert_eq!(iters, vec![0, 100, 119]);
}

#[test]
fn recolor_moves_only_the_masked_gaussian() {
    let cloud = three_blobs();
    let cams = rig(&cloud);
    let mut target_cloud = cloud.clone();
    let want = [0.3, 0.6, 0.9];
    target_cloud.gaussians[0].color = want;
    let targets = render_views(&target_cloud, &cams, RenderOptions::default()).unwrap();

    let mut masked = cloud.clone();
    masked.set_mask(&[0]).unwrap();
    let cfg = RefitConfig { iterations: 60, ..RefitConfig::default() };
    let r = refit(&masked, &targets, &cams, RenderOptions::default(), &cfg, |_| {}).unwrap();

    let dist = |c: [f64; 3]| c.iter().zip(&want).map(|(a, b)| (a - b).abs()).sum::<f64>();
    assert!(dist(r.cloud.gaussians[0].color) < dist(cloud.gaussians[0].color));
    for i in 1..3 {
        assert_eq!(r.cloud.gaussians[i], cloud.gaussians[i]);
        let a = &r.cloud.gaussians[i];
        let b = &cloud.gaussians[i];
        assert_eq!(a.mu.map(f64::to_bits), b.mu.map(f64::to_bits));
        assert_eq!(a.opacity.to_bits(), b.opacity.to_bits());
    }
    assert!(r.losses.last().unwrap() < &r.losses[0]);
    let before = render_views(&cloud, &cams, RenderOptions::default()).unwrap();
    let after = render_views(&r.cloud, &cams, RenderOptions::default()).unwrap();
    let l1 = |imgs: &[RgbImage]| imgs.iter().zip(&targets).map(|(a, t)| a.masked_l1(t, |_| true)).sum::<f64>();
    assert!(l1(&after) < l1(&before));
}

#[test]
fn refit_rejects_bad_requests() {
    let cloud = three_blobs();
    let cams = rig(&cloud);
    let targets = render_views(&cloud, &cams, RenderOptions::default()).unwrap();
    let cfg = RefitConfig { iterations: 1, ..RefitConfig::default() };
    let opts = RenderOptions::default();
    assert!(matches!(refit(&cloud, &targets, &cams, opts, &cfg, |_| {}), Err(Error::EmptyMask)));
    let mut empty = cloud.clone();
    empty.set_mask(&[]).unwrap();
    assert!(matches!(refit(&empty, &targets, &cams, opts, &cfg, |_| {}), Err(Error::EmptyMask)));

    let mut masked = cloud.clone();
    masked.set_mask(&[1]).unwrap();
    assert!(matches!(refit(&masked, &targets[..3], &cams, opts, &cfg, |_| {}), Err(Error::ViewCount { .. })));
    let mut small = targets.clone();
    small[2] = RgbImage::new(8, 8);
    assert!(matches!(refit(&masked, &small, &cams, opts, &cfg, |_| {}), Err(Error::Shape(_))));
    for bad in [
        RefitConfig { iterations: 0, ..RefitConfig::default() },
        RefitConfig { lr_color: 0.0, ..RefitConfig::default() },
        RefitConfig { ssim_weight: 1.5, ..RefitConfig::default() },
    ] {
        assert!(matches!(refit(&masked, &targets, &cams, opts, &bad, |_| {}), Err(Error::Config(_))));
    }
    let d = RefitConfig::default();
    assert_eq!((d.iterations, d.lr_position, d.lr_color, d.lr_opacity, d.lr_scale, d.lr_rotation, d.ssim_weight), (5000, 1.6e-4, 2.5e-3, 0.05, 5e-3, 1e-3, 0.2));
}
