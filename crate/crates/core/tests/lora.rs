use dragsplat_core::camera::{orbit_cameras, CameraPose, RigConfig};
use dragsplat_core::diffusion::{make_schedule, DenoiserNet, NetConfig, NoiseSchedule};
use dragsplat_core::lora::*;
use dragsplat_core::numerics::Tensor;
use dragsplat_core::render::RenderOptions;
use dragsplat_core::scenes::{images_to_latent, procedural_scene, render_views};
use dragsplat_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn scene_views(seed: u64) -> (Tensor<f32>, Vec<CameraPose>) {
    let cloud = procedural_scene(seed);
    let cams = orbit_cameras(&cloud, &RigConfig { width: 16, height: 16, ..RigConfig::default() }).unwrap();
    let z = images_to_latent(&render_views(&cloud, &cams, RenderOptions::default()).unwrap()).unwrap();
    (z, cams)
}

fn schedule() -> NoiseSchedule {
    make_schedule(1000, 1e-4, 0.02).unwrap()
}

fn noise(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn adapter_count_matches_rank_times_dims() {
    let net = DenoiserNet::new(NetConfig::default());
    for rank in [1, 4, 16] {
        let set = LoraSet::new(&net, rank, rank as f64, 0).unwrap();
        let want: usize = net
            .params()
            .iter()
            .filter(|(name, _)| name.contains(".attn."))
            .map(|(_, t)| rank * (t.shape()[0] + t.shape()[1]))
            .sum();
        assert_eq!(set.num_params(), want);
        assert_eq!(set.adapters.len(), 20);
        assert_eq!(set.scale, 1.0);
    }
}

#[test]
fn rank_must_fit_every_projection() {
    let net = DenoiserNet::new(NetConfig::default());
    assert!(LoraSet::new(&net, 16, 16.0, 0).is_ok());
    assert!(matches!(LoraSet::new(&net, 17, 17.0, 0), Err(Error::InvalidArgument(_))));
    assert!(matches!(attach(net, 0, 0), Err(Error::InvalidArgument(_))));
}

#[test]
fn detach_returns_the_untouched_base() {
    let net = DenoiserNet::new(NetConfig { init_seed: 4, ..NetConfig::default() });
    let adapted = attach(net.clone(), 8, 1).unwrap();
    assert!(adapted.lora.is_identity());
    let (base, lora) = detach(adapted);
    assert_eq!(base, net);
    assert_eq!(lora.rank, 8);
}

#[test]
fn zero_adapters_reproduce_the_base_loss() {
    let net = DenoiserNet::new(NetConfig::default());
    let lora = LoraSet::new(&net, 4, 4.0, 2).unwrap();
    let (z, cams) = scene_views(1);
    let s = schedule();
    for (t, seed) in [(1, 1), (100, 2), (999, 3)] {
        let eps = noise(seed, z.shape());
        let a = identity_loss(&net, None, &s, &z, &cams, t, &eps).unwrap();
        let b = identity_loss(&net, Some(&lora), &s, &z, &cams, t, &eps).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn zero_steps_leave_identity_adapters() {
    let net = DenoiserNet::new(NetConfig::default());
    let (z, cams) = scene_views(2);
    let cfg = FinetuneConfig { steps: 0, rank: 4, ..FinetuneConfig::default() };
    let r = finetune_identity(&net, &schedule(), &z, &cams, &cfg, |_| panic!("no steps expected")).unwrap();
    assert!(r.lora.is_identity());
    assert!(r.losses.is_empty());
}

#[test]
fn finetune_shares_t_and_freezes_the_base() {
    let net = DenoiserNet::new(NetConfig::default());
    let before = net.clone();
    let (z, cams) = scene_views(3);
    let cfg = FinetuneConfig { steps: 12, rank: 4, seed: 5, ..FinetuneConfig::default() };
    let mut seen = Vec::new();
    let r = finetune_identity(&net, &schedule(), &z, &cams, &cfg, |s| seen.push(s.clone())).unwrap();
    assert_eq!(net, before);
    assert_eq!(seen.len(), 12);
    for (i, s) in seen.iter().enumerate() {
        assert_eq!(s.step, i);
        assert_eq!(s.timesteps.len(), 4);
        assert!(s.timesteps.iter().all(|&t| t == s.timesteps[0] && (1..=1000).contains(&t)));
        assert_eq!(s.loss, r.losses[i]);
    }
    assert!(!r.lora.is_identity());

    let again = finetune_identity(&net, &schedule(), &z, &cams, &cfg, |_| {}).unwrap();
    assert_eq!(again.lora, r.lora);
    assert_eq!(again.losses, r.losses);
}

#[test]
fn finetune_lowers_low_noise_reconstruction_loss() {
    let net = DenoiserNet::new(NetConfig { init_seed: 8, ..NetConfig::default() });
    let (z, cams) = scene_views(4);
    let s = schedule();
    let cfg = FinetuneConfig { seed: 6, ..FinetuneConfig::default() };
    assert_eq!((cfg.steps, cfg.learning_rate, cfg.rank, cfg.views), (300, 5e-4, 16, 4));
    let r = finetune_identity(&net, &s, &z, &cams, &cfg, |_| {}).unwrap();
    let zero = LoraSet::new(&net, cfg.rank, cfg.rank as f64, 0).unwrap();
    let (mut before, mut after) = (0.0, 0.0);
    for seed in 0..8 {
        let eps = noise(100 + seed, z.shape());
        before += identity_loss(&net, Some(&zero), &s, &z, &cams, 100, &eps).unwrap();
        after += identity_loss(&net, Some(&r.lora), &s, &z, &cams, 100, &eps).unwrap();
    }
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn finetune_needs_four_views() {
    let net = DenoiserNet::new(NetConfig::default());
    let (z, cams) = scene_views(5);
    let s = schedule();
    let cfg = FinetuneConfig { views: 3, ..FinetuneConfig::default() };
    assert!(matches!(finetune_identity(&net, &s, &z, &cams, &cfg, |_| {}), Err(Error::ViewCount { .. })));
    let three = Tensor::stack(&[z.index0(0).unwrap(), z.index0(1).unwrap(), z.index0(2).unwrap()]).unwrap();
    let cfg = FinetuneConfig { steps: 1, ..FinetuneConfig::default() };
    assert!(matches!(finetune_identity(&net, &s, &three, &cams, &cfg, |_| {}), Err(Error::ViewCount { .. })));
    let bad = FinetuneConfig { learning_rate: 0.0, ..FinetuneConfig::default() };
    assert!(matches!(finetune_identity(&net, &s, &z, &cams, &bad, |_| {}), Err(Error::Config(_))));
}
