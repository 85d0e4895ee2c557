use dragsplat_core::config::PipelineConfig;
use dragsplat_core::Error;

#[test]
fn defaults_carry_the_published_settings() {
    let c = PipelineConfig::default();
    assert_eq!((c.lora.steps, c.lora.learning_rate, c.lora.rank, c.lora.views), (300, 5e-4, 16, 4));
    assert_eq!((c.drag.ddim_steps, c.drag.guidance_scale, c.drag.max_iters), (50, 1.0, 80));
    assert_eq!((c.drag.r1, c.drag.r2, c.drag.lambda, c.drag.latent_lr), (1, 3, 0.1, 0.01));
    assert_eq!(c.drag.edit_stride(), 35);
    assert_eq!(c.refit.iterations, 5000);
    assert_eq!((c.diffusion.timesteps, c.diffusion.beta_start, c.diffusion.beta_end), (1000, 1e-4, 0.02));
    c.validate().unwrap();
}

#[test]
fn toml_round_trips_and_partial_files_fill_defaults() {
    let mut c = PipelineConfig::default();
    c.seed = 7;
    c.drag.max_iters = 12;
    c.lora.alpha = Some(8.0);
    c.rig.random_seed = Some(3);
    let text = c.to_toml().unwrap();
    assert_eq!(PipelineConfig::from_toml(&text).unwrap(), c);

    let partial = PipelineConfig::from_toml("seed = 2\n[drag]\nmax_iters = 5\nlambda = 0.5\n").unwrap();
    assert_eq!(partial.seed, 2);
    assert_eq!((partial.drag.max_iters, partial.drag.lambda), (5, 0.5));
    assert_eq!(partial.drag.r2, 3);
    assert_eq!(partial.lora, PipelineConfig::default().lora);
    assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
}

#[test]
fn bad_files_are_config_errors() {
    for text in [
        "[drag]\nmax_itres = 5\n",
        "bogus = 1\n",
        "[rig]\nwidth = 30\n",
        "[drag]\nr2 = 0\n",
        "[refit]\nssim_weight = 2.0\n",
        "[lora]\nsteps = \"many\"\n",
        "[diffusion]\nbeta_end = 2.0\n",
        "[pretrain]\nscenes = 0\n",
    ] {
        let err = PipelineConfig::from_toml(text).unwrap_err();
        assert!(matches!(err, Error::Config(_) | Error::InvalidArgument(_)), "{text}: {err:?}");
    }
}

#[test]
fn load_reads_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "[refit]\niterations = 500\n").unwrap();
    assert_eq!(PipelineConfig::load(&path).unwrap().refit.iterations, 500);
    assert!(matches!(PipelineConfig::load(dir.path().join("missing.toml")), Err(Error::Io(_))));
}

#[test]
fn pretrain_key_tracks_only_what_shapes_the_network() {
    let base = PipelineConfig::default();
    let mut other = base.clone();
    other.drag.max_iters = 3;
    other.lora.steps = 1;
    other.refit.iterations = 9;
    assert_eq!(base.pretrain_key(), other.pretrain_key());
    assert_eq!(base.pretrain_key().len(), 16);
    for change in [
        |c: &mut PipelineConfig| c.pretrain.steps = 10,
        |c: &mut PipelineConfig| c.rig.width = 64,
        |c: &mut PipelineConfig| c.diffusion.net.init_seed = 1,
        |c: &mut PipelineConfig| c.pretrain.data_seed = 2,
    ] {
        let mut c = base.clone();
        change(&mut c);
        assert_ne!(c.pretrain_key(), base.pretrain_key());
    }
}

#[test]
fn pretrained_nets_are_cached_by_key() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = PipelineConfig::default();
    c.rig.width = 16;
    c.rig.height = 16;
    c.pretrain.scenes = 2;
    c.pretrain.steps = 2;
    let mut calls = 0;
    let (a, _) = c.pretrained(dir.path(), |_, _| calls += 1).unwrap();
    assert_eq!(calls, 2);
    let (b, s) = c.pretrained(dir.path(), |_, _| panic!("should load from cache")).unwrap();
    assert_eq!(a, b);
    assert_eq!(s, c.diffusion.schedule().unwrap());
    assert!(dir.path().join(format!("toy-{}.ckpt", c.pretrain_key())).exists());
}
