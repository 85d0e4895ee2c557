//! The `dragsplat` command line. Failures print one JSON object on stderr.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dragsplat_core::camera::CameraPose;
use dragsplat_core::config::PipelineConfig;
use dragsplat_core::diffusion::checkpoint::{decode_lora, encode_lora};
use dragsplat_core::gsplat::{encode_ply, load_ply, GaussianCloud};
use dragsplat_core::render::{splat, RenderOptions};
use dragsplat_core::{Error, Result};

use crate::api::{self, ServiceConfig, DATA_DIR_ENV, PORT_ENV};
use crate::pipeline::{self, check_cameras, decode_views, demo_case, encode_views, json_line, Model, Picks};
use crate::store::write_atomic;

pub const CACHE_DIR_ENV: &str = "DRAGSPLAT_CACHE_DIR";

#[derive(Parser, Debug)]
#[command(name = "dragsplat", version, about = "Multi-view drag editing of 3D Gaussian scenes")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// TOML config; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set drag.lambda=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Top-level seed of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Where pretrained networks are cached.
    #[arg(long, global = true, env = CACHE_DIR_ENV, default_value = "dragsplat-cache")]
    pub cache_dir: PathBuf,
    /// JSON array of four cameras; defaults to the orbit rig.
    #[arg(long, global = true)]
    pub cameras: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the effective config as TOML.
    Config,
    /// Pretrain the toy denoiser into the cache.
    Pretrain,
    /// Render the four views of a PLY.
    Render {
        #[arg(long)]
        ply: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        splat_scale: Option<f64>,
    },
    /// Fit identity adapters to a scene's views.
    Lora {
        #[arg(long)]
        ply: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Drag the picks in the four views.
    Drag {
        #[arg(long)]
        ply: PathBuf,
        #[arg(long)]
        picks: PathBuf,
        /// Adapters from `lora`; omitted means the bare network.
        #[arg(long)]
        lora: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Refit the masked Gaussians to edited views.
    Refit {
        #[arg(long)]
        ply: PathBuf,
        #[arg(long)]
        picks: PathBuf,
        /// `edited.json` written by `drag`.
        #[arg(long)]
        edited: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// LoRA, drag and refit end to end. Without `--ply` a generated scene
    /// and drag are taken from the seed.
    Pipeline {
        #[arg(long, requires = "picks")]
        ply: Option<PathBuf>,
        #[arg(long, requires = "ply")]
        picks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Run the HTTP and WebSocket service.
    Serve {
        #[arg(long, env = PORT_ENV, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, env = DATA_DIR_ENV, default_value = "dragsplat-data")]
        data_dir: PathBuf,
    },
}

/// Applies `section.key=value` to a TOML document. The value is parsed as
/// TOML and falls back to a plain string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in path {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

pub fn load_config(common: &Common) -> Result<PipelineConfig> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for o in &common.overrides {
        apply_override(&mut doc, o)?;
    }
    let mut cfg = PipelineConfig::from_toml(&doc.to_string())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn cameras(common: &Common, cloud: &GaussianCloud, cfg: &PipelineConfig) -> Result<Vec<CameraPose>> {
    let cams = match &common.cameras {
        Some(p) => read_json(p)?,
        None => pipeline::default_cameras(cloud, cfg)?,
    };
    check_cameras(&cams)?;
    Ok(cams)
}

fn load_scene(ply: &Path, picks: Option<&Picks>) -> Result<GaussianCloud> {
    let mut cloud = load_ply(ply)?;
    if let Some(mask) = picks.and_then(|p| p.mask.as_ref()) {
        cloud.set_mask(mask)?;
    }
    Ok(cloud)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn model(common: &Common, cfg: &PipelineConfig) -> Result<Model> {
    pipeline::load_model(cfg, &common.cache_dir)
}

fn write_views(dir: &Path, prefix: &str, pngs: Vec<Vec<u8>>) -> Result<()> {
    for (v, png) in pngs.iter().enumerate() {
        write_atomic(&dir.join(format!("{prefix}_{v}.png")), png)?;
    }
    Ok(())
}

fn render_pngs(cloud: &GaussianCloud, cams: &[CameraPose], options: RenderOptions) -> Result<Vec<Vec<u8>>> {
    cams.iter().map(|c| splat(cloud, c, options)?.to_png()).collect()
}

/// Runs drag and writes `edited.json`, `edited_<v>.png`, `telemetry.jsonl`
/// and `summary.json` into `out`.
#[allow(clippy::too_many_arguments)]
fn drag_into(
    model: &Model,
    lora: Option<&dragsplat_core::lora::LoraSet>,
    cloud: &GaussianCloud,
    cams: &[CameraPose],
    picks: &Picks,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<dragsplat_core::numerics::Tensor<f32>> {
    create_dir(out)?;
    let mut telemetry = String::new();
    let result = pipeline::drag(model, lora, cloud, cams, &picks.point_pick()?, cfg, |rec| {
        log::info!("drag iter {} loss {:.5}", rec.iter, rec.loss);
        telemetry.push_str(&json_line(rec));
    })?;
    write_atomic(&out.join("telemetry.jsonl"), telemetry.as_bytes())?;
    write_atomic(&out.join("edited.json"), &encode_views(&result.edited))?;
    let pngs = pipeline::edited_images(&result.edited)?.iter().map(|i| i.to_png(None)).collect::<Result<Vec<_>>>()?;
    write_views(out, "edited", pngs)?;
    let summary = json!({
        "iterations": result.telemetry.len(),
        "converged": result.converged,
        "initial_distance": result.initial_distance,
        "final_distance": result.final_distance,
    });
    write_atomic(&out.join("summary.json"), summary.to_string().as_bytes())?;
    Ok(result.edited)
}

fn refit_into(
    cloud: &GaussianCloud,
    edited: &dragsplat_core::numerics::Tensor<f32>,
    cams: &[CameraPose],
    cfg: &PipelineConfig,
    ply: &Path,
    telemetry_path: &Path,
) -> Result<GaussianCloud> {
    let mut telemetry = String::new();
    let r = pipeline::refit_to_views(cloud, edited, cams, cfg, |rec| {
        log::info!("refit iter {} loss {:.5}", rec.iter, rec.loss);
        telemetry.push_str(&json_line(rec));
    })?;
    write_atomic(telemetry_path, telemetry.as_bytes())?;
    write_atomic(ply, &encode_ply(&r.cloud))?;
    Ok(r.cloud)
}

/// Executes one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let mut cfg = load_config(common)?;
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()?),
        Command::Pretrain => {
            model(common, &cfg)?;
            let path = common.cache_dir.join(format!("toy-{}.ckpt", cfg.pretrain_key()));
            println!("{}", json!({ "checkpoint": path, "key": cfg.pretrain_key() }));
        }
        Command::Render { ply, out, splat_scale } => {
            let cloud = load_ply(&ply)?;
            let cams = cameras(common, &cloud, &cfg)?;
            let options = RenderOptions { splat_scale: splat_scale.unwrap_or(cfg.render.splat_scale), ..cfg.render };
            create_dir(&out)?;
            write_views(&out, "view", render_pngs(&cloud, &cams, options)?)?;
            write_atomic(&out.join("cameras.json"), &serde_json::to_vec_pretty(&cams)?)?;
        }
        Command::Lora { ply, out, steps } => {
            if let Some(s) = steps {
                cfg.lora.steps = s;
            }
            cfg.validate()?;
            let cloud = load_ply(&ply)?;
            let cams = cameras(common, &cloud, &cfg)?;
            let m = model(common, &cfg)?;
            let r = pipeline::fit_lora(&m, &cloud, &cams, &cfg, |s| {
                if s.step % 50 == 0 {
                    log::info!("lora step {} loss {:.5}", s.step, s.loss);
                }
            })?;
            write_atomic(&out, &encode_lora(&r.lora, m.net.config())?)?;
        }
        Command::Drag { ply, picks, lora, out, max_iters } => {
            if let Some(n) = max_iters {
                cfg.drag.max_iters = n;
            }
            cfg.validate()?;
            let picks: Picks = read_json(&picks)?;
            let cloud = load_scene(&ply, Some(&picks))?;
            let cams = cameras(common, &cloud, &cfg)?;
            let m = model(common, &cfg)?;
            let adapters = match lora {
                Some(p) => Some(decode_lora(&std::fs::read(p)?)?.0),
                None => None,
            };
            drag_into(&m, adapters.as_ref(), &cloud, &cams, &picks, &cfg, &out)?;
        }
        Command::Refit { ply, picks, edited, out, iterations } => {
            if let Some(n) = iterations {
                cfg.refit.iterations = n;
            }
            cfg.validate()?;
            let picks: Picks = read_json(&picks)?;
            let cloud = load_scene(&ply, Some(&picks))?;
            let cams = cameras(common, &cloud, &cfg)?;
            let views = decode_views(&std::fs::read(edited)?)?;
            refit_into(&cloud, &views, &cams, &cfg, &out, &out.with_extension("telemetry.jsonl"))?;
        }
        Command::Pipeline { ply, picks, out, max_iters } => {
            if let Some(n) = max_iters {
                cfg.drag.max_iters = n;
            }
            cfg.validate()?;
            let (cloud, picks) = match (ply, picks) {
                (Some(ply), Some(picks)) => {
                    let picks: Picks = read_json(&picks)?;
                    (load_scene(&ply, Some(&picks))?, picks)
                }
                _ => demo_case(cfg.seed)?,
            };
            let cams = cameras(common, &cloud, &cfg)?;
            create_dir(&out)?;
            let mut plain = cloud.clone();
            plain.clear_mask();
            write_atomic(&out.join("input.ply"), &encode_ply(&plain))?;
            write_atomic(&out.join("picks.json"), &serde_json::to_vec_pretty(&picks)?)?;
            write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
            let m = model(common, &cfg)?;
            let mut lora_log = String::new();
            let adapters = pipeline::fit_lora(&m, &cloud, &cams, &cfg, |s| lora_log.push_str(&json_line(s)))?.lora;
            write_atomic(&out.join("lora.jsonl"), lora_log.as_bytes())?;
            write_atomic(&out.join("lora.ckpt"), &encode_lora(&adapters, m.net.config())?)?;
            let edited = drag_into(&m, Some(&adapters), &cloud, &cams, &picks, &cfg, &out)?;
            let refit = refit_into(&cloud, &edited, &cams, &cfg, &out.join("edited.ply"), &out.join("refit.jsonl"))?;
            let mut plain = refit;
            plain.clear_mask();
            write_views(&out, "refit", render_pngs(&plain, &cams, cfg.render)?)?;
        }
        Command::Serve { port, host, data_dir } => {
            let app = api::App::open(ServiceConfig { data_dir, cache_dir: common.cache_dir.clone(), pipeline: cfg })?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(api::serve(app, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}

fn error_json(code: &str, message: &str) -> String {
    json!({ "error": code, "message": message }).to_string()
}

/// Parses the process arguments, runs, and returns the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", error_json("USAGE", e.to_string().trim()));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_json(e.code(), &e.to_string()));
            1
        }
    }
}
