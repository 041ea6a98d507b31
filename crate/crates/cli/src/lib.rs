//! `lgm` subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use lgm_core::camera::{normalize_poses, Camera, DEFAULT_FOV_Y_DEG, DEFAULT_RADIUS};
use lgm_core::config::RunConfig;
use lgm_core::gaussian::{decode_features, load_ply, save_ply};
use lgm_core::image::{load_pnm, save_ppm};
use lgm_core::mesh::{bake_colors_with, default_iso, eval_density, export_obj, marching_cubes};
use lgm_core::raster::render;
use lgm_core::tensor::Tensor;
use lgm_core::training::{gen_scene, view_inputs, Scene, Trainer, ViewSample};
use lgm_core::unet::{output_shape, UNetParams};
use lgm_core::verify::{run_suite, SUITES};
use lgm_core::{rng, Error};

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "path,seed";
/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl CliError {
    /// 2 for usage and input problems, 3 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Numerical(_) | CliError::Core(Error::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn input(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "lgm", version, about = "Multi-view images to 3D Gaussians")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scene archives and a manifest.
    GenData(GenDataArgs),
    /// Train the U-Net on a generated dataset.
    Train(TrainArgs),
    /// Predict Gaussians from four posed images.
    Infer(InferArgs),
    /// Render a splat file from orbit cameras.
    Render(RenderArgs),
    /// Extract a colored triangle mesh from a splat file.
    Mesh(MeshArgs),
    /// Run a finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Supplies `scenes` and `blobs` when the flags are absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub blobs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image resolution of the view pool.
    #[arg(long, default_value_t = 64)]
    pub res: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from a checkpoint directory instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint directory, or a file inside one.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub views: Vec<PathBuf>,
    /// One camera per line: 9 rotation entries (row-major), 3 position, fov_y radians.
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub splat: PathBuf,
    /// Degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub elevation: f64,
    /// Degrees, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,90,180,270", allow_negative_numbers = true)]
    pub azimuths: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub res: usize,
    /// Supplies the render settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    #[arg(long)]
    pub splat: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Supplies `mesh_resolution`, `mesh_iso` and `bake_views` when the flags are absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Defaults to half the largest opacity.
    #[arg(long)]
    pub iso: Option<f64>,
    #[arg(long)]
    pub views: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// rasterizer, chain, tensor or all.
    #[arg(long, default_value = "all")]
    pub suite: String,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Infer(a) => infer(&a).map(|_| ()),
        Command::Render(a) => render_views(&a),
        Command::Mesh(a) => mesh(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

/// Seed of scene `i` in a dataset generated with `seed`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    rng::stream(seed, 0x5c, i as u64).random()
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let data = run_config(a.config.as_deref(), &[])?.data;
    let (scenes, blobs) = (a.scenes.unwrap_or(data.scenes), a.blobs.unwrap_or(data.blobs));
    if scenes == 0 || blobs == 0 {
        return Err(input("--scenes and --blobs must be positive"));
    }
    fs::create_dir_all(&a.out).map_err(|e| input(format!("cannot create {}: {e}", a.out.display())))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for i in 0..scenes {
        let seed = scene_seed(a.seed, i);
        let name = format!("scene-{i:04}.lgma");
        gen_scene(seed, blobs, a.res)?.save(a.out.join(&name))?;
        writeln!(manifest, "{name},{seed}").expect("string write");
    }
    fs::write(a.out.join(MANIFEST), manifest)?;
    println!("wrote {scenes} scenes to {}", a.out.display());
    Ok(())
}

/// Scenes listed in `dir/manifest.csv`.
pub fn load_dataset(dir: &Path) -> CliResult<Vec<Scene>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| input(format!("missing dataset manifest {}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(input(format!("{} does not start with '{MANIFEST_HEADER}'", path.display())));
    }
    let scenes = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let file = l.split(',').next().unwrap_or_default();
            Scene::load(dir.join(file)).map_err(|e| input(format!("cannot load scene {file}: {e}")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if scenes.is_empty() {
        return Err(input(format!("{} lists no scenes", path.display())));
    }
    Ok(scenes)
}

fn run_config(file: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let pairs = overrides
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| input(format!("override '{kv}' is not key=value")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    cfg.apply(&pairs)?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let scenes = load_dataset(&a.data)?;
    let mut trainer = match &a.resume {
        Some(dir) => Trainer::load_checkpoint(dir)?,
        None => {
            let cfg = run_config(a.config.as_deref(), &a.overrides)?;
            Trainer::new(cfg.train, cfg.unet)?
        }
    };
    let res = trainer.unet.in_res;
    if let Some(s) = scenes.iter().find(|s| s.resolution() != res) {
        return Err(input(format!("dataset images are {0}x{0} but the model expects {res}x{res}", s.resolution())));
    }
    let metrics = trainer.run(&scenes, Some(&a.out))?;
    if let Some(m) = metrics.last() {
        println!(
            "step {} loss {:.6} psnr_in {:.2} psnr_novel {:.2}",
            m.step, m.loss, m.psnr_in, m.psnr_novel
        );
    }
    Ok(())
}

/// Parses the infer camera format for images of `res`×`res`.
pub fn parse_cameras(text: &str, res: usize) -> CliResult<Vec<Camera>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, l)| {
            let v = l
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| input(format!("camera line {}: bad number '{s}'", n + 1))))
                .collect::<CliResult<Vec<_>>>()?;
            if v.len() != 13 {
                return Err(input(format!("camera line {}: expected 13 numbers, got {}", n + 1, v.len())));
            }
            let rot = lgm_core::camera::Matrix3::from_row_slice(&v[..9]);
            let pos = lgm_core::camera::Vector3::new(v[9], v[10], v[11]);
            Camera::from_parts(rot, pos, v[12], res, res).map_err(|e| input(format!("camera line {}: {e}", n + 1)))
        })
        .collect()
}

/// The infer camera line of `cam`.
pub fn format_camera(cam: &Camera) -> String {
    let r = &cam.rotation;
    let mut nums: Vec<f64> = (0..9).map(|i| r[(i / 3, i % 3)]).collect();
    nums.extend(cam.position.iter());
    nums.push(cam.fov_y);
    nums.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(" ")
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

/// Writes the predicted Gaussians and returns how many there are. A
/// checkpoint with `config.cfg` but no `params.lgma` stands for the freshly
/// initialized model, whose zero head makes every feature exactly 0.
pub fn infer(a: &InferArgs) -> CliResult<usize> {
    let dir = checkpoint_dir(&a.checkpoint);
    let cfg = RunConfig::load(dir.join("config.cfg"))?.unet;
    let res = cfg.in_res;
    if a.views.len() != cfg.views {
        return Err(input(format!("the model takes {} views, got {}", cfg.views, a.views.len())));
    }
    let text = fs::read_to_string(&a.cameras).map_err(|e| input(format!("cannot read {}: {e}", a.cameras.display())))?;
    let cams = parse_cameras(&text, res)?;
    if cams.len() != cfg.views {
        return Err(input(format!("camera file has {} poses, expected {}", cams.len(), cfg.views)));
    }
    let cams = normalize_poses(&cams)?;
    let mut views = Vec::with_capacity(cams.len());
    for (path, camera) in a.views.iter().zip(cams) {
        let img = load_pnm(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
        if img.shape() != [3, res, res] {
            return Err(input(format!(
                "{}: expected a {res}x{res} RGB image, got {:?} (channels, height, width)",
                path.display(),
                img.shape()
            )));
        }
        views.push(ViewSample {
            image: img.cast(),
            alpha: Tensor::zeros(&[1, res, res]),
            camera,
        });
    }
    let x = view_inputs(&views)?;
    let params_path = dir.join("params.lgma");
    let features: Tensor<f32> = if params_path.exists() {
        UNetParams::<f32>::load(&cfg, &params_path)?.predict(&x)?
    } else {
        log::info!("no params.lgma in {}; using the untrained model", dir.display());
        Tensor::zeros(&output_shape(&cfg)?)
    };
    let set = decode_features(&features, cfg.k)?;
    save_ply(&set, &a.out)?;
    println!("gaussians: {}", set.len());
    Ok(set.len())
}

/// File name of the render at `azimuth` degrees.
pub fn render_name(azimuth: f64) -> String {
    format!("azimuth_{azimuth}.ppm")
}

pub fn render_views(a: &RenderArgs) -> CliResult<()> {
    if a.res == 0 || a.azimuths.is_empty() {
        return Err(input("--res must be positive and --azimuths non-empty"));
    }
    let set = load_ply(&a.splat)?;
    let settings = run_config(a.config.as_deref(), &[])?.render.settings(a.res, a.res);
    fs::create_dir_all(&a.out)?;
    for &az in &a.azimuths {
        let cam = Camera::orbit(
            a.elevation.to_radians(),
            az.to_radians(),
            DEFAULT_RADIUS,
            DEFAULT_FOV_Y_DEG.to_radians(),
            a.res,
            a.res,
        )?;
        let out = render(&set, &cam, &settings)?;
        let path = a.out.join(render_name(az));
        save_ppm(&out.rgb, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn mesh(a: &MeshArgs) -> CliResult<()> {
    let cfg = run_config(a.config.as_deref(), &[])?.mesh;
    let set = load_ply(&a.splat)?;
    let grid = eval_density(&set, a.resolution.unwrap_or(cfg.resolution))?;
    let iso = a.iso.or(cfg.iso).unwrap_or_else(|| default_iso(&set));
    let mesh = marching_cubes(&grid, iso);
    if mesh.is_empty() {
        return Err(input(format!("iso level {iso} yields an empty mesh (grid max {})", grid.max())));
    }
    let mesh = bake_colors_with(&mesh, &set, a.views.unwrap_or(cfg.bake_views), &grid, iso)?;
    export_obj(&mesh, &a.out)?;
    println!("vertices: {} faces: {}", mesh.vertices.len(), mesh.faces.len());
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let suites: Vec<&str> = if a.suite == "all" {
        SUITES.to_vec()
    } else if SUITES.contains(&a.suite.as_str()) {
        vec![a.suite.as_str()]
    } else {
        return Err(input(format!("unknown suite '{}', expected all or one of {SUITES:?}", a.suite)));
    };
    let mut failed = Vec::new();
    for name in suites {
        let r = run_suite(name)?;
        println!(
            "{name}: max rel. error {:.3e} over {} entries ({} excluded)",
            r.max_rel_error, r.checked, r.excluded
        );
        if !(r.max_rel_error < GRADCHECK_TOLERANCE) {
            println!("  worst: {}", r.worst);
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check above {GRADCHECK_TOLERANCE:e}: {failed:?}")))
    }
}
