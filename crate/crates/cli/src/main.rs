use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use nalgebra::Vector3;

use vasplat_core::fusion::{write_mesh, MeshFormat};
use vasplat_core::gradcheck::suite::{run_suite, MAX_GAUSSIANS};
use vasplat_core::gradcheck::GradCheckConfig;
use vasplat_core::imageproc::Image;
use vasplat_core::io::{load_cloud, save_png, write_floatmap, FloatMapHeader};
use vasplat_core::metrics::{psnr, ssim_score, EvalReport};
use vasplat_core::pipeline::{ablation_csv, reconstruct_mesh, run_preset, score_mesh, MeshParams, DEFAULT_F1_THRESHOLD};
use vasplat_core::scenes::{generate_scene, load_dataset, Dataset, SceneConfig, SceneKind, TextureKind};
use vasplat_core::trainer::{train, train_from, Preset, TrainConfig, TrainData, TrainOptions, CHECKPOINT_FILE};
use vasplat_core::{render, Error, RenderSettings};

/// Gaussian splatting with multi-view alignment losses, at desk scale.
#[derive(Parser, Debug)]
#[command(name = "vasplat", version, about)]
struct Cli {
    /// Worker threads (default: all logical cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ray trace a synthetic dataset.
    Generate(GenerateArgs),
    /// Optimise a Gaussian cloud on a dataset.
    Train(TrainArgs),
    /// Render colour, depth and normal maps from a checkpoint.
    Render(RenderArgs),
    /// Fuse rendered depths of all views and extract a mesh.
    Mesh(MeshArgs),
    /// Score a mesh (and optionally a checkpoint's renders) against ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of every loss gradient on seeded scenes.
    Gradcheck(GradcheckArgs),
    /// Train each loss-removal preset and compare the reconstructions.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value = "sphere")]
    kind: SceneKind,
    #[arg(long, default_value = "checker")]
    texture: TextureKind,
    #[arg(long, default_value_t = 16)]
    views: usize,
    #[arg(long, default_value_t = 128)]
    res: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainingFlags {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preset: Option<Preset>,
}

impl TrainingFlags {
    /// Defaults, then the config file, then flags.
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        if let Some(n) = self.iters {
            cfg.set_iterations(n);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.preset {
            cfg.preset = p;
        }
        cfg.validate()?;
        for (k, v) in cfg.to_key_values() {
            info!("config {k} = {v}");
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Resume from this cloud instead of the configured initialisation.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainingFlags,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated view ids (default: all).
    #[arg(long, value_delimiter = ',')]
    views: Vec<usize>,
}

#[derive(Args, Debug)]
struct MeshArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output mesh; `.ply` or `.obj`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = vasplat_core::pipeline::DEFAULT_VOXEL)]
    voxel: f64,
    #[arg(long, default_value_t = vasplat_core::pipeline::DEFAULT_TRUNCATION)]
    truncation: f64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    mesh: PathBuf,
    /// Also report PSNR/SSIM of this cloud's renders against the images.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Distance threshold for precision and recall.
    #[arg(long, default_value_t = DEFAULT_F1_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics JSON path (default: print to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    scenes: usize,
    #[arg(long, default_value_t = 30)]
    gaussians: usize,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Directory for `ablation.csv` (default: the scene directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated presets (default: all).
    #[arg(long, value_delimiter = ',')]
    presets: Vec<Preset>,
    #[arg(long, default_value_t = DEFAULT_F1_THRESHOLD)]
    threshold: f64,
    #[command(flatten)]
    flags: TrainingFlags,
}

/// Bad input that the user can fix: exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Invalid(String);

fn is_validation(e: &anyhow::Error) -> bool {
    if e.downcast_ref::<Invalid>().is_some() {
        return true;
    }
    matches!(
        e.downcast_ref::<Error>(),
        Some(
            Error::BadConfig(_)
                | Error::TooFewViews { .. }
                | Error::MissingCameras(_)
                | Error::ResolutionMismatch { .. }
                | Error::BadJson(_)
                | Error::BadHeader(_)
                | Error::UnsupportedFormat(_)
                | Error::InvalidCamera(_)
                | Error::ChannelMismatch { .. }
        )
    )
}

fn dataset(dir: &Path) -> Result<Dataset> {
    Ok(load_dataset(dir)?)
}

fn gt_points(ds: &Dataset) -> Result<Vec<Vector3<f64>>> {
    ds.load_gt_points()?.ok_or_else(|| Invalid(format!("{} has no gt_points.ply", ds.root.display())).into())
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let cfg = SceneConfig::new(a.kind, a.texture, a.views, a.res, a.seed);
    let ds = generate_scene(&cfg, &a.out)?;
    println!("wrote {} views to {}", ds.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.flags.resolve()?;
    let ds = dataset(&a.scene)?;
    let data = TrainData::from_dataset(&ds)?;
    let opts = TrainOptions { out_dir: Some(a.out.clone()) };
    let out = match &a.checkpoint {
        Some(p) => {
            let mut cloud = load_cloud(p)?;
            cloud.set_sh_degree(cfg.sh_degree)?;
            train_from(&data, &cfg, &opts, cloud)?
        }
        None => train(&data, &cfg, &opts)?,
    };
    let last = out.log.steps.last().map_or(f64::NAN, |r| r.total);
    println!(
        "trained {} steps: {} gaussians, final loss {last:.6}; checkpoint {}",
        out.log.steps.len(),
        out.cloud.len(),
        a.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let ds = dataset(&a.scene)?;
    let cloud = load_cloud(&a.checkpoint)?;
    let views: Vec<usize> = if a.views.is_empty() { (0..ds.len()).collect() } else { a.views.clone() };
    if let Some(v) = views.iter().find(|v| **v >= ds.len()) {
        bail!(Invalid(format!("view {v} out of range (dataset has {})", ds.len())));
    }
    let settings = RenderSettings { background: ds.background(), keep_records: false, ..RenderSettings::default() };
    for sub in ["color", "depth", "normal"] {
        std::fs::create_dir_all(a.out.join(sub))?;
    }
    for &v in &views {
        let cam = &ds.cameras[v];
        let b = render(&cloud, cam, &settings)?;
        save_png(&Image::from_rgb(b.width, b.height, &b.color)?, &a.out.join(format!("color/{v:04}.png")))?;
        let h = FloatMapHeader { width: b.width, height: b.height, channels: 1 };
        let depth: Vec<f64> = b.depth.iter().zip(&b.depth_valid).map(|(d, ok)| if *ok { *d } else { 0.0 }).collect();
        write_floatmap(&a.out.join(format!("depth/{v:04}.f32bin")), h, &depth)?;
        let normals: Vec<Vector3<f64>> = b
            .normal
            .iter()
            .map(|n| {
                let u = n.try_normalize(1e-12).unwrap_or_else(Vector3::zeros);
                (u + Vector3::repeat(1.0)) * 0.5
            })
            .collect();
        save_png(&Image::from_rgb(b.width, b.height, &normals)?, &a.out.join(format!("normal/{v:04}.png")))?;
    }
    println!("rendered {} views to {}", views.len(), a.out.display());
    Ok(())
}

fn cmd_mesh(a: &MeshArgs) -> Result<()> {
    let format = MeshFormat::from_path(&a.out)?;
    let ds = dataset(&a.scene)?;
    let cloud = load_cloud(&a.checkpoint)?;
    let p = MeshParams { voxel: a.voxel, truncation: a.truncation, bounds: None };
    let mesh = reconstruct_mesh(&cloud, &ds.cameras, ds.background(), &p)?;
    write_mesh(&mesh, &a.out, format)?;
    println!("mesh: {} vertices, {} triangles -> {}", mesh.vertices.len(), mesh.triangles.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if !(a.threshold > 0.0) {
        bail!(Invalid("threshold must be positive".into()));
    }
    let ds = dataset(&a.scene)?;
    let gt = gt_points(&ds)?;
    let mesh = vasplat_core::fusion::read_mesh(&a.mesh)?;
    let (c, f) = score_mesh(&mesh, &gt, a.threshold, a.seed)?;
    let (mut p, mut s) = (None, None);
    if let Some(path) = &a.checkpoint {
        let cloud = load_cloud(path)?;
        let settings = RenderSettings { background: ds.background(), keep_records: false, ..RenderSettings::default() };
        let (mut ps, mut ss) = (0.0, 0.0);
        for (i, cam) in ds.cameras.iter().enumerate() {
            let b = render(&cloud, cam, &settings)?;
            let img = Image::from_rgb(b.width, b.height, &b.color)?;
            let target = ds.load_image(i)?;
            ps += psnr(&img, &target)?;
            ss += ssim_score(&img, &target)?;
        }
        p = Some(ps / ds.len() as f64);
        s = Some(ss / ds.len() as f64);
    }
    let report = EvalReport::from_parts(c, f, p, s);
    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(path) => std::fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    if a.scenes == 0 || a.gaussians == 0 || a.gaussians > MAX_GAUSSIANS {
        bail!(Invalid(format!("need at least one scene and 1..={MAX_GAUSSIANS} gaussians")));
    }
    let summary = run_suite(a.seed, a.scenes, a.gaussians, &GradCheckConfig::default())?;
    let mut ok = true;
    for t in &summary {
        println!(
            "{:<20} checks {:>6}  kinks {:>4}  max rel err {:.3e}  (tol {:.0e})  {}",
            t.term,
            t.checks,
            t.kinks,
            t.max_rel_err,
            t.tolerance,
            if t.passed() { "ok" } else { "FAIL" }
        );
        if !t.passed() {
            if let Some(w) = &t.worst {
                println!("    worst: {} analytic {:.6e} numeric {:.6e}", w.name, w.analytic, w.numeric);
            }
            ok = false;
        }
    }
    if !ok {
        bail!("gradient check failed");
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let base = a.flags.resolve()?;
    let ds = dataset(&a.scene)?;
    let gt = gt_points(&ds)?;
    let data = TrainData::from_dataset(&ds)?;
    let presets: Vec<Preset> = if a.presets.is_empty() { Preset::ALL.to_vec() } else { a.presets.clone() };
    let mut rows = Vec::new();
    for p in presets {
        info!("ablation: training {p}");
        let row = run_preset(&data, &gt, &base, p, &MeshParams::default(), a.threshold)?;
        println!("{}", row.csv_row());
        rows.push(row);
    }
    let out = a.out.clone().unwrap_or_else(|| a.scene.clone());
    std::fs::create_dir_all(&out)?;
    let path = out.join("ablation.csv");
    std::fs::write(&path, ablation_csv(&rows))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(Invalid("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Mesh(a) => cmd_mesh(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VASPLAT_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
