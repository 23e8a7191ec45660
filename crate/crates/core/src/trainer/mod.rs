//! Optimisation loop: phased loss schedule, source-view selection, Adam and
//! densification.

pub mod adam;
mod config;
pub mod densify;


use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{AdamState, GroupRates};
pub use config::{parse_key_values, InitStrategy, LearningRates, Phase, PhaseSchedule, Preset, TrainConfig};
pub use densify::{densify_and_prune, DensifyOutcome, DensifyParams, DensifyStats};

use crate::error::{Error, Result};
use crate::features::{builtin_features, FeatureLoader};
use crate::gaussians::{init_from_points, init_random_cube, init_random_sphere, GaussianCloud};
use crate::geometry::{look_at_center, Camera};
use crate::imageproc::Image;
use crate::io::save_cloud;
use crate::losses::{evaluate, LossTerms, SourceFrame, ViewTarget};
use crate::rasterizer::{render, render_backward, RenderSettings};
use crate::scenes::Dataset;

/// The `n` other cameras closest to `reference` by centre distance plus
/// `0.5 · (1 − cos θ)` between optical axes; ties go to the lower id.
pub fn select_source_views(reference: usize, cameras: &[Camera], n: usize) -> Result<Vec<usize>> {
    if cameras.len() <= n || reference >= cameras.len() {
        return Err(Error::TooFewViews { available: cameras.len(), required: n + 1 });
    }
    let r = &cameras[reference].pose;
    let mut scored: Vec<(f64, usize)> = cameras
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != reference)
        .map(|(i, c)| {
            let d = (c.pose.center() - r.center()).norm();
            let cos = c.pose.forward().dot(&r.forward()).clamp(-1.0, 1.0);
            (d + 0.5 * (1.0 - cos), i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(n).map(|(_, i)| i).collect())
}

/// `1.1 ×` the largest distance of a camera centre from their mean.
pub fn scene_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let mean = cameras.iter().map(|c| c.pose.center()).sum::<Vector3<f64>>() / cameras.len() as f64;
    let r = cameras.iter().map(|c| (c.pose.center() - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 { 1.1 * r } else { 1.0 }
}

/// Views and initial points ready for training.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub views: Vec<ViewTarget>,
    pub init_points: Option<(Vec<Vector3<f64>>, Option<Vec<Vector3<f64>>>)>,
    pub background: Vector3<f64>,
}

impl TrainData {
    /// Loads images, features (precomputed when the dataset has them, else
    /// the built-in descriptor) and the initial point cloud.
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let mut loader = FeatureLoader::new();
        let mut views = Vec::with_capacity(ds.len());
        for (i, cam) in ds.cameras.iter().enumerate() {
            let img = ds.load_image(i)?;
            let feats = match &ds.features {
                Some(paths) => loader.load(&paths[i], i, cam.width(), cam.height())?,
                None => builtin_features(&img, i),
            };
            views.push(ViewTarget::new(cam.clone(), img, Some(feats))?);
        }
        let init_points = ds.load_init_points()?.map(|p| (p.vertices, p.colors));
        Ok(Self { views, init_points, background: ds.background() })
    }

    pub fn from_images(cameras: &[Camera], images: Vec<Image>, background: Vector3<f64>) -> Result<Self> {
        let views = cameras
            .iter()
            .zip(images)
            .enumerate()
            .map(|(i, (c, img))| {
                let f = builtin_features(&img, i);
                ViewTarget::new(c.clone(), img, Some(f))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { views, init_points: None, background })
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }
}

/// Builds the starting cloud for `cfg.init`.
pub fn initial_cloud(data: &TrainData, cfg: &TrainConfig) -> Result<GaussianCloud> {
    let cams = data.cameras();
    let mut cloud = match cfg.init {
        InitStrategy::Points => {
            let (p, c) = data
                .init_points
                .as_ref()
                .ok_or_else(|| Error::BadConfig("point initialisation needs an init point cloud".into()))?;
            init_from_points(p, c.as_deref())?
        }
        InitStrategy::Sphere | InitStrategy::Cube => {
            // Object roughly fills the middle third of the camera distance.
            let center = look_at_center(&cams);
            let dist = cams.iter().map(|c| (c.pose.center() - center).norm()).sum::<f64>() / cams.len().max(1) as f64;
            let r = dist / 3.0;
            if cfg.init == InitStrategy::Sphere {
                init_random_sphere(cfg.init_count, r, center, cfg.seed)?
            } else {
                init_random_cube(cfg.init_count, r, center, cfg.seed)?
            }
        }
    };
    cloud.set_sh_degree(cfg.sh_degree)?;
    Ok(cloud)
}

/// One log row per optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub view: usize,
    pub phase: Phase,
    pub gaussians: usize,
    pub terms: LossTerms,
    pub total: f64,
    /// False when the step was skipped because of a non-finite gradient.
    pub applied: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub densify: Vec<(usize, DensifyOutcome)>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,view,phase,gaussians,total,image,normal_consistency,normal_smooth,photometric,feature,applied";

    /// Timing-free CSV, so identical runs produce identical bytes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.steps {
            let t = &r.terms;
            let _ = writeln!(
                s,
                "{},{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{}",
                r.step,
                r.view,
                r.phase.name(),
                r.gaussians,
                r.total,
                t.image,
                t.normal_consistency,
                t.normal_smooth,
                t.photometric,
                t.feature,
                u8::from(r.applied)
            );
        }
        s
    }

    /// Mean total loss over steps `[from, to)`.
    pub fn mean_total(&self, from: usize, to: usize) -> Option<f64> {
        let v: Vec<f64> = self.steps.iter().filter(|r| r.step >= from && r.step < to).map(|r| r.total).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub cloud: GaussianCloud,
    pub log: TrainLog,
}

/// Where training writes its checkpoint and log; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "cloud.vsc";
pub const DIAGNOSTIC_FILE: &str = "diverged.vsc";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Epoch-wise shuffled view order.
struct ViewOrder {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl ViewOrder {
    fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, epoch: 0, order: Vec::new(), pos: 0 }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            self.order.shuffle(&mut rng);
            self.epoch += 1;
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn write_outputs(dir: &Path, cloud: &GaussianCloud, log: &TrainLog, cfg: &TrainConfig, checkpoint: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_cloud(cloud, &dir.join(checkpoint))?;
    std::fs::write(dir.join(LOG_FILE), log.to_csv())?;
    let cfg_text: String = cfg.to_key_values().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    std::fs::write(dir.join(CONFIG_FILE), cfg_text)?;
    Ok(())
}

/// Trains from the configured initialisation.
pub fn train(data: &TrainData, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutput> {
    let cloud = initial_cloud(data, cfg)?;
    train_from(data, cfg, opts, cloud)
}

/// Trains starting from `cloud`.
pub fn train_from(data: &TrainData, cfg: &TrainConfig, opts: &TrainOptions, mut cloud: GaussianCloud) -> Result<TrainOutput> {
    cfg.validate()?;
    let n_views = data.views.len();
    let cameras = data.cameras();
    let needs_sources = (0..cfg.iterations).any(|s| cfg.terms_at(s).multi_view());
    let sources: Vec<Vec<usize>> = if needs_sources || n_views > cfg.weights.num_sources {
        (0..n_views).map(|r| select_source_views(r, &cameras, cfg.weights.num_sources)).collect::<Result<_>>()?
    } else if n_views == 0 {
        return Err(Error::TooFewViews { available: 0, required: 1 });
    } else {
        vec![Vec::new(); n_views]
    };

    let extent = scene_extent(&cameras);
    let settings = RenderSettings { background: data.background, tile_size: cfg.tile_size, ..RenderSettings::default() };
    let source_settings = RenderSettings { keep_records: false, ..settings.clone() };
    let dparams = DensifyParams {
        grad_threshold: cfg.densify_grad_threshold,
        split_scale: cfg.split_fraction * extent,
        prune_opacity: cfg.prune_opacity,
        max_gaussians: cfg.max_gaussians,
    };
    let mut adam = AdamState::new(&cloud);
    let mut stats = DensifyStats::new(cloud.len());
    let mut order = ViewOrder::new(n_views, cfg.seed);
    let mut log = TrainLog::default();
    // Latest depth of each view from its own reference pass, at most about
    // two epochs old. Source depths only feed the stop-gradient gates.
    let mut depth_cache: Vec<Option<(Vec<f64>, Vec<bool>)>> = vec![None; n_views];
    let started = Instant::now();

    for step in 0..cfg.iterations {
        let r = order.next();
        let view = &data.views[r];
        let active = cfg.terms_at(step);
        let buf = render(&cloud, &view.camera, &settings)?;
        if active.multi_view() {
            for &s in &sources[r] {
                if depth_cache[s].is_none() {
                    let b = render(&cloud, &data.views[s].camera, &source_settings)?;
                    depth_cache[s] = Some((b.depth, b.depth_valid));
                }
            }
        }
        let frames: Vec<SourceFrame> = if active.multi_view() {
            sources[r]
                .iter()
                .map(|&s| {
                    let (depth, valid) = depth_cache[s].as_ref().expect("filled above");
                    SourceFrame { target: &data.views[s], depth, depth_valid: valid }
                })
                .collect()
        } else {
            Vec::new()
        };
        let report = evaluate(&buf, view, &frames, &cfg.weights, active, None)?;
        depth_cache[r] = Some((buf.depth.clone(), buf.depth_valid.clone()));
        let mut record = StepRecord {
            step,
            view: r,
            phase: cfg.phases.phase_at(step),
            gaussians: cloud.len(),
            terms: report.terms,
            total: report.total,
            applied: true,
        };
        if !report.total.is_finite() {
            log.steps.push(record);
            if let Some(dir) = &opts.out_dir {
                write_outputs(dir, &cloud, &log, cfg, DIAGNOSTIC_FILE)?;
            }
            return Err(Error::NonFiniteLoss { step });
        }

        let grads = render_backward(&cloud, &buf, &report.grads)?;
        let rates = cfg.lr.at(step, cfg.iterations, extent);
        match adam.step(&mut cloud, &grads, &rates) {
            Ok(()) => stats.accumulate(&grads, 0.5 * buf.width.max(buf.height) as f64),
            Err(Error::NonFiniteGradient(group)) => {
                log::warn!("step {step}: non-finite {group} gradient, update skipped");
                record.applied = false;
            }
            Err(e) => return Err(e),
        }
        log.steps.push(record);

        let done = step + 1;
        if cfg.densify_at(done) {
            let seed = cfg.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ done as u64;
            let out = densify_and_prune(&mut cloud, &mut adam, &stats, &dparams, seed);
            log::debug!("step {done}: densify {out:?}, {} gaussians", cloud.len());
            log.densify.push((done, out));
            stats = DensifyStats::new(cloud.len());
        }
        if done % 100 == 0 {
            log::info!(
                "step {done}/{} loss {:.5} gaussians {} ({:.1}s)",
                cfg.iterations,
                report.total,
                cloud.len(),
                started.elapsed().as_secs_f64()
            );
        }
    }

    if let Some(dir) = &opts.out_dir {
        write_outputs(dir, &cloud, &log, cfg, CHECKPOINT_FILE)?;
    }
    Ok(TrainOutput { cloud, log })
}
