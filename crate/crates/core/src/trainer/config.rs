//! Training configuration, loss-removal presets and the `key = value` file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{ActiveTerms, LossWeights};

use super::adam::GroupRates;

/// Loss-removal presets for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Full,
    OnlyImage,
    NoNormalConsistency,
    NoNormalSmooth,
    NoPhotometric,
    NoFeature,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::OnlyImage,
        Preset::NoNormalConsistency,
        Preset::NoNormalSmooth,
        Preset::NoPhotometric,
        Preset::NoFeature,
        Preset::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::OnlyImage => "only_LI",
            Preset::NoNormalConsistency => "no_nc",
            Preset::NoNormalSmooth => "no_ns",
            Preset::NoPhotometric => "no_p",
            Preset::NoFeature => "no_f",
        }
    }

    /// Terms this preset allows; the schedule decides when they switch on.
    pub fn mask(self) -> ActiveTerms {
        let mut m = ActiveTerms::ALL;
        match self {
            Preset::Full => {}
            Preset::OnlyImage => m = ActiveTerms::IMAGE_ONLY,
            Preset::NoNormalConsistency => m.normal_consistency = false,
            Preset::NoNormalSmooth => m.normal_smooth = false,
            Preset::NoPhotometric => m.photometric = false,
            Preset::NoFeature => m.feature = false,
        }
        m
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::BadConfig(format!("unknown preset `{s}`")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Color,
    SingleView,
    Photometric,
    Feature,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Color => "color",
            Phase::SingleView => "single_view",
            Phase::Photometric => "photometric",
            Phase::Feature => "feature",
        }
    }
}

/// Step boundaries: image loss only before `color_only_end`; normal terms
/// from there; photometric alignment from `single_view_end`; feature
/// alignment from `photometric_end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseSchedule {
    pub color_only_end: usize,
    pub single_view_end: usize,
    pub photometric_end: usize,
    pub feature_end: usize,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        Self { color_only_end: 700, single_view_end: 700, photometric_end: 1500, feature_end: 2000 }
    }
}

impl PhaseSchedule {
    pub fn phase_at(&self, step: usize) -> Phase {
        if step < self.color_only_end {
            Phase::Color
        } else if step < self.single_view_end {
            Phase::SingleView
        } else if step < self.photometric_end {
            Phase::Photometric
        } else {
            Phase::Feature
        }
    }

    pub fn terms_at(&self, step: usize) -> ActiveTerms {
        let mut t = ActiveTerms::IMAGE_ONLY;
        let p = self.phase_at(step);
        if p != Phase::Color {
            t.normal_consistency = true;
            t.normal_smooth = true;
        }
        if matches!(p, Phase::Photometric | Phase::Feature) {
            t.photometric = true;
        }
        if p == Phase::Feature {
            t.feature = true;
        }
        t
    }

    /// Rescales the boundaries proportionally from `from` to `to` iterations.
    pub fn rescaled(&self, from: usize, to: usize) -> Self {
        let s = |v: usize| if from == 0 { 0 } else { ((v as u128 * to as u128 + from as u128 / 2) / from as u128) as usize };
        Self {
            color_only_end: s(self.color_only_end),
            single_view_end: s(self.single_view_end),
            photometric_end: s(self.photometric_end),
            feature_end: s(self.feature_end).min(to),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    /// Initial position rate, multiplied by the scene extent.
    pub position: f64,
    /// Position rate at the last step relative to the first (log-linear decay).
    pub position_final_factor: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub sh: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final_factor: 0.01,
            rotation: 1e-3,
            log_scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            sh: 2.5e-3 / 20.0,
        }
    }
}

impl LearningRates {
    pub fn at(&self, step: usize, total: usize, extent: f64) -> GroupRates {
        let frac = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
        GroupRates {
            position: self.position * extent * self.position_final_factor.powf(frac),
            rotation: self.rotation,
            log_scale: self.log_scale,
            opacity: self.opacity,
            color: self.color,
            sh: self.sh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// The dataset's `init.ply` point cloud.
    Points,
    /// Random points on a sphere around the cameras' common target.
    Sphere,
    /// Random points inside a cube around the cameras' common target.
    Cube,
}

impl FromStr for InitStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "points" => Ok(Self::Points),
            "sphere" => Ok(Self::Sphere),
            "cube" => Ok(Self::Cube),
            _ => Err(Error::BadConfig(format!("unknown init strategy `{s}`"))),
        }
    }
}

impl InitStrategy {
    fn name(self) -> &'static str {
        match self {
            Self::Points => "points",
            Self::Sphere => "sphere",
            Self::Cube => "cube",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub phases: PhaseSchedule,
    pub lr: LearningRates,
    pub densify_interval: usize,
    pub densify_from: usize,
    /// Mean screen-space gradient (half-image units) above which primitives densify.
    pub densify_grad_threshold: f64,
    /// Split instead of clone above this fraction of the scene extent.
    pub split_fraction: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub preset: Preset,
    pub init: InitStrategy,
    /// Primitive count for the random initialisations.
    pub init_count: usize,
    pub sh_degree: usize,
    pub tile_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            phases: PhaseSchedule::default(),
            lr: LearningRates::default(),
            densify_interval: 100,
            densify_from: 200,
            densify_grad_threshold: 2e-4,
            split_fraction: 0.01,
            prune_opacity: 0.005,
            max_gaussians: 6000,
            seed: 0,
            weights: LossWeights::default(),
            preset: Preset::Full,
            init: InitStrategy::Points,
            init_count: 1000,
            sh_degree: 0,
            tile_size: 16,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::BadConfig(format!("bad value `{v}` for `{key}`")))
}

/// Splits `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::BadConfig(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.phases;
        if !(p.color_only_end <= p.single_view_end && p.single_view_end <= p.photometric_end && p.photometric_end <= p.feature_end) {
            return Err(Error::BadConfig(format!("phase boundaries must be non-decreasing: {p:?}")));
        }
        if p.feature_end > self.iterations {
            return Err(Error::BadConfig(format!("feature_end {} exceeds {} iterations", p.feature_end, self.iterations)));
        }
        let l = &self.lr;
        let rates = [l.position, l.rotation, l.log_scale, l.opacity, l.color, l.sh, l.position_final_factor];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::BadConfig("learning rates must be positive".into()));
        }
        if self.densify_interval == 0 {
            return Err(Error::BadConfig("densify_interval must be positive".into()));
        }
        if self.sh_degree > 2 {
            return Err(Error::BadConfig("sh_degree must be 0, 1 or 2".into()));
        }
        if self.init_count == 0 && self.init != InitStrategy::Points {
            return Err(Error::BadConfig("init_count must be positive".into()));
        }
        self.weights.validate()
    }

    /// Changes the iteration count, rescaling the phase boundaries with it.
    pub fn set_iterations(&mut self, n: usize) {
        self.phases = self.phases.rescaled(self.iterations, n);
        self.iterations = n;
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "iterations" => self.set_iterations(parse(key, v)?),
            "color_only_end" => self.phases.color_only_end = parse(key, v)?,
            "single_view_end" => self.phases.single_view_end = parse(key, v)?,
            "photometric_end" => self.phases.photometric_end = parse(key, v)?,
            "feature_end" => self.phases.feature_end = parse(key, v)?,
            "lr_position" => self.lr.position = parse(key, v)?,
            "lr_position_final_factor" => self.lr.position_final_factor = parse(key, v)?,
            "lr_rotation" => self.lr.rotation = parse(key, v)?,
            "lr_log_scale" => self.lr.log_scale = parse(key, v)?,
            "lr_opacity" => self.lr.opacity = parse(key, v)?,
            "lr_color" => self.lr.color = parse(key, v)?,
            "lr_sh" => self.lr.sh = parse(key, v)?,
            "densify_interval" => self.densify_interval = parse(key, v)?,
            "densify_from" => self.densify_from = parse(key, v)?,
            "densify_grad_threshold" => self.densify_grad_threshold = parse(key, v)?,
            "split_fraction" => self.split_fraction = parse(key, v)?,
            "prune_opacity" => self.prune_opacity = parse(key, v)?,
            "max_gaussians" => self.max_gaussians = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "beta1" => self.weights.beta1 = parse(key, v)?,
            "beta2" => self.weights.beta2 = parse(key, v)?,
            "lambda_nc" => self.weights.lambda_nc = parse(key, v)?,
            "lambda_ns" => self.weights.lambda_ns = parse(key, v)?,
            "lambda_p" => self.weights.lambda_p = parse(key, v)?,
            "lambda_f" => self.weights.lambda_f = parse(key, v)?,
            "tau" => self.weights.tau = parse(key, v)?,
            "patch_size" => self.weights.patch_size = parse(key, v)?,
            "num_sources" => self.weights.num_sources = parse(key, v)?,
            "preset" => self.preset = v.parse()?,
            "init" => self.init = v.parse()?,
            "init_count" => self.init_count = parse(key, v)?,
            "sh_degree" => self.sh_degree = parse(key, v)?,
            "tile_size" => self.tile_size = parse(key, v)?,
            _ => return Err(Error::BadConfig(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(c)
    }

    /// Every setting as `key = value` pairs, in a stable order. Feeding the
    /// output back through [`TrainConfig::apply_text`] reproduces the config.
    pub fn to_key_values(&self) -> Vec<(&'static str, String)> {
        let (p, l, w) = (&self.phases, &self.lr, &self.weights);
        vec![
            ("iterations", self.iterations.to_string()),
            ("color_only_end", p.color_only_end.to_string()),
            ("single_view_end", p.single_view_end.to_string()),
            ("photometric_end", p.photometric_end.to_string()),
            ("feature_end", p.feature_end.to_string()),
            ("lr_position", l.position.to_string()),
            ("lr_position_final_factor", l.position_final_factor.to_string()),
            ("lr_rotation", l.rotation.to_string()),
            ("lr_log_scale", l.log_scale.to_string()),
            ("lr_opacity", l.opacity.to_string()),
            ("lr_color", l.color.to_string()),
            ("lr_sh", l.sh.to_string()),
            ("densify_interval", self.densify_interval.to_string()),
            ("densify_from", self.densify_from.to_string()),
            ("densify_grad_threshold", self.densify_grad_threshold.to_string()),
            ("split_fraction", self.split_fraction.to_string()),
            ("prune_opacity", self.prune_opacity.to_string()),
            ("max_gaussians", self.max_gaussians.to_string()),
            ("seed", self.seed.to_string()),
            ("beta1", w.beta1.to_string()),
            ("beta2", w.beta2.to_string()),
            ("lambda_nc", w.lambda_nc.to_string()),
            ("lambda_ns", w.lambda_ns.to_string()),
            ("lambda_p", w.lambda_p.to_string()),
            ("lambda_f", w.lambda_f.to_string()),
            ("tau", w.tau.to_string()),
            ("patch_size", w.patch_size.to_string()),
            ("num_sources", w.num_sources.to_string()),
            ("preset", self.preset.name().to_string()),
            ("init", self.init.name().to_string()),
            ("init_count", self.init_count.to_string()),
            ("sh_degree", self.sh_degree.to_string()),
            ("tile_size", self.tile_size.to_string()),
        ]
    }

    /// Terms active at `step` under both the schedule and the preset.
    pub fn terms_at(&self, step: usize) -> ActiveTerms {
        let (s, m) = (self.phases.terms_at(step), self.preset.mask());
        ActiveTerms {
            normal_consistency: s.normal_consistency && m.normal_consistency,
            normal_smooth: s.normal_smooth && m.normal_smooth,
            photometric: s.photometric && m.photometric,
            feature: s.feature && m.feature,
        }
    }

    /// Densification runs every `densify_interval` steps from `densify_from`
    /// until the photometric phase ends.
    pub fn densify_at(&self, completed: usize) -> bool {
        completed >= self.densify_from
            && completed % self.densify_interval == 0
            && completed < self.phases.photometric_end.min(self.iterations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let text: String = c.to_key_values().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let mut d = TrainConfig { seed: 99, preset: Preset::NoFeature, ..Default::default() };
        d.apply_text(&text).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn config_text_parsing() {
        let mut c = TrainConfig::default();
        c.apply_text("# comment\n\nseed = 7   # trailing\npreset=no_p\nlambda_f = 0.5\n").unwrap();
        assert_eq!((c.seed, c.preset, c.weights.lambda_f), (7, Preset::NoPhotometric, 0.5));
        assert!(matches!(c.apply_text("bogus = 1"), Err(Error::BadConfig(_))));
        assert!(matches!(c.apply_text("seed = x"), Err(Error::BadConfig(_))));
        assert!(matches!(c.apply_text("seed 7"), Err(Error::BadConfig(_))));
    }

    #[test]
    fn validation_rejects_bad_schedules_and_rates() {
        let mut c = TrainConfig::default();
        c.phases.photometric_end = 600;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.phases.feature_end = 2500;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lr.opacity = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn iterations_rescale_phases() {
        let mut c = TrainConfig::default();
        c.set_iterations(200);
        assert_eq!(c.phases, PhaseSchedule { color_only_end: 70, single_view_end: 70, photometric_end: 150, feature_end: 200 });
        c.validate().unwrap();
        c.set_iterations(0);
        assert_eq!(c.phases.feature_end, 0);
        c.validate().unwrap();
    }

    #[test]
    fn schedule_gates_terms_exactly() {
        let c = TrainConfig::default();
        assert_eq!(c.terms_at(0), ActiveTerms::IMAGE_ONLY);
        assert_eq!(c.terms_at(699), ActiveTerms::IMAGE_ONLY);
        let t = c.terms_at(700);
        assert!(t.normal_consistency && t.normal_smooth && t.photometric && !t.feature);
        assert!(!c.terms_at(1499).feature);
        assert_eq!(c.terms_at(1500), ActiveTerms::ALL);
        let s = PhaseSchedule { color_only_end: 10, single_view_end: 20, photometric_end: 30, feature_end: 40 };
        let t = s.terms_at(15);
        assert!(t.normal_consistency && !t.photometric);
        assert_eq!(s.phase_at(15), Phase::SingleView);
        let only = TrainConfig { preset: Preset::OnlyImage, ..Default::default() };
        assert_eq!(only.terms_at(1999), ActiveTerms::IMAGE_ONLY);
        let nof = TrainConfig { preset: Preset::NoFeature, ..Default::default() };
        assert!(!nof.terms_at(1999).feature && nof.terms_at(1999).photometric);
    }

    #[test]
    fn densification_window() {
        let c = TrainConfig::default();
        assert!(!c.densify_at(100));
        assert!(c.densify_at(200));
        assert!(!c.densify_at(250));
        assert!(c.densify_at(1400));
        assert!(!c.densify_at(1500));
        assert!(!c.densify_at(1600));
    }

    #[test]
    fn presets_parse_by_name() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("no_x".parse::<Preset>().is_err());
    }

    #[test]
    fn position_rate_decays_log_linearly() {
        let l = LearningRates::default();
        assert!((l.at(0, 101, 2.0).position - 3.2e-4).abs() < 1e-18);
        assert!((l.at(100, 101, 2.0).position - 3.2e-6).abs() < 1e-18);
        assert!((l.at(50, 101, 2.0).position - 3.2e-5).abs() < 1e-16);
    }
}
