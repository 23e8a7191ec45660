use vasplat_core::fusion::{read_mesh, write_mesh, MeshFormat};
use vasplat_core::io::load_cloud;
use vasplat_core::pipeline::{reconstruct_mesh, score_mesh, MeshParams, DEFAULT_F1_THRESHOLD};
use vasplat_core::scenes::{generate_scene, load_dataset, SceneConfig, SceneKind, TextureKind};
use vasplat_core::trainer::{train, Preset, TrainConfig, TrainData, TrainOptions, CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE};
use vasplat_core::{render, RenderSettings};

fn short_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { seed, init_count: 300, ..TrainConfig::default() };
    cfg.set_iterations(150);
    cfg
}

#[test]
fn generate_train_mesh_score() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    generate_scene(&SceneConfig::new(SceneKind::Sphere, TextureKind::Checker, 8, 48, 2), &scene).unwrap();
    let ds = load_dataset(&scene).unwrap();
    let data = TrainData::from_dataset(&ds).unwrap();
    let run = dir.path().join("run");
    let cfg = short_config(2);
    let out = train(&data, &cfg, &TrainOptions { out_dir: Some(run.clone()) }).unwrap();

    assert_eq!(out.log.steps.len(), 150);
    let first = out.log.mean_total(0, 10).unwrap();
    let last = out.log.mean_total(30, 42).unwrap();
    assert!(last < first, "color-only loss did not drop: {first} -> {last}");
    assert_eq!(load_cloud(&run.join(CHECKPOINT_FILE)).unwrap(), out.cloud);
    assert_eq!(std::fs::read_to_string(run.join(LOG_FILE)).unwrap(), out.log.to_csv());
    let saved = std::fs::read_to_string(run.join(CONFIG_FILE)).unwrap();
    let mut reloaded = TrainConfig::default();
    reloaded.apply_text(&saved).unwrap();
    assert_eq!(reloaded.to_key_values(), cfg.to_key_values());

    let params = MeshParams { voxel: 0.05, truncation: 0.2, bounds: None };
    let mesh = reconstruct_mesh(&out.cloud, &ds.cameras, ds.background(), &params).unwrap();
    assert!(!mesh.triangles.is_empty());
    let path = dir.path().join("mesh.ply");
    write_mesh(&mesh, &path, MeshFormat::Ply).unwrap();
    let back = read_mesh(&path).unwrap();
    assert_eq!(back.triangles, mesh.triangles);

    let gt = ds.load_gt_points().unwrap().unwrap();
    let (c, f) = score_mesh(&back, &gt, DEFAULT_F1_THRESHOLD, 0).unwrap();
    assert!(c.chamfer.is_finite() && c.chamfer > 0.0 && c.chamfer < 0.5, "{c:?}");
    assert!((0.0..=1.0).contains(&f.f1));
}

#[test]
fn presets_only_gate_terms() {
    let dir = tempfile::tempdir().unwrap();
    generate_scene(&SceneConfig::new(SceneKind::Cube, TextureKind::ValueNoise, 6, 32, 4), dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let data = TrainData::from_dataset(&ds).unwrap();
    let mut cfg = short_config(4);
    cfg.set_iterations(60);
    cfg.preset = Preset::OnlyImage;
    let only = train(&data, &cfg, &TrainOptions::default()).unwrap();
    assert!(only.log.steps.iter().all(|s| s.terms.photometric == 0.0 && s.terms.normal_consistency == 0.0));
    cfg.preset = Preset::Full;
    let full = train(&data, &cfg, &TrainOptions::default()).unwrap();
    assert!(full.log.steps.iter().any(|s| s.terms.photometric > 0.0));
    // Identical until the first multi-view step.
    let split = cfg.phases.color_only_end;
    assert_eq!(only.log.steps[..split].iter().map(|s| s.total).collect::<Vec<_>>(), full.log.steps[..split].iter().map(|s| s.total).collect::<Vec<_>>());
}

#[test]
fn trained_cloud_renders_every_view() {
    let dir = tempfile::tempdir().unwrap();
    generate_scene(&SceneConfig::new(SceneKind::TwoSpheres, TextureKind::Checker, 4, 32, 1), dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let data = TrainData::from_dataset(&ds).unwrap();
    let mut cfg = short_config(1);
    cfg.set_iterations(20);
    let out = train(&data, &cfg, &TrainOptions::default()).unwrap();
    let settings = RenderSettings { background: ds.background(), keep_records: false, ..RenderSettings::default() };
    for cam in &ds.cameras {
        let b = render(&out.cloud, cam, &settings).unwrap();
        assert!(b.color.iter().all(|c| c.iter().all(|v| v.is_finite())));
        assert!(b.depth_valid.iter().any(|v| *v));
    }
}
