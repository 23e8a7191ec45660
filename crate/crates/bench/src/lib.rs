//! Shared fixtures for the benchmarks: a ray-traced sphere scene and a
//! cloud seeded from its surface.

use nalgebra::Vector3;
use vasplat_core::fusion::{integrate_depth, object_bounds, TsdfVolume};
use vasplat_core::gaussians::init_from_points;
use vasplat_core::scenes::{scene_cameras, trace_view, SceneKind, Surface, TextureKind};
use vasplat_core::trainer::TrainData;
use vasplat_core::{Camera, GaussianCloud};

pub const BACKGROUND: Vector3<f64> = Vector3::new(0.0, 0.0, 0.0);

pub struct Fixture {
    pub data: TrainData,
    pub cloud: GaussianCloud,
}

/// `views` checker-textured views of the unit sphere at `res`², with a cloud
/// of `gaussians` splats sampled on the surface.
pub fn sphere(views: usize, res: usize, gaussians: usize) -> Fixture {
    let surface = Surface::for_kind(SceneKind::Sphere);
    let cameras = scene_cameras(&surface, views, res).expect("valid scene");
    let images = cameras.iter().map(|c| trace_view(&surface, TextureKind::Checker, 1, c, BACKGROUND).0).collect();
    let data = TrainData::from_images(&cameras, images, BACKGROUND).expect("consistent views");
    let cloud = init_from_points(&surface.sample(gaussians, 2), None).expect("non-empty points");
    Fixture { data, cloud }
}

/// TSDF of the exact sphere depth maps seen from `cameras`.
pub fn sphere_volume(cameras: &[Camera], voxel: f64) -> TsdfVolume {
    let surface = Surface::for_kind(SceneKind::Sphere);
    let (lo, hi) = object_bounds(cameras);
    let mut vol = TsdfVolume::from_bounds(lo, hi, voxel, 4.0 * voxel).expect("non-empty bounds");
    for cam in cameras {
        let depth = surface.depth_map(cam);
        let valid: Vec<bool> = depth.iter().map(|d| *d > 0.0).collect();
        integrate_depth(&mut vol, &depth, &valid, cam, None).expect("matching sizes");
    }
    vol
}
