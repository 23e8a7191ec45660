use vasplat_bench::{sphere, sphere_volume};
use vasplat_core::fusion::marching_cubes;
use vasplat_core::{render, RenderSettings};

#[test]
fn sphere_fixture_is_consistent() {
    let fx = sphere(4, 32, 200);
    assert_eq!(fx.data.views.len(), 4);
    assert_eq!(fx.cloud.len(), 200);
    let b = render(&fx.cloud, &fx.data.views[0].camera, &RenderSettings::default()).unwrap();
    assert!(b.depth_valid.iter().filter(|v| **v).count() > 100);
}

#[test]
fn sphere_volume_meshes_near_unit_radius() {
    let fx = sphere(6, 48, 1);
    let mesh = marching_cubes(&sphere_volume(&fx.data.cameras(), 0.05), 0.0).unwrap();
    assert!(!mesh.triangles.is_empty());
    assert!(mesh.vertices.iter().all(|v| (v.norm() - 1.0).abs() < 0.05));
}
