//! Fixture scenes: a Cornell-style box with a teapot, and the white furnace.

use std::sync::Arc;

use super::{Camera, Instance, Light, Scene, SceneError};
use crate::bvh::MeshBvh;
use crate::fixtures;
use crate::geometry::{Material, Mesh, Transform, Vec3};
use crate::model::LsnifModel;

fn quad(a: Vec3, b: Vec3, c: Vec3, d: Vec3) -> Mesh {
    Mesh::new(vec![a, b, c, d], vec![[0, 1, 2], [0, 2, 3]]).expect("quad")
}

fn triangles(name: &str, mesh: Mesh, material: Material, transform: Transform) -> Instance {
    Instance {
        name: name.to_owned(),
        transform,
        mesh: Some(Arc::new(MeshBvh::new(Arc::new(mesh), vec![material]).expect("fixture bvh"))),
        lsnif: None,
    }
}

/// The featured object of the Cornell box and its material table.
pub fn cornell_object() -> (Mesh, Vec<Material>) {
    (fixtures::teapot(), vec![Material::diffuse(Vec3::new(0.8, 0.65, 0.35))])
}

/// Places the featured object on the floor of the box.
pub fn cornell_object_transform() -> Transform {
    Transform::from_trs(Vec3::new(-0.15, -1.0, 0.15), Vec3::new(0.0, -25.0, 0.0), Vec3::splat(0.42))
        .expect("rigid transform")
}

pub fn cornell_camera() -> Camera {
    Camera {
        position: Vec3::new(0.0, 0.0, 3.6),
        look_at: Vec3::ZERO,
        up: Vec3::Y,
        fov_deg: 38.0,
    }
}

/// Cornell-style room spanning `[-1, 1]³` and open toward the camera, a
/// small glossy block and a sphere light under the ceiling. With `model`,
/// the teapot keeps its triangles for primary rays and answers every other
/// ray through the network.
pub fn cornell_scene(model: Option<Arc<LsnifModel>>) -> Result<Scene, SceneError> {
    let white = Material::diffuse(Vec3::splat(0.73));
    let red = Material::diffuse(Vec3::new(0.63, 0.07, 0.05));
    let green = Material::diffuse(Vec3::new(0.14, 0.45, 0.09));
    let v = |x, y, z| Vec3::new(x, y, z);
    let id = Transform::identity();
    let mut instances = vec![
        triangles("floor", quad(v(-1., -1., -1.), v(1., -1., -1.), v(1., -1., 1.), v(-1., -1., 1.)), white, id),
        triangles("ceiling", quad(v(-1., 1., -1.), v(-1., 1., 1.), v(1., 1., 1.), v(1., 1., -1.)), white, id),
        triangles("back", quad(v(-1., -1., -1.), v(-1., 1., -1.), v(1., 1., -1.), v(1., -1., -1.)), white, id),
        triangles("left", quad(v(-1., -1., -1.), v(-1., -1., 1.), v(-1., 1., 1.), v(-1., 1., -1.)), red, id),
        triangles("right", quad(v(1., -1., -1.), v(1., 1., -1.), v(1., 1., 1.), v(1., -1., 1.)), green, id),
        triangles(
            "block",
            fixtures::box_mesh(v(-0.25, 0.0, -0.25), v(0.25, 0.5, 0.25)),
            Material::glossy(Vec3::splat(0.7), 0.3),
            Transform::from_trs(v(0.5, -1.0, -0.45), v(0.0, 20.0, 0.0), Vec3::ONE).expect("rigid"),
        ),
    ];
    let (mesh, materials) = cornell_object();
    instances.push(Instance {
        name: "teapot".into(),
        transform: cornell_object_transform(),
        mesh: Some(Arc::new(MeshBvh::new(Arc::new(mesh), materials)?)),
        lsnif: model,
    });
    let light = Light::Sphere {
        center: v(0.0, 0.8, 0.0),
        radius: 0.12,
        radiance: Vec3::splat(25.0),
    };
    Scene::new(cornell_camera(), vec![light], instances)
}

/// A unit diffuse sphere of albedo 1 inside a constant environment of
/// radiance 1. With `model`, the sphere is an LSNIF instance; `with_mesh`
/// also attaches its triangles so primary rays can use them.
pub fn furnace_scene(model: Option<Arc<LsnifModel>>, with_mesh: bool) -> Result<Scene, SceneError> {
    let mesh = Arc::new(fixtures::uv_sphere(1.0, 64, 32));
    let inst = Instance {
        name: "sphere".into(),
        transform: Transform::identity(),
        mesh: if with_mesh || model.is_none() {
            Some(Arc::new(MeshBvh::new(mesh, vec![Material::diffuse(Vec3::ONE)])?))
        } else {
            None
        },
        lsnif: model,
    };
    let camera = Camera {
        position: Vec3::new(0.0, 0.0, 4.0),
        look_at: Vec3::ZERO,
        up: Vec3::Y,
        fov_deg: 35.0,
    };
    Scene::new(camera, vec![Light::Environment { radiance: Vec3::ONE }], vec![inst])
}
