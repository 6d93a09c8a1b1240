//! TOML scene descriptions.
//!
//! ```toml
//! [camera]
//! position = [0.0, 0.0, 3.6]
//! look_at = [0.0, 0.0, 0.0]
//! fov_deg = 38.0
//!
//! [[lights]]
//! kind = "sphere"
//! center = [0.0, 0.8, 0.0]
//! radius = 0.12
//! radiance = [40.0, 40.0, 40.0]
//!
//! [[materials]]
//! name = "white"
//! albedo = [0.73, 0.73, 0.73]
//!
//! [[objects]]
//! mesh = "teapot.obj"          # or builtin = "sphere" | "box" | "torus" | "teapot" | "cornell"
//! model = "teapot.lsnif"       # optional; mesh may then be omitted
//! materials = ["white"]        # one per OBJ material slot
//! translate = [0.0, -1.0, 0.0]
//! rotate_deg = [0.0, 30.0, 0.0]
//! scale = 0.4
//! ```
//!
//! Relative paths resolve against the scene file's directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use super::{cornell, Camera, Instance, Light, Scene, SceneError};
use crate::bvh::MeshBvh;
use crate::fixtures;
use crate::geometry::{load_obj, ObjError};
use crate::geometry::{Material, Mesh, Transform, Vec3};
use crate::model_io::{self, ModelIoError};

#[derive(Debug, thiserror::Error)]
pub enum SceneFileError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing scene: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("loading mesh: {0}")]
    Obj(#[from] ObjError),
    #[error("loading model: {0}")]
    Model(#[from] ModelIoError),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraDesc {
    position: [f64; 3],
    look_at: [f64; 3],
    #[serde(default = "default_up")]
    up: [f64; 3],
    #[serde(default = "default_fov")]
    fov_deg: f64,
}

fn default_up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

fn default_fov() -> f64 {
    40.0
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum LightDesc {
    Point { position: [f64; 3], intensity: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64, radiance: [f64; 3] },
    Environment { radiance: [f64; 3] },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaterialDesc {
    name: String,
    albedo: [f64; 3],
    #[serde(default)]
    roughness: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Scale {
    Uniform(f64),
    Axes([f64; 3]),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectDesc {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    mesh: Option<PathBuf>,
    #[serde(default)]
    builtin: Option<String>,
    #[serde(default)]
    model: Option<PathBuf>,
    #[serde(default)]
    materials: Vec<String>,
    #[serde(default)]
    translate: Option<[f64; 3]>,
    #[serde(default)]
    rotate_deg: Option<[f64; 3]>,
    #[serde(default)]
    scale: Option<Scale>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDesc {
    camera: CameraDesc,
    #[serde(default)]
    lights: Vec<LightDesc>,
    #[serde(default)]
    materials: Vec<MaterialDesc>,
    #[serde(default)]
    objects: Vec<ObjectDesc>,
}

fn v(a: [f64; 3]) -> Vec3 {
    Vec3::from_array(a)
}

/// Procedural meshes available as `builtin = "..."`.
pub fn builtin_mesh(name: &str) -> Option<Mesh> {
    Some(match name {
        "sphere" => fixtures::uv_sphere(1.0, 64, 32),
        "box" => fixtures::box_mesh(Vec3::splat(-1.0), Vec3::splat(1.0)),
        "torus" => fixtures::torus(1.0, 0.35, 48, 24),
        "teapot" => fixtures::teapot(),
        _ => return None,
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parses a scene from TOML text; `base` anchors relative paths.
pub fn parse_scene(text: &str, base: &Path) -> Result<Scene, SceneFileError> {
    let desc: SceneDesc = toml::from_str(text)?;
    let materials: HashMap<&str, Material> = desc
        .materials
        .iter()
        .map(|m| {
            let mat = match m.roughness {
                Some(r) => Material::glossy(v(m.albedo), r),
                None => Material::diffuse(v(m.albedo)),
            };
            (m.name.as_str(), mat)
        })
        .collect();

    if desc.objects.len() == 1 && desc.objects[0].builtin.as_deref() == Some("cornell") {
        let o = &desc.objects[0];
        let model = o.model.as_ref().map(|p| model_io::load(resolve(base, p))).transpose()?;
        let mut scene = cornell::cornell_scene(model.map(Arc::new))?;
        scene.camera = camera(&desc.camera);
        if !desc.lights.is_empty() {
            scene.lights = desc.lights.iter().map(light).collect();
        }
        return Ok(scene);
    }

    let mut instances = Vec::with_capacity(desc.objects.len());
    for (i, o) in desc.objects.iter().enumerate() {
        let name = o.name.clone().unwrap_or_else(|| format!("object{i}"));
        let mesh = match (&o.mesh, &o.builtin) {
            (Some(_), Some(_)) => {
                return Err(SceneFileError::Invalid(format!("{name}: give either mesh or builtin")))
            }
            (Some(p), None) => Some(load_obj(resolve(base, p))?),
            (None, Some(b)) => Some(
                builtin_mesh(b).ok_or_else(|| SceneFileError::Invalid(format!("{name}: unknown builtin {b}")))?,
            ),
            (None, None) => None,
        };
        let mesh = match mesh {
            Some(mesh) => {
                let slots = mesh.num_materials().max(1);
                let mats = if o.materials.is_empty() {
                    vec![Material::default(); slots]
                } else {
                    let mut out = Vec::with_capacity(slots);
                    for k in 0..slots {
                        let key = &o.materials[k.min(o.materials.len() - 1)];
                        out.push(*materials.get(key.as_str()).ok_or_else(|| {
                            SceneFileError::Invalid(format!("{name}: unknown material {key}"))
                        })?);
                    }
                    out
                };
                Some(Arc::new(MeshBvh::new(Arc::new(mesh), mats).map_err(SceneError::from)?))
            }
            None => None,
        };
        let lsnif = o.model.as_ref().map(|p| model_io::load(resolve(base, p))).transpose()?.map(Arc::new);
        let scale = match o.scale {
            None => Vec3::ONE,
            Some(Scale::Uniform(s)) => Vec3::splat(s),
            Some(Scale::Axes(a)) => v(a),
        };
        let transform = Transform::from_trs(
            v(o.translate.unwrap_or_default()),
            v(o.rotate_deg.unwrap_or_default()),
            scale,
        )
        .map_err(|_| SceneFileError::Invalid(format!("{name}: singular transform")))?;
        instances.push(Instance { name, transform, mesh, lsnif });
    }
    Ok(Scene::new(camera(&desc.camera), desc.lights.iter().map(light).collect(), instances)?)
}

fn camera(c: &CameraDesc) -> Camera {
    Camera {
        position: v(c.position),
        look_at: v(c.look_at),
        up: v(c.up),
        fov_deg: c.fov_deg,
    }
}

fn light(l: &LightDesc) -> Light {
    match *l {
        LightDesc::Point { position, intensity } => Light::Point {
            position: v(position),
            intensity: v(intensity),
        },
        LightDesc::Sphere { center, radius, radiance } => Light::Sphere {
            center: v(center),
            radius,
            radiance: v(radiance),
        },
        LightDesc::Environment { radiance } => Light::Environment { radiance: v(radiance) },
    }
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, SceneFileError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| SceneFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scene(&text, path.parent().unwrap_or(Path::new(".")))
}
