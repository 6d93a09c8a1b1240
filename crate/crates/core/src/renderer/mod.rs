//! Path tracer whose LSNIF objects are intersected by their networks.
//!
//! Ray batches are intersected in three phases: closest triangle hits through
//! a two-level BVH; a broad phase that walks a separate top-level BVH over
//! LSNIF instance boxes and emits (ray, instance) pairs that could still beat
//! the triangle hit; and a narrow phase that runs one batched inference per
//! instance group and keeps the nearest accepted hit.

pub mod cornell;
mod integrator;
pub mod scene_file;

use std::sync::Arc;

use crate::bvh::{Bvh, BvhError, MeshBvh};
use crate::geometry::{Aabb, Material, Ray, Transform, Vec3};
use crate::model::LsnifModel;
use crate::par::{self, Parallelism};

pub use integrator::{render, PrimaryMode, RenderConfig};

/// Neural hit origins are pushed off the surface by this fraction of the
/// instance's world box diagonal.
pub const NEURAL_EPSILON: f64 = 1e-3;
/// Triangle hit origins are pushed off by this fraction of the scene diagonal.
pub const TRIANGLE_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Light {
    Point { position: Vec3, intensity: Vec3 },
    Sphere { center: Vec3, radius: f64, radiance: Vec3 },
    /// Constant radiance from every direction, reached only by escaping rays.
    Environment { radiance: Vec3 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    /// Vertical field of view.
    pub fov_deg: f64,
}

impl Camera {
    /// Ray through film position `(u, v)` in `[0,1]²`, `v` pointing down.
    pub fn ray(&self, u: f64, v: f64, aspect: f64) -> Ray {
        let forward = (self.look_at - self.position).normalize();
        let right = forward.cross(self.up).normalize();
        let up = right.cross(forward);
        let h = (self.fov_deg.to_radians() * 0.5).tan();
        let d = forward + right * ((2.0 * u - 1.0) * h * aspect) + up * ((1.0 - 2.0 * v) * h);
        Ray::unbounded(self.position, d)
    }
}

/// One placed object: triangles, a trained model, or both. With both, the
/// triangles answer primary rays in BVH primary mode and the model answers
/// everything else.
#[derive(Clone, Debug)]
pub struct Instance {
    pub name: String,
    pub transform: Transform,
    pub mesh: Option<Arc<MeshBvh>>,
    pub lsnif: Option<Arc<LsnifModel>>,
}

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("instance {0} has neither triangles nor a model")]
    EmptyInstance(String),
    #[error(transparent)]
    Bvh(#[from] BvhError),
}

/// A ray's nearest surface, in world space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceHit {
    pub t: f64,
    pub position: Vec3,
    /// Unit shading normal.
    pub normal: Vec3,
    /// Unit normal used to offset spawned rays.
    pub geometric_normal: Vec3,
    pub albedo: Vec3,
    pub material: Material,
    pub instance: u32,
    pub neural: bool,
    /// Distance spawned origins are moved off the surface.
    pub offset: f64,
}

/// Candidate neural intersection found by the broad phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayLsnifPair {
    pub ray: u32,
    pub instance: u32,
    pub t_enter: f64,
    pub t_exit: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntersectOptions {
    /// Route LSNIF instances through their networks. When false, instances
    /// that also carry triangles are traced as triangles.
    pub neural: bool,
    /// Group pairs by instance and run one batched inference per group.
    /// When false, pairs are inferred one at a time in emission order.
    pub sort_pairs: bool,
    pub policy: Parallelism,
}

impl Default for IntersectOptions {
    fn default() -> Self {
        Self {
            neural: true,
            sort_pairs: true,
            policy: Parallelism::default(),
        }
    }
}

pub struct Scene {
    pub camera: Camera,
    pub lights: Vec<Light>,
    instances: Vec<Instance>,
    world_bounds: Vec<Aabb>,
    triangle_top: Option<(Bvh, Vec<u32>)>,
    lsnif_top: Option<(Bvh, Vec<u32>)>,
    bounds: Aabb,
}

fn top_level(ids: Vec<u32>, bounds: &[Aabb]) -> Result<Option<(Bvh, Vec<u32>)>, BvhError> {
    if ids.is_empty() {
        return Ok(None);
    }
    let boxes: Vec<Aabb> = ids.iter().map(|&i| bounds[i as usize]).collect();
    Ok(Some((Bvh::build(&boxes)?, ids)))
}

impl Scene {
    pub fn new(camera: Camera, lights: Vec<Light>, instances: Vec<Instance>) -> Result<Self, SceneError> {
        let mut world_bounds = Vec::with_capacity(instances.len());
        for inst in &instances {
            let object = match (&inst.mesh, &inst.lsnif) {
                (Some(m), Some(l)) => m.aabb().union(l.frame.aabb),
                (Some(m), None) => m.aabb(),
                (None, Some(l)) => l.frame.aabb,
                (None, None) => return Err(SceneError::EmptyInstance(inst.name.clone())),
            };
            world_bounds.push(inst.transform.aabb(&object));
        }
        let tri_ids = (0..instances.len() as u32)
            .filter(|&i| instances[i as usize].mesh.is_some())
            .collect();
        let lsnif_ids = (0..instances.len() as u32)
            .filter(|&i| instances[i as usize].lsnif.is_some())
            .collect();
        let bounds = world_bounds.iter().fold(Aabb::empty(), |a, b| a.union(*b));
        Ok(Self {
            camera,
            lights,
            triangle_top: top_level(tri_ids, &world_bounds)?,
            lsnif_top: top_level(lsnif_ids, &world_bounds)?,
            instances,
            world_bounds,
            bounds,
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    fn triangle_closest(&self, ray: &Ray, neural: bool) -> Option<SurfaceHit> {
        let (bvh, ids) = self.triangle_top.as_ref()?;
        let tri_offset = TRIANGLE_EPSILON * self.bounds.diagonal().max(1e-12);
        let (_, _, hit) = bvh.closest(ray, |p, r| {
            let index = ids[p as usize];
            let inst = &self.instances[index as usize];
            if neural && inst.lsnif.is_some() {
                return None;
            }
            let mesh = inst.mesh.as_ref()?;
            let local = inst.transform.inverse_ray(r);
            let h = mesh.intersect_closest(&local)?;
            let material = mesh.materials()[h.material_index as usize];
            Some((
                h.t,
                SurfaceHit {
                    t: h.t,
                    position: r.at(h.t),
                    normal: inst.transform.normal(h.shading_normal),
                    geometric_normal: inst.transform.normal(h.geometric_normal),
                    albedo: material.albedo,
                    material,
                    instance: index,
                    neural: false,
                    offset: tri_offset,
                },
            ))
        })?;
        Some(hit)
    }

    /// Broad phase: pairs whose instance box starts before the ray's current
    /// best hit.
    pub fn broad_phase(
        &self,
        rays: &[Ray],
        best: &[Option<SurfaceHit>],
        options: &IntersectOptions,
    ) -> Vec<RayLsnifPair> {
        let Some((bvh, ids)) = self.lsnif_top.as_ref() else {
            return Vec::new();
        };
        let parts = par::map_chunks(options.policy, rays.len(), 1024, |range| {
            let mut out = Vec::new();
            for i in range {
                let mut ray = rays[i];
                if let Some(h) = &best[i] {
                    ray.t_max = h.t;
                }
                bvh.visit_leaves(&ray, |p| {
                    let index = ids[p as usize];
                    let inst = &self.instances[index as usize];
                    if !options.neural && inst.mesh.is_some() {
                        return;
                    }
                    let model = inst.lsnif.as_ref().expect("lsnif instance");
                    // The model's interval is over its whole box, independent
                    // of other hits, matching how it was trained.
                    let local = Ray {
                        t_max: f64::INFINITY,
                        ..inst.transform.inverse_ray(&ray)
                    };
                    if let Some((t0, t1)) = model.frame.aabb.intersect(&local) {
                        if t0 < ray.t_max {
                            out.push(RayLsnifPair {
                                ray: i as u32,
                                instance: index,
                                t_enter: t0,
                                t_exit: t1,
                            });
                        }
                    }
                });
            }
            out
        });
        let mut pairs: Vec<RayLsnifPair> = parts.into_iter().flatten().collect();
        if options.sort_pairs {
            pairs.sort_by_key(|p| p.instance);
        }
        pairs
    }

    fn neural_hit(&self, pair: &RayLsnifPair, ray: &Ray, hit: &crate::model::NeuralHit) -> SurfaceHit {
        let inst = &self.instances[pair.instance as usize];
        let model = inst.lsnif.as_ref().expect("lsnif instance");
        let material = model.materials[(hit.material_index as usize).min(model.materials.len() - 1)];
        let normal = inst.transform.normal(hit.normal);
        let normal = if normal == Vec3::ZERO { -ray.direction.normalize() } else { normal };
        SurfaceHit {
            t: hit.t,
            position: ray.at(hit.t),
            normal,
            geometric_normal: normal,
            albedo: hit.albedo,
            material,
            instance: pair.instance,
            neural: true,
            offset: NEURAL_EPSILON * self.world_bounds[pair.instance as usize].diagonal(),
        }
    }

    /// Narrow phase: batched inference per instance group, merged into `best`.
    pub fn narrow_phase(
        &self,
        rays: &[Ray],
        pairs: &[RayLsnifPair],
        best: &mut [Option<SurfaceHit>],
        options: &IntersectOptions,
    ) {
        let mut accept = |pair: &RayLsnifPair, hit: Option<crate::model::NeuralHit>| {
            let Some(hit) = hit else { return };
            let ray = &rays[pair.ray as usize];
            debug_assert!(hit.t >= pair.t_enter - 1e-9 && hit.t <= pair.t_exit + 1e-9);
            if hit.t <= ray.t_min || hit.t >= ray.t_max {
                return;
            }
            let slot = &mut best[pair.ray as usize];
            let better = match slot {
                None => true,
                Some(b) => hit.t < b.t || (hit.t == b.t && b.neural && pair.instance < b.instance),
            };
            if better {
                *slot = Some(self.neural_hit(pair, ray, &hit));
            }
        };
        let object_ray = |pair: &RayLsnifPair| {
            let inst = &self.instances[pair.instance as usize];
            Ray {
                t_max: f64::INFINITY,
                ..inst.transform.inverse_ray(&rays[pair.ray as usize])
            }
        };
        if !options.sort_pairs {
            for pair in pairs {
                let model = self.instances[pair.instance as usize].lsnif.as_ref().expect("lsnif");
                let hit = model.intersect(&[object_ray(pair)], Parallelism::Sequential)[0];
                accept(pair, hit);
            }
            return;
        }
        let mut start = 0;
        while start < pairs.len() {
            let instance = pairs[start].instance;
            let end = start + pairs[start..].iter().take_while(|p| p.instance == instance).count();
            let group = &pairs[start..end];
            let model = self.instances[instance as usize].lsnif.as_ref().expect("lsnif");
            let local: Vec<Ray> = group.iter().map(object_ray).collect();
            let hits = model.intersect(&local, options.policy);
            for (pair, hit) in group.iter().zip(hits) {
                accept(pair, hit);
            }
            start = end;
        }
    }

    /// Nearest surface for every ray.
    pub fn intersect(&self, rays: &[Ray], options: &IntersectOptions) -> Vec<Option<SurfaceHit>> {
        let mut best =
            par::map_range(options.policy, rays.len(), |i| self.triangle_closest(&rays[i], options.neural));
        let pairs = self.broad_phase(rays, &best, options);
        self.narrow_phase(rays, &pairs, &mut best, options);
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> Camera {
        Camera {
            position: Vec3::new(0.0, 0.0, 5.0),
            look_at: Vec3::ZERO,
            up: Vec3::Y,
            fov_deg: 45.0,
        }
    }

    fn mesh_instance(mesh: crate::geometry::Mesh, t: Transform) -> Instance {
        Instance {
            name: "m".into(),
            transform: t,
            mesh: Some(Arc::new(MeshBvh::with_default_materials(Arc::new(mesh)).unwrap())),
            lsnif: None,
        }
    }

    #[test]
    fn camera_centre_ray() {
        let r = camera().ray(0.5, 0.5, 1.0);
        assert!((r.direction - Vec3::new(0.0, 0.0, -1.0)).length() < 1e-12);
        let top = camera().ray(0.5, 0.0, 1.0);
        assert!(top.direction.y > 0.0);
    }

    #[test]
    fn triangle_scene_matches_direct_tracing() {
        let t1 = Transform::from_trs(Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 30.0, 0.0), Vec3::splat(0.5)).unwrap();
        let t2 = Transform::from_trs(Vec3::new(-1.0, 0.2, -0.5), Vec3::ZERO, Vec3::new(1.0, 2.0, 1.0)).unwrap();
        let instances = vec![
            mesh_instance(fixtures::uv_sphere(1.0, 16, 8), t1),
            mesh_instance(fixtures::box_mesh(Vec3::splat(-0.4), Vec3::splat(0.4)), t2),
        ];
        let scene = Scene::new(camera(), vec![], instances.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rays: Vec<Ray> = (0..2000)
            .map(|_| camera().ray(rng.random(), rng.random(), 1.0))
            .collect();
        let hits = scene.intersect(&rays, &IntersectOptions::default());
        let mut count = 0;
        for (ray, hit) in rays.iter().zip(&hits) {
            let direct = instances
                .iter()
                .filter_map(|inst| {
                    let h = inst.mesh.as_ref().unwrap().intersect_closest(&inst.transform.inverse_ray(ray))?;
                    Some(h.t)
                })
                .fold(f64::INFINITY, f64::min);
            match hit {
                Some(h) => {
                    assert_eq!(h.t, direct);
                    assert!((h.normal.length() - 1.0).abs() < 1e-9);
                    count += 1;
                }
                None => assert!(direct.is_infinite()),
            }
        }
        assert!(count > 100);
    }

    #[test]
    fn empty_instance_is_rejected() {
        let inst = Instance {
            name: "nothing".into(),
            transform: Transform::identity(),
            mesh: None,
            lsnif: None,
        };
        assert!(matches!(Scene::new(camera(), vec![], vec![inst]), Err(SceneError::EmptyInstance(_))));
    }
}
