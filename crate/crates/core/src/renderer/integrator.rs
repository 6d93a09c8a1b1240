//! Wavefront unidirectional path tracing with next-event estimation.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{IntersectOptions, Light, Scene, SurfaceHit};
use crate::geometry::{MaterialKind, Ray, Vec3};
use crate::image::Image;
use crate::par::{self, Parallelism};
use crate::training::cosine_hemisphere;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PrimaryMode {
    /// Camera rays see triangles wherever an instance has them.
    #[default]
    Bvh,
    /// Camera rays go through the networks too.
    Lsnif,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub spp: usize,
    pub max_bounces: usize,
    pub seed: u64,
    pub primary: PrimaryMode,
    pub sort_pairs: bool,
    pub policy: Parallelism,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            spp: 16,
            max_bounces: 4,
            seed: 0,
            primary: PrimaryMode::Bvh,
            sort_pairs: true,
            policy: Parallelism::default(),
        }
    }
}

#[derive(Clone)]
struct Path {
    pixel: u32,
    ray: Ray,
    throughput: Vec3,
    rng: ChaCha8Rng,
    /// Solid-angle density of the direction that produced `ray`; zero for
    /// camera rays, which take no MIS weight.
    pdf: f64,
}

struct ShadowRequest {
    pixel: u32,
    ray: Ray,
    contribution: Vec3,
}

#[derive(Default)]
struct Shaded {
    emitted: Vec3,
    shadows: Vec<ShadowRequest>,
    next: Option<Path>,
}

fn path_seed(seed: u64, pixel: u64, sample: u64) -> u64 {
    let mut z = seed ^ pixel.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ sample.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn phong_exponent(roughness: f64) -> f64 {
    (2.0 / (roughness * roughness) - 2.0).max(0.0)
}

fn reflect(wo: Vec3, n: Vec3) -> Vec3 {
    n * (2.0 * n.dot(wo)) - wo
}

/// BSDF value and sampling density for outgoing `wo` and incoming `wi`.
fn bsdf(kind: MaterialKind, albedo: Vec3, n: Vec3, wo: Vec3, wi: Vec3) -> (Vec3, f64) {
    let cos = n.dot(wi);
    if cos <= 0.0 {
        return (Vec3::ZERO, 0.0);
    }
    match kind {
        MaterialKind::Diffuse => (albedo / PI, cos / PI),
        MaterialKind::Glossy { roughness } => {
            let e = phong_exponent(roughness);
            let c = reflect(wo, n).dot(wi).max(0.0).powf(e);
            (albedo * ((e + 2.0) / (2.0 * PI) * c), (e + 1.0) / (2.0 * PI) * c)
        }
    }
}

/// Samples `wi`; returns it with `f·cos/pdf` and the density.
fn sample_bsdf(kind: MaterialKind, albedo: Vec3, n: Vec3, wo: Vec3, rng: &mut ChaCha8Rng) -> Option<(Vec3, Vec3, f64)> {
    match kind {
        MaterialKind::Diffuse => {
            let wi = cosine_hemisphere(n, rng);
            let pdf = n.dot(wi).max(1e-12) / PI;
            Some((wi, albedo, pdf))
        }
        MaterialKind::Glossy { roughness } => {
            let e = phong_exponent(roughness);
            let axis = reflect(wo, n);
            let (u1, u2): (f64, f64) = (rng.random(), rng.random());
            let cos_a = u1.powf(1.0 / (e + 1.0));
            let sin_a = (1.0 - cos_a * cos_a).max(0.0).sqrt();
            let phi = 2.0 * PI * u2;
            let (t, b) = axis.any_orthonormal_pair();
            let wi = (t * (sin_a * phi.cos()) + b * (sin_a * phi.sin()) + axis * cos_a).normalize();
            let cos = n.dot(wi);
            if cos <= 0.0 {
                return None;
            }
            let pdf = (e + 1.0) / (2.0 * PI) * cos_a.powf(e);
            Some((wi, albedo * ((e + 2.0) / (e + 1.0) * cos), pdf))
        }
    }
}

fn sphere_hit(ray: &Ray, center: Vec3, radius: f64) -> Option<f64> {
    let oc = ray.origin - center;
    let d = ray.direction;
    let a = d.length_squared();
    let b = oc.dot(d);
    let c = oc.length_squared() - radius * radius;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [(-b - s) / a, (-b + s) / a]
        .into_iter()
        .find(|&t| t > ray.t_min && t < ray.t_max)
}

/// Solid-angle density of uniform cone sampling toward a sphere, or `None`
/// when `p` is inside it.
fn cone_pdf(p: Vec3, center: Vec3, radius: f64) -> Option<(f64, f64)> {
    let d2 = (center - p).length_squared();
    if d2 <= radius * radius {
        return None;
    }
    let cos_max = (1.0 - radius * radius / d2).max(0.0).sqrt();
    Some((cos_max, 1.0 / (2.0 * PI * (1.0 - cos_max))))
}

fn power_heuristic(a: f64, b: f64) -> f64 {
    let (a2, b2) = (a * a, b * b);
    if a2 + b2 == 0.0 {
        0.0
    } else {
        a2 / (a2 + b2)
    }
}

fn spawn(hit: &SurfaceHit, dir: Vec3, t_max: f64) -> Ray {
    let n = if hit.geometric_normal.dot(dir) >= 0.0 {
        hit.geometric_normal
    } else {
        -hit.geometric_normal
    };
    Ray {
        origin: hit.position + n * hit.offset,
        direction: dir,
        t_min: 0.0,
        t_max,
    }
}

fn shade(scene: &Scene, path: &Path, hit: Option<&SurfaceHit>, last: bool) -> Shaded {
    let mut out = Shaded::default();
    let ray = &path.ray;
    let surface_t = hit.map_or(f64::INFINITY, |h| h.t);

    // Emitters reached by the sampled direction.
    for light in &scene.lights {
        if let Light::Sphere { center, radius, radiance } = *light {
            if let Some(t) = sphere_hit(ray, center, radius) {
                if t < surface_t {
                    let w = if path.pdf == 0.0 {
                        1.0
                    } else {
                        cone_pdf(ray.origin, center, radius)
                            .map_or(1.0, |(_, lp)| power_heuristic(path.pdf, lp))
                    };
                    out.emitted += path.throughput * radiance * w;
                    return out;
                }
            }
        }
    }
    let Some(hit) = hit else {
        for light in &scene.lights {
            if let Light::Environment { radiance } = *light {
                out.emitted += path.throughput * radiance;
            }
        }
        return out;
    };
    if last {
        return out;
    }

    let wo = -ray.direction.normalize();
    let n = if hit.normal.dot(wo) < 0.0 { -hit.normal } else { hit.normal };
    let (kind, albedo) = (hit.material.kind, hit.albedo);
    let mut rng = path.rng.clone();

    for light in &scene.lights {
        match *light {
            Light::Point { position, intensity } => {
                let to = position - hit.position;
                let d2 = to.length_squared();
                let wi = to / d2.sqrt();
                let (f, _) = bsdf(kind, albedo, n, wo, wi);
                if f != Vec3::ZERO {
                    out.shadows.push(ShadowRequest {
                        pixel: path.pixel,
                        ray: spawn(hit, wi, d2.sqrt() * (1.0 - 1e-9)),
                        contribution: path.throughput * f * n.dot(wi) * intensity / d2,
                    });
                }
            }
            Light::Sphere { center, radius, radiance } => {
                let Some((cos_max, light_pdf)) = cone_pdf(hit.position, center, radius) else {
                    continue;
                };
                let axis = (center - hit.position).normalize();
                let (u1, u2): (f64, f64) = (rng.random(), rng.random());
                let cos_a = 1.0 - u1 * (1.0 - cos_max);
                let sin_a = (1.0 - cos_a * cos_a).max(0.0).sqrt();
                let phi = 2.0 * PI * u2;
                let (t, b) = axis.any_orthonormal_pair();
                let wi = (t * (sin_a * phi.cos()) + b * (sin_a * phi.sin()) + axis * cos_a).normalize();
                let (f, bsdf_pdf) = bsdf(kind, albedo, n, wo, wi);
                if f == Vec3::ZERO {
                    continue;
                }
                let probe = Ray::unbounded(hit.position, wi);
                let dist = sphere_hit(&probe, center, radius).unwrap_or_else(|| axis.dot(center - hit.position));
                let w = power_heuristic(light_pdf, bsdf_pdf);
                out.shadows.push(ShadowRequest {
                    pixel: path.pixel,
                    ray: spawn(hit, wi, dist * (1.0 - 1e-9)),
                    contribution: path.throughput * f * n.dot(wi) * radiance * (w / light_pdf),
                });
            }
            Light::Environment { .. } => {}
        }
    }

    if let Some((wi, weight, pdf)) = sample_bsdf(kind, albedo, n, wo, &mut rng) {
        let throughput = path.throughput * weight;
        if throughput != Vec3::ZERO {
            out.next = Some(Path {
                pixel: path.pixel,
                ray: spawn(hit, wi, f64::INFINITY),
                throughput,
                rng,
                pdf,
            });
        }
    }
    out
}

/// Renders the scene to a linear RGB image.
pub fn render(scene: &Scene, config: &RenderConfig) -> Image {
    let (w, h) = (config.width, config.height);
    let aspect = w as f64 / h as f64;
    let mut accum = vec![Vec3::ZERO; w * h];
    for sample in 0..config.spp {
        let mut paths = par::map_range(config.policy, w * h, |p| {
            let mut rng = ChaCha8Rng::seed_from_u64(path_seed(config.seed, p as u64, sample as u64));
            let (x, y) = ((p % w) as f64, (p / w) as f64);
            let (u, v) = ((x + rng.random::<f64>()) / w as f64, (y + rng.random::<f64>()) / h as f64);
            Path {
                pixel: p as u32,
                ray: scene.camera.ray(u, v, aspect),
                throughput: Vec3::ONE,
                rng,
                pdf: 0.0,
            }
        });
        for bounce in 0..=config.max_bounces {
            if paths.is_empty() {
                break;
            }
            let options = IntersectOptions {
                neural: bounce > 0 || config.primary == PrimaryMode::Lsnif,
                sort_pairs: config.sort_pairs,
                policy: config.policy,
            };
            let rays: Vec<Ray> = paths.iter().map(|p| p.ray).collect();
            let hits = scene.intersect(&rays, &options);
            let last = bounce == config.max_bounces;
            let shaded = par::map_range(config.policy, paths.len(), |i| {
                shade(scene, &paths[i], hits[i].as_ref(), last)
            });
            let mut shadows = Vec::new();
            let mut next = Vec::with_capacity(paths.len());
            for (path, s) in paths.iter().zip(shaded) {
                accum[path.pixel as usize] += s.emitted;
                shadows.extend(s.shadows);
                next.extend(s.next);
            }
            if !shadows.is_empty() {
                let shadow_rays: Vec<Ray> = shadows.iter().map(|s| s.ray).collect();
                let shadow_options = IntersectOptions {
                    neural: true,
                    ..options
                };
                let blocked = scene.intersect(&shadow_rays, &shadow_options);
                for (s, b) in shadows.iter().zip(&blocked) {
                    if b.is_none() {
                        accum[s.pixel as usize] += s.contribution;
                    }
                }
            }
            paths = next;
        }
    }
    let scale = 1.0 / config.spp.max(1) as f64;
    Image {
        width: w,
        height: h,
        pixels: accum.iter().map(|c| (*c * scale).to_array()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvh::MeshBvh;
    use crate::fixtures;
    use crate::geometry::{Material, Transform};
    use crate::renderer::{Camera, Instance};
    use std::sync::Arc;

    fn camera() -> Camera {
        Camera {
            position: Vec3::new(0.0, 0.0, 4.0),
            look_at: Vec3::ZERO,
            up: Vec3::Y,
            fov_deg: 40.0,
        }
    }

    fn sphere_instance(albedo: f64) -> Instance {
        let mesh = Arc::new(fixtures::uv_sphere(1.0, 48, 24));
        Instance {
            name: "sphere".into(),
            transform: Transform::identity(),
            mesh: Some(Arc::new(MeshBvh::new(mesh, vec![Material::diffuse(Vec3::splat(albedo))]).unwrap())),
            lsnif: None,
        }
    }

    #[test]
    fn empty_scene_shows_environment() {
        let env = Vec3::new(0.2, 0.5, 1.5);
        let scene = Scene::new(camera(), vec![Light::Environment { radiance: env }], vec![]).unwrap();
        let img = render(&scene, &RenderConfig { width: 8, height: 6, spp: 2, ..Default::default() });
        assert!(img.pixels.iter().all(|p| *p == env.to_array()));
    }

    #[test]
    fn white_furnace_with_triangles() {
        // Flat normals: with interpolated ones a bounce can leave below the
        // true surface and be trapped inside.
        let mut mesh = fixtures::uv_sphere(1.0, 48, 24);
        mesh.vertex_normals = None;
        let inst = Instance {
            name: "sphere".into(),
            transform: Transform::identity(),
            mesh: Some(Arc::new(MeshBvh::new(Arc::new(mesh), vec![Material::diffuse(Vec3::ONE)]).unwrap())),
            lsnif: None,
        };
        let scene = Scene::new(camera(), vec![Light::Environment { radiance: Vec3::ONE }], vec![inst]).unwrap();
        let img = render(&scene, &RenderConfig { width: 16, height: 16, spp: 64, ..Default::default() });
        for p in &img.pixels {
            for c in p {
                assert!((c - 1.0).abs() < 1e-9, "{c}");
            }
        }
    }

    #[test]
    fn point_light_on_diffuse_sphere() {
        // Radiance at the sphere point facing the light along the camera axis:
        // albedo/π · I / d².
        let light = Light::Point { position: Vec3::new(0.0, 0.0, 3.0), intensity: Vec3::splat(4.0) };
        let scene = Scene::new(camera(), vec![light], vec![sphere_instance(0.5)]).unwrap();
        let img = render(&scene, &RenderConfig { width: 9, height: 9, spp: 1, max_bounces: 1, ..Default::default() });
        let centre = img.get(4, 4)[0];
        let expected = 0.5 / PI * 4.0 / 4.0;
        assert!((centre - expected).abs() / expected < 0.02, "{centre} vs {expected}");
    }

    #[test]
    fn sphere_light_direct_illumination() {
        // A white floor one unit below a sphere light of radius r sees
        // irradiance π·L·r², so its outgoing radiance is L·r².
        let floor = fixtures::box_mesh(Vec3::new(-5.0, -1.1, -5.0), Vec3::new(5.0, -1.0, 5.0));
        let inst = Instance {
            name: "floor".into(),
            transform: Transform::identity(),
            mesh: Some(Arc::new(MeshBvh::new(Arc::new(floor), vec![Material::diffuse(Vec3::ONE)]).unwrap())),
            lsnif: None,
        };
        let cam = Camera {
            position: Vec3::new(0.0, -0.2, 3.0),
            look_at: Vec3::new(0.0, -1.0, 0.0),
            up: Vec3::Y,
            fov_deg: 0.5,
        };
        let light = Light::Sphere { center: Vec3::ZERO, radius: 0.5, radiance: Vec3::ONE };
        let scene = Scene::new(cam, vec![light], vec![inst]).unwrap();
        for max_bounces in [1, 3] {
            let img = render(&scene, &RenderConfig { width: 1, height: 1, spp: 4000, max_bounces, ..Default::default() });
            let got = img.get(0, 0)[0];
            assert!((got - 0.25).abs() < 0.0125, "{got}");
        }
    }
}
