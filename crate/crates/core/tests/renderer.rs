use std::sync::{Arc, OnceLock};

use lsnif::bvh::MeshBvh;
use lsnif::fixtures;
use lsnif::model::{LsnifModel, ModelConfig};
use lsnif::renderer::{
    cornell, render, Camera, Instance, IntersectOptions, Light, PrimaryMode, RenderConfig, Scene,
};
use lsnif::training::{TrainConfig, Trainer};
use lsnif::{Material, Parallelism, Ray, Transform, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small sphere model trained just enough to report hits.
fn small_model() -> Arc<LsnifModel> {
    static MODEL: OnceLock<Arc<LsnifModel>> = OnceLock::new();
    MODEL
        .get_or_init(|| {
            let config = ModelConfig {
                voxel_res: 16,
                hit_cap: 8,
                level_resolutions: vec![32, 64],
                features: 2,
                table_size_log2: 12,
                hidden: 32,
            };
            let train = TrainConfig {
                steps: 150,
                batch: 1024,
                seed: 5,
                ..Default::default()
            };
            let mesh = Arc::new(fixtures::uv_sphere(1.0, 32, 16));
            let mut t = Trainer::new(mesh, vec![Material::diffuse(Vec3::ONE)], config, train).unwrap();
            t.run(150).unwrap();
            Arc::new(t.into_model())
        })
        .clone()
}

fn camera() -> Camera {
    Camera {
        position: Vec3::new(0.0, 0.5, 5.0),
        look_at: Vec3::ZERO,
        up: Vec3::Y,
        fov_deg: 40.0,
    }
}

/// Two instances of one model beside a triangle floor.
fn mixed_scene(model: Option<Arc<LsnifModel>>) -> Scene {
    let floor = fixtures::box_mesh(Vec3::new(-4.0, -1.2, -4.0), Vec3::new(4.0, -1.0, 4.0));
    let mut instances = vec![Instance {
        name: "floor".into(),
        transform: Transform::identity(),
        mesh: Some(Arc::new(MeshBvh::new(Arc::new(floor), vec![Material::diffuse(Vec3::splat(0.6))]).unwrap())),
        lsnif: None,
    }];
    let sphere = Arc::new(MeshBvh::new(Arc::new(fixtures::uv_sphere(1.0, 32, 16)), vec![Material::diffuse(Vec3::ONE)]).unwrap());
    for (i, x) in [-1.2, 1.2].into_iter().enumerate() {
        instances.push(Instance {
            name: format!("sphere{i}"),
            transform: Transform::from_trs(Vec3::new(x, 0.0, 0.0), Vec3::ZERO, Vec3::splat(0.8)).unwrap(),
            mesh: Some(sphere.clone()),
            lsnif: model.clone(),
        });
    }
    let lights = vec![
        Light::Point { position: Vec3::new(2.0, 4.0, 3.0), intensity: Vec3::splat(20.0) },
        Light::Sphere { center: Vec3::new(-2.0, 3.0, 1.0), radius: 0.3, radiance: Vec3::splat(10.0) },
        Light::Environment { radiance: Vec3::splat(0.2) },
    ];
    Scene::new(camera(), lights, instances).unwrap()
}

fn small(primary: PrimaryMode, sort_pairs: bool, policy: Parallelism) -> RenderConfig {
    RenderConfig {
        width: 20,
        height: 16,
        spp: 3,
        max_bounces: 3,
        seed: 11,
        primary,
        sort_pairs,
        policy,
    }
}

#[test]
fn sorted_and_unsorted_pairs_render_identically() {
    let scene = mixed_scene(Some(small_model()));
    for primary in [PrimaryMode::Bvh, PrimaryMode::Lsnif] {
        let a = render(&scene, &small(primary, true, Parallelism::Parallel));
        let b = render(&scene, &small(primary, false, Parallelism::Parallel));
        assert_eq!(a, b);
    }
}

#[test]
fn sequential_and_parallel_render_identically() {
    let scene = mixed_scene(Some(small_model()));
    let a = render(&scene, &small(PrimaryMode::Bvh, true, Parallelism::Sequential));
    let b = render(&scene, &small(PrimaryMode::Bvh, true, Parallelism::Parallel));
    assert_eq!(a, b);
}

#[test]
fn without_models_every_mode_matches_plain_bvh() {
    let scene = mixed_scene(None);
    let reference = render(&scene, &small(PrimaryMode::Bvh, true, Parallelism::Sequential));
    for (primary, sorted) in [(PrimaryMode::Lsnif, true), (PrimaryMode::Bvh, false), (PrimaryMode::Lsnif, false)] {
        assert_eq!(render(&scene, &small(primary, sorted, Parallelism::Parallel)), reference);
    }
    // Non-zero content so the comparison means something.
    assert!(reference.mean()[0] > 0.05);
}

#[test]
fn models_change_only_secondary_effects_in_bvh_mode() {
    // Primary hits come from triangles, so pixels whose camera ray escapes
    // are identical; the model's influence shows up elsewhere.
    let with = render(&mixed_scene(Some(small_model())), &small(PrimaryMode::Bvh, true, Parallelism::Parallel));
    let without = render(&mixed_scene(None), &small(PrimaryMode::Bvh, true, Parallelism::Parallel));
    let scene = mixed_scene(None);
    let aspect = 20.0 / 16.0;
    let mut escaped = 0;
    for y in 0..16 {
        for x in 0..20 {
            let ray = scene.camera.ray((x as f64 + 0.5) / 20.0, (y as f64 + 0.5) / 16.0, aspect);
            let hit = scene.intersect(&[ray], &IntersectOptions::default())[0];
            if hit.is_none() && y < 3 {
                escaped += 1;
                assert_eq!(with.get(x, y), without.get(x, y));
            }
        }
    }
    assert!(escaped > 0);
}

fn random_rays(scene: &Scene, n: usize, seed: u64) -> Vec<Ray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = scene.bounds();
    (0..n)
        .map(|_| {
            let o = b.center() + Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * 2.0 * b.extent();
            let target = b.min + Vec3::new(rng.random(), rng.random(), rng.random()) * b.extent();
            Ray::unbounded(o, target - o)
        })
        .collect()
}

#[test]
fn broad_phase_pairs_are_sorted_and_neural_hits_stay_in_their_interval() {
    let scene = mixed_scene(Some(small_model()));
    let rays = random_rays(&scene, 4000, 2);
    let options = IntersectOptions::default();
    let best = vec![None; rays.len()];
    let pairs = scene.broad_phase(&rays, &best, &options);
    assert!(!pairs.is_empty());
    assert!(pairs.windows(2).all(|w| w[0].instance <= w[1].instance));
    for p in &pairs {
        assert!(p.t_enter <= p.t_exit);
    }
    let hits = scene.intersect(&rays, &options);
    let mut neural = 0;
    for (i, h) in hits.iter().enumerate() {
        let Some(h) = h else { continue };
        if !h.neural {
            continue;
        }
        neural += 1;
        let pair = pairs.iter().find(|p| p.ray == i as u32 && p.instance == h.instance).unwrap();
        assert!(h.t >= pair.t_enter - 1e-9 && h.t <= pair.t_exit + 1e-9);
        assert!((h.normal.length() - 1.0).abs() < 1e-9);
    }
    assert!(neural > 100);
}

#[test]
fn batched_inference_matches_single_rays() {
    let model = small_model();
    let rays = random_rays(&mixed_scene(None), 4096, 9)
        .into_iter()
        .map(|r| Ray::unbounded(r.origin * 0.5, r.direction))
        .collect::<Vec<_>>();
    let batch = model.predict(&rays, Parallelism::Sequential);
    let mut max_diff = 0.0f32;
    let mut live = 0;
    for (ray, b) in rays.iter().zip(&batch) {
        let single = &model.predict(std::slice::from_ref(ray), Parallelism::Sequential)[0];
        match (b, single) {
            (None, None) => {}
            (Some(b), Some(s)) => {
                live += 1;
                let pairs = [(b.heads.occlusion, s.heads.occlusion), (b.heads.local_t, s.heads.local_t)];
                for (x, y) in pairs {
                    max_diff = max_diff.max((x - y).abs());
                }
                for k in 0..3 {
                    max_diff = max_diff.max((b.heads.normal[k] - s.heads.normal[k]).abs());
                    max_diff = max_diff.max((b.heads.albedo[k] - s.heads.albedo[k]).abs());
                }
            }
            _ => panic!("batch and single disagree on liveness"),
        }
    }
    assert!(live > 500);
    assert!(max_diff < 1e-6, "{max_diff}");
    // Permutation: reversed input gives reversed output.
    let reversed: Vec<Ray> = rays.iter().rev().copied().collect();
    let rb = model.predict(&reversed, Parallelism::Parallel);
    for (a, b) in batch.iter().zip(rb.iter().rev()) {
        assert_eq!(a.as_ref().map(|p| p.heads.occlusion), b.as_ref().map(|p| p.heads.occlusion));
    }
}

#[test]
fn cornell_fixture_renders_with_and_without_model() {
    let config = RenderConfig { width: 12, height: 12, spp: 2, ..Default::default() };
    let a = render(&cornell::cornell_scene(None).unwrap(), &config);
    assert!(a.pixels.iter().flatten().all(|v| v.is_finite() && *v >= 0.0));
    assert!(a.mean()[0] > 0.05);
}

#[test]
fn instanced_model_shares_one_network() {
    let scene = mixed_scene(Some(small_model()));
    let a = scene.instances()[1].lsnif.as_ref().unwrap();
    let b = scene.instances()[2].lsnif.as_ref().unwrap();
    assert!(Arc::ptr_eq(a, b));
}
