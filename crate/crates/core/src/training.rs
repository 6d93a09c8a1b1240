//! Ray sampling, ground-truth labels, the composite loss and the training loop.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bvh::{BvhError, MeshBvh};
use crate::dda::BoundaryHits;
use crate::encoding::{SparseHashGrid, Tap};
use crate::geometry::{Aabb, LocalFrame, Material, Mesh, Ray, Vec3};
use crate::mlp::{
    sigmoid, Activations, AdamConfig, AdamState, MlpParams, OUT_ALBEDO, OUT_LOCAL_T, OUT_MATERIAL,
    OUT_NORMAL, OUT_OCCLUSION,
};
use crate::model::{ConfigError, LsnifModel, ModelConfig};
use crate::par::{self, Parallelism};
use crate::voxelizer::{voxelize_surface, VoxelError};

/// Offset of spawned ray origins along the surface normal, relative to the
/// object's box diagonal.
pub const SELF_INTERSECTION_EPS: f64 = 1e-3;
/// Attempts per sample before giving up on a surface ray or an informative ray.
pub const MAX_RETRIES: usize = 64;
/// Stabilizer in the relative L2 albedo loss.
pub const REL_L2_EPS: f32 = 1e-2;
/// Samples per work item; fixed so results do not depend on worker count.
const CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Bvh(#[from] BvhError),
    #[error("invalid training config: {0}")]
    Invalid(String),
    #[error("no ray of a whole batch crossed an occupied voxel")]
    NoSamples,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub occlusion: f32,
    pub local_t: f32,
    pub normal: f32,
    pub albedo: f32,
    pub material: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            occlusion: 1.0,
            local_t: 1.0,
            normal: 1.0,
            albedo: 1.0,
            material: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Fraction of rays that start outside the object.
    pub external_fraction: f64,
    pub weights: LossWeights,
    pub policy: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 1 << 14,
            adam: AdamConfig::default(),
            seed: 0,
            external_fraction: 0.5,
            weights: LossWeights::default(),
            policy: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 || self.batch == 0 {
            return Err(TrainError::Invalid("steps and batch must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.external_fraction) {
            return Err(TrainError::Invalid("external fraction must be in [0, 1]".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(TrainError::Invalid("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Ground truth for one ray. Only `occluded` is meaningful when it is false.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub occluded: bool,
    pub local_t: f32,
    pub normal: [f32; 3],
    pub albedo: [f32; 3],
    pub material: u32,
}

impl Target {
    pub const MISS: Target = Target {
        occluded: false,
        local_t: 0.0,
        normal: [0.0; 3],
        albedo: [0.0; 3],
        material: 0,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub ray: Ray,
    pub hits: BoundaryHits,
    pub t_enter: f64,
    pub t_exit: f64,
    pub target: Target,
    pub external: bool,
}

/// Orthonormal basis with `n` as the third axis.
pub fn basis(n: Vec3) -> (Vec3, Vec3) {
    n.any_orthonormal_pair()
}

/// Cosine-weighted direction in the hemisphere around unit `n`.
pub fn cosine_hemisphere<R: Rng>(n: Vec3, rng: &mut R) -> Vec3 {
    let (u1, u2): (f64, f64) = (rng.random(), rng.random());
    let r = u1.sqrt();
    let phi = 2.0 * PI * u2;
    let (t, b) = basis(n);
    (t * (r * phi.cos()) + b * (r * phi.sin()) + n * (1.0 - u1).max(0.0).sqrt()).normalize()
}

pub fn uniform_sphere<R: Rng>(rng: &mut R) -> Vec3 {
    let z: f64 = 1.0 - 2.0 * rng.random::<f64>();
    let phi = 2.0 * PI * rng.random::<f64>();
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Ray from a uniform point on the box's circumscribed sphere, cosine
/// distributed about the direction to the centre.
pub fn sample_external_ray<R: Rng>(aabb: &Aabb, rng: &mut R) -> Ray {
    let center = aabb.center();
    let radius = 0.5 * aabb.diagonal();
    let origin = center + uniform_sphere(rng) * radius;
    let inward = (center - origin).normalize();
    Ray::unbounded(origin, cosine_hemisphere(inward, rng))
}

/// Casts an external probe ray and spawns a ray from its hit point, offset
/// along the normal facing the probe and cosine distributed about it.
pub fn sample_surface_ray<R: Rng>(oracle: &MeshBvh, aabb: &Aabb, rng: &mut R) -> Option<Ray> {
    let probe = sample_external_ray(aabb, rng);
    let hit = oracle.intersect_closest(&probe)?;
    let mut n = hit.geometric_normal;
    if n.dot(probe.direction) > 0.0 {
        n = -n;
    }
    let origin = hit.position + n * (SELF_INTERSECTION_EPS * aabb.diagonal());
    Some(Ray::unbounded(origin, cosine_hemisphere(n, rng)))
}

/// Closest-hit ground truth for `ray` within `[t_enter, t_exit]`.
pub fn label(ray: &Ray, oracle: &MeshBvh, t_enter: f64, t_exit: f64) -> Target {
    let clipped = Ray {
        t_min: ray.t_min.max(t_enter),
        t_max: ray.t_max.min(t_exit),
        ..*ray
    };
    if clipped.t_max <= clipped.t_min {
        return Target::MISS;
    }
    let Some(hit) = oracle.intersect_closest(&clipped) else {
        return Target::MISS;
    };
    let local_t = (hit.t - t_enter) / (t_exit - t_enter);
    debug_assert!((-1e-9..=1.0 + 1e-9).contains(&local_t));
    let n = hit.shading_normal;
    let a = hit.albedo;
    Target {
        occluded: true,
        local_t: local_t.clamp(0.0, 1.0) as f32,
        normal: [n.x as f32, n.y as f32, n.z as f32],
        albedo: [a.x as f32, a.y as f32, a.z as f32],
        material: hit.material_index,
    }
}

/// Per-head loss values of one sample or a batch mean.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub occlusion: f64,
    pub local_t: f64,
    pub normal: f64,
    pub albedo: f64,
    pub material: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.occlusion + self.local_t + self.normal + self.albedo + self.material
    }

    fn add(&mut self, o: &LossTerms) {
        self.occlusion += o.occlusion;
        self.local_t += o.local_t;
        self.normal += o.normal;
        self.albedo += o.albedo;
        self.material += o.material;
    }

    fn scaled(&self, s: f64) -> LossTerms {
        LossTerms {
            occlusion: self.occlusion * s,
            local_t: self.local_t * s,
            normal: self.normal * s,
            albedo: self.albedo * s,
            material: self.material * s,
        }
    }
}

/// Weighted composite loss of one output row `z` (raw logits). Writes
/// `scale · dL/dz` into `dz`. Terms other than occlusion are masked out,
/// values and gradients, when the target is not occluded.
pub fn composite_loss(
    z: &[f32],
    target: &Target,
    weights: &LossWeights,
    scale: f32,
    dz: &mut [f32],
) -> LossTerms {
    assert_eq!(z.len(), dz.len());
    let mut terms = LossTerms::default();

    // Binary cross-entropy on the logit, stable for large |z|.
    let zo = z[OUT_OCCLUSION];
    let y = if target.occluded { 1.0 } else { 0.0 };
    terms.occlusion = weights.occlusion as f64
        * ((zo.max(0.0) - zo * y) as f64 + (-(zo.abs() as f64)).exp().ln_1p());
    dz[OUT_OCCLUSION] = scale * weights.occlusion * (sigmoid(zo) - y);

    if !target.occluded {
        dz[OUT_LOCAL_T..].fill(0.0);
        return terms;
    }

    let p = sigmoid(z[OUT_LOCAL_T]);
    let d = p - target.local_t;
    terms.local_t = weights.local_t as f64 * d.abs() as f64;
    let sign = if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    };
    dz[OUT_LOCAL_T] = scale * weights.local_t * sign * p * (1.0 - p);

    let n = &z[OUT_NORMAL..OUT_NORMAL + 3];
    let t = &target.normal;
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    let dn = &mut dz[OUT_NORMAL..OUT_NORMAL + 3];
    if len > 1e-12 {
        let dot = n[0] * t[0] + n[1] * t[1] + n[2] * t[2];
        let cos = dot / len;
        terms.normal = weights.normal as f64 * (1.0 - cos) as f64;
        for k in 0..3 {
            dn[k] = -scale * weights.normal * (t[k] / len - dot * n[k] / (len * len * len));
        }
    } else {
        terms.normal = weights.normal as f64;
        for k in 0..3 {
            dn[k] = -scale * weights.normal * t[k];
        }
    }

    let mut albedo = 0.0f64;
    for k in 0..3 {
        let a = sigmoid(z[OUT_ALBEDO + k]);
        let d = a - target.albedo[k];
        let q = a * a + REL_L2_EPS;
        albedo += (d * d / q) as f64;
        let da = 2.0 * d / q - d * d * 2.0 * a / (q * q);
        dz[OUT_ALBEDO + k] = scale * weights.albedo * da * a * (1.0 - a);
    }
    terms.albedo = weights.albedo as f64 * albedo;

    let logits = &z[OUT_MATERIAL..];
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f64 = logits.iter().map(|&v| ((v - max) as f64).exp()).sum();
    let k = target.material as usize;
    terms.material = weights.material as f64 * (sum.ln() - (logits[k] - max) as f64);
    for (i, (g, &v)) in dz[OUT_MATERIAL..].iter_mut().zip(logits).enumerate() {
        let prob = (((v - max) as f64).exp() / sum) as f32;
        let onehot = if i == k { 1.0 } else { 0.0 };
        *g = scale * weights.material * (prob - onehot);
    }
    terms
}

/// Statistics of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    /// Batch-mean loss terms.
    pub loss: LossTerms,
    pub occluded_fraction: f64,
    pub external_fraction: f64,
    /// Batch slots left empty because every retry missed the grid.
    pub dropped: usize,
}

impl StepStats {
    pub fn log_line(&self) -> String {
        let l = &self.loss;
        format!(
            "step {:>5}  loss {:.5}  occ {:.5}  t {:.5}  normal {:.5}  albedo {:.5}  material {:.5}",
            self.step,
            l.total(),
            l.occlusion,
            l.local_t,
            l.normal,
            l.albedo,
            l.material
        )
    }
}

/// Draws one informative sample: a ray that crosses at least one occupied
/// voxel, its encoded input row (taps appended to `taps`) and ground truth.
/// `scratch` is left holding the ray's boundary points.
pub fn draw_sample<R: Rng>(
    model: &LsnifModel,
    oracle: &MeshBvh,
    external_fraction: f64,
    rng: &mut R,
    scratch: &mut BoundaryHits,
    row: &mut [f32],
    taps: &mut Vec<Tap>,
) -> Option<TrainSampleHead> {
    let external = rng.random::<f64>() < external_fraction;
    let aabb = model.frame.aabb;
    for _ in 0..MAX_RETRIES {
        let ray = if external {
            sample_external_ray(&aabb, rng)
        } else {
            match sample_surface_ray(oracle, &aabb, rng) {
                Some(r) => r,
                None => continue,
            }
        };
        let mark = taps.len();
        if let Some((t_enter, t_exit)) = model.encode_ray(&ray, scratch, row, taps) {
            return Some(TrainSampleHead {
                ray,
                t_enter,
                t_exit,
                target: label(&ray, oracle, t_enter, t_exit),
                external,
            });
        }
        taps.truncate(mark);
    }
    None
}

/// A drawn sample without its boundary points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSampleHead {
    pub ray: Ray,
    pub t_enter: f64,
    pub t_exit: f64,
    pub target: Target,
    pub external: bool,
}

/// Loss and gradients of a batch of encoded rows `x`. Returns the summed
/// (unscaled) loss terms, the parameter gradient and the input gradient,
/// both multiplied by `scale`.
pub fn loss_and_gradients(
    mlp: &MlpParams,
    x: &[f32],
    targets: &[Target],
    weights: &LossWeights,
    scale: f32,
) -> (LossTerms, Vec<f32>, Vec<f32>) {
    let out = mlp.shape().output();
    let rows = targets.len();
    assert_eq!(x.len(), rows * mlp.shape().input);
    let mut acts = Activations::default();
    mlp.forward(x, &mut acts).expect("row width matches shape");
    let mut dz = vec![0.0f32; rows * out];
    let mut loss = LossTerms::default();
    for (r, target) in targets.iter().enumerate() {
        let terms = composite_loss(
            &acts.z[r * out..(r + 1) * out],
            target,
            weights,
            scale,
            &mut dz[r * out..(r + 1) * out],
        );
        loss.add(&terms);
    }
    let mut grads = vec![0.0f32; mlp.data().len()];
    let mut dx = vec![0.0f32; x.len()];
    mlp.backward(x, &acts, &dz, &mut grads, Some(&mut dx));
    (loss, grads, dx)
}

fn mix_seed(seed: u64, step: u64, chunk: u64) -> u64 {
    // splitmix64 finalizer over a combined key.
    let mut z = seed
        ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ chunk.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct ChunkResult {
    loss: LossTerms,
    drawn: usize,
    occluded: usize,
    external: usize,
    mlp_grads: Vec<f32>,
    taps: Vec<Tap>,
    dx: Vec<f32>,
}

/// Joint optimizer for one object's grid and network.
pub struct Trainer {
    model: LsnifModel,
    oracle: MeshBvh,
    config: TrainConfig,
    mlp_adam: AdamState,
    grid_adam: Vec<AdamState>,
    step: usize,
    history: Vec<StepStats>,
}

impl Trainer {
    pub fn new(
        mesh: Arc<Mesh>,
        materials: Vec<Material>,
        model_config: ModelConfig,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        model_config.validate()?;
        config.validate()?;
        let oracle = MeshBvh::new(mesh.clone(), materials)?;
        let frame = LocalFrame::for_mesh(&mesh);
        let grid = voxelize_surface(&mesh, &frame, model_config.voxel_res, config.policy)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = SparseHashGrid::new(model_config.encoding(), &mut rng);
        let n_mat = oracle.materials().len();
        let mlp = MlpParams::kaiming(model_config.mlp_shape(n_mat), &mut rng);
        let model = LsnifModel {
            config: model_config,
            frame,
            grid,
            encoder,
            mlp,
            materials: oracle.materials().to_vec(),
        };
        Ok(Self::from_model(model, oracle, config))
    }

    /// Continues training an existing model against `oracle`.
    pub fn from_model(model: LsnifModel, oracle: MeshBvh, config: TrainConfig) -> Self {
        let mlp_adam = AdamState::new(config.adam, model.mlp.data().len());
        let grid_adam = model
            .encoder
            .tables()
            .iter()
            .map(|t| AdamState::new(config.adam, t.len()))
            .collect();
        Self {
            model,
            oracle,
            config,
            mlp_adam,
            grid_adam,
            step: 0,
            history: Vec::new(),
        }
    }

    pub fn model(&self) -> &LsnifModel {
        &self.model
    }

    pub fn into_model(self) -> LsnifModel {
        self.model
    }

    pub fn oracle(&self) -> &MeshBvh {
        &self.oracle
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[StepStats] {
        &self.history
    }

    /// Draws one sample from the training distribution.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Option<TrainSample> {
        let mut hits = BoundaryHits::default();
        let mut row = vec![0.0; self.model.config.input_width()];
        let head = draw_sample(
            &self.model,
            &self.oracle,
            self.config.external_fraction,
            rng,
            &mut hits,
            &mut row,
            &mut Vec::new(),
        )?;
        Some(TrainSample {
            ray: head.ray,
            hits,
            t_enter: head.t_enter,
            t_exit: head.t_exit,
            target: head.target,
            external: head.external,
        })
    }

    fn run_chunk(&self, range: std::ops::Range<usize>) -> Result<ChunkResult, TrainError> {
        let model = &self.model;
        let width = model.config.input_width();
        let rows = range.len();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            self.config.seed,
            self.step as u64,
            (range.start / CHUNK) as u64,
        ));
        let mut scratch = BoundaryHits::default();
        let mut x = vec![0.0f32; rows * width];
        let mut taps = Vec::new();
        let mut targets = Vec::with_capacity(rows);
        let mut external = 0;
        // A slot whose retries run out is dropped; the next draw reuses its row.
        let mut drawn = 0;
        for _ in 0..rows {
            let first = taps.len();
            let row = &mut x[drawn * width..(drawn + 1) * width];
            let Some(head) = draw_sample(
                model,
                &self.oracle,
                self.config.external_fraction,
                &mut rng,
                &mut scratch,
                row,
                &mut taps,
            ) else {
                row.fill(0.0);
                continue;
            };
            // Tap slots are row-relative; move them into the chunk matrix.
            let base = (drawn * width) as u32;
            taps[first..].iter_mut().for_each(|t| t.slot += base);
            targets.push(head.target);
            external += head.external as usize;
            drawn += 1;
        }
        x.truncate(drawn * width);

        let scale = 1.0 / self.config.batch as f32;
        let (loss, mlp_grads, dx) =
            loss_and_gradients(&model.mlp, &x, &targets, &self.config.weights, scale);
        Ok(ChunkResult {
            loss,
            drawn,
            occluded: targets.iter().filter(|t| t.occluded).count(),
            external,
            mlp_grads,
            taps,
            dx,
        })
    }

    /// One optimizer step over a fresh batch.
    pub fn step(&mut self) -> Result<StepStats, TrainError> {
        let batch = self.config.batch;
        let chunks = par::map_chunks(self.config.policy, batch, CHUNK, |r| self.run_chunk(r));
        let mut mlp_grads = vec![0.0f32; self.model.mlp.data().len()];
        let mut grid_grads = self.model.encoder.zero_gradients();
        let mut loss = LossTerms::default();
        let (mut occluded, mut external, mut drawn) = (0, 0, 0);
        // Reduction in chunk order keeps the sum independent of scheduling.
        for chunk in chunks {
            let chunk = chunk?;
            drawn += chunk.drawn;
            for (g, c) in mlp_grads.iter_mut().zip(&chunk.mlp_grads) {
                *g += c;
            }
            self.model
                .encoder
                .accumulate_grad(&chunk.taps, &chunk.dx, &mut grid_grads);
            loss.add(&chunk.loss);
            occluded += chunk.occluded;
            external += chunk.external;
        }
        if drawn == 0 {
            return Err(TrainError::NoSamples);
        }
        // Gradients were scaled by 1/B; renormalize to the mean over the
        // samples actually drawn.
        if drawn < batch {
            let k = batch as f32 / drawn as f32;
            mlp_grads.iter_mut().for_each(|g| *g *= k);
            grid_grads.tables.iter_mut().flatten().for_each(|g| *g *= k);
        }
        self.mlp_adam.step(self.model.mlp.data_mut(), &mlp_grads);
        for ((table, grads), adam) in self
            .model
            .encoder
            .tables_mut()
            .iter_mut()
            .zip(&grid_grads.tables)
            .zip(&mut self.grid_adam)
        {
            adam.step(table, grads);
        }
        self.step += 1;
        let stats = StepStats {
            step: self.step,
            loss: loss.scaled(1.0 / drawn as f64),
            occluded_fraction: occluded as f64 / drawn as f64,
            external_fraction: external as f64 / drawn as f64,
            dropped: batch - drawn,
        };
        if self.step.is_multiple_of(10) {
            log::info!("{}", stats.log_line());
        }
        self.history.push(stats);
        Ok(stats)
    }

    /// Runs `steps` more steps.
    pub fn run(&mut self, steps: usize) -> Result<(), TrainError> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }
}

/// Trains a fresh model for `config.steps` steps.
pub fn train(
    mesh: Arc<Mesh>,
    materials: Vec<Material>,
    model_config: ModelConfig,
    config: TrainConfig,
) -> Result<(LsnifModel, Vec<StepStats>), TrainError> {
    let steps = config.steps;
    let mut trainer = Trainer::new(mesh, materials, model_config, config)?;
    trainer.run(steps)?;
    let history = trainer.history().to_vec();
    Ok((trainer.into_model(), history))
}

/// Mean of `window` consecutive total losses ending at `step` (1-based).
pub fn moving_average(history: &[StepStats], step: usize, window: usize) -> f64 {
    let end = step.min(history.len());
    let start = end.saturating_sub(window);
    let slice = &history[start..end];
    slice.iter().map(|s| s.loss.total()).sum::<f64>() / slice.len().max(1) as f64
}
