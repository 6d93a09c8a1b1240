//! Per-signal accuracy of a trained model against the BVH oracle, parameter
//! sweeps and image comparison.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bvh::MeshBvh;
use crate::geometry::{Material, Mesh, Ray, Vec3};
use crate::image::Image;
use crate::mlp::HeadOutputs;
use crate::model::{LsnifModel, ModelConfig, Prediction};
use crate::model_io::{footprint, Footprint};
use crate::par::{self, Parallelism};
use crate::training::{
    label, sample_external_ray, sample_surface_ray, TrainConfig, TrainError, Trainer,
};

/// Anything that answers object-space rays like a trained model.
pub trait Predictor: Sync {
    fn predict(&self, rays: &[Ray], policy: Parallelism) -> Vec<Option<Prediction>>;
}

impl Predictor for LsnifModel {
    fn predict(&self, rays: &[Ray], policy: Parallelism) -> Vec<Option<Prediction>> {
        LsnifModel::predict(self, rays, policy)
    }
}

/// Answers from the BVH with a model's voxel-grid culling, yielding a perfect
/// score; used to check the evaluator itself.
pub struct OraclePredictor<'a> {
    pub model: &'a LsnifModel,
    pub oracle: &'a MeshBvh,
}

impl Predictor for OraclePredictor<'_> {
    fn predict(&self, rays: &[Ray], policy: Parallelism) -> Vec<Option<Prediction>> {
        let n_mat = self.model.num_materials();
        par::map_range(policy, rays.len(), |i| {
            let ray = &rays[i];
            let hits = crate::dda::collect_boundary_hits(
                ray,
                &self.model.frame,
                &self.model.grid,
                self.model.config.hit_cap,
            );
            if hits.is_empty() {
                return None;
            }
            let (t_enter, t_exit) = self.model.frame.aabb.intersect(ray)?;
            let t = label(ray, self.oracle, t_enter, t_exit);
            let mut probs = vec![0.0; n_mat];
            probs[t.material as usize] = 1.0;
            Some(Prediction {
                heads: HeadOutputs {
                    occlusion: if t.occluded { 1.0 } else { 0.0 },
                    local_t: t.local_t,
                    normal: t.normal,
                    albedo: t.albedo,
                    material_probs: probs,
                },
                t_enter,
                t_exit,
            })
        })
    }
}

/// Accuracy of the predicted signals on held-out rays.
///
/// Rays that cross no occupied voxel never reach the network and count as
/// predicted misses, so the four confusion counts sum to `rays`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rays: usize,
    /// Rays that cross at least one occupied voxel.
    pub informative: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub occlusion_accuracy: f64,
    pub occlusion_precision: f64,
    pub occlusion_recall: f64,
    /// Occlusion accuracy restricted to informative rays.
    pub informative_accuracy: f64,
    /// Mean |Δlocal_t| over true positives.
    pub local_t_mae: f64,
    /// Mean angle between predicted and true normals, degrees.
    pub normal_error_deg: f64,
    pub albedo_mae: f64,
    pub material_accuracy: f64,
}

impl EvalReport {
    /// Scalar summary used by sweeps: occlusion error rate plus mean local
    /// distance error plus mean normal error as a fraction of 180°.
    pub fn composite_error(&self) -> f64 {
        (1.0 - self.occlusion_accuracy) + self.local_t_mae + self.normal_error_deg / 180.0
    }
}

/// Which rays to evaluate on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub rays: usize,
    pub seed: u64,
    /// Share of rays from the bounding sphere; the rest start on the surface.
    pub external_fraction: f64,
    pub policy: Parallelism,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rays: 100_000,
            seed: 0xE7A1,
            external_fraction: 0.5,
            policy: Parallelism::default(),
        }
    }
}

/// Held-out rays drawn like training rays, from an independent stream.
pub fn eval_rays(oracle: &MeshBvh, model: &LsnifModel, config: &EvalConfig) -> Vec<Ray> {
    use rand::Rng;
    let aabb = model.frame.aabb;
    let chunk = 4096;
    par::map_chunks(config.policy, config.rays, chunk, |range| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (range.start as u64 / chunk as u64) << 32);
        range
            .map(|_| {
                if rng.random::<f64>() < config.external_fraction {
                    return sample_external_ray(&aabb, &mut rng);
                }
                loop {
                    if let Some(r) = sample_surface_ray(oracle, &aabb, &mut rng) {
                        return r;
                    }
                }
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

pub fn evaluate(
    predictor: &dyn Predictor,
    model: &LsnifModel,
    oracle: &MeshBvh,
    config: &EvalConfig,
) -> EvalReport {
    let rays = eval_rays(oracle, model, config);
    let predictions = predictor.predict(&rays, config.policy);
    let mut r = EvalReport {
        rays: rays.len(),
        ..Default::default()
    };
    let (mut informative_correct, mut t_err, mut n_err, mut a_err, mut m_ok) = (0usize, 0.0, 0.0, 0.0, 0usize);
    for (ray, p) in rays.iter().zip(&predictions) {
        let Some(p) = p else {
            // Certain miss; the oracle agrees unless the voxelizer lost
            // geometry, which would show up as a false negative.
            match model.frame.aabb.intersect(ray) {
                Some((t0, t1)) if label(ray, oracle, t0, t1).occluded => r.false_negatives += 1,
                _ => r.true_negatives += 1,
            }
            continue;
        };
        r.informative += 1;
        let truth = label(ray, oracle, p.t_enter, p.t_exit);
        let occluded = p.occluded();
        informative_correct += (occluded == truth.occluded) as usize;
        match (occluded, truth.occluded) {
            (true, false) => r.false_positives += 1,
            (false, true) => r.false_negatives += 1,
            (false, false) => r.true_negatives += 1,
            (true, true) => r.true_positives += 1,
        }
        if !(occluded && truth.occluded) {
            continue;
        }
        t_err += (p.heads.local_t as f64 - truth.local_t as f64).abs();
        let pn = Vec3::from_array(p.heads.normal.map(f64::from));
        let tn = Vec3::from_array(truth.normal.map(f64::from));
        n_err += match pn.try_normalize() {
            Some(pn) => pn.dot(tn.normalize()).clamp(-1.0, 1.0).acos().to_degrees(),
            None => 180.0,
        };
        a_err += (0..3)
            .map(|k| (p.heads.albedo[k] - truth.albedo[k]).abs() as f64)
            .sum::<f64>()
            / 3.0;
        m_ok += (p.heads.material_index() as u32 == truth.material) as usize;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let tp = r.true_positives;
    r.occlusion_accuracy = ratio(tp + r.true_negatives, r.rays);
    r.occlusion_precision = ratio(tp, tp + r.false_positives);
    r.occlusion_recall = ratio(tp, tp + r.false_negatives);
    r.informative_accuracy = ratio(informative_correct, r.informative);
    r.local_t_mae = t_err / tp.max(1) as f64;
    r.normal_error_deg = n_err / tp.max(1) as f64;
    r.albedo_mae = a_err / tp.max(1) as f64;
    r.material_accuracy = ratio(m_ok, tp);
    r
}

/// Evaluates a trained model against its mesh.
pub fn eval_model(model: &LsnifModel, oracle: &MeshBvh, config: &EvalConfig) -> EvalReport {
    evaluate(model, model, oracle, config)
}

/// Hyper-parameter varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationParam {
    VoxelRes,
    HitCap,
    TableSizeLog2,
    Steps,
    Width,
}

impl AblationParam {
    pub fn name(self) -> &'static str {
        match self {
            AblationParam::VoxelRes => "voxel_res",
            AblationParam::HitCap => "hit_cap",
            AblationParam::TableSizeLog2 => "hash_size_log2",
            AblationParam::Steps => "steps",
            AblationParam::Width => "width",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            AblationParam::VoxelRes,
            AblationParam::HitCap,
            AblationParam::TableSizeLog2,
            AblationParam::Steps,
            AblationParam::Width,
        ]
        .into_iter()
        .find(|p| p.name() == s || p.name().replace('_', "-") == s)
    }

    fn apply(self, model: &mut ModelConfig, value: u64) {
        match self {
            AblationParam::VoxelRes => {
                model.voxel_res = value as u32;
                // Keep every level on voxel planes.
                for r in &mut model.level_resolutions {
                    if *r % model.voxel_res != 0 {
                        *r = r.div_ceil(model.voxel_res) * model.voxel_res;
                    }
                }
            }
            AblationParam::HitCap => model.hit_cap = value as usize,
            AblationParam::TableSizeLog2 => model.table_size_log2 = value as u32,
            AblationParam::Width => model.hidden = value as usize,
            AblationParam::Steps => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationPoint {
    pub param: AblationParam,
    pub value: u64,
    pub report: EvalReport,
    pub footprint: Footprint,
}

/// Trains one model per value and evaluates each. A step sweep trains once
/// and evaluates at each requested step count.
pub fn ablate(
    mesh: Arc<Mesh>,
    materials: Vec<Material>,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    param: AblationParam,
    values: &[u64],
    eval: &EvalConfig,
) -> Result<Vec<AblationPoint>, TrainError> {
    let mut points = Vec::new();
    if param == AblationParam::Steps {
        let mut sorted = values.to_vec();
        sorted.sort_unstable();
        let mut trainer = Trainer::new(mesh, materials, base_model.clone(), base_train.clone())?;
        for &v in &sorted {
            trainer.run(v as usize - trainer.steps_done().min(v as usize))?;
            points.push(AblationPoint {
                param,
                value: v,
                report: eval_model(trainer.model(), trainer.oracle(), eval),
                footprint: footprint(trainer.model()),
            });
        }
        return Ok(points);
    }
    for &v in values {
        let mut config = base_model.clone();
        param.apply(&mut config, v);
        let mut trainer = Trainer::new(mesh.clone(), materials.clone(), config, base_train.clone())?;
        trainer.run(base_train.steps)?;
        log::info!("{} = {v} trained", param.name());
        points.push(AblationPoint {
            param,
            value: v,
            report: eval_model(trainer.model(), trainer.oracle(), eval),
            footprint: footprint(trainer.model()),
        });
    }
    Ok(points)
}

const COLUMNS: [&str; 9] = [
    "param", "value", "occ_acc", "local_t_mae", "normal_deg", "albedo_mae", "material_acc",
    "composite", "bytes",
];

fn row(p: &AblationPoint) -> [String; 9] {
    let r = &p.report;
    [
        p.param.name().to_string(),
        p.value.to_string(),
        format!("{:.4}", r.occlusion_accuracy),
        format!("{:.4}", r.local_t_mae),
        format!("{:.2}", r.normal_error_deg),
        format!("{:.4}", r.albedo_mae),
        format!("{:.4}", r.material_accuracy),
        format!("{:.4}", r.composite_error()),
        p.footprint.total.to_string(),
    ]
}

/// Right-aligned text table.
pub fn ablation_table(points: &[AblationPoint]) -> String {
    let rows: Vec<[String; 9]> = points.iter().map(row).collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([COLUMNS[c].len()]).max().unwrap())
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
        writeln!(out, "{}", parts.join("  ")).unwrap();
    };
    line(COLUMNS.to_vec(), &mut out);
    for r in &rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

pub fn ablation_csv(points: &[AblationPoint]) -> String {
    let mut out = COLUMNS.join(",") + "\n";
    for p in points {
        out += &row(p).join(",");
        out.push('\n');
    }
    out
}

fn report_fields(r: &EvalReport) -> Vec<(&'static str, String)> {
    vec![
        ("rays", r.rays.to_string()),
        ("informative", r.informative.to_string()),
        ("true_positives", r.true_positives.to_string()),
        ("false_positives", r.false_positives.to_string()),
        ("true_negatives", r.true_negatives.to_string()),
        ("false_negatives", r.false_negatives.to_string()),
        ("occlusion_accuracy", format!("{:.5}", r.occlusion_accuracy)),
        ("occlusion_precision", format!("{:.5}", r.occlusion_precision)),
        ("occlusion_recall", format!("{:.5}", r.occlusion_recall)),
        ("informative_accuracy", format!("{:.5}", r.informative_accuracy)),
        ("local_t_mae", format!("{:.5}", r.local_t_mae)),
        ("normal_error_deg", format!("{:.3}", r.normal_error_deg)),
        ("albedo_mae", format!("{:.5}", r.albedo_mae)),
        ("material_accuracy", format!("{:.5}", r.material_accuracy)),
    ]
}

/// Two aligned columns, one metric per line.
pub fn report_table(r: &EvalReport) -> String {
    let fields = report_fields(r);
    let w = fields.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    fields.iter().map(|(k, v)| format!("{k:<w$}  {v:>12}\n")).collect()
}

/// Header line and one value line.
pub fn report_csv(r: &EvalReport) -> String {
    let fields = report_fields(r);
    let keys: Vec<&str> = fields.iter().map(|(k, _)| *k).collect();
    let values: Vec<&str> = fields.iter().map(|(_, v)| v.as_str()).collect();
    format!("{}\n{}\n", keys.join(","), values.join(","))
}

/// True when `errors` never rises by more than `slack`, and rises at most
/// `max_inversions` times in total.
pub fn is_non_increasing(errors: &[f64], max_inversions: usize, slack: f64) -> bool {
    let mut inversions = 0;
    for w in errors.windows(2) {
        if w[1] > w[0] {
            inversions += 1;
            if w[1] - w[0] > slack {
                return false;
            }
        }
    }
    inversions <= max_inversions
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageDiff {
    pub mae: f64,
    pub rmse: f64,
}

/// Per-channel error between two linear images of the same size.
pub fn compare_images(a: &Image, b: &Image) -> Result<ImageDiff, String> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(format!(
            "size mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        ));
    }
    let n = (a.pixels.len() * 3).max(1) as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, q) in a.pixels.iter().zip(&b.pixels) {
        for k in 0..3 {
            let d = p[k] - q[k];
            abs += d.abs();
            sq += d * d;
        }
    }
    Ok(ImageDiff {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn oracle_predictor_scores_perfectly() {
        let mesh = Arc::new(fixtures::two_material_boxes());
        let trainer = Trainer::new(
            mesh,
            vec![],
            ModelConfig {
                voxel_res: 16,
                hit_cap: 8,
                level_resolutions: vec![16, 32],
                features: 2,
                table_size_log2: 8,
                hidden: 8,
            },
            TrainConfig::default(),
        )
        .unwrap();
        let config = EvalConfig {
            rays: 5000,
            external_fraction: 0.5,
            ..Default::default()
        };
        let oracle = OraclePredictor {
            model: trainer.model(),
            oracle: trainer.oracle(),
        };
        let r = evaluate(&oracle, trainer.model(), trainer.oracle(), &config);
        assert_eq!(r.rays, 5000);
        assert!(r.informative > 1000);
        assert_eq!(r.true_positives + r.false_positives + r.true_negatives + r.false_negatives, r.rays);
        assert_eq!((r.occlusion_precision, r.occlusion_recall), (1.0, 1.0));
        assert_eq!(r.occlusion_accuracy, 1.0);
        assert!(r.local_t_mae < 1e-6);
        assert!(r.normal_error_deg < 1e-2);
        assert_eq!(r.material_accuracy, 1.0);
        assert!(r.composite_error() < 1e-4);
        // An untrained network is not perfect.
        let untrained = eval_model(trainer.model(), trainer.oracle(), &config);
        assert!(untrained.composite_error() > 0.1);
        let u = &untrained;
        assert_eq!(u.true_positives + u.false_positives + u.true_negatives + u.false_negatives, u.rays);
    }

    #[test]
    fn untrained_model_is_at_chance() {
        let trainer = Trainer::new(
            Arc::new(fixtures::uv_sphere(1.0, 32, 16)),
            vec![],
            ModelConfig::default(),
            TrainConfig::default(),
        )
        .unwrap();
        let r = eval_model(trainer.model(), trainer.oracle(), &EvalConfig { rays: 20_000, ..Default::default() });
        assert!((0.4..=0.6).contains(&r.occlusion_accuracy), "{r:?}");
    }

    #[test]
    fn report_formats() {
        let r = EvalReport { rays: 10, true_negatives: 10, occlusion_accuracy: 1.0, ..Default::default() };
        let table = report_table(&r);
        assert_eq!(table.lines().count(), 14);
        let widths: Vec<usize> = table.lines().map(str::len).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]));
        let csv = report_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        assert!(lines[1].starts_with("10,0,0,0,10,0,1.00000"));
    }

    #[test]
    fn trend_check() {
        assert!(is_non_increasing(&[0.04, 0.03, 0.02], 1, 0.01));
        assert!(is_non_increasing(&[0.04, 0.045, 0.02], 1, 0.01));
        assert!(!is_non_increasing(&[0.04, 0.055, 0.02], 1, 0.01));
        assert!(!is_non_increasing(&[0.04, 0.041, 0.03, 0.031], 1, 0.01));
    }

    #[test]
    fn image_comparison() {
        let a = Image::new(2, 1);
        let mut b = Image::new(2, 1);
        b.pixels[0] = [0.3, 0.0, 0.0];
        let d = compare_images(&a, &b).unwrap();
        assert!((d.mae - 0.05).abs() < 1e-12);
        assert!((d.rmse - (0.09f64 / 6.0).sqrt()).abs() < 1e-12);
        assert!(compare_images(&a, &Image::new(1, 2)).is_err());
        let same = compare_images(&b, &b).unwrap();
        assert_eq!((same.mae, same.rmse), (0.0, 0.0));
        let mut c = b.clone();
        c.pixels.iter_mut().flatten().for_each(|v| *v += 0.1);
        let shifted = compare_images(&b, &c).unwrap();
        assert!((shifted.mae - 0.1).abs() < 1e-15 && (shifted.rmse - 0.1).abs() < 1e-15);
    }

    #[test]
    fn table_and_csv() {
        let p = AblationPoint {
            param: AblationParam::HitCap,
            value: 18,
            report: EvalReport {
                occlusion_accuracy: 0.99,
                ..Default::default()
            },
            footprint: Footprint::compute(&ModelConfig::default(), 1),
        };
        let csv = ablation_csv(std::slice::from_ref(&p));
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("hit_cap,18,0.9900,"));
        let table = ablation_table(&[p]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0].len(), lines[1].len());
        assert_eq!(AblationParam::parse("hash-size-log2"), Some(AblationParam::TableSizeLog2));
    }
}
