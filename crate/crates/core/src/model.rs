//! The trained per-object bundle and batched inference.

use crate::dda::{collect_boundary_hits_into, BoundaryHits};
use crate::encoding::{EncodingConfig, SparseHashGrid};
use crate::geometry::{LocalFrame, Material, Ray, Vec3};
use crate::mlp::{Activations, HeadOutputs, MlpParams, MlpShape};
use crate::par::{self, Parallelism};
use crate::voxelizer::OccupancyGrid;

/// Rays per inference work item.
const INFER_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("voxel resolution {0} must be a power of two in 2..=256")]
    VoxelResolution(u32),
    #[error("level resolution {level} is not a positive multiple of the voxel resolution {voxel}")]
    LevelResolution { level: u32, voxel: u32 },
    #[error("{0} must be at least 1")]
    Zero(&'static str),
    #[error("hash table size 2^{0} out of range 1..=24")]
    TableSize(u32),
}

/// Architecture hyper-parameters shared by training, files and inference.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub voxel_res: u32,
    /// Maximum boundary points per ray (H).
    pub hit_cap: usize,
    pub level_resolutions: Vec<u32>,
    pub features: usize,
    pub table_size_log2: u32,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            voxel_res: 32,
            hit_cap: 18,
            level_resolutions: vec![64, 128],
            features: 3,
            table_size_log2: 17,
            hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = self.voxel_res;
        if !v.is_power_of_two() || !(2..=256).contains(&v) {
            return Err(ConfigError::VoxelResolution(v));
        }
        if self.level_resolutions.is_empty() {
            return Err(ConfigError::Zero("level count"));
        }
        for &r in &self.level_resolutions {
            if r == 0 || r % v != 0 {
                return Err(ConfigError::LevelResolution { level: r, voxel: v });
            }
        }
        if self.hit_cap == 0 {
            return Err(ConfigError::Zero("hit cap"));
        }
        if self.features == 0 {
            return Err(ConfigError::Zero("feature count"));
        }
        if self.hidden == 0 {
            return Err(ConfigError::Zero("hidden width"));
        }
        if !(1..=24).contains(&self.table_size_log2) {
            return Err(ConfigError::TableSize(self.table_size_log2));
        }
        Ok(())
    }

    pub fn table_size(&self) -> usize {
        1 << self.table_size_log2
    }

    pub fn encoding(&self) -> EncodingConfig {
        EncodingConfig {
            resolutions: self.level_resolutions.clone(),
            features: self.features,
            table_size: self.table_size(),
        }
    }

    /// Network input width `H·L·F`.
    pub fn input_width(&self) -> usize {
        self.hit_cap * self.level_resolutions.len() * self.features
    }

    pub fn mlp_shape(&self, materials: usize) -> MlpShape {
        MlpShape {
            input: self.input_width(),
            hidden: self.hidden,
            materials,
        }
    }
}

/// Network output for one ray that crossed at least one occupied voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub heads: HeadOutputs,
    /// Ray interval inside the object box.
    pub t_enter: f64,
    pub t_exit: f64,
}

/// A predicted intersection, in the object's own space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuralHit {
    pub t: f64,
    pub local_t: f64,
    /// Unit length; `-direction` if the network produced a zero vector.
    pub normal: Vec3,
    pub albedo: Vec3,
    pub material_index: u32,
}

impl Prediction {
    pub fn occluded(&self) -> bool {
        self.heads.occlusion > 0.5
    }

    pub fn to_hit(&self, ray: &Ray) -> Option<NeuralHit> {
        if !self.occluded() {
            return None;
        }
        let local_t = self.heads.local_t as f64;
        let n = self.heads.normal;
        let n = Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64);
        let normal = n.try_normalize().unwrap_or(-ray.direction.normalize());
        let a = self.heads.albedo;
        Some(NeuralHit {
            t: self.t_enter + local_t * (self.t_exit - self.t_enter),
            local_t,
            normal,
            albedo: Vec3::new(a[0] as f64, a[1] as f64, a[2] as f64),
            material_index: self.heads.material_index() as u32,
        })
    }
}

/// Everything needed to intersect one object without its triangles.
#[derive(Clone, Debug, PartialEq)]
pub struct LsnifModel {
    pub config: ModelConfig,
    pub frame: LocalFrame,
    pub grid: OccupancyGrid,
    pub encoder: SparseHashGrid,
    pub mlp: MlpParams,
    pub materials: Vec<Material>,
}

impl LsnifModel {
    pub fn num_materials(&self) -> usize {
        self.mlp.shape().materials
    }

    /// Walks the voxel grid and writes the encoded input row for `ray`.
    /// Returns the box interval, or `None` when the ray misses the box or
    /// crosses no occupied voxel (a guaranteed miss).
    pub fn encode_ray(
        &self,
        ray: &Ray,
        scratch: &mut BoundaryHits,
        row: &mut [f32],
        taps: &mut Vec<crate::encoding::Tap>,
    ) -> Option<(f64, f64)> {
        let (t0, t1) =
            collect_boundary_hits_into(ray, &self.frame, &self.grid, self.config.hit_cap, scratch)?;
        if scratch.is_empty() {
            return None;
        }
        self.encoder
            .encode_hits_into(scratch, self.config.hit_cap, row, taps);
        Some((t0, t1))
    }

    /// Network predictions for a batch of object-space rays.
    pub fn predict(&self, rays: &[Ray], policy: Parallelism) -> Vec<Option<Prediction>> {
        let width = self.config.input_width();
        let out = self.mlp.shape().output();
        let parts = par::map_chunks(policy, rays.len(), INFER_CHUNK, |range| {
            let mut scratch = BoundaryHits::default();
            let mut taps = Vec::new();
            let mut x = Vec::with_capacity(range.len() * width);
            let mut live = Vec::with_capacity(range.len());
            for (i, ray) in rays[range.clone()].iter().enumerate() {
                let start = x.len();
                x.resize(start + width, 0.0);
                taps.clear();
                match self.encode_ray(ray, &mut scratch, &mut x[start..], &mut taps) {
                    Some(interval) => live.push((i, interval)),
                    None => x.truncate(start),
                }
            }
            let mut result = vec![None; range.len()];
            if live.is_empty() {
                return result;
            }
            let mut acts = Activations::default();
            self.mlp.forward(&x, &mut acts).expect("row width matches shape");
            for (row, &(i, (t_enter, t_exit))) in live.iter().enumerate() {
                result[i] = Some(Prediction {
                    heads: HeadOutputs::from_logits(&acts.z[row * out..(row + 1) * out]),
                    t_enter,
                    t_exit,
                });
            }
            result
        });
        parts.into_iter().flatten().collect()
    }

    /// Predicted closest hits for a batch of object-space rays.
    pub fn intersect(&self, rays: &[Ray], policy: Parallelism) -> Vec<Option<NeuralHit>> {
        self.predict(rays, policy)
            .iter()
            .zip(rays)
            .map(|(p, r)| p.as_ref().and_then(|p| p.to_hit(r)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert_eq!(ModelConfig::default().input_width(), 108);
        let bad = ModelConfig {
            level_resolutions: vec![48, 128],
            ..Default::default()
        };
        assert_eq!(
            bad.validate(),
            Err(ConfigError::LevelResolution { level: 48, voxel: 32 })
        );
        let bad = ModelConfig {
            voxel_res: 24,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            hit_cap: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn prediction_decoding() {
        let ray = Ray::unbounded(Vec3::ZERO, Vec3::X);
        let mut heads = HeadOutputs::from_logits(&[2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 3.0]);
        let p = Prediction {
            heads: heads.clone(),
            t_enter: 1.0,
            t_exit: 3.0,
        };
        let hit = p.to_hit(&ray).unwrap();
        assert_eq!(hit.t, 2.0);
        assert_eq!(hit.normal, -Vec3::X);
        assert_eq!(hit.material_index, 1);
        heads.occlusion = 0.5;
        let p = Prediction { heads, ..p };
        assert!(p.to_hit(&ray).is_none());
    }
}
