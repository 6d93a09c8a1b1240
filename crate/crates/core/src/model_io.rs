//! Binary model files and footprint accounting.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "LSNF"  u32 version
//! u32 V, H, L, F, M, hidden, N_mat
//! u32 × L            level resolutions
//! f64 × 6            box min, box max
//! N_mat × { u8 kind, f64 roughness, f64 × 3 albedo }
//! V³/8 bytes         occupancy bits
//! f16 × L·M·F        hash tables, level-major, entry-major
//! f16 × params       W1, b1, W2, b2, W3, b3, row-major
//! ```

use std::fs;
use std::io;
use std::path::Path;

use half::f16;

use crate::encoding::SparseHashGrid;
use crate::geometry::{Aabb, LocalFrame, Material, MaterialKind, Vec3};
use crate::mlp::MlpParams;
use crate::model::{LsnifModel, ModelConfig};
use crate::voxelizer::OccupancyGrid;

pub const MAGIC: [u8; 4] = *b"LSNF";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a model file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported model version {0}")]
    UnsupportedVersion(u32),
    #[error("model file truncated at byte {0}")]
    Truncated(usize),
    #[error("invalid model file: {0}")]
    Invalid(String),
}

/// Byte sizes of the stored components.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Footprint {
    pub voxels: usize,
    pub encoder: usize,
    pub mlp: usize,
    /// Header, level list, box and material table; not part of `total`.
    pub header: usize,
    pub total: usize,
}

impl Footprint {
    pub fn compute(config: &ModelConfig, materials: usize) -> Self {
        let voxels = OccupancyGrid::byte_len_for(config.voxel_res);
        let encoder = config.level_resolutions.len() * config.table_size() * config.features * 2;
        let mlp = config.mlp_shape(materials).param_count() * 2;
        let header = 4 + 4 + 7 * 4 + config.level_resolutions.len() * 4 + 6 * 8 + materials * 33;
        Self {
            voxels,
            encoder,
            mlp,
            header,
            total: voxels + encoder + mlp,
        }
    }

    /// Size of the whole file.
    pub fn file_size(&self) -> usize {
        self.total + self.header
    }
}

pub fn footprint(model: &LsnifModel) -> Footprint {
    Footprint::compute(&model.config, model.num_materials())
}

pub fn to_bytes(model: &LsnifModel) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::with_capacity(footprint(model).file_size());
    out.extend_from_slice(&MAGIC);
    let header = [
        VERSION,
        c.voxel_res,
        c.hit_cap as u32,
        c.level_resolutions.len() as u32,
        c.features as u32,
        c.table_size() as u32,
        c.hidden as u32,
        model.num_materials() as u32,
    ];
    header.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    c.level_resolutions
        .iter()
        .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    let b = model.frame.aabb;
    for v in b.min.to_array().into_iter().chain(b.max.to_array()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for m in &model.materials {
        let (tag, roughness) = match m.kind {
            MaterialKind::Diffuse => (0u8, 0.0),
            MaterialKind::Glossy { roughness } => (1u8, roughness),
        };
        out.push(tag);
        out.extend_from_slice(&roughness.to_le_bytes());
        for v in m.albedo.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(model.grid.as_bytes());
    let halves = model
        .encoder
        .tables()
        .iter()
        .flatten()
        .chain(model.mlp.data());
    for &v in halves {
        out.extend_from_slice(&f16::from_f32(v).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(ModelIoError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ModelIoError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, ModelIoError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn vec3(&mut self) -> Result<Vec3, ModelIoError> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }

    fn halves(&mut self, n: usize) -> Result<Vec<f32>, ModelIoError> {
        let raw = self.take(n.checked_mul(2).ok_or(ModelIoError::Truncated(self.pos))?)?;
        Ok(raw
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect())
    }
}

fn invalid(msg: impl Into<String>) -> ModelIoError {
    ModelIoError::Invalid(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<LsnifModel, ModelIoError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.array::<4>()?;
    if magic != MAGIC {
        return Err(ModelIoError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelIoError::UnsupportedVersion(version));
    }
    let [voxel_res, hit_cap, levels, features, table_size, hidden, n_mat] =
        [(); 7].map(|_| r.u32());
    let (voxel_res, levels, table_size, n_mat) = (voxel_res?, levels?, table_size?, n_mat?);
    if !table_size.is_power_of_two() {
        return Err(invalid(format!("table size {table_size} is not a power of two")));
    }
    if levels > 16 || n_mat == 0 || n_mat > 1 << 16 {
        return Err(invalid(format!("implausible header: L={levels}, N_mat={n_mat}")));
    }
    let level_resolutions = (0..levels).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let config = ModelConfig {
        voxel_res,
        hit_cap: hit_cap? as usize,
        level_resolutions,
        features: features? as usize,
        table_size_log2: table_size.trailing_zeros(),
        hidden: hidden? as usize,
    };
    config.validate().map_err(|e| invalid(e.to_string()))?;

    let (min, max) = (r.vec3()?, r.vec3()?);
    if !(min.cmplt(max).all() && min.is_finite() && max.is_finite()) {
        return Err(invalid("degenerate bounding box"));
    }
    let frame = LocalFrame::new(Aabb::new(min, max));
    let mut materials = Vec::with_capacity(n_mat as usize);
    for _ in 0..n_mat {
        let [tag] = r.array::<1>()?;
        let roughness = r.f64()?;
        let albedo = r.vec3()?;
        let kind = match tag {
            0 => MaterialKind::Diffuse,
            1 => MaterialKind::Glossy { roughness },
            t => return Err(invalid(format!("unknown material kind {t}"))),
        };
        materials.push(Material { albedo, kind });
    }

    let voxel_bytes = r.take(OccupancyGrid::byte_len_for(voxel_res))?.to_vec();
    let grid = OccupancyGrid::from_bytes(voxel_res, voxel_bytes).map_err(|e| invalid(e.to_string()))?;
    let per_level = config.table_size() * config.features;
    let tables = (0..levels)
        .map(|_| r.halves(per_level))
        .collect::<Result<Vec<_>, _>>()?;
    let encoder = SparseHashGrid::from_tables(config.encoding(), tables);
    let shape = config.mlp_shape(n_mat as usize);
    let mlp = MlpParams::from_data(shape, r.halves(shape.param_count())?)
        .map_err(|e| invalid(e.to_string()))?;
    if r.pos != bytes.len() {
        return Err(invalid(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(LsnifModel {
        config,
        frame,
        grid,
        encoder,
        mlp,
        materials,
    })
}

pub fn save(model: &LsnifModel, path: impl AsRef<Path>) -> Result<(), ModelIoError> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<LsnifModel, ModelIoError> {
    from_bytes(&fs::read(path)?)
}

/// The model as it reads back from a file: all trainable values rounded to
/// half precision.
pub fn quantized(model: &LsnifModel) -> LsnifModel {
    from_bytes(&to_bytes(model)).expect("serializer output parses")
}
