//! Binary surface occupancy on a `V³` grid over the object's local unit cube.

use crate::geometry::{LocalFrame, Mesh, Triangle, Vec3};
use crate::par::{self, Parallelism};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VoxelError {
    #[error("voxel resolution must be a power of two in 2..=256, got {0}")]
    BadResolution(u32),
    #[error("voxel ({ix}, {iy}, {iz}) outside a {resolution}³ grid")]
    OutOfRange {
        ix: u32,
        iy: u32,
        iz: u32,
        resolution: u32,
    },
    #[error("expected {expected} bytes of occupancy, got {actual}")]
    ByteLength { expected: usize, actual: usize },
}

/// Bit-packed occupancy. Bit `ix + V·(iy + V·iz)` lives in byte `idx / 8`
/// at bit `idx % 8` (least significant first).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyGrid {
    resolution: u32,
    bits: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(resolution: u32) -> Result<Self, VoxelError> {
        if !(2..=256).contains(&resolution) || !resolution.is_power_of_two() {
            return Err(VoxelError::BadResolution(resolution));
        }
        Ok(Self {
            resolution,
            bits: vec![0; Self::byte_len_for(resolution)],
        })
    }

    pub fn from_bytes(resolution: u32, bytes: Vec<u8>) -> Result<Self, VoxelError> {
        let grid = Self::new(resolution)?;
        if bytes.len() != grid.bits.len() {
            return Err(VoxelError::ByteLength {
                expected: grid.bits.len(),
                actual: bytes.len(),
            });
        }
        Ok(Self {
            resolution,
            bits: bytes,
        })
    }

    /// `V³ / 8`.
    pub fn byte_len_for(resolution: u32) -> usize {
        (resolution as usize).pow(3) / 8
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    fn index(&self, ix: u32, iy: u32, iz: u32) -> usize {
        let v = self.resolution as usize;
        ix as usize + v * (iy as usize + v * iz as usize)
    }

    fn check(&self, ix: u32, iy: u32, iz: u32) -> Result<(), VoxelError> {
        let v = self.resolution;
        if ix >= v || iy >= v || iz >= v {
            return Err(VoxelError::OutOfRange {
                ix,
                iy,
                iz,
                resolution: v,
            });
        }
        Ok(())
    }

    pub fn get(&self, ix: u32, iy: u32, iz: u32) -> Result<bool, VoxelError> {
        self.check(ix, iy, iz)?;
        Ok(self.occupied([ix, iy, iz]))
    }

    pub fn set(&mut self, ix: u32, iy: u32, iz: u32, value: bool) -> Result<(), VoxelError> {
        self.check(ix, iy, iz)?;
        let i = self.index(ix, iy, iz);
        if value {
            self.bits[i >> 3] |= 1 << (i & 7);
        } else {
            self.bits[i >> 3] &= !(1 << (i & 7));
        }
        Ok(())
    }

    /// Unchecked lookup for traversal loops; indices must be `< V`.
    #[inline]
    pub fn occupied(&self, cell: [u32; 3]) -> bool {
        debug_assert!(cell.iter().all(|&c| c < self.resolution));
        let i = self.index(cell[0], cell[1], cell[2]);
        self.bits[i >> 3] & (1 << (i & 7)) != 0
    }

    pub fn count_occupied(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn union_with(&mut self, other: &OccupancyGrid) {
        assert_eq!(self.resolution, other.resolution);
        self.bits
            .iter_mut()
            .zip(&other.bits)
            .for_each(|(a, b)| *a |= b);
    }

    /// Halves the resolution, OR-ing each 2×2×2 block.
    pub fn downsample(&self) -> Result<OccupancyGrid, VoxelError> {
        let half = self.resolution / 2;
        let mut out = OccupancyGrid::new(half)?;
        for iz in 0..self.resolution {
            for iy in 0..self.resolution {
                for ix in 0..self.resolution {
                    if self.occupied([ix, iy, iz]) {
                        out.set(ix / 2, iy / 2, iz / 2, true)?;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn occupied_cells(&self) -> impl Iterator<Item = [u32; 3]> + '_ {
        let v = self.resolution;
        (0..v * v * v)
            .map(move |i| [i % v, (i / v) % v, i / (v * v)])
            .filter(|&c| self.occupied(c))
    }
}

const TRIANGLES_PER_TASK: usize = 2048;

/// Marks every cell whose closed box overlaps a triangle of `mesh`
/// (expressed in `frame`'s local space).
pub fn voxelize_surface(
    mesh: &Mesh,
    frame: &LocalFrame,
    resolution: u32,
    policy: Parallelism,
) -> Result<OccupancyGrid, VoxelError> {
    let local: Vec<Triangle> = mesh
        .triangles()
        .map(|t| frame.triangle_to_local(&t))
        .collect();
    voxelize_local(&local, resolution, policy)
}

/// Voxelizes triangles already in unit-cube coordinates.
pub fn voxelize_local(
    triangles: &[Triangle],
    resolution: u32,
    policy: Parallelism,
) -> Result<OccupancyGrid, VoxelError> {
    let empty = OccupancyGrid::new(resolution)?;
    let partials = par::map_chunks(policy, triangles.len(), TRIANGLES_PER_TASK, |range| {
        let mut grid = empty.clone();
        for tri in &triangles[range] {
            rasterize(&mut grid, tri);
        }
        grid
    });
    Ok(partials.into_iter().fold(empty, |mut acc, g| {
        acc.union_with(&g);
        acc
    }))
}

fn rasterize(grid: &mut OccupancyGrid, tri: &Triangle) {
    let v = grid.resolution;
    let vf = v as f64;
    let b = tri.aabb();
    // Closed cells touching the box; a coordinate on a cell plane selects
    // both neighbours.
    let lo = |x: f64| ((x * vf).ceil() as i64 - 1).clamp(0, v as i64 - 1) as u32;
    let hi = |x: f64| ((x * vf).floor() as i64).clamp(0, v as i64 - 1) as u32;
    if b.max.cmplt(Vec3::ZERO).any() || b.min.cmpgt(Vec3::ONE).any() {
        return;
    }
    let (x0, x1) = (lo(b.min.x), hi(b.max.x));
    let (y0, y1) = (lo(b.min.y), hi(b.max.y));
    let (z0, z1) = (lo(b.min.z), hi(b.max.z));

    let degenerate = (tri.v1 - tri.v0).cross(tri.v2 - tri.v0).length_squared() < 1e-30;
    // Slight growth absorbs rounding in the projections.
    let half = Vec3::splat(0.5 / vf + 1e-12);
    for iz in z0..=z1 {
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                let center = (Vec3::new(ix as f64, iy as f64, iz as f64) + 0.5) / vf;
                if degenerate || triangle_box_overlap(center, half, tri) {
                    grid.set(ix, iy, iz, true).expect("cell range is clamped");
                }
            }
        }
    }
}

/// Separating-axis test between a closed box and a triangle: three box
/// normals, the triangle normal and the nine edge/axis cross products.
pub fn triangle_box_overlap(center: Vec3, half: Vec3, tri: &Triangle) -> bool {
    let v = [tri.v0 - center, tri.v1 - center, tri.v2 - center];
    let edges = [v[1] - v[0], v[2] - v[1], v[0] - v[2]];

    let separated = |axis: Vec3| {
        let p = [axis.dot(v[0]), axis.dot(v[1]), axis.dot(v[2])];
        let min = p[0].min(p[1]).min(p[2]);
        let max = p[0].max(p[1]).max(p[2]);
        let r = half.x * axis.x.abs() + half.y * axis.y.abs() + half.z * axis.z.abs();
        min > r || max < -r
    };

    if [Vec3::X, Vec3::Y, Vec3::Z].into_iter().any(separated) {
        return false;
    }
    if separated(edges[0].cross(edges[1])) {
        return false;
    }
    for e in edges {
        for a in [Vec3::X, Vec3::Y, Vec3::Z] {
            if separated(e.cross(a)) {
                return false;
            }
        }
    }
    true
}
