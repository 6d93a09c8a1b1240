//! Sparse multi-resolution hash-grid encoding of voxel-boundary points.
//!
//! Every input point lies on a voxel face, and voxel faces are grid planes at
//! every level (level resolutions are multiples of the voxel resolution).
//! A point is therefore bilinearly interpolated from the four vertices of its
//! face cell, half of what a dense trilinear lookup touches. The only
//! exception is a ray origin inside an occupied voxel, which falls back to
//! the full eight-vertex trilinear lookup.

use rand::Rng;

use crate::dda::BoundaryHits;
use crate::geometry::Vec3;

/// Spatial-hash multipliers; the first is 1 so `x` passes straight through.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];
/// Half-width of the uniform initialization range of table entries.
pub const INIT_RANGE: f32 = 1e-4;

/// Table slot for grid vertex `(ix, iy, iz)`. Levels share the function but
/// index separate tables.
#[inline]
pub fn hash_vertex(ix: u32, iy: u32, iz: u32, table_size: usize) -> usize {
    let h = ix.wrapping_mul(HASH_PRIMES[0])
        ^ iy.wrapping_mul(HASH_PRIMES[1])
        ^ iz.wrapping_mul(HASH_PRIMES[2]);
    h as usize % table_size
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodingConfig {
    /// Grid resolution per level, coarse to fine.
    pub resolutions: Vec<u32>,
    pub features: usize,
    pub table_size: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![64, 128],
            features: 3,
            table_size: 1 << 17,
        }
    }
}

impl EncodingConfig {
    pub fn levels(&self) -> usize {
        self.resolutions.len()
    }

    /// Width of one encoded point: `L·F`.
    pub fn point_width(&self) -> usize {
        self.levels() * self.features
    }
}

/// One interpolation tap recorded during encoding, enough to route the
/// gradient of an input slot back to a table entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    /// Offset of the F-wide block inside the encoded input vector.
    pub slot: u32,
    pub level: u8,
    pub entry: u32,
    pub weight: f32,
}

/// Encoded network input for one ray with its backprop bookkeeping.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodedInput {
    pub values: Vec<f32>,
    pub taps: Vec<Tap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseHashGrid {
    config: EncodingConfig,
    /// Per level, `table_size × features` values, entry-major.
    tables: Vec<Vec<f32>>,
}

/// Gradient accumulator with the same shape as the grid's tables.
#[derive(Clone, Debug, PartialEq)]
pub struct GridGradients {
    pub tables: Vec<Vec<f32>>,
}

impl GridGradients {
    pub fn zero(&mut self) {
        self.tables.iter_mut().for_each(|t| t.fill(0.0));
    }
}

impl SparseHashGrid {
    pub fn new<R: Rng>(config: EncodingConfig, rng: &mut R) -> Self {
        let n = config.table_size * config.features;
        let tables = (0..config.levels())
            .map(|_| (0..n).map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE)).collect())
            .collect();
        Self { config, tables }
    }

    pub fn from_tables(config: EncodingConfig, tables: Vec<Vec<f32>>) -> Self {
        assert_eq!(tables.len(), config.levels());
        for t in &tables {
            assert_eq!(t.len(), config.table_size * config.features);
        }
        Self { config, tables }
    }

    pub fn config(&self) -> &EncodingConfig {
        &self.config
    }

    pub fn tables(&self) -> &[Vec<f32>] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.tables
    }

    pub fn entry(&self, level: usize, entry: usize) -> &[f32] {
        let f = self.config.features;
        &self.tables[level][entry * f..(entry + 1) * f]
    }

    pub fn zero_gradients(&self) -> GridGradients {
        GridGradients {
            tables: self.tables.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// Encodes one local-space point into `out` (`L·F` wide), appending taps
    /// with slot offsets starting at `slot_base`. `plane` is the axis of the
    /// voxel face the point lies on; `None` selects trilinear interpolation.
    pub fn encode_point(
        &self,
        p: Vec3,
        plane: Option<u8>,
        out: &mut [f32],
        slot_base: usize,
        taps: &mut Vec<Tap>,
    ) {
        let f = self.config.features;
        let m = self.config.table_size;
        for (level, &res) in self.config.resolutions.iter().enumerate() {
            let r = res as f64;
            let s = p * r;
            let mut base = [0u32; 3];
            let mut frac = [0f64; 3];
            for a in 0..3 {
                let i = s[a].floor().clamp(0.0, r - 1.0);
                base[a] = i as u32;
                frac[a] = (s[a] - i).clamp(0.0, 1.0);
            }
            // Corner bit `k` of axis `a` set means `base[a] + 1`.
            let mut axes_mask = 0b111u8;
            if let Some(a) = plane {
                let a = a as usize;
                // On the plane the out-of-plane weight pair is exactly 1/0.
                base[a] = s[a].round().clamp(0.0, r) as u32;
                frac[a] = 0.0;
                axes_mask &= !(1 << a);
            }
            let block = &mut out[level * f..(level + 1) * f];
            block.fill(0.0);
            let slot = (slot_base + level * f) as u32;
            for corner in 0u8..8 {
                if corner & !axes_mask != 0 {
                    continue;
                }
                let mut w = 1.0f64;
                let mut v = base;
                for a in 0..3 {
                    if axes_mask & (1 << a) == 0 {
                        continue;
                    }
                    if corner & (1 << a) != 0 {
                        w *= frac[a];
                        v[a] += 1;
                    } else {
                        w *= 1.0 - frac[a];
                    }
                }
                if w == 0.0 {
                    continue;
                }
                let entry = hash_vertex(v[0], v[1], v[2], m);
                let w = w as f32;
                let src = &self.tables[level][entry * f..(entry + 1) * f];
                for (o, &x) in block.iter_mut().zip(src) {
                    *o += w * x;
                }
                taps.push(Tap {
                    slot,
                    level: level as u8,
                    entry: entry as u32,
                    weight: w,
                });
            }
        }
    }

    /// Writes the `cap · L · F` input for a ray into `out`: one block per
    /// boundary point in ray order, zeros after the last point.
    pub fn encode_hits_into(
        &self,
        hits: &BoundaryHits,
        cap: usize,
        out: &mut [f32],
        taps: &mut Vec<Tap>,
    ) {
        let width = self.config.point_width();
        assert!(hits.count() <= cap);
        assert_eq!(out.len(), cap * width);
        for (j, p) in hits.points.iter().enumerate() {
            let block = &mut out[j * width..(j + 1) * width];
            self.encode_point(p.position, p.plane, block, j * width, taps);
        }
        out[hits.count() * width..].fill(0.0);
    }

    pub fn encode_ray(&self, hits: &BoundaryHits, cap: usize) -> EncodedInput {
        let mut values = vec![0.0; cap * self.config.point_width()];
        let mut taps = Vec::new();
        self.encode_hits_into(hits, cap, &mut values, &mut taps);
        EncodedInput { values, taps }
    }

    /// Adds `weight · upstream[slot..slot+F]` into each tapped entry.
    /// `upstream` is the gradient with respect to the encoded input the taps
    /// were recorded for.
    pub fn accumulate_grad(&self, taps: &[Tap], upstream: &[f32], grads: &mut GridGradients) {
        let f = self.config.features;
        for tap in taps {
            let src = &upstream[tap.slot as usize..tap.slot as usize + f];
            if src.iter().all(|&g| g == 0.0) {
                continue;
            }
            let dst = &mut grads.tables[tap.level as usize]
                [tap.entry as usize * f..(tap.entry as usize + 1) * f];
            for (d, &g) in dst.iter_mut().zip(src) {
                *d += tap.weight * g;
            }
        }
    }
}

/// Axis whose coordinate lies on a grid plane of a `resolution` grid, if any.
pub fn detect_plane(p: Vec3, resolution: u32) -> Option<u8> {
    (0..3)
        .find(|&a| {
            let s = p[a] * resolution as f64;
            (s - s.round()).abs() < 1e-9
        })
        .map(|a| a as u8)
}
