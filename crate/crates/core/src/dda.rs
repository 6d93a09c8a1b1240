//! Amanatides–Woo traversal of the occupancy grid, collecting the entry point
//! of every occupied voxel the ray crosses.

use std::ops::ControlFlow;

use crate::geometry::{Aabb, LocalFrame, Ray, Vec3};
use crate::voxelizer::OccupancyGrid;

/// Offset applied to a local origin coordinate that lies exactly on a grid
/// plane the ray runs parallel to.
pub const TIE_NUDGE: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryPoint {
    /// Local-space position, inside `[0,1]³`.
    pub position: Vec3,
    /// Ray parameter; identical in world and local space.
    pub t: f64,
    pub cell: [u32; 3],
    /// Axis of the voxel face the point lies on; `None` only for a ray that
    /// starts inside an occupied voxel.
    pub plane: Option<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoundaryHits {
    pub points: Vec<BoundaryPoint>,
}

impl BoundaryHits {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn t_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.t)
    }
}

/// One step of the walk: the cell being entered, the parameter where the ray
/// enters it, and the axis of the crossed face (`None` for the starting cell
/// of a ray that begins inside the grid).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellVisit {
    pub cell: [u32; 3],
    pub t_enter: f64,
    pub position: Vec3,
    pub plane: Option<u8>,
}

/// Walks every cell of a `resolution³` grid over the unit cube that the local
/// ray crosses, in ray order. Returns the clipped `(t_enter, t_exit)` interval
/// or `None` when the ray misses the cube.
pub fn walk_cells<F>(local: &Ray, resolution: u32, mut visit: F) -> Option<(f64, f64)>
where
    F: FnMut(CellVisit) -> ControlFlow<()>,
{
    let v = resolution as f64;
    let mut origin = local.origin;
    let d = local.direction;
    for axis in 0..3 {
        let s = origin[axis] * v;
        if d[axis] == 0.0 && s == s.round() {
            origin[axis] += TIE_NUDGE;
        }
    }
    let ray = Ray::raw(origin, d, local.t_min, local.t_max);
    let (t0, t1, enter_axis) =
        Aabb::new(Vec3::ZERO, Vec3::ONE).intersect_with_axis(&ray)?;
    // Touching the cube at a single point crosses no cell.
    if t1 <= t0 {
        return Some((t0, t1));
    }

    let mut p = ray.at(t0);
    let plane = match enter_axis {
        Some(a) => {
            p[a] = if d[a] > 0.0 { 0.0 } else { 1.0 };
            Some(a as u8)
        }
        // Started inside the cube; it may still sit exactly on a plane.
        None => (0..3)
            .find(|&a| d[a] != 0.0 && (p[a] * v) == (p[a] * v).round())
            .map(|a| a as u8),
    };
    let p = p.clamp(Vec3::ZERO, Vec3::ONE);

    let last = resolution as i64 - 1;
    let mut cell = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_next = [f64::INFINITY; 3];
    for a in 0..3 {
        let s = p[a] * v;
        let mut c = s.floor() as i64;
        if d[a] < 0.0 && s == s.floor() {
            c -= 1;
        }
        cell[a] = c.clamp(0, last);
        if d[a] > 0.0 {
            step[a] = 1;
        } else if d[a] < 0.0 {
            step[a] = -1;
        }
    }
    let boundary = |a: usize, c: i64| -> f64 {
        // Plane that the ray leaves cell `c` through along axis `a`.
        let k = if step[a] > 0 { c + 1 } else { c };
        k as f64 / v
    };
    for a in 0..3 {
        if step[a] != 0 {
            t_next[a] = (boundary(a, cell[a]) - origin[a]) / d[a];
        }
    }

    let as_cell = |c: &[i64; 3]| [c[0] as u32, c[1] as u32, c[2] as u32];
    let mut visit_now = CellVisit {
        cell: as_cell(&cell),
        t_enter: t0,
        position: p,
        plane,
    };
    loop {
        if visit(visit_now).is_break() {
            break;
        }
        let axis = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
            0
        } else if t_next[1] <= t_next[2] {
            1
        } else {
            2
        };
        let t = t_next[axis];
        if t > t1 || !t.is_finite() {
            break;
        }
        cell[axis] += step[axis];
        if cell[axis] < 0 || cell[axis] > last {
            break;
        }
        let face = if step[axis] > 0 { cell[axis] } else { cell[axis] + 1 };
        let mut q = ray.at(t).clamp(Vec3::ZERO, Vec3::ONE);
        q[axis] = face as f64 / v;
        visit_now = CellVisit {
            cell: as_cell(&cell),
            t_enter: t,
            position: q,
            plane: Some(axis as u8),
        };
        t_next[axis] = (boundary(axis, cell[axis]) - origin[axis]) / d[axis];
    }
    Some((t0, t1))
}

/// Collects up to `cap` entry points of occupied voxels along a world ray,
/// nearest first, into `out` (cleared first). Returns the ray's interval
/// inside the frame box, or `None` when it misses.
pub fn collect_boundary_hits_into(
    ray: &Ray,
    frame: &LocalFrame,
    grid: &OccupancyGrid,
    cap: usize,
    out: &mut BoundaryHits,
) -> Option<(f64, f64)> {
    out.points.clear();
    if cap == 0 {
        return frame.aabb.intersect(ray);
    }
    let local = frame.ray_to_local(ray);
    walk_cells(&local, grid.resolution(), |v| {
        if grid.occupied(v.cell) {
            out.points.push(BoundaryPoint {
                position: v.position,
                t: v.t_enter,
                cell: v.cell,
                plane: v.plane,
            });
            if out.points.len() >= cap {
                return ControlFlow::Break(());
            }
        }
        ControlFlow::Continue(())
    })
}

pub fn collect_boundary_hits(
    ray: &Ray,
    frame: &LocalFrame,
    grid: &OccupancyGrid,
    cap: usize,
) -> BoundaryHits {
    let mut out = BoundaryHits::default();
    collect_boundary_hits_into(ray, frame, grid, cap, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::Parallelism;
    use crate::voxelizer::voxelize_surface;
    use crate::{bvh::MeshBvh, fixtures};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn unit_frame() -> LocalFrame {
        LocalFrame::new(Aabb::new(Vec3::ZERO, Vec3::ONE))
    }

    fn random_grid(v: u32, fill: f64, rng: &mut impl Rng) -> OccupancyGrid {
        let mut g = OccupancyGrid::new(v).unwrap();
        for iz in 0..v {
            for iy in 0..v {
                for ix in 0..v {
                    if rng.random_bool(fill) {
                        g.set(ix, iy, iz, true).unwrap();
                    }
                }
            }
        }
        g
    }

    #[test]
    fn empty_grid_yields_nothing() {
        let g = OccupancyGrid::new(8).unwrap();
        let r = Ray::unbounded(Vec3::new(-1.0, 0.3, 0.4), Vec3::new(1.0, 0.1, 0.2));
        assert!(collect_boundary_hits(&r, &unit_frame(), &g, 18).is_empty());
    }

    #[test]
    fn leaving_from_the_boundary_crosses_nothing() {
        let mut g = OccupancyGrid::new(4).unwrap();
        g.set(0, 1, 1, true).unwrap();
        let r = Ray::unbounded(Vec3::new(0.0, 0.3, 0.4), Vec3::new(-1.0, 0.2, 0.1));
        assert!(collect_boundary_hits(&r, &unit_frame(), &g, 18).is_empty());
    }

    #[test]
    fn single_occupied_cell() {
        let mut g = OccupancyGrid::new(4).unwrap();
        g.set(0, 1, 1, true).unwrap();
        let r = Ray::unbounded(Vec3::new(-0.1, 0.375, 0.375), Vec3::X);
        let hits = collect_boundary_hits(&r, &unit_frame(), &g, 18);
        assert_eq!(hits.count(), 1);
        let p = hits.points[0];
        assert_eq!(p.position, Vec3::new(0.0, 0.375, 0.375));
        assert_eq!(p.cell, [0, 1, 1]);
        assert_eq!(p.plane, Some(0));
        assert!((p.t - 0.1).abs() < 1e-12);
    }

    #[test]
    fn origin_inside_occupied_cell_is_first_point() {
        let mut g = OccupancyGrid::new(4).unwrap();
        g.set(1, 1, 1, true).unwrap();
        g.set(3, 1, 1, true).unwrap();
        let o = Vec3::new(0.3, 0.3, 0.3);
        let r = Ray::unbounded(o, Vec3::X);
        let hits = collect_boundary_hits(&r, &unit_frame(), &g, 18);
        assert_eq!(hits.count(), 2);
        assert_eq!(hits.points[0].position, o);
        assert_eq!(hits.points[0].plane, None);
        assert_eq!(hits.points[1].position, Vec3::new(0.75, 0.3, 0.3));
    }

    #[test]
    fn cap_keeps_nearest() {
        let mut g = OccupancyGrid::new(8).unwrap();
        for ix in 0..8 {
            g.set(ix, 3, 3, true).unwrap();
        }
        let r = Ray::unbounded(Vec3::new(1.5, 0.45, 0.45), -Vec3::X);
        let all = collect_boundary_hits(&r, &unit_frame(), &g, 24);
        assert_eq!(all.count(), 8);
        let capped = collect_boundary_hits(&r, &unit_frame(), &g, 3);
        assert_eq!(capped.points[..], all.points[..3]);
        assert_eq!(capped.points[0].cell, [7, 3, 3]);
        assert_eq!(capped.points[0].position.x, 1.0);
    }

    #[test]
    fn ray_on_grid_plane_is_nudged() {
        let g = random_grid(8, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        // y = 0.5 is a plane at V = 8 and the ray never leaves it.
        let r = Ray::unbounded(Vec3::new(-1.0, 0.5, 0.3), Vec3::X);
        let hits = collect_boundary_hits(&r, &unit_frame(), &g, 100);
        assert_eq!(hits.count(), 8);
        assert!(hits.points.iter().all(|p| p.cell[1] == 4));
    }

    /// Cells crossed by the ray, found by marching in small steps and
    /// bisecting any step where more than one index changes.
    pub(crate) fn marching_cells(local: &Ray, v: u32) -> Option<(Vec<[u32; 3]>, bool)> {
        let (t0, t1) = Aabb::new(Vec3::ZERO, Vec3::ONE).intersect(local)?;
        let vf = v as f64;
        let cell_of = |t: f64| {
            let p = local.at(t);
            let mut c = [0u32; 3];
            for a in 0..3 {
                c[a] = ((p[a] * vf).floor() as i64).clamp(0, v as i64 - 1) as u32;
            }
            c
        };
        let speed = local.direction.length();
        let dt = 1e-4 / vf / speed;
        let mut cells = vec![cell_of(t0)];
        let mut tie = false;
        fn refine(
            cell_of: &dyn Fn(f64) -> [u32; 3],
            ta: f64,
            tb: f64,
            cells: &mut Vec<[u32; 3]>,
            tie: &mut bool,
        ) {
            let (a, b) = (cell_of(ta), cell_of(tb));
            let changed = (0..3).filter(|&i| a[i] != b[i]).count();
            if changed == 0 {
                return;
            }
            if changed == 1 {
                cells.push(b);
                return;
            }
            if tb - ta < 1e-13 {
                *tie = true;
                cells.push(b);
                return;
            }
            let tm = 0.5 * (ta + tb);
            refine(cell_of, ta, tm, cells, tie);
            refine(cell_of, tm, tb, cells, tie);
        }
        let mut t = t0;
        while t < t1 {
            let tn = (t + dt).min(t1);
            refine(&cell_of, t, tn, &mut cells, &mut tie);
            t = tn;
        }
        Some((cells, tie))
    }

    #[test]
    fn matches_marching_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let v = 32;
        let grid = random_grid(v, 0.3, &mut rng);
        let frame = unit_frame();
        let mut ties = 0;
        for _ in 0..2_000 {
            let o = Vec3::new(rng.random(), rng.random(), rng.random()) * 2.0 - 0.5;
            let target = Vec3::new(rng.random(), rng.random(), rng.random());
            if (target - o).length() < 1e-3 {
                continue;
            }
            let ray = Ray::unbounded(o, target - o);
            let local = frame.ray_to_local(&ray);
            let (cells, tie) = marching_cells(&local, v).unwrap();
            if tie {
                ties += 1;
                continue;
            }
            let expected: Vec<[u32; 3]> =
                cells.into_iter().filter(|&c| grid.occupied(c)).collect();
            let hits = collect_boundary_hits(&ray, &frame, &grid, 3 * v as usize);
            let got: Vec<[u32; 3]> = hits.points.iter().map(|p| p.cell).collect();
            assert_eq!(got, expected);
            for w in hits.points.windows(2) {
                assert!(w[0].t < w[1].t);
            }
            for p in &hits.points {
                match p.plane {
                    Some(a) => {
                        let s = p.position[a as usize] * v as f64;
                        assert!((s - s.round()).abs() < 1e-6 * v as f64);
                    }
                    None => assert_eq!(p.position, o),
                }
            }
        }
        assert!(ties < 3);
    }

    #[test]
    fn hit_voxel_is_traversed() {
        let mesh = Arc::new(fixtures::teapot());
        let bvh = MeshBvh::with_default_materials(mesh.clone()).unwrap();
        let frame = LocalFrame::for_mesh(&mesh);
        let v = 32;
        let grid = voxelize_surface(&mesh, &frame, v, Parallelism::Parallel).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = frame.aabb.center();
        let radius = frame.aabb.diagonal() * 0.5;
        let mut checked = 0;
        while checked < 10_000 {
            let dir: Vec3 = Vec3::new(rng.random(), rng.random(), rng.random()) * 2.0 - 1.0;
            let o = c + dir.normalize_or_zero() * radius;
            let target = frame.from_local(Vec3::new(rng.random(), rng.random(), rng.random()));
            let ray = Ray::unbounded(o, target - o);
            let Some(hit) = bvh.intersect_closest(&ray) else {
                continue;
            };
            checked += 1;
            let hp = frame.to_local(hit.position) * v as f64;
            let hits = collect_boundary_hits(&ray, &frame, &grid, 3 * v as usize);
            // The hit may sit on a face shared by two cells.
            let found = hits.points.iter().any(|p| {
                (0..3).all(|a| {
                    hp[a] >= p.cell[a] as f64 - 1e-9 && hp[a] <= p.cell[a] as f64 + 1.0 + 1e-9
                })
            });
            assert!(found, "hit voxel of {ray:?} not traversed");
        }
    }
}
