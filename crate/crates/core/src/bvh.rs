//! Binary BVH (binned SAH) plus the triangle-mesh ray caster built on it.
//!
//! The same [`Bvh`] indexes triangles of one mesh and, one level up, the
//! bounding boxes of scene objects.

use std::sync::Arc;

use crate::geometry::{Aabb, Material, Mesh, Ray, Triangle, Vec3};

/// Leaves never hold more than this many primitives.
pub const MAX_LEAF_SIZE: usize = 2;
const SAH_BINS: usize = 16;
/// Möller–Trumbore determinant cutoff.
pub const DET_EPSILON: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BvhError {
    #[error("cannot build a BVH over zero primitives")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NodeKind {
    Inner { left: u32, right: u32 },
    Leaf { start: u32, count: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Node {
    pub aabb: Aabb,
    pub kind: NodeKind,
}

#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    /// Leaf ranges index into this permutation of primitive ids.
    indices: Vec<u32>,
}

#[derive(Clone, Copy, Default)]
struct Bin {
    bounds: Option<Aabb>,
    count: usize,
}

impl Bin {
    fn add(&mut self, b: &Aabb) {
        self.count += 1;
        self.bounds = Some(self.bounds.map_or(*b, |x| x.union(*b)));
    }
}

fn area(b: Option<Aabb>) -> f64 {
    b.map_or(0.0, |b| b.surface_area())
}

impl Bvh {
    pub fn build(bounds: &[Aabb]) -> Result<Self, BvhError> {
        if bounds.is_empty() {
            return Err(BvhError::Empty);
        }
        let centroids: Vec<Vec3> = bounds.iter().map(Aabb::center).collect();
        let mut indices: Vec<u32> = (0..bounds.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * bounds.len());
        build_node(&mut nodes, bounds, &centroids, &mut indices, 0);
        Ok(Self { nodes, indices })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn primitive_indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn aabb(&self) -> Aabb {
        self.nodes[0].aabb
    }

    /// Closest-hit traversal. `test(primitive, ray)` returns the hit parameter
    /// and payload; `ray.t_max` is already narrowed to the best hit so far.
    /// Equal parameters resolve to the lower primitive index.
    pub fn closest<H, F>(&self, ray: &Ray, mut test: F) -> Option<(u32, f64, H)>
    where
        F: FnMut(u32, &Ray) -> Option<(f64, H)>,
    {
        let mut best: Option<(u32, f64, H)> = None;
        let mut current = *ray;
        let mut stack = Vec::with_capacity(64);
        self.nodes[0].aabb.intersect(ray)?;
        stack.push(0u32);
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &prim in &self.indices[start as usize..(start + count) as usize] {
                        if let Some((t, payload)) = test(prim, &current) {
                            let better = match &best {
                                None => true,
                                Some((bp, bt, _)) => t < *bt || (t == *bt && prim < *bp),
                            };
                            if better {
                                current.t_max = t;
                                best = Some((prim, t, payload));
                            }
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let hl = self.nodes[left as usize].aabb.intersect(&current);
                    let hr = self.nodes[right as usize].aabb.intersect(&current);
                    match (hl, hr) {
                        (Some((tl, _)), Some((tr, _))) => {
                            if tl <= tr {
                                stack.push(right);
                                stack.push(left);
                            } else {
                                stack.push(left);
                                stack.push(right);
                            }
                        }
                        (Some(_), None) => stack.push(left),
                        (None, Some(_)) => stack.push(right),
                        (None, None) => {}
                    }
                }
            }
        }
        best
    }

    /// True as soon as `test` accepts any primitive whose box the ray reaches.
    pub fn any<F>(&self, ray: &Ray, mut test: F) -> bool
    where
        F: FnMut(u32, &Ray) -> bool,
    {
        let mut stack = Vec::with_capacity(64);
        stack.push(0u32);
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            if node.aabb.intersect(ray).is_none() {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &prim in &self.indices[start as usize..(start + count) as usize] {
                        if test(prim, ray) {
                            return true;
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        false
    }

    /// Calls `visit(primitive)` for every leaf primitive whose node boxes the
    /// ray overlaps. The caller does the per-primitive box test.
    pub fn visit_leaves<F>(&self, ray: &Ray, mut visit: F)
    where
        F: FnMut(u32),
    {
        let mut stack = Vec::with_capacity(64);
        stack.push(0u32);
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            if node.aabb.intersect(ray).is_none() {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => self.indices
                    [start as usize..(start + count) as usize]
                    .iter()
                    .for_each(|&p| visit(p)),
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
    }

    /// Checks the structural invariants against the input bounds: child boxes
    /// inside parents, leaf primitives inside their leaf box, every primitive
    /// referenced exactly once, leaves no larger than [`MAX_LEAF_SIZE`].
    pub fn validate(&self, bounds: &[Aabb]) -> Result<(), String> {
        let mut seen = vec![0u32; bounds.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            match node.kind {
                NodeKind::Inner { left, right } => {
                    for c in [left, right] {
                        if !node.aabb.contains_box(&self.nodes[c as usize].aabb) {
                            return Err(format!("child {c} escapes parent {i}"));
                        }
                    }
                }
                NodeKind::Leaf { start, count } => {
                    if count as usize > MAX_LEAF_SIZE || count == 0 {
                        return Err(format!("leaf {i} holds {count} primitives"));
                    }
                    for &p in &self.indices[start as usize..(start + count) as usize] {
                        if !node.aabb.contains_box(&bounds[p as usize]) {
                            return Err(format!("primitive {p} escapes leaf {i}"));
                        }
                        seen[p as usize] += 1;
                    }
                }
            }
        }
        match seen.iter().position(|&c| c != 1) {
            Some(p) => Err(format!("primitive {p} referenced {} times", seen[p])),
            None => Ok(()),
        }
    }
}

fn build_node(
    nodes: &mut Vec<Node>,
    bounds: &[Aabb],
    centroids: &[Vec3],
    indices: &mut [u32],
    offset: usize,
) -> u32 {
    let aabb = indices
        .iter()
        .fold(Aabb::empty(), |b, &i| b.union(bounds[i as usize]));
    let id = nodes.len() as u32;
    nodes.push(Node {
        aabb,
        kind: NodeKind::Leaf {
            start: offset as u32,
            count: indices.len() as u32,
        },
    });
    if indices.len() <= MAX_LEAF_SIZE {
        return id;
    }

    let mid = sah_partition(bounds, centroids, indices).unwrap_or_else(|| {
        // Median split along the widest axis of the node box.
        let axis = aabb.extent().max_position();
        indices.sort_by(|&a, &b| {
            centroids[a as usize][axis]
                .total_cmp(&centroids[b as usize][axis])
                .then(a.cmp(&b))
        });
        indices.len() / 2
    });

    let (left_idx, right_idx) = indices.split_at_mut(mid);
    let left = build_node(nodes, bounds, centroids, left_idx, offset);
    let right = build_node(nodes, bounds, centroids, right_idx, offset + mid);
    nodes[id as usize].kind = NodeKind::Inner { left, right };
    id
}

/// Partitions `indices` at the cheapest binned-SAH plane. Returns the split
/// position, or `None` when no plane leaves both sides nonempty.
fn sah_partition(bounds: &[Aabb], centroids: &[Vec3], indices: &mut [u32]) -> Option<usize> {
    let cb = Aabb::from_points(indices.iter().map(|&i| centroids[i as usize]));
    let extent = cb.extent();
    let mut best: Option<(f64, usize, usize)> = None; // (cost, axis, split bin)
    for axis in 0..3 {
        if extent[axis] <= 0.0 {
            continue;
        }
        let scale = SAH_BINS as f64 / extent[axis];
        let bin_of = |i: u32| {
            (((centroids[i as usize][axis] - cb.min[axis]) * scale) as usize).min(SAH_BINS - 1)
        };
        let mut bins = [Bin::default(); SAH_BINS];
        for &i in indices.iter() {
            bins[bin_of(i)].add(&bounds[i as usize]);
        }
        // Right-to-left sweep gives suffix areas and counts.
        let mut right_area = [0.0; SAH_BINS];
        let mut right_count = [0usize; SAH_BINS];
        let mut acc = Bin::default();
        for b in (1..SAH_BINS).rev() {
            if let Some(bb) = bins[b].bounds {
                acc.bounds = Some(acc.bounds.map_or(bb, |x| x.union(bb)));
            }
            acc.count += bins[b].count;
            right_area[b] = area(acc.bounds);
            right_count[b] = acc.count;
        }
        let mut left = Bin::default();
        for split in 1..SAH_BINS {
            let b = &bins[split - 1];
            if let Some(bb) = b.bounds {
                left.bounds = Some(left.bounds.map_or(bb, |x| x.union(bb)));
            }
            left.count += b.count;
            if left.count == 0 || right_count[split] == 0 {
                continue;
            }
            let cost = area(left.bounds) * left.count as f64
                + right_area[split] * right_count[split] as f64;
            if best.is_none_or(|(c, _, _)| cost < c) {
                best = Some((cost, axis, split));
            }
        }
    }
    let (_, axis, split) = best?;
    let scale = SAH_BINS as f64 / extent[axis];
    let goes_left = |i: u32| {
        ((((centroids[i as usize][axis] - cb.min[axis]) * scale) as usize).min(SAH_BINS - 1))
            < split
    };
    // Stable partition keeps builds deterministic.
    let (mut l, r): (Vec<u32>, Vec<u32>) = indices.iter().partition(|&&i| goes_left(i));
    let mid = l.len();
    l.extend(r);
    indices.copy_from_slice(&l);
    Some(mid)
}

/// Double-sided Möller–Trumbore. Returns `(t, u, v)` with `t` inside the
/// ray interval; edges and vertices count as inside.
#[inline]
pub fn intersect_triangle(ray: &Ray, tri: &Triangle) -> Option<(f64, f64, f64)> {
    let e1 = tri.v1 - tri.v0;
    let e2 = tri.v2 - tri.v0;
    let p = ray.direction.cross(e2);
    let det = e1.dot(p);
    if det.abs() < DET_EPSILON {
        return None;
    }
    let inv = 1.0 / det;
    let s = ray.origin - tri.v0;
    let u = s.dot(p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = ray.direction.dot(q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(q) * inv;
    if t < ray.t_min || t > ray.t_max {
        return None;
    }
    Some((t, u, v))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HitRecord {
    pub t: f64,
    pub position: Vec3,
    pub shading_normal: Vec3,
    pub geometric_normal: Vec3,
    pub albedo: Vec3,
    pub material_index: u32,
    pub object_index: u32,
    pub primitive_index: u32,
}

/// A mesh with its BVH and material table; the ground-truth ray caster.
#[derive(Clone, Debug)]
pub struct MeshBvh {
    mesh: Arc<Mesh>,
    materials: Vec<Material>,
    triangles: Vec<Triangle>,
    bvh: Bvh,
}

impl MeshBvh {
    pub fn new(mesh: Arc<Mesh>, materials: Vec<Material>) -> Result<Self, BvhError> {
        let triangles: Vec<Triangle> = mesh.triangles().collect();
        let bounds: Vec<Aabb> = triangles.iter().map(Triangle::aabb).collect();
        let bvh = Bvh::build(&bounds)?;
        let mut materials = materials;
        materials.resize(mesh.num_materials().max(materials.len()), Material::default());
        Ok(Self {
            mesh,
            materials,
            triangles,
            bvh,
        })
    }

    pub fn with_default_materials(mesh: Arc<Mesh>) -> Result<Self, BvhError> {
        Self::new(mesh, Vec::new())
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn materials(&self) -> &[Material] {
        &self.materials
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    pub fn aabb(&self) -> Aabb {
        self.bvh.aabb()
    }

    pub fn intersect_closest(&self, ray: &Ray) -> Option<HitRecord> {
        let (prim, t, (u, v)) = self.bvh.closest(ray, |p, r| {
            intersect_triangle(r, &self.triangles[p as usize]).map(|(t, u, v)| (t, (u, v)))
        })?;
        Some(self.hit_record(ray, prim, t, u, v))
    }

    pub fn intersect_any(&self, ray: &Ray) -> bool {
        self.bvh.any(ray, |p, r| {
            intersect_triangle(r, &self.triangles[p as usize]).is_some()
        })
    }

    pub(crate) fn hit_record(&self, ray: &Ray, prim: u32, t: f64, u: f64, v: f64) -> HitRecord {
        let face = prim as usize;
        let material_index = self.mesh.face_material[face];
        HitRecord {
            t,
            position: ray.at(t),
            shading_normal: self.mesh.shading_normal(face, u, v),
            geometric_normal: self.triangles[face].normal(),
            albedo: self.materials[material_index as usize].albedo,
            material_index,
            object_index: 0,
            primitive_index: prim,
        }
    }
}
