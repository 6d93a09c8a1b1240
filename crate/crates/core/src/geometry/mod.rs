//! Rays, boxes, meshes, materials and the object-local unit-cube frame.

mod obj;

pub use obj::{load_obj, parse_obj, ObjError};

use glam::{DAffine3, DMat3, DQuat, EulerRot};

/// Double-precision 3-vector used for all geometric quantities.
pub type Vec3 = glam::DVec3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_min: f64,
    pub t_max: f64,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vec3, direction: Vec3, t_min: f64, t_max: f64) -> Self {
        debug_assert!(t_min >= 0.0 && t_max > t_min);
        Self {
            origin,
            direction: direction.normalize(),
            t_min,
            t_max,
        }
    }

    /// Unbounded ray starting at `origin`.
    pub fn unbounded(origin: Vec3, direction: Vec3) -> Self {
        Self::new(origin, direction, 0.0, f64::INFINITY)
    }

    /// A ray whose direction is used as-is. Transforming a ray into another
    /// frame keeps the parameterization (same `t` means the same point) at the
    /// cost of a non-unit direction.
    pub(crate) fn raw(origin: Vec3, direction: Vec3, t_min: f64, t_max: f64) -> Self {
        Self {
            origin,
            direction,
            t_min,
            t_max,
        }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn with_interval(mut self, t_min: f64, t_max: f64) -> Self {
        self.t_min = t_min;
        self.t_max = t_max;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        debug_assert!(min.cmple(max).all(), "inverted box {min} {max}");
        Self { min, max }
    }

    /// The empty box; the identity for [`Aabb::union`].
    pub fn empty() -> Self {
        Self {
            min: Vec3::splat(f64::INFINITY),
            max: Vec3::splat(f64::NEG_INFINITY),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.min.cmpgt(self.max).any()
    }

    pub fn from_points<I: IntoIterator<Item = Vec3>>(points: I) -> Self {
        points.into_iter().fold(Self::empty(), |b, p| b.grow(p))
    }

    pub fn grow(self, p: Vec3) -> Self {
        Self {
            min: self.min.min(p),
            max: self.max.max(p),
        }
    }

    pub fn union(self, other: Self) -> Self {
        Self {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().length()
    }

    pub fn surface_area(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let e = self.extent();
        2.0 * (e.x * e.y + e.y * e.z + e.z * e.x)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.cmpge(self.min).all() && p.cmple(self.max).all()
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        other.min.cmpge(self.min).all() && other.max.cmple(self.max).all()
    }

    /// Grows the box by `amount` on every side.
    pub fn inflate(self, amount: f64) -> Self {
        Self {
            min: self.min - Vec3::splat(amount),
            max: self.max + Vec3::splat(amount),
        }
    }

    /// Slab test. Returns the parametric overlap of the ray with the box,
    /// clipped to `[ray.t_min, ray.t_max]`.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        self.intersect_with_axis(ray).map(|(t0, t1, _)| (t0, t1))
    }

    /// Like [`Aabb::intersect`] but also reports which axis' slab produced the
    /// entry parameter (`None` when the entry was clipped by `t_min`).
    pub fn intersect_with_axis(&self, ray: &Ray) -> Option<(f64, f64, Option<usize>)> {
        let mut t_enter = ray.t_min;
        let mut t_exit = ray.t_max;
        let mut enter_axis = None;
        for axis in 0..3 {
            let o = ray.origin[axis];
            let d = ray.direction[axis];
            let (lo, hi) = (self.min[axis], self.max[axis]);
            if d == 0.0 {
                if o < lo || o > hi {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut t0, mut t1) = ((lo - o) * inv, (hi - o) * inv);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            if t0 > t_enter {
                t_enter = t0;
                enter_axis = Some(axis);
            }
            if t1 < t_exit {
                t_exit = t1;
            }
            if t_enter > t_exit {
                return None;
            }
        }
        Some((t_enter, t_exit, enter_axis))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaterialKind {
    Diffuse,
    /// Phong-style glossy reflection; `roughness` in (0, 1].
    Glossy { roughness: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Material {
    pub albedo: Vec3,
    pub kind: MaterialKind,
}

impl Material {
    pub fn diffuse(albedo: Vec3) -> Self {
        Self {
            albedo: albedo.clamp(Vec3::ZERO, Vec3::ONE),
            kind: MaterialKind::Diffuse,
        }
    }

    pub fn glossy(albedo: Vec3, roughness: f64) -> Self {
        Self {
            albedo: albedo.clamp(Vec3::ZERO, Vec3::ONE),
            kind: MaterialKind::Glossy {
                roughness: roughness.clamp(1e-3, 1.0),
            },
        }
    }
}

impl Default for Material {
    fn default() -> Self {
        Self::diffuse(Vec3::splat(0.8))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Triangle {
    pub v0: Vec3,
    pub v1: Vec3,
    pub v2: Vec3,
}

impl Triangle {
    pub fn aabb(&self) -> Aabb {
        Aabb::from_points([self.v0, self.v1, self.v2])
    }

    pub fn area(&self) -> f64 {
        0.5 * (self.v1 - self.v0).cross(self.v2 - self.v0).length()
    }

    /// Unit geometric normal; zero for degenerate triangles.
    pub fn normal(&self) -> Vec3 {
        (self.v1 - self.v0)
            .cross(self.v2 - self.v0)
            .normalize_or_zero()
    }

    /// Point at barycentric coordinates `(u, v)` relative to `v1`, `v2`.
    pub fn point(&self, u: f64, v: f64) -> Vec3 {
        self.v0 * (1.0 - u - v) + self.v1 * u + self.v2 * v
    }
}

/// Per-corner vertex normals, indexed separately from positions as in OBJ.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VertexNormals {
    pub normals: Vec<Vec3>,
    pub indices: Vec<[u32; 3]>,
}

/// Indexed triangle mesh with a per-face material index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub vertex_normals: Option<VertexNormals>,
    pub face_material: Vec<u32>,
    /// One name per material slot (from `usemtl`); its length is `N_mat`.
    pub material_names: Vec<String>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MeshError {
    #[error("face {face} references vertex {index} but mesh has {count} vertices")]
    VertexOutOfRange { face: usize, index: u32, count: usize },
    #[error("face {face} has material {index} but only {count} materials")]
    MaterialOutOfRange { face: usize, index: u32, count: usize },
    #[error("mesh needs at least one material slot")]
    NoMaterials,
    #[error("face/material/normal arrays disagree in length")]
    LengthMismatch,
}

impl Mesh {
    /// Builds a single-material mesh and validates it.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self, MeshError> {
        let face_material = vec![0; faces.len()];
        let mesh = Self {
            vertices,
            faces,
            vertex_normals: None,
            face_material,
            material_names: vec!["default".to_owned()],
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if self.material_names.is_empty() {
            return Err(MeshError::NoMaterials);
        }
        if self.face_material.len() != self.faces.len() {
            return Err(MeshError::LengthMismatch);
        }
        for (i, f) in self.faces.iter().enumerate() {
            for &index in f {
                if index as usize >= self.vertices.len() {
                    return Err(MeshError::VertexOutOfRange {
                        face: i,
                        index,
                        count: self.vertices.len(),
                    });
                }
            }
            let m = self.face_material[i];
            if m as usize >= self.material_names.len() {
                return Err(MeshError::MaterialOutOfRange {
                    face: i,
                    index: m,
                    count: self.material_names.len(),
                });
            }
        }
        if let Some(vn) = &self.vertex_normals {
            if vn.indices.len() != self.faces.len() {
                return Err(MeshError::LengthMismatch);
            }
            if vn
                .indices
                .iter()
                .flatten()
                .any(|&i| i as usize >= vn.normals.len())
            {
                return Err(MeshError::LengthMismatch);
            }
        }
        Ok(())
    }

    pub fn num_materials(&self) -> usize {
        self.material_names.len()
    }

    pub fn triangle(&self, face: usize) -> Triangle {
        let [a, b, c] = self.faces[face];
        Triangle {
            v0: self.vertices[a as usize],
            v1: self.vertices[b as usize],
            v2: self.vertices[c as usize],
        }
    }

    pub fn triangles(&self) -> impl ExactSizeIterator<Item = Triangle> + '_ {
        (0..self.faces.len()).map(|i| self.triangle(i))
    }

    /// Shading normal at barycentric `(u, v)`: interpolated vertex normals when
    /// present, otherwise the geometric normal.
    pub fn shading_normal(&self, face: usize, u: f64, v: f64) -> Vec3 {
        let geometric = self.triangle(face).normal();
        match &self.vertex_normals {
            Some(vn) => {
                let [a, b, c] = vn.indices[face];
                let n = vn.normals[a as usize] * (1.0 - u - v)
                    + vn.normals[b as usize] * u
                    + vn.normals[c as usize] * v;
                let n = n.normalize_or_zero();
                if n == Vec3::ZERO {
                    geometric
                } else {
                    n
                }
            }
            None => geometric,
        }
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::from_points(self.vertices.iter().copied())
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles().map(|t| t.area()).sum()
    }

    /// Appends `other`, offsetting its material indices past ours.
    pub fn append(&mut self, other: &Mesh) {
        let base_v = self.vertices.len() as u32;
        let base_m = self.material_names.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.faces.extend(
            other
                .faces
                .iter()
                .map(|f| [f[0] + base_v, f[1] + base_v, f[2] + base_v]),
        );
        self.face_material
            .extend(other.face_material.iter().map(|m| m + base_m));
        self.material_names.extend(other.material_names.iter().cloned());
        // Mixed normal sources fall back to geometric normals.
        self.vertex_normals = None;
    }
}

/// Object-to-world affine transform with a cached inverse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    forward: DAffine3,
    inverse: DAffine3,
    normal_matrix: DMat3,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("transform is not invertible")]
pub struct SingularTransform;

impl Transform {
    pub fn identity() -> Self {
        Self::from_affine(DAffine3::IDENTITY).expect("identity is invertible")
    }

    pub fn from_affine(forward: DAffine3) -> Result<Self, SingularTransform> {
        let det = forward.matrix3.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(SingularTransform);
        }
        let inverse = forward.inverse();
        Ok(Self {
            forward,
            inverse,
            normal_matrix: inverse.matrix3.transpose(),
        })
    }

    /// Scale, then rotate (XYZ Euler angles in degrees), then translate.
    pub fn from_trs(
        translation: Vec3,
        rotation_deg: Vec3,
        scale: Vec3,
    ) -> Result<Self, SingularTransform> {
        let r = DQuat::from_euler(
            EulerRot::XYZ,
            rotation_deg.x.to_radians(),
            rotation_deg.y.to_radians(),
            rotation_deg.z.to_radians(),
        );
        Self::from_affine(DAffine3::from_scale_rotation_translation(
            scale,
            r,
            translation,
        ))
    }

    pub fn point(&self, p: Vec3) -> Vec3 {
        self.forward.transform_point3(p)
    }

    pub fn vector(&self, v: Vec3) -> Vec3 {
        self.forward.transform_vector3(v)
    }

    pub fn inverse_point(&self, p: Vec3) -> Vec3 {
        self.inverse.transform_point3(p)
    }

    pub fn inverse_vector(&self, v: Vec3) -> Vec3 {
        self.inverse.transform_vector3(v)
    }

    /// Object-space normal to a unit world-space normal.
    pub fn normal(&self, n: Vec3) -> Vec3 {
        (self.normal_matrix * n).normalize_or_zero()
    }

    /// World ray to object space. The direction is not renormalized so
    /// parameters `t` are shared between the two spaces.
    pub fn inverse_ray(&self, ray: &Ray) -> Ray {
        Ray::raw(
            self.inverse_point(ray.origin),
            self.inverse_vector(ray.direction),
            ray.t_min,
            ray.t_max,
        )
    }

    /// World-space bounds of an object-space box.
    pub fn aabb(&self, b: &Aabb) -> Aabb {
        let mut out = Aabb::empty();
        for i in 0..8 {
            let corner = Vec3::new(
                if i & 1 == 0 { b.min.x } else { b.max.x },
                if i & 2 == 0 { b.min.y } else { b.max.y },
                if i & 4 == 0 { b.min.z } else { b.max.z },
            );
            out = out.grow(self.point(corner));
        }
        out
    }
}

impl Default for Transform {
    fn default() -> Self {
        Self::identity()
    }
}

/// Maps an object's bounding box onto the unit cube `[0,1]³`, scaling each
/// axis independently.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalFrame {
    pub aabb: Aabb,
    inv_extent: Vec3,
}

impl LocalFrame {
    /// Relative inflation applied by [`LocalFrame::for_mesh`].
    pub const INFLATION: f64 = 1e-4;

    /// Frame over exactly `aabb`. Every extent must be positive.
    pub fn new(aabb: Aabb) -> Self {
        let e = aabb.extent();
        assert!(
            e.cmpgt(Vec3::ZERO).all(),
            "local frame needs a box with positive extent, got {e}"
        );
        Self {
            aabb,
            inv_extent: e.recip(),
        }
    }

    /// Frame over the mesh bounds inflated by `INFLATION` of the largest
    /// extent, so planar meshes still get a slab of nonzero thickness.
    pub fn for_mesh(mesh: &Mesh) -> Self {
        Self::inflated(mesh.aabb())
    }

    pub fn inflated(aabb: Aabb) -> Self {
        let pad = (aabb.extent().max_element() * Self::INFLATION).max(f64::MIN_POSITIVE);
        Self::new(aabb.inflate(pad))
    }

    pub fn to_local(&self, p: Vec3) -> Vec3 {
        (p - self.aabb.min) * self.inv_extent
    }

    pub fn from_local(&self, p: Vec3) -> Vec3 {
        p * self.aabb.extent() + self.aabb.min
    }

    pub fn vector_to_local(&self, v: Vec3) -> Vec3 {
        v * self.inv_extent
    }

    pub fn vector_from_local(&self, v: Vec3) -> Vec3 {
        v * self.aabb.extent()
    }

    /// The ray expressed in local coordinates with the same parameterization.
    pub fn ray_to_local(&self, ray: &Ray) -> Ray {
        Ray::raw(
            self.to_local(ray.origin),
            self.vector_to_local(ray.direction),
            ray.t_min,
            ray.t_max,
        )
    }

    pub fn triangle_to_local(&self, t: &Triangle) -> Triangle {
        Triangle {
            v0: self.to_local(t.v0),
            v1: self.to_local(t.v1),
            v2: self.to_local(t.v2),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_cube() -> Aabb {
        Aabb::new(Vec3::ZERO, Vec3::ONE)
    }

    #[test]
    fn slab_axis_aligned() {
        let r = Ray::unbounded(Vec3::new(-2.0, 0.5, 0.5), Vec3::X);
        assert_eq!(unit_cube().intersect(&r), Some((2.0, 3.0)));
    }

    #[test]
    fn slab_origin_inside() {
        let r = Ray::new(Vec3::splat(0.5), Vec3::Z, 0.0, f64::INFINITY);
        assert_eq!(unit_cube().intersect(&r), Some((0.0, 0.5)));
    }

    #[test]
    fn slab_miss_and_clip() {
        let r = Ray::unbounded(Vec3::new(-2.0, 2.0, 0.5), Vec3::X);
        assert_eq!(unit_cube().intersect(&r), None);
        let r = Ray::new(Vec3::new(-2.0, 0.5, 0.5), Vec3::X, 0.0, 1.5);
        assert_eq!(unit_cube().intersect(&r), None);
        let r = Ray::new(Vec3::new(-2.0, 0.5, 0.5), Vec3::X, 0.0, 2.5);
        assert_eq!(unit_cube().intersect(&r), Some((2.0, 2.5)));
    }

    /// Marches the ray in steps of 1e-4 and records the first and last
    /// parameter at which the point lies in the box.
    fn marching_interval(b: &Aabb, r: &Ray, t_end: f64) -> Option<(f64, f64)> {
        let step = 1e-4;
        let mut first = None;
        let mut last = None;
        let mut t = r.t_min;
        while t <= t_end {
            if b.contains(r.at(t)) {
                first.get_or_insert(t);
                last = Some(t);
            }
            t += step;
        }
        first.zip(last)
    }

    #[test]
    fn slab_matches_marching_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = Aabb::new(Vec3::new(-0.3, 0.1, -0.2), Vec3::new(0.4, 0.5, 0.6));
        let n = 100_000;
        let mut disagreements = 0;
        for _ in 0..n {
            let o = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let d = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if d.length() < 1e-3 {
                continue;
            }
            let r = Ray::new(o, d, 0.0, 3.5);
            let fast = b.intersect(&r);
            let slow = marching_interval(&b, &r, 3.5);
            match (fast, slow) {
                (Some((a0, a1)), Some((b0, b1))) => {
                    assert!((a0 - b0).abs() < 1e-3 && (a1 - b1).abs() < 1e-3);
                }
                (None, None) => {}
                // Grazing rays shorter than the marching step.
                (Some((a0, a1)), None) if a1 - a0 < 1e-3 => {}
                _ => disagreements += 1,
            }
        }
        assert_eq!(disagreements, 0);
    }

    #[test]
    fn local_frame_corners_and_round_trip() {
        let b = Aabb::new(Vec3::new(-3.0, 2.0, 10.0), Vec3::new(5.0, 2.5, 11.0));
        let f = LocalFrame::new(b);
        assert_eq!(f.to_local(b.min), Vec3::ZERO);
        assert_eq!(f.to_local(b.max), Vec3::ONE);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let extent = b.extent();
        for _ in 0..10_000 {
            let p = b.min
                + Vec3::new(rng.random(), rng.random(), rng.random()) * extent;
            let q = f.from_local(f.to_local(p));
            let err = (q - p).abs() / extent;
            assert!(err.max_element() < 1e-6);
        }
        // Outside points are not clamped.
        assert!(f.to_local(b.min - extent).x < 0.0);
    }

    #[test]
    fn planar_mesh_frame_is_inflated() {
        let mesh = Mesh::new(
            vec![Vec3::ZERO, Vec3::X, Vec3::Y],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let f = LocalFrame::for_mesh(&mesh);
        assert!(f.aabb.extent().z > 0.0);
        let l = f.to_local(Vec3::new(0.5, 0.25, 0.0));
        assert!((l.z - 0.5).abs() < 1e-9);
    }

    #[test]
    fn transform_round_trip_and_ray_parameter() {
        let t = Transform::from_trs(
            Vec3::new(1.0, -2.0, 3.0),
            Vec3::new(30.0, 45.0, -60.0),
            Vec3::new(2.0, 0.5, 1.5),
        )
        .unwrap();
        let p = Vec3::new(0.3, -0.7, 0.2);
        assert!((t.inverse_point(t.point(p)) - p).length() < 1e-12);
        let r = Ray::unbounded(Vec3::new(5.0, 1.0, -1.0), Vec3::new(-1.0, 0.2, 0.3));
        let local = t.inverse_ray(&r);
        assert!((t.point(local.at(2.5)) - r.at(2.5)).length() < 1e-12);
        assert!(Transform::from_trs(Vec3::ZERO, Vec3::ZERO, Vec3::new(1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn mesh_validation() {
        assert!(matches!(
            Mesh::new(vec![Vec3::ZERO], vec![[0, 0, 1]]),
            Err(MeshError::VertexOutOfRange { .. })
        ));
    }
}
