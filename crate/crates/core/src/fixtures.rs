//! Procedural test meshes: sphere, box, torus and a teapot-class composite.
//!
//! `fixtures/teapot.obj` in the crate is [`teapot`] written out with
//! [`write_obj`] so ablations and the CLI can run without external assets.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use crate::geometry::{Mesh, Vec3, VertexNormals};

/// UV sphere centred at the origin with analytic vertex normals.
pub fn uv_sphere(radius: f64, segments: u32, rings: u32) -> Mesh {
    let segments = segments.max(3);
    let rings = rings.max(2);
    let mut vertices = vec![Vec3::new(0.0, radius, 0.0)];
    for r in 1..rings {
        let phi = PI * r as f64 / rings as f64;
        for s in 0..segments {
            let theta = TAU * s as f64 / segments as f64;
            vertices.push(
                Vec3::new(phi.sin() * theta.cos(), phi.cos(), phi.sin() * theta.sin()) * radius,
            );
        }
    }
    vertices.push(Vec3::new(0.0, -radius, 0.0));
    let south = vertices.len() as u32 - 1;
    let ring = |r: u32, s: u32| 1 + (r - 1) * segments + s % segments;

    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(1, s + 1), ring(1, s)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            let (a, b) = (ring(r, s), ring(r, s + 1));
            let (c, d) = (ring(r + 1, s), ring(r + 1, s + 1));
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    for s in 0..segments {
        faces.push([south, ring(rings - 1, s), ring(rings - 1, s + 1)]);
    }
    let normals = vertices.iter().map(|v| v.normalize()).collect();
    let mut mesh = Mesh::new(vertices, faces).expect("sphere indices are valid");
    mesh.vertex_normals = Some(VertexNormals {
        normals,
        indices: mesh.faces.clone(),
    });
    mesh
}

/// Axis-aligned box with flat faces (12 triangles).
pub fn box_mesh(min: Vec3, max: Vec3) -> Mesh {
    let c = |i: u32| {
        Vec3::new(
            if i & 1 == 0 { min.x } else { max.x },
            if i & 2 == 0 { min.y } else { max.y },
            if i & 4 == 0 { min.z } else { max.z },
        )
    };
    let vertices = (0..8).map(c).collect();
    let quads = [
        [0, 2, 3, 1], // -z
        [4, 5, 7, 6], // +z
        [0, 1, 5, 4], // -y
        [2, 6, 7, 3], // +y
        [0, 4, 6, 2], // -x
        [1, 3, 7, 5], // +x
    ];
    let faces = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    Mesh::new(vertices, faces).expect("box indices are valid")
}

/// Torus around the y axis.
pub fn torus(major: f64, minor: f64, major_segments: u32, minor_segments: u32) -> Mesh {
    let (nu, nv) = (major_segments.max(3), minor_segments.max(3));
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    for i in 0..nu {
        let u = TAU * i as f64 / nu as f64;
        let radial = Vec3::new(u.cos(), 0.0, u.sin());
        for j in 0..nv {
            let v = TAU * j as f64 / nv as f64;
            let n = radial * v.cos() + Vec3::Y * v.sin();
            vertices.push(radial * major + n * minor);
            normals.push(n);
        }
    }
    let idx = |i: u32, j: u32| (i % nu) * nv + j % nv;
    let mut faces = Vec::new();
    for i in 0..nu {
        for j in 0..nv {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            faces.push([a, d, c]);
            faces.push([a, c, b]);
        }
    }
    let mut mesh = Mesh::new(vertices, faces).expect("torus indices are valid");
    mesh.vertex_normals = Some(VertexNormals {
        normals,
        indices: mesh.faces.clone(),
    });
    mesh
}

/// Surface of revolution of `profile` (radius, height) points around y.
fn lathe(profile: &[(f64, f64)], segments: u32) -> Mesh {
    let n = profile.len() as u32;
    let mut vertices = Vec::new();
    for s in 0..segments {
        let theta = TAU * s as f64 / segments as f64;
        for &(r, y) in profile {
            vertices.push(Vec3::new(r * theta.cos(), y, r * theta.sin()));
        }
    }
    let idx = |s: u32, k: u32| (s % segments) * n + k;
    let mut faces = Vec::new();
    for s in 0..segments {
        for k in 0..n - 1 {
            let (a, b, c, d) = (idx(s, k), idx(s + 1, k), idx(s + 1, k + 1), idx(s, k + 1));
            faces.push([a, d, c]);
            faces.push([a, c, b]);
        }
    }
    Mesh::new(vertices, faces).expect("lathe indices are valid")
}

/// Tube of varying radius swept along a polyline.
fn sweep(path: &[Vec3], radii: &[f64], sides: u32) -> Mesh {
    let mut vertices = Vec::new();
    for (k, (&p, &r)) in path.iter().zip(radii).enumerate() {
        let prev = path[k.saturating_sub(1)];
        let next = path[(k + 1).min(path.len() - 1)];
        let tangent = (next - prev).normalize();
        let helper = if tangent.y.abs() < 0.9 { Vec3::Y } else { Vec3::X };
        let u = tangent.cross(helper).normalize();
        let v = tangent.cross(u);
        for s in 0..sides {
            let a = TAU * s as f64 / sides as f64;
            vertices.push(p + (u * a.cos() + v * a.sin()) * r);
        }
    }
    let idx = |k: u32, s: u32| k * sides + s % sides;
    let mut faces = Vec::new();
    for k in 0..path.len() as u32 - 1 {
        for s in 0..sides {
            let (a, b, c, d) = (idx(k, s), idx(k, s + 1), idx(k + 1, s + 1), idx(k + 1, s));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    Mesh::new(vertices, faces).expect("sweep indices are valid")
}

fn bezier2(a: Vec3, b: Vec3, c: Vec3, t: f64) -> Vec3 {
    a * (1.0 - t) * (1.0 - t) + b * 2.0 * t * (1.0 - t) + c * t * t
}

/// A teapot-class polygon soup: lathed body and lid, curved spout, loop
/// handle and knob. Non-convex, self-shadowing, open-ended tubes.
pub fn teapot() -> Mesh {
    let body_profile: Vec<(f64, f64)> = (0..=16)
        .map(|k| {
            let t = k as f64 / 16.0;
            let y = t * 1.5;
            let r = 0.05 + 0.95 * (PI * (0.08 + 0.84 * t)).sin() * (1.0 - 0.25 * t);
            (if k == 0 { 0.0 } else { r }, y)
        })
        .collect();
    let mut mesh = lathe(&body_profile, 32);

    let top_r = body_profile.last().unwrap().0;
    let lid: Vec<(f64, f64)> = (0..=6)
        .map(|k| {
            let t = k as f64 / 6.0;
            (top_r * (1.0 - t), 1.5 + 0.18 * (PI * 0.5 * t).sin())
        })
        .collect();
    mesh.append(&lathe(&lid, 32));
    mesh.append(&{
        let mut knob = uv_sphere(0.12, 12, 8);
        knob.vertices.iter_mut().for_each(|v| *v += Vec3::new(0.0, 1.75, 0.0));
        knob.vertex_normals = None;
        knob
    });

    let (a, b, c) = (
        Vec3::new(0.8, 0.45, 0.0),
        Vec3::new(1.45, 0.55, 0.0),
        Vec3::new(1.7, 1.35, 0.0),
    );
    let spout_path: Vec<Vec3> = (0..=12).map(|k| bezier2(a, b, c, k as f64 / 12.0)).collect();
    let spout_radii: Vec<f64> = (0..=12).map(|k| 0.2 - 0.11 * k as f64 / 12.0).collect();
    mesh.append(&sweep(&spout_path, &spout_radii, 12));

    let handle_path: Vec<Vec3> = (0..=14)
        .map(|k| {
            let a = -0.5 * PI + PI * k as f64 / 14.0;
            Vec3::new(-0.8 - 0.5 * a.cos(), 0.85 + 0.45 * a.sin(), 0.0)
        })
        .collect();
    mesh.append(&sweep(&handle_path, &[0.08; 15], 10));

    let face_count = mesh.faces.len();
    mesh.material_names = vec!["teapot".to_owned()];
    mesh.face_material = vec![0; face_count];
    smooth_normals(&mut mesh);
    mesh.validate().expect("teapot is valid");
    mesh
}

/// Two boxes side by side along x: material 0 on the left, 1 on the right.
pub fn two_material_boxes() -> Mesh {
    let mut mesh = box_mesh(Vec3::new(-1.0, -0.5, -0.5), Vec3::new(-0.1, 0.5, 0.5));
    mesh.material_names = vec!["left".to_owned()];
    let mut right = box_mesh(Vec3::new(0.1, -0.5, -0.5), Vec3::new(1.0, 0.5, 0.5));
    right.material_names = vec!["right".to_owned()];
    mesh.append(&right);
    mesh
}

/// Area-weighted vertex normals shared by position index.
pub fn smooth_normals(mesh: &mut Mesh) {
    let mut acc = vec![Vec3::ZERO; mesh.vertices.len()];
    for (i, f) in mesh.faces.iter().enumerate() {
        let t = mesh.triangle(i);
        let n = (t.v1 - t.v0).cross(t.v2 - t.v0);
        for &v in f {
            acc[v as usize] += n;
        }
    }
    mesh.vertex_normals = Some(VertexNormals {
        normals: acc.into_iter().map(Vec3::normalize_or_zero).collect(),
        indices: mesh.faces.clone(),
    });
}

/// Writes `mesh` as OBJ with `usemtl` groups and vertex normals when present.
pub fn write_obj<W: Write>(mesh: &Mesh, mut out: W) -> std::io::Result<()> {
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
    }
    if let Some(vn) = &mesh.vertex_normals {
        for n in &vn.normals {
            writeln!(out, "vn {} {} {}", n.x, n.y, n.z)?;
        }
    }
    let mut current = None;
    for (i, f) in mesh.faces.iter().enumerate() {
        let m = mesh.face_material[i];
        if current != Some(m) {
            writeln!(out, "usemtl {}", mesh.material_names[m as usize])?;
            current = Some(m);
        }
        match &mesh.vertex_normals {
            Some(vn) => {
                let n = vn.indices[i];
                writeln!(
                    out,
                    "f {}//{} {}//{} {}//{}",
                    f[0] + 1,
                    n[0] + 1,
                    f[1] + 1,
                    n[1] + 1,
                    f[2] + 1,
                    n[2] + 1
                )?;
            }
            None => writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::parse_obj;

    #[test]
    fn sphere_is_closed_and_round() {
        let m = uv_sphere(1.0, 32, 16);
        assert_eq!(m.faces.len(), 2 * 32 + 2 * 32 * 14);
        let area = m.surface_area();
        assert!((area - 4.0 * PI).abs() / (4.0 * PI) < 0.02, "{area}");
        for v in &m.vertices {
            assert!((v.length() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn box_and_torus_areas() {
        let b = box_mesh(Vec3::ZERO, Vec3::new(1.0, 2.0, 3.0));
        assert!((b.surface_area() - 22.0).abs() < 1e-12);
        let t = torus(1.0, 0.25, 64, 32);
        let exact = 4.0 * PI * PI * 0.25;
        assert!((t.surface_area() - exact).abs() / exact < 0.01);
    }

    #[test]
    fn teapot_round_trips_through_obj() {
        let m = teapot();
        assert!(m.faces.len() > 1500);
        let mut buf = Vec::new();
        write_obj(&m, &mut buf).unwrap();
        let back = parse_obj(buf.as_slice()).unwrap();
        assert_eq!(back.faces, m.faces);
        assert_eq!(back.num_materials(), 1);
    }

    #[test]
    fn committed_teapot_matches_generator() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/teapot.obj");
        let committed = crate::geometry::load_obj(path).unwrap();
        let generated = teapot();
        assert_eq!(committed.faces, generated.faces);
        for (a, b) in committed.vertices.iter().zip(&generated.vertices) {
            assert!((*a - *b).length() < 1e-12);
        }
    }

    #[test]
    fn two_material_fixture() {
        let m = two_material_boxes();
        assert_eq!(m.num_materials(), 2);
        assert_eq!(m.face_material.iter().filter(|&&x| x == 1).count(), 12);
    }
}
