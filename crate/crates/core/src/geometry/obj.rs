//! Minimal Wavefront OBJ reader: `v`, `vn`, `f` and `usemtl` records.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use super::{Mesh, MeshError, Vec3, VertexNormals};

#[derive(Debug, thiserror::Error)]
pub enum ObjError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: index {index} out of range (have {count})")]
    IndexOutOfRange {
        line: usize,
        index: i64,
        count: usize,
    },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh, ObjError> {
    let file = std::fs::File::open(path)?;
    parse_obj(std::io::BufReader::new(file))
}

pub fn parse_obj<R: BufRead>(reader: R) -> Result<Mesh, ObjError> {
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut faces = Vec::new();
    let mut face_normals: Vec<Option<[u32; 3]>> = Vec::new();
    let mut face_material = Vec::new();
    let mut material_names: Vec<String> = Vec::new();
    let mut material_lookup: HashMap<String, u32> = HashMap::new();
    let mut current_material: Option<u32> = None;

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        let Some(keyword) = tokens.next() else {
            continue;
        };
        match keyword {
            "v" => vertices.push(parse_vec3(&mut tokens, line_no)?),
            "vn" => normals.push(parse_vec3(&mut tokens, line_no)?),
            "usemtl" => {
                let name = tokens.next().unwrap_or("").to_owned();
                let next = material_names.len() as u32;
                let index = *material_lookup.entry(name.clone()).or_insert_with(|| {
                    material_names.push(name);
                    next
                });
                current_material = Some(index);
            }
            "f" => {
                let mut corners = Vec::with_capacity(4);
                for token in tokens {
                    corners.push(parse_corner(
                        token,
                        line_no,
                        vertices.len(),
                        normals.len(),
                    )?);
                }
                if corners.len() < 3 {
                    return Err(ObjError::Parse {
                        line: line_no,
                        message: format!("face needs 3 vertices, got {}", corners.len()),
                    });
                }
                let material = *current_material.get_or_insert_with(|| {
                    let next = material_names.len() as u32;
                    *material_lookup.entry("default".to_owned()).or_insert_with(|| {
                        material_names.push("default".to_owned());
                        next
                    })
                });
                // Fan triangulation around the first corner.
                for k in 1..corners.len() - 1 {
                    let (a, b, c) = (corners[0], corners[k], corners[k + 1]);
                    faces.push([a.0, b.0, c.0]);
                    face_normals.push(match (a.1, b.1, c.1) {
                        (Some(na), Some(nb), Some(nc)) => Some([na, nb, nc]),
                        _ => None,
                    });
                    face_material.push(material);
                }
            }
            // vt, o, g, s, mtllib and friends carry nothing we use.
            _ => {}
        }
    }

    if material_names.is_empty() {
        material_names.push("default".to_owned());
    }
    let vertex_normals = if !faces.is_empty() && face_normals.iter().all(Option::is_some) {
        Some(VertexNormals {
            normals: normals.into_iter().map(|n: Vec3| n.normalize_or_zero()).collect(),
            indices: face_normals.into_iter().flatten().collect(),
        })
    } else {
        None
    };
    let mesh = Mesh {
        vertices,
        faces,
        vertex_normals,
        face_material,
        material_names,
    };
    mesh.validate()?;
    Ok(mesh)
}

fn parse_vec3<'a>(
    tokens: &mut impl Iterator<Item = &'a str>,
    line: usize,
) -> Result<Vec3, ObjError> {
    let mut v = [0.0; 3];
    for c in &mut v {
        let tok = tokens.next().ok_or_else(|| ObjError::Parse {
            line,
            message: "expected 3 coordinates".to_owned(),
        })?;
        *c = tok.parse().map_err(|_| ObjError::Parse {
            line,
            message: format!("bad number {tok:?}"),
        })?;
    }
    Ok(Vec3::from_array(v))
}

/// Resolves a 1-based (or negative, relative) OBJ index.
fn resolve(raw: &str, line: usize, count: usize) -> Result<u32, ObjError> {
    let index: i64 = raw.parse().map_err(|_| ObjError::Parse {
        line,
        message: format!("bad index {raw:?}"),
    })?;
    let resolved = match index {
        i if i > 0 => i - 1,
        i if i < 0 => count as i64 + i,
        _ => -1,
    };
    if resolved < 0 || resolved as usize >= count {
        return Err(ObjError::IndexOutOfRange { line, index, count });
    }
    Ok(resolved as u32)
}

fn parse_corner(
    token: &str,
    line: usize,
    vertex_count: usize,
    normal_count: usize,
) -> Result<(u32, Option<u32>), ObjError> {
    let mut parts = token.split('/');
    let v = resolve(parts.next().unwrap_or(""), line, vertex_count)?;
    let _texcoord = parts.next();
    let n = match parts.next() {
        Some(raw) if !raw.is_empty() => Some(resolve(raw, line, normal_count)?),
        _ => None,
    };
    Ok((v, n))
}
