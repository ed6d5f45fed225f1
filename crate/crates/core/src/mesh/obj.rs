//! Wavefront OBJ reading and writing (`v`, `vt`, `f`, `mtllib`/`map_Kd`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use super::TexturedMesh;
use crate::error::{Error, Result};
use crate::texture::RgbImage;

const MATERIAL_NAME: &str = "material0";

/// Loads a triangle mesh. Texture coordinates are taken per face corner; a
/// texture is loaded when a material library with `map_Kd` is referenced.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TexturedMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut positions = Vec::new();
    let mut tex_coords: Vec<[f64; 2]> = Vec::new();
    let mut faces = Vec::new();
    let mut corner_uvs: Vec<[f64; 2]> = Vec::new();
    let mut faces_with_uv = 0usize;
    let mut mtllib: Option<String> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        let Some(tag) = tokens.next() else { continue };
        let rest: Vec<&str> = tokens.collect();
        match tag {
            "v" => {
                if rest.len() < 3 {
                    return Err(parse_err(lineno, "vertex needs three coordinates".into()));
                }
                let mut p = [0.0; 3];
                for (k, tok) in rest[..3].iter().enumerate() {
                    p[k] = tok
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad coordinate {tok:?}")))?;
                }
                positions.push(Vector3::from(p));
            }
            "vt" => {
                if rest.len() < 2 {
                    return Err(parse_err(lineno, "texture coordinate needs u and v".into()));
                }
                let mut t = [0.0; 2];
                for (k, tok) in rest[..2].iter().enumerate() {
                    t[k] = tok
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad texture coordinate {tok:?}")))?;
                }
                tex_coords.push(t);
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(parse_err(
                        lineno,
                        format!("only triangles are supported, face has {} corners", rest.len()),
                    ));
                }
                let mut face = [0usize; 3];
                let mut uvs = Vec::with_capacity(3);
                for (k, tok) in rest.iter().enumerate() {
                    let mut parts = tok.split('/');
                    let vi = parts.next().unwrap_or("");
                    face[k] = resolve_index(vi, positions.len())
                        .ok_or_else(|| parse_err(lineno, format!("bad vertex index {tok:?}")))?;
                    if let Some(ti) = parts.next().filter(|s| !s.is_empty()) {
                        let t = resolve_index(ti, tex_coords.len()).ok_or_else(|| {
                            parse_err(lineno, format!("bad texture index {tok:?}"))
                        })?;
                        uvs.push(tex_coords[t]);
                    }
                }
                match uvs.len() {
                    0 => {}
                    3 => {
                        corner_uvs.extend(uvs);
                        faces_with_uv += 1;
                    }
                    _ => {
                        return Err(parse_err(lineno, "texture indices on some corners only".into()))
                    }
                }
                faces.push(face);
            }
            "mtllib" => mtllib = rest.first().map(|s| s.to_string()),
            _ => {}
        }
    }

    if faces_with_uv != 0 && faces_with_uv != faces.len() {
        return Err(parse_err(0, "texture coordinates present on only some faces".into()));
    }

    let base = path.parent().unwrap_or(Path::new("."));
    let texture = match (&mtllib, corner_uvs.is_empty()) {
        (Some(lib), false) => texture_from_material(&base.join(lib))?,
        _ => None,
    };

    let mesh = TexturedMesh::new(positions, faces, corner_uvs, texture)?;
    if !mesh.is_planar() {
        let (lo, hi) = mesh.bounding_box();
        log::debug!(
            "loaded {}: bounding box [{:.4}, {:.4}, {:.4}] - [{:.4}, {:.4}, {:.4}]",
            path.display(),
            lo.x,
            lo.y,
            lo.z,
            hi.x,
            hi.y,
            hi.z
        );
    }
    Ok(mesh)
}

fn resolve_index(tok: &str, count: usize) -> Option<usize> {
    let i: i64 = tok.parse().ok()?;
    let idx = if i > 0 {
        i - 1
    } else if i < 0 {
        count as i64 + i
    } else {
        return None;
    };
    (idx >= 0 && (idx as usize) < count).then_some(idx as usize)
}

fn texture_from_material(mtl_path: &Path) -> Result<Option<RgbImage>> {
    let text = fs::read_to_string(mtl_path).map_err(|e| Error::io(mtl_path, e))?;
    let map = text.lines().find_map(|l| {
        let l = l.trim();
        l.strip_prefix("map_Kd").map(|s| s.trim().to_string())
    });
    let Some(name) = map else { return Ok(None) };
    let tex_path = mtl_path.parent().unwrap_or(Path::new(".")).join(&name);
    if !tex_path.exists() {
        return Err(Error::MissingTexture(tex_path));
    }
    RgbImage::load_png(&tex_path).map(Some)
}

/// Formats with 9 significant digits, printed in plain decimal.
fn fmt9(x: f64) -> String {
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    if rounded == 0.0 {
        "0".to_string()
    } else {
        format!("{rounded}")
    }
}

/// Writes `path` plus, for textured meshes, `<stem>.mtl` and `<stem>.png`
/// alongside it.
pub fn save_mesh(mesh: &TexturedMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("mesh")
        .to_string();
    let dir: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut out = String::new();
    if mesh.texture().is_some() {
        let _ = writeln!(out, "mtllib {stem}.mtl");
        let _ = writeln!(out, "usemtl {MATERIAL_NAME}");
    }
    for v in mesh.vertices() {
        let _ = writeln!(out, "v {} {} {}", fmt9(v.x), fmt9(v.y), fmt9(v.z));
    }
    for uv in mesh.uvs() {
        let _ = writeln!(out, "vt {} {}", fmt9(uv[0]), fmt9(uv[1]));
    }
    for (f, face) in mesh.faces().iter().enumerate() {
        if mesh.has_uvs() {
            let t = 3 * f + 1;
            let _ = writeln!(
                out,
                "f {}/{} {}/{} {}/{}",
                face[0] + 1,
                t,
                face[1] + 1,
                t + 1,
                face[2] + 1,
                t + 2
            );
        } else {
            let _ = writeln!(out, "f {} {} {}", face[0] + 1, face[1] + 1, face[2] + 1);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;

    if let Some(tex) = mesh.texture() {
        let mtl_path = dir.join(format!("{stem}.mtl"));
        let mtl = format!("newmtl {MATERIAL_NAME}\nKd 1 1 1\nmap_Kd {stem}.png\n");
        fs::write(&mtl_path, mtl).map_err(|e| Error::io(&mtl_path, e))?;
        tex.save_png(dir.join(format!("{stem}.png")))?;
    }
    Ok(())
}
