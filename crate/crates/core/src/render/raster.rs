use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::camera::Camera;
use crate::error::{Error, Result};
use crate::mesh::TexturedMesh;
use crate::texture::RgbImage;

/// Soft coverage is evaluated out to this many `sigma_px` from a silhouette
/// edge; the logistic tail beyond it is below 5e-5.
pub const SOFT_CUTOFF_SIGMAS: f64 = 10.0;

/// A surface occludes a silhouette edge only when it is in front by more
/// than this fraction of the scene's bounding-box diagonal.
const OCCLUSION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    /// Logistic width of silhouette edges, in pixels. Zero gives hard edges.
    pub sigma_px: f64,
    pub background: [f64; 3],
    /// Color of meshes without a texture.
    pub base_color: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            sigma_px: 1.0,
            background: [1.0, 1.0, 1.0],
            base_color: [0.7, 0.7, 0.7],
        }
    }
}

/// A silhouette edge of the projected mesh: a boundary edge, or an edge whose
/// two faces face opposite ways on screen. `face` is the visible side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SilhouetteEdge {
    pub vertices: [usize; 2],
    pub face: usize,
    pub corners: [usize; 2],
}

/// Nearest silhouette edge of a pixel within the soft cutoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftSample {
    pub edge: usize,
    /// Unsigned pixel distance from the pixel center to the edge.
    pub distance: f64,
    /// Position of the closest point along the edge, in `[0, 1]`.
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: RgbImage,
    /// Frontmost face under each pixel center (hard coverage).
    pub face_id: Vec<Option<usize>>,
    /// Screen-space barycentrics of the pixel center in `face_id`.
    pub barycentric: Vec<[f64; 3]>,
    pub soft: Vec<Option<SoftSample>>,
    /// Coverage weight blending `color` over the background.
    pub alpha: Vec<f64>,
    /// Surface color before blending.
    pub color: Vec<[f64; 3]>,
    pub silhouette: Vec<SilhouetteEdge>,
    pub settings: RenderSettings,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn covered_pixels(&self) -> usize {
        self.face_id.iter().filter(|f| f.is_some()).count()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Screen positions and depths; `None` for vertices behind the camera.
pub(crate) fn project_all(vertices: &[Vector3<f64>], camera: &Camera) -> Vec<Option<(Vector2<f64>, f64)>> {
    vertices.iter().map(|v| camera.project(v)).collect()
}

fn cross2(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Barycentric coordinates of `p` in the screen triangle.
pub(crate) fn barycentric(s: &[Vector2<f64>; 3], p: Vector2<f64>) -> [f64; 3] {
    let area2 = cross2(s[1] - s[0], s[2] - s[0]);
    [
        cross2(s[1] - p, s[2] - p) / area2,
        cross2(s[2] - p, s[0] - p) / area2,
        cross2(s[0] - p, s[1] - p) / area2,
    ]
}

/// `T⁻¹` for `T = [[s0x s1x s2x], [s0y s1y s2y], [1 1 1]]`; barycentrics are
/// `T⁻¹ [p; 1]`.
pub(crate) fn barycentric_matrix_inverse(s: &[Vector2<f64>; 3]) -> Option<Matrix3<f64>> {
    Matrix3::new(s[0].x, s[1].x, s[2].x, s[0].y, s[1].y, s[2].y, 1.0, 1.0, 1.0).try_inverse()
}

/// Closest point parameter and distance from `p` to segment `a b`.
pub(crate) fn segment_closest(a: Vector2<f64>, b: Vector2<f64>, p: Vector2<f64>) -> (f64, f64) {
    let d = b - a;
    let len2 = d.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(&d) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (t, (p - (a + d * t)).norm())
}

pub(crate) fn face_color(mesh: &TexturedMesh, face: usize, bary: [f64; 3], base: [f64; 3]) -> [f64; 3] {
    match mesh.texture() {
        Some(tex) => {
            let uv = interpolate_uv(mesh, face, bary);
            tex.sample_bilinear(uv[0], uv[1])
        }
        None => base,
    }
}

pub(crate) fn interpolate_uv(mesh: &TexturedMesh, face: usize, bary: [f64; 3]) -> [f64; 2] {
    let mut uv = [0.0; 2];
    for (k, b) in bary.iter().enumerate() {
        let c = mesh.corner_uv(face, k);
        uv[0] += b * c[0];
        uv[1] += b * c[1];
    }
    uv
}

/// Renders the mesh with flat texture shading, hard z-buffered coverage and
/// logistic soft silhouettes.
pub fn rasterize(mesh: &TexturedMesh, camera: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    rasterize_vertices(mesh, mesh.vertices(), camera, settings)
}

/// As [`rasterize`], with the mesh's vertex positions replaced by `vertices`.
pub fn rasterize_vertices(
    mesh: &TexturedMesh,
    vertices: &[Vector3<f64>],
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    camera.validate()?;
    if vertices.len() != mesh.vertex_count() {
        return Err(Error::mismatch("vertex count", mesh.vertex_count(), vertices.len()));
    }
    if !(settings.sigma_px >= 0.0 && settings.sigma_px.is_finite()) {
        return Err(Error::InvalidConfig(format!("sigma_px must be non-negative, got {}", settings.sigma_px)));
    }
    let (w, h) = (camera.width, camera.height);
    let n_pix = w * h;
    let projected = project_all(vertices, camera);

    // hard coverage
    let mut depth = vec![f64::INFINITY; n_pix];
    let mut face_id: Vec<Option<usize>> = vec![None; n_pix];
    let mut barys = vec![[0.0; 3]; n_pix];
    let mut screen_area = vec![0.0; mesh.face_count()];
    for (f, face) in mesh.faces().iter().enumerate() {
        let Some(pts) = face_screen(&projected, face) else { continue };
        let s = [pts[0].0, pts[1].0, pts[2].0];
        let area2 = cross2(s[1] - s[0], s[2] - s[0]);
        screen_area[f] = 0.5 * area2;
        if area2.abs() < 1e-12 {
            continue;
        }
        let (x0, x1, y0, y1) = pixel_bounds(&s, 0.0, w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                let b = barycentric(&s, p);
                if b.iter().any(|&v| v < 0.0) {
                    continue;
                }
                let z = b[0] * pts[0].1 + b[1] * pts[1].1 + b[2] * pts[2].1;
                let k = y * w + x;
                if z < depth[k] {
                    depth[k] = z;
                    face_id[k] = Some(f);
                    barys[k] = b;
                }
            }
        }
    }

    let silhouette = silhouette_edges(mesh, &projected, &screen_area);

    // nearest unoccluded silhouette edge per pixel
    let mut soft: Vec<Option<SoftSample>> = vec![None; n_pix];
    if settings.sigma_px > 0.0 {
        let depth_tolerance = OCCLUSION_TOLERANCE * scene_extent(vertices);
        let radius = SOFT_CUTOFF_SIGMAS * settings.sigma_px;
        for (e, edge) in silhouette.iter().enumerate() {
            let (pa, za) = projected[edge.vertices[0]].expect("silhouette vertices are projected");
            let (pb, zb) = projected[edge.vertices[1]].expect("silhouette vertices are projected");
            let (x0, x1, y0, y1) = pixel_bounds(&[pa, pb, pb], radius, w, h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                    let (t, d) = segment_closest(pa, pb, p);
                    if d > radius {
                        continue;
                    }
                    let k = y * w + x;
                    if let Some(f) = face_id[k] {
                        let own = mesh.faces()[f].contains(&edge.vertices[0]) && mesh.faces()[f].contains(&edge.vertices[1]);
                        let ze = za + t * (zb - za);
                        if !own && ze > depth[k] + depth_tolerance {
                            continue;
                        }
                    }
                    if soft[k].is_none_or(|s| d < s.distance) {
                        soft[k] = Some(SoftSample { edge: e, distance: d, t });
                    }
                }
            }
        }
    }

    if face_id.iter().all(Option::is_none) && soft.iter().all(Option::is_none) {
        log::warn!("mesh is entirely outside the camera frustum; image is background only");
    }

    let mut image = RgbImage::filled(w, h, settings.background);
    let mut alpha = vec![0.0; n_pix];
    let mut color = vec![settings.background; n_pix];
    let sigma = settings.sigma_px;
    image
        .data_mut()
        .par_chunks_mut(3 * w)
        .zip(alpha.par_chunks_mut(w))
        .zip(color.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, ((row, alpha_row), color_row))| {
            for x in 0..w {
                let k = y * w + x;
                let (a, c) = match (face_id[k], soft[k]) {
                    (Some(f), s) => {
                        let c = face_color(mesh, f, barys[k], settings.base_color);
                        let a = match s {
                            Some(s) => sigmoid(s.distance / sigma),
                            None => 1.0,
                        };
                        (a, c)
                    }
                    (None, Some(s)) => {
                        let edge = &silhouette[s.edge];
                        let mut b = [0.0; 3];
                        b[edge.corners[0]] = 1.0 - s.t;
                        b[edge.corners[1]] = s.t;
                        let c = face_color(mesh, edge.face, b, settings.base_color);
                        (sigmoid(-s.distance / sigma), c)
                    }
                    (None, None) => continue,
                };
                alpha_row[x] = a;
                color_row[x] = c;
                for ch in 0..3 {
                    row[3 * x + ch] = a * c[ch] + (1.0 - a) * settings.background[ch];
                }
            }
        });

    Ok(RenderOutput {
        image,
        face_id,
        barycentric: barys,
        soft,
        alpha,
        color,
        silhouette,
        settings: settings.clone(),
    })
}

fn scene_extent(vertices: &[Vector3<f64>]) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for v in vertices {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    if vertices.is_empty() {
        0.0
    } else {
        (hi - lo).norm()
    }
}

pub(crate) fn face_screen(
    projected: &[Option<(Vector2<f64>, f64)>],
    face: &[usize; 3],
) -> Option<[(Vector2<f64>, f64); 3]> {
    Some([projected[face[0]]?, projected[face[1]]?, projected[face[2]]?])
}

fn pixel_bounds(s: &[Vector2<f64>; 3], pad: f64, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let min_x = s.iter().map(|p| p.x).fold(f64::INFINITY, f64::min) - pad;
    let max_x = s.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max) + pad;
    let min_y = s.iter().map(|p| p.y).fold(f64::INFINITY, f64::min) - pad;
    let max_y = s.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max) + pad;
    let clamp = |v: f64, n: usize| -> usize {
        if v.is_nan() || v < 0.0 {
            0
        } else {
            (v as usize).min(n)
        }
    };
    // pixel x has center x + 0.5
    let x0 = clamp((min_x - 0.5).ceil(), w);
    let x1 = clamp((max_x - 0.5).floor() + 1.0, w);
    let y0 = clamp((min_y - 0.5).ceil(), h);
    let y1 = clamp((max_y - 0.5).floor() + 1.0, h);
    (x0, x1, y0, y1)
}

/// Faces with negative screen-space signed area are front-facing: the image
/// y axis points down, so counter-clockwise world triangles flip sign.
fn silhouette_edges(
    mesh: &TexturedMesh,
    projected: &[Option<(Vector2<f64>, f64)>],
    screen_area: &[f64],
) -> Vec<SilhouetteEdge> {
    let visible = |f: usize| face_screen(projected, &mesh.faces()[f]).is_some() && screen_area[f] != 0.0;
    let mut out = Vec::new();
    for (&(i, j), faces) in &mesh.edge_faces() {
        let owners: Vec<usize> = faces.iter().copied().filter(|&f| visible(f)).collect();
        let owner = match (faces.len(), owners.as_slice()) {
            (_, [f]) => Some(*f),
            (2, [f, g]) => {
                let (sf, sg) = (screen_area[*f], screen_area[*g]);
                if sf * sg < 0.0 {
                    Some(if sf < 0.0 { *f } else { *g })
                } else {
                    None
                }
            }
            _ => None,
        };
        if let Some(f) = owner {
            let face = mesh.faces()[f];
            let ci = face.iter().position(|&v| v == i).unwrap();
            let cj = face.iter().position(|&v| v == j).unwrap();
            out.push(SilhouetteEdge {
                vertices: [i, j],
                face: f,
                corners: [ci, cj],
            });
        }
    }
    out
}
