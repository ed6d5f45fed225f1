use nalgebra::{Vector2, Vector3};

use super::camera::Camera;
use super::raster::{barycentric_matrix_inverse, face_screen, project_all, RenderOutput};
use crate::error::{Error, Result};
use crate::mesh::TexturedMesh;
use crate::texture::RgbImage;

/// Pulls an image-space gradient `∂ℓ/∂I` back to vertex positions.
///
/// Covered pixels contribute through the barycentric texture lookup and,
/// near silhouettes, through their coverage weight; uncovered pixels inside
/// the soft band contribute through coverage and the edge color. There is no
/// gradient through depth ordering.
pub fn rasterize_backward(
    output: &RenderOutput,
    mesh: &TexturedMesh,
    vertices: &[Vector3<f64>],
    camera: &Camera,
    upstream: &RgbImage,
) -> Result<Vec<Vector3<f64>>> {
    let (w, h) = (camera.width, camera.height);
    if output.image.dims() != (w, h) {
        return Err(Error::mismatch(
            "render output size",
            format!("{w}x{h}"),
            format!("{}x{}", output.width(), output.height()),
        ));
    }
    if upstream.dims() != (w, h) {
        return Err(Error::mismatch(
            "upstream image size",
            format!("{w}x{h}"),
            format!("{}x{}", upstream.width(), upstream.height()),
        ));
    }
    if vertices.len() != mesh.vertex_count() {
        return Err(Error::mismatch("vertex count", mesh.vertex_count(), vertices.len()));
    }
    let nf = mesh.face_count();
    if output.face_id.iter().flatten().any(|&f| f >= nf)
        || output.silhouette.iter().any(|e| e.face >= nf)
    {
        return Err(Error::mismatch("render output faces", nf, "out-of-range face id"));
    }

    let projected = project_all(vertices, camera);
    let sigma = output.settings.sigma_px;
    let bg = output.settings.background;
    let mut screen_grad = vec![Vector2::<f64>::zeros(); vertices.len()];

    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            let g = upstream.pixel(x, y);
            if g == [0.0; 3] {
                continue;
            }
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let alpha = output.alpha[k];
            let c = output.color[k];
            let d_alpha: f64 = (0..3).map(|ch| g[ch] * (c[ch] - bg[ch])).sum();
            let d_color = [alpha * g[0], alpha * g[1], alpha * g[2]];

            match (output.face_id[k], output.soft[k]) {
                (Some(f), soft) => {
                    if let Some(tex) = mesh.texture() {
                        let b = output.barycentric[k];
                        let face = mesh.faces()[f];
                        let Some(pts) = face_screen(&projected, &face) else {
                            continue;
                        };
                        let s = [pts[0].0, pts[1].0, pts[2].0];
                        let uv = super::raster::interpolate_uv(mesh, f, b);
                        let (_, duv) = tex.sample_bilinear_with_grad(uv[0], uv[1]);
                        let dl_du: f64 = (0..3).map(|ch| d_color[ch] * duv[0][ch]).sum();
                        let dl_dv: f64 = (0..3).map(|ch| d_color[ch] * duv[1][ch]).sum();
                        let g_b = Vector3::from_fn(|j, _| {
                            let cuv = mesh.corner_uv(f, j);
                            dl_du * cuv[0] + dl_dv * cuv[1]
                        });
                        if let Some(inv) = barycentric_matrix_inverse(&s) {
                            let m = inv.transpose() * g_b;
                            for j in 0..3 {
                                screen_grad[face[j]] -= Vector2::new(m[0], m[1]) * b[j];
                            }
                        }
                    }
                    if let Some(s) = soft {
                        let dd = d_alpha * alpha * (1.0 - alpha) / sigma;
                        distance_backward(output, &projected, s.edge, p, dd, &mut screen_grad);
                    }
                }
                (None, Some(s)) => {
                    let dd = -d_alpha * alpha * (1.0 - alpha) / sigma;
                    distance_backward(output, &projected, s.edge, p, dd, &mut screen_grad);
                    if let Some(tex) = mesh.texture() {
                        let edge = output.silhouette[s.edge];
                        let ua = mesh.corner_uv(edge.face, edge.corners[0]);
                        let ub = mesh.corner_uv(edge.face, edge.corners[1]);
                        let uv = [ua[0] + s.t * (ub[0] - ua[0]), ua[1] + s.t * (ub[1] - ua[1])];
                        let (_, duv) = tex.sample_bilinear_with_grad(uv[0], uv[1]);
                        let dl_dt: f64 = (0..3)
                            .map(|ch| d_color[ch] * (duv[0][ch] * (ub[0] - ua[0]) + duv[1][ch] * (ub[1] - ua[1])))
                            .sum();
                        t_backward(output, &projected, s.edge, p, s.t, dl_dt, &mut screen_grad);
                    }
                }
                (None, None) => {}
            }
        }
    }

    Ok(vertices
        .iter()
        .zip(&screen_grad)
        .map(|(v, g)| {
            if *g == Vector2::zeros() {
                Vector3::zeros()
            } else {
                camera.screen_jacobian(v).transpose() * g
            }
        })
        .collect())
}

fn edge_points(output: &RenderOutput, projected: &[Option<(Vector2<f64>, f64)>], edge: usize) -> ([usize; 2], Vector2<f64>, Vector2<f64>) {
    let e = output.silhouette[edge].vertices;
    let a = projected[e[0]].map(|p| p.0).unwrap_or_default();
    let b = projected[e[1]].map(|p| p.0).unwrap_or_default();
    (e, a, b)
}

/// Adds `dd · ∂d/∂(a, b)` for the pixel-to-segment distance `d`.
fn distance_backward(
    output: &RenderOutput,
    projected: &[Option<(Vector2<f64>, f64)>],
    edge: usize,
    p: Vector2<f64>,
    dd: f64,
    screen_grad: &mut [Vector2<f64>],
) {
    let (e, a, b) = edge_points(output, projected, edge);
    let d = b - a;
    let len2 = d.norm_squared();
    if len2 == 0.0 {
        return;
    }
    let t_raw = (p - a).dot(&d) / len2;
    let t = t_raw.clamp(0.0, 1.0);
    let r = p - (a + d * t);
    let dist = r.norm();
    if dist == 0.0 {
        return;
    }
    let u = r / dist;
    if t_raw <= 0.0 {
        screen_grad[e[0]] -= u * dd;
    } else if t_raw >= 1.0 {
        screen_grad[e[1]] -= u * dd;
    } else {
        screen_grad[e[0]] -= u * ((1.0 - t) * dd);
        screen_grad[e[1]] -= u * (t * dd);
    }
}

/// Adds `dl_dt · ∂t/∂(a, b)` for the closest-point parameter `t`.
fn t_backward(
    output: &RenderOutput,
    projected: &[Option<(Vector2<f64>, f64)>],
    edge: usize,
    p: Vector2<f64>,
    t: f64,
    dl_dt: f64,
    screen_grad: &mut [Vector2<f64>],
) {
    if t <= 0.0 || t >= 1.0 || dl_dt == 0.0 {
        return;
    }
    let (e, a, b) = edge_points(output, projected, edge);
    let d = b - a;
    let len2 = d.norm_squared();
    if len2 == 0.0 {
        return;
    }
    let wv = p - a;
    screen_grad[e[0]] += (-d - wv + d * (2.0 * t)) * (dl_dt / len2);
    screen_grad[e[1]] += (wv - d * (2.0 * t)) * (dl_dt / len2);
}
