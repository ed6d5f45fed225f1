use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spade::{ConstrainedDelaunayTriangulation, Point2, Triangulation};

use super::mask::{distance_to_polygon, find_self_intersection, point_in_polygon, simplify_polygon, BinaryMask};
use crate::error::{Error, Result};
use crate::mesh::TexturedMesh;
use crate::texture::RgbImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeshFromMaskOptions {
    /// Approximate number of Poisson-disk samples inside the contour.
    pub interior_samples: usize,
    /// Douglas-Peucker tolerance in pixels.
    pub simplify_tolerance: f64,
    pub seed: u64,
}

impl Default for MeshFromMaskOptions {
    fn default() -> Self {
        Self {
            interior_samples: 800,
            simplify_tolerance: 1.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaskMesh {
    pub mesh: TexturedMesh,
    /// Contour vertices in order around the outline; consecutive entries
    /// (cyclically) are constrained edges of the triangulation.
    pub contour: Vec<usize>,
    /// Sample spacing in pixels.
    pub spacing: f64,
}

/// Builds a planar mesh from the outline of `mask`: the outline is traced,
/// simplified and resampled, the interior is filled with Poisson-disk
/// samples, and a constrained Delaunay triangulation keeps every outline
/// segment as an edge. Vertices are scaled into `[0, 1]²` (aspect kept, `y`
/// up) and UVs point at the matching pixels of `image`.
pub fn mesh_from_mask(mask: &BinaryMask, image: Option<&RgbImage>, options: &MeshFromMaskOptions) -> Result<MaskMesh> {
    if options.interior_samples == 0 {
        return Err(Error::Triangulation("at least one interior sample is required".into()));
    }
    if let Some(img) = image {
        if img.dims() != (mask.width(), mask.height()) {
            return Err(Error::mismatch(
                "image size",
                format!("{}x{}", mask.width(), mask.height()),
                format!("{}x{}", img.width(), img.height()),
            ));
        }
    }
    let prepared = mask.prepared();
    let outline = prepared.outer_contour()?;
    let polygon = simplify_polygon(&outline, options.simplify_tolerance);
    if polygon.len() < 3 {
        return Err(Error::Triangulation(format!(
            "simplified contour has only {} vertices",
            polygon.len()
        )));
    }
    if let Some((i, j)) = find_self_intersection(&polygon) {
        return Err(Error::Triangulation(format!(
            "simplified contour intersects itself (segments {i} and {j})"
        )));
    }

    let area = prepared.count() as f64;
    // maximal Poisson-disk packings hold about 0.65 / r² points per unit area
    let spacing = (0.65 * area / options.interior_samples as f64).sqrt();
    let boundary = resample(&polygon, spacing);
    let interior = poisson_disk(&polygon, spacing, options.seed);
    if boundary.len() + interior.len() < 3 {
        return Err(Error::Triangulation("too few samples".into()));
    }

    let mut cdt = ConstrainedDelaunayTriangulation::<Point2<f64>>::new();
    let mut handles = Vec::with_capacity(boundary.len());
    for p in &boundary {
        handles.push(
            cdt.insert(Point2::new(p[0], p[1]))
                .map_err(|e| Error::Triangulation(format!("{e:?}")))?,
        );
    }
    for i in 0..handles.len() {
        let (a, b) = (handles[i], handles[(i + 1) % handles.len()]);
        if cdt.try_add_constraint(a, b).is_empty() {
            return Err(Error::Triangulation(format!("contour segment {i} could not be constrained")));
        }
    }
    for p in &interior {
        cdt.insert(Point2::new(p[0], p[1]))
            .map_err(|e| Error::Triangulation(format!("{e:?}")))?;
    }

    // map spade vertices to compact indices, contour first
    let mut index_of = vec![usize::MAX; cdt.num_vertices()];
    let mut pixels: Vec<[f64; 2]> = Vec::with_capacity(cdt.num_vertices());
    let mut contour = Vec::with_capacity(handles.len());
    for h in &handles {
        let k = h.index();
        if index_of[k] == usize::MAX {
            index_of[k] = pixels.len();
            let p = cdt.vertex(*h).position();
            pixels.push([p.x, p.y]);
        }
        contour.push(index_of[k]);
    }
    let mut faces = Vec::new();
    for face in cdt.inner_faces() {
        let vs = face.vertices();
        let pts: Vec<[f64; 2]> = vs.iter().map(|v| [v.position().x, v.position().y]).collect();
        let centroid = [
            (pts[0][0] + pts[1][0] + pts[2][0]) / 3.0,
            (pts[0][1] + pts[1][1] + pts[2][1]) / 3.0,
        ];
        // hull slivers between nearly collinear outline samples are outside
        let area2 = (pts[1][0] - pts[0][0]) * (pts[2][1] - pts[0][1]) - (pts[2][0] - pts[0][0]) * (pts[1][1] - pts[0][1]);
        if area2.abs() < 1e-6 * spacing * spacing || !point_in_polygon(&polygon, centroid) {
            continue;
        }
        let mut tri = [0usize; 3];
        for (k, v) in vs.iter().enumerate() {
            let id = v.fix().index();
            if index_of[id] == usize::MAX {
                index_of[id] = pixels.len();
                pixels.push(pts[k]);
            }
            tri[k] = index_of[id];
        }
        faces.push(tri);
    }
    if faces.is_empty() {
        return Err(Error::Triangulation("no triangles inside the contour".into()));
    }

    let (w, h) = (mask.width() as f64, mask.height() as f64);
    let min_x = polygon.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let max_x = polygon.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = polygon.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let max_y = polygon.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let scale = 1.0 / (max_x - min_x).max(max_y - min_y);
    let vertices: Vec<Vector3<f64>> = pixels
        .iter()
        .map(|p| Vector3::new((p[0] - min_x) * scale, (max_y - p[1]) * scale, 0.0))
        .collect();
    for f in &mut faces {
        let [a, b, c] = *f;
        let (pa, pb, pc) = (vertices[a], vertices[b], vertices[c]);
        if (pb.x - pa.x) * (pc.y - pa.y) - (pc.x - pa.x) * (pb.y - pa.y) < 0.0 {
            f.swap(1, 2);
        }
    }
    let (uvs, texture) = match image {
        Some(img) => (
            faces
                .iter()
                .flat_map(|f| f.iter().map(|&v| [pixels[v][0] / w, 1.0 - pixels[v][1] / h]))
                .collect(),
            Some(img.clone()),
        ),
        None => (Vec::new(), None),
    };
    let mesh = TexturedMesh::new(vertices, faces, uvs, texture)?;
    Ok(MaskMesh {
        mesh,
        contour,
        spacing,
    })
}

/// Splits every polygon edge into pieces no longer than `spacing`.
fn resample(polygon: &[[f64; 2]], spacing: f64) -> Vec<[f64; 2]> {
    let n = polygon.len();
    let mut out = Vec::new();
    for i in 0..n {
        let (a, b) = (polygon[i], polygon[(i + 1) % n]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let k = (len / spacing).ceil().max(1.0) as usize;
        for j in 0..k {
            let t = j as f64 / k as f64;
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

/// Bridson Poisson-disk sampling with radius `r` inside the polygon, at
/// least `0.6 r` away from its outline.
fn poisson_disk(polygon: &[[f64; 2]], r: f64, seed: u64) -> Vec<[f64; 2]> {
    const ATTEMPTS: usize = 30;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_x = polygon.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let max_x = polygon.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = polygon.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let max_y = polygon.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let cell = r / std::f64::consts::SQRT_2;
    let gw = ((max_x - min_x) / cell).ceil() as usize + 1;
    let gh = ((max_y - min_y) / cell).ceil() as usize + 1;
    let mut grid: Vec<Option<usize>> = vec![None; gw * gh];
    let mut samples: Vec<[f64; 2]> = Vec::new();
    let grid_pos = |p: [f64; 2]| (((p[0] - min_x) / cell) as usize, ((p[1] - min_y) / cell) as usize);

    let acceptable = |p: [f64; 2], samples: &[[f64; 2]], grid: &[Option<usize>]| -> bool {
        if p[0] < min_x || p[0] > max_x || p[1] < min_y || p[1] > max_y {
            return false;
        }
        if !point_in_polygon(polygon, p) || distance_to_polygon(polygon, p) < 0.6 * r {
            return false;
        }
        let (gx, gy) = grid_pos(p);
        for y in gy.saturating_sub(2)..(gy + 3).min(gh) {
            for x in gx.saturating_sub(2)..(gx + 3).min(gw) {
                if let Some(s) = grid[y * gw + x] {
                    let q = samples[s];
                    if (q[0] - p[0]).hypot(q[1] - p[1]) < r {
                        return false;
                    }
                }
            }
        }
        true
    };

    let mut misses = 0;
    while misses < 200 {
        // seed a new front somewhere not yet covered
        let seed_point = [rng.random_range(min_x..=max_x), rng.random_range(min_y..=max_y)];
        if !acceptable(seed_point, &samples, &grid) {
            misses += 1;
            continue;
        }
        misses = 0;
        let mut active = vec![samples.len()];
        let (gx, gy) = grid_pos(seed_point);
        grid[gy * gw + gx] = Some(samples.len());
        samples.push(seed_point);
        while !active.is_empty() {
            let slot = rng.random_range(0..active.len());
            let base = samples[active[slot]];
            let mut placed = false;
            for _ in 0..ATTEMPTS {
                let radius = rng.random_range(r..2.0 * r);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let p = [base[0] + radius * angle.cos(), base[1] + radius * angle.sin()];
                if acceptable(p, &samples, &grid) {
                    let (gx, gy) = grid_pos(p);
                    grid[gy * gw + gx] = Some(samples.len());
                    active.push(samples.len());
                    samples.push(p);
                    placed = true;
                    break;
                }
            }
            if !placed {
                active.swap_remove(slot);
            }
        }
    }
    samples
}
