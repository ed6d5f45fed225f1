//! Triangle meshes, Jacobian fields and the discrete operators built on them.

mod obj;
mod operators;

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::texture::RgbImage;

pub use obj::{load_mesh, save_mesh};
pub use operators::{build_operators, jacobian_field, SparseOperatorSet};

/// Faces with area at or below this are rejected.
pub const MIN_FACE_AREA: f64 = 1e-12;

/// A triangle mesh with optional per-corner texture coordinates and an RGB
/// texture. Planar (2D) meshes are stored with `z = 0` and go through the same
/// code paths as surfaces in space.
#[derive(Debug, Clone)]
pub struct TexturedMesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    uvs: Vec<[f64; 2]>,
    texture: Option<Arc<RgbImage>>,
    is_planar: bool,
}

impl TexturedMesh {
    /// Builds and validates a mesh. `uvs` holds one entry per face corner
    /// (`3 * faces.len()`) or is empty.
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        faces: Vec<[usize; 3]>,
        uvs: Vec<[f64; 2]>,
        texture: Option<RgbImage>,
    ) -> Result<Self> {
        Self::from_parts(vertices, faces, uvs, texture.map(Arc::new))
    }

    fn from_parts(
        vertices: Vec<Vector3<f64>>,
        faces: Vec<[usize; 3]>,
        uvs: Vec<[f64; 2]>,
        texture: Option<Arc<RgbImage>>,
    ) -> Result<Self> {
        if vertices.is_empty() || faces.is_empty() {
            return Err(Error::InvalidMesh("mesh has no vertices or no faces".into()));
        }
        if let Some(k) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh(format!("vertex {k} is not finite")));
        }
        for (f, face) in faces.iter().enumerate() {
            for &i in face {
                if i >= vertices.len() {
                    return Err(Error::InvalidMesh(format!(
                        "face {f} references vertex {i} but the mesh has {} vertices",
                        vertices.len()
                    )));
                }
            }
        }
        if !uvs.is_empty() && uvs.len() != 3 * faces.len() {
            return Err(Error::mismatch("per-corner uv count", 3 * faces.len(), uvs.len()));
        }
        if texture.is_some() && uvs.is_empty() {
            return Err(Error::InvalidMesh("texture present without uv coordinates".into()));
        }
        let is_planar = vertices.iter().all(|v| v.z == 0.0);
        let mesh = Self {
            vertices,
            faces,
            uvs,
            texture,
            is_planar,
        };
        for f in 0..mesh.faces.len() {
            let area = mesh.face_area(f);
            if !(area > MIN_FACE_AREA) {
                return Err(Error::DegenerateFace { face: f, area });
            }
        }
        Ok(mesh)
    }

    /// Same topology, uvs and texture with new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vector3<f64>>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::mismatch("vertex count", self.vertices.len(), vertices.len()));
        }
        Self::from_parts(vertices, self.faces.clone(), self.uvs.clone(), self.texture.clone())
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Per-corner uvs, `3 * face_count()` entries or none.
    pub fn uvs(&self) -> &[[f64; 2]] {
        &self.uvs
    }

    pub fn has_uvs(&self) -> bool {
        !self.uvs.is_empty()
    }

    pub fn corner_uv(&self, face: usize, corner: usize) -> [f64; 2] {
        self.uvs[3 * face + corner]
    }

    pub fn texture(&self) -> Option<&RgbImage> {
        self.texture.as_deref()
    }

    pub fn is_planar(&self) -> bool {
        self.is_planar
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn face_points(&self, f: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.face_points(f);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Signed area of the face's projection onto the xy plane
    /// (positive for counter-clockwise).
    pub fn signed_area_xy(&self, f: usize) -> f64 {
        signed_area_xy(&self.vertices, self.faces[f])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Fits the mesh into the unit cube. With `center`, the bounding box center
    /// is moved to the origin before scaling; without it the box minimum is.
    /// With `scale == false` only the translation is applied.
    pub fn normalized(&self, center: bool, scale: bool) -> Result<Self> {
        let (lo, hi) = self.bounding_box();
        let origin = if center { (lo + hi) * 0.5 } else { lo };
        let extent = (hi - lo).max();
        let s = if scale && extent > 0.0 { 1.0 / extent } else { 1.0 };
        let mut verts: Vec<_> = self.vertices.iter().map(|v| (v - origin) * s).collect();
        if self.is_planar {
            for v in &mut verts {
                v.z = 0.0;
            }
        }
        self.with_vertices(verts)
    }

    /// Unique undirected edges, each with the faces that contain it.
    pub fn edge_faces(&self) -> BTreeMap<(usize, usize), Vec<usize>> {
        let mut map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (f, &[a, b, c]) in self.faces.iter().enumerate() {
            for (i, j) in [(a, b), (b, c), (c, a)] {
                map.entry((i.min(j), i.max(j))).or_default().push(f);
            }
        }
        map
    }

    /// Directed boundary edges `(i, j)` in the orientation of their single face.
    pub fn boundary_edges(&self) -> Vec<(usize, usize)> {
        let counts = self.edge_faces();
        let mut out = Vec::new();
        for &[a, b, c] in &self.faces {
            for (i, j) in [(a, b), (b, c), (c, a)] {
                if counts[&(i.min(j), i.max(j))].len() == 1 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Boundary loops as ordered vertex cycles, longest first.
    pub fn boundary_loops(&self) -> Vec<Vec<usize>> {
        let edges = self.boundary_edges();
        let mut next: BTreeMap<usize, usize> = BTreeMap::new();
        for &(i, j) in &edges {
            next.insert(i, j);
        }
        let mut visited = vec![false; self.vertices.len()];
        let mut loops = Vec::new();
        for &(start, _) in &edges {
            if visited[start] {
                continue;
            }
            let mut cycle = Vec::new();
            let mut v = start;
            while !visited[v] {
                visited[v] = true;
                cycle.push(v);
                match next.get(&v) {
                    Some(&n) => v = n,
                    None => break,
                }
            }
            loops.push(cycle);
        }
        loops.sort_by_key(|l| std::cmp::Reverse(l.len()));
        loops
    }

    /// Vertex adjacency lists (sorted, unique).
    pub fn vertex_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for &(i, j) in self.edge_faces().keys() {
            adj[i].push(j);
            adj[j].push(i);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    /// Component label per vertex over the face graph; unreferenced vertices
    /// form singleton components. Labels are numbered by smallest vertex.
    pub fn connected_components(&self) -> Vec<usize> {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &[a, b, c] in &self.faces {
            for (i, j) in [(a, b), (b, c)] {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
        let mut label = vec![usize::MAX; n];
        let mut next = 0;
        let mut out = vec![0; n];
        for v in 0..n {
            let r = find(&mut parent, v);
            if label[r] == usize::MAX {
                label[r] = next;
                next += 1;
            }
            out[v] = label[r];
        }
        out
    }
}

pub(crate) fn signed_area_xy(vertices: &[Vector3<f64>], [a, b, c]: [usize; 3]) -> f64 {
    let (pa, pb, pc) = (vertices[a], vertices[b], vertices[c]);
    0.5 * ((pb.x - pa.x) * (pc.y - pa.y) - (pc.x - pa.x) * (pb.y - pa.y))
}

/// One 3×3 matrix per face. Entry `(c, d)` of a face's matrix is the
/// derivative of output coordinate `c` along rest-space direction `d`, i.e.
/// the transpose of the face's `∇_f V` block.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField {
    per_face: Vec<Matrix3<f64>>,
}

impl JacobianField {
    pub fn new(per_face: Vec<Matrix3<f64>>) -> Result<Self> {
        if let Some(f) = per_face.iter().position(|m| !m.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite(format!("Jacobian of face {f}")));
        }
        Ok(Self { per_face })
    }

    pub fn zeros(faces: usize) -> Self {
        Self {
            per_face: vec![Matrix3::zeros(); faces],
        }
    }

    pub fn len(&self) -> usize {
        self.per_face.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_face.is_empty()
    }

    pub fn per_face(&self) -> &[Matrix3<f64>] {
        &self.per_face
    }

    pub fn face(&self, f: usize) -> &Matrix3<f64> {
        &self.per_face[f]
    }

    /// Row-major flattening, 9 values per face.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(9 * self.per_face.len());
        for m in &self.per_face {
            for r in 0..3 {
                for c in 0..3 {
                    out.push(m[(r, c)]);
                }
            }
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(9) {
            return Err(Error::mismatch("flat Jacobian length", "multiple of 9", flat.len()));
        }
        Self::new(flat.chunks_exact(9).map(Matrix3::from_row_slice).collect())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            per_face: self.per_face.iter().map(|m| m * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.len(), other.len());
        Self {
            per_face: self
                .per_face
                .iter()
                .zip(&other.per_face)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.per_face
            .iter()
            .zip(&other.per_face)
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.per_face
            .iter()
            .zip(&other.per_face)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }
}
