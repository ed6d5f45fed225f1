use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{JacobianField, TexturedMesh};

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest edge-path distances from the nearest source, with Euclidean edge
/// lengths. Unreachable vertices get `+∞`.
pub fn geodesic_distances(mesh: &TexturedMesh, sources: &[usize]) -> Result<Vec<f64>> {
    let n = mesh.vertex_count();
    if sources.is_empty() {
        return Err(Error::InvalidConfig("geodesic distances need at least one source".into()));
    }
    let adj = mesh.vertex_neighbors();
    let v = mesh.vertices();
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    for &s in sources {
        if s >= n {
            return Err(Error::IndexOutOfRange {
                what: "vertices (geodesic source)",
                index: s,
                len: n,
            });
        }
        dist[s] = 0.0;
        heap.push(Entry(0.0, s));
    }
    while let Some(Entry(d, i)) = heap.pop() {
        if d > dist[i] {
            continue;
        }
        for &j in &adj[i] {
            let nd = d + (v[i] - v[j]).norm();
            if nd < dist[j] {
                dist[j] = nd;
                heap.push(Entry(nd, j));
            }
        }
    }
    Ok(dist)
}

/// A linear transform attached to a handle vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandleTransform {
    pub vertex: usize,
    pub matrix: Matrix3<f64>,
}

/// Premultiplies each face's Jacobian by `(1 − w) I + w T` for every handle
/// transform `T`, with `w = exp(−(d / r)²)` and `d` the smallest geodesic
/// distance from the face's corners to the handle. Handles are applied in
/// ascending vertex order.
pub fn propagate_handle_transforms(
    jac: &JacobianField,
    mesh: &TexturedMesh,
    transforms: &[HandleTransform],
    falloff_radius: f64,
) -> Result<JacobianField> {
    if !(falloff_radius > 0.0 && falloff_radius.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "falloff radius must be positive, got {falloff_radius}"
        )));
    }
    if jac.len() != mesh.face_count() {
        return Err(Error::mismatch("Jacobian field faces", mesh.face_count(), jac.len()));
    }
    let mut ordered: Vec<&HandleTransform> = transforms.iter().collect();
    ordered.sort_by_key(|t| t.vertex);
    for t in &ordered {
        let det = t.matrix.determinant();
        if !(det >= 1e-8) {
            return Err(Error::SingularTransform { handle: t.vertex, det });
        }
    }
    let mut per_face = jac.per_face().to_vec();
    for t in ordered {
        let dist = geodesic_distances(mesh, &[t.vertex])?;
        for (f, face) in mesh.faces().iter().enumerate() {
            let d = face.iter().map(|&v| dist[v]).fold(f64::INFINITY, f64::min);
            let w = (-(d / falloff_radius).powi(2)).exp();
            if w == 0.0 {
                continue;
            }
            let blend = Matrix3::identity() * (1.0 - w) + t.matrix * w;
            per_face[f] = blend * per_face[f];
        }
    }
    JacobianField::new(per_face)
}
