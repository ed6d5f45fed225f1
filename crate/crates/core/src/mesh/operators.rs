use nalgebra::{Matrix3, Vector3};

use super::{JacobianField, TexturedMesh, MIN_FACE_AREA};
use crate::error::{Error, Result};
use crate::sparse::CscMatrix;

/// Discrete operators of a rest mesh.
///
/// * `grad`: `3F × V`, rows `3f..3f+3` hold the gradient of each vertex hat
///   function over face `f`.
/// * `laplacian`: `V × V` cotangent Laplacian, positive semi-definite
///   (`L = ∇ᵀ 𝒜 ∇`).
/// * `mass`: `3F` diagonal, each face area repeated three times.
#[derive(Debug, Clone)]
pub struct SparseOperatorSet {
    grad: CscMatrix,
    laplacian: CscMatrix,
    mass: Vec<f64>,
    face_gradients: Vec<[Vector3<f64>; 3]>,
}

impl SparseOperatorSet {
    pub fn grad(&self) -> &CscMatrix {
        &self.grad
    }

    pub fn laplacian(&self) -> &CscMatrix {
        &self.laplacian
    }

    /// Diagonal of the `3F × 3F` mass matrix.
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn mass_matrix(&self) -> CscMatrix {
        CscMatrix::diagonal(&self.mass)
    }

    pub fn vertex_count(&self) -> usize {
        self.laplacian.nrows()
    }

    pub fn face_count(&self) -> usize {
        self.mass.len() / 3
    }

    /// Hat-function gradients of the three corners of face `f`.
    pub fn face_gradients(&self, f: usize) -> &[Vector3<f64>; 3] {
        &self.face_gradients[f]
    }

    /// `∇ V` repacked per face (see [`JacobianField`] for the layout).
    pub fn apply_gradient(&self, vertices: &[Vector3<f64>]) -> Result<JacobianField> {
        if vertices.len() != self.vertex_count() {
            return Err(Error::mismatch("vertex count", self.vertex_count(), vertices.len()));
        }
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|c| self.grad.mul_vec(&vertices.iter().map(|v| v[c]).collect::<Vec<_>>()))
            .collect();
        JacobianField::new(
            (0..self.face_count())
                .map(|f| Matrix3::from_fn(|c, d| cols[c][3 * f + d]))
                .collect(),
        )
    }

    /// `∇ᵀ 𝒜 g` for a per-face-row vector `g` of length `3F`.
    pub fn divergence(&self, g: &[f64]) -> Vec<f64> {
        let weighted: Vec<f64> = g.iter().zip(&self.mass).map(|(a, m)| a * m).collect();
        self.grad.tr_mul_vec(&weighted)
    }
}

/// Assembles gradient, cotangent Laplacian and mass matrix.
pub fn build_operators(mesh: &TexturedMesh) -> Result<SparseOperatorSet> {
    let nv = mesh.vertex_count();
    let nf = mesh.face_count();
    let mut grad_triplets = Vec::with_capacity(9 * nf);
    let mut lap_triplets = Vec::with_capacity(9 * nf);
    let mut mass = Vec::with_capacity(3 * nf);
    let mut face_gradients = Vec::with_capacity(nf);

    for (f, &face) in mesh.faces().iter().enumerate() {
        let pts = mesh.face_points(f);
        let (grads, area) = hat_gradients(&pts).ok_or(Error::DegenerateFace {
            face: f,
            area: mesh.face_area(f),
        })?;
        for (corner, &v) in face.iter().enumerate() {
            for d in 0..3 {
                grad_triplets.push((3 * f + d, v, grads[corner][d]));
            }
        }
        mass.extend([area; 3]);
        face_gradients.push(grads);

        // corner k is opposite edge (i, j)
        for k in 0..3 {
            let (i, j) = ((k + 1) % 3, (k + 2) % 3);
            let a = pts[i] - pts[k];
            let b = pts[j] - pts[k];
            let half_cot = 0.5 * a.dot(&b) / a.cross(&b).norm();
            let (vi, vj) = (face[i], face[j]);
            lap_triplets.push((vi, vj, -half_cot));
            lap_triplets.push((vj, vi, -half_cot));
            lap_triplets.push((vi, vi, half_cot));
            lap_triplets.push((vj, vj, half_cot));
        }
    }

    Ok(SparseOperatorSet {
        grad: CscMatrix::from_triplets(3 * nf, nv, &grad_triplets),
        laplacian: CscMatrix::from_triplets(nv, nv, &lap_triplets),
        mass,
        face_gradients,
    })
}

/// Per-face Jacobians of the mesh's own embedding, `J_f = (∇_f V)ᵀ`.
pub fn jacobian_field(mesh: &TexturedMesh) -> Result<JacobianField> {
    let mut per_face = Vec::with_capacity(mesh.face_count());
    for f in 0..mesh.face_count() {
        let pts = mesh.face_points(f);
        let (grads, _) = hat_gradients(&pts).ok_or(Error::DegenerateFace {
            face: f,
            area: mesh.face_area(f),
        })?;
        let mut m = Matrix3::zeros();
        for k in 0..3 {
            m += pts[k] * grads[k].transpose();
        }
        per_face.push(m);
    }
    JacobianField::new(per_face)
}

/// Gradients of the three linear hat functions of a triangle, plus its area.
fn hat_gradients(p: &[Vector3<f64>; 3]) -> Option<([Vector3<f64>; 3], f64)> {
    let n = (p[1] - p[0]).cross(&(p[2] - p[0]));
    let double_area = n.norm();
    if !(0.5 * double_area > MIN_FACE_AREA) {
        return None;
    }
    let unit = n / double_area;
    let grads = [
        unit.cross(&(p[2] - p[1])) / double_area,
        unit.cross(&(p[0] - p[2])) / double_area,
        unit.cross(&(p[1] - p[0])) / double_area,
    ];
    Some((grads, 0.5 * double_area))
}
