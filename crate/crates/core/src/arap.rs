//! As-rigid-as-possible deformation with spokes-and-rims cells.
//!
//! Each vertex cell covers every edge of every face around the vertex, with
//! the face's cotangent weight `cot/2` on the edge. Planar meshes use 2D
//! rotations so a cell can never mirror the plane.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{build_operators, TexturedMesh};
use crate::sparse::{CscMatrix, SparseCholesky};

pub const DEFAULT_MAX_ITERATIONS: usize = 100;
pub const DEFAULT_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArapConstraints {
    pub indices: Vec<usize>,
    pub targets: Vec<Vector3<f64>>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Stop once the energy changes by less than this between iterations.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_max_iterations() -> usize {
    DEFAULT_MAX_ITERATIONS
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

impl ArapConstraints {
    pub fn new(indices: Vec<usize>, targets: Vec<Vector3<f64>>) -> Self {
        Self {
            indices,
            targets,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            tolerance: DEFAULT_TOLERANCE,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.indices.is_empty() {
            return Err(Error::InvalidSpec("ARAP needs at least one constrained vertex".into()));
        }
        if self.indices.len() != self.targets.len() {
            return Err(Error::mismatch("ARAP targets", self.indices.len(), self.targets.len()));
        }
        let mut seen = vec![false; n];
        for &i in &self.indices {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    what: "vertices (ARAP constraint)",
                    index: i,
                    len: n,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidSpec(format!("vertex {i} constrained twice")));
            }
        }
        if self.targets.iter().any(|t| !t.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidSpec("ARAP target is not finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ArapSolution {
    pub vertices: Vec<Vector3<f64>>,
    /// Energy of the initial guess followed by the energy after each
    /// local-global iteration.
    pub energy_history: Vec<f64>,
    pub iterations: usize,
}

impl ArapSolution {
    pub fn energy(&self) -> f64 {
        *self.energy_history.last().expect("history holds the initial energy")
    }
}

/// Per-face edge data: for corner `k`, the edge opposite it runs from corner
/// `k+1` to `k+2`.
struct Cells {
    weights: Vec<[f64; 3]>,
    rest_edges: Vec<[Vector3<f64>; 3]>,
    vertex_faces: Vec<Vec<usize>>,
    planar: bool,
}

impl Cells {
    fn new(mesh: &TexturedMesh) -> Self {
        let mut weights = Vec::with_capacity(mesh.face_count());
        let mut rest_edges = Vec::with_capacity(mesh.face_count());
        let mut vertex_faces = vec![Vec::new(); mesh.vertex_count()];
        for (f, face) in mesh.faces().iter().enumerate() {
            let p = mesh.face_points(f);
            let mut w = [0.0; 3];
            for k in 0..3 {
                let a = p[(k + 1) % 3] - p[k];
                let b = p[(k + 2) % 3] - p[k];
                w[k] = 0.5 * a.dot(&b) / a.cross(&b).norm();
            }
            weights.push(w);
            rest_edges.push(face_edges(&p));
            for &v in face {
                vertex_faces[v].push(f);
            }
        }
        Self {
            weights,
            rest_edges,
            vertex_faces,
            planar: mesh.is_planar(),
        }
    }

    fn deformed_edges(mesh: &TexturedMesh, v: &[Vector3<f64>]) -> Vec<[Vector3<f64>; 3]> {
        mesh.faces()
            .iter()
            .map(|&[a, b, c]| face_edges(&[v[a], v[b], v[c]]))
            .collect()
    }

    /// Optimal rotation of each cell.
    fn rotations(&self, edges: &[[Vector3<f64>; 3]]) -> Result<Vec<Matrix3<f64>>> {
        let face_cov: Vec<Matrix3<f64>> = (0..edges.len())
            .map(|f| {
                (0..3).fold(Matrix3::zeros(), |acc, k| {
                    acc + self.rest_edges[f][k] * edges[f][k].transpose() * self.weights[f][k]
                })
            })
            .collect();
        self.vertex_faces
            .par_iter()
            .enumerate()
            .map(|(i, faces)| {
                let s = faces.iter().fold(Matrix3::zeros(), |acc, &f| acc + face_cov[f]);
                fit_rotation(&s, self.planar).ok_or(Error::SvdFailure { cell: i })
            })
            .collect()
    }

    fn energy_with(&self, edges: &[[Vector3<f64>; 3]], rotations: &[Matrix3<f64>]) -> f64 {
        self.vertex_faces
            .iter()
            .zip(rotations)
            .map(|(faces, r)| {
                faces
                    .iter()
                    .map(|&f| {
                        (0..3)
                            .map(|k| self.weights[f][k] * (edges[f][k] - r * self.rest_edges[f][k]).norm_squared())
                            .sum::<f64>()
                    })
                    .sum::<f64>()
            })
            .sum()
    }
}

fn face_edges(p: &[Vector3<f64>; 3]) -> [Vector3<f64>; 3] {
    [p[2] - p[1], p[0] - p[2], p[1] - p[0]]
}

/// Rotation `R` maximizing `tr(R S)`, from the SVD of `S`; a reflection is
/// turned into a rotation by flipping the weakest singular direction.
fn fit_rotation(s: &Matrix3<f64>, planar: bool) -> Option<Matrix3<f64>> {
    if planar {
        let s2 = s.fixed_view::<2, 2>(0, 0).into_owned();
        let svd = s2.try_svd(true, true, 1e-15, 1000)?;
        let (mut u, v) = (svd.u?, svd.v_t?.transpose());
        let mut r = v * u.transpose();
        if r.determinant() < 0.0 {
            let k = if svd.singular_values[0] < svd.singular_values[1] { 0 } else { 1 };
            u.column_mut(k).neg_mut();
            r = v * u.transpose();
        }
        let mut out = Matrix3::identity();
        out.fixed_view_mut::<2, 2>(0, 0).copy_from(&r);
        return Some(out);
    }
    let svd = s.try_svd(true, true, 1e-15, 1000)?;
    let (mut u, v) = (svd.u?, svd.v_t?.transpose());
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        let k = svd.singular_values.imin();
        u.column_mut(k).neg_mut();
        r = v * u.transpose();
    }
    Some(r)
}

/// `Σ_cells min_R Σ w ‖e' − R ê‖²` of `deformed` against the rest mesh.
pub fn arap_energy(rest: &TexturedMesh, deformed: &[Vector3<f64>]) -> Result<f64> {
    if deformed.len() != rest.vertex_count() {
        return Err(Error::mismatch("vertex count", rest.vertex_count(), deformed.len()));
    }
    let mut cells = Cells::new(rest);
    cells.planar &= deformed.iter().all(|v| v.z == 0.0);
    let edges = Cells::deformed_edges(rest, deformed);
    let r = cells.rotations(&edges)?;
    Ok(cells.energy_with(&edges, &r))
}

/// Best rigid motion carrying the rest positions of the constrained vertices
/// onto their targets, applied to the whole mesh; constrained vertices are
/// then placed exactly.
fn procrustes_init(mesh: &TexturedMesh, c: &ArapConstraints) -> Vec<Vector3<f64>> {
    let rest = mesh.vertices();
    let n = c.indices.len() as f64;
    let p_mean = c.indices.iter().map(|&i| rest[i]).sum::<Vector3<f64>>() / n;
    let q_mean = c.targets.iter().sum::<Vector3<f64>>() / n;
    let h = c
        .indices
        .iter()
        .zip(&c.targets)
        .fold(Matrix3::zeros(), |acc, (&i, t)| acc + (rest[i] - p_mean) * (t - q_mean).transpose());
    let planar = mesh.is_planar() && c.targets.iter().all(|t| t.z == 0.0);
    let r = if c.indices.len() >= 2 {
        fit_rotation(&h, planar).unwrap_or_else(Matrix3::identity)
    } else {
        Matrix3::identity()
    };
    let mut v: Vec<Vector3<f64>> = rest.iter().map(|p| r * (p - p_mean) + q_mean).collect();
    for (&i, t) in c.indices.iter().zip(&c.targets) {
        v[i] = *t;
    }
    v
}

/// Local-global ARAP with the constrained vertices fixed at their targets.
pub fn arap_deform(mesh: &TexturedMesh, constraints: &ArapConstraints) -> Result<ArapSolution> {
    let n = mesh.vertex_count();
    constraints.validate(n)?;
    let mut is_fixed = vec![false; n];
    for &i in &constraints.indices {
        is_fixed[i] = true;
    }
    let labels = mesh.connected_components();
    let mut has_fixed = vec![false; labels.iter().max().map_or(0, |m| m + 1)];
    for &i in &constraints.indices {
        has_fixed[labels[i]] = true;
    }
    if let Some(component) = has_fixed.iter().position(|&h| !h) {
        let vertex = labels.iter().position(|&l| l == component).unwrap();
        return Err(Error::UnconstrainedComponent {
            component,
            vertex,
            size: labels.iter().filter(|&&l| l == component).count(),
        });
    }

    let mut cells = Cells::new(mesh);
    cells.planar &= constraints.targets.iter().all(|t| t.z == 0.0);
    let mut v = procrustes_init(mesh, constraints);
    let free: Vec<usize> = (0..n).filter(|&i| !is_fixed[i]).collect();

    let edges = Cells::deformed_edges(mesh, &v);
    let mut rotations = cells.rotations(&edges)?;
    let mut history = vec![cells.energy_with(&edges, &rotations)];
    if free.is_empty() {
        return Ok(ArapSolution {
            vertices: v,
            energy_history: history,
            iterations: 0,
        });
    }

    let ops = build_operators(mesh)?;
    let l = ops.laplacian();
    let fixed: Vec<usize> = constraints.indices.clone();
    let l_ff = l.submatrix(&free, &free);
    let l_fc: CscMatrix = l.submatrix(&free, &fixed);
    let chol = SparseCholesky::factor(&l_ff)?;
    let mut local_of = vec![usize::MAX; n];
    for (k, &i) in free.iter().enumerate() {
        local_of[i] = k;
    }

    let mut iterations = 0;
    for _ in 0..constraints.max_iterations {
        // global step: L V = (1/3) Σ_f Σ_e w (R_a + R_b + R_c) ê
        let mut rhs = vec![Vector3::<f64>::zeros(); n];
        for (f, face) in mesh.faces().iter().enumerate() {
            let s = face.iter().fold(Matrix3::zeros(), |acc, &i| acc + rotations[i]);
            for k in 0..3 {
                let (a, b) = (face[(k + 1) % 3], face[(k + 2) % 3]);
                let term = s * cells.rest_edges[f][k] * (cells.weights[f][k] / 3.0);
                // edge runs a → b: contributes to b positively, a negatively
                rhs[b] += term;
                rhs[a] -= term;
            }
        }
        let mut cols: [Vec<f64>; 3] = std::array::from_fn(|c| free.iter().map(|&i| rhs[i][c]).collect());
        for (c, col) in cols.iter_mut().enumerate() {
            let t: Vec<f64> = fixed.iter().map(|&i| v[i][c]).collect();
            let lt = l_fc.mul_vec(&t);
            for (x, y) in col.iter_mut().zip(&lt) {
                *x -= y;
            }
        }
        chol.solve_columns(&mut cols);
        for &i in &free {
            let k = local_of[i];
            v[i] = Vector3::new(cols[0][k], cols[1][k], if cells.planar { 0.0 } else { cols[2][k] });
        }
        iterations += 1;

        let edges = Cells::deformed_edges(mesh, &v);
        rotations = cells.rotations(&edges)?;
        let e = cells.energy_with(&edges, &rotations);
        let prev = *history.last().unwrap();
        history.push(e);
        if (prev - e).abs() < constraints.tolerance {
            break;
        }
    }
    Ok(ArapSolution {
        vertices: v,
        energy_history: history,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn equilateral() -> TexturedMesh {
        let h = 3f64.sqrt() / 2.0;
        TexturedMesh::new(
            vec![Vector3::zeros(), Vector3::x(), Vector3::new(0.5, h, 0.0)],
            vec![[0, 1, 2]],
            vec![],
            None,
        )
        .unwrap()
    }

    #[test]
    fn rest_and_rotated_rest_have_zero_energy() {
        let m = equilateral();
        assert_eq!(arap_energy(&m, m.vertices()).unwrap(), 0.0);
        let r = Rotation3::from_euler_angles(0.3, -0.7, 1.1);
        let rotated: Vec<_> = m.vertices().iter().map(|v| r * v + Vector3::new(1.0, 2.0, 3.0)).collect();
        assert!(arap_energy(&m, &rotated).unwrap() < 1e-10);
    }

    #[test]
    fn scaled_triangle_energy_closed_form() {
        let m = equilateral();
        let scaled: Vec<_> = m.vertices().iter().map(|v| v * 2.0).collect();
        // three cells, each sees three unit edges with weight cot(60°)/2
        let w = 0.5 / (std::f64::consts::PI / 3.0).tan();
        let expect = 3.0 * 3.0 * w * 1.0;
        assert!((arap_energy(&m, &scaled).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn constraining_everything_returns_targets() {
        let m = equilateral();
        let targets: Vec<_> = m.vertices().iter().map(|v| v * 1.5).collect();
        let sol = arap_deform(&m, &ArapConstraints::new(vec![0, 1, 2], targets.clone())).unwrap();
        assert_eq!(sol.vertices, targets);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn rejects_bad_constraints() {
        let m = equilateral();
        assert!(arap_deform(&m, &ArapConstraints::new(vec![], vec![])).is_err());
        assert!(arap_deform(&m, &ArapConstraints::new(vec![7], vec![Vector3::zeros()])).is_err());
    }
}
