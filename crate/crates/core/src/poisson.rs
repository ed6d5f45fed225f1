//! Anchored Poisson reconstruction of vertices from a Jacobian field.
//!
//! Vertices solve
//!
//! ```text
//! (Lᵀ L + λ K_aᵀ K_a) V = Lᵀ ∇ᵀ 𝒜 J + λ K_aᵀ T_a
//! ```
//!
//! i.e. the normal equations of `‖L V − ∇ᵀ𝒜J‖² + λ‖K_a V − T_a‖²`. The system
//! matrix depends only on the rest mesh and the anchor set, so it is factored
//! once and reused by every forward and adjoint solve.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{JacobianField, SparseOperatorSet, TexturedMesh};
use crate::sparse::{CscMatrix, SparseCholesky};

pub const DEFAULT_LAMBDA: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handle {
    pub index: usize,
    pub displacement: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub index: usize,
    /// Target position; the rest position when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<[f64; 3]>,
}

/// Handles with displacements and anchors with targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationSpec {
    pub handles: Vec<Handle>,
    pub anchors: Vec<Anchor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl DeformationSpec {
    pub fn new(handles: Vec<Handle>, anchors: Vec<Anchor>) -> Self {
        Self {
            handles,
            anchors,
            lambda: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("spec serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn handle_indices(&self) -> Vec<usize> {
        self.handles.iter().map(|h| h.index).collect()
    }

    pub fn anchor_indices(&self) -> Vec<usize> {
        self.anchors.iter().map(|a| a.index).collect()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(DEFAULT_LAMBDA)
    }

    /// Checks disjointness, non-emptiness and index ranges.
    pub fn validate(&self, vertex_count: usize) -> Result<()> {
        if self.handles.is_empty() || self.anchors.is_empty() {
            return Err(Error::InvalidSpec("handles and anchors must both be non-empty".into()));
        }
        let mut handle_set = BTreeSet::new();
        for h in &self.handles {
            if h.index >= vertex_count {
                return Err(Error::IndexOutOfRange {
                    what: "vertices (handle)",
                    index: h.index,
                    len: vertex_count,
                });
            }
            if !h.displacement.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidSpec(format!("handle {} displacement is not finite", h.index)));
            }
            if !handle_set.insert(h.index) {
                return Err(Error::InvalidSpec(format!("handle {} listed twice", h.index)));
            }
        }
        let mut anchor_set = BTreeSet::new();
        for a in &self.anchors {
            if a.index >= vertex_count {
                return Err(Error::IndexOutOfRange {
                    what: "vertices (anchor)",
                    index: a.index,
                    len: vertex_count,
                });
            }
            if handle_set.contains(&a.index) {
                return Err(Error::InvalidSpec(format!(
                    "vertex {} is both a handle and an anchor",
                    a.index
                )));
            }
            if !anchor_set.insert(a.index) {
                return Err(Error::InvalidSpec(format!("anchor {} listed twice", a.index)));
            }
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidSpec(format!("lambda must be positive, got {l}")));
            }
        }
        Ok(())
    }

    /// `T_h = V_h + D_h` in handle order.
    pub fn handle_targets(&self, rest: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self.handles
            .iter()
            .map(|h| rest[h.index] + Vector3::from(h.displacement))
            .collect()
    }

    /// `T_a`, defaulting to rest positions, in anchor order.
    pub fn anchor_targets(&self, rest: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self.anchors
            .iter()
            .map(|a| a.target.map(Vector3::from).unwrap_or(rest[a.index]))
            .collect()
    }

    /// Handles and anchors both pinned at their targets, for hard-constrained
    /// solvers.
    pub fn hard_constraints(&self, rest: &[Vector3<f64>]) -> (Vec<usize>, Vec<Vector3<f64>>) {
        let mut idx = self.handle_indices();
        idx.extend(self.anchor_indices());
        let mut targets = self.handle_targets(rest);
        targets.extend(self.anchor_targets(rest));
        (idx, targets)
    }
}

/// Cached factorization of `Lᵀ L + λ K_aᵀ K_a`.
#[derive(Debug, Clone)]
pub struct FactorizedSystem {
    cholesky: SparseCholesky,
    system: CscMatrix,
    lambda: f64,
    anchors: Vec<usize>,
}

impl FactorizedSystem {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    /// The assembled (unfactored) system matrix.
    pub fn matrix(&self) -> &CscMatrix {
        &self.system
    }

    pub fn vertex_count(&self) -> usize {
        self.system.nrows()
    }
}

/// Every connected component must contain at least one constrained vertex,
/// otherwise the system is singular.
fn check_components(mesh_components: &[usize], constrained: &[usize]) -> Result<()> {
    let count = mesh_components.iter().copied().max().map_or(0, |m| m + 1);
    let mut has = vec![false; count];
    for &c in constrained {
        has[mesh_components[c]] = true;
    }
    if let Some(component) = has.iter().position(|&h| !h) {
        let vertex = mesh_components.iter().position(|&c| c == component).unwrap();
        let size = mesh_components.iter().filter(|&&c| c == component).count();
        return Err(Error::UnconstrainedComponent {
            component,
            vertex,
            size,
        });
    }
    Ok(())
}

/// Component labels from the Laplacian's sparsity graph.
fn laplacian_components(laplacian: &CscMatrix) -> Vec<usize> {
    let n = laplacian.nrows();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    let mut stack = Vec::new();
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        label[s] = next;
        stack.push(s);
        while let Some(v) = stack.pop() {
            for (u, w) in laplacian.column(v) {
                if w != 0.0 && label[u] == usize::MAX {
                    label[u] = next;
                    stack.push(u);
                }
            }
        }
        next += 1;
    }
    label
}

/// Factors the anchored system for the given anchor set.
pub fn build_system(ops: &SparseOperatorSet, anchors: &[usize], lambda: f64) -> Result<FactorizedSystem> {
    let n = ops.vertex_count();
    if anchors.is_empty() {
        return Err(Error::InvalidSpec("at least one anchor is required".into()));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidSpec(format!("lambda must be positive, got {lambda}")));
    }
    if let Some(&bad) = anchors.iter().find(|&&a| a >= n) {
        return Err(Error::IndexOutOfRange {
            what: "vertices (anchor)",
            index: bad,
            len: n,
        });
    }
    check_components(&laplacian_components(ops.laplacian()), anchors)?;

    let l = ops.laplacian();
    let ltl = l.transpose().mul(l);
    let anchor_diag: Vec<(usize, usize, f64)> = anchors.iter().map(|&a| (a, a, 1.0)).collect();
    let selector = CscMatrix::from_triplets(n, n, &anchor_diag);
    let system = ltl.add_scaled(1.0, &selector, lambda);
    let cholesky = SparseCholesky::factor(&system)?;
    Ok(FactorizedSystem {
        cholesky,
        system,
        lambda,
        anchors: anchors.to_vec(),
    })
}

/// Splits a Jacobian field into the three `3F`-long coordinate columns that
/// play the role of `J` in `∇ᵀ𝒜J`.
fn jacobian_columns(jac: &JacobianField) -> [Vec<f64>; 3] {
    std::array::from_fn(|c| {
        jac.per_face()
            .iter()
            .flat_map(|m| [m[(c, 0)], m[(c, 1)], m[(c, 2)]])
            .collect()
    })
}

fn check_jacobian(ops: &SparseOperatorSet, jac: &JacobianField) -> Result<()> {
    if jac.len() != ops.face_count() {
        return Err(Error::mismatch("Jacobian field faces", ops.face_count(), jac.len()));
    }
    Ok(())
}

/// `Lᵀ ∇ᵀ 𝒜 J`, one column per coordinate.
fn poisson_rhs(ops: &SparseOperatorSet, jac: &JacobianField) -> [Vec<f64>; 3] {
    let cols = jacobian_columns(jac);
    std::array::from_fn(|c| ops.laplacian().tr_mul_vec(&ops.divergence(&cols[c])))
}

fn columns_to_vertices(cols: &[Vec<f64>; 3]) -> Vec<Vector3<f64>> {
    (0..cols[0].len())
        .map(|i| Vector3::new(cols[0][i], cols[1][i], cols[2][i]))
        .collect()
}

/// Recovers vertices from a Jacobian field with anchors pulled toward
/// `anchor_targets` (one per anchor, in the system's anchor order).
pub fn solve(
    system: &FactorizedSystem,
    ops: &SparseOperatorSet,
    jac: &JacobianField,
    anchor_targets: &[Vector3<f64>],
) -> Result<Vec<Vector3<f64>>> {
    check_jacobian(ops, jac)?;
    if anchor_targets.len() != system.anchors.len() {
        return Err(Error::mismatch("anchor targets", system.anchors.len(), anchor_targets.len()));
    }
    let mut rhs = poisson_rhs(ops, jac);
    for (&a, t) in system.anchors.iter().zip(anchor_targets) {
        for c in 0..3 {
            rhs[c][a] += system.lambda * t[c];
        }
    }
    system.cholesky.solve_columns(&mut rhs);
    Ok(columns_to_vertices(&rhs))
}

/// Pulls a vertex-space gradient `∂ℓ/∂V*` back to the Jacobian field:
/// `∂ℓ/∂J = 𝒜 ∇ L M⁻¹ ∂ℓ/∂V*` with `M` the (symmetric) system matrix.
pub fn solve_adjoint(
    system: &FactorizedSystem,
    ops: &SparseOperatorSet,
    upstream: &[Vector3<f64>],
) -> Result<JacobianField> {
    if upstream.len() != system.vertex_count() {
        return Err(Error::mismatch("upstream gradient rows", system.vertex_count(), upstream.len()));
    }
    let mut cols: [Vec<f64>; 3] = std::array::from_fn(|c| upstream.iter().map(|g| g[c]).collect());
    system.cholesky.solve_columns(&mut cols);
    let per_coord: [Vec<f64>; 3] = std::array::from_fn(|c| {
        let lz = ops.laplacian().mul_vec(&cols[c]);
        let mut g = ops.grad().mul_vec(&lz);
        for (x, m) in g.iter_mut().zip(ops.mass()) {
            *x *= m;
        }
        g
    });
    JacobianField::new(
        (0..ops.face_count())
            .map(|f| nalgebra::Matrix3::from_fn(|c, d| per_coord[c][3 * f + d]))
            .collect(),
    )
}

/// Least-squares solution of `‖L V − ∇ᵀ𝒜J‖²` with the listed vertices fixed
/// exactly at their targets.
pub fn solve_hard_constrained(
    mesh: &TexturedMesh,
    ops: &SparseOperatorSet,
    jac: &JacobianField,
    constrained: &[usize],
    targets: &[Vector3<f64>],
) -> Result<Vec<Vector3<f64>>> {
    check_jacobian(ops, jac)?;
    let n = ops.vertex_count();
    if constrained.is_empty() {
        return Err(Error::InvalidSpec("at least one constrained vertex is required".into()));
    }
    if constrained.len() != targets.len() {
        return Err(Error::mismatch("constraint targets", constrained.len(), targets.len()));
    }
    let mut is_fixed = vec![false; n];
    for &c in constrained {
        if c >= n {
            return Err(Error::IndexOutOfRange {
                what: "vertices (constraint)",
                index: c,
                len: n,
            });
        }
        if is_fixed[c] {
            return Err(Error::InvalidSpec(format!("vertex {c} constrained twice")));
        }
        is_fixed[c] = true;
    }
    let mut out = vec![Vector3::zeros(); n];
    for (&c, t) in constrained.iter().zip(targets) {
        out[c] = *t;
    }
    let free: Vec<usize> = (0..n).filter(|&v| !is_fixed[v]).collect();
    if free.is_empty() {
        return Ok(out);
    }
    check_components(&mesh.connected_components(), constrained)?;

    let l = ops.laplacian();
    let ltl = l.transpose().mul(l);
    let q_ff = ltl.submatrix(&free, &free);
    let q_fc = ltl.submatrix(&free, constrained);
    let cholesky = SparseCholesky::factor(&q_ff)?;

    let full_rhs = poisson_rhs(ops, jac);
    let mut rhs: [Vec<f64>; 3] = std::array::from_fn(|c| {
        let t: Vec<f64> = targets.iter().map(|p| p[c]).collect();
        let coupling = q_fc.mul_vec(&t);
        free.iter()
            .zip(coupling)
            .map(|(&v, k)| full_rhs[c][v] - k)
            .collect()
    });
    cholesky.solve_columns(&mut rhs);
    for (k, &v) in free.iter().enumerate() {
        out[v] = Vector3::new(rhs[0][k], rhs[1][k], rhs[2][k]);
    }
    Ok(out)
}
