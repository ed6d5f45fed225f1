//! Planar benchmark tooling: meshes from foreground masks, automatic handle
//! placement, batch experiments and the kNN image-quality score.

mod mask;
mod runner;
mod triangulate;

use std::collections::{BTreeSet, HashMap};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TexturedMesh;
use crate::poisson::{Anchor, DeformationSpec, Handle};

pub use mask::{find_self_intersection, point_in_polygon, simplify_polygon, BinaryMask};
pub use runner::{
    run_experiment, ExperimentOptions, ExperimentVariant, InstanceMeta, InstanceStatus, Manifest, ManifestEntry,
    ResultsBundle, ScoreRow, MESH_FILE, META_FILE, RENDER_FILE, SCORES_FILE, TRACE_FILE,
};
pub use triangulate::{mesh_from_mask, MaskMesh, MeshFromMaskOptions};

pub const DEFAULT_REGION_RADIUS: f64 = 0.01;
pub const DEFAULT_GIQA_K: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HandleOptions {
    /// Number of handle regions; all of them share one anchor region.
    pub n_pairs: usize,
    /// Displacement length in normalized mesh units.
    pub magnitude: f64,
    /// Fixed displacement direction (xy). Handles move along the outward
    /// boundary normal when unset.
    pub direction: Option<[f64; 2]>,
    pub region_radius: f64,
}

impl Default for HandleOptions {
    fn default() -> Self {
        Self {
            n_pairs: 2,
            magnitude: 0.1,
            direction: None,
            region_radius: DEFAULT_REGION_RADIUS,
        }
    }
}

/// Places handles on the outer boundary of a planar mesh, spread evenly by
/// arc length starting at the boundary vertex farthest from the area
/// centroid, and a single anchor at the vertex nearest the centroid. Both
/// are grown into regions of radius `region_radius`; every vertex of a
/// handle region gets the displacement of its seed.
pub fn assign_handles(mesh: &TexturedMesh, options: &HandleOptions) -> Result<DeformationSpec> {
    if options.n_pairs == 0 {
        return Err(Error::InvalidConfig("n_pairs must be at least 1".into()));
    }
    if !(options.magnitude.is_finite() && options.region_radius >= 0.0) {
        return Err(Error::InvalidConfig("handle magnitude and region radius must be finite".into()));
    }
    let loops = mesh.boundary_loops();
    let boundary = loops
        .first()
        .ok_or_else(|| Error::InvalidMesh("mesh has no boundary".into()))?;
    if boundary.len() < options.n_pairs + 2 {
        return Err(Error::InvalidMesh(format!(
            "boundary has {} vertices, too few for {} handles",
            boundary.len(),
            options.n_pairs
        )));
    }
    let v = mesh.vertices();
    let centroid = area_centroid(mesh);

    let start = (0..boundary.len())
        .max_by(|&a, &b| {
            let da = (v[boundary[a]] - centroid).norm();
            let db = (v[boundary[b]] - centroid).norm();
            da.total_cmp(&db).then(b.cmp(&a))
        })
        .unwrap();
    let ring: Vec<usize> = boundary[start..].iter().chain(&boundary[..start]).copied().collect();
    let n = ring.len();
    let mut arc = vec![0.0; n + 1];
    for i in 0..n {
        arc[i + 1] = arc[i] + (v[ring[(i + 1) % n]] - v[ring[i]]).norm();
    }
    let perimeter = arc[n];

    let mut seeds = Vec::with_capacity(options.n_pairs);
    for k in 0..options.n_pairs {
        let s = perimeter * k as f64 / options.n_pairs as f64;
        let mut i = arc.partition_point(|&a| a < s).min(n - 1);
        if i > 0 && s - arc[i - 1] < arc[i] - s {
            i -= 1;
        }
        while seeds.contains(&ring[i]) {
            i = (i + 1) % n;
        }
        seeds.push(ring[i]);
    }

    let anchor_seed = (0..v.len())
        .filter(|i| !seeds.contains(i))
        .min_by(|&a, &b| (v[a] - centroid).norm().total_cmp(&(v[b] - centroid).norm()))
        .ok_or_else(|| Error::InvalidMesh("no vertex left for the anchor".into()))?;

    let mut taken: BTreeSet<usize> = seeds.iter().copied().collect();
    taken.insert(anchor_seed);
    let position: HashMap<usize, usize> = ring.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let mut handles = Vec::new();
    for &seed in &seeds {
        let dir = match options.direction {
            Some(d) => {
                let d = Vector3::new(d[0], d[1], 0.0);
                if d.norm() == 0.0 {
                    return Err(Error::InvalidConfig("handle direction is zero".into()));
                }
                d.normalize()
            }
            None => {
                let i = position[&seed];
                let t = v[ring[(i + 1) % n]] - v[ring[(i + n - 1) % n]];
                let normal = Vector3::new(t.y, -t.x, 0.0);
                if normal.norm() == 0.0 {
                    Vector3::x()
                } else {
                    normal.normalize()
                }
            }
        };
        let d = dir * options.magnitude;
        let region = region_expand(mesh, &[seed], options.region_radius);
        for idx in region {
            if idx != seed && !taken.insert(idx) {
                continue;
            }
            handles.push(Handle {
                index: idx,
                displacement: [d.x, d.y, d.z],
            });
        }
    }
    let mut anchors = Vec::new();
    for idx in region_expand(mesh, &[anchor_seed], options.region_radius) {
        if idx != anchor_seed && !taken.insert(idx) {
            continue;
        }
        anchors.push(Anchor { index: idx, target: None });
    }
    handles.sort_by_key(|h| h.index);
    anchors.sort_by_key(|a| a.index);
    let spec = DeformationSpec::new(handles, anchors);
    spec.validate(mesh.vertex_count())?;
    Ok(spec)
}

fn area_centroid(mesh: &TexturedMesh) -> Vector3<f64> {
    let mut acc = Vector3::zeros();
    let mut total = 0.0;
    for f in 0..mesh.face_count() {
        let [a, b, c] = mesh.face_points(f);
        let w = mesh.face_area(f);
        acc += (a + b + c) * (w / 3.0);
        total += w;
    }
    acc / total
}

/// All vertices within Euclidean distance `radius` of any seed, sorted.
pub fn region_expand(mesh: &TexturedMesh, seeds: &[usize], radius: f64) -> Vec<usize> {
    let v = mesh.vertices();
    if seeds.is_empty() {
        return Vec::new();
    }
    if radius <= 0.0 || !radius.is_finite() {
        let mut out: Vec<usize> = seeds.iter().copied().filter(|&s| s < v.len()).collect();
        out.sort_unstable();
        out.dedup();
        if radius == 0.0 {
            // coincident vertices still count
            let mut all: BTreeSet<usize> = out.iter().copied().collect();
            for &s in &out {
                all.extend((0..v.len()).filter(|&i| v[i] == v[s]));
            }
            return all.into_iter().collect();
        }
        return out;
    }
    let key = |p: &Vector3<f64>| {
        (
            (p.x / radius).floor() as i64,
            (p.y / radius).floor() as i64,
            (p.z / radius).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in v.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let mut out = BTreeSet::new();
    for &s in seeds {
        let Some(c) = v.get(s) else { continue };
        let (kx, ky, kz) = key(c);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = grid.get(&(kx + dx, ky + dy, kz + dz)) {
                        out.extend(bucket.iter().copied().filter(|&i| (v[i] - c).norm() <= radius));
                    }
                }
            }
        }
    }
    out.into_iter().collect()
}

/// kNN image-quality score of each query feature against a reference set.
///
/// The kernel bandwidth `h` is the mean distance from each reference point
/// to its `k` nearest other reference points. A query scores the mean of
/// `exp(−d²/2h²)` over its `k` nearest references, so scores lie in `(0, 1]`
/// and higher is closer to the reference distribution.
pub fn giqa_knn(queries: &[Vec<f64>], reference: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
    let n = reference.len();
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    if k > n {
        return Err(Error::InvalidConfig(format!("k = {k} exceeds the {n} reference features")));
    }
    let dim = reference[0].len();
    for f in reference.iter().chain(queries) {
        if f.len() != dim {
            return Err(Error::mismatch("feature length", dim, f.len()));
        }
        if !f.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("feature vector".into()));
        }
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();

    let k_ref = k.min(n - 1);
    let mut h = 0.0;
    if k_ref > 0 {
        for i in 0..n {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist(&reference[i], &reference[j])).collect();
            d.sort_by(f64::total_cmp);
            h += d[..k_ref].iter().sum::<f64>() / k_ref as f64;
        }
        h /= n as f64;
    }
    if h <= 0.0 {
        h = 1.0;
    }
    Ok(queries
        .iter()
        .map(|q| {
            let mut d: Vec<f64> = reference.iter().map(|r| dist(q, r)).collect();
            d.sort_by(f64::total_cmp);
            d[..k].iter().map(|x| (-x * x / (2.0 * h * h)).exp()).sum::<f64>() / k as f64
        })
        .collect())
}
