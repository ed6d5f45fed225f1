use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mask::BinaryMask;
use super::triangulate::{mesh_from_mask, MeshFromMaskOptions};
use super::{assign_handles, giqa_knn, HandleOptions, DEFAULT_GIQA_K};
use crate::arap::{arap_deform, arap_energy, ArapConstraints};
use crate::deform::{deform, handle_loss, render_views, write_trace_csv, DeformConfig, TraceRecord, Variant};
use crate::error::{Error, Result};
use crate::guidance::{request_giqa_features, ENDPOINT_ENV_VAR};
use crate::mesh::{load_mesh, save_mesh, TexturedMesh};
use crate::poisson::DeformationSpec;
use crate::texture::RgbImage;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_path: Option<PathBuf>,
    #[serde(default)]
    pub category: String,
}

impl ManifestEntry {
    /// Output directory name: the explicit name, else the index and the stem
    /// of the input file.
    pub fn instance_name(&self, index: usize) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let stem = self
            .mesh_path
            .as_ref()
            .or(self.mask_path.as_ref())
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "instance".into());
        format!("{index:04}_{stem}")
    }
}

/// Benchmark instances. Relative paths resolve against `base_dir`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub instances: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestFile {
    List(Vec<ManifestEntry>),
    Wrapped { instances: Vec<ManifestEntry> },
}

impl Manifest {
    pub fn new(instances: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            instances,
            base_dir: base_dir.into(),
        }
    }

    /// Reads either a bare JSON list of entries or `{"instances": [...]}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ManifestFile = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let instances = match file {
            ManifestFile::List(v) => v,
            ManifestFile::Wrapped { instances } => instances,
        };
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self::new(instances, base_dir))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.instances).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// The ARAP baseline or one of the pipeline variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentVariant {
    Ours,
    Arap,
    LhOnly,
    NoLora,
    SecondOnly,
    ArapInit,
    PoissonInit,
}

impl ExperimentVariant {
    pub const ALL: [ExperimentVariant; 7] = [
        ExperimentVariant::Ours,
        ExperimentVariant::Arap,
        ExperimentVariant::LhOnly,
        ExperimentVariant::NoLora,
        ExperimentVariant::SecondOnly,
        ExperimentVariant::ArapInit,
        ExperimentVariant::PoissonInit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentVariant::Arap => "arap",
            other => other.pipeline_variant().unwrap().name(),
        }
    }

    pub fn pipeline_variant(self) -> Option<Variant> {
        match self {
            ExperimentVariant::Ours => Some(Variant::Ours),
            ExperimentVariant::Arap => None,
            ExperimentVariant::LhOnly => Some(Variant::LhOnly),
            ExperimentVariant::NoLora => Some(Variant::NoLora),
            ExperimentVariant::SecondOnly => Some(Variant::SecondOnly),
            ExperimentVariant::ArapInit => Some(Variant::ArapInit),
            ExperimentVariant::PoissonInit => Some(Variant::PoissonInit),
        }
    }
}

impl fmt::Display for ExperimentVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentOptions {
    pub output_dir: PathBuf,
    pub variant: ExperimentVariant,
    pub config: DeformConfig,
    pub mask: MeshFromMaskOptions,
    pub handles: HandleOptions,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
    /// JSON list of reference feature vectors for the kNN quality score.
    pub reference_features: Option<PathBuf>,
    pub giqa_k: usize,
    /// Skip instances whose previous run completed.
    pub resume: bool,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("results"),
            variant: ExperimentVariant::Ours,
            config: DeformConfig::planar(),
            mask: MeshFromMaskOptions::default(),
            handles: HandleOptions::default(),
            workers: 0,
            reference_features: None,
            giqa_k: DEFAULT_GIQA_K,
            resume: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceStatus {
    Ok,
    Failed,
}

/// Contents of an instance's `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub name: String,
    pub category: String,
    pub variant: ExperimentVariant,
    pub status: InstanceStatus,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub error_category: Option<String>,
    #[serde(default)]
    pub vertex_count: usize,
    #[serde(default)]
    pub face_count: usize,
    #[serde(default)]
    pub handle_count: usize,
    #[serde(default)]
    pub iterations: usize,
    #[serde(default)]
    pub final_handle_loss: Option<f64>,
    #[serde(default)]
    pub max_handle_error: Option<f64>,
    /// Largest handle error over the largest handle displacement.
    #[serde(default)]
    pub relative_handle_error: Option<f64>,
    #[serde(default)]
    pub flipped_faces: Option<usize>,
    #[serde(default)]
    pub arap_energy: Option<f64>,
    #[serde(default)]
    pub giqa_score: Option<f64>,
    #[serde(default)]
    pub nonfinite_guidance: usize,
    #[serde(default)]
    pub adapter_id: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub elapsed_secs: f64,
    #[serde(default)]
    pub config: Option<DeformConfig>,
}

impl InstanceMeta {
    fn failed(name: String, entry: &ManifestEntry, variant: ExperimentVariant, err: &Error) -> Self {
        Self {
            name,
            category: entry.category.clone(),
            variant,
            status: InstanceStatus::Failed,
            error: Some(err.to_string()),
            error_category: Some(format!("{:?}", err.category()).to_lowercase()),
            vertex_count: 0,
            face_count: 0,
            handle_count: 0,
            iterations: 0,
            final_handle_loss: None,
            max_handle_error: None,
            relative_handle_error: None,
            flipped_faces: None,
            arap_energy: None,
            giqa_score: None,
            nonfinite_guidance: 0,
            adapter_id: None,
            seed: 0,
            elapsed_secs: 0.0,
            config: None,
        }
    }
}

/// One line of `scores.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub name: String,
    pub category: String,
    pub variant: String,
    pub status: String,
    pub max_handle_error: Option<f64>,
    pub relative_handle_error: Option<f64>,
    pub flipped_faces: Option<usize>,
    pub arap_energy: Option<f64>,
    pub giqa_score: Option<f64>,
}

impl From<&InstanceMeta> for ScoreRow {
    fn from(m: &InstanceMeta) -> Self {
        Self {
            name: m.name.clone(),
            category: m.category.clone(),
            variant: m.variant.name().into(),
            status: match m.status {
                InstanceStatus::Ok => "ok".into(),
                InstanceStatus::Failed => "failed".into(),
            },
            max_handle_error: m.max_handle_error,
            relative_handle_error: m.relative_handle_error,
            flipped_faces: m.flipped_faces,
            arap_energy: m.arap_energy,
            giqa_score: m.giqa_score,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResultsBundle {
    pub output_dir: PathBuf,
    pub scores_path: PathBuf,
    /// In manifest order.
    pub instances: Vec<InstanceMeta>,
}

impl ResultsBundle {
    pub fn succeeded(&self) -> usize {
        self.instances.iter().filter(|m| m.status == InstanceStatus::Ok).count()
    }

    pub fn failed(&self) -> usize {
        self.instances.len() - self.succeeded()
    }

    pub fn instance_dir(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

pub const MESH_FILE: &str = "mesh.obj";
pub const RENDER_FILE: &str = "render.png";
pub const TRACE_FILE: &str = "trace.csv";
pub const META_FILE: &str = "meta.json";
pub const SCORES_FILE: &str = "scores.csv";

/// Runs `options.variant` on every manifest instance. Each instance writes
/// `mesh.obj`, `render.png`, `trace.csv` and `meta.json` under its own
/// directory; failures are recorded in the instance's `meta.json` and do not
/// stop the batch. A `scores.csv` with one row per instance is written last.
pub fn run_experiment(manifest: &Manifest, options: &ExperimentOptions) -> Result<ResultsBundle> {
    options.config.validate()?;
    let out = &options.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let reference = match &options.reference_features {
        Some(p) => {
            let p = manifest.resolve(p);
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let feats: Vec<Vec<f64>> =
                serde_json::from_str(&text).map_err(|source| Error::Json { path: p.clone(), source })?;
            Some(feats)
        }
        None => None,
    };

    let mut names: Vec<String> = manifest
        .instances
        .iter()
        .enumerate()
        .map(|(i, e)| e.instance_name(i))
        .collect();
    for i in 0..names.len() {
        if names[..i].contains(&names[i]) {
            names[i] = format!("{}_{i}", names[i]);
        }
    }

    let run_all = || -> Vec<InstanceMeta> {
        manifest
            .instances
            .par_iter()
            .zip(names.par_iter())
            .map(|(entry, name)| run_one(manifest, entry, name, options, reference.as_deref()))
            .collect()
    };
    let instances = if options.workers == 0 {
        run_all()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(run_all)
    };

    let scores_path = out.join(SCORES_FILE);
    let mut writer = csv::Writer::from_path(&scores_path)
        .map_err(|e| Error::io(&scores_path, std::io::Error::other(e)))?;
    if instances.is_empty() {
        writer
            .write_record([
                "name",
                "category",
                "variant",
                "status",
                "max_handle_error",
                "relative_handle_error",
                "flipped_faces",
                "arap_energy",
                "giqa_score",
            ])
            .map_err(|e| Error::io(&scores_path, std::io::Error::other(e)))?;
    }
    for m in &instances {
        writer
            .serialize(ScoreRow::from(m))
            .map_err(|e| Error::io(&scores_path, std::io::Error::other(e)))?;
    }
    writer.flush().map_err(|e| Error::io(&scores_path, e))?;

    Ok(ResultsBundle {
        output_dir: out.clone(),
        scores_path,
        instances,
    })
}

fn run_one(
    manifest: &Manifest,
    entry: &ManifestEntry,
    name: &str,
    options: &ExperimentOptions,
    reference: Option<&[Vec<f64>]>,
) -> InstanceMeta {
    let dir = options.output_dir.join(name);
    let meta_path = dir.join(META_FILE);
    if options.resume {
        if let Ok(text) = std::fs::read_to_string(&meta_path) {
            if let Ok(prev) = serde_json::from_str::<InstanceMeta>(&text) {
                if prev.status == InstanceStatus::Ok && prev.variant == options.variant {
                    log::info!("{name}: already complete, skipping");
                    return prev;
                }
            }
        }
    }
    let meta = std::fs::create_dir_all(&dir)
        .map_err(|e| Error::io(&dir, e))
        .and_then(|_| run_instance(manifest, entry, name, &dir, options, reference))
        .unwrap_or_else(|e| {
            log::warn!("{name}: {e}");
            InstanceMeta::failed(name.to_string(), entry, options.variant, &e)
        });
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    if let Err(e) = std::fs::write(&meta_path, text) {
        log::warn!("{name}: could not write {}: {e}", meta_path.display());
    }
    meta
}

/// Loads or builds the instance mesh and its spec.
pub(crate) fn load_instance(
    manifest: &Manifest,
    entry: &ManifestEntry,
    options: &ExperimentOptions,
) -> Result<(TexturedMesh, DeformationSpec)> {
    let mesh = match (&entry.mesh_path, &entry.mask_path) {
        (Some(p), _) => {
            // planar meshes go to the unit square the planar camera frames,
            // surfaces are centered for the orbit cameras
            let m = load_mesh(manifest.resolve(p))?;
            m.normalized(!m.is_planar(), true)?
        }
        (None, Some(mask_path)) => {
            let mask = BinaryMask::load_png(manifest.resolve(mask_path))?;
            let image = match &entry.image_path {
                Some(p) => Some(RgbImage::load_png(manifest.resolve(p))?),
                None => None,
            };
            mesh_from_mask(&mask, image.as_ref(), &options.mask)?.mesh
        }
        (None, None) => {
            return Err(Error::InvalidConfig(
                "manifest entry needs mesh_path or mask_path".into(),
            ))
        }
    };
    let spec = match &entry.spec_path {
        Some(p) => DeformationSpec::load(manifest.resolve(p))?,
        None => assign_handles(&mesh, &options.handles)?,
    };
    spec.validate(mesh.vertex_count())?;
    Ok((mesh, spec))
}

fn run_instance(
    manifest: &Manifest,
    entry: &ManifestEntry,
    name: &str,
    dir: &Path,
    options: &ExperimentOptions,
    reference: Option<&[Vec<f64>]>,
) -> Result<InstanceMeta> {
    let start = Instant::now();
    let (mesh, spec) = load_instance(manifest, entry, options)?;
    let rest = mesh.vertices();
    let mut config = options.config.clone();

    let (result_mesh, trace, nonfinite, adapter_id): (TexturedMesh, Vec<TraceRecord>, usize, Option<String>) =
        match options.variant.pipeline_variant() {
            None => {
                let (idx, targets) = spec.hard_constraints(rest);
                let sol = arap_deform(&mesh, &ArapConstraints::new(idx, targets))?;
                (mesh.with_vertices(sol.vertices)?, Vec::new(), 0, None)
            }
            Some(v) => {
                config.variant = v;
                let r = deform(&mesh, &spec, &config, None)?;
                let adapter = r.finetune.as_ref().map(|f| f.adapter_id.clone());
                (r.mesh, r.loss_trace, r.nonfinite_guidance, adapter)
            }
        };

    save_mesh(&result_mesh, dir.join(MESH_FILE))?;
    let cameras = config.cameras(&mesh);
    let render = render_views(&result_mesh, &cameras[..1], &config.render)?.remove(0);
    render.save_png(dir.join(RENDER_FILE))?;
    write_trace_csv(dir.join(TRACE_FILE), &trace)?;

    let (final_loss, _) = handle_loss(result_mesh.vertices(), &spec, rest)?;
    let max_err = spec
        .handles
        .iter()
        .zip(spec.handle_targets(rest))
        .map(|(h, t)| (result_mesh.vertices()[h.index] - t).norm())
        .fold(0.0, f64::max);
    let max_disp = spec
        .handles
        .iter()
        .map(|h| nalgebra::Vector3::from(h.displacement).norm())
        .fold(0.0, f64::max);

    let giqa_score = match reference {
        Some(reference) => {
            let endpoint = config
                .endpoint
                .clone()
                .or_else(|| std::env::var(ENDPOINT_ENV_VAR).ok())
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("quality score needs an endpoint (config or {ENDPOINT_ENV_VAR})"))
                })?;
            let feats = request_giqa_features(&endpoint, &render)?;
            Some(giqa_knn(&[feats], reference, options.giqa_k)?[0])
        }
        None => None,
    };

    Ok(InstanceMeta {
        name: name.to_string(),
        category: entry.category.clone(),
        variant: options.variant,
        status: InstanceStatus::Ok,
        error: None,
        error_category: None,
        vertex_count: mesh.vertex_count(),
        face_count: mesh.face_count(),
        handle_count: spec.handles.len(),
        iterations: trace.len(),
        final_handle_loss: Some(final_loss),
        max_handle_error: Some(max_err),
        relative_handle_error: (max_disp > 0.0).then(|| max_err / max_disp),
        flipped_faces: Some(flipped_faces(&mesh, result_mesh.vertices())),
        arap_energy: Some(arap_energy(&mesh, result_mesh.vertices())?),
        giqa_score,
        nonfinite_guidance: nonfinite,
        adapter_id,
        seed: config.seed,
        elapsed_secs: start.elapsed().as_secs_f64(),
        config: Some(config),
    })
}

/// Faces whose orientation reversed: the xy signed area changed sign for
/// planar meshes, the normal turned more than 90° otherwise.
pub fn flipped_faces(rest: &TexturedMesh, deformed: &[nalgebra::Vector3<f64>]) -> usize {
    rest.faces()
        .iter()
        .enumerate()
        .filter(|(f, face)| {
            let [a, b, c] = rest.face_points(*f);
            let (p, q, r) = (deformed[face[0]], deformed[face[1]], deformed[face[2]]);
            if rest.is_planar() {
                let before = (b - a).xy().perp(&(c - a).xy());
                let after = (q - p).xy().perp(&(r - p).xy());
                before * after <= 0.0
            } else {
                (b - a).cross(&(c - a)).dot(&(q - p).cross(&(r - p))) <= 0.0
            }
        })
        .count()
}
