//! Two-stage Jacobian-field optimization: handle fitting, then handle fitting
//! with an image-space prior.

mod adam;
mod geodesic;

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arap::{arap_deform, ArapConstraints};
use crate::error::{Error, Result};
use crate::guidance::{
    AnalyticL2Prior, FinetuneParams, FinetuneReport, GuidanceContext, GuidanceError, GuidanceOutput,
    GuidanceProvider, GuidanceQuery, RemoteSdsProvider, ENDPOINT_ENV_VAR,
};
use crate::mesh::{build_operators, jacobian_field, JacobianField, SparseOperatorSet, TexturedMesh};
use crate::poisson::{build_system, solve, solve_adjoint, solve_hard_constrained, DeformationSpec, FactorizedSystem};
use crate::render::{canonical_cameras, rasterize_backward, rasterize_vertices, Camera, RenderSettings, ViewMode};
use crate::texture::RgbImage;

pub use adam::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use geodesic::{geodesic_distances, propagate_handle_transforms, HandleTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// No image term; the second stage only fits handles.
    None,
    /// `½‖I − I_rest‖²` against renders of the undeformed mesh.
    Analytic,
    /// Score-distillation gradients from a guidance server.
    Remote,
}

/// Pipeline variants used in ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Ours,
    /// Both stages fit handles only.
    LhOnly,
    /// Prior without adapter fine-tuning.
    NoLora,
    /// The first stage is skipped.
    SecondOnly,
    /// The first stage is replaced by an ARAP solve with handles and anchors
    /// as hard constraints.
    ArapInit,
    /// The first stage is replaced by a Poisson solve with handles and
    /// anchors as hard constraints.
    PoissonInit,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ours,
        Variant::LhOnly,
        Variant::NoLora,
        Variant::SecondOnly,
        Variant::ArapInit,
        Variant::PoissonInit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::LhOnly => "lh_only",
            Variant::NoLora => "no_lora",
            Variant::SecondOnly => "second_only",
            Variant::ArapInit => "arap_init",
            Variant::PoissonInit => "poisson_init",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformConfig {
    pub first_stage_iters: usize,
    pub second_stage_iters: usize,
    pub learning_rate: f64,
    /// Overrides the spec's anchor weight when set.
    pub lambda: Option<f64>,
    pub resolution: usize,
    /// Defaults to planar for flat meshes and four views otherwise.
    pub view_mode: Option<ViewMode>,
    pub seed: u64,
    pub prior_mode: PriorMode,
    pub variant: Variant,
    /// Scale of the image-space gradient relative to the handle loss.
    pub guidance_weight: f64,
    pub guidance: GuidanceContext,
    /// Defaults by view mode when unset.
    pub finetune: Option<FinetuneParams>,
    /// Guidance server; falls back to the environment variable.
    pub endpoint: Option<String>,
    pub render: RenderSettings,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self::planar()
    }
}

impl DeformConfig {
    /// `M = 300`, `N = 700`.
    pub fn planar() -> Self {
        Self {
            first_stage_iters: 300,
            second_stage_iters: 700,
            learning_rate: 1e-3,
            lambda: None,
            resolution: crate::render::DEFAULT_RESOLUTION,
            view_mode: None,
            seed: 0,
            prior_mode: PriorMode::None,
            variant: Variant::Ours,
            guidance_weight: 1.0,
            guidance: GuidanceContext::default(),
            finetune: None,
            endpoint: None,
            render: RenderSettings::default(),
        }
    }

    /// `M = 300`, `N = 1000`.
    pub fn volumetric() -> Self {
        Self {
            second_stage_iters: 1000,
            ..Self::planar()
        }
    }

    pub fn for_mesh(mesh: &TexturedMesh) -> Self {
        if mesh.is_planar() {
            Self::planar()
        } else {
            Self::volumetric()
        }
    }

    /// Overlays the keys of a JSON object onto `self`.
    pub fn merged_with(&self, overrides: &serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(self).expect("config serializes");
        merge_json(&mut base, overrides);
        serde_json::from_value(base).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads a JSON config file on top of `self`.
    pub fn merged_with_file(&self, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        self.merged_with(&value)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.resolution == 0 {
            return Err(Error::InvalidConfig("resolution must be positive".into()));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidConfig(format!("lambda must be positive, got {l}")));
            }
        }
        if !self.guidance_weight.is_finite() {
            return Err(Error::InvalidConfig("guidance weight must be finite".into()));
        }
        self.guidance.validate()?;
        Ok(())
    }

    pub fn resolved_view_mode(&self, mesh: &TexturedMesh) -> ViewMode {
        self.view_mode.unwrap_or(if mesh.is_planar() {
            ViewMode::Planar
        } else {
            ViewMode::FourView
        })
    }

    pub fn cameras(&self, mesh: &TexturedMesh) -> Vec<Camera> {
        canonical_cameras(self.resolved_view_mode(mesh), self.resolution)
    }

    /// Whether the second stage evaluates the image prior.
    pub fn uses_prior(&self) -> bool {
        self.prior_mode != PriorMode::None && self.variant != Variant::LhOnly
    }
}

fn merge_json(base: &mut serde_json::Value, overrides: &serde_json::Value) {
    match (base, overrides) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// One optimizer iteration. `handle_loss` is measured at the vertices the
/// step's gradient was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub handle_loss: f64,
    /// Norm of the image-space guidance gradient; zero without a prior.
    pub guidance_grad_norm: f64,
    pub stage: u8,
    pub guidance_loss: Option<f64>,
    pub view: Option<usize>,
    pub t: Option<f64>,
}

const TRACE_HEADER: [&str; 7] = [
    "iteration",
    "handle_loss",
    "guidance_grad_norm",
    "stage",
    "guidance_loss",
    "view",
    "t",
];

/// Writes one row per record under a fixed header (also for empty traces).
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TraceRecord]) -> Result<()> {
    let path = path.as_ref();
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::InvalidConfig(format!("{other:?}")),
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(io_err)?;
    w.write_record(TRACE_HEADER).map_err(io_err)?;
    for r in trace {
        w.serialize(r).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| {
            rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// `Σ‖v_h − t_h‖²` and its gradient with respect to every vertex.
pub fn handle_loss(
    vertices: &[Vector3<f64>],
    spec: &DeformationSpec,
    rest: &[Vector3<f64>],
) -> Result<(f64, Vec<Vector3<f64>>)> {
    if vertices.len() != rest.len() {
        return Err(Error::mismatch("vertex count", rest.len(), vertices.len()));
    }
    let mut grad = vec![Vector3::zeros(); vertices.len()];
    let mut loss = 0.0;
    for h in &spec.handles {
        if h.index >= vertices.len() {
            return Err(Error::IndexOutOfRange {
                what: "vertices (handle)",
                index: h.index,
                len: vertices.len(),
            });
        }
        let r = vertices[h.index] - (rest[h.index] + Vector3::from(h.displacement));
        loss += r.norm_squared();
        grad[h.index] += r * 2.0;
    }
    Ok((loss, grad))
}

/// Everything about a deformation task that stays fixed while the Jacobian
/// field is optimized.
pub struct DeformProblem<'a> {
    pub mesh: &'a TexturedMesh,
    pub spec: &'a DeformationSpec,
    pub ops: SparseOperatorSet,
    pub system: FactorizedSystem,
    pub anchor_targets: Vec<Vector3<f64>>,
}

impl<'a> DeformProblem<'a> {
    pub fn new(mesh: &'a TexturedMesh, spec: &'a DeformationSpec, lambda: Option<f64>) -> Result<Self> {
        spec.validate(mesh.vertex_count())?;
        let ops = build_operators(mesh)?;
        let system = build_system(&ops, &spec.anchor_indices(), lambda.unwrap_or(spec.lambda()))?;
        Ok(Self {
            mesh,
            spec,
            ops,
            system,
            anchor_targets: spec.anchor_targets(mesh.vertices()),
        })
    }

    pub fn solve(&self, jac: &JacobianField) -> Result<Vec<Vector3<f64>>> {
        solve(&self.system, &self.ops, jac, &self.anchor_targets)
    }

    pub fn adjoint(&self, upstream: &[Vector3<f64>]) -> Result<JacobianField> {
        solve_adjoint(&self.system, &self.ops, upstream)
    }

    pub fn handle_loss(&self, vertices: &[Vector3<f64>]) -> Result<(f64, Vec<Vector3<f64>>)> {
        handle_loss(vertices, self.spec, self.mesh.vertices())
    }
}

/// `iters` steps of ADAM on the handle loss, starting from fresh optimizer
/// state. Records are appended to `trace`.
pub fn first_stage(
    problem: &DeformProblem,
    jac: &JacobianField,
    iters: usize,
    learning_rate: f64,
    trace: &mut Vec<TraceRecord>,
) -> Result<JacobianField> {
    let mut params = jac.to_flat();
    let mut adam = Adam::new(params.len());
    for _ in 0..iters {
        let j = JacobianField::from_flat(&params)?;
        let v = problem.solve(&j)?;
        let (loss, grad_v) = problem.handle_loss(&v)?;
        let grad_j = problem.adjoint(&grad_v)?;
        trace.push(TraceRecord {
            iteration: trace.len(),
            handle_loss: loss,
            guidance_grad_norm: 0.0,
            stage: 1,
            guidance_loss: None,
            view: None,
            t: None,
        });
        adam.step(&mut params, &grad_j.to_flat(), learning_rate)?;
    }
    JacobianField::from_flat(&params)
}

/// Gradient of one second-stage step split into its sources.
#[derive(Debug, Clone)]
pub struct GradientParts {
    pub handle: JacobianField,
    pub guidance: JacobianField,
    /// What the optimizer receives: the adjoint of the summed vertex gradient.
    pub total: JacobianField,
    pub handle_loss: f64,
    pub guidance_output: GuidanceOutput,
}

struct StepGradient {
    vertex_handle: Vec<Vector3<f64>>,
    vertex_guidance: Vec<Vector3<f64>>,
    handle_loss: f64,
    guidance: Option<GuidanceOutput>,
}

fn step_gradient(
    problem: &DeformProblem,
    vertices: &[Vector3<f64>],
    camera: Option<&Camera>,
    provider: Option<&mut dyn GuidanceProvider>,
    query: &GuidanceQuery,
    config: &DeformConfig,
) -> Result<StepGradient> {
    let (handle_loss, vertex_handle) = problem.handle_loss(vertices)?;
    let mut out = StepGradient {
        vertex_guidance: vec![Vector3::zeros(); vertices.len()],
        vertex_handle,
        handle_loss,
        guidance: None,
    };
    let (Some(camera), Some(provider)) = (camera, provider) else {
        return Ok(out);
    };
    let render = rasterize_vertices(problem.mesh, vertices, camera, &config.render)?;
    let mut g = provider.gradient(&render.image, query)?;
    if g.gradient.dims() != render.image.dims() {
        return Err(GuidanceError::MalformedResponse {
            msg: format!(
                "gradient dims: expected {}x{}, received {}x{}",
                render.width(),
                render.height(),
                g.gradient.width(),
                g.gradient.height()
            ),
        }
        .into());
    }
    if config.guidance_weight != 1.0 {
        g.gradient.data_mut().iter_mut().for_each(|x| *x *= config.guidance_weight);
    }
    out.vertex_guidance = rasterize_backward(&render, problem.mesh, vertices, camera, &g.gradient)?;
    out.guidance = Some(g);
    Ok(out)
}

/// Computes the second-stage gradient at `jac` for one camera, both as the
/// optimizer sees it and split into handle and guidance contributions.
pub fn gradient_parts(
    problem: &DeformProblem,
    jac: &JacobianField,
    camera: &Camera,
    provider: &mut dyn GuidanceProvider,
    query: &GuidanceQuery,
    config: &DeformConfig,
) -> Result<GradientParts> {
    let v = problem.solve(jac)?;
    let s = step_gradient(problem, &v, Some(camera), Some(provider), query, config)?;
    let summed: Vec<Vector3<f64>> = s.vertex_handle.iter().zip(&s.vertex_guidance).map(|(a, b)| a + b).collect();
    Ok(GradientParts {
        handle: problem.adjoint(&s.vertex_handle)?,
        guidance: problem.adjoint(&s.vertex_guidance)?,
        total: problem.adjoint(&summed)?,
        handle_loss: s.handle_loss,
        guidance_output: s.guidance.expect("provider was given"),
    })
}

/// Outcome of the second stage besides the field itself.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SecondStageStats {
    /// Iterations whose guidance gradient contained non-finite values and
    /// was dropped.
    pub nonfinite_guidance: usize,
}

/// `iters` steps of ADAM on the handle loss plus the image prior, from fresh
/// optimizer state. One camera is drawn uniformly per iteration. Without a
/// provider this is identical to [`first_stage`].
#[allow(clippy::too_many_arguments)]
pub fn second_stage(
    problem: &DeformProblem,
    jac: &JacobianField,
    config: &DeformConfig,
    cameras: &[Camera],
    mut provider: Option<&mut dyn GuidanceProvider>,
    rng: &mut ChaCha8Rng,
    trace: &mut Vec<TraceRecord>,
) -> Result<(JacobianField, SecondStageStats)> {
    if provider.is_some() && cameras.is_empty() {
        return Err(Error::InvalidConfig("the second stage needs at least one camera".into()));
    }
    let mut stats = SecondStageStats::default();
    let mut params = jac.to_flat();
    let mut adam = Adam::new(params.len());
    for i in 0..config.second_stage_iters {
        let j = JacobianField::from_flat(&params)?;
        let v = problem.solve(&j)?;
        let (camera, query) = match provider.is_some() {
            true => {
                let view = rng.random_range(0..cameras.len());
                let seed: u64 = rng.random();
                (
                    Some(&cameras[view]),
                    GuidanceQuery {
                        view,
                        iteration: trace.len(),
                        seed,
                    },
                )
            }
            false => (
                None,
                GuidanceQuery {
                    view: 0,
                    iteration: trace.len(),
                    seed: 0,
                },
            ),
        };
        let step = match step_gradient(
            problem,
            &v,
            camera,
            provider.as_mut().map(|p| &mut **p as &mut dyn GuidanceProvider),
            &query,
            config,
        ) {
            Ok(s) => s,
            Err(Error::Guidance(GuidanceError::NonFinite { count })) => {
                log::warn!("iteration {i}: dropping guidance gradient with {count} non-finite entries");
                stats.nonfinite_guidance += 1;
                step_gradient(problem, &v, None, None, &query, config)?
            }
            Err(e @ Error::Guidance(_)) => {
                return Err(Error::Aborted {
                    iteration: trace.len(),
                    trace: trace.clone(),
                    source: Box::new(e),
                })
            }
            Err(e) => return Err(e),
        };
        let summed: Vec<Vector3<f64>> = step
            .vertex_handle
            .iter()
            .zip(&step.vertex_guidance)
            .map(|(a, b)| a + b)
            .collect();
        let grad_j = problem.adjoint(&summed)?;
        trace.push(TraceRecord {
            iteration: trace.len(),
            handle_loss: step.handle_loss,
            guidance_grad_norm: step.guidance.as_ref().map_or(0.0, |g| g.gradient.norm()),
            stage: 2,
            guidance_loss: step.guidance.as_ref().and_then(|g| g.loss),
            view: camera.map(|_| query.view),
            t: step.guidance.as_ref().and_then(|g| g.t),
        });
        adam.step(&mut params, &grad_j.to_flat(), config.learning_rate)?;
    }
    Ok((JacobianField::from_flat(&params)?, stats))
}

#[derive(Debug, Clone)]
pub struct DeformationResult {
    pub mesh: TexturedMesh,
    pub jacobians: JacobianField,
    /// Vertices at the start of the second stage.
    pub first_stage_vertices: Vec<Vector3<f64>>,
    pub loss_trace: Vec<TraceRecord>,
    pub config: DeformConfig,
    pub nonfinite_guidance: usize,
    pub finetune: Option<FinetuneReport>,
}

impl DeformationResult {
    /// Largest distance between a handle and its target in the result.
    pub fn max_handle_error(&self, spec: &DeformationSpec, rest: &[Vector3<f64>]) -> f64 {
        spec.handles
            .iter()
            .map(|h| (self.mesh.vertices()[h.index] - rest[h.index] - Vector3::from(h.displacement)).norm())
            .fold(0.0, f64::max)
    }
}

/// Renders of `mesh` from each camera.
pub fn render_views(mesh: &TexturedMesh, cameras: &[Camera], settings: &RenderSettings) -> Result<Vec<RgbImage>> {
    cameras
        .iter()
        .map(|c| crate::render::rasterize(mesh, c, settings).map(|o| o.image))
        .collect()
}

fn default_provider(
    mesh: &TexturedMesh,
    config: &DeformConfig,
    cameras: &[Camera],
) -> Result<Box<dyn GuidanceProvider>> {
    match config.prior_mode {
        PriorMode::Analytic => Ok(Box::new(AnalyticL2Prior::per_view(render_views(
            mesh,
            cameras,
            &config.render,
        )?))),
        PriorMode::Remote => {
            let endpoint = config
                .endpoint
                .clone()
                .or_else(|| std::env::var(ENDPOINT_ENV_VAR).ok())
                .ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "remote prior needs an endpoint (config or {ENDPOINT_ENV_VAR})"
                    ))
                })?;
            let finetune = config
                .finetune
                .clone()
                .unwrap_or_else(|| FinetuneParams::for_view_mode(config.resolved_view_mode(mesh)));
            Ok(Box::new(
                RemoteSdsProvider::new(&endpoint, config.guidance.clone())?.with_finetune(finetune),
            ))
        }
        PriorMode::None => unreachable!("no provider without a prior"),
    }
}

/// Runs the full pipeline for `config.variant`. When the config enables a
/// prior and `provider` is `None`, one is built from the config: the analytic
/// prior targets renders of the rest mesh; the remote prior uses the
/// configured endpoint.
pub fn deform(
    mesh: &TexturedMesh,
    spec: &DeformationSpec,
    config: &DeformConfig,
    provider: Option<&mut dyn GuidanceProvider>,
) -> Result<DeformationResult> {
    config.validate()?;
    let problem = DeformProblem::new(mesh, spec, config.lambda)?;
    let rest = mesh.vertices();
    let cameras = config.cameras(mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut owned: Option<Box<dyn GuidanceProvider>> = None;
    if config.uses_prior() && provider.is_none() {
        owned = Some(default_provider(mesh, config, &cameras)?);
    }
    let mut provider: Option<&mut dyn GuidanceProvider> = if !config.uses_prior() {
        None
    } else if let Some(b) = owned.as_mut() {
        Some(&mut **b)
    } else {
        provider.map(|p| p as &mut dyn GuidanceProvider)
    };

    let mut finetune = None;
    if let Some(p) = provider.as_deref_mut() {
        if config.variant != Variant::NoLora {
            let renders = render_views(mesh, &cameras, &config.render)?;
            finetune = p.prepare(&renders)?;
        }
    }

    let j0 = jacobian_field(mesh)?;
    let mut trace = Vec::with_capacity(config.first_stage_iters + config.second_stage_iters);
    let (j1, first_stage_vertices) = match config.variant {
        Variant::ArapInit => {
            let (idx, targets) = spec.hard_constraints(rest);
            let v = arap_deform(mesh, &ArapConstraints::new(idx, targets))?.vertices;
            (problem.ops.apply_gradient(&v)?, v)
        }
        Variant::PoissonInit => {
            let (idx, targets) = spec.hard_constraints(rest);
            let v = solve_hard_constrained(mesh, &problem.ops, &j0, &idx, &targets)?;
            (problem.ops.apply_gradient(&v)?, v)
        }
        Variant::SecondOnly => (j0.clone(), problem.solve(&j0)?),
        _ => {
            let j = first_stage(&problem, &j0, config.first_stage_iters, config.learning_rate, &mut trace)?;
            let v = problem.solve(&j)?;
            (j, v)
        }
    };

    let (j2, stats) = second_stage(&problem, &j1, config, &cameras, provider, &mut rng, &mut trace)?;
    let v = problem.solve(&j2)?;
    Ok(DeformationResult {
        mesh: mesh.with_vertices(v)?,
        jacobians: j2,
        first_stage_vertices,
        loss_trace: trace,
        config: config.clone(),
        nonfinite_guidance: stats.nonfinite_guidance,
        finetune,
    })
}
