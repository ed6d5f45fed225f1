//! `jdeform`: batch front end for the deformation library.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use jacobian_deform::arap::{arap_deform, arap_energy, ArapConstraints};
use jacobian_deform::bench::{
    assign_handles, mesh_from_mask, run_experiment, BinaryMask, ExperimentOptions, ExperimentVariant, HandleOptions,
    Manifest, MeshFromMaskOptions,
};
use jacobian_deform::deform::{deform, render_views, write_trace_csv, DeformConfig, PriorMode, Variant};
use jacobian_deform::mesh::{load_mesh, save_mesh};
use jacobian_deform::render::{rasterize, ViewMode};
use jacobian_deform::{DeformationSpec, Error, ErrorCategory, RgbImage};
use serde_json::{json, Value};

const META_FILE: &str = "meta.json";
const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "jdeform", version, about = "Handle-driven mesh deformation")]
struct Cli {
    /// More log output; repeat for debug and trace.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Deform a mesh with handles and anchors.
    Deform(DeformArgs),
    /// As-rigid-as-possible deformation with hard constraints.
    Arap(ArapArgs),
    /// Triangulate a foreground mask into a planar textured mesh.
    MeshFromMask(MaskArgs),
    /// Render a mesh with the pipeline's cameras.
    Render(RenderArgs),
    /// Run a benchmark manifest.
    Bench(BenchArgs),
}

/// Settings shared by the commands that run the optimizer.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON file overlaid on the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for all randomness [default: 0, or the config file's].
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    first_stage_iters: Option<usize>,
    #[arg(long)]
    second_stage_iters: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, value_enum)]
    prior: Option<PriorArg>,
    /// Guidance server URL; falls back to APAP_GUIDANCE_ENDPOINT.
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PriorArg {
    None,
    Analytic,
    Remote,
}

#[derive(Debug, Args)]
struct DeformArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct ArapArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Deformation spec; handles and anchors become hard constraints.
    #[arg(long, conflicts_with = "constraints", required_unless_present = "constraints")]
    spec: Option<PathBuf>,
    /// JSON with `indices` and `targets` (optionally `max_iterations`, `tolerance`).
    #[arg(long)]
    constraints: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_iterations: Option<usize>,
}

#[derive(Debug, Args)]
struct MaskArgs {
    #[arg(long)]
    mask: PathBuf,
    /// Source image used as the texture.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Output OBJ; texture and material are written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 800)]
    samples: usize,
    #[arg(long, default_value_t = 1.5)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also assign this many boundary handles and write the spec here.
    #[arg(long)]
    spec_out: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    handles: usize,
    #[arg(long, default_value_t = 0.1)]
    magnitude: f64,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Camera index among the configured views.
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// JSON config; a config.json written by `deform` reproduces its renders.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_experiment_variant, default_value = "ours")]
    variant: ExperimentVariant,
    /// Worker threads; 0 uses one per core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// JSON list of reference feature vectors for the kNN quality score.
    #[arg(long)]
    reference_features: Option<PathBuf>,
    /// Rerun instances that already completed.
    #[arg(long)]
    no_resume: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::ALL
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| format!("unknown variant {s:?}"))
}

fn parse_experiment_variant(s: &str) -> Result<ExperimentVariant, String> {
    s.parse::<ExperimentVariant>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Deform(a) => cmd_deform(a),
        Command::Arap(a) => cmd_arap(a),
        Command::MeshFromMask(a) => cmd_mesh_from_mask(a),
        Command::Render(a) => cmd_render(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, label) = match e.category() {
                ErrorCategory::Io => (2, "input/output error"),
                ErrorCategory::Numerical => (3, "numerical error"),
                ErrorCategory::Guidance => (4, "guidance error"),
            };
            eprintln!("jdeform: {label}: {e}");
            ExitCode::from(code)
        }
    }
}

fn invocation() -> Vec<String> {
    std::env::args().collect()
}

fn write_json(path: &Path, value: &Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    std::fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Defaults, then the config file, then flags.
fn resolve_config(base: DeformConfig, args: &ConfigArgs) -> Result<DeformConfig, Error> {
    let mut config = match &args.config {
        Some(p) => base.merged_with_file(p)?,
        None => base,
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(m) = args.first_stage_iters {
        config.first_stage_iters = m;
    }
    if let Some(n) = args.second_stage_iters {
        config.second_stage_iters = n;
    }
    if let Some(lr) = args.learning_rate {
        config.learning_rate = lr;
    }
    if let Some(r) = args.resolution {
        config.resolution = r;
    }
    if let Some(p) = args.prior {
        config.prior_mode = match p {
            PriorArg::None => PriorMode::None,
            PriorArg::Analytic => PriorMode::Analytic,
            PriorArg::Remote => PriorMode::Remote,
        };
    }
    if args.endpoint.is_some() {
        config.endpoint = args.endpoint.clone();
    }
    config.validate()?;
    Ok(config)
}

fn save_views(images: &[RgbImage], dir: &Path, prefix: &str) -> Result<(), Error> {
    for (k, img) in images.iter().enumerate() {
        img.save_png(dir.join(format!("{prefix}_view{k}.png")))?;
    }
    Ok(())
}

fn cmd_deform(args: &DeformArgs) -> Result<(), Error> {
    let start = Instant::now();
    let mesh = load_mesh(&args.mesh)?;
    let spec = DeformationSpec::load(&args.spec)?;
    let mut config = resolve_config(DeformConfig::for_mesh(&mesh), &args.config)?;
    if let Some(v) = args.variant {
        config.variant = v;
    }
    config.view_mode = Some(config.resolved_view_mode(&mesh));
    create_dir(&args.out)?;

    let result = deform(&mesh, &spec, &config, None)?;
    let mesh_path = args.out.join("mesh.obj");
    save_mesh(&result.mesh, &mesh_path)?;
    write_trace_csv(args.out.join("trace.csv"), &result.loss_trace)?;

    // renders come from the saved files so `render` can reproduce them
    let cameras = config.cameras(&mesh);
    let saved = load_mesh(&mesh_path)?;
    save_views(&render_views(&mesh, &cameras, &config.render)?, &args.out, "source")?;
    save_views(&render_views(&saved, &cameras, &config.render)?, &args.out, "result")?;

    let config_value = serde_json::to_value(&config).expect("config serializes");
    write_json(&args.out.join(CONFIG_FILE), &config_value)?;
    let max_err = result.max_handle_error(&spec, mesh.vertices());
    let final_loss = result.loss_trace.last().map(|r| r.handle_loss);
    write_json(
        &args.out.join(META_FILE),
        &json!({
            "command": "deform",
            "invocation": invocation(),
            "mesh": args.mesh,
            "spec": args.spec,
            "seed": config.seed,
            "config": config_value,
            "iterations": result.loss_trace.len(),
            "final_handle_loss": final_loss,
            "max_handle_error": max_err,
            "nonfinite_guidance": result.nonfinite_guidance,
            "adapter_id": result.finetune.as_ref().map(|f| f.adapter_id.clone()),
            "elapsed_secs": start.elapsed().as_secs_f64(),
        }),
    )?;
    println!(
        "deformed {} vertices in {} iterations, max handle error {max_err:.3e}",
        mesh.vertex_count(),
        result.loss_trace.len()
    );
    Ok(())
}

fn cmd_arap(args: &ArapArgs) -> Result<(), Error> {
    let mesh = load_mesh(&args.mesh)?;
    let mut constraints = match (&args.spec, &args.constraints) {
        (Some(p), _) => {
            let spec = DeformationSpec::load(p)?;
            spec.validate(mesh.vertex_count())?;
            let (idx, targets) = spec.hard_constraints(mesh.vertices());
            ArapConstraints::new(idx, targets)
        }
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p).map_err(|source| Error::Io { path: p.clone(), source })?;
            serde_json::from_str(&text).map_err(|source| Error::Json { path: p.clone(), source })?
        }
        (None, None) => unreachable!("clap requires one of --spec and --constraints"),
    };
    if let Some(m) = args.max_iterations {
        constraints.max_iterations = m;
    }
    let solution = arap_deform(&mesh, &constraints)?;
    let deformed = mesh.with_vertices(solution.vertices.clone())?;
    create_dir(&args.out)?;
    save_mesh(&deformed, args.out.join("mesh.obj"))?;
    let energy = arap_energy(&mesh, &solution.vertices)?;
    write_json(
        &args.out.join(META_FILE),
        &json!({
            "command": "arap",
            "invocation": invocation(),
            "mesh": args.mesh,
            "constraints": constraints,
            "iterations": solution.iterations,
            "energy_history": solution.energy_history,
            "energy": energy,
        }),
    )?;
    println!("arap: {} iterations, energy {energy:.6e}", solution.iterations);
    Ok(())
}

fn cmd_mesh_from_mask(args: &MaskArgs) -> Result<(), Error> {
    let mask = BinaryMask::load_png(&args.mask)?;
    let image = match &args.image {
        Some(p) => Some(RgbImage::load_png(p)?),
        None => None,
    };
    let options = MeshFromMaskOptions {
        interior_samples: args.samples,
        simplify_tolerance: args.tolerance,
        seed: args.seed,
    };
    let built = mesh_from_mask(&mask, image.as_ref(), &options)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_mesh(&built.mesh, &args.out)?;
    let handles = HandleOptions {
        n_pairs: args.handles,
        magnitude: args.magnitude,
        ..Default::default()
    };
    if let Some(p) = &args.spec_out {
        assign_handles(&built.mesh, &handles)?.save(p)?;
    }
    write_json(
        &args.out.with_extension("meta.json"),
        &json!({
            "command": "mesh-from-mask",
            "invocation": invocation(),
            "seed": args.seed,
            "options": options,
            "handles": args.spec_out.as_ref().map(|_| &handles),
            "vertex_count": built.mesh.vertex_count(),
            "face_count": built.mesh.face_count(),
            "contour_vertices": built.contour.len(),
            "spacing_px": built.spacing,
        }),
    )?;
    println!(
        "mesh: {} vertices, {} faces, {} on the contour",
        built.mesh.vertex_count(),
        built.mesh.face_count(),
        built.contour.len()
    );
    Ok(())
}

fn cmd_render(args: &RenderArgs) -> Result<(), Error> {
    let mesh = load_mesh(&args.mesh)?;
    let mut config = match &args.config {
        Some(p) => DeformConfig::for_mesh(&mesh).merged_with_file(p)?,
        None => DeformConfig::for_mesh(&mesh),
    };
    if let Some(r) = args.resolution {
        config.resolution = r;
    }
    config.validate()?;
    let cameras = config.cameras(&mesh);
    let camera = cameras.get(args.view).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "view {} out of range; {:?} has {} cameras",
            args.view,
            config.resolved_view_mode(&mesh),
            cameras.len()
        ))
    })?;
    let out = rasterize(&mesh, camera, &config.render)?;
    out.image.save_png(&args.out)?;
    let view_mode: ViewMode = config.resolved_view_mode(&mesh);
    write_json(
        &args.out.with_extension("meta.json"),
        &json!({
            "command": "render",
            "invocation": invocation(),
            "mesh": args.mesh,
            "view": args.view,
            "view_mode": view_mode,
            "resolution": config.resolution,
            "render": config.render,
            "covered_pixels": out.covered_pixels(),
        }),
    )?;
    println!("rendered {} covered pixels", out.covered_pixels());
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<(), Error> {
    let manifest = Manifest::load(&args.manifest)?;
    let config = resolve_config(DeformConfig::planar(), &args.config)?;
    let options = ExperimentOptions {
        output_dir: args.out.clone(),
        variant: args.variant,
        config,
        workers: args.workers,
        reference_features: args.reference_features.clone(),
        resume: !args.no_resume,
        ..Default::default()
    };
    let bundle = run_experiment(&manifest, &options)?;
    write_json(
        &args.out.join(META_FILE),
        &json!({
            "command": "bench",
            "invocation": invocation(),
            "manifest": args.manifest,
            "seed": options.config.seed,
            "options": options,
            "succeeded": bundle.succeeded(),
            "failed": bundle.failed(),
        }),
    )?;
    println!(
        "bench {}: {} succeeded, {} failed",
        args.variant,
        bundle.succeeded(),
        bundle.failed()
    );
    Ok(())
}
