//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs with the analytic prior and a local stub server only.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use common::*;
use jacobian_deform::arap::{arap_deform, ArapConstraints};
use jacobian_deform::bench::{assign_handles, run_experiment, ExperimentOptions, ExperimentVariant, HandleOptions,
    InstanceStatus, Manifest, ManifestEntry};
use jacobian_deform::deform::{deform, first_stage, read_trace_csv, DeformConfig, DeformProblem, PriorMode};
use jacobian_deform::mesh::{build_operators, jacobian_field, load_mesh, save_mesh};
use jacobian_deform::poisson::{build_system, solve, Anchor, Handle};
use jacobian_deform::render::{rasterize, rasterize_backward, rasterize_vertices, Camera, RenderSettings};
use jacobian_deform::sparse::CscMatrix;
use jacobian_deform::{DeformationSpec, JacobianField, RgbImage, TexturedMesh};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("identity reconstruction", identity_reconstruction),
        ("adjoint matches finite differences", adjoint_vs_finite_differences),
        ("operator identities", operator_identities),
        ("first stage convergence", first_stage_convergence),
        ("arap rigid recovery and monotone energy", arap_rigid_and_monotone),
        ("rasterizer gradients and determinism", rasterizer_gradients),
        ("analytic prior end to end", analytic_prior_end_to_end),
        ("ablation plumbing", ablation_plumbing),
        ("triangulation", triangulation),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS [{}] {name}: {d} ({secs:.1}s)", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL [{}] {name}: {d} ({secs:.1}s)", i + 1)
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn identity_corpus() -> Vec<(String, TexturedMesh)> {
    let masks = mask_fixtures();
    vec![
        ("grid 60x60".into(), grid(60, 60, 0.3, 1)),
        ("grid 64x64".into(), grid(64, 64, 0.3, 2)),
        ("grid 70x70".into(), grid(70, 70, 0.2, 3)),
        ("height field 60x70".into(), height_field(60, 70, 4)),
        ("height field 65x65".into(), height_field(65, 65, 5)),
        ("cylinder 64x60".into(), cylinder(64, 60)),
        ("cylinder 80x50".into(), cylinder(80, 50)),
        ("sphere 64x62".into(), sphere(64, 62)),
        ("disk mask".into(), mask_mesh(&masks[0].1, 3500, false).mesh),
        ("star mask".into(), mask_mesh(&masks[2].1, 3800, false).mesh),
    ]
}

fn identity_reconstruction() -> Outcome {
    let corpus = identity_corpus();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut sizes = Vec::new();
    for (name, mesh) in &corpus {
        let n = mesh.vertex_count();
        if !(3000..=5000).contains(&n) {
            return Err(format!("{name} has {n} vertices"));
        }
        sizes.push(n);
        let ops = build_operators(mesh).map_err(|e| e.to_string())?;
        let anchors = [0, n / 2, n - 1];
        let system = build_system(&ops, &anchors, 1e4).map_err(|e| e.to_string())?;
        let j = jacobian_field(mesh).map_err(|e| e.to_string())?;
        let targets: Vec<_> = anchors.iter().map(|&a| mesh.vertices()[a]).collect();
        let v = solve(&system, &ops, &j, &targets).map_err(|e| e.to_string())?;
        let num: f64 = v.iter().zip(mesh.vertices()).map(|(a, b)| (a - b).norm_squared()).sum();
        let den: f64 = mesh.vertices().iter().map(|p| p.norm_squared()).sum();
        worst = worst.max((num / den).sqrt());
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-6 && secs < 10.0,
        format!(
            "{} meshes ({}..{} vertices), worst relative error {worst:.2e}, {secs:.2}s",
            corpus.len(),
            sizes.iter().min().unwrap(),
            sizes.iter().max().unwrap()
        ),
    )
}

fn random_small_meshes() -> Vec<TexturedMesh> {
    let masks = mask_fixtures();
    vec![
        grid(9, 11, 0.3, 11),
        grid(12, 12, 0.35, 12),
        height_field(10, 14, 13),
        cylinder(12, 10),
        mask_mesh(&masks[1].1, 120, false).mesh,
    ]
}

fn random_spec(mesh: &TexturedMesh, seed: u64) -> DeformationSpec {
    let mut r = rng(seed);
    let n = mesh.vertex_count();
    let mut picked = BTreeSet::new();
    while picked.len() < 6 {
        picked.insert(r.random_range(0..n));
    }
    let picked: Vec<usize> = picked.into_iter().collect();
    let handles = picked[..3]
        .iter()
        .map(|&index| Handle {
            index,
            displacement: [r.random_range(-0.2..0.2), r.random_range(-0.2..0.2), r.random_range(-0.2..0.2)],
        })
        .collect();
    let anchors = picked[3..].iter().map(|&index| Anchor { index, target: None }).collect();
    DeformationSpec::new(handles, anchors)
}

fn adjoint_vs_finite_differences() -> Outcome {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut sizes = Vec::new();
    for (k, mesh) in random_small_meshes().iter().enumerate() {
        if mesh.vertex_count() > 200 {
            return Err(format!("mesh {k} has {} vertices", mesh.vertex_count()));
        }
        sizes.push(mesh.vertex_count());
        let spec = random_spec(mesh, 100 + k as u64);
        let p = DeformProblem::new(mesh, &spec, None).map_err(|e| e.to_string())?;
        let mut r = rng(200 + k as u64);
        let j0 = jacobian_field(mesh).unwrap();
        let j = JacobianField::new(
            j0.per_face()
                .iter()
                .map(|m| m + Matrix3::from_fn(|_, _| r.random_range(-0.1..0.1)))
                .collect(),
        )
        .unwrap();
        let loss = |flat: &[f64]| {
            let v = p.solve(&JacobianField::from_flat(flat).unwrap()).unwrap();
            p.handle_loss(&v).unwrap().0
        };
        let v = p.solve(&j).unwrap();
        let analytic = p.adjoint(&p.handle_loss(&v).unwrap().1).unwrap().to_flat();
        let mut flat = j.to_flat();
        let mut fd = vec![0.0; flat.len()];
        for i in 0..flat.len() {
            let x = flat[i];
            flat[i] = x + h;
            let up = loss(&flat);
            flat[i] = x - h;
            let down = loss(&flat);
            flat[i] = x;
            fd[i] = (up - down) / (2.0 * h);
        }
        worst = worst.max(max_rel_err(&analytic, &fd));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 60.0,
        format!("5 meshes ({sizes:?} vertices), max relative error {worst:.2e}, {secs:.1}s"),
    )
}

fn operator_identities() -> Outcome {
    let masks = mask_fixtures();
    let mut worst = [0.0f64; 3];
    for k in 0..20u64 {
        let mut r = rng(300 + k);
        let mesh = match k % 4 {
            0 => grid(r.random_range(5..25), r.random_range(5..25), 0.4, k),
            1 => height_field(r.random_range(5..25), r.random_range(5..25), k),
            2 => cylinder(r.random_range(6..30), r.random_range(3..20)),
            _ => mask_mesh(&masks[(k as usize / 4) % masks.len()].1, r.random_range(50..400), false).mesh,
        };
        // random rigid motion and scale, so nothing relies on axis alignment
        let q = UnitQuaternion::from_euler_angles(r.random(), r.random(), r.random());
        let s = r.random_range(0.5..2.0);
        let mesh = mesh
            .with_vertices(mesh.vertices().iter().map(|p| q * p * s).collect())
            .unwrap();
        let ops = build_operators(&mesh).unwrap();
        let l = ops.laplacian();
        worst[0] = worst[0].max(l.asymmetry());
        let ones = vec![1.0; l.ncols()];
        worst[1] = worst[1].max(l.mul_vec(&ones).iter().map(|x| x.abs()).fold(0.0, f64::max));
        let composed = ops.grad().transpose().mul(&CscMatrix::diagonal(ops.mass())).mul(ops.grad());
        let diff = l.add_scaled(1.0, &composed, -1.0);
        worst[2] = worst[2].max(diff.values().iter().map(|x| x.abs()).fold(0.0, f64::max));
    }
    check(
        worst[0] <= 1e-12 && worst[1] <= 1e-10 && worst[2] <= 1e-10,
        format!(
            "20 meshes: asymmetry {:.1e}, row sum {:.1e}, |L - GtAG| {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn first_stage_convergence() -> Outcome {
    let masks = mask_fixtures();
    let mm = mask_mesh(&masks[0].1, 900, true);
    let mesh = &mm.mesh;
    let options = HandleOptions {
        n_pairs: 1,
        magnitude: 0.2,
        ..Default::default()
    };
    let spec = assign_handles(mesh, &options).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let p = DeformProblem::new(mesh, &spec, None).map_err(|e| e.to_string())?;
    let j0 = jacobian_field(mesh).unwrap();
    let mut trace = Vec::new();
    let j = first_stage(&p, &j0, 300, 1e-3, &mut trace).map_err(|e| e.to_string())?;
    let v = p.solve(&j).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let rest = mesh.vertices();
    let ratio = spec
        .handles
        .iter()
        .map(|h| (v[h.index] - rest[h.index] - Vector3::from(h.displacement)).norm() / Vector3::from(h.displacement).norm())
        .fold(0.0, f64::max);
    let flips = mesh
        .faces()
        .iter()
        .filter(|f| {
            let (a, b, c) = (v[f[0]], v[f[1]], v[f[2]]);
            (b - a).xy().perp(&(c - a).xy()) <= 0.0
        })
        .count();
    check(
        ratio < 0.05 && flips == 0 && secs < 120.0,
        format!(
            "{} vertices, {} handles, handle distance {:.2}% of displacement, {flips} flipped faces, {secs:.1}s",
            mesh.vertex_count(),
            spec.handles.len(),
            100.0 * ratio
        ),
    )
}

fn arap_fixtures() -> Vec<(&'static str, TexturedMesh)> {
    let masks = mask_fixtures();
    vec![
        ("grid", grid(12, 10, 0.3, 21)),
        ("height field", height_field(12, 12, 22)),
        ("cylinder", cylinder(16, 8)),
        ("sphere", sphere(14, 10)),
        ("mask", mask_mesh(&masks[3].1, 200, false).mesh),
    ]
}

fn arap_rigid_and_monotone() -> Outcome {
    let mut worst_pos: f64 = 0.0;
    let mut worst_energy: f64 = 0.0;
    let mut monotone = true;
    for (k, (name, mesh)) in arap_fixtures().into_iter().enumerate() {
        let mut r = rng(400 + k as u64);
        let n = mesh.vertex_count();
        let q = if mesh.is_planar() {
            UnitQuaternion::from_euler_angles(0.0, 0.0, r.random_range(-3.0..3.0))
        } else {
            UnitQuaternion::from_euler_angles(r.random(), r.random(), r.random())
        };
        let t = Vector3::new(r.random(), r.random(), if mesh.is_planar() { 0.0 } else { r.random() });
        let mut idx = BTreeSet::new();
        while idx.len() < 4 {
            idx.insert(r.random_range(0..n));
        }
        let idx: Vec<usize> = idx.into_iter().collect();
        let moved = |p: &Vector3<f64>| q * p + t;
        let targets = idx.iter().map(|&i| moved(&mesh.vertices()[i])).collect();
        let sol = arap_deform(&mesh, &ArapConstraints::new(idx.clone(), targets)).map_err(|e| format!("{name}: {e}"))?;
        for (v, p) in sol.vertices.iter().zip(mesh.vertices()) {
            worst_pos = worst_pos.max((v - moved(p)).norm());
        }
        worst_energy = worst_energy.max(sol.energy());

        // non-rigid edit: two handles pulled apart
        let (a, b) = (idx[0], idx[idx.len() - 1]);
        let pull = if mesh.is_planar() { Vector3::new(0.2, 0.1, 0.0) } else { Vector3::new(0.2, 0.1, -0.1) };
        let cons = ArapConstraints::new(vec![a, b], vec![mesh.vertices()[a] + pull, mesh.vertices()[b] - pull]);
        let sol = arap_deform(&mesh, &cons).map_err(|e| format!("{name}: {e}"))?;
        let e = &sol.energy_history;
        if e.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-12) + 1e-15) {
            monotone = false;
        }
    }
    check(
        worst_pos < 1e-5 && worst_energy < 1e-8 && monotone,
        format!(
            "5 fixtures: rigid position error {worst_pos:.1e}, energy {worst_energy:.1e}, monotone {monotone}"
        ),
    )
}

fn raster_fixtures() -> Vec<(&'static str, TexturedMesh, Camera)> {
    let mut textured = grid(5, 5, 0.2, 31);
    let tex = stripes(24, 24);
    textured = TexturedMesh::new(
        textured.vertices().iter().map(|p| Vector3::new(0.2 + 0.6 * p.x - 0.08 * p.y, 0.25 + 0.5 * p.y + 0.05 * p.x, 0.0)).collect(),
        textured.faces().to_vec(),
        textured.uvs().to_vec(),
        Some(tex),
    )
    .unwrap();
    let plain = grid(4, 4, 0.3, 32);
    let plain = plain
        .with_vertices(plain.vertices().iter().map(|p| Vector3::new(0.17 + 0.7 * p.x - 0.1 * p.y, 0.12 + 0.6 * p.y + 0.07 * p.x, 0.0)).collect())
        .unwrap();
    let surface = height_field(5, 5, 33);
    let surface = surface
        .with_vertices(surface.vertices().iter().map(|p| p - Vector3::new(0.5, 0.5, 0.0)).collect())
        .unwrap();
    let orbit = jacobian_deform::render::canonical_cameras(jacobian_deform::render::ViewMode::FourView, 16)
        .remove(1);
    vec![
        ("textured planar", textured, Camera::planar(16)),
        ("untextured planar", plain, Camera::planar(16)),
        ("surface, orbit view", surface, orbit),
    ]
}

fn rasterizer_gradients() -> Outcome {
    let settings = RenderSettings::default();
    let h = 1e-6;
    let mut errors = Vec::new();
    let mut deterministic = true;
    for (k, (name, mesh, camera)) in raster_fixtures().into_iter().enumerate() {
        let base = rasterize(&mesh, &camera, &settings).map_err(|e| format!("{name}: {e}"))?;
        let again = rasterize(&mesh, &camera, &settings).unwrap();
        deterministic &= base.image.data() == again.image.data();
        let mut r = rng(500 + k as u64);
        let w: Vec<f64> = (0..base.image.data().len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let weights = RgbImage::new(16, 16, w.clone()).unwrap();
        let loss = |v: &[Vector3<f64>]| -> f64 {
            let out = rasterize_vertices(&mesh, v, &camera, &settings).unwrap();
            out.image.data().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let v0 = mesh.vertices().to_vec();
        let analytic = rasterize_backward(&base, &mesh, &v0, &camera, &weights).map_err(|e| format!("{name}: {e}"))?;
        let mut fd = Vec::new();
        let mut an = Vec::new();
        let mut v = v0.clone();
        for i in 0..v.len() {
            for c in 0..3 {
                let x = v[i][c];
                v[i][c] = x + h;
                let up = loss(&v);
                v[i][c] = x - h;
                let down = loss(&v);
                v[i][c] = x;
                fd.push((up - down) / (2.0 * h));
                an.push(analytic[i][c]);
            }
        }
        let num: f64 = an.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        errors.push((name, num / den.max(1e-12)));
    }
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let listed: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(
        worst < 5e-2 && deterministic,
        format!("16x16 relative gradient error: {}; bit-exact {deterministic}", listed.join(", ")),
    )
}

fn analytic_prior_config() -> DeformConfig {
    DeformConfig {
        first_stage_iters: 300,
        second_stage_iters: 100,
        resolution: 64,
        prior_mode: PriorMode::Analytic,
        seed: 7,
        ..DeformConfig::planar()
    }
}

fn analytic_prior_end_to_end() -> Outcome {
    let masks = mask_fixtures();
    let mesh = mask_mesh(&masks[1].1, 250, true).mesh;
    let spec = point_spec(&mesh, [1.0, 0.3, 0.0], [0.0, 0.3, 0.0], [0.15, 0.1, 0.0]);
    let config = analytic_prior_config();
    let camera = Camera::planar(config.resolution);
    let target = rasterize(&mesh, &camera, &config.render).unwrap().image;
    let image_loss = |v: &[Vector3<f64>]| {
        rasterize_vertices(&mesh, v, &camera, &config.render)
            .unwrap()
            .image
            .half_squared_distance(&target)
    };
    let a = deform(&mesh, &spec, &config, None).map_err(|e| e.to_string())?;
    let b = deform(&mesh, &spec, &config, None).map_err(|e| e.to_string())?;
    let before = image_loss(&a.first_stage_vertices);
    let after = image_loss(a.mesh.vertices());
    let reduction = 1.0 - after / before;
    let same = a.mesh.vertices() == b.mesh.vertices() && a.loss_trace == b.loss_trace;
    check(
        before > 0.0 && reduction >= 0.3 && same,
        format!("image loss {before:.3} -> {after:.3} ({:.1}% lower), deterministic {same}", 100.0 * reduction),
    )
}

fn write_mini_manifest(dir: &Path) -> Manifest {
    let masks = mask_fixtures();
    let mut entries = Vec::new();
    for (i, k) in [0usize, 2].into_iter().enumerate() {
        let (name, mask) = &masks[k];
        let mask_path = dir.join(format!("{name}_mask.png"));
        let mut img = RgbImage::filled(mask.width(), mask.height(), [0.0; 3]);
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(x, y) {
                    img.set_pixel(x, y, [1.0; 3]);
                }
            }
        }
        img.save_png(&mask_path).unwrap();
        let image_path = dir.join(format!("{name}_image.png"));
        stripes(mask.width(), mask.height()).save_png(&image_path).unwrap();
        entries.push(ManifestEntry {
            name: Some(format!("mask{i}")),
            mesh_path: None,
            mask_path: Some(mask_path.file_name().unwrap().into()),
            image_path: Some(image_path.file_name().unwrap().into()),
            spec_path: None,
            category: "mask".into(),
        });
    }
    let g = grid(10, 8, 0.2, 41);
    save_mesh(&g, dir.join("grid.obj")).unwrap();
    let spec = point_spec(&g, [1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.1, 0.05, 0.0]);
    spec.save(dir.join("grid_spec.json")).unwrap();
    entries.push(ManifestEntry {
        name: Some("grid".into()),
        mesh_path: Some("grid.obj".into()),
        mask_path: None,
        image_path: None,
        spec_path: Some("grid_spec.json".into()),
        category: "mesh".into(),
    });
    let manifest = Manifest::new(entries, dir);
    manifest.save(dir.join("manifest.json")).unwrap();
    Manifest::load(dir.join("manifest.json")).unwrap()
}

fn ablation_plumbing() -> Outcome {
    let server = StubServer::start(SdsBehavior::Pull(1e-3));
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_mini_manifest(dir.path());
    let (m, n) = (20, 10);
    let mut summary = Vec::new();
    for variant in [
        ExperimentVariant::LhOnly,
        ExperimentVariant::SecondOnly,
        ExperimentVariant::ArapInit,
        ExperimentVariant::PoissonInit,
    ] {
        let out = dir.path().join(variant.name());
        let options = ExperimentOptions {
            output_dir: out.clone(),
            variant,
            config: DeformConfig {
                first_stage_iters: m,
                second_stage_iters: n,
                resolution: 48,
                prior_mode: PriorMode::Remote,
                endpoint: Some(server.endpoint.clone()),
                ..DeformConfig::planar()
            },
            mask: jacobian_deform::bench::MeshFromMaskOptions {
                interior_samples: 150,
                ..Default::default()
            },
            ..Default::default()
        };
        let bundle = run_experiment(&manifest, &options).map_err(|e| format!("{variant}: {e}"))?;
        let expected_iters = if variant == ExperimentVariant::LhOnly { m + n } else { n };
        for meta in &bundle.instances {
            if meta.status != InstanceStatus::Ok {
                return Err(format!("{variant}/{}: {:?}", meta.name, meta.error));
            }
            let d = out.join(&meta.name);
            let mesh = load_mesh(d.join("mesh.obj")).map_err(|e| e.to_string())?;
            let render = RgbImage::load_png(d.join("render.png")).map_err(|e| e.to_string())?;
            let trace = read_trace_csv(d.join("trace.csv")).map_err(|e| e.to_string())?;
            let json: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(d.join("meta.json")).unwrap()).unwrap();
            let ok = mesh.vertex_count() == meta.vertex_count
                && render.dims() == (48, 48)
                && trace.len() == expected_iters
                && json["status"] == "ok"
                && json["variant"] == variant.name();
            if !ok {
                return Err(format!("{variant}/{}: malformed bundle", meta.name));
            }
        }
        let scores = std::fs::read_to_string(&bundle.scores_path).unwrap();
        if scores.lines().count() != 4 {
            return Err(format!("{variant}: scores.csv has {} lines", scores.lines().count()));
        }
        summary.push(format!("{variant} ok"));
    }
    let sds = server.calls_to("/v1/sds-grad").len();
    let finetune = server.calls_to("/v1/finetune").len();
    check(
        sds > 0 && finetune == 9,
        format!("{}; stub served {sds} gradient and {finetune} finetune requests", summary.join(", ")),
    )
}

fn triangulation() -> Outcome {
    let mut details = Vec::new();
    for (name, mask) in mask_fixtures() {
        let mm = mask_mesh(&mask, 400, false);
        let mesh = &mm.mesh;
        let edges = mesh.edge_faces();
        let key = |a: usize, b: usize| (a.min(b), a.max(b));
        let contour: BTreeSet<(usize, usize)> = (0..mm.contour.len())
            .map(|i| key(mm.contour[i], mm.contour[(i + 1) % mm.contour.len()]))
            .collect();
        let kept = contour.iter().filter(|e| edges.contains_key(e)).count();
        if kept != contour.len() {
            return Err(format!("{name}: {kept} of {} contour edges kept", contour.len()));
        }
        let v = mesh.vertices();
        let mut violations = 0;
        let mut checked = 0;
        for (&(a, b), faces) in &edges {
            if faces.len() != 2 || contour.contains(&(a, b)) {
                continue;
            }
            checked += 1;
            let opposite = |f: usize| *mesh.faces()[f].iter().find(|&&x| x != a && x != b).unwrap();
            let tri = mesh.faces()[faces[0]];
            let d = v[opposite(faces[1])];
            if in_circle(v[tri[0]], v[tri[1]], v[tri[2]], d) {
                violations += 1;
            }
        }
        if violations > 0 {
            return Err(format!("{name}: {violations} of {checked} edges fail the empty-circle test"));
        }
        details.push(format!("{name} {}/{}", kept, contour.len()));
    }
    Ok(format!("contour edges kept: {}; all interior edges locally Delaunay", details.join(", ")))
}

/// Whether `d` lies strictly inside the circumcircle of the counter-clockwise
/// triangle `abc`, with a relative tolerance for cocircular points.
fn in_circle(a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>, d: Vector3<f64>) -> bool {
    let rows = [a - d, b - d, c - d];
    let m = nalgebra::Matrix3::from_fn(|i, j| match j {
        0 => rows[i].x,
        1 => rows[i].y,
        _ => rows[i].x * rows[i].x + rows[i].y * rows[i].y,
    });
    let scale = rows.iter().map(|r| r.xy().norm_squared()).fold(0.0, f64::max).powi(2);
    m.determinant() > 1e-9 * scale
}
