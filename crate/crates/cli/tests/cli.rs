use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jacobian_deform::mesh::load_mesh;
use jacobian_deform::RgbImage;
use serde_json::{json, Value};

fn jdeform(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jdeform"))
        .args(args)
        .env_remove("APAP_GUIDANCE_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `n × n` vertex grid over the unit square.
fn write_grid(dir: &Path, n: usize) -> PathBuf {
    let mut obj = String::new();
    for j in 0..n {
        for i in 0..n {
            let (x, y) = (i as f64 / (n - 1) as f64, j as f64 / (n - 1) as f64);
            writeln!(obj, "v {x} {y} 0").unwrap();
        }
    }
    for j in 0..n - 1 {
        for i in 0..n - 1 {
            let a = j * n + i + 1;
            writeln!(obj, "f {} {} {}", a, a + 1, a + n + 1).unwrap();
            writeln!(obj, "f {} {} {}", a, a + n + 1, a + n).unwrap();
        }
    }
    let p = dir.join("grid.obj");
    std::fs::write(&p, obj).unwrap();
    p
}

fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

/// Right-edge handle, left-edge anchor on an `n × n` grid.
fn write_spec(dir: &Path, n: usize, d: [f64; 3]) -> PathBuf {
    let p = dir.join("spec.json");
    write_json(
        &p,
        &json!({
            "handles": [{"index": (n / 2) * n + n - 1, "displacement": d}],
            "anchors": [{"index": (n / 2) * n}],
        }),
    );
    p
}

fn fast(extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = ["--first-stage-iters", "20", "--second-stage-iters", "10", "--resolution", "32"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run_deform(mesh: &Path, spec: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["deform", "--mesh", s(mesh), "--spec", s(spec), "--out", s(out)];
    let tail = fast(extra);
    args.extend(tail.iter().map(String::as_str));
    jdeform(&args)
}

#[test]
fn zero_displacement_keeps_the_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = write_grid(dir.path(), 6);
    let spec = write_spec(dir.path(), 6, [0.0; 3]);
    let out = dir.path().join("out");
    let o = run_deform(&mesh, &spec, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let before = load_mesh(&mesh).unwrap();
    let after = load_mesh(out.join("mesh.obj")).unwrap();
    let diff = before
        .vertices()
        .iter()
        .zip(after.vertices())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    // the rest pose is reconstructed exactly; afterwards ADAM's normalized
    // steps leave jitter on the order of the learning rate (1e-3)
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    let first: f64 = trace.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!(first < 1e-20, "initial handle loss {first}");
    assert!(diff < 5e-3, "moved by {diff}");
    for f in ["trace.csv", "meta.json", "config.json", "source_view0.png", "result_view0.png"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn missing_spec_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = write_grid(dir.path(), 4);
    let o = run_deform(&mesh, &dir.path().join("nope.json"), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("input/output error"));
}

#[test]
fn unknown_flag_is_rejected() {
    let o = jdeform(&["render", "--mesh", "a.obj", "--out", "b.png", "--bogus"]);
    assert!(!o.status.success());
}

#[test]
fn unreachable_guidance_server_exits_with_guidance_code() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = write_grid(dir.path(), 5);
    let spec = write_spec(dir.path(), 5, [0.1, 0.0, 0.0]);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = format!("http://127.0.0.1:{port}");
    let o = run_deform(&mesh, &spec, &dir.path().join("out"), &["--prior", "remote", "--endpoint", &endpoint]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn poisson_init_variant_skips_the_first_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = write_grid(dir.path(), 6);
    let spec = write_spec(dir.path(), 6, [0.1, 0.05, 0.0]);
    let out = dir.path().join("out");
    let o = run_deform(&mesh, &spec, &out, &["--variant", "poisson_init"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["iterations"], 10);
    assert_eq!(meta["config"]["variant"], "poisson_init");
    assert!(meta["max_handle_error"].as_f64().unwrap() < 0.02);
}

#[test]
fn deform_is_reproducible_and_logs_its_invocation() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = write_grid(dir.path(), 6);
    let spec = write_spec(dir.path(), 6, [0.1, 0.05, 0.0]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let extra = ["--prior", "analytic", "--seed", "5"];
    assert!(run_deform(&mesh, &spec, &a, &extra).status.success());
    assert!(run_deform(&mesh, &spec, &b, &extra).status.success());
    for f in ["mesh.obj", "trace.csv", "result_view0.png"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(a.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 5);
    assert_eq!(meta["config"]["prior_mode"], "analytic");
    let argv: Vec<&str> = meta["invocation"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(argv[1], "deform");
    assert!(argv.contains(&"--seed"));
}

#[test]
fn config_file_sits_below_flags() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = write_grid(dir.path(), 5);
    let spec = write_spec(dir.path(), 5, [0.1, 0.0, 0.0]);
    let cfg = dir.path().join("cfg.json");
    write_json(&cfg, &json!({"seed": 9, "second_stage_iters": 3, "learning_rate": 2e-3}));
    let out = dir.path().join("out");
    let o = jdeform(&[
        "deform", "--mesh", s(&mesh), "--spec", s(&spec), "--out", s(&out), "--config", s(&cfg),
        "--second-stage-iters", "4", "--first-stage-iters", "5", "--resolution", "16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 9);
    assert_eq!(meta["config"]["learning_rate"], 2e-3);
    assert_eq!(meta["iterations"], 9);
}

#[test]
fn render_reproduces_the_pipeline_render() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = write_grid(dir.path(), 6);
    let spec = write_spec(dir.path(), 6, [0.15, 0.1, 0.0]);
    let out = dir.path().join("out");
    assert!(run_deform(&mesh, &spec, &out, &[]).status.success());
    let png = dir.path().join("again.png");
    let o = jdeform(&[
        "render",
        "--mesh",
        s(&out.join("mesh.obj")),
        "--config",
        s(&out.join("config.json")),
        "--out",
        s(&png),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&png).unwrap(), std::fs::read(out.join("result_view0.png")).unwrap());
}

#[test]
fn render_rejects_out_of_range_view() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = write_grid(dir.path(), 3);
    let o = jdeform(&["render", "--mesh", s(&mesh), "--out", s(&dir.path().join("r.png")), "--view", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn arap_reports_zero_energy_for_rigid_constraints() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = write_grid(dir.path(), 5);
    let rest = load_mesh(&mesh).unwrap();
    let (c, sn) = (0.6f64.cos(), 0.6f64.sin());
    let idx = [0usize, 4, 20, 24];
    let targets: Vec<[f64; 3]> = idx
        .iter()
        .map(|&i| {
            let p = rest.vertices()[i];
            [c * p.x - sn * p.y + 0.3, sn * p.x + c * p.y - 0.2, p.z]
        })
        .collect();
    let cons = dir.path().join("cons.json");
    write_json(&cons, &json!({"indices": idx, "targets": targets}));
    let out = dir.path().join("out");
    let o = jdeform(&["arap", "--mesh", s(&mesh), "--constraints", s(&cons), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let energy: f64 = text.split("energy ").nth(1).unwrap().trim().parse().unwrap();
    assert!(energy < 1e-8, "{text}");
    assert!(out.join("mesh.obj").exists());
}

#[test]
fn arap_accepts_a_spec() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = write_grid(dir.path(), 5);
    let spec = write_spec(dir.path(), 5, [0.1, 0.1, 0.0]);
    let out = dir.path().join("out");
    let o = jdeform(&["arap", "--mesh", s(&mesh), "--spec", s(&spec), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let moved = load_mesh(out.join("mesh.obj")).unwrap();
    let h = 2 * 5 + 4;
    assert!((moved.vertices()[h].x - 1.1).abs() < 1e-8);
}

fn write_disk_mask(dir: &Path) -> (PathBuf, PathBuf) {
    let n = 64;
    let mut mask = RgbImage::filled(n, n, [0.0; 3]);
    let mut image = RgbImage::filled(n, n, [1.0; 3]);
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - 31.5, y as f64 - 31.5);
            if dx * dx + dy * dy < 26.0 * 26.0 {
                mask.set_pixel(x, y, [1.0; 3]);
            }
            image.set_pixel(x, y, [x as f64 / n as f64, y as f64 / n as f64, 0.5]);
        }
    }
    let (m, i) = (dir.join("mask.png"), dir.join("image.png"));
    mask.save_png(&m).unwrap();
    image.save_png(&i).unwrap();
    (m, i)
}

#[test]
fn mesh_from_mask_then_deform() {
    let dir = tempfile::tempdir().unwrap();
    let (mask, image) = write_disk_mask(dir.path());
    let obj = dir.path().join("disk/mesh.obj");
    let spec = dir.path().join("disk/spec.json");
    let o = jdeform(&[
        "mesh-from-mask", "--mask", s(&mask), "--image", s(&image), "--out", s(&obj), "--samples", "150",
        "--spec-out", s(&spec),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mesh = load_mesh(&obj).unwrap();
    assert!(mesh.texture().is_some());
    assert!(mesh.vertex_count() > 150);
    assert!(dir.path().join("disk/mesh.meta.json").exists());
    let o = run_deform(&obj, &spec, &dir.path().join("out"), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn bench_with_empty_manifest_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.json");
    write_json(&manifest, &json!([]));
    let out = dir.path().join("results");
    let o = jdeform(&["bench", "--manifest", s(&manifest), "--out", s(&out), "--variant", "arap"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("scores.csv").exists());
    assert!(out.join("meta.json").exists());
}

#[test]
fn bench_runs_a_mask_instance() {
    let dir = tempfile::tempdir().unwrap();
    let (mask, image) = write_disk_mask(dir.path());
    let manifest = dir.path().join("manifest.json");
    write_json(
        &manifest,
        &json!([{"mask_path": mask.file_name().unwrap().to_str(), "image_path": image.file_name().unwrap().to_str(), "category": "disk"}]),
    );
    let out = dir.path().join("results");
    let mut args = vec!["bench", "--manifest", s(&manifest), "--out", s(&out), "--variant", "lh_only", "--workers", "1"];
    let tail = fast(&[]);
    args.extend(tail.iter().map(String::as_str));
    let o = jdeform(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("1 succeeded, 0 failed"), "{}", stdout(&o));
    let scores = std::fs::read_to_string(out.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 2);
}
