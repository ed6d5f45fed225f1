#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use jacobian_deform::bench::{mesh_from_mask, BinaryMask, MaskMesh, MeshFromMaskOptions};
use jacobian_deform::poisson::{Anchor, Handle};
use jacobian_deform::{DeformationSpec, RgbImage, TexturedMesh};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `nx × ny` vertex grid on the unit square, interior vertices jittered by up
/// to `jitter` of a cell, with alternating diagonals.
pub fn grid(nx: usize, ny: usize, jitter: f64, seed: u64) -> TexturedMesh {
    let mut r = rng(seed);
    let (hx, hy) = (1.0 / (nx - 1) as f64, 1.0 / (ny - 1) as f64);
    let mut v = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let mut p = Vector3::new(i as f64 * hx, j as f64 * hy, 0.0);
            if i > 0 && j > 0 && i + 1 < nx && j + 1 < ny && jitter > 0.0 {
                p.x += r.random_range(-jitter..jitter) * hx;
                p.y += r.random_range(-jitter..jitter) * hy;
            }
            v.push(p);
        }
    }
    let mut f = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let a = j * nx + i;
            let (b, c, d) = (a + 1, a + nx + 1, a + nx);
            if (i + j) % 2 == 0 {
                f.push([a, b, c]);
                f.push([a, c, d]);
            } else {
                f.push([a, b, d]);
                f.push([b, c, d]);
            }
        }
    }
    let uvs = f.iter().flat_map(|t: &[usize; 3]| t.map(|k| [v[k].x, v[k].y])).collect();
    TexturedMesh::new(v, f, uvs, None).unwrap()
}

/// Grid lifted into a smooth random height field.
pub fn height_field(nx: usize, ny: usize, seed: u64) -> TexturedMesh {
    let flat = grid(nx, ny, 0.3, seed);
    let mut r = rng(seed ^ 0xabcd);
    let (a, b, c) = (
        r.random_range(0.5..2.0),
        r.random_range(0.5..2.0),
        r.random_range(0.1..0.3),
    );
    let v = flat
        .vertices()
        .iter()
        .map(|p| Vector3::new(p.x, p.y, c * (a * p.x * 3.0).sin() * (b * p.y * 3.0).cos()))
        .collect();
    flat.with_vertices(v).unwrap()
}

/// Open cylinder of radius 0.5 and height 1, centered at the origin.
pub fn cylinder(around: usize, rings: usize) -> TexturedMesh {
    let mut v = Vec::new();
    for j in 0..rings {
        let z = j as f64 / (rings - 1) as f64 - 0.5;
        for i in 0..around {
            let t = std::f64::consts::TAU * i as f64 / around as f64;
            v.push(Vector3::new(0.5 * t.cos(), z, 0.5 * t.sin()));
        }
    }
    let mut f = Vec::new();
    for j in 0..rings - 1 {
        for i in 0..around {
            let a = j * around + i;
            let b = j * around + (i + 1) % around;
            let (c, d) = (b + around, a + around);
            f.push([a, d, c]);
            f.push([a, c, b]);
        }
    }
    TexturedMesh::new(v, f, vec![], None).unwrap()
}

/// Closed UV sphere of radius 0.5 centered at the origin.
pub fn sphere(slices: usize, stacks: usize) -> TexturedMesh {
    let mut v = vec![Vector3::new(0.0, 0.5, 0.0)];
    for j in 1..stacks {
        let phi = std::f64::consts::PI * j as f64 / stacks as f64;
        for i in 0..slices {
            let t = std::f64::consts::TAU * i as f64 / slices as f64;
            v.push(0.5 * Vector3::new(phi.sin() * t.cos(), phi.cos(), phi.sin() * t.sin()));
        }
    }
    v.push(Vector3::new(0.0, -0.5, 0.0));
    let south = v.len() - 1;
    let ring = |j: usize, i: usize| 1 + (j - 1) * slices + i % slices;
    let mut f = Vec::new();
    for i in 0..slices {
        f.push([0, ring(1, i + 1), ring(1, i)]);
        f.push([south, ring(stacks - 1, i), ring(stacks - 1, i + 1)]);
    }
    for j in 1..stacks - 1 {
        for i in 0..slices {
            let (a, b) = (ring(j, i), ring(j, i + 1));
            let (c, d) = (ring(j + 1, i + 1), ring(j + 1, i));
            f.push([a, b, c]);
            f.push([a, c, d]);
        }
    }
    TexturedMesh::new(v, f, vec![], None).unwrap()
}

/// `nx × ny` strip of length 4 and height 1 in the plane.
pub fn bar(nx: usize, ny: usize) -> TexturedMesh {
    let g = grid(nx, ny, 0.0, 0);
    let v = g.vertices().iter().map(|p| Vector3::new(4.0 * p.x, p.y, 0.0)).collect();
    TexturedMesh::new(v, g.faces().to_vec(), vec![], None).unwrap()
}

/// Foreground masks with different outline character.
pub fn mask_fixtures() -> Vec<(&'static str, BinaryMask)> {
    let disk = BinaryMask::from_fn(96, 96, |x, y| {
        let (dx, dy) = (x as f64 - 47.5, y as f64 - 47.5);
        dx * dx + dy * dy < 40.0 * 40.0
    })
    .unwrap();
    let ellipse = BinaryMask::from_fn(120, 80, |x, y| {
        let (dx, dy) = ((x as f64 - 60.0) / 52.0, (y as f64 - 40.0) / 30.0);
        dx * dx + dy * dy < 1.0
    })
    .unwrap();
    let star = BinaryMask::from_fn(100, 100, |x, y| {
        let (dx, dy) = (x as f64 - 50.0, y as f64 - 50.0);
        let r = (dx * dx + dy * dy).sqrt();
        let a = dy.atan2(dx);
        r < 28.0 + 14.0 * (5.0 * a).cos()
    })
    .unwrap();
    let ell = BinaryMask::from_fn(90, 90, |x, y| (10..80).contains(&x) && (10..35).contains(&y) || (10..35).contains(&x) && (10..80).contains(&y)).unwrap();
    let blobs = BinaryMask::from_fn(110, 70, |x, y| {
        let d1 = (x as f64 - 35.0).hypot(y as f64 - 35.0);
        let d2 = (x as f64 - 75.0).hypot(y as f64 - 35.0);
        d1 < 25.0 || d2 < 25.0 || ((35..75).contains(&x) && (28..42).contains(&y))
    })
    .unwrap();
    vec![("disk", disk), ("ellipse", ellipse), ("star", star), ("ell", ell), ("blobs", blobs)]
}

/// A smooth two-color texture for mask meshes.
pub fn stripes(width: usize, height: usize) -> RgbImage {
    let mut img = RgbImage::filled(width, height, [0.0; 3]);
    for y in 0..height {
        for x in 0..width {
            let s = 0.5 + 0.5 * (x as f64 * 0.3).sin() * (y as f64 * 0.2).cos();
            img.set_pixel(x, y, [0.2 + 0.6 * s, 0.3, 0.8 - 0.6 * s]);
        }
    }
    img
}

pub fn mask_mesh(mask: &BinaryMask, samples: usize, textured: bool) -> MaskMesh {
    let image = textured.then(|| stripes(mask.width(), mask.height()));
    let opts = MeshFromMaskOptions {
        interior_samples: samples,
        ..Default::default()
    };
    mesh_from_mask(mask, image.as_ref(), &opts).unwrap()
}

/// One handle at the vertex nearest `handle_at`, one anchor nearest `anchor_at`.
pub fn point_spec(mesh: &TexturedMesh, handle_at: [f64; 3], anchor_at: [f64; 3], d: [f64; 3]) -> DeformationSpec {
    let nearest = |p: [f64; 3]| {
        let p = Vector3::from(p);
        (0..mesh.vertex_count())
            .min_by(|&a, &b| {
                (mesh.vertices()[a] - p)
                    .norm()
                    .total_cmp(&(mesh.vertices()[b] - p).norm())
            })
            .unwrap()
    };
    DeformationSpec::new(
        vec![Handle {
            index: nearest(handle_at),
            displacement: d,
        }],
        vec![Anchor {
            index: nearest(anchor_at),
            target: None,
        }],
    )
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-12);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Answers for `/v1/sds-grad`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SdsBehavior {
    /// Gradient `scale · (image − 0.5)`, `t` drawn from the seed.
    Pull(f64),
    Zeros,
    NonFinite,
    WrongShape,
    Status500,
    Garbage,
    /// `t` outside the requested range.
    BadT,
}

/// Minimal HTTP guidance server on a random local port.
pub struct StubServer {
    pub endpoint: String,
    pub requests: Arc<AtomicUsize>,
    pub log: Arc<Mutex<Vec<(String, Value)>>>,
    server: Arc<tiny_http::Server>,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(behavior: SdsBehavior) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
        let port = server.server_addr().to_ip().unwrap().port();
        let requests = Arc::new(AtomicUsize::new(0));
        let log = Arc::new(Mutex::new(Vec::new()));
        let (s, n, l) = (server.clone(), requests.clone(), log.clone());
        let thread = std::thread::spawn(move || {
            for mut req in s.incoming_requests() {
                n.fetch_add(1, Ordering::SeqCst);
                let mut body = String::new();
                req.as_reader().read_to_string(&mut body).ok();
                let url = req.url().to_string();
                let parsed: Value = serde_json::from_str(&body).unwrap_or(Value::Null);
                l.lock().unwrap().push((url.clone(), parsed.clone()));
                let (status, text) = respond(&url, &parsed, behavior);
                let resp = tiny_http::Response::from_string(text)
                    .with_status_code(status)
                    .with_header("Content-Type: application/json".parse::<tiny_http::Header>().unwrap());
                req.respond(resp).ok();
            }
        });
        Self {
            endpoint: format!("http://127.0.0.1:{port}"),
            requests,
            log,
            server,
            thread: Some(thread),
        }
    }

    pub fn count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn calls_to(&self, path: &str) -> Vec<Value> {
        self.log
            .lock()
            .unwrap()
            .iter()
            .filter(|(u, _)| u == path)
            .map(|(_, v)| v.clone())
            .collect()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }
}

fn floats_b64(v: &[f32]) -> String {
    B64.encode(v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>())
}

fn decode_b64(s: &str) -> Vec<f32> {
    B64.decode(s)
        .unwrap_or_default()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn respond(url: &str, req: &Value, behavior: SdsBehavior) -> (u16, String) {
    match url {
        "/v1/sds-grad" => {
            let w = req["width"].as_u64().unwrap_or(0) as usize;
            let h = req["height"].as_u64().unwrap_or(0) as usize;
            let image = decode_b64(req["image_b64"].as_str().unwrap_or(""));
            let (t0, t1) = (req["t_min"].as_f64().unwrap_or(0.02), req["t_max"].as_f64().unwrap_or(0.98));
            let seed = req["seed"].as_u64().unwrap_or(0);
            let t = t0 + (t1 - t0) * ((seed % 1000) as f64 / 1000.0);
            if image.len() != w * h * 3 {
                return (400, json!({"error": "image size does not match width and height"}).to_string());
            }
            let grad: Vec<f32> = match behavior {
                SdsBehavior::Pull(s) => image.iter().map(|x| s as f32 * (x - 0.5)).collect(),
                SdsBehavior::Zeros | SdsBehavior::BadT => vec![0.0; w * h * 3],
                SdsBehavior::NonFinite => {
                    let mut g = vec![0.0; w * h * 3];
                    g[0] = f32::NAN;
                    g
                }
                SdsBehavior::WrongShape => vec![0.0; w * h * 3 - 3],
                SdsBehavior::Status500 => return (500, json!({"error": "model crashed"}).to_string()),
                SdsBehavior::Garbage => return (200, "not json at all".into()),
            };
            let t = if behavior == SdsBehavior::BadT { 1.5 } else { t };
            (200, json!({"grad_b64": floats_b64(&grad), "t": t}).to_string())
        }
        "/v1/finetune" => {
            let steps = req["steps"].as_u64().unwrap_or(0) as usize;
            let trace: Vec<f64> = (0..steps).map(|i| 1.0 / (1.0 + i as f64)).collect();
            (200, json!({"loss_trace": trace, "adapter_id": "stub-adapter"}).to_string())
        }
        "/v1/giqa-features" => {
            let image = decode_b64(req["image_b64"].as_str().unwrap_or(""));
            let n = (image.len() / 3).max(1) as f32;
            let mut f = [0f32; 4];
            for px in image.chunks_exact(3) {
                f[0] += px[0] / n;
                f[1] += px[1] / n;
                f[2] += px[2] / n;
                f[3] += (px[0] + px[1] + px[2]) * (px[0] + px[1] + px[2]) / (9.0 * n);
            }
            (200, json!({"features_b64": floats_b64(&f), "dim": 4}).to_string())
        }
        _ => (404, json!({"error": "not found"}).to_string()),
    }
}
