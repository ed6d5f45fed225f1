use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{GuidanceError, GuidanceOutput, GuidanceProvider, GuidanceQuery};
use crate::render::ViewMode;
use crate::texture::RgbImage;

/// Fallback for the server URL when none is given explicitly.
pub const ENDPOINT_ENV_VAR: &str = "APAP_GUIDANCE_ENDPOINT";

const MAX_RESPONSE_BYTES: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceContext {
    pub prompt: String,
    pub cfg_scale: f64,
    pub t_range: (f64, f64),
    /// Name of the timestep weighting `w(t)` the server applies.
    pub weighting_mode: String,
    pub timeout_secs: u64,
}

impl Default for GuidanceContext {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            cfg_scale: 100.0,
            t_range: (0.02, 0.98),
            weighting_mode: "uniform".into(),
            timeout_secs: 600,
        }
    }
}

impl GuidanceContext {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let (lo, hi) = self.t_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(GuidanceError::InvalidInput(format!(
                "t_range must lie inside (0, 1) with t_min <= t_max, got ({lo}, {hi})"
            )));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(GuidanceError::InvalidInput(format!(
                "cfg_scale must be non-negative, got {}",
                self.cfg_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneParams {
    pub steps: usize,
    pub lr: f64,
    pub lora_rank: usize,
}

impl FinetuneParams {
    /// 60 steps for single-view planar meshes, 200 for four-view meshes.
    pub fn for_view_mode(mode: ViewMode) -> Self {
        Self {
            steps: match mode {
                ViewMode::Planar => 60,
                ViewMode::FourView => 200,
            },
            lr: 5e-4,
            lora_rank: 16,
        }
    }
}

impl Default for FinetuneParams {
    fn default() -> Self {
        Self::for_view_mode(ViewMode::Planar)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub adapter_id: String,
    pub loss_trace: Vec<f64>,
    pub steps: usize,
    pub lr: f64,
    pub lora_rank: usize,
}

#[derive(Serialize)]
struct SdsGradRequest<'a> {
    width: usize,
    height: usize,
    image_b64: String,
    prompt: &'a str,
    cfg_scale: f64,
    t_min: f64,
    t_max: f64,
    weighting_mode: &'a str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    adapter_id: Option<&'a str>,
}

#[derive(Deserialize)]
struct SdsGradResponse {
    grad_b64: String,
    t: f64,
}

#[derive(Serialize)]
struct FinetuneRequest<'a> {
    images_b64: Vec<String>,
    width: usize,
    height: usize,
    steps: usize,
    lr: f64,
    lora_rank: usize,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct FinetuneResponse {
    loss_trace: Vec<f64>,
    adapter_id: String,
}

#[derive(Serialize)]
struct GiqaRequest {
    image_b64: String,
    width: usize,
    height: usize,
}

#[derive(Deserialize)]
struct GiqaResponse {
    features_b64: String,
    dim: usize,
}

#[derive(Deserialize)]
struct ServerErrorBody {
    error: String,
}

struct Client {
    endpoint: String,
    agent: ureq::Agent,
}

impl Client {
    fn new(endpoint: &str, timeout_secs: u64) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(timeout_secs.max(1))))
            .build();
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            agent: ureq::Agent::new_with_config(config),
        }
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, GuidanceError> {
        let url = format!("{}{}", self.endpoint, path);
        let transport = |msg: String| GuidanceError::Transport {
            endpoint: url.clone(),
            msg,
        };
        let payload = serde_json::to_string(body).map_err(|e| GuidanceError::InvalidInput(e.to_string()))?;
        let mut resp = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json")
            .send(payload)
            .map_err(|e| transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(MAX_RESPONSE_BYTES)
            .read_to_string()
            .map_err(|e| transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            let msg = serde_json::from_str::<ServerErrorBody>(&text)
                .map(|b| b.error)
                .unwrap_or(text);
            return Err(GuidanceError::Server { status, msg });
        }
        serde_json::from_str(&text).map_err(|e| GuidanceError::MalformedResponse {
            msg: format!("{path}: {e}"),
        })
    }
}

fn decode_floats(b64: &str, field: &str) -> Result<Vec<f32>, GuidanceError> {
    let bytes = B64.decode(b64).map_err(|e| GuidanceError::MalformedResponse {
        msg: format!("{field} is not valid base64: {e}"),
    })?;
    if bytes.len() % 4 != 0 {
        return Err(GuidanceError::MalformedResponse {
            msg: format!("{field} has {} bytes, not a whole number of float32 values", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Score-distillation gradients from a diffusion server.
pub struct RemoteSdsProvider {
    client: Client,
    context: GuidanceContext,
    finetune: Option<FinetuneParams>,
    adapter_id: Option<String>,
}

impl RemoteSdsProvider {
    pub fn new(endpoint: &str, context: GuidanceContext) -> Result<Self, GuidanceError> {
        context.validate()?;
        Ok(Self {
            client: Client::new(endpoint, context.timeout_secs),
            context,
            finetune: None,
            adapter_id: None,
        })
    }

    /// Fine-tunes an adapter on the rest renders in [`GuidanceProvider::prepare`]
    /// and uses it for every later gradient request.
    pub fn with_finetune(mut self, params: FinetuneParams) -> Self {
        self.finetune = Some(params);
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.client.endpoint
    }

    pub fn context(&self) -> &GuidanceContext {
        &self.context
    }

    pub fn adapter_id(&self) -> Option<&str> {
        self.adapter_id.as_deref()
    }
}

impl GuidanceProvider for RemoteSdsProvider {
    fn gradient(&mut self, image: &RgbImage, query: &GuidanceQuery) -> Result<GuidanceOutput, GuidanceError> {
        let (w, h) = image.dims();
        let request = SdsGradRequest {
            width: w,
            height: h,
            image_b64: B64.encode(image.to_f32_le_bytes()),
            prompt: &self.context.prompt,
            cfg_scale: self.context.cfg_scale,
            t_min: self.context.t_range.0,
            t_max: self.context.t_range.1,
            weighting_mode: &self.context.weighting_mode,
            seed: query.seed,
            adapter_id: self.adapter_id.as_deref(),
        };
        let resp: SdsGradResponse = self.client.post("/v1/sds-grad", &request)?;
        let floats = decode_floats(&resp.grad_b64, "grad_b64")?;
        if floats.len() != w * h * 3 {
            return Err(GuidanceError::MalformedResponse {
                msg: format!(
                    "gradient dims: expected {h}x{w}x3 ({} floats), received {} floats",
                    w * h * 3,
                    floats.len()
                ),
            });
        }
        let (lo, hi) = self.context.t_range;
        if !(resp.t >= lo && resp.t <= hi) {
            return Err(GuidanceError::MalformedResponse {
                msg: format!("sampled t = {} outside [{lo}, {hi}]", resp.t),
            });
        }
        let bad = floats.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(GuidanceError::NonFinite { count: bad });
        }
        let gradient = RgbImage::new(w, h, floats.into_iter().map(f64::from).collect())
            .map_err(|e| GuidanceError::MalformedResponse { msg: e.to_string() })?;
        Ok(GuidanceOutput {
            gradient,
            loss: None,
            t: Some(resp.t),
        })
    }

    fn prepare(&mut self, rest_renders: &[RgbImage]) -> Result<Option<FinetuneReport>, GuidanceError> {
        let Some(params) = self.finetune.clone() else {
            return Ok(None);
        };
        let report = request_finetune(self.endpoint(), rest_renders, &params, &self.context.prompt)?;
        self.adapter_id = Some(report.adapter_id.clone());
        Ok(Some(report))
    }
}

/// Asks the server to fine-tune a low-rank adapter on `images`.
pub fn request_finetune(
    endpoint: &str,
    images: &[RgbImage],
    params: &FinetuneParams,
    prompt: &str,
) -> Result<FinetuneReport, GuidanceError> {
    let Some(first) = images.first() else {
        return Err(GuidanceError::InvalidInput("fine-tuning needs at least one image".into()));
    };
    let (w, h) = first.dims();
    if let Some(bad) = images.iter().find(|i| i.dims() != (w, h)) {
        return Err(GuidanceError::InvalidInput(format!(
            "fine-tuning images differ in size: {w}x{h} vs {}x{}",
            bad.width(),
            bad.height()
        )));
    }
    if params.steps == 0 || !(params.lr > 0.0) || params.lora_rank == 0 {
        return Err(GuidanceError::InvalidInput(format!("invalid fine-tuning parameters {params:?}")));
    }
    let request = FinetuneRequest {
        images_b64: images.iter().map(|i| B64.encode(i.to_f32_le_bytes())).collect(),
        width: w,
        height: h,
        steps: params.steps,
        lr: params.lr,
        lora_rank: params.lora_rank,
        prompt,
    };
    let client = Client::new(endpoint, GuidanceContext::default().timeout_secs);
    let resp: FinetuneResponse = client.post("/v1/finetune", &request)?;
    if resp.loss_trace.len() != params.steps {
        return Err(GuidanceError::MalformedResponse {
            msg: format!(
                "loss_trace: expected {} entries, received {}",
                params.steps,
                resp.loss_trace.len()
            ),
        });
    }
    Ok(FinetuneReport {
        adapter_id: resp.adapter_id,
        loss_trace: resp.loss_trace,
        steps: params.steps,
        lr: params.lr,
        lora_rank: params.lora_rank,
    })
}

/// Feature embedding of one image, used for k-NN quality scores.
pub fn request_giqa_features(endpoint: &str, image: &RgbImage) -> Result<Vec<f64>, GuidanceError> {
    let request = GiqaRequest {
        image_b64: B64.encode(image.to_f32_le_bytes()),
        width: image.width(),
        height: image.height(),
    };
    let client = Client::new(endpoint, GuidanceContext::default().timeout_secs);
    let resp: GiqaResponse = client.post("/v1/giqa-features", &request)?;
    let floats = decode_floats(&resp.features_b64, "features_b64")?;
    if floats.len() != resp.dim {
        return Err(GuidanceError::MalformedResponse {
            msg: format!("features: expected dim {}, received {} floats", resp.dim, floats.len()),
        });
    }
    if floats.iter().any(|v| !v.is_finite()) {
        return Err(GuidanceError::NonFinite {
            count: floats.iter().filter(|v| !v.is_finite()).count(),
        });
    }
    Ok(floats.into_iter().map(f64::from).collect())
}
