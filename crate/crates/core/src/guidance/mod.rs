//! Image-space plausibility priors.
//!
//! A provider turns a rendered image into an image-shaped gradient. The
//! optimizer never sees anything else, so the analytic prior used in tests
//! and the remote diffusion client are interchangeable.

mod remote;

use thiserror::Error;

use crate::texture::RgbImage;

pub use remote::{
    request_finetune, request_giqa_features, FinetuneParams, FinetuneReport, GuidanceContext, RemoteSdsProvider,
    ENDPOINT_ENV_VAR,
};

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("guidance transport failure ({endpoint}): {msg}")]
    Transport { endpoint: String, msg: String },

    #[error("malformed guidance response: {msg}")]
    MalformedResponse { msg: String },

    #[error("guidance gradient has {count} non-finite entries")]
    NonFinite { count: usize },

    #[error("guidance server error (HTTP {status}): {msg}")]
    Server { status: u16, msg: String },

    #[error("invalid guidance input: {0}")]
    InvalidInput(String),
}

/// Per-call information handed to a provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuidanceQuery {
    /// Index of the camera the image was rendered from.
    pub view: usize,
    pub iteration: usize,
    /// Seed for any noise the provider draws.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct GuidanceOutput {
    /// `∂ℓ/∂I`, same shape as the input image.
    pub gradient: RgbImage,
    /// Scalar objective, when the prior has one.
    pub loss: Option<f64>,
    /// Diffusion timestep the provider sampled.
    pub t: Option<f64>,
}

pub trait GuidanceProvider: Send {
    fn gradient(&mut self, image: &RgbImage, query: &GuidanceQuery) -> Result<GuidanceOutput, GuidanceError>;

    /// Called once before optimization with renders of the undeformed mesh,
    /// one per camera.
    fn prepare(&mut self, _rest_renders: &[RgbImage]) -> Result<Option<FinetuneReport>, GuidanceError> {
        Ok(None)
    }
}

/// `½‖I − I_target‖²` against one target per view (or one shared target).
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticL2Prior {
    targets: Vec<RgbImage>,
}

impl AnalyticL2Prior {
    pub fn new(target: RgbImage) -> Self {
        Self { targets: vec![target] }
    }

    pub fn per_view(targets: Vec<RgbImage>) -> Self {
        Self { targets }
    }

    pub fn target(&self, view: usize) -> &RgbImage {
        &self.targets[view.min(self.targets.len() - 1)]
    }
}

impl GuidanceProvider for AnalyticL2Prior {
    fn gradient(&mut self, image: &RgbImage, query: &GuidanceQuery) -> Result<GuidanceOutput, GuidanceError> {
        if self.targets.is_empty() {
            return Err(GuidanceError::InvalidInput("analytic prior has no target".into()));
        }
        let target = self.target(query.view);
        if image.dims() != target.dims() {
            return Err(GuidanceError::InvalidInput(format!(
                "image is {}x{}, target is {}x{}",
                image.width(),
                image.height(),
                target.width(),
                target.height()
            )));
        }
        let data: Vec<f64> = image.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
        let gradient = RgbImage::new(image.width(), image.height(), data)
            .map_err(|e| GuidanceError::InvalidInput(e.to_string()))?;
        Ok(GuidanceOutput {
            gradient,
            loss: Some(image.half_squared_distance(target)),
            t: None,
        })
    }
}
