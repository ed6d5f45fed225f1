//! Flat textured rasterization with soft silhouettes, and its backward pass.

mod backward;
mod camera;
mod raster;

pub use backward::rasterize_backward;
pub use camera::{
    camera_azimuth_deg, canonical_cameras, Camera, Projection, ViewMode, DEFAULT_RESOLUTION, ORBIT_DISTANCE,
    ORBIT_FOV_DEG, PLANAR_FRAME_EXTENT,
};
pub use raster::{
    rasterize, rasterize_vertices, RenderOutput, RenderSettings, SilhouetteEdge, SoftSample, SOFT_CUTOFF_SIGMAS,
};
