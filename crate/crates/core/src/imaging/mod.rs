//! Pixel-level warping, compositing and image-quality metrics.

mod image;
mod metrics;
mod warp;

pub use self::image::Image;
pub use metrics::{lssim, mask_bbox, mask_iou, ssim};
pub use warp::{blend, composite, warp, CompositeResult};
