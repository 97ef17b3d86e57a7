use image::codecs::jpeg::JpegEncoder;
use image::imageops::{self, FilterType};
use image::{ExtendedColorType, ImageEncoder};

use super::ClientError;

pub const TARGET_WIDTH: u32 = 640;
pub const TARGET_HEIGHT: u32 = 480;
const JPEG_QUALITY: u8 = 90;

/// Decodes any supported raster, converts it to RGB, resamples it straight to
/// 640x480 (no letterboxing) and re-encodes it as JPEG.
///
/// Images that already have the target size are only re-encoded.
pub fn preprocess_image(raw: &[u8]) -> Result<Vec<u8>, ClientError> {
    let decoded = image::load_from_memory(raw).map_err(|e| ClientError::Decode(e.to_string()))?;
    let mut rgb = decoded.to_rgb8();
    if rgb.dimensions() != (TARGET_WIDTH, TARGET_HEIGHT) {
        rgb = imageops::resize(&rgb, TARGET_WIDTH, TARGET_HEIGHT, FilterType::Triangle);
    }
    let mut out = Vec::new();
    JpegEncoder::new_with_quality(&mut out, JPEG_QUALITY)
        .write_image(rgb.as_raw(), TARGET_WIDTH, TARGET_HEIGHT, ExtendedColorType::Rgb8)
        .map_err(|e| ClientError::Decode(e.to_string()))?;
    Ok(out)
}
