//! Segmentation-overlay rendering.

use super::image::{Mask, RgbImage};
use super::EncoderError;

/// Twelve well-separated colors, cycled by mask index.
pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayStyle {
    pub alpha: f64,
    pub palette: Vec<[u8; 3]>,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            palette: PALETTE.to_vec(),
        }
    }
}

impl OverlayStyle {
    pub fn color(&self, index: usize) -> [u8; 3] {
        self.palette[index % self.palette.len()]
    }
}

/// Alpha-blends each mask onto a copy of `image`.
///
/// Masks are painted largest first, so smaller regions stay visible on top;
/// the k-th mask in that order gets `style.color(k)`.
pub fn render_overlay(
    image: &RgbImage,
    masks: &[Mask],
    style: &OverlayStyle,
) -> Result<RgbImage, EncoderError> {
    for (k, m) in masks.iter().enumerate() {
        if m.width != image.width() || m.height != image.height() {
            return Err(EncoderError::Input(format!(
                "mask {k} is {}x{}, image is {}x{}",
                m.width,
                m.height,
                image.width(),
                image.height()
            )));
        }
    }
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by_key(|&k| std::cmp::Reverse(masks[k].area()));

    let alpha = style.alpha.clamp(0.0, 1.0);
    let mut out = image.clone();
    for (k, &mask_index) in order.iter().enumerate() {
        let mask = &masks[mask_index];
        let color = style.color(k);
        for y in 0..image.height() {
            for x in 0..image.width() {
                if !mask.get(x, y) {
                    continue;
                }
                let p = out.pixel(x, y);
                let blended = std::array::from_fn(|c| {
                    (alpha * color[c] as f64 + (1.0 - alpha) * p[c] as f64)
                        .round()
                        .clamp(0.0, 255.0) as u8
                });
                out.set_pixel(x, y, blended);
            }
        }
    }
    Ok(out)
}
