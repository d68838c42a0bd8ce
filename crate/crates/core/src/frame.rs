//! RGB frames and context-padded patch cropping.

use std::path::Path;

use image::RgbImage;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// An 8-bit RGB frame with its cached mean color.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    image: RgbImage,
    mean: [f32; 3],
}

impl Frame {
    pub fn new(image: RgbImage) -> Self {
        let n = (image.width() as f64 * image.height() as f64).max(1.0);
        let mut sum = [0.0f64; 3];
        for p in image.pixels() {
            for (s, &v) in sum.iter_mut().zip(&p.0) {
                *s += v as f64;
            }
        }
        let mean = sum.map(|s| (s / n / 255.0) as f32);
        Self { image, mean }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(image::open(path)?.to_rgb8()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.image.save(path)?;
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }

    pub fn mean_color(&self) -> [f32; 3] {
        self.mean
    }

    /// Pixel in `[0, 1]`, or the mean color outside the frame.
    fn fetch(&self, x: i64, y: i64) -> [f32; 3] {
        if x < 0 || y < 0 || x >= self.width() as i64 || y >= self.height() as i64 {
            return self.mean;
        }
        self.image.get_pixel(x as u32, y as u32).0.map(|v| v as f32 / 255.0)
    }

    fn bilinear(&self, x: f64, y: f64) -> [f32; 3] {
        let (x0, y0) = (x.floor(), y.floor());
        let (tx, ty) = ((x - x0) as f32, (y - y0) as f32);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let p00 = self.fetch(x0, y0);
        let p10 = self.fetch(x0 + 1, y0);
        let p01 = self.fetch(x0, y0 + 1);
        let p11 = self.fetch(x0 + 1, y0 + 1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] + (p10[c] - p00[c]) * tx;
            let bottom = p01[c] + (p11[c] - p01[c]) * tx;
            out[c] = top + (bottom - top) * ty;
        }
        out
    }
}

/// A frame-space rectangle that a patch was sampled from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub side_x: f64,
    pub side_y: f64,
}

impl CropWindow {
    pub fn square(cx: f64, cy: f64, side: f64) -> Self {
        Self { cx, cy, side_x: side, side_y: side }
    }

    /// Frame coordinates of a patch-pixel position for a patch of `out` pixels.
    pub fn to_frame(&self, px: f64, py: f64, out: usize) -> (f64, f64) {
        let n = out as f64;
        (
            self.cx + (px - n / 2.0) * self.side_x / n,
            self.cy + (py - n / 2.0) * self.side_y / n,
        )
    }

    pub fn to_patch(&self, fx: f64, fy: f64, out: usize) -> (f64, f64) {
        let n = out as f64;
        (
            (fx - self.cx) * n / self.side_x + n / 2.0,
            (fy - self.cy) * n / self.side_y + n / 2.0,
        )
    }
}

#[derive(Clone, Debug)]
pub struct ImagePatch {
    /// `out × out × 3` values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub window: CropWindow,
}

/// Side of the context-padded square around `bbox`: `sqrt((w+2p)(h+2p))`
/// with margin `p = context_factor · (w + h) / 2`.
pub fn context_side(bbox: &BoundingBox, context_factor: f64) -> f64 {
    let p = context_factor * (bbox.width + bbox.height) / 2.0;
    ((bbox.width + 2.0 * p) * (bbox.height + 2.0 * p)).sqrt()
}

/// Resample `window` of `frame` to an `out × out` patch by bilinear
/// interpolation; area outside the frame takes the frame mean color.
pub fn crop_window(frame: &Frame, window: CropWindow, out: usize) -> ImagePatch {
    let n = out as f64;
    let mut data = Vec::with_capacity(out * out * 3);
    for v in 0..out {
        let fy = window.cy + ((v as f64 + 0.5) / n - 0.5) * window.side_y - 0.5;
        for u in 0..out {
            let fx = window.cx + ((u as f64 + 0.5) / n - 0.5) * window.side_x - 0.5;
            data.extend_from_slice(&frame.bilinear(fx, fy));
        }
    }
    ImagePatch {
        pixels: Tensor::new([out, out, 3], data).expect("patch shape"),
        window,
    }
}

/// Square crop centered on `bbox` with side `scale · context_side(bbox)`,
/// resized to `out × out`.
pub fn crop_patch(frame: &Frame, bbox: &BoundingBox, context_factor: f64, scale: f64, out: usize) -> Result<ImagePatch> {
    if !bbox.is_valid() {
        return Err(Error::TrackingFailure(format!("cannot crop around degenerate box {bbox:?}")));
    }
    let side = scale * context_side(bbox, context_factor);
    Ok(crop_window(frame, CropWindow::square(bbox.cx, bbox.cy, side), out))
}
