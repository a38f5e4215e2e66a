//! Images, face boxes and bilinear patch extraction at real-valued landmark
//! locations.
//!
//! Pixel `(row, col)` has its centre at continuous coordinate
//! `(x = col, y = row)`. Reads outside the image clamp to the nearest edge
//! pixel.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shape::LandmarkSet;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("image buffer has {found} values, expected {expected}")]
    BufferSize { expected: usize, found: usize },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("invalid face box {0:?}")]
    InvalidBox(FaceBox),
}

/// Detector rectangle `(x, y, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl FaceBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn center(&self) -> [f64; 2] {
        [self.x + self.w / 2.0, self.y + self.h / 2.0]
    }

    /// Side length used to normalise landmark increments.
    pub fn side(&self) -> f64 {
        self.w.max(self.h)
    }

    pub fn is_valid(&self) -> bool {
        self.w.is_finite() && self.h.is_finite() && self.x.is_finite() && self.y.is_finite() && self.w > 0.0 && self.h > 0.0
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    /// Landmark bounding box grown by `expand` of its size on every side.
    pub fn around(landmarks: &LandmarkSet, expand: f64) -> Self {
        let [x0, y0, x1, y1] = landmarks.bounds();
        let (w, h) = (x1 - x0, y1 - y0);
        Self {
            x: x0 - expand * w,
            y: y0 - expand * h,
            w: w * (1.0 + 2.0 * expand),
            h: h * (1.0 + 2.0 * expand),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
    face_box: FaceBox,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>, face_box: FaceBox) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::Channels(channels));
        }
        if pixels.len() != width * height * channels || width == 0 || height == 0 {
            return Err(ImageError::BufferSize {
                expected: width * height * channels,
                found: pixels.len(),
            });
        }
        let img = Self {
            width,
            height,
            channels,
            pixels,
            face_box,
        };
        if !img.box_intersects(&face_box) {
            return Err(ImageError::InvalidBox(face_box));
        }
        Ok(img)
    }

    fn box_intersects(&self, b: &FaceBox) -> bool {
        b.is_valid() && b.x < self.width as f64 && b.y < self.height as f64 && b.x + b.w > 0.0 && b.y + b.h > 0.0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn face_box(&self) -> FaceBox {
        self.face_box
    }

    pub fn with_face_box(mut self, face_box: FaceBox) -> Result<Self, ImageError> {
        if !self.box_intersects(&face_box) {
            return Err(ImageError::InvalidBox(face_box));
        }
        self.face_box = face_box;
        Ok(self)
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.pixels[(row * self.width + col) * self.channels + ch]
    }

    /// Bilinear read with clamp-to-edge; writes one value per channel.
    #[inline]
    pub fn sample_into(&self, x: f64, y: f64, out: &mut [f64]) {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let c = self.channels;
        let row0 = y0 * self.width;
        let row1 = y1 * self.width;
        for (ch, o) in out.iter_mut().enumerate().take(c) {
            let p00 = self.pixels[(row0 + x0) * c + ch];
            let p01 = self.pixels[(row0 + x1) * c + ch];
            let p10 = self.pixels[(row1 + x0) * c + ch];
            let p11 = self.pixels[(row1 + x1) * c + ch];
            let top = p00 + fx * (p01 - p00);
            let bot = p10 + fx * (p11 - p10);
            *o = top + fy * (bot - top);
        }
    }

    /// Shifts content and face box by whole pixels, filling uncovered pixels
    /// with the nearest edge value.
    pub fn shifted(&self, dx: i64, dy: i64) -> Image {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        let mut buf = vec![0.0; self.channels];
        for row in 0..self.height {
            for col in 0..self.width {
                self.sample_into(col as f64 - dx as f64, row as f64 - dy as f64, &mut buf);
                pixels.extend_from_slice(&buf);
            }
        }
        Image {
            pixels,
            face_box: self.face_box.translated(dx as f64, dy as f64),
            ..self.clone()
        }
    }
}

/// Odd patch side length plus channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchConfig {
    pub fn new(patch_size: usize, channels: usize) -> Self {
        assert!(patch_size % 2 == 1, "patch size must be odd");
        Self { patch_size, channels }
    }

    pub fn radius(&self) -> usize {
        self.patch_size / 2
    }
}

/// Samples a `p × p × C` patch centred on `center`.
pub fn extract_patch(image: &Image, center: [f64; 2], cfg: &PatchConfig) -> Tensor {
    let p = cfg.patch_size;
    let c = image.channels();
    let r = cfg.radius() as f64;
    let mut data = vec![0.0; p * p * c];
    for row in 0..p {
        let y = center[1] - r + row as f64;
        for col in 0..p {
            let x = center[0] - r + col as f64;
            image.sample_into(x, y, &mut data[(row * p + col) * c..][..c]);
        }
    }
    Tensor::new(vec![p, p, c], data).expect("patch dims are positive")
}

/// One patch per landmark, in landmark order.
pub fn extract_patch_set(image: &Image, theta: &LandmarkSet, cfg: &PatchConfig) -> Vec<Tensor> {
    theta.points().iter().map(|&pt| extract_patch(image, pt, cfg)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizeConfig {
    pub face_size: usize,
    /// Crop margin added on each side, as a fraction of the box side.
    pub margin: f64,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self {
            face_size: 256,
            margin: 0.1,
        }
    }
}

/// `raw = offset + scale · normalized`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub offset: [f64; 2],
    pub scale: f64,
}

impl SimilarityMap {
    pub const IDENTITY: SimilarityMap = SimilarityMap {
        offset: [0.0, 0.0],
        scale: 1.0,
    };

    pub fn to_raw(&self, p: [f64; 2]) -> [f64; 2] {
        [self.offset[0] + self.scale * p[0], self.offset[1] + self.scale * p[1]]
    }

    pub fn to_normalized(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.offset[0]) / self.scale, (p[1] - self.offset[1]) / self.scale]
    }

    pub fn landmarks_to_raw(&self, l: &LandmarkSet) -> LandmarkSet {
        l.map(|p| self.to_raw(p))
    }

    pub fn landmarks_to_normalized(&self, l: &LandmarkSet) -> LandmarkSet {
        l.map(|p| self.to_normalized(p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFace {
    pub image: Image,
    pub map: SimilarityMap,
}

/// Crops a square around the face box (grown by the configured margin) and
/// resamples it to `face_size × face_size`. The returned image carries the
/// face box in normalised coordinates.
pub fn normalize_face(image: &Image, cfg: &NormalizeConfig) -> Result<NormalizedFace, ImageError> {
    let b = image.face_box();
    if !b.is_valid() {
        return Err(ImageError::InvalidBox(b));
    }
    let n = cfg.face_size;
    let side = b.side() * (1.0 + 2.0 * cfg.margin);
    let center = b.center();
    let map = SimilarityMap {
        offset: [center[0] - side / 2.0, center[1] - side / 2.0],
        scale: side / n as f64,
    };
    let c = image.channels();
    let mut pixels = vec![0.0; n * n * c];
    for row in 0..n {
        for col in 0..n {
            let [x, y] = map.to_raw([col as f64, row as f64]);
            image.sample_into(x, y, &mut pixels[(row * n + col) * c..][..c]);
        }
    }
    let tl = map.to_normalized([b.x, b.y]);
    let face_box = FaceBox::new(tl[0], tl[1], b.w / map.scale, b.h / map.scale);
    Ok(NormalizedFace {
        image: Image::new(n, n, c, pixels, face_box)?,
        map,
    })
}
