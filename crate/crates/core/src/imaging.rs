//! In-memory image containers. Color channels are linear values in [0, 1].

use nalgebra::Vector3;

#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub data: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, fill: [f64; 3]) -> Self {
        Self { width, height, data: vec![fill; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self { width, height, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [f64; 3] {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, c: [f64; 3]) {
        self.data[v * self.width + u] = c;
    }

    pub fn same_shape(&self, other: &ColorImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Bilinear sample at a sub-pixel position, clamped to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Vector3<f64> {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let c = |u, v| Vector3::from(self.get(u, v));
        c(x0, y0) * ((1.0 - fx) * (1.0 - fy))
            + c(x1, y0) * (fx * (1.0 - fy))
            + c(x0, y1) * ((1.0 - fx) * fy)
            + c(x1, y1) * (fx * fy)
    }

    /// One channel as a dense plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().map(|p| p[c]).collect()
    }

    /// Luminance plane (Rec. 601 weights).
    pub fn luminance(&self) -> Vec<f64> {
        self.data.iter().map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> ColorImage {
        let q = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        ColorImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| [q(p[0]), q(p[1]), q(p[2])]).collect(),
        }
    }
}

/// Per-pixel depth in meters with a validity mask. Invalid entries hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DepthMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![0.0; width * height], mask: vec![false; width * height] }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        if self.mask[i] {
            Some(self.values[i])
        } else {
            None
        }
    }

    /// Stores `depth` at (u, v); non-finite or non-positive values clear the pixel.
    pub fn set(&mut self, u: usize, v: usize, depth: f64) {
        let i = v * self.width + u;
        if depth.is_finite() && depth > 0.0 {
            self.values[i] = depth;
            self.mask[i] = true;
        } else {
            self.values[i] = 0.0;
            self.mask[i] = false;
        }
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}
