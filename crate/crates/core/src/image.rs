//! Grayscale image buffer and the geometric transforms used by the
//! augmentation pipeline and the synthetic renderer.

use crate::error::{Error, Result};

/// Row-major grayscale image with f32 samples, nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "image buffer holds {} samples, needs {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Axis-aligned crop; the window must lie inside the image.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<GrayImage> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Data(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            out.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(GrayImage {
            width: w,
            height: h,
            data: out,
        })
    }

    pub fn flip_horizontal(&self) -> GrayImage {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    /// Bilinear resample with corner pixels of source and target aligned.
    /// A 1-wide or 1-tall source broadcasts along that axis.
    pub fn resize_bilinear(&self, w: usize, h: usize) -> Result<GrayImage> {
        if w == 0 || h == 0 {
            return Err(Error::Shape("resize target must be non-empty".into()));
        }
        if w == self.width && h == self.height {
            return Ok(self.clone());
        }
        let xt = axis_taps(self.width, w);
        let yt = axis_taps(self.height, h);
        let mut out = vec![0.0f32; w * h];
        for (ty, &(y0, y1, wy)) in yt.iter().enumerate() {
            let r0 = &self.data[y0 * self.width..(y0 + 1) * self.width];
            let r1 = &self.data[y1 * self.width..(y1 + 1) * self.width];
            let orow = &mut out[ty * w..(ty + 1) * w];
            for (tx, &(x0, x1, wx)) in xt.iter().enumerate() {
                let top = r0[x0] * (1.0 - wx) + r0[x1] * wx;
                let bot = r1[x0] * (1.0 - wx) + r1[x1] * wx;
                orow[tx] = top * (1.0 - wy) + bot * wy;
            }
        }
        GrayImage::from_vec(w, h, out)
    }

    /// Separable Gaussian blur, kernel truncated at radius ceil(3 sigma),
    /// edges replicated. Sigma <= 0 returns the image unchanged.
    pub fn gaussian_blur(&self, sigma: f32) -> GrayImage {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        let denom = 2.0 * sigma * sigma;
        for i in -radius..=radius {
            kernel.push((-((i * i) as f32) / denom).exp());
        }
        let sum: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|v| *v /= sum);

        let wi = self.width as isize;
        let hi = self.height as isize;
        let mut horiz = vec![0.0f32; self.data.len()];
        for y in 0..self.height {
            let row = &self.data[y * self.width..(y + 1) * self.width];
            for x in 0..wi {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x + ki as isize - radius).clamp(0, wi - 1) as usize;
                    acc += kv * row[sx];
                }
                horiz[y * self.width + x as usize] = acc;
            }
        }
        let mut out = vec![0.0f32; self.data.len()];
        for y in 0..hi {
            for x in 0..self.width {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y + ki as isize - radius).clamp(0, hi - 1) as usize;
                    acc += kv * horiz[sy as usize * self.width + x];
                }
                out[y as usize * self.width + x] = acc;
            }
        }
        GrayImage {
            width: self.width,
            height: self.height,
            data: out,
        }
    }
}

/// Center-aligned bilinear upsample of a square scalar field to a square
/// pixel grid. Grid cell (i, j) is treated as a sample at the center of its
/// pixel footprint, so field boundaries land where they belong instead of
/// being stretched to the image corners like [`GrayImage::resize_bilinear`].
pub fn upsample_field(field: &[f32], grid: usize, side: usize) -> Result<Vec<f32>> {
    if grid == 0 || field.len() != grid * grid {
        return Err(Error::Shape(format!(
            "{} field values do not fill a {grid}x{grid} grid",
            field.len()
        )));
    }
    if side < grid {
        return Err(Error::Shape(format!("cannot upsample a {grid} grid to side {side}")));
    }
    let scale = grid as f32 / side as f32;
    let tap = |t: usize| -> (usize, usize, f32) {
        let pos = ((t as f32 + 0.5) * scale - 0.5).clamp(0.0, (grid - 1) as f32);
        let i0 = (pos.floor() as usize).min(grid - 1);
        (i0, (i0 + 1).min(grid - 1), pos - i0 as f32)
    };
    let taps: Vec<(usize, usize, f32)> = (0..side).map(tap).collect();
    let mut out = vec![0.0f32; side * side];
    for (ty, &(y0, y1, wy)) in taps.iter().enumerate() {
        for (tx, &(x0, x1, wx)) in taps.iter().enumerate() {
            let top = field[y0 * grid + x0] * (1.0 - wx) + field[y0 * grid + x1] * wx;
            let bot = field[y1 * grid + x0] * (1.0 - wx) + field[y1 * grid + x1] * wx;
            out[ty * side + tx] = top * (1.0 - wy) + bot * wy;
        }
    }
    Ok(out)
}

/// (lo index, hi index, hi weight) per target position, align-corners.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|t| {
            if dst == 1 || src == 1 {
                // single row/column: take the source midpoint
                let pos = (src - 1) as f32 / 2.0;
                let i0 = pos.floor() as usize;
                (i0, (i0 + 1).min(src - 1), pos - i0 as f32)
            } else {
                let pos = t as f32 * (src - 1) as f32 / (dst - 1) as f32;
                let i0 = (pos.floor() as usize).min(src - 1);
                (i0, (i0 + 1).min(src - 1), pos - i0 as f32)
            }
        })
        .collect()
}
