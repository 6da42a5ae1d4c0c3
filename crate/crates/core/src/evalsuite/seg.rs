//! Linear segmentation on frozen patch embeddings: one linear unit per
//! structure (F weights + 1 bias), patch logits bilinearly upsampled to
//! pixel resolution and thresholded at sigmoid 0.5.
//!
//! The head is trained at patch resolution against the fraction of
//! structure pixels inside each patch; only evaluation upsamples. A pixel
//! logit after bilinear upsampling is the same linear unit applied to the
//! interpolated embedding, so no gradient ever needs to flow through the
//! resampler.

use crate::error::{Error, Result};
use crate::image::upsample_field;
use crate::numerics::{adamw_step, AdamHyper, AdamState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl SegConfig {
    pub fn desk_default() -> SegConfig {
        SegConfig { epochs: 400, lr: 0.05, weight_decay: 1e-4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("segmentation head needs at least one epoch".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("seg lr {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "seg weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One image's frozen patch grid and its pixel-level structure mask.
#[derive(Clone, Debug)]
pub struct SegSample {
    /// [N, D] patch embeddings in row-major grid order.
    pub patches: Tensor<f32>,
    /// side*side boolean pixels.
    pub mask: Vec<bool>,
    pub side: usize,
}

impl SegSample {
    /// Token grid side, requiring a square grid that tiles the image.
    pub fn grid_side(&self) -> Result<usize> {
        let (n, _) = self.patches.dims2()?;
        let h = (n as f64).sqrt().round() as usize;
        if h * h != n {
            return Err(Error::Shape(format!("{n} patches do not form a square grid")));
        }
        if self.mask.len() != self.side * self.side {
            return Err(Error::Shape(format!(
                "mask holds {} pixels for side {}",
                self.mask.len(),
                self.side
            )));
        }
        if h == 0 || self.side % h != 0 {
            return Err(Error::Shape(format!(
                "image side {} is not a multiple of grid side {h}",
                self.side
            )));
        }
        Ok(h)
    }

    /// Fraction of structure pixels under each patch.
    fn patch_fractions(&self) -> Result<Vec<f32>> {
        let h = self.grid_side()?;
        let cell = self.side / h;
        let mut out = vec![0.0f32; h * h];
        for y in 0..self.side {
            for x in 0..self.side {
                if self.mask[y * self.side + x] {
                    out[(y / cell) * h + (x / cell)] += 1.0;
                }
            }
        }
        let area = (cell * cell) as f32;
        out.iter_mut().for_each(|v| *v /= area);
        Ok(out)
    }
}

/// Linear unit over patch embeddings; F weights and one bias.
#[derive(Clone, Debug, PartialEq)]
pub struct SegHead {
    pub weights: Vec<f32>,
    pub bias: f32,
}

impl SegHead {
    pub fn param_count(&self) -> usize {
        self.weights.len() + 1
    }

    pub fn patch_logits(&self, patches: &Tensor<f32>) -> Result<Vec<f32>> {
        let (n, d) = patches.dims2()?;
        if d != self.weights.len() {
            return Err(Error::Shape(format!(
                "head width {} does not match embedding width {d}",
                self.weights.len()
            )));
        }
        let data = patches.data();
        Ok((0..n)
            .map(|i| {
                data[i * d..(i + 1) * d]
                    .iter()
                    .zip(&self.weights)
                    .map(|(&e, &w)| e * w)
                    .sum::<f32>()
                    + self.bias
            })
            .collect())
    }

    /// Pixel mask: bilinearly upsampled patch logits, sigmoid >= 0.5.
    pub fn pixel_mask(&self, patches: &Tensor<f32>, side: usize) -> Result<Vec<bool>> {
        let logits = self.patch_logits(patches)?;
        let h = (logits.len() as f64).sqrt().round() as usize;
        if h * h != logits.len() {
            return Err(Error::Shape(format!(
                "{} patch logits do not form a square grid",
                logits.len()
            )));
        }
        let up = upsample_field(&logits, h, side)?;
        Ok(up.iter().map(|&z| 1.0 / (1.0 + (-z).exp()) >= 0.5).collect())
    }
}

/// Fit one structure's linear unit by full-batch gradient descent on the
/// patch-fraction targets pooled across the training images. Returns the
/// head and the per-epoch loss trace.
pub fn train_seg_linear(train: &[SegSample], cfg: &SegConfig) -> Result<(SegHead, Vec<f64>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training images for the segmentation head".into()));
    }
    let (_, d) = train[0].patches.dims2()?;
    let mut xs: Vec<f32> = Vec::new();
    let mut ys: Vec<f32> = Vec::new();
    for sample in train {
        let (_, di) = sample.patches.dims2()?;
        if di != d {
            return Err(Error::Shape(format!("embedding widths differ: {di} vs {d}")));
        }
        xs.extend_from_slice(sample.patches.data());
        ys.extend(sample.patch_fractions()?);
    }
    if ys.iter().all(|&f| f == 0.0) {
        return Err(Error::Data(
            "structure is empty across the whole training set".into(),
        ));
    }
    let n = ys.len();
    let mut params = vec![0.0f32; d + 1];
    let mut grads = vec![0.0f32; d + 1];
    let mut state = AdamState::<f32>::new(d + 1);
    let hyper = AdamHyper::with_decay(cfg.lr as f32, cfg.weight_decay as f32);
    let inv_n = 1.0 / n as f64;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        grads.fill(0.0);
        let mut loss = 0.0f64;
        for i in 0..n {
            let x = &xs[i * d..(i + 1) * d];
            let z = x.iter().zip(&params[..d]).map(|(&e, &w)| (e * w) as f64).sum::<f64>()
                + params[d] as f64;
            let p = 1.0 / (1.0 + (-z).exp());
            let y = ys[i] as f64;
            loss -= inv_n
                * (y * p.max(1e-12).ln() + (1.0 - y) * (1.0 - p).max(1e-12).ln());
            let g = ((p - y) * inv_n) as f32;
            for (gw, &e) in grads[..d].iter_mut().zip(x) {
                *gw += g * e;
            }
            grads[d] += g;
        }
        adamw_step(&mut params, &grads, &mut state, &hyper, (epoch + 1) as u64)?;
        losses.push(loss);
    }
    let bias = params[d];
    params.truncate(d);
    Ok((SegHead { weights: params, bias }, losses))
}

/// Per-sample Dice of the head's upsampled prediction against the masks.
pub fn evaluate_seg(head: &SegHead, samples: &[SegSample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            s.grid_side()?;
            let pred = head.pixel_mask(&s.patches, s.side)?;
            super::metrics::dice(&pred, &s.mask)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Oracle features: each patch embedding is its own mask fraction, so a
    /// linear unit can read the answer straight off coordinate 0.
    fn rect_sample(rng: &mut impl Rng, side: usize, grid: usize) -> SegSample {
        let w = rng.random_range(side / 3..side / 2 + 8);
        let h = rng.random_range(side / 3..side / 2 + 8);
        let x0 = rng.random_range(0..side - w);
        let y0 = rng.random_range(0..side - h);
        let mut mask = vec![false; side * side];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                mask[y * side + x] = true;
            }
        }
        let sample = SegSample {
            patches: Tensor::from_vec(&[grid * grid, 1], vec![0.0; grid * grid]).unwrap(),
            mask,
            side,
        };
        let fractions = sample.patch_fractions().unwrap();
        SegSample {
            patches: Tensor::from_vec(&[grid * grid, 1], fractions).unwrap(),
            ..sample
        }
    }

    #[test]
    fn param_count_matches_features_plus_one() {
        let head = SegHead { weights: vec![0.0; 768], bias: 0.0 };
        assert_eq!(head.param_count(), 769);
        let tiny = SegHead { weights: vec![0.0; 64], bias: 0.0 };
        assert_eq!(tiny.param_count(), 65);
    }

    #[test]
    fn oracle_features_reach_high_train_dice() {
        let mut rng = crate::rng::stream(21, "test/seg-oracle", 0, 0);
        // Boundary recovery from upsampled fractions is limited by cell size:
        // the 0.5 contour lands within roughly half a pixel of a straight
        // edge, so rectangles this size need 4-pixel cells to clear 0.95.
        let samples: Vec<SegSample> =
            (0..12).map(|_| rect_sample(&mut rng, 64, 16)).collect();
        let (head, losses) = train_seg_linear(&samples, &SegConfig::desk_default()).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let dices = evaluate_seg(&head, &samples).unwrap();
        let mean = dices.iter().sum::<f64>() / dices.len() as f64;
        assert!(mean > 0.95, "train dice {mean} ({dices:?})");
    }

    #[test]
    fn upsampled_mask_has_pixel_shape() {
        let patches = Tensor::from_vec(&[16, 2], vec![0.25; 32]).unwrap();
        let head = SegHead { weights: vec![1.0, -0.5], bias: 0.1 };
        let mask = head.pixel_mask(&patches, 64).unwrap();
        assert_eq!(mask.len(), 64 * 64);
        // positive constant logit covers every pixel
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn empty_structure_is_rejected() {
        let sample = SegSample {
            patches: Tensor::from_vec(&[16, 3], vec![0.5; 48]).unwrap(),
            mask: vec![false; 32 * 32],
            side: 32,
        };
        let err = train_seg_linear(&[sample], &SegConfig::desk_default()).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
        assert!(train_seg_linear(&[], &SegConfig::desk_default()).is_err());
    }

    #[test]
    fn malformed_samples_are_rejected() {
        let bad_grid = SegSample {
            patches: Tensor::from_vec(&[15, 2], vec![0.0; 30]).unwrap(),
            mask: vec![true; 64 * 64],
            side: 64,
        };
        assert!(bad_grid.grid_side().is_err());
        let bad_mask = SegSample {
            patches: Tensor::from_vec(&[16, 2], vec![0.0; 32]).unwrap(),
            mask: vec![true; 10],
            side: 64,
        };
        assert!(bad_mask.grid_side().is_err());
        let bad_side = SegSample {
            patches: Tensor::from_vec(&[9, 2], vec![0.0; 18]).unwrap(),
            mask: vec![true; 64 * 64],
            side: 64,
        };
        // 64 pixels over a 3-wide grid cannot tile evenly
        assert!(bad_side.grid_side().is_err());
    }

    #[test]
    fn patch_fractions_average_the_mask() {
        let mut mask = vec![false; 16];
        // top-left 2x2 cell fully on, top-right half on
        mask[0] = true;
        mask[1] = true;
        mask[4] = true;
        mask[5] = true;
        mask[2] = true;
        mask[3] = true;
        let sample = SegSample {
            patches: Tensor::from_vec(&[4, 1], vec![0.0; 4]).unwrap(),
            mask,
            side: 4,
        };
        assert_eq!(sample.patch_fractions().unwrap(), vec![1.0, 0.5, 0.0, 0.0]);
    }
}
