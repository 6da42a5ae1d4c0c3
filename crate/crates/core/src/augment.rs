//! Multi-crop augmentation, patch masking, and corpus intensity statistics.
//!
//! A [`CropSet`] holds two global crops and `local_count` local crops of one
//! source image. Global crops are blurred from the teacher sigma range and
//! are shared by both branches: the teacher sees them unmasked while the
//! student sees the same pixels with patch tokens dropped, which is what
//! makes the masked-patch targets well defined. Local crops go only to the
//! student and use the wider student sigma range.
//!
//! All sampling draws from a caller-supplied keyed RNG in a fixed order
//! (side, x, y, flip, gain, bias, sigma per crop), so a given
//! (seed, purpose, epoch, index) tuple always yields bit-identical crops.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::formats::manifest::{Manifest, Split};
use crate::formats::pnm;
use crate::image::GrayImage;

/// Crop side fraction range for global crops, relative to the source side.
pub const GLOBAL_FRAC: [f32; 2] = [0.5, 1.0];
/// Crop side fraction range for local crops: 104/518 to 259/518.
pub const LOCAL_FRAC: [f32; 2] = [104.0 / 518.0, 259.0 / 518.0];
/// Local crop output side, relative to the global output side: 196/518.
pub const LOCAL_OUT_FRAC: f32 = 196.0 / 518.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropPolicy {
    /// Output side of global crops; equals the encoder's native resolution.
    pub global_out: usize,
    /// Output side of local crops; a multiple of the patch side.
    pub local_out: usize,
    pub global_frac: [f32; 2],
    pub local_frac: [f32; 2],
    pub global_count: usize,
    pub local_count: usize,
    pub flip_prob: f32,
    /// Intensity jitter amplitude: gain in 1 +- jitter, bias in +-jitter.
    pub jitter: f32,
    pub teacher_sigma: [f32; 2],
    pub student_sigma: [f32; 2],
}

impl CropPolicy {
    /// Policy for an encoder with the given native resolution and patch side.
    pub fn for_resolution(image_side: usize, patch_side: usize) -> CropPolicy {
        let target = image_side as f32 * LOCAL_OUT_FRAC;
        let snapped = (target / patch_side as f32).round().max(1.0) as usize * patch_side;
        CropPolicy {
            global_out: image_side,
            local_out: snapped.min(image_side),
            global_frac: GLOBAL_FRAC,
            local_frac: LOCAL_FRAC,
            global_count: 2,
            local_count: 4,
            flip_prob: 0.5,
            jitter: 0.2,
            teacher_sigma: [0.1, 1.0],
            student_sigma: [0.1, 2.0],
        }
    }

    pub fn desk_default() -> CropPolicy {
        CropPolicy::for_resolution(64, 8)
    }

    pub fn validate(&self, patch_side: usize) -> Result<()> {
        if self.global_count != 2 {
            return Err(Error::Config(format!(
                "global_count must be 2 (the pair loss needs exactly two teacher views), got {}",
                self.global_count
            )));
        }
        for (name, out) in [("global_out", self.global_out), ("local_out", self.local_out)] {
            if out == 0 || out % patch_side != 0 {
                return Err(Error::Config(format!(
                    "{name} {out} is not a positive multiple of patch side {patch_side}"
                )));
            }
        }
        for (name, range) in [("global_frac", self.global_frac), ("local_frac", self.local_frac)] {
            if !(range[0] > 0.0 && range[0] <= range[1] && range[1] <= 1.0) {
                return Err(Error::Config(format!(
                    "{name} {range:?} must satisfy 0 < lo <= hi <= 1"
                )));
            }
        }
        for (name, range) in [
            ("teacher_sigma", self.teacher_sigma),
            ("student_sigma", self.student_sigma),
        ] {
            if !(range[0] >= 0.0 && range[0] <= range[1] && range[1].is_finite()) {
                return Err(Error::Config(format!(
                    "{name} {range:?} must satisfy 0 <= lo <= hi"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter {} outside [0, 1)", self.jitter)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CropSet {
    pub globals: Vec<GrayImage>,
    pub locals: Vec<GrayImage>,
}

pub fn sample_multicrop(
    img: &GrayImage,
    policy: &CropPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<CropSet> {
    let src = img.width().min(img.height());
    if src < policy.global_out {
        return Err(Error::Shape(format!(
            "source side {src} below global crop output {}",
            policy.global_out
        )));
    }
    let mut globals = Vec::with_capacity(policy.global_count);
    for _ in 0..policy.global_count {
        globals.push(sample_crop(
            img,
            policy.global_frac,
            policy.global_out,
            policy.teacher_sigma,
            policy,
            rng,
        )?);
    }
    let mut locals = Vec::with_capacity(policy.local_count);
    for _ in 0..policy.local_count {
        locals.push(sample_crop(
            img,
            policy.local_frac,
            policy.local_out,
            policy.student_sigma,
            policy,
            rng,
        )?);
    }
    Ok(CropSet { globals, locals })
}

fn sample_crop(
    img: &GrayImage,
    frac: [f32; 2],
    out_side: usize,
    sigma: [f32; 2],
    policy: &CropPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<GrayImage> {
    let src = img.width().min(img.height()) as f32;
    let f = rng.random_range(frac[0]..=frac[1]);
    let side = ((f * src).round() as usize).clamp(1, src as usize);
    let x0 = rng.random_range(0..=img.width() - side);
    let y0 = rng.random_range(0..=img.height() - side);
    let flip = rng.random::<f32>() < policy.flip_prob;
    let gain = 1.0 + rng.random_range(-policy.jitter..=policy.jitter);
    let bias = rng.random_range(-policy.jitter..=policy.jitter);
    let s = rng.random_range(sigma[0]..=sigma[1]);

    let mut crop = img.crop(x0, y0, side, side)?.resize_bilinear(out_side, out_side)?;
    if flip {
        crop.flip_horizontal();
    }
    for v in crop.data_mut() {
        *v = (gain * *v + bias).clamp(0.0, 1.0);
    }
    Ok(crop.gaussian_blur(s))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskPolicy {
    /// Probability that a view gets any masking at all.
    pub masked_fraction: f32,
    /// Range of the masked-token ratio when masking fires.
    pub ratio: [f32; 2],
}

impl MaskPolicy {
    pub fn desk_default() -> MaskPolicy {
        MaskPolicy { masked_fraction: 0.5, ratio: [0.1, 0.5] }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.masked_fraction) {
            return Err(Error::Config(format!(
                "masked_fraction {} outside [0, 1]",
                self.masked_fraction
            )));
        }
        if !(self.ratio[0] >= 0.0 && self.ratio[0] <= self.ratio[1] && self.ratio[1] <= 1.0) {
            return Err(Error::Config(format!(
                "mask ratio {:?} must satisfy 0 <= lo <= hi <= 1",
                self.ratio
            )));
        }
        Ok(())
    }
}

/// Per-patch mask for one view: `true` marks tokens replaced by the mask
/// embedding. Exactly `floor(ratio * n)` positions are masked when the
/// masking coin fires, none otherwise.
pub fn sample_mask(n: usize, policy: &MaskPolicy, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut mask = vec![false; n];
    if n == 0 || rng.random::<f32>() >= policy.masked_fraction {
        return mask;
    }
    let ratio = rng.random_range(policy.ratio[0]..=policy.ratio[1]);
    let k = (ratio * n as f32).floor() as usize;
    for idx in rand::seq::index::sample(rng, n, k.min(n)) {
        mask[idx] = true;
    }
    mask
}

/// Pixel mean and standard deviation of the training corpus, applied as
/// (v - mean) / std before patch embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityStats {
    pub mean: f32,
    pub std: f32,
}

impl IntensityStats {
    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0 && self.std.is_finite() && self.mean.is_finite()) {
            return Err(Error::Config(format!(
                "intensity stats mean {} std {} invalid: std must be finite and positive",
                self.mean, self.std
            )));
        }
        Ok(())
    }
}

pub fn normalize(img: &mut GrayImage, stats: &IntensityStats) {
    for v in img.data_mut() {
        *v = (*v - stats.mean) / stats.std;
    }
}

/// Smallest std reported for a corpus; a flat corpus would otherwise divide
/// by zero downstream.
pub const MIN_STD: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusStats {
    pub stats: IntensityStats,
    pub pixel_count: u64,
    /// Set when the corpus was constant and std was clamped to [`MIN_STD`].
    pub degenerate: bool,
}

/// Streaming mean and population std over every pixel of every image.
pub fn corpus_stats(images: impl IntoIterator<Item = Result<GrayImage>>) -> Result<CorpusStats> {
    let mut count: u64 = 0;
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for img in images {
        for &v in img?.data() {
            let v = v as f64;
            count += 1;
            let delta = v - mean;
            mean += delta / count as f64;
            m2 += delta * (v - mean);
        }
    }
    if count == 0 {
        return Err(Error::Config("corpus has no pixels to aggregate".into()));
    }
    let std = (m2 / count as f64).sqrt() as f32;
    let degenerate = std < MIN_STD;
    Ok(CorpusStats {
        stats: IntensityStats { mean: mean as f32, std: std.max(MIN_STD) },
        pixel_count: count,
        degenerate,
    })
}

/// Corpus statistics over the images of one manifest split.
pub fn manifest_stats(
    manifest: &Manifest,
    root: &std::path::Path,
    split: Split,
) -> Result<CorpusStats> {
    let rows = manifest.split_rows(split);
    corpus_stats(rows.iter().map(|row| pnm::read_pgm(&root.join(&row.image))))
}
