//! Qualitative probes of patch-level structure: cross-image token
//! similarity, class-token attention maps, and heatmap overlays rendered
//! to PPM files.
//!
//! Color ramp, fixed for bit-exact regeneration: a field value t in [0, 1]
//! maps to the yellow (255t, 255t, 0), which is alpha-blended at 0.5 over
//! the grayscale base, so channel bytes are quantize(0.5 t + 0.5 base) for
//! red and green and quantize(0.5 base) for blue.
//!
//! Checkpoint-consuming probes normalize the input image with the stats
//! stored in the checkpoint and read the teacher branch, matching the
//! embedding pipeline, so a probe depends only on checkpoint and pixel
//! bytes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::augment::normalize;
use crate::encoder::BoundEncoder;
use crate::error::{Error, Result};
use crate::formats::checkpoint::Checkpoint;
use crate::formats::manifest::Manifest;
use crate::formats::pnm::{quantize, read_pgm, write_ppm};
use crate::image::{upsample_field, GrayImage};
use crate::numerics::{Tape, Tensor};
use crate::rng;

/// Overlay weight of the color ramp against the grayscale base.
pub const OVERLAY_ALPHA: f32 = 0.5;

/// Norms below this count as zero when forming cosine similarities.
const NORM_EPS: f64 = 1e-12;

/// Cosine similarity of one query token against every row of a target
/// patch grid. Values are clamped into [-1, 1] so downstream rendering
/// ranges hold even under floating-point rounding.
pub fn patch_similarity_map(query: &[f32], targets: &Tensor<f32>) -> Result<Vec<f32>> {
    let (n, d) = targets.dims2()?;
    if query.len() != d {
        return Err(Error::Shape(format!(
            "query has {} features, target tokens have {d}",
            query.len()
        )));
    }
    let qn = query.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    if !qn.is_finite() {
        return Err(Error::Numeric("query token is not finite".into()));
    }
    if qn < NORM_EPS {
        return Err(Error::Numeric("query token has zero norm".into()));
    }
    let data = targets.data();
    let mut out = Vec::with_capacity(n);
    for row in 0..n {
        let t = &data[row * d..(row + 1) * d];
        let mut dot = 0.0f64;
        let mut tn = 0.0f64;
        for i in 0..d {
            dot += query[i] as f64 * t[i] as f64;
            tn += (t[i] as f64).powi(2);
        }
        let tn = tn.sqrt().max(NORM_EPS);
        let cos = (dot / (qn * tn)).clamp(-1.0, 1.0);
        if !cos.is_finite() {
            return Err(Error::Numeric(format!("target token {row} is not finite")));
        }
        out.push(cos as f32);
    }
    Ok(out)
}

fn usable_stats(ckpt: &Checkpoint) -> Result<()> {
    ckpt.stats
        .validate()
        .map_err(|e| Error::Data(format!("checkpoint carries unusable stats: {e}")))
}

/// Patch tokens of one image under the checkpoint's teacher branch, shape
/// [N, D] in row-major token order. `layer` selects a block: the default
/// (or the last index) reports the final tokens after the closing norm,
/// the same ones the embedding pipeline stores; earlier indices report the
/// block's raw output as the next block sees it.
pub fn patch_tokens(
    ckpt: &Checkpoint,
    image: &GrayImage,
    layer: Option<usize>,
) -> Result<Tensor<f32>> {
    let cfg = &ckpt.config;
    let l = layer.unwrap_or(cfg.depth - 1);
    if l >= cfg.depth {
        return Err(Error::Config(format!(
            "layer {l} out of range for depth {}",
            cfg.depth
        )));
    }
    usable_stats(ckpt)?;
    let params = ckpt.teacher()?;
    let mut img = image.clone();
    normalize(&mut img, &ckpt.stats);

    let mut tape = Tape::<f32>::new();
    let bound = BoundEncoder::bind(&mut tape, &params, cfg, false)?;
    let toks = bound.encode_batch(&mut tape, &[&img], None, false)?;
    let out = if l + 1 == cfg.depth {
        let v = tape.value(toks.patches);
        let (_, n, d) = v.dims3()?;
        Tensor::from_vec(&[n, d], v.data().to_vec())?
    } else {
        let v = tape.value(toks.layers[l]);
        let (_, s, d) = v.dims3()?;
        Tensor::from_vec(&[s - 1, d], v.data()[d..].to_vec())?
    };
    out.ensure_finite("patch tokens")?;
    Ok(out)
}

/// Per-head class-token attention over patch positions at one block,
/// shape [heads, side/P, side/P]. Each head's row is renormalized to sum
/// one over the patches after the class position is dropped.
pub fn cls_attention_maps(
    ckpt: &Checkpoint,
    image: &GrayImage,
    layer: usize,
) -> Result<Tensor<f32>> {
    let cfg = &ckpt.config;
    if layer >= cfg.depth {
        return Err(Error::Config(format!(
            "layer {layer} out of range for depth {}",
            cfg.depth
        )));
    }
    usable_stats(ckpt)?;
    let params = ckpt.teacher()?;
    let mut img = image.clone();
    normalize(&mut img, &ckpt.stats);
    let out = crate::encoder::encode(&params, cfg, &img, None, true)?;
    let att = &out.attention.expect("attention was requested")[layer];
    let (heads, s, _) = att.dims3()?;
    let n = s - 1;
    let g = img.width() / cfg.patch_side;
    let mut field = vec![0.0f32; heads * n];
    for head in 0..heads {
        let row = &att.data()[head * s * s..head * s * s + s];
        let total: f32 = row[1..].iter().sum();
        if !(total > 0.0) {
            return Err(Error::Numeric(format!(
                "head {head} puts no attention mass on patches"
            )));
        }
        for (i, &w) in row[1..].iter().enumerate() {
            field[head * n + i] = w / total;
        }
    }
    Tensor::from_vec(&[heads, g, g], field)
}

/// A scalar field on the patch grid waiting to be rendered over its image.
#[derive(Clone, Debug)]
pub struct HeatmapOverlay {
    pub base: GrayImage,
    /// Row-major grid x grid field; values are clamped to [lo, hi] before
    /// colorization.
    pub field: Vec<f32>,
    pub grid: usize,
    pub lo: f32,
    pub hi: f32,
}

impl HeatmapOverlay {
    pub fn new(
        base: GrayImage,
        field: Vec<f32>,
        grid: usize,
        lo: f32,
        hi: f32,
    ) -> Result<HeatmapOverlay> {
        let overlay = HeatmapOverlay { base, field, grid, lo, hi };
        overlay.validate()?;
        Ok(overlay)
    }

    fn validate(&self) -> Result<()> {
        let side = self.base.width();
        if self.base.height() != side {
            return Err(Error::Shape("overlay base image must be square".into()));
        }
        if self.grid == 0 || self.field.len() != self.grid * self.grid {
            return Err(Error::Shape(format!(
                "field holds {} values, expected {}x{} grid",
                self.field.len(),
                self.grid,
                self.grid
            )));
        }
        if side % self.grid != 0 {
            return Err(Error::Shape(format!(
                "grid {} does not tile a side of {side} pixels",
                self.grid
            )));
        }
        if self.field.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("overlay field is not finite".into()));
        }
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(Error::Config(format!(
                "rendering range [{}, {}] is empty or unbounded",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    /// Interleaved RGB bytes of the blended image, side x side pixels.
    pub fn rasterize(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let side = self.base.width();
        let span = self.hi - self.lo;
        let unit: Vec<f32> = self
            .field
            .iter()
            .map(|v| (v.clamp(self.lo, self.hi) - self.lo) / span)
            .collect();
        let up = upsample_field(&unit, self.grid, side)?;
        let mut rgb = Vec::with_capacity(3 * side * side);
        for (i, &t) in up.iter().enumerate() {
            let b = self.base.data()[i];
            let lit = quantize(OVERLAY_ALPHA * t + (1.0 - OVERLAY_ALPHA) * b);
            rgb.push(lit);
            rgb.push(lit);
            rgb.push(quantize((1.0 - OVERLAY_ALPHA) * b));
        }
        Ok(rgb)
    }
}

/// Rasterize and write as a binary PPM (P6, maxval 255).
pub fn render_overlay(overlay: &HeatmapOverlay, path: &Path) -> Result<()> {
    let rgb = overlay.rasterize()?;
    write_ppm(path, &rgb, overlay.base.width(), overlay.base.width())
}

/// Outcome of sampled cross-image correspondence checks.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct CorrespondenceReport {
    pub pairs: usize,
    pub hits: usize,
}

impl CorrespondenceReport {
    pub fn rate(&self) -> f64 {
        self.hits as f64 / self.pairs as f64
    }
}

/// Sample cross-subject image pairs that both render `structure`, take a
/// query token whose cell center lies inside the structure in the first
/// image, and count how often the most similar token in the second image
/// lands inside the structure there too. Pairs cross subjects so a match
/// cannot come from jittered copies of one scene.
pub fn blob_correspondence(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    root: &Path,
    structure: &str,
    pairs: usize,
    seed: u64,
) -> Result<CorrespondenceReport> {
    if pairs == 0 {
        return Err(Error::Config("correspondence needs at least one pair".into()));
    }
    usable_stats(ckpt)?;
    let p = ckpt.config.patch_side;
    let rows: Vec<_> = manifest
        .rows()
        .iter()
        .filter(|r| r.masks.contains_key(structure))
        .collect();
    let distinct = rows
        .iter()
        .map(|r| r.subject.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if distinct < 2 {
        return Err(Error::Data(format!(
            "correspondence needs a {structure} mask on two subjects, found {distinct}"
        )));
    }

    // per-row caches, filled lazily for sampled rows only
    let mut grids: BTreeMap<usize, Tensor<f32>> = BTreeMap::new();
    let mut interior: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut interior_of = |idx: usize| -> Result<Vec<usize>> {
        if let Some(v) = interior.get(&idx) {
            return Ok(v.clone());
        }
        let row = rows[idx];
        let mask = read_pgm(&root.join(&row.masks[structure]))
            .map_err(|e| Error::Data(format!("row {}: {e}", row.image)))?;
        if mask.width() % p != 0 || mask.width() != mask.height() {
            return Err(Error::Data(format!(
                "row {}: mask side {} does not fit patch side {p}",
                row.image,
                mask.width()
            )));
        }
        let g = mask.width() / p;
        let mut inside = Vec::new();
        for r in 0..g {
            for c in 0..g {
                if mask.get(c * p + p / 2, r * p + p / 2) > 0.5 {
                    inside.push(r * g + c);
                }
            }
        }
        interior.insert(idx, inside.clone());
        Ok(inside)
    };

    let mut rng = rng::stream(seed, "inspect/pairs", 0, 0);
    let mut hits = 0;
    for _ in 0..pairs {
        let (a, b) = {
            let mut found = None;
            // the corpus guarantees nothing about which rows carry interior
            // tokens, so sampling is bounded instead of unbounded
            for _ in 0..1000 {
                let a = rng.random_range(0..rows.len());
                let b = rng.random_range(0..rows.len());
                if rows[a].subject == rows[b].subject {
                    continue;
                }
                if interior_of(a)?.is_empty() || interior_of(b)?.is_empty() {
                    continue;
                }
                found = Some((a, b));
                break;
            }
            found.ok_or_else(|| {
                Error::Data(format!(
                    "no cross-subject pair with interior {structure} tokens in 1000 draws"
                ))
            })?
        };
        for idx in [a, b] {
            if !grids.contains_key(&idx) {
                let img = read_pgm(&root.join(&rows[idx].image))
                    .map_err(|e| Error::Data(format!("row {}: {e}", rows[idx].image)))?;
                grids.insert(idx, patch_tokens(ckpt, &img, None)?);
            }
        }
        let candidates = interior_of(a)?;
        let q = candidates[rng.random_range(0..candidates.len())];
        let (_, d) = grids[&a].dims2()?;
        let query = grids[&a].data()[q * d..(q + 1) * d].to_vec();
        let sim = patch_similarity_map(&query, &grids[&b])?;
        let best = sim
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).expect("sims are finite"))
            .map(|(i, _)| i)
            .expect("target grid is non-empty");
        if interior_of(b)?.contains(&best) {
            hits += 1;
        }
    }
    Ok(CorrespondenceReport { pairs, hits })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::encoder::{encode, EncoderConfig};
    use crate::formats::checkpoint::Checkpoint;
    use crate::formats::manifest::Manifest;
    use crate::formats::pnm::decode_ppm;
    use crate::augment::IntensityStats;
    use crate::synthcxr::{generate, GenerateConfig};

    fn tiny_ckpt(image_side: usize) -> Checkpoint {
        let cfg = EncoderConfig {
            image_side,
            patch_side: 8,
            dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            prototypes: 16,
            bottleneck: 8,
            share_heads: false,
        };
        Checkpoint::fresh(cfg, IntensityStats { mean: 0.4, std: 0.2 }, 13).unwrap()
    }

    fn noise_image(side: usize, seed: u64) -> GrayImage {
        let mut rng = crate::rng::stream(seed, "test/inspect-img", 0, 0);
        let data = (0..side * side).map(|_| rng.random::<f32>()).collect();
        GrayImage::from_vec(side, side, data).unwrap()
    }

    fn random_grid(n: usize, d: usize, seed: u64) -> Tensor<f32> {
        let mut rng = crate::rng::stream(seed, "test/inspect-grid", 0, 0);
        let data = (0..n * d).map(|_| rng.random::<f32>() - 0.5).collect();
        Tensor::from_vec(&[n, d], data).unwrap()
    }

    #[test]
    fn self_similarity_peaks_at_the_query_token() {
        let targets = random_grid(9, 16, 3);
        let query = targets.data()[4 * 16..5 * 16].to_vec();
        let sim = patch_similarity_map(&query, &targets).unwrap();
        assert!(sim[4] >= 1.0 - 1e-6, "self similarity {}", sim[4]);
        let best = sim
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(best, 4);
        assert!(sim.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn orthogonal_query_reads_zero() {
        let mut data = vec![0.0; 2 * 8];
        data[0] = 1.0;
        data[8 + 1] = -2.0;
        let targets = Tensor::from_vec(&[2, 8], data).unwrap();
        let mut query = vec![0.0; 8];
        query[2] = 3.0;
        assert_eq!(patch_similarity_map(&query, &targets).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn malformed_queries_are_rejected() {
        let targets = random_grid(4, 8, 1);
        assert!(patch_similarity_map(&[0.0; 8], &targets).is_err());
        assert!(patch_similarity_map(&[1.0; 7], &targets).is_err());
        assert!(patch_similarity_map(&[f32::NAN; 8], &targets).is_err());
    }

    proptest! {
        #[test]
        fn similarity_stays_in_the_unit_interval(
            query in proptest::collection::vec(-5.0f32..5.0, 4),
            rows in proptest::collection::vec(-5.0f32..5.0, 4 * 5),
        ) {
            prop_assume!(query.iter().map(|v| v * v).sum::<f32>() > 1e-6);
            let targets = Tensor::from_vec(&[5, 4], rows).unwrap();
            let sim = patch_similarity_map(&query, &targets).unwrap();
            prop_assert!(sim.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn attention_rows_sum_to_one_per_head_on_the_patch_grid() {
        // 48 differs from the checkpoint's native 64, exercising the
        // positional resample path
        let ckpt = tiny_ckpt(64);
        let img = noise_image(48, 2);
        for layer in 0..2 {
            let maps = cls_attention_maps(&ckpt, &img, layer).unwrap();
            assert_eq!(maps.shape(), &[2, 6, 6]);
            for head in 0..2 {
                let sum: f32 = maps.data()[head * 36..(head + 1) * 36].iter().sum();
                assert!((sum - 1.0).abs() < 1e-5, "head {head} sums to {sum}");
                assert!(maps.data()[head * 36..(head + 1) * 36]
                    .iter()
                    .all(|&w| w >= 0.0));
            }
        }
    }

    #[test]
    fn attention_rejects_an_out_of_range_layer() {
        let ckpt = tiny_ckpt(64);
        let img = noise_image(64, 2);
        let err = cls_attention_maps(&ckpt, &img, 2).unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn attention_is_deterministic_for_fixed_inputs() {
        let ckpt = tiny_ckpt(64);
        let img = noise_image(64, 4);
        let a = cls_attention_maps(&ckpt, &img, 1).unwrap();
        let b = cls_attention_maps(&ckpt, &img, 1).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn patch_tokens_default_to_the_embedding_pipeline_output() {
        let ckpt = tiny_ckpt(64);
        let img = noise_image(64, 5);
        let deflt = patch_tokens(&ckpt, &img, None).unwrap();
        let last = patch_tokens(&ckpt, &img, Some(1)).unwrap();
        assert_eq!(deflt.data(), last.data());

        let mut normed = img.clone();
        crate::augment::normalize(&mut normed, &ckpt.stats);
        let reference = encode(&ckpt.teacher().unwrap(), &ckpt.config, &normed, None, false)
            .unwrap()
            .patches;
        assert_eq!(deflt.shape(), reference.shape());
        assert_eq!(deflt.data(), reference.data());

        let early = patch_tokens(&ckpt, &img, Some(0)).unwrap();
        assert_eq!(early.shape(), deflt.shape());
        let moved = early
            .data()
            .iter()
            .zip(deflt.data())
            .any(|(a, b)| (a - b).abs() > 1e-6);
        assert!(moved, "block 0 output should differ from the final tokens");

        assert!(patch_tokens(&ckpt, &img, Some(2)).is_err());
    }

    #[test]
    fn constant_low_field_halves_the_base() {
        let side = 64;
        let mut data = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                data.push(((x + y) as f32) / (2.0 * side as f32));
            }
        }
        let base = GrayImage::from_vec(side, side, data).unwrap();
        let overlay =
            HeatmapOverlay::new(base.clone(), vec![-1.0; 64], 8, -1.0, 1.0).unwrap();
        let rgb = overlay.rasterize().unwrap();
        for (i, &b) in base.data().iter().enumerate() {
            let expect = quantize(0.5 * b);
            assert_eq!(rgb[3 * i], expect);
            assert_eq!(rgb[3 * i + 1], expect);
            assert_eq!(rgb[3 * i + 2], expect);
        }
    }

    #[test]
    fn brightest_pixel_sits_in_the_field_max_cell() {
        let side = 64;
        let base = GrayImage::from_vec(side, side, vec![0.2; side * side]).unwrap();
        let mut field = vec![0.0; 64];
        field[2 * 8 + 5] = 1.0;
        let overlay = HeatmapOverlay::new(base, field, 8, 0.0, 1.0).unwrap();
        let rgb = overlay.rasterize().unwrap();
        let brightest = (0..side * side)
            .max_by_key(|&i| rgb[3 * i] as u32 + rgb[3 * i + 1] as u32 + rgb[3 * i + 2] as u32)
            .unwrap();
        let (y, x) = (brightest / side, brightest % side);
        assert!((16..24).contains(&y) && (40..48).contains(&x), "peak at ({x}, {y})");
    }

    #[test]
    fn overlay_roundtrips_as_p6() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("overlay.ppm");
        let base = GrayImage::from_vec(16, 16, vec![0.5; 256]).unwrap();
        let field = (0..16).map(|i| i as f32 / 15.0).collect();
        let overlay = HeatmapOverlay::new(base, field, 4, 0.0, 1.0).unwrap();
        render_overlay(&overlay, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let (rgb, w, h) = decode_ppm(&bytes).unwrap();
        assert_eq!((w, h), (16, 16));
        assert_eq!(rgb, overlay.rasterize().unwrap());
    }

    #[test]
    fn malformed_overlays_are_rejected() {
        let base = GrayImage::from_vec(16, 16, vec![0.5; 256]).unwrap();
        // empty range
        assert!(HeatmapOverlay::new(base.clone(), vec![0.0; 16], 4, 1.0, 1.0).is_err());
        // field length does not match the grid
        assert!(HeatmapOverlay::new(base.clone(), vec![0.0; 15], 4, 0.0, 1.0).is_err());
        // grid does not tile the side
        assert!(HeatmapOverlay::new(base.clone(), vec![0.0; 9], 3, 0.0, 1.0).is_err());
        // non-finite field
        assert!(HeatmapOverlay::new(base, vec![f32::NAN; 16], 4, 0.0, 1.0).is_err());
    }

    #[test]
    fn correspondence_sampling_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate(
            &GenerateConfig { images: 9, side: 64, seed: 5, ..GenerateConfig::desk_default() },
            dir.path(),
        )
        .unwrap();
        let ckpt = tiny_ckpt(64);
        let a = blob_correspondence(&ckpt, &manifest, dir.path(), "lungs", 10, 7).unwrap();
        let b = blob_correspondence(&ckpt, &manifest, dir.path(), "lungs", 10, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pairs, 10);
        assert!(a.hits <= 10);
        assert!((0.0..=1.0).contains(&a.rate()));

        let err = blob_correspondence(&ckpt, &manifest, dir.path(), "nonesuch", 10, 7);
        assert!(err.is_err());
    }

    #[test]
    fn loading_a_manifest_resolves_mask_paths_for_correspondence() {
        let dir = tempfile::tempdir().unwrap();
        generate(
            &GenerateConfig { images: 9, side: 64, seed: 5, ..GenerateConfig::desk_default() },
            dir.path(),
        )
        .unwrap();
        let (manifest, root) = Manifest::load(&dir.path().join("manifest.csv")).unwrap();
        let ckpt = tiny_ckpt(64);
        let report = blob_correspondence(&ckpt, &manifest, &root, "lungs", 5, 11).unwrap();
        assert_eq!(report.pairs, 5);
    }
}
