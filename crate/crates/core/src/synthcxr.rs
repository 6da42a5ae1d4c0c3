//! Procedural synthetic chest-image corpus.
//!
//! Each subject gets a latent scene: a torso and two lung ellipses scaled by
//! a body-size factor, rib arcs and a mediastinal band as always-present
//! anatomy, and three optional findings (a bright blob inside a lung, a thin
//! bright tube entering from the top, a dark peripheral band standing in for
//! a collapsed lung edge). Masks are the exact support of each effect: the
//! same inequality that gates the shading marks the mask pixel, so mask
//! areas can be checked against closed-form geometry.
//!
//! Subjects render 1 to 3 images with jittered latents and are assigned
//! whole to one of the train/val/test splits, which keeps the splits
//! subject-disjoint by construction.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::formats::manifest::{Manifest, ManifestRow, Split};
use crate::formats::pnm;
use crate::image::GrayImage;
use crate::rng;

pub const LABELS: [&str; 3] = ["blob", "tube", "pneumo"];
pub const STRUCTURES: [&str; 4] = ["lungs", "blob", "tube", "pneumo"];
pub const MIN_SIDE: usize = 32;

/// One manifest row; the generator's output unit.
pub type SampleRecord = ManifestRow;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleClass {
    Small,
    Medium,
    Large,
}

impl ScaleClass {
    pub const ALL: [ScaleClass; 3] = [ScaleClass::Small, ScaleClass::Medium, ScaleClass::Large];

    /// Guard-banded body-scale interval; gaps between classes keep the
    /// class boundaries learnable.
    pub fn interval(self) -> [f32; 2] {
        match self {
            ScaleClass::Small => [0.70, 0.88],
            ScaleClass::Medium => [0.92, 1.08],
            ScaleClass::Large => [1.12, 1.30],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScaleClass::Small => "small",
            ScaleClass::Medium => "medium",
            ScaleClass::Large => "large",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f32,
    pub cy: f32,
    pub rx: f32,
    pub ry: f32,
}

impl Ellipse {
    /// Squared normalized radius; the interior is q <= 1.
    pub fn q(&self, u: f32, v: f32) -> f32 {
        let du = (u - self.cx) / self.rx;
        let dv = (v - self.cy) / self.ry;
        du * du + dv * dv
    }

    pub fn area(&self) -> f32 {
        std::f32::consts::PI * self.rx * self.ry
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rib {
    pub v0: f32,
    pub amp: f32,
    pub half_thickness: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tube {
    pub x0: f32,
    pub c1: f32,
    pub c2: f32,
    pub v_end: f32,
    pub half_width: f32,
}

impl Tube {
    pub fn center(&self, v: f32) -> f32 {
        self.x0 + self.c1 * v + self.c2 * v * v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pneumo {
    /// Index into the lungs array.
    pub lung: usize,
    /// Fraction of the lung's squared-radius range taken by the dark band.
    pub band: f32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Findings {
    pub blob: bool,
    pub tube: bool,
    pub pneumo: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneLatents {
    pub subject: String,
    pub scale_class: ScaleClass,
    pub body_scale: f32,
    pub torso: Ellipse,
    pub mediastinum_halfwidth: f32,
    pub lungs: [Ellipse; 2],
    pub ribs: Vec<Rib>,
    pub blob: Option<Ellipse>,
    pub tube: Option<Tube>,
    pub pneumo: Option<Pneumo>,
    pub noise: f32,
    pub noise_seed: u64,
    pub brightness: f32,
    pub contrast: f32,
}

/// Draw a scene for one subject. `body_scale` multiplies all anatomy sizes;
/// the rng drives only shape jitter and finding geometry, so two calls with
/// the same stream and different scales yield geometrically nested anatomy.
pub fn sample_scene(
    subject: &str,
    class: ScaleClass,
    body_scale: f32,
    findings: Findings,
    rng: &mut ChaCha8Rng,
) -> SceneLatents {
    let s = body_scale;
    let torso = Ellipse {
        cx: 0.5 + rng.random_range(-0.01..=0.01),
        cy: 0.55 + rng.random_range(-0.01..=0.01),
        rx: 0.40 * s * rng.random_range(0.97..=1.03),
        ry: 0.52 * s * rng.random_range(0.97..=1.03),
    };
    let lung_dx = 0.17 * s * rng.random_range(0.95..=1.05);
    let lung_cy = 0.48 + rng.random_range(-0.01..=0.01);
    let mut lungs = [Ellipse { cx: 0.0, cy: 0.0, rx: 1.0, ry: 1.0 }; 2];
    for (i, lung) in lungs.iter_mut().enumerate() {
        let side = if i == 0 { -1.0 } else { 1.0 };
        *lung = Ellipse {
            cx: torso.cx + side * lung_dx,
            cy: lung_cy + rng.random_range(-0.005..=0.005),
            rx: 0.13 * s * rng.random_range(0.90..=1.10),
            ry: 0.26 * s * rng.random_range(0.90..=1.10),
        };
    }
    let rib_count = rng.random_range(4..=6usize);
    let amp = 0.03 * s * rng.random_range(0.8..=1.2);
    let top = lung_cy - 0.26 * s;
    let span = 2.0 * 0.26 * s;
    let ribs = (0..rib_count)
        .map(|k| Rib {
            v0: top + (k as f32 + 0.5) / rib_count as f32 * span,
            amp,
            half_thickness: rng.random_range(0.008..=0.012),
        })
        .collect();

    let blob = findings.blob.then(|| {
        let lung = lungs[rng.random_range(0..2usize)];
        let rho = rng.random_range(0.0..=0.55f32);
        let phi = rng.random_range(0.0..std::f32::consts::TAU);
        Ellipse {
            cx: lung.cx + rho * phi.cos() * lung.rx,
            cy: lung.cy + rho * phi.sin() * lung.ry,
            rx: rng.random_range(0.035..=0.065) * s * rng.random_range(0.85..=1.15),
            ry: rng.random_range(0.035..=0.065) * s * rng.random_range(0.85..=1.15),
        }
    });
    let tube = findings.tube.then(|| Tube {
        x0: rng.random_range(0.40..=0.60),
        c1: rng.random_range(-0.15..=0.15),
        c2: rng.random_range(-0.2..=0.2),
        v_end: rng.random_range(0.5..=0.8),
        half_width: rng.random_range(0.008..=0.014),
    });
    let pneumo = findings.pneumo.then(|| Pneumo {
        lung: rng.random_range(0..2usize),
        band: rng.random_range(0.15..=0.35),
    });

    SceneLatents {
        subject: subject.to_string(),
        scale_class: class,
        body_scale: s,
        torso,
        mediastinum_halfwidth: 0.045 * s,
        lungs,
        ribs,
        blob,
        tube,
        pneumo,
        noise: rng.random_range(0.01..=0.035),
        noise_seed: rng.random(),
        brightness: rng.random_range(-0.05..=0.05),
        contrast: rng.random_range(0.9..=1.1),
    }
}

/// Small per-image perturbation of a subject's base scene. Finding presence
/// never changes within a subject; only geometry, tone, and noise move.
pub fn jitter_scene(base: &SceneLatents, rng: &mut ChaCha8Rng) -> SceneLatents {
    let mut scene = base.clone();
    let wiggle = |rng: &mut ChaCha8Rng, e: &mut Ellipse, shift: f32, grow: f32| {
        e.cx += rng.random_range(-shift..=shift);
        e.cy += rng.random_range(-shift..=shift);
        e.rx *= rng.random_range(1.0 - grow..=1.0 + grow);
        e.ry *= rng.random_range(1.0 - grow..=1.0 + grow);
    };
    wiggle(rng, &mut scene.torso, 0.008, 0.03);
    for lung in scene.lungs.iter_mut() {
        wiggle(rng, lung, 0.008, 0.03);
    }
    let amp_jit = rng.random_range(0.9..=1.1f32);
    let v_shift = rng.random_range(-0.005..=0.005f32);
    for rib in scene.ribs.iter_mut() {
        rib.amp *= amp_jit;
        rib.v0 += v_shift;
    }
    if let Some(blob) = scene.blob.as_mut() {
        wiggle(rng, blob, 0.008, 0.05);
    }
    if let Some(tube) = scene.tube.as_mut() {
        tube.x0 += rng.random_range(-0.01..=0.01);
        tube.v_end = (tube.v_end + rng.random_range(-0.02..=0.02)).clamp(0.4, 0.9);
    }
    if let Some(pneumo) = scene.pneumo.as_mut() {
        pneumo.band = (pneumo.band * rng.random_range(0.95..=1.05)).clamp(0.1, 0.4);
    }
    scene.noise = rng.random_range(0.01..=0.035);
    scene.noise_seed = rng.random();
    scene.brightness = rng.random_range(-0.05..=0.05);
    scene.contrast = rng.random_range(0.9..=1.1);
    scene
}

#[derive(Clone, Debug)]
pub struct RenderedSample {
    pub image: GrayImage,
    /// Binary masks (values 0 or 1) for structures with non-empty support.
    pub masks: BTreeMap<String, GrayImage>,
}

pub fn render(scene: &SceneLatents, side: usize) -> Result<RenderedSample> {
    if side < MIN_SIDE {
        return Err(Error::Config(format!("render side {side} below minimum {MIN_SIDE}")));
    }
    let n = side * side;
    let mut img = vec![0.0f32; n];
    let mut lungs_m = vec![false; n];
    let mut blob_m = vec![false; n];
    let mut tube_m = vec![false; n];
    let mut pneumo_m = vec![false; n];
    let mut noise_rng = rng::stream(scene.noise_seed, "synth/noise", 0, 0);

    for y in 0..side {
        let v = (y as f32 + 0.5) / side as f32;
        for x in 0..side {
            let u = (x as f32 + 0.5) / side as f32;
            let i = y * side + x;
            let qt = scene.torso.q(u, v);
            // soft body edge: full tissue inside q<=1, air beyond q=1.2
            let body = ((1.2 - qt) / 0.2).clamp(0.0, 1.0);
            let mut val = 0.06 + 0.49 * body;
            if qt <= 1.0 {
                let du = (u - scene.torso.cx).abs();
                let mw = scene.mediastinum_halfwidth;
                if du <= mw {
                    val += 0.09 * (1.0 - (du / mw) * (du / mw));
                }
                for rib in &scene.ribs {
                    let vc = rib.v0 + rib.amp * ((u - 0.5) / 0.45) * ((u - 0.5) / 0.45);
                    let d = (v - vc).abs();
                    if d <= rib.half_thickness {
                        let t = d / rib.half_thickness;
                        val += 0.10 * (1.0 - t * t);
                    }
                }
            }
            for (li, lung) in scene.lungs.iter().enumerate() {
                let ql = lung.q(u, v);
                if ql <= 1.0 {
                    lungs_m[i] = true;
                    val -= 0.30 * (1.0 - 0.5 * ql);
                    if let Some(p) = &scene.pneumo {
                        let q0 = 1.0 - p.band;
                        if p.lung == li && ql >= q0 {
                            pneumo_m[i] = true;
                            val -= 0.16;
                            // pleural edge highlight at the band's inner rim
                            if ql - q0 <= 0.04 {
                                val += 0.10;
                            }
                        }
                    }
                }
            }
            if let Some(blob) = &scene.blob {
                let qb = blob.q(u, v);
                if qb <= 1.0 {
                    blob_m[i] = true;
                    val += 0.22 * (1.0 - qb);
                }
            }
            if let Some(tube) = &scene.tube {
                if v <= tube.v_end && (u - tube.center(v)).abs() <= tube.half_width {
                    tube_m[i] = true;
                    val += 0.28;
                }
            }
            val += scene.noise * (2.0 * noise_rng.random::<f32>() - 1.0);
            img[i] = ((val - 0.5) * scene.contrast + 0.5 + scene.brightness).clamp(0.0, 1.0);
        }
    }

    let mut masks = BTreeMap::new();
    for (name, bits) in [
        ("lungs", lungs_m),
        ("blob", blob_m),
        ("tube", tube_m),
        ("pneumo", pneumo_m),
    ] {
        if bits.iter().any(|&b| b) {
            let data = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            masks.insert(name.to_string(), GrayImage::from_vec(side, side, data)?);
        }
    }
    Ok(RenderedSample { image: GrayImage::from_vec(side, side, img)?, masks })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prevalences {
    pub blob: f32,
    pub tube: f32,
    pub pneumo: f32,
}

impl Prevalences {
    pub fn desk_default() -> Prevalences {
        Prevalences { blob: 0.5, tube: 0.4, pneumo: 0.3 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("blob", self.blob), ("tube", self.tube), ("pneumo", self.pneumo)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("prevalence {name}={p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GenerateConfig {
    pub images: usize,
    pub side: usize,
    pub seed: u64,
    pub prevalences: Prevalences,
    /// Upper bound on images per subject; each subject draws 1..=this many.
    pub max_per_subject: usize,
}

impl GenerateConfig {
    pub fn desk_default() -> GenerateConfig {
        GenerateConfig {
            images: 2000,
            side: 64,
            seed: 0,
            prevalences: Prevalences::desk_default(),
            max_per_subject: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prevalences.validate()?;
        if self.side < MIN_SIDE {
            return Err(Error::Config(format!("side {} below minimum {MIN_SIDE}", self.side)));
        }
        if self.images < 9 {
            return Err(Error::Config(
                "need at least 9 images so all three splits get a subject".into(),
            ));
        }
        if !(1..=8).contains(&self.max_per_subject) {
            return Err(Error::Config(format!(
                "max_per_subject {} outside 1..=8",
                self.max_per_subject
            )));
        }
        Ok(())
    }
}

/// Render a corpus under `out_dir`: `images/*.pgm`, `masks/*.pgm`, and
/// `manifest.csv`. Rerunning with the same config writes identical bytes.
///
/// A finding whose rendered support is empty at this resolution (possible
/// for thin structures at small sides) is dropped from both the label list
/// and the mask map, keeping label and mask presence equivalent.
pub fn generate(cfg: &GenerateConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&masks_dir)?;

    // (subject index, pending rows) before split assignment
    let mut pending: Vec<(usize, ManifestRow)> = Vec::with_capacity(cfg.images);
    let mut subject_count = 0usize;
    let mut done = 0usize;
    while done < cfg.images {
        let idx = subject_count;
        subject_count += 1;
        let subject = format!("s{idx:05}");
        let mut srng = rng::stream(cfg.seed, "synth/subject", 0, idx as u64);
        let class = ScaleClass::ALL[srng.random_range(0..3usize)];
        let interval = class.interval();
        let body_scale = srng.random_range(interval[0]..=interval[1]);
        let p = cfg.prevalences;
        let findings = Findings {
            blob: srng.random::<f32>() < p.blob,
            tube: srng.random::<f32>() < p.tube,
            pneumo: srng.random::<f32>() < p.pneumo,
        };
        let base = sample_scene(&subject, class, body_scale, findings, &mut srng);
        let count = srng.random_range(1..=cfg.max_per_subject).min(cfg.images - done);
        for j in 0..count {
            let scene = if j == 0 { base.clone() } else { jitter_scene(&base, &mut srng) };
            let id = format!("{subject}_{j}");
            let rendered = render(&scene, cfg.side)?;
            let image_rel = format!("images/{id}.pgm");
            pnm::write_pgm(&out_dir.join(&image_rel), &rendered.image)?;
            let mut mask_rels = BTreeMap::new();
            for (name, mask) in &rendered.masks {
                let rel = format!("masks/{id}_{name}.pgm");
                pnm::write_pgm(&out_dir.join(&rel), mask)?;
                mask_rels.insert(name.clone(), rel);
            }
            // mask_rels iterates sorted, matching the manifest parser's
            // sorted label order
            let labels = mask_rels
                .keys()
                .filter(|k| LABELS.contains(&k.as_str()))
                .cloned()
                .collect();
            let attrs = BTreeMap::from([
                ("body_scale".to_string(), format!("{:.4}", scene.body_scale)),
                ("scale_class".to_string(), scene.scale_class.as_str().to_string()),
            ]);
            pending.push((
                idx,
                ManifestRow {
                    image: image_rel,
                    subject: subject.clone(),
                    labels,
                    masks: mask_rels,
                    attrs,
                    split: Split::Train,
                },
            ));
            done += 1;
        }
    }

    if subject_count < 3 {
        return Err(Error::Config(format!(
            "only {subject_count} subjects generated; splits need at least 3"
        )));
    }
    let split_of = assign_splits(subject_count, cfg.seed);
    let rows = pending
        .into_iter()
        .map(|(idx, mut row)| {
            row.split = split_of[idx];
            row
        })
        .collect();
    let manifest = Manifest::new(rows)?;
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Subject-wise 70/15/15 split, each split guaranteed non-empty.
fn assign_splits(subjects: usize, seed: u64) -> Vec<Split> {
    let n_train = ((subjects as f64 * 0.70).round() as usize).clamp(1, subjects - 2);
    let n_val = ((subjects as f64 * 0.15).round() as usize).clamp(1, subjects - n_train - 1);
    let perm = rng::permutation(subjects, seed, "synth/split", 0);
    let mut out = vec![Split::Train; subjects];
    for (rank, &subj) in perm.iter().enumerate() {
        out[subj] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}
