//! Small vision transformer with class token, learned mask token, and
//! DINO-style projection heads.
//!
//! Parameters live in a closed, named inventory (dotted paths such as
//! `blocks.0.attn.qkv.weight`); those names are the checkpoint contract.
//! The forward pass is expressed on the autodiff tape so the same code
//! serves training (trainable leaves), the frozen teacher (constants), and
//! gradient verification (f64).

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::numerics::{r, Real, Tape, Tensor, Var};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Input side in pixels at the native training resolution.
    pub image_side: usize,
    pub patch_side: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Prototype count K shared by both projection heads.
    pub prototypes: usize,
    /// Width of the normalized bottleneck feeding the prototypes.
    pub bottleneck: usize,
    /// When set, the patch-level objective reuses the image-level head.
    pub share_heads: bool,
}

impl EncoderConfig {
    /// Desk-scale default: 64 px images, 8 px patches, 4 blocks of width 64.
    pub fn desk_default() -> Self {
        EncoderConfig {
            image_side: 64,
            patch_side: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            prototypes: 256,
            bottleneck: 32,
            share_heads: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_positive = self.image_side > 0
            && self.patch_side > 0
            && self.dim > 0
            && self.depth > 0
            && self.heads > 0
            && self.mlp_ratio > 0
            && self.prototypes > 0
            && self.bottleneck > 0;
        if !all_positive {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.image_side % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "image side {} not divisible by patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by head count {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Config as nine integers in checkpoint-header order.
    pub fn header_fields(&self) -> [usize; 9] {
        [
            self.image_side,
            self.patch_side,
            self.dim,
            self.depth,
            self.heads,
            self.mlp_ratio,
            self.prototypes,
            self.bottleneck,
            self.share_heads as usize,
        ]
    }

    pub fn from_header_fields(f: [usize; 9]) -> Result<Self> {
        if f[8] > 1 {
            return Err(Error::Config(format!("share_heads flag {} is not 0/1", f[8])));
        }
        let cfg = EncoderConfig {
            image_side: f[0],
            patch_side: f[1],
            dim: f[2],
            depth: f[3],
            heads: f[4],
            mlp_ratio: f[5],
            prototypes: f[6],
            bottleneck: f[7],
            share_heads: f[8] == 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Patches per side at the native resolution.
    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Hidden width of the projection-head MLP (fixed at twice the embed dim).
    pub fn head_hidden(&self) -> usize {
        2 * self.dim
    }

    fn head_prefixes(&self) -> Vec<&'static str> {
        if self.share_heads {
            vec!["image_head"]
        } else {
            vec!["image_head", "patch_head"]
        }
    }

    /// Closed tensor inventory: every parameter name with its shape, in
    /// lexicographic-stable declaration order.
    pub fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.dim;
        let p2 = self.patch_side * self.patch_side;
        let g2 = self.tokens();
        let rd = self.mlp_ratio * d;
        let hid = self.head_hidden();
        let mut inv: Vec<(String, Vec<usize>)> = vec![
            ("patch_embed.weight".into(), vec![p2, d]),
            ("patch_embed.bias".into(), vec![d]),
            ("cls_token".into(), vec![d]),
            ("mask_token".into(), vec![d]),
            ("pos_embed".into(), vec![g2 + 1, d]),
        ];
        for i in 0..self.depth {
            for (suffix, shape) in [
                ("norm1.weight", vec![d]),
                ("norm1.bias", vec![d]),
                ("attn.qkv.weight", vec![d, 3 * d]),
                ("attn.qkv.bias", vec![3 * d]),
                ("attn.proj.weight", vec![d, d]),
                ("attn.proj.bias", vec![d]),
                ("norm2.weight", vec![d]),
                ("norm2.bias", vec![d]),
                ("mlp.fc1.weight", vec![d, rd]),
                ("mlp.fc1.bias", vec![rd]),
                ("mlp.fc2.weight", vec![rd, d]),
                ("mlp.fc2.bias", vec![d]),
            ] {
                inv.push((format!("blocks.{i}.{suffix}"), shape));
            }
        }
        inv.push(("norm.weight".into(), vec![d]));
        inv.push(("norm.bias".into(), vec![d]));
        for prefix in self.head_prefixes() {
            inv.push((format!("{prefix}.fc1.weight"), vec![d, hid]));
            inv.push((format!("{prefix}.fc1.bias"), vec![hid]));
            inv.push((format!("{prefix}.fc2.weight"), vec![hid, hid]));
            inv.push((format!("{prefix}.fc2.bias"), vec![hid]));
            inv.push((format!("{prefix}.fc3.weight"), vec![hid, self.bottleneck]));
            inv.push((format!("{prefix}.fc3.bias"), vec![self.bottleneck]));
            inv.push((format!("{prefix}.prototypes"), vec![self.prototypes, self.bottleneck]));
        }
        inv
    }

    /// Backbone parameters (everything outside the projection heads) in
    /// closed form.
    pub fn backbone_param_count(&self) -> usize {
        let d = self.dim;
        let p2 = self.patch_side * self.patch_side;
        let g2 = self.tokens();
        let rd = self.mlp_ratio * d;
        let per_block = 4 * d                  // two layer norms
            + d * 3 * d + 3 * d                // qkv
            + d * d + d                        // attention out projection
            + d * rd + rd                      // mlp up
            + rd * d + d;                      // mlp down
        (p2 * d + d)                           // patch embedding
            + d                                // class token
            + d                                // mask token
            + (g2 + 1) * d                     // positions
            + self.depth * per_block
            + 2 * d                            // final norm
    }

    pub fn head_param_count(&self) -> usize {
        let d = self.dim;
        let hid = self.head_hidden();
        let per_head = d * hid + hid + hid * hid + hid + hid * self.bottleneck + self.bottleneck
            + self.prototypes * self.bottleneck;
        self.head_prefixes().len() * per_head
    }

    pub fn param_count(&self) -> usize {
        self.backbone_param_count() + self.head_param_count()
    }
}

/// Named parameter tensors. The key set always equals the config inventory.
#[derive(Clone, Debug)]
pub struct EncoderParams<T: Real> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> EncoderParams<T> {
    /// Random initialization: truncated normal (sigma 0.02, cut at 2 sigma)
    /// for projections and embeddings, zeros for biases and the class token,
    /// ones for norm scales, unit-norm rows for prototypes.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.inventory() {
            let mut stream = rng::stream(seed, &format!("init/{name}"), 0, 0);
            let numel: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".bias") || name == "cls_token" {
                vec![T::zero(); numel]
            } else if name.ends_with("norm1.weight")
                || name.ends_with("norm2.weight")
                || name == "norm.weight"
            {
                vec![T::one(); numel]
            } else {
                (0..numel).map(|_| trunc_normal(&mut stream, 0.02)).collect()
            };
            let mut t = Tensor::from_vec(&shape, data)?;
            if name.ends_with("prototypes") {
                renorm_rows(&mut t);
            }
            tensors.insert(name, t);
        }
        Ok(EncoderParams { tensors })
    }

    pub fn from_tensors(cfg: &EncoderConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let params = EncoderParams { tensors };
        params.check_inventory(cfg)?;
        Ok(params)
    }

    /// Verify the name set and every shape against the config.
    pub fn check_inventory(&self, cfg: &EncoderConfig) -> Result<()> {
        let expected = cfg.inventory();
        if expected.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "parameter inventory holds {} tensors, expected {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => return Err(Error::Shape(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Shape(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.tensors.get_mut(name).expect("unknown parameter name")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Scale prototype rows back to unit norm (applied after optimizer steps).
    pub fn renorm_prototypes(&mut self) {
        for (name, t) in self.tensors.iter_mut() {
            if name.ends_with("prototypes") {
                renorm_rows(t);
            }
        }
    }
}

fn renorm_rows<T: Real>(t: &mut Tensor<T>) {
    let d = t.last_dim();
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| *v * *v).fold(T::zero(), |a, b| a + b).sqrt();
        if norm > T::zero() {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

fn trunc_normal<T: Real>(rng: &mut ChaCha8Rng, sigma: f64) -> T {
    // Box-Muller, resampled until within two sigma
    loop {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return r(z * sigma);
        }
    }
}

/// Split an image into row-major P x P blocks, each flattened row-major.
pub fn patchify(image: &GrayImage, patch_side: usize) -> Result<Tensor<f32>> {
    if image.width() != image.height() {
        return Err(Error::Shape(format!(
            "patchify needs a square image, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    let side = image.width();
    if patch_side == 0 || side % patch_side != 0 {
        return Err(Error::Shape(format!(
            "image side {side} not divisible by patch side {patch_side}"
        )));
    }
    let grid = side / patch_side;
    let p2 = patch_side * patch_side;
    let mut out = Vec::with_capacity(grid * grid * p2);
    for ty in 0..grid {
        for tx in 0..grid {
            for py in 0..patch_side {
                let y = ty * patch_side + py;
                let x0 = tx * patch_side;
                out.extend_from_slice(&image.data()[y * side + x0..y * side + x0 + patch_side]);
            }
        }
    }
    Tensor::from_vec(&[grid * grid, p2], out)
}

/// Bilinear resample of the positional table from a g x g grid to h x h;
/// the class position (row 0) passes through unchanged.
pub fn interpolate_pos_embed<T: Real>(pos: &Tensor<T>, g: usize, h: usize) -> Result<Tensor<T>> {
    let (rows, d) = pos.dims2()?;
    if rows != g * g + 1 {
        return Err(Error::Shape(format!(
            "positional table has {rows} rows, expected {}",
            g * g + 1
        )));
    }
    if g == h {
        return Ok(pos.clone());
    }
    let mut tape = Tape::<T>::new();
    let grid = Tensor::from_vec(&[g * g, d], pos.data()[d..].to_vec())?;
    let gvar = tape.constant(grid);
    let out = tape.bilinear_grid(gvar, g, h);
    let mut data = Vec::with_capacity((h * h + 1) * d);
    data.extend_from_slice(&pos.data()[..d]);
    data.extend_from_slice(tape.value(out).data());
    Tensor::from_vec(&[h * h + 1, d], data)
}

/// Encoder parameters bound onto a tape, ready for batched forwards.
pub struct BoundEncoder {
    cfg: EncoderConfig,
    vars: BTreeMap<String, Var>,
}

/// Outputs of a batched forward: `cls` is [B, D], `patches` [B, N, D],
/// `attention` one [B, H, S, S] node per block when requested. `layers`
/// holds every block's [B, S, D] output before the closing norm; `cls` and
/// `patches` come from the last entry after that norm.
pub struct BatchTokens {
    pub cls: Var,
    pub patches: Var,
    pub attention: Vec<Var>,
    pub layers: Vec<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Image,
    Patch,
}

impl BoundEncoder {
    /// Bind every parameter as a trainable leaf (student) or a constant
    /// (teacher, evaluation).
    pub fn bind<T: Real>(
        tape: &mut Tape<T>,
        params: &EncoderParams<T>,
        cfg: &EncoderConfig,
        trainable: bool,
    ) -> Result<Self> {
        params.check_inventory(cfg)?;
        let mut vars = BTreeMap::new();
        for (name, tensor) in params.iter() {
            let v = if trainable {
                tape.leaf(tensor)
            } else {
                tape.constant(tensor.clone())
            };
            vars.insert(name.clone(), v);
        }
        Ok(BoundEncoder { cfg: *cfg, vars })
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Forward a batch of same-sized square images. `mask` is one flag per
    /// patch over the whole batch (length B*N) or absent. Attention nodes
    /// are returned per block when `want_attention` is set.
    pub fn encode_batch<T: Real>(
        &self,
        tape: &mut Tape<T>,
        images: &[&GrayImage],
        mask: Option<&[bool]>,
        want_attention: bool,
    ) -> Result<BatchTokens> {
        let cfg = &self.cfg;
        let b = images.len();
        if b == 0 {
            return Err(Error::Shape("encode_batch needs at least one image".into()));
        }
        let side = images[0].width();
        for img in images {
            if img.width() != side || img.height() != side {
                return Err(Error::Shape("encode_batch images must share one size".into()));
            }
        }
        if side % cfg.patch_side != 0 {
            return Err(Error::Shape(format!(
                "image side {side} not divisible by patch side {}",
                cfg.patch_side
            )));
        }
        let h = side / cfg.patch_side;
        let n = h * h;
        let d = cfg.dim;
        let p2 = cfg.patch_side * cfg.patch_side;
        if let Some(m) = mask {
            if m.len() != b * n {
                return Err(Error::Shape(format!(
                    "mask holds {} flags, expected {}",
                    m.len(),
                    b * n
                )));
            }
        }

        // pixels -> patch rows [B*N, P^2], constant
        let mut px = Vec::with_capacity(b * n * p2);
        for img in images {
            let patches = patchify(img, cfg.patch_side)?;
            px.extend(patches.data().iter().map(|&v| r::<T>(v as f64)));
        }
        let px = tape.constant(Tensor::from_vec(&[b * n, p2], px)?);

        let mut x = tape.linear(px, self.var("patch_embed.weight"), Some(self.var("patch_embed.bias")));
        if let Some(m) = mask {
            if m.iter().any(|&f| f) {
                x = tape.mask_blend(x, m.to_vec(), self.var("mask_token"));
            }
        }
        let x = tape.reshape(x, &[b, n, d]);

        let cls = tape.repeat_row(self.var("cls_token"), b);
        let cls = tape.reshape(cls, &[b, 1, d]);
        let mut x = tape.concat_axis1(cls, x);

        // positions, resampled when the token grid differs from the native one
        let g = cfg.grid_side();
        let pos = if g == h {
            self.var("pos_embed")
        } else {
            let pos_cls = tape.select_rows(self.var("pos_embed"), vec![0]);
            let pos_grid = tape.select_rows(self.var("pos_embed"), (1..=g * g).collect());
            let resampled = tape.bilinear_grid(pos_grid, g, h);
            tape.concat0(&[pos_cls, resampled])
        };
        x = tape.add_broadcast(x, pos);

        let s = n + 1;
        let dh = d / cfg.heads;
        let heads = cfg.heads;
        let scale = r::<T>(1.0 / (dh as f64).sqrt());
        let mut attention = Vec::new();
        let mut layers = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let pre = format!("blocks.{i}");
            let ln1 = tape.layer_norm(
                x,
                self.var(&format!("{pre}.norm1.weight")),
                self.var(&format!("{pre}.norm1.bias")),
                r(1e-6),
            );
            let qkv = tape.linear(
                ln1,
                self.var(&format!("{pre}.attn.qkv.weight")),
                Some(self.var(&format!("{pre}.attn.qkv.bias"))),
            );
            let qkv = tape.reshape(qkv, &[b * s, 3 * d]);
            let to_heads = |tape: &mut Tape<T>, this: &Self, v: Var| {
                let _ = this;
                let v = tape.reshape(v, &[b, s, heads, dh]);
                let v = tape.permute_12(v);
                tape.reshape(v, &[b * heads, s, dh])
            };
            let q = tape.slice_cols(qkv, 0, d);
            let k = tape.slice_cols(qkv, d, 2 * d);
            let v = tape.slice_cols(qkv, 2 * d, 3 * d);
            let q = to_heads(tape, self, q);
            let k = to_heads(tape, self, k);
            let v = to_heads(tape, self, v);
            let scores = tape.bmm_nt(q, k);
            let scores = tape.scale(scores, scale);
            let att = tape.softmax_rows(scores);
            if want_attention {
                attention.push(tape.reshape(att, &[b, heads, s, s]));
            }
            let mixed = tape.bmm(att, v);
            let mixed = tape.reshape(mixed, &[b, heads, s, dh]);
            let mixed = tape.permute_12(mixed);
            let mixed = tape.reshape(mixed, &[b, s, d]);
            let proj = tape.linear(
                mixed,
                self.var(&format!("{pre}.attn.proj.weight")),
                Some(self.var(&format!("{pre}.attn.proj.bias"))),
            );
            x = tape.add(x, proj);

            let ln2 = tape.layer_norm(
                x,
                self.var(&format!("{pre}.norm2.weight")),
                self.var(&format!("{pre}.norm2.bias")),
                r(1e-6),
            );
            let up = tape.linear(
                ln2,
                self.var(&format!("{pre}.mlp.fc1.weight")),
                Some(self.var(&format!("{pre}.mlp.fc1.bias"))),
            );
            let act = tape.gelu(up);
            let down = tape.linear(
                act,
                self.var(&format!("{pre}.mlp.fc2.weight")),
                Some(self.var(&format!("{pre}.mlp.fc2.bias"))),
            );
            x = tape.add(x, down);
            layers.push(x);
        }
        let x = tape.layer_norm(x, self.var("norm.weight"), self.var("norm.bias"), r(1e-6));
        let cls = tape.slice_axis1(x, 0, 1);
        let cls = tape.reshape(cls, &[b, d]);
        let patches = tape.slice_axis1(x, 1, s);
        Ok(BatchTokens {
            cls,
            patches,
            attention,
            layers,
        })
    }

    /// Projection head over embedding rows [M, D] -> prototype logits [M, K].
    pub fn head<T: Real>(&self, tape: &mut Tape<T>, rows: Var, kind: HeadKind) -> Var {
        let prefix = match kind {
            HeadKind::Image => "image_head",
            HeadKind::Patch if self.cfg.share_heads => "image_head",
            HeadKind::Patch => "patch_head",
        };
        let h1 = tape.linear(
            rows,
            self.var(&format!("{prefix}.fc1.weight")),
            Some(self.var(&format!("{prefix}.fc1.bias"))),
        );
        let a1 = tape.gelu(h1);
        let h2 = tape.linear(
            a1,
            self.var(&format!("{prefix}.fc2.weight")),
            Some(self.var(&format!("{prefix}.fc2.bias"))),
        );
        let a2 = tape.gelu(h2);
        let h3 = tape.linear(
            a2,
            self.var(&format!("{prefix}.fc3.weight")),
            Some(self.var(&format!("{prefix}.fc3.bias"))),
        );
        let z = tape.l2norm_rows(h3, r(1e-8));
        tape.matmul_nt(z, self.var(&format!("{prefix}.prototypes")))
    }
}

/// Single-image forward outside any training loop.
pub struct EncodeOutput {
    pub cls: Vec<f32>,
    /// [N, D] patch embeddings in row-major token order.
    pub patches: Tensor<f32>,
    /// One [H, S, S] row-stochastic map per block when requested.
    pub attention: Option<Vec<Tensor<f32>>>,
}

pub fn encode(
    params: &EncoderParams<f32>,
    cfg: &EncoderConfig,
    image: &GrayImage,
    mask: Option<&[bool]>,
    want_attention: bool,
) -> Result<EncodeOutput> {
    let mut tape = Tape::<f32>::new();
    let bound = BoundEncoder::bind(&mut tape, params, cfg, false)?;
    let toks = bound.encode_batch(&mut tape, &[image], mask, want_attention)?;
    let cls = tape.value(toks.cls).data().to_vec();
    let (_, n, d) = tape.value(toks.patches).dims3().unwrap();
    let patches = Tensor::from_vec(&[n, d], tape.value(toks.patches).data().to_vec())?;
    patches.ensure_finite("patch embeddings")?;
    Tensor::from_vec(&[cls.len()], cls.clone())?.ensure_finite("class embedding")?;
    let attention = if want_attention {
        let mut maps = Vec::with_capacity(toks.attention.len());
        for att in &toks.attention {
            let v = tape.value(*att);
            let s = v.shape()[2];
            maps.push(Tensor::from_vec(&[v.shape()[1], s, s], v.data().to_vec())?);
        }
        Some(maps)
    } else {
        None
    };
    Ok(EncodeOutput {
        cls,
        patches,
        attention,
    })
}

/// Prototype logits for one embedding vector.
pub fn head_forward(
    params: &EncoderParams<f32>,
    cfg: &EncoderConfig,
    embedding: &[f32],
    kind: HeadKind,
) -> Result<Vec<f32>> {
    if embedding.len() != cfg.dim {
        return Err(Error::Shape(format!(
            "embedding length {} does not match dim {}",
            embedding.len(),
            cfg.dim
        )));
    }
    let mut tape = Tape::<f32>::new();
    let bound = BoundEncoder::bind(&mut tape, params, cfg, false)?;
    let row = tape.constant(Tensor::from_vec(&[1, cfg.dim], embedding.to_vec())?);
    let logits = bound.head(&mut tape, row, kind);
    Ok(tape.value(logits).data().to_vec())
}
