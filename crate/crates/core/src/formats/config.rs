//! Flat `key = value` run configuration: UTF-8 text, `#` comments, dotted
//! key namespaces, no nesting, so experiment sweeps diff line by line.
//!
//! Unknown and duplicate keys are hard errors: a typoed key that silently
//! fell back to its default would corrupt a sweep without a trace.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::augment::CropPolicy;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evalsuite::{ProbeConfig, SegConfig};
use crate::trainer::TrainConfig;

/// Parsed key/value lines plus a record of which keys a builder consumed,
/// so leftovers can be rejected as unknown.
pub struct RawConfig {
    pairs: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

/// Parse config text. Keys are lowercase words of letters, digits, `_` and
/// `.`; everything after `#` on a line is comment; duplicates are errors.
pub fn parse_raw(bytes: &[u8]) -> Result<RawConfig> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Config("config is not UTF-8 text".into()))?;
    let mut pairs = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let n = idx + 1;
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {n}: expected `key = value`")));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty()
            || !key
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'.' || b == b'_')
        {
            return Err(Error::Config(format!("line {n}: malformed key `{key}`")));
        }
        if value.is_empty() {
            return Err(Error::Config(format!("line {n}: key `{key}` has no value")));
        }
        if pairs.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Config(format!("line {n}: duplicate key `{key}`")));
        }
    }
    Ok(RawConfig { pairs, used: RefCell::new(BTreeSet::new()) })
}

impl RawConfig {
    fn take(&self, key: &str) -> Option<&str> {
        let hit = self.pairs.get(key).map(String::as_str);
        if hit.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        hit
    }

    fn parsed<T, F>(&self, key: &str, default: T, kind: &str, parse: F) -> Result<T>
    where
        F: Fn(&str) -> Option<T>,
    {
        match self.take(key) {
            None => Ok(default),
            Some(v) => parse(v).ok_or_else(|| {
                Error::Config(format!("key `{key}`: expected {kind}, got `{v}`"))
            }),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        self.parsed(key, default, "a non-negative integer", |v| v.parse().ok())
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        self.parsed(key, default, "a non-negative integer", |v| v.parse().ok())
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        self.parsed(key, default, "a finite number", |v| {
            v.parse::<f64>().ok().filter(|x| x.is_finite())
        })
    }

    pub fn f32_or(&self, key: &str, default: f32) -> Result<f32> {
        self.parsed(key, default, "a finite number", |v| {
            v.parse::<f32>().ok().filter(|x| x.is_finite())
        })
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        self.parsed(key, default, "true or false", |v| match v {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        })
    }

    /// Two comma-separated finite numbers, e.g. `0.1, 0.5`.
    pub fn pair_f32_or(&self, key: &str, default: [f32; 2]) -> Result<[f32; 2]> {
        self.parsed(key, default, "two comma-separated numbers", |v| {
            let (a, b) = v.split_once(',')?;
            let a = a.trim().parse::<f32>().ok().filter(|x| x.is_finite())?;
            let b = b.trim().parse::<f32>().ok().filter(|x| x.is_finite())?;
            Some([a, b])
        })
    }

    /// Error out on any key no builder asked for.
    pub fn ensure_consumed(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .pairs
            .keys()
            .map(String::as_str)
            .filter(|k| !used.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }
}

fn apply_train(raw: &RawConfig, cfg: &mut TrainConfig) -> Result<()> {
    let e = &mut cfg.encoder;
    e.image_side = raw.usize_or("encoder.image_side", e.image_side)?;
    e.patch_side = raw.usize_or("encoder.patch_side", e.patch_side)?;
    e.dim = raw.usize_or("encoder.dim", e.dim)?;
    e.depth = raw.usize_or("encoder.depth", e.depth)?;
    e.heads = raw.usize_or("encoder.heads", e.heads)?;
    e.mlp_ratio = raw.usize_or("encoder.mlp_ratio", e.mlp_ratio)?;
    e.prototypes = raw.usize_or("encoder.prototypes", e.prototypes)?;
    e.bottleneck = raw.usize_or("encoder.bottleneck", e.bottleneck)?;
    e.share_heads = raw.bool_or("encoder.share_heads", e.share_heads)?;

    // crop defaults follow the encoder geometry; explicit keys then override
    cfg.crops = CropPolicy::for_resolution(e.image_side, e.patch_side);
    let c = &mut cfg.crops;
    c.global_out = raw.usize_or("crop.global_out", c.global_out)?;
    c.local_out = raw.usize_or("crop.local_out", c.local_out)?;
    c.global_frac = raw.pair_f32_or("crop.global_frac", c.global_frac)?;
    c.local_frac = raw.pair_f32_or("crop.local_frac", c.local_frac)?;
    c.global_count = raw.usize_or("crop.global_count", c.global_count)?;
    c.local_count = raw.usize_or("crop.local_count", c.local_count)?;
    c.flip_prob = raw.f32_or("crop.flip_prob", c.flip_prob)?;
    c.jitter = raw.f32_or("crop.jitter", c.jitter)?;
    c.teacher_sigma = raw.pair_f32_or("crop.teacher_sigma", c.teacher_sigma)?;
    c.student_sigma = raw.pair_f32_or("crop.student_sigma", c.student_sigma)?;

    let m = &mut cfg.masking;
    m.masked_fraction = raw.f32_or("mask.fraction", m.masked_fraction)?;
    m.ratio = raw.pair_f32_or("mask.ratio", m.ratio)?;

    cfg.batch = raw.usize_or("batch", cfg.batch)?;
    cfg.epochs = raw.usize_or("epochs", cfg.epochs)?;
    cfg.base_lr = raw.f64_or("base_lr", cfg.base_lr)?;
    cfg.final_lr = raw.f64_or("final_lr", cfg.final_lr)?;
    cfg.warmup_frac = raw.f64_or("warmup_frac", cfg.warmup_frac)?;
    cfg.weight_decay = raw.f32_or("weight_decay", cfg.weight_decay)?;
    cfg.clip_norm = raw.f32_or("clip_norm", cfg.clip_norm)?;
    cfg.ema_start = raw.f64_or("ema_start", cfg.ema_start)?;
    cfg.ema_end = raw.f64_or("ema_end", cfg.ema_end)?;
    cfg.seed = raw.u64_or("seed", cfg.seed)?;
    cfg.no_mim = raw.bool_or("no_mim", cfg.no_mim)?;
    cfg.checkpoint_interval = raw.u64_or("checkpoint_interval", cfg.checkpoint_interval)?;
    Ok(())
}

/// Pre-training configuration from config text. Paths come from the
/// command line, every other field starts at its desk default.
pub fn train_config(bytes: &[u8], manifest: PathBuf, out_dir: &Path) -> Result<TrainConfig> {
    let raw = parse_raw(bytes)?;
    let mut cfg = TrainConfig::desk_default(manifest, out_dir);
    apply_train(&raw, &mut cfg)?;
    raw.ensure_consumed()?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn probe_config(bytes: &[u8]) -> Result<ProbeConfig> {
    let raw = parse_raw(bytes)?;
    let mut cfg = ProbeConfig::desk_default();
    cfg.epochs = raw.usize_or("probe.epochs", cfg.epochs)?;
    cfg.lr = raw.f64_or("probe.lr", cfg.lr)?;
    cfg.weight_decay = raw.f64_or("probe.weight_decay", cfg.weight_decay)?;
    cfg.folds = raw.usize_or("probe.folds", cfg.folds)?;
    cfg.seeds = raw.u64_or("probe.seeds", cfg.seeds)?;
    raw.ensure_consumed()?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn seg_config(bytes: &[u8]) -> Result<SegConfig> {
    let raw = parse_raw(bytes)?;
    let mut cfg = SegConfig::desk_default();
    cfg.epochs = raw.usize_or("seg.epochs", cfg.epochs)?;
    cfg.lr = raw.f64_or("seg.lr", cfg.lr)?;
    cfg.weight_decay = raw.f64_or("seg.weight_decay", cfg.weight_decay)?;
    raw.ensure_consumed()?;
    cfg.validate()?;
    Ok(cfg)
}

fn pair(v: [f32; 2]) -> String {
    format!("{}, {}", v[0], v[1])
}

/// Render every trainable-run key with its current value, in the parse
/// namespace, so the output feeds straight back into [`train_config`].
/// `{}` prints the shortest digits that reparse to the same float, so a
/// render/parse cycle is lossless.
pub fn render_train(cfg: &TrainConfig) -> String {
    let mut s = String::new();
    let e = &cfg.encoder;
    let _ = writeln!(s, "encoder.image_side = {}", e.image_side);
    let _ = writeln!(s, "encoder.patch_side = {}", e.patch_side);
    let _ = writeln!(s, "encoder.dim = {}", e.dim);
    let _ = writeln!(s, "encoder.depth = {}", e.depth);
    let _ = writeln!(s, "encoder.heads = {}", e.heads);
    let _ = writeln!(s, "encoder.mlp_ratio = {}", e.mlp_ratio);
    let _ = writeln!(s, "encoder.prototypes = {}", e.prototypes);
    let _ = writeln!(s, "encoder.bottleneck = {}", e.bottleneck);
    let _ = writeln!(s, "encoder.share_heads = {}", e.share_heads);
    let c = &cfg.crops;
    let _ = writeln!(s, "crop.global_out = {}", c.global_out);
    let _ = writeln!(s, "crop.local_out = {}", c.local_out);
    let _ = writeln!(s, "crop.global_frac = {}", pair(c.global_frac));
    let _ = writeln!(s, "crop.local_frac = {}", pair(c.local_frac));
    let _ = writeln!(s, "crop.global_count = {}", c.global_count);
    let _ = writeln!(s, "crop.local_count = {}", c.local_count);
    let _ = writeln!(s, "crop.flip_prob = {}", c.flip_prob);
    let _ = writeln!(s, "crop.jitter = {}", c.jitter);
    let _ = writeln!(s, "crop.teacher_sigma = {}", pair(c.teacher_sigma));
    let _ = writeln!(s, "crop.student_sigma = {}", pair(c.student_sigma));
    let _ = writeln!(s, "mask.fraction = {}", cfg.masking.masked_fraction);
    let _ = writeln!(s, "mask.ratio = {}", pair(cfg.masking.ratio));
    let _ = writeln!(s, "batch = {}", cfg.batch);
    let _ = writeln!(s, "epochs = {}", cfg.epochs);
    let _ = writeln!(s, "base_lr = {}", cfg.base_lr);
    let _ = writeln!(s, "final_lr = {}", cfg.final_lr);
    let _ = writeln!(s, "warmup_frac = {}", cfg.warmup_frac);
    let _ = writeln!(s, "weight_decay = {}", cfg.weight_decay);
    let _ = writeln!(s, "clip_norm = {}", cfg.clip_norm);
    let _ = writeln!(s, "ema_start = {}", cfg.ema_start);
    let _ = writeln!(s, "ema_end = {}", cfg.ema_end);
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "no_mim = {}", cfg.no_mim);
    let _ = writeln!(s, "checkpoint_interval = {}", cfg.checkpoint_interval);
    s
}

pub fn render_probe(cfg: &ProbeConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "probe.epochs = {}", cfg.epochs);
    let _ = writeln!(s, "probe.lr = {}", cfg.lr);
    let _ = writeln!(s, "probe.weight_decay = {}", cfg.weight_decay);
    let _ = writeln!(s, "probe.folds = {}", cfg.folds);
    let _ = writeln!(s, "probe.seeds = {}", cfg.seeds);
    s
}

pub fn render_seg(cfg: &SegConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seg.epochs = {}", cfg.epochs);
    let _ = writeln!(s, "seg.lr = {}", cfg.lr);
    let _ = writeln!(s, "seg.weight_decay = {}", cfg.weight_decay);
    s
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn train(text: &str) -> Result<TrainConfig> {
        train_config(text.as_bytes(), PathBuf::from("m.csv"), Path::new("out"))
    }

    #[test]
    fn empty_file_yields_the_full_default_config() {
        let parsed = train("").unwrap();
        let default = TrainConfig::desk_default(PathBuf::from("m.csv"), Path::new("out"));
        assert_eq!(render_train(&parsed), render_train(&default));
        assert_eq!(parsed.manifest, default.manifest);
        assert_eq!(parsed.checkpoint_path, default.checkpoint_path);
    }

    #[test]
    fn dotted_keys_override_single_fields() {
        let cfg = train("crop.local_count = 6\nencoder.prototypes = 128\n").unwrap();
        assert_eq!(cfg.crops.local_count, 6);
        assert_eq!(cfg.encoder.prototypes, 128);
        // untouched neighbors keep their defaults
        assert_eq!(cfg.crops.global_count, 2);
    }

    #[test]
    fn resolution_sweeps_need_only_one_key() {
        let cfg = train("encoder.image_side = 32\n").unwrap();
        assert_eq!(cfg.crops.global_out, 32);
        assert_eq!(cfg.crops.local_out % cfg.encoder.patch_side, 0);
        assert!(cfg.crops.local_out <= 32);
        let cfg = train("encoder.image_side = 96\n").unwrap();
        assert_eq!(cfg.crops.global_out, 96);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let err = train("cropp.local_count = 4\n").unwrap_err();
        assert!(err.to_string().contains("cropp.local_count"), "{err}");
        let err = train("batch = 8\nextra = 1\n").unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }

    #[test]
    fn duplicate_keys_are_hard_errors() {
        let err = train("batch = 8\nbatch = 16\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn batch_of_one_fails_validation() {
        let err = train("batch = 1\n").unwrap_err();
        assert!(err.to_string().contains("pairs"), "{err}");
    }

    #[test]
    fn comments_and_spacing_are_ignored() {
        let cfg = train("# full line\n\n  batch = 8  # trailing\n").unwrap();
        assert_eq!(cfg.batch, 8);
    }

    #[test]
    fn type_mismatches_are_rejected() {
        for bad in [
            "batch = true",
            "batch = 1.5",
            "base_lr = fast",
            "base_lr = inf",
            "no_mim = 1",
            "mask.ratio = 0.1",
            "mask.ratio = 0.1, 0.5, 0.9",
            "seed = -1",
        ] {
            let err = train(bad).unwrap_err();
            assert_eq!(err.category(), "config", "{bad} -> {err}");
        }
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(train("batch\n").is_err());
        assert!(train("batch =\n").is_err());
        assert!(train("= 4\n").is_err());
        assert!(train("Batch = 4\n").is_err());
        assert!(parse_raw(&[0xff, 0xfe, 0x00]).is_err());
    }

    #[test]
    fn rendered_configs_reparse_to_themselves() {
        let cfg = train("encoder.image_side = 32\nbatch = 8\nbase_lr = 0.0005\n").unwrap();
        let reparsed = train(&render_train(&cfg)).unwrap();
        assert_eq!(render_train(&reparsed), render_train(&cfg));

        let p = probe_config(b"probe.lr = 0.02\n").unwrap();
        assert_eq!(p.lr, 0.02);
        assert_eq!(render_probe(&probe_config(render_probe(&p).as_bytes()).unwrap()), render_probe(&p));

        let s = seg_config(b"seg.epochs = 50\n").unwrap();
        assert_eq!(s.epochs, 50);
        assert_eq!(render_seg(&seg_config(render_seg(&s).as_bytes()).unwrap()), render_seg(&s));
    }

    #[test]
    fn probe_and_seg_namespaces_reject_train_keys() {
        assert!(probe_config(b"batch = 8\n").is_err());
        assert!(seg_config(b"probe.lr = 0.1\n").is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic_the_parser(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = parse_raw(&bytes);
        }

        #[test]
        fn arbitrary_text_never_panics_the_builders(text in "[ -~\n]{0,128}") {
            let _ = train(&text);
            let _ = probe_config(text.as_bytes());
            let _ = seg_config(text.as_bytes());
        }
    }
}
