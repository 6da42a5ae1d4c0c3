//! Binary checkpoint: magic "RDWB", a fixed header, then a named tensor
//! table holding student weights, teacher weights, distillation centers,
//! and optimizer moments.
//!
//! Header layout, all little-endian: magic, version u32, the nine encoder
//! config fields as u32 each, intensity mean and std as f32, step u64,
//! seed u64. Each tensor entry is name length u16 + UTF-8 name, ndim u8,
//! dims as u32 each, then the payload as f32 row-major. Tensors are written
//! in sorted name order, so save -> load -> save reproduces identical bytes.
//!
//! Decoding validates the complete name set against the inventory implied
//! by the header's encoder config: unknown, duplicate, missing, or
//! misshapen entries are all rejected.

use std::collections::BTreeMap;
use std::path::Path;

use crate::augment::IntensityStats;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"RDWB";
pub const VERSION: u32 = 1;

pub const CENTER_IMAGE: &str = "center.image";
pub const CENTER_PATCH: &str = "center.patch";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub stats: IntensityStats,
    pub step: u64,
    pub seed: u64,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    /// Full tensor name set for a config: student and teacher copies of the
    /// parameter inventory, the two centers, and first/second optimizer
    /// moments for every student tensor.
    pub fn expected_entries(config: &EncoderConfig) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        for (name, dims) in config.inventory() {
            out.insert(format!("student.{name}"), dims.clone());
            out.insert(format!("teacher.{name}"), dims.clone());
            out.insert(format!("opt.m.{name}"), dims.clone());
            out.insert(format!("opt.v.{name}"), dims);
        }
        out.insert(CENTER_IMAGE.to_string(), vec![config.prototypes]);
        out.insert(CENTER_PATCH.to_string(), vec![config.prototypes]);
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.stats.validate()?;
        let expected = Self::expected_entries(&self.config);
        for (name, dims) in &expected {
            let t = self.tensors.get(name).ok_or_else(|| {
                Error::Format(format!("checkpoint is missing tensor {name:?}"))
            })?;
            if t.shape() != &dims[..] {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name:?} has shape {:?}, expected {dims:?}",
                    t.shape()
                )));
            }
        }
        for name in self.tensors.keys() {
            if !expected.contains_key(name) {
                return Err(Error::Format(format!("unknown checkpoint tensor {name:?}")));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in self.config.header_fields() {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.stats.mean.to_le_bytes());
        out.extend_from_slice(&self.stats.std.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Reader { bytes, pos: 0 };
        if cur.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad checkpoint magic, expected RDWB".into()));
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let mut fields = [0usize; 9];
        for (i, f) in fields.iter_mut().enumerate() {
            *f = cur.u32(&format!("config field {i}"))? as usize;
        }
        let config = EncoderConfig::from_header_fields(fields)?;
        let stats = IntensityStats { mean: cur.f32("mean")?, std: cur.f32("std")? };
        let step = cur.u64("step")?;
        let seed = cur.u64("seed")?;

        let mut tensors = BTreeMap::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u16("tensor name length")? as usize;
            let name = String::from_utf8(cur.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = cur.take(1, "ndim")?[0] as usize;
            if ndim == 0 || ndim > 4 {
                return Err(Error::Format(format!("tensor {name:?} ndim {ndim} outside 1..=4")));
            }
            let mut dims = Vec::with_capacity(ndim);
            let mut numel = 1usize;
            for i in 0..ndim {
                let d = cur.u32(&format!("dim {i} of {name}"))? as usize;
                if d == 0 {
                    return Err(Error::Format(format!("tensor {name:?} has a zero dim")));
                }
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format(format!("tensor {name:?} numel overflow")))?;
                dims.push(d);
            }
            // length check before allocation so truncated or hostile inputs
            // cannot trigger huge allocations
            let payload_len = numel
                .checked_mul(4)
                .ok_or_else(|| Error::Format(format!("tensor {name:?} numel overflow")))?;
            let payload = cur.take(payload_len, &format!("payload of {name}"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::from_vec(&dims, data)?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(Error::Format(format!("duplicate checkpoint tensor {name:?}")));
            }
        }
        let ckpt = Checkpoint { config, stats, step, seed, tensors };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    fn branch(&self, prefix: &str) -> Result<EncoderParams<f32>> {
        let tensors: BTreeMap<String, Tensor<f32>> = self
            .tensors
            .iter()
            .filter_map(|(name, t)| {
                name.strip_prefix(prefix).map(|rest| (rest.to_string(), t.clone()))
            })
            .collect();
        EncoderParams::from_tensors(&self.config, tensors)
    }

    pub fn student(&self) -> Result<EncoderParams<f32>> {
        self.branch("student.")
    }

    pub fn teacher(&self) -> Result<EncoderParams<f32>> {
        self.branch("teacher.")
    }

    pub fn center(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks center {name:?}")))
    }

    /// Untrained state: student and teacher share the seeded initialization,
    /// optimizer moments and centers are zero, step is 0.
    pub fn fresh(config: EncoderConfig, stats: IntensityStats, seed: u64) -> Result<Checkpoint> {
        let params = EncoderParams::<f32>::init(&config, seed)?;
        let mut tensors = BTreeMap::new();
        for (name, t) in params.iter() {
            tensors.insert(format!("student.{name}"), t.clone());
            tensors.insert(format!("teacher.{name}"), t.clone());
            let zero = Tensor::zeros(t.shape());
            tensors.insert(format!("opt.m.{name}"), zero.clone());
            tensors.insert(format!("opt.v.{name}"), zero);
        }
        tensors.insert(CENTER_IMAGE.to_string(), Tensor::zeros(&[config.prototypes]));
        tensors.insert(CENTER_PATCH.to_string(), Tensor::zeros(&[config.prototypes]));
        let out = Checkpoint { config, stats, step: 0, seed, tensors };
        out.validate()?;
        Ok(out)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated in {what}: have {}, need {n}",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_bits(self.u32(what)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> EncoderConfig {
        let mut cfg = EncoderConfig::desk_default();
        cfg.image_side = 16;
        cfg.dim = 8;
        cfg.depth = 1;
        cfg.heads = 2;
        cfg.prototypes = 4;
        cfg.bottleneck = 4;
        cfg
    }

    fn sample_checkpoint() -> Checkpoint {
        let cfg = tiny_config();
        let student = EncoderParams::<f32>::init(&cfg, 3).unwrap();
        let teacher = EncoderParams::<f32>::init(&cfg, 4).unwrap();
        let mut tensors = BTreeMap::new();
        for (name, t) in student.iter() {
            tensors.insert(format!("student.{name}"), t.clone());
            let zeros = Tensor::zeros(t.shape());
            tensors.insert(format!("opt.m.{name}"), zeros.clone());
            tensors.insert(format!("opt.v.{name}"), zeros);
        }
        for (name, t) in teacher.iter() {
            tensors.insert(format!("teacher.{name}"), t.clone());
        }
        tensors.insert(CENTER_IMAGE.into(), Tensor::from_vec(&[4], vec![0.1, -0.2, 0.3, 0.0]).unwrap());
        tensors.insert(CENTER_PATCH.into(), Tensor::zeros(&[4]));
        Checkpoint {
            config: cfg,
            stats: IntensityStats { mean: 0.44, std: 0.21 },
            step: 17,
            seed: 9,
            tensors,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ckpt = sample_checkpoint();
        let once = ckpt.encode().unwrap();
        let decoded = Checkpoint::decode(&once).unwrap();
        assert_eq!(decoded, ckpt);
        assert_eq!(decoded.encode().unwrap(), once);
    }

    #[test]
    fn branch_extraction_round_trips() {
        let ckpt = sample_checkpoint();
        let student = ckpt.student().unwrap();
        let teacher = ckpt.teacher().unwrap();
        assert_eq!(student.numel(), teacher.numel());
        assert_eq!(
            student.get("patch_embed.weight").data(),
            ckpt.tensors["student.patch_embed.weight"].data()
        );
        assert_eq!(ckpt.center(CENTER_IMAGE).unwrap().data()[1], -0.2);
    }

    #[test]
    fn unknown_missing_and_misshapen_tensors_are_rejected() {
        let mut extra = sample_checkpoint();
        extra
            .tensors
            .insert("student.mystery".into(), Tensor::zeros(&[2]));
        assert!(extra.encode().is_err());

        let mut missing = sample_checkpoint();
        missing.tensors.remove(CENTER_PATCH);
        assert!(missing.encode().is_err());

        let mut bad_shape = sample_checkpoint();
        bad_shape
            .tensors
            .insert(CENTER_PATCH.into(), Tensor::zeros(&[5]));
        assert!(bad_shape.encode().is_err());
    }

    #[test]
    fn decoder_rejects_corrupt_bytes() {
        let good = sample_checkpoint().encode().unwrap();
        assert!(Checkpoint::decode(&good[..good.len() - 1]).is_err());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::decode(&bad_magic).is_err());
        let mut bad_version = good.clone();
        bad_version[4] = 99;
        assert!(Checkpoint::decode(&bad_version).is_err());
        assert!(Checkpoint::decode(&[]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rdwb");
        let ckpt = sample_checkpoint();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.seed, 9);
    }
}
