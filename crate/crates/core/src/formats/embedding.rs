//! Binary embedding archive: magic "RDEM", version u32 LE, record count
//! u32, then per record: id (u16 length + UTF-8), subject id likewise,
//! D u32, the class embedding as D little-endian f32, a patch-grid flag
//! byte, optionally N u32 + N*D f32 patch rows, label-bit count u16 +
//! LSB-first packed bits, and attribute count u16 + length-prefixed
//! (key, value) UTF-8 pairs.
//!
//! Every record in a file must agree on embedding width, label count, and
//! patch presence; the consumers (probes, retrieval) index columns across
//! records and a ragged file is always a writer bug.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"RDEM";
pub const VERSION: u32 = 1;

/// Guard for hostile inputs; real embeddings are orders of magnitude smaller.
const MAX_DIM: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub subject: String,
    pub cls: Vec<f32>,
    /// Patch tokens as an [N, D] tensor when the file carries them.
    pub patches: Option<Tensor<f32>>,
    /// One bit per label class, indexed by the corpus label universe.
    pub labels: Vec<bool>,
    pub attrs: Vec<(String, String)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingFile {
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingFile {
    pub fn dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.cls.len())
    }

    pub fn label_count(&self) -> usize {
        self.records.first().map_or(0, |r| r.labels.len())
    }

    pub fn has_patches(&self) -> bool {
        self.records.first().is_some_and(|r| r.patches.is_some())
    }

    fn validate(&self) -> Result<()> {
        let (d, lc, hp) = (self.dim(), self.label_count(), self.has_patches());
        for rec in &self.records {
            if rec.cls.is_empty() {
                return Err(Error::Format(format!("record {:?} has an empty embedding", rec.id)));
            }
            if rec.cls.len() != d || rec.labels.len() != lc || rec.patches.is_some() != hp {
                return Err(Error::Format(format!(
                    "record {:?} disagrees with the file layout (D={d}, labels={lc}, patches={hp})",
                    rec.id
                )));
            }
            if let Some(p) = &rec.patches {
                let (_, pd) = p.dims2()?;
                if pd != d {
                    return Err(Error::Format(format!(
                        "record {:?} patch width {pd} != class width {d}",
                        rec.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for rec in &self.records {
            write_str(&mut out, &rec.id)?;
            write_str(&mut out, &rec.subject)?;
            out.extend_from_slice(&(rec.cls.len() as u32).to_le_bytes());
            for &v in &rec.cls {
                out.extend_from_slice(&v.to_le_bytes());
            }
            match &rec.patches {
                Some(p) => {
                    out.push(1);
                    let (n, _) = p.dims2()?;
                    out.extend_from_slice(&(n as u32).to_le_bytes());
                    for &v in p.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                None => out.push(0),
            }
            out.extend_from_slice(&(rec.labels.len() as u16).to_le_bytes());
            let mut packed = vec![0u8; rec.labels.len().div_ceil(8)];
            for (i, &bit) in rec.labels.iter().enumerate() {
                if bit {
                    packed[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&packed);
            out.extend_from_slice(&(rec.attrs.len() as u16).to_le_bytes());
            for (k, v) in &rec.attrs {
                write_str(&mut out, k)?;
                write_str(&mut out, v)?;
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<EmbeddingFile> {
        let mut cur = Reader { bytes, pos: 0 };
        if cur.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad embedding magic, expected RDEM".into()));
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "embedding version {version}, this build reads {VERSION}"
            )));
        }
        let count = cur.u32("record count")? as usize;
        let mut records = Vec::new();
        for i in 0..count {
            let id = cur.string(&format!("id of record {i}"))?;
            let subject = cur.string(&format!("subject of record {i}"))?;
            let d = cur.u32("embedding width")? as usize;
            if d == 0 || d > MAX_DIM {
                return Err(Error::Format(format!("embedding width {d} outside 1..={MAX_DIM}")));
            }
            let cls = cur.f32s(d, &format!("class embedding of {id}"))?;
            let flag = cur.take(1, "patch flag")?[0];
            let patches = match flag {
                0 => None,
                1 => {
                    let n = cur.u32("patch count")? as usize;
                    if n == 0 || n > MAX_DIM {
                        return Err(Error::Format(format!(
                            "patch count {n} outside 1..={MAX_DIM}"
                        )));
                    }
                    let data = cur.f32s(
                        n.checked_mul(d)
                            .ok_or_else(|| Error::Format("patch grid overflow".into()))?,
                        &format!("patch grid of {id}"),
                    )?;
                    Some(Tensor::from_vec(&[n, d], data)?)
                }
                other => {
                    return Err(Error::Format(format!("patch flag {other} is not 0/1")));
                }
            };
            let label_count = cur.u16("label count")? as usize;
            let packed = cur.take(label_count.div_ceil(8), "label bits")?;
            let labels = (0..label_count).map(|b| packed[b / 8] >> (b % 8) & 1 == 1).collect();
            let attr_count = cur.u16("attr count")? as usize;
            let mut attrs = Vec::with_capacity(attr_count.min(64));
            for _ in 0..attr_count {
                let k = cur.string("attr key")?;
                let v = cur.string("attr value")?;
                attrs.push((k, v));
            }
            records.push(EmbeddingRecord { id, subject, cls, patches, labels, attrs });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last record",
                bytes.len() - cur.pos
            )));
        }
        let file = EmbeddingFile { records };
        file.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EmbeddingFile> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::Format(format!("string of {} bytes exceeds u16 length", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "embedding file truncated in {what}: have {}, need {n}",
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

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        String::from_utf8(self.take(len, what)?.to_vec())
            .map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("{what} length overflow")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_patches: bool) -> EmbeddingFile {
        let patches = |base: f32| {
            with_patches
                .then(|| Tensor::from_vec(&[2, 3], (0..6).map(|i| base + i as f32).collect()).unwrap())
        };
        EmbeddingFile {
            records: vec![
                EmbeddingRecord {
                    id: "s00000_0".into(),
                    subject: "s00000".into(),
                    cls: vec![0.5, -1.25, 3.0],
                    patches: patches(0.0),
                    labels: vec![true, false, true],
                    attrs: vec![("scale_class".into(), "small".into())],
                },
                EmbeddingRecord {
                    id: "s00001_0".into(),
                    subject: "s00001".into(),
                    cls: vec![1.0, 2.0, -0.5],
                    patches: patches(10.0),
                    labels: vec![false, false, false],
                    attrs: vec![],
                },
            ],
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        for with_patches in [false, true] {
            let file = sample(with_patches);
            let bytes = file.encode().unwrap();
            let decoded = EmbeddingFile::decode(&bytes).unwrap();
            assert_eq!(decoded, file);
            assert_eq!(decoded.encode().unwrap(), bytes);
        }
    }

    #[test]
    fn label_bits_pack_lsb_first() {
        let bytes = sample(false).encode().unwrap();
        // bits [true, false, true] must pack to 0b101 = 5
        let decoded = EmbeddingFile::decode(&bytes).unwrap();
        assert_eq!(decoded.records[0].labels, vec![true, false, true]);
        let mut probe = sample(false);
        probe.records[0].labels = vec![true; 9];
        let enc = probe.encode().unwrap_err();
        // 9 labels vs 3 in the second record violates uniformity
        assert!(enc.to_string().contains("disagrees"));
    }

    #[test]
    fn ragged_files_are_rejected() {
        let mut bad_dim = sample(false);
        bad_dim.records[1].cls = vec![1.0, 2.0];
        assert!(bad_dim.encode().is_err());
        let mut bad_patches = sample(true);
        bad_patches.records[1].patches = None;
        assert!(bad_patches.encode().is_err());
        let mut bad_width = sample(true);
        bad_width.records[1].patches = Some(Tensor::from_vec(&[2, 2], vec![0.0; 4]).unwrap());
        assert!(bad_width.encode().is_err());
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let good = sample(true).encode().unwrap();
        assert!(EmbeddingFile::decode(&good[..good.len() - 2]).is_err());
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(EmbeddingFile::decode(&trailing).is_err());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'Q';
        assert!(EmbeddingFile::decode(&bad_magic).is_err());
        assert!(EmbeddingFile::decode(&[]).is_err());
        let empty = EmbeddingFile::default().encode().unwrap();
        assert_eq!(EmbeddingFile::decode(&empty).unwrap().records.len(), 0);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.rdem");
        let file = sample(true);
        file.save(&path).unwrap();
        assert_eq!(EmbeddingFile::load(&path).unwrap(), file);
    }
}
