//! Corpus manifest: one CSV row per image with subject, labels, mask paths,
//! free-form attributes, and a split tag.
//!
//! The split is assigned per subject; a subject appearing in two splits is a
//! leakage bug, so parsing rejects it outright. Paths are stored relative to
//! the manifest file and only checked against the filesystem in [`Manifest::load`],
//! keeping [`parse_manifest`] pure for fuzzing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 6] = ["image", "subject", "labels", "masks", "attrs", "split"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!(
                "split tag {other:?} is not one of train/val/test"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub image: String,
    pub subject: String,
    /// Label ids present in the image, sorted and deduplicated.
    pub labels: Vec<String>,
    /// Structure name to mask image path.
    pub masks: BTreeMap<String, String>,
    /// Free-form metadata such as rendering latents.
    pub attrs: BTreeMap<String, String>,
    pub split: Split,
}

impl ManifestRow {
    pub fn has_label(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn attr_f32(&self, key: &str) -> Result<f32> {
        let raw = self
            .attrs
            .get(key)
            .ok_or_else(|| Error::Format(format!("row {} lacks attr {key:?}", self.image)))?;
        raw.parse::<f32>()
            .map_err(|_| Error::Format(format!("attr {key}={raw:?} is not a number")))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        check_rows(&rows)?;
        Ok(Manifest { rows })
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn split_rows(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn subjects(&self, split: Split) -> BTreeSet<&str> {
        self.rows
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.subject.as_str())
            .collect()
    }

    /// Every label id that appears anywhere, sorted.
    pub fn label_universe(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.rows.iter().flat_map(|r| &r.labels).collect();
        set.into_iter().cloned().collect()
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(COLUMNS).expect("vec write");
        for row in &self.rows {
            let masks: Vec<String> = row.masks.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let attrs: Vec<String> = row.attrs.iter().map(|(k, v)| format!("{k}={v}")).collect();
            wtr.write_record([
                row.image.as_str(),
                row.subject.as_str(),
                &row.labels.join(";"),
                &masks.join(";"),
                &attrs.join(";"),
                row.split.as_str(),
            ])
            .expect("vec write");
        }
        wtr.into_inner().expect("vec flush")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_bytes())?;
        Ok(())
    }

    /// Parse a manifest file and verify every referenced image and mask
    /// exists next to it.
    pub fn load(path: &Path) -> Result<(Manifest, PathBuf)> {
        let bytes = std::fs::read(path)?;
        let manifest = parse_manifest(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        for row in &manifest.rows {
            for rel in std::iter::once(&row.image).chain(row.masks.values()) {
                let p = root.join(rel);
                if !p.is_file() {
                    return Err(Error::Format(format!(
                        "manifest references missing file {}",
                        p.display()
                    )));
                }
            }
        }
        Ok((manifest, root))
    }
}

pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format(format!("manifest header: {e}")))?
        .clone();
    if headers.iter().ne(COLUMNS) {
        return Err(Error::Format(format!(
            "manifest columns {:?}, expected {COLUMNS:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut rows = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("manifest row {idx}: {e}")))?;
        let field = |i: usize| record.get(i).unwrap_or("").trim().to_string();
        let image = field(0);
        let subject = field(1);
        if image.is_empty() || subject.is_empty() {
            return Err(Error::Format(format!(
                "manifest row {idx}: image and subject must be non-empty"
            )));
        }
        let mut labels: Vec<String> = split_list(&field(2));
        labels.sort();
        labels.dedup();
        rows.push(ManifestRow {
            image,
            subject,
            labels,
            masks: parse_pairs(&field(3), idx, "masks")?,
            attrs: parse_pairs(&field(4), idx, "attrs")?,
            split: Split::parse(&field(5))?,
        });
    }
    Manifest::new(rows)
}

fn split_list(field: &str) -> Vec<String> {
    field
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_pairs(field: &str, row: usize, what: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for item in split_list(field) {
        let (k, v) = item.split_once('=').ok_or_else(|| {
            Error::Format(format!("manifest row {row}: {what} entry {item:?} lacks '='"))
        })?;
        if k.is_empty() {
            return Err(Error::Format(format!(
                "manifest row {row}: empty key in {what}"
            )));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Format(format!(
                "manifest row {row}: duplicate {what} key {k:?}"
            )));
        }
    }
    Ok(out)
}

fn check_rows(rows: &[ManifestRow]) -> Result<()> {
    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    for row in rows {
        match seen.insert(&row.subject, row.split) {
            Some(prev) if prev != row.split => {
                return Err(Error::Format(format!(
                    "subject {:?} appears in both {} and {} splits",
                    row.subject, prev, row.split
                )));
            }
            _ => {}
        }
    }
    Ok(())
}
