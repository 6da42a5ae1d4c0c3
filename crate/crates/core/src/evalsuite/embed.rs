//! Frozen-encoder corpus embedding: one record per manifest row, written
//! as a binary archive for the downstream probes.
//!
//! The teacher branch is the evaluation encoder (it is the slow average the
//! distillation targets come from), and images are normalized with the
//! intensity stats stored in the checkpoint, never recomputed, so the
//! embedding of an image depends only on checkpoint bytes and pixel bytes.

use std::path::Path;

use crate::augment::normalize;
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::formats::checkpoint::Checkpoint;
use crate::formats::embedding::{EmbeddingFile, EmbeddingRecord};
use crate::formats::manifest::Manifest;
use crate::formats::pnm::read_pgm;

/// Embed every manifest row with the checkpoint's teacher branch.
/// Images whose side differs from the training resolution go through
/// positional-embedding interpolation inside the encoder.
pub fn embed_corpus(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    root: &Path,
    with_patches: bool,
) -> Result<EmbeddingFile> {
    ckpt.stats
        .validate()
        .map_err(|e| Error::Data(format!("checkpoint carries unusable stats: {e}")))?;
    let params = ckpt.teacher()?;
    let universe = manifest.label_universe();
    let mut records = Vec::with_capacity(manifest.rows().len());
    for row in manifest.rows() {
        let mut img = read_pgm(&root.join(&row.image))
            .map_err(|e| Error::Data(format!("row {}: {e}", row.image)))?;
        normalize(&mut img, &ckpt.stats);
        let out = encode(&params, &ckpt.config, &img, None, false)?;
        records.push(EmbeddingRecord {
            id: row.image.clone(),
            subject: row.subject.clone(),
            cls: out.cls,
            patches: with_patches.then_some(out.patches),
            labels: universe.iter().map(|l| row.has_label(l)).collect(),
            attrs: row.attrs.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        });
    }
    Ok(EmbeddingFile { records })
}
