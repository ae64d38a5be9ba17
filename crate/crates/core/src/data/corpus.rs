//! On-disk corpus layout: `remex.json` (annotation records), a parallel
//! `entitytext.jsonl` (token labels, one line per record), and `scenes/`
//! holding one PPM raster per record.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::entity_text::{load_entitytext, save_entitytext};
use crate::data::raster::Raster;
use crate::data::remex::{load_remex, save_remex};
use crate::data::sample::Sample;
use crate::data::synthetic::SyntheticCorpus;
use crate::data::tokenizer::Vocab;
use crate::error::{Error, Result};

pub const REMEX_FILE: &str = "remex.json";
pub const ENTITYTEXT_FILE: &str = "entitytext.jsonl";

pub fn write_corpus(dir: &Path, corpus: &SyntheticCorpus) -> Result<()> {
    let as_str = |p: &Path| p.to_string_lossy().into_owned();
    std::fs::create_dir_all(dir.join("scenes")).map_err(|e| Error::io(as_str(dir), e))?;
    save_remex(&as_str(&dir.join(REMEX_FILE)), &corpus.records)?;
    save_entitytext(&as_str(&dir.join(ENTITYTEXT_FILE)), &corpus.entity_text())?;
    for (record, sample) in corpus.records.iter().zip(&corpus.samples) {
        sample.raster.write_ppm(&as_str(&dir.join(&record.image_ref)))?;
    }
    Ok(())
}

/// Load records, labels, and rasters back into samples. The caller supplies
/// the vocabulary (training split or checkpoint) and caption budget.
pub fn load_corpus(dir: &Path, vocab: &Vocab, max_len: usize) -> Result<Vec<Sample>> {
    let records = load_remex(&dir.join(REMEX_FILE).to_string_lossy())?;
    let labels = load_entitytext(&dir.join(ENTITYTEXT_FILE).to_string_lossy())?;
    if records.len() != labels.len() {
        return Err(Error::validation(
            None,
            format!("{} records but {} label lines", records.len(), labels.len()),
        ));
    }
    records
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (rec, lab))| {
            let raster = Raster::read_ppm(&dir.join(&rec.image_ref).to_string_lossy())?;
            Sample::from_remex(rec, lab, raster, vocab, max_len)
                .map_err(|e| annotate_record(e, i))
        })
        .collect()
}

fn annotate_record(e: Error, idx: usize) -> Error {
    match e {
        Error::Validation { record: None, rule } => Error::Validation { record: Some(idx), rule },
        other => other,
    }
}

/// SHA-256 over the two annotation files, hex-encoded.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in [REMEX_FILE, ENTITYTEXT_FILE] {
        let path = dir.join(name);
        if path.exists() {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(path.to_string_lossy(), e))?;
            hasher.update(&bytes);
        }
    }
    Ok(hex_string(&hasher.finalize()))
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex_string(&Sha256::digest(bytes))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
