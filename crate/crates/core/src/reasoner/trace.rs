//! JSON-lines reasoning traces: one record per (image, class).

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Provenance, ReasoningBundle};
use crate::vocab::{ClassId, ClassVocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub image_id: String,
    pub class_id: ClassId,
    pub class_name: String,
    pub provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raw_name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub similarity: Option<f64>,
    pub broad: String,
    pub sub: String,
    pub attributes: Vec<String>,
}

pub fn trace_records(bundle: &ReasoningBundle, vocab: &ClassVocabulary) -> Vec<TraceRecord> {
    bundle
        .entries
        .iter()
        .map(|(&id, e)| TraceRecord {
            image_id: bundle.image_id.clone(),
            class_id: id,
            class_name: vocab.name(id).unwrap_or_default().to_string(),
            provenance: e.provenance,
            raw_name: e.raw_name.clone(),
            similarity: e.similarity,
            broad: e.chain.broad().to_string(),
            sub: e.chain.sub().to_string(),
            attributes: e.chain.attributes().to_vec(),
        })
        .collect()
}

pub fn write_trace(records: &[TraceRecord], path: &Path) -> io::Result<()> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_trace(path: &Path) -> io::Result<Vec<TraceRecord>> {
    let reader = io::BufReader::new(fs::File::open(path)?);
    reader
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(io::Error::from))
        .collect()
}
