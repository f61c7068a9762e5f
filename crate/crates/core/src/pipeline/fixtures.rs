//! Loads mock services from a fixture directory.
//!
//! * `chat.json`: `{"name", "rules": [{"image"?, "image_sha256"?,
//!   "has_image"?, "contains": [..], "replies": ["text" | {"fail": "msg"}]}]}`.
//!   `image` is a path whose sha256 the request image must match.
//! * `embed.json`: `{"dimension", "table": {"text": [..]}}`.
//! * `segment.json`: `{"seed", "high"?, "low"?, "images": [{"id", "image",
//!   "regions"}]}`; `regions` is a label raster whose sidecar names each
//!   region.
//!
//! Paths are relative to the fixture directory. `chat.json` and `embed.json`
//! may be omitted for runs that never reason.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;

use super::PipelineError;
use crate::backends::mock::sha256_hex;
use crate::backends::{ChatRule, MockChat, MockEmbed, MockReply, MockSegment, SegmentImageFixture};
use crate::raster::{load_label_map, load_sidecar};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChatDoc {
    #[serde(default = "default_name")]
    name: String,
    rules: Vec<RuleDoc>,
}

fn default_name() -> String {
    "fixture".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleDoc {
    #[serde(default)]
    image: Option<PathBuf>,
    #[serde(default)]
    image_sha256: Option<String>,
    #[serde(default)]
    has_image: Option<bool>,
    #[serde(default)]
    contains: Vec<String>,
    replies: Vec<ReplyDoc>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ReplyDoc {
    Text(String),
    Fail { fail: String },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbedDoc {
    dimension: usize,
    #[serde(default)]
    table: BTreeMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentDoc {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    high: Option<f32>,
    #[serde(default)]
    low: Option<f32>,
    images: Vec<SegmentImageDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentImageDoc {
    id: String,
    image: PathBuf,
    regions: PathBuf,
}

pub struct MockServices {
    pub chat: Option<MockChat>,
    pub segment: MockSegment,
    pub embed: Option<MockEmbed>,
}

fn fixture_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Fixture(format!("{}: {e}", path.display()))
}

fn read_doc<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, PipelineError> {
    match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| fixture_err(path, e)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(fixture_err(path, e)),
    }
}

fn file_sha(dir: &Path, rel: &Path) -> Result<String, PipelineError> {
    let p = dir.join(rel);
    fs::read(&p).map(|b| sha256_hex(&b)).map_err(|e| fixture_err(&p, e))
}

pub fn load_mock_services(dir: &Path) -> Result<MockServices, PipelineError> {
    let chat = read_doc::<ChatDoc>(&dir.join("chat.json"))?
        .map(|doc| -> Result<MockChat, PipelineError> {
            let rules = doc
                .rules
                .into_iter()
                .map(|r| {
                    let image_sha256 = match (r.image, r.image_sha256) {
                        (Some(p), _) => Some(file_sha(dir, &p)?),
                        (None, sha) => sha,
                    };
                    Ok(ChatRule {
                        image_sha256,
                        has_image: r.has_image,
                        contains: r.contains,
                        replies: r
                            .replies
                            .into_iter()
                            .map(|x| match x {
                                ReplyDoc::Text(t) => MockReply::Text(t),
                                ReplyDoc::Fail { fail } => MockReply::Fail(fail),
                            })
                            .collect(),
                    })
                })
                .collect::<Result<_, PipelineError>>()?;
            Ok(MockChat::with_rules(doc.name, rules))
        })
        .transpose()?;

    let embed_path = dir.join("embed.json");
    let embed = read_doc::<EmbedDoc>(&embed_path)?
        .map(|doc| MockEmbed::new(doc.dimension, doc.table).map_err(|e| fixture_err(&embed_path, e)))
        .transpose()?;

    let seg_path = dir.join("segment.json");
    let doc: SegmentDoc = read_doc(&seg_path)?.ok_or_else(|| fixture_err(&seg_path, "missing"))?;
    let mut images = Vec::with_capacity(doc.images.len());
    for img in doc.images {
        let raster_path = dir.join(&img.regions);
        let map = load_label_map(&raster_path).map_err(|e| fixture_err(&raster_path, e))?;
        let sidecar = load_sidecar(&raster_path)
            .map_err(|e| fixture_err(&raster_path, e))?
            .ok_or_else(|| fixture_err(&raster_path, "region raster needs a labels sidecar"))?;
        let regions = sidecar
            .labels
            .iter()
            .filter(|(&id, _)| map.ids().contains(&id))
            .map(|(&id, name)| (name.clone(), map.ids().iter().map(|&v| v == id).collect()))
            .collect();
        images.push(SegmentImageFixture {
            image_id: img.id,
            image_sha256: file_sha(dir, &img.image)?,
            width: map.width(),
            height: map.height(),
            regions,
        });
    }
    let mut segment = MockSegment::new(images, doc.seed);
    if let Some(h) = doc.high {
        segment.high = h;
    }
    if let Some(l) = doc.low {
        segment.low = l;
    }
    Ok(MockServices { chat, segment, embed })
}
