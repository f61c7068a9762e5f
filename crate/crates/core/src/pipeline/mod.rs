//! Batch runner: manifest in, predictions, traces and a metrics report out.
//!
//! Output tree under `out_dir`:
//!
//! ```text
//! labels/<id>.pgm, labels/<id>.labels.json   semantic prediction
//! panoptic/<id>.json, panoptic/<id>.pgm       when the dataset has panoptic ground truth
//! traces/<id>.jsonl                           one reasoning record per class
//! traces/<id>.prompts.json                    prompts sent per class
//! overlays/<id>.ppm                           with `overlay`
//! scores/<id>/<class_id>.f32 (+ .json)        with `dump_scores`
//! report.json, report.csv                     metrics; csv with `csv`
//! run.json                                    timestamps, settings, backends, cache stats
//! ```
//!
//! Every per-image file depends only on that image, so the tree is identical
//! for any worker count.

mod config;
pub mod fixtures;
mod report;

pub use config::RunConfig;
pub use fixtures::{load_mock_services, MockServices};
pub use report::{overlay_ppm, palette, AlignmentRecord, FailureRecord, FallbackRecord, ImageScore, RunReport};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::aligner::{align_bundle, AlignError, AlignmentOutcome, Decision, Embedder};
use crate::backends::{
    CacheStats, CachedChat, CachedEmbed, CachedSegment, ChatBackend, EmbedBackend, HttpChat, HttpEmbed,
    HttpOptions, HttpSegment, ResponseCache, SegmentBackend, SegmentRequest,
};
use crate::composer::{compose_bundle, compose_bundle_with_fallback, ComposeError, PromptSet, PromptStyle};
use crate::ensemble::{
    ensemble_all, resolve_label_map, resolve_label_map_strict, resolve_panoptic, EnsembleError,
};
use crate::manifest::{load_manifest, DatasetManifest, ImageRecord, ManifestError};
use crate::metrics::{panoptic_stats, ConfusionMatrix, MetricsError, PqStats};
use crate::panoptic::{load_panoptic, save_panoptic};
use crate::raster::{load_label_map, save_f32_raster, save_label_map_with_sidecar, MaskStack, RasterError};
use crate::reasoner::{
    merge_reasoning, run_image_specific_reasoning, trace_records, write_trace, GenericReasoner, ImageData,
    ImageReasoning, RawObservedClasses, ReasonerError, ReasoningBundle, ReasoningStage,
};
use crate::scalar::Scalar;
use crate::vocab::ClassId;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("mock fixtures: {0}")]
    Fixture(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("image {image}: {source}")]
    Image {
        image: String,
        #[source]
        source: Box<ImageError>,
    },
    #[error("output {path}: {reason}")]
    Output { path: PathBuf, reason: String },
}

/// Failure of one image; recorded in the report unless the run is fail-fast.
#[derive(Debug, Error)]
pub enum ImageError {
    #[error("reasoning: {0}")]
    Reasoner(#[from] ReasonerError),
    #[error("alignment: {0}")]
    Align(#[from] AlignError),
    #[error("prompts: {0}")]
    Compose(#[from] ComposeError),
    #[error("segmentation: {0}")]
    Segment(#[from] crate::backends::BackendError),
    #[error("ensemble: {0}")]
    Ensemble(#[from] EnsembleError),
    #[error("raster: {0}")]
    Raster(#[from] RasterError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("write {0}: {1}")]
    Write(PathBuf, std::io::Error),
}

/// Numeric precision of ensembling and alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// The three services, already wrapped in the response cache.
#[derive(Clone)]
pub struct Backends {
    pub chat: Option<Arc<dyn ChatBackend>>,
    pub segment: Arc<dyn SegmentBackend>,
    pub embed: Option<Arc<dyn EmbedBackend>>,
    pub cache: Arc<ResponseCache>,
}

impl Backends {
    /// Wraps raw services in a cache (in memory unless `cache_dir` is set).
    pub fn cached(
        chat: Option<Arc<dyn ChatBackend>>,
        segment: Arc<dyn SegmentBackend>,
        embed: Option<Arc<dyn EmbedBackend>>,
        cache_dir: Option<&Path>,
    ) -> Self {
        let cache = Arc::new(match cache_dir {
            Some(d) => ResponseCache::with_dir(d),
            None => ResponseCache::in_memory(),
        });
        Self {
            chat: chat.map(|c| Arc::new(CachedChat::new(c, cache.clone())) as Arc<dyn ChatBackend>),
            segment: Arc::new(CachedSegment::new(segment, cache.clone())),
            embed: embed.map(|e| Arc::new(CachedEmbed::new(e, cache.clone())) as Arc<dyn EmbedBackend>),
            cache,
        }
    }

    /// Mock services when `config.mock` is set, HTTP services otherwise.
    pub fn from_config(config: &RunConfig) -> Result<Self, PipelineError> {
        let cache_dir = config.cache_dir.as_deref();
        if let Some(dir) = &config.mock {
            let m = load_mock_services(dir)?;
            return Ok(Self::cached(
                m.chat.map(|c| Arc::new(c) as Arc<dyn ChatBackend>),
                Arc::new(m.segment),
                m.embed.map(|e| Arc::new(e) as Arc<dyn EmbedBackend>),
                cache_dir,
            ));
        }
        let opts = HttpOptions {
            timeout: Duration::from_secs_f64(config.timeout_secs),
            attempts: config.http_attempts,
            headers: config.headers.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            max_in_flight: config.max_in_flight,
            ..HttpOptions::default()
        };
        let cfg_err = |e: crate::backends::BackendError| PipelineError::Config(e.to_string());
        let chat = match &config.chat_url {
            Some(u) => Some(Arc::new(HttpChat::new(u, opts.clone()).map_err(cfg_err)?) as Arc<dyn ChatBackend>),
            None => None,
        };
        let embed = match &config.embed_url {
            Some(u) => Some(Arc::new(HttpEmbed::new(u, opts.clone()).map_err(cfg_err)?) as Arc<dyn EmbedBackend>),
            None => None,
        };
        let seg_url = config
            .segment_url
            .as_ref()
            .ok_or_else(|| PipelineError::Config("no segment service configured".into()))?;
        let segment = Arc::new(HttpSegment::new(seg_url, opts).map_err(cfg_err)?);
        Ok(Self::cached(chat, segment, embed, cache_dir))
    }

    pub fn identities(&self) -> BTreeMap<&'static str, Option<String>> {
        BTreeMap::from([
            ("chat", self.chat.as_ref().map(|c| c.identity())),
            ("segment", Some(self.segment.identity())),
            ("embed", self.embed.as_ref().map(|e| e.identity())),
        ])
    }
}

/// Run-wide shared state.
struct Context<'a, T> {
    config: &'a RunConfig,
    manifest: &'a DatasetManifest,
    backends: &'a Backends,
    embedder: Option<Embedder<T>>,
    generic: GenericReasoner,
    out: &'a Path,
}

/// What one image contributes to the report.
#[derive(Debug)]
struct ImageOutcome {
    image_id: String,
    confusion: ConfusionMatrix,
    panoptic: Option<BTreeMap<ClassId, PqStats>>,
    fallback: Option<(ReasoningStage, String)>,
    alignments: Vec<AlignmentRecord>,
    generic_classes: usize,
}

/// File-name-safe form of an image id.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), ImageError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| ImageError::Write(path.to_path_buf(), e))
}

impl<T: Scalar> Context<'_, T> {
    /// Reasoning for every class, or `None` for the class-name baseline which
    /// never consults the chat model.
    fn reason(
        &self,
        image: &ImageData,
        outcome: &mut ImageOutcome,
    ) -> Result<Option<ReasoningBundle>, ImageError> {
        if !self.config.prompt_style.uses_reasoning() {
            return Ok(None);
        }
        let vocab = &self.manifest.vocabulary;
        let chat = self.backends.chat.as_deref().expect("validated: chat backend present");
        let embedder = self.embedder.as_ref().expect("validated: embed backend present");
        let aligned = match run_image_specific_reasoning(chat, image, vocab, &self.config.reasoner())? {
            ImageReasoning::Complete {
                description,
                observed,
                chains,
                ..
            } => {
                let explained = RawObservedClasses {
                    names: observed.names.into_iter().filter(|n| chains.contains_key(n)).collect(),
                };
                let (mut bundle, aligns) =
                    align_bundle(&image.id, &explained, &chains, vocab, embedder, self.config.sigma_align)?;
                bundle.description = Some(description);
                outcome.alignments = aligns.iter().map(|a| AlignmentRecord::new(&image.id, a, vocab)).collect();
                bundle
            }
            ImageReasoning::Fallback {
                stage,
                reason,
                description,
            } => {
                outcome.fallback = Some((stage, reason));
                let mut b = ReasoningBundle::empty(&image.id);
                b.description = description;
                b
            }
        };
        let missing: Vec<ClassId> = vocab.ids().filter(|id| !aligned.entries.contains_key(id)).collect();
        if self.config.skip_generic || missing.is_empty() {
            return Ok(Some(aligned));
        }
        outcome.generic_classes = missing.len();
        let chains = self.generic.run(chat, vocab, &missing)?;
        let generic = ReasoningBundle::generic_from(&image.id, chains);
        Ok(Some(merge_reasoning(&aligned, &generic, vocab)?))
    }

    fn process(&self, record: &ImageRecord) -> Result<ImageOutcome, ImageError> {
        let vocab = &self.manifest.vocabulary;
        let stem = file_stem(&record.image.id);
        let (w, h) = (record.image.width, record.image.height);
        let mut outcome = ImageOutcome {
            image_id: record.image.id.clone(),
            confusion: ConfusionMatrix::new(vocab.len()),
            panoptic: None,
            fallback: None,
            alignments: Vec::new(),
            generic_classes: 0,
        };
        let image = ImageData::load(&record.image)?;

        let bundle = self.reason(&image, &mut outcome)?;
        let templates = self.config.templates();
        let empty = ReasoningBundle::empty(&image.id);
        let b = bundle.as_ref().unwrap_or(&empty);
        let prompts: BTreeMap<ClassId, PromptSet> = if self.config.skip_generic || bundle.is_none() {
            compose_bundle_with_fallback(b, vocab, self.config.prompt_style, &templates)?
        } else {
            compose_bundle(b, vocab, self.config.prompt_style, &templates)?
        };

        let mut stacks = Vec::with_capacity(prompts.len());
        for (&id, set) in &prompts {
            let req = SegmentRequest {
                image_mime: image.mime.clone(),
                image: image.bytes.to_vec(),
                prompts: set.prompts().to_vec(),
            };
            let resp = self.backends.segment.segment(&req)?;
            let maps = resp
                .maps
                .into_iter()
                .map(|m| {
                    let m = if (m.width(), m.height()) == (w, h) { m } else { m.resized(w, h)? };
                    crate::raster::LogitMap::new(w, h, m.values().iter().map(|&v| T::of(v as f64)).collect())
                })
                .collect::<Result<Vec<_>, _>>()?;
            stacks.push(MaskStack::new(id, maps)?);
        }
        let ensembles = ensemble_all(&stacks, self.config.tau)?;
        let scores: Vec<_> = ensembles.iter().map(|e| e.scores.clone()).collect();
        let labels = if self.config.strict_eq10 {
            resolve_label_map_strict(&scores, self.config.tau, vocab)?
        } else {
            resolve_label_map(&scores, vocab)?
        };

        // outputs
        let out = self.out;
        save_label_map_with_sidecar(&labels, vocab, &out.join("labels").join(format!("{stem}.pgm")))?;
        let records = bundle.as_ref().map(|b| trace_records(b, vocab)).unwrap_or_default();
        let trace_path = out.join("traces").join(format!("{stem}.jsonl"));
        write_trace(&records, &trace_path).map_err(|e| ImageError::Write(trace_path, e))?;
        let prompt_doc: BTreeMap<&str, &[String]> = prompts
            .iter()
            .map(|(id, p)| (vocab.name(*id).unwrap_or_default(), p.prompts()))
            .collect();
        write_json(&out.join("traces").join(format!("{stem}.prompts.json")), &prompt_doc)?;
        if self.config.overlay {
            let path = out.join("overlays").join(format!("{stem}.ppm"));
            fs::write(&path, overlay_ppm(&labels)).map_err(|e| ImageError::Write(path, e))?;
        }
        if self.config.dump_scores {
            let dir = out.join("scores").join(&stem);
            fs::create_dir_all(&dir).map_err(|e| ImageError::Write(dir.clone(), e))?;
            for s in &scores {
                let meta = json!({"class_id": s.class_id, "class_name": vocab.name(s.class_id)});
                save_f32_raster(w, h, s.scores(), &dir.join(format!("{}.f32", s.class_id.0)), meta)?;
            }
        }

        let gt = load_label_map(&record.gt_semantic)?;
        outcome.confusion.accumulate(&labels, &gt)?;
        if self.manifest.has_panoptic() {
            let masks = ensembles.iter().map(|e| (e.scores.class_id, e.mask.clone())).collect();
            let pan = resolve_panoptic(&labels, &masks, vocab, &self.manifest.thing_classes)?;
            save_panoptic(&pan, &out.join("panoptic").join(format!("{stem}.json")))?;
            if let Some(gt_path) = &record.gt_panoptic {
                outcome.panoptic = Some(panoptic_stats(&pan, &load_panoptic(gt_path)?, vocab)?);
            }
        }
        Ok(outcome)
    }
}

/// Summary returned to callers alongside the files on disk.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub report: RunReport,
    pub cache: CacheStats,
    pub out_dir: PathBuf,
}

fn prepare_out(out: &Path, config: &RunConfig, panoptic: bool) -> Result<(), PipelineError> {
    let mut dirs = vec!["labels", "traces"];
    if panoptic {
        dirs.push("panoptic");
    }
    if config.overlay {
        dirs.push("overlays");
    }
    if config.dump_scores {
        dirs.push("scores");
    }
    for d in dirs {
        let p = out.join(d);
        fs::create_dir_all(&p).map_err(|e| PipelineError::Output {
            path: p.clone(),
            reason: e.to_string(),
        })?;
    }
    Ok(())
}

/// Loads the manifest and backends from `config` and runs.
pub fn run(config: &RunConfig) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let manifest = load_manifest(config.manifest.as_deref().expect("validated"))?;
    let backends = Backends::from_config(config)?;
    match config.precision {
        Precision::F32 => run_with::<f32>(config, &manifest, &backends),
        Precision::F64 => run_with::<f64>(config, &manifest, &backends),
    }
}

/// Runs over an already loaded manifest with the given services.
pub fn run_with<T: Scalar>(
    config: &RunConfig,
    manifest: &DatasetManifest,
    backends: &Backends,
) -> Result<RunSummary, PipelineError> {
    let started = SystemTime::now();
    let clock = Instant::now();
    if config.prompt_style != PromptStyle::ClassName && (backends.chat.is_none() || backends.embed.is_none()) {
        return Err(PipelineError::Config(format!(
            "prompt style {} needs chat and embed services",
            config.prompt_style
        )));
    }
    let mut stems = std::collections::HashSet::new();
    for r in &manifest.records {
        if !stems.insert(file_stem(&r.image.id)) {
            return Err(PipelineError::Config(format!(
                "image id {:?} collides with another id after file-name sanitizing",
                r.image.id
            )));
        }
    }
    let out = config.out_dir.as_path();
    prepare_out(out, config, manifest.has_panoptic())?;
    if manifest.records.is_empty() {
        log::warn!("manifest {} has no images", manifest.path.display());
    }

    let ctx = Context::<T> {
        config,
        manifest,
        backends,
        embedder: backends.embed.clone().map(|e| Embedder::new(e, config.embed_model.clone())),
        generic: GenericReasoner::new(config.reasoner()),
        out,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let wrap = |r: &ImageRecord, e: ImageError| PipelineError::Image {
        image: r.image.id.clone(),
        source: Box::new(e),
    };
    let results: Vec<Result<ImageOutcome, PipelineError>> = if config.fail_fast {
        pool.install(|| {
            manifest
                .records
                .par_iter()
                .map(|r| ctx.process(r).map_err(|e| wrap(r, e)))
                .collect::<Result<Vec<_>, _>>()
        })?
        .into_iter()
        .map(Ok)
        .collect()
    } else {
        pool.install(|| {
            manifest
                .records
                .par_iter()
                .map(|r| ctx.process(r).map_err(|e| wrap(r, e)))
                .collect()
        })
    };

    // aggregation in manifest order keeps float sums reproducible
    let vocab = &manifest.vocabulary;
    let mut confusion = ConfusionMatrix::new(vocab.len());
    let mut pq: BTreeMap<ClassId, PqStats> = BTreeMap::new();
    let mut report = RunReport::new(manifest, config);
    for (record, res) in manifest.records.iter().zip(results) {
        match res {
            Ok(o) => {
                confusion.merge(&o.confusion).expect("same vocabulary");
                if let Some(stats) = &o.panoptic {
                    for (c, s) in stats {
                        pq.entry(*c).or_default().add(s);
                    }
                }
                report.add_image(o.image_id, &o.confusion, vocab, o.fallback, o.alignments, o.generic_classes);
            }
            Err(e) => {
                log::error!("{e}");
                report.failures.push(FailureRecord {
                    image_id: record.image.id.clone(),
                    error: match e {
                        PipelineError::Image { source, .. } => source.to_string(),
                        other => other.to_string(),
                    },
                });
            }
        }
    }
    report.finish(&confusion, &pq, manifest);
    report.write(out, config.csv).map_err(|(path, e)| PipelineError::Output {
        path,
        reason: e.to_string(),
    })?;

    let cache = backends.cache.stats();
    let finished = SystemTime::now();
    let run_meta = json!({
        "tool": "reasonseg",
        "version": env!("CARGO_PKG_VERSION"),
        "started_at": humantime::format_rfc3339_millis(started).to_string(),
        "finished_at": humantime::format_rfc3339_millis(finished).to_string(),
        "elapsed_ms": clock.elapsed().as_millis() as u64,
        "config_hash": config.hash(),
        "config": config.redacted(),
        "manifest": manifest.path,
        "vocabulary_hash": vocab.content_hash(),
        "backends": backends.identities(),
        "cache": cache,
        "generic_reasoning": {
            "lookups": ctx.generic.lookups(),
            "dispatched": ctx.generic.dispatched(),
        },
    });
    let run_path = out.join("run.json");
    write_json(&run_path, &run_meta).map_err(|e| PipelineError::Output {
        path: run_path.clone(),
        reason: e.to_string(),
    })?;
    Ok(RunSummary {
        report,
        cache,
        out_dir: out.to_path_buf(),
    })
}

impl AlignmentRecord {
    fn new<T: Scalar>(image_id: &str, o: &AlignmentOutcome<T>, vocab: &crate::vocab::ClassVocabulary) -> Self {
        let (decision, class_id, similarity) = match o.decision {
            Decision::ExactMatch { class_id } => ("exact_match", Some(class_id), None),
            Decision::Matched { class_id, similarity } => ("matched", Some(class_id), Some(similarity.wide())),
            Decision::Discarded { best_similarity } => ("discarded", None, Some(best_similarity.wide())),
        };
        Self {
            image_id: image_id.to_string(),
            raw_name: o.raw_name.clone(),
            decision: decision.to_string(),
            class_name: class_id.and_then(|c| vocab.name(c)).map(str::to_string),
            class_id,
            similarity,
        }
    }
}
