use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{PipelineError, Precision};
use crate::aligner::{DEFAULT_EMBED_MODEL, DEFAULT_SIGMA_ALIGN};
use crate::backends::wire::canonical_bytes;
use crate::composer::{PromptStyle, Templates};
use crate::ensemble::DEFAULT_TAU;
use crate::reasoner::{ReasonerConfig, DEFAULT_RETRIES, DEFAULT_TEMPERATURE};

/// Every run setting. The JSON config file uses these field names; command
/// line flags override the file, which overrides the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub prompt_style: PromptStyle,
    pub sigma_align: f64,
    pub tau: f64,
    pub temperature: f64,
    pub retries: u32,
    /// Classes the model does not report keep class-name prompts instead of
    /// getting generic reasoning.
    pub skip_generic: bool,
    /// Only classes whose thresholded mask fires compete for a pixel; pixels
    /// where none fires stay unlabeled.
    pub strict_eq10: bool,
    pub chat_url: Option<String>,
    pub segment_url: Option<String>,
    pub embed_url: Option<String>,
    pub chat_model: String,
    pub embed_model: String,
    /// Fixture directory for the built-in mock services.
    pub mock: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub overlay: bool,
    pub dump_scores: bool,
    pub csv: bool,
    pub jobs: usize,
    pub fail_fast: bool,
    pub precision: Precision,
    pub step3_per_class: bool,
    pub timeout_secs: f64,
    pub http_attempts: u32,
    pub max_in_flight: usize,
    /// Extra HTTP headers sent to every service, e.g. an API key.
    pub headers: BTreeMap<String, String>,
    pub template_class: String,
    pub template_coarse: String,
    pub template_coarse_att: String,
    pub template_att: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            out_dir: PathBuf::from("out"),
            prompt_style: PromptStyle::Att,
            sigma_align: DEFAULT_SIGMA_ALIGN,
            tau: DEFAULT_TAU,
            temperature: DEFAULT_TEMPERATURE,
            retries: DEFAULT_RETRIES,
            skip_generic: false,
            strict_eq10: false,
            chat_url: None,
            segment_url: None,
            embed_url: None,
            chat_model: ReasonerConfig::default().model,
            embed_model: DEFAULT_EMBED_MODEL.into(),
            mock: None,
            cache_dir: None,
            overlay: false,
            dump_scores: false,
            csv: false,
            jobs: 1,
            fail_fast: false,
            precision: Precision::F64,
            step3_per_class: false,
            timeout_secs: 120.0,
            http_attempts: 3,
            max_in_flight: 8,
            headers: BTreeMap::new(),
            template_class: Templates::default().template_class,
            template_coarse: Templates::default().template_coarse,
            template_coarse_att: Templates::default().template_coarse_att,
            template_att: Templates::default().template_att,
        }
    }
}

/// Settings that do not influence results and are left out of the hash.
const UNHASHED: [&str; 4] = ["out_dir", "jobs", "cache_dir", "fail_fast"];

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        // relative paths in the file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.mock, &mut cfg.cache_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.manifest.is_none() {
            return bad("a manifest is required".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau {} must lie in (0, 1)", self.tau));
        }
        if !(-1.0..=1.0).contains(&self.sigma_align) {
            return bad(format!("sigma_align {} must lie in [-1, 1]", self.sigma_align));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad(format!("temperature {} must lie in [0, 2]", self.temperature));
        }
        if self.retries == 0 {
            return bad("retries must be at least 1".into());
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.http_attempts == 0 || self.max_in_flight == 0 {
            return bad("http_attempts and max_in_flight must be at least 1".into());
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return bad(format!("timeout_secs {} must be positive", self.timeout_secs));
        }
        if self.mock.is_none() && (self.chat_url.is_none() || self.segment_url.is_none() || self.embed_url.is_none()) {
            // chat and embed are unused by the class-name baseline
            if self.segment_url.is_none() || (self.prompt_style.uses_reasoning() && (self.chat_url.is_none() || self.embed_url.is_none())) {
                return bad("no backends: pass --mock <dir> or the service URLs".into());
            }
        }
        self.templates()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn templates(&self) -> Templates {
        Templates {
            template_class: self.template_class.clone(),
            template_coarse: self.template_coarse.clone(),
            template_coarse_att: self.template_coarse_att.clone(),
            template_att: self.template_att.clone(),
        }
    }

    pub fn reasoner(&self) -> ReasonerConfig {
        ReasonerConfig {
            model: self.chat_model.clone(),
            temperature: self.temperature,
            retries: self.retries,
            step3_per_class: self.step3_per_class,
        }
    }

    /// sha256 of the canonical JSON of every result-relevant setting. Header
    /// values are dropped so secrets never end up in run metadata.
    pub fn hash(&self) -> String {
        let mut v = self.redacted();
        if let Value::Object(m) = &mut v {
            for k in UNHASHED {
                m.remove(k);
            }
        }
        hex::encode(Sha256::digest(canonical_bytes(&v)))
    }

    /// JSON form with header values masked.
    pub fn redacted(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(Value::Object(h)) = v.get_mut("headers") {
            for val in h.values_mut() {
                *val = Value::String("<redacted>".into());
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RunConfig {
        RunConfig {
            manifest: Some("m.json".into()),
            mock: Some("fx".into()),
            ..RunConfig::default()
        }
    }

    #[test]
    fn defaults_follow_the_published_constants() {
        let c = RunConfig::default();
        assert_eq!((c.sigma_align, c.tau, c.temperature, c.retries), (0.5, 0.5, 0.7, 3));
        assert_eq!(c.prompt_style, PromptStyle::Att);
        assert!(base().validate().is_ok());
    }

    #[test]
    fn range_checks() {
        for c in [
            RunConfig { tau: 1.5, ..base() },
            RunConfig { tau: 0.0, ..base() },
            RunConfig { sigma_align: 1.01, ..base() },
            RunConfig { temperature: 2.5, ..base() },
            RunConfig { retries: 0, ..base() },
            RunConfig { jobs: 0, ..base() },
            RunConfig { manifest: None, ..base() },
            RunConfig { mock: None, ..base() },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn hash_ignores_jobs_and_output_location() {
        let a = base();
        let b = RunConfig {
            jobs: 8,
            out_dir: "elsewhere".into(),
            ..base()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), RunConfig { tau: 0.6, ..base() }.hash());
    }

    #[test]
    fn file_overrides_defaults_and_headers_are_redacted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(
            &p,
            r#"{"tau": 0.4, "manifest": "data/m.json", "template_att": "{c} with {r}", "headers": {"Authorization": "Bearer x"}}"#,
        )
        .unwrap();
        let c = RunConfig::from_file(&p).unwrap();
        assert_eq!(c.tau, 0.4);
        assert_eq!(c.manifest.unwrap(), dir.path().join("data/m.json"));
        assert_eq!(c.template_att, "{c} with {r}");
        assert_eq!(c.sigma_align, 0.5);
        let c = RunConfig::from_file(&p).unwrap();
        assert!(!c.redacted().to_string().contains("Bearer"));
        fs::write(&p, r#"{"tua": 0.4}"#).unwrap();
        assert!(RunConfig::from_file(&p).is_err());
    }
}
