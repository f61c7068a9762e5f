//! Expands (class, reason) pairs into segmentor text prompts.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reasoner::{ReasonChain, ReasoningBundle};
use crate::vocab::{ClassId, ClassVocabulary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComposeError {
    #[error("class {class:?}: style {style} needs at least one attribute")]
    NoAttributes { class: String, style: PromptStyle },
    #[error("class {0:?} has no reasoning")]
    Uncovered(String),
    #[error("class {class:?}: template produced no prompt")]
    EmptyPrompt { class: String },
    #[error("template {key}: {reason}")]
    Template { key: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStyle {
    /// Plain class names, the baseline path.
    ClassName,
    Coarse,
    CoarseAtt,
    #[default]
    Att,
}

impl PromptStyle {
    pub const ALL: [PromptStyle; 4] = [Self::ClassName, Self::Coarse, Self::CoarseAtt, Self::Att];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ClassName => "class-name",
            Self::Coarse => "coarse",
            Self::CoarseAtt => "coarse-att",
            Self::Att => "att",
        }
    }

    pub fn uses_attributes(self) -> bool {
        matches!(self, Self::CoarseAtt | Self::Att)
    }

    /// Whether this style reads reasoning at all.
    pub fn uses_reasoning(self) -> bool {
        self != Self::ClassName
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown prompt style {s:?} (expected class-name, coarse, coarse-att or att)"))
    }
}

pub const TEMPLATE_CLASS: &str = "a photo of {c}";
pub const TEMPLATE_COARSE: &str = "a photo of {c} that is a {sub}, a kind of {broad}";
pub const TEMPLATE_COARSE_ATT: &str = "a photo of {c} that is a {sub}, a kind of {broad}, that has {r}";
pub const TEMPLATE_ATT: &str = "a photo of {c} that has {r}";

const PLACEHOLDERS: [&str; 4] = ["c", "broad", "sub", "r"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Templates {
    pub template_class: String,
    pub template_coarse: String,
    pub template_coarse_att: String,
    pub template_att: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            template_class: TEMPLATE_CLASS.into(),
            template_coarse: TEMPLATE_COARSE.into(),
            template_coarse_att: TEMPLATE_COARSE_ATT.into(),
            template_att: TEMPLATE_ATT.into(),
        }
    }
}

impl Templates {
    fn for_style(&self, style: PromptStyle) -> (&'static str, &str) {
        match style {
            PromptStyle::ClassName => ("template_class", &self.template_class),
            PromptStyle::Coarse => ("template_coarse", &self.template_coarse),
            PromptStyle::CoarseAtt => ("template_coarse_att", &self.template_coarse_att),
            PromptStyle::Att => ("template_att", &self.template_att),
        }
    }

    /// Rejects unknown or unbalanced placeholders.
    pub fn validate(&self) -> Result<(), ComposeError> {
        for style in PromptStyle::ALL {
            let (key, t) = self.for_style(style);
            if t.trim().is_empty() {
                return Err(ComposeError::Template { key, reason: "empty".into() });
            }
            let mut rest = t;
            while let Some(open) = rest.find('{') {
                let tail = &rest[open + 1..];
                let close = tail.find('}').ok_or_else(|| ComposeError::Template {
                    key,
                    reason: "unclosed '{'".into(),
                })?;
                let name = &tail[..close];
                if !PLACEHOLDERS.contains(&name) {
                    return Err(ComposeError::Template {
                        key,
                        reason: format!("unknown placeholder {{{name}}}"),
                    });
                }
                rest = &tail[close + 1..];
            }
        }
        Ok(())
    }
}

/// Single-pass placeholder substitution: substituted text is never rescanned,
/// so a reason containing "{c}" stays literal.
pub fn render(template: &str, class: &str, broad: &str, sub: &str, reason: &str) -> String {
    let mut out = String::with_capacity(template.len() + class.len() + reason.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let value = tail.find('}').and_then(|close| {
            let v = match &tail[..close] {
                "c" => class,
                "broad" => broad,
                "sub" => sub,
                "r" => reason,
                _ => return None,
            };
            Some((v, close))
        });
        match value {
            Some((v, close)) => {
                out.push_str(v);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub class_id: ClassId,
    prompts: Vec<String>,
}

impl PromptSet {
    fn new(class_id: ClassId, class: &str, raw: Vec<String>) -> Result<Self, ComposeError> {
        let mut prompts: Vec<String> = Vec::with_capacity(raw.len());
        for p in raw {
            let p = p.trim().to_string();
            if !p.is_empty() && !prompts.contains(&p) {
                prompts.push(p);
            }
        }
        if prompts.is_empty() {
            return Err(ComposeError::EmptyPrompt { class: class.into() });
        }
        Ok(Self { class_id, prompts })
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Prompt set for one class. `chain` may be `None` only for the class-name
/// style.
pub fn compose(
    class_id: ClassId,
    class_name: &str,
    chain: Option<&ReasonChain>,
    style: PromptStyle,
    templates: &Templates,
) -> Result<PromptSet, ComposeError> {
    let (_, template) = templates.for_style(style);
    let raw = match (style, chain) {
        (PromptStyle::ClassName, _) => vec![render(template, class_name, "", "", "")],
        (_, None) => return Err(ComposeError::Uncovered(class_name.into())),
        (PromptStyle::Coarse, Some(ch)) => vec![render(template, class_name, ch.broad(), ch.sub(), "")],
        (_, Some(ch)) => {
            if ch.attributes().is_empty() {
                return Err(ComposeError::NoAttributes {
                    class: class_name.into(),
                    style,
                });
            }
            ch.attributes()
                .iter()
                .map(|r| render(template, class_name, ch.broad(), ch.sub(), r))
                .collect()
        }
    };
    PromptSet::new(class_id, class_name, raw)
}

/// One prompt set per vocabulary class. The bundle must cover the vocabulary
/// unless the style ignores reasoning.
pub fn compose_bundle(
    bundle: &ReasoningBundle,
    vocab: &ClassVocabulary,
    style: PromptStyle,
    templates: &Templates,
) -> Result<BTreeMap<ClassId, PromptSet>, ComposeError> {
    vocab
        .iter()
        .map(|(id, name)| {
            let chain = bundle.entries.get(&id).map(|e| &e.chain);
            compose(id, name, chain, style, templates).map(|p| (id, p))
        })
        .collect()
}

/// Like [`compose_bundle`], but classes without reasoning fall back to the
/// class-name template instead of failing. Used when generic reasoning is
/// skipped.
pub fn compose_bundle_with_fallback(
    bundle: &ReasoningBundle,
    vocab: &ClassVocabulary,
    style: PromptStyle,
    templates: &Templates,
) -> Result<BTreeMap<ClassId, PromptSet>, ComposeError> {
    vocab
        .iter()
        .map(|(id, name)| {
            let set = match bundle.entries.get(&id) {
                Some(e) => compose(id, name, Some(&e.chain), style, templates)?,
                None => compose(id, name, None, PromptStyle::ClassName, templates)?,
            };
            Ok((id, set))
        })
        .collect()
}
