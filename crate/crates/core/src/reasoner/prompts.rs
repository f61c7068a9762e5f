//! Prompt builders. All builders are pure: identical inputs give identical
//! requests.

use super::{ImageData, ImageDescription, ReasonerConfig, ReasonerError};
use crate::backends::{ChatMessage, ChatRequest, ContentPart};
use crate::vocab::ClassVocabulary;

pub const DESCRIBE_MARKER: &str = "Step 1 of 3 - image description.";
pub const CLASS_FILTER_MARKER: &str = "Step 2 of 3 - class selection.";
pub const REASON_MARKER: &str = "Step 3 of 3 - class reasoning.";
pub const GENERIC_MARKER: &str = "Generic class reasoning.";

const REPLY_LINE_FORMAT: &str = "<class> | <broad category> | <sub-category> | <attribute>; <attribute>; ...";

/// The line identifying the class in a generic-reasoning prompt.
pub fn generic_class_line(class_name: &str) -> String {
    format!("Class: \"{class_name}\"")
}

fn request(config: &ReasonerConfig, text: String, image: Option<&ImageData>) -> ChatRequest {
    let mut parts = Vec::with_capacity(2);
    if let Some(img) = image {
        parts.push(ContentPart::Image {
            mime: img.mime.clone(),
            data: img.bytes.to_vec(),
        });
    }
    parts.push(ContentPart::Text(text));
    ChatRequest {
        model: config.model.clone(),
        temperature: config.temperature,
        messages: vec![ChatMessage::user(parts)],
    }
}

pub fn build_description_prompt(image: &ImageData, config: &ReasonerConfig) -> ChatRequest {
    let text = format!(
        "{DESCRIBE_MARKER}\n\
         Look at the image and write one paragraph describing the overall scene: \
         the setting, the main objects and regions, and how they are laid out. \
         Do not list categories yet."
    );
    request(config, text, Some(image))
}

pub fn build_class_filter_prompt(
    image: &ImageData,
    description: &ImageDescription,
    vocab: &ClassVocabulary,
    config: &ReasonerConfig,
) -> Result<ChatRequest, ReasonerError> {
    if description.text().trim().is_empty() {
        return Err(ReasonerError::EmptyDescription);
    }
    let text = format!(
        "{CLASS_FILTER_MARKER}\n\
         Image description:\n{}\n\n\
         Candidate classes: {}\n\n\
         Using the image and the description, decide which of the candidate classes are visible in the image. \
         Write the names exactly as listed. Answer with a single line of the form\n\
         classes: <name>; <name>; ...\n\
         and nothing else.",
        description.text().trim(),
        vocab.names().join("; "),
    );
    Ok(request(config, text, Some(image)))
}

/// Step-3 prompt for the observed classes, in the order given. Conditioned on
/// the image and the class list only.
pub fn build_reason_prompt<S: AsRef<str>>(
    image: &ImageData,
    observed: &[S],
    config: &ReasonerConfig,
) -> Result<ChatRequest, ReasonerError> {
    if observed.is_empty() {
        return Err(ReasonerError::EmptyObserved);
    }
    let mut seen = std::collections::HashSet::new();
    for name in observed {
        if !seen.insert(name.as_ref()) {
            return Err(ReasonerError::DuplicateObserved(name.as_ref().to_string()));
        }
    }
    let listing: Vec<String> = observed
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{}. {}", i + 1, n.as_ref()))
        .collect();
    let text = format!(
        "{REASON_MARKER}\n\
         For each class below, explain coarse-to-fine why it is present in the image: \
         its broad category, its sub-category, and 3-5 short fine-grained visual attributes visible in the image.\n\n\
         Classes:\n{}\n\n\
         Answer with exactly one line per class in the form\n\
         {REPLY_LINE_FORMAT}\n\
         Use the class names as given and write nothing else.",
        listing.join("\n"),
    );
    Ok(request(config, text, Some(image)))
}

/// Image-independent prompt for one class; carries no image part.
pub fn build_generic_reason_prompt(class_name: &str, config: &ReasonerConfig) -> ChatRequest {
    let text = format!(
        "{GENERIC_MARKER}\n\
         {}\n\
         Without reference to any particular image, explain how this class is visually distinguishable \
         from other classes, coarse-to-fine: its broad category, its sub-category, and 3-5 short \
         fine-grained visual attributes.\n\
         Answer with exactly one line in the form\n\
         {REPLY_LINE_FORMAT}\n\
         and nothing else.",
        generic_class_line(class_name),
    );
    request(config, text, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::wire::{canonical_bytes, encode_chat_request};
    use std::sync::Arc;

    fn image() -> ImageData {
        ImageData {
            id: "img".into(),
            mime: "image/png".into(),
            bytes: Arc::new(vec![1, 2, 3]),
        }
    }

    fn cfg() -> ReasonerConfig {
        ReasonerConfig::default()
    }

    fn body(r: &ChatRequest) -> Vec<u8> {
        canonical_bytes(&encode_chat_request(r))
    }

    #[test]
    fn description_prompt_is_deterministic_with_one_image() {
        let a = build_description_prompt(&image(), &cfg());
        let b = build_description_prompt(&image(), &cfg());
        assert_eq!(body(&a), body(&b));
        assert_eq!(a.image_count(), 1);
        assert_eq!(a.temperature, 0.7);
    }

    #[test]
    fn class_filter_lists_every_name_once_in_order() {
        let names: Vec<String> = (0..150).map(|i| format!("class{i:03}x")).collect();
        let vocab = ClassVocabulary::new("v", &names).unwrap();
        let desc = ImageDescription::new("A quiet street at dusk.").unwrap();
        let r = build_class_filter_prompt(&image(), &desc, &vocab, &cfg()).unwrap();
        let text = r.text();
        let mut last = 0;
        for n in &names {
            assert_eq!(text.matches(n.as_str()).count(), 1, "{n}");
            let at = text.find(n.as_str()).unwrap();
            assert!(at > last);
            last = at;
        }
        assert!(text.contains("A quiet street at dusk."));
        assert_eq!(r.image_count(), 1);
    }

    #[test]
    fn class_filter_rejects_empty_description() {
        let vocab = ClassVocabulary::new("v", &["a"]).unwrap();
        let desc = ImageDescription::unchecked("   ");
        assert!(matches!(
            build_class_filter_prompt(&image(), &desc, &vocab, &cfg()),
            Err(ReasonerError::EmptyDescription)
        ));
    }

    #[test]
    fn reason_prompt_enumerates_in_order() {
        let one = build_reason_prompt(&image(), &["dog"], &cfg()).unwrap();
        assert!(one.text().contains("1. dog\n"));
        assert!(!one.text().contains("2. "));
        let three = build_reason_prompt(&image(), &["tree", "dog", "road"], &cfg()).unwrap();
        let t = three.text();
        assert!(t.contains("1. tree\n2. dog\n3. road\n"));
        assert!(matches!(
            build_reason_prompt(&image(), &["dog", "dog"], &cfg()),
            Err(ReasonerError::DuplicateObserved(n)) if n == "dog"
        ));
        assert!(matches!(
            build_reason_prompt::<&str>(&image(), &[], &cfg()),
            Err(ReasonerError::EmptyObserved)
        ));
    }

    #[test]
    fn generic_prompt_has_no_image() {
        let r = build_generic_reason_prompt("sidewalk", &cfg());
        assert_eq!(r.image_count(), 0);
        assert!(r.text().contains(&generic_class_line("sidewalk")));
        assert_eq!(body(&r), body(&build_generic_reason_prompt("sidewalk", &cfg())));
    }
}
