//! Protocol conformance checks usable against any service implementation.
//!
//! Each check exercises one contract from the wire documentation and reports
//! pass or fail with a diagnostic; nothing here panics on a bad service.

use std::time::Duration;

use serde::Serialize;

use super::{
    ChatBackend, ChatMessage, ChatRequest, ContentPart, EmbedBackend, EmbedRequest, SegmentBackend, SegmentRequest,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub endpoint: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(endpoint: &'static str, name: &'static str, outcome: Result<String, String>) -> CheckResult {
    let (passed, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckResult {
        endpoint,
        name,
        passed,
        detail,
    }
}

/// An 8×8 binary PPM used as the probe image.
pub fn probe_image() -> Vec<u8> {
    let mut out = b"P6\n8 8\n255\n".to_vec();
    for i in 0..64u8 {
        out.extend_from_slice(&[i * 4, 255 - i * 4, 128]);
    }
    out
}

pub const PROBE_MIME: &str = "image/x-portable-pixmap";

pub fn check_chat(chat: &dyn ChatBackend, model: &str) -> Vec<CheckResult> {
    let text_only = ChatRequest {
        model: model.into(),
        temperature: 0.0,
        messages: vec![ChatMessage::user(vec![ContentPart::Text("Reply with the word: ready".into())])],
    };
    let with_image = ChatRequest {
        model: model.into(),
        temperature: 0.7,
        messages: vec![ChatMessage::user(vec![
            ContentPart::Image {
                mime: PROBE_MIME.into(),
                data: probe_image(),
            },
            ContentPart::Text("Describe this image in one sentence.".into()),
        ])],
    };
    let reply = |req: &ChatRequest| match chat.chat(req) {
        Ok(r) if r.text.trim().is_empty() => Err("empty reply text".to_string()),
        Ok(r) => Ok(format!("{} chars, finish_reason {:?}", r.text.len(), r.finish_reason)),
        Err(e) => Err(e.to_string()),
    };
    vec![
        check("chat", "text_only_request", reply(&text_only)),
        check("chat", "image_request", reply(&with_image)),
    ]
}

pub fn check_segment(seg: &dyn SegmentBackend) -> Vec<CheckResult> {
    let req = |prompts: &[&str]| SegmentRequest {
        image_mime: PROBE_MIME.into(),
        image: probe_image(),
        prompts: prompts.iter().map(|s| s.to_string()).collect(),
    };
    let two = req(&["a photo of sky", "a photo of dog that has four legs"]);
    let mut out = Vec::new();
    let first = seg.segment(&two);
    out.push(check(
        "segment",
        "one_map_per_prompt",
        match &first {
            Ok(r) if r.maps.len() == 2 => Ok("2 maps for 2 prompts".into()),
            Ok(r) => Err(format!("{} maps for 2 prompts", r.maps.len())),
            Err(e) => Err(e.to_string()),
        },
    ));
    out.push(check(
        "segment",
        "shared_geometry",
        match &first {
            Ok(r) => r.validate(2).map(|_| {
                let m = &r.maps[0];
                format!("{}x{}", m.width(), m.height())
            })
            .map_err(|e| e.to_string()),
            Err(e) => Err(e.to_string()),
        },
    ));
    out.push(check(
        "segment",
        "finite_logits",
        match &first {
            Ok(r) if r.maps.iter().all(|m| m.values().iter().all(|v| v.is_finite())) => Ok("all finite".into()),
            Ok(_) => Err("non-finite logit".into()),
            Err(e) => Err(e.to_string()),
        },
    ));
    let single = seg.segment(&req(&["a photo of tree"]));
    out.push(check(
        "segment",
        "single_prompt",
        match single {
            Ok(r) if r.maps.len() == 1 => Ok("1 map".into()),
            Ok(r) => Err(format!("{} maps for 1 prompt", r.maps.len())),
            Err(e) => Err(e.to_string()),
        },
    ));
    let again = seg.segment(&two);
    out.push(check(
        "segment",
        "deterministic",
        match (&first, again) {
            (Ok(a), Ok(b)) if *a == b => Ok("identical maps on repeat".into()),
            (Ok(_), Ok(_)) => Err("repeat request returned different maps".into()),
            (_, Err(e)) => Err(e.to_string()),
            (Err(e), _) => Err(e.to_string()),
        },
    ));
    out
}

pub fn check_embed(embed: &dyn EmbedBackend, model: &str) -> Vec<CheckResult> {
    let req = |texts: &[&str]| EmbedRequest {
        model: model.into(),
        texts: texts.iter().map(|s| s.to_string()).collect(),
    };
    let a = embed.embed(&req(&["sofa", "couch", "traffic light"]));
    let b = embed.embed(&req(&["dog"]));
    vec![
        check(
            "embed",
            "one_vector_per_text",
            match &a {
                Ok(r) => r.validate(3).map(|_| format!("3 vectors of dimension {}", r.dimension)).map_err(|e| e.to_string()),
                Err(e) => Err(e.to_string()),
            },
        ),
        check(
            "embed",
            "usable_vectors",
            match &a {
                Ok(r) if r.vectors.iter().all(|v| v.iter().all(|x| x.is_finite()) && v.iter().any(|&x| x != 0.0)) => {
                    Ok("finite and non-zero".into())
                }
                Ok(_) => Err("zero or non-finite vector".into()),
                Err(e) => Err(e.to_string()),
            },
        ),
        check(
            "embed",
            "stable_dimension",
            match (&a, &b) {
                (Ok(x), Ok(y)) if x.dimension == y.dimension => Ok(format!("dimension {}", x.dimension)),
                (Ok(x), Ok(y)) => Err(format!("dimension changed {} -> {}", x.dimension, y.dimension)),
                (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
            },
        ),
    ]
}

/// Posts a body that violates the schema and expects a 4xx status.
pub fn check_rejects_malformed(endpoint: &'static str, url: &str, timeout: Duration) -> CheckResult {
    let outcome = reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .and_then(|c| {
            c.post(url)
                .header("content-type", "application/json")
                .body(r#"{"unexpected": true}"#)
                .send()
        })
        .map_err(|e| e.to_string())
        .and_then(|resp| {
            let s = resp.status();
            if s.is_client_error() {
                Ok(format!("status {}", s.as_u16()))
            } else {
                Err(format!("expected 4xx, got {}", s.as_u16()))
            }
        });
    check(endpoint, "rejects_malformed_request", outcome)
}
