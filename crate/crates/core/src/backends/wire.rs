//! JSON wire format for the three endpoints. See `docs/wire.md`.
//!
//! Encoders produce `serde_json::Value`; because object keys are kept sorted,
//! `canonical_bytes` of a value is a stable content key independent of the
//! order fields were inserted.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    BackendError, ChatMessage, ChatRequest, ChatResponse, ContentPart, EmbedRequest, EmbedResponse, Endpoint, Role,
    SegmentRequest, SegmentResponse,
};
use crate::raster::LogitMap;

pub fn canonical_bytes(value: &Value) -> Vec<u8> {
    serde_json::to_vec(value).expect("Value always serializes")
}

#[derive(Serialize, Deserialize)]
struct WireChatRequest {
    model: String,
    temperature: f64,
    messages: Vec<WireMessage>,
}

#[derive(Serialize, Deserialize)]
struct WireMessage {
    role: String,
    content: Vec<WirePart>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum WirePart {
    Text { text: String },
    ImageUrl { image_url: WireImageUrl },
}

#[derive(Serialize, Deserialize)]
struct WireImageUrl {
    url: String,
}

#[derive(Serialize, Deserialize)]
struct WireChatResponse {
    choices: Vec<WireChoice>,
}

#[derive(Serialize, Deserialize)]
struct WireChoice {
    message: WireAssistant,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct WireAssistant {
    role: String,
    content: String,
}

#[derive(Serialize, Deserialize)]
struct WireSegmentRequest {
    image: WireImage,
    prompts: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct WireImage {
    mime: String,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct WireSegmentResponse {
    maps: Vec<WireMap>,
}

#[derive(Serialize, Deserialize)]
struct WireMap {
    width: u32,
    height: u32,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct WireEmbedRequest {
    model: String,
    texts: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct WireEmbedResponse {
    dimension: usize,
    vectors: Vec<Vec<f64>>,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("wire structs serialize")
}

fn from_value<T: for<'de> Deserialize<'de>>(endpoint: Endpoint, v: &Value) -> Result<T, BackendError> {
    T::deserialize(v).map_err(|e| BackendError::schema(endpoint, e.to_string()))
}

fn parse_role(endpoint: Endpoint, s: &str) -> Result<Role, BackendError> {
    match s {
        "system" => Ok(Role::System),
        "user" => Ok(Role::User),
        "assistant" => Ok(Role::Assistant),
        other => Err(BackendError::schema(endpoint, format!("unknown role {other:?}"))),
    }
}

pub fn data_url(mime: &str, data: &[u8]) -> String {
    format!("data:{mime};base64,{}", B64.encode(data))
}

pub fn parse_data_url(url: &str) -> Option<(String, Vec<u8>)> {
    let rest = url.strip_prefix("data:")?;
    let (mime, b64) = rest.split_once(";base64,")?;
    Some((mime.to_string(), B64.decode(b64).ok()?))
}

pub fn encode_chat_request(req: &ChatRequest) -> Value {
    let messages = req
        .messages
        .iter()
        .map(|m| WireMessage {
            role: m.role.as_str().to_string(),
            content: m
                .parts
                .iter()
                .map(|p| match p {
                    ContentPart::Text(t) => WirePart::Text { text: t.clone() },
                    ContentPart::Image { mime, data } => WirePart::ImageUrl {
                        image_url: WireImageUrl { url: data_url(mime, data) },
                    },
                })
                .collect(),
        })
        .collect();
    to_value(&WireChatRequest {
        model: req.model.clone(),
        temperature: req.temperature,
        messages,
    })
}

pub fn decode_chat_request(v: &Value) -> Result<ChatRequest, BackendError> {
    let w: WireChatRequest = from_value(Endpoint::Chat, v)?;
    let mut messages = Vec::with_capacity(w.messages.len());
    for m in w.messages {
        let mut parts = Vec::with_capacity(m.content.len());
        for p in m.content {
            parts.push(match p {
                WirePart::Text { text } => ContentPart::Text(text),
                WirePart::ImageUrl { image_url } => {
                    let (mime, data) = parse_data_url(&image_url.url)
                        .ok_or_else(|| BackendError::schema(Endpoint::Chat, "image_url is not a base64 data URL"))?;
                    ContentPart::Image { mime, data }
                }
            });
        }
        messages.push(ChatMessage {
            role: parse_role(Endpoint::Chat, &m.role)?,
            parts,
        });
    }
    let req = ChatRequest {
        model: w.model,
        temperature: w.temperature,
        messages,
    };
    req.validate()?;
    Ok(req)
}

pub fn encode_chat_response(resp: &ChatResponse) -> Value {
    to_value(&WireChatResponse {
        choices: vec![WireChoice {
            message: WireAssistant {
                role: "assistant".into(),
                content: resp.text.clone(),
            },
            finish_reason: Some(resp.finish_reason.clone()),
        }],
    })
}

pub fn decode_chat_response(v: &Value) -> Result<ChatResponse, BackendError> {
    let w: WireChatResponse = from_value(Endpoint::Chat, v)?;
    let choice = w
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::schema(Endpoint::Chat, "no choices"))?;
    Ok(ChatResponse {
        text: choice.message.content,
        finish_reason: choice.finish_reason.unwrap_or_else(|| "stop".into()),
    })
}

pub fn encode_segment_request(req: &SegmentRequest) -> Value {
    to_value(&WireSegmentRequest {
        image: WireImage {
            mime: req.image_mime.clone(),
            data: B64.encode(&req.image),
        },
        prompts: req.prompts.clone(),
    })
}

pub fn decode_segment_request(v: &Value) -> Result<SegmentRequest, BackendError> {
    let w: WireSegmentRequest = from_value(Endpoint::Segment, v)?;
    let image = B64
        .decode(&w.image.data)
        .map_err(|e| BackendError::schema(Endpoint::Segment, format!("image data: {e}")))?;
    let req = SegmentRequest {
        image_mime: w.image.mime,
        image,
        prompts: w.prompts,
    };
    req.validate()?;
    Ok(req)
}

pub fn encode_logit_map(map: &LogitMap<f32>) -> Value {
    let mut bytes = Vec::with_capacity(map.values().len() * 4);
    for v in map.values() {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    to_value(&WireMap {
        width: map.width(),
        height: map.height(),
        data: B64.encode(bytes),
    })
}

pub fn encode_segment_response(resp: &SegmentResponse) -> Value {
    serde_json::json!({ "maps": resp.maps.iter().map(encode_logit_map).collect::<Vec<_>>() })
}

pub fn decode_segment_response(v: &Value) -> Result<SegmentResponse, BackendError> {
    let w: WireSegmentResponse = from_value(Endpoint::Segment, v)?;
    let mut maps = Vec::with_capacity(w.maps.len());
    for (i, m) in w.maps.into_iter().enumerate() {
        let bytes = B64
            .decode(&m.data)
            .map_err(|e| BackendError::schema(Endpoint::Segment, format!("map {i}: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(BackendError::schema(Endpoint::Segment, format!("map {i}: ragged float data")));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let map = LogitMap::new(m.width, m.height, values)
            .map_err(|e| BackendError::schema(Endpoint::Segment, format!("map {i}: {e}")))?;
        maps.push(map);
    }
    Ok(SegmentResponse { maps })
}

pub fn encode_embed_request(req: &EmbedRequest) -> Value {
    to_value(&WireEmbedRequest {
        model: req.model.clone(),
        texts: req.texts.clone(),
    })
}

pub fn decode_embed_request(v: &Value) -> Result<EmbedRequest, BackendError> {
    let w: WireEmbedRequest = from_value(Endpoint::Embed, v)?;
    Ok(EmbedRequest {
        model: w.model,
        texts: w.texts,
    })
}

pub fn encode_embed_response(resp: &EmbedResponse) -> Value {
    to_value(&WireEmbedResponse {
        dimension: resp.dimension,
        vectors: resp.vectors.clone(),
    })
}

pub fn decode_embed_response(v: &Value) -> Result<EmbedResponse, BackendError> {
    let w: WireEmbedResponse = from_value(Endpoint::Embed, v)?;
    Ok(EmbedResponse {
        dimension: w.dimension,
        vectors: w.vectors,
    })
}
