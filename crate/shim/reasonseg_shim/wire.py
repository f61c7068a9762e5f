"""Request validation and response encoding. Mirrors docs/wire.md."""

import base64
import binascii
import math
import struct


class SchemaError(ValueError):
    """Malformed request; answered with a 4xx."""


def _require(obj, key, kind, where):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    value = obj[key]
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise SchemaError(f"{where}.{key}: expected {kind.__name__}")
    return value


def parse_data_url(url):
    if not url.startswith("data:") or ";base64," not in url:
        raise SchemaError("image_url is not a base64 data URL")
    mime, b64 = url[5:].split(";base64,", 1)
    try:
        return mime, base64.b64decode(b64, validate=True)
    except (binascii.Error, ValueError) as e:
        raise SchemaError(f"image data: {e}") from e


def parse_chat(body):
    """Returns (model, temperature, [(role, [("text", str) | ("image", mime, bytes)])])."""
    model = _require(body, "model", str, "chat")
    temperature = float(_require(body, "temperature", float, "chat"))
    if not 0.0 <= temperature <= 2.0:
        raise SchemaError(f"temperature {temperature} outside [0, 2]")
    messages = _require(body, "messages", list, "chat")
    if not messages:
        raise SchemaError("no messages")
    out, images = [], 0
    for i, m in enumerate(messages):
        role = _require(m, "role", str, f"messages[{i}]")
        if role not in ("system", "user", "assistant"):
            raise SchemaError(f"unknown role {role!r}")
        parts = []
        for j, p in enumerate(_require(m, "content", list, f"messages[{i}]")):
            kind = _require(p, "type", str, f"messages[{i}].content[{j}]")
            if kind == "text":
                parts.append(("text", _require(p, "text", str, f"messages[{i}].content[{j}]")))
            elif kind == "image_url":
                url = _require(_require(p, "image_url", dict, f"messages[{i}].content[{j}]"), "url", str, "image_url")
                parts.append(("image",) + parse_data_url(url))
                images += 1
            else:
                raise SchemaError(f"unknown content type {kind!r}")
        out.append((role, parts))
    if images > 1:
        raise SchemaError("at most one image part per request")
    return model, temperature, out


def chat_response(text, finish_reason="stop"):
    return {"choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": finish_reason}]}


def parse_segment(body):
    image = _require(body, "image", dict, "segment")
    mime = _require(image, "mime", str, "image")
    try:
        data = base64.b64decode(_require(image, "data", str, "image"), validate=True)
    except (binascii.Error, ValueError) as e:
        raise SchemaError(f"image data: {e}") from e
    prompts = _require(body, "prompts", list, "segment")
    if not prompts:
        raise SchemaError("no prompts")
    if any(not isinstance(p, str) or not p.strip() for p in prompts):
        raise SchemaError("empty prompt")
    return mime, data, prompts


def encode_map(values, width, height):
    """values: row-major iterable of floats (numpy arrays work)."""
    flat = [float(v) for v in values]
    if len(flat) != width * height:
        raise ValueError(f"{len(flat)} values for {width}x{height}")
    if not all(math.isfinite(v) for v in flat):
        raise ValueError("non-finite logit")
    raw = struct.pack(f">{len(flat)}f", *flat)
    return {"width": width, "height": height, "data": base64.b64encode(raw).decode("ascii")}


def segment_response(maps):
    shapes = {(m["width"], m["height"]) for m in maps}
    if len(shapes) > 1:
        raise ValueError("maps differ in geometry")
    return {"maps": maps}


def parse_embed(body):
    model = _require(body, "model", str, "embed")
    texts = _require(body, "texts", list, "embed")
    if any(not isinstance(t, str) for t in texts):
        raise SchemaError("texts must be strings")
    return model, texts


def embed_response(vectors, dimension):
    vectors = [[float(x) for x in v] for v in vectors]
    if any(len(v) != dimension for v in vectors):
        raise ValueError("vector length differs from declared dimension")
    return {"dimension": dimension, "vectors": vectors}
