"""Model adapters. Stand-ins are tiny deterministic functions for protocol
testing; the real adapters load checkpoints lazily and are optional."""

import hashlib
import io

import numpy as np


def _seed(*parts):
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else p.encode("utf-8"))
        h.update(b"\0")
    return int.from_bytes(h.digest()[:8], "big")


def decode_image(data):
    from PIL import Image

    img = Image.open(io.BytesIO(data))
    return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


class StandinChat:
    identity = "standin-chat"

    def reply(self, model, temperature, messages):
        text = "\n".join(p[1] for _, parts in messages for p in parts if p[0] == "text")
        has_image = any(p[0] == "image" for _, parts in messages for p in parts)
        digest = hashlib.sha256(text.encode()).hexdigest()[:8]
        seen = "an image and " if has_image else ""
        return f"stand-in reply to {seen}a {len(text)}-character prompt ({digest})"


class StandinSegmentor:
    """Logits from a fixed random projection of pixel colours and a
    prompt-seeded direction, at half the input resolution (a stand-in for a
    model's native output stride)."""

    identity = "standin-segment"
    stride = 2

    def maps(self, image_bytes, prompts):
        rgb = decode_image(image_bytes)
        h, w, _ = rgb.shape
        oh, ow = max(1, h // self.stride), max(1, w // self.stride)
        small = rgb[: oh * self.stride : self.stride, : ow * self.stride : self.stride]
        out = []
        for p in prompts:
            rng = np.random.default_rng(_seed("segment", p))
            direction = rng.normal(size=3).astype(np.float32)
            bias = np.float32(rng.normal())
            logits = (small - 0.5) @ direction * 4.0 + bias
            out.append((logits.astype(np.float32).ravel(), ow, oh))
        return out


class StandinEmbedder:
    identity = "standin-embed"

    def __init__(self, dimension=32):
        self.dimension = dimension

    def embed(self, texts):
        vecs = []
        for t in texts:
            v = np.random.default_rng(_seed("embed", t.strip().lower())).normal(size=self.dimension)
            vecs.append(v / np.linalg.norm(v))
        return vecs


class SentenceTransformerEmbedder:
    def __init__(self, name, device):
        from sentence_transformers import SentenceTransformer

        self.model = SentenceTransformer(name, device=device)
        self.dimension = int(self.model.get_sentence_embedding_dimension())
        self.identity = f"sentence-transformers:{name}"

    def embed(self, texts):
        if not texts:
            return []
        return list(self.model.encode(list(texts), convert_to_numpy=True))


class TransformersChat:
    """Vision-language chat through transformers' image-text-to-text pipeline."""

    def __init__(self, name, device):
        from transformers import pipeline

        self.pipe = pipeline("image-text-to-text", model=name, device=device)
        self.identity = f"transformers:{name}"

    def reply(self, model, temperature, messages):
        from PIL import Image

        chat = []
        for role, parts in messages:
            content = []
            for p in parts:
                if p[0] == "text":
                    content.append({"type": "text", "text": p[1]})
                else:
                    content.append({"type": "image", "image": Image.open(io.BytesIO(p[2])).convert("RGB")})
            chat.append({"role": role, "content": content})
        kwargs = {"do_sample": temperature > 0, "max_new_tokens": 512}
        if temperature > 0:
            kwargs["temperature"] = temperature
        out = self.pipe(text=chat, generate_kwargs=kwargs, return_full_text=False)
        return out[0]["generated_text"]


def load(config):
    """config keys: chat, segment, embed (each "standin" or a checkpoint id),
    device, embed_dimension (stand-in only)."""
    device = config.get("device", "cpu")
    chat = config.get("chat", "standin")
    embed = config.get("embed", "standin")
    segment = config.get("segment", "standin")
    if segment != "standin":
        # The text-conditioned segmentor needs a per-prompt, pre-threshold
        # logit map. See README.md for the extraction point; no generic loader
        # exists, so a checkpoint-specific adapter must be registered here.
        raise RuntimeError(f"no adapter for segmentor {segment!r}; only 'standin' is built in")
    return {
        "chat": StandinChat() if chat == "standin" else TransformersChat(chat, device),
        "segment": StandinSegmentor(),
        "embed": StandinEmbedder(int(config.get("embed_dimension", 32)))
        if embed == "standin"
        else SentenceTransformerEmbedder(embed, device),
    }
