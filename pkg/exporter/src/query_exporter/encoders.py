"""Text and image encoders producing fixed-width embeddings.

The default encoders are hash-based: fully offline, dependency-light, and
byte-reproducible across runs and machines, which keeps exports hermetic.
Swapping in a vision-language encoder is a one-flag change when model weights
are available locally.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np
from PIL import Image


class EncoderError(RuntimeError):
    """Encoder unavailable or input unusable."""


def _stable_digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


class HashedTextEncoder:
    """Feature-hashing bag-of-words embedding with L2 normalization."""

    name = "hashed-text"

    def __init__(self, d_e: int = 512):
        self.d_e = d_e

    def encode(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise EncoderError("cannot embed empty text")
        vec = np.zeros(self.d_e)
        tokens = re.findall(r"[a-z0-9]+", text.lower())
        for position, token in enumerate(tokens):
            digest = _stable_digest(token.encode("utf-8"))
            for k in range(4):
                idx = int.from_bytes(digest[4 * k:4 * k + 3], "little") % self.d_e
                sign = 1.0 if digest[4 * k + 3] & 1 else -1.0
                vec[idx] += sign / (1.0 + 0.05 * position)
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise EncoderError(f"text produced an empty embedding: {text!r}")
        return vec / norm

    def encode_many(self, texts) -> np.ndarray:
        return np.stack([self.encode(t) for t in texts])


class HashedImageEncoder:
    """RGB joint-histogram embedding (8x8x8 bins folded to d_e), L2 normalized."""

    name = "hashed-image"

    def __init__(self, d_e: int = 512):
        self.d_e = d_e

    def encode(self, path) -> np.ndarray:
        try:
            with Image.open(path) as img:
                rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
        except (OSError, ValueError) as exc:
            raise EncoderError(f"cannot read image {path}: {exc}") from None
        bins = (rgb // 32).reshape(-1, 3)
        flat = bins[:, 0] * 64 + bins[:, 1] * 8 + bins[:, 2]
        hist = np.bincount(flat, minlength=512).astype(np.float64)
        vec = np.zeros(self.d_e)
        np.add.at(vec, np.arange(512) % self.d_e, hist)
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise EncoderError(f"image produced an empty embedding: {path}")
        return vec / norm


def load_encoders(kind: str, d_e: int):
    """Encoder pair by name; 'clip' needs locally available model weights."""
    if kind == "hashed":
        return HashedTextEncoder(d_e), HashedImageEncoder(d_e)
    if kind == "clip":
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise EncoderError(f"encoder load failure: {exc}") from None
        try:
            model = SentenceTransformer("clip-ViT-B-32")
        except Exception as exc:
            raise EncoderError(f"encoder load failure: {exc}") from None
        return _ClipText(model), _ClipImage(model)
    raise EncoderError(f"unknown encoder kind {kind!r}")


class _ClipText:
    name = "clip-text"

    def __init__(self, model):
        self.model = model
        self.d_e = model.get_sentence_embedding_dimension()

    def encode(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise EncoderError("cannot embed empty text")
        return np.asarray(self.model.encode([text])[0], dtype=np.float64)

    def encode_many(self, texts) -> np.ndarray:
        return np.stack([self.encode(t) for t in texts])


class _ClipImage:
    name = "clip-image"

    def __init__(self, model):
        self.model = model
        self.d_e = model.get_sentence_embedding_dimension()

    def encode(self, path) -> np.ndarray:
        with Image.open(path) as img:
            return np.asarray(self.model.encode([img.convert("RGB")])[0], dtype=np.float64)
