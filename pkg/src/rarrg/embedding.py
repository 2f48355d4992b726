"""Vector primitives and text-embedding providers.

The providers stand in for frozen pretrained text encoders. Every provider
exposes ``dim`` and ``embed(texts) -> (n, dim)`` float64 array of unit rows.
"""

from __future__ import annotations

import json
import math
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ExternalServiceError, ValidationError

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


def l2_normalize(v, axis: int = -1) -> np.ndarray:
    """Divide ``v`` by its Euclidean norm along ``axis``.

    Raises ``ValidationError`` if any slice has zero norm.
    """
    v = np.asarray(v)
    if v.dtype.kind != "f":
        v = v.astype(np.float64)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise ValidationError("cannot normalize a zero or non-finite vector")
    return v / norm


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValidationError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValidationError("cosine of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


@dataclass(frozen=True)
class NoiseConfig:
    enabled: bool = True
    rng_seed: int = 0


def add_noise(v, cfg: NoiseConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Add uniform noise in [-1/sqrt(d), 1/sqrt(d)] to each component.

    ``v`` may be a single vector or a stack of row vectors; ``d`` is the last
    axis. When ``rng`` is omitted a generator is seeded from ``cfg.rng_seed``,
    so repeated calls are identical. Disabled configs return ``v`` unchanged.
    """
    v = np.asarray(v, dtype=np.float64)
    if not cfg.enabled:
        return v.copy()
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    d = v.shape[-1]
    eps = rng.uniform(-1.0, 1.0, size=v.shape) / math.sqrt(d)
    return v + eps


# --- token grids -----------------------------------------------------------


@dataclass(frozen=True)
class TokenGrid:
    """A ``side x side`` grid of channel vectors, stored as (side, side, C)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[0] != data.shape[1] or data.shape[0] < 1 or data.shape[2] < 1:
            raise ValidationError(f"token grid must have shape (g, g, C), got {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def side(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def tokens(self) -> np.ndarray:
        """Row-major flattening to a (side*side, C) sequence."""
        return self.data.reshape(self.side * self.side, self.channels)

    @classmethod
    def from_sequence(cls, seq) -> "TokenGrid":
        seq = np.asarray(seq)
        if seq.ndim != 2:
            raise ValidationError(f"token sequence must be 2-D, got shape {seq.shape}")
        side = math.isqrt(seq.shape[0])
        if side * side != seq.shape[0] or side == 0:
            raise ValidationError(f"token count {seq.shape[0]} is not a perfect square")
        return cls(seq.reshape(side, side, seq.shape[1]))


def _axis_weights(g_src: int, g_dst: int):
    x = (np.arange(g_dst) + 0.5) * (g_src / g_dst) - 0.5
    x = np.clip(x, 0.0, g_src - 1)
    lo = np.floor(x).astype(int)
    hi = np.minimum(lo + 1, g_src - 1)
    frac = x - lo
    return lo, hi, frac


def interpolate_grid(src: TokenGrid, target_side: int) -> TokenGrid:
    """Bilinear resize with half-pixel centres, clamped at the borders."""
    if target_side <= 0:
        raise ValidationError("target_side must be positive")
    g = src.side
    if target_side == g:
        return TokenGrid(src.data.copy())
    data = src.data.astype(np.float64)
    ylo, yhi, fy = _axis_weights(g, target_side)
    xlo, xhi, fx = _axis_weights(g, target_side)
    # rows first, then columns
    rows = data[ylo] * (1 - fy)[:, None, None] + data[yhi] * fy[:, None, None]
    out = rows[:, xlo] * (1 - fx)[None, :, None] + rows[:, xhi] * fx[None, :, None]
    return TokenGrid(out)


def fuse_token_grids(a: TokenGrid, b: TokenGrid) -> TokenGrid:
    """Concatenate two grids channel-wise, resizing ``b`` to ``a``'s side."""
    if b.side != a.side:
        b = interpolate_grid(b, a.side)
    return TokenGrid(np.concatenate([a.data, b.data.astype(a.data.dtype, copy=False)], axis=-1))


# --- deterministic hash embedding -------------------------------------------


def fnv1a_64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def _splitmix64(seed: int, count: int) -> np.ndarray:
    """First ``count`` outputs of splitmix64 started at ``seed``."""
    k = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + k * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return z


def hash_embed(text: str, d: int) -> np.ndarray:
    """Unit vector derived only from ``text`` and ``d``.

    FNV-1a 64 of the UTF-8 bytes seeds a splitmix64 stream; pairs of 53-bit
    uniforms become standard normals via Box-Muller.
    """
    if not text:
        raise ValidationError("cannot embed empty text")
    if d <= 0:
        raise ValidationError("embedding dimension must be positive")
    pairs = (d + 1) // 2
    bits = _splitmix64(fnv1a_64(text), 2 * pairs)
    u = (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53
    u1 = 1.0 - u[0::2]  # (0, 1]
    u2 = u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    normals = np.empty(2 * pairs)
    normals[0::2] = r * np.cos(2 * np.pi * u2)
    normals[1::2] = r * np.sin(2 * np.pi * u2)
    return l2_normalize(normals[:d])


# --- providers ---------------------------------------------------------------


class HashEmbeddingProvider:
    def __init__(self, dim: int):
        if dim <= 0:
            raise ValidationError("embedding dimension must be positive")
        self.dim = dim

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim))
        for i, text in enumerate(texts):
            out[i] = hash_embed(text, self.dim)
        return out


class FileEmbeddingProvider:
    """Looks phrases up in a phrase->vector table stored in index-file format."""

    def __init__(self, path):
        from .index import load_index

        idx = load_index(path)
        self.dim = idx.dim
        self._table = {p: idx.embeddings[i] for i, p in enumerate(idx.phrases)}

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim))
        for i, text in enumerate(texts):
            try:
                out[i] = self._table[text]
            except KeyError:
                raise ValidationError(f"phrase not in embedding table: {text!r}") from None
        return l2_normalize(out) if len(texts) else out


class RemoteEmbeddingProvider:
    """POSTs ``{"texts": [...]}`` and expects ``{"embeddings": [[...], ...]}``."""

    def __init__(self, endpoint: str, dim: int | None = None, timeout: float = 30.0, batch_size: int = 256):
        self.endpoint = endpoint
        self.timeout = timeout
        self.batch_size = batch_size
        self.dim = dim

    def _post(self, texts):
        body = json.dumps({"texts": list(texts)}).encode("utf-8")
        req = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            raise ExternalServiceError(f"embedding service returned HTTP {exc.code}") from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise ExternalServiceError(f"embedding service unreachable: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ExternalServiceError("embedding service returned invalid JSON") from exc
        try:
            emb = np.asarray(payload["embeddings"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ExternalServiceError("embedding response lacks an 'embeddings' matrix") from exc
        if emb.ndim != 2 or emb.shape[0] != len(texts):
            raise ExternalServiceError(f"expected {len(texts)} embeddings, got shape {emb.shape}")
        return emb

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        chunks = [self._post(texts[i : i + self.batch_size]) for i in range(0, len(texts), self.batch_size)]
        if not chunks:
            return np.empty((0, self.dim or 0))
        out = np.concatenate(chunks)
        if self.dim is None:
            self.dim = out.shape[1]
        elif out.shape[1] != self.dim:
            raise ExternalServiceError(f"expected dimension {self.dim}, got {out.shape[1]}")
        return l2_normalize(out)
