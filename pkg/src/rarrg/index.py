"""Exact top-1 cosine retrieval over a deduplicated key-phrase store."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embedding import l2_normalize
from .errors import ExternalServiceError, ParseError, ValidationError

INDEX_FORMAT = "kpvec"
INDEX_VERSION = 1


@dataclass
class VectorIndex:
    phrases: list[str]
    embeddings: np.ndarray  # (count, dim), unit rows
    lookup: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.phrases):
            raise ValidationError("embeddings must be a (count, dim) matrix aligned with phrases")
        if not self.lookup:
            self.lookup = {p: i for i, p in enumerate(self.phrases)}
        if len(self.lookup) != len(self.phrases):
            raise ValidationError("index phrases must be unique")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self):
        return len(self.phrases)


@dataclass
class RetrievedPhrase:
    phrase: str
    query: int
    prob: float
    score: float


@dataclass
class RetrievalResult:
    items: list[RetrievedPhrase]

    @property
    def phrases(self) -> list[str]:
        return [it.phrase for it in self.items]

    def to_json(self) -> dict:
        return {
            "phrases": self.phrases,
            "details": [{"phrase": it.phrase, "query": it.query, "prob": it.prob, "score": it.score} for it in self.items],
        }


def build_index(phrases: Sequence[str], provider, dim: int | None = None) -> VectorIndex:
    """Embed the distinct phrases (first occurrence wins) with ``provider``."""
    unique = list(dict.fromkeys(str(p) for p in phrases))
    if not unique:
        return VectorIndex([], np.empty((0, dim or provider.dim or 0)))
    try:
        vecs = provider.embed(unique)
    except (ValidationError, ExternalServiceError) as exc:
        raise type(exc)(f"embedding {len(unique)} phrases (first {unique[0]!r}): {exc}") from exc
    return VectorIndex(unique, l2_normalize(vecs))


def retrieve(probs, semantics, idx: VectorIndex, threshold: float = 0.4) -> RetrievalResult:
    """Nearest phrase for every query whose selection probability is >= threshold.

    Ties between records go to the lowest record index; a phrase retrieved by
    several queries is kept once, at its highest-probability query. Output is
    ordered by descending probability (query index breaks ties).
    """
    probs = np.asarray(probs, dtype=np.float64)
    sem = np.asarray(semantics, dtype=np.float64)
    # thresholds above 1 are accepted and select nothing
    if not threshold >= 0.0:
        raise ValidationError(f"threshold must be non-negative, got {threshold}")
    if sem.ndim != 2 or sem.shape[0] != probs.shape[0]:
        raise ValidationError("probs and semantics must describe the same queries")
    if len(idx) and sem.shape[1] != idx.dim:
        raise ValidationError(f"query dimension {sem.shape[1]} != index dimension {idx.dim}")
    active = np.flatnonzero(probs >= threshold)
    if len(idx) == 0 or active.size == 0:
        return RetrievalResult([])
    order = sorted(active.tolist(), key=lambda q: (-probs[q], q))
    scores = l2_normalize(sem[order]) @ idx.embeddings.T
    best = np.argmax(scores, axis=1)  # first maximal record
    items, seen = [], set()
    for row, q in enumerate(order):
        rec = int(best[row])
        phrase = idx.phrases[rec]
        if phrase in seen:
            continue
        seen.add(phrase)
        items.append(RetrievedPhrase(phrase, int(q), float(probs[q]), float(np.clip(scores[row, rec], -1, 1))))
    return RetrievalResult(items)


def save_index(idx: VectorIndex, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {"format": INDEX_FORMAT, "version": INDEX_VERSION, "dim": idx.dim, "count": len(idx)}
        fh.write(json.dumps(header) + "\n")
        for phrase, vec in zip(idx.phrases, idx.embeddings):
            # json serialises floats with repr, the shortest round-trip form
            fh.write(json.dumps({"phrase": phrase, "embedding": vec.tolist()}, ensure_ascii=False) + "\n")


def load_index(path) -> VectorIndex:
    phrases, rows = [], []
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise ParseError("invalid index header", line=1) from exc
        if not isinstance(header, dict) or header.get("format") != INDEX_FORMAT:
            raise ParseError("not a kpvec index file", line=1)
        if header.get("version") != INDEX_VERSION:
            raise ParseError(f"unsupported index version {header.get('version')!r}", line=1)
        dim, count = header.get("dim"), header.get("count")
        if not isinstance(dim, int) or not isinstance(count, int) or dim < 0 or count < 0:
            raise ParseError("header needs integer 'dim' and 'count'", line=1)
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                phrase = rec["phrase"]
                vec = rec["embedding"]
                if not isinstance(phrase, str) or not isinstance(vec, list):
                    raise TypeError
                vec = np.asarray(vec, dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError("corrupt index record", line=lineno) from exc
            if vec.shape != (dim,):
                raise ParseError(f"embedding has dimension {vec.shape}, header says {dim}", line=lineno)
            phrases.append(phrase)
            rows.append(vec)
    if len(phrases) != count:
        raise ParseError(f"header announces {count} records, found {len(phrases)}")
    emb = np.stack(rows) if rows else np.empty((0, dim))
    return VectorIndex(phrases, emb)
