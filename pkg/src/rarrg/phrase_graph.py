"""Rule-based key-phrase construction from RadGraph-style annotations.

Entities linked by ``modify`` relations form one phrase; ``located_at`` and
``suggestive_of`` relations never join entities. A phrase containing an
absent observation is prefixed with "no ", else one containing an uncertain
observation with "maybe ".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .errors import ParseError, ValidationError

ENTITY_LABELS = ("ANAT-DP", "OBS-DP", "OBS-DA", "OBS-U")
RELATION_KINDS = ("modify", "located_at", "suggestive_of")


@dataclass(frozen=True)
class Entity:
    id: str
    tokens: str
    token_start: int
    label: str

    def __post_init__(self):
        if not self.tokens or not self.tokens.strip():
            raise ValidationError(f"entity {self.id!r} has empty tokens")
        if self.label not in ENTITY_LABELS:
            raise ValidationError(f"entity {self.id!r} has unknown label {self.label!r}")
        if not isinstance(self.token_start, int) or self.token_start < 0:
            raise ValidationError(f"entity {self.id!r} has invalid start {self.token_start!r}")


@dataclass(frozen=True)
class Relation:
    source: str
    target: str
    kind: str

    def __post_init__(self):
        if self.kind not in RELATION_KINDS:
            raise ValidationError(f"unknown relation kind {self.kind!r}")
        if self.source == self.target:
            raise ValidationError(f"relation {self.kind} links {self.source!r} to itself")


@dataclass(frozen=True)
class PhraseGraph:
    entities: tuple[Entity, ...]
    edges: tuple[Relation, ...] = ()

    @property
    def first_start(self) -> int:
        return min(e.token_start for e in self.entities)


@dataclass(frozen=True)
class KeyPhrase:
    text: str
    source_graph: PhraseGraph | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.text or self.text != self.text.strip():
            raise ValidationError(f"invalid key phrase {self.text!r}")

    def __str__(self):
        return self.text


def parse_annotation(doc: dict) -> tuple[list[Entity], list[Relation]]:
    """Validate one annotation document and return its entities and relations."""
    if not isinstance(doc, dict):
        raise ParseError("annotation document must be a JSON object")
    raw_entities = doc.get("entities", [])
    raw_relations = doc.get("relations", [])
    if not isinstance(raw_entities, list) or not isinstance(raw_relations, list):
        raise ParseError("'entities' and 'relations' must be lists")

    entities = []
    for k, rec in enumerate(raw_entities):
        try:
            ent = Entity(str(rec["id"]), rec["tokens"], rec["start"], rec["label"])
        except (KeyError, TypeError) as exc:
            raise ParseError(f"entity record {k} is malformed: {rec!r}") from exc
        except AttributeError as exc:
            raise ParseError(f"entity record {k} has non-string tokens: {rec!r}") from exc
        entities.append(ent)
    ids = [e.id for e in entities]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate entity ids")
    known = set(ids)

    relations = []
    for k, rec in enumerate(raw_relations):
        try:
            rel = Relation(str(rec["source"]), str(rec["target"]), rec["kind"])
        except (KeyError, TypeError) as exc:
            raise ParseError(f"relation record {k} is malformed: {rec!r}") from exc
        for end in (rel.source, rel.target):
            if end not in known:
                raise ValidationError(f"relation record {k} references missing entity {end!r}")
        relations.append(rel)

    order = sorted(range(len(entities)), key=lambda i: (entities[i].token_start, i))
    return [entities[i] for i in order], relations


def build_graphs(entities: list[Entity], relations: list[Relation]) -> list[PhraseGraph]:
    """Connected components of the ``modify`` graph, in reading order."""
    parent = {e.id: e.id for e in entities}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    modify = [r for r in relations if r.kind == "modify"]
    for rel in modify:
        ra, rb = find(rel.source), find(rel.target)
        if ra != rb:
            parent[rb] = ra

    groups: dict[str, list[Entity]] = {}
    for ent in entities:
        groups.setdefault(find(ent.id), []).append(ent)
    graphs = []
    for members in groups.values():
        member_ids = {e.id for e in members}
        members = sorted(members, key=lambda e: e.token_start)
        edges = tuple(r for r in modify if r.source in member_ids)
        graphs.append(PhraseGraph(tuple(members), edges))
    graphs.sort(key=lambda g: g.first_start)
    return graphs


def graph_to_phrase(graph: PhraseGraph) -> KeyPhrase:
    if not graph.entities:
        raise ValidationError("cannot build a phrase from an empty graph")
    words = " ".join(e.tokens.strip() for e in sorted(graph.entities, key=lambda e: e.token_start))
    labels = {e.label for e in graph.entities}
    if "OBS-DA" in labels:
        words = "no " + words
    elif "OBS-U" in labels:
        words = "maybe " + words
    return KeyPhrase(words, graph)


def extract_radgraph_phrases(doc: dict) -> list[KeyPhrase]:
    entities, relations = parse_annotation(doc)
    return [graph_to_phrase(g) for g in build_graphs(entities, relations)]


def iter_annotation_file(path) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, document)`` for each non-blank JSON line."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from exc


def extract_file(path) -> Iterable[dict]:
    """Phrase records for an annotation file, one per document."""
    for lineno, doc in iter_annotation_file(path):
        try:
            phrases = extract_radgraph_phrases(doc)
        except ValidationError as exc:
            raise ParseError(str(exc), line=lineno) from exc
        yield {"id": str(doc.get("id", lineno)), "radgraph_phrases": [p.text for p in phrases]}
