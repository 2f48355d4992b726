import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rarrg.embedding import HashEmbeddingProvider, l2_normalize
from rarrg.errors import ExternalServiceError, ParseError, ValidationError
from rarrg.index import VectorIndex, build_index, load_index, retrieve, save_index

PROV = HashEmbeddingProvider(8)


class FailingProvider:
    dim = 8

    def embed(self, texts):
        raise ExternalServiceError("service down")


def test_build_dedups_in_order():
    idx = build_index(["a", "b", "a"], PROV)
    assert idx.phrases == ["a", "b"]
    np.testing.assert_allclose(np.linalg.norm(idx.embeddings, axis=1), 1)


def test_build_empty():
    idx = build_index([], PROV)
    assert len(idx) == 0 and idx.dim == 8


def test_build_large_distinct_count():
    phrases = [f"p{i % 5000}" for i in range(20_000)]
    idx = build_index(phrases, HashEmbeddingProvider(4))
    assert len(idx) == 5000


def test_build_provider_failure_names_phrase():
    with pytest.raises(ExternalServiceError, match="'x'"):
        build_index(["x", "y"], FailingProvider())


def test_index_rejects_duplicates():
    with pytest.raises(ValidationError):
        VectorIndex(["a", "a"], np.eye(2))


def test_threshold_excludes_below():
    idx = build_index(["a", "b"], PROV)
    res = retrieve(np.full(3, 0.39), l2_normalize(np.ones((3, 8))), idx, 0.4)
    assert res.phrases == []


def test_threshold_is_inclusive():
    idx = build_index(["a"], PROV)
    assert retrieve([0.4], idx.embeddings[:1], idx, 0.4).phrases == ["a"]


def test_exact_match_scores_one():
    idx = build_index(["a", "b", "c"], PROV)
    res = retrieve([0.9], idx.embeddings[1:2], idx)
    assert res.phrases == ["b"]
    assert res.items[0].score == pytest.approx(1.0)


def test_tie_goes_to_first_record():
    e = l2_normalize(np.arange(1.0, 9.0))
    idx = VectorIndex(["first", "second"], np.stack([e, e]))
    assert retrieve([0.9], e[None], idx).phrases == ["first"]


def test_order_and_dedup():
    idx = build_index(["a", "b"], PROV)
    sem = np.stack([idx.embeddings[0], idx.embeddings[1], idx.embeddings[0]])
    res = retrieve([0.5, 0.7, 0.9], sem, idx)
    assert res.phrases == ["a", "b"]
    assert [it.query for it in res.items] == [2, 1]
    assert res.to_json()["phrases"] == ["a", "b"]


def test_threshold_above_one_and_invalid():
    idx = build_index(["a"], PROV)
    assert retrieve([0.99], idx.embeddings, idx, 1.01).phrases == []
    with pytest.raises(ValidationError):
        retrieve([0.5], idx.embeddings, idx, -0.1)
    with pytest.raises(ValidationError):
        retrieve([0.5], idx.embeddings, idx, float("nan"))


def test_dimension_mismatch():
    idx = build_index(["a"], PROV)
    with pytest.raises(ValidationError):
        retrieve([0.5], np.ones((1, 3)), idx)


def _brute_force(probs, sem, phrases, emb, threshold):
    out = []
    for q in sorted(range(len(probs)), key=lambda q: (-probs[q], q)):
        if probs[q] < threshold:
            continue
        s = sem[q] / np.linalg.norm(sem[q])
        scores = [float(s @ e) for e in emb]
        best = max(range(len(scores)), key=lambda r: (scores[r], -r))
        if phrases[best] not in out:
            out.append(phrases[best])
    return out


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 10), st.floats(0, 1))
def test_exactness_and_monotonicity(seed, n_rec, n_q, threshold):
    rng = np.random.default_rng(seed)
    idx = VectorIndex([f"r{i}" for i in range(n_rec)], l2_normalize(rng.normal(size=(n_rec, 5))))
    probs = rng.uniform(size=n_q)
    sem = rng.normal(size=(n_q, 5))
    got = retrieve(probs, sem, idx, threshold).phrases
    assert got == _brute_force(probs, sem, idx.phrases, idx.embeddings, threshold)
    higher = retrieve(probs, sem, idx, min(1.0, threshold + 0.1)).phrases
    assert set(higher) <= set(got)
    perm = rng.permutation(n_q)
    assert set(retrieve(probs[perm], sem[perm], idx, threshold).phrases) == set(got)


# --- file format -------------------------------------------------------------------


def test_round_trip(tmp_path):
    idx = build_index(["mild edema", "no effusion", "ünïcode"], PROV)
    path = tmp_path / "i.kpvec"
    save_index(idx, path)
    back = load_index(path)
    assert back.phrases == idx.phrases
    assert back.embeddings.tobytes() == idx.embeddings.tobytes()
    header = json.loads(path.read_text(encoding="utf-8").splitlines()[0])
    assert header == {"format": "kpvec", "version": 1, "dim": 8, "count": 3}


def test_round_trip_empty(tmp_path):
    path = tmp_path / "e.kpvec"
    save_index(build_index([], PROV), path)
    assert len(load_index(path)) == 0


def _write(path, header, records):
    lines = [json.dumps(header)] + [r if isinstance(r, str) else json.dumps(r) for r in records]
    path.write_text("\n".join(lines) + "\n")


def test_bad_version(tmp_path):
    path = tmp_path / "v.kpvec"
    _write(path, {"format": "kpvec", "version": 2, "dim": 2, "count": 0}, [])
    with pytest.raises(ParseError, match="version"):
        load_index(path)


def test_malformed_record_line_number(tmp_path):
    path = tmp_path / "m.kpvec"
    recs = [{"phrase": f"p{i}", "embedding": [1.0, 0.0]} for i in range(3)] + ["{not json"]
    _write(path, {"format": "kpvec", "version": 1, "dim": 2, "count": 4}, recs)
    with pytest.raises(ParseError, match="line 5"):
        load_index(path)


def test_dimension_and_count_mismatch(tmp_path):
    path = tmp_path / "d.kpvec"
    _write(path, {"format": "kpvec", "version": 1, "dim": 2, "count": 1}, [{"phrase": "a", "embedding": [1.0]}])
    with pytest.raises(ParseError, match="line 2"):
        load_index(path)
    _write(path, {"format": "kpvec", "version": 1, "dim": 2, "count": 2}, [{"phrase": "a", "embedding": [1.0, 0]}])
    with pytest.raises(ParseError, match="announces 2"):
        load_index(path)


def test_not_an_index(tmp_path):
    path = tmp_path / "x.kpvec"
    path.write_text('{"format": "other"}\n')
    with pytest.raises(ParseError, match="line 1"):
        load_index(path)
