"""Image-to-report glue: decoder predictions -> retrieval -> prompt -> report."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .compose import MockClient, build_rag_prompt, generate_report, Report
from .decoder import DecoderConfig, Params, forward
from .errors import ValidationError
from .index import RetrievalResult, VectorIndex, retrieve
from .metrics import set_f1
from .trainer import Study


def retrieve_views(study: Study, params: Params, cfg: DecoderConfig, idx: VectorIndex,
                   threshold: float = 0.4) -> dict[str, RetrievalResult]:
    """Retrieval result per view position (first view wins if a position repeats)."""
    if len(idx) and idx.dim != cfg.d_embed:
        raise ValidationError(f"index dimension {idx.dim} != decoder embedding dimension {cfg.d_embed}")
    out = {}
    for view in study.views:
        if view.position in out:
            continue
        pred = forward(view.grid, params, cfg)
        out[view.position] = retrieve(pred.probs, pred.semantics, idx, threshold)
    return out


def report_for_study(study: Study, params: Params, cfg: DecoderConfig, idx: VectorIndex,
                     threshold: float = 0.4, client=None, **template_kw) -> tuple[Report, dict[str, RetrievalResult]]:
    """Single-view prompt for one-view studies, two-view prompt when frontal and lateral exist."""
    client = client or MockClient()
    results = retrieve_views(study, params, cfg, idx, threshold)
    two_view = "frontal" in results and "lateral" in results
    if not any(r.phrases for r in results.values()):
        template_id = "multi_view" if two_view else "single_view"
        return Report("", template_id, {}, "no key phrases retrieved"), results
    if two_view:
        prompt = build_rag_prompt(results["frontal"].phrases, results["lateral"].phrases, **template_kw)
    else:
        prompt = build_rag_prompt(next(iter(results.values())).phrases, None, **template_kw)
    return generate_report(prompt, client), results


def retrieval_f1(studies: Sequence[Study], params: Params, cfg: DecoderConfig, idx: VectorIndex,
                 thresholds: Sequence[float], position: str = "frontal") -> list[dict]:
    """Example-based phrase-set F1 and mean retrieved count per threshold.

    Forward passes are shared across thresholds.
    """
    preds = []
    truths = []
    for s in studies:
        view = next((v for v in s.views if v.position == position), s.views[0])
        preds.append(forward(view.grid, params, cfg))
        truths.append(view.phrases)
    rows = []
    for t in thresholds:
        f1s, counts = [], []
        for pred, truth in zip(preds, truths):
            got = retrieve(pred.probs, pred.semantics, idx, t).phrases
            f1s.append(set_f1(got, truth))
            counts.append(len(got))
        rows.append({"threshold": float(t), "example_f1": float(np.mean(f1s)), "mean_count": float(np.mean(counts))})
    return rows
