"""Report-level evaluation: BLEU, ROUGE-L and multi-label F1 aggregations."""

from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ParseError, ValidationError

CHEXBERT_CLASSES = (
    "Enlarged Cardiomediastinum", "Cardiomegaly", "Lung Opacity", "Lung Lesion", "Edema",
    "Consolidation", "Pneumonia", "Atelectasis", "Pneumothorax", "Pleural Effusion",
    "Pleural Other", "Fracture", "Support Devices", "No Finding",
)
CHEXBERT_5 = ("Atelectasis", "Cardiomegaly", "Consolidation", "Edema", "Pleural Effusion")

LABEL_VALUES = {"positive": 1, "negative": 0, "uncertain": 0, "absent": 0}

_TOKEN = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase; punctuation marks become their own tokens."""
    return _TOKEN.findall(text.lower())


def binarize_labels(raw) -> np.ndarray:
    """Map positive to 1 and every other CheXbert state to 0."""
    out = []
    for r, row in enumerate(raw):
        cells = []
        for value in row:
            key = str(value).lower()
            if key not in LABEL_VALUES:
                raise ValidationError(f"row {r}: unknown label value {value!r}")
            cells.append(LABEL_VALUES[key])
        out.append(cells)
    return np.asarray(out, dtype=int).reshape(len(out), -1)


def _f1(tp, fp, fn, empty=0.0):
    denom = 2 * tp + fp + fn
    return empty if denom == 0 else 2 * tp / denom


@dataclass
class F1Result:
    micro: float
    macro: float
    example: float
    per_class: list[dict] = field(default_factory=list)


def f1_suite(pred, ref, class_subset: Sequence[int] | None = None, class_names: Sequence[str] | None = None) -> F1Result:
    """Micro, macro and example-averaged F1 over binary label matrices.

    Conventions: an example with no positives in either matrix scores 1; a
    class with no positives in either matrix scores 0 in the macro mean; micro
    F1 with no positives anywhere is 1.
    """
    pred = np.asarray(pred, dtype=int)
    ref = np.asarray(ref, dtype=int)
    if pred.shape != ref.shape or pred.ndim != 2:
        raise ValidationError(f"label matrices differ in shape: {pred.shape} vs {ref.shape}")
    if class_subset is not None:
        pred = pred[:, list(class_subset)]
        ref = ref[:, list(class_subset)]
        if class_names is not None:
            class_names = [class_names[i] for i in class_subset]
    tp = (pred & ref).astype(int)
    fp = (pred & (1 - ref)).astype(int)
    fn = ((1 - pred) & ref).astype(int)
    micro = _f1(tp.sum(), fp.sum(), fn.sum(), empty=1.0)
    per_class = []
    for c in range(pred.shape[1]):
        t, p_, n_ = tp[:, c].sum(), fp[:, c].sum(), fn[:, c].sum()
        per_class.append({
            "class": class_names[c] if class_names is not None else str(c),
            "precision": float(t / (t + p_)) if t + p_ else 0.0,
            "recall": float(t / (t + n_)) if t + n_ else 0.0,
            "f1": float(_f1(t, p_, n_)),
        })
    macro = float(np.mean([row["f1"] for row in per_class])) if per_class else 0.0
    rows = [_f1(tp[i].sum(), fp[i].sum(), fn[i].sum(), empty=1.0) for i in range(pred.shape[0])]
    example = float(np.mean(rows)) if rows else 0.0
    return F1Result(float(micro), macro, example, per_class)


def set_f1(pred: Sequence[str], ref: Sequence[str]) -> float:
    """F1 between two phrase sets; two empty sets score 1."""
    p, r = set(pred), set(ref)
    return _f1(len(p & r), len(p - r), len(r - p), empty=1.0)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[str], references: Sequence[str], max_n: int = 4) -> float:
    """Corpus BLEU with one reference per candidate and no smoothing."""
    if len(candidates) != len(references):
        raise ValidationError("candidate and reference lists differ in length")
    if not candidates:
        raise ValidationError("empty corpus")
    if max_n < 1:
        raise ValidationError("max_n must be positive")
    matched = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        ct, rt = tokenize(cand), tokenize(ref)
        c_len += len(ct)
        r_len += len(rt)
        for n in range(1, max_n + 1):
            cg, rg = _ngrams(ct, n), _ngrams(rt, n)
            matched[n - 1] += sum(min(cnt, rg[g]) for g, cnt in cg.items())
            total[n - 1] += max(len(ct) - n + 1, 0)
    if c_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_p)


def _lcs(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str, beta: float = 1.2) -> float:
    ref = tokenize(reference)
    if not ref:
        raise ValidationError("empty reference")
    cand = tokenize(candidate)
    lcs = _lcs(cand, ref)
    if lcs == 0:
        return 0.0
    r = lcs / len(ref)
    p = lcs / len(cand)
    return (1 + beta**2) * r * p / (r + beta**2 * p)


def corpus_rouge_l(candidates: Sequence[str], references: Sequence[str], beta: float = 1.2) -> float:
    if len(candidates) != len(references) or not candidates:
        raise ValidationError("need equal-length, non-empty candidate and reference lists")
    return float(np.mean([rouge_l(c, r, beta) for c, r in zip(candidates, references)]))


@dataclass
class MetricReport:
    bleu1: float
    bleu4: float
    rouge_l: float
    micro_f1: float | None = None
    macro_f1: float | None = None
    example_f1: float | None = None
    per_class: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def evaluate_pairs(records: Sequence[dict], class_names: Sequence[str] = CHEXBERT_CLASSES,
                   class_subset: Sequence[int] | None = None) -> MetricReport:
    """Metrics for evaluation records; F1 fields stay None unless every record has labels."""
    cands = [r["candidate"] for r in records]
    refs = [r["reference"] for r in records]
    report = MetricReport(bleu(cands, refs, 1), bleu(cands, refs, 4), corpus_rouge_l(cands, refs))
    have = [("pred_labels" in r and "ref_labels" in r) for r in records]
    if all(have):
        pred = np.asarray([r["pred_labels"] for r in records], dtype=int)
        ref = np.asarray([r["ref_labels"] for r in records], dtype=int)
        if pred.shape[1] != len(class_names):
            raise ValidationError(f"expected {len(class_names)} label columns, got {pred.shape[1]}")
        f1 = f1_suite(pred, ref, class_subset, class_names)
        report.micro_f1, report.macro_f1, report.example_f1 = f1.micro, f1.macro, f1.example
        report.per_class = f1.per_class
    elif any(have):
        raise ValidationError("labels must be given for all records or none")
    return report


def read_eval_pairs(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec.get("candidate"), str) or not isinstance(rec.get("reference"), str):
                    raise ValueError("candidate and reference must be strings")
            except (json.JSONDecodeError, ValueError, AttributeError) as exc:
                raise ParseError(str(exc), line=lineno) from exc
            records.append(rec)
    return records


def write_report(report: MetricReport, json_path, csv_path=None) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2)
    if csv_path is None:
        return
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for key in ("bleu1", "bleu4", "rouge_l", "micro_f1", "macro_f1", "example_f1"):
            value = getattr(report, key)
            w.writerow([key, "" if value is None else repr(value)])
        for row in report.per_class:
            for key in ("precision", "recall", "f1"):
                w.writerow([f"{row['class']}.{key}", repr(row[key])])
