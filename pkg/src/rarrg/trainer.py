"""Synthetic findings corpus and the deterministic decoder training loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import embedding
from .decoder import DecoderConfig, Params, batch_loss, init_params, loss_and_gradients
from .embedding import NoiseConfig, TokenGrid, l2_normalize
from .errors import NumericError, ValidationError
from .losses import LossConfig

log = logging.getLogger(__name__)

VIEW_POSITIONS = ("frontal", "lateral")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    warmup_steps: int = 50
    batch_size: int = 128
    max_epochs: int = 10
    weight_decay: float = 0.05
    grad_clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_reduction: str = "mean"
    noise: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_epochs < 0:
            raise ValidationError("learning_rate and batch_size must be positive, max_epochs non-negative")
        if self.warmup_steps < 0 or self.weight_decay < 0 or self.grad_clip_norm <= 0:
            raise ValidationError("invalid warmup_steps / weight_decay / grad_clip_norm")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValidationError(f"loss_reduction must be 'sum' or 'mean', got {self.loss_reduction!r}")


# --- synthetic corpus -------------------------------------------------------

_MODIFIERS = ["mild", "moderate", "small", "large", "patchy", "diffuse", "focal", "bilateral",
              "left", "right", "basilar", "apical", "subtle", "streaky", "nodular", "linear"]
_FINDINGS = ["opacity", "effusion", "atelectasis", "edema", "cardiomegaly", "consolidation",
             "pneumothorax", "nodule", "emphysema", "scarring", "fracture", "calcification",
             "thickening", "congestion", "hernia", "mass"]


def finding_phrases(count: int) -> list[str]:
    """``count`` distinct auto-generated finding phrases."""
    if count > len(_MODIFIERS) * len(_FINDINGS):
        raise ValidationError(f"at most {len(_MODIFIERS) * len(_FINDINGS)} findings supported")
    out = []
    for k in range(count):
        noun = _FINDINGS[k % len(_FINDINGS)]
        mod = _MODIFIERS[(k // len(_FINDINGS) + 3 * k) % len(_MODIFIERS)]
        out.append(f"{mod} {noun}")
    return out


@dataclass(frozen=True)
class SyntheticCorpusConfig:
    num_findings: int = 20
    signature_dim: int = 32
    grid_side: int = 4
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    mean_phrases: float = 7.16
    negated_findings: int = 2
    views_per_study: int = 1
    lateral_drop_prob: float = 0.3
    noise_level: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_findings < 2:
            raise ValidationError("num_findings must be at least 2")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train == 0:
            raise ValidationError("study counts must be positive")
        if self.views_per_study not in (1, 2):
            raise ValidationError("views_per_study must be 1 or 2")
        if not 0 <= self.negated_findings < self.num_findings:
            raise ValidationError("negated_findings must be in [0, num_findings)")
        if self.mean_present() < 1 or self.mean_present() > self.num_findings:
            raise ValidationError(f"mean_phrases={self.mean_phrases} is not reachable")

    def mean_present(self) -> float:
        """Mean present-finding count giving ``mean_phrases`` phrases in expectation.

        Each routinely-negated finding that is absent contributes a "no ..."
        phrase, so phrases = k + R (1 - k / F) for k present findings.
        """
        F, R = self.num_findings, self.negated_findings
        return (self.mean_phrases - R) / (1 - R / F)


@dataclass
class View:
    position: str
    grid: TokenGrid
    phrases: list[str]


@dataclass
class Study:
    id: str
    views: list[View]
    phrases: list[str]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "phrases": self.phrases,
            "views": [
                {"position": v.position, "side": v.grid.side, "tokens": v.grid.tokens().tolist(), "phrases": v.phrases}
                for v in self.views
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Study":
        try:
            views = []
            for v in obj["views"]:
                if v["position"] not in VIEW_POSITIONS:
                    raise ValidationError(f"unknown view position {v['position']!r}")
                grid = TokenGrid.from_sequence(np.asarray(v["tokens"], dtype=np.float64))
                views.append(View(v["position"], grid, list(v.get("phrases", obj.get("phrases", [])))))
            if not views:
                raise ValidationError("study has no views")
            return cls(str(obj.get("id", "")), views, list(obj.get("phrases", [])))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed study record: {exc}") from exc


@dataclass
class FindingBank:
    phrases: list[str]
    signatures: np.ndarray
    negated: list[int]


def _sample_count(rng, mean: float, upper: int) -> int:
    # two-point distribution on floor/ceil has exactly the requested mean
    lo = math.floor(mean)
    k = lo + int(rng.random() < mean - lo)
    return int(min(max(k, 1), upper))


def generate_corpus(cfg: SyntheticCorpusConfig):
    """Return ``(train, val, test, bank)``; fully determined by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    F = cfg.num_findings
    phrases = finding_phrases(F)
    signatures = l2_normalize(rng.normal(size=(F, cfg.signature_dim)))
    negated = sorted(rng.choice(F, size=cfg.negated_findings, replace=False).tolist())
    bank = FindingBank(phrases, signatures, negated)
    mean_k = cfg.mean_present()
    g = cfg.grid_side

    def make_view(position, present):
        base = signatures[present].sum(axis=0) if len(present) else np.zeros(cfg.signature_dim)
        data = np.broadcast_to(base, (g, g, cfg.signature_dim)) + cfg.noise_level * rng.normal(
            size=(g, g, cfg.signature_dim)
        )
        return TokenGrid(data)

    def view_phrases(visible, study_present):
        out = [phrases[f] for f in visible]
        out += [f"no {phrases[f]}" for f in negated if f not in study_present]
        return out

    splits = []
    counter = 0
    for name, count in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        studies = []
        for _ in range(count):
            k = _sample_count(rng, mean_k, F)
            present = sorted(rng.choice(F, size=k, replace=False).tolist())
            pooled = view_phrases(present, set(present))
            views = [View("frontal", make_view("frontal", present), pooled)]
            if cfg.views_per_study == 2:
                keep = [f for f in present if rng.random() >= cfg.lateral_drop_prob]
                views.append(View("lateral", make_view("lateral", keep), view_phrases(keep, set(present))))
            studies.append(Study(f"{name}-{counter:06d}", views, pooled))
            counter += 1
        splits.append(studies)
    return splits[0], splits[1], splits[2], bank


# --- optimisation -----------------------------------------------------------


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``learning_rate`` then cosine decay to zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    w = cfg.warmup_steps
    if step < w:
        return cfg.learning_rate * step / w
    if total_steps == w:
        return cfg.learning_rate
    progress = (step - w) / (total_steps - w)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Params) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_by_global_norm(grads: Params, max_norm: float) -> tuple[Params, float]:
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class AdamW:
    """Adam with decoupled weight decay, applied to every tensor."""

    def __init__(self, params: Params, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Params, grads: Params, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1**self.t
        bc2 = 1 - c.beta2**self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.adam_eps)
            params[k] = (params[k] - lr * (update + c.weight_decay * params[k])).astype(params[k].dtype)


# --- training loop ----------------------------------------------------------


@dataclass
class Example:
    tokens: np.ndarray
    phrases: list[str]


def studies_to_examples(studies: Sequence[Study]) -> list[Example]:
    """One training example per view, paired with that view's phrases."""
    return [Example(v.grid.tokens(), list(v.phrases)) for s in studies for v in s.views]


@dataclass
class TrainResult:
    params: Params
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None


class PhraseEmbeddings:
    """Caches provider output so each distinct phrase is embedded once."""

    def __init__(self, provider, phrases):
        unique = list(dict.fromkeys(phrases))
        vecs = provider.embed(unique) if unique else np.empty((0, provider.dim))
        self.dim = provider.dim
        self._rows = {p: i for i, p in enumerate(unique)}
        self._table = l2_normalize(vecs) if len(unique) else vecs

    def __call__(self, phrases: Sequence[str]) -> np.ndarray:
        return self._table[[self._rows[p] for p in phrases]].reshape(len(phrases), self.dim)


def evaluate_loss(examples: Sequence[Example], params: Params, dcfg: DecoderConfig, lcfg: LossConfig,
                  embed: PhraseEmbeddings, batch_size: int = 128, reduction: str = "mean") -> float:
    """Mean per-batch loss without noise, using the same reduction as training."""
    if not examples:
        return float("nan")
    losses, weights = [], []
    for s in range(0, len(examples), batch_size):
        chunk = examples[s : s + batch_size]
        X = np.stack([e.tokens for e in chunk])
        targets = [embed(e.phrases) for e in chunk]
        losses.append(batch_loss(X, targets, params, dcfg, lcfg, reduction=reduction))
        weights.append(len(chunk))
    return float(np.average(losses, weights=weights))


def train(train_set: Sequence[Study], val_set: Sequence[Study], dcfg: DecoderConfig, lcfg: LossConfig,
          tcfg: TrainConfig, provider, init: Params | None = None, progress=None) -> TrainResult:
    """Train the decoder; return the parameters of the lowest-validation-loss epoch."""
    train_ex = studies_to_examples(train_set)
    val_ex = studies_to_examples(val_set)
    if not train_ex:
        raise ValidationError("training set is empty")
    if provider.dim != dcfg.d_embed:
        raise ValidationError(f"provider dimension {provider.dim} != d_embed {dcfg.d_embed}")
    params = init if init is not None else init_params(dcfg, tcfg.seed)
    params = {k: v.copy() for k, v in params.items()}
    result = TrainResult(params={k: v.copy() for k, v in params.items()})
    if tcfg.max_epochs == 0:
        return result

    embed = PhraseEmbeddings(provider, [p for e in train_ex + val_ex for p in e.phrases])
    rng = np.random.default_rng(tcfg.seed)
    noise_cfg = NoiseConfig(enabled=tcfg.noise, rng_seed=tcfg.seed)
    noise_rng = np.random.default_rng([tcfg.seed, 1])
    steps_per_epoch = math.ceil(len(train_ex) / tcfg.batch_size)
    total_steps = steps_per_epoch * tcfg.max_epochs
    if tcfg.warmup_steps >= total_steps:
        raise ValidationError(f"warmup_steps={tcfg.warmup_steps} must be below total steps {total_steps}")
    opt = AdamW(params, tcfg)
    best_val = math.inf
    step = 0
    for epoch in range(tcfg.max_epochs):
        order = rng.permutation(len(train_ex))
        epoch_losses = []
        for s in range(steps_per_epoch):
            chunk = [train_ex[i] for i in order[s * tcfg.batch_size : (s + 1) * tcfg.batch_size]]
            X = np.stack([e.tokens for e in chunk])
            targets = []
            for e in chunk:
                t = embed(e.phrases)
                if noise_cfg.enabled and len(t):
                    t = l2_normalize(embedding.add_noise(t, noise_cfg, rng=noise_rng))
                targets.append(t)
            try:
                res = loss_and_gradients(X, targets, params, dcfg, lcfg, reduction=tcfg.loss_reduction)
            except NumericError as exc:
                raise NumericError(f"step {step}: {exc}") from exc
            grads, _ = clip_by_global_norm(res.grads, tcfg.grad_clip_norm)
            step += 1
            opt.step(params, grads, lr_at(step, total_steps, tcfg))
            epoch_losses.append(res.loss)
        val_loss = evaluate_loss(val_ex, params, dcfg, lcfg, embed, tcfg.batch_size, tcfg.loss_reduction) if val_ex else math.nan
        train_loss = float(np.mean(epoch_losses))
        row = {"epoch": epoch + 1, "train_loss": train_loss, "val_loss": val_loss, "lr": lr_at(step, total_steps, tcfg)}
        result.history.append(row)
        log.info("epoch %d train %.4f val %.4f", epoch + 1, train_loss, val_loss)
        if progress is not None:
            progress(row)
        # without a validation split the last epoch is kept
        score = val_loss if val_ex else -epoch
        if score < best_val:
            best_val = score
            result.best_epoch = epoch + 1
            result.params = copy.deepcopy(params)
    return result


def write_history_csv(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "lr"])
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
