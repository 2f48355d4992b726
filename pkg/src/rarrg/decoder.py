"""DETR-style set decoder in numpy with hand-written reverse mode.

Learned queries attend to projected visual tokens through ``L`` post-norm
blocks (self-attention, cross-attention, feed-forward). A linear head gives
selection logits and a three-layer ReLU head gives unit semantic
embeddings.

Parameters live in a flat ``dict[str, ndarray]``; gradients use the same keys.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .embedding import TokenGrid
from .errors import NumericError, ValidationError
from .losses import LossConfig, MatchedExample, semantic_contrastive_loss_grad, sigmoid, transq_loss_grad
from .matching import Assignment, match_example

Params = dict[str, np.ndarray]

LN_EPS = 1e-5


@dataclass(frozen=True)
class DecoderConfig:
    N: int = 50
    L: int = 6
    d_model: int = 768
    d_embed: int = 768
    heads: int = 8
    d_visual: int = 768
    d_ff: int = 2048
    positional_encoding: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("N", "L", "d_model", "d_embed", "heads", "d_visual", "d_ff"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"DecoderConfig.{name} must be positive")
        if self.d_model % self.heads:
            raise ValidationError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"unsupported dtype {self.dtype!r}")


@dataclass
class PredictionSet:
    logits: np.ndarray
    semantics: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return sigmoid(self.logits)


def param_shapes(cfg: DecoderConfig) -> dict[str, tuple[int, ...]]:
    D, F, E = cfg.d_model, cfg.d_ff, cfg.d_embed
    shapes = {"query": (cfg.N, D), "in_proj.W": (cfg.d_visual, D), "in_proj.b": (D,)}
    for l in range(cfg.L):
        for attn in ("self_attn", "cross_attn"):
            for w in ("q", "k", "v", "o"):
                shapes[f"layers.{l}.{attn}.W{w}"] = (D, D)
                shapes[f"layers.{l}.{attn}.b{w}"] = (D,)
        shapes[f"layers.{l}.ffn.W1"] = (D, F)
        shapes[f"layers.{l}.ffn.b1"] = (F,)
        shapes[f"layers.{l}.ffn.W2"] = (F, D)
        shapes[f"layers.{l}.ffn.b2"] = (D,)
        for k in (1, 2, 3):
            shapes[f"layers.{l}.norm{k}.g"] = (D,)
            shapes[f"layers.{l}.norm{k}.b"] = (D,)
    shapes.update({
        "sel.W": (D, 1), "sel.b": (1,),
        "sem.W1": (D, D), "sem.b1": (D,),
        "sem.W2": (D, D), "sem.b2": (D,),
        "sem.W3": (D, E), "sem.b3": (E,),
    })
    return shapes


def init_params(cfg: DecoderConfig, seed: int) -> Params:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; unit gains, zero shifts."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf == "b" and ".norm" in name:
            arr = np.zeros(shape)
        elif name == "query":
            arr = rng.uniform(-1.0, 1.0, size=shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else _fan_in_for_bias(name, cfg)
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr.astype(dtype)
    return params


def _fan_in_for_bias(name: str, cfg: DecoderConfig) -> int:
    if name.startswith("in_proj"):
        return cfg.d_visual
    if name.endswith("ffn.b2"):
        return cfg.d_ff
    return cfg.d_model


def positional_encoding_2d(side: int, d_model: int) -> np.ndarray:
    """Fixed sine/cosine encoding, half the channels per grid axis; (side*side, d_model)."""
    half = d_model // 2
    pairs = half // 2
    pe = np.zeros((side, side, d_model))
    if pairs == 0:
        return pe.reshape(side * side, d_model)
    freq = 10000.0 ** (-np.arange(pairs) / pairs)
    pos = np.arange(side)[:, None] * freq[None, :]  # (side, pairs)
    axis_enc = np.zeros((side, 2 * pairs))
    axis_enc[:, 0::2] = np.sin(pos)
    axis_enc[:, 1::2] = np.cos(pos)
    pe[:, :, : 2 * pairs] = axis_enc[:, None, :]  # row coordinate
    pe[:, :, half : half + 2 * pairs] = axis_enc[None, :, :]  # column coordinate
    return pe.reshape(side * side, d_model)


# --- layer primitives -------------------------------------------------------


def _linear(x, W, b):
    return x @ W + b


def _linear_back(dy, x, W, grads, wname, bname):
    grads[wname] += x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    grads[bname] += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy @ W.T


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, cache, g, grads, gname, bname):
    xhat, inv = cache
    grads[gname] += np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    grads[bname] += np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def _split_heads(x, h):
    B, n, D = x.shape
    return x.reshape(B, n, h, D // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, n, h * dh)


def _attention(x, ctx, p, prefix, heads):
    pq = lambda w: p[f"{prefix}.{w}"]
    q = _split_heads(_linear(x, pq("Wq"), pq("bq")), heads)
    k = _split_heads(_linear(ctx, pq("Wk"), pq("bk")), heads)
    v = _split_heads(_linear(ctx, pq("Wv"), pq("bv")), heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = q @ k.transpose(0, 1, 3, 2) * scale
    s = s - s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    o = _merge_heads(a @ v)
    out = _linear(o, pq("Wo"), pq("bo"))
    return out, (x, ctx, q, k, v, a, o, scale)


def _attention_back(dout, cache, p, grads, prefix, heads):
    x, ctx, q, k, v, a, o, scale = cache
    n = lambda w: f"{prefix}.{w}"
    do = _linear_back(dout, o, p[n("Wo")], grads, n("Wo"), n("bo"))
    do = _split_heads(do, heads)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - np.sum(da * a, axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dx = _linear_back(_merge_heads(dq), x, p[n("Wq")], grads, n("Wq"), n("bq"))
    dctx = _linear_back(_merge_heads(dk), ctx, p[n("Wk")], grads, n("Wk"), n("bk"))
    dctx = dctx + _linear_back(_merge_heads(dv), ctx, p[n("Wv")], grads, n("Wv"), n("bv"))
    return dx, dctx


# --- forward / backward -----------------------------------------------------


def _as_token_batch(tokens, cfg: DecoderConfig) -> np.ndarray:
    """Accept a TokenGrid, a (T, C) sequence, a list of either, or (B, T, C)."""
    if isinstance(tokens, TokenGrid):
        arr = tokens.tokens()[None]
    elif isinstance(tokens, (list, tuple)):
        arr = np.stack([t.tokens() if isinstance(t, TokenGrid) else np.asarray(t) for t in tokens])
    else:
        arr = np.asarray(tokens)
        if arr.ndim == 2:
            arr = arr[None]
    if arr.ndim != 3 or arr.shape[-1] != cfg.d_visual:
        raise ValidationError(f"expected tokens with {cfg.d_visual} channels, got shape {arr.shape}")
    return arr.astype(cfg.dtype, copy=False)


def _forward(X, p: Params, cfg: DecoderConfig):
    B, T, _ = X.shape
    cache = {"X": X}
    mem = _linear(X, p["in_proj.W"], p["in_proj.b"])
    if cfg.positional_encoding:
        side = math.isqrt(T)
        if side * side != T:
            raise ValidationError(f"token count {T} is not a perfect square")
        mem = mem + positional_encoding_2d(side, cfg.d_model).astype(mem.dtype)
    cache["mem"] = mem
    h = np.broadcast_to(p["query"], (B, cfg.N, cfg.d_model)).copy()
    layers = []
    for l in range(cfg.L):
        pre = f"layers.{l}"
        lc = {}
        sa, lc["sa"] = _attention(h, h, p, f"{pre}.self_attn", cfg.heads)
        h, lc["n1"] = _layer_norm(h + sa, p[f"{pre}.norm1.g"], p[f"{pre}.norm1.b"])
        lc["h1"] = h
        ca, lc["ca"] = _attention(h, mem, p, f"{pre}.cross_attn", cfg.heads)
        h, lc["n2"] = _layer_norm(h + ca, p[f"{pre}.norm2.g"], p[f"{pre}.norm2.b"])
        lc["h2"] = h
        z = _linear(h, p[f"{pre}.ffn.W1"], p[f"{pre}.ffn.b1"])
        r = np.maximum(z, 0)
        f = _linear(r, p[f"{pre}.ffn.W2"], p[f"{pre}.ffn.b2"])
        lc["ffn"] = (z, r)
        h, lc["n3"] = _layer_norm(h + f, p[f"{pre}.norm3.g"], p[f"{pre}.norm3.b"])
        layers.append(lc)
    cache["layers"] = layers
    cache["out"] = h
    logits = _linear(h, p["sel.W"], p["sel.b"])[..., 0]
    z1 = _linear(h, p["sem.W1"], p["sem.b1"])
    r1 = np.maximum(z1, 0)
    z2 = _linear(r1, p["sem.W2"], p["sem.b2"])
    r2 = np.maximum(z2, 0)
    z3 = _linear(r2, p["sem.W3"], p["sem.b3"])
    norm = np.linalg.norm(z3, axis=-1, keepdims=True)
    norm = np.maximum(norm, np.finfo(z3.dtype).tiny)
    sem = z3 / norm
    cache["sem"] = (z1, r1, z2, r2, norm, sem)
    return logits, sem, cache


def _backward(dlogits, dsem, p: Params, cfg: DecoderConfig, cache) -> Params:
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    z1, r1, z2, r2, norm, sem = cache["sem"]
    h = cache["out"]
    dz3 = (dsem - sem * np.sum(sem * dsem, axis=-1, keepdims=True)) / norm
    dr2 = _linear_back(dz3, r2, p["sem.W3"], grads, "sem.W3", "sem.b3")
    dz2 = dr2 * (z2 > 0)
    dr1 = _linear_back(dz2, r1, p["sem.W2"], grads, "sem.W2", "sem.b2")
    dz1 = dr1 * (z1 > 0)
    dh = _linear_back(dz1, h, p["sem.W1"], grads, "sem.W1", "sem.b1")
    dh = dh + _linear_back(dlogits[..., None], h, p["sel.W"], grads, "sel.W", "sel.b")

    mem = cache["mem"]
    dmem = np.zeros_like(mem)
    for l in reversed(range(cfg.L)):
        pre = f"layers.{l}"
        lc = cache["layers"][l]
        dres = _layer_norm_back(dh, lc["n3"], p[f"{pre}.norm3.g"], grads, f"{pre}.norm3.g", f"{pre}.norm3.b")
        z, r = lc["ffn"]
        dr = _linear_back(dres, r, p[f"{pre}.ffn.W2"], grads, f"{pre}.ffn.W2", f"{pre}.ffn.b2")
        dh = dres + _linear_back(dr * (z > 0), lc["h2"], p[f"{pre}.ffn.W1"], grads, f"{pre}.ffn.W1", f"{pre}.ffn.b1")
        dres = _layer_norm_back(dh, lc["n2"], p[f"{pre}.norm2.g"], grads, f"{pre}.norm2.g", f"{pre}.norm2.b")
        dx, dctx = _attention_back(dres, lc["ca"], p, grads, f"{pre}.cross_attn", cfg.heads)
        dmem += dctx
        dh = dres + dx
        dres = _layer_norm_back(dh, lc["n1"], p[f"{pre}.norm1.g"], grads, f"{pre}.norm1.g", f"{pre}.norm1.b")
        dx, dctx = _attention_back(dres, lc["sa"], p, grads, f"{pre}.self_attn", cfg.heads)
        dh = dres + dx + dctx
    grads["query"] += dh.sum(axis=0)
    _linear_back(dmem, cache["X"], p["in_proj.W"], grads, "in_proj.W", "in_proj.b")
    return grads


def forward(tokens, params: Params, cfg: DecoderConfig) -> PredictionSet | list[PredictionSet]:
    """Predict N selection logits and unit semantic embeddings.

    A single grid or (T, C) sequence gives one PredictionSet; batched input
    gives a list.
    """
    single = isinstance(tokens, TokenGrid) or (not isinstance(tokens, (list, tuple)) and np.ndim(tokens) == 2)
    logits, sem, _ = _forward(_as_token_batch(tokens, cfg), params, cfg)
    out = [PredictionSet(logits[b], sem[b]) for b in range(logits.shape[0])]
    return out[0] if single else out


@dataclass
class BatchResult:
    loss: float
    grads: Params
    assignments: list[Assignment]
    transq: float
    contrastive: float


def _batch_objective(logits, sem, targets, assignments, loss_cfg, reduction):
    B = logits.shape[0]
    dlogits = np.zeros(logits.shape)
    dsem = np.zeros(sem.shape)
    transq = 0.0
    T_rows, S_index = [], []
    for b in range(B):
        tgt = targets[b]
        sigma = assignments[b].sigma
        l, dl, ds = transq_loss_grad(tgt, logits[b], sem[b], sigma, loss_cfg)
        transq += l
        dlogits[b] = dl
        dsem[b] = ds
        for i in range(len(tgt)):
            T_rows.append(tgt[i])
            S_index.append((b, sigma[i]))
    scale = 1.0 / B if reduction == "mean" else 1.0
    transq *= scale
    dlogits *= scale
    dsem *= scale
    contrastive = 0.0
    if S_index and loss_cfg.lambda_sc > 0:
        T = np.stack(T_rows)
        bi = np.array([s[0] for s in S_index])
        qi = np.array([s[1] for s in S_index])
        contrastive, dS = semantic_contrastive_loss_grad(T, sem[bi, qi].astype(np.float64), loss_cfg)
        np.add.at(dsem, (bi, qi), loss_cfg.lambda_sc * dS)
    return transq + loss_cfg.lambda_sc * contrastive, transq, contrastive, dlogits, dsem


def _check_targets(targets, cfg):
    out = []
    for t in targets:
        t = np.asarray(t, dtype=np.float64).reshape(-1, cfg.d_embed)
        if t.shape[0] > cfg.N:
            raise ValidationError(f"{t.shape[0]} targets exceed N={cfg.N} queries")
        out.append(t)
    return out


def loss_and_gradients(
    tokens,
    targets: Sequence[np.ndarray],
    params: Params,
    cfg: DecoderConfig,
    loss_cfg: LossConfig,
    reduction: str = "sum",
    assignments: Sequence[Assignment] | None = None,
) -> BatchResult:
    """Total loss over a batch and exact gradients for every parameter.

    ``targets[b]`` holds the (m_b, d_embed) unit text embeddings of example b.
    Assignments are computed from the forward values unless supplied; they
    are treated as constants.
    """
    X = _as_token_batch(tokens, cfg)
    targets = _check_targets(targets, cfg)
    if len(targets) != X.shape[0]:
        raise ValidationError(f"{len(targets)} target sets for a batch of {X.shape[0]}")
    logits, sem, cache = _forward(X, params, cfg)
    for name, arr in (("selection logits", logits), ("semantic embeddings", sem)):
        if not np.all(np.isfinite(arr)):
            bad = next((k for k, v in params.items() if not np.all(np.isfinite(v))), None)
            raise NumericError(f"non-finite {name}" + (f" (parameter {bad} is non-finite)" if bad else ""))
    if assignments is None:
        probs = sigmoid(logits)
        assignments = [match_example(targets[b], probs[b], sem[b], loss_cfg.mu) for b in range(X.shape[0])]
    loss, transq, contrastive, dlogits, dsem = _batch_objective(
        logits.astype(np.float64), sem.astype(np.float64), targets, assignments, loss_cfg, reduction
    )
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    grads = _backward(dlogits.astype(X.dtype), dsem.astype(X.dtype), params, cfg, cache)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
    return BatchResult(loss, grads, list(assignments), transq, contrastive)


def batch_loss(tokens, targets, params, cfg, loss_cfg, reduction="sum", assignments=None) -> float:
    """Forward-only total loss (fixed assignments when given)."""
    X = _as_token_batch(tokens, cfg)
    targets = _check_targets(targets, cfg)
    logits, sem, _ = _forward(X, params, cfg)
    if assignments is None:
        probs = sigmoid(logits)
        assignments = [match_example(targets[b], probs[b], sem[b], loss_cfg.mu) for b in range(X.shape[0])]
    return _batch_objective(
        logits.astype(np.float64), sem.astype(np.float64), targets, assignments, loss_cfg, reduction
    )[0]


def matched_examples(tokens, targets, params, cfg, loss_cfg) -> list[MatchedExample]:
    """Predictions and assignments packaged for the reference loss functions."""
    preds = forward(list(_as_token_batch(tokens, cfg)), params, cfg)
    out = []
    for pred, tgt in zip(preds, _check_targets(targets, cfg)):
        probs = pred.probs
        sem = pred.semantics.astype(np.float64)
        out.append(MatchedExample(tgt, probs, sem, match_example(tgt, probs, sem, loss_cfg.mu)))
    return out


# --- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"RRGCKPT\x00"
CKPT_VERSION = 1


def save_checkpoint(path, params: Params, cfg: DecoderConfig, extra: dict | None = None) -> None:
    """Write the container documented in ``docs/checkpoint_format.md``."""
    entries = []
    offset = 0
    blobs = []
    for name in sorted(params):
        data = np.ascontiguousarray(params[name], dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(params[name].shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"config": asdict(cfg), "tensors": entries, "extra": extra or {}}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[Params, DecoderConfig, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise ValidationError(f"{path}: not a decoder checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
        cfg = DecoderConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: corrupt checkpoint header") from exc
    body = raw[16 + hlen :]
    expected = param_shapes(cfg)
    params = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise ValidationError(f"{path}: tensor {name} has shape {shape}, config expects {expected.get(name)}")
        chunk = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise ValidationError(f"{path}: truncated tensor {name}")
        params[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(cfg.dtype)
    missing = set(expected) - set(params)
    if missing:
        raise ValidationError(f"{path}: missing tensors {sorted(missing)}")
    return params, cfg, header.get("extra", {})
