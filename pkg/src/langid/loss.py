"""Class-weighted cross-entropy and additive angular margin losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .manifest import UtteranceRecord
from .nn.layers import l2_normalize, l2_normalize_backward


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def compute_class_weights(records: Iterable[UtteranceRecord],
                          labels: Sequence[str] = ("en", "zh")) -> dict[str, float]:
    """Per-class weight N / N_x over the given label set."""
    counts = {lab: 0 for lab in labels}
    n = 0
    for r in records:
        if r.label not in counts:
            raise ValueError(f"unknown label {r.label!r}")
        counts[r.label] += 1
        n += 1
    if n == 0:
        raise ValueError("empty manifest")
    missing = [lab for lab, c in counts.items() if c == 0]
    if missing:
        raise ValueError(f"class absent: {', '.join(missing)}")
    return {lab: n / c for lab, c in counts.items()}


def weight_vector(weights: dict[str, float] | None, labels: Sequence[str]) -> np.ndarray:
    if weights is None:
        return np.ones(len(labels))
    w = np.array([weights[lab] for lab in labels], dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("class weights must be positive")
    return w


def weighted_ce(logits, targets, class_weights=None):
    """Weight-normalized cross-entropy and its gradient w.r.t. logits.

    ``targets`` are class indices; ``class_weights`` is a per-class vector
    (None for equal weights). Loss is sum_i w_yi * nll_i / sum_i w_yi.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    K = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= K):
        raise ValueError("target index out of range")
    w = np.ones(K) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    ws = w[targets]
    logp = log_softmax(logits)
    idx = np.arange(len(targets))
    total = ws.sum()
    loss = float(-(ws * logp[idx, targets]).sum() / total)
    grad = np.exp(logp)
    grad[idx, targets] -= 1.0
    grad *= (ws / total)[:, None]
    return loss, grad


@dataclass(frozen=True)
class AAMConfig:
    scale: float = 30.0
    margin: float = 0.01

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("AAM scale must be positive")
        if not 0 <= self.margin < math.pi / 2:
            raise ValueError("AAM margin must lie in [0, pi/2)")


# floor on sin(theta) in the margin derivative; d cos(theta + m) / d cos(theta)
# is unbounded at theta = 0
_SIN_FLOOR = 1e-7


def aam_logits(embeddings, class_vectors, targets, cfg: AAMConfig):
    """Margin-adjusted scaled cosine logits and the pieces needed for backward."""
    u, un = l2_normalize(np.asarray(embeddings, dtype=np.float64))
    V, vn = l2_normalize(np.asarray(class_vectors, dtype=np.float64))
    if np.any(un == 0) or np.any(vn == 0):
        raise ValueError("zero-norm embedding or class vector")
    cos = np.clip(u @ V.T, -1.0, 1.0)
    idx = np.arange(len(targets))
    ct = cos[idx, targets]
    sin = np.sqrt(np.clip(1.0 - ct * ct, 0.0, 1.0))
    m = cfg.margin
    # cos(theta + m) while theta + m <= pi, else the linear continuation
    inside = ct >= math.cos(math.pi - m)
    phi = np.where(inside, ct * math.cos(m) - sin * math.sin(m), ct - m * math.sin(m))
    dphi = np.where(inside, math.cos(m) + math.sin(m) * ct / np.maximum(sin, _SIN_FLOOR), 1.0)
    adj = cos.copy()
    adj[idx, targets] = phi
    return cfg.scale * adj, (u, un, V, vn, dphi, idx)


def aam_loss(embeddings, targets, class_vectors, cfg: AAMConfig = AAMConfig()):
    """Return (loss, d embeddings, d class_vectors)."""
    targets = np.asarray(targets)
    logits, (u, un, V, vn, dphi, idx) = aam_logits(embeddings, class_vectors, targets, cfg)
    loss, dlog = weighted_ce(logits, targets)
    dcos = cfg.scale * dlog
    dcos[idx, targets] *= dphi
    du = dcos @ V
    dV = dcos.T @ u
    return loss, l2_normalize_backward(du, u, un), l2_normalize_backward(dV, V, vn)
