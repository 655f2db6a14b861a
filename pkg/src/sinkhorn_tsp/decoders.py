"""Turn raw edge scores into per-row log-probability matrices.

Two decoders: a row-wise softmax, and an entropic optimal-transport scaling
layer (Sinkhorn) that additionally drives column sums toward 1, pushing the
heatmap toward a bi-stochastic assignment-like matrix. Both are built from
differentiation-engine ops, so gradients flow through the unrolled iterations
during end-to-end training.

Sign convention: the Sinkhorn kernel is K = exp(-lam * P_tanh), so P_tanh
acts as a cost (low means desirable edge). The model learns the sign.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import HeatmapRaw


@dataclass(frozen=True)
class SinkhornConfig:
    lam: float = 2.0        # entropic regularization strength (TOML key: lambda)
    iterations: int = 1
    eps: float = 1e-30      # floor inside divisions and before log
    log_domain: bool = False

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"sinkhorn: lambda > 0 required, got {self.lam}")
        if self.iterations < 1:
            raise ValueError(f"sinkhorn: iterations >= 1 required, got {self.iterations}")
        if not 0 < self.eps <= 1e-6:
            raise ValueError(f"sinkhorn: epsilon must be in (0, 1e-6], got {self.eps}")


@dataclass
class HeatmapLogits:
    """Row-stochastic probabilities P and their logs, as graph nodes.

    floored counts entries clamped to the epsilon floor during the call
    (the numerical-warning counter; always 0 for the softmax decoder).
    """

    p_logits: ad.Node
    p: ad.Node
    floored: int = 0


def _as_node(p_tanh):
    return p_tanh.p_tanh if isinstance(p_tanh, HeatmapRaw) else p_tanh


def softmax_decode(p_tanh):
    """Row softmax; log-probabilities computed stably via a detached row max."""
    x = _as_node(p_tanh)
    shift = ad.sub(x, ad.constant(x.value.max(axis=-1, keepdims=True)))
    e = ad.exp(shift)
    logits = ad.sub(shift, ad.log(ad.reduce_sum(e, axis=-1, keepdims=True)))
    return HeatmapLogits(logits, ad.exp(logits))


def _lse(x, axis=-1):
    """log-sum-exp along axis with keepdims, exact gradient via detached shift."""
    m = ad.constant(x.value.max(axis=axis, keepdims=True))
    return ad.add(ad.log(ad.reduce_sum(ad.exp(ad.sub(x, m)), axis=axis, keepdims=True)), m)


def sinkhorn_decode(p_tanh, cfg=SinkhornConfig(), mask_diagonal_first=False):
    """Alternating row/column scaling toward a bi-stochastic matrix.

    K = exp(-lam * P_tanh); u, v start at 1/n; each iteration updates
    v = 1/(K^T u) then u = 1/(K v). Ending on the u update makes every row of
    P = diag(u) K diag(v) sum to exactly 1 up to rounding, which is what the
    rollout consumes; column sums converge toward 1 as iterations grow.

    Intermediates below cfg.eps are floored (counted in the result). The
    log-domain variant trades the literal updates for log-sum-exp and is the
    right choice when lam * tanh_scale is large enough to overflow exp.
    """
    x = _as_node(p_tanh)
    if mask_diagonal_first:
        n = x.value.shape[-1]
        # +1e9 on the diagonal cost sends those kernel entries to zero
        x = ad.masked_fill(x, np.eye(n, dtype=bool), 1e9, mode="additive")
    if cfg.log_domain:
        return _sinkhorn_log_domain(x, cfg)

    dtype = x.value.dtype
    n = x.value.shape[-1]
    ones_col = ad.constant(np.ones(x.value.shape[:-2] + (n, 1)), dtype=dtype)
    floored = 0

    def floor(node):
        nonlocal floored
        mask = node.value < cfg.eps
        if mask.any():
            floored += int(mask.sum())
            return ad.masked_fill(node, mask, cfg.eps, mode="replace")
        return node

    K = ad.exp(ad.scale(x, -cfg.lam))
    u = ad.scale(ones_col, 1.0 / n)
    v = ad.scale(ones_col, 1.0 / n)
    for _ in range(cfg.iterations):
        v = ad.div(ones_col, floor(ad.matmul(ad.transpose(K), u)))
        u = ad.div(ones_col, floor(ad.matmul(K, v)))
    p = ad.mul(ad.mul(u, K), ad.transpose(v))
    if np.isnan(p.value).any():
        raise ad.DomainError("sinkhorn: NaN in transport plan")
    logits = ad.log(floor(p))
    return HeatmapLogits(logits, p, floored)


def _sinkhorn_log_domain(x, cfg):
    log_k = ad.scale(x, -cfg.lam)
    n = x.value.shape[-1]
    dtype = x.value.dtype
    log_init = ad.constant(np.full(x.value.shape[:-2] + (n, 1), -math.log(n)), dtype=dtype)
    log_u = log_init
    for _ in range(cfg.iterations):
        log_v = ad.scale(_lse(ad.add(ad.transpose(log_k), ad.transpose(log_u)), axis=-1), -1.0)
        log_u = ad.scale(_lse(ad.add(log_k, ad.transpose(log_v)), axis=-1), -1.0)
    logits = ad.add(ad.add(log_u, log_k), ad.transpose(log_v))
    if np.isnan(logits.value).any():
        raise ad.DomainError("sinkhorn (log domain): NaN in transport plan")
    return HeatmapLogits(logits, ad.exp(logits))


def transport_entropy(p):
    """h = -sum p log p with 0 log 0 := 0. Diagnostic only."""
    values = p.value if isinstance(p, ad.Node) else np.asarray(p, dtype=np.float64)
    if np.any(values < 0):
        raise ValueError("transport_entropy: negative entry")
    positive = values[values > 0]
    return float(-(positive * np.log(positive)).sum())


def dump_heatmap(p, path, mask_diagonal=False):
    """CSV dump, 9 significant digits; masked diagonal cells become empty."""
    values = p.value if isinstance(p, ad.Node) else np.asarray(p)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, row in enumerate(values):
            cells = [format(float(x), ".9g") for x in row]
            if mask_diagonal:
                cells[i] = ""
            fh.write(",".join(cells) + "\n")
