"""Self-attention encoder over city coordinates and the edge-heatmap head.

The encoder embeds (x, y) coordinates with a learned linear lift, applies
multi-head self-attention blocks (residual connections, optional batch
normalization, optional feed-forward sublayer), and the head turns the final
representations into an n-by-n score matrix P_tanh bounded by the tanh scale.

All forward functions accept a single instance's (n, 2) coordinates or a
stacked (batch, n, 2) array and preserve that rank throughout. There are no
positional encodings: the whole pipeline is permutation-equivariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .tsp import TspInstance


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    tanh_scale: float = 10.0        # C, the heatmap range
    normalization: str = "batch"    # "batch" or "none"
    feed_forward: bool = True

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"encoder.layers >= 1 required, got {self.layers}")
        if self.heads < 1:
            raise ValueError(f"encoder.heads >= 1 required, got {self.heads}")
        if self.d % self.heads != 0:
            raise ValueError(f"encoder.d must be divisible by heads ({self.d} % {self.heads})")
        if not self.tanh_scale > 0:
            raise ValueError(f"encoder.tanh_scale > 0 required, got {self.tanh_scale}")
        if self.normalization not in ("batch", "none"):
            raise ValueError(f"encoder.normalization must be 'batch' or 'none', got {self.normalization!r}")


@dataclass
class HeatmapRaw:
    """tanh-bounded edge scores: every entry lies in (-tanh_scale, +tanh_scale)."""

    p_tanh: ad.Node
    tanh_scale: float

    @property
    def value(self):
        return self.p_tanh.value


def _weight_names(config):
    """(name, shape, fan_in) for every weight matrix, in init order."""
    d, ff = config.d, 4 * config.d
    names = [("embed.w", (2, d), 2)]
    for i in range(config.layers):
        for proj in ("wq", "wk", "wv", "wo"):
            names.append((f"layer{i}.attn.{proj}", (d, d), d))
        if config.feed_forward:
            names.append((f"layer{i}.ff.w1", (d, ff), d))
            names.append((f"layer{i}.ff.w2", (ff, d), ff))
    names.append(("head.wa", (d, d), d))
    names.append(("head.wb", (d, d), d))
    return names


def init_params(config, rng, dtype=np.float32):
    """Fresh ParamStore: weights uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)),
    biases and normalization shifts zero, normalization scales one."""
    store = ad.ParamStore(dtype)
    for name, shape, fan_in in _weight_names(config):
        bound = 1.0 / math.sqrt(fan_in)
        store.add(name, rng.uniform(-bound, bound, size=shape))
    d = config.d
    store.add("embed.b", np.zeros(d))
    for i in range(config.layers):
        if config.feed_forward:
            store.add(f"layer{i}.ff.b1", np.zeros(4 * d))
            store.add(f"layer{i}.ff.b2", np.zeros(d))
        if config.normalization == "batch":
            for site in ("norm1", "norm2"):
                store.add(f"layer{i}.{site}.gamma", np.ones(d))
                store.add(f"layer{i}.{site}.beta", np.zeros(d))
                store.add_buffer(f"layer{i}.{site}.mean", np.zeros(d))
                store.add_buffer(f"layer{i}.{site}.var", np.ones(d))
    return store


def count_params(config):
    """Trainable parameter count as a pure function of the config."""
    d = config.d
    total = 2 * d + d                       # input lift
    per_layer = 4 * d * d                   # attention projections
    if config.feed_forward:
        per_layer += d * 4 * d + 4 * d + 4 * d * d + d
    if config.normalization == "batch":
        per_layer += 4 * d                  # two (gamma, beta) pairs
    total += config.layers * per_layer
    total += 2 * d * d                      # heatmap head
    return total


def _coords_of(instance):
    if isinstance(instance, TspInstance):
        return instance.coords
    return np.asarray(instance)


def embed_input(instance, store):
    """H^0 = coords @ W_in + b_in."""
    coords = ad.constant(_coords_of(instance), dtype=store.dtype)
    return ad.add(ad.matmul(coords, store.node("embed.w")), store.node("embed.b"))


def _norm(x, store, config, site, training):
    if config.normalization == "none":
        return x
    state = ad.BatchNormState(
        store.buffers[f"{site}.mean"], store.buffers[f"{site}.var"]
    )
    return ad.batch_normalize(
        x, store.node(f"{site}.gamma"), store.node(f"{site}.beta"), state, training
    )


def attention_layer(H, store, config, layer, training=False):
    """One encoder block: multi-head attention + optional FF, residuals, norm."""
    d, heads = config.d, config.heads
    dh = d // heads
    prefix = f"layer{layer}"
    q = ad.matmul(H, store.node(f"{prefix}.attn.wq"))
    k = ad.matmul(H, store.node(f"{prefix}.attn.wk"))
    v = ad.matmul(H, store.node(f"{prefix}.attn.wv"))
    wo = store.node(f"{prefix}.attn.wo")

    mixed = None
    for h in range(heads):
        cols = np.arange(h * dh, (h + 1) * dh)
        qh = ad.gather_rows(q, cols, axis=-1)
        kh = ad.gather_rows(k, cols, axis=-1)
        vh = ad.gather_rows(v, cols, axis=-1)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh))
        if np.isnan(scores.value).any():
            raise ad.DomainError(f"attention layer {layer}, head {h}: NaN scores")
        attended = ad.matmul(ad.softmax_rows(scores), vh)
        # concat over heads then W_O == sum over heads of A_h @ W_O[rows of h]
        out_h = ad.matmul(attended, ad.gather_rows(wo, cols, axis=-2))
        mixed = out_h if mixed is None else ad.add(mixed, out_h)

    x = _norm(ad.add(H, mixed), store, config, f"{prefix}.norm1", training)
    if not config.feed_forward:
        return x
    hidden = ad.relu(ad.add(ad.matmul(x, store.node(f"{prefix}.ff.w1")), store.node(f"{prefix}.ff.b1")))
    ff = ad.add(ad.matmul(hidden, store.node(f"{prefix}.ff.w2")), store.node(f"{prefix}.ff.b2"))
    return _norm(ad.add(x, ff), store, config, f"{prefix}.norm2", training)


def encode(instance, store, config, training=False):
    """Full encoder stack: (n, d) node, or (batch, n, d) for stacked input."""
    H = embed_input(instance, store)
    for layer in range(config.layers):
        H = attention_layer(H, store, config, layer, training)
    return H


def heatmap_head(H, store, config):
    """A = H W_A^T, B = H W_B^T, M = A B^T / sqrt(d), P_tanh = tanh(M) * C."""
    a = ad.matmul(H, ad.transpose(store.node("head.wa")))
    b = ad.matmul(H, ad.transpose(store.node("head.wb")))
    m = ad.scale(ad.matmul(a, ad.transpose(b)), 1.0 / math.sqrt(config.d))
    p_tanh = ad.scale(ad.tanh(m), config.tanh_scale)
    return HeatmapRaw(p_tanh, config.tanh_scale)


def encode_heatmap(instance, store, config, training=False):
    return heatmap_head(encode(instance, store, config, training), store, config)
