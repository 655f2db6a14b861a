"""Turn an n-by-n log-probability matrix into valid tours.

Decoding always starts at city 0 (the canonical city closest to (1,1)),
masks visited cities and self-loops with an additive -1e9, and renormalizes
the current row, so every step is a proper distribution over unvisited
cities. Sampling is used during training, greedy and beam search at test
time. All logprob arithmetic here is float64 regardless of model precision.

Beam pools nest across widths: decode_beam(w) runs the ladder of widths
{1, 2, 4, ..., w} and pools every completed tour plus the greedy one, which
makes the returned length non-increasing in w for power-of-two ladders.
Plain top-w pruning cannot guarantee that (a lower-ranked parent's children
can eject the narrow beam's survivor from the wide beam's pool).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tsp import tour_length

MASK_FILL = -1e9


class DecodeCorruptionError(RuntimeError):
    pass


@dataclass
class Trajectory:
    """A tour starting at city 0 with its accumulated decode log-probability."""

    order: np.ndarray
    logprob: float
    length: float


@dataclass
class DecodeState:
    visited: np.ndarray
    current: int
    logprob: float = 0.0

    @classmethod
    def start(cls, n):
        visited = np.zeros(n, dtype=bool)
        visited[0] = True
        return cls(visited, 0)


def _masked_log_rows(p_logits, currents, visited):
    """Renormalized log-probs of each batch row `currents`, masking visited.

    p_logits is (B, n, n), or (n, n) shared by every batch element.
    currents (B,), visited (B, n) -> (B, n) float64.
    """
    if visited.all(axis=-1).any():
        raise DecodeCorruptionError("no unvisited city left to decode")
    if p_logits.ndim == 2:
        rows = p_logits[currents].astype(np.float64, copy=True)
    else:
        rows = p_logits[np.arange(len(currents)), currents].astype(np.float64, copy=True)
    rows += MASK_FILL * visited
    shifted = rows - rows.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def step_distribution(p_logits, state):
    """Probability vector over cities for the next step; visited entries are 0."""
    logp = _masked_log_rows(
        np.asarray(p_logits)[None], np.array([state.current]), state.visited[None]
    )[0]
    return np.exp(logp)


# ---------------------------------------------------------------------------
# Batched rollouts (training hot path)
# ---------------------------------------------------------------------------

def sample_tours(p_logits, rng):
    """Categorically sample one tour per batch row. Returns (orders, logprobs)."""
    p_logits = np.asarray(p_logits)
    batch, n, _ = p_logits.shape
    orders = np.zeros((batch, n), dtype=np.int64)
    visited = np.zeros((batch, n), dtype=bool)
    visited[:, 0] = True
    currents = np.zeros(batch, dtype=np.int64)
    logprobs = np.zeros(batch)
    rows = np.arange(batch)
    for step in range(1, n):
        logp = _masked_log_rows(p_logits, currents, visited)
        cum = np.exp(logp).cumsum(axis=1)
        targets = rng.random(batch) * cum[:, -1]
        choice = (cum > targets[:, None]).argmax(axis=1)
        logprobs += logp[rows, choice]
        orders[:, step] = choice
        visited[rows, choice] = True
        currents = choice
    return orders, logprobs


def greedy_tours(p_logits):
    """Argmax decode per batch row (ties to the lowest city index)."""
    p_logits = np.asarray(p_logits)
    batch, n, _ = p_logits.shape
    orders = np.zeros((batch, n), dtype=np.int64)
    visited = np.zeros((batch, n), dtype=bool)
    visited[:, 0] = True
    currents = np.zeros(batch, dtype=np.int64)
    logprobs = np.zeros(batch)
    rows = np.arange(batch)
    for step in range(1, n):
        logp = _masked_log_rows(p_logits, currents, visited)
        choice = logp.argmax(axis=1)
        logprobs += logp[rows, choice]
        orders[:, step] = choice
        visited[rows, choice] = True
        currents = choice
    return orders, logprobs


def tour_lengths(coords, orders):
    """Closed-tour lengths for a batch of orders; float64 numpy summation."""
    coords = np.asarray(coords, dtype=np.float64)
    pts = coords[np.arange(len(orders))[:, None], orders]
    edges = np.linalg.norm(pts - np.roll(pts, -1, axis=1), axis=2)
    return edges.sum(axis=1)


def trajectory_logprob(p_logits, order):
    """Recompute a tour's accumulated logprob under the same masking sequence."""
    p_logits = np.asarray(p_logits)
    n = p_logits.shape[-1]
    state = DecodeState.start(n)
    total = 0.0
    for step in range(1, n):
        logp = _masked_log_rows(p_logits[None], np.array([state.current]), state.visited[None])[0]
        city = int(order[step])
        total += logp[city]
        state.visited[city] = True
        state.current = city
    return total


# ---------------------------------------------------------------------------
# Single-instance decoders
# ---------------------------------------------------------------------------

def decode_sample(p_logits, instance, seed):
    """One sampled tour; deterministic given the seed (or Generator)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    orders, logprobs = sample_tours(np.asarray(p_logits)[None], rng)
    return Trajectory(orders[0], float(logprobs[0]), tour_length(instance, orders[0]))


def decode_greedy(p_logits, instance):
    orders, logprobs = greedy_tours(np.asarray(p_logits)[None])
    return Trajectory(orders[0], float(logprobs[0]), tour_length(instance, orders[0]))


def _beam_run(p_logits, width):
    """One standard beam run; returns completed (order, logprob) pairs."""
    n = p_logits.shape[-1]
    start = np.zeros(n, dtype=bool)
    start[0] = True
    beams = [((0,), start, 0.0)]
    for _ in range(1, n):
        currents = np.array([order[-1] for order, _, _ in beams])
        visited = np.stack([vis for _, vis, _ in beams])
        logp = _masked_log_rows(p_logits, currents, visited)
        candidates = []
        for i, (order, vis, lp) in enumerate(beams):
            for city in np.flatnonzero(~vis):
                candidates.append((lp + logp[i, city], order + (int(city),)))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        beams = []
        for lp, order in candidates[:width]:
            vis = np.zeros(n, dtype=bool)
            vis[list(order)] = True
            beams.append((order, vis, lp))
    return [(order, lp) for order, _, lp in beams]


def decode_beam(p_logits, instance, width):
    """Beam search over renormalized step log-probs, shortest tour wins.

    The candidate pool is the union of completed beams over the width ladder
    {1, 2, 4, ..., width} plus the greedy tour, so beam never loses to greedy
    and widening the beam never hurts.
    """
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    p_logits = np.asarray(p_logits, dtype=np.float64)
    ladder = sorted({1 << i for i in range(int(width).bit_length())} - {0} | {int(width)})
    ladder = [w for w in ladder if w <= width]
    pool = {}
    for w in ladder:
        for order, lp in _beam_run(p_logits, w):
            pool[order] = lp
    greedy = decode_greedy(p_logits, instance)
    pool[tuple(int(c) for c in greedy.order)] = greedy.logprob

    orders = list(pool)
    lengths = tour_lengths(
        np.broadcast_to(instance.coords, (len(orders),) + instance.coords.shape),
        np.array(orders),
    )
    best = min(range(len(orders)), key=lambda i: (lengths[i], orders[i]))
    order = np.array(orders[best], dtype=np.int64)
    return Trajectory(order, float(pool[orders[best]]), tour_length(instance, order))
