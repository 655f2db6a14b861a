"""TSP instances, tours, exact oracles, and file persistence.

Instances live in the unit square and are stored in canonical order:
non-increasing by x+y (ties: non-increasing x, then original index), so that
index 0 is always the city closest to the top-right corner and decoding can
fix it as the start city. All operations here are pure.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .rng import stream

HELD_KARP_MAX_CITIES = 16


class InvalidInstanceError(ValueError):
    pass


class InvalidTourError(ValueError):
    pass


class InstanceTooLargeError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class TspInstance:
    """n cities in [0,1]^2, canonically ordered. coords is (n, 2) float64."""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        object.__setattr__(self, "coords", coords)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise InvalidInstanceError(f"coords must be (n, 2), got {coords.shape}")
        if coords.shape[0] < 3:
            raise InvalidInstanceError(f"need at least 3 cities, got {coords.shape[0]}")
        if np.any(coords < 0.0) or np.any(coords > 1.0):
            raise InvalidInstanceError("coordinates must lie in [0, 1]")

    @property
    def n(self):
        return self.coords.shape[0]


@dataclass(frozen=True)
class Tour:
    """A closed tour: a permutation of {0..n-1} and its Euclidean length."""

    order: tuple
    length: float


def canonical_order(coords):
    """Sort indices: non-increasing x+y, ties non-increasing x, then stable."""
    coords = np.asarray(coords, dtype=np.float64)
    return np.lexsort((-coords[:, 0], -(coords[:, 0] + coords[:, 1])))


def canonicalize(coords):
    coords = np.asarray(coords, dtype=np.float64)
    return coords[canonical_order(coords)]


def generate_instances(count, n, seed):
    """count instances of n uniform cities, canonicalized. Deterministic."""
    if n < 3:
        raise InvalidInstanceError(f"need at least 3 cities, got {n}")
    rng = stream(seed, "instances", count, n)
    raw = rng.random((count, n, 2))
    return [TspInstance(canonicalize(c)) for c in raw]


def instances_to_array(instances):
    """Stack equally sized instances into a (count, n, 2) coordinate array."""
    sizes = {inst.n for inst in instances}
    if len(sizes) > 1:
        raise InvalidInstanceError(f"mixed instance sizes {sorted(sizes)}")
    return np.stack([inst.coords for inst in instances])


def _check_permutation(n, order):
    order = np.asarray(order, dtype=np.int64)
    if order.shape != (n,) or not np.array_equal(np.sort(order), np.arange(n)):
        raise InvalidTourError(f"order is not a permutation of 0..{n - 1}: {order.tolist()}")
    return order


def tour_length(instance, order):
    """Closed-cycle Euclidean length, correctly rounded via fsum.

    fsum makes the result independent of rotation/reversal of `order` (same
    multiset of edges) and keeps closed-form cases exact.
    """
    order = _check_permutation(instance.n, order)
    coords = instance.coords
    n = instance.n
    return math.fsum(
        math.dist(coords[order[i]], coords[order[(i + 1) % n]]) for i in range(n)
    )


def distance_matrix(coords):
    coords = np.asarray(coords, dtype=np.float64)
    delta = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((delta * delta).sum(axis=-1))


def solve_exact(instance):
    """Exact minimum tour by Held-Karp dynamic programming (n <= 16).

    g[mask, j] = shortest path that starts at j (already visited set = mask,
    which contains 0 and j), visits every city outside mask, and returns to
    city 0. Reconstruction walks forward choosing the smallest next city that
    attains the optimum, which yields the lexicographically smallest optimal
    order starting at city 0.
    """
    n = instance.n
    if n > HELD_KARP_MAX_CITIES:
        raise InstanceTooLargeError(
            f"Held-Karp oracle is limited to n <= {HELD_KARP_MAX_CITIES} (got {n}); "
            "use nearest_neighbor or a reference tour file for larger instances"
        )
    D = distance_matrix(instance.coords)
    size = 1 << n
    g = np.full((size, n), np.inf)
    full = size - 1
    g[full, :] = D[:, 0]

    masks = np.arange(size)
    masks = masks[(masks & 1) == 1]  # only masks containing city 0
    popcount = np.array([int(m).bit_count() for m in masks])
    for mask in masks[np.argsort(-popcount, kind="stable")]:
        if mask == full:
            continue
        outside = [k for k in range(n) if not (mask >> k) & 1]
        completions = np.array([g[mask | (1 << k), k] for k in outside])
        g[mask, :] = (D[:, outside] + completions[None, :]).min(axis=1)

    order = [0]
    mask, current = 1, 0
    for _ in range(n - 1):
        outside = [k for k in range(n) if not (mask >> k) & 1]
        values = [D[current, k] + g[mask | (1 << k), k] for k in outside]
        current = outside[int(np.argmin(values))]
        order.append(current)
        mask |= 1 << current
    order = tuple(order)
    # A cycle has two representations starting at 0; return the lex-smaller.
    order = min(order, order[:1] + order[:0:-1])
    return Tour(order, tour_length(instance, order))


def nearest_neighbor(instance, start=0):
    """Greedy nearest-unvisited construction from `start`."""
    n = instance.n
    if not 0 <= start < n:
        raise InvalidTourError(f"start index {start} out of range for n={n}")
    D = distance_matrix(instance.coords)
    visited = np.zeros(n, dtype=bool)
    order = [start]
    visited[start] = True
    current = start
    for _ in range(n - 1):
        dists = np.where(visited, np.inf, D[current])
        current = int(np.argmin(dists))
        order.append(current)
        visited[current] = True
    order = tuple(order)
    return Tour(order, tour_length(instance, order))


# ---------------------------------------------------------------------------
# Persistence: one JSON object per line, floats at 17 significant digits
# ---------------------------------------------------------------------------

def _fmt(x):
    return format(float(x), ".17g")


def write_instances(path, instances):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            coords = ",".join(f"[{_fmt(x)},{_fmt(y)}]" for x, y in inst.coords)
            fh.write('{"n": %d, "coords": [%s]}\n' % (inst.n, coords))


def read_instances(path):
    instances = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                n, coords = record["n"], record["coords"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(path, line_no, f"bad instance record: {exc}") from None
            if len(coords) != n:
                raise ParseError(path, line_no, f"n={n} but {len(coords)} coordinates")
            try:
                instances.append(TspInstance(np.asarray(coords, dtype=np.float64)))
            except (InvalidInstanceError, ValueError) as exc:
                raise ParseError(path, line_no, str(exc)) from None
    return instances


def write_tours(path, tours):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tour in tours:
            order = ",".join(str(int(i)) for i in tour.order)
            fh.write('{"order": [%s], "length": %s}\n' % (order, _fmt(tour.length)))


def read_tours(path):
    tours = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                order = tuple(int(i) for i in record["order"])
                length = float(record["length"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(path, line_no, f"bad tour record: {exc}") from None
            tours.append(Tour(order, length))
    return tours
