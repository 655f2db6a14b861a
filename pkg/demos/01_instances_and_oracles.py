"""Generating instances, canonical ordering, and the exact oracle.

Every instance lives in the unit square and is stored sorted by x+y
descending, so city 0 is always the one nearest the top-right corner: that
is the fixed start city for every decode. For n <= 16 the Held-Karp solver
gives the true optimum, which is what every gap in this project is measured
against.

Run:  python demos/01_instances_and_oracles.py
"""

import numpy as np

from sinkhorn_tsp import generate_instances, nearest_neighbor, solve_exact, tour_length

instances = generate_instances(count=5, n=10, seed=7)

print("canonical ordering: x+y is non-increasing, city 0 is closest to (1,1)")
first = instances[0]
print("  coords[:3] =", np.round(first.coords[:3], 3).tolist())
print("  x+y        =", np.round(first.coords.sum(axis=1), 3).tolist())

print("\nexact optimum vs nearest-neighbor baseline:")
for i, inst in enumerate(instances):
    best = solve_exact(inst)
    greedy = nearest_neighbor(inst, start=0)
    print(
        f"  instance {i}: optimal {best.length:.4f}   nearest-neighbor {greedy.length:.4f}"
        f"   (+{(greedy.length / best.length - 1) * 100:.1f}%)"
    )

inst = instances[0]
best = solve_exact(inst)
print("\noptimal order for instance 0:", list(best.order))
print("recomputed length matches:", abs(tour_length(inst, best.order) - best.length) < 1e-12)
