"""From a probability heatmap to valid tours.

Decoding always starts at city 0, masks visited cities, renormalizes the
current row, and walks until the tour closes. Sampling explores (training),
greedy exploits, and beam search keeps the best partial tours by accumulated
log-probability, returning the shortest completed tour it saw. Greedy is
always in the beam's candidate pool, so beam never loses to it, and the
nested width ladder makes wider beams never worse.

Run:  python demos/04_decoding_and_search.py
"""

import numpy as np

from sinkhorn_tsp import (
    decode_beam,
    decode_greedy,
    decode_sample,
    generate_instances,
    solve_exact,
    step_distribution,
    trajectory_logprob,
)
from sinkhorn_tsp.search import DecodeState

inst = generate_instances(1, 8, 11)[0]
rng = np.random.default_rng(5)
logits = np.log(rng.dirichlet(np.ones(8), size=8))  # a made-up policy heatmap

state = DecodeState.start(8)
print("step 0 distribution from city 0 (city 0 itself is masked):")
print(" ", np.round(step_distribution(logits, state), 3))

samples = [decode_sample(logits, inst, seed) for seed in range(5)]
print("\nfive sampled tours (same heatmap, different seeds):")
for t in samples:
    print(f"  {list(t.order)}  length {t.length:.4f}  logprob {t.logprob:.3f}")

greedy = decode_greedy(logits, inst)
print(f"\ngreedy tour : {list(greedy.order)}  length {greedy.length:.4f}")
print("logprob recompute matches:", abs(trajectory_logprob(logits, greedy.order) - greedy.logprob) < 1e-9)

optimal = solve_exact(inst).length
print(f"\nbeam search vs width (optimal = {optimal:.4f}):")
for width in (1, 4, 16, 64, 256):
    t = decode_beam(logits, inst, width)
    print(f"  width {width:>4}: length {t.length:.4f}")
