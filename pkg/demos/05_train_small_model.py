"""Train a small model end to end and watch the gap close.

This is a scaled-down run (TSP8, a few epochs, ~1 minute on a laptop) of the
same loop the desk_tsp10 preset uses: REINFORCE with a greedy-rollout
baseline that is replaced only when the policy beats it on a fresh
validation set. For the full desk-scale run use the CLI:

    sinkhorn-tsp train --config configs/desk_tsp10.toml -o runs/desk

Run:  python demos/05_train_small_model.py
"""

import numpy as np

from sinkhorn_tsp import EncoderConfig, SinkhornConfig, TrainConfig, generate_instances, solve_exact, train
from sinkhorn_tsp.search import greedy_tours, tour_lengths
from sinkhorn_tsp.training import heatmap_logits

config = TrainConfig(
    n=8,
    epochs=6,
    batches_per_epoch=40,
    batch_size=64,
    baseline_val_size=256,
    decoder="sinkhorn",
    sinkhorn=SinkhornConfig(lam=2.0, iterations=1),
    encoder=EncoderConfig(d=32, layers=2, heads=4),
    seed=3,
)

held = generate_instances(200, config.n, seed=999)
coords = np.stack([inst.coords for inst in held])
oracle = np.array([solve_exact(inst).length for inst in held])


def greedy_gap(policy):
    logits = heatmap_logits(coords, policy, config, training=False)
    orders, _ = greedy_tours(logits.p_logits.value)
    return (tour_lengths(coords, orders).mean() / oracle.mean() - 1) * 100


print(f"training TSP{config.n}: {config.epochs} epochs x {config.batches_per_epoch} batches x {config.batch_size}")
result = train(
    config,
    log=lambda r: print(
        f"  epoch {r['epoch']}: sampled {r['mean_sampled_length']:.4f}  "
        f"val-greedy {r['mean_greedy_val_length']:.4f}  baseline updated: {r['baseline_updated']}"
    ),
)
print(f"\ngreedy optimality gap on 200 held instances: {greedy_gap(result.policy):.2f}%")
