"""The attention encoder and the edge-score heatmap it produces.

The encoder has no positional encodings, so relabeling the cities permutes
its output rows identically; the heatmap head turns the n x d representation
into an n x n matrix of edge scores bounded by the tanh scale. Both
properties are checked live here on random parameters.

Run:  python demos/03_encoder_and_heatmap.py
"""

import numpy as np

from sinkhorn_tsp import EncoderConfig, count_params, encode_heatmap, generate_instances, init_params, stream

config = EncoderConfig(d=32, layers=2, heads=4, tanh_scale=10.0)
store = init_params(config, stream(42, "init"), np.float64)
print(f"encoder config: d={config.d}, layers={config.layers}, heads={config.heads}")
print(f"parameter count (closed form) : {count_params(config)}")
print(f"parameter count (actual store): {store.n_params}")

inst = generate_instances(1, 8, 3)[0]
heat = encode_heatmap(inst.coords, store, config).value
print(f"\nheatmap shape {heat.shape}, entries bounded by C={config.tanh_scale}:")
print(f"  min {heat.min():.4f}  max {heat.max():.4f}")

perm = np.random.default_rng(0).permutation(8)
heat_perm = encode_heatmap(inst.coords[perm], store, config).value
deviation = np.abs(heat_perm - heat[np.ix_(perm, perm)]).max()
print(f"\npermutation equivariance: relabeling cities conjugates the heatmap")
print(f"  max |heatmap(perm(X)) - perm(heatmap(X))| = {deviation:.2e}")
