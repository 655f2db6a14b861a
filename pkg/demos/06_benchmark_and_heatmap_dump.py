"""Benchmark a trained model and export a heatmap for plotting.

Trains a small model, saves a checkpoint, runs the gap report for greedy and
beam search, and dumps the decoded probability heatmap of one instance as a
CSV (diagonal masked, the way one would plot it).

Run:  python demos/06_benchmark_and_heatmap_dump.py
"""

import tempfile
from pathlib import Path

from sinkhorn_tsp import (
    EncoderConfig,
    SearchSpec,
    SinkhornConfig,
    TrainConfig,
    dump_heatmap,
    generate_instances,
    run_benchmark,
    train,
    write_instances,
)
from sinkhorn_tsp.training import (
    checkpoint_from_store,
    heatmap_logits,
    load_checkpoint,
    save_checkpoint,
    store_from_checkpoint,
)

config = TrainConfig(
    n=8, epochs=4, batches_per_epoch=30, batch_size=64, baseline_val_size=128,
    encoder=EncoderConfig(d=32, layers=2, heads=4),
    sinkhorn=SinkhornConfig(lam=2.0, iterations=1),
    seed=4,
)
print("training a small model...")
result = train(config)

workdir = Path(tempfile.mkdtemp(prefix="sinkhorn_tsp_demo_"))
ckpt_path = workdir / "model.ckpt"
save_checkpoint(ckpt_path, checkpoint_from_store(config, config.epochs - 1, result.policy))
instances = generate_instances(100, config.n, seed=2024)
inst_path = workdir / "eval.tspjl"
write_instances(inst_path, instances)

for spec in (SearchSpec("greedy"), SearchSpec("beam", width=32)):
    report = run_benchmark(ckpt_path, inst_path, spec)
    print(
        f"{spec.describe():>9}: mean length {report.model_mean_length:.4f} "
        f"vs optimal {report.oracle_mean_length:.4f}  gap {report.gap_percent:.2f}%  "
        f"({report.seconds_per_instance * 1e3:.1f} ms/instance)"
    )

store = store_from_checkpoint(load_checkpoint(ckpt_path))
probs = heatmap_logits(instances[0].coords, store, config, training=False).p.value
heat_path = workdir / "heatmap.csv"
dump_heatmap(probs, heat_path, mask_diagonal=True)
print(f"\ndecoded probability heatmap of instance 0 -> {heat_path}")
print("first row:", heat_path.read_text().splitlines()[0])
