"""REINFORCE training with a greedy-rollout baseline, plus checkpoints.

One batch: sample tours from the policy's heatmap, decode the frozen
baseline greedily on the same instances, and minimize
mean((L(sampled) - L(baseline_greedy)) * logprob(sampled)); backward of that
surrogate is the policy-gradient estimator. The baseline is replaced by the
policy at an epoch boundary only when the policy's mean greedy validation
length improves on the baseline's by more than the configured threshold.

Checkpoint files are a self-describing little-endian binary: magic "STSP",
format version u32, metadata-length u32, metadata JSON, then per tensor a
u16 name length, the name bytes, a u8 rank, u32 dims, and raw IEEE-754
values. Parameters, batch-norm running statistics, and Adam moments are all
stored, so save -> load -> save is byte-identical and training resumes
exactly.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import TrainConfig, config_to_dict, load_config
from .decoders import sinkhorn_decode, softmax_decode, dump_heatmap
from .model import encode_heatmap, init_params
from .rng import stream
from .search import MASK_FILL, greedy_tours, sample_tours, tour_lengths
from .tsp import TspInstance, instances_to_array, write_instances

CHECKPOINT_MAGIC = b"STSP"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


def canonicalize_batch(coords):
    """Canonical city order applied to every instance of a (B, n, 2) array."""
    keys_primary = -(coords[..., 0] + coords[..., 1])
    order = np.lexsort((-coords[..., 0], keys_primary), axis=-1)
    return np.take_along_axis(coords, order[..., None], axis=-2)


def heatmap_logits(coords, store, config, training=False):
    """Full forward pass: encoder -> heatmap head -> configured decoder."""
    raw = encode_heatmap(coords, store, config.encoder, training=training)
    if config.decoder == "softmax":
        return softmax_decode(raw)
    return sinkhorn_decode(raw, config.sinkhorn, mask_diagonal_first=config.mask_before_sinkhorn)


def replay_logprob(p_logits, orders):
    """Accumulated log-probability of fixed tours, as a differentiable node.

    Rebuilds the decode-time masking and renormalization step by step, so its
    value matches the sampler's logprob and its gradient is d logprob / d
    heatmap. orders is (B, n) with column 0 all zeros.
    """
    values = p_logits.value
    batch, n, _ = values.shape
    dtype = values.dtype
    visited = np.zeros((batch, n), dtype=bool)
    visited[:, 0] = True
    currents = np.zeros(batch, dtype=np.int64)
    rows = np.arange(batch)
    total = None
    for step in range(1, n):
        row = ad.gather_rows(p_logits, currents, per_batch=True)
        masked = ad.masked_fill(row, visited, MASK_FILL, mode="additive")
        shift = ad.sub(masked, ad.constant(masked.value.max(axis=-1, keepdims=True)))
        logp = ad.sub(shift, ad.log(ad.reduce_sum(ad.exp(shift), axis=-1, keepdims=True)))
        chosen = orders[:, step]
        onehot = np.zeros((batch, n), dtype=dtype)
        onehot[rows, chosen] = 1
        step_lp = ad.reduce_sum(ad.mul(logp, ad.constant(onehot)), axis=-1)
        total = step_lp if total is None else ad.add(total, step_lp)
        visited[rows, chosen] = True
        currents = chosen
    return total


def surrogate_loss(p_logits, orders, advantages):
    """mean(advantage * logprob): backward gives the REINFORCE estimator."""
    logprob = replay_logprob(p_logits, orders)
    adv = ad.constant(np.asarray(advantages), dtype=p_logits.value.dtype)
    return ad.reduce_mean(ad.mul(adv, logprob))


@dataclass
class BatchStats:
    mean_sampled_length: float
    mean_baseline_length: float
    mean_advantage: float


def reinforce_batch_loss(policy, baseline, instances, config, rng):
    """Scalar surrogate-loss node for one batch, plus rollout statistics.

    The baseline's greedy lengths enter only as detached constants, so
    backward touches policy parameters exclusively.
    """
    coords = instances if isinstance(instances, np.ndarray) else instances_to_array(instances)
    logits = heatmap_logits(coords, policy, config, training=True)
    if np.isnan(logits.p_logits.value).any():
        raise ad.DomainError("reinforce: NaN in policy heatmap")
    orders, _ = sample_tours(logits.p_logits.value, rng)
    sampled_len = tour_lengths(coords, orders)

    base_logits = heatmap_logits(coords, baseline, config, training=False)
    base_orders, _ = greedy_tours(base_logits.p_logits.value)
    baseline_len = tour_lengths(coords, base_orders)

    advantages = sampled_len - baseline_len
    loss = surrogate_loss(logits.p_logits, orders, advantages)
    stats = BatchStats(
        float(sampled_len.mean()), float(baseline_len.mean()), float(advantages.mean())
    )
    return loss, stats


def clip_gradients(store, clip_norm):
    """Scale all gradients so their global L2 norm is at most clip_norm.

    Returns the norm found before clipping.
    """
    total = 0.0
    for entry in store.entries.values():
        g = entry.grad.astype(np.float64, copy=False)
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > clip_norm:
        factor = clip_norm / norm
        for entry in store.entries.values():
            entry.grad[...] = entry.grad * factor
    return norm


def adam_step(store, lr, betas=(0.9, 0.999), eps=1e-8, clip_norm=1.0):
    """Global-norm gradient clip, bias-corrected Adam update, zero gradients."""
    if clip_norm is not None:
        clip_gradients(store, clip_norm)
    store.step += 1
    beta1, beta2 = betas
    correct1 = 1.0 - beta1 ** store.step
    correct2 = 1.0 - beta2 ** store.step
    for entry in store.entries.values():
        g = entry.grad
        entry.m[...] = beta1 * entry.m + (1.0 - beta1) * g
        entry.v[...] = beta2 * entry.v + (1.0 - beta2) * (g * g)
        m_hat = entry.m / correct1
        v_hat = entry.v / correct2
        entry.value[...] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    store.zero_grad()


def greedy_validation_lengths(coords, store, config):
    logits = heatmap_logits(coords, store, config, training=False)
    orders, _ = greedy_tours(logits.p_logits.value)
    return tour_lengths(coords, orders)


def maybe_update_baseline(policy, baseline, val_coords, config):
    """Copy policy into baseline iff its mean greedy length improves by > threshold."""
    policy_mean = float(greedy_validation_lengths(val_coords, policy, config).mean())
    baseline_mean = float(greedy_validation_lengths(val_coords, baseline, config).mean())
    if policy_mean < baseline_mean - config.baseline_threshold:
        baseline.copy_from(policy)
        return True
    return False


@dataclass
class TrainResult:
    config: TrainConfig
    policy: ad.ParamStore
    baseline: ad.ParamStore
    metrics: list = field(default_factory=list)
    checkpoint_paths: list = field(default_factory=list)
    interrupted: bool = False


def _generate_coords(rng, count, n):
    return canonicalize_batch(rng.random((count, n, 2)))


def _nan_dump(directory, coords, heat_values, batch_index):
    """Persist the offending batch for post-mortem before aborting."""
    directory.mkdir(parents=True, exist_ok=True)
    bad = np.isnan(heat_values).any(axis=tuple(range(1, heat_values.ndim)))
    index = int(np.argmax(bad)) if bad.any() else 0
    inst_path = directory / f"nan_batch{batch_index}_instance.tspjl"
    heat_path = directory / f"nan_batch{batch_index}_heatmap.csv"
    write_instances(inst_path, [TspInstance(coords[index])])
    dump_heatmap(heat_values[index], heat_path)
    return inst_path, heat_path


def train(config, run_dir=None, should_stop=None, log=None):
    """Run the full epoch loop; returns final stores and the metrics records.

    Per epoch: batches_per_epoch REINFORCE steps on freshly generated
    instances, then a baseline-update decision on a fresh validation set, a
    metrics record, and (when run_dir is given) a checkpoint. Fully
    deterministic given the config seed, except the wall_time_s field.
    """
    dtype = config.dtype
    policy = init_params(config.encoder, stream(config.seed, "init"), dtype)
    baseline = policy.clone()
    metrics = []
    result = TrainResult(config, policy, baseline, metrics)
    metrics_fh = open(run_dir.metrics_path, "a", encoding="utf-8") if run_dir else None

    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            instance_rng = stream(config.seed, "train-instances", epoch)
            sample_rng = stream(config.seed, "sample", epoch)
            baseline_hash = policy_hash = None
            if config.debug_hash_checks:
                baseline_hash = baseline.state_hash()
            sampled_means, losses = [], []
            interrupted = False
            for batch_index in range(config.batches_per_epoch):
                if should_stop is not None and should_stop():
                    interrupted = True
                    break
                coords = _generate_coords(instance_rng, config.batch_size, config.n)
                if config.debug_hash_checks:
                    policy_hash = policy.state_hash(include_buffers=False)
                try:
                    loss, stats = reinforce_batch_loss(policy, baseline, coords, config, sample_rng)
                except ad.DomainError:
                    logits = encode_heatmap(coords, policy, config.encoder, training=False)
                    where = run_dir.path if run_dir else Path(".")
                    paths = _nan_dump(where, coords, logits.value, batch_index)
                    raise RuntimeError(
                        f"NaN loss at epoch {epoch} batch {batch_index}; "
                        f"diagnostics in {paths[0]} and {paths[1]}; "
                        f"last good checkpoint: {result.checkpoint_paths[-1] if result.checkpoint_paths else 'none'}"
                    ) from None
                ad.backward(loss)
                if config.debug_hash_checks:
                    assert policy.state_hash(include_buffers=False) == policy_hash, \
                        "parameters mutated outside adam_step"
                    assert baseline.state_hash() == baseline_hash, \
                        "baseline mutated between update decisions"
                adam_step(
                    policy,
                    config.learning_rate,
                    (config.adam_beta1, config.adam_beta2),
                    config.adam_eps,
                    config.grad_clip_norm,
                )
                sampled_means.append(stats.mean_sampled_length)
                losses.append(float(loss.value))

            val_coords = _generate_coords(
                stream(config.seed, "baseline-val", epoch), config.baseline_val_size, config.n
            )
            updated = maybe_update_baseline(policy, baseline, val_coords, config)
            val_mean = float(greedy_validation_lengths(val_coords, policy, config).mean())
            record = {
                "epoch": epoch,
                "mean_sampled_length": float(np.mean(sampled_means)) if sampled_means else None,
                "mean_greedy_val_length": val_mean,
                "baseline_updated": bool(updated),
                "mean_loss": float(np.mean(losses)) if losses else None,
                "wall_time_s": time.perf_counter() - t0,
            }
            if interrupted:
                record["interrupted"] = True
            metrics.append(record)
            if metrics_fh:
                metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
                metrics_fh.flush()
            if log:
                log(record)
            if run_dir:
                path = run_dir.checkpoint_path(epoch)
                save_checkpoint(path, checkpoint_from_store(config, epoch, policy))
                result.checkpoint_paths.append(path)
            if interrupted:
                result.interrupted = True
                break
    finally:
        if metrics_fh:
            metrics_fh.close()
    return result


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    epoch: int
    step: int
    params: dict
    buffers: dict
    adam_m: dict
    adam_v: dict


def checkpoint_from_store(config, epoch, store):
    return Checkpoint(
        config=config,
        epoch=epoch,
        step=store.step,
        params={k: e.value.copy() for k, e in store.entries.items()},
        buffers={k: v.copy() for k, v in store.buffers.items()},
        adam_m={k: e.m.copy() for k, e in store.entries.items()},
        adam_v={k: e.v.copy() for k, e in store.entries.items()},
    )


def store_from_checkpoint(ckpt):
    """Rebuild a ParamStore, verifying names and shapes against the config."""
    expected = init_params(ckpt.config.encoder, stream(0, "shape-probe"), ckpt.config.dtype)
    if set(expected.entries) != set(ckpt.params) or set(expected.buffers) != set(ckpt.buffers):
        raise CheckpointMismatchError(
            f"tensor names do not match the config: checkpoint has "
            f"params {sorted(ckpt.params)}, buffers {sorted(ckpt.buffers)}; "
            f"config expects params {sorted(expected.entries)}, buffers {sorted(expected.buffers)}"
        )
    for name, entry in expected.entries.items():
        if entry.value.shape != ckpt.params[name].shape:
            raise CheckpointMismatchError(
                f"shape mismatch for {name!r}: {ckpt.params[name].shape} vs {entry.value.shape}"
            )
        entry.value[...] = ckpt.params[name]
        entry.m[...] = ckpt.adam_m[name]
        entry.v[...] = ckpt.adam_v[name]
    for name, buf in expected.buffers.items():
        buf[...] = ckpt.buffers[name]
    expected.step = ckpt.step
    return expected


def _tensor_records(ckpt):
    for role, table in (
        ("param", ckpt.params),
        ("buffer", ckpt.buffers),
        ("adam_m", ckpt.adam_m),
        ("adam_v", ckpt.adam_v),
    ):
        for name in sorted(table):
            yield role, name, table[name]


def save_checkpoint(path, ckpt):
    dtype = ckpt.config.dtype
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": config_to_dict(ckpt.config),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "rng": {"seed": ckpt.config.seed, "next_epoch": ckpt.epoch + 1},
        "precision": ckpt.config.precision,
        "tensors": [
            {"name": name, "role": role} for role, name, _ in _tensor_records(ckpt)
        ],
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        little_endian = np.dtype(f"<f{dtype.itemsize}")
        for _, name, tensor in _tensor_records(ckpt):
            arr = np.ascontiguousarray(tensor, dtype=little_endian)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointTruncatedError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: format version {version}, expected {CHECKPOINT_VERSION}"
            )
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "metadata length"))
        meta = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))
        overrides = {}
        flat = dict(meta["config"])
        for section in ("sinkhorn", "encoder"):
            for key, value in flat.pop(section, {}).items():
                overrides[f"{section}.{key}"] = value
        overrides.update(flat)
        config = load_config(None, overrides)
        dtype = config.dtype

        tables = {"param": {}, "buffer": {}, "adam_m": {}, "adam_v": {}}
        declared = [(t["role"], t["name"]) for t in meta["tensors"]]
        for role, name in declared:
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
            actual = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            if actual != name:
                raise CheckpointMismatchError(
                    f"{path}: tensor order mismatch: metadata declares {name!r}, file has {actual!r}"
                )
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "tensor rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "tensor dims"))
            count = int(np.prod(shape)) if rank else 1
            raw = _read_exact(fh, count * dtype.itemsize, f"tensor {name!r} data")
            little_endian = np.dtype(f"<f{dtype.itemsize}")
            arr = np.frombuffer(raw, dtype=little_endian).reshape(shape)
            tables[role][name] = arr.astype(dtype, copy=True)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing data after last tensor")
    return Checkpoint(
        config=config,
        epoch=meta["epoch"],
        step=meta["step"],
        params=tables["param"],
        buffers=tables["buffer"],
        adam_m=tables["adam_m"],
        adam_v=tables["adam_v"],
    )
