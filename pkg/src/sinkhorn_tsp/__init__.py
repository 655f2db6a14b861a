"""Reinforcement-learned TSP heatmap solver with an entropic OT decoder.

A transformer encoder scores every city-to-city edge; the score matrix is
turned into a row-stochastic (and, with the Sinkhorn decoder, approximately
bi-stochastic) probability heatmap; tours are decoded by masked sampling,
greedy search, or beam search; training is REINFORCE against a greedy-rollout
baseline. Everything runs on a desk: the differentiation engine is built in,
and exact Held-Karp oracles verify results for n <= 16.
"""

from .autodiff import (
    BatchNormState,
    ConfigurationError,
    DomainError,
    Node,
    ParamStore,
    backward,
    constant,
    finite_difference_check,
    forward_op,
)
from .bench import (
    GapReport,
    OracleUnavailableError,
    SearchSpec,
    ablate_sinkhorn,
    optimality_gap,
    run_benchmark,
)
from .config import ConfigError, RunDir, TrainConfig, dump_toml, load_config
from .decoders import (
    HeatmapLogits,
    SinkhornConfig,
    dump_heatmap,
    sinkhorn_decode,
    softmax_decode,
    transport_entropy,
)
from .model import (
    EncoderConfig,
    HeatmapRaw,
    attention_layer,
    count_params,
    embed_input,
    encode,
    encode_heatmap,
    heatmap_head,
    init_params,
)
from .rng import stream
from .search import (
    DecodeCorruptionError,
    DecodeState,
    Trajectory,
    decode_beam,
    decode_greedy,
    decode_sample,
    greedy_tours,
    sample_tours,
    step_distribution,
    tour_lengths,
    trajectory_logprob,
)
from .training import (
    Checkpoint,
    CheckpointError,
    CheckpointMismatchError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    adam_step,
    heatmap_logits,
    load_checkpoint,
    maybe_update_baseline,
    reinforce_batch_loss,
    replay_logprob,
    save_checkpoint,
    store_from_checkpoint,
    surrogate_loss,
    train,
)
from .tsp import (
    InstanceTooLargeError,
    InvalidInstanceError,
    InvalidTourError,
    ParseError,
    Tour,
    TspInstance,
    canonicalize,
    generate_instances,
    nearest_neighbor,
    read_instances,
    read_tours,
    solve_exact,
    tour_length,
    write_instances,
    write_tours,
)

__version__ = "0.1.0"
