"""specdesk: desk-scale speculative decoding you can verify end to end.

A small transformer (or an exact tabular model) plays the target; a
parallel drafter proposes several future tokens in a single forward pass
using trainable mask tokens; a token-tree verification step accepts a
prefix of the proposals without changing the target's output distribution.
Everything is sized so that losslessness, acceptance length, and speedup
are measurable on a laptop.
"""

from .core import (
    DegenerateResidualError,
    InvalidInputError,
    Rng,
    TokenDistribution,
    Vocabulary,
    apply_temperature,
    derive_seed,
    normalize_residual,
    sample,
    tv_distance,
)
from .drafter import ParallelDrafter, UnrolledDrafter, build_group_layout, draft_parallel
from .engine import (
    DecodeSession,
    DecodeTrace,
    autoregressive_decode,
    chain_sps_decode,
    speculative_decode,
    verify_tree,
)
from .model import (
    KVCache,
    ModelConfig,
    TinyTransformer,
    load_checkpoint,
    save_checkpoint,
)
from .tabular import TabularLM, TabularParallelDrafter, load_tabular, save_tabular
from .training import LossWeights, TrainConfig, train_drafter
from .tree import TreeTopology, build_draft_tree, chain_topology, default_topology

__version__ = "0.1.0"

__all__ = [
    "DecodeSession",
    "DecodeTrace",
    "DegenerateResidualError",
    "InvalidInputError",
    "KVCache",
    "LossWeights",
    "ModelConfig",
    "ParallelDrafter",
    "Rng",
    "TabularLM",
    "TabularParallelDrafter",
    "TinyTransformer",
    "TokenDistribution",
    "TrainConfig",
    "TreeTopology",
    "UnrolledDrafter",
    "Vocabulary",
    "apply_temperature",
    "autoregressive_decode",
    "build_draft_tree",
    "build_group_layout",
    "chain_sps_decode",
    "chain_topology",
    "default_topology",
    "derive_seed",
    "draft_parallel",
    "load_checkpoint",
    "load_tabular",
    "normalize_residual",
    "sample",
    "save_checkpoint",
    "save_tabular",
    "speculative_decode",
    "train_drafter",
    "tv_distance",
    "verify_tree",
    "__version__",
]
