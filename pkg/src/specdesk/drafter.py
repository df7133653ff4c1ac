"""Parallel multi-token drafting and its grouped training layout.

A parallel drafter predicts k+1 future tokens from one forward pass: the
prefix is extended with k trainable mask prompt tokens, and the logits at
the last real token and at each mask give the distributions for lookahead
offsets 0..k.  Crucially each distribution conditions only on the committed
prefix (plus earlier masks), never on other drafted tokens, which is what
makes single-pass drafting and single-pass training possible.

The grouped layout interleaves the same mask machinery after every position
of a training sequence so that one forward pass yields the drafting logits
of every prefix simultaneously; build_group_layout encodes the exact
attention and label rules, and verify_train_inference_consistency checks
that layout slots reproduce the inference-time drafting logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import IGNORE_LABEL, InvalidInputError, TokenDistribution, apply_temperature
from .model import AttentionSpec, ModelConfig, TinyTransformer, forward

SHARED_PARAM_NAMES = ("emb_base", "head_w")


class ParallelDrafter:
    """A TinyTransformer whose vocabulary carries k mask prompt tokens."""

    def __init__(self, model: TinyTransformer) -> None:
        if model.config.mask_count < 0:
            raise InvalidInputError("drafter mask_count must be >= 0")
        self.model = model

    @property
    def k(self) -> int:
        return self.model.config.mask_count

    @property
    def vocab_size(self) -> int:
        return self.model.config.vocab_size

    @classmethod
    def fresh(cls, vocab_size: int, k: int, seed: int = 0, layers: int = 1, width: int = 64,
              heads: int = 4, ff_width: int = 256, max_position: int = 512) -> "ParallelDrafter":
        config = ModelConfig(
            layers=layers, width=width, heads=heads, ff_width=ff_width,
            vocab_size=vocab_size, mask_count=k, max_position=max_position,
        )
        return cls(TinyTransformer.fresh(config, seed=seed))

    @classmethod
    def from_target(
        cls, target: TinyTransformer, k: int, seed: int = 0, layers: int = 1,
        share_embeddings: bool = True,
    ) -> "ParallelDrafter":
        """Single-layer drafter for a target; optionally ties (and freezes)
        the token embedding and output head to the target's."""
        tc = target.config
        config = ModelConfig(
            layers=layers, width=tc.width, heads=tc.heads, ff_width=tc.ff_width,
            vocab_size=tc.vocab_size, mask_count=k, max_position=tc.max_position,
            rope_base=tc.rope_base,
        )
        model = TinyTransformer.fresh(config, seed=seed)
        if share_embeddings:
            for name in SHARED_PARAM_NAMES:
                model.params[name] = target.params[name].copy()
            model.frozen = frozenset(SHARED_PARAM_NAMES)
        return cls(model)

    def draft_distributions(self, prefix, temperature: float = 1.0) -> list[TokenDistribution]:
        return draft_parallel(self, prefix, temperature)


def _mask_ids(drafter: ParallelDrafter) -> np.ndarray:
    v = drafter.vocab_size
    return np.arange(v, v + drafter.k, dtype=np.int64)


def draft_parallel_logits(drafter: ParallelDrafter, prefix) -> np.ndarray:
    """Raw drafting logits, shape (k+1, vocab_size), from one forward pass.

    Row 0 is the next-token head (logits at the last real token); row j is
    the lookahead-j head (logits at mask j).
    """
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.size == 0:
        raise InvalidInputError("prefix must be non-empty")
    n = prefix.size
    k = drafter.k
    tokens = np.concatenate([prefix, _mask_ids(drafter)])
    attn = AttentionSpec(
        mask=np.tril(np.ones((n + k, n + k), dtype=bool)),
        positions=np.arange(n + k, dtype=np.int64),
    )
    logits, _ = forward(drafter.model, tokens, attn)
    return logits[n - 1 :]


def draft_parallel(drafter: ParallelDrafter, prefix, temperature: float = 1.0) -> list[TokenDistribution]:
    """k+1 lookahead distributions for the prefix; exactly one model forward."""
    block = draft_parallel_logits(drafter, prefix)
    return [apply_temperature(row, temperature) for row in block]


@dataclass
class GroupLayout:
    """Expanded training layout: each position followed by its k mask slots.

    Slot (t, j) lives at flat index t*(k+1)+j; j == 0 is the real token.
    labels hold the prediction target per slot (IGNORE_LABEL past the end).
    """

    k: int
    input_ids: np.ndarray
    attn: AttentionSpec
    labels: np.ndarray
    group: np.ndarray   # group index t per slot
    offset: np.ndarray  # lookahead offset j per slot

    def __len__(self) -> int:
        return int(self.input_ids.size)


def build_group_layout(sequence, targets, k: int, vocab_size: int) -> GroupLayout:
    """Interleaved layout for training every prefix of a sequence at once.

    Rules, for group t (0-based) and offset j in 0..k:
      token:    j == 0 -> sequence[t], else mask j
      position: t + j
      label:    targets[t + j] if t + j < len(sequence) else IGNORE_LABEL
      sees:     real tokens s <= t, masks 1..j-1 of its own group, itself
    Real tokens see only earlier real tokens and themselves; no slot ever
    sees a mask from a different group.
    """
    sequence = np.asarray(sequence, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    n = sequence.size
    if n == 0:
        raise InvalidInputError("sequence must be non-empty")
    if targets.size != n:
        raise InvalidInputError(f"targets length {targets.size} != sequence length {n}")
    if k < 0:
        raise InvalidInputError("k must be >= 0")
    if np.any(sequence < 0) or np.any(sequence >= vocab_size):
        raise InvalidInputError("sequence token outside base vocabulary")
    if np.any(targets < 0) or np.any(targets >= vocab_size):
        raise InvalidInputError("target token outside base vocabulary")

    width = k + 1
    total = n * width
    input_ids = np.empty(total, dtype=np.int64)
    positions = np.empty(total, dtype=np.int64)
    labels = np.full(total, IGNORE_LABEL, dtype=np.int64)
    group = np.repeat(np.arange(n), width)
    offset = np.tile(np.arange(width), n)
    mask = np.zeros((total, total), dtype=bool)

    real_cols = np.arange(n) * width
    for t in range(n):
        for j in range(width):
            idx = t * width + j
            input_ids[idx] = sequence[t] if j == 0 else vocab_size + j - 1
            positions[idx] = t + j
            if t + j < n:
                labels[idx] = targets[t + j]
            mask[idx, real_cols[: t + 1]] = True        # real tokens up to group t
            mask[idx, t * width + 1 : idx + 1] = True   # own group's earlier masks + self
    return GroupLayout(
        k=k,
        input_ids=input_ids,
        attn=AttentionSpec(mask=mask, positions=positions),
        labels=labels,
        group=group,
        offset=offset,
    )


def group_layout_logits(drafter: ParallelDrafter, layout: GroupLayout) -> np.ndarray:
    logits, _ = forward(drafter.model, layout.input_ids, layout.attn)
    return logits


def train_inference_mismatches(
    drafter: ParallelDrafter, sequence, rtol: float = 1e-5
) -> list[tuple[int, float]]:
    """Compare layout-slot logits against per-prefix drafting logits.

    Returns (group index, worst relative error) for every group whose slots
    disagree beyond rtol.  targets are irrelevant here, so zeros are used.
    """
    sequence = np.asarray(sequence, dtype=np.int64)
    k = drafter.k
    layout = build_group_layout(sequence, np.zeros_like(sequence), k, drafter.vocab_size)
    grouped = group_layout_logits(drafter, layout).reshape(sequence.size, k + 1, -1)
    bad: list[tuple[int, float]] = []
    for t in range(sequence.size):
        direct = draft_parallel_logits(drafter, sequence[: t + 1])
        num = np.max(np.abs(grouped[t] - direct))
        den = max(np.max(np.abs(direct)), 1e-12)
        rel = float(num / den)
        if rel > rtol:
            bad.append((t, rel))
    return bad


def verify_train_inference_consistency(drafter: ParallelDrafter, sequence, rtol: float = 1e-5) -> bool:
    """True iff every training slot reproduces its inference-time logits."""
    return not train_inference_mismatches(drafter, sequence, rtol)


class UnrolledDrafter:
    """Lookahead oracle that re-runs a base model on its own greedy path.

    draft_distributions(prefix)[j] is the base model's distribution after
    extending the prefix with j greedy steps.  This is the "drafter is the
    target" reference configuration: under greedy decoding every proposed
    chain token matches the target argmax, so a depth-k chain always commits
    k+1 tokens.  It costs k+1 model forwards per draft call, so it is a
    bound-checking tool, not a fast drafter.
    """

    def __init__(self, model: TinyTransformer, k: int) -> None:
        if k < 0:
            raise InvalidInputError("k must be >= 0")
        self.model = model
        self.k = k

    @property
    def vocab_size(self) -> int:
        return self.model.config.vocab_size

    def draft_distributions(self, prefix, temperature: float = 1.0) -> list[TokenDistribution]:
        from .model import causal_attention  # local to avoid cycle noise

        run = list(np.asarray(prefix, dtype=np.int64))
        out: list[TokenDistribution] = []
        for _ in range(self.k + 1):
            tokens = np.asarray(run, dtype=np.int64)
            logits, _ = forward(self.model, tokens, causal_attention(tokens.size))
            out.append(apply_temperature(logits[-1], temperature))
            run.append(int(np.argmax(logits[-1])))
        return out
