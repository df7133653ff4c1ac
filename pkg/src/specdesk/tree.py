"""Draft-tree topologies, token assignment, and tree attention masks.

A topology is a static shape: nodes with (parent, depth, rank).  Filling it
with tokens from the drafter's per-depth distributions yields a DraftTree.
Two fill modes exist because they serve different guarantees:

* "rank": node tokens are the rank-r highest-probability tokens of the
  depth distribution (ties to the lowest id).  Deterministic; exact for
  greedy decoding, where acceptance reduces to argmax agreement.
* "sampled": node tokens are independent draws from the depth distribution
  (duplicates among siblings allowed).  Required for stochastic decoding:
  the accept/residual rule preserves the target distribution only when
  candidates are drawn from the same distribution the rule divides by.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import InvalidInputError, Rng, TokenDistribution, sample
from .model import AttentionSpec

ROOT = -1


@dataclass(frozen=True)
class TreeTopology:
    """Static tree shape.  parents[i] is ROOT (-1) or an earlier node index."""

    parents: tuple[int, ...]
    depths: tuple[int, ...]
    ranks: tuple[int, ...]

    def __post_init__(self) -> None:
        n = len(self.parents)
        if not (len(self.depths) == len(self.ranks) == n):
            raise InvalidInputError("parents, depths, ranks must have equal length")
        seen: set[tuple[int, int]] = set()
        for i in range(n):
            par, dep, rank = self.parents[i], self.depths[i], self.ranks[i]
            if par != ROOT and not 0 <= par < i:
                raise InvalidInputError(f"node {i}: parent {par} must precede it")
            expected_depth = 1 if par == ROOT else self.depths[par] + 1
            if dep != expected_depth:
                raise InvalidInputError(f"node {i}: depth {dep}, expected {expected_depth}")
            if rank < 0:
                raise InvalidInputError(f"node {i}: negative rank")
            if (par, rank) in seen:
                raise InvalidInputError(f"node {i}: duplicate (parent, rank) = {(par, rank)}")
            seen.add((par, rank))

    def __len__(self) -> int:
        return len(self.parents)

    @property
    def max_depth(self) -> int:
        return max(self.depths, default=0)

    def children(self) -> list[list[int]]:
        """Child indices per parent slot; index len(self) holds ROOT's children."""
        out: list[list[int]] = [[] for _ in range(len(self) + 1)]
        for i, par in enumerate(self.parents):
            out[par if par != ROOT else len(self)].append(i)
        return out


def chain_topology(depth: int) -> TreeTopology:
    """A single path of the given depth (the classic draft chain shape)."""
    if depth < 0:
        raise InvalidInputError(f"depth must be >= 0, got {depth}")
    return TreeTopology(
        parents=tuple(i - 1 if i else ROOT for i in range(depth)),
        depths=tuple(range(1, depth + 1)),
        ranks=(0,) * depth,
    )


_DEFAULT_PROFILE = (4, 2, 2, 1, 1)


def default_topology(k: int) -> TreeTopology:
    """Stock tree for a drafter with k lookahead slots.

    Per-depth branch counts (4, 2, 2, 1, 1) truncated to depth k+1: the root
    gets four depth-1 children, and beyond depth 1 only the rank-0 child of
    the previous depth's rank-0 node expands.  At most 16 nodes.
    """
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    profile = _DEFAULT_PROFILE[: min(k + 1, len(_DEFAULT_PROFILE))]
    parents: list[int] = []
    depths: list[int] = []
    ranks: list[int] = []
    spine = ROOT  # rank-0 node of the previous depth
    for depth, width in enumerate(profile, start=1):
        parent = spine
        first = len(parents)
        for r in range(width):
            parents.append(parent)
            depths.append(depth)
            ranks.append(r)
        spine = first
    topo = TreeTopology(tuple(parents), tuple(depths), tuple(ranks))
    assert len(topo) <= 16
    return topo


def topology_to_text(topo: TreeTopology) -> str:
    lines = [f"{p} {d} {r}" for p, d, r in zip(topo.parents, topo.depths, topo.ranks)]
    return "\n".join(lines) + ("\n" if lines else "")


def topology_from_text(text: str) -> TreeTopology:
    parents: list[int] = []
    depths: list[int] = []
    ranks: list[int] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise InvalidInputError(f"line {lineno}: expected 'parent depth rank', got {line!r}")
        p, d, r = (int(x) for x in parts)
        parents.append(p)
        depths.append(d)
        ranks.append(r)
    return TreeTopology(tuple(parents), tuple(depths), tuple(ranks))


@dataclass
class DraftTree:
    """A topology with tokens and their draft probabilities filled in."""

    topology: TreeTopology
    tokens: tuple[int, ...]
    qprobs: tuple[float, ...]
    dists: tuple[TokenDistribution, ...]  # per-depth source distributions, index d-1

    def __len__(self) -> int:
        return len(self.tokens)


def ranked_tokens(dist: TokenDistribution) -> np.ndarray:
    """Token ids sorted by descending probability, ties by lowest id."""
    p = dist.probs
    order = np.lexsort((np.arange(p.size), -p))
    return order


def build_draft_tree(
    dists: list[TokenDistribution],
    topo: TreeTopology,
    mode: str = "rank",
    rng: Rng | None = None,
) -> DraftTree:
    """Assign a token to every topology node from the depth-(d-1) distribution.

    In "sampled" mode one uniform is consumed per node, in topology order.
    """
    if topo.max_depth > len(dists):
        raise InvalidInputError(
            f"topology depth {topo.max_depth} exceeds {len(dists)} available distributions"
        )
    tokens: list[int] = []
    qprobs: list[float] = []
    if mode == "rank":
        orders = [ranked_tokens(d) for d in dists]
        for i in range(len(topo)):
            dist = dists[topo.depths[i] - 1]
            rank = topo.ranks[i]
            if rank >= len(dist):
                raise InvalidInputError(f"node {i}: rank {rank} outside vocabulary")
            tok = int(orders[topo.depths[i] - 1][rank])
            tokens.append(tok)
            qprobs.append(dist[tok])
    elif mode == "sampled":
        if rng is None:
            raise InvalidInputError("sampled mode needs an rng")
        for i in range(len(topo)):
            dist = dists[topo.depths[i] - 1]
            tok = sample(dist, rng)
            tokens.append(tok)
            qprobs.append(dist[tok])
    else:
        raise InvalidInputError(f"unknown tree fill mode {mode!r}")
    return DraftTree(topo, tuple(tokens), tuple(qprobs), tuple(dists))


@dataclass
class TreeAttention:
    """Flattened tree layout: mask and positions over prefix + nodes.

    Index space is [0, prefix_len) for the committed prefix followed by the
    topology nodes in order.  A node sees the whole prefix, its ancestors,
    and itself; prefix tokens are mutually causal.  A node at depth d sits at
    position prefix_len + d - 1.
    """

    prefix_len: int
    spec: AttentionSpec


def tree_attention(topo: TreeTopology, prefix_len: int) -> TreeAttention:
    if prefix_len < 0:
        raise InvalidInputError("prefix_len must be >= 0")
    n = len(topo)
    total = prefix_len + n
    mask = np.zeros((total, total), dtype=bool)
    mask[:prefix_len, :prefix_len] = np.tril(np.ones((prefix_len, prefix_len), dtype=bool))
    positions = np.empty(total, dtype=np.int64)
    positions[:prefix_len] = np.arange(prefix_len)
    for i in range(n):
        row = prefix_len + i
        mask[row, :prefix_len] = True
        mask[row, row] = True
        anc = topo.parents[i]
        while anc != ROOT:
            mask[row, prefix_len + anc] = True
            anc = topo.parents[anc]
        positions[row] = prefix_len + topo.depths[i] - 1
    return TreeAttention(prefix_len, AttentionSpec(mask=mask, positions=positions))
