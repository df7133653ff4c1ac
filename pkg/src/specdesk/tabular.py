"""Exact lookup-table language models.

These are the oracles of the test suites: their conditional distributions
are known in closed form, so speculative output distributions can be checked
against ground truth instead of against another approximation.
"""

from __future__ import annotations

import json

import numpy as np

from .core import InvalidInputError, TokenDistribution


def scaled_distribution(probs: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature scaling of a probability row: p**(1/T), renormalized.

    T == 1 returns the row unchanged (bit-exact, so independently prepared
    tables stay comparable); T == 0 is an argmax one-hot with ties going to
    the lowest token id.
    """
    if not np.isfinite(temperature) or temperature < 0.0:
        raise InvalidInputError(f"temperature must be finite and >= 0, got {temperature}")
    row = np.asarray(probs, dtype=np.float64)
    if temperature == 1.0:
        return row
    if temperature == 0.0:
        out = np.zeros_like(row)
        out[int(np.argmax(row))] = 1.0
        return out
    w = row ** (1.0 / temperature)
    return w / np.sum(w)


def _context_key(prefix, order: int) -> tuple[int, ...]:
    if order == 0:
        return ()
    return tuple(int(t) for t in prefix[-order:])


class TabularLM:
    """Order-n model: the next-token distribution depends on the last n tokens.

    tables maps context tuples (length <= order) to probability rows; lookups
    back off to shorter contexts when the exact one is absent, and the empty
    context must always be present.
    """

    def __init__(self, vocab_size: int, order: int, tables: dict[tuple[int, ...], np.ndarray]) -> None:
        if order < 0:
            raise InvalidInputError(f"order must be >= 0, got {order}")
        if () not in tables:
            raise InvalidInputError("tables must include the empty context")
        self.vocab_size = vocab_size
        self.order = order
        self.tables: dict[tuple[int, ...], np.ndarray] = {}
        for ctx, row in tables.items():
            if len(ctx) > order:
                raise InvalidInputError(f"context {ctx} longer than order {order}")
            dist = TokenDistribution(np.asarray(row, dtype=np.float64))
            if len(dist) != vocab_size:
                raise InvalidInputError(f"row for context {ctx} has length {len(dist)}")
            self.tables[ctx] = dist.probs

    def next_probs(self, prefix) -> np.ndarray:
        ctx = _context_key(prefix, self.order)
        while ctx not in self.tables:
            ctx = ctx[1:]
        return self.tables[ctx]

    def next_distribution(self, prefix, temperature: float = 1.0) -> TokenDistribution:
        return TokenDistribution(scaled_distribution(self.next_probs(prefix), temperature))


class TabularParallelDrafter:
    """Lookup-table stand-in for a parallel drafter.

    For each context it stores k+1 rows: the next-token distribution and the
    distributions proposed at lookahead offsets 1..k.  Like the transformer
    drafter, rows condition only on the committed prefix, never on other
    drafted tokens.
    """

    def __init__(self, vocab_size: int, order: int, k: int, tables: dict[tuple[int, ...], np.ndarray]) -> None:
        if order < 0 or k < 0:
            raise InvalidInputError("order and k must be >= 0")
        if () not in tables:
            raise InvalidInputError("tables must include the empty context")
        self.vocab_size = vocab_size
        self.order = order
        self.k = k
        self.tables: dict[tuple[int, ...], np.ndarray] = {}
        for ctx, block in tables.items():
            arr = np.asarray(block, dtype=np.float64)
            if arr.shape != (k + 1, vocab_size):
                raise InvalidInputError(
                    f"block for context {ctx} has shape {arr.shape}, expected {(k + 1, vocab_size)}"
                )
            for row in arr:
                TokenDistribution(row)  # validate
            self.tables[ctx] = arr

    def lookahead_probs(self, prefix) -> np.ndarray:
        ctx = _context_key(prefix, self.order)
        while ctx not in self.tables:
            ctx = ctx[1:]
        return self.tables[ctx]

    def draft_distributions(self, prefix, temperature: float = 1.0) -> list[TokenDistribution]:
        block = self.lookahead_probs(prefix)
        return [TokenDistribution(scaled_distribution(row, temperature)) for row in block]


def _all_contexts(vocab_size: int, order: int):
    yield ()
    for length in range(1, order + 1):
        grid = np.indices((vocab_size,) * length).reshape(length, -1).T
        for row in grid:
            yield tuple(int(t) for t in row)


def random_tabular_lm(vocab_size: int, order: int, alpha: float, seed: int) -> TabularLM:
    """Dirichlet(alpha) rows for every context up to the given order."""
    rng = np.random.default_rng(seed)
    tables = {
        ctx: rng.dirichlet(np.full(vocab_size, alpha))
        for ctx in _all_contexts(vocab_size, order)
    }
    return TabularLM(vocab_size, order, tables)


def random_tabular_drafter(
    vocab_size: int, order: int, k: int, alpha: float, seed: int
) -> TabularParallelDrafter:
    rng = np.random.default_rng(seed)
    tables = {
        ctx: np.stack([rng.dirichlet(np.full(vocab_size, alpha)) for _ in range(k + 1)])
        for ctx in _all_contexts(vocab_size, order)
    }
    return TabularParallelDrafter(vocab_size, order, k, tables)


def _ctx_to_str(ctx: tuple[int, ...]) -> str:
    return ",".join(str(t) for t in ctx)


def _str_to_ctx(s: str) -> tuple[int, ...]:
    return tuple(int(t) for t in s.split(",")) if s else ()


def save_tabular(model, path) -> None:
    if isinstance(model, TabularLM):
        doc = {
            "type": "tabular-lm",
            "vocab_size": model.vocab_size,
            "order": model.order,
            "tables": {_ctx_to_str(c): r.tolist() for c, r in model.tables.items()},
        }
    elif isinstance(model, TabularParallelDrafter):
        doc = {
            "type": "tabular-parallel-drafter",
            "vocab_size": model.vocab_size,
            "order": model.order,
            "k": model.k,
            "tables": {_ctx_to_str(c): r.tolist() for c, r in model.tables.items()},
        }
    else:
        raise InvalidInputError(f"cannot serialize {type(model).__name__}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_tabular(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    kind = doc.get("type")
    tables = {_str_to_ctx(s): np.asarray(rows, dtype=np.float64) for s, rows in doc["tables"].items()}
    if kind == "tabular-lm":
        return TabularLM(doc["vocab_size"], doc["order"], tables)
    if kind == "tabular-parallel-drafter":
        return TabularParallelDrafter(doc["vocab_size"], doc["order"], doc["k"], tables)
    raise InvalidInputError(f"unknown tabular model type {kind!r}")
