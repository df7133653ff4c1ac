"""Monte-Carlo front end: kernel selection, model flattening, wrappers.

A compiled kernel (specdesk._mc, Cython) is used when the extension built;
otherwise the pure-Python twin (specdesk._mc_py) is selected.  Setting the
environment variable SPECDESK_PURE_PY to a non-empty value forces the
Python kernel.  Both kernels produce identical results draw for draw.

The kernels work on flattened tabular models: dense per-context probability
tables with temperature already applied, so that the engine (which scales
at lookup time with the same function) sees bit-identical rows.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _mc_py
from .core import InvalidInputError, derive_seed
from .tabular import TabularLM, TabularParallelDrafter, scaled_distribution
from .tree import TreeTopology

try:  # pragma: no cover - depends on build environment
    from . import _mc as _compiled
except ImportError:  # pragma: no cover
    _compiled = None

if os.environ.get("SPECDESK_PURE_PY"):
    _kernels = _mc_py
elif _compiled is not None:
    _kernels = _compiled
else:
    _kernels = _mc_py

__all__ = [
    "KernelStats",
    "autoregressive_trace",
    "chain_trace",
    "exact_sequence_distribution",
    "flatten_drafter",
    "flatten_lm",
    "kernel_backend",
    "run_autoregressive_trials",
    "run_chain_trials",
    "run_speculative_trials",
    "speculative_trace",
    "trial_seed",
]


def kernel_backend() -> str:
    """Name of the active kernel: "compiled" or "python"."""
    return "python" if _kernels is _mc_py else "compiled"


@dataclass
class KernelStats:
    rounds: int
    committed: int
    examined: int
    accepted: int
    forced: int
    violations: int
    min_round_commit: int
    max_round_commit: int

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "KernelStats":
        return cls(*(int(x) for x in vec))

    @property
    def tau(self) -> float:
        return self.committed / self.rounds if self.rounds else 0.0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.examined if self.examined else 0.0


def _context_tuples(order: int, vocab: int):
    """All order-token contexts in rolling-code order (oldest first).

    The table convention: an order-o model conditions on the last o tokens,
    so the dense table has vocab**o rows and a context's code is its base-V
    reading with the most recent token in the lowest digit.
    """
    if order <= 0:
        yield ()
        return
    for code in range(vocab ** order):
        ctx = []
        for i in range(order):
            ctx.append((code // vocab ** (order - 1 - i)) % vocab)
        yield tuple(ctx)


def flatten_lm(lm: TabularLM, temperature: float) -> np.ndarray:
    """Dense (vocab**order, vocab) array of temperature-scaled rows."""
    v = lm.vocab_size
    rows = np.empty((v ** max(lm.order, 0), v), dtype=np.float64)
    for code, ctx in enumerate(_context_tuples(lm.order, v)):
        rows[code] = scaled_distribution(lm.next_probs(list(ctx)), temperature)
    return rows


def flatten_drafter(drafter: TabularParallelDrafter, temperature: float):
    """Returns (probs, rank_tokens): (C, k+1, V) scaled rows and the token
    at each draft rank (descending probability, ties to lower ids)."""
    v = drafter.vocab_size
    k = drafter.k
    c = v ** max(drafter.order, 0)
    probs = np.empty((c, k + 1, v), dtype=np.float64)
    rank_tokens = np.empty((c, k + 1, v), dtype=np.int64)
    idx = np.arange(v)
    for code, ctx in enumerate(_context_tuples(drafter.order, v)):
        block = drafter.lookahead_probs(list(ctx))
        for j in range(k + 1):
            row = scaled_distribution(block[j], temperature)
            probs[code, j] = row
            rank_tokens[code, j] = np.lexsort((idx, -row))
    return probs, rank_tokens


def exact_sequence_distribution(
    lm: TabularLM, temperature: float, prompt, length: int
) -> np.ndarray:
    """Exact probability of every continuation of `length` tokens.

    Index order matches the kernel histogram: sequence (t_0..t_{L-1}) maps
    to code sum(t_i * V**(L-1-i)).  Enumerates V**length sequences, so keep
    the problem desk-sized.
    """
    v = lm.vocab_size
    table = flatten_lm(lm, temperature)
    mod = v ** max(lm.order - 1, 0)
    ctx0 = 0
    if lm.order > 0:
        for t in list(prompt)[-lm.order:]:
            ctx0 = ctx0 * v + int(t)
    out = np.empty(v ** length, dtype=np.float64)
    for code in range(v ** length):
        ctx = ctx0
        p = 1.0
        for i in range(length):
            tok = (code // v ** (length - 1 - i)) % v
            p *= table[ctx, tok]
            if lm.order > 0:
                ctx = (ctx % mod) * v + tok
        out[code] = p
    return out


def _check_prompt(prompt, vocab: int, orders) -> np.ndarray:
    arr = np.asarray(list(prompt), dtype=np.int64)
    if arr.size == 0:
        raise InvalidInputError("prompt must be non-empty")
    if arr.min() < 0 or arr.max() >= vocab:
        raise InvalidInputError("prompt token outside vocabulary")
    need = max(orders)
    if arr.size < need:
        raise InvalidInputError(
            f"prompt must cover the longest model context ({need} tokens)"
        )
    return arr


def _topology_arrays(topology: TreeTopology, vocab: int):
    parents = np.array(topology.parents, dtype=np.int64)
    depths = np.array(topology.depths, dtype=np.int64)
    ranks = np.array(topology.ranks, dtype=np.int64)
    if ranks.size and ranks.max() >= vocab:
        raise InvalidInputError("topology rank exceeds vocabulary size")
    return parents, depths, ranks


def run_speculative_trials(
    target: TabularLM,
    drafter: TabularParallelDrafter,
    topology: TreeTopology,
    prompt,
    min_new: int,
    bin_len: int,
    trials: int,
    base_seed: int,
    temperature: float = 1.0,
    drafter_temperature: float | None = None,
    force_accept: bool = False,
):
    """Run `trials` independent speculative decodes; histogram + stats.

    force_accept disables the accept test (every candidate accepted), a
    fault-injection hook used to prove the losslessness check can fail.
    """
    if target.vocab_size != drafter.vocab_size:
        raise InvalidInputError("target and drafter vocabularies differ")
    if topology.max_depth > drafter.k + 1:
        raise InvalidInputError(
            f"topology depth {topology.max_depth} needs drafter k >= {topology.max_depth - 1}"
        )
    dtemp = temperature if drafter_temperature is None else drafter_temperature
    v = target.vocab_size
    prompt_arr = _check_prompt(prompt, v, (target.order, drafter.order))
    tp = flatten_lm(target, temperature)
    dp, rk = flatten_drafter(drafter, dtemp)
    parents, depths, ranks = _topology_arrays(topology, v)
    mode = 0 if temperature == 0.0 else 1
    kern = _mc_py if force_accept else _kernels
    kwargs = {"_force_accept": True} if force_accept else {}
    counts, vec = kern.run_speculative_trials(
        tp, target.order, dp, rk, drafter.order, parents, depths, ranks,
        mode, prompt_arr, min_new, bin_len, trials, base_seed, **kwargs,
    )
    return counts, KernelStats.from_vector(vec)


def speculative_trace(
    target: TabularLM,
    drafter: TabularParallelDrafter,
    topology: TreeTopology,
    prompt,
    min_new: int,
    seed: int,
    temperature: float = 1.0,
    drafter_temperature: float | None = None,
    kernel: str | None = None,
):
    """Single decode with an explicit (already derived) seed.

    kernel: None for the active backend, "python" or "compiled" to pin one.
    Returns (tokens, commits per round) as int64 arrays.
    """
    dtemp = temperature if drafter_temperature is None else drafter_temperature
    v = target.vocab_size
    prompt_arr = _check_prompt(prompt, v, (target.order, drafter.order))
    tp = flatten_lm(target, temperature)
    dp, rk = flatten_drafter(drafter, dtemp)
    parents, depths, ranks = _topology_arrays(topology, v)
    mode = 0 if temperature == 0.0 else 1
    kern = _pick(kernel)
    return kern.run_speculative_trace(
        tp, target.order, dp, rk, drafter.order, parents, depths, ranks,
        mode, prompt_arr, min_new, seed,
    )


def _pick(kernel: str | None):
    if kernel is None:
        return _kernels
    if kernel == "python":
        return _mc_py
    if kernel == "compiled":
        if _compiled is None:
            raise InvalidInputError("compiled kernel not available")
        return _compiled
    raise InvalidInputError(f"unknown kernel {kernel!r}")


def run_autoregressive_trials(
    target: TabularLM, prompt, n_new: int, bin_len: int, trials: int,
    base_seed: int, temperature: float = 1.0,
):
    v = target.vocab_size
    prompt_arr = _check_prompt(prompt, v, (target.order,))
    tp = flatten_lm(target, temperature)
    counts, vec = _kernels.run_autoregressive_trials(
        tp, target.order, prompt_arr, n_new, bin_len, trials, base_seed
    )
    return counts, KernelStats.from_vector(vec)


def autoregressive_trace(
    target: TabularLM, prompt, n_new: int, seed: int,
    temperature: float = 1.0, kernel: str | None = None,
):
    v = target.vocab_size
    prompt_arr = _check_prompt(prompt, v, (target.order,))
    tp = flatten_lm(target, temperature)
    return _pick(kernel).run_autoregressive_trace(tp, target.order, prompt_arr, n_new, seed)


def run_chain_trials(
    target: TabularLM, drafter: TabularLM, gamma: int, prompt,
    min_new: int, bin_len: int, trials: int, base_seed: int,
    temperature: float = 1.0, drafter_temperature: float | None = None,
):
    if gamma < 1:
        raise InvalidInputError(f"gamma must be >= 1, got {gamma}")
    if target.vocab_size != drafter.vocab_size:
        raise InvalidInputError("target and drafter vocabularies differ")
    dtemp = temperature if drafter_temperature is None else drafter_temperature
    v = target.vocab_size
    prompt_arr = _check_prompt(prompt, v, (target.order, drafter.order))
    tp = flatten_lm(target, temperature)
    cp = flatten_lm(drafter, dtemp)
    counts, vec = _kernels.run_chain_trials(
        tp, target.order, cp, drafter.order, gamma, prompt_arr,
        min_new, bin_len, trials, base_seed,
    )
    return counts, KernelStats.from_vector(vec)


def chain_trace(
    target: TabularLM, drafter: TabularLM, gamma: int, prompt,
    min_new: int, seed: int, temperature: float = 1.0,
    drafter_temperature: float | None = None, kernel: str | None = None,
):
    dtemp = temperature if drafter_temperature is None else drafter_temperature
    v = target.vocab_size
    prompt_arr = _check_prompt(prompt, v, (target.order, drafter.order))
    tp = flatten_lm(target, temperature)
    cp = flatten_lm(drafter, dtemp)
    return _pick(kernel).run_chain_trace(
        tp, target.order, cp, drafter.order, gamma, prompt_arr, min_new, seed
    )


def trial_seed(base_seed: int, trial: int) -> int:
    """Seed the kernels use for a given trial index."""
    return derive_seed(base_seed, trial)
