"""Probability primitives shared by every decoding and training path.

All distributions are dense float64 vectors over the base vocabulary.  The
random source is splitmix64, chosen because it is trivially portable: the
same 64-bit seed produces the same draw sequence in pure Python and in the
compiled kernel, which lets the two decode paths be compared bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Residual mass at or below this threshold is treated as "draft equals
# target" by callers; see normalize_residual.
DEGENERATE_EPS = 1e-15

# Sum-to-one tolerances for TokenDistribution: within _SUM_EXACT the vector
# is taken as-is, within _SUM_FIX it is renormalized, beyond that rejected.
_SUM_EXACT = 1e-9
_SUM_FIX = 1e-6

IGNORE_LABEL = -100


class InvalidInputError(ValueError):
    """Malformed argument: wrong shape, non-finite value, or out of range."""


class DegenerateResidualError(ValueError):
    """Raised when the residual p - q carries no positive mass (p == q)."""


@dataclass(frozen=True)
class Vocabulary:
    """Base token ids 0..size-1 plus mask_count trailing mask prompt ids.

    Mask ids are only ever fed to drafters; no model emits them.
    """

    size: int
    mask_count: int = 0

    def __post_init__(self) -> None:
        if self.size < 2:
            raise InvalidInputError(f"vocabulary size must be >= 2, got {self.size}")
        if self.mask_count < 0:
            raise InvalidInputError(f"mask_count must be >= 0, got {self.mask_count}")

    @property
    def total(self) -> int:
        return self.size + self.mask_count

    def mask_id(self, j: int) -> int:
        """Token id of the j-th mask, 1-indexed (mask 1 is the first)."""
        if not 1 <= j <= self.mask_count:
            raise InvalidInputError(f"mask index {j} outside 1..{self.mask_count}")
        return self.size + j - 1

    def is_mask(self, token_id: int) -> bool:
        return self.size <= token_id < self.total


class TokenDistribution:
    """A probability vector over the base vocabulary.

    The constructor validates non-negativity and normalization.  Sums within
    1e-9 of 1 are kept bit-exact (important for cross-implementation
    comparisons); sums off by at most 1e-6 are renormalized; anything worse
    is rejected.
    """

    __slots__ = ("probs",)

    def __init__(self, probs) -> None:
        arr = np.asarray(probs, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise InvalidInputError(f"distribution must be a 1-D vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("distribution contains non-finite entries")
        if np.any(arr < 0.0):
            raise InvalidInputError("distribution contains negative entries")
        total = float(np.sum(arr))
        err = abs(total - 1.0)
        if err > _SUM_FIX:
            raise InvalidInputError(f"distribution sums to {total!r}, outside tolerance {_SUM_FIX}")
        if err > _SUM_EXACT:
            arr = arr / total
        elif arr is probs:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    def __len__(self) -> int:
        return int(self.probs.size)

    def __getitem__(self, token: int) -> float:
        return float(self.probs[token])

    def __repr__(self) -> str:
        return f"TokenDistribution({np.array2string(self.probs, precision=4)})"


_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_U53 = 1.0 / 9007199254740992.0  # 2**-53


def _mix64(z: int) -> int:
    z &= _MASK64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK64
    z ^= z >> 31
    return z


def derive_seed(base_seed: int, index: int) -> int:
    """Seed for the index-th independent stream of a base seed.

    Equals the index-th raw output of splitmix64 run from base_seed, so
    derived streams never collide with each other for fixed base_seed.
    """
    if index < 0:
        raise InvalidInputError(f"stream index must be >= 0, got {index}")
    return _mix64((base_seed + (index + 1) * _GOLDEN) & _MASK64)


class Rng:
    """splitmix64 generator: same seed, same draws, on every platform."""

    __slots__ = ("state",)

    def __init__(self, seed: int) -> None:
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        return _mix64(self.state)

    def next_uniform(self) -> float:
        """One draw from [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * _U53


def apply_temperature(logits, temperature: float) -> TokenDistribution:
    """softmax(logits / T); T == 0 degenerates to argmax (ties -> lowest id)."""
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise InvalidInputError(f"logits must be a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("logits contain non-finite entries")
    if not np.isfinite(temperature) or temperature < 0.0:
        raise InvalidInputError(f"temperature must be finite and >= 0, got {temperature}")
    if temperature == 0.0:
        out = np.zeros(arr.size, dtype=np.float64)
        out[int(np.argmax(arr))] = 1.0  # np.argmax returns the first maximum
        return TokenDistribution(out)
    scaled = arr / temperature
    scaled -= np.max(scaled)
    ex = np.exp(scaled)
    return TokenDistribution(ex / np.sum(ex))


def sample(dist: TokenDistribution, rng: Rng) -> int:
    """Inverse-CDF draw; consumes exactly one uniform from rng."""
    u = rng.next_uniform()
    cum = np.cumsum(dist.probs)
    idx = int(np.searchsorted(cum, u, side="right"))
    if idx >= dist.probs.size:
        # float underflow tail: fall back to the last token with support
        idx = dist.probs.size - 1
        while idx > 0 and dist.probs[idx] <= 0.0:
            idx -= 1
    return idx


def normalize_residual(p: TokenDistribution, q: TokenDistribution) -> TokenDistribution:
    """Renormalized positive part of p - q.

    This is the leftover-target distribution after a rejected draft token.
    Raises DegenerateResidualError when p <= q everywhere (p == q, since
    both sum to one), in which case rejection cannot occur anyway.
    """
    if len(p) != len(q):
        raise InvalidInputError(f"length mismatch: {len(p)} vs {len(q)}")
    diff = p.probs - q.probs
    pos = np.where(diff > 0.0, diff, 0.0)
    total = float(np.sum(pos))
    if total <= DEGENERATE_EPS:
        raise DegenerateResidualError("residual p - q has no positive mass")
    return TokenDistribution(pos / total)


def tv_distance(p, q) -> float:
    """Total variation distance, 0.5 * sum |p - q|."""
    pa = p.probs if isinstance(p, TokenDistribution) else np.asarray(p, dtype=np.float64)
    qa = q.probs if isinstance(q, TokenDistribution) else np.asarray(q, dtype=np.float64)
    if pa.shape != qa.shape:
        raise InvalidInputError(f"shape mismatch: {pa.shape} vs {qa.shape}")
    return 0.5 * float(np.sum(np.abs(pa - qa)))
