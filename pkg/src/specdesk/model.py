"""Tiny decoder-only transformer with explicit attention control.

The model is deliberately small and written directly in numpy so that every
arithmetic step is inspectable.  Two properties matter more than speed here:

* the forward pass accepts an arbitrary boolean attention mask and per-token
  position indices, which is what lets a single forward evaluate draft trees
  and grouped training layouts;
* parameters are stored as float32 (the checkpoint unit) while all compute
  runs in float64, so checkpoints round-trip bit-exactly and gradient checks
  are not drowned in rounding noise.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import InvalidInputError, Rng, TokenDistribution, Vocabulary, apply_temperature

_LN_EPS = 1e-5
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715

CHECKPOINT_MAGIC = b"SDCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    width: int = 64
    heads: int = 4
    ff_width: int = 256
    vocab_size: int = 64
    mask_count: int = 0
    max_position: int = 512
    rope_base: float = 10000.0
    pos_encoding: str = "rotary-half"

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise InvalidInputError("layers must be >= 1")
        if self.width % self.heads != 0:
            raise InvalidInputError(f"width {self.width} not divisible by heads {self.heads}")
        if (self.width // self.heads) % 2 != 0:
            raise InvalidInputError("head dimension must be even for rotary encoding")
        if self.pos_encoding != "rotary-half":
            raise InvalidInputError(f"unknown position encoding {self.pos_encoding!r}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


@dataclass
class AttentionSpec:
    """Boolean visibility mask plus explicit position index per token.

    mask[i][j] is True when token i may attend to token j.  Every token must
    at least see itself.  Positions are arbitrary non-negative integers; the
    rotary encoding is a pure function of them, so repeated or non-contiguous
    positions are legal (draft trees rely on this).
    """

    mask: np.ndarray
    positions: np.ndarray

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=bool)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        n = self.positions.size
        if self.mask.shape != (n, n):
            raise InvalidInputError(f"mask shape {self.mask.shape} does not match {n} positions")
        if n and not np.all(np.diagonal(self.mask)):
            raise InvalidInputError("every token must attend to itself")
        if np.any(self.positions < 0):
            raise InvalidInputError("positions must be non-negative")


def causal_attention(n: int, start_position: int = 0) -> AttentionSpec:
    return AttentionSpec(
        mask=np.tril(np.ones((n, n), dtype=bool)),
        positions=np.arange(start_position, start_position + n, dtype=np.int64),
    )


def _expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff, v, m = config.width, config.ff_width, config.vocab_size, config.mask_count
    shapes: dict[str, tuple[int, ...]] = {
        "emb_base": (v, d),
        "emb_mask": (m, d),
        "ln_f_g": (d,),
        "ln_f_b": (d,),
        "head_w": (d, v),
    }
    for i in range(config.layers):
        p = f"l{i}."
        shapes[p + "ln1_g"] = (d,)
        shapes[p + "ln1_b"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wo"] = (d, d)
        shapes[p + "ln2_g"] = (d,)
        shapes[p + "ln2_b"] = (d,)
        shapes[p + "ffn_w1"] = (d, ff)
        shapes[p + "ffn_b1"] = (ff,)
        shapes[p + "ffn_w2"] = (ff, d)
        shapes[p + "ffn_b2"] = (d,)
    return shapes


def _init_params(config: ModelConfig, seed: int, head_gain: float) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in _expected_shapes(config).items():
        if len(shape) == 1:
            arr = np.ones(shape) if name.endswith("_g") else np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
            if name == "head_w":
                arr = arr * head_gain
        params[name] = arr.astype(np.float32)
    return params


class TinyTransformer:
    """Pre-norm decoder stack; emits logits over the base vocabulary only."""

    def __init__(
        self,
        config: ModelConfig,
        params: dict[str, np.ndarray],
        frozen: frozenset[str] = frozenset(),
    ) -> None:
        expected = _expected_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise InvalidInputError(f"parameter set mismatch: missing {missing}, extra {extra}")
        for name, arr in params.items():
            if arr.shape != expected[name]:
                raise InvalidInputError(
                    f"parameter {name} has shape {arr.shape}, expected {expected[name]}"
                )
        self.config = config
        self.params = {name: np.asarray(arr, dtype=np.float32) for name, arr in params.items()}
        unknown = set(frozen) - set(params)
        if unknown:
            raise InvalidInputError(f"frozen names not in parameter set: {sorted(unknown)}")
        self.frozen = frozenset(frozen)

    @classmethod
    def fresh(cls, config: ModelConfig, seed: int = 0, head_gain: float = 1.0) -> "TinyTransformer":
        return cls(config, _init_params(config, seed, head_gain))

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.config.vocab_size, self.config.mask_count)

    def param_names(self) -> list[str]:
        return sorted(self.params)

    def next_distribution(self, prefix, temperature: float = 1.0) -> TokenDistribution:
        tokens = np.asarray(prefix, dtype=np.int64)
        logits, _ = forward(self, tokens, causal_attention(tokens.size))
        return apply_temperature(logits[-1], temperature)


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, xhat, inv


def _layernorm_backward(dy, xhat, inv, g):
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    db = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m = xhat.shape[-1]
    dx = inv * (
        dxhat
        - np.mean(dxhat, axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    assert m == dx.shape[-1]
    return dx, dg, db


def _gelu(u: np.ndarray):
    inner = _GELU_C * (u + _GELU_A * u**3)
    t = np.tanh(inner)
    return 0.5 * u * (1.0 + t), t


def _gelu_backward(du_out, u, t):
    sech2 = 1.0 - t * t
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * sech2 * dinner)


def _rope_tables(config: ModelConfig, positions: np.ndarray):
    half = config.head_dim // 2
    inv_freq = config.rope_base ** (-np.arange(half, dtype=np.float64) * 2.0 / config.head_dim)
    theta = positions[:, None].astype(np.float64) * inv_freq[None, :]
    cos = np.concatenate([np.cos(theta), np.cos(theta)], axis=-1)
    sin = np.concatenate([np.sin(theta), np.sin(theta)], axis=-1)
    # shape (n, 1, head_dim) so it broadcasts over heads
    return cos[:, None, :], sin[:, None, :]


def _rotate_half(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([x[..., h:], -x[..., :h]], axis=-1)


def _apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    return x * cos + _rotate_half(x) * sin


def _rope_backward(g: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    return g * cos + _rotate_half_t(g * sin)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)  # (h, n, dh)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _check_tokens(model: TinyTransformer, tokens: np.ndarray) -> None:
    total = model.vocab.total
    if tokens.ndim != 1:
        raise InvalidInputError(f"tokens must be 1-D, got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= total):
        raise InvalidInputError(f"token id out of range 0..{total - 1}")


def _embed(model: TinyTransformer, tokens: np.ndarray) -> np.ndarray:
    v = model.config.vocab_size
    base = model.params["emb_base"].astype(np.float64)
    maskrows = model.params["emb_mask"].astype(np.float64)
    out = np.empty((tokens.size, model.config.width), dtype=np.float64)
    is_mask = tokens >= v
    out[~is_mask] = base[tokens[~is_mask]]
    if np.any(is_mask):
        out[is_mask] = maskrows[tokens[is_mask] - v]
    return out


def forward_with_tape(model: TinyTransformer, tokens, attn: AttentionSpec, want_tape: bool = True):
    """Full-sequence forward.  Returns (logits, hidden, tape or None).

    logits: (n, vocab_size) float64; hidden: (n, width) float64, the
    post-final-norm features.  Masked-out pairs contribute exactly zero
    attention weight.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(model, tokens)
    n = tokens.size
    if attn.positions.size != n:
        raise InvalidInputError(f"attention spec covers {attn.positions.size} tokens, got {n}")
    if np.any(attn.positions >= model.config.max_position):
        raise InvalidInputError(f"position index >= max_position {model.config.max_position}")
    cfg = model.config
    p64 = {k: v.astype(np.float64) for k, v in model.params.items()}
    scale = 1.0 / np.sqrt(cfg.head_dim)
    cos, sin = _rope_tables(cfg, attn.positions)

    x = _embed(model, tokens)
    tape: dict | None = {"tokens": tokens, "layers": [], "cos": cos, "sin": sin} if want_tape else None

    for i in range(cfg.layers):
        p = f"l{i}."
        h1, xhat1, inv1 = _layernorm(x, p64[p + "ln1_g"], p64[p + "ln1_b"])
        q = _split_heads(h1 @ p64[p + "wq"], cfg.heads)
        k = _split_heads(h1 @ p64[p + "wk"], cfg.heads)
        v = _split_heads(h1 @ p64[p + "wv"], cfg.heads)
        qr = _apply_rope(q.transpose(1, 0, 2), cos, sin).transpose(1, 0, 2)
        kr = _apply_rope(k.transpose(1, 0, 2), cos, sin).transpose(1, 0, 2)
        scores = np.where(attn.mask, (qr @ kr.transpose(0, 2, 1)) * scale, -np.inf)
        w = np.exp(scores - np.max(scores, axis=-1, keepdims=True))
        w = w / np.sum(w, axis=-1, keepdims=True)
        att = _merge_heads(w @ v)
        att_out = att @ p64[p + "wo"]
        x1 = x + att_out
        h2, xhat2, inv2 = _layernorm(x1, p64[p + "ln2_g"], p64[p + "ln2_b"])
        u = h2 @ p64[p + "ffn_w1"] + p64[p + "ffn_b1"]
        a, t = _gelu(u)
        x = x1 + a @ p64[p + "ffn_w2"] + p64[p + "ffn_b2"]
        if want_tape:
            tape["layers"].append(
                dict(
                    h1=h1, xhat1=xhat1, inv1=inv1, qr=qr, kr=kr, v=v, w=w, att=att,
                    h2=h2, xhat2=xhat2, inv2=inv2, u=u, t=t, a=a,
                )
            )

    hidden, xhatf, invf = _layernorm(x, p64["ln_f_g"], p64["ln_f_b"])
    logits = hidden @ p64["head_w"]
    if want_tape:
        tape["xhatf"] = xhatf
        tape["invf"] = invf
        tape["hidden"] = hidden
    return logits, hidden, tape


def forward(model: TinyTransformer, tokens, attn: AttentionSpec):
    """(logits, hidden) for a token sequence under an explicit AttentionSpec."""
    logits, hidden, _ = forward_with_tape(model, tokens, attn, want_tape=False)
    return logits, hidden


def backward_from_tape(
    model: TinyTransformer,
    tape: dict,
    dlogits: np.ndarray,
    dhidden: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of sum(logits * dlogits) [+ sum(hidden * dhidden)] w.r.t. all parameters."""
    cfg = model.config
    p64 = {k: v.astype(np.float64) for k, v in model.params.items()}
    scale = 1.0 / np.sqrt(cfg.head_dim)
    cos, sin = tape["cos"], tape["sin"]
    grads: dict[str, np.ndarray] = {}

    dh = dlogits @ p64["head_w"].T
    grads["head_w"] = tape["hidden"].T @ dlogits
    if dhidden is not None:
        dh = dh + dhidden
    dx, grads["ln_f_g"], grads["ln_f_b"] = _layernorm_backward(dh, tape["xhatf"], tape["invf"], p64["ln_f_g"])

    for i in reversed(range(cfg.layers)):
        p = f"l{i}."
        lt = tape["layers"][i]
        # feed-forward half
        da = dx @ p64[p + "ffn_w2"].T
        grads[p + "ffn_w2"] = lt["a"].T @ dx
        grads[p + "ffn_b2"] = np.sum(dx, axis=0)
        du = _gelu_backward(da, lt["u"], lt["t"])
        grads[p + "ffn_w1"] = lt["h2"].T @ du
        grads[p + "ffn_b1"] = np.sum(du, axis=0)
        dh2 = du @ p64[p + "ffn_w1"].T
        dx1_from_ln, grads[p + "ln2_g"], grads[p + "ln2_b"] = _layernorm_backward(
            dh2, lt["xhat2"], lt["inv2"], p64[p + "ln2_g"]
        )
        dx1 = dx + dx1_from_ln
        # attention half
        datt = dx1 @ p64[p + "wo"].T
        grads[p + "wo"] = lt["att"].T @ dx1
        datt_h = _split_heads(datt, cfg.heads)
        dw = datt_h @ lt["v"].transpose(0, 2, 1)
        dv = lt["w"].transpose(0, 2, 1) @ datt_h
        ds = lt["w"] * (dw - np.sum(dw * lt["w"], axis=-1, keepdims=True))
        dqr = (ds @ lt["kr"]) * scale
        dkr = (ds.transpose(0, 2, 1) @ lt["qr"]) * scale
        dq = _rope_backward(dqr.transpose(1, 0, 2), cos, sin).transpose(1, 0, 2)
        dk = _rope_backward(dkr.transpose(1, 0, 2), cos, sin).transpose(1, 0, 2)
        dq_m, dk_m, dv_m = (_merge_heads(z) for z in (dq, dk, dv))
        grads[p + "wq"] = lt["h1"].T @ dq_m
        grads[p + "wk"] = lt["h1"].T @ dk_m
        grads[p + "wv"] = lt["h1"].T @ dv_m
        dh1 = dq_m @ p64[p + "wq"].T + dk_m @ p64[p + "wk"].T + dv_m @ p64[p + "wv"].T
        dx_from_ln, grads[p + "ln1_g"], grads[p + "ln1_b"] = _layernorm_backward(
            dh1, lt["xhat1"], lt["inv1"], p64[p + "ln1_g"]
        )
        dx = dx1 + dx_from_ln

    tokens = tape["tokens"]
    v = cfg.vocab_size
    demb_base = np.zeros_like(p64["emb_base"])
    demb_mask = np.zeros_like(p64["emb_mask"])
    is_mask = tokens >= v
    np.add.at(demb_base, tokens[~is_mask], dx[~is_mask])
    if np.any(is_mask):
        np.add.at(demb_mask, tokens[is_mask] - v, dx[is_mask])
    grads["emb_base"] = demb_base
    grads["emb_mask"] = demb_mask
    return grads


class KVCache:
    """Per-layer rotated key/value store split into committed and block parts.

    The committed region always corresponds exactly to the committed prefix.
    A forward_step appends entries to the open block; commit_block keeps a
    chosen subset of the block (remapping it to the linear layout) and
    rollback_block discards the block entirely.
    """

    def __init__(self, model: TinyTransformer, capacity: int | None = None) -> None:
        cfg = model.config
        cap = cfg.max_position if capacity is None else capacity
        self.capacity = cap
        self.k = np.zeros((cfg.layers, cap, cfg.heads, cfg.head_dim), dtype=np.float64)
        self.v = np.zeros_like(self.k)
        self.positions = np.full(cap, -1, dtype=np.int64)
        self.committed_len = 0
        self.block_len = 0

    @property
    def total_len(self) -> int:
        return self.committed_len + self.block_len

    def commit_block(self, keep: list[int]) -> None:
        if sorted(set(keep)) != list(keep):
            raise InvalidInputError("keep indices must be strictly increasing")
        if keep and (keep[0] < 0 or keep[-1] >= self.block_len):
            raise InvalidInputError(f"keep index outside block of length {self.block_len}")
        base = self.committed_len
        src = np.asarray([base + i for i in keep], dtype=np.int64)
        dst = np.arange(base, base + len(keep))
        self.k[:, dst] = self.k[:, src]
        self.v[:, dst] = self.v[:, src]
        self.positions[dst] = self.positions[src]
        self.committed_len += len(keep)
        self.block_len = 0

    def rollback_block(self) -> None:
        self.block_len = 0


def forward_step(model: TinyTransformer, cache: KVCache, tokens, positions, mask_cols):
    """Incremental forward of new tokens against cache + open block.

    mask_cols has shape (n_new, total_len + n_new): visibility of each new
    token over committed entries, the open block, and the new tokens
    themselves.  New entries are appended to the open block.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    _check_tokens(model, tokens)
    n = tokens.size
    ctx = cache.total_len
    mask_cols = np.asarray(mask_cols, dtype=bool)
    if mask_cols.shape != (n, ctx + n):
        raise InvalidInputError(f"mask shape {mask_cols.shape}, expected {(n, ctx + n)}")
    if not np.all(np.diagonal(mask_cols[:, ctx:])):
        raise InvalidInputError("every new token must attend to itself")
    if np.any(positions >= model.config.max_position) or np.any(positions < 0):
        raise InvalidInputError("position index out of range")
    if ctx + n > cache.capacity:
        raise InvalidInputError("cache capacity exceeded")

    cfg = model.config
    p64 = {k: v.astype(np.float64) for k, v in model.params.items()}
    scale = 1.0 / np.sqrt(cfg.head_dim)
    cos, sin = _rope_tables(cfg, positions)
    x = _embed(model, tokens)

    for i in range(cfg.layers):
        p = f"l{i}."
        h1, _, _ = _layernorm(x, p64[p + "ln1_g"], p64[p + "ln1_b"])
        q = _split_heads(h1 @ p64[p + "wq"], cfg.heads)
        k_new = _split_heads(h1 @ p64[p + "wk"], cfg.heads)
        v_new = _split_heads(h1 @ p64[p + "wv"], cfg.heads)
        qr = _apply_rope(q.transpose(1, 0, 2), cos, sin).transpose(1, 0, 2)
        kr = _apply_rope(k_new.transpose(1, 0, 2), cos, sin).transpose(1, 0, 2)
        cache.k[i, ctx : ctx + n] = kr.transpose(1, 0, 2)
        cache.v[i, ctx : ctx + n] = v_new.transpose(1, 0, 2)
        k_all = cache.k[i, : ctx + n].transpose(1, 0, 2)  # (h, ctx+n, dh)
        v_all = cache.v[i, : ctx + n].transpose(1, 0, 2)
        scores = np.where(mask_cols, (qr @ k_all.transpose(0, 2, 1)) * scale, -np.inf)
        w = np.exp(scores - np.max(scores, axis=-1, keepdims=True))
        w = w / np.sum(w, axis=-1, keepdims=True)
        att = _merge_heads(w @ v_all) @ p64[p + "wo"]
        x1 = x + att
        h2, _, _ = _layernorm(x1, p64[p + "ln2_g"], p64[p + "ln2_b"])
        u = h2 @ p64[p + "ffn_w1"] + p64[p + "ffn_b1"]
        a, _ = _gelu(u)
        x = x1 + a @ p64[p + "ffn_w2"] + p64[p + "ffn_b2"]

    cache.positions[ctx : ctx + n] = positions
    cache.block_len += n
    hidden, _, _ = _layernorm(x, p64["ln_f_g"], p64["ln_f_b"])
    logits = hidden @ p64["head_w"]
    return logits, hidden


def next_distribution(model, prefix, temperature: float = 1.0) -> TokenDistribution:
    """Next-token distribution after prefix, for any model with the method."""
    return model.next_distribution(prefix, temperature)


def save_checkpoint(model: TinyTransformer, path) -> None:
    names = model.param_names()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "frozen": sorted(model.frozen),
        "tensors": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(CHECKPOINT_VERSION.to_bytes(4, "little"))
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        for n in names:
            arr = np.ascontiguousarray(model.params[n], dtype="<f4")
            fh.write(arr.tobytes())


def load_checkpoint(path) -> TinyTransformer:
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    head = buf.read(12)
    if len(head) < 12:
        raise CheckpointTruncatedError(f"file too short for header: {len(head)} bytes")
    if head[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {head[:4]!r}")
    version = int.from_bytes(head[4:8], "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"format version {version}, expected {CHECKPOINT_VERSION}")
    manifest_len = int.from_bytes(head[8:12], "little")
    raw = buf.read(manifest_len)
    if len(raw) < manifest_len:
        raise CheckpointTruncatedError("manifest truncated")
    try:
        manifest = json.loads(raw.decode("utf-8"))
        config = ModelConfig(**manifest["config"])
        tensors = [(t["name"], tuple(t["shape"])) for t in manifest["tensors"]]
        frozen = frozenset(manifest.get("frozen", []))
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"unreadable manifest: {exc}") from exc
    expected = _expected_shapes(config)
    if {n for n, _ in tensors} != set(expected):
        raise CheckpointShapeError("manifest tensor set does not match config")
    for name, shape in tensors:
        if shape != expected[name]:
            raise CheckpointShapeError(
                f"tensor {name} has manifest shape {shape}, expected {expected[name]}"
            )
    params: dict[str, np.ndarray] = {}
    for name, shape in tensors:
        nbytes = 4 * int(np.prod(shape)) if shape else 4
        chunk = buf.read(nbytes)
        if len(chunk) < nbytes:
            raise CheckpointTruncatedError(f"tensor {name} truncated")
        params[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
    if buf.read(1):
        raise CheckpointFormatError("trailing bytes after final tensor")
    return TinyTransformer(config, params, frozen=frozen)
