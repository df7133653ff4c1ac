"""Drafter training: grouped parallel-draft losses, AdamW, the train loop.

The parallel-draft loss treats every lookahead slot of a group layout as a
weighted next-token prediction problem: offset-j slots carry weight
lambda_j = base**j (base 0.8 by default), so nearer predictions dominate.
Hard mode uses corpus labels; soft mode distills against the target
model's own next-token distributions, computed once per sequence with a
single causal teacher forward.

Also provides the two related losses used for comparison work: one over
standalone lookahead heads only (no offset-0 term), and a feature
regression + classification loss (smooth-L1 on predicted hidden features
plus cross entropy through the shared head).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import IGNORE_LABEL, InvalidInputError, Rng, derive_seed
from .drafter import GroupLayout, ParallelDrafter, build_group_layout
from .model import TinyTransformer, causal_attention, forward, forward_with_tape, backward_from_tape

__all__ = [
    "AdamW",
    "LossWeights",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "drafter_grads",
    "eagle_loss",
    "eagle_loss_grads",
    "layout_loss",
    "load_corpus",
    "medusa_loss",
    "medusa_parallel_loss",
    "sample_corpus",
    "save_corpus",
    "smooth_l1",
    "teacher_soft_targets",
    "train_drafter",
]


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class LossWeights:
    """Per-lookahead weights lambda_j = base**j (j = 0 is the next token)."""

    base: float = 0.8

    def lookahead(self, j: int) -> float:
        return self.base ** j


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def medusa_parallel_loss(
    logits: np.ndarray, labels, weights: LossWeights = LossWeights()
):
    """Weighted next-token loss over all k+1 lookahead rows.

    logits: (k+1, V) rows for offsets 0..k; labels: (k+1,) token ids with
    IGNORE_LABEL skipping a row.  Returns (loss, dlogits); the loss is the
    plain weighted sum over rows (no averaging).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidInputError("logits must be (k+1, V) with one label per row")
    logq = _log_softmax(logits)
    probs = np.exp(logq)
    loss = 0.0
    dlogits = np.zeros_like(logits)
    for j in range(logits.shape[0]):
        y = int(labels[j])
        if y == IGNORE_LABEL:
            continue
        w = weights.lookahead(j)
        loss -= w * logq[j, y]
        dlogits[j] = w * probs[j]
        dlogits[j, y] -= w
    return loss, dlogits


def medusa_loss(logits: np.ndarray, labels, weights: LossWeights = LossWeights()):
    """Lookahead-heads-only variant: rows are offsets 1..k (no offset 0)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidInputError("logits must be (k, V) with one label per row")
    logq = _log_softmax(logits)
    probs = np.exp(logq)
    loss = 0.0
    dlogits = np.zeros_like(logits)
    for j in range(logits.shape[0]):
        y = int(labels[j])
        if y == IGNORE_LABEL:
            continue
        w = weights.lookahead(j + 1)
        loss -= w * logq[j, y]
        dlogits[j] = w * probs[j]
        dlogits[j, y] -= w
    return loss, dlogits


def smooth_l1(x: np.ndarray, threshold: float = 1.0) -> np.ndarray:
    """Elementwise smooth L1: quadratic inside the threshold, linear outside."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    return np.where(a < threshold, 0.5 * x * x / threshold, a - 0.5 * threshold)


def _smooth_l1_grad(x: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(np.abs(x) < threshold, x / threshold, np.sign(x))


def eagle_loss(
    feat_pred,
    feat_true,
    cls_logits,
    labels,
    reg_weight: float = 1.0,
    cls_weight: float = 1.0,
    threshold: float = 1.0,
) -> float:
    """Feature regression + classification loss.

    Regression: mean smooth L1 between predicted and true feature tensors.
    Classification: mean cross entropy of cls_logits rows against labels.
    """
    loss, _, _ = eagle_loss_grads(
        feat_pred, feat_true, cls_logits, labels, reg_weight, cls_weight, threshold
    )
    return loss


def eagle_loss_grads(
    feat_pred,
    feat_true,
    cls_logits,
    labels,
    reg_weight: float = 1.0,
    cls_weight: float = 1.0,
    threshold: float = 1.0,
):
    """(loss, d_feat_pred, d_cls_logits) for the combined loss."""
    feat_pred = np.asarray(feat_pred, dtype=np.float64)
    feat_true = np.asarray(feat_true, dtype=np.float64)
    if feat_pred.shape != feat_true.shape:
        raise InvalidInputError("feature shapes differ")
    cls_logits = np.asarray(cls_logits, dtype=np.float64)
    if cls_logits.ndim == 1:
        cls_logits = cls_logits[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (cls_logits.shape[0],):
        raise InvalidInputError("one label per classification row required")

    diff = feat_pred - feat_true
    reg = float(np.mean(smooth_l1(diff, threshold)))
    d_feat = reg_weight * _smooth_l1_grad(diff, threshold) / diff.size

    logq = _log_softmax(cls_logits)
    probs = np.exp(logq)
    valid = labels != IGNORE_LABEL
    n_valid = int(np.sum(valid))
    if n_valid == 0:
        raise InvalidInputError("no valid classification labels")
    cls = -float(np.sum(logq[valid, labels[valid]])) / n_valid
    d_cls = np.zeros_like(cls_logits)
    d_cls[valid] = probs[valid]
    d_cls[valid, labels[valid]] -= 1.0
    d_cls *= cls_weight / n_valid

    return reg_weight * reg + cls_weight * cls, d_feat, d_cls


def layout_loss(
    logits: np.ndarray,
    layout: GroupLayout,
    weights: LossWeights = LossWeights(),
    soft_targets: np.ndarray | None = None,
):
    """Mean weighted next-token loss over the valid slots of a group layout.

    Hard mode scores each slot's label; soft mode (soft_targets given, one
    row per slot) scores the full cross entropy against the teacher row.
    Returns (loss, dlogits).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] != len(layout):
        raise InvalidInputError("one logits row per layout slot required")
    logq = _log_softmax(logits)
    probs = np.exp(logq)
    valid = layout.labels != IGNORE_LABEL
    n_valid = int(np.sum(valid))
    if n_valid == 0:
        raise InvalidInputError("layout has no supervised slots")
    w = np.where(valid, np.power(weights.base, layout.offset.astype(np.float64)), 0.0)
    if soft_targets is None:
        picked = np.zeros(len(layout))
        picked[valid] = logq[valid, layout.labels[valid]]
        loss = -float(np.sum(w * picked)) / n_valid
        dlogits = (w[:, None] / n_valid) * probs
        rows = np.flatnonzero(valid)
        dlogits[rows, layout.labels[rows]] -= w[rows] / n_valid
    else:
        soft = np.asarray(soft_targets, dtype=np.float64)
        if soft.shape != logits.shape:
            raise InvalidInputError("soft targets must match logits shape")
        ce = -np.sum(soft * logq, axis=1)
        loss = float(np.sum(w * ce)) / n_valid
        dlogits = (w[:, None] / n_valid) * (probs * np.sum(soft, axis=1, keepdims=True) - soft)
    return loss, dlogits


def teacher_soft_targets(teacher: TinyTransformer, sequence, k: int) -> np.ndarray:
    """Teacher rows for every layout slot, from one causal forward.

    Slot (t, j) sits at position t+j and gets the teacher's next-token
    distribution there; rows past the end of the sequence are zero (their
    labels are IGNORE_LABEL, so they never contribute).
    """
    seq = np.asarray(sequence, dtype=np.int64)
    n = seq.size
    logits, _ = forward(teacher, seq, causal_attention(n))
    probs = np.exp(_log_softmax(logits))
    width = k + 1
    out = np.zeros((n * width, probs.shape[1]), dtype=np.float64)
    for t in range(n):
        for j in range(width):
            if t + j < n:
                out[t * width + j] = probs[t + j]
    return out


def drafter_grads(
    drafter: ParallelDrafter,
    layout: GroupLayout,
    weights: LossWeights = LossWeights(),
    soft_targets: np.ndarray | None = None,
):
    """(loss, grads) for one layout; frozen parameters are omitted."""
    logits, _, tape = forward_with_tape(drafter.model, layout.input_ids, layout.attn)
    loss, dlogits = layout_loss(logits, layout, weights, soft_targets)
    grads = backward_from_tape(drafter.model, tape, dlogits)
    for name in drafter.model.frozen:
        grads.pop(name, None)
    return loss, grads


class AdamW:
    """Decoupled weight-decay Adam over a model's parameter dict."""

    def __init__(
        self,
        model: TinyTransformer,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        self.model = model
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {
            n: np.zeros(p.shape, dtype=np.float64)
            for n, p in model.params.items()
            if n not in model.frozen
        }
        self.v = {n: np.zeros_like(arr) for n, arr in self.m.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for name, g in grads.items():
            if name in self.model.frozen:
                continue
            if name not in self.m:
                raise InvalidInputError(f"gradient for unknown parameter {name}")
            g = np.asarray(g, dtype=np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = self.model.params[name].astype(np.float64)
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps) + self.weight_decay * p
            self.model.params[name] = (p - self.lr * update).astype(np.float32)


@dataclass
class TrainConfig:
    epochs: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    weight_base: float = 0.8
    mode: str = "hard"      # "hard" (corpus labels) or "soft" (teacher dists)
    log_path: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("hard", "soft"):
            raise InvalidInputError(f"unknown training mode {self.mode!r}")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    epochs: int = 0
    steps: int = 0

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def train_drafter(
    drafter: ParallelDrafter,
    corpus: list[list[int]],
    config: TrainConfig = TrainConfig(),
    teacher: TinyTransformer | None = None,
) -> TrainResult:
    """Train in place over the corpus; one optimizer step per sequence.

    Each corpus sequence y becomes a group layout over y[:-1] with labels
    y[1:].  Soft mode needs the teacher model; its per-sequence target rows
    are computed once up front and reused across epochs.
    """
    if config.mode == "soft" and teacher is None:
        raise InvalidInputError("soft training mode requires a teacher model")
    if not corpus:
        raise InvalidInputError("corpus is empty")
    k = drafter.k
    vocab = drafter.vocab_size
    weights = LossWeights(config.weight_base)
    layouts: list[GroupLayout] = []
    softs: list[np.ndarray | None] = []
    for seq in corpus:
        if len(seq) < 2:
            raise InvalidInputError("corpus sequences need at least two tokens")
        layouts.append(build_group_layout(seq[:-1], seq[1:], k, vocab))
        softs.append(
            teacher_soft_targets(teacher, seq[:-1], k) if config.mode == "soft" else None
        )

    opt = AdamW(
        drafter.model,
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    result = TrainResult()
    log_rows: list[tuple[int, int, float]] = []
    for epoch in range(config.epochs):
        for step, (layout, soft) in enumerate(zip(layouts, softs)):
            loss, grads = drafter_grads(drafter, layout, weights, soft)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}"
                )
            opt.step(grads)
            result.losses.append(float(loss))
            log_rows.append((epoch, step, float(loss)))
    result.epochs = config.epochs
    result.steps = len(result.losses)
    if config.log_path is not None:
        with open(config.log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "step", "loss"])
            for epoch, step, loss in log_rows:
                writer.writerow([epoch, step, f"{loss:.10e}"])
    return result


def sample_corpus(
    model, count: int, length: int, seed: int = 0, temperature: float = 1.0,
    prompt: tuple[int, ...] = (0,),
) -> list[list[int]]:
    """Sample `count` sequences of `length` tokens (prompt included)."""
    from .engine import autoregressive_decode  # local import avoids a cycle

    if length <= len(prompt):
        raise InvalidInputError("length must exceed the prompt length")
    out = []
    for i in range(count):
        rng = Rng(derive_seed(seed, i))
        seq, _ = autoregressive_decode(model, list(prompt), length, temperature, rng)
        out.append(seq)
    return out


def save_corpus(path, corpus: list[list[int]]) -> None:
    with open(path, "w") as fh:
        for seq in corpus:
            fh.write(",".join(str(int(t)) for t in seq) + "\n")


def load_corpus(path) -> list[list[int]]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append([int(t) for t in line.split(",")])
    return out
