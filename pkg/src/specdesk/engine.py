"""Decoding engines: speculative tree decoding, chain baseline, autoregressive.

The speculative round is: one drafter call producing k+1 lookahead
distributions, one target forward over the draft tree (tree attention), a
root-to-leaf verification walk, and a bonus token, so every round commits
between 1 and depth+1 tokens.  The verification walk preserves the target
distribution exactly; see verify_tree.

Random-draw discipline (kept identical in the compiled Monte-Carlo kernels,
so decode paths can be compared draw for draw): per speculative round, one
uniform per tree node in topology order when candidates are sampled
(stochastic decoding only), then one uniform per candidate examined during
verification, then one uniform for the bonus token.  Autoregressive decoding
uses one uniform per token.  The chain baseline uses one uniform per drafted
token, one per verified token, and one final uniform (residual resample or
bonus).
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import (
    DEGENERATE_EPS,
    InvalidInputError,
    Rng,
    TokenDistribution,
    apply_temperature,
    sample,
)
from .drafter import ParallelDrafter, UnrolledDrafter
from .model import KVCache, TinyTransformer, forward_step
from .tabular import TabularLM, TabularParallelDrafter
from .tree import ROOT, DraftTree, TreeTopology, build_draft_tree

__all__ = [
    "DecodeSession",
    "DecodeTrace",
    "NodeDecision",
    "RoundOutcome",
    "RoundRecord",
    "autoregressive_decode",
    "chain_sps_decode",
    "kv_commit",
    "kv_rollback",
    "speculative_decode",
    "verify_tree",
]


@dataclass
class NodeDecision:
    node: int
    token: int
    draw: float
    ratio: float
    accepted: bool
    forced: bool


@dataclass
class RoundOutcome:
    """Result of verifying one draft tree."""

    path: list[int]            # accepted node indices, root-to-leaf order
    tokens: list[int]          # committed tokens: accepted path + bonus
    bonus_token: int
    decisions: list[NodeDecision]
    proposed: int
    draft_ns: int = 0
    verify_ns: int = 0

    @property
    def accepted_count(self) -> int:
        return len(self.path)


@dataclass
class RoundRecord:
    round: int
    draft_ns: int
    verify_ns: int
    proposed: int
    accepted: int
    committed_tokens: int
    drafter_forwards: int
    target_forwards: int


@dataclass
class DecodeTrace:
    engine: str
    rounds: list[RoundRecord] = field(default_factory=list)
    prefill_ns: int = 0

    def total_committed(self) -> int:
        return sum(r.committed_tokens for r in self.rounds)

    def tau(self) -> float:
        if not self.rounds:
            return 0.0
        return self.total_committed() / len(self.rounds)

    def total_wall_ns(self) -> int:
        return self.prefill_ns + sum(r.draft_ns + r.verify_ns for r in self.rounds)

    def write_jsonl(self, fh, extra: dict | None = None) -> None:
        for r in self.rounds:
            rec = {"engine": self.engine, **asdict(r)}
            if extra:
                rec.update(extra)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trace_jsonl(fh) -> list[dict]:
    return [json.loads(line) for line in fh if line.strip()]


def _sample_probs(probs: np.ndarray, rng: Rng) -> int:
    """Inverse-CDF draw over a raw probability row (one uniform)."""
    u = rng.next_uniform()
    cum = np.cumsum(probs)
    idx = int(np.searchsorted(cum, u, side="right"))
    if idx >= probs.size:
        idx = probs.size - 1
        while idx > 0 and probs[idx] <= 0.0:
            idx -= 1
    return idx


def _accept_ratio(pt: float, qs: float) -> float:
    if pt <= 0.0:
        return 0.0
    if qs <= 0.0 or pt >= qs:
        return 1.0
    return pt / qs


def verify_tree(
    tree: DraftTree,
    root_dist: TokenDistribution,
    node_dists: list[TokenDistribution],
    rng: Rng,
) -> RoundOutcome:
    """Root-to-leaf verification walk over a draft tree.

    At each level the candidate children are examined in node-index order,
    which is the order they were sampled in.  That matters: each examined
    candidate must be a fresh independent draw from the depth-d draft
    distribution q_d, so any value-dependent reordering (say, by draft
    probability) would turn the first candidate into an order statistic of
    q_d and bias the outcome.

    A candidate with token x at depth d is accepted when
    u < min(1, p(x)/q_d(x)), where p is the current target distribution for
    this position.  On rejection p is replaced by the renormalized positive
    part of p - q_d and the next sibling is tried against the same q_d.  If
    the walk stops (leaf reached or all siblings rejected) one bonus token is
    sampled from the current p.  A rejection whose residual carries no mass
    means p and q agree exactly there, so it is treated as an acceptance
    (the accept probability would have been 1 up to rounding).

    With sampled candidates this procedure is distribution-exact: each
    committed token (including the bonus) is marginally a draw from the
    target distribution given the tokens before it.
    """
    if len(node_dists) != len(tree):
        raise InvalidInputError(f"need {len(tree)} node distributions, got {len(node_dists)}")
    children = tree.topology.children()
    p_cur = root_dist.probs
    node = ROOT
    path: list[int] = []
    tokens: list[int] = []
    decisions: list[NodeDecision] = []

    while True:
        kids = children[node if node != ROOT else len(tree.topology)]
        if not kids:
            break
        advanced = False
        for s in kids:
            r = rng.next_uniform()
            tok = tree.tokens[s]
            ratio = _accept_ratio(float(p_cur[tok]), tree.qprobs[s])
            if r < ratio:
                decisions.append(NodeDecision(s, tok, r, ratio, True, False))
                advanced = True
            else:
                q_row = tree.dists[tree.topology.depths[s] - 1].probs
                diff = p_cur - q_row
                pos = np.where(diff > 0.0, diff, 0.0)
                # sequential summation: bit-identical in the compiled kernels
                total = float(np.cumsum(pos)[-1])
                if total <= DEGENERATE_EPS:
                    # p == q here: genuine rejection has probability ~0
                    decisions.append(NodeDecision(s, tok, r, ratio, True, True))
                    advanced = True
                else:
                    decisions.append(NodeDecision(s, tok, r, ratio, False, False))
                    p_cur = pos / total
                    continue
            path.append(s)
            tokens.append(tok)
            p_cur = node_dists[s].probs
            node = s
            break
        if not advanced:
            break

    bonus = _sample_probs(p_cur, rng)
    tokens.append(bonus)
    return RoundOutcome(
        path=path,
        tokens=tokens,
        bonus_token=bonus,
        decisions=decisions,
        proposed=len(tree),
    )


def kv_commit(cache: KVCache, keep: list[int]) -> None:
    """Keep the selected block entries (tree order -> linear order), drop the rest."""
    cache.commit_block(keep)


def kv_rollback(cache: KVCache) -> None:
    """Discard the entire speculative block."""
    cache.rollback_block()


def _check_prompt(prompt, vocab_size: int) -> list[int]:
    out = [int(t) for t in prompt]
    if not out:
        raise InvalidInputError("prompt must be non-empty")
    if any(t < 0 or t >= vocab_size for t in out):
        raise InvalidInputError("prompt token outside base vocabulary")
    return out


class _TransformerTarget:
    """Target-side state: KV cache over all committed tokens except the
    newest one, whose keys are computed at the start of the next forward."""

    def __init__(self, model: TinyTransformer, temperature: float, prompt: list[int]) -> None:
        self.model = model
        self.temperature = temperature
        self.cache = KVCache(model)
        self.committed = list(prompt)
        self.pending = prompt[-1]
        n = len(prompt) - 1
        t0 = time.perf_counter_ns()
        if n > 0:
            mask = np.tril(np.ones((n, n), dtype=bool))
            forward_step(model, self.cache, prompt[:-1], np.arange(n), mask)
            self.cache.commit_block(list(range(n)))
        self.prefill_ns = time.perf_counter_ns() - t0

    def tree_dists(self, tree: DraftTree):
        m = len(self.committed)
        n = len(tree)
        ctx = self.cache.committed_len  # == m - 1
        tokens = [self.pending] + list(tree.tokens)
        positions = np.empty(n + 1, dtype=np.int64)
        positions[0] = m - 1
        mask = np.zeros((n + 1, ctx + n + 1), dtype=bool)
        mask[:, :ctx] = True
        mask[:, ctx] = True  # everything sees the pending token
        for i in range(n):
            positions[1 + i] = m - 1 + tree.topology.depths[i]
            anc = tree.topology.parents[i]
            while anc != ROOT:
                mask[1 + i, ctx + 1 + anc] = True
                anc = tree.topology.parents[anc]
            mask[1 + i, ctx + 1 + i] = True
        t0 = time.perf_counter_ns()
        logits, _ = forward_step(self.model, self.cache, tokens, positions, mask)
        dt = time.perf_counter_ns() - t0
        root = apply_temperature(logits[0], self.temperature)
        nodes = [apply_temperature(logits[1 + i], self.temperature) for i in range(n)]
        return root, nodes, dt, 1

    def commit_round(self, outcome: RoundOutcome) -> None:
        kv_commit(self.cache, [0] + [1 + s for s in outcome.path])
        self.committed.extend(outcome.tokens)
        self.pending = outcome.tokens[-1]

    def step_dist(self):
        """Autoregressive step: distribution after the committed prefix."""
        ctx = self.cache.committed_len
        mask = np.ones((1, ctx + 1), dtype=bool)
        t0 = time.perf_counter_ns()
        logits, _ = forward_step(
            self.model, self.cache, [self.pending], [len(self.committed) - 1], mask
        )
        dt = time.perf_counter_ns() - t0
        return apply_temperature(logits[0], self.temperature), dt, 1

    def commit_token(self, token: int) -> None:
        kv_commit(self.cache, [0])
        self.committed.append(token)
        self.pending = token

    def chain_dists(self, drafted: list[int]):
        """Distributions p_0..p_gamma for a drafted chain, one forward."""
        m = len(self.committed)
        g = len(drafted)
        ctx = self.cache.committed_len
        tokens = [self.pending] + drafted
        positions = np.arange(m - 1, m + g)
        mask = np.zeros((g + 1, ctx + g + 1), dtype=bool)
        mask[:, :ctx] = True
        for i in range(g + 1):
            mask[i, ctx : ctx + i + 1] = True
        t0 = time.perf_counter_ns()
        logits, _ = forward_step(self.model, self.cache, tokens, positions, mask)
        dt = time.perf_counter_ns() - t0
        return [apply_temperature(row, self.temperature) for row in logits], dt, 1

    def commit_chain(self, accepted: int, tokens: list[int]) -> None:
        kv_commit(self.cache, list(range(accepted + 1)))
        self.committed.extend(tokens)
        self.pending = tokens[-1]


class _TabularTarget:
    def __init__(self, model: TabularLM, temperature: float, prompt: list[int]) -> None:
        self.model = model
        self.temperature = temperature
        self.committed = list(prompt)
        self.prefill_ns = 0

    def tree_dists(self, tree: DraftTree):
        t0 = time.perf_counter_ns()
        root = self.model.next_distribution(self.committed, self.temperature)
        paths: list[list[int]] = []
        nodes: list[TokenDistribution] = []
        for i in range(len(tree)):
            par = tree.topology.parents[i]
            path = (paths[par] if par != ROOT else []) + [tree.tokens[i]]
            paths.append(path)
            nodes.append(self.model.next_distribution(self.committed + path, self.temperature))
        dt = time.perf_counter_ns() - t0
        return root, nodes, dt, 1

    def commit_round(self, outcome: RoundOutcome) -> None:
        self.committed.extend(outcome.tokens)

    def step_dist(self):
        t0 = time.perf_counter_ns()
        dist = self.model.next_distribution(self.committed, self.temperature)
        return dist, time.perf_counter_ns() - t0, 1

    def commit_token(self, token: int) -> None:
        self.committed.append(token)

    def chain_dists(self, drafted: list[int]):
        t0 = time.perf_counter_ns()
        out = []
        run = list(self.committed)
        for i in range(len(drafted) + 1):
            out.append(self.model.next_distribution(run, self.temperature))
            if i < len(drafted):
                run.append(drafted[i])
        return out, time.perf_counter_ns() - t0, 1

    def commit_chain(self, accepted: int, tokens: list[int]) -> None:
        self.committed.extend(tokens)


def _make_target(model, temperature: float, prompt: list[int]):
    if isinstance(model, TinyTransformer):
        return _TransformerTarget(model, temperature, prompt)
    if isinstance(model, TabularLM):
        return _TabularTarget(model, temperature, prompt)
    raise InvalidInputError(f"unsupported target model type {type(model).__name__}")


class _CachedParallelDrafter:
    """Transformer drafter state: exactly one forward per draft call.

    The forward covers [not-yet-cached committed tokens || mask tokens];
    real-token entries are committed to the drafter cache, mask entries are
    rolled back.
    """

    def __init__(self, drafter: ParallelDrafter, temperature: float, prompt: list[int]) -> None:
        self.drafter = drafter
        self.temperature = temperature
        self.cache = KVCache(drafter.model)
        self.queue = list(prompt)

    def draft(self, rng: Rng) -> tuple[list[TokenDistribution], int, int]:
        k = self.drafter.k
        v = self.drafter.vocab_size
        nq = len(self.queue)
        m = self.cache.committed_len
        tokens = self.queue + [v + j for j in range(k)]
        positions = np.arange(m, m + nq + k)
        total = m + nq + k
        mask = np.zeros((nq + k, total), dtype=bool)
        for i in range(nq + k):
            mask[i, : m + i + 1] = True
        t0 = time.perf_counter_ns()
        logits, _ = forward_step(self.drafter.model, self.cache, tokens, positions, mask)
        dt = time.perf_counter_ns() - t0
        self.cache.commit_block(list(range(nq)))
        self.queue = []
        dists = [apply_temperature(logits[nq - 1 + j], self.temperature) for j in range(k + 1)]
        return dists, dt, 1

    def on_commit(self, tokens: list[int]) -> None:
        self.queue.extend(tokens)


class _StatelessDrafter:
    """Adapter for drafters that recompute from the full committed prefix."""

    def __init__(self, drafter, temperature: float, prompt: list[int], forwards_per_call: int) -> None:
        self.drafter = drafter
        self.temperature = temperature
        self.committed = list(prompt)
        self.forwards_per_call = forwards_per_call

    def draft(self, rng: Rng):
        t0 = time.perf_counter_ns()
        dists = self.drafter.draft_distributions(self.committed, self.temperature)
        return dists, time.perf_counter_ns() - t0, self.forwards_per_call

    def on_commit(self, tokens: list[int]) -> None:
        self.committed.extend(tokens)


def _make_drafter(drafter, temperature: float, prompt: list[int]):
    if isinstance(drafter, ParallelDrafter):
        return _CachedParallelDrafter(drafter, temperature, prompt)
    if isinstance(drafter, TabularParallelDrafter):
        return _StatelessDrafter(drafter, temperature, prompt, forwards_per_call=1)
    if isinstance(drafter, UnrolledDrafter):
        return _StatelessDrafter(drafter, temperature, prompt, forwards_per_call=drafter.k + 1)
    raise InvalidInputError(f"unsupported drafter type {type(drafter).__name__}")


class DecodeSession:
    """One speculative decoding run: target, drafter, topology, output state."""

    def __init__(
        self,
        target,
        drafter,
        topology: TreeTopology,
        prompt,
        min_length: int,
        temperature: float,
        rng: Rng,
        drafter_temperature: float | None = None,
    ) -> None:
        vocab_size = target.vocab_size if isinstance(target, TabularLM) else target.config.vocab_size
        self.prompt = _check_prompt(prompt, vocab_size)
        k = drafter.k
        if topology.max_depth > k + 1:
            raise InvalidInputError(
                f"topology depth {topology.max_depth} needs k >= {topology.max_depth - 1}, drafter has {k}"
            )
        self.topology = topology
        self.temperature = float(temperature)
        self.drafter_temperature = (
            self.temperature if drafter_temperature is None else float(drafter_temperature)
        )
        self.min_length = int(min_length)
        self.rng = rng
        self.tree_mode = "rank" if self.temperature == 0.0 else "sampled"
        self.target = _make_target(target, self.temperature, self.prompt)
        self.drafter = _make_drafter(drafter, self.drafter_temperature, self.prompt)
        self.output = list(self.prompt)
        self.trace = DecodeTrace(engine="speculative", prefill_ns=self.target.prefill_ns)

    def run_round(self) -> RoundOutcome:
        dists, draft_ns, drafter_fwd = self.drafter.draft(self.rng)
        tree = build_draft_tree(dists, self.topology, mode=self.tree_mode, rng=self.rng)
        root, nodes, verify_ns, target_fwd = self.target.tree_dists(tree)
        outcome = verify_tree(tree, root, nodes, self.rng)
        outcome.draft_ns = draft_ns
        outcome.verify_ns = verify_ns
        self.target.commit_round(outcome)
        self.drafter.on_commit(outcome.tokens)
        self.output.extend(outcome.tokens)
        self.trace.rounds.append(
            RoundRecord(
                round=len(self.trace.rounds),
                draft_ns=draft_ns,
                verify_ns=verify_ns,
                proposed=outcome.proposed,
                accepted=outcome.accepted_count,
                committed_tokens=len(outcome.tokens),
                drafter_forwards=drafter_fwd,
                target_forwards=target_fwd,
            )
        )
        return outcome

    def run(self) -> tuple[list[int], DecodeTrace]:
        while len(self.output) < self.min_length:
            self.run_round()
        return self.output, self.trace


def speculative_decode(
    target,
    drafter,
    topology: TreeTopology,
    prompt,
    min_length: int,
    temperature: float,
    rng: Rng,
    drafter_temperature: float | None = None,
) -> tuple[list[int], DecodeTrace]:
    """Decode until the output (prompt included) reaches min_length tokens.

    Uses one drafter call and one target forward per round.  The output
    sequence is distributed identically to autoregressive sampling from the
    target at the same temperature.
    """
    session = DecodeSession(
        target, drafter, topology, prompt, min_length, temperature, rng, drafter_temperature
    )
    return session.run()


def autoregressive_decode(target, prompt, min_length: int, temperature: float, rng: Rng):
    """Plain sampling baseline: one target forward per emitted token."""
    vocab_size = target.vocab_size if isinstance(target, TabularLM) else target.config.vocab_size
    prompt = _check_prompt(prompt, vocab_size)
    session = _make_target(target, temperature, prompt)
    trace = DecodeTrace(engine="autoregressive", prefill_ns=session.prefill_ns)
    output = list(prompt)
    while len(output) < min_length:
        dist, dt, fwd = session.step_dist()
        tok = sample(dist, rng)
        session.commit_token(tok)
        output.append(tok)
        trace.rounds.append(
            RoundRecord(
                round=len(trace.rounds),
                draft_ns=0,
                verify_ns=dt,
                proposed=0,
                accepted=0,
                committed_tokens=1,
                drafter_forwards=0,
                target_forwards=fwd,
            )
        )
    return output, trace


class _TransformerChainDrafter:
    """Sequential drafter state for the chain baseline: gamma forwards/round."""

    def __init__(self, model: TinyTransformer, temperature: float, prompt: list[int]) -> None:
        self.model = model
        self.temperature = temperature
        self.cache = KVCache(model)
        self.queue = list(prompt)

    def draft_chain(self, gamma: int, rng: Rng):
        drafted: list[int] = []
        qdists: list[TokenDistribution] = []
        total_ns = 0
        m = self.cache.committed_len
        block: list[int] = []
        for step in range(gamma):
            new = self.queue if step == 0 else [drafted[-1]]
            if step == 0:
                self.queue = []
            nq = len(new)
            start = m + len(block)
            maskrows = np.zeros((nq, m + len(block) + nq), dtype=bool)
            for i in range(nq):
                maskrows[i, : start + i + 1] = True
            t0 = time.perf_counter_ns()
            logits, _ = forward_step(
                self.model, self.cache, new, np.arange(start, start + nq), maskrows
            )
            total_ns += time.perf_counter_ns() - t0
            block.extend(new)
            dist = apply_temperature(logits[-1], self.temperature)
            qdists.append(dist)
            drafted.append(sample(dist, rng))
        self._block_real = len(block)
        return drafted, qdists, total_ns, gamma

    def on_round(self, accepted: int, drafted: list[int], committed: list[int]) -> None:
        # block holds [queue..., t_1..t_{gamma-1}]; keep queue + accepted drafted
        nq = self._block_real - (len(drafted) - 1)
        keep = list(range(nq + min(accepted, len(drafted) - 1)))
        self.cache.commit_block(keep)
        cached = nq + min(accepted, len(drafted) - 1) - nq  # accepted drafted in cache
        self.queue = committed[cached:]


class _TabularChainDrafter:
    def __init__(self, model: TabularLM, temperature: float, prompt: list[int]) -> None:
        self.model = model
        self.temperature = temperature
        self.committed = list(prompt)

    def draft_chain(self, gamma: int, rng: Rng):
        drafted: list[int] = []
        qdists: list[TokenDistribution] = []
        t0 = time.perf_counter_ns()
        run = list(self.committed)
        for _ in range(gamma):
            dist = self.model.next_distribution(run, self.temperature)
            qdists.append(dist)
            tok = sample(dist, rng)
            drafted.append(tok)
            run.append(tok)
        return drafted, qdists, time.perf_counter_ns() - t0, gamma

    def on_round(self, accepted: int, drafted: list[int], committed: list[int]) -> None:
        self.committed.extend(committed)


def chain_sps_decode(
    target,
    drafter,
    prompt,
    min_length: int,
    gamma: int,
    temperature: float,
    rng: Rng,
    drafter_temperature: float | None = None,
):
    """Classic draft-then-verify baseline with gamma sequential drafter steps.

    The drafter proposes gamma tokens autoregressively (each conditioned on
    its own earlier proposals); the target scores the chain in one forward;
    acceptance walks the chain left to right with the same accept/residual
    rule as tree verification.  Lossless for any drafter.
    """
    if gamma < 1:
        raise InvalidInputError(f"gamma must be >= 1, got {gamma}")
    vocab_size = target.vocab_size if isinstance(target, TabularLM) else target.config.vocab_size
    prompt = _check_prompt(prompt, vocab_size)
    dtemp = temperature if drafter_temperature is None else drafter_temperature
    target_sess = _make_target(target, temperature, prompt)
    if isinstance(drafter, TinyTransformer):
        drafter_sess = _TransformerChainDrafter(drafter, dtemp, prompt)
    elif isinstance(drafter, TabularLM):
        drafter_sess = _TabularChainDrafter(drafter, dtemp, prompt)
    else:
        raise InvalidInputError(f"unsupported chain drafter type {type(drafter).__name__}")
    trace = DecodeTrace(engine="chain", prefill_ns=target_sess.prefill_ns)
    output = list(prompt)
    while len(output) < min_length:
        drafted, qdists, draft_ns, drafter_fwd = drafter_sess.draft_chain(gamma, rng)
        pdists, verify_ns, target_fwd = target_sess.chain_dists(drafted)
        committed: list[int] = []
        accepted = 0
        stopped = False
        for i, tok in enumerate(drafted):
            r = rng.next_uniform()
            p_row = pdists[i].probs
            ratio = _accept_ratio(float(p_row[tok]), qdists[i][tok])
            if r < ratio:
                committed.append(tok)
                accepted += 1
                continue
            diff = p_row - qdists[i].probs
            pos = np.where(diff > 0.0, diff, 0.0)
            total = float(np.cumsum(pos)[-1])
            if total <= DEGENERATE_EPS:
                committed.append(tok)
                accepted += 1
                continue
            committed.append(_sample_probs(pos / total, rng))
            stopped = True
            break
        if not stopped:
            committed.append(_sample_probs(pdists[gamma].probs, rng))
        target_sess.commit_chain(accepted, committed)
        drafter_sess.on_round(accepted, drafted, committed)
        output.extend(committed)
        trace.rounds.append(
            RoundRecord(
                round=len(trace.rounds),
                draft_ns=draft_ns,
                verify_ns=verify_ns,
                proposed=gamma,
                accepted=accepted,
                committed_tokens=len(committed),
                drafter_forwards=drafter_fwd,
                target_forwards=target_fwd,
            )
        )
    return output, trace
