"""Pure-Python Monte-Carlo kernels over flattened tabular models.

These run many independent decode trials and histogram the produced
sequences, which is how losslessness is checked: the empirical sequence
distribution from speculative decoding must converge to the exact target
sequence distribution.

specdesk._mc is the compiled twin of this module.  Both kernels, and the
reference engine in specdesk.engine, consume uniform draws in the same
order and do floating-point reductions in the same sequential order, so a
single trial is reproducible bit for bit across all three.

Model flattening (see specdesk.mc): an order-o table (conditioning on the
last o tokens) becomes a dense (V**o, V) array of temperature-scaled rows,
and a context is a rolling base-V code over the last o tokens (most recent
token in the lowest digit).  Drafters add a lookahead axis and, for greedy
decoding, a precomputed rank -> token table per context.

Stats vector layout (int64, length 8):
  [rounds, committed, examined, accepted, forced, violations,
   min_round_commit, max_round_commit]
where examined counts candidate accept/reject decisions, accepted counts
accept decisions (forced ones included, tallied again in forced), and
violations counts rounds whose commit count left [1, max_depth + 1].
"""

from __future__ import annotations

import numpy as np

from .core import DEGENERATE_EPS, Rng, derive_seed

__all__ = [
    "run_autoregressive_trace",
    "run_autoregressive_trials",
    "run_chain_trace",
    "run_chain_trials",
    "run_speculative_trace",
    "run_speculative_trials",
]


def _ctx_code(tokens, order: int, vocab: int) -> int:
    if order <= 0:
        return 0
    code = 0
    for t in tokens[-order:]:
        code = code * vocab + int(t)
    return code


def _roll(code: int, tok: int, order: int, mod: int, vocab: int) -> int:
    if order <= 0:
        return 0
    return (code % mod) * vocab + tok


def _draw(row: np.ndarray, rng: Rng) -> int:
    """One inverse-CDF draw; matches core.sample and the compiled kernel."""
    u = rng.next_uniform()
    cum = np.cumsum(row)
    idx = int(np.searchsorted(cum, u, side="right"))
    if idx >= row.shape[0]:
        idx = row.shape[0] - 1
        while idx > 0 and row[idx] <= 0.0:
            idx -= 1
    return idx


def _seq_sum(arr: np.ndarray) -> float:
    # cumsum is sequential for every length; np.sum switches to pairwise
    # blocks at length 8 and would diverge from the compiled loop
    return float(np.cumsum(arr)[-1])


class _Stats:
    __slots__ = ("rounds", "committed", "examined", "accepted", "forced",
                 "violations", "min_commit", "max_commit")

    def __init__(self) -> None:
        self.rounds = 0
        self.committed = 0
        self.examined = 0
        self.accepted = 0
        self.forced = 0
        self.violations = 0
        self.min_commit = 0
        self.max_commit = 0

    def note_round(self, commit: int, max_depth: int) -> None:
        self.rounds += 1
        self.committed += commit
        if self.rounds == 1 or commit < self.min_commit:
            self.min_commit = commit
        if commit > self.max_commit:
            self.max_commit = commit
        if commit < 1 or commit > max_depth + 1:
            self.violations += 1

    def vector(self) -> np.ndarray:
        return np.array(
            [self.rounds, self.committed, self.examined, self.accepted,
             self.forced, self.violations, self.min_commit, self.max_commit],
            dtype=np.int64,
        )


def _spec_round(
    target_probs, t_order, t_mod, drafter_probs, rank_tokens, d_order, d_mod,
    parents, depths, ranks, kids, mode, t_ctx, d_ctx, rng, stats, max_depth,
    force_accept,
):
    """One speculative round; returns (tokens, new t_ctx, new d_ctx)."""
    vocab = target_probs.shape[1]
    n = parents.shape[0]
    tokens = [0] * n
    qp = [0.0] * n
    for i in range(n):
        row = drafter_probs[d_ctx, depths[i] - 1]
        if mode == 0:
            tok = int(rank_tokens[d_ctx, depths[i] - 1, ranks[i]])
        else:
            tok = _draw(row, rng)
        tokens[i] = tok
        qp[i] = float(row[tok])

    p_row = target_probs[t_ctx]
    cur_t = t_ctx
    node = -1
    out: list[int] = []
    while True:
        ks = kids[n if node == -1 else node]
        if not ks:
            break
        advanced = False
        for s in ks:
            r = rng.next_uniform()
            tok = tokens[s]
            pt = float(p_row[tok])
            qs = qp[s]
            if pt <= 0.0:
                ratio = 0.0
            elif qs <= 0.0 or pt >= qs:
                ratio = 1.0
            else:
                ratio = pt / qs
            stats.examined += 1
            if force_accept or r < ratio:
                stats.accepted += 1
                advanced = True
            else:
                q_row = drafter_probs[d_ctx, depths[s] - 1]
                diff = p_row - q_row
                pos = np.where(diff > 0.0, diff, 0.0)
                total = _seq_sum(pos)
                if total <= DEGENERATE_EPS:
                    stats.forced += 1
                    stats.accepted += 1
                    advanced = True
                else:
                    p_row = pos / total
                    continue
            out.append(tok)
            cur_t = _roll(cur_t, tok, t_order, t_mod, vocab)
            p_row = target_probs[cur_t]
            node = s
            break
        if not advanced:
            break

    bonus = _draw(p_row, rng)
    out.append(bonus)
    cur_t = _roll(cur_t, bonus, t_order, t_mod, vocab)
    new_d = d_ctx
    for tok in out:
        new_d = _roll(new_d, tok, d_order, d_mod, vocab)
    stats.note_round(len(out), max_depth)
    return out, cur_t, new_d


def _child_lists(parents) -> list[list[int]]:
    n = parents.shape[0]
    kids: list[list[int]] = [[] for _ in range(n + 1)]
    for i in range(n):
        p = int(parents[i])
        kids[n if p == -1 else p].append(i)
    return kids


def run_speculative_trials(
    target_probs, t_order, drafter_probs, rank_tokens, d_order,
    parents, depths, ranks, mode, prompt, min_new, bin_len,
    trials, base_seed, _force_accept=False,
):
    vocab = target_probs.shape[1]
    t_mod = vocab ** max(t_order - 1, 0)
    d_mod = vocab ** max(d_order - 1, 0)
    max_depth = int(np.max(depths)) if depths.shape[0] else 0
    kids = _child_lists(parents)
    counts = np.zeros(vocab ** bin_len, dtype=np.int64)
    stats = _Stats()
    t0 = _ctx_code(prompt, t_order, vocab)
    d0 = _ctx_code(prompt, d_order, vocab)
    for trial in range(trials):
        rng = Rng(derive_seed(base_seed, trial))
        t_ctx, d_ctx = t0, d0
        produced = 0
        code = 0
        while produced < min_new:
            toks, t_ctx, d_ctx = _spec_round(
                target_probs, t_order, t_mod, drafter_probs, rank_tokens,
                d_order, d_mod, parents, depths, ranks, kids, mode,
                t_ctx, d_ctx, rng, stats, max_depth, _force_accept,
            )
            for tok in toks:
                if produced < bin_len:
                    code = code * vocab + tok
                produced += 1
        counts[code] += 1
    return counts, stats.vector()


def run_speculative_trace(
    target_probs, t_order, drafter_probs, rank_tokens, d_order,
    parents, depths, ranks, mode, prompt, min_new, seed,
):
    """Single trial with an explicit seed; returns (tokens, commits per round)."""
    vocab = target_probs.shape[1]
    t_mod = vocab ** max(t_order - 1, 0)
    d_mod = vocab ** max(d_order - 1, 0)
    max_depth = int(np.max(depths)) if depths.shape[0] else 0
    kids = _child_lists(parents)
    stats = _Stats()
    rng = Rng(seed)
    t_ctx = _ctx_code(prompt, t_order, vocab)
    d_ctx = _ctx_code(prompt, d_order, vocab)
    out: list[int] = []
    commits: list[int] = []
    while len(out) < min_new:
        toks, t_ctx, d_ctx = _spec_round(
            target_probs, t_order, t_mod, drafter_probs, rank_tokens,
            d_order, d_mod, parents, depths, ranks, kids, mode,
            t_ctx, d_ctx, rng, stats, max_depth, False,
        )
        out.extend(toks)
        commits.append(len(toks))
    return np.array(out, dtype=np.int64), np.array(commits, dtype=np.int64)


def run_autoregressive_trials(target_probs, t_order, prompt, n_new, bin_len, trials, base_seed):
    vocab = target_probs.shape[1]
    t_mod = vocab ** max(t_order - 1, 0)
    counts = np.zeros(vocab ** bin_len, dtype=np.int64)
    stats = _Stats()
    t0 = _ctx_code(prompt, t_order, vocab)
    for trial in range(trials):
        rng = Rng(derive_seed(base_seed, trial))
        ctx = t0
        code = 0
        for i in range(n_new):
            tok = _draw(target_probs[ctx], rng)
            ctx = _roll(ctx, tok, t_order, t_mod, vocab)
            if i < bin_len:
                code = code * vocab + tok
            stats.note_round(1, 0)
        counts[code] += 1
    return counts, stats.vector()


def run_autoregressive_trace(target_probs, t_order, prompt, n_new, seed):
    vocab = target_probs.shape[1]
    t_mod = vocab ** max(t_order - 1, 0)
    rng = Rng(seed)
    ctx = _ctx_code(prompt, t_order, vocab)
    out = np.empty(n_new, dtype=np.int64)
    for i in range(n_new):
        tok = _draw(target_probs[ctx], rng)
        ctx = _roll(ctx, tok, t_order, t_mod, vocab)
        out[i] = tok
    return out


def _chain_round(target_probs, t_order, t_mod, chain_probs, d_order, d_mod,
                 gamma, t_ctx, d_ctx, rng, stats):
    vocab = target_probs.shape[1]
    drafted: list[int] = []
    qctx: list[int] = []
    run_d = d_ctx
    for _ in range(gamma):
        row = chain_probs[run_d]
        tok = _draw(row, rng)
        drafted.append(tok)
        qctx.append(run_d)
        run_d = _roll(run_d, tok, d_order, d_mod, vocab)

    pctx = t_ctx
    out: list[int] = []
    stopped = False
    for i in range(gamma):
        tok = drafted[i]
        p_row = target_probs[pctx]
        q_row = chain_probs[qctx[i]]
        r = rng.next_uniform()
        pt = float(p_row[tok])
        qs = float(q_row[tok])
        if pt <= 0.0:
            ratio = 0.0
        elif qs <= 0.0 or pt >= qs:
            ratio = 1.0
        else:
            ratio = pt / qs
        stats.examined += 1
        if r < ratio:
            stats.accepted += 1
        else:
            diff = p_row - q_row
            pos = np.where(diff > 0.0, diff, 0.0)
            total = _seq_sum(pos)
            if total <= DEGENERATE_EPS:
                stats.forced += 1
                stats.accepted += 1
            else:
                x = _draw(pos / total, rng)
                out.append(x)
                pctx = _roll(pctx, x, t_order, t_mod, vocab)
                stopped = True
                break
        out.append(tok)
        pctx = _roll(pctx, tok, t_order, t_mod, vocab)
    if not stopped:
        bonus = _draw(target_probs[pctx], rng)
        out.append(bonus)
        pctx = _roll(pctx, bonus, t_order, t_mod, vocab)
    new_d = d_ctx
    for tok in out:
        new_d = _roll(new_d, tok, d_order, d_mod, vocab)
    stats.note_round(len(out), gamma)
    return out, pctx, new_d


def run_chain_trials(target_probs, t_order, chain_probs, d_order, gamma,
                     prompt, min_new, bin_len, trials, base_seed):
    vocab = target_probs.shape[1]
    t_mod = vocab ** max(t_order - 1, 0)
    d_mod = vocab ** max(d_order - 1, 0)
    counts = np.zeros(vocab ** bin_len, dtype=np.int64)
    stats = _Stats()
    t0 = _ctx_code(prompt, t_order, vocab)
    d0 = _ctx_code(prompt, d_order, vocab)
    for trial in range(trials):
        rng = Rng(derive_seed(base_seed, trial))
        t_ctx, d_ctx = t0, d0
        produced = 0
        code = 0
        while produced < min_new:
            toks, t_ctx, d_ctx = _chain_round(
                target_probs, t_order, t_mod, chain_probs, d_order, d_mod,
                gamma, t_ctx, d_ctx, rng, stats,
            )
            for tok in toks:
                if produced < bin_len:
                    code = code * vocab + tok
                produced += 1
        counts[code] += 1
    return counts, stats.vector()


def run_chain_trace(target_probs, t_order, chain_probs, d_order, gamma,
                    prompt, min_new, seed):
    vocab = target_probs.shape[1]
    t_mod = vocab ** max(t_order - 1, 0)
    d_mod = vocab ** max(d_order - 1, 0)
    stats = _Stats()
    rng = Rng(seed)
    t_ctx = _ctx_code(prompt, t_order, vocab)
    d_ctx = _ctx_code(prompt, d_order, vocab)
    out: list[int] = []
    commits: list[int] = []
    while len(out) < min_new:
        toks, t_ctx, d_ctx = _chain_round(
            target_probs, t_order, t_mod, chain_probs, d_order, d_mod,
            gamma, t_ctx, d_ctx, rng, stats,
        )
        out.extend(toks)
        commits.append(len(toks))
    return np.array(out, dtype=np.int64), np.array(commits, dtype=np.int64)
