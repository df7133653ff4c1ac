"""Monte-Carlo kernel checks.

Three implementations must agree draw for draw: the object-level engine,
the pure-Python kernel, and (when built) the compiled kernel.  Per-trial
parity plus histogram oracles keep the fast path honest.
"""

import numpy as np
import pytest

from specdesk import mc
from specdesk.core import InvalidInputError, Rng, derive_seed, tv_distance
from specdesk.engine import autoregressive_decode, chain_sps_decode, speculative_decode
from specdesk.tabular import random_tabular_drafter, random_tabular_lm
from specdesk.tree import chain_topology, default_topology

HAVE_COMPILED = mc.kernel_backend() == "compiled"
needs_compiled = pytest.mark.skipif(not HAVE_COMPILED, reason="compiled kernel not built")


# --------------------------------------------------------- table flattening


def test_flatten_lm_rows_match_direct_lookups():
    lm = random_tabular_lm(4, 2, 0.8, 7)
    for temp in (1.0, 0.5):
        flat = mc.flatten_lm(lm, temp)
        assert flat.shape == (16, 4)
        for ctx in [(0, 0), (1, 3), (3, 2)]:
            code = ctx[0] * 4 + ctx[1]
            from specdesk.tabular import scaled_distribution

            ref = scaled_distribution(lm.next_probs(ctx), temp)
            np.testing.assert_array_equal(flat[code], ref)


def test_flatten_lm_order_zero_single_row():
    lm = random_tabular_lm(5, 0, 0.8, 3)
    flat = mc.flatten_lm(lm, 1.0)
    assert flat.shape == (1, 5)
    np.testing.assert_array_equal(flat[0], lm.next_probs((1, 2)))


def test_flatten_drafter_ranks_sorted_by_probability():
    dr = random_tabular_drafter(4, 1, 2, 0.8, 9)
    probs, ranks = mc.flatten_drafter(dr, 1.0)
    assert probs.shape == (4, 3, 4)
    assert ranks.shape == (4, 3, 4)
    for c in range(4):
        for d in range(3):
            row = probs[c, d]
            rk = ranks[c, d]
            assert sorted(rk.tolist()) == [0, 1, 2, 3]
            assert all(row[rk[i]] >= row[rk[i + 1]] for i in range(3))
            direct = dr.lookahead_probs((c,))[d]
            np.testing.assert_array_equal(row, direct)


def test_exact_sequence_distribution_vs_bruteforce():
    lm = random_tabular_lm(3, 1, 0.8, 5)
    exact = mc.exact_sequence_distribution(lm, 1.0, (1,), 2)
    assert exact.shape == (9,)
    for a in range(3):
        for b in range(3):
            p = lm.next_probs((1,))[a] * lm.next_probs((1, a))[b]
            assert abs(exact[a * 3 + b] - p) < 1e-12
    assert abs(exact.sum() - 1.0) < 1e-12


def test_exact_sequence_distribution_greedy_is_onehot():
    lm = random_tabular_lm(3, 1, 0.8, 5)
    exact = mc.exact_sequence_distribution(lm, 0.0, (1,), 3)
    assert np.count_nonzero(exact) == 1
    assert exact.max() == 1.0


def test_prompt_shorter_than_order_rejected():
    lm = random_tabular_lm(3, 2, 0.8, 5)
    dr = random_tabular_drafter(3, 1, 2, 0.8, 6)
    with pytest.raises(InvalidInputError):
        mc.run_speculative_trials(lm, dr, chain_topology(1), [0], 2, 2, 10, 1)


def test_trial_seed_is_derive_seed():
    assert mc.trial_seed(42, 7) == derive_seed(42, 7)


# ----------------------------------------------------- per-trial parity


def _models(vocab=4, t_order=1, d_order=1, k=4, seed=0):
    tgt = random_tabular_lm(vocab, t_order, 0.8, 100 + seed)
    dr = random_tabular_drafter(vocab, d_order, k, 0.8, 200 + seed)
    return tgt, dr


def test_python_kernel_matches_engine_per_trial():
    tgt, dr = _models()
    topo = default_topology(4)
    for trial in range(200):
        seed = derive_seed(5150, trial)
        toks_k, commits_k = mc.speculative_trace(
            tgt, dr, topo, [0], 6, seed, kernel="python")
        toks_e, trace = speculative_decode(tgt, dr, topo, [0], 7, 1.0, Rng(seed))
        assert list(toks_k) == toks_e[1:]
        assert list(commits_k) == [r.committed_tokens for r in trace.rounds]


@needs_compiled
def test_compiled_kernel_matches_python_spec():
    # vocab 8 regression: pairwise-vs-sequential summation differences show
    # up exactly when residual rows have length >= 8
    configs = [
        dict(vocab=4, t_order=1, d_order=1, k=4, seed=1),
        dict(vocab=8, t_order=1, d_order=1, k=3, seed=2),
        dict(vocab=8, t_order=2, d_order=1, k=2, seed=3),
        dict(vocab=3, t_order=0, d_order=0, k=2, seed=4),
        dict(vocab=5, t_order=1, d_order=2, k=4, seed=5),
    ]
    for cfg in configs:
        tgt, dr = _models(**cfg)
        # default topology needs four distinct depth-1 ranks
        topo = default_topology(cfg["k"]) if cfg["vocab"] >= 4 else chain_topology(cfg["k"])
        prompt = [0, 1][: max(1, cfg["t_order"], cfg["d_order"])]
        while len(prompt) < max(cfg["t_order"], cfg["d_order"], 1):
            prompt.append(0)
        for trial in range(40):
            seed = derive_seed(31337, trial)
            py = mc.speculative_trace(tgt, dr, topo, prompt, 8, seed, kernel="python")
            cy = mc.speculative_trace(tgt, dr, topo, prompt, 8, seed, kernel="compiled")
            np.testing.assert_array_equal(py[0], cy[0])
            np.testing.assert_array_equal(py[1], cy[1])


@needs_compiled
def test_compiled_kernel_matches_python_greedy():
    tgt, dr = _models(vocab=8, seed=9)
    topo = default_topology(4)
    for trial in range(10):
        seed = derive_seed(17, trial)
        py = mc.speculative_trace(tgt, dr, topo, [0], 8, seed,
                                  temperature=0.0, kernel="python")
        cy = mc.speculative_trace(tgt, dr, topo, [0], 8, seed,
                                  temperature=0.0, kernel="compiled")
        np.testing.assert_array_equal(py[0], cy[0])


@needs_compiled
def test_compiled_kernel_matches_python_ar_and_chain():
    tgt, _ = _models(vocab=8, seed=11)
    dr_lm = random_tabular_lm(8, 1, 0.8, 77)
    for trial in range(40):
        seed = derive_seed(23, trial)
        a_py = mc.autoregressive_trace(tgt, [0], 10, seed, kernel="python")
        a_cy = mc.autoregressive_trace(tgt, [0], 10, seed, kernel="compiled")
        np.testing.assert_array_equal(a_py, a_cy)
        c_py = mc.chain_trace(tgt, dr_lm, 3, [0], 8, seed, kernel="python")
        c_cy = mc.chain_trace(tgt, dr_lm, 3, [0], 8, seed, kernel="compiled")
        np.testing.assert_array_equal(c_py[0], c_cy[0])
        np.testing.assert_array_equal(c_py[1], c_cy[1])


def test_chain_kernel_matches_engine_per_trial():
    tgt = random_tabular_lm(4, 1, 0.8, 41)
    dr = random_tabular_lm(4, 1, 0.8, 42)
    for trial in range(100):
        seed = derive_seed(4242, trial)
        toks_k, commits_k = mc.chain_trace(tgt, dr, 2, [0], 6, seed)
        toks_e, trace = chain_sps_decode(tgt, dr, [0], 7, 2, 1.0, Rng(seed))
        assert list(toks_k) == toks_e[1:]
        assert list(commits_k) == [r.committed_tokens for r in trace.rounds]


def test_ar_kernel_matches_engine_per_trial():
    tgt = random_tabular_lm(4, 2, 0.8, 51)
    for trial in range(100):
        seed = derive_seed(888, trial)
        toks_k = mc.autoregressive_trace(tgt, [0, 1], 6, seed)
        toks_e, _ = autoregressive_decode(tgt, [0, 1], 8, 1.0, Rng(seed))
        assert list(toks_k) == toks_e[2:]


# ------------------------------------------------------------ histograms


def test_ar_kernel_histogram_matches_exact():
    tgt = random_tabular_lm(4, 1, 0.8, 61)
    trials = 60000
    counts, stats = mc.run_autoregressive_trials(tgt, [0], 3, 3, trials, 9)
    exact = mc.exact_sequence_distribution(tgt, 1.0, [0], 3)
    assert tv_distance(counts / trials, exact) < 0.02
    assert stats.rounds == trials * 3
    assert stats.committed == trials * 3


def test_speculative_kernel_histogram_lossless():
    tgt, dr = _models(seed=21)
    topo = default_topology(4)
    trials = 60000
    counts, stats = mc.run_speculative_trials(tgt, dr, topo, [0], 3, 3, trials, 77)
    exact = mc.exact_sequence_distribution(tgt, 1.0, [0], 3)
    assert tv_distance(counts / trials, exact) < 0.02
    assert stats.violations == 0
    assert 1.0 <= stats.tau <= topo.max_depth + 1


def test_speculative_kernel_greedy_exact():
    tgt, dr = _models(seed=31)
    topo = default_topology(4)
    counts, _ = mc.run_speculative_trials(tgt, dr, topo, [0], 3, 3, 400, 5,
                                          temperature=0.0)
    exact = mc.exact_sequence_distribution(tgt, 0.0, [0], 3)
    assert tv_distance(counts / 400, exact) == 0.0


def test_chain_kernel_histogram_lossless():
    tgt = random_tabular_lm(4, 1, 0.8, 71)
    dr = random_tabular_lm(4, 1, 0.8, 72)
    trials = 60000
    counts, stats = mc.run_chain_trials(tgt, dr, 2, [0], 3, 3, trials, 13)
    exact = mc.exact_sequence_distribution(tgt, 1.0, [0], 3)
    assert tv_distance(counts / trials, exact) < 0.02
    assert stats.violations == 0


def test_force_accept_breaks_losslessness():
    # fault injection: skipping the accept test must shift the histogram
    # toward the drafter and away from the target
    tgt, dr = _models(seed=81)
    topo = default_topology(4)
    trials = 30000
    counts, stats = mc.run_speculative_trials(
        tgt, dr, topo, [0], 3, 3, trials, 3, force_accept=True)
    exact = mc.exact_sequence_distribution(tgt, 1.0, [0], 3)
    assert stats.accepted == stats.examined
    assert tv_distance(counts / trials, exact) > 0.05


# ----------------------------------------------------------- stats plumbing


def test_kernel_stats_fields():
    tgt, dr = _models(seed=91)
    topo = chain_topology(2)
    _, stats = mc.run_speculative_trials(tgt, dr, topo, [0], 4, 4, 500, 15)
    assert stats.rounds > 0
    assert stats.committed >= stats.rounds  # at least one token per round
    assert 0.0 <= stats.acceptance_rate <= 1.0
    assert stats.tau == stats.committed / stats.rounds
    assert 1 <= stats.min_round_commit <= stats.max_round_commit <= topo.max_depth + 1
    assert stats.examined >= stats.accepted


def test_backend_pin_unknown_rejected():
    tgt, dr = _models()
    with pytest.raises(InvalidInputError):
        mc.speculative_trace(tgt, dr, chain_topology(1), [0], 2, 1, kernel="rust")
