"""Acceptance gate: one test per release criterion, at the stated tolerance.

Each criterion is a separate test so `pytest -v` prints one pass/fail line
per criterion; run with -s to also see the measured numbers.  The heavy
statistical checks (10^6 trials) use the Monte-Carlo kernels and finish in
seconds on the compiled backend.
"""

import json
import textwrap

import numpy as np
import pytest

from specdesk import mc
from specdesk.cli import main, read_metrics_csv
from specdesk.core import IGNORE_LABEL, Rng, derive_seed, tv_distance
from specdesk.drafter import (
    ParallelDrafter,
    UnrolledDrafter,
    verify_train_inference_consistency,
)
from specdesk.engine import autoregressive_decode, chain_sps_decode, speculative_decode
from specdesk.mc import KernelStats, flatten_drafter, flatten_lm
from specdesk.model import ModelConfig, TinyTransformer, save_checkpoint
from specdesk.tabular import (
    TabularLM,
    TabularParallelDrafter,
    random_tabular_drafter,
    random_tabular_lm,
)
from specdesk.training import (
    TrainConfig,
    eagle_loss,
    eagle_loss_grads,
    medusa_loss,
    medusa_parallel_loss,
    sample_corpus,
    train_drafter,
)
from specdesk.tree import chain_topology, default_topology

TRIALS = 10**6
BASE = 20260815

# every kernel run in this module deposits its stats here; criterion 4
# asserts the aggregate violation count is zero
KERNEL_STATS: list[tuple[str, KernelStats]] = []


def _random_combo(rng, idx):
    """One randomized (target, drafter, topology, temperatures, prompt) case.

    Sequence lengths are capped so the binned space stays small enough for
    two 10^6-sample histograms to resolve a 0.01 TV gap.
    """
    vocab = int(rng.choice([2, 3, 4, 5, 6, 8]))
    length = {2: 4, 3: 4, 4: 3, 5: 2, 6: 2, 8: 2}[vocab]
    t_order = int(rng.integers(0, 3))
    d_order = int(rng.integers(0, 3))
    k = int(rng.integers(1, 5))
    alpha = float(rng.choice([0.4, 1.0, 3.0]))
    temperature = float(rng.choice([0.7, 1.0, 1.3]))
    dtemp = [None, 0.8, 1.5][int(rng.integers(0, 3))]
    target = random_tabular_lm(vocab, t_order, alpha, seed=derive_seed(BASE, 10 * idx))
    drafter = random_tabular_drafter(
        vocab, d_order, k, alpha, seed=derive_seed(BASE, 10 * idx + 1)
    )
    if vocab >= 4 and rng.integers(0, 2) == 0:
        topo = default_topology(k)
    else:
        topo = chain_topology(k)
    prompt = [int(t) for t in rng.integers(0, vocab, size=max(2, t_order, d_order))]
    return target, drafter, topo, temperature, dtemp, prompt, length


def test_criterion_01_losslessness_tv():
    """20 randomized combos: TV(speculative, autoregressive) < 0.01 at 10^6."""
    rng = np.random.default_rng(BASE)
    worst = 0.0
    for idx in range(20):
        target, drafter, topo, temp, dtemp, prompt, length = _random_combo(rng, idx)
        counts_s, stats = mc.run_speculative_trials(
            target, drafter, topo, prompt, length, length, TRIALS,
            derive_seed(BASE, 1000 + idx), temp, dtemp,
        )
        counts_a, _ = mc.run_autoregressive_trials(
            target, prompt, length, length, TRIALS,
            derive_seed(BASE, 2000 + idx), temp,
        )
        KERNEL_STATS.append((f"lossless[{idx}]", stats))
        tv = tv_distance(counts_s / TRIALS, counts_a / TRIALS)
        worst = max(worst, tv)
        assert tv < 0.01, (idx, tv, topo.max_depth, temp, dtemp)
    print(f"criterion 01 PASS: 20 combos, worst TV {worst:.5f} < 0.01 at 10^6 trials")


def test_criterion_02_single_candidate_branches():
    """Accept frequency of one known candidate equals min(1, p/q) +/- 0.005.

    Rank-mode trees with temperature-1 tables pin the examined candidate to
    the drafter argmax, so the unconditional acceptance frequency is exactly
    the ratio rule for that (p, q) pair; the grid covers both branches.
    """
    topo = chain_topology(1)
    parents = np.array(topo.parents, dtype=np.int64)
    depths = np.array(topo.depths, dtype=np.int64)
    ranks = np.array(topo.ranks, dtype=np.int64)
    kern = mc._pick(None)
    prompt = np.array([0], dtype=np.int64)
    worst = 0.0
    for q0 in (0.55, 0.7, 0.85):
        for p0 in (0.1, 0.3, 0.5, 0.7, 0.9):
            target = TabularLM(2, 0, {(): np.array([p0, 1.0 - p0])})
            drafter = TabularParallelDrafter(2, 0, 0, {(): np.array([[q0, 1.0 - q0]])})
            tp = flatten_lm(target, 1.0)
            dp, rk = flatten_drafter(drafter, 1.0)
            _, vec = kern.run_speculative_trials(
                tp, 0, dp, rk, 0, parents, depths, ranks, 0, prompt,
                1, 1, TRIALS, derive_seed(BASE, int(1000 * p0 + 10 * q0)),
            )
            stats = KernelStats.from_vector(vec)
            KERNEL_STATS.append((f"branch[p={p0},q={q0}]", stats))
            assert stats.examined == TRIALS
            freq = stats.accepted / stats.examined
            expect = min(1.0, p0 / q0)
            worst = max(worst, abs(freq - expect))
            assert abs(freq - expect) <= 0.005, (p0, q0, freq, expect)
    print(f"criterion 02 PASS: 15-cell (p,q) grid, worst |freq - min(1,p/q)| "
          f"{worst:.5f} <= 0.005 at 10^6 trials")


def test_criterion_03_chain_analytic_rate():
    """vocab-2 chain check: sum min(p, q) = 0.8 -> acceptance 0.800 +/- 0.005."""
    target = TabularLM(2, 0, {(): np.array([0.7, 0.3])})
    drafter = TabularLM(2, 0, {(): np.array([0.5, 0.5])})
    assert float(np.sum(np.minimum([0.7, 0.3], [0.5, 0.5]))) == pytest.approx(0.8)
    _, stats = mc.run_chain_trials(
        target, drafter, 1, [0], 1, 1, TRIALS, derive_seed(BASE, 3), 1.0, None
    )
    KERNEL_STATS.append(("chain-rate", stats))
    rate = stats.accepted / stats.examined
    assert abs(rate - 0.800) <= 0.005, rate
    print(f"criterion 03 PASS: empirical acceptance {rate:.4f} vs 0.800 analytic")


def test_criterion_04_round_bounds_zero_violations():
    """Committed tokens per round stay in [1, depth+1] with zero violations."""
    rng = np.random.default_rng(BASE + 4)
    checked = 0
    for idx in range(25):
        target, drafter, topo, temp, dtemp, prompt, length = _random_combo(rng, idx)
        _, stats = mc.run_speculative_trials(
            target, drafter, topo, prompt, length, length, 20_000,
            derive_seed(BASE, 4000 + idx), temp, dtemp,
        )
        KERNEL_STATS.append((f"fuzz[{idx}]", stats))
        assert stats.min_round_commit >= 1
        assert stats.max_round_commit <= topo.max_depth + 1
        checked += stats.rounds
    bad = [(label, s.violations) for label, s in KERNEL_STATS if s.violations]
    assert not bad, bad
    total_rounds = sum(s.rounds for _, s in KERNEL_STATS)
    print(f"criterion 04 PASS: 0 violations across {len(KERNEL_STATS)} runs "
          f"({total_rounds} rounds; {checked} in the dedicated fuzz battery)")


def _transformer_target(vocab=9, seed=31):
    cfg = ModelConfig(layers=1, width=16, heads=2, ff_width=32,
                      vocab_size=vocab, max_position=128)
    return TinyTransformer.fresh(cfg, seed=seed, head_gain=2.0)


def test_criterion_05_perfect_drafter_bound():
    """Drafter == target, chain depth K, greedy: tau = K+1 exactly."""
    target = _transformer_target()
    for K in (1, 2, 4):
        drafter = UnrolledDrafter(target, K)
        _, trace = speculative_decode(
            target, drafter, chain_topology(K), [0, 1], 2 + 12, 0.0, Rng(5)
        )
        assert all(r.committed_tokens == K + 1 for r in trace.rounds)
        assert trace.tau() == K + 1
    print("criterion 05 PASS: tau == K+1 exactly for K in {1, 2, 4}")


def test_criterion_06_train_inference_consistency():
    """200 randomized (drafter, sequence, K) cases agree train vs inference."""
    rng = np.random.default_rng(BASE + 6)
    for case in range(200):
        vocab = int(rng.integers(5, 13))
        k = int(rng.integers(0, 5))
        width = int(rng.choice([8, 16]))
        drafter = ParallelDrafter.fresh(
            vocab, k, seed=int(rng.integers(0, 2**31)), width=width, heads=2,
            ff_width=2 * width, max_position=64,
        )
        seq = [int(t) for t in rng.integers(0, vocab, size=int(rng.integers(2, 7)))]
        assert verify_train_inference_consistency(drafter, seq), (case, vocab, k, seq)
    print("criterion 06 PASS: 200/200 randomized consistency cases")


def _fd_relative(f, x, analytic, coords, h=1e-6):
    worst = 0.0
    flat = x.reshape(-1)
    g = analytic.reshape(-1)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        dn = f()
        flat[i] = orig
        num = (up - dn) / (2 * h)
        scale = max(abs(num), abs(g[i]), 1e-8)
        worst = max(worst, abs(num - g[i]) / scale)
    return worst


def test_criterion_07_gradient_checks():
    """Analytic vs central-difference gradients within 1e-3 relative,
    64 sampled coordinates per tensor, for all three training objectives."""
    rng = np.random.default_rng(BASE + 7)
    worst = 0.0

    logits_a = rng.normal(size=(5, 16))
    labels_a = [3, IGNORE_LABEL, 7, 0, 15]
    _, grad_a = medusa_parallel_loss(logits_a, labels_a)
    coords = rng.choice(logits_a.size, size=64, replace=False)
    worst = max(worst, _fd_relative(
        lambda: medusa_parallel_loss(logits_a, labels_a)[0], logits_a, grad_a, coords))

    logits_b = rng.normal(size=(4, 16))
    labels_b = [1, 9, IGNORE_LABEL, 12]
    _, grad_b = medusa_loss(logits_b, labels_b)
    worst = max(worst, _fd_relative(
        lambda: medusa_loss(logits_b, labels_b)[0], logits_b, grad_b,
        range(logits_b.size)))

    feat = rng.normal(size=(8, 8)) * 1.4
    true = rng.normal(size=(8, 8))
    cls = rng.normal(size=(4, 16))
    labels_c = [2, 11, 0, 5]
    _, d_feat, d_cls = eagle_loss_grads(feat, true, cls, labels_c, 0.7, 1.3)
    loss_fn = lambda: eagle_loss(feat, true, cls, labels_c, 0.7, 1.3)
    worst = max(worst, _fd_relative(loss_fn, feat, d_feat, range(feat.size)))
    worst = max(worst, _fd_relative(loss_fn, cls, d_cls, range(cls.size)))

    assert worst <= 1e-3, worst
    print(f"criterion 07 PASS: worst relative gradient error {worst:.2e} <= 1e-3")


def test_criterion_08_loss_unit_values():
    """The three derived loss examples match their stated values to 4dp."""
    def logits_for(rows):
        rows = np.asarray(rows, dtype=np.float64)
        return np.log(np.where(rows > 0, rows, 1e-300))

    from specdesk.training import LossWeights

    loss1, _ = medusa_parallel_loss(
        logits_for([[0.5, 0.5, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]]),
        [0, 2], LossWeights(0.8))
    loss2, _ = medusa_loss(logits_for([[0.25, 0.25, 0.25, 0.25]]), [1],
                           LossWeights(1.0))
    e = np.exp(-1.0)
    loss3 = eagle_loss(np.array([2.0]), np.array([0.0]),
                       logits_for([[e, 1.0 - e]]), [0])
    for got, stated in ((loss1, 1.8021), (loss2, 1.3863), (loss3, 2.5)):
        assert abs(got - stated) < 1e-4, (got, stated)
    print(f"criterion 08 PASS: losses {loss1:.4f}/{loss2:.4f}/{loss3:.4f} "
          "match 1.8021/1.3863/2.5000 within 1e-4")


def test_criterion_09_drafter_call_economy():
    """Traces show 1 drafter forward per round (parallel) vs gamma (chain)."""
    target = _transformer_target()
    parallel = ParallelDrafter.from_target(target, 3, seed=32)
    _, trace = speculative_decode(
        target, parallel, default_topology(3), [0, 1], 2 + 12, 1.0, Rng(6)
    )
    assert len(trace.rounds) >= 3
    assert all(r.drafter_forwards == 1 for r in trace.rounds)
    assert all(r.target_forwards == 1 for r in trace.rounds)
    gammas = {}
    for gamma in (2, 3):
        _, ctr = chain_sps_decode(target, target, [0, 1], 2 + 12, gamma, 1.0, Rng(7))
        assert all(r.drafter_forwards == gamma for r in ctr.rounds)
        gammas[gamma] = len(ctr.rounds)
    print("criterion 09 PASS: parallel engine 1 forward/round over "
          f"{len(trace.rounds)} rounds; chain baseline gamma forwards/round "
          f"for gamma in {sorted(gammas)}")


def test_criterion_10_training_raises_tau():
    """A trained K=4 drafter beats the untrained one on held-out prompts."""
    cfg = ModelConfig(layers=2, width=32, heads=4, ff_width=64,
                      vocab_size=17, max_position=256)
    target = TinyTransformer.fresh(cfg, seed=40, head_gain=7.0)
    corpus = sample_corpus(target, 24, 36, seed=7)
    held_out = sample_corpus(target, 6, 9, seed=991)
    topo = default_topology(4)

    def mean_tau(drafter):
        taus = []
        for i, seq in enumerate(held_out):
            prompt = seq[:5]
            _, tr = speculative_decode(
                target, drafter, topo, prompt, len(prompt) + 24, 1.0,
                Rng(derive_seed(55, i)),
            )
            taus.append(tr.tau())
        return float(np.mean(taus))

    untrained = ParallelDrafter.from_target(target, 4, seed=41)
    trained = ParallelDrafter.from_target(target, 4, seed=41)
    train_drafter(trained, corpus, TrainConfig(epochs=8, lr=3e-3, mode="soft"),
                  teacher=target)
    tau_u = mean_tau(untrained)
    tau_t = mean_tau(trained)
    assert tau_t > tau_u, (tau_t, tau_u)
    print(f"criterion 10 PASS: held-out tau {tau_u:.3f} -> {tau_t:.3f} "
          "after training (strictly higher)")


def test_criterion_11_ablation_sweep(tmp_path):
    """The ablate-k command yields a monotone tau = K+1 column when the
    drafter is the target itself (perfect-drafter configuration)."""
    target = _transformer_target()
    ckpt = tmp_path / "target.ckpt"
    save_checkpoint(target, ckpt)
    out = tmp_path / "out"
    ini = tmp_path / "ablate.ini"
    ini.write_text(textwrap.dedent(f"""
        [run]
        seed = 13
        out = {out}

        [models]
        target = checkpoint:{ckpt}
        drafter = self

        [decode]
        k = 1
        topology = chain
        temperature = 0
        min_new = 8
        prompts = 0 1

        [ablate]
        ks = 1, 2, 4
    """))
    assert main(["ablate-k", "--config", str(ini)]) == 0
    rows = read_metrics_csv(out / "metrics.csv")
    assert [r["k"] for r in rows] == [1, 2, 4]
    taus = [r["tau"] for r in rows]
    for r in rows:
        assert r["tau"] == pytest.approx(r["k"] + 1, abs=1e-9)
    assert taus == sorted(taus) and taus[0] < taus[1] < taus[2]
    report = json.loads((out / "report.json").read_text())
    assert report["metadata"]["command"] == "ablate-k"
    print(f"criterion 11 PASS: ablate-k tau column {taus} == K+1, monotone")
