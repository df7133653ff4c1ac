"""Command line front end.

Subcommands
-----------
train      train a parallel drafter against a target model
bench      speculative vs autoregressive decoding on the same prompts
lossless   Monte-Carlo check that speculative output matches the target
ablate-k   sweep the number of lookahead slots and record tau per k

Every run reads one INI config file and writes into an output directory:
report.json (metadata / timing / results sections; the results section is
byte-stable for a fixed config and seed), trace.jsonl (one record per decode
round), metrics.csv (k, tau, speedup rows), plus command-specific artifacts.

Config reference
----------------
[run]      seed, out
[models]   target, drafter: checkpoint:PATH | tabular:PATH | random-tabular
           drafter also accepts: self  (drafter evaluates the target itself)
           vocab_size, target_order, drafter_order, alpha (random-tabular)
[decode]   k, topology (default | chain | file:PATH), temperature,
           drafter_temperature (optional), min_new, prompts
           (prompts: token lists, e.g. "0 1 2; 3 4")
[train]    corpus (file:PATH | sample:COUNT,LENGTH), epochs, lr, mode
           (hard | soft), weight_base, init (fresh | from-target), resume
[lossless] trials, min_new, bin_len, tolerance
[ablate]   ks (e.g. "1,2,4")

Exit codes: 0 success, 2 configuration error, 3 losslessness check failed.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import mc
from .core import InvalidInputError, Rng, derive_seed, tv_distance
from .drafter import ParallelDrafter, UnrolledDrafter
from .engine import autoregressive_decode, speculative_decode
from .model import (
    CheckpointError,
    TinyTransformer,
    load_checkpoint,
    save_checkpoint,
)
from .tabular import (
    TabularLM,
    TabularParallelDrafter,
    load_tabular,
    random_tabular_drafter,
    random_tabular_lm,
)
from .training import (
    TrainConfig,
    TrainingDivergedError,
    load_corpus,
    sample_corpus,
    train_drafter,
)
from .tree import TreeTopology, chain_topology, default_topology, topology_from_text

__all__ = ["ConfigError", "main", "read_metrics_csv"]

_VERSION = "0.1.0"


class ConfigError(ValueError):
    """Bad or missing configuration; maps to exit code 2."""


class _Config:
    """Typed accessors over one INI file with override support."""

    def __init__(self, path: str, seed: int | None, out: str | None) -> None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        self._p = parser
        self._seed_override = seed
        self._out_override = out

    def has(self, section: str, key: str) -> bool:
        return self._p.has_option(section, key)

    def _raw(self, section: str, key: str, default=None, required: bool = False):
        if self._p.has_option(section, key):
            return self._p.get(section, key).strip()
        if required:
            raise ConfigError(f"missing key {key!r} in section [{section}]")
        return default

    def get_str(self, section, key, default=None, required=False):
        return self._raw(section, key, default, required)

    def get_int(self, section, key, default=None, required=False):
        raw = self._raw(section, key, None, required)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be an integer, got {raw!r}") from None

    def get_float(self, section, key, default=None, required=False):
        raw = self._raw(section, key, None, required)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be a number, got {raw!r}") from None

    @property
    def seed(self) -> int:
        if self._seed_override is not None:
            return self._seed_override
        return self.get_int("run", "seed", 0)

    @property
    def out_dir(self) -> Path:
        out = self._out_override or self.get_str("run", "out")
        if out is None:
            raise ConfigError("output directory required: set [run] out or pass --out")
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def snapshot(self) -> dict:
        snap = {s: dict(self._p.items(s)) for s in self._p.sections()}
        snap.setdefault("run", {})["seed"] = str(self.seed)
        return snap


def _parse_prompts(raw: str) -> list[list[int]]:
    prompts = []
    for part in raw.split(";"):
        part = part.strip()
        if not part:
            continue
        try:
            prompts.append([int(t) for t in part.replace(",", " ").split()])
        except ValueError:
            raise ConfigError(f"bad prompt {part!r}: prompts are integer token lists") from None
    if not prompts:
        raise ConfigError("[decode] prompts is empty")
    return prompts


def _load_target(cfg: _Config):
    spec = cfg.get_str("models", "target", required=True)
    if spec.startswith("checkpoint:"):
        try:
            return load_checkpoint(spec.split(":", 1)[1])
        except (CheckpointError, OSError) as e:
            raise ConfigError(f"cannot load target checkpoint: {e}") from None
    if spec.startswith("tabular:"):
        try:
            model = load_tabular(spec.split(":", 1)[1])
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot load target table: {e}") from None
        if not isinstance(model, TabularLM):
            raise ConfigError("[models] target tabular file must hold a language model")
        return model
    if spec == "random-tabular":
        return random_tabular_lm(
            vocab_size=cfg.get_int("models", "vocab_size", 8),
            order=cfg.get_int("models", "target_order", 2),
            alpha=cfg.get_float("models", "alpha", 1.0),
            seed=derive_seed(cfg.seed, 101),
        )
    raise ConfigError(f"[models] target spec {spec!r} not understood")


def _load_drafter(cfg: _Config, target, k: int):
    spec = cfg.get_str("models", "drafter", required=True)
    if spec == "self":
        if not isinstance(target, TinyTransformer):
            raise ConfigError("[models] drafter = self needs a transformer target")
        return UnrolledDrafter(target, k)
    if spec.startswith("checkpoint:"):
        try:
            model = load_checkpoint(spec.split(":", 1)[1])
        except (CheckpointError, OSError) as e:
            raise ConfigError(f"cannot load drafter checkpoint: {e}") from None
        if model.config.mask_count != k:
            raise ConfigError(
                f"[decode] k={k} does not match drafter checkpoint mask_count="
                f"{model.config.mask_count}"
            )
        return ParallelDrafter(model)
    if spec.startswith("tabular:"):
        try:
            model = load_tabular(spec.split(":", 1)[1])
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot load drafter table: {e}") from None
        if not isinstance(model, TabularParallelDrafter):
            raise ConfigError("[models] drafter tabular file must hold a parallel drafter")
        if model.k != k:
            raise ConfigError(f"[decode] k={k} does not match drafter table k={model.k}")
        return model
    if spec == "random-tabular":
        return random_tabular_drafter(
            vocab_size=cfg.get_int("models", "vocab_size", 8),
            order=cfg.get_int("models", "drafter_order", 2),
            k=k,
            alpha=cfg.get_float("models", "alpha", 1.0),
            seed=derive_seed(cfg.seed, 202),
        )
    raise ConfigError(f"[models] drafter spec {spec!r} not understood")


def _load_topology(cfg: _Config, k: int) -> TreeTopology:
    spec = cfg.get_str("decode", "topology", "default")
    if spec == "default":
        return default_topology(k)
    if spec == "chain":
        return chain_topology(k)
    if spec.startswith("file:"):
        path = spec.split(":", 1)[1]
        try:
            return topology_from_text(Path(path).read_text())
        except (OSError, InvalidInputError) as e:
            raise ConfigError(f"cannot load topology file: {e}") from None
    raise ConfigError(f"[decode] topology {spec!r} not understood")


def _write_report(out_dir: Path, command: str, cfg: _Config, timing: dict, results: dict) -> None:
    report = {
        "metadata": {
            "command": command,
            "seed": cfg.seed,
            "kernel_backend": mc.kernel_backend(),
            "version": _VERSION,
            "config": cfg.snapshot(),
        },
        "timing": timing,
        "results": results,
    }
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_metrics(out_dir: Path, rows: list[dict]) -> None:
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["k", "tau", "speedup"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_metrics_csv(path) -> list[dict]:
    """Rows of metrics.csv with k as int and tau/speedup as floats."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append({"k": int(row["k"]), "tau": float(row["tau"]),
                        "speedup": float(row["speedup"])})
    return out


def _decode_params(cfg: _Config):
    k = cfg.get_int("decode", "k", required=True)
    if k < 0:
        raise ConfigError("[decode] k must be >= 0")
    temperature = cfg.get_float("decode", "temperature", 1.0)
    if temperature < 0:
        raise ConfigError("[decode] temperature must be >= 0")
    dtemp = cfg.get_float("decode", "drafter_temperature", None)
    min_new = cfg.get_int("decode", "min_new", 32)
    if min_new < 1:
        raise ConfigError("[decode] min_new must be >= 1")
    prompts = _parse_prompts(cfg.get_str("decode", "prompts", required=True))
    return k, temperature, dtemp, min_new, prompts


def _bench_prompts(target, drafter, topology, prompts, min_new, temperature, dtemp, seed, trace_fh):
    """Speculative and autoregressive decodes per prompt; returns results + timing."""
    spec_rounds = 0
    spec_committed = 0
    spec_wall = 0
    ar_wall = 0
    outputs = []
    ar_outputs = []
    for i, prompt in enumerate(prompts):
        rng_spec = Rng(derive_seed(seed, 2 * i))
        rng_ar = Rng(derive_seed(seed, 2 * i + 1))
        goal = len(prompt) + min_new
        y_spec, tr_spec = speculative_decode(
            target, drafter, topology, prompt, goal, temperature, rng_spec, dtemp
        )
        y_ar, tr_ar = autoregressive_decode(target, prompt, goal, temperature, rng_ar)
        outputs.append(y_spec)
        ar_outputs.append(y_ar)
        spec_rounds += len(tr_spec.rounds)
        spec_committed += tr_spec.total_committed()
        spec_wall += tr_spec.total_wall_ns()
        ar_wall += tr_ar.total_wall_ns()
        if trace_fh is not None:
            tr_spec.write_jsonl(trace_fh, extra={"engine": "speculative", "prompt_index": i})
            tr_ar.write_jsonl(trace_fh, extra={"engine": "autoregressive", "prompt_index": i})
    tau = spec_committed / spec_rounds if spec_rounds else 0.0
    speedup = ar_wall / spec_wall if spec_wall else 0.0
    results = {
        "tau": tau,
        "rounds": spec_rounds,
        "committed": spec_committed,
        "outputs": outputs,
        "autoregressive_outputs": ar_outputs,
    }
    timing = {"speculative_wall_ns": spec_wall, "autoregressive_wall_ns": ar_wall,
              "speedup": speedup}
    return results, timing


def run_bench(cfg: _Config) -> int:
    k, temperature, dtemp, min_new, prompts = _decode_params(cfg)
    target = _load_target(cfg)
    drafter = _load_drafter(cfg, target, k)
    topology = _load_topology(cfg, k)
    out_dir = cfg.out_dir
    with open(out_dir / "trace.jsonl", "w") as trace_fh:
        results, timing = _bench_prompts(
            target, drafter, topology, prompts, min_new, temperature, dtemp,
            cfg.seed, trace_fh,
        )
    results["k"] = k
    _write_metrics(out_dir, [{"k": k, "tau": f"{results['tau']:.6f}",
                              "speedup": f"{timing['speedup']:.4f}"}])
    _write_report(out_dir, "bench", cfg, timing, results)
    print(f"bench: tau={results['tau']:.4f} speedup={timing['speedup']:.2f}x")
    return 0


def run_ablate(cfg: _Config) -> int:
    raw = cfg.get_str("ablate", "ks", required=True)
    try:
        ks = [int(t) for t in raw.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"[ablate] ks must be integers, got {raw!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise ConfigError("[ablate] ks must be positive")
    _, temperature, dtemp, min_new, prompts = _decode_params(cfg)
    target = _load_target(cfg)
    out_dir = cfg.out_dir
    rows = []
    per_k = {}
    timing = {}
    with open(out_dir / "trace.jsonl", "w") as trace_fh:
        for k in ks:
            drafter = _load_drafter(cfg, target, k)
            topology = _load_topology(cfg, k)
            results, t = _bench_prompts(
                target, drafter, topology, prompts, min_new, temperature, dtemp,
                derive_seed(cfg.seed, k), trace_fh,
            )
            rows.append({"k": k, "tau": f"{results['tau']:.6f}",
                         "speedup": f"{t['speedup']:.4f}"})
            per_k[str(k)] = {"tau": results["tau"], "rounds": results["rounds"],
                             "committed": results["committed"]}
            timing[str(k)] = t
    _write_metrics(out_dir, rows)
    _write_report(out_dir, "ablate-k", cfg, timing, {"per_k": per_k, "ks": ks})
    print("ablate-k: " + "  ".join(f"k={r['k']} tau={float(r['tau']):.3f}" for r in rows))
    return 0


def run_lossless(cfg: _Config) -> int:
    k, temperature, dtemp, min_new, prompts = _decode_params(cfg)
    target = _load_target(cfg)
    drafter = _load_drafter(cfg, target, k)
    if not isinstance(target, TabularLM):
        raise ConfigError("lossless check needs a tabular target (exact enumeration)")
    if not isinstance(drafter, TabularParallelDrafter):
        raise ConfigError("lossless check needs a tabular drafter")
    topology = _load_topology(cfg, k)
    trials = cfg.get_int("lossless", "trials", 200_000)
    bin_len = cfg.get_int("lossless", "bin_len", 3)
    tolerance = cfg.get_float("lossless", "tolerance", 0.01)
    min_new = max(min_new, bin_len)
    prompt = prompts[0]

    t0 = time.perf_counter_ns()
    counts, stats = mc.run_speculative_trials(
        target, drafter, topology, prompt, min_new, bin_len, trials, cfg.seed,
        temperature, dtemp,
    )
    wall = time.perf_counter_ns() - t0
    exact = mc.exact_sequence_distribution(target, temperature, prompt, bin_len)
    tv = tv_distance(counts / trials, exact)
    ok = bool(tv < tolerance and stats.violations == 0)

    out_dir = cfg.out_dir
    results = {
        "tv": tv,
        "tolerance": tolerance,
        "trials": trials,
        "bin_len": bin_len,
        "pass": ok,
        "tau": stats.tau,
        "acceptance_rate": stats.acceptance_rate,
        "round_bound_violations": stats.violations,
        "min_round_commit": stats.min_round_commit,
        "max_round_commit": stats.max_round_commit,
    }
    _write_metrics(out_dir, [{"k": k, "tau": f"{stats.tau:.6f}", "speedup": "0.0"}])
    _write_report(out_dir, "lossless", cfg, {"wall_ns": wall}, results)
    status = "PASS" if ok else "FAIL"
    print(f"lossless: {status} tv={tv:.5f} (tolerance {tolerance}) "
          f"violations={stats.violations} tau={stats.tau:.3f}")
    return 0 if ok else 3


def run_train(cfg: _Config) -> int:
    k = cfg.get_int("decode", "k", required=True)
    if k < 0:
        raise ConfigError("[decode] k must be >= 0")
    target = _load_target(cfg)

    corpus_spec = cfg.get_str("train", "corpus", required=True)
    if corpus_spec.startswith("file:"):
        try:
            corpus = load_corpus(corpus_spec.split(":", 1)[1])
        except OSError as e:
            raise ConfigError(f"cannot load corpus: {e}") from None
    elif corpus_spec.startswith("sample:"):
        try:
            count_s, length_s = corpus_spec.split(":", 1)[1].split(",")
            count, length = int(count_s), int(length_s)
        except ValueError:
            raise ConfigError(
                "[train] corpus sample spec must be sample:COUNT,LENGTH"
            ) from None
        corpus = sample_corpus(target, count, length, seed=derive_seed(cfg.seed, 303))
    else:
        raise ConfigError(f"[train] corpus spec {corpus_spec!r} not understood")

    resume = cfg.get_str("train", "resume", None)
    init = cfg.get_str("train", "init", "from-target")
    if resume is not None:
        try:
            model = load_checkpoint(resume)
        except (CheckpointError, OSError) as e:
            raise ConfigError(f"cannot resume from {resume}: {e}") from None
        if model.config.mask_count != k:
            raise ConfigError(
                f"[decode] k={k} does not match resumed checkpoint mask_count="
                f"{model.config.mask_count}"
            )
        drafter = ParallelDrafter(model)
    elif init == "from-target":
        if not isinstance(target, TinyTransformer):
            raise ConfigError("[train] init = from-target needs a transformer target")
        drafter = ParallelDrafter.from_target(target, k, seed=derive_seed(cfg.seed, 404))
    elif init == "fresh":
        if not isinstance(target, TinyTransformer):
            raise ConfigError("[train] init = fresh needs a transformer target (for sizes)")
        drafter = ParallelDrafter.fresh(
            target.config.vocab_size, k, seed=derive_seed(cfg.seed, 404)
        )
    else:
        raise ConfigError(f"[train] init {init!r} not understood")

    mode = cfg.get_str("train", "mode", "hard")
    out_dir = cfg.out_dir
    try:
        train_cfg = TrainConfig(
            epochs=cfg.get_int("train", "epochs", 1),
            lr=cfg.get_float("train", "lr", 1e-3),
            weight_base=cfg.get_float("train", "weight_base", 0.8),
            mode=mode,
            log_path=str(out_dir / "train_log.csv"),
        )
    except InvalidInputError as e:
        raise ConfigError(str(e)) from None

    teacher = target if mode == "soft" else None
    if mode == "soft" and not isinstance(target, TinyTransformer):
        raise ConfigError("[train] mode = soft needs a transformer target as teacher")
    t0 = time.perf_counter_ns()
    try:
        result = train_drafter(drafter, corpus, train_cfg, teacher)
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    wall = time.perf_counter_ns() - t0
    ckpt_path = out_dir / "drafter.ckpt"
    save_checkpoint(drafter.model, ckpt_path)
    results = {
        "steps": result.steps,
        "epochs": result.epochs,
        "first_loss": result.losses[0],
        "final_loss": result.final_loss,
        "checkpoint": ckpt_path.name,
        "k": k,
        "mode": mode,
        "corpus_sequences": len(corpus),
    }
    _write_report(out_dir, "train", cfg, {"wall_ns": wall}, results)
    print(f"train: {result.steps} steps, loss {result.losses[0]:.4f} -> "
          f"{result.final_loss:.4f}, saved {ckpt_path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="specdesk",
        description="Desk-scale speculative decoding with a parallel mask drafter.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("train", run_train),
        ("bench", run_bench),
        ("lossless", run_lossless),
        ("ablate-k", run_ablate),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--out", default=None, help="override [run] out directory")
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        cfg = _Config(args.config, args.seed, args.out)
        return args.fn(cfg)
    except (ConfigError, InvalidInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
