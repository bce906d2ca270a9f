"""Synthetic pointer tasks, experiment drivers, and report serialization.

A pointer task plants one symbol per image patch and asks, via a single
prompt token, for the symbol at one patch. The copy model answers it exactly,
so accuracy under any pruning variant reduces to whether the pointed-at
visual token survived.
"""

from __future__ import annotations

import csv
import json
import string
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import analysis
from .decoder import PolicyKind, SchedulePolicy, run_inference
from .model import (CopyTaskVocab, ModelConfig, ModelWeights, build_copy_model,
                    copy_model_config, embed_prompt, encode_image, init_random_model)
from .numerics import SeededRng
from .pruning import PrunePlan, ScorerKind, StrategyKind, keep_count


class ConfigError(ValueError):
    """Invalid run configuration (CLI exit code 2)."""


class TimerResolutionError(RuntimeError):
    """Measured interval too short for the wall clock to resolve."""


@dataclass(frozen=True)
class TaskInstance:
    image: tuple[tuple[str, ...], ...]
    prompt: tuple[int, ...]
    expected: int
    seed: int


@dataclass
class TaskParams:
    count: int = 20
    grid: tuple[int, int] = (4, 4)
    alphabet: tuple[str, ...] = tuple(string.ascii_lowercase[:8])
    seed: int = 3


@dataclass
class BenchParams:
    warmup: int = 3
    reps: int = 5
    prompt_len: int = 16


@dataclass
class RunConfig:
    model: ModelConfig
    steps: int
    response_len: int
    policy: SchedulePolicy
    prune: Optional[PrunePlan]
    tasks: TaskParams
    bench: BenchParams
    raw: dict = field(default_factory=dict)


@dataclass
class BenchReport:
    variant: str
    latency_s_per_sample: Optional[float] = None
    throughput_tok_per_s: Optional[float] = None
    accuracy: Optional[float] = None
    flops: Optional[analysis.FlopsReport] = None
    similarity: Optional[analysis.SimilarityCurve] = None
    config: dict = field(default_factory=dict)


def gen_pointer_task(grid_dims: tuple[int, int], symbol_alphabet: Sequence[str],
                     seed: int) -> TaskInstance:
    """Uniform random symbol grid plus a prompt naming one target patch."""
    rows, cols = grid_dims
    if rows < 1 or cols < 1:
        raise ValueError(f"grid must be at least 1x1, got {grid_dims}")
    if not symbol_alphabet:
        raise ValueError("symbol alphabet is empty")
    alphabet = tuple(symbol_alphabet)
    n = rows * cols
    rng = SeededRng(seed)
    flat = [alphabet[int(i)] for i in rng.integers(0, len(alphabet), size=n)]
    target = int(rng.integers(0, n))
    vocab = CopyTaskVocab(alphabet, n)
    return TaskInstance(
        image=tuple(tuple(flat[r * cols : (r + 1) * cols]) for r in range(rows)),
        prompt=(vocab.index_id(target),),
        expected=vocab.symbol_id(flat[target]),
        seed=seed,
    )


def copy_setup(tasks: TaskParams, layers: int = 12, heads: int = 1
               ) -> tuple[ModelConfig, ModelWeights, CopyTaskVocab]:
    cfg = copy_model_config(tasks.grid, tasks.alphabet, layers=layers, heads=heads)
    weights = build_copy_model(cfg, tasks.alphabet)
    vocab = CopyTaskVocab(tuple(tasks.alphabet), cfg.num_patches)
    return cfg, weights, vocab


def _run_variant(weights: ModelWeights, cfg: RunConfig, plan: Optional[PrunePlan],
                 instances: Sequence[TaskInstance]) -> tuple[float, float, list, np.ndarray]:
    """Run all tasks under one plan. Returns (accuracy, seconds, lengths, first ids)."""
    correct = 0
    seconds = 0.0
    lengths: list = []
    first_ids = None
    for inst in instances:
        visual = encode_image(inst.image, weights)
        prompt = embed_prompt(inst.prompt, weights)
        ids, _, stats = run_inference(visual, prompt, cfg.response_len, cfg.steps,
                                      weights, cfg.policy, plan)
        correct += int(ids[0] == inst.expected)
        seconds += stats.seconds_total
        lengths = stats.per_step_lengths
        if first_ids is None:
            first_ids = ids
    return correct / len(instances), seconds, lengths, first_ids


def variant_label(plan: Optional[PrunePlan]) -> str:
    if plan is None:
        return "baseline"
    if plan.strategy == StrategyKind.RANDOM_ONCE:
        return f"{plan.strategy.value}/r={plan.ratio:g}"
    return f"{plan.strategy.value}/{plan.scorer.value}/r={plan.ratio:g}"


def _report(cfg: RunConfig, label: str, accuracy, seconds, samples,
            baseline_lengths, variant_lengths, model_cfg: ModelConfig) -> BenchReport:
    flops = None
    if baseline_lengths and variant_lengths:
        base = analysis.flops_for_lengths(model_cfg.layers, model_cfg.embed_dim,
                                          model_cfg.ffn_dim, baseline_lengths)
        var = analysis.flops_for_lengths(model_cfg.layers, model_cfg.embed_dim,
                                         model_cfg.ffn_dim, variant_lengths)
        flops = analysis.FlopsReport(
            baseline=base, pruned=var, ratio=var / base if base else 1.0,
            params={"layers": model_cfg.layers, "steps": cfg.steps,
                    "d": model_cfg.embed_dim, "mu": model_cfg.ffn_dim},
        )
    return BenchReport(
        variant=label,
        latency_s_per_sample=seconds / samples,
        throughput_tok_per_s=cfg.response_len * samples / seconds if seconds > 0 else None,
        accuracy=accuracy,
        flops=flops,
        config=cfg.raw,
    )


def _instances(tasks: TaskParams) -> list[TaskInstance]:
    return [gen_pointer_task(tasks.grid, tasks.alphabet, tasks.seed + i)
            for i in range(tasks.count)]


def run_accuracy(cfg: RunConfig, *, include_baseline: bool = True,
                 plans: Optional[list[PrunePlan]] = None) -> list[BenchReport]:
    """Exact-match accuracy of the first response token over generated tasks."""
    model_cfg, weights, _ = copy_setup(cfg.tasks)
    instances = _instances(cfg.tasks)
    if plans is None:
        plans = [cfg.prune] if cfg.prune is not None else []
    reports = []
    base_lengths = None
    if include_baseline:
        acc, secs, base_lengths, _ = _run_variant(weights, cfg, None, instances)
        reports.append(_report(cfg, "baseline", acc, secs, len(instances),
                               base_lengths, base_lengths, model_cfg))
    for plan in plans:
        acc, secs, lengths, _ = _run_variant(weights, cfg, plan, instances)
        reports.append(_report(cfg, variant_label(plan), acc, secs, len(instances),
                               base_lengths, lengths, model_cfg))
    return reports


def run_ablation(cfg: RunConfig) -> list[BenchReport]:
    """Baseline plus every scorer (one-shot pruning) and every strategy at one ratio."""
    ratio = cfg.prune.ratio if cfg.prune is not None else 0.5
    seed = (cfg.prune.rng_seed if cfg.prune is not None and cfg.prune.rng_seed is not None
            else cfg.tasks.seed + 1)
    plans = [PrunePlan.once(ratio, scorer) for scorer in ScorerKind]
    plans.append(PrunePlan.random_once(ratio, seed))
    plans.append(PrunePlan.progressive(ratio))
    return run_accuracy(cfg, include_baseline=True, plans=plans)


def run_similarity(cfg: RunConfig) -> analysis.SimilarityCurve:
    """Per-step masked-row importance scores from unpruned runs, compared to step 1."""
    if cfg.steps < 3:
        raise ConfigError("similarity analysis needs at least 3 steps")
    _, weights, _ = copy_setup(cfg.tasks)
    traces = []
    for inst in _instances(cfg.tasks):
        visual = encode_image(inst.image, weights)
        prompt = embed_prompt(inst.prompt, weights)
        _, _, stats = run_inference(visual, prompt, cfg.response_len, cfg.steps,
                                    weights, cfg.policy, None,
                                    score_with=ScorerKind.MASKED)
        traces.append(stats.score_trace)
    return analysis.similarity_curve(traces)


def _bench_inputs(cfg: RunConfig, weights: ModelWeights) -> list[tuple]:
    rng = SeededRng(cfg.tasks.seed)
    rows, cols = cfg.model.patch_grid
    alphabet = tuple(cfg.tasks.alphabet)
    inputs = []
    for _ in range(cfg.bench.reps):
        flat = [alphabet[int(i)] for i in rng.integers(0, len(alphabet), size=rows * cols)]
        image = tuple(tuple(flat[r * cols : (r + 1) * cols]) for r in range(rows))
        ids = rng.integers(0, cfg.model.vocab_size - 1, size=cfg.bench.prompt_len)
        inputs.append((encode_image(image, weights), embed_prompt(ids, weights)))
    return inputs


def run_bench(cfg: RunConfig, *, plans: Optional[list[PrunePlan]] = None) -> list[BenchReport]:
    """Wall-clock latency and throughput on a random model, baseline vs pruned.

    Timing covers the inference loop only (all forward passes plus pruning
    overhead); model construction, input embedding, and warmup are excluded.
    """
    if cfg.bench.warmup < 1:
        raise ConfigError("bench needs warmup >= 1")
    if cfg.bench.reps < 1:
        raise ConfigError("bench needs reps >= 1")
    weights = init_random_model(cfg.model, cfg.tasks.seed)
    inputs = _bench_inputs(cfg, weights)
    if plans is None:
        plans = [cfg.prune] if cfg.prune is not None else []
    n_full = cfg.model.num_patches + cfg.bench.prompt_len + cfg.response_len
    reports = []
    resolution = time.get_clock_info("perf_counter").resolution
    for plan in [None] + list(plans):
        for _ in range(cfg.bench.warmup):
            run_inference(inputs[0][0], inputs[0][1], cfg.response_len, cfg.steps,
                          weights, cfg.policy, plan)
        seconds = 0.0
        for visual, prompt in inputs:
            _, _, stats = run_inference(visual, prompt, cfg.response_len, cfg.steps,
                                        weights, cfg.policy, plan)
            seconds += stats.seconds_total
        if seconds < 100.0 * resolution:
            raise TimerResolutionError(
                f"measured {seconds:.3e}s is under 100 clock ticks ({resolution:.1e}s); "
                "increase reps or problem size")
        n_r = (keep_count(cfg.model.num_patches, plan.ratio) + cfg.bench.prompt_len
               + cfg.response_len) if plan is not None else n_full
        flops = analysis.flops_pruned(cfg.model.layers, cfg.steps, n_full, n_r,
                                      cfg.model.embed_dim, cfg.model.ffn_dim)
        reports.append(BenchReport(
            variant=variant_label(plan),
            latency_s_per_sample=seconds / cfg.bench.reps,
            throughput_tok_per_s=cfg.response_len * cfg.bench.reps / seconds,
            accuracy=None,
            flops=flops,
            config=cfg.raw,
        ))
    return reports


# --- serialization -----------------------------------------------------------

def _round6(x: Optional[float]) -> Optional[float]:
    return None if x is None else round(float(x), 6)


def report_to_dict(report: BenchReport) -> dict:
    out: dict = {"variant": report.variant}
    out["latency_s_per_sample"] = _round6(report.latency_s_per_sample)
    out["throughput_tok_per_s"] = _round6(report.throughput_tok_per_s)
    out["accuracy"] = _round6(report.accuracy)
    if report.flops is not None:
        out["flops"] = {
            "baseline": report.flops.baseline,
            "pruned": report.flops.pruned,
            "ratio": _round6(report.flops.ratio),
            "params": report.flops.params,
        }
    if report.similarity is not None:
        out["similarity"] = {
            "sims": [_round6(s) for s in report.similarity.sims],
            "first_step": report.similarity.first_step,
            "sample_count": report.similarity.sample_count,
        }
    if report.config:
        out["config"] = report.config
    return out


def report_from_dict(data: dict) -> BenchReport:
    flops = None
    if "flops" in data:
        f = data["flops"]
        flops = analysis.FlopsReport(baseline=f["baseline"], pruned=f["pruned"],
                                     ratio=f["ratio"], params=f.get("params", {}))
    sim = None
    if "similarity" in data:
        s = data["similarity"]
        sim = analysis.SimilarityCurve(sims=s["sims"], first_step=s["first_step"],
                                       sample_count=s["sample_count"])
    return BenchReport(
        variant=data["variant"],
        latency_s_per_sample=data.get("latency_s_per_sample"),
        throughput_tok_per_s=data.get("throughput_tok_per_s"),
        accuracy=data.get("accuracy"),
        flops=flops,
        similarity=sim,
        config=data.get("config", {}),
    )


_CSV_COLUMNS = ["variant", "latency_s_per_sample", "throughput_tok_per_s", "accuracy",
                "flops_baseline", "flops_pruned", "flops_ratio", "similarity_min"]


def emit_report(reports: Union[BenchReport, Sequence[BenchReport]], path,
                format: str = "json") -> Path:
    """Write one report (JSON object) or several (JSON array / CSV rows)."""
    path = Path(path)
    single = isinstance(reports, BenchReport)
    items = [reports] if single else list(reports)
    if format == "json":
        payload = report_to_dict(items[0]) if single else [report_to_dict(r) for r in items]
        path.write_text(json.dumps(payload, indent=2) + "\n")
    elif format == "csv":
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_CSV_COLUMNS)
            for r in items:
                writer.writerow([
                    r.variant,
                    _fmt6(r.latency_s_per_sample),
                    _fmt6(r.throughput_tok_per_s),
                    _fmt6(r.accuracy),
                    r.flops.baseline if r.flops else "",
                    r.flops.pruned if r.flops else "",
                    _fmt6(r.flops.ratio) if r.flops else "",
                    _fmt6(min(r.similarity.sims)) if r.similarity else "",
                ])
    else:
        raise ConfigError(f"unknown report format: {format}")
    return path


def _fmt6(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.6f}"


def emit_similarity_csv(curve: analysis.SimilarityCurve, path) -> Path:
    """One row per analyzed step: (step, cosine against step 1)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "cosine_vs_step1"])
        for i, sim in enumerate(curve.sims):
            writer.writerow([curve.first_step + i, f"{sim:.6f}"])
    return path


# --- configuration -----------------------------------------------------------

DEFAULT_CONFIG: dict = {
    "model": {"L": 2, "H": 2, "d": 32, "d_v": 8, "mu": 64, "vocab": 64, "grid": [4, 4]},
    "decode": {"K": 8, "tau": 8, "policy": "confidence", "seed": 7},
    "prune": {"strategy": "once", "scorer": "masked", "r": 0.5, "seed": 11},
    "tasks": {"count": 20, "grid": [4, 4], "alphabet": 8, "seed": 3},
    "bench": {"warmup": 3, "reps": 5, "prompt_len": 16},
}


def _default_alphabet(n: int) -> tuple[str, ...]:
    if n < 1:
        raise ConfigError("alphabet size must be >= 1")
    letters = string.ascii_lowercase
    if n <= len(letters):
        return tuple(letters[:n])
    return tuple(f"s{i}" for i in range(n))


def _merge(base: dict, override: Optional[dict]) -> dict:
    out = {k: dict(v) for k, v in base.items()}
    for section, values in (override or {}).items():
        if section not in out:
            raise ConfigError(f"unknown config section: {section}")
        if values is None:
            out[section] = None
            continue
        out[section].update(values)
    return out


def config_from_dict(data: Optional[dict]) -> RunConfig:
    """Build a validated RunConfig from (partial) JSON data merged over defaults."""
    raw = _merge(DEFAULT_CONFIG, data)
    try:
        m = raw["model"]
        grid = tuple(m["grid"])
        model = ModelConfig(
            layers=int(m["L"]), heads=int(m["H"]), embed_dim=int(m["d"]),
            vision_dim=int(m["d_v"]), ffn_dim=int(m["mu"]), vocab_size=int(m["vocab"]),
            patch_grid=grid, mask_token_id=int(m.get("mask_id", int(m["vocab"]) - 1)),
        )
        dec = raw["decode"]
        policy_name = str(dec["policy"])
        if policy_name == PolicyKind.STOCHASTIC.value:
            policy = SchedulePolicy.stochastic(int(dec["seed"]))
        elif policy_name == PolicyKind.CONFIDENCE.value:
            policy = SchedulePolicy.confidence()
        else:
            raise ConfigError(f"unknown policy: {policy_name}")
        prune = None
        if raw["prune"] is not None:
            p = raw["prune"]
            prune = PrunePlan(
                strategy=StrategyKind(str(p["strategy"])),
                ratio=float(p["r"]),
                scorer=ScorerKind(str(p.get("scorer", "masked"))),
                rng_seed=int(p["seed"]) if p.get("seed") is not None else None,
            )
        t = raw["tasks"]
        alphabet = t["alphabet"]
        alphabet = (_default_alphabet(int(alphabet)) if isinstance(alphabet, int)
                    else tuple(str(s) for s in alphabet))
        tasks = TaskParams(count=int(t["count"]), grid=tuple(t["grid"]),
                           alphabet=alphabet, seed=int(t["seed"]))
        b = raw["bench"]
        bench = BenchParams(warmup=int(b["warmup"]), reps=int(b["reps"]),
                            prompt_len=int(b.get("prompt_len", 16)))
        return RunConfig(
            model=model, steps=int(dec["K"]), response_len=int(dec["tau"]),
            policy=policy, prune=prune, tasks=tasks, bench=bench, raw=raw,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_config(path: Optional[str]) -> RunConfig:
    data = None
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)
