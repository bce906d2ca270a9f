"""Command-line entry points.

Subcommands: run (single inference), similarity (score-stability curve),
ablate (scorer x strategy grid), bench (latency/throughput), flops (analytic
cost only). Exit codes: 0 success, 2 invalid configuration, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional

from . import analysis, harness
from .decoder import run_inference
from .model import embed_prompt, encode_image
from .pruning import ScorerKind, StrategyKind, keep_count


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlmprune",
                                     description="masked-diffusion visual token pruning lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in [
        ("run", "decode one pointer task and print ids plus stats"),
        ("similarity", "per-step importance-score similarity curve"),
        ("ablate", "accuracy grid over scorers and strategies"),
        ("bench", "wall-clock latency/throughput sweep"),
        ("flops", "analytic cost report only"),
    ]:
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--r", type=float, help="retaining ratio override")
        p.add_argument("--scorer", choices=[s.value for s in ScorerKind])
        p.add_argument("--strategy", choices=[s.value for s in StrategyKind])
        p.add_argument("--policy", choices=["stochastic", "confidence"])
        p.add_argument("--out", help="write the report here")
        p.add_argument("--format", choices=["json", "csv"], default="json")
    return parser


def _apply_overrides(args) -> harness.RunConfig:
    cfg = harness.load_config(args.config)
    override: dict = {}
    if args.seed is not None:
        override.setdefault("decode", {})["seed"] = args.seed
        override.setdefault("tasks", {})["seed"] = args.seed + 1000003
        override.setdefault("prune", {})["seed"] = args.seed + 2000003
    if args.policy is not None:
        override.setdefault("decode", {})["policy"] = args.policy
    for key, value in [("r", args.r), ("scorer", args.scorer), ("strategy", args.strategy)]:
        if value is not None:
            override.setdefault("prune", {})[key] = value
    if override:
        cfg = harness.config_from_dict(harness._merge(cfg.raw, override))
    return cfg


def _cmd_run(cfg: harness.RunConfig, args) -> list[harness.BenchReport]:
    _, weights, vocab = harness.copy_setup(cfg.tasks)
    task = harness.gen_pointer_task(cfg.tasks.grid, cfg.tasks.alphabet, cfg.tasks.seed)
    visual = encode_image(task.image, weights)
    prompt = embed_prompt(task.prompt, weights)
    ids, _, stats = run_inference(visual, prompt, cfg.response_len, cfg.steps,
                                  weights, cfg.policy, cfg.prune)
    print(f"decoded ids : {ids.tolist()}")
    print(f"expected    : {task.expected} ({'ok' if ids[0] == task.expected else 'MISS'})")
    print(f"wall time   : {stats.seconds_total:.6f}s over {len(stats.per_step_lengths)} steps")
    print(f"seq lengths : {stats.per_step_lengths}")
    report = harness.BenchReport(
        variant=harness.variant_label(cfg.prune),
        latency_s_per_sample=stats.seconds_total,
        throughput_tok_per_s=cfg.response_len / stats.seconds_total
        if stats.seconds_total > 0 else None,
        accuracy=float(ids[0] == task.expected),
        config=cfg.raw,
    )
    return [report]


def _cmd_similarity(cfg: harness.RunConfig, args) -> list[harness.BenchReport]:
    curve = harness.run_similarity(cfg)
    for i, sim in enumerate(curve.sims):
        print(f"step {curve.first_step + i:3d} vs 1: cosine {sim:.6f}")
    print(f"min similarity: {curve.min():.6f} over {curve.sample_count} samples")
    if args.out and args.format == "csv":
        harness.emit_similarity_csv(curve, args.out)
        print(f"curve written to {args.out}")
        return []
    return [harness.BenchReport(variant="similarity", similarity=curve, config=cfg.raw)]


def _cmd_ablate(cfg: harness.RunConfig, args) -> list[harness.BenchReport]:
    reports = harness.run_ablation(cfg)
    for r in reports:
        print(f"{r.variant:32s} accuracy {r.accuracy:.4f}  latency {r.latency_s_per_sample:.4f}s")
    return reports


def _cmd_bench(cfg: harness.RunConfig, args) -> list[harness.BenchReport]:
    reports = harness.run_bench(cfg)
    for r in reports:
        print(f"{r.variant:32s} latency {r.latency_s_per_sample:.4f}s "
              f"throughput {r.throughput_tok_per_s:.2f} tok/s "
              f"flops ratio {r.flops.ratio:.4f}")
    return reports


def _cmd_flops(cfg: harness.RunConfig, args) -> list[harness.BenchReport]:
    n = cfg.model.num_patches + cfg.bench.prompt_len + cfg.response_len
    ratio = cfg.prune.ratio if cfg.prune is not None else 1.0
    n_r = keep_count(cfg.model.num_patches, ratio) + cfg.bench.prompt_len + cfg.response_len
    report = analysis.flops_pruned(cfg.model.layers, cfg.steps, n, n_r,
                                   cfg.model.embed_dim, cfg.model.ffn_dim)
    print(f"baseline flops: {report.baseline}")
    print(f"pruned flops  : {report.pruned}")
    print(f"ratio         : {report.ratio:.6f}")
    return [harness.BenchReport(variant=f"flops/r={ratio:g}", flops=report, config=cfg.raw)]


_COMMANDS = {
    "run": _cmd_run,
    "similarity": _cmd_similarity,
    "ablate": _cmd_ablate,
    "bench": _cmd_bench,
    "flops": _cmd_flops,
}


def main(argv: Optional[list[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(args)
        reports = _COMMANDS[args.command](cfg, args)
        if args.out and reports:
            harness.emit_report(reports if len(reports) > 1 else reports[0],
                                args.out, format=args.format)
            print(f"report written to {args.out}")
    except harness.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
