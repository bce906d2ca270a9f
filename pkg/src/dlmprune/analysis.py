"""Analytic cost model and score-stability analysis.

Per layer and step, a forward pass over n tokens of width d with FFN width mu
costs 4*n*d^2 + 2*n^2*d + 2*n*d*mu floating-point operations (QKV/output
projections, attention products, FFN). Counts are exact integers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class FlopsReport:
    baseline: int
    pruned: int
    ratio: float
    params: dict = field(default_factory=dict)


@dataclass
class SimilarityCurve:
    """Cosine similarity of each later step's importance scores against step 1's.

    ``sims[i]`` compares step ``first_step + i`` with step 1.
    """

    sims: list[float]
    first_step: int = 2
    sample_count: int = 1

    def min(self) -> float:
        return min(self.sims)


def flops_per_pass(n: int, d: int, mu: int) -> int:
    """One layer, one step, sequence length n."""
    return 4 * n * d * d + 2 * n * n * d + 2 * n * d * mu


def flops_baseline(layers: int, steps: int, n: int, d: int, mu: int) -> int:
    for name, v in {"layers": layers, "steps": steps, "n": n, "d": d, "mu": mu}.items():
        if v < 0:
            raise ValueError(f"{name} must be nonnegative")
    return layers * steps * flops_per_pass(n, d, mu)


def flops_for_lengths(layers: int, d: int, mu: int, lengths: Sequence[int]) -> int:
    """Total cost of a run whose per-step sequence lengths are given."""
    return layers * sum(flops_per_pass(n, d, mu) for n in lengths)


def flops_pruned(layers: int, steps: int, n: int, n_r: int, d: int, mu: int) -> FlopsReport:
    """Cost with one full-length step followed by steps at the pruned length n_r."""
    if n_r > n:
        raise ValueError(f"pruned length {n_r} exceeds full length {n}")
    baseline = flops_baseline(layers, steps, n, d, mu)
    pruned = flops_for_lengths(layers, d, mu, [n] + [n_r] * (steps - 1))
    return FlopsReport(
        baseline=baseline,
        pruned=pruned,
        ratio=pruned / baseline if baseline else 1.0,
        params={"layers": layers, "steps": steps, "n": n, "n_r": n_r, "d": d, "mu": mu},
    )


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine undefined for a zero vector")
    return float(u @ v / (nu * nv))


def similarity_curve(traces: Sequence[Sequence[np.ndarray]]) -> SimilarityCurve:
    """Average step-k-vs-step-1 cosine across sample traces.

    Each trace is the per-step score vectors of one unpruned run (so vector
    lengths agree across steps); all traces must cover the same steps.
    """
    if not traces:
        raise ValueError("need at least one trace")
    length = len(traces[0])
    if length < 2:
        raise ValueError("a trace needs scores for at least two steps")
    sims = []
    for t in traces:
        if len(t) != length:
            raise ValueError(f"trace lengths differ: {len(t)} vs {length}")
        sims.append([cosine(t[k], t[0]) for k in range(1, length)])
    mean = np.mean(np.asarray(sims), axis=0)
    return SimilarityCurve(sims=[float(s) for s in mean], first_step=2, sample_count=len(traces))
