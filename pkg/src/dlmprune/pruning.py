"""Visual-token importance scoring and keep-set selection.

Importance of a visual token is the attention it receives, averaged first over
all layers and heads of one forward pass and then over a chosen set of
guidance rows. The default guidance set is the still-masked response rows;
the alternatives exist for ablation comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Optional, Sequence, Union

import numpy as np

from .model import AttentionCapture
from .numerics import Matrix, SeededRng

if TYPE_CHECKING:  # avoids a runtime import cycle with decoder
    from .decoder import SequenceState


class EmptyGuidanceSet(ValueError):
    """The chosen guidance set has no rows at this step; scores are undefined."""


class ScorerKind(str, Enum):
    MASKED = "masked"                    # still-masked response rows (default)
    PROMPT = "prompt"                    # prompt rows
    DECODED = "decoded"                  # already-decoded response rows
    ALL_RESPONSE = "response"            # masked + decoded response rows
    PROMPT_RESPONSE = "prompt+response"  # prompt + all response rows
    VISUAL = "visual"                    # visual rows themselves
    PROMPT_MASKED = "prompt+masked"      # prompt + still-masked response rows


class StrategyKind(str, Enum):
    ONCE = "once"              # score once after step 1, prune to the keep set
    RANDOM_ONCE = "random"     # keep a uniformly random subset after step 1
    PROGRESSIVE = "progressive"  # spread prunes over steps 1..K-1, rescoring each step


@dataclass
class ImportanceScores:
    values: np.ndarray          # aligned with the surviving visual tokens
    source_step: int = 0
    scorer: ScorerKind = ScorerKind.MASKED


@dataclass(frozen=True)
class KeepSet:
    indices: np.ndarray  # original visual indices, strictly ascending

    @property
    def n_kept(self) -> int:
        return int(self.indices.size)


@dataclass
class PrunePlan:
    strategy: StrategyKind
    ratio: float
    scorer: ScorerKind = ScorerKind.MASKED
    rng_seed: Optional[int] = None
    per_step_counts: Optional[list[int]] = None

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.strategy == StrategyKind.RANDOM_ONCE and self.rng_seed is None:
            raise ValueError("random pruning needs rng_seed")

    def validate(self, num_visual: int, total_steps: int) -> None:
        """Cross-check the plan against an actual run shape."""
        if self.strategy == StrategyKind.PROGRESSIVE:
            if self.per_step_counts is None:
                self.per_step_counts = plan_progressive(num_visual, self.ratio, total_steps)
            counts = self.per_step_counts
            if len(counts) != total_steps - 1:
                raise ValueError(f"need {total_steps - 1} per-step counts, got {len(counts)}")
            expect = num_visual - keep_count(num_visual, self.ratio)
            if sum(counts) != expect or any(c < 0 for c in counts):
                raise ValueError(f"per-step counts must be nonnegative and sum to {expect}")

    @classmethod
    def once(cls, ratio: float, scorer: ScorerKind = ScorerKind.MASKED) -> "PrunePlan":
        return cls(StrategyKind.ONCE, ratio, scorer=scorer)

    @classmethod
    def random_once(cls, ratio: float, seed: int) -> "PrunePlan":
        return cls(StrategyKind.RANDOM_ONCE, ratio, rng_seed=seed)

    @classmethod
    def progressive(cls, ratio: float, scorer: ScorerKind = ScorerKind.MASKED) -> "PrunePlan":
        return cls(StrategyKind.PROGRESSIVE, ratio, scorer=scorer)


def keep_count(n: int, r: float) -> int:
    """Retained-token count: max(1, floor(n * r))."""
    if not 0.0 < r <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {r}")
    return max(1, math.floor(n * r))


def mean_attention(capture: AttentionCapture) -> Matrix:
    """Mean of all layer/head maps; rows stay stochastic."""
    if not capture.maps or not capture.maps[0]:
        raise ValueError("capture holds no attention maps")
    shape = capture.maps[0][0].shape
    total = np.zeros(shape)
    count = 0
    for layer_maps in capture.maps:
        for m in layer_maps:
            if m.shape != shape:
                raise ValueError(f"inconsistent map shape {m.shape} vs {shape}")
            total += m
            count += 1
    return total / count


def importance_scores(abar: Matrix, guidance_rows: Sequence[int], visual_cols: Sequence[int],
                      *, step: int = 0, scorer: ScorerKind = ScorerKind.MASKED
                      ) -> ImportanceScores:
    """Per-visual-column mean of the guidance rows of an averaged attention map."""
    rows = np.asarray(guidance_rows, dtype=np.int64).reshape(-1)
    cols = np.asarray(visual_cols, dtype=np.int64).reshape(-1)
    if rows.size == 0:
        raise EmptyGuidanceSet(f"guidance set {scorer.value!r} is empty at step {step}")
    n = abar.shape[0]
    if rows.max() >= n or cols.size and cols.max() >= abar.shape[1]:
        raise ValueError("guidance rows / visual cols exceed map dimensions")
    values = abar[np.ix_(rows, cols)].mean(axis=0)
    return ImportanceScores(values=values, source_step=step, scorer=scorer)


def keep_top_n(visual_indices: np.ndarray, scores: Union[ImportanceScores, np.ndarray],
               n_keep: int) -> KeepSet:
    """Keep the n highest-scoring tokens; ties favor the lower original index."""
    values = scores.values if isinstance(scores, ImportanceScores) else np.asarray(scores)
    indices = np.asarray(visual_indices, dtype=np.int64)
    if values.shape[0] != indices.shape[0]:
        raise ValueError(f"{values.shape[0]} scores for {indices.shape[0]} tokens")
    if not 1 <= n_keep <= indices.size:
        raise ValueError(f"cannot keep {n_keep} of {indices.size}")
    order = np.argsort(-values, kind="stable")  # stable: equal scores keep ascending index
    return KeepSet(indices=np.sort(indices[order[:n_keep]]))


def select_top(visual_indices: np.ndarray, scores: Union[ImportanceScores, np.ndarray],
               r: float) -> KeepSet:
    """Top-r keep set over the surviving visual tokens, in original order."""
    n = np.asarray(visual_indices).shape[0]
    return keep_top_n(visual_indices, scores, keep_count(n, r))


def random_keep(visual_indices: np.ndarray, r: float, rng: SeededRng) -> KeepSet:
    """Uniformly random keep set of the same size the scored selection would use."""
    indices = np.asarray(visual_indices, dtype=np.int64)
    k = keep_count(indices.size, r)
    picked = rng.subset(indices.size, k)
    return KeepSet(indices=indices[picked])


def plan_progressive(num_visual: int, r: float, total_steps: int) -> list[int]:
    """Spread the total prune budget over steps 1..K-1, front-loading remainders."""
    budget = num_visual - keep_count(num_visual, r)
    if total_steps < 2:
        if budget > 0:
            raise ValueError("progressive pruning needs at least 2 steps when r < 1")
        return []
    slots = total_steps - 1
    base, rem = divmod(budget, slots)
    return [base + 1 if i < rem else base for i in range(slots)]


def apply_prune(state: "SequenceState", keep: KeepSet) -> "SequenceState":
    """Restrict the state's visual rows to the keep set, preserving original order."""
    current = state.visual_index_map
    local = np.searchsorted(current, keep.indices)
    bad = (local >= current.size) | (current[np.minimum(local, current.size - 1)] != keep.indices)
    if bad.any():
        missing = keep.indices[bad].tolist()
        raise ValueError(f"keep indices not currently present: {missing}")
    state.visual = state.visual[local]
    state.visual_index_map = keep.indices.copy()
    return state


def guidance_rows(state: "SequenceState", scorer: ScorerKind) -> np.ndarray:
    """Sequence-coordinate rows of the chosen guidance set for the current layout."""
    if state.step < 2:
        raise ValueError("guidance sets are defined only after at least one step")
    n, m = state.num_visual, state.prompt_len
    resp_base = n + m
    prompt = np.arange(n, n + m, dtype=np.int64)
    masked = resp_base + state.masked_positions()
    decoded = resp_base + state.decoded_positions()
    if scorer == ScorerKind.MASKED:
        return masked
    if scorer == ScorerKind.PROMPT:
        return prompt
    if scorer == ScorerKind.DECODED:
        return decoded
    if scorer == ScorerKind.ALL_RESPONSE:
        return np.sort(np.concatenate([masked, decoded]))
    if scorer == ScorerKind.PROMPT_RESPONSE:
        return np.sort(np.concatenate([prompt, masked, decoded]))
    if scorer == ScorerKind.VISUAL:
        return np.arange(n, dtype=np.int64)
    if scorer == ScorerKind.PROMPT_MASKED:
        return np.sort(np.concatenate([prompt, masked]))
    raise ValueError(f"unknown scorer {scorer!r}")
