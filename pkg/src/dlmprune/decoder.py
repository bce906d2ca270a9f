"""Masked-diffusion inference over a visual/prompt/response token sequence.

Each step runs one bidirectional forward pass over the concatenated segments,
commits some still-masked response positions (greedy argmax), and leaves every
already-committed position untouched. Two unmasking schedules are provided:

* ``stochastic`` — each masked position independently stays masked with
  probability (1 - k/K) / (1 - (k-1)/K), so the marginal masked fraction after
  step k is exactly 1 - k/K.
* ``confidence`` — commits a fixed per-step quota of the highest-confidence
  positions (max softmax probability, ties to the lower position index).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import pruning
from .model import AttentionCapture, ModelWeights, embed_response, forward
from .numerics import Matrix, SeededRng, softmax_rows


class PolicyKind(str, Enum):
    STOCHASTIC = "stochastic"
    CONFIDENCE = "confidence"


@dataclass(frozen=True)
class SchedulePolicy:
    kind: PolicyKind
    rng_seed: Optional[int] = None

    def __post_init__(self):
        if self.kind == PolicyKind.STOCHASTIC and self.rng_seed is None:
            raise ValueError("stochastic policy needs rng_seed")

    @classmethod
    def stochastic(cls, seed: int) -> "SchedulePolicy":
        return cls(PolicyKind.STOCHASTIC, rng_seed=seed)

    @classmethod
    def confidence(cls) -> "SchedulePolicy":
        return cls(PolicyKind.CONFIDENCE)


@dataclass
class SequenceState:
    """Live decoding state; owned by exactly one run."""

    visual: Matrix                 # current visual rows (original or pruned)
    prompt: Matrix                 # (m, d)
    response_ids: np.ndarray       # (tau,) int64; masked positions hold mask_token_id
    masked: np.ndarray             # (tau,) bool
    visual_index_map: np.ndarray   # original indices of surviving visual rows, ascending
    step: int                      # next step to run, 1-based
    total_steps: int
    mask_token_id: int

    @property
    def num_visual(self) -> int:
        return self.visual.shape[0]

    @property
    def prompt_len(self) -> int:
        return self.prompt.shape[0]

    @property
    def response_len(self) -> int:
        return self.response_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.num_visual + self.prompt_len + self.response_len

    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.masked)

    def decoded_positions(self) -> np.ndarray:
        return np.flatnonzero(~self.masked)


@dataclass
class StepOutcome:
    newly_decoded: np.ndarray
    attention: Optional[AttentionCapture] = None
    logits_snapshot: Optional[np.ndarray] = None  # rows for positions masked at step entry


@dataclass
class RunStats:
    seconds_total: float = 0.0
    per_step_seconds: list = field(default_factory=list)
    per_step_lengths: list = field(default_factory=list)
    score_trace: Optional[list] = None  # per-step importance vectors when instrumented


def init_state(visual: Matrix, prompt: Matrix, tau: int, total_steps: int,
               *, mask_token_id: int) -> SequenceState:
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    visual = np.asarray(visual, dtype=np.float64)
    prompt = np.asarray(prompt, dtype=np.float64)
    return SequenceState(
        visual=visual,
        prompt=prompt,
        response_ids=np.full(tau, mask_token_id, dtype=np.int64),
        masked=np.ones(tau, dtype=bool),
        visual_index_map=np.arange(visual.shape[0], dtype=np.int64),
        step=1,
        total_steps=total_steps,
        mask_token_id=mask_token_id,
    )


def remask_prob(k: int, total_steps: int) -> float:
    """Probability that a masked position stays masked through step k of K."""
    if not 1 <= k <= total_steps:
        raise ValueError(f"step {k} outside 1..{total_steps}")
    return (1.0 - k / total_steps) / (1.0 - (k - 1) / total_steps)


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def decode_quota(k: int, tau: int, total_steps: int) -> int:
    """Positions the confidence schedule commits at step k; quotas sum to tau."""
    return _round_half_up(tau * k / total_steps) - _round_half_up(tau * (k - 1) / total_steps)


def step(state: SequenceState, weights: ModelWeights, policy: SchedulePolicy,
         rng: Optional[SeededRng] = None, *, capture: bool = True
         ) -> tuple[SequenceState, StepOutcome]:
    """Run one inference step in place and report what it committed.

    Already-decoded positions are never altered. ``capture=False`` skips
    storing attention maps (logits are unaffected).
    """
    k = state.step
    if k > state.total_steps:
        raise ValueError(f"step {k} exceeds configured total {state.total_steps}")
    resp_embed = embed_response(state.response_ids, weights)
    x = np.vstack([state.visual, state.prompt, resp_embed])
    logits, cap = forward(x, weights, capture=capture)
    if cap is not None:
        cap.step_index = k
    resp_logits = logits[state.num_visual + state.prompt_len :]

    entry_masked = state.masked_positions()
    commit: list[int] = []
    if policy.kind == PolicyKind.STOCHASTIC:
        if rng is None:
            raise ValueError("stochastic policy needs an rng")
        q = remask_prob(k, state.total_steps)
        # One uniform draw per masked position, in ascending position order;
        # a batched draw consumes the stream identically to scalar draws.
        stay = rng.random(size=entry_masked.size) < q
        commit = [int(p) for p in entry_masked[~stay]]
    else:
        quota = min(decode_quota(k, state.response_len, state.total_steps), entry_masked.size)
        if quota > 0:
            probs = softmax_rows(resp_logits[entry_masked])
            conf = probs.max(axis=1)
            order = np.argsort(-conf, kind="stable")  # ties -> lower position index
            commit = [int(entry_masked[i]) for i in order[:quota]]

    for p in commit:
        state.response_ids[p] = int(np.argmax(resp_logits[p]))
        state.masked[p] = False
    state.step = k + 1

    outcome = StepOutcome(
        newly_decoded=np.array(sorted(commit), dtype=np.int64),
        attention=cap,
        logits_snapshot=resp_logits[entry_masked].copy() if capture else None,
    )
    return state, outcome


def _plan_wants_scores(plan: Optional[pruning.PrunePlan], k: int, total_steps: int) -> bool:
    if plan is None:
        return False
    if plan.strategy == pruning.StrategyKind.ONCE:
        return k == 1
    if plan.strategy == pruning.StrategyKind.PROGRESSIVE:
        return k <= total_steps - 1 and plan.per_step_counts[k - 1] > 0
    return False


def _apply_plan(state: SequenceState, plan: pruning.PrunePlan, k: int,
                capture: Optional[AttentionCapture], prune_rng: Optional[SeededRng]) -> None:
    strat = plan.strategy
    if strat == pruning.StrategyKind.ONCE and k == 1:
        keep = pruning.select_top(
            state.visual_index_map, _scores_now(state, plan, capture, k), plan.ratio)
        pruning.apply_prune(state, keep)
    elif strat == pruning.StrategyKind.RANDOM_ONCE and k == 1:
        keep = pruning.random_keep(state.visual_index_map, plan.ratio, prune_rng)
        pruning.apply_prune(state, keep)
    elif strat == pruning.StrategyKind.PROGRESSIVE and k <= state.total_steps - 1:
        count = plan.per_step_counts[k - 1]
        if count > 0:
            scores = _scores_now(state, plan, capture, k)
            keep_n = state.num_visual - count
            keep = pruning.keep_top_n(state.visual_index_map, scores, keep_n)
            pruning.apply_prune(state, keep)


def _scores_now(state: SequenceState, plan: pruning.PrunePlan,
                capture: AttentionCapture, k: int) -> pruning.ImportanceScores:
    abar = pruning.mean_attention(capture)
    rows = pruning.guidance_rows(state, plan.scorer)
    cols = np.arange(state.num_visual)
    return pruning.importance_scores(abar, rows, cols, step=k, scorer=plan.scorer)


def run_inference(visual: Matrix, prompt: Matrix, tau: int, total_steps: int,
                  weights: ModelWeights, policy: SchedulePolicy,
                  prune_plan: Optional[pruning.PrunePlan] = None, *,
                  collect_attention: bool = False,
                  score_with: Optional[pruning.ScorerKind] = None
                  ) -> tuple[np.ndarray, list[StepOutcome], RunStats]:
    """Decode a full response, optionally pruning visual tokens along the way.

    ``collect_attention`` keeps every step's maps in the trace (memory-heavy);
    otherwise maps live only long enough to score the prune. ``score_with``
    records the per-step importance vector for that guidance set without
    pruning anything (used for score-stability analysis); steps whose guidance
    set is empty are skipped.
    """
    if prune_plan is not None:
        prune_plan.validate(num_visual=np.asarray(visual).shape[0], total_steps=total_steps)
    rng = SeededRng(policy.rng_seed) if policy.kind == PolicyKind.STOCHASTIC else None
    prune_rng = None
    if prune_plan is not None and prune_plan.strategy == pruning.StrategyKind.RANDOM_ONCE:
        prune_rng = SeededRng(prune_plan.rng_seed)

    state = init_state(visual, prompt, tau, total_steps,
                       mask_token_id=weights.config.mask_token_id)
    trace: list[StepOutcome] = []
    score_trace: list[np.ndarray] = [] if score_with is not None else None

    t_start = time.perf_counter()
    stats = RunStats()
    for k in range(1, total_steps + 1):
        if not state.masked.any():
            break
        need_capture = (collect_attention or score_with is not None
                        or _plan_wants_scores(prune_plan, k, total_steps))
        t_step = time.perf_counter()
        stats.per_step_lengths.append(state.seq_len)
        state, outcome = step(state, weights, policy, rng, capture=need_capture)
        if score_with is not None and state.masked.any():
            rows = pruning.guidance_rows(state, score_with)
            if rows.size:
                abar = pruning.mean_attention(outcome.attention)
                cols = np.arange(state.num_visual)
                s = pruning.importance_scores(abar, rows, cols, step=k, scorer=score_with)
                score_trace.append(s.values)
        if prune_plan is not None and state.masked.any():
            # No forward pass follows once decoding completes, so late prune
            # hooks would be dead work (and masked-row guidance is gone).
            _apply_plan(state, prune_plan, k, outcome.attention, prune_rng)
        stats.per_step_seconds.append(time.perf_counter() - t_step)
        if not collect_attention:
            outcome.attention = None
            outcome.logits_snapshot = None
        trace.append(outcome)
    stats.seconds_total = time.perf_counter() - t_start
    stats.score_trace = score_trace
    return state.response_ids.copy(), trace, stats
