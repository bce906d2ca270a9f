import numpy as np
import pytest

from dlmprune.decoder import (PolicyKind, SchedulePolicy, decode_quota, init_state,
                              remask_prob, run_inference, step)
from dlmprune.model import (ModelConfig, build_copy_model, copy_model_config, embed_prompt,
                            encode_image, init_random_model)
from dlmprune.numerics import SeededRng
from dlmprune.pruning import PrunePlan, ScorerKind


def tiny_model(seed=1, grid=(2, 2), vocab=12):
    cfg = ModelConfig(layers=1, heads=1, embed_dim=8, vision_dim=4, ffn_dim=8,
                      vocab_size=vocab, patch_grid=grid, mask_token_id=vocab - 1)
    return cfg, init_random_model(cfg, seed)


def tiny_inputs(weights, seed=0, prompt_len=2):
    rng = SeededRng(seed)
    rows, cols = weights.config.patch_grid
    grid = [[f"s{int(rng.integers(0, 5))}" for _ in range(cols)] for _ in range(rows)]
    visual = encode_image(grid, weights)
    prompt = embed_prompt(rng.integers(0, weights.config.vocab_size - 1, size=prompt_len),
                          weights)
    return visual, prompt


class TestInitState:
    def test_initial_sets(self):
        cfg, w = tiny_model()
        v, p = tiny_inputs(w)
        st = init_state(v, p, 4, 8, mask_token_id=cfg.mask_token_id)
        assert st.masked_positions().tolist() == [0, 1, 2, 3]
        assert st.decoded_positions().size == 0
        assert st.step == 1
        np.testing.assert_array_equal(st.visual_index_map, [0, 1, 2, 3])
        assert np.all(st.response_ids == cfg.mask_token_id)

    def test_empty_prompt_is_legal(self):
        cfg, w = tiny_model()
        v, _ = tiny_inputs(w)
        st = init_state(v, np.zeros((0, 8)), 2, 2, mask_token_id=cfg.mask_token_id)
        assert st.prompt_len == 0 and st.seq_len == 4 + 0 + 2

    @pytest.mark.parametrize("tau,steps", [(0, 4), (4, 0)])
    def test_bad_counts(self, tau, steps):
        cfg, w = tiny_model()
        v, p = tiny_inputs(w)
        with pytest.raises(ValueError):
            init_state(v, p, tau, steps, mask_token_id=cfg.mask_token_id)


class TestRemaskProb:
    def test_first_step_value(self):
        assert remask_prob(1, 16) == pytest.approx(15.0 / 16.0)

    def test_final_step_zero(self):
        for k_total in (1, 4, 16):
            assert remask_prob(k_total, k_total) == 0.0

    def test_telescoping_product(self):
        prod = 1.0
        for k in range(1, 9):
            prod *= remask_prob(k, 16)
        assert prod == pytest.approx(0.5, abs=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            remask_prob(0, 16)
        with pytest.raises(ValueError):
            remask_prob(17, 16)


class TestDecodeQuota:
    def test_one_per_step(self):
        assert [decode_quota(k, 16, 16) for k in range(1, 17)] == [1] * 16

    def test_quotas_sum_to_tau(self):
        rng = SeededRng(11)
        for _ in range(50):
            tau = int(rng.integers(1, 40))
            steps = int(rng.integers(1, 25))
            quotas = [decode_quota(k, tau, steps) for k in range(1, steps + 1)]
            assert sum(quotas) == tau
            assert all(q >= 0 for q in quotas)


class TestStep:
    def test_decoded_positions_never_change(self):
        cfg, w = tiny_model()
        v, p = tiny_inputs(w)
        st = init_state(v, p, 6, 6, mask_token_id=cfg.mask_token_id)
        policy = SchedulePolicy.confidence()
        committed = {}
        for _ in range(6):
            st, out = step(st, w, policy, capture=False)
            for pos, tid in committed.items():
                assert st.response_ids[pos] == tid
            for pos in out.newly_decoded:
                committed[int(pos)] = int(st.response_ids[pos])
        assert len(committed) == 6

    def test_confidence_commits_quota(self):
        cfg, w = tiny_model()
        v, p = tiny_inputs(w)
        st = init_state(v, p, 16, 16, mask_token_id=cfg.mask_token_id)
        policy = SchedulePolicy.confidence()
        for _ in range(16):
            st, out = step(st, w, policy, capture=False)
            assert out.newly_decoded.size == 1
        assert not st.masked.any()

    def test_stochastic_requires_rng(self):
        cfg, w = tiny_model()
        v, p = tiny_inputs(w)
        st = init_state(v, p, 2, 2, mask_token_id=cfg.mask_token_id)
        with pytest.raises(ValueError):
            step(st, w, SchedulePolicy.stochastic(1), rng=None)

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            SchedulePolicy(PolicyKind.STOCHASTIC)

    def test_attention_capture_dims(self):
        cfg, w = tiny_model()
        v, p = tiny_inputs(w)
        st = init_state(v, p, 3, 4, mask_token_id=cfg.mask_token_id)
        st, out = step(st, w, SchedulePolicy.confidence())
        assert out.attention.seq_len == 4 + 2 + 3
        assert out.attention.step_index == 1


class TestStochasticMarginal:
    def test_masked_fraction_tracks_schedule(self):
        cfg, w = tiny_model(grid=(1, 1))
        v, p = tiny_inputs(w, prompt_len=0)
        steps, tau, trials = 8, 16, 200
        still_masked = np.zeros(steps)
        for t in range(trials):
            st = init_state(v, p, tau, steps, mask_token_id=cfg.mask_token_id)
            rng = SeededRng(1000 + t)
            policy = SchedulePolicy.stochastic(1000 + t)
            for k in range(steps):
                st, _ = step(st, w, policy, rng, capture=False)
                still_masked[k] += st.masked.sum()
        fractions = still_masked / (trials * tau)
        for k in range(steps):
            assert abs(fractions[k] - (1.0 - (k + 1) / steps)) < 0.04


class TestRunInference:
    def test_keep_all_ratio_is_identity(self):
        cfg, w = tiny_model(seed=9)
        v, p = tiny_inputs(w, seed=4)
        for policy in (SchedulePolicy.confidence(), SchedulePolicy.stochastic(77)):
            base, _, _ = run_inference(v, p, 5, 4, w, policy, None)
            for plan in (PrunePlan.once(1.0), PrunePlan.random_once(1.0, seed=5)):
                pruned, _, _ = run_inference(v, p, 5, 4, w, policy, plan)
                np.testing.assert_array_equal(base, pruned)

    def test_copy_model_decodes_planted_symbol(self):
        symbols = ("a", "b", "c", "d")
        ccfg = copy_model_config((2, 2), symbols)
        w = build_copy_model(ccfg, symbols)
        from dlmprune.model import CopyTaskVocab
        vocab = CopyTaskVocab(symbols, 4)
        visual = encode_image([["b", "a"], ["d", "c"]], w)
        prompt = embed_prompt([vocab.index_id(2)], w)
        for policy in (SchedulePolicy.confidence(), SchedulePolicy.stochastic(3)):
            ids, _, _ = run_inference(visual, prompt, 3, 3, w, policy, None)
            assert ids[0] == vocab.symbol_id("d")

    def test_single_step_decodes_everything(self):
        cfg, w = tiny_model()
        v, p = tiny_inputs(w)
        for policy in (SchedulePolicy.confidence(), SchedulePolicy.stochastic(5)):
            ids, trace, _ = run_inference(v, p, 4, 1, w, policy, None)
            assert len(trace) == 1
            assert np.all(ids != cfg.mask_token_id)

    def test_masked_sets_shrink_monotonically(self):
        cfg, w = tiny_model()
        v, p = tiny_inputs(w)
        _, trace, _ = run_inference(v, p, 8, 4, w, SchedulePolicy.stochastic(21), None)
        seen = set()
        for out in trace:
            newly = set(out.newly_decoded.tolist())
            assert not (newly & seen)
            seen |= newly
        assert seen == set(range(8))

    def test_pruned_run_lengths(self):
        cfg, w = tiny_model(grid=(3, 3))
        v, p = tiny_inputs(w)
        _, trace, stats = run_inference(v, p, 4, 4, w, SchedulePolicy.confidence(),
                                        PrunePlan.once(0.5), collect_attention=True)
        # step 1 at full length, steps 2+ at pruned length
        assert stats.per_step_lengths == [9 + 2 + 4, 4 + 2 + 4, 4 + 2 + 4, 4 + 2 + 4]
        assert trace[0].attention.seq_len == 15
        assert trace[1].attention.seq_len == 10

    def test_progressive_lengths_follow_counts(self):
        cfg, w = tiny_model(grid=(3, 3))
        v, p = tiny_inputs(w)
        plan = PrunePlan.progressive(0.5, scorer=ScorerKind.MASKED)
        _, _, stats = run_inference(v, p, 6, 4, w, SchedulePolicy.confidence(), plan)
        # budget 9 - keep(4) = 5 over 3 steps, remainder first: [2, 2, 1]
        assert plan.per_step_counts == [2, 2, 1]
        assert stats.per_step_lengths == [17, 15, 13, 12]

    def test_invalid_progressive_counts(self):
        cfg, w = tiny_model(grid=(3, 3))
        v, p = tiny_inputs(w)
        plan = PrunePlan(strategy=PrunePlan.progressive(0.5).strategy, ratio=0.5,
                         per_step_counts=[1, 1, 1])
        with pytest.raises(ValueError):
            run_inference(v, p, 4, 4, w, SchedulePolicy.confidence(), plan)
