import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import finite_difference

from seqvis.envsim import compute_reward, rollout
from seqvis.exceptions import DivergentKLError, InvalidArgumentError
from seqvis.numerics import RngStream
from seqvis.policy import Action, PolicyConfig, PolicyParams, log_prob, score_actions
from seqvis.training import (
    TrainConfig,
    TrajectoryGroup,
    curriculum_lambda,
    group_advantages,
    grpo_gradient,
    grpo_step,
    kl_divergence,
    pseudo_expert_order,
    sample_group,
    sft_step,
)

PC = PolicyConfig(temperature=0.5)


class TestCurriculum:
    @pytest.mark.parametrize("e, w, want", [(0, 4, 0.0), (2, 4, 0.5), (4, 4, 1.0), (9, 4, 1.0)])
    def test_values(self, e, w, want):
        assert curriculum_lambda(e, w) == want

    @given(st.integers(0, 50), st.integers(1, 20))
    def test_monotone_and_bounded(self, e, w):
        a, b = curriculum_lambda(e, w), curriculum_lambda(e + 1, w)
        assert 0.0 <= a <= b <= 1.0
        if e >= w:
            assert a == 1.0

    def test_invalid(self):
        with pytest.raises(InvalidArgumentError):
            curriculum_lambda(-1, 4)
        with pytest.raises(InvalidArgumentError):
            curriculum_lambda(0, 0)


class TestPseudoExpert:
    def test_saturated_is_descending_score(self, small_tasks, small_banks):
        rng = RngStream(0)
        for t, b in zip(small_tasks, small_banks):
            seq = pseudo_expert_order(t, b, 1.0, rng)
            assert seq.branch == "saliency" and seq.bank is b
            assert [a.index for a in seq.actions[:-1]] == list(range(len(b.regions)))
            assert seq.actions[-1].is_stop

    def test_zero_is_always_random(self, small_tasks, small_banks):
        rng = RngStream(1)
        seqs = [pseudo_expert_order(small_tasks[0], small_banks[0], 0.0, rng) for _ in range(10_000)]
        assert all(s.branch == "random" for s in seqs)
        assert all(s.actions[-1].is_stop for s in seqs)
        assert len({tuple(a.index for a in s.actions[:-1]) for s in seqs[:200]}) > 1


class TestSFT:
    def _bank3(self, small_banks):
        return next(b for b in small_banks if len(b.regions) == 3)

    def test_uniform_policy_loss(self, small_tasks, small_banks, reasoner, env_config):
        bank = self._bank3(small_banks)
        task = small_tasks[small_banks.index(bank)]
        g = RngStream(0)
        params = PolicyParams(np.zeros((env_config.d_l, env_config.d_l)),
                              g.normal(size=(env_config.d_l, env_config.d_v)), g.normal(size=env_config.d_l))
        actions = [Action.select(0), Action.select(0), Action.stop()]
        loss, _, info = sft_step(params, [(task, bank, actions)], reasoner, 0.0, PolicyConfig(allow_revisit=True))
        assert loss == pytest.approx(3 * math.log(5), abs=1e-12)
        assert info == {"skipped": 0, "terms": 3}

    def test_revisit_is_skipped_and_counted(self, small_tasks, small_banks, reasoner, params):
        bank = self._bank3(small_banks)
        task = small_tasks[small_banks.index(bank)]
        _, _, info = sft_step(params, [(task, bank, [Action.select(1), Action.select(1), Action.stop()])],
                              reasoner, 0.01)
        assert info["skipped"] == 1 and info["terms"] == 2

    def test_overfits_one_batch(self, small_tasks, small_banks, reasoner, params):
        rng = RngStream(2)
        batch = []
        for t, b in zip(small_tasks[:4], small_banks[:4]):
            seq = pseudo_expert_order(t, b, 1.0, rng)
            batch.append((t, seq.bank, seq.actions))
        losses = []
        p = params
        for _ in range(100):
            loss, p, _ = sft_step(p, batch, reasoner, 0.002, PC)
            losses.append(loss)
        assert np.all(np.diff(losses) < 0)


class TestAdvantages:
    def test_examples(self):
        np.testing.assert_array_equal(group_advantages([1, 0, 0, 1]), [0.5, -0.5, -0.5, 0.5])
        np.testing.assert_array_equal(group_advantages([0.3] * 4), [0.0] * 4)

    @given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-2, 2)), st.floats(-10, 10))
    def test_zero_sum_and_shift_invariance(self, r, c):
        a = group_advantages(r)
        assert abs(a.sum()) < 1e-9
        np.testing.assert_allclose(group_advantages(r + c), a, atol=1e-9)


class TestKL:
    def test_examples(self):
        assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)
        assert kl_divergence([0.2, 0.8], [0.2, 0.8]) == 0.0

    def test_divergent(self):
        with pytest.raises(DivergentKLError):
            kl_divergence([0.5, 0.5], [1.0, 0.0])

    def test_gibbs_on_random_pairs(self):
        g = RngStream(3)
        for _ in range(1000):
            p, q = g.generator.dirichlet(np.ones(5)), g.generator.dirichlet(np.ones(5))
            assert kl_divergence(p, q) >= 0.0


class TestGRPO:
    def _batch(self, small_tasks, small_banks, n=4):
        return list(zip(small_tasks[:n], small_banks[:n]))

    def test_identical_reference_has_zero_kl(self, small_tasks, small_banks, reasoner, params):
        cfg = TrainConfig(rl_steps=1)
        _, metrics, groups = grpo_step(params, params.copy(), self._batch(small_tasks, small_banks), 1.0, cfg,
                                       reasoner, RngStream(4), PC)
        assert metrics["mean_kl"] <= 1e-9
        assert all(abs(s) < 1e-9 for s in metrics["advantage_sums"])
        assert all(len(g.trajectories) == 4 for g in groups)

    def test_mixture_flips_per_trajectory(self, small_tasks, small_banks, reasoner, params):
        cfg = TrainConfig()
        rng = RngStream(5)
        kinds = [t.behaviour for j in range(50)
                 for t in sample_group(params, reasoner, small_tasks[0], small_banks[0], 0.5, cfg,
                                       rng.fork(j), PC).trajectories]
        assert 0.35 < kinds.count("policy") / len(kinds) < 0.65
        only = sample_group(params, reasoner, small_tasks[0], small_banks[0], 0.0, cfg, rng, PC)
        assert all(t.behaviour == "random" for t in only.trajectories)

    def _objective(self, params, ref, groups, beta):
        total = 0.0
        for group, bank in groups:
            n_states = sum(len(t.steps) for t in group.trajectories)
            for traj, adv in zip(group.trajectories, group.advantages):
                for s in traj.steps:
                    d = score_actions(params, s.state, bank, PC, mask_stop=s.mask_stop)
                    r = score_actions(ref, s.state, bank, PC, mask_stop=s.mask_stop)
                    total -= adv * log_prob(d, s.action)
                    total += beta * kl_divergence(d, r) / n_states
        return total

    def test_gradient_matches_finite_differences(self, small_tasks, small_banks, reasoner, params):
        ref = PolicyParams(params.w_sig.copy(), params.w_vis.copy(),
                           params.stop + 0.3 * RngStream(6).normal(size=params.stop.shape))
        cfg = TrainConfig()
        groups = [(sample_group(params, reasoner, t, b, 0.5, cfg, RngStream(7).fork(i), PC), b)
                  for i, (t, b) in enumerate(self._batch(small_tasks, small_banks, 2))]
        grad, _ = grpo_gradient(params, ref, groups, 0.7, PC)
        for name in ("stop", "w_sig"):
            arr = getattr(params, name)
            if name == "w_sig":
                # a handful of coordinates keeps this quick
                idx = [(0, 0), (3, 5), (10, 2)]
                for ij in idx:
                    fd = finite_difference(lambda: self._objective(params, ref, groups, 0.7),
                                           arr[ij[0]:ij[0] + 1, ij[1]:ij[1] + 1])
                    assert fd[0, 0] == pytest.approx(grad.w_sig[ij], rel=1e-4, abs=1e-8)
            else:
                fd = finite_difference(lambda: self._objective(params, ref, groups, 0.7), arr)
                np.testing.assert_allclose(grad.stop, fd, rtol=1e-4, atol=1e-8)

    def test_positive_advantage_step_increases_objective(self, small_tasks, small_banks, reasoner, params):
        t, b = small_tasks[2], small_banks[2]
        rng = RngStream(8)
        trajs = [rollout(params, reasoner, t, b, rng.fork(i), mode="sample", config=PC) for i in range(4)]
        for tr in trajs:
            tr.reward = compute_reward(tr, t)
        group = TrajectoryGroup(trajs, np.array([tr.reward.total for tr in trajs]), np.array([1.0, 0.5, 2.0, 0.3]))

        def weighted(p):
            return sum(a * log_prob(score_actions(p, s.state, b, PC), s.action)
                       for tr, a in zip(group.trajectories, group.advantages) for s in tr.steps)

        grad, _ = grpo_gradient(params, params, [(group, b)], 0.0, PC)
        updated = params.scaled_add(grad, -1e-3)
        assert weighted(updated) > weighted(params)

    def test_identical_rewards_give_kl_only_update(self, small_tasks, small_banks, reasoner, params):
        t, b = small_tasks[3], small_banks[3]
        trajs = [rollout(params, reasoner, t, b, RngStream(9).fork(i), mode="sample", config=PC) for i in range(4)]
        group = TrajectoryGroup(trajs, np.full(4, 0.7))
        assert np.all(group.advantages == 0)
        grad, kl = grpo_gradient(params, params, [(group, b)], 0.5, PC)
        assert kl == 0.0
        assert all(np.allclose(a, 0, atol=1e-12) for a in grad.arrays())


class TestConfig:
    @pytest.mark.parametrize("kw", [{"lr": -1.0}, {"beta": float("nan")}, {"group_size": 1}, {"e_warm": 0},
                                    {"cap": 0}, {"rl_lr": -0.1}])
    def test_validation(self, kw):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(**kw)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.group_size, cfg.beta, cfg.rl_steps) == (4, 0.02, 700)
        assert cfg.reward_weights == {"lambda_format": 0.2, "lambda_length": 0.01, "lambda_vision": 0.05}
        assert TrainConfig(rl_lr=None, lr=0.3).effective_rl_lr == 0.3
