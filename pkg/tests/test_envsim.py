import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import reward_reference

from seqvis.envsim import (
    EnvConfig,
    Step,
    TaskInstance,
    ToyReasoner,
    Trajectory,
    compute_reward,
    generate_task,
    generate_tasks,
    oracle_actions,
    read_tasks,
    rollout,
    scripted_rollout,
    step_reasoner,
    write_tasks,
)
from seqvis.exceptions import GenerationError, InvalidArgumentError, ParseError
from seqvis.numerics import RngStream
from seqvis.policy import Action, PolicyConfig, PolicyParams, ReasoningState
from seqvis.regions import build_region_bank
from seqvis.schemas import validate


@pytest.fixture(scope="module")
def pairs(reasoner):
    tasks = generate_tasks(5, 500, reasoner=reasoner, difficulty=2, stream="order_check")
    return [(t, build_region_bank(t.grid)) for t in tasks]


def _fake_traj(correct_answer, n_select, stopped, gold=0):
    state = ReasoningState(np.zeros(3))
    steps = [Step(state, Action.select(k), 0.0) for k in range(n_select)]
    if stopped:
        steps.append(Step(state, Action.stop(), 0.0))
    traj = Trajectory(steps, gold if correct_answer else gold + 1, state, stopped)
    return traj, TaskInstance(0, None, gold, [], 1)


class TestReasoner:
    def test_zero_fixed_point(self, reasoner):
        out = step_reasoner(reasoner, ReasoningState(np.zeros(reasoner.d_l)), np.zeros(32))
        assert np.all(out.h == 0) and out.t == 2

    def test_contractive(self, reasoner):
        assert reasoner.spectral_norm <= 0.9 + 1e-12

    @given(st.integers(0, 10_000))
    def test_bounded(self, seed):
        g = RngStream(seed)
        r = ToyReasoner.from_seed(0)
        out = step_reasoner(r, ReasoningState(g.generator.uniform(-1, 1, r.d_l)), g.normal(size=32))
        assert np.all(np.abs(out.h) < 1)

    def test_repeated_injection_converges(self, reasoner):
        x = RngStream(1).normal(size=32)
        state = reasoner.initial_state(RngStream(2).normal(size=32))
        for _ in range(200):
            nxt = step_reasoner(reasoner, state, x)
            if np.linalg.norm(nxt.h - state.h) < 1e-6:
                break
            state = nxt
        else:
            pytest.fail("no convergence within 200 steps")

    def test_region_index_marks_visited(self, reasoner):
        s = step_reasoner(reasoner, reasoner.initial_state(np.ones(32)), np.ones(32), 3)
        assert s.visited == frozenset({3})

    def test_seeded(self):
        a, b = ToyReasoner.from_seed(4), ToyReasoner.from_seed(4)
        assert np.array_equal(a.A, b.A) and np.array_equal(a.readout, b.readout)


class TestGenerator:
    def test_difficulty_one_oracle_single_injection(self, reasoner):
        t = generate_task(RngStream(3), reasoner=reasoner, difficulty=1)
        assert reasoner.answer(reasoner.run(t.query, t.oracle_features()[:1]).h) == t.gold_answer

    def test_same_seed_same_json(self, reasoner):
        a = generate_tasks(9, 3, reasoner=reasoner)
        b = generate_tasks(9, 3, reasoner=reasoner)
        assert json.dumps([t.to_json() for t in a]) == json.dumps([t.to_json() for t in b])

    def test_oracle_solvable(self, small_tasks, small_banks, reasoner):
        for t, bank in zip(small_tasks, small_banks):
            order = oracle_actions(t, bank)
            assert order == list(range(t.difficulty))
            traj = scripted_rollout(reasoner, t, bank, order)
            assert compute_reward(traj, t).r_task == 1

    def test_blocks_do_not_overlap(self, small_tasks):
        for t in small_tasks:
            cells = [c for b in t.planted for c in b.cells()]
            assert len(cells) == len(set(cells))
            assert t.difficulty <= len(t.planted)
            rel = [b.relevance for b in sorted(t.planted, key=lambda b: b.rank)]
            assert rel == sorted(rel, reverse=True)

    def test_swapped_order_changes_answer(self, pairs, reasoner):
        changed = sum(scripted_rollout(reasoner, t, b, [1, 0]).predicted_answer != t.gold_answer for t, b in pairs)
        assert changed / len(pairs) > 0.5

    def test_random_order_accuracy_gap(self, pairs, reasoner):
        rng = RngStream(6, "perm")
        oracle = np.mean([scripted_rollout(reasoner, t, b, [0, 1]).predicted_answer == t.gold_answer
                          for t, b in pairs])
        shuffled = np.mean([scripted_rollout(reasoner, t, b, list(rng.permutation(2))).predicted_answer
                            == t.gold_answer for t, b in pairs])
        assert oracle == 1.0
        assert oracle - shuffled >= 0.20

    def test_infeasible_grid(self, reasoner):
        cfg = EnvConfig(grid_h=6, grid_w=6)
        with pytest.raises(InvalidArgumentError):
            generate_task(RngStream(0), cfg, reasoner, difficulty=2)

    def test_retries_exhausted(self, reasoner):
        cfg = EnvConfig(max_retries=1, block_min=5, block_max=5, max_distractors=0)
        with pytest.raises(GenerationError):
            generate_tasks(0, 20, cfg, reasoner, difficulty=3)

    def test_difficulty_bounds(self, reasoner):
        with pytest.raises(InvalidArgumentError):
            generate_task(RngStream(0), reasoner=reasoner, difficulty=0)
        with pytest.raises(InvalidArgumentError):
            generate_task(RngStream(0), reasoner=reasoner, difficulty=4, region_kwargs={"n_regions": 3})

    def test_negative_count(self):
        with pytest.raises(InvalidArgumentError):
            generate_tasks(0, -1)


class TestReward:
    @pytest.mark.parametrize("correct, n_select, stopped, want", [
        (True, 2, True, 1.07),
        (False, 8, False, -0.48),
        (True, 0, True, 1.19),
    ])
    def test_examples(self, correct, n_select, stopped, want):
        traj, task = _fake_traj(correct, n_select, stopped)
        r = compute_reward(traj, task)
        assert r.total == pytest.approx(want, abs=1e-12)
        assert r.total == reward_reference(correct, stopped, len(traj.steps), n_select)

    @given(st.booleans(), st.integers(0, 8), st.booleans())
    def test_identity_is_exact(self, correct, n_select, stopped):
        traj, task = _fake_traj(correct, n_select, stopped)
        r = compute_reward(traj, task)
        assert r.total == r.r_task + 0.2 * r.r_format - 0.01 * r.length_tokens - 0.05 * r.vision_steps
        assert r.vision_steps == n_select


class TestRollout:
    def test_always_stop_policy(self, reasoner, small_tasks, small_banks):
        task, bank = small_tasks[0], small_banks[0]
        d_l, d_v = reasoner.d_l, 32
        h0 = reasoner.initial_state(task.query).h
        # no visual projection: every region scores 0, STOP scores 1
        params = PolicyParams(np.eye(d_l), np.zeros((d_l, d_v)), h0.copy())
        traj = rollout(params, reasoner, task, bank, config=PolicyConfig(temperature=0.1))
        assert len(traj.steps) == 1 and traj.steps[0].action.is_stop and traj.stopped
        assert traj.predicted_answer == reasoner.answer(h0)
        assert compute_reward(traj, task).vision_steps == 0

    def test_cap_forces_end(self, reasoner, small_tasks, small_banks, params):
        for t, b in zip(small_tasks[:10], small_banks[:10]):
            traj = rollout(params, reasoner, t, b, RngStream(0), mode="sample", cap=2,
                           config=PolicyConfig(allow_revisit=True))
            assert len(traj.steps) <= 2
            assert traj.stopped or len(traj.steps) == 2
            assert all(np.isfinite(s.log_prob) for s in traj.steps)

    def test_vision_steps_count_selects(self, reasoner, small_tasks, small_banks, params):
        for t, b in zip(small_tasks[:10], small_banks[:10]):
            traj = rollout(params, reasoner, t, b, RngStream(t.task_id), mode="sample")
            assert compute_reward(traj, t).vision_steps == sum(not a.is_stop for a in traj.actions)

    def test_fixed_k(self, reasoner, small_tasks, small_banks, params):
        for t, b in zip(small_tasks[:10], small_banks[:10]):
            traj = rollout(params, reasoner, t, b, fixed_k=2)
            assert traj.vision_steps == min(2, b.n_slots) and not traj.stopped

    def test_greedy_replay_is_bitwise(self, reasoner, small_tasks, small_banks, params):
        a = rollout(params, reasoner, small_tasks[1], small_banks[1], RngStream(2), mode="sample")
        b = rollout(params, reasoner, small_tasks[1], small_banks[1], RngStream(2), mode="sample")
        assert json.dumps(a.to_json()) == json.dumps(b.to_json())
        assert np.array_equal(a.final_state.h, b.final_state.h)

    def test_cap_validation(self, reasoner, small_tasks, small_banks, params):
        with pytest.raises(InvalidArgumentError):
            rollout(params, reasoner, small_tasks[0], small_banks[0], cap=0)


class TestDatasetIO:
    def test_roundtrip(self, tmp_path, small_tasks):
        path = tmp_path / "t.jsonl"
        write_tasks(path, small_tasks[:4])
        back = read_tasks(path)
        assert [json.dumps(t.to_json()) for t in back] == [json.dumps(t.to_json()) for t in small_tasks[:4]]
        for line in path.read_text().splitlines():
            validate(json.loads(line), "task")

    def test_bad_line_reports_offset(self, tmp_path, small_tasks):
        path = tmp_path / "t.jsonl"
        write_tasks(path, small_tasks[:1])
        good = path.read_bytes()
        path.write_bytes(good + b"{not json\n")
        with pytest.raises(ParseError) as info:
            read_tasks(path)
        assert info.value.offset == len(good)
