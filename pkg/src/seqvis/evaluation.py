"""Greedy evaluation plus the structure x order and visual-budget ablations."""

from collections import defaultdict

import numpy as np

from .envsim import compute_reward, rollout
from .numerics import RngStream
from .policy import score_actions
from .regions import patch_subset_bank
from .training import kl_divergence

ORDER_MODES = ("cognition", "random")
STRUCTURE_MODES = ("saliency_regions", "patch_subset")
BUDGETS = ("2", "3", "4", "adaptive")


def patch_subset_banks(tasks, banks, seed):
    base = RngStream(seed, "patch_subset")
    return [patch_subset_bank(t.grid, b, base.fork(t.task_id)) for t, b in zip(tasks, banks)]


def evaluate(params, reasoner, tasks, banks, policy_config=None, cap=8, fixed_k=None, order="cognition",
             seed=0, ref_params=None, reward_weights=None):
    """Greedy rollouts over ``tasks``; returns aggregate metrics.

    ``order="random"`` needs ``seed`` for the region draws. When
    ``ref_params`` is given the mean KL to that policy over visited states is
    reported as well.
    """
    reward_weights = reward_weights or {}
    base = RngStream(seed, "evaluate")
    correct = []
    vision = []
    rewards = []
    kls = []
    by_diff = defaultdict(list)
    for task, bank in zip(tasks, banks):
        traj = rollout(params, reasoner, task, bank, base.fork(task.task_id), mode="greedy", cap=cap,
                       config=policy_config, order=order, fixed_k=fixed_k)
        rw = compute_reward(traj, task, **reward_weights)
        correct.append(rw.r_task)
        vision.append(rw.vision_steps)
        rewards.append(rw.total)
        by_diff[task.difficulty].append(rw.r_task)
        if ref_params is not None:
            for step in traj.steps:
                p = score_actions(params, step.state, bank, policy_config, mask_stop=step.mask_stop)
                q = score_actions(ref_params, step.state, bank, policy_config, mask_stop=step.mask_stop)
                kls.append(kl_divergence(p, q))
    n = len(tasks)
    out = {
        "n_tasks": n,
        "accuracy": float(np.mean(correct)) if n else 0.0,
        "mean_vision_steps": float(np.mean(vision)) if n else 0.0,
        "mean_reward": float(np.mean(rewards)) if n else 0.0,
        "per_difficulty": {str(d): {"n": len(v), "accuracy": float(np.mean(v))} for d, v in sorted(by_diff.items())},
    }
    if ref_params is not None:
        out["mean_kl"] = float(np.mean(kls)) if kls else 0.0
    return out


def ablation_table(params, reasoner, tasks, banks, subset_banks, policy_config=None, cap=8, seed=0):
    """Accuracy for every (structure, order) pair."""
    table = {}
    for structure, bk in (("saliency_regions", banks), ("patch_subset", subset_banks)):
        table[structure] = {}
        for order in ORDER_MODES:
            res = evaluate(params, reasoner, tasks, bk, policy_config, cap, order=order, seed=seed)
            table[structure][order] = {"accuracy": res["accuracy"], "mean_vision_steps": res["mean_vision_steps"]}
    return table


def budget_table(params, reasoner, tasks, banks, policy_config=None, cap=8, seed=0):
    """Fixed-K (K = 2, 3, 4) against adaptive stopping."""
    table = {}
    for name in BUDGETS:
        k = None if name == "adaptive" else int(name)
        res = evaluate(params, reasoner, tasks, banks, policy_config, cap, fixed_k=k, seed=seed)
        table[name] = {"accuracy": res["accuracy"], "mean_vision_steps": res["mean_vision_steps"]}
    return table
