"""Two-stage training: curriculum behaviour cloning, then group-relative
policy optimisation with a KL anchor to the cloned policy."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .envsim import compute_reward, rollout, step_reasoner
from .exceptions import DivergentKLError, InvalidArgumentError, MaskedActionError
from .policy import Action, PolicyConfig, backprop_scores, grad_log_prob, log_prob, score_actions
from .regions import tiling_bank

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.02
    rl_lr: float = 0.002
    group_size: int = 4
    beta: float = 0.02
    lambda_format: float = 0.2
    lambda_length: float = 0.01
    lambda_vision: float = 0.05
    e_warm: int = 2
    sft_epochs: int = 6
    rl_steps: int = 700
    sft_batch: int = 16
    rl_batch: int = 16
    eval_every: int = 100
    cap: int = 8
    tile: int = 4

    def __post_init__(self):
        for name in ("lr", "beta", "lambda_format", "lambda_length", "lambda_vision"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidArgumentError(f"{name} must be finite and nonnegative, got {v!r}")
        if self.rl_lr is not None and (not np.isfinite(self.rl_lr) or self.rl_lr < 0):
            raise InvalidArgumentError("rl_lr must be finite and nonnegative")
        if self.group_size < 2:
            raise InvalidArgumentError("group_size must be >= 2; the advantage is undefined for one sample")
        if self.e_warm < 1:
            raise InvalidArgumentError("e_warm must be >= 1")
        if self.cap < 1:
            raise InvalidArgumentError("cap must be >= 1")

    @property
    def effective_rl_lr(self):
        return self.lr if self.rl_lr is None else self.rl_lr

    @property
    def reward_weights(self):
        return dict(lambda_format=self.lambda_format, lambda_length=self.lambda_length,
                    lambda_vision=self.lambda_vision)


def curriculum_lambda(epoch, e_warm):
    """Mixing weight that ramps linearly from 0 to 1 over ``e_warm`` epochs."""
    if epoch < 0 or e_warm < 1:
        raise InvalidArgumentError("need epoch >= 0 and e_warm >= 1")
    return min(1.0, epoch / e_warm)


@dataclass
class ExpertSequence:
    bank: object
    actions: list
    branch: str


def pseudo_expert_order(task, bank, lam, rng, n_regions=5, tile=4):
    """Heuristic viewing order for behaviour cloning.

    With probability ``lam`` the saliency bank's local regions are read in
    descending score order; otherwise a question-independent tiling bank is
    built and its tiles are read in a random permutation. Either way the
    sequence ends with STOP.
    """
    if rng.random() < lam:
        acts = [Action.select(k) for k in range(len(bank.regions))]
        return ExpertSequence(bank, acts + [Action.stop()], "saliency")
    tb = tiling_bank(task.grid, rng, n_regions=n_regions, tile=tile)
    perm = rng.permutation(len(tb.regions))
    acts = [Action.select(int(k)) for k in perm]
    return ExpertSequence(tb, acts + [Action.stop()], "random")


def sft_step(params, batch, reasoner, lr, policy_config=None):
    """One behaviour-cloning update.

    ``batch`` holds ``(task, bank, actions)`` triples. Returns the summed
    negative log-likelihood before the update, the updated parameters, and
    a count of skipped (masked) expert steps.
    """
    policy_config = policy_config or PolicyConfig()
    loss = 0.0
    skipped = 0
    n_terms = 0
    grad = None
    for task, bank, actions in batch:
        state = reasoner.initial_state(task.query)
        emb = bank.slot_embeddings()
        for a in actions:
            dist = score_actions(params, state, bank, policy_config)
            try:
                lp = log_prob(dist, a)
            except MaskedActionError:
                skipped += 1
            else:
                loss -= lp
                n_terms += 1
                g = grad_log_prob(params, state, bank, a, policy_config, dist=dist)
                # loss is -log p, so descend along +grad log p
                grad = g if grad is None else grad.iadd(g)
            if a.is_stop:
                break
            state = step_reasoner(reasoner, state, emb[a.index], a.index)
    new_params = params.scaled_add(grad, lr) if grad is not None else params.copy()
    return loss, new_params, {"skipped": skipped, "terms": n_terms}


def kl_divergence(p, q):
    """KL(p || q) between two action distributions (or probability vectors)."""
    p = np.asarray(getattr(p, "probs", p), dtype=np.float64)
    q = np.asarray(getattr(q, "probs", q), dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidArgumentError("distributions must share a support")
    support = p > 0
    if np.any(q[support] == 0):
        raise DivergentKLError("q assigns zero mass where p is positive")
    return float(max(0.0, np.sum(p[support] * (np.log(p[support]) - np.log(q[support])))))


def _kl_logit_grad(p, q):
    support = p > 0
    logratio = np.zeros_like(p)
    logratio[support] = np.log(p[support]) - np.log(q[support])
    kl = float(np.sum(p[support] * logratio[support]))
    return p * (logratio - kl), kl


def group_advantages(rewards):
    """Rewards minus the group mean (no scaling by the spread)."""
    r = np.asarray(rewards, dtype=np.float64)
    return r - r.mean()


@dataclass
class TrajectoryGroup:
    trajectories: list
    rewards: np.ndarray
    advantages: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.advantages is None:
            self.advantages = group_advantages(self.rewards)


def sample_group(params, reasoner, task, bank, lam, cfg, rng, policy_config=None):
    """Draw ``group_size`` trajectories, each from the learned policy with
    probability ``lam`` and from the uniform random policy otherwise."""
    trajs = []
    for i in range(cfg.group_size):
        sub = rng.fork(i)
        behaviour = "policy" if sub.random() < lam else "random"
        traj = rollout(params, reasoner, task, bank, sub, mode="sample", cap=cfg.cap,
                       config=policy_config, behaviour=behaviour)
        traj.reward = compute_reward(traj, task, **cfg.reward_weights)
        trajs.append(traj)
    return TrajectoryGroup(trajs, np.array([t.reward.total for t in trajs]))


def grpo_gradient(params, ref_params, groups_and_banks, beta, policy_config=None):
    """Gradient of ``L_RL + beta * L_KL`` summed over task groups.

    ``L_RL = -sum_i A_i sum_t log pi(a_t | s_t)`` per group, and ``L_KL`` is
    the mean KL to the reference policy over the group's visited states.
    """
    policy_config = policy_config or PolicyConfig()
    grad = None
    kls = []
    for group, bank in groups_and_banks:
        n_states = sum(len(t.steps) for t in group.trajectories)
        for traj, adv in zip(group.trajectories, group.advantages):
            for step in traj.steps:
                dist = score_actions(params, step.state, bank, policy_config, mask_stop=step.mask_stop)
                pos = step.action.position(dist.n_slots)
                g_logit = -dist.probs.copy()
                g_logit[pos] += 1.0
                g_logit *= -adv
                ref = score_actions(ref_params, step.state, bank, policy_config, mask_stop=step.mask_stop)
                g_kl, kl = _kl_logit_grad(dist.probs, ref.probs)
                kls.append(kl)
                g = backprop_scores(params, dist, g_logit + beta * g_kl / n_states)
                grad = g if grad is None else grad.iadd(g)
    return grad, (float(np.mean(kls)) if kls else 0.0)


def grpo_step(params, ref_params, batch, lam, cfg, reasoner, rng, policy_config=None):
    """One GRPO update over ``batch`` of ``(task, bank)`` pairs."""
    groups = []
    for j, (task, bank) in enumerate(batch):
        groups.append((sample_group(params, reasoner, task, bank, lam, cfg, rng.fork(j), policy_config), bank))
    grad, mean_kl = grpo_gradient(params, ref_params, groups, cfg.beta, policy_config)
    new_params = params.scaled_add(grad, -cfg.effective_rl_lr) if grad is not None else params.copy()
    rewards = np.concatenate([g.rewards for g, _ in groups])
    metrics = {
        "mean_reward": float(rewards.mean()),
        "mean_kl": mean_kl,
        "advantage_sums": [float(g.advantages.sum()) for g, _ in groups],
        "zero_advantage_groups": sum(int(np.all(g.advantages == 0)) for g, _ in groups),
        "task_accuracy": float(np.mean([t.reward.r_task for g, _ in groups for t in g.trajectories])),
        "lambda": lam,
    }
    if metrics["zero_advantage_groups"]:
        log.debug("%d groups with identical rewards (KL-only contribution)", metrics["zero_advantage_groups"])
    return new_params, metrics, [g for g, _ in groups]
