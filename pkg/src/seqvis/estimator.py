"""scikit-learn style wrapper around the two-stage trainer."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .envsim import EnvConfig, ToyReasoner, TaskInstance, compute_reward, rollout
from .evaluation import evaluate
from .exceptions import InvalidArgumentError
from .experiment import build_banks, train_rl, train_sft
from .numerics import RngStream
from .policy import PolicyConfig, PolicyParams
from .training import TrainConfig, curriculum_lambda


def _check_tasks(X):
    tasks = list(X)
    if not all(isinstance(t, TaskInstance) for t in tasks):
        raise InvalidArgumentError("X must be a sequence of TaskInstance objects")
    return tasks


class SequentialVisualPolicy(BaseEstimator):
    """Learns which region to read next, and when to stop, on synthetic tasks.

    ``fit`` runs curriculum behaviour cloning followed by GRPO against the
    cloned policy. ``predict`` returns the greedy rollout's answer for each
    task and ``score`` its accuracy against the tasks' gold answers.
    """

    def __init__(self, temperature=0.1, similarity="cosine", allow_revisit=False, lr=0.02, rl_lr=0.002,
                 sft_epochs=6, rl_steps=700, group_size=4, beta=0.02, e_warm=2, sft_batch=16, rl_batch=16,
                 cap=8, n_regions=5, token_budget=48, env_config=None, reasoner_seed=0, random_state=0):
        self.temperature = temperature
        self.similarity = similarity
        self.allow_revisit = allow_revisit
        self.lr = lr
        self.rl_lr = rl_lr
        self.sft_epochs = sft_epochs
        self.rl_steps = rl_steps
        self.group_size = group_size
        self.beta = beta
        self.e_warm = e_warm
        self.sft_batch = sft_batch
        self.rl_batch = rl_batch
        self.cap = cap
        self.n_regions = n_regions
        self.token_budget = token_budget
        self.env_config = env_config
        self.reasoner_seed = reasoner_seed
        self.random_state = random_state

    def _configs(self):
        tc = TrainConfig(lr=self.lr, rl_lr=self.rl_lr, group_size=self.group_size, beta=self.beta,
                         e_warm=self.e_warm, sft_epochs=self.sft_epochs, rl_steps=self.rl_steps,
                         sft_batch=self.sft_batch, rl_batch=self.rl_batch, cap=self.cap)
        pc = PolicyConfig(similarity=self.similarity, temperature=self.temperature,
                          allow_revisit=self.allow_revisit)
        return tc, pc

    def _banks(self, tasks):
        return build_banks(tasks, {"n_regions": self.n_regions, "token_budget": self.token_budget,
                                   "similarity": self.similarity})

    def fit(self, X, y=None):
        tasks = _check_tasks(X)
        if not tasks:
            raise InvalidArgumentError("fit needs at least one task")
        tc, pc = self._configs()
        env = self.env_config or EnvConfig()
        self.reasoner_ = ToyReasoner.from_seed(self.reasoner_seed, env)
        banks = self._banks(tasks)
        rng = RngStream(self.random_state, "experiment")
        params = PolicyParams.initialize(env.d_l, env.d_v, rng.fork("init"))
        self.sft_loss_ = []
        params, _ = train_sft(params, tasks, banks, self.reasoner_, tc, pc, rng, n_regions=self.n_regions,
                              on_epoch=lambda p, step, lam, loss: self.sft_loss_.append(loss))
        self.reference_params_ = params.copy()
        self.rl_kl_ = []
        params = train_rl(params, self.reference_params_, tasks, banks, self.reasoner_, tc, pc, rng.fork("stage2"),
                          curriculum_lambda(tc.sft_epochs, tc.e_warm),
                          on_step=lambda p, step, m: self.rl_kl_.append(m["mean_kl"]))
        self.params_ = params
        self.policy_config_ = pc
        return self

    def rollouts(self, X):
        """Greedy trajectories (with rewards) for each task."""
        check_is_fitted(self, "params_")
        tasks = _check_tasks(X)
        out = []
        for task, bank in zip(tasks, self._banks(tasks)):
            traj = rollout(self.params_, self.reasoner_, task, bank, mode="greedy", cap=self.cap,
                           config=self.policy_config_)
            traj.reward = compute_reward(traj, task)
            out.append(traj)
        return out

    def predict(self, X):
        return np.array([t.predicted_answer for t in self.rollouts(X)], dtype=np.int64)

    def score(self, X, y=None):
        """Greedy accuracy; ``y`` defaults to the tasks' gold answers."""
        tasks = _check_tasks(X)
        y = np.array([t.gold_answer for t in tasks]) if y is None else np.asarray(y)
        if len(y) != len(tasks):
            raise InvalidArgumentError("y must have one label per task")
        return float(np.mean(self.predict(tasks) == y)) if len(tasks) else 0.0

    def evaluate(self, X, fixed_k=None, order="cognition", seed=0):
        check_is_fitted(self, "params_")
        tasks = _check_tasks(X)
        return evaluate(self.params_, self.reasoner_, tasks, self._banks(tasks), self.policy_config_, self.cap,
                        fixed_k=fixed_k, order=order, seed=seed)
