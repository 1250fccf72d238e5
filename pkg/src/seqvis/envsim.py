"""Synthetic visual-reasoning environment.

A frozen recurrent "reasoner" stands in for the language model: region
embeddings are injected one at a time into a contractive ``tanh`` recurrence
and the answer is read out linearly from the final state. Tasks plant
rectangular blocks whose question relevance decreases with rank; the gold
answer is whatever the reasoner outputs after reading the ``difficulty`` most
relevant blocks in rank order, so both *which* blocks and *in what order*
they are read matter.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import GenerationError, InvalidArgumentError, ParseError
from .numerics import RngStream
from .parallel import parallel_map
from .policy import (
    Action,
    PolicyConfig,
    ReasoningState,
    greedy_action,
    log_prob,
    sample_action,
    score_actions,
)
from .regions import build_region_bank
from .saliency import PatchGrid, compute_saliency


@dataclass
class EnvConfig:
    grid_h: int = 16
    grid_w: int = 16
    d_v: int = 32
    d_l: int = 64
    n_classes: int = 4
    difficulties: tuple = (1, 2, 3)
    max_distractors: int = 1
    block_min: int = 2
    block_max: int = 5
    relevance_top: float = 0.7
    relevance_step: float = 0.12
    distractor_relevance: float = 0.3
    relevance_jitter: float = 0.03
    patch_noise: float = 0.04
    fused_noise: float = 0.04
    max_retries: int = 200
    # reasoner shape
    query_gain: float = 1.5
    inject_gain: float = 3.0
    stop_bias: float = 0.8
    decay: float = 0.9

    @property
    def max_blocks(self):
        return max(self.difficulties) + self.max_distractors


def _orthonormal(rng, n):
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def _unit_orthogonal_to(rng, d, basis):
    v = rng.normal(size=d)
    for b in basis:
        v -= (v @ b) * b
    return v / np.linalg.norm(v)


@dataclass
class ToyReasoner:
    """Frozen recurrence ``h' = tanh(A h + B W_in x)`` with linear readout.

    The state splits into a question-memory half (written once from the
    query, then decaying) and a content half that accumulates injected
    evidence through a rotation, which is what makes the readout depend on
    injection order.
    """

    A: np.ndarray
    B: np.ndarray
    w_in: np.ndarray
    u_query: np.ndarray
    readout: np.ndarray
    h0: np.ndarray

    @classmethod
    def from_seed(cls, seed, config=None):
        cfg = config or EnvConfig()
        rng = RngStream(seed, "reasoner").generator
        d_l, d_v = cfg.d_l, cfg.d_v
        mem = d_l // 2
        con = d_l - mem
        A = np.zeros((d_l, d_l))
        A[:mem, :mem] = cfg.decay * np.eye(mem)
        A[mem:, mem:] = cfg.decay * _orthonormal(rng, con)
        B = np.zeros((d_l, d_l))
        B[mem:, mem:] = _orthonormal(rng, con)
        w_in = np.zeros((d_l, d_v))
        w_in[mem:, :] = cfg.inject_gain * _orthonormal(rng, max(con, d_v))[:con, :d_v]
        u_query = np.zeros((d_l, d_v))
        u_query[:mem, :] = cfg.query_gain * _orthonormal(rng, max(mem, d_v))[:mem, :d_v]
        h0 = np.zeros(d_l)
        bias = rng.normal(size=mem)
        h0[:mem] = cfg.stop_bias * bias / np.linalg.norm(bias)
        readout = np.zeros((cfg.n_classes, d_l))
        readout[:, mem:] = rng.normal(size=(cfg.n_classes, con)) / np.sqrt(con)
        return cls(A=A, B=B, w_in=w_in, u_query=u_query, readout=readout, h0=h0)

    @property
    def d_l(self):
        return self.A.shape[0]

    @property
    def spectral_norm(self):
        return float(np.linalg.norm(self.A, 2))

    def initial_state(self, query):
        return ReasoningState(h=np.tanh(self.h0 + self.u_query @ query), t=1)

    def answer(self, h):
        return int(np.argmax(self.readout @ h))

    def run(self, query, injections):
        state = self.initial_state(query)
        for k, x in enumerate(injections):
            state = step_reasoner(self, state, x, k)
        return state


def step_reasoner(reasoner, state, injected, region=None):
    h = np.tanh(reasoner.A @ state.h + reasoner.B @ (reasoner.w_in @ injected))
    if region is None:
        return ReasoningState(h=h, t=state.t + 1, visited=state.visited)
    return state.advance(h, region)


@dataclass
class PlantedBlock:
    footprint: tuple  # (r0, c0, r1, c1) inclusive
    feature: np.ndarray
    rank: int
    relevance: float
    relevant: bool

    def cells(self):
        r0, c0, r1, c1 = self.footprint
        return tuple((r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1))

    def to_json(self):
        return {"footprint": list(self.footprint), "feature": self.feature.tolist(), "rank": self.rank,
                "relevance": self.relevance, "relevant": self.relevant}

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(obj["footprint"]), np.asarray(obj["feature"], dtype=np.float64), int(obj["rank"]),
                   float(obj["relevance"]), bool(obj["relevant"]))


@dataclass
class TaskInstance:
    task_id: int
    grid: PatchGrid
    gold_answer: int
    planted: list
    difficulty: int

    @property
    def query(self):
        return self.grid.query

    def oracle_features(self):
        blocks = sorted(self.planted, key=lambda b: b.rank)
        return [b.feature for b in blocks[: self.difficulty]]

    def to_json(self):
        return {
            "task_id": self.task_id,
            "difficulty": self.difficulty,
            "gold_answer": self.gold_answer,
            "planted": [b.to_json() for b in self.planted],
            "grid": self.grid.to_json(),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            task_id=int(obj["task_id"]),
            grid=PatchGrid.from_json(obj["grid"]),
            gold_answer=int(obj["gold_answer"]),
            planted=[PlantedBlock.from_json(b) for b in obj["planted"]],
            difficulty=int(obj["difficulty"]),
        )


def _place_blocks(rng, cfg, n_blocks):
    h, w = cfg.grid_h, cfg.grid_w
    taken = np.zeros((h + 2, w + 2), dtype=bool)  # padded so margins are easy
    out = []
    for _ in range(n_blocks):
        for _attempt in range(cfg.max_retries):
            bh = int(rng.integers(cfg.block_min, cfg.block_max + 1))
            bw = int(rng.integers(cfg.block_min, cfg.block_max + 1))
            r0 = int(rng.integers(0, h - bh + 1))
            c0 = int(rng.integers(0, w - bw + 1))
            # one-cell margin keeps blocks apart under 8-connectivity
            if taken[r0:r0 + bh + 2, c0:c0 + bw + 2].any():
                continue
            taken[r0 + 1:r0 + bh + 1, c0 + 1:c0 + bw + 1] = True
            out.append((r0, c0, r0 + bh - 1, c0 + bw - 1))
            break
        else:
            raise GenerationError(f"could not place {n_blocks} blocks on a {h}x{w} grid")
    return out


def _relevances(rng, cfg, difficulty, n_distractors):
    rel = [cfg.relevance_top - cfg.relevance_step * r for r in range(difficulty)]
    rel += [cfg.distractor_relevance - 0.5 * cfg.relevance_step * j for j in range(n_distractors)]
    jitter = rng.uniform(-cfg.relevance_jitter, cfg.relevance_jitter, size=len(rel))
    return [float(np.clip(a + e, 0.0, 0.99)) for a, e in zip(rel, jitter)]


def _draw_instance(rng, cfg, reasoner, difficulty, n_distractors, task_id):
    d = cfg.d_v
    query = rng.normal(size=d)
    query /= np.linalg.norm(query)
    background = _unit_orthogonal_to(rng, d, [query])
    feats = np.repeat(background[None, :], cfg.grid_h * cfg.grid_w, axis=0).reshape(cfg.grid_h, cfg.grid_w, d)

    footprints = _place_blocks(rng, cfg, difficulty + n_distractors)
    relevances = _relevances(rng, cfg, difficulty, n_distractors)
    planted = []
    for rank, (fp, a) in enumerate(zip(footprints, relevances)):
        g = _unit_orthogonal_to(rng, d, [query])
        f = a * query + np.sqrt(1.0 - a * a) * g
        r0, c0, r1, c1 = fp
        feats[r0:r1 + 1, c0:c1 + 1] = f
        planted.append(PlantedBlock(fp, f, rank, a, rank < difficulty))

    z = feats + cfg.patch_noise * rng.normal(size=feats.shape)
    z_fused = z + cfg.fused_noise * rng.normal(size=feats.shape)
    grid = PatchGrid(z, z_fused, query)
    gold = reasoner.answer(reasoner.run(query, [b.feature for b in planted[:difficulty]]).h)
    return TaskInstance(task_id=task_id, grid=grid, gold_answer=gold, planted=planted, difficulty=difficulty)


def oracle_actions(task, bank):
    """Bank slots matching the relevant planted blocks, in rank order.

    Returns None when the segmentation did not recover them exactly.
    """
    by_cells = {frozenset(r.patches): k for k, r in enumerate(bank.regions)}
    out = []
    for block in sorted(task.planted, key=lambda b: b.rank)[: task.difficulty]:
        k = by_cells.get(frozenset(block.cells()))
        if k is None:
            return None
        out.append(k)
    return out


def generate_task(rng, config=None, reasoner=None, task_id=0, difficulty=None, region_kwargs=None):
    """Draw one solvable task.

    Instances are rejected (and redrawn) when the saliency pipeline fails to
    recover the relevant blocks or the oracle rollout over the built bank does
    not reproduce the gold answer.
    """
    cfg = config or EnvConfig()
    reasoner = reasoner or ToyReasoner.from_seed(0, cfg)
    region_kwargs = region_kwargs or {}
    gen = rng.generator if isinstance(rng, RngStream) else rng
    if difficulty is None:
        difficulty = int(cfg.difficulties[int(gen.integers(0, len(cfg.difficulties)))])
    if difficulty < 1:
        raise InvalidArgumentError("difficulty must be >= 1")
    n_regions = region_kwargs.get("n_regions", 5)
    if difficulty > n_regions - 1:
        raise InvalidArgumentError(f"difficulty {difficulty} exceeds the {n_regions - 1} local bank slots")
    if (difficulty + cfg.max_distractors) * (cfg.block_max + 1) ** 2 > cfg.grid_h * cfg.grid_w:
        raise InvalidArgumentError("grid too small for the requested blocks")
    for _ in range(cfg.max_retries):
        n_distractors = int(gen.integers(0, cfg.max_distractors + 1))
        task = _draw_instance(gen, cfg, reasoner, difficulty, n_distractors, task_id)
        bank = build_region_bank(task.grid, **region_kwargs)
        order = oracle_actions(task, bank)
        if order is None or order != list(range(difficulty)):
            continue
        traj = scripted_rollout(reasoner, task, bank, order)
        if traj.predicted_answer == task.gold_answer:
            return task
    raise GenerationError(f"no solvable task after {cfg.max_retries} draws")


def generate_tasks(seed, n_tasks, config=None, reasoner=None, region_kwargs=None, difficulty=None,
                   stream="tasks"):
    """``n_tasks`` tasks whose draws depend only on ``(seed, stream, index)``."""
    if n_tasks < 0:
        raise InvalidArgumentError("n_tasks must be nonnegative")
    cfg = config or EnvConfig()
    reasoner = reasoner or ToyReasoner.from_seed(0, cfg)
    base = RngStream(seed, stream)
    return parallel_map(lambda i: generate_task(base.fork(i), cfg, reasoner, task_id=i, difficulty=difficulty,
                                                region_kwargs=region_kwargs), range(n_tasks))


# -- rollouts ------------------------------------------------------------------

@dataclass
class Step:
    state: ReasoningState
    action: Action
    log_prob: float
    mask_stop: bool = False


@dataclass
class RewardBreakdown:
    r_task: int
    r_format: int
    length_tokens: int
    vision_steps: int
    total: float

    def to_json(self):
        return asdict(self)


@dataclass
class Trajectory:
    steps: list
    predicted_answer: int
    final_state: ReasoningState
    stopped: bool
    behaviour: str = "policy"
    reward: RewardBreakdown = None

    @property
    def actions(self):
        return [s.action for s in self.steps]

    @property
    def vision_steps(self):
        return sum(1 for s in self.steps if not s.action.is_stop)

    def to_json(self):
        return {
            "actions": [None if s.action.is_stop else s.action.index for s in self.steps],
            "log_probs": [s.log_prob for s in self.steps],
            "predicted_answer": self.predicted_answer,
            "stopped": self.stopped,
            "behaviour": self.behaviour,
            "reward": self.reward.to_json() if self.reward else None,
        }


def compute_reward(traj, task, lambda_format=0.2, lambda_length=0.01, lambda_vision=0.05):
    r_task = int(traj.predicted_answer == task.gold_answer)
    r_format = int(traj.stopped)
    length = len(traj.steps)
    vision = traj.vision_steps
    total = r_task + lambda_format * r_format - lambda_length * length - lambda_vision * vision
    return RewardBreakdown(r_task, r_format, length, vision, total)


def _slot_vector(bank, k):
    return bank.slot_embeddings()[k]


def scripted_rollout(reasoner, task, bank, slots, stop=True):
    """Replay a fixed slot sequence (optionally ending in STOP)."""
    state = reasoner.initial_state(task.query)
    steps = []
    emb = bank.slot_embeddings()
    for k in slots:
        steps.append(Step(state, Action.select(k), 0.0))
        state = step_reasoner(reasoner, state, emb[k], k)
    if stop:
        steps.append(Step(state, Action.stop(), 0.0))
    return Trajectory(steps, reasoner.answer(state.h), state, stopped=stop, behaviour="scripted")


def rollout(params, reasoner, task, bank, rng=None, mode="greedy", cap=8, config=None,
            order="cognition", fixed_k=None, behaviour="policy"):
    """Run the interleaved select/inject loop until STOP or ``cap`` actions.

    ``behaviour="random"`` draws uniformly among the currently allowed
    actions instead of following the policy. ``order="random"`` keeps the
    policy's decision of *whether* to stop but replaces *which* region it
    reads with a uniform draw over unvisited slots. ``fixed_k`` hides STOP
    until exactly ``fixed_k`` regions have been read, then ends the episode.
    Stored log-probabilities are always those of the learned policy.
    """
    config = config or PolicyConfig()
    if cap < 1:
        raise InvalidArgumentError("cap must be >= 1")
    state = reasoner.initial_state(task.query)
    emb = bank.slot_embeddings()
    steps = []
    stopped = False
    while len(steps) < cap:
        n_read = len(steps)
        if fixed_k is not None and n_read >= fixed_k:
            break
        mask_stop = fixed_k is not None
        dist = score_actions(params, state, bank, config, mask_stop=mask_stop)
        allowed = np.flatnonzero(dist.probs > 0)
        if mask_stop and allowed.size == 0:
            break
        if behaviour == "random":
            pos = int(allowed[rng.integers(0, allowed.size)])
            action = Action.from_position(pos, dist.n_slots)
        elif mode == "sample":
            action = sample_action(dist, rng)
        else:
            action = greedy_action(dist)
        if order == "random" and not action.is_stop:
            free = [k for k in range(bank.n_slots) if k not in state.visited or config.allow_revisit]
            action = Action.select(free[int(rng.integers(0, len(free)))])
        steps.append(Step(state, action, log_prob(dist, action), mask_stop))
        if action.is_stop:
            stopped = True
            break
        state = step_reasoner(reasoner, state, emb[action.index], action.index)
        if mask_stop and not config.allow_revisit and len(state.visited) >= bank.n_slots:
            break
    return Trajectory(steps, reasoner.answer(state.h), state, stopped=stopped, behaviour=behaviour)


# -- dataset IO ----------------------------------------------------------------

def env_config_to_json(cfg):
    d = asdict(cfg)
    d["difficulties"] = list(cfg.difficulties)
    return d


def env_config_from_json(obj):
    obj = dict(obj)
    if "difficulties" in obj:
        obj["difficulties"] = tuple(obj["difficulties"])
    return EnvConfig(**obj)


def write_tasks(path, tasks):
    with open(path, "w") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_json(), separators=(",", ":")))
            fh.write("\n")


def read_tasks(path):
    """Parse a JSON-lines task file; malformed lines raise ParseError."""
    out = []
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, 1):
            if raw.strip():
                try:
                    out.append(TaskInstance.from_json(json.loads(raw)))
                except (ValueError, KeyError, TypeError) as exc:
                    raise ParseError(f"{path}: bad task on line {lineno}: {exc}", offset) from exc
            offset += len(raw)
    return out


def ground_truth_saliency(task):
    return compute_saliency(task.grid)
