"""Sequential visual-access policy.

At each step the reasoning state ``h`` is projected by ``w_sig``, every bank
slot's mean token by ``w_vis``, and each slot (plus a learnable STOP vector)
is scored by similarity to the projected state. A softmax over those scores
gives the action distribution. Gradients are derived by hand; see
:func:`backprop_scores`.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import CheckpointVersionError, InvalidArgumentError, MaskedActionError
from .numerics import sample_categorical, softmax
from .validation import check_matrix, check_vector

STOP = -1


@dataclass(frozen=True)
class Action:
    """``index >= 0`` selects that bank slot; ``index == STOP`` stops."""

    index: int

    @classmethod
    def stop(cls):
        return cls(STOP)

    @classmethod
    def select(cls, k):
        if k < 0:
            raise InvalidArgumentError("region index must be nonnegative")
        return cls(int(k))

    @property
    def is_stop(self):
        return self.index == STOP

    def position(self, n_slots):
        """Column of this action in a distribution over ``n_slots`` + STOP."""
        if self.is_stop:
            return n_slots
        if self.index >= n_slots:
            raise InvalidArgumentError(f"region {self.index} outside a bank of {n_slots} slots")
        return self.index

    @classmethod
    def from_position(cls, pos, n_slots):
        return cls.stop() if pos == n_slots else cls.select(pos)

    def __repr__(self):
        return "Action(STOP)" if self.is_stop else f"Action({self.index})"


@dataclass(frozen=True)
class ReasoningState:
    h: np.ndarray
    t: int = 1
    visited: frozenset = frozenset()

    def advance(self, h, k):
        return ReasoningState(h=h, t=self.t + 1, visited=self.visited | {k})


@dataclass
class PolicyConfig:
    similarity: str = "cosine"
    temperature: float = 1.0
    allow_revisit: bool = False
    theta: float = None


@dataclass
class PolicyParams:
    w_sig: np.ndarray
    w_vis: np.ndarray
    stop: np.ndarray

    NAMES = ("w_sig", "w_vis", "stop")

    def __post_init__(self):
        self.w_sig = check_matrix(self.w_sig, "w_sig")
        d_l = self.w_sig.shape[0]
        if self.w_sig.shape != (d_l, d_l):
            raise InvalidArgumentError("w_sig must be square")
        self.w_vis = check_matrix(self.w_vis, "w_vis")
        if self.w_vis.shape[0] != d_l:
            raise InvalidArgumentError("w_vis must map into the language dimension")
        self.stop = check_vector(self.stop, "stop", dim=d_l)

    @property
    def d_l(self):
        return self.w_sig.shape[0]

    @property
    def d_v(self):
        return self.w_vis.shape[1]

    @classmethod
    def initialize(cls, d_l, d_v, rng):
        return cls(
            w_sig=rng.normal(0.0, 1.0 / np.sqrt(d_l), (d_l, d_l)),
            w_vis=rng.normal(0.0, 1.0 / np.sqrt(d_v), (d_l, d_v)),
            stop=rng.normal(0.0, 1.0 / np.sqrt(d_l), d_l),
        )

    @classmethod
    def unchecked(cls, w_sig, w_vis, stop):
        """Build without validation, for internally computed gradients."""
        obj = object.__new__(cls)
        obj.w_sig, obj.w_vis, obj.stop = w_sig, w_vis, stop
        return obj

    @classmethod
    def zeros(cls, d_l, d_v):
        return cls(np.zeros((d_l, d_l)), np.zeros((d_l, d_v)), np.zeros(d_l))

    def arrays(self):
        return [self.w_sig, self.w_vis, self.stop]

    def copy(self):
        return PolicyParams(self.w_sig.copy(), self.w_vis.copy(), self.stop.copy())

    def scaled_add(self, other, alpha):
        """Return ``self + alpha * other``."""
        return PolicyParams.unchecked(self.w_sig + alpha * other.w_sig,
                                      self.w_vis + alpha * other.w_vis,
                                      self.stop + alpha * other.stop)

    def iadd(self, other, alpha=1.0):
        self.w_sig += alpha * other.w_sig
        self.w_vis += alpha * other.w_vis
        self.stop += alpha * other.stop
        return self

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def norm(self):
        return float(np.linalg.norm(self.flat()))


@dataclass
class ActionDistribution:
    """Scores and probabilities over ``n_slots`` bank slots followed by STOP.

    Masked actions carry score ``-inf`` and probability 0.
    """

    scores: np.ndarray
    probs: np.ndarray
    n_slots: int
    cache: dict = field(default=None, repr=False)

    @property
    def mask(self):
        return np.isfinite(self.scores)


def _similarities(query, keys, similarity):
    """Similarity of one query against each row of ``keys`` plus the pieces
    backprop needs."""
    dots = keys @ query
    if similarity == "dot":
        return dots, None
    qn = np.linalg.norm(query)
    kn = np.linalg.norm(keys, axis=1)
    denom = qn * kn
    sims = np.zeros_like(dots)
    np.divide(dots, denom, out=sims, where=denom > 0)
    return sims, (qn, kn)


def score_actions(params, state, bank, config=None, mask_stop=False):
    config = config or PolicyConfig()
    h = check_vector(state.h, "state.h", dim=params.d_l)
    slot_means = bank.slot_embeddings()
    if slot_means.shape[1] != params.d_v:
        raise InvalidArgumentError(
            f"bank embeddings have dimension {slot_means.shape[1]}, policy expects {params.d_v}")
    h_proj = params.w_sig @ h
    keys = np.vstack([slot_means @ params.w_vis.T, params.stop[None, :]])
    sims, norms = _similarities(h_proj, keys, config.similarity)

    scores = sims.copy()
    n = bank.n_slots
    if not config.allow_revisit:
        for k in state.visited:
            scores[k] = -np.inf
    if config.theta is not None:
        low = np.flatnonzero(sims[:n] < config.theta)
        scores[low] = -np.inf
    if mask_stop:
        scores[n] = -np.inf
    if not np.isfinite(scores).any():
        scores[n] = sims[n]
    probs = softmax(scores / config.temperature)
    cache = {"h": h, "h_proj": h_proj, "keys": keys, "slot_means": slot_means,
             "sims": sims, "norms": norms, "similarity": config.similarity,
             "temperature": config.temperature}
    return ActionDistribution(scores=scores, probs=probs, n_slots=n, cache=cache)


def log_prob(dist, action):
    p = dist.probs[action.position(dist.n_slots)]
    if p == 0.0:
        raise MaskedActionError(f"{action!r} is masked in this state")
    return float(np.log(p))


def backprop_scores(params, dist, g_logits):
    """Map a gradient w.r.t. the softmax inputs back onto the parameters.

    ``g_logits`` is the gradient of some loss w.r.t. ``scores / temperature``
    (masked entries must be zero).
    """
    c = dist.cache
    g = np.where(dist.mask, g_logits, 0.0) / c["temperature"]
    h, q, keys, sims = c["h"], c["h_proj"], c["keys"], c["sims"]
    if c["similarity"] == "dot":
        d_q = keys.T @ g
        d_keys = g[:, None] * q[None, :]
    else:
        qn, kn = c["norms"]
        ok = (kn > 0) & (qn > 0)
        gk = np.where(ok, g, 0.0)
        inv = np.zeros_like(kn)
        np.divide(1.0, qn * kn, out=inv, where=ok)
        # d cos / d q = k / (|q||k|) - cos * q / |q|^2
        d_q = keys.T @ (gk * inv)
        if qn > 0:
            d_q -= (gk @ sims) * q / qn**2
        # d cos / d k = q / (|q||k|) - cos * k / |k|^2
        kk = np.zeros_like(kn)
        np.divide(1.0, kn**2, out=kk, where=kn > 0)
        d_keys = (gk * inv)[:, None] * q[None, :] - (gk * sims * kk)[:, None] * keys
    return PolicyParams.unchecked(np.outer(d_q, h), d_keys[:-1].T @ c["slot_means"], d_keys[-1].copy())


def grad_log_prob(params, state, bank, action, config=None, dist=None):
    """Exact gradient of ``log pi(action | state)`` w.r.t. every parameter."""
    dist = dist if dist is not None else score_actions(params, state, bank, config)
    pos = action.position(dist.n_slots)
    if dist.probs[pos] == 0.0:
        raise MaskedActionError(f"{action!r} is masked in this state")
    g = -dist.probs.copy()
    g[pos] += 1.0
    return backprop_scores(params, dist, g)


def sample_action(dist, rng):
    pos = sample_categorical(dist.probs, rng)
    return Action.from_position(pos, dist.n_slots)


def greedy_action(dist):
    """Most probable action; ties prefer STOP, then the lowest slot index."""
    best = dist.probs.max()
    if dist.probs[dist.n_slots] == best:
        return Action.stop()
    return Action.select(int(np.flatnonzero(dist.probs == best)[0]))


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_FORMAT = "seqvis-policy"
CHECKPOINT_VERSION = 1


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, params, config=None, step=0, policy_config=None):
    """Write ``<path>`` (JSON header) and ``<path>.bin`` (little-endian float64)."""
    path = os.fspath(path)
    bin_path = path + ".bin"
    arrays = []
    offset = 0
    for name, arr in zip(PolicyParams.NAMES, params.arrays()):
        arrays.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "d_l": params.d_l,
        "d_v": params.d_v,
        "config_hash": config_hash(config or {}),
        "step": int(step),
        "policy_config": vars(policy_config) if policy_config is not None else vars(PolicyConfig()),
        "binary": os.path.basename(bin_path),
        "arrays": arrays,
    }
    try:
        with open(bin_path, "wb") as fh:
            fh.write(params.flat().astype("<f8").tobytes())
        with open(path, "w") as fh:
            json.dump(header, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"could not write checkpoint {path}: {exc}") from exc
    return header


def load_checkpoint(path, d_l=None, d_v=None):
    """Return ``(params, header)``; raises CheckpointVersionError on mismatch."""
    path = os.fspath(path)
    try:
        with open(path) as fh:
            header = json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint {path} does not exist") from None
    except OSError as exc:
        raise OSError(f"could not read checkpoint {path}: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint format/version")
    if (d_l is not None and header["d_l"] != d_l) or (d_v is not None and header["d_v"] != d_v):
        raise CheckpointVersionError(
            f"{path}: checkpoint dims (d_l={header['d_l']}, d_v={header['d_v']}) "
            f"do not match expected (d_l={d_l}, d_v={d_v})")
    bin_path = os.path.join(os.path.dirname(path), header["binary"])
    with open(bin_path, "rb") as fh:
        flat = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    parts = {}
    for spec in header["arrays"]:
        chunk = flat[spec["offset"]:spec["offset"] + spec["count"]]
        if chunk.size != spec["count"]:
            raise CheckpointVersionError(f"{bin_path}: truncated parameter file")
        parts[spec["name"]] = chunk.reshape(spec["shape"])
    params = PolicyParams(parts["w_sig"], parts["w_vis"], parts["stop"])
    return params, header


def policy_config_from_header(header):
    return replace(PolicyConfig(), **header.get("policy_config", {}))
