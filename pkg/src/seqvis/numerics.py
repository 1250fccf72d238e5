"""Dense numerics: softmax, cosine similarity, k-means, categorical sampling and
reproducible random streams.

Vectors and matrices are plain float64 numpy arrays; the helpers in
:mod:`seqvis.validation` enforce shape and finiteness at the boundaries.
"""

import zlib
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidArgumentError
from .validation import check_points, check_positive_int, check_probabilities, check_vector

_MASK64 = (1 << 64) - 1


def _key(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k) & _MASK64


class RngStream:
    """A named, replayable stream of random draws.

    Two streams built from the same ``(seed, stream_id)`` produce bitwise
    identical sequences. Streams with different ids are statistically
    independent, so parallel workers should each ``fork`` their own stream
    rather than share one instance.
    """

    def __init__(self, seed, stream_id=0, _path=()):
        self.seed = int(seed) & _MASK64
        self.stream_id = _key(stream_id)
        self._path = tuple(_path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,) + self._path)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def fork(self, *keys):
        """Derive an independent child stream. Keys may be ints or strings."""
        return RngStream(self.seed, self.stream_id, self._path + tuple(_key(k) for k in keys))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, path={self._path})"

    # thin conveniences so callers rarely touch the generator directly
    def random(self, size=None):
        return self.generator.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, x):
        return self.generator.permutation(x)


def softmax(scores):
    """Numerically stable softmax. ``-inf`` entries receive probability 0."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise InvalidArgumentError("softmax needs a non-empty 1-D score vector")
    if np.any(np.isnan(s)) or np.any(s == np.inf):
        raise InvalidArgumentError("softmax scores must be finite or -inf")
    top = s.max()
    if top == -np.inf:
        raise InvalidArgumentError("softmax needs at least one finite score")
    e = np.exp(s - top)
    return e / e.sum()


def cosine_sim(a, b):
    """Cosine similarity in [-1, 1]; 0 if either operand has zero norm."""
    a = check_vector(a, "a")
    b = check_vector(b, "b")
    if a.shape != b.shape:
        raise InvalidArgumentError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def dot_sim(a, b):
    """Raw inner product, the alternative similarity."""
    a = check_vector(a, "a")
    b = check_vector(b, "b")
    if a.shape != b.shape:
        raise InvalidArgumentError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(a @ b)


def sample_categorical(probs, rng):
    """Draw an index ``i`` with probability ``probs[i]``."""
    p = check_probabilities(probs)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    # guard the u ~ 1 edge where cumsum falls short by rounding
    idx = min(idx, p.size - 1)
    while p[idx] == 0.0:
        idx -= 1
    return idx


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective_history: list = field(default_factory=list)
    n_iter: int = 0


def _assign(points, centroids):
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1), d2


def _fill_empty(x, labels, centroids, k):
    d2 = ((x - centroids[labels]) ** 2).sum(axis=1)
    counts = np.bincount(labels, minlength=k)
    for c in np.flatnonzero(counts == 0):
        donors = counts[labels] > 1
        cand = np.where(donors, d2, -1.0)
        far = int(cand.argmax())
        counts[labels[far]] -= 1
        labels[far] = c
        counts[c] = 1
        d2[far] = 0.0
    return labels


def kmeans_fit(points, k, rng=None, max_iter=100, init=None):
    """Lloyd's algorithm with reproducible seeding.

    Initial centroids are ``init`` when given, otherwise ``k`` distinct points
    chosen by ``rng``. A cluster that empties out is re-seeded with the point
    farthest from its current centroid. ``objective_history`` records the
    within-cluster sum of squares after every update and never increases.
    """
    x = check_points(points)
    m = x.shape[0]
    k = check_positive_int(k, "k")
    if k > m:
        raise InvalidArgumentError(f"k={k} exceeds the number of points ({m})")
    if init is not None:
        centroids = check_points(init, "init").copy()
        if centroids.shape != (k, x.shape[1]):
            raise InvalidArgumentError(f"init must have shape {(k, x.shape[1])}")
    else:
        if rng is None:
            raise InvalidArgumentError("kmeans needs an rng when no init is given")
        centroids = x[np.sort(rng.generator.choice(m, size=k, replace=False))].copy()

    labels, _ = _assign(x, centroids)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels = _fill_empty(x, labels, centroids, k)
        for c in range(k):
            centroids[c] = x[labels == c].mean(axis=0)
        cur = ((x - centroids[labels]) ** 2).sum(axis=1)
        history.append(float(cur.sum()))
        best, d2 = _assign(x, centroids)
        # keep the current label on exact distance ties so the loop settles
        best = np.where(d2[np.arange(m), best] < cur, best, labels)
        if np.array_equal(best, labels):
            break
        labels = best
    return KMeansResult(centroids=centroids, labels=labels, objective_history=history, n_iter=n_iter)


def kmeans(points, k, rng=None, max_iter=100, init=None):
    """Return the ``k`` centroids found by :func:`kmeans_fit`."""
    return kmeans_fit(points, k, rng=rng, max_iter=max_iter, init=init).centroids
