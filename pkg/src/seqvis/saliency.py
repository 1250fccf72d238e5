"""Question-conditioned saliency: scoring, min-max normalisation and Otsu
binarisation over a patch grid."""

from dataclasses import dataclass

import numpy as np

from . import netpbm
from .exceptions import DegenerateSaliencyError, InvalidArgumentError
from .validation import check_positive_int, check_vector


@dataclass(frozen=True)
class PatchGrid:
    """Patch features for one image on an ``height x width`` grid.

    ``patch_embeddings`` are encoder features (used to build region tokens),
    ``fused_embeddings`` are the question-aware tokens used for saliency, and
    ``query`` is the question representation. Both embedding arrays have
    shape ``(height, width, dim)``.
    """

    patch_embeddings: np.ndarray
    fused_embeddings: np.ndarray
    query: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.patch_embeddings, dtype=np.float64)
        zf = np.asarray(self.fused_embeddings, dtype=np.float64)
        q = check_vector(self.query, "query")
        if z.ndim != 3 or z.shape[0] == 0 or z.shape[1] == 0:
            raise InvalidArgumentError(f"patch_embeddings must be (H, W, D), got {z.shape}")
        if zf.shape[:2] != z.shape[:2]:
            raise InvalidArgumentError("fused_embeddings must cover the same grid as patch_embeddings")
        if zf.shape[2] != q.shape[0]:
            raise InvalidArgumentError("query must share the fused embedding dimension")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(zf))):
            raise InvalidArgumentError("embeddings contain NaN or Inf")
        object.__setattr__(self, "patch_embeddings", z)
        object.__setattr__(self, "fused_embeddings", zf)
        object.__setattr__(self, "query", q)

    @property
    def height(self):
        return self.patch_embeddings.shape[0]

    @property
    def width(self):
        return self.patch_embeddings.shape[1]

    @property
    def shape(self):
        return self.patch_embeddings.shape[:2]

    def to_json(self):
        return {
            "patch_embeddings": self.patch_embeddings.tolist(),
            "fused_embeddings": self.fused_embeddings.tolist(),
            "query": self.query.tolist(),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            np.asarray(obj["patch_embeddings"], dtype=np.float64),
            np.asarray(obj["fused_embeddings"], dtype=np.float64),
            np.asarray(obj["query"], dtype=np.float64),
        )


@dataclass(frozen=True)
class SaliencyMap:
    raw: np.ndarray
    normalized: np.ndarray

    @property
    def shape(self):
        return self.raw.shape

    @property
    def is_constant(self):
        return bool(self.raw.max() <= self.raw.min())

    def to_json(self):
        return {
            "height": int(self.raw.shape[0]),
            "width": int(self.raw.shape[1]),
            "raw": self.raw.tolist(),
            "normalized": self.normalized.tolist(),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(np.asarray(obj["raw"], dtype=np.float64), np.asarray(obj["normalized"], dtype=np.float64))

    def to_pgm(self):
        """8-bit P5 bytes with grey level ``round(255 * normalized)``."""
        return netpbm.encode_pgm(np.rint(255.0 * self.normalized).astype(np.uint8))

    @classmethod
    def from_pgm(cls, data):
        """Rebuild a map from P5 bytes. Only 1/255 resolution survives the trip."""
        pixels = netpbm.decode_pgm(data)
        values = pixels.astype(np.float64) / 255.0
        return cls(values.copy(), values)


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray
    threshold: float

    @property
    def shape(self):
        return self.bits.shape


def normalize(raw):
    """Min-max rescale to [0, 1]. A constant map normalises to all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi <= lo:
        return np.zeros_like(raw)
    out = (raw - lo) / (hi - lo)
    # pin the extremes so min/max are exact despite rounding
    out[raw == lo] = 0.0
    out[raw == hi] = 1.0
    return out


def similarity_map(query, embeddings, similarity="cosine"):
    """Similarity of ``query`` against every row of an ``(..., D)`` array."""
    dots = embeddings @ query
    if similarity == "dot":
        return dots
    if similarity != "cosine":
        raise InvalidArgumentError(f"unknown similarity {similarity!r}")
    norms = np.linalg.norm(embeddings, axis=-1) * np.linalg.norm(query)
    out = np.zeros_like(dots)
    np.divide(dots, norms, out=out, where=norms > 0)
    return np.clip(out, -1.0, 1.0)


def compute_saliency(grid, similarity="cosine"):
    raw = similarity_map(grid.query, grid.fused_embeddings, similarity)
    return SaliencyMap(raw=raw, normalized=normalize(raw))


def _as_values(sal):
    values = sal.normalized if isinstance(sal, SaliencyMap) else np.asarray(sal, dtype=np.float64)
    values = np.ravel(values)
    if values.size == 0:
        raise InvalidArgumentError("otsu_threshold needs at least one value")
    return values


def histogram_bins(values, bins):
    """Bin index of each value in [0, 1]; value 1.0 lands in the top bin."""
    return np.clip(np.floor(values * bins).astype(np.int64), 0, bins - 1)


def otsu_threshold(sal, bins=256):
    """Otsu threshold over a ``bins``-bucket histogram of normalised saliency.

    Candidate thresholds are the bin edges ``k / bins`` for ``k = 1..bins-1``;
    values at or above the edge form the foreground. Returns the edge that
    maximises between-class variance, preferring the smallest on ties.

    Raises DegenerateSaliencyError when every value falls in one bin.
    """
    bins = check_positive_int(bins, "bins", minimum=2)
    values = _as_values(sal)
    if np.any(values < 0) or np.any(values > 1):
        raise InvalidArgumentError("otsu_threshold expects values in [0, 1]")
    hist = np.bincount(histogram_bins(values, bins), minlength=bins).astype(np.float64)
    if np.count_nonzero(hist) < 2:
        raise DegenerateSaliencyError("saliency map is constant; no threshold separates it")

    total = hist.sum()
    levels = np.arange(bins, dtype=np.float64)
    w0 = np.cumsum(hist)[:-1]
    s0 = np.cumsum(hist * levels)[:-1]
    w1 = total - w0
    s1 = (hist * levels).sum() - s0
    valid = (w0 > 0) & (w1 > 0)
    score = np.full(bins - 1, -1.0)
    mu0 = np.divide(s0, w0, out=np.zeros_like(s0), where=valid)
    mu1 = np.divide(s1, w1, out=np.zeros_like(s1), where=valid)
    score[valid] = (w0[valid] / total) * (w1[valid] / total) * (mu1[valid] - mu0[valid]) ** 2
    k = int(np.argmax(score)) + 1
    return k / bins


def binarize(sal, threshold):
    threshold = float(threshold)
    if not np.isfinite(threshold):
        raise InvalidArgumentError("threshold must be finite")
    values = sal.normalized if isinstance(sal, SaliencyMap) else np.asarray(sal, dtype=np.float64)
    return BinaryMask(bits=values >= threshold, threshold=threshold)


def grid_from_intensity(pixels, query, width=None):
    """Patch grid for a greyscale image, one patch per pixel.

    Each intensity ``v`` in [0, 1] is encoded by Gaussian bumps centred on
    ``len(query)`` evenly spaced levels, so a query built the same way from
    a target intensity makes patches of similar brightness salient. Patch and
    fused embeddings coincide.
    """
    q = check_vector(query, "query")
    v = np.asarray(pixels, dtype=np.float64)
    if v.ndim != 2 or v.size == 0:
        raise InvalidArgumentError("pixels must be a non-empty 2-D array")
    if v.max() > 1.0:
        v = v / 255.0
    d = q.shape[0]
    centers = np.linspace(0.0, 1.0, d)
    width = width or (1.0 / max(d - 1, 1))
    emb = np.exp(-0.5 * ((v[:, :, None] - centers[None, None, :]) / width) ** 2)
    return PatchGrid(emb, emb.copy(), q)


def intensity_query(level, dim, width=None):
    """Query vector selecting patches near intensity ``level`` in [0, 1]."""
    centers = np.linspace(0.0, 1.0, dim)
    width = width or (1.0 / max(dim - 1, 1))
    return np.exp(-0.5 * ((level - centers) / width) ** 2)
