"""From a binary saliency mask to a ranked bank of compressed region tokens.

The bank holds at most ``n_regions - 1`` local regions sorted by mean
normalised saliency, plus one global embedding averaging every patch that no
kept region covers.
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import DegenerateSaliencyError, InvalidArgumentError
from .numerics import RngStream, kmeans
from .saliency import PatchGrid, SaliencyMap, binarize, compute_saliency, otsu_threshold
from .validation import check_in_open_unit, check_positive_int

_NEIGHBOURS_8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def bbox_of(patches):
    rows = [p[0] for p in patches]
    cols = [p[1] for p in patches]
    return (min(rows), min(cols), max(rows), max(cols))


def _order_key(patches):
    r0, c0, _, _ = bbox_of(patches)
    return (r0, c0, patches[0])


@dataclass(frozen=True)
class Region:
    patches: tuple
    score: float
    tokens: np.ndarray
    bbox: tuple

    @property
    def embedding(self):
        return self.tokens.mean(axis=0)

    def to_json(self):
        return {
            "patches": [list(p) for p in self.patches],
            "score": self.score,
            "tokens": self.tokens.tolist(),
            "bbox": list(self.bbox),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            patches=tuple(tuple(int(v) for v in p) for p in obj["patches"]),
            score=float(obj["score"]),
            tokens=np.asarray(obj["tokens"], dtype=np.float64),
            bbox=tuple(int(v) for v in obj["bbox"]),
        )


@dataclass(frozen=True)
class RegionBank:
    """Ordered local regions followed by the global complement slot.

    Action ``k < len(regions)`` selects ``regions[k]``; action
    ``len(regions)`` selects the global embedding.
    """

    regions: tuple
    global_embedding: np.ndarray
    complement: tuple
    grid_shape: tuple
    threshold: float = None
    structure: str = "saliency_regions"
    meta: dict = field(default_factory=dict)

    @property
    def n_slots(self):
        return len(self.regions) + 1

    @property
    def global_index(self):
        return len(self.regions)

    def slot_embeddings(self):
        """``(n_slots, D_v)`` array of per-slot mean embeddings."""
        rows = [r.embedding for r in self.regions] + [self.global_embedding]
        return np.vstack(rows)

    def to_json(self):
        return {
            "structure": self.structure,
            "grid_shape": list(self.grid_shape),
            "threshold": self.threshold,
            "regions": [r.to_json() for r in self.regions],
            "global_embedding": self.global_embedding.tolist(),
            "complement": [list(p) for p in self.complement],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            regions=tuple(Region.from_json(r) for r in obj["regions"]),
            global_embedding=np.asarray(obj["global_embedding"], dtype=np.float64),
            complement=tuple(tuple(int(v) for v in p) for p in obj["complement"]),
            grid_shape=tuple(obj["grid_shape"]),
            threshold=obj["threshold"],
            structure=obj.get("structure", "saliency_regions"),
        )

    def __eq__(self, other):
        if not isinstance(other, RegionBank):
            return NotImplemented
        return self.to_json() == other.to_json()

    __hash__ = None


def connected_components(mask):
    """8-connected components of the true cells, largest first.

    Each component is a row-major sorted tuple of ``(row, col)`` pairs. Equal
    sizes are ordered by their first cell in row-major order.
    """
    bits = mask.bits if hasattr(mask, "bits") else np.asarray(mask, dtype=bool)
    h, w = bits.shape
    seen = np.zeros_like(bits, dtype=bool)
    comps = []
    for i in range(h):
        for j in range(w):
            if not bits[i, j] or seen[i, j]:
                continue
            seen[i, j] = True
            queue = deque([(i, j)])
            cells = []
            while queue:
                r, c = queue.popleft()
                cells.append((r, c))
                for dr, dc in _NEIGHBOURS_8:
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and bits[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        queue.append((rr, cc))
            comps.append(tuple(sorted(cells)))
    comps.sort(key=lambda comp: (-len(comp), comp[0]))
    return comps


def filter_small(components, height, width, alpha=0.01):
    """Drop components whose area is below ``alpha * height * width``."""
    alpha = check_in_open_unit(alpha, "alpha")
    min_area = alpha * height * width
    return [c for c in components if len(c) >= min_area]


def region_score(patches, sal):
    values = sal.normalized if isinstance(sal, SaliencyMap) else np.asarray(sal)
    idx = np.asarray(patches)
    return float(values[idx[:, 0], idx[:, 1]].mean())


def score_and_select(components, sal, n_regions):
    """Keep the ``n_regions - 1`` components with the highest mean saliency.

    The last slot of an ``n_regions`` bank is reserved for the global
    complement. Ties on score fall back to the smaller bbox top-left corner.
    """
    n_regions = check_positive_int(n_regions, "n_regions")
    scored = [(tuple(c), region_score(c, sal)) for c in components]
    scored.sort(key=lambda item: (-item[1], _order_key(item[0])))
    return scored[: n_regions - 1]


def compress_region(patches, grid, sal, token_budget=48, rng=None):
    """Reduce a region's patch embeddings to at most ``token_budget`` tokens.

    Regions within budget pass through unchanged (row-major order). Larger
    regions are clustered into ``token_budget`` k-means centroids over all of
    their patch embeddings, seeded at the ``token_budget`` most salient patches.
    """
    token_budget = check_positive_int(token_budget, "token_budget")
    if len(patches) == 0:
        raise InvalidArgumentError("compress_region needs a non-empty region")
    idx = np.asarray(sorted(patches))
    emb = grid.patch_embeddings[idx[:, 0], idx[:, 1]]
    if len(idx) <= token_budget:
        return emb.copy()
    values = sal.normalized if isinstance(sal, SaliencyMap) else np.asarray(sal)
    sal_vals = values[idx[:, 0], idx[:, 1]]
    top = np.argsort(-sal_vals, kind="stable")[:token_budget]
    return kmeans(emb, token_budget, rng=rng, init=emb[np.sort(top)])


def complement_patches(kept, shape):
    covered = np.zeros(shape, dtype=bool)
    for comp in kept:
        for r, c in comp:
            covered[r, c] = True
    return tuple((int(r), int(c)) for r, c in zip(*np.nonzero(~covered)))


def global_complement(kept, grid):
    """Mean patch embedding over cells outside every kept region.

    Falls back to the mean over the whole grid when nothing is left over.
    """
    rest = complement_patches(kept, grid.shape)
    z = grid.patch_embeddings
    if not rest:
        return z.reshape(-1, z.shape[2]).mean(axis=0)
    idx = np.asarray(rest)
    return z[idx[:, 0], idx[:, 1]].mean(axis=0)


def _assemble(selected, grid, sal, token_budget, rng, threshold, structure):
    regions = []
    for patches, rho in selected:
        tokens = compress_region(patches, grid, sal, token_budget, rng=rng)
        regions.append(Region(patches=tuple(patches), score=rho, tokens=tokens, bbox=bbox_of(patches)))
    kept = [r.patches for r in regions]
    return RegionBank(
        regions=tuple(regions),
        global_embedding=global_complement(kept, grid),
        complement=complement_patches(kept, grid.shape),
        grid_shape=tuple(grid.shape),
        threshold=threshold,
        structure=structure,
    )


def build_region_bank(grid, n_regions=5, token_budget=48, min_area_frac=0.01, bins=256,
                      similarity="cosine", rng=None, saliency=None):
    """saliency -> Otsu -> binarise -> components -> filter -> rank -> compress.

    A constant saliency map yields a bank with only the global slot.
    """
    sal = saliency if saliency is not None else compute_saliency(grid, similarity)
    try:
        tau = otsu_threshold(sal, bins)
    except DegenerateSaliencyError:
        return _assemble([], grid, sal, token_budget, rng, None, "saliency_regions")
    mask = binarize(sal, tau)
    comps = filter_small(connected_components(mask), grid.height, grid.width, min_area_frac)
    selected = score_and_select(comps, sal, n_regions)
    return _assemble(selected, grid, sal, token_budget, rng, tau, "saliency_regions")


def tiling_bank(grid, rng, n_regions=5, tile=4, token_budget=48):
    """Question-independent bank: ``n_regions - 1`` random tiles of a fixed tiling.

    Every tile carries the same (uniform) saliency, so the ranking is purely
    positional and carries no information about the question.
    """
    h, w = grid.shape
    tiles = []
    for r0 in range(0, h, tile):
        for c0 in range(0, w, tile):
            tiles.append(tuple((r, c) for r in range(r0, min(r0 + tile, h)) for c in range(c0, min(c0 + tile, w))))
    k = min(n_regions - 1, len(tiles))
    pick = np.sort(rng.generator.choice(len(tiles), size=k, replace=False)) if k else []
    uniform = np.ones(grid.shape)
    selected = [(tiles[i], 1.0) for i in pick]
    return _assemble(selected, grid, uniform, token_budget, rng, None, "tiling")


def patch_subset_bank(grid, reference, rng, token_budget=48, similarity="cosine", saliency=None):
    """Unstructured baseline matched to ``reference``'s local token budget.

    Draws as many disjoint groups of random patches as ``reference`` has local
    regions, each group of equal size so the total patch count matches, then
    ranks the groups by mean normalised saliency.
    """
    sal = saliency if saliency is not None else compute_saliency(grid, similarity)
    n_groups = len(reference.regions)
    if n_groups == 0:
        return _assemble([], grid, sal, token_budget, rng, None, "patch_subset")
    total = sum(len(r.patches) for r in reference.regions)
    size = max(1, total // n_groups)
    h, w = grid.shape
    order = rng.generator.permutation(h * w)[: size * n_groups]
    groups = []
    for g in range(n_groups):
        cells = order[g * size:(g + 1) * size]
        groups.append(tuple(sorted((int(c // w), int(c % w)) for c in cells)))
    scored = [(grp, region_score(grp, sal)) for grp in groups]
    scored.sort(key=lambda item: (-item[1], _order_key(item[0])))
    return _assemble(scored, grid, sal, token_budget, rng, None, "patch_subset")


class RegionBankBuilder(BaseEstimator, TransformerMixin):
    """Stateless transformer mapping patch grids to region banks.

    ``structure`` chooses between the saliency pipeline and the unstructured
    ``patch_subset`` baseline (which needs the saliency bank as reference).
    """

    def __init__(self, n_regions=5, token_budget=48, min_area_frac=0.01, bins=256,
                 similarity="cosine", structure="saliency_regions", random_state=0):
        self.n_regions = n_regions
        self.token_budget = token_budget
        self.min_area_frac = min_area_frac
        self.bins = bins
        self.similarity = similarity
        self.structure = structure
        self.random_state = random_state

    def _validate_params(self):
        check_positive_int(self.n_regions, "n_regions")
        check_positive_int(self.token_budget, "token_budget")
        check_positive_int(self.bins, "bins", minimum=2)
        check_in_open_unit(self.min_area_frac, "min_area_frac")
        if self.similarity not in ("cosine", "dot"):
            raise InvalidArgumentError(f"unknown similarity {self.similarity!r}")
        if self.structure not in ("saliency_regions", "patch_subset"):
            raise InvalidArgumentError(f"unknown structure {self.structure!r}")

    def fit(self, X=None, y=None):
        self._validate_params()
        self.is_fitted_ = True
        return self

    def transform_one(self, grid, rng):
        grid = getattr(grid, "grid", grid)
        if not isinstance(grid, PatchGrid):
            raise InvalidArgumentError("expected a PatchGrid or an object with a .grid")
        sal = compute_saliency(grid, self.similarity)
        bank = build_region_bank(grid, self.n_regions, self.token_budget, self.min_area_frac,
                                 self.bins, self.similarity, rng=rng.fork("compress"), saliency=sal)
        if self.structure == "patch_subset":
            bank = patch_subset_bank(grid, bank, rng.fork("patch_subset"), self.token_budget,
                                     self.similarity, saliency=sal)
        return bank

    def transform(self, X):
        self._validate_params()
        base = RngStream(self.random_state, "region_bank")
        return [self.transform_one(g, base.fork(i)) for i, g in enumerate(X)]
