"""Static overlays: saliency in the red channel, region outlines in solid
colours, plus a JSON legend mapping rank to colour."""

import numpy as np

from .saliency import SaliencyMap

PALETTE = (
    (0, 255, 0),
    (0, 128, 255),
    (255, 255, 0),
    (255, 0, 255),
    (0, 255, 255),
    (255, 128, 0),
    (128, 0, 255),
    (255, 255, 255),
)


def _values(sal):
    return sal.normalized if isinstance(sal, SaliencyMap) else np.asarray(sal, dtype=np.float64)


def render_overlay(sal, bank, scale=8):
    """Return ``(pixels, legend)``; ``pixels`` is ``(H*scale, W*scale, 3)`` uint8.

    Each patch becomes a ``scale x scale`` block whose red channel is the
    normalised saliency. Region ``k`` (rank ``k + 1``) is outlined with
    ``PALETTE[k]`` along the patch edges that border cells outside it.
    """
    if scale < 3:
        raise ValueError("scale must be at least 3 to leave room for outlines")
    values = _values(sal)
    h, w = values.shape
    img = np.zeros((h * scale, w * scale, 3), dtype=np.uint8)
    red = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    img[:, :, 0] = np.kron(red, np.ones((scale, scale), dtype=np.uint8))
    legend = []
    for k, region in enumerate(bank.regions):
        color = PALETTE[k % len(PALETTE)]
        cells = set(region.patches)
        for r, c in cells:
            y0, x0 = r * scale, c * scale
            if (r - 1, c) not in cells:
                img[y0, x0:x0 + scale] = color
            if (r + 1, c) not in cells:
                img[y0 + scale - 1, x0:x0 + scale] = color
            if (r, c - 1) not in cells:
                img[y0:y0 + scale, x0] = color
            if (r, c + 1) not in cells:
                img[y0:y0 + scale, x0 + scale - 1] = color
        legend.append({"rank": k + 1, "color": list(color), "score": float(region.score),
                       "n_patches": len(region.patches), "bbox": list(region.bbox)})
    return img, {"scale": scale, "grid_shape": [h, w], "threshold": bank.threshold, "regions": legend}
