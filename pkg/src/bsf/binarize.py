"""Sign binarization, the straight-through gradient gate, and shadow-weight clipping.

These three small functions are shared by every other module: filters and
activations are binarized with `binarize`, gradients flow back through the
binarization via `ste_gate`, and the real-valued shadow weights kept by the
optimizer are confined to the gate's active region with `clip_shadow`.
"""

from __future__ import annotations

import numpy as np


def binarize(t: np.ndarray) -> np.ndarray:
    """Elementwise sign with the convention b(0) = +1.

    Returns an array of the same shape with values in {-1.0, +1.0}. Floating
    inputs keep their dtype; everything else is promoted to float64.
    """
    t = np.asarray(t)
    if not np.all(np.isfinite(t)):
        raise ValueError("binarize: input contains non-finite values")
    dtype = t.dtype if np.issubdtype(t.dtype, np.floating) else np.float64
    return np.where(t >= 0, 1.0, -1.0).astype(dtype)


def ste_gate(upstream: np.ndarray, pre: np.ndarray) -> np.ndarray:
    """Pass `upstream` through where |pre| <= 1, zero elsewhere (boundary included)."""
    upstream = np.asarray(upstream)
    pre = np.asarray(pre)
    if upstream.shape != pre.shape:
        raise ValueError(
            f"ste_gate: shape mismatch {upstream.shape} vs {pre.shape}"
        )
    return np.where(np.abs(pre) <= 1.0, upstream, np.zeros_like(upstream))


def clip_shadow(w: np.ndarray) -> np.ndarray:
    """Clamp shadow weights to [-1, 1]."""
    return np.clip(np.asarray(w), -1.0, 1.0)
