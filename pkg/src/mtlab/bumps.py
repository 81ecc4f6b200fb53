"""Smooth compactly supported profiles used for partitions of unity and tube bumps."""
from __future__ import annotations

import numpy as np


def bump(s):
    """Standard bump ``exp(-1/(1-s^2))`` on ``|s| < 1``, zero elsewhere.

    ``s`` may be an array of radii (non-negative) or signed coordinates.
    """
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


def _edge(t):
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smoothstep(t):
    """C-infinity step: 0 for ``t <= 0``, 1 for ``t >= 1``."""
    t = np.asarray(t, dtype=float)
    a = _edge(t)
    b = _edge(1.0 - t)
    return a / (a + b)


def plateau(r, inner, outer):
    """Equal to 1 for ``r <= inner``, 0 for ``r >= outer``, smooth in between."""
    if outer <= inner:
        raise ValueError("outer must exceed inner")
    r = np.asarray(r, dtype=float)
    return 1.0 - smoothstep((r - inner) / (outer - inner))
