"""Link capacity, its gradient, and the tangent-plane outer model.

Bandwidth ``w`` is in MHz, power ``p`` in W, noise density in W/MHz, so
capacities come out in Mbps.
"""

from __future__ import annotations

import math

import numpy as np

LOG_BASE = 2.0
_LN_BASE = math.log(LOG_BASE)


def capacity(w, p, q, N0):
    """Shannon capacity ``w * log(1 + p q / (w N0))`` of an FDMA link.

    Defined as 0 at ``w = 0`` (the continuous extension of the perspective).
    Works elementwise on arrays.
    """
    w = np.asarray(w, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(w < 0) or np.any(p < 0):
        raise ValueError("bandwidth and power must be non-negative")
    s = np.asarray(q, dtype=float) / np.asarray(N0, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(w > 0, w * np.log1p(p * s / np.where(w > 0, w, 1.0)) / _LN_BASE, 0.0)
    return float(c) if c.ndim == 0 else c


def capacity_gradient(w, p, q, N0):
    """Partial derivatives ``(dc/dp, dc/dw)`` of :func:`capacity`."""
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0):
        raise ValueError("capacity gradient is singular at zero bandwidth")
    s = np.asarray(q, dtype=float) / np.asarray(N0, dtype=float)
    snr = np.asarray(p, dtype=float) * s / w
    dp = s / (_LN_BASE * (1.0 + snr))
    dw = np.log1p(snr) / _LN_BASE - snr / (_LN_BASE * (1.0 + snr))
    if dp.ndim == 0:
        return float(dp), float(dw)
    return dp, dw


class TangentPlaneModel:
    """Min-of-planes outer model of one link's capacity.

    Each plane is ``x <= gp * p + gw * w + a2``, tangent to the concave
    capacity at its anchor. Capacity is positively homogeneous so ``a2`` is
    zero up to rounding; it is kept so tangency holds exactly.

    At most ``budget`` planes are retained; the plane that was tight least
    recently goes first. ``budget=None`` keeps every plane.
    """

    def __init__(self, q, N0, budget=10):
        self.q = float(q)
        self.N0 = float(N0)
        self.budget = budget
        self.planes = np.zeros((0, 3))
        self.anchors = np.zeros((0, 2))
        self._stamp = np.zeros(0, dtype=int)
        self._clock = 0

    def __len__(self):
        return len(self.planes)

    def copy(self) -> "TangentPlaneModel":
        new = TangentPlaneModel(self.q, self.N0, self.budget)
        new.planes = self.planes.copy()
        new.anchors = self.anchors.copy()
        new._stamp = self._stamp.copy()
        new._clock = self._clock
        return new

    def set_channel(self, q, N0):
        """Swap in new channel constants; existing planes become invalid."""
        self.q = float(q)
        self.N0 = float(N0)
        self.planes = np.zeros((0, 3))
        self.anchors = np.zeros((0, 2))
        self._stamp = np.zeros(0, dtype=int)

    def rescale_noise(self, scale: float):
        """Multiply ``N0`` by ``scale`` keeping every plane valid and tight.

        ``c(w, p)`` under noise ``s N0`` equals ``c(w, p / s)`` under ``N0``,
        so the power slope divides by ``s`` and anchors move to ``s p``.
        """
        if not scale > 0:
            raise ValueError("noise scale must be positive")
        self.N0 *= scale
        self.planes = self.planes.copy()
        self.planes[:, 0] /= scale
        self.anchors = self.anchors.copy()
        self.anchors[:, 0] *= scale

    def value(self, p, w):
        if len(self.planes) == 0:
            return math.inf
        return float(np.min(self.planes[:, 0] * p + self.planes[:, 1] * w + self.planes[:, 2]))

    def plane_at(self, p, w):
        if w <= 0:
            # limit plane through the origin, slope dc/dp as snr -> 0
            return np.array([self.q / (self.N0 * _LN_BASE), 0.0, 0.0])
        gp, gw = capacity_gradient(w, p, self.q, self.N0)
        a2 = capacity(w, p, self.q, self.N0) - gp * p - gw * w
        return np.array([gp, gw, a2])

    def refine(self, p, w) -> "TangentPlaneModel":
        """Add the plane tangent at ``(p, w)``; refining twice is a no-op."""
        p = max(float(p), 0.0)
        w = max(float(w), 0.0)
        self._clock += 1
        plane = self.plane_at(p, w)
        if len(self.planes):
            vals = self.planes[:, 0] * p + self.planes[:, 1] * w + self.planes[:, 2]
            tight = vals <= vals.min() + 1e-12 * max(1.0, abs(vals.min()))
            self._stamp[tight] = self._clock
            scale = np.maximum(np.abs(self.planes), np.abs(plane)) + 1e-300
            same = np.all(np.abs(self.planes - plane) <= 1e-10 * scale + 1e-15, axis=1)
            if np.any(same):
                self._stamp[same] = self._clock
                return self
        self.planes = np.vstack([self.planes, plane])
        self.anchors = np.vstack([self.anchors, [p, w]])
        self._stamp = np.append(self._stamp, self._clock)
        if self.budget is not None and len(self.planes) > self.budget:
            drop = int(np.argmin(self._stamp[:-1]))
            keep = np.arange(len(self.planes)) != drop
            self.planes = self.planes[keep]
            self.anchors = self.anchors[keep]
            self._stamp = self._stamp[keep]
        return self

    def reset(self):
        self.planes = np.zeros((0, 3))
        self.anchors = np.zeros((0, 2))
        self._stamp = np.zeros(0, dtype=int)
