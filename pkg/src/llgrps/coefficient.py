"""Rough exchange coefficient fields.

The oscillatory trigonometric benchmark coefficient mixes six length
scales with no periodicity alignment; evaluation is pointwise and fully
deterministic.  A constant field is provided as a control.
"""

import numpy as np

__all__ = ["CoefficientField", "ms_trig", "mstrig_field", "constant", "parse_coefficient"]

_EPSILONS = (1.0 / 5.0, 1.0 / 13.0, 1.0 / 17.0, 1.0 / 31.0, 1.0 / 65.0)

TWO_PI = 2.0 * np.pi


def ms_trig(x, y):
    """Multiscale trigonometric coefficient at (x, y); vectorized.

    Average of five ratio-of-trig terms on scales 1/5 .. 1/65 plus a
    smooth sin(4 x^2 y^2) carrier; denominators 1.1 +/- trig stay positive.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    e1, e2, e3, e4, e5 = _EPSILONS
    f1 = (1.1 + np.sin(TWO_PI * x / e1)) / (1.1 + np.sin(TWO_PI * y / e1))
    f2 = (1.1 + np.sin(TWO_PI * y / e2)) / (1.1 + np.cos(TWO_PI * x / e2))
    f3 = (1.1 + np.cos(TWO_PI * x / e3)) / (1.1 + np.sin(TWO_PI * y / e3))
    f4 = (1.1 + np.sin(TWO_PI * y / e4)) / (1.1 + np.cos(TWO_PI * x / e4))
    f5 = (1.1 + np.cos(TWO_PI * x / e5)) / (1.1 + np.sin(TWO_PI * y / e5))
    return (f1 + f2 + f3 + f4 + f5 + np.sin(4.0 * x**2 * y**2) + 1.0) / 6.0


class CoefficientField:
    """Positive scalar coefficient with declared uniform bounds."""

    def __init__(self, name, func, kappa_min, kappa_max):
        if not (0.0 < kappa_min <= kappa_max):
            raise ValueError("bounds must satisfy 0 < kappa_min <= kappa_max")
        self.name = name
        self._func = func
        self.kappa_min = float(kappa_min)
        self.kappa_max = float(kappa_max)

    def __call__(self, points):
        """Evaluate at an (n, 2) array of points."""
        points = np.asarray(points, dtype=np.float64)
        return self._func(points[..., 0], points[..., 1])

    def __repr__(self):
        return f"CoefficientField({self.name!r}, [{self.kappa_min:.4g}, {self.kappa_max:.4g}])"


_MSTRIG_BOUNDS = None


def _scan_mstrig_bounds(n=1024):
    # dense grid scan; bounds are diagnostics, padded by a small margin
    side = np.linspace(0.0, 1.0, n)
    xx, yy = np.meshgrid(side, side)
    vals = ms_trig(xx, yy)
    return float(vals.min()), float(vals.max())


def mstrig_field():
    """The multiscale trigonometric benchmark as a bounded field."""
    global _MSTRIG_BOUNDS
    if _MSTRIG_BOUNDS is None:
        lo, hi = _scan_mstrig_bounds()
        # grid scan undershoots the true extrema; widen by 10%
        _MSTRIG_BOUNDS = (0.9 * lo, 1.1 * hi)
    lo, hi = _MSTRIG_BOUNDS
    return CoefficientField("mstrig", ms_trig, lo, hi)


def constant(c):
    """Constant coefficient field kappa = c > 0."""
    c = float(c)
    if c <= 0.0:
        raise ValueError(f"constant coefficient must be positive, got {c}")
    return CoefficientField(f"constant:{c:g}", lambda x, y: np.full_like(np.asarray(x, dtype=np.float64), c), c, c)


def parse_coefficient(name):
    """Build a field from a name: "mstrig" or "constant:<c>"."""
    if name == "mstrig":
        return mstrig_field()
    if name.startswith("constant:"):
        return constant(float(name.split(":", 1)[1]))
    raise ValueError(f"unknown coefficient {name!r}")
