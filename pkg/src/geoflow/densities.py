"""Energy densities f(H) driving the flow.

A density is the triple (f, f', f'') evaluated nodally on numpy arrays.  The
second derivative is only needed by the Newton linearisation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class EnergyDensity:
    kind: str
    f: Callable[[Array], Array]
    df: Callable[[Array], Array]
    d2f: Callable[[Array], Array]
    name: str = ""

    def __post_init__(self):
        if not self.name:
            object.__setattr__(self, "name", self.kind)

    def check_convex(self, h_min: float = -50.0, h_max: float = 50.0, samples: int = 2001, tol: float = 1e-12) -> None:
        """Raise ValueError if f'' is negative anywhere on a sampled curvature range."""
        h = np.linspace(h_min, h_max, samples)
        d2 = np.asarray(self.d2f(h), dtype=float) * np.ones_like(h)
        if not np.all(np.isfinite(d2)):
            raise ValueError(f"density {self.name!r}: f'' is not finite on [{h_min}, {h_max}]")
        worst = d2.min()
        if worst < -tol * max(1.0, np.abs(d2).max()):
            raise ValueError(f"density {self.name!r} is not weakly convex: f''={worst:.3g} at H={h[d2.argmin()]:.4g}")


def _const(c):
    return lambda h: np.full(np.shape(h), float(c))


AREA = EnergyDensity("area", _const(1.0), _const(0.0), _const(0.0))
MEAN_CURVATURE_INTEGRAL = EnergyDensity(
    "mean-curvature-integral", lambda h: np.asarray(h, dtype=float) * 1.0, _const(1.0), _const(0.0)
)
WILLMORE = EnergyDensity(
    "willmore", lambda h: 0.5 * np.asarray(h, dtype=float) ** 2, lambda h: np.asarray(h, dtype=float) * 1.0, _const(1.0)
)
QUARTIC = EnergyDensity(
    "quartic",
    lambda h: np.asarray(h, dtype=float) ** 4,
    lambda h: 4.0 * np.asarray(h, dtype=float) ** 3,
    lambda h: 12.0 * np.asarray(h, dtype=float) ** 2,
)

BUILTIN = {d.kind: d for d in (AREA, MEAN_CURVATURE_INTEGRAL, WILLMORE, QUARTIC)}


def custom(f, df, d2f, name: str = "custom", h_range=(-50.0, 50.0)) -> EnergyDensity:
    """Wrap user callables; convexity is checked numerically on ``h_range``."""
    d = EnergyDensity("custom", f, df, d2f, name=name)
    d.check_convex(*h_range)
    return d


def get_density(name: str) -> EnergyDensity:
    try:
        return BUILTIN[name]
    except KeyError:
        raise ValueError(f"unknown density {name!r}; choose from {', '.join(BUILTIN)}") from None
