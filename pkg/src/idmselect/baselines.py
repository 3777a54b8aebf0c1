"""Baseline transition intensities: Weibull and M-spline families.

An M-spline basis of order ``k`` on a knot sequence is the family of
normalized B-splines ``M_j = k * B_j / (t_{j+k} - t_j)``, each integrating to
one over its support; the I-splines are their running integrals, monotone
from 0 to 1.  Baseline intensities are non-negative combinations
``sum_j theta_j M_j(t)``; positivity of theta is enforced by squaring the
unconstrained optimizer-space parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.interpolate import BSpline

from .errors import DataError, SupportError

TRANSITIONS = ("01", "02", "12")

WEIBULL = "weibull"
MSPLINE = "mspline"


@dataclass(frozen=True)
class BaselineSpec:
    family: str
    knots: tuple[float, ...] | None = None
    order: int = 4

    def __post_init__(self):
        if self.family not in (WEIBULL, MSPLINE):
            raise DataError(f"unknown baseline family {self.family!r}")
        if self.family == MSPLINE:
            if self.knots is None or len(self.knots) < 2:
                raise DataError("M-spline baseline requires at least two knots")
            object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))
            diffs = np.diff(self.knots)
            if np.any(diffs <= 0):
                raise DataError("knots must be strictly ascending")
            if self.order < 1:
                raise DataError("M-spline order must be >= 1")
        elif self.knots is not None:
            raise DataError("Weibull baseline takes no knots")

    @property
    def n_params(self) -> int:
        """Length of one transition's theta block."""
        if self.family == WEIBULL:
            return 2
        return len(self.knots) - 2 + self.order

    @property
    def support(self) -> tuple[float, float]:
        if self.family == WEIBULL:
            return (0.0, np.inf)
        return (self.knots[0], self.knots[-1])


@dataclass(frozen=True)
class ThetaBlock:
    """Optimizer-space baseline parameters for one transition.

    The effective (non-negative) parameters are the squares of ``raw``, so
    the intensity is invariant under sign flips of any component.
    """

    raw: np.ndarray
    transition: str

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=float)
        object.__setattr__(self, "raw", raw)
        if raw.ndim != 1:
            raise DataError("theta block must be a flat vector")
        if self.transition not in TRANSITIONS:
            raise DataError(f"unknown transition {self.transition!r}")

    @property
    def effective(self) -> np.ndarray:
        return self.raw ** 2


class MSplineBasis:
    """Vectorized M-spline / I-spline basis evaluation on a fixed knot set."""

    def __init__(self, knots: tuple[float, ...], order: int):
        self.knots = tuple(float(k) for k in knots)
        self.order = int(order)
        self.lower = self.knots[0]
        self.upper = self.knots[-1]
        k = self.order
        self._t = np.concatenate(
            [[self.lower] * k, list(self.knots[1:-1]), [self.upper] * k]
        )
        self.n_basis = len(self._t) - k
        spans = self._t[k:] - self._t[:-k]
        self._scale = k / spans
        self._isplines = []
        for j in range(self.n_basis):
            coef = np.zeros(self.n_basis)
            coef[j] = self._scale[j]
            self._isplines.append(BSpline(self._t, coef, k - 1, extrapolate=False).antiderivative())

    def _check_support(self, x: np.ndarray) -> None:
        if x.size and (x.min() < self.lower - 1e-12 or x.max() > self.upper + 1e-12):
            raise SupportError(
                f"time outside spline support [{self.lower}, {self.upper}]: "
                f"range [{x.min()}, {x.max()}]"
            )

    def evaluate(self, x) -> np.ndarray:
        """M-spline basis values, shape ``x.shape + (n_basis,)``."""
        x = np.asarray(x, dtype=float)
        shape = x.shape
        flat = np.clip(x.reshape(-1), self.lower, self.upper)
        self._check_support(x.reshape(-1))
        design = BSpline.design_matrix(flat, self._t, self.order - 1, extrapolate=False).toarray()
        return (design * self._scale).reshape(shape + (self.n_basis,))

    def integral(self, x) -> np.ndarray:
        """I-spline basis values (integrated M-splines), same shape convention."""
        x = np.asarray(x, dtype=float)
        shape = x.shape
        flat = np.clip(x.reshape(-1), self.lower, self.upper)
        self._check_support(x.reshape(-1))
        out = np.empty(flat.shape + (self.n_basis,))
        for j, isp in enumerate(self._isplines):
            out[:, j] = isp(flat)
        return out.reshape(shape + (self.n_basis,))


@lru_cache(maxsize=32)
def get_basis(knots: tuple[float, ...], order: int) -> MSplineBasis:
    return MSplineBasis(knots, order)


def weibull_intensity(theta1: float, theta2: float, t) -> np.ndarray:
    """theta1 * theta2 * (theta2 * t)^(theta1 - 1), elementwise in t."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        return theta1 * theta2 * np.power(theta2 * t, theta1 - 1.0)


def weibull_cumulative(theta1: float, theta2: float, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return np.power(theta2 * t, theta1)


def baseline_intensity(spec: BaselineSpec, theta: ThetaBlock, t) -> np.ndarray:
    """Baseline intensity at time(s) t for one transition."""
    eff = theta.effective
    if spec.family == WEIBULL:
        if eff.shape != (2,):
            raise DataError("Weibull theta block must have two parameters")
        return weibull_intensity(eff[0], eff[1], t)
    basis = get_basis(spec.knots, spec.order)
    if eff.shape != (basis.n_basis,):
        raise DataError(f"theta block must have {basis.n_basis} parameters, got {eff.shape[0]}")
    return basis.evaluate(t) @ eff


def baseline_cumulative(spec: BaselineSpec, theta: ThetaBlock, t) -> np.ndarray:
    """Integral of the baseline intensity from 0 to t."""
    eff = theta.effective
    if spec.family == WEIBULL:
        if eff.shape != (2,):
            raise DataError("Weibull theta block must have two parameters")
        return weibull_cumulative(eff[0], eff[1], t)
    basis = get_basis(spec.knots, spec.order)
    if eff.shape != (basis.n_basis,):
        raise DataError(f"theta block must have {basis.n_basis} parameters, got {eff.shape[0]}")
    return basis.integral(t) @ eff
