"""Model specification (transitions, baseline family, covariate masks) and parameters."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import TRANSITIONS, BaselineSpec, ThetaBlock
from .errors import DataError

INTERVAL = "interval"
EXACT = "exact"
PHM = "phm"

MODES = (INTERVAL, EXACT, PHM)


@dataclass(frozen=True)
class ModelSpec:
    """Which transitions exist, their baseline family, and per-transition covariates.

    ``masks[hl]`` lists the covariate column indices that enter the linear
    predictor of transition ``hl``; an empty mask means a covariate-free
    transition.
    """

    baseline: BaselineSpec
    n_covariates: int
    masks: dict[str, tuple[int, ...]]
    transitions: tuple[str, ...] = TRANSITIONS
    mode: str = INTERVAL

    def __post_init__(self):
        if self.mode not in MODES:
            raise DataError(f"unknown likelihood mode {self.mode!r}")
        if self.mode == PHM:
            expected = ("01", "02")
        else:
            expected = TRANSITIONS
        if tuple(self.transitions) != expected:
            raise DataError(f"mode {self.mode!r} requires transitions {expected}")
        masks = {}
        for hl in self.transitions:
            mask = tuple(int(j) for j in self.masks.get(hl, ()))
            if any(j < 0 or j >= self.n_covariates for j in mask):
                raise DataError(f"mask for transition {hl} out of range")
            if len(set(mask)) != len(mask):
                raise DataError(f"mask for transition {hl} has duplicates")
            masks[hl] = mask
        object.__setattr__(self, "masks", masks)

    @classmethod
    def full(cls, baseline: BaselineSpec, n_covariates: int, mode: str = INTERVAL) -> "ModelSpec":
        """All covariates on every transition."""
        transitions = ("01", "02") if mode == PHM else TRANSITIONS
        masks = {hl: tuple(range(n_covariates)) for hl in transitions}
        return cls(baseline, n_covariates, masks, transitions, mode)

    def with_masks(self, masks: dict[str, tuple[int, ...]]) -> "ModelSpec":
        full = {hl: tuple(masks.get(hl, ())) for hl in self.transitions}
        return replace(self, masks=full)

    def beta_dim(self, hl: str) -> int:
        return len(self.masks[hl])


@dataclass(frozen=True)
class ParameterSet:
    """Baseline parameters (per-transition ThetaBlock) and regression coefficients.

    Beta blocks are aligned with the spec's covariate masks, so
    ``beta[hl][j]`` multiplies covariate column ``spec.masks[hl][j]``.
    """

    theta: dict[str, ThetaBlock]
    beta: dict[str, np.ndarray]

    def __post_init__(self):
        beta = {hl: np.asarray(b, dtype=float) for hl, b in self.beta.items()}
        object.__setattr__(self, "beta", beta)
        for hl, b in beta.items():
            if not np.all(np.isfinite(b)):
                raise DataError(f"non-finite beta for transition {hl}")
        for hl, block in self.theta.items():
            if not np.all(np.isfinite(block.raw)):
                raise DataError(f"non-finite theta for transition {hl}")

    @classmethod
    def zeros(cls, spec: ModelSpec, theta_init: dict[str, np.ndarray] | None = None) -> "ParameterSet":
        theta = {}
        for hl in spec.transitions:
            raw = (
                np.asarray(theta_init[hl], dtype=float)
                if theta_init is not None
                else np.full(spec.baseline.n_params, 0.1)
            )
            theta[hl] = ThetaBlock(raw.copy(), hl)
        beta = {hl: np.zeros(spec.beta_dim(hl)) for hl in spec.transitions}
        return cls(theta, beta)

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            {hl: ThetaBlock(b.raw.copy(), hl) for hl, b in self.theta.items()},
            {hl: b.copy() for hl, b in self.beta.items()},
        )

    def with_beta(self, hl: str, beta_hl: np.ndarray) -> "ParameterSet":
        beta = {k: (np.asarray(beta_hl, float) if k == hl else v) for k, v in self.beta.items()}
        return ParameterSet(self.theta, beta)

    def with_theta_raw(self, raw_flat: np.ndarray, transitions: tuple[str, ...]) -> "ParameterSet":
        theta = dict(self.theta)
        offset = 0
        for hl in transitions:
            d = self.theta[hl].raw.shape[0]
            theta[hl] = ThetaBlock(np.asarray(raw_flat[offset:offset + d], float), hl)
            offset += d
        return ParameterSet(theta, self.beta)

    def theta_raw_flat(self, transitions: tuple[str, ...]) -> np.ndarray:
        return np.concatenate([self.theta[hl].raw for hl in transitions])

    def theta_effective_flat(self, transitions: tuple[str, ...]) -> np.ndarray:
        return np.concatenate([self.theta[hl].effective for hl in transitions])

    def beta_flat(self, transitions: tuple[str, ...]) -> np.ndarray:
        blocks = [self.beta[hl] for hl in transitions]
        return np.concatenate(blocks) if blocks else np.zeros(0)

    def active_set(self, spec: ModelSpec) -> dict[str, tuple[int, ...]]:
        """Covariate column indices with nonzero coefficients, per transition."""
        out = {}
        for hl in spec.transitions:
            mask = spec.masks[hl]
            out[hl] = tuple(mask[j] for j in np.flatnonzero(self.beta[hl] != 0.0))
        return out

    def n_active(self, spec: ModelSpec) -> int:
        return sum(len(v) for v in self.active_set(spec).values())
