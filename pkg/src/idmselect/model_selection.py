"""Outer loop: penalty grids, structured pre-selection and BIC model choice.

For each mixing weight ``a`` the transition-specific penalty levels are first
screened independently: a descending, warm-started path of single-transition
models (covariates only on the transition of interest) is fitted over a
log-spaced grid anchored at the smallest level that zeroes every coefficient
(the subgradient ceiling ``max_k |grad_k| / a`` at the covariate-free fit).
The best few levels per transition by BIC form the candidate set for the full
three-transition fits, whose BIC minimum is the selected model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, IdmselectError, SelectionError
from .likelihood import DEFAULT_QUAD_POINTS, build_evaluator
from .model import ModelSpec, ParameterSet
from .optimizer import (
    ConvergenceConfig,
    FitResult,
    PenaltyConfig,
    _HessianCache,
    fit_inner,
    initial_theta_raw,
)

DEFAULT_A_VALUES = (0.25, 0.5, 0.75, 1.0)
DEFAULT_N_LAMBDA = 20
DEFAULT_SHORTLIST = 3
DEFAULT_DECAY = 1e-3


@dataclass(frozen=True)
class PenaltyGrid:
    a_values: tuple[float, ...] = DEFAULT_A_VALUES
    n_lambda: int = DEFAULT_N_LAMBDA
    shortlist_size: int = DEFAULT_SHORTLIST
    decay: float = DEFAULT_DECAY

    def __post_init__(self):
        if any(a < 0 or a > 1 for a in self.a_values):
            raise DataError("mixing weights must lie in [0, 1]")
        if self.n_lambda < 1 or self.shortlist_size < 1:
            raise DataError("grid sizes must be positive")
        if not 0 < self.decay < 1:
            raise DataError("grid decay must be in (0, 1)")
        if self.shortlist_size > self.n_lambda:
            raise DataError("shortlist cannot exceed the lambda grid size")


@dataclass
class BicRow:
    a: float
    lam: dict[str, float]
    bic: float
    n_active: int
    unpenalized_ll: float
    converged: bool
    active_set: dict[str, tuple[int, ...]]


@dataclass
class SelectionResult:
    best_fit: FitResult
    bic_table: list[BicRow]
    selected_penalty: PenaltyConfig
    null_params: ParameterSet
    shortlists: dict[float, dict[str, tuple[float, ...]]]
    pre_fits: int = 0


def bic(fit: FitResult, n: int) -> float:
    """-2 * loglik + log(n) * (number of nonzero coefficients)."""
    if n < 2:
        raise DataError("BIC requires a sample size of at least 2")
    return -2.0 * fit.unpenalized_ll + math.log(n) * fit.n_active


def fit_null_model(
    data, spec: ModelSpec, conv: ConvergenceConfig | None = None,
    *, evaluator=None, quad_points: int = DEFAULT_QUAD_POINTS,
) -> ParameterSet:
    """Covariate-free maximum-likelihood baselines (beta fixed at zero)."""
    null_spec = spec.with_masks({})
    ev = build_evaluator(data, null_spec, quad_points) if evaluator is None else evaluator
    penalty = PenaltyConfig(1.0, {hl: 1.0 for hl in spec.transitions})
    fit = fit_inner(data, null_spec, penalty, conv, evaluator=ev, quad_points=quad_points)
    beta = {hl: np.zeros(spec.beta_dim(hl)) for hl in spec.transitions}
    return ParameterSet(fit.params.theta, beta)


def lambda_ceiling(
    data, spec: ModelSpec, hl: str, a: float,
    *, null_params: ParameterSet | None = None, evaluator=None,
    quad_points: int = DEFAULT_QUAD_POINTS,
) -> float:
    """Smallest penalty level at which the all-zero solution is stationary."""
    ev = evaluator if evaluator is not None else build_evaluator(data, spec, quad_points)
    if null_params is None:
        null_params = fit_null_model(data, spec, quad_points=quad_points)
    grad = ev.beta_derivatives(null_params, transitions=(hl,)).gradient[hl]
    gmax = float(np.max(np.abs(grad))) if grad.size else 0.0
    if gmax == 0.0:
        raise SelectionError(f"degenerate data: zero score for every covariate on {hl}")
    a_eff = a if a > 0 else 0.25
    return gmax / a_eff


def lambda_grid_for_transition(
    data, spec: ModelSpec, hl: str, a: float,
    grid: PenaltyGrid = PenaltyGrid(),
    *, null_params: ParameterSet | None = None, evaluator=None,
    quad_points: int = DEFAULT_QUAD_POINTS,
) -> np.ndarray:
    """Descending log-spaced penalty levels from the all-zero ceiling."""
    lam_max = lambda_ceiling(
        data, spec, hl, a,
        null_params=null_params, evaluator=evaluator, quad_points=quad_points,
    )
    return np.geomspace(lam_max, lam_max * grid.decay, grid.n_lambda)


@dataclass
class _PathResult:
    lam_values: np.ndarray
    fits: list[FitResult | None]
    bics: list[float]


def _single_transition_path(
    data, spec: ModelSpec, hl: str, a: float, lam_values: np.ndarray,
    conv: ConvergenceConfig, null_params: ParameterSet,
    quad_points: int = DEFAULT_QUAD_POINTS,
) -> _PathResult:
    """Warm-started descending-penalty path with covariates on one transition."""
    sub_spec = spec.with_masks({hl: tuple(range(spec.n_covariates))})
    ev = build_evaluator(data, sub_spec, quad_points)
    n = ev.n
    hcache = _HessianCache()
    init = ParameterSet(
        null_params.theta, {k: np.zeros(sub_spec.beta_dim(k)) for k in sub_spec.transitions}
    )
    fits: list[FitResult | None] = []
    bics: list[float] = []
    for lam in lam_values:
        penalty = PenaltyConfig(a, {k: float(lam) for k in sub_spec.transitions})
        try:
            fit = fit_inner(
                data, sub_spec, penalty, conv, init=init,
                evaluator=ev, hessian_cache=hcache, quad_points=quad_points,
            )
        except IdmselectError:
            fits.append(None)
            bics.append(math.inf)
            continue
        fits.append(fit)
        bics.append(bic(fit, n))
        init = fit.params
    return _PathResult(lam_values, fits, bics)


def preselect_lambdas(
    data, spec: ModelSpec, a: float,
    grid: PenaltyGrid = PenaltyGrid(),
    conv: ConvergenceConfig | None = None,
    *, null_params: ParameterSet | None = None,
    quad_points: int = DEFAULT_QUAD_POINTS,
) -> dict[str, tuple[float, ...]]:
    """Three BIC-best penalty levels per transition from single-transition fits."""
    conv = conv or ConvergenceConfig()
    if null_params is None:
        null_params = fit_null_model(data, spec, conv, quad_points=quad_points)
    out = {}
    for hl in spec.transitions:
        lam_values = lambda_grid_for_transition(
            data, spec, hl, a, grid, null_params=null_params, quad_points=quad_points
        )
        path = _single_transition_path(
            data, spec, hl, a, lam_values, conv, null_params, quad_points
        )
        out[hl] = _shortlist_from_path(path, grid.shortlist_size)
    return out


def _shortlist_from_path(path: _PathResult, size: int) -> tuple[float, ...]:
    order = sorted(
        range(len(path.lam_values)),
        key=lambda i: (path.bics[i], -path.lam_values[i]),
    )
    usable = [i for i in order if path.fits[i] is not None]
    if not usable:
        raise SelectionError("every fit on a pre-selection path failed")
    chosen = usable[:size]
    # pad from the next-best candidates if failures left the list short
    while len(chosen) < size and len(chosen) < len(usable):
        chosen.append(usable[len(chosen)])
    return tuple(float(path.lam_values[i]) for i in chosen)


def _candidate_order(a_values, shortlists) -> list[tuple[float, dict[str, float]]]:
    candidates = []
    for a in a_values:
        lists = shortlists[a]
        transitions = list(lists)
        def build(prefix, rest):
            if not rest:
                candidates.append((a, dict(prefix)))
                return
            hl = rest[0]
            for lam in lists[hl]:
                build(prefix + [(hl, lam)], rest[1:])
        build([], transitions)
    return candidates


def select_model(
    data, spec: ModelSpec,
    grid: PenaltyGrid = PenaltyGrid(),
    conv: ConvergenceConfig | None = None,
    *, quad_points: int = DEFAULT_QUAD_POINTS,
) -> SelectionResult:
    """Full grid search: pre-selection per mixing weight, then one penalized
    fit per candidate combination, returning the BIC minimizer."""
    conv = conv or ConvergenceConfig()
    ev = build_evaluator(data, spec, quad_points)
    n = ev.n
    null_params = fit_null_model(data, spec, conv, quad_points=quad_points)

    shortlists: dict[float, dict[str, tuple[float, ...]]] = {}
    path_fits: dict[tuple[float, str], _PathResult] = {}
    pre_fit_count = 0
    for a in grid.a_values:
        per_transition = {}
        for hl in spec.transitions:
            lam_values = lambda_grid_for_transition(
                data, spec, hl, a, grid, null_params=null_params,
                evaluator=ev, quad_points=quad_points,
            )
            path = _single_transition_path(
                data, spec, hl, a, lam_values, conv, null_params, quad_points
            )
            pre_fit_count += len(lam_values)
            path_fits[(a, hl)] = path
            per_transition[hl] = _shortlist_from_path(path, grid.shortlist_size)
        shortlists[a] = per_transition

    def stitched_init(a: float, lam: dict[str, float]) -> ParameterSet:
        beta = {}
        for hl in spec.transitions:
            path = path_fits[(a, hl)]
            idx = int(np.argmin(np.abs(path.lam_values - lam[hl])))
            fit = path.fits[idx]
            beta[hl] = fit.params.beta[hl].copy() if fit is not None else np.zeros(spec.beta_dim(hl))
        return ParameterSet(null_params.theta, beta)

    candidates = _candidate_order(grid.a_values, shortlists)
    table: list[BicRow] = []
    fits: list[FitResult | None] = []
    hcache = _HessianCache()
    for a, lam in candidates:
        penalty = PenaltyConfig(a, lam)
        try:
            fit = fit_inner(
                data, spec, penalty, conv, init=stitched_init(a, lam),
                evaluator=ev, hessian_cache=hcache, quad_points=quad_points,
            )
        except IdmselectError:
            fits.append(None)
            table.append(BicRow(a, dict(lam), math.inf, 0, math.nan, False, {}))
            continue
        fits.append(fit)
        table.append(
            BicRow(a, dict(lam), bic(fit, n), fit.n_active,
                   fit.unpenalized_ll, fit.converged, fit.active_set)
        )

    usable = [i for i, f in enumerate(fits) if f is not None]
    if not usable:
        raise SelectionError("all candidate fits failed")

    def tie_break(i: int):
        row = table[i]
        lam = row.lam
        return (
            row.bic,
            *(-lam[hl] for hl in spec.transitions),
            -row.a,
        )

    best = min(usable, key=tie_break)
    return SelectionResult(
        best_fit=fits[best],
        bic_table=table,
        selected_penalty=PenaltyConfig(table[best].a, table[best].lam),
        null_params=null_params,
        shortlists=shortlists,
        pre_fits=pre_fit_count,
    )
