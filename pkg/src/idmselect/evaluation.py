"""Scenario study harness: comparator methods, accuracy metrics, bootstrap.

One replicate simulates a training and a test cohort, fits each requested
method on the training data, refits the selected support without penalty,
predicts each test subject's probability of becoming ill by their first-event
horizon, and scores selection (against the generating support) and prediction
(against the probability computed from the generating parameters).  Replicates
are independent and seeded as (master seed, replicate index), so reports are
reproducible regardless of scheduling.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .baselines import MSPLINE, WEIBULL, BaselineSpec, ThetaBlock
from .data_model import Dataset, apply_standardization, standardize_covariates
from .errors import DataError, IdmselectError, SelectionError
from .inference import predict_illness_probability, refit_mle, state_occupancy
from .likelihood import DEFAULT_QUAD_POINTS
from .model import EXACT, INTERVAL, PHM, ModelSpec, ParameterSet
from .model_selection import PenaltyGrid, SelectionResult, select_model
from .optimizer import ConvergenceConfig, PenaltyConfig, fit_inner
from .simulation import (
    ScenarioConfig,
    SimulatedSample,
    make_exact_dataset,
    prepare_phm_dataset,
    simulate_scenario,
    true_support,
)

REG_ICT = "reg-ict"
ORACLE_ICT = "oracle-ict"
REG_TT = "reg-tt"
REG_PHM = "reg-phm"

METHODS = (REG_ICT, ORACLE_ICT, REG_TT, REG_PHM)

STUDY_KNOTS = (0.0, 9.0, 18.0)


def msep(predicted: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared error between predicted and true illness probabilities."""
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predicted.shape != truth.shape:
        raise DataError("predicted and true probability vectors differ in length")
    return float(np.mean((predicted - truth) ** 2))


def selection_metrics(
    selected: dict[str, tuple[int, ...]],
    truth: dict[str, tuple[int, ...]],
    p: int,
) -> dict[str, dict[str, float]]:
    """True/false positive rates per transition against the known support."""
    out = {}
    for hl, true_set in truth.items():
        sel = set(selected.get(hl, ()))
        true_s = set(true_set)
        false_s = set(range(p)) - true_s
        row = {}
        row["tpr"] = len(sel & true_s) / len(true_s) if true_s else math.nan
        row["fpr"] = len(sel & false_s) / len(false_s) if false_s else math.nan
        out[hl] = row
    return out


@dataclass
class SelectionTally:
    """Selection counts per covariate, transition and method over replicates."""

    p: int
    transitions: tuple[str, ...]
    methods: tuple[str, ...]
    n_replicates: int = 0
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        for m in self.methods:
            for hl in self.transitions:
                self.counts.setdefault((m, hl), np.zeros(self.p, dtype=int))

    def add(self, method: str, active: dict[str, tuple[int, ...]]) -> None:
        for hl, cols in active.items():
            if (method, hl) in self.counts:
                for c in cols:
                    self.counts[(method, hl)][c] += 1

    def frequency(self, method: str, hl: str) -> np.ndarray:
        if self.n_replicates == 0:
            return np.zeros(self.p)
        return self.counts[(method, hl)] / self.n_replicates


@dataclass
class MethodOutcome:
    method: str
    msep: float
    active_set: dict[str, tuple[int, ...]]
    metrics: dict[str, dict[str, float]]
    seconds: float
    failed: bool = False
    error: str = ""


@dataclass
class ReplicateReport:
    replicate: int
    seed: int
    outcomes: dict[str, MethodOutcome]


@dataclass
class StudyReport:
    scenario: str
    methods: tuple[str, ...]
    n_replicates: int
    reports: list[ReplicateReport]
    tally: SelectionTally
    failures: dict[str, int]

    def mean_msep(self, method: str) -> float:
        values = [
            r.outcomes[method].msep
            for r in self.reports
            if method in r.outcomes and not r.outcomes[method].failed
        ]
        return float(np.mean(values)) if values else math.nan


def study_model_spec(p: int, mode: str = INTERVAL) -> ModelSpec:
    return ModelSpec.full(
        BaselineSpec(MSPLINE, knots=STUDY_KNOTS, order=4), p, mode=mode
    )


def _true_params(cfg: ScenarioConfig) -> tuple[ParameterSet, ModelSpec]:
    """Generating parameters as a Weibull parameter set on the raw scale."""
    spec = ModelSpec.full(BaselineSpec(WEIBULL), cfg.p)
    theta = {}
    beta = {}
    for hl in spec.transitions:
        th1, th2 = cfg.theta_for(hl)
        theta[hl] = ThetaBlock(np.array([math.sqrt(th1), math.sqrt(th2)]), hl)
        beta[hl] = cfg.beta_true[hl].copy()
    return ParameterSet(theta, beta), spec


def true_illness_probabilities(cfg: ScenarioConfig, sample: SimulatedSample) -> np.ndarray:
    """F01 at each subject's first-event horizon under the generating model."""
    params, spec = _true_params(cfg)
    horizons = np.array([t.first_event_time for t in sample.truth])
    return predict_illness_probability(
        params, sample.data.covariates.values, horizons, spec=spec
    )


def _standardized_pair(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset]:
    cov = standardize_covariates(train.covariates)
    test_cov = apply_standardization(test.covariates, cov.center, cov.scale)
    return Dataset(train.records, cov), Dataset(test.records, test_cov)


def run_method(
    method: str,
    study,
    train_std: Dataset,
    test_std: Dataset,
    truth_probs: np.ndarray,
    grid: PenaltyGrid,
    conv: ConvergenceConfig,
    quad_points: int = DEFAULT_QUAD_POINTS,
) -> MethodOutcome:
    """Fit one comparator on the training sample and score it on the test."""
    t0 = time.time()
    cfg = study.config
    p = cfg.p
    horizons = np.array([t.first_event_time for t in study.test.truth])
    support = true_support(p)

    if method == REG_ICT:
        spec = study_model_spec(p, INTERVAL)
        sel = select_model(train_std, spec, grid, conv, quad_points=quad_points)
        active = sel.best_fit.active_set
        refit = refit_mle(
            train_std, spec, active, conv,
            init_theta=sel.best_fit.params, quad_points=quad_points,
            compute_covariance=False,
        )
    elif method == ORACLE_ICT:
        spec = study_model_spec(p, INTERVAL)
        active = support
        refit = refit_mle(train_std, spec, active, conv, quad_points=quad_points,
                          compute_covariance=False)
    elif method == REG_TT:
        spec = study_model_spec(p, EXACT)
        exact_train = make_exact_dataset(
            SimulatedSample(train_std, study.train.truth)
        )
        sel = select_model(exact_train, spec, grid, conv, quad_points=quad_points)
        active = sel.best_fit.active_set
        refit = refit_mle(
            exact_train, spec, active, conv,
            init_theta=sel.best_fit.params, quad_points=quad_points,
            compute_covariance=False,
        )
    elif method == REG_PHM:
        spec = study_model_spec(p, PHM)
        phm_train = prepare_phm_dataset(train_std)
        sel = select_model(phm_train, spec, grid, conv, quad_points=quad_points)
        active = sel.best_fit.active_set
        refit = refit_mle(
            phm_train, spec, active, conv,
            init_theta=sel.best_fit.params, quad_points=quad_points,
            compute_covariance=False,
        )
    else:
        raise DataError(f"unknown method {method!r}")

    predictions = predict_illness_probability(
        refit, test_std.covariates.values, horizons
    )
    outcome = MethodOutcome(
        method=method,
        msep=msep(predictions, truth_probs),
        active_set=active,
        metrics=selection_metrics(active, {hl: support[hl] for hl in spec.transitions}, p),
        seconds=time.time() - t0,
    )
    return outcome


def run_replicate(
    cfg: ScenarioConfig,
    replicate: int,
    master_seed: int,
    methods: tuple[str, ...],
    grid: PenaltyGrid,
    conv: ConvergenceConfig,
    quad_points: int = DEFAULT_QUAD_POINTS,
) -> ReplicateReport:
    seed = int(np.random.SeedSequence((master_seed, replicate)).generate_state(1)[0])
    study = simulate_scenario(cfg, seed)
    train_std, test_std = _standardized_pair(study.train.data, study.test.data)
    truth_probs = true_illness_probabilities(cfg, study.test)
    outcomes = {}
    for method in methods:
        try:
            outcomes[method] = run_method(
                method, study, train_std, test_std, truth_probs, grid, conv, quad_points
            )
        except IdmselectError as exc:
            outcomes[method] = MethodOutcome(
                method=method, msep=math.nan, active_set={}, metrics={},
                seconds=0.0, failed=True, error=str(exc),
            )
    return ReplicateReport(replicate, seed, outcomes)


def run_study(
    scenario: str | ScenarioConfig,
    methods: tuple[str, ...] = (REG_ICT, ORACLE_ICT, REG_PHM),
    n_replicates: int = 20,
    seed: int = 0,
    *,
    n_train: int = 500,
    n_test: int = 500,
    grid: PenaltyGrid | None = None,
    conv: ConvergenceConfig | None = None,
    quad_points: int = DEFAULT_QUAD_POINTS,
    threads: int = 1,
    max_failure_rate: float = 0.1,
) -> StudyReport:
    """Simulate-fit-score over independent replicates, optionally in parallel."""
    if isinstance(scenario, str):
        cfg = ScenarioConfig.from_name(scenario, n_train=n_train, n_test=n_test)
    else:
        cfg = scenario
    for m in methods:
        if m not in METHODS:
            raise DataError(f"unknown method {m!r}; expected subset of {METHODS}")
    grid = grid or PenaltyGrid()
    conv = conv or ConvergenceConfig(e_a=1e-7, e_b=1e-4)

    jobs = [
        (cfg, r, seed, methods, grid, conv, quad_points) for r in range(n_replicates)
    ]
    if threads > 1 and len(jobs) > 1:
        from ._parallel import parallel_starmap

        reports = parallel_starmap(run_replicate, jobs, threads)
    else:
        reports = [run_replicate(*job) for job in jobs]

    tally = SelectionTally(cfg.p, ("01", "02", "12"), tuple(methods))
    failures = {m: 0 for m in methods}
    for rep in reports:
        tally.n_replicates += 1
        for m in methods:
            outcome = rep.outcomes[m]
            if outcome.failed:
                failures[m] += 1
            else:
                tally.add(m, outcome.active_set)

    for m, k in failures.items():
        if n_replicates and k / n_replicates > max_failure_rate:
            raise SelectionError(
                f"method {m} failed in {k}/{n_replicates} replicates (over the limit)"
            )
    name = cfg.name
    return StudyReport(name, tuple(methods), n_replicates, reports, tally, failures)


# ---------------------------------------------------------------------------
# bootstrap selection stability


def bootstrap_stability(
    data: Dataset,
    spec: ModelSpec,
    fixed_penalty: PenaltyConfig,
    n_boot: int,
    seed: int,
    conv: ConvergenceConfig | None = None,
    *,
    quad_points: int = DEFAULT_QUAD_POINTS,
    threads: int = 1,
) -> SelectionTally:
    """Refit with fixed penalties on bootstrap resamples and tally the
    selected covariates."""
    conv = conv or ConvergenceConfig()
    tally = SelectionTally(data.p, tuple(spec.transitions), ("boot",))
    jobs = [(data, spec, fixed_penalty, conv, seed, b, quad_points) for b in range(n_boot)]
    if threads > 1 and n_boot > 1:
        from ._parallel import parallel_starmap

        results = parallel_starmap(_bootstrap_one, jobs, threads)
    else:
        results = [_bootstrap_one(*job) for job in jobs]
    failures = 0
    for active in results:
        tally.n_replicates += 1
        if active is None:
            failures += 1
        else:
            tally.add("boot", active)
    if failures:
        tally.counts[("boot", "failures")] = failures
    return tally


def _bootstrap_one(data, spec, penalty, conv, seed, b, quad_points):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, b))))
    idx = rng.integers(0, data.n, size=data.n)
    resample = data.subset(idx.tolist())
    try:
        fit = fit_inner(resample, spec, penalty, conv, quad_points=quad_points)
    except IdmselectError:
        return None
    return fit.active_set
