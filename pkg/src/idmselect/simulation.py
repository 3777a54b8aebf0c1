"""Synthetic cohort generator for the six study scenarios.

Latent transition times are drawn by inversion from transition-specific
Weibull intensities with proportional covariate effects; the post-illness
death intensity runs on the study time scale, so its time is drawn from the
conditional survival given death after onset.  Visits sit on a jittered fixed
grid with per-visit dropout; the observed record keeps only what a cohort
would see (last healthy visit, diagnosis visit if reached alive, death or
administrative censoring), while the latent truth is emitted alongside as a
separate sidecar for evaluation.

Every subject draws from its own counter-based random stream keyed by
(seed, role, subject index), so datasets are bit-identical no matter how
generation is scheduled.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data_model import CovariateMatrix, Dataset, ObservationRecord
from .errors import DataError
from .likelihood import ExactTimeDataset, ExactTimeRecord, PhmDataset, PhmRecord

INDEPENDENT = "independent"
GROUP_TOEPLITZ = "group-toeplitz"

ADMIN_END = 18.0
DEFAULT_P = 50
TOEPLITZ_BLOCK = 10
TOEPLITZ_RHO = 0.5

# per-scenario-family Weibull baselines, ordered (01, 02, 12)
_FAMILY_PARAMS = {
    "A": ((2.0, 2.5, 2.5), (0.015, 0.025, 0.04), 2.5),
    "B": ((3.4, 3.4, 3.4), (0.075, 0.085, 0.07), 2.5),
    "C": ((3.4, 3.4, 3.4), (0.08, 0.08, 0.08), 4.5),
}

# sparse true coefficient supports (1-based index -> value) per transition
_TRUE_BETA = {
    "01": {1: 0.8, 2: 0.8, 3: 0.8, 11: -0.8, 12: -0.5, 13: -0.5, 42: -0.5},
    "02": {2: 0.8, 3: 0.8, 13: 0.5, 21: -0.8, 22: -0.5, 31: 0.8, 32: 0.8, 42: 0.5, 43: 0.5},
    "12": {2: 0.8, 12: -0.5, 22: -0.5, 23: -0.8, 32: 0.8, 33: 0.8, 41: -0.5, 42: -0.5},
}

SCENARIO_NAMES = ("A1", "A2", "B1", "B2", "C1", "C2")


def true_beta_vectors(p: int = DEFAULT_P) -> dict[str, np.ndarray]:
    out = {}
    for hl, entries in _TRUE_BETA.items():
        v = np.zeros(p)
        for one_based, value in entries.items():
            if one_based <= p:
                v[one_based - 1] = value
        out[hl] = v
    return out


def true_support(p: int = DEFAULT_P) -> dict[str, tuple[int, ...]]:
    """Zero-based indices of the truly active covariates per transition."""
    return {hl: tuple(np.flatnonzero(v)) for hl, v in true_beta_vectors(p).items()}


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    n_train: int = 2000
    n_test: int = 2000
    p: int = DEFAULT_P
    visit_interval: float = 2.5
    jitter_max: float = 0.5
    dropout_per_visit: float = 0.05
    admin_end: float = ADMIN_END
    weibull_theta1: tuple[float, float, float] = (2.0, 2.5, 2.5)
    weibull_theta2: tuple[float, float, float] = (0.015, 0.025, 0.04)
    correlation: str = INDEPENDENT
    beta_true: dict[str, np.ndarray] = field(default_factory=true_beta_vectors)

    def __post_init__(self):
        if self.correlation not in (INDEPENDENT, GROUP_TOEPLITZ):
            raise DataError(f"unknown correlation structure {self.correlation!r}")
        if self.correlation == GROUP_TOEPLITZ and self.p % TOEPLITZ_BLOCK != 0:
            raise DataError("group-toeplitz covariates need p divisible by the block size")
        beta = {hl: np.asarray(v, dtype=float) for hl, v in self.beta_true.items()}
        for hl, v in beta.items():
            if v.shape != (self.p,):
                raise DataError(f"beta_true[{hl}] must have length p={self.p}")
        object.__setattr__(self, "beta_true", beta)

    @classmethod
    def from_name(cls, name: str, **overrides) -> "ScenarioConfig":
        name = name.upper()
        if name not in SCENARIO_NAMES:
            raise DataError(f"unknown scenario {name!r}; expected one of {SCENARIO_NAMES}")
        family, variant = name[0], name[1]
        theta1, theta2, interval = _FAMILY_PARAMS[family]
        correlation = INDEPENDENT if variant == "1" else GROUP_TOEPLITZ
        p = overrides.pop("p", DEFAULT_P)
        beta = overrides.pop("beta_true", true_beta_vectors(p))
        return cls(
            name=name,
            p=p,
            visit_interval=interval,
            weibull_theta1=theta1,
            weibull_theta2=theta2,
            correlation=correlation,
            beta_true=beta,
            **overrides,
        )

    def theta_for(self, hl: str) -> tuple[float, float]:
        idx = {"01": 0, "02": 1, "12": 2}[hl]
        return self.weibull_theta1[idx], self.weibull_theta2[idx]


@dataclass(frozen=True)
class LatentTimes:
    t01: float
    t02: float
    t12: float


@dataclass(frozen=True)
class TruthRecord:
    id: str
    t01: float
    t02: float
    t12: float
    delta_i_star: int
    # diagnosis prevented specifically by death: the subject was truly ill,
    # undiagnosed, and died at or before the first visit after onset
    death_blocked_diagnosis: int = 0

    @property
    def first_event_time(self) -> float:
        """min of illness, death-while-healthy and administrative end."""
        return min(self.t01, self.t02, ADMIN_END)


def _toeplitz_cholesky(block: int, rho: float) -> np.ndarray:
    idx = np.arange(block)
    corr = rho ** np.abs(idx[:, None] - idx[None, :])
    return np.linalg.cholesky(corr)


def _covariate_row(p: int, correlation: str, rng: np.random.Generator,
                   chol: np.ndarray | None) -> np.ndarray:
    g = rng.standard_normal(p)
    if correlation == INDEPENDENT:
        return g
    out = np.empty(p)
    for b in range(p // TOEPLITZ_BLOCK):
        sl = slice(b * TOEPLITZ_BLOCK, (b + 1) * TOEPLITZ_BLOCK)
        out[sl] = chol @ g[sl]
    return out


def gen_covariates(n: int, p: int, correlation: str, rng: np.random.Generator) -> CovariateMatrix:
    """Standard-normal covariates, independent or block-correlated."""
    if correlation == GROUP_TOEPLITZ and p % TOEPLITZ_BLOCK != 0:
        raise DataError("group-toeplitz covariates need p divisible by the block size")
    chol = _toeplitz_cholesky(TOEPLITZ_BLOCK, TOEPLITZ_RHO) if correlation == GROUP_TOEPLITZ else None
    rows = np.empty((n, p))
    for i in range(n):
        rows[i] = _covariate_row(p, correlation, rng, chol)
    return CovariateMatrix(rows, tuple(f"z{j+1}" for j in range(p)))


def _invert_weibull(theta1: float, theta2: float, eta: float, u: float,
                    baseline_offset: float = 0.0) -> float:
    """Time at which the cumulative intensity reaches -log(u), starting from a
    given cumulative baseline level (0 for fresh clocks)."""
    target = baseline_offset - math.log(u) * math.exp(-eta)
    return max(target ** (1.0 / theta1) / theta2, 1e-12)


def sample_transition_times(
    cfg: ScenarioConfig, z: np.ndarray, rng: np.random.Generator
) -> LatentTimes:
    """Inversion sampling; the post-illness death time is conditioned on
    exceeding the illness time on the shared study clock."""
    eta = {hl: float(cfg.beta_true[hl] @ z) for hl in ("01", "02", "12")}
    u1, u2, u3 = rng.random(), rng.random(), rng.random()
    th1, th2 = cfg.theta_for("01")
    t01 = _invert_weibull(th1, th2, eta["01"], 1.0 - u1)
    th1, th2 = cfg.theta_for("02")
    t02 = _invert_weibull(th1, th2, eta["02"], 1.0 - u2)
    th1, th2 = cfg.theta_for("12")
    offset = (th2 * t01) ** th1  # cumulative baseline already accrued at onset
    t12 = _invert_weibull(th1, th2, eta["12"], 1.0 - u3, baseline_offset=offset)
    return LatentTimes(t01, t02, t12)


def build_visit_schedule(
    interval: float, admin_end: float, rng: np.random.Generator,
    jitter_max: float = 0.5, dropout: float = 0.05,
) -> tuple[float, ...]:
    """Follow-up visit times (entry at 0 excluded): jittered fixed grid,
    clamped at the administrative end, truncated at the first dropout."""
    visits = []
    k = 1
    while k * interval <= admin_end + 1e-9:
        if dropout > 0 and rng.random() < dropout:
            break
        t = min(k * interval + rng.uniform(0.0, jitter_max), admin_end)
        visits.append(t)
        k += 1
    return tuple(visits)


def derive_observed(
    latent: LatentTimes, visits: tuple[float, ...], admin_end: float = ADMIN_END,
    subject_id: str = "s",
) -> tuple[ObservationRecord, TruthRecord]:
    """Apply the observation process to one subject's latent path."""
    ti = min(latent.t01, latent.t02, admin_end)
    ill = latent.t01 <= min(latent.t02, admin_end)
    if ill:
        td = min(latent.t12, admin_end)
        dd = int(latent.t12 < admin_end)
    else:
        td = min(latent.t02, admin_end)
        dd = int(latent.t02 < admin_end)

    if ill:
        healthy_limit = ti
    elif dd:
        healthy_limit = td
    else:
        healthy_limit = math.inf
    l = 0.0
    for v in visits:
        if v < healthy_limit or (not ill and not dd and v <= admin_end):
            l = max(l, v)
    r = None
    if ill:
        post = [v for v in visits if v >= ti]
        if post:
            r = post[0]
    diagnosed = int(ill and r is not None and r < min(latent.t12, admin_end))
    blocked = int(ill and not diagnosed and r is not None and latent.t12 <= r)

    rec = ObservationRecord(
        id=subject_id,
        v0=0.0,
        l=l,
        r=r if diagnosed else None,
        delta_i=diagnosed,
        t=td,
        delta_d=dd,
    )
    truth = TruthRecord(subject_id, latent.t01, latent.t02, latent.t12, int(ill), blocked)
    return rec, truth


def _subject_rng(seed: int, role: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, role, index))))


@dataclass(frozen=True)
class SimulatedSample:
    data: Dataset
    truth: tuple[TruthRecord, ...]


@dataclass(frozen=True)
class SimulatedStudy:
    config: ScenarioConfig
    seed: int
    train: SimulatedSample
    test: SimulatedSample


def _simulate_sample(cfg: ScenarioConfig, seed: int, role: int, n: int, prefix: str) -> SimulatedSample:
    chol = (
        _toeplitz_cholesky(TOEPLITZ_BLOCK, TOEPLITZ_RHO)
        if cfg.correlation == GROUP_TOEPLITZ
        else None
    )
    records = []
    truths = []
    zrows = np.empty((n, cfg.p))
    for i in range(n):
        rng = _subject_rng(seed, role, i)
        z = _covariate_row(cfg.p, cfg.correlation, rng, chol)
        zrows[i] = z
        latent = sample_transition_times(cfg, z, rng)
        visits = build_visit_schedule(
            cfg.visit_interval, cfg.admin_end, rng, cfg.jitter_max, cfg.dropout_per_visit
        )
        rec, truth = derive_observed(latent, visits, cfg.admin_end, f"{prefix}{i}")
        rec.validate()
        records.append(rec)
        truths.append(truth)
    cov = CovariateMatrix(zrows, tuple(f"z{j+1}" for j in range(cfg.p)))
    return SimulatedSample(Dataset(tuple(records), cov), tuple(truths))


def simulate_scenario(cfg: ScenarioConfig, seed: int) -> SimulatedStudy:
    """Training and test cohorts with their latent-truth sidecars."""
    train = _simulate_sample(cfg, seed, role=0, n=cfg.n_train, prefix="tr")
    test = _simulate_sample(cfg, seed, role=1, n=cfg.n_test, prefix="te")
    return SimulatedStudy(cfg, seed, train, test)


# ---------------------------------------------------------------------------
# comparator datasets


def prepare_phm_dataset(data: Dataset, gap_years: float = 3.0) -> PhmDataset:
    """Mid-point imputation of the illness time plus the death reclassification
    rule: undiagnosed deaths within the gap of the last healthy visit count as
    healthy deaths, later ones are censored at that visit."""
    records = []
    for rec in data.records:
        if rec.delta_i == 1:
            records.append(PhmRecord(rec.id, 0.5 * (rec.l + rec.r), 1, 0))
        elif rec.delta_d == 1:
            if rec.t - rec.l < gap_years:
                records.append(PhmRecord(rec.id, rec.t, 0, 1))
            else:
                records.append(PhmRecord(rec.id, rec.l, 0, 0))
        else:
            records.append(PhmRecord(rec.id, rec.l, 0, 0))
    return PhmDataset(tuple(records), data.covariates)


def make_exact_dataset(sample: SimulatedSample) -> ExactTimeDataset:
    """Cohort with the true illness status and onset time revealed."""
    records = []
    for rec, truth in zip(sample.data.records, sample.truth):
        if truth.delta_i_star == 1:
            records.append(
                ExactTimeRecord(rec.id, 1, min(truth.t01, rec.t), rec.t, rec.delta_d)
            )
        else:
            records.append(ExactTimeRecord(rec.id, 0, None, rec.t, rec.delta_d))
    return ExactTimeDataset(tuple(records), sample.data.covariates)


# ---------------------------------------------------------------------------
# calibration summaries and truth-sidecar I/O


def observation_summary(sample: SimulatedSample, admin_end: float = ADMIN_END) -> dict[str, float]:
    """True/observed transition fractions and the death-blocked-diagnosis rate."""
    n = sample.data.n
    truths = sample.truth
    recs = sample.data.records
    true01 = sum(t.delta_i_star for t in truths)
    true02 = sum(1 for t in truths if not t.delta_i_star and t.t02 < admin_end)
    true12 = sum(1 for t in truths if t.delta_i_star and t.t12 < admin_end)
    obs01 = sum(r.delta_i for r in recs)
    obs02 = sum(1 for r in recs if r.delta_i == 0 and r.delta_d == 1)
    obs12 = sum(1 for r in recs if r.delta_i == 1 and r.delta_d == 1)
    blocked = sum(t.death_blocked_diagnosis for t in truths)
    return {
        "n": n,
        "true_01": true01 / n,
        "true_02": true02 / n,
        "true_12": true12 / n,
        "observed_01": obs01 / n,
        "observed_02": obs02 / n,
        "observed_12": obs12 / n,
        "undiagnosed_death_share": blocked / true01 if true01 else math.nan,
    }


def save_truth(truths: tuple[TruthRecord, ...], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "t01", "t02", "t12", "delta_i_star", "death_blocked_diagnosis"])
        for t in truths:
            writer.writerow(
                [t.id, repr(t.t01), repr(t.t02), repr(t.t12),
                 t.delta_i_star, t.death_blocked_diagnosis]
            )


def load_truth(path: str | Path) -> tuple[TruthRecord, ...]:
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(
                TruthRecord(
                    row["id"], float(row["t01"]), float(row["t02"]),
                    float(row["t12"]), int(row["delta_i_star"]),
                    int(row.get("death_blocked_diagnosis", 0)),
                )
            )
    return tuple(out)
