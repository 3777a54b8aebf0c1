"""Log-likelihood of the interval-censored illness-death model and variants.

Subjects contribute one of four case-specific terms.  Writing
``psi(u) = exp(-A01(u) - A02(u) + A12(u)) * alpha01(u)`` and
``J = integral of psi`` over the subject's interval,

* diagnosed subjects (interval [l, r]):
  ``L_i = alpha12(t)^dd * exp(-A12(t)) * J``
* undiagnosed subjects (interval [l, t]):
  ``L_i = exp(-A01(t) - A02(t)) * alpha02(t)^dd
          + alpha12(t)^dd * exp(-A12(t)) * J``

plus, under left truncation, division by ``exp(-A01(v0) - A02(v0))``.
Everything is assembled in the log domain with a log-sum-exp over the two
undiagnosed-case terms, and the integrals use composite Gauss-Legendre grids
split at interior spline knots.

Regression derivatives are analytic: each transition's gradient and Hessian
diagonal reduce to per-subject scalar weights against moments
``E[f] = int f psi / J`` of the integrand measure, so the whole computation is
a handful of vectorized reductions.  Baseline-parameter gradients are analytic
as well (in optimizer space, via the chain rule through the squared encoding).

Two comparator likelihoods share the machinery: an exact-onset-time variant
(the interval integral collapses to a density factor) and a two-transition
cause-specific proportional-hazards variant for mid-point-imputed data.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .baselines import MSPLINE, WEIBULL, ThetaBlock, get_basis
from .data_model import CovariateMatrix, Dataset, ObservationRecord
from .errors import BoundaryLikelihoodWarning, DataError, EvaluationError
from .model import EXACT, INTERVAL, PHM, ModelSpec, ParameterSet
from .quadrature import QuadratureRule, gauss_legendre, subject_grids

DEFAULT_QUAD_POINTS = 15


@dataclass
class BetaDerivatives:
    """Per-transition gradient and Hessian diagonal of the log-likelihood in beta."""

    gradient: dict[str, np.ndarray]
    hessian_diag: dict[str, np.ndarray]

    def gradient_flat(self, transitions: Iterable[str]) -> np.ndarray:
        return np.concatenate([self.gradient[hl] for hl in transitions])

    def hessian_diag_flat(self, transitions: Iterable[str]) -> np.ndarray:
        return np.concatenate([self.hessian_diag[hl] for hl in transitions])


# ---------------------------------------------------------------------------
# comparator-data containers


@dataclass(frozen=True)
class ExactTimeRecord:
    """Follow-up with the illness onset time exactly observed (when ill)."""

    id: str
    ill: int
    onset: float | None
    t: float
    delta_d: int
    v0: float = 0.0

    def validate(self) -> None:
        if self.ill not in (0, 1) or self.delta_d not in (0, 1):
            raise DataError(f"record {self.id}: indicators must be 0 or 1")
        if self.ill == 1:
            if self.onset is None:
                raise DataError(f"record {self.id}: ill subject without onset time")
            if not (self.v0 <= self.onset <= self.t):
                raise DataError(f"record {self.id}: onset must lie in [v0, t]")
        elif self.onset is not None:
            raise DataError(f"record {self.id}: onset given for healthy subject")


@dataclass(frozen=True)
class ExactTimeDataset:
    records: tuple[ExactTimeRecord, ...]
    covariates: CovariateMatrix

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if len(self.records) != self.covariates.n_subjects:
            raise DataError("records and covariate rows are misaligned")
        for rec in self.records:
            rec.validate()

    @property
    def n(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class PhmRecord:
    """Cause-specific competing-risk observation: event time and cause flags."""

    id: str
    tstar: float
    d1: int  # illness event
    d2: int  # death event

    def validate(self) -> None:
        if self.d1 not in (0, 1) or self.d2 not in (0, 1) or self.d1 + self.d2 > 1:
            raise DataError(f"record {self.id}: at most one cause flag may be set")
        if self.tstar < 0:
            raise DataError(f"record {self.id}: negative event time")


@dataclass(frozen=True)
class PhmDataset:
    records: tuple[PhmRecord, ...]
    covariates: CovariateMatrix

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if len(self.records) != self.covariates.n_subjects:
            raise DataError("records and covariate rows are misaligned")
        for rec in self.records:
            rec.validate()

    @property
    def n(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------------------
# family-specific baseline value caches


class _WeibullVals:
    """Weibull baseline values and theta-derivatives at cached time arrays."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        # arrays: name -> time array; log arrays precomputed for the hot path
        self.times = arrays
        self.logs = {}
        for name, arr in arrays.items():
            with np.errstate(divide="ignore"):
                self.logs[name] = np.log(arr)

    @staticmethod
    def cumulative(theta: np.ndarray, t: np.ndarray) -> np.ndarray:
        return np.power(theta[1] * t, theta[0])

    @staticmethod
    def log_intensity(theta: np.ndarray, t: np.ndarray, logt: np.ndarray) -> np.ndarray:
        t1, t2 = float(theta[0]), float(theta[1])
        if t1 == 0.0 or t2 == 0.0:
            return np.full(t.shape, -np.inf)
        if t1 == 1.0:
            return np.full(t.shape, np.log(t1 * t2))
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(t1 * t2) + (t1 - 1.0) * (np.log(t2) + logt)

    @staticmethod
    def d_cumulative(theta: np.ndarray, t: np.ndarray, logt: np.ndarray) -> np.ndarray:
        """(..., 2) array of dA0/dtheta."""
        A0 = np.power(theta[1] * t, theta[0])
        with np.errstate(divide="ignore", invalid="ignore"):
            d1 = np.where(A0 > 0, A0 * (np.log(theta[1]) + logt), 0.0)
            d2 = np.where(t > 0, theta[0] * t * np.power(theta[1] * t, theta[0] - 1.0), 0.0)
        return np.stack([d1, d2], axis=-1)

    @staticmethod
    def d_log_intensity(theta: np.ndarray, t: np.ndarray, logt: np.ndarray) -> np.ndarray:
        d1 = 1.0 / theta[0] + np.log(theta[1]) + logt
        d2 = np.broadcast_to(theta[0] / theta[1], t.shape)
        return np.stack([d1, np.asarray(d2, float)], axis=-1)


class _MsplineVals:
    """M-spline basis design matrices at cached time arrays."""

    def __init__(self, basis, arrays: dict[str, np.ndarray], need_m: set[str]):
        self.basis = basis
        self.I = {name: basis.integral(arr) for name, arr in arrays.items()}
        self.M = {name: basis.evaluate(arrays[name]) for name in need_m}


# ---------------------------------------------------------------------------
# interval-censored evaluator


def _check_support(spec: ModelSpec, times: np.ndarray, what: str) -> None:
    lo, hi = spec.baseline.support
    if times.size and (times.min() < lo - 1e-9 or times.max() > hi + 1e-9):
        raise EvaluationError(f"{what} outside baseline support [{lo}, {hi}]")


def _masked_covariates(covariates: CovariateMatrix, spec: ModelSpec) -> dict[str, np.ndarray]:
    if covariates.p < spec.n_covariates:
        raise DataError(
            f"model expects {spec.n_covariates} covariates, data has {covariates.p}"
        )
    return {hl: covariates.values[:, list(spec.masks[hl])] for hl in spec.transitions}


def _linear_predictors(z: dict[str, np.ndarray], params: ParameterSet, transitions) -> dict[str, np.ndarray]:
    out = {}
    for hl in transitions:
        b = params.beta[hl]
        if b.shape[0] != z[hl].shape[1]:
            raise DataError(f"beta block {hl} has length {b.shape[0]}, mask has {z[hl].shape[1]}")
        out[hl] = z[hl] @ b if b.size else np.zeros(z[hl].shape[0])
    return out


class _ThetaCache:
    """Tiny LRU for baseline values keyed by the raw theta bytes."""

    def __init__(self, build, maxsize: int = 24):
        self._build = build
        self._maxsize = maxsize
        self._store: dict[bytes, object] = {}

    def get(self, params: ParameterSet, transitions):
        key = b"".join(params.theta[hl].raw.tobytes() for hl in transitions)
        hit = self._store.get(key)
        if hit is None:
            hit = self._build({hl: params.theta[hl].effective for hl in transitions})
            if len(self._store) >= self._maxsize:
                self._store.pop(next(iter(self._store)))
            self._store[key] = hit
        return hit


class IntervalEvaluator:
    """Vectorized likelihood/derivative engine for one dataset and model spec."""

    def __init__(self, dataset: Dataset, spec: ModelSpec, quad_points: int = DEFAULT_QUAD_POINTS):
        if spec.mode != INTERVAL:
            raise DataError("IntervalEvaluator requires an interval-mode spec")
        self.spec = spec
        self.n = dataset.n
        self.ids = tuple(rec.id for rec in dataset.records)
        recs = dataset.records
        self.delta_i = np.array([r.delta_i for r in recs], dtype=float)
        self.delta_d = np.array([r.delta_d for r in recs], dtype=float)
        self.t = np.array([r.t for r in recs], dtype=float)
        self.v0 = np.array([r.v0 for r in recs], dtype=float)
        lo = np.array([r.l for r in recs], dtype=float)
        hi = np.array([r.r if r.delta_i == 1 else r.t for r in recs], dtype=float)
        self.case12 = self.delta_i == 1.0

        _check_support(spec, self.t, "follow-up time")
        rule = gauss_legendre(quad_points)
        cuts = tuple(spec.baseline.knots[1:-1]) if spec.baseline.family == MSPLINE else ()
        self.u, self.w = subject_grids(lo, hi, rule, cuts=cuts)
        self.valid = self.w > 0
        self.z = _masked_covariates(dataset.covariates, spec)

        arrays = {"u": self.u, "t": self.t, "v0": self.v0}
        if spec.baseline.family == MSPLINE:
            basis = get_basis(spec.baseline.knots, spec.baseline.order)
            self._fam = _MsplineVals(basis, arrays, need_m={"u", "t"})
        else:
            self._fam = _WeibullVals(arrays)
        self._cache = _ThetaCache(self._baseline_values)
        self._memo: dict[bytes, dict] = {}

    # -- baseline values for a given effective theta ------------------------

    def _baseline_values(self, theta_eff: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        fam = self._fam
        out: dict[str, np.ndarray] = {}
        if self.spec.baseline.family == MSPLINE:
            for hl in ("01", "02", "12"):
                out[f"A0u_{hl}"] = fam.I["u"] @ theta_eff[hl]
                out[f"A0t_{hl}"] = fam.I["t"] @ theta_eff[hl]
            out["A0v0_01"] = fam.I["v0"] @ theta_eff["01"]
            out["A0v0_02"] = fam.I["v0"] @ theta_eff["02"]
            with np.errstate(divide="ignore"):
                out["log_a0u_01"] = np.log(fam.M["u"] @ theta_eff["01"])
                out["log_a0t_02"] = np.log(fam.M["t"] @ theta_eff["02"])
                out["log_a0t_12"] = np.log(fam.M["t"] @ theta_eff["12"])
        else:
            for hl in ("01", "02", "12"):
                out[f"A0u_{hl}"] = fam.cumulative(theta_eff[hl], self.u)
                out[f"A0t_{hl}"] = fam.cumulative(theta_eff[hl], self.t)
            out["A0v0_01"] = fam.cumulative(theta_eff["01"], self.v0)
            out["A0v0_02"] = fam.cumulative(theta_eff["02"], self.v0)
            out["log_a0u_01"] = fam.log_intensity(theta_eff["01"], self.u, fam.logs["u"])
            out["log_a0t_02"] = fam.log_intensity(theta_eff["02"], self.t, fam.logs["t"])
            out["log_a0t_12"] = fam.log_intensity(theta_eff["12"], self.t, fam.logs["t"])
        return out

    # -- core assembly -------------------------------------------------------

    def _get_res(self, params: ParameterSet) -> dict:
        key = b"".join(params.theta[hl].raw.tobytes() for hl in ("01", "02", "12"))
        key += b"|" + b"".join(params.beta[hl].tobytes() for hl in ("01", "02", "12"))
        hit = self._memo.get(key)
        if hit is None:
            hit = self._assemble(params)
            if len(self._memo) >= 4:
                self._memo.pop(next(iter(self._memo)))
            self._memo[key] = hit
        return hit

    def _assemble(self, params: ParameterSet):
        base = self._cache.get(params, ("01", "02", "12"))
        eta = _linear_predictors(self.z, params, ("01", "02", "12"))
        with np.errstate(over="ignore"):
            s = {hl: np.exp(eta[hl]) for hl in ("01", "02", "12")}

        A01u = base["A0u_01"] * s["01"][:, None]
        A02u = base["A0u_02"] * s["02"][:, None]
        A12u = base["A0u_12"] * s["12"][:, None]
        log_phi = -A01u - A02u + A12u + eta["01"][:, None]
        with np.errstate(invalid="ignore"):
            log_psi = log_phi + base["log_a0u_01"]

        neg_inf = -np.inf
        lp = np.where(self.valid, log_psi, neg_inf)
        m = lp.max(axis=1)
        safe_m = np.where(np.isfinite(m), m, 0.0)
        with np.errstate(invalid="ignore"):
            terms = self.w * np.exp(np.where(self.valid, lp - safe_m[:, None], neg_inf))
        jt = terms.sum(axis=1)
        with np.errstate(divide="ignore"):
            log_j = safe_m + np.log(jt)

        A01t = base["A0t_01"] * s["01"]
        A02t = base["A0t_02"] * s["02"]
        A12t = base["A0t_12"] * s["12"]
        dd = self.delta_d
        log_a12t = np.where(dd == 1.0, base["log_a0t_12"] + eta["12"], 0.0)
        log_a02t = np.where(dd == 1.0, base["log_a0t_02"] + eta["02"], 0.0)

        with np.errstate(invalid="ignore"):
            log_w = dd * log_a12t - A12t + log_j
            log_d = np.where(self.case12, neg_inf, -A01t - A02t + dd * log_a02t)
            log_li = np.logaddexp(log_d, log_w)
            trunc01 = base["A0v0_01"] * s["01"]
            trunc02 = base["A0v0_02"] * s["02"]
            ll = log_li + trunc01 + trunc02

        return {
            "base": base, "eta": eta, "s": s, "terms": terms, "jt": jt,
            "log_li": log_li, "ll": ll, "A01t": A01t, "A02t": A02t, "A12t": A12t,
            "trunc01": trunc01, "trunc02": trunc02, "log_d": log_d, "log_w": log_w,
        }

    @staticmethod
    def _ensure_mixture_level(res: dict) -> None:
        if "pd" in res:
            return
        log_li, log_d, log_w, jt = res["log_li"], res["log_d"], res["log_w"], res["jt"]
        with np.errstate(invalid="ignore"):
            pd_ = np.exp(log_d - log_li)
            pw = np.exp(log_w - log_li)
        dead = ~np.isfinite(log_li)
        pd_[dead] = 0.0
        pw[dead] = 0.0
        res.update(pd=pd_, pw=pw, safe_jt=np.where(jt > 0, jt, 1.0))

    @staticmethod
    def _ensure_moment_level(res: dict) -> None:
        if "e_a01" in res:
            return
        base, s, terms = res["base"], res["s"], res["terms"]
        stack = base.get("mom_stack")
        if stack is None:
            # first, second and cross moments of the cumulative intensities
            # under the integrand measure; theta-only, so cached alongside
            stack = np.stack(
                [
                    base["A0u_01"], base["A0u_02"], base["A0u_12"],
                    base["A0u_01"] ** 2, base["A0u_02"] ** 2, base["A0u_12"] ** 2,
                    base["A0u_01"] * base["A0u_02"],
                    base["A0u_01"] * base["A0u_12"],
                    base["A0u_02"] * base["A0u_12"],
                ],
                axis=-1,
            )
            base["mom_stack"] = stack
        mom = np.einsum("nm,nmj->nj", terms, stack) / res["safe_jt"][:, None]
        res.update(
            e_a01=mom[:, 0] * s["01"],
            e_a02=mom[:, 1] * s["02"],
            e_a12=mom[:, 2] * s["12"],
            e_a01sq=mom[:, 3] * s["01"] ** 2,
            e_a02sq=mom[:, 4] * s["02"] ** 2,
            e_a12sq=mom[:, 5] * s["12"] ** 2,
            e_a0102=mom[:, 6] * s["01"] * s["02"],
            e_a0112=mom[:, 7] * s["01"] * s["12"],
            e_a0212=mom[:, 8] * s["02"] * s["12"],
        )

    def _finalize_ll(self, ll: np.ndarray, warn: bool) -> np.ndarray:
        if np.any(np.isnan(ll)):
            bad = [self.ids[i] for i in np.flatnonzero(np.isnan(ll))][:5]
            raise EvaluationError(
                f"non-finite likelihood intermediate for subject(s) {bad}", tuple(bad)
            )
        if warn and np.any(np.isneginf(ll)):
            bad = [self.ids[i] for i in np.flatnonzero(np.isneginf(ll))][:5]
            warnings.warn(
                f"zero likelihood contribution for subject(s) {bad}",
                BoundaryLikelihoodWarning,
                stacklevel=3,
            )
        return ll

    def loglik_vector(self, params: ParameterSet, warn: bool = True) -> np.ndarray:
        res = self._get_res(params)
        return self._finalize_ll(res["ll"], warn)

    def loglik(self, params: ParameterSet, warn: bool = True) -> float:
        return float(self.loglik_vector(params, warn).sum())

    # -- analytic beta derivatives -------------------------------------------

    def beta_derivatives(
        self, params: ParameterSet, transitions: tuple[str, ...] = ("01", "02", "12")
    ) -> BetaDerivatives:
        g, h = self._beta_weights(params)
        gradient = {}
        hessian = {}
        for hl in transitions:
            zz = self.z[hl]
            gradient[hl] = (zz * g[hl][:, None]).sum(axis=0)
            hessian[hl] = (zz * zz * h[hl][:, None]).sum(axis=0)
        return BetaDerivatives(gradient, hessian)

    def _beta_weights(self, params: ParameterSet):
        res = self._get_res(params)
        self._ensure_mixture_level(res)
        self._ensure_moment_level(res)
        pd_, pw = res["pd"], res["pw"]
        dd = self.delta_d
        A01t, A02t, A12t = res["A01t"], res["A02t"], res["A12t"]
        e01, e02, e12 = res["e_a01"], res["e_a02"], res["e_a12"]
        e01s, e02s, e12s = res["e_a01sq"], res["e_a02sq"], res["e_a12sq"]
        tr01, tr02 = res["trunc01"], res["trunc02"]

        g01c = pw * (1.0 - e01) - pd_ * A01t
        g02c = pd_ * (dd - A02t) - pw * e02
        big_g = dd - A12t + e12
        g12 = pw * big_g

        h01 = pd_ * (A01t ** 2 - A01t) + pw * (1.0 - 3.0 * e01 + e01s) - g01c ** 2
        h02 = pd_ * ((dd - A02t) ** 2 - A02t) - pw * (e02 - e02s) - g02c ** 2
        h12 = pw * (big_g ** 2 - A12t + e12 + e12s - e12 ** 2) - g12 ** 2

        g = {"01": g01c + tr01, "02": g02c + tr02, "12": g12}
        h = {"01": h01 + tr01, "02": h02 + tr02, "12": h12}
        self._finalize_ll(res["ll"], warn=False)
        return g, h

    def beta_cross_weights(self, params: ParameterSet) -> dict[tuple[str, str], np.ndarray]:
        """Per-subject scalars c such that each cross-transition Hessian block
        is sum_i c_i z_a,i z_b,i^T."""
        res = self._get_res(params)
        self._ensure_mixture_level(res)
        self._ensure_moment_level(res)
        pd_, pw = res["pd"], res["pw"]
        dd = self.delta_d
        A01t, A02t, A12t = res["A01t"], res["A02t"], res["A12t"]
        e01, e02, e12 = res["e_a01"], res["e_a02"], res["e_a12"]
        cov0102 = res["e_a0102"] - e01 * e02
        cov0112 = res["e_a0112"] - e01 * e12
        cov0212 = res["e_a0212"] - e02 * e12
        n01 = pw * (1.0 - e01) - pd_ * A01t
        n02 = pd_ * (dd - A02t) - pw * e02
        big_g = dd - A12t + e12
        n12 = pw * big_g
        c0102 = pd_ * (-A01t) * (dd - A02t) + pw * (cov0102 - e02 * (1.0 - e01)) - n01 * n02
        c0112 = pw * (big_g * (1.0 - e01) - cov0112) - n01 * n12
        c0212 = pw * (-big_g * e02 - cov0212) - n02 * n12
        return {("01", "02"): c0102, ("01", "12"): c0112, ("02", "12"): c0212}

    # -- analytic theta gradient (optimizer space) ----------------------------

    def theta_raw_gradient(self, params: ParameterSet) -> np.ndarray:
        res = self._get_res(params)
        self._ensure_mixture_level(res)
        pd_, pw, terms, jt = res["pd"], res["pw"], res["terms"], res["jt"]
        s = res["s"]
        dd = self.delta_d
        safe_jt = res["safe_jt"]
        theta_eff = {hl: params.theta[hl].effective for hl in ("01", "02", "12")}

        # phi-measure terms fold the alpha01 factor out of the integrand so the
        # d(log alpha01)/dtheta piece needs no division by a possibly-zero value
        base = res["base"]
        log_phi = (
            -base["A0u_01"] * s["01"][:, None]
            - base["A0u_02"] * s["02"][:, None]
            + base["A0u_12"] * s["12"][:, None]
            + res["eta"]["01"][:, None]
        )
        lp = np.where(self.valid, log_phi, -np.inf)
        # phi-terms must share the psi-terms' scaling constant so that the
        # ratio against jt reproduces int(phi)/int(psi)
        with np.errstate(invalid="ignore"):
            lpsi = np.where(self.valid, log_phi + base["log_a0u_01"], -np.inf)
        mpsi = lpsi.max(axis=1)
        safe_mpsi = np.where(np.isfinite(mpsi), mpsi, 0.0)
        with np.errstate(invalid="ignore", over="ignore"):
            terms_phi = self.w * np.exp(np.where(self.valid, lp - safe_mpsi[:, None], -np.inf))

        if self.spec.baseline.family == MSPLINE:
            fam = self._fam
            ib_u, mb_u = fam.I["u"], fam.M["u"]
            ib_t, mb_t = fam.I["t"], fam.M["t"]
            ib_v0 = fam.I["v0"]

            e_ib = np.einsum("nm,nmk->nk", terms, ib_u) / safe_jt[:, None]
            ephi_mb = np.einsum("nm,nmk->nk", terms_phi, mb_u) / safe_jt[:, None]

            a0t_02 = mb_t @ theta_eff["02"]
            a0t_12 = mb_t @ theta_eff["12"]
            with np.errstate(divide="ignore", invalid="ignore"):
                r02 = np.where(((dd == 1.0) & (a0t_02 > 0))[:, None],
                               mb_t / np.where(a0t_02 > 0, a0t_02, 1.0)[:, None], 0.0)
                r12 = np.where(((dd == 1.0) & (a0t_12 > 0))[:, None],
                               mb_t / np.where(a0t_12 > 0, a0t_12, 1.0)[:, None], 0.0)

            case34 = ~self.case12
            d01 = (
                pd_[:, None] * (-s["01"][:, None] * ib_t) * case34[:, None]
                + pw[:, None] * (-s["01"][:, None] * e_ib + ephi_mb)
                + s["01"][:, None] * ib_v0
            )
            d02 = (
                pd_[:, None] * (-s["02"][:, None] * ib_t + r02) * case34[:, None]
                + pw[:, None] * (-s["02"][:, None] * e_ib)
                + s["02"][:, None] * ib_v0
            )
            d12 = pw[:, None] * (dd[:, None] * r12 - s["12"][:, None] * (ib_t - e_ib))
            grads = {"01": d01.sum(axis=0), "02": d02.sum(axis=0), "12": d12.sum(axis=0)}
        else:
            fam = self._fam
            grads = {}
            case34 = ~self.case12
            for hl in ("01", "02", "12"):
                th = theta_eff[hl]
                dA_u = fam.d_cumulative(th, self.u, fam.logs["u"])       # (n, M, 2)
                dA_t = fam.d_cumulative(th, self.t, fam.logs["t"])       # (n, 2)
                dA_v0 = fam.d_cumulative(th, self.v0, fam.logs["v0"])
                e_dA = np.einsum("nm,nmk->nk", terms, dA_u) / safe_jt[:, None]
                if hl == "01":
                    dlog_u = fam.d_log_intensity(th, self.u, fam.logs["u"])
                    e_dlog = np.einsum("nm,nmk->nk", terms, dlog_u) / safe_jt[:, None]
                    d = (
                        pd_[:, None] * (-s["01"][:, None] * dA_t) * case34[:, None]
                        + pw[:, None] * (-s["01"][:, None] * e_dA + e_dlog)
                        + s["01"][:, None] * dA_v0
                    )
                elif hl == "02":
                    dlog_t = fam.d_log_intensity(th, self.t, fam.logs["t"])
                    d = (
                        pd_[:, None] * (-s["02"][:, None] * dA_t + dd[:, None] * dlog_t) * case34[:, None]
                        + pw[:, None] * (-s["02"][:, None] * e_dA)
                        + s["02"][:, None] * dA_v0
                    )
                else:
                    dlog_t = fam.d_log_intensity(th, self.t, fam.logs["t"])
                    d = pw[:, None] * (dd[:, None] * dlog_t - s["12"][:, None] * (dA_t - e_dA))
                grads[hl] = d.sum(axis=0)

        out = []
        for hl in ("01", "02", "12"):
            out.append(2.0 * params.theta[hl].raw * grads[hl])
        return np.concatenate(out)


# ---------------------------------------------------------------------------
# exact-onset-time evaluator


class ExactTimeEvaluator:
    def __init__(self, dataset: ExactTimeDataset, spec: ModelSpec, quad_points: int = DEFAULT_QUAD_POINTS):
        if spec.mode != EXACT:
            raise DataError("ExactTimeEvaluator requires an exact-mode spec")
        self.spec = spec
        self.n = dataset.n
        self.ids = tuple(r.id for r in dataset.records)
        recs = dataset.records
        self.ill = np.array([r.ill for r in recs], dtype=float)
        self.delta_d = np.array([r.delta_d for r in recs], dtype=float)
        self.t = np.array([r.t for r in recs], dtype=float)
        self.v0 = np.array([r.v0 for r in recs], dtype=float)
        self.onset = np.array([r.onset if r.ill else r.t for r in recs], dtype=float)
        _check_support(spec, self.t, "follow-up time")
        self.z = _masked_covariates(dataset.covariates, spec)
        arrays = {"t": self.t, "v0": self.v0, "u": self.onset}
        if spec.baseline.family == MSPLINE:
            basis = get_basis(spec.baseline.knots, spec.baseline.order)
            self._fam = _MsplineVals(basis, arrays, need_m={"u", "t"})
        else:
            self._fam = _WeibullVals(arrays)
        self._cache = _ThetaCache(self._baseline_values)
        self._memo: dict[bytes, dict] = {}

    def _get_res(self, params: ParameterSet) -> dict:
        key = b"".join(params.theta[hl].raw.tobytes() for hl in ("01", "02", "12"))
        key += b"|" + b"".join(params.beta[hl].tobytes() for hl in ("01", "02", "12"))
        hit = self._memo.get(key)
        if hit is None:
            hit = self._assemble(params)
            if len(self._memo) >= 4:
                self._memo.pop(next(iter(self._memo)))
            self._memo[key] = hit
        return hit

    def _baseline_values(self, theta_eff: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        fam = self._fam
        out: dict[str, np.ndarray] = {}
        if self.spec.baseline.family == MSPLINE:
            for hl in ("01", "02", "12"):
                out[f"A0u_{hl}"] = fam.I["u"] @ theta_eff[hl]
                out[f"A0t_{hl}"] = fam.I["t"] @ theta_eff[hl]
            out["A0v0_01"] = fam.I["v0"] @ theta_eff["01"]
            out["A0v0_02"] = fam.I["v0"] @ theta_eff["02"]
            with np.errstate(divide="ignore"):
                out["log_a0u_01"] = np.log(fam.M["u"] @ theta_eff["01"])
                out["log_a0t_02"] = np.log(fam.M["t"] @ theta_eff["02"])
                out["log_a0t_12"] = np.log(fam.M["t"] @ theta_eff["12"])
        else:
            for hl in ("01", "02", "12"):
                out[f"A0u_{hl}"] = fam.cumulative(theta_eff[hl], self.onset)
                out[f"A0t_{hl}"] = fam.cumulative(theta_eff[hl], self.t)
            out["A0v0_01"] = fam.cumulative(theta_eff["01"], self.v0)
            out["A0v0_02"] = fam.cumulative(theta_eff["02"], self.v0)
            out["log_a0u_01"] = fam.log_intensity(theta_eff["01"], self.onset, fam.logs["u"])
            out["log_a0t_02"] = fam.log_intensity(theta_eff["02"], self.t, fam.logs["t"])
            out["log_a0t_12"] = fam.log_intensity(theta_eff["12"], self.t, fam.logs["t"])
        return out

    def _assemble(self, params: ParameterSet):
        base = self._cache.get(params, ("01", "02", "12"))
        eta = _linear_predictors(self.z, params, ("01", "02", "12"))
        with np.errstate(over="ignore"):
            s = {hl: np.exp(eta[hl]) for hl in ("01", "02", "12")}
        ill = self.ill
        dd = self.delta_d
        A01u = base["A0u_01"] * s["01"]
        A02u = base["A0u_02"] * s["02"]
        A12u = base["A0u_12"] * s["12"]
        A01t = base["A0t_01"] * s["01"]
        A02t = base["A0t_02"] * s["02"]
        A12t = base["A0t_12"] * s["12"]
        log_a01u = base["log_a0u_01"] + eta["01"]
        log_a02t = np.where(dd == 1.0, base["log_a0t_02"] + eta["02"], 0.0)
        log_a12t = np.where(dd == 1.0, base["log_a0t_12"] + eta["12"], 0.0)
        trunc01 = base["A0v0_01"] * s["01"]
        trunc02 = base["A0v0_02"] * s["02"]
        with np.errstate(invalid="ignore"):
            ll_ill = -A01u - A02u + log_a01u - (A12t - A12u) + dd * log_a12t
            ll_healthy = -A01t - A02t + dd * log_a02t
            ll = np.where(ill == 1.0, ll_ill, ll_healthy) + trunc01 + trunc02
        return {
            "ll": ll, "s": s, "A01u": A01u, "A02u": A02u, "A12u": A12u,
            "A01t": A01t, "A02t": A02t, "A12t": A12t,
            "trunc01": trunc01, "trunc02": trunc02, "base": base,
        }

    def _finalize_ll(self, ll: np.ndarray, warn: bool) -> np.ndarray:
        if np.any(np.isnan(ll)):
            bad = [self.ids[i] for i in np.flatnonzero(np.isnan(ll))][:5]
            raise EvaluationError(
                f"non-finite likelihood intermediate for subject(s) {bad}", tuple(bad)
            )
        if warn and np.any(np.isneginf(ll)):
            bad = [self.ids[i] for i in np.flatnonzero(np.isneginf(ll))][:5]
            warnings.warn(
                f"zero likelihood contribution for subject(s) {bad}",
                BoundaryLikelihoodWarning,
                stacklevel=3,
            )
        return ll

    def loglik_vector(self, params: ParameterSet, warn: bool = True) -> np.ndarray:
        return self._finalize_ll(self._get_res(params)["ll"], warn)

    def loglik(self, params: ParameterSet, warn: bool = True) -> float:
        return float(self.loglik_vector(params, warn).sum())

    def _beta_weights(self, params: ParameterSet):
        res = self._get_res(params)
        ill, dd = self.ill, self.delta_d
        g01 = res["trunc01"] + np.where(ill == 1.0, 1.0 - res["A01u"], -res["A01t"])
        h01 = res["trunc01"] + np.where(ill == 1.0, -res["A01u"], -res["A01t"])
        g02 = res["trunc02"] + np.where(ill == 1.0, -res["A02u"], dd - res["A02t"])
        h02 = res["trunc02"] + np.where(ill == 1.0, -res["A02u"], -res["A02t"])
        g12 = np.where(ill == 1.0, dd - (res["A12t"] - res["A12u"]), 0.0)
        h12 = np.where(ill == 1.0, -(res["A12t"] - res["A12u"]), 0.0)
        self._finalize_ll(res["ll"], warn=False)
        g = {"01": g01, "02": g02, "12": g12}
        h = {"01": h01, "02": h02, "12": h12}
        return g, h

    def beta_derivatives(
        self, params: ParameterSet, transitions: tuple[str, ...] = ("01", "02", "12")
    ) -> BetaDerivatives:
        g, h = self._beta_weights(params)
        gradient = {hl: (self.z[hl] * g[hl][:, None]).sum(axis=0) for hl in transitions}
        hessian = {hl: (self.z[hl] * self.z[hl] * h[hl][:, None]).sum(axis=0) for hl in transitions}
        return BetaDerivatives(gradient, hessian)

    def beta_cross_weights(self, params: ParameterSet) -> dict[tuple[str, str], np.ndarray]:
        zero = np.zeros(self.n)
        return {("01", "02"): zero, ("01", "12"): zero, ("02", "12"): zero}

    def theta_raw_gradient(self, params: ParameterSet) -> np.ndarray:
        res = self._get_res(params)
        s = res["s"]
        ill = self.ill[:, None]
        dd = self.delta_d[:, None]
        theta_eff = {hl: params.theta[hl].effective for hl in ("01", "02", "12")}
        if self.spec.baseline.family == MSPLINE:
            fam = self._fam
            ib_u, ib_t, ib_v0 = fam.I["u"], fam.I["t"], fam.I["v0"]
            mb_u, mb_t = fam.M["u"], fam.M["t"]
            a0u_01 = mb_u @ theta_eff["01"]
            a0t_02 = mb_t @ theta_eff["02"]
            a0t_12 = mb_t @ theta_eff["12"]
            r01u = np.where((ill == 1.0) & (a0u_01 > 0)[:, None],
                            mb_u / np.where(a0u_01 > 0, a0u_01, 1.0)[:, None], 0.0)
            r02t = np.where((dd == 1.0) & (a0t_02 > 0)[:, None],
                            mb_t / np.where(a0t_02 > 0, a0t_02, 1.0)[:, None], 0.0)
            r12t = np.where((dd == 1.0) & (a0t_12 > 0)[:, None],
                            mb_t / np.where(a0t_12 > 0, a0t_12, 1.0)[:, None], 0.0)
            d01 = np.where(ill == 1.0, -s["01"][:, None] * ib_u + r01u, -s["01"][:, None] * ib_t)
            d01 = d01 + s["01"][:, None] * ib_v0
            d02 = np.where(ill == 1.0, -s["02"][:, None] * ib_u, -s["02"][:, None] * ib_t + r02t)
            d02 = d02 + s["02"][:, None] * ib_v0
            d12 = np.where(ill == 1.0, -s["12"][:, None] * (ib_t - ib_u) + r12t, 0.0)
            grads = {"01": d01.sum(axis=0), "02": d02.sum(axis=0), "12": d12.sum(axis=0)}
        else:
            fam = self._fam
            grads = {}
            for hl in ("01", "02", "12"):
                th = theta_eff[hl]
                dA_u = fam.d_cumulative(th, self.onset, fam.logs["u"])
                dA_t = fam.d_cumulative(th, self.t, fam.logs["t"])
                dA_v0 = fam.d_cumulative(th, self.v0, fam.logs["v0"])
                if hl == "01":
                    dlog_u = fam.d_log_intensity(th, self.onset, fam.logs["u"])
                    d = np.where(ill == 1.0, -s["01"][:, None] * dA_u + dlog_u, -s["01"][:, None] * dA_t)
                    d = d + s["01"][:, None] * dA_v0
                elif hl == "02":
                    dlog_t = fam.d_log_intensity(th, self.t, fam.logs["t"])
                    d = np.where(ill == 1.0, -s["02"][:, None] * dA_u, -s["02"][:, None] * dA_t + dd * dlog_t)
                    d = d + s["02"][:, None] * dA_v0
                else:
                    dlog_t = fam.d_log_intensity(th, self.t, fam.logs["t"])
                    d = np.where(ill == 1.0, -s["12"][:, None] * (dA_t - dA_u) + dd * dlog_t, 0.0)
                grads[hl] = d.sum(axis=0)
        out = []
        for hl in ("01", "02", "12"):
            out.append(2.0 * params.theta[hl].raw * grads[hl])
        return np.concatenate(out)


# ---------------------------------------------------------------------------
# two-transition cause-specific evaluator (mid-point imputed data)


class PhmEvaluator:
    def __init__(self, dataset: PhmDataset, spec: ModelSpec, quad_points: int = DEFAULT_QUAD_POINTS):
        if spec.mode != PHM:
            raise DataError("PhmEvaluator requires a phm-mode spec")
        self.spec = spec
        self.n = dataset.n
        self.ids = tuple(r.id for r in dataset.records)
        recs = dataset.records
        self.tstar = np.array([r.tstar for r in recs], dtype=float)
        self.d1 = np.array([r.d1 for r in recs], dtype=float)
        self.d2 = np.array([r.d2 for r in recs], dtype=float)
        _check_support(spec, self.tstar, "event time")
        self.z = _masked_covariates(dataset.covariates, spec)
        arrays = {"t": self.tstar}
        if spec.baseline.family == MSPLINE:
            basis = get_basis(spec.baseline.knots, spec.baseline.order)
            self._fam = _MsplineVals(basis, arrays, need_m={"t"})
        else:
            self._fam = _WeibullVals(arrays)
        self._cache = _ThetaCache(self._baseline_values)
        self._memo: dict[bytes, dict] = {}

    def _get_res(self, params: ParameterSet) -> dict:
        key = b"".join(params.theta[hl].raw.tobytes() for hl in ("01", "02"))
        key += b"|" + b"".join(params.beta[hl].tobytes() for hl in ("01", "02"))
        hit = self._memo.get(key)
        if hit is None:
            hit = self._assemble(params)
            if len(self._memo) >= 4:
                self._memo.pop(next(iter(self._memo)))
            self._memo[key] = hit
        return hit

    def _baseline_values(self, theta_eff: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        fam = self._fam
        out: dict[str, np.ndarray] = {}
        if self.spec.baseline.family == MSPLINE:
            for hl in ("01", "02"):
                out[f"A0t_{hl}"] = fam.I["t"] @ theta_eff[hl]
            with np.errstate(divide="ignore"):
                out["log_a0t_01"] = np.log(fam.M["t"] @ theta_eff["01"])
                out["log_a0t_02"] = np.log(fam.M["t"] @ theta_eff["02"])
        else:
            for hl in ("01", "02"):
                out[f"A0t_{hl}"] = fam.cumulative(theta_eff[hl], self.tstar)
                out[f"log_a0t_{hl}"] = fam.log_intensity(theta_eff[hl], self.tstar, fam.logs["t"])
        return out

    def _assemble(self, params: ParameterSet):
        base = self._cache.get(params, ("01", "02"))
        eta = _linear_predictors(self.z, params, ("01", "02"))
        with np.errstate(over="ignore"):
            s = {hl: np.exp(eta[hl]) for hl in ("01", "02")}
        with np.errstate(invalid="ignore"):
            A01 = base["A0t_01"] * s["01"]
            A02 = base["A0t_02"] * s["02"]
            log_a01 = np.where(self.d1 == 1.0, base["log_a0t_01"] + eta["01"], 0.0)
            log_a02 = np.where(self.d2 == 1.0, base["log_a0t_02"] + eta["02"], 0.0)
            ll = -A01 - A02 + self.d1 * log_a01 + self.d2 * log_a02
        return {"ll": ll, "A01": A01, "A02": A02, "s": s}

    def _finalize_ll(self, ll: np.ndarray, warn: bool) -> np.ndarray:
        if np.any(np.isnan(ll)):
            bad = [self.ids[i] for i in np.flatnonzero(np.isnan(ll))][:5]
            raise EvaluationError(
                f"non-finite likelihood intermediate for subject(s) {bad}", tuple(bad)
            )
        if warn and np.any(np.isneginf(ll)):
            bad = [self.ids[i] for i in np.flatnonzero(np.isneginf(ll))][:5]
            warnings.warn(
                f"zero likelihood contribution for subject(s) {bad}",
                BoundaryLikelihoodWarning,
                stacklevel=3,
            )
        return ll

    def loglik_vector(self, params: ParameterSet, warn: bool = True) -> np.ndarray:
        return self._finalize_ll(self._get_res(params)["ll"], warn)

    def loglik(self, params: ParameterSet, warn: bool = True) -> float:
        return float(self.loglik_vector(params, warn).sum())

    def _beta_weights(self, params: ParameterSet):
        res = self._get_res(params)
        g = {"01": self.d1 - res["A01"], "02": self.d2 - res["A02"]}
        h = {"01": -res["A01"], "02": -res["A02"]}
        self._finalize_ll(res["ll"], warn=False)
        return g, h

    def beta_derivatives(
        self, params: ParameterSet, transitions: tuple[str, ...] = ("01", "02")
    ) -> BetaDerivatives:
        g, h = self._beta_weights(params)
        gradient = {hl: (self.z[hl] * g[hl][:, None]).sum(axis=0) for hl in transitions}
        hessian = {hl: (self.z[hl] * self.z[hl] * h[hl][:, None]).sum(axis=0) for hl in transitions}
        return BetaDerivatives(gradient, hessian)

    def beta_cross_weights(self, params: ParameterSet) -> dict[tuple[str, str], np.ndarray]:
        zero = np.zeros(self.n)
        return {("01", "02"): zero}

    def theta_raw_gradient(self, params: ParameterSet) -> np.ndarray:
        res = self._get_res(params)
        s = res["s"]
        theta_eff = {hl: params.theta[hl].effective for hl in ("01", "02")}
        events = {"01": self.d1[:, None], "02": self.d2[:, None]}
        grads = {}
        if self.spec.baseline.family == MSPLINE:
            fam = self._fam
            ib_t, mb_t = fam.I["t"], fam.M["t"]
            for hl in ("01", "02"):
                a0 = mb_t @ theta_eff[hl]
                r = np.where((events[hl] == 1.0) & (a0 > 0)[:, None],
                             mb_t / np.where(a0 > 0, a0, 1.0)[:, None], 0.0)
                grads[hl] = (-s[hl][:, None] * ib_t + r).sum(axis=0)
        else:
            fam = self._fam
            for hl in ("01", "02"):
                th = theta_eff[hl]
                dA = fam.d_cumulative(th, self.tstar, fam.logs["t"])
                dlog = fam.d_log_intensity(th, self.tstar, fam.logs["t"])
                grads[hl] = (-s[hl][:, None] * dA + events[hl] * dlog).sum(axis=0)
        out = []
        for hl in ("01", "02"):
            out.append(2.0 * params.theta[hl].raw * grads[hl])
        return np.concatenate(out)


# ---------------------------------------------------------------------------
# factory + spec-level convenience functions


def build_evaluator(dataset, spec: ModelSpec, quad_points: int = DEFAULT_QUAD_POINTS):
    if spec.mode == INTERVAL:
        return IntervalEvaluator(dataset, spec, quad_points)
    if spec.mode == EXACT:
        return ExactTimeEvaluator(dataset, spec, quad_points)
    return PhmEvaluator(dataset, spec, quad_points)


def _quad_points(quad: QuadratureRule | int | None) -> int:
    if quad is None:
        return DEFAULT_QUAD_POINTS
    if isinstance(quad, QuadratureRule):
        return quad.n_points
    return int(quad)


def transition_intensity(
    params: ParameterSet, spec: ModelSpec, hl: str, z: np.ndarray, t
) -> np.ndarray:
    """alpha_hl(t | z) = baseline intensity times exp(beta . z_masked)."""
    from .baselines import baseline_intensity

    z = np.asarray(z, dtype=float)
    zm = z[list(spec.masks[hl])]
    eta = float(params.beta[hl] @ zm) if params.beta[hl].size else 0.0
    return baseline_intensity(spec.baseline, params.theta[hl], t) * np.exp(eta)


def individual_log_likelihood(
    rec: ObservationRecord,
    z: np.ndarray,
    params: ParameterSet,
    spec: ModelSpec,
    quad: QuadratureRule | int | None = None,
) -> float:
    """Log contribution of one subject (convenience wrapper over the evaluator)."""
    rec.validate()
    z = np.atleast_2d(np.asarray(z, dtype=float))
    cov = CovariateMatrix(z, tuple(f"z{j+1}" for j in range(z.shape[1])))
    data = Dataset((rec,), cov)
    ev = IntervalEvaluator(data, spec, _quad_points(quad))
    return float(ev.loglik_vector(params)[0])


def total_log_likelihood(
    data: Dataset, params: ParameterSet, spec: ModelSpec,
    quad: QuadratureRule | int | None = None,
) -> float:
    """Sum of individual log contributions (fixed-order deterministic reduction)."""
    return IntervalEvaluator(data, spec, _quad_points(quad)).loglik(params)


def beta_derivatives(
    data: Dataset, params: ParameterSet, spec: ModelSpec,
    quad: QuadratureRule | int | None = None,
) -> BetaDerivatives:
    return IntervalEvaluator(data, spec, _quad_points(quad)).beta_derivatives(params)


def exact_time_log_likelihood(
    data: ExactTimeDataset, params: ParameterSet, spec: ModelSpec
) -> float:
    return ExactTimeEvaluator(data, spec).loglik(params)


def phm_log_likelihood(data: PhmDataset, params: ParameterSet, spec: ModelSpec) -> float:
    return PhmEvaluator(data, spec).loglik(params)
