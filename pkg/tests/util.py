"""Shared helpers for the test suite: random cohorts and finite-difference oracles."""

from __future__ import annotations

import numpy as np

from idmselect.baselines import MSPLINE, WEIBULL, BaselineSpec, ThetaBlock
from idmselect.data_model import CovariateMatrix, Dataset, ObservationRecord
from idmselect.model import ModelSpec, ParameterSet


def random_cohort(n, p, seed, horizon=18.0, rates=(0.06, 0.05, 0.12), beta_scale=0.3):
    """Small synthetic cohort with all four follow-up patterns represented.

    Uses a crude constant-hazard latent process with a fixed visit grid; only
    meant to produce valid, varied records for oracle tests, not to replicate
    any particular study design.
    """
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, p))
    b01 = rng.normal(scale=beta_scale, size=p)
    b02 = rng.normal(scale=beta_scale, size=p)
    visits = np.arange(2.0, horizon + 1e-9, 2.0)
    records = []
    for i in range(n):
        a01 = rates[0] * np.exp(z[i] @ b01)
        a02 = rates[1] * np.exp(z[i] @ b02)
        a12 = rates[2]
        t01 = rng.exponential(1 / a01)
        t02 = rng.exponential(1 / a02)
        if t01 < min(t02, horizon):
            t12 = t01 + rng.exponential(1 / a12)
            t = min(t12, horizon)
            dd = int(t12 < horizon)
            after = visits[(visits >= t01) & (visits < t)]
            if after.size:
                r = float(after[0])
                l = float(max([0.0] + list(visits[visits < t01])))
                records.append(ObservationRecord(f"s{i}", 0.0, l, r, 1, float(t), dd))
            else:
                l = float(max([0.0] + list(visits[visits < min(t01, t)])))
                records.append(ObservationRecord(f"s{i}", 0.0, l, None, 0, float(t), dd))
        else:
            t = min(t02, horizon)
            dd = int(t02 < horizon)
            l = float(max([0.0] + list(visits[visits < t])))
            records.append(ObservationRecord(f"s{i}", 0.0, l, None, 0, float(t), dd))
    cov = CovariateMatrix(z, tuple(f"z{j+1}" for j in range(p)))
    return Dataset(tuple(records), cov)


def mspline_spec(p, knots=(0.0, 9.0, 18.0), order=4, mode="interval"):
    return ModelSpec.full(BaselineSpec(MSPLINE, knots=knots, order=order), p, mode=mode)


def weibull_spec(p, mode="interval"):
    return ModelSpec.full(BaselineSpec(WEIBULL), p, mode=mode)


def random_params(spec, seed, theta_low=0.1, theta_high=0.9, beta_scale=0.3):
    rng = np.random.default_rng(seed)
    theta = {}
    for hl in spec.transitions:
        if spec.baseline.family == WEIBULL:
            raw = np.array([rng.uniform(1.0, 1.6), rng.uniform(0.2, 0.4)])
        else:
            raw = rng.uniform(theta_low, theta_high, size=spec.baseline.n_params)
        theta[hl] = ThetaBlock(raw, hl)
    beta = {hl: rng.normal(scale=beta_scale, size=spec.beta_dim(hl)) for hl in spec.transitions}
    return ParameterSet(theta, beta)


def constant_hazard_params(spec, a01, a02, a12=None):
    """Weibull shape-1 parameter set giving constant hazards (beta = 0)."""
    rates = {"01": a01, "02": a02, "12": a12 if a12 is not None else 0.0}
    theta = {
        hl: ThetaBlock(np.array([1.0, np.sqrt(rates[hl])]), hl) for hl in spec.transitions
    }
    beta = {hl: np.zeros(spec.beta_dim(hl)) for hl in spec.transitions}
    return ParameterSet(theta, beta)


def fd_gradient(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        g[j] = (f(xp) - f(xm)) / (2 * h)
    return g


def fd_hessian_diag(f, x, h=3e-4):
    x = np.asarray(x, dtype=float)
    f0 = f(x)
    d = np.empty_like(x)
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        d[j] = (f(xp) - 2 * f0 + f(xm)) / h**2
    return d


def set_beta_flat(params, spec, flat):
    """Rebuild a ParameterSet with beta blocks taken from one flat vector."""
    beta = {}
    offset = 0
    for hl in spec.transitions:
        d = spec.beta_dim(hl)
        beta[hl] = np.asarray(flat[offset:offset + d], dtype=float)
        offset += d
    return ParameterSet(params.theta, beta)
