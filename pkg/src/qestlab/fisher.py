"""SLD and classical Fisher information, estimators and exact moment evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import core
from .core import Povm
from .errors import M2Violated, SingularB, SingularFisher, SingularSupport
from .models import StateModel, as_theta

SLD_TOL = 1e-10
SLD_RESIDUAL = 1e-8
NULL_PROB = 1e-14
NULL_SCORE = 1e-12
COND_MAX = 1e12
FD_B_STEP = 1e-4


@dataclass(frozen=True)
class FisherMatrix:
    matrix: np.ndarray
    kind: str

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        a = 0.5 * (a + a.T)
        a.flags.writeable = False
        object.__setattr__(self, "matrix", a)

    def inverse(self) -> np.ndarray:
        return checked_inverse(self.matrix, SingularFisher, "Fisher information")


def checked_inverse(a, err, what: str) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    cond = np.linalg.cond(a) if np.all(np.isfinite(a)) else np.inf
    if not np.isfinite(cond) or cond > COND_MAX:
        raise err(f"{what} is singular (condition number {cond:.3g})")
    return np.linalg.inv(a)


def sld(model: StateModel, theta, i: int) -> np.ndarray:
    """Symmetric logarithmic derivative L with ∂_iρ = ½(Lρ + ρL).

    Solved entrywise in the eigenbasis of ρ; entries whose eigenvalue sum is
    below ``SLD_TOL`` are set to zero (minimal-norm solution).
    """
    t = model.region.require(theta)
    rho = np.asarray(model.state(t))
    d = np.asarray(model.derivative(t, i))
    w, v = np.linalg.eigh(rho)
    dv = v.conj().T @ d @ v
    denom = w[:, None] + w[None, :]
    mask = denom > SLD_TOL
    lv = np.zeros_like(dv)
    lv[mask] = 2.0 * dv[mask] / denom[mask]
    L = v @ lv @ v.conj().T
    L = 0.5 * (L + L.conj().T)
    res = np.abs(0.5 * (L @ rho + rho @ L) - d).max()
    if res > SLD_RESIDUAL:
        raise M2Violated(f"no SLD for coordinate {i} at theta={t.tolist()} (residual {res:.3g})")
    L.flags.writeable = False
    return L


def qfi_sld(model: StateModel, theta) -> FisherMatrix:
    t = model.region.require(theta)
    rho = np.asarray(model.state(t))
    Ls = [sld(model, t, i) for i in range(model.m)]
    J = np.empty((model.m, model.m))
    for a in range(model.m):
        for b in range(model.m):
            J[a, b] = np.trace(rho @ Ls[a] @ Ls[b]).real
    return FisherMatrix(J, "sld")


def outcome_law(measurement, model: StateModel, theta):
    """Labels, probabilities and probability derivatives, shape (K,) and (K, m).

    POVMs are handled here; any other measurement type supplies its own
    ``outcome_law(model, theta)`` method.
    """
    t = as_theta(theta, model.m)
    if isinstance(measurement, Povm):
        rho = model.state(t)
        p = core.outcome_distribution(rho, measurement)
        ds = model.derivatives(t)
        dp = np.array([[np.trace(d @ e).real for d in ds] for e in measurement.elements])
        return measurement.labels, p, dp.reshape(len(p), model.m)
    return measurement.outcome_law(model, t)


def outcome_probs(measurement, model: StateModel, theta) -> np.ndarray:
    """Probabilities only; does not need θ inside the region (used for finite differences)."""
    t = as_theta(theta, model.m)
    if isinstance(measurement, Povm):
        return core.outcome_distribution(model.state(t), measurement)
    return measurement.outcome_probs(model, t)


def _support(p, dp):
    null = p < NULL_PROB
    if np.any(null) and np.abs(dp[null]).max(initial=0.0) >= NULL_SCORE:
        raise SingularSupport("a zero-probability outcome carries a nonzero score")
    return ~null


def classical_fisher(model: StateModel, theta, measurement) -> FisherMatrix:
    _, p, dp = outcome_law(measurement, model, theta)
    keep = _support(p, dp)
    q, dq = p[keep], dp[keep]
    return FisherMatrix((dq / q[:, None]).T @ dq, "classical")


@dataclass(frozen=True)
class LogDerivative:
    labels: tuple
    values: np.ndarray
    null: np.ndarray

    def __getitem__(self, label):
        return self.values[self.labels.index(label)]


def log_derivative(model: StateModel, theta, measurement) -> LogDerivative:
    labels, p, dp = outcome_law(measurement, model, theta)
    keep = _support(p, dp)
    vals = np.zeros_like(dp)
    vals[keep] = dp[keep] / p[keep, None]
    return LogDerivative(tuple(labels), vals, ~keep)


class Estimator:
    """A measurement together with an outcome → ℝ^m map.

    ``value_bound`` records the largest distance between two estimate values
    when it is known.
    """

    def __init__(self, measurement, estimate_fn: Callable, value_bound: Optional[float] = None):
        self.measurement = measurement
        self.estimate_fn = estimate_fn
        self.value_bound = value_bound

    def __call__(self, outcome) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.estimate_fn(outcome), dtype=float))

    def values(self, labels) -> np.ndarray:
        return np.array([self(lab) for lab in labels])

    @classmethod
    def from_table(cls, measurement, table: dict, value_bound: Optional[float] = None) -> "Estimator":
        table = {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in table.items()}
        if value_bound is None:
            value_bound = spread(np.array(list(table.values())))
        return cls(measurement, table.__getitem__, value_bound)


def spread(values) -> float:
    """Largest pairwise Euclidean distance between rows."""
    v = np.atleast_2d(values)
    if len(v) < 2:
        return 0.0
    d = v[:, None, :] - v[None, :, :]
    return float(np.sqrt((d ** 2).sum(-1)).max())


def _table_estimator(measurement, labels, values) -> Estimator:
    return Estimator.from_table(measurement, dict(zip(labels, values)))


def locally_unbiased_estimator(model: StateModel, theta, measurement) -> Estimator:
    """T(ω) = θ + J⁻¹ l(ω): the minimum-variance locally unbiased estimator for a fixed measurement."""
    t = model.region.require(theta)
    ld = log_derivative(model, t, measurement)
    jinv = classical_fisher(model, t, measurement).inverse()
    vals = t[None, :] + ld.values @ jinv.T
    return _table_estimator(measurement, ld.labels, vals)


def moments(est: Estimator, model: StateModel, theta):
    """E[T] and B_ij = ∂_j E[T^i] from the analytic outcome-law derivative."""
    labels, p, dp = outcome_law(est.measurement, model, theta)
    vals = est.values(labels)
    return labels, p, dp, vals, p @ vals, vals.T @ dp


def b_matrix_fd(est: Estimator, model: StateModel, theta, h: float = FD_B_STEP) -> np.ndarray:
    """B by central differences of E_θ[T] (step ``h``)."""
    t = as_theta(theta, model.m)
    labels = outcome_law(est.measurement, model, t)[0]
    vals = est.values(labels)
    B = np.empty((vals.shape[1], model.m))
    for j in range(model.m):
        e = np.zeros(model.m)
        e[j] = h
        up = outcome_probs(est.measurement, model, t + e) @ vals
        dn = outcome_probs(est.measurement, model, t - e) @ vals
        B[:, j] = (up - dn) / (2 * h)
    return B


def rebias_estimator(est: Estimator, model: StateModel, theta0) -> Estimator:
    """T' = B⁻¹(T − E_θ₀[T]) + θ₀, locally unbiased at θ₀ whenever B is invertible."""
    t0 = as_theta(theta0, model.m)
    labels, _, _, vals, mean, B = moments(est, model, t0)
    binv = checked_inverse(B, SingularB, "B matrix")
    new = (vals - mean[None, :]) @ binv.T + t0[None, :]
    return _table_estimator(est.measurement, labels, new)


def truncate_estimator(est: Estimator, theta, L: float) -> Estimator:
    """Replace T by θ wherever ‖T − θ‖ > L."""
    if L <= 0:
        raise ValueError("truncation radius must be positive")
    t = as_theta(theta)

    def fn(outcome):
        v = est(outcome)
        return v if np.linalg.norm(v - t) <= L else t.copy()

    bound = 2.0 * L if est.value_bound is None else min(2.0 * L, est.value_bound)
    return Estimator(est.measurement, fn, bound)


@dataclass(frozen=True)
class EstimationReport:
    theta: np.ndarray
    mse: np.ndarray
    variance: np.ndarray
    bias: np.ndarray
    b_matrix: Optional[np.ndarray]
    weighted_cost: float
    n: int = 1
    trials: Optional[int] = None
    stderr: Optional[float] = None


def evaluate_exact(est: Estimator, model: StateModel, theta, G=None) -> EstimationReport:
    """Exact moments by enumerating the outcome set."""
    t = as_theta(theta, model.m)
    G = np.eye(model.m) if G is None else np.atleast_2d(np.asarray(G, dtype=float))
    _, p, _, vals, mean, B = moments(est, model, t)
    dev = vals - t[None, :]
    mse = (dev * p[:, None]).T @ dev
    cen = vals - mean[None, :]
    var = (cen * p[:, None]).T @ cen
    return EstimationReport(
        theta=t,
        mse=mse,
        variance=var,
        bias=mean - t,
        b_matrix=B,
        weighted_cost=float(np.trace(G @ mse)),
        n=int(getattr(est.measurement, "n_samples", 1)),
    )


def sld_eigenbasis_povm(model: StateModel, theta) -> Povm:
    """Projective measurement onto the eigenvectors of the first-coordinate SLD."""
    L = sld(model, theta, 0)
    _, v = np.linalg.eigh(L)
    return core.projective_povm(v)
