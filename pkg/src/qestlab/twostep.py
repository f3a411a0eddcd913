"""Two-step estimator: tomography on a small prefix, then a locally unbiased
estimator built at the preliminary value and averaged over the remaining blocks.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import isqrt
from typing import Callable, Optional

import numpy as np
from scipy import optimize, stats

from . import core
from .core import Povm
from .errors import (
    IdentifiabilityFailure,
    Infeasible,
    InvalidConfig,
    MultiparameterUnsupported,
    QestError,
)
from .fisher import (
    Estimator,
    EstimationReport,
    locally_unbiased_estimator,
    outcome_probs,
    qfi_sld,
    sld_eigenbasis_povm,
)
from .models import StateModel, as_theta, tensor_power


def ceil_pow34(k: int) -> int:
    """Exact ceil(k^{3/4}) for a nonnegative integer: smallest c with c⁴ ≥ k³."""
    c = isqrt(isqrt(k ** 3))
    while c ** 4 < k ** 3:
        c += 1
    while c > 0 and (c - 1) ** 4 >= k ** 3:
        c -= 1
    return c


def allocate(n: int, n1: int = 1) -> tuple[int, int]:
    """Split n samples into a preliminary stage n0 and n2 blocks of n1.

    n2 is the largest integer with ceil(n2^{3/4}) + n1·n2 ≤ n; the slack goes
    to the preliminary stage.
    """
    n, n1 = int(n), int(n1)
    if n1 < 1:
        raise InvalidConfig("block size n1 must be >= 1")
    if n < 1 + n1:
        raise Infeasible(f"n={n} too small for block size {n1}")
    lo, hi = 1, n // n1
    # the cost ceil(k^{3/4}) + n1·k is increasing in k
    if ceil_pow34(lo) + n1 * lo > n:
        raise Infeasible(f"no feasible allocation for n={n}, n1={n1}")
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if ceil_pow34(mid) + n1 * mid <= n:
            lo = mid
        else:
            hi = mid - 1
    return n - n1 * lo, lo


@dataclass(frozen=True)
class PreliminaryEstimator:
    povm: Povm
    project_fn: Callable

    def __call__(self, freqs) -> np.ndarray:
        return self.project_fn(np.asarray(freqs, dtype=float))


def _pauli_readout(freqs) -> np.ndarray:
    f = np.asarray(freqs, dtype=float)
    return 3.0 * np.array([f[0] - f[1], f[2] - f[3], f[4] - f[5]])


def _grid_points(region, per_axis: int) -> np.ndarray:
    axes = [
        np.linspace(lo + region.margin, hi - region.margin, per_axis)
        for lo, hi in region.box
    ]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, region.m)
    return np.array([p for p in pts if region.contains(p)])


def preliminary_tomography(model: StateModel, povm: Optional[Povm] = None) -> PreliminaryEstimator:
    """Frequency-based preliminary estimator with a clipped least-squares projection.

    Qubit models default to the six-outcome Pauli POVM and fit θ to the
    empirical Bloch vector. Other models need ``povm`` and fit the outcome
    probabilities directly. When the fitted quantity is affine in θ the
    least-squares solution is computed in closed form, otherwise a grid
    search seeds a bounded nonlinear least-squares refinement.
    """
    region = model.region
    center = region.clip(region.box.mean(axis=1))
    if povm is None:
        if model.dim != 2:
            raise InvalidConfig("non-qubit models need an explicit preliminary POVM")
        povm = core.pauli_povm()

        def predict(t):
            return core.bloch_vector(model.state_fn(t))

        readout = _pauli_readout
    else:
        def predict(t):
            return np.array([np.trace(model.state_fn(t) @ e).real for e in povm.elements])

        def readout(f):
            return f

    ds = model.derivatives(center)
    gram_rows = np.array([[np.trace(d @ e).real for d in ds] for e in povm.elements])
    if np.linalg.matrix_rank(gram_rows, tol=1e-10) < model.m:
        raise IdentifiabilityFailure("preliminary POVM cannot identify every parameter")

    # affine check on a few points
    b0 = predict(center)
    step = 0.25 * (region.box[:, 1] - region.box[:, 0]) / 2
    A = np.stack(
        [(predict(center + step * np.eye(model.m)[i]) - b0) / step[i] for i in range(model.m)],
        axis=1,
    )
    probe = region.clip(center - 0.3 * step + 0.17 * step[::-1])
    affine = np.abs(predict(probe) - (b0 + A @ (probe - center))).max() < 1e-10

    if affine:
        pinv = np.linalg.pinv(A)

        def project(freqs):
            return region.clip(center + pinv @ (readout(freqs) - b0))

        return PreliminaryEstimator(povm, project)

    grid = _grid_points(region, 41 if model.m == 1 else 15)
    table = np.array([predict(p) for p in grid])
    lo = region.box[:, 0] + region.margin
    hi = region.box[:, 1] - region.margin

    def project(freqs):
        target = readout(freqs)
        start = grid[np.argmin(((table - target) ** 2).sum(1))]
        fit = optimize.least_squares(lambda t: predict(t) - target, start, bounds=(lo, hi))
        return region.clip(fit.x)

    return PreliminaryEstimator(povm, project)


def sld_lue_factory(model: StateModel, n1: int = 1) -> Callable:
    """θ₀ ↦ locally unbiased estimator measured in the SLD eigenbasis of the n1-copy block."""
    block = model if n1 == 1 else tensor_power(model, n1)

    def factory(theta0):
        return locally_unbiased_estimator(block, theta0, sld_eigenbasis_povm(block, theta0))

    return factory


@dataclass(frozen=True)
class TwoStepConfig:
    n: int
    n1: int = 1
    lue_factory: Optional[Callable] = None
    preliminary: Optional[PreliminaryEstimator] = None
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.n1 < 1:
            raise InvalidConfig("two-step needs n >= 2 and n1 >= 1")
        allocate(self.n, self.n1)


@dataclass(frozen=True)
class McResult:
    report: EstimationReport
    per_trial_estimates: Optional[np.ndarray]
    ks_stat: Optional[float]
    n0: int
    n1: int
    n2: int
    flagged_trials: int = 0


def _trial(model, theta_true, cfg, rng, factory, prelim, block):
    n0, n2 = allocate(cfg.n, cfg.n1)
    p0 = outcome_probs(prelim.povm, model, theta_true)
    counts = rng.multinomial(n0, p0)
    theta0 = prelim(counts / n0)
    try:
        est = factory(theta0)
    except QestError:
        return theta0, True
    meas = est.measurement
    if isinstance(meas, Povm):
        labels = meas.labels
    else:
        labels = meas.outcome_law(block, theta_true)[0]
    p = outcome_probs(meas, block, theta_true)
    vals = est.values(labels)
    k = rng.multinomial(n2, p)
    return (k @ vals) / n2, False


def _setup(model, cfg):
    factory = cfg.lue_factory or sld_lue_factory(model, cfg.n1)
    prelim = cfg.preliminary or preliminary_tomography(model)
    block = model if cfg.n1 == 1 else tensor_power(model, cfg.n1)
    return factory, prelim, block


def run_two_step(model: StateModel, theta_true, cfg: TwoStepConfig, rng: np.random.Generator,
                 return_flag: bool = False):
    """Single two-step trial. Block outcomes are drawn as multinomial counts,
    which has the same law as averaging n2 independent block estimates."""
    t = as_theta(theta_true, model.m)
    factory, prelim, block = _setup(model, cfg)
    est, flag = _trial(model, t, cfg, rng, factory, prelim, block)
    return (est, flag) if return_flag else est


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(trial)])


def monte_carlo(model: StateModel, theta_true, cfg: TwoStepConfig, trials: int, G=None,
                workers: int = 1, keep_estimates: bool = True) -> McResult:
    """Repeat the two-step estimator; each trial uses its own stream derived from (seed, trial)."""
    if trials < 2:
        raise InvalidConfig("monte carlo needs at least 2 trials")
    t = as_theta(theta_true, model.m)
    G = np.eye(model.m) if G is None else np.atleast_2d(np.asarray(G, dtype=float))
    factory, prelim, block = _setup(model, cfg)
    n0, n2 = allocate(cfg.n, cfg.n1)

    def one(k):
        return _trial(model, t, cfg, trial_rng(cfg.seed, k), factory, prelim, block)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(one, range(trials)))
    else:
        out = [one(k) for k in range(trials)]
    est = np.array([np.atleast_1d(e) for e, _ in out])
    flagged = sum(f for _, f in out)

    dev = est - t[None, :]
    mse = dev.T @ dev / trials
    mean = est.mean(axis=0)
    cen = est - mean[None, :]
    var = cen.T @ cen / trials
    cost = cfg.n * np.einsum("ti,ij,tj->t", dev, G, dev)
    report = EstimationReport(
        theta=t,
        mse=mse,
        variance=var,
        bias=mean - t,
        b_matrix=None,
        weighted_cost=float(cost.mean()),
        n=cfg.n,
        trials=trials,
        stderr=float(cost.std(ddof=1) / np.sqrt(trials)),
    )
    ks = None
    if model.m == 1:
        ks = _ks(est[:, 0], t[0], cfg.n, 1.0 / qfi_sld(model, t).matrix[0, 0])
    return McResult(report, est if keep_estimates else None, ks, n0, cfg.n1, n2, int(flagged))


def _ks(est, theta, n, v) -> float:
    z = np.sqrt(n) * (np.asarray(est) - theta) / np.sqrt(v)
    return float(stats.kstest(z, "norm").statistic)


def normality_ks(mc: McResult, model: StateModel, theta, G=None) -> float:
    """KS distance between √n·V^{-1/2}(T − θ) and the standard normal, V = 1/J^S."""
    if model.m != 1:
        raise MultiparameterUnsupported("normality check is implemented for one parameter")
    if mc.per_trial_estimates is None:
        raise InvalidConfig("normality check needs per-trial estimates")
    t = as_theta(theta, 1)
    v = 1.0 / qfi_sld(model, t).matrix[0, 0]
    return _ks(mc.per_trial_estimates[:, 0], t[0], mc.report.n, v)
