"""Round-based adaptive measurement schedules on separate samples.

Every sample is acted on only by its own instruments and the samples start
in a product state, so the unnormalized operator of each sample can be
propagated independently along an outcome path. A path's weight under any
product assignment is then the product of the per-sample traces. Because the
propagation is linear, the same machinery yields probabilities (assign ρ),
probability derivatives (assign ∂ρ to one sample) and effective POVM
elements (assign matrix units).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import core
from .core import Instrument, Povm
from .errors import (
    DimensionMismatch,
    InvalidConfig,
    NotLocallyUnbiased,
    StateNotPositive,
    TreeTooLarge,
)
from .fisher import Estimator, outcome_law as _outcome_law
from .models import StateModel, as_theta

MAX_PATHS = 10 ** 6
NULL_WEIGHT = 1e-14
POSITIVE_TOL = 1e-10
LOCAL_UNBIASED_TOL = 1e-8


@dataclass(frozen=True)
class AdaptiveSchedule:
    """``choose_fn(r, k, history)`` returns the instrument applied to sample ``k``
    in round ``r`` (both 0-based). ``history`` is the flat tuple of outcomes of
    all earlier rounds, round-major and sample-minor."""

    n_samples: int
    rounds: int
    choose_fn: Callable

    def __post_init__(self):
        if self.n_samples < 1 or self.rounds < 1:
            raise InvalidConfig("schedule needs at least one sample and one round")

    def choose(self, r: int, k: int, history) -> Instrument:
        inst = self.choose_fn(r, k, tuple(history))
        if not isinstance(inst, Instrument):
            raise InvalidConfig(f"choose_fn returned {type(inst).__name__} for round {r}, sample {k}")
        return inst

    def outcome_law(self, model: StateModel, theta):
        t = as_theta(theta, model.m)
        ops = [model.state(t)] + model.derivatives(t)
        paths, tr = _propagate_real(self, ops)
        p = np.prod(tr[:, :, 0], axis=1)
        dp = np.stack([_one_swapped(tr, 0, 1 + i) for i in range(model.m)], axis=1)
        return paths, p, dp

    def outcome_probs(self, model: StateModel, theta) -> np.ndarray:
        paths, tr = _propagate_real(self, [model.state(as_theta(theta, model.m))])
        return np.prod(tr[:, :, 0], axis=1)


def fixed_schedule(instruments: Sequence[Sequence[Instrument]]) -> AdaptiveSchedule:
    """Non-adaptive schedule: ``instruments[r][k]`` for round r and sample k."""
    rounds = len(instruments)
    n = len(instruments[0])
    return AdaptiveSchedule(n, rounds, lambda r, k, h: instruments[r][k])


def _one_swapped(tr: np.ndarray, base: int, other: int) -> np.ndarray:
    """Σ_k tr[:, k, other] Π_{k'≠k} tr[:, k', base]."""
    n = tr.shape[1]
    out = np.zeros(tr.shape[0])
    for k in range(n):
        w = tr[:, k, other].copy()
        for j in range(n):
            if j != k:
                w = w * tr[:, j, base]
        out += w
    return out


def _apply(inst: Instrument, k: int, xs: np.ndarray) -> np.ndarray:
    out = 0
    for K in inst.branches[k]:
        out = out + np.einsum("ab,obc,dc->oad", K, xs, K.conj())
    return out


def _propagate(schedule: AdaptiveSchedule, ops, prune: bool = False):
    """Enumerate outcome paths, returning labels and per-sample traces, shape (P, n, O).

    ``ops`` are the initial operators shared by every sample; trace ``[p, k, o]``
    is tr Φ_{p,k}(ops[o]) where Φ_{p,k} is the composite branch map sample ``k``
    undergoes along path ``p``.
    """
    n = schedule.n_samples
    base = np.stack([np.asarray(o, dtype=complex) for o in ops])
    nodes = [((), tuple(base for _ in range(n)))]
    for r in range(schedule.rounds):
        for k in range(n):
            insts = [schedule.choose(r, k, labels[: r * n]) for labels, _ in nodes]
            total = sum(len(i.labels) for i in insts)
            if total > MAX_PATHS:
                raise TreeTooLarge(f"outcome tree exceeds {MAX_PATHS} paths")
            new = []
            for (labels, xs), inst in zip(nodes, insts):
                if inst.input_dim != xs[k].shape[-1]:
                    raise DimensionMismatch(
                        f"round {r} sample {k}: instrument expects dim {inst.input_dim}, "
                        f"sample has dim {xs[k].shape[-1]}"
                    )
                for b, lab in enumerate(inst.labels):
                    y = _apply(inst, b, xs[k])
                    if prune and np.abs(y).max() < NULL_WEIGHT:
                        continue
                    new.append((labels + (lab,), xs[:k] + (y,) + xs[k + 1:]))
            nodes = new
    paths = tuple(labels for labels, _ in nodes)
    tr = np.array([[np.trace(x, axis1=1, axis2=2) for x in xs] for _, xs in nodes], dtype=complex)
    return paths, tr.reshape(len(paths), n, len(ops))


def _propagate_real(schedule, ops, prune: bool = False):
    paths, tr = _propagate(schedule, ops, prune)
    return paths, tr.real


@dataclass(frozen=True)
class OutcomeTree:
    paths: tuple
    probs: np.ndarray
    null_paths: int

    def prob(self, path) -> float:
        return float(self.probs[self.paths.index(tuple(path))])


def enumerate_schedule(schedule: AdaptiveSchedule, states, prune: bool = False) -> OutcomeTree:
    """Exact joint law of all outcomes when sample k starts in ``states[k]``.

    A single state is used for every sample. Zero-probability paths are kept
    and counted in ``null_paths`` unless ``prune`` drops structurally null
    branches.
    """
    if isinstance(states, np.ndarray) and states.ndim == 2:
        states = [states] * schedule.n_samples
    states = [core.density(s) for s in states]
    if len(states) != schedule.n_samples:
        raise DimensionMismatch("need one state per sample")
    distinct = []
    index = []
    for s in states:
        for j, d in enumerate(distinct):
            if d is s or np.array_equal(d, s):
                index.append(j)
                break
        else:
            index.append(len(distinct))
            distinct.append(s)
    paths, tr = _propagate_real(schedule, distinct, prune)
    p = np.ones(len(paths))
    for k, j in enumerate(index):
        p = p * tr[:, k, j]
    return OutcomeTree(paths, p, int(np.sum(p < NULL_WEIGHT)))


def compose_adaptive(first: Instrument, followup: Callable) -> Instrument:
    """Instrument ``first`` followed by ``followup(ω)``; outcome labels are pairs (ω, ω′)."""
    branches, labels = [], []
    for lab, ks in zip(first.labels, first.branches):
        nxt = followup(lab)
        if nxt.input_dim != first.output_dim:
            raise DimensionMismatch(
                f"followup for {lab!r} expects dim {nxt.input_dim}, first outputs {first.output_dim}"
            )
        for lab2, ks2 in zip(nxt.labels, nxt.branches):
            branches.append([k2 @ k1 for k1 in ks for k2 in ks2])
            labels.append((lab, lab2))
    return Instrument(tuple(branches), tuple(labels))


def _group(paths, length: int) -> np.ndarray:
    keys = {}
    return np.array([keys.setdefault(p[:length], len(keys)) for p in paths])


def _group_cols(paths, cols) -> np.ndarray:
    keys = {}
    return np.array([keys.setdefault(tuple(p[c] for c in cols), len(keys)) for p in paths])


def _cond_mean(g: np.ndarray, w: np.ndarray, vals: np.ndarray):
    """Per-group mass and conditional mean of ``vals`` under weights ``w``."""
    mass = np.bincount(g, weights=w)
    sums = np.stack([np.bincount(g, weights=w * vals[:, j]) for j in range(vals.shape[1])], 1)
    safe = np.where(mass > 0, mass, 1.0)
    return mass, sums / safe[:, None]


def leibniz_check(schedule: AdaptiveSchedule, T: Estimator, model: StateModel, theta0,
                  r: int, kappa: int, h: float = 1e-4) -> float:
    """Finite-difference residual of the product rule for the data split after (r, kappa).

    Compares ∂E_θ[T] with ∂E_θ E_θ₀[T|prefix] + ∂E_θ₀ E_θ[T|prefix] at θ₀, where
    the prefix holds every outcome up to sample ``kappa`` of round ``r``.
    """
    t0 = as_theta(theta0, model.m)
    n = schedule.n_samples
    if not (0 <= r < schedule.rounds and 0 <= kappa < n):
        raise InvalidConfig(f"(r, kappa)=({r}, {kappa}) outside the schedule")
    ops = [model.state(t0)]
    for i in range(model.m):
        e = np.zeros(model.m)
        e[i] = h
        ops += [model.state(t0 + e), model.state(t0 - e)]
    paths, tr = _propagate_real(schedule, ops)
    probs = np.prod(tr, axis=1)  # (P, O): every sample in the same state
    vals = T.values(paths)
    g = _group(paths, r * n + kappa + 1)
    m0, c0 = _cond_mean(g, probs[:, 0], vals)
    res = 0.0
    for i in range(model.m):
        parts = []
        for col in (1 + 2 * i, 2 + 2 * i):
            p = probs[:, col]
            ms, cs = _cond_mean(g, p, vals)
            parts.append((p @ vals, ms @ c0, m0 @ cs))
        (a1, b1, c1), (a2, b2, c2) = parts
        res = max(res, float(np.abs((a1 - a2) - (b1 - b2) - (c1 - c2)).max() / (2 * h)))
    return res


@dataclass(frozen=True)
class ReductionReport:
    mean_f: float
    s_bias: float
    b_matrix: np.ndarray
    b_error: float
    v_e: np.ndarray
    v_s: np.ndarray
    psd_gap: float
    orthogonality: float
    f_terms: dict


def _matrix_units(d: int):
    out = []
    for j in range(d):
        for k in range(d):
            e = np.zeros((d, d), dtype=complex)
            e[j, k] = 1.0
            out.append(e)
    return out


def fake_ensemble_reduce(schedule: AdaptiveSchedule, T: Estimator, model: StateModel, theta0):
    """Replace an adaptive locally unbiased estimator by a sum of per-sample terms.

    f_{r,k} = E[T | rounds < r, outcome (r,k)] − E[T | rounds < r] under θ₀,
    F_k = Σ_r f_{r,k}. Sample k's term is realized on a single copy by running
    the whole schedule with every other sample frozen at ρ_θ₀; the resulting
    single-copy POVM has elements E_k(path) with
    tr X E_k(path) = tr Φ_{path,k}(X) · Π_{j≠k} tr Φ_{path,j}(ρ_θ₀).

    Returns the per-sample estimators (values F_k, without the θ₀ offset) and
    a report with the moment checks.
    """
    t0 = model.region.require(theta0)
    m = model.m
    rho0 = model.state(t0)
    if core.min_eigenvalue(rho0) <= POSITIVE_TOL:
        raise StateNotPositive("the state at theta0 must be strictly positive")
    d = rho0.shape[0]
    n = schedule.n_samples
    units = _matrix_units(d)
    ops = [rho0] + model.derivatives(t0) + units
    paths, ctr = _propagate(schedule, ops)
    tr = ctr.real
    p0 = np.prod(tr[:, :, 0], axis=1)
    vals = T.values(paths)

    mean = p0 @ vals
    B = np.stack([vals.T @ _one_swapped(tr, 0, 1 + i) for i in range(m)], axis=1)
    if np.abs(mean - t0).max() > LOCAL_UNBIASED_TOL or np.abs(B - np.eye(m)).max() > LOCAL_UNBIASED_TOL:
        raise NotLocallyUnbiased(
            f"estimator is not locally unbiased at theta0 (bias {np.abs(mean - t0).max():.3g}, "
            f"B error {np.abs(B - np.eye(m)).max():.3g})"
        )

    f_terms = {}
    for r in range(schedule.rounds):
        g1 = _group(paths, r * n)
        _, c1 = _cond_mean(g1, p0, vals)
        for k in range(n):
            g2 = _group_cols(paths, list(range(r * n)) + [r * n + k])
            _, c2 = _cond_mean(g2, p0, vals)
            f_terms[(r, k)] = c2[g2] - c1[g1]

    estimators = []
    mean_f, v_s, b_s = 0.0, np.zeros((m, m)), np.zeros((m, m))
    off = 1 + m
    for k in range(n):
        F = sum(f_terms[(r, k)] for r in range(schedule.rounds))
        others = np.ones(len(paths))
        for j in range(n):
            if j != k:
                others = others * tr[:, j, 0]
        els = [
            others[p] * ctr[p, k, off:off + d * d].reshape(d, d).T
            for p in range(len(paths))
        ]
        povm = Povm(tuple(els), paths)
        est = Estimator.from_table(povm, dict(zip(paths, F)))
        estimators.append(est)
        _, q, dq = _outcome_law(povm, model, t0)
        mf = q @ F
        mean_f = max(mean_f, float(np.abs(mf).max()))
        cen = F - mf[None, :]
        v_s = v_s + (cen * q[:, None]).T @ cen
        b_s = b_s + F.T @ dq

    cen = vals - mean[None, :]
    v_e = (cen * p0[:, None]).T @ cen
    gap = float(np.linalg.eigvalsh(0.5 * ((v_e - v_s) + (v_e - v_s).T)).min())
    keys = list(f_terms)
    orth = 0.0
    for a in range(len(keys)):
        for b in range(a + 1, len(keys)):
            fa, fb = f_terms[keys[a]], f_terms[keys[b]]
            orth = max(orth, float(np.abs((fa * p0[:, None]).T @ fb).max()))
    report = ReductionReport(
        mean_f=mean_f,
        s_bias=float(np.linalg.norm(sum(p0 @ f for f in f_terms.values()))),
        b_matrix=b_s,
        b_error=float(np.abs(b_s - np.eye(m)).max()),
        v_e=v_e,
        v_s=v_s,
        psd_gap=gap,
        orthogonality=orth,
        f_terms=f_terms,
    )
    return estimators, report


def randomize_single_sample(F_list, theta0, n: int, model: StateModel | None = None) -> Estimator:
    """Single-copy estimator: pick x uniformly from the n per-sample terms,
    measure with x's POVM and report n·F_x(y) + θ₀.

    The POVM has elements E_x(y)/n labelled (x, y). When ``model`` is given,
    each term is checked to have zero mean at θ₀.
    """
    if n != len(F_list):
        raise InvalidConfig(f"n={n} but {len(F_list)} per-sample terms were supplied")
    t0 = as_theta(theta0)
    if model is not None:
        for x, F in enumerate(F_list):
            labels, p, _ = _outcome_law(F.measurement, model, t0)
            mf = p @ F.values(labels)
            if np.abs(mf).max() > 1e-10:
                raise NotLocallyUnbiased(f"term {x} has mean {mf.tolist()} at theta0")
    els, labels, table = [], [], {}
    for x, F in enumerate(F_list):
        for lab, e in zip(F.measurement.labels, F.measurement.elements):
            els.append(np.asarray(e) / n)
            labels.append((x, lab))
            table[(x, lab)] = n * F(lab) + t0
    return Estimator.from_table(Povm(tuple(els), tuple(labels)), table)
