"""Two-party product models: identifiability projectors, the combined
variance bound and a brute-force search over local projective measurements."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .errors import InvalidConfig, InvalidGrid, SingularSupport, UnidentifiableDirection
from .fisher import (
    Estimator,
    classical_fisher,
    evaluate_exact,
    log_derivative,
    rebias_estimator,
)
from .models import StateModel, as_theta, product_model

PINV_RCOND = 1e-10


@dataclass(frozen=True)
class ProductModel:
    model_a: StateModel
    model_b: StateModel

    def __post_init__(self):
        if self.model_a.m != self.model_b.m:
            raise InvalidConfig("both parties must share the same parameter vector")

    @property
    def m(self) -> int:
        return self.model_a.m

    def joint(self) -> StateModel:
        return product_model(self.model_a, self.model_b)


def identifiability_projector(model: StateModel, theta) -> np.ndarray:
    """Orthogonal projector onto the directions v with Σ vⁱ∂_iρ ≠ 0."""
    t = model.region.require(theta)
    ds = [np.asarray(d) for d in model.derivatives(t)]
    gram = np.array([[np.trace(a @ b).real for b in ds] for a in ds])
    w, v = np.linalg.eigh(0.5 * (gram + gram.T))
    keep = w > PINV_RCOND * max(w[-1], 0.0) if w[-1] > 0 else np.zeros_like(w, dtype=bool)
    P = v[:, keep] @ v[:, keep].T
    return 0.5 * (P + P.T)


def _pinv(a) -> np.ndarray:
    return np.linalg.pinv(np.atleast_2d(np.asarray(a, dtype=float)), rcond=PINV_RCOND, hermitian=True)


def locc_variance_bound(Va, Vb, Pa, Pb, G) -> float:
    """Tr G·(Pa Va⁺ Pa + Pb Vb⁺ Pb)⁺ with Moore–Penrose inverses."""
    Va, Vb, Pa, Pb, G = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (Va, Vb, Pa, Pb, G))
    info = Pa @ _pinv(Va) @ Pa + Pb @ _pinv(Vb) @ Pb
    info = 0.5 * (info + info.T)
    w, v = np.linalg.eigh(info)
    scale = max(abs(w).max(initial=0.0), 0.0)
    null = v[:, w <= PINV_RCOND * scale] if scale > 0 else v
    if null.size and np.abs(null.T @ G @ null).max() > PINV_RCOND * max(np.abs(G).max(), 1.0):
        raise UnidentifiableDirection("G weights a direction neither party can identify")
    return float(np.trace(G @ _pinv(info)))


def reference_bound(pm: ProductModel, theta, G) -> float:
    """The combined bound with each party's single-copy SLD information."""
    from .fisher import qfi_sld

    t = as_theta(theta, pm.m)
    Va = _pinv(qfi_sld(pm.model_a, t).matrix)
    Vb = _pinv(qfi_sld(pm.model_b, t).matrix)
    Pa = identifiability_projector(pm.model_a, t)
    Pb = identifiability_projector(pm.model_b, t)
    return locc_variance_bound(Va, Vb, Pa, Pb, G)


def axis_grid(grid: int) -> np.ndarray:
    """grid² unit vectors: polar kπ/grid, azimuth 2πl/grid."""
    if grid < 1:
        raise InvalidGrid("search grid must have at least one point per axis")
    pol = np.pi * np.arange(grid) / grid
    az = 2 * np.pi * np.arange(grid) / grid
    P, A = np.meshgrid(pol, az, indexing="ij")
    return np.stack([np.sin(P) * np.cos(A), np.sin(P) * np.sin(A), np.cos(P)], -1).reshape(-1, 3)


@dataclass(frozen=True)
class LoSearchResult:
    best_cost: float
    axis_a: np.ndarray
    axis_b: np.ndarray
    estimator: Estimator
    bound: float


def _party_info(model, t, axes):
    out = []
    for ax in axes:
        try:
            out.append(classical_fisher(model, t, core.axis_povm(ax)).matrix)
        except SingularSupport:
            out.append(None)
    return out


def brute_force_lo_search(pm: ProductModel, theta, G=None, grid: int = 36) -> LoSearchResult:
    """Search pairs of local projective qubit measurements.

    For each axis pair the two parties' scores are added and rebiased so that
    S = F^a + F^b + θ₀ is locally unbiased; its variance is (J^a + J^b)⁻¹.
    The cheapest Tr G·V[S] wins (ties go to the lowest grid index). The
    winning pair is rebuilt and evaluated exactly.
    """
    t = as_theta(theta, pm.m)
    m = pm.m
    if m > 2:
        raise InvalidConfig("local search supports at most two parameters")
    if pm.model_a.dim != 2 or pm.model_b.dim != 2:
        raise InvalidConfig("local search supports qubit parties only")
    G = np.eye(m) if G is None else np.atleast_2d(np.asarray(G, dtype=float))
    axes = axis_grid(grid)
    ja = _party_info(pm.model_a, t, axes)
    jb = _party_info(pm.model_b, t, axes)
    ia = [i for i, j in enumerate(ja) if j is not None]
    ib = [i for i, j in enumerate(jb) if j is not None]
    if not ia or not ib:
        raise InvalidGrid("no usable measurement axis on the grid")
    JA = np.stack([ja[i] for i in ia])
    JB = np.stack([jb[i] for i in ib])
    tot = JA[:, None] + JB[None, :]
    # the locally unbiased sum of scores has variance (Ja + Jb)⁻¹
    cost = np.full(tot.shape[:2], np.inf)
    det_ok = np.linalg.cond(tot.reshape(-1, m, m)).reshape(tot.shape[:2]) < 1e12
    inv = np.zeros_like(tot)
    inv[det_ok] = np.linalg.inv(tot[det_ok])
    cost[det_ok] = np.einsum("ij,nji->n", G, inv[det_ok])
    if not np.isfinite(cost).any():
        raise InvalidGrid("no axis pair identifies every parameter")
    k = int(np.argmin(cost))
    a, b = ia[k // len(ib)], ib[k % len(ib)]
    est = _pair_estimator(pm, t, axes[a], axes[b])
    rep = evaluate_exact(est, pm.joint(), t, G)
    try:
        bound = reference_bound(pm, t, G)
    except UnidentifiableDirection:
        bound = float("nan")
    return LoSearchResult(float(np.trace(G @ rep.variance)), axes[a], axes[b], est, bound)


def _pair_estimator(pm: ProductModel, t, axis_a, axis_b) -> Estimator:
    """S(ξa, ξb) = la(ξa) + lb(ξb) + θ₀ rebiased to local unbiasedness on the joint model."""
    pa, pb = core.axis_povm(axis_a), core.axis_povm(axis_b)
    la = log_derivative(pm.model_a, t, pa)
    lb = log_derivative(pm.model_b, t, pb)
    joint = core.tensor_povm(pa, pb)
    table = {(x, y): t + la[x] + lb[y] for x in pa.labels for y in pb.labels}
    return rebias_estimator(Estimator.from_table(joint, table), pm.joint(), t)
