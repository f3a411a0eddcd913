"""Parametrized state and channel families with derivative oracles."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import core
from .core import I2, SX, SY, SZ, KrausChannel
from .errors import (
    InvalidConfig,
    InvalidGrid,
    InvalidOperator,
    OutsideRegion,
    UnknownModel,
)

FD_STEP = 1e-5
KERNEL_TOL = 1e-10
M2_TOL = 1e-8


def as_theta(theta, m: Optional[int] = None) -> np.ndarray:
    t = np.atleast_1d(np.asarray(theta, dtype=float)).ravel()
    if m is not None and t.shape[0] != m:
        raise InvalidConfig(f"expected {m} parameters, got {t.shape[0]}")
    return t


@dataclass(frozen=True)
class ParameterRegion:
    """Open box, optionally intersected with an open Euclidean ball of radius ``max_norm``."""

    box: np.ndarray
    margin: float = 1e-3
    max_norm: Optional[float] = None

    def __post_init__(self):
        box = np.atleast_2d(np.asarray(self.box, dtype=float))
        if box.ndim != 2 or box.shape[1] != 2 or box.shape[0] < 1:
            raise InvalidConfig("region box must be a list of [lo, hi] pairs")
        if np.any(box[:, 0] >= box[:, 1]):
            raise InvalidConfig("region box needs lo < hi for every coordinate")
        if self.margin < 0:
            raise InvalidConfig("region margin must be nonnegative")
        box.flags.writeable = False
        object.__setattr__(self, "box", box)

    @property
    def m(self) -> int:
        return self.box.shape[0]

    def contains(self, theta) -> bool:
        t = as_theta(theta, self.m)
        inside = bool(np.all(t > self.box[:, 0]) and np.all(t < self.box[:, 1]))
        if self.max_norm is not None:
            inside = inside and np.linalg.norm(t) < self.max_norm
        return inside

    def clip(self, theta) -> np.ndarray:
        t = np.clip(as_theta(theta, self.m), self.box[:, 0] + self.margin, self.box[:, 1] - self.margin)
        if self.max_norm is not None:
            lim = self.max_norm - self.margin
            nrm = np.linalg.norm(t)
            if nrm > lim:
                t = t * (lim / nrm)
        return t

    def require(self, theta) -> np.ndarray:
        t = as_theta(theta, self.m)
        if not self.contains(t):
            raise OutsideRegion(f"theta={t.tolist()} is outside the parameter region")
        return t


def interval(lo: float, hi: float, margin: float = 1e-3) -> ParameterRegion:
    return ParameterRegion(np.array([[lo, hi]]), margin)


@dataclass(frozen=True)
class StateModel:
    """θ ↦ ρ_θ with an optional analytic derivative ``derivative_fn(theta, i)``."""

    region: ParameterRegion
    state_fn: Callable
    derivative_fn: Optional[Callable] = None
    fd_step: float = FD_STEP
    name: str = "model"

    @property
    def m(self) -> int:
        return self.region.m

    @property
    def dim(self) -> int:
        return self.state(self.region.clip(self.region.box.mean(axis=1))).shape[0]

    def state(self, theta) -> np.ndarray:
        return core.density(self.state_fn(as_theta(theta, self.m)))

    def fd_derivative(self, theta, i: int, h: Optional[float] = None) -> np.ndarray:
        t = as_theta(theta, self.m)
        h = self.fd_step if h is None else h
        e = np.zeros(self.m)
        e[i] = h
        d = (np.asarray(self.state_fn(t + e)) - np.asarray(self.state_fn(t - e))) / (2 * h)
        return core.hermitian(d)

    def derivative(self, theta, i: int) -> np.ndarray:
        t = self.region.require(theta)
        if not 0 <= i < self.m:
            raise InvalidConfig(f"derivative index {i} out of range for m={self.m}")
        if self.derivative_fn is None:
            return self.fd_derivative(t, i)
        return core.hermitian(self.derivative_fn(t, i))

    def derivatives(self, theta) -> list:
        return [self.derivative(theta, i) for i in range(self.m)]

    def second_derivative(self, theta, i: int, j: int, h: float = 1e-4) -> np.ndarray:
        """Central difference of the first-derivative oracle."""
        t = as_theta(theta, self.m)
        e = np.zeros(self.m)
        e[j] = h
        up = self.derivative_fn(t + e, i) if self.derivative_fn else self.fd_derivative(t + e, i)
        dn = self.derivative_fn(t - e, i) if self.derivative_fn else self.fd_derivative(t - e, i)
        return core.hermitian((np.asarray(up) - np.asarray(dn)) / (2 * h))


@dataclass(frozen=True)
class ChannelModel:
    """θ ↦ Λ_θ given in Kraus form, with derivatives taken on the Choi matrix."""

    region: ParameterRegion
    channel_fn: Callable
    choi_derivative_fn: Optional[Callable] = None
    fd_step: float = FD_STEP
    name: str = "channel"

    @property
    def m(self) -> int:
        return self.region.m

    def channel(self, theta) -> KrausChannel:
        return self.channel_fn(as_theta(theta, self.m))

    def choi(self, theta) -> np.ndarray:
        return core.choi(self.channel(theta))

    def choi_derivative(self, theta, i: int) -> np.ndarray:
        t = self.region.require(theta)
        if self.choi_derivative_fn is not None:
            return core.hermitian(self.choi_derivative_fn(t, i))
        e = np.zeros(self.m)
        e[i] = self.fd_step
        d = (core.choi(self.channel_fn(t + e)) - core.choi(self.channel_fn(t - e))) / (2 * self.fd_step)
        return core.hermitian(d)

    def input_dim(self, theta=None) -> int:
        t = self.region.clip(self.region.box.mean(axis=1)) if theta is None else theta
        return self.channel(t).input_dim

    def probe_model(self, probe, name: Optional[str] = None) -> StateModel:
        """State family θ ↦ Λ_θ(probe) (probe fixed, no ancilla)."""
        probe = core.density(probe)
        din = probe.shape[0]

        def state_fn(t):
            return self.channel(t).apply(probe)

        def derivative_fn(t, i):
            return core.apply_choi(self.choi_derivative(t, i), probe, din)

        return StateModel(self.region, state_fn, derivative_fn, self.fd_step, name or f"{self.name}-probe")


# built-in state families


def _qubit_z() -> StateModel:
    return StateModel(
        interval(-1.0, 1.0),
        lambda t: 0.5 * (I2 + t[0] * SZ),
        lambda t, i: 0.5 * SZ,
        name="qubit-z",
    )


def _qubit_phase(r: float = 1.0) -> StateModel:
    r = float(r)
    if not 0.0 <= r <= 1.0:
        raise InvalidConfig(f"qubit-phase needs 0 <= r <= 1, got {r}")
    rho0 = 0.5 * (I2 + r * SX)

    def state_fn(t):
        u = np.diag(np.exp([-0.5j * t[0], 0.5j * t[0]]))
        return u @ rho0 @ u.conj().T

    def derivative_fn(t, i):
        rho = state_fn(t)
        return -0.5j * (SZ @ rho - rho @ SZ)

    return StateModel(interval(-np.pi, np.pi), state_fn, derivative_fn, name=f"qubit-phase(r={r:g})")


def _bloch_equator() -> StateModel:
    region = ParameterRegion(np.array([[-1.0, 1.0], [-1.0, 1.0]]), 1e-3, max_norm=1.0)
    return StateModel(
        region,
        lambda t: 0.5 * (I2 + t[0] * SX + t[1] * SY),
        lambda t, i: 0.5 * (SX if i == 0 else SY),
        name="bloch-equator",
    )


def product_model(a: StateModel, b: StateModel, name: Optional[str] = None) -> StateModel:
    """ρ_θ^a ⊗ ρ_θ^b for two families sharing one parameter vector."""
    if a.m != b.m:
        raise InvalidConfig(f"product needs equal parameter counts, got {a.m} and {b.m}")
    lo = np.maximum(a.region.box[:, 0], b.region.box[:, 0])
    hi = np.minimum(a.region.box[:, 1], b.region.box[:, 1])
    norms = [x for x in (a.region.max_norm, b.region.max_norm) if x is not None]
    region = ParameterRegion(
        np.stack([lo, hi], axis=1),
        max(a.region.margin, b.region.margin),
        min(norms) if norms else None,
    )

    def state_fn(t):
        return np.kron(a.state_fn(t), b.state_fn(t))

    def derivative_fn(t, i):
        return np.kron(a.derivative(t, i), b.state(t)) + np.kron(a.state(t), b.derivative(t, i))

    return StateModel(region, state_fn, derivative_fn, name=name or f"product({a.name},{b.name})")


def tensor_power(model: StateModel, k: int) -> StateModel:
    """ρ_θ^{⊗k}, with the product-rule derivative."""
    if k < 1:
        raise InvalidConfig("tensor power needs k >= 1")
    out = model
    for _ in range(k - 1):
        out = product_model(out, model)
    return StateModel(out.region, out.state_fn, out.derivative_fn, name=f"{model.name}^{k}")


def constant_model(rho, m: int = 1) -> StateModel:
    """Family that ignores θ; useful as an uninformative party."""
    rho = core.density(rho)
    box = np.tile([-1.0, 1.0], (m, 1))
    zero = np.zeros_like(rho)
    return StateModel(ParameterRegion(box), lambda t: rho, lambda t, i: zero, name="constant")


def boundary_model() -> StateModel:
    """diag(1-θ, θ): rank-deficient at θ=0, where no SLD exists."""
    return StateModel(
        interval(-0.5, 0.5),
        lambda t: np.diag([1.0 - t[0], t[0]]).astype(complex),
        lambda t, i: np.diag([-1.0, 1.0]).astype(complex),
        name="boundary",
    )


# built-in channel families

_OMEGA = np.zeros(4, dtype=complex)
_OMEGA[[0, 3]] = 1.0
_OMEGA_PROJ = np.outer(_OMEGA, _OMEGA)


def _depolarizing() -> ChannelModel:
    # Choi(Λ_p) = (1-p)|Ω⟩⟨Ω| + (p/2) I₄, affine in p
    d_choi = -_OMEGA_PROJ + 0.5 * np.eye(4)
    return ChannelModel(
        interval(0.0, 1.0),
        lambda t: core.depolarizing_channel(float(t[0])),
        lambda t, i: d_choi,
        name="depolarizing",
    )


def _phase_unitary() -> ChannelModel:
    def channel_fn(t):
        return KrausChannel.from_kraus([np.diag([1.0, np.exp(1j * t[0])])])

    def choi_derivative_fn(t, i):
        psi = np.array([1.0, 0, 0, np.exp(1j * t[0])])
        dpsi = np.array([0, 0, 0, 1j * np.exp(1j * t[0])])
        return np.outer(dpsi, psi.conj()) + np.outer(psi, dpsi.conj())

    return ChannelModel(interval(-np.pi, np.pi), channel_fn, choi_derivative_fn, name="phase-unitary")


STATE_BUILTINS = {
    "qubit-z": _qubit_z,
    "qubit-phase": _qubit_phase,
    "bloch-equator": _bloch_equator,
    "boundary": boundary_model,
}
CHANNEL_BUILTINS = {
    "depolarizing": _depolarizing,
    "phase-unitary": _phase_unitary,
}


def builtin_model(name: str, params: Optional[dict] = None):
    """Construct a named family. ``product`` takes ``model_a``/``model_b`` specs in ``params``."""
    params = dict(params or {})
    if name == "product":
        try:
            a, b = params.pop("model_a"), params.pop("model_b")
        except KeyError:
            raise InvalidConfig("product needs model_a and model_b") from None
        return product_model(_resolve(a), _resolve(b))
    if name in STATE_BUILTINS:
        factory = STATE_BUILTINS[name]
    elif name in CHANNEL_BUILTINS:
        factory = CHANNEL_BUILTINS[name]
    else:
        raise UnknownModel(f"unknown model {name!r}")
    try:
        return factory(**params)
    except TypeError as exc:
        raise InvalidConfig(f"bad parameters for {name}: {exc}") from None


def _resolve(spec):
    if isinstance(spec, (StateModel, ChannelModel)):
        return spec
    if isinstance(spec, str):
        return builtin_model(spec)
    return model_from_config(spec)


def _region_from_config(cfg: dict, m: int, default_box) -> ParameterRegion:
    reg = cfg.get("region", {})
    box = reg.get("box", default_box)
    return ParameterRegion(np.asarray(box, dtype=float), float(reg.get("margin", 1e-3)))


def model_from_config(cfg: dict):
    """Build a model from a parsed JSON config.

    Accepted forms: ``{"name": ..., "params": {...}}`` for built-ins,
    ``{"grid": {"thetas": [...], "states": [matrix, ...]}}`` (piecewise-linear
    in θ, single parameter) and ``{"poly": {"coeffs": [matrix, ...]}}`` for
    ρ_θ = Σ_k θ^k C_k. Matrices use the [re, im] literal format.
    """
    from .io import parse_matrix

    if not isinstance(cfg, dict):
        raise InvalidConfig("model config must be a JSON object")
    if "name" in cfg:
        return builtin_model(cfg["name"], cfg.get("params"))
    if "grid" in cfg:
        g = cfg["grid"]
        thetas = np.asarray(g.get("thetas", []), dtype=float)
        states = [parse_matrix(s) for s in g.get("states", [])]
        if thetas.ndim != 1 or len(thetas) < 2 or len(thetas) != len(states):
            raise InvalidGrid("grid model needs >= 2 thetas and one state per theta")
        if np.any(np.diff(thetas) <= 0):
            raise InvalidGrid("grid thetas must be strictly increasing")
        states = np.stack([core.density(s) for s in states])
        region = _region_from_config(cfg, 1, [[thetas[0], thetas[-1]]])

        def state_fn(t):
            x = float(np.clip(t[0], thetas[0], thetas[-1]))
            k = int(np.clip(np.searchsorted(thetas, x) - 1, 0, len(thetas) - 2))
            w = (x - thetas[k]) / (thetas[k + 1] - thetas[k])
            return (1 - w) * states[k] + w * states[k + 1]

        return StateModel(region, state_fn, None, name=cfg.get("label", "grid-model"))
    if "poly" in cfg:
        coeffs = [parse_matrix(c) for c in cfg["poly"].get("coeffs", [])]
        if not coeffs:
            raise InvalidConfig("polynomial model needs at least one coefficient")
        coeffs = np.stack(coeffs)
        region = _region_from_config(cfg, 1, [[-1.0, 1.0]])

        def state_fn(t):
            return sum(c * t[0] ** k for k, c in enumerate(coeffs))

        model = StateModel(region, state_fn, None, name=cfg.get("label", "poly-model"))
        # fail early if the family leaves the state space on the region
        for x in np.linspace(region.box[0, 0] + region.margin, region.box[0, 1] - region.margin, 5):
            model.state([x])
        return model
    raise InvalidConfig("model config needs one of 'name', 'grid' or 'poly'")


def regularize_model(model: StateModel, eps: float, sigma) -> StateModel:
    """Mix the family with a fixed full-rank state: ρ_{θ,ε} = (1-ε)ρ_θ + εσ."""
    if not 0.0 < eps < 1.0:
        raise InvalidConfig(f"regularization needs 0 < eps < 1, got {eps}")
    sigma = core.density(sigma)
    if core.min_eigenvalue(sigma) <= KERNEL_TOL:
        raise InvalidOperator("regularizing state must be strictly positive")

    def state_fn(t):
        return (1 - eps) * np.asarray(model.state_fn(t)) + eps * sigma

    def derivative_fn(t, i):
        return (1 - eps) * model.derivative(t, i)

    return StateModel(model.region, state_fn, derivative_fn, model.fd_step, f"{model.name}~{eps:g}")


@dataclass(frozen=True)
class RegularityDiagnostics:
    """Numeric regularity summary. Constants that need an estimator or a
    weight matrix are left as ``None`` unless supplied by the caller."""

    a1_estimate: float
    m2_ok: tuple
    notes: tuple = field(default_factory=tuple)
    a2_estimate: Optional[float] = None
    a4_estimate: Optional[float] = None
    b1_estimate: Optional[float] = None
    d2_estimate: Optional[float] = None


def kernel_block(rho, d) -> np.ndarray:
    """Block of ``d`` on the kernel of ``rho`` (relative eigenvalue cutoff)."""
    w, v = np.linalg.eigh(np.asarray(rho))
    ker = w < KERNEL_TOL * max(w[-1], 1.0)
    dv = v.conj().T @ np.asarray(d) @ v
    return dv[np.ix_(ker, ker)]


def check_m2(model: StateModel, theta) -> RegularityDiagnostics:
    t = model.region.require(theta)
    rho = model.state(t)
    ok = []
    notes = []
    for i in range(model.m):
        blk = kernel_block(rho, model.derivative(t, i))
        good = blk.size == 0 or np.abs(blk).max() < M2_TOL
        ok.append(bool(good))
        if not good:
            notes.append(f"coordinate {i}: derivative has kernel-block weight {np.abs(blk).max():.3g}")
    return RegularityDiagnostics(0.0, tuple(ok), tuple(notes))


def estimate_regularity(model: StateModel, grid) -> RegularityDiagnostics:
    """a1 = max over the grid of trace norms of first and second derivatives; M.2 AND-reduced."""
    pts = [as_theta(g, model.m) for g in np.asarray(grid, dtype=float).reshape(-1, model.m)] if len(grid) else []
    if not pts:
        raise InvalidGrid("regularity grid is empty")
    for p in pts:
        model.region.require(p)
    a1 = 0.0
    ok = np.ones(model.m, dtype=bool)
    notes = []
    for p in pts:
        for i in range(model.m):
            a1 = max(a1, core.trace_norm(model.derivative(p, i)))
            for j in range(model.m):
                a1 = max(a1, core.trace_norm(model.second_derivative(p, i, j)))
        frag = check_m2(model, p)
        ok &= np.array(frag.m2_ok)
        notes.extend(f"theta={p.tolist()}: {n}" for n in frag.notes)
    return RegularityDiagnostics(float(a1), tuple(bool(x) for x in ok), tuple(notes))


def channel_regularity(cm: ChannelModel, grid) -> float:
    """Max trace norm of the Choi derivatives over a grid."""
    pts = list(np.asarray(grid, dtype=float).reshape(-1, cm.m)) if len(grid) else []
    if not pts:
        raise InvalidGrid("regularity grid is empty")
    return float(max(core.trace_norm(cm.choi_derivative(p, i)) for p in pts for i in range(cm.m)))
