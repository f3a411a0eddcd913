"""Channel-family estimation: interiority via complete positivity, the
ℓ₁-ball mixture decomposition, and Monte Carlo scaling experiments."""
from __future__ import annotations

from dataclasses import dataclass
from math import ceil, sqrt

import numpy as np
from scipy import stats

from . import core
from .core import I2, KrausChannel
from .errors import (
    BoundaryWeight,
    InvalidConfig,
    NotInterior,
    StrategyUnsupported,
)
from .fisher import FisherMatrix
from .models import ChannelModel, as_theta
from .twostep import TwoStepConfig, monte_carlo, trial_rng

CP_TOL = 1e-10
BOUNDARY_P = 1e-12
PROB_FLOOR = 1e-9


def _vertices(m: int, eps: float) -> np.ndarray:
    eye = np.eye(m)
    return np.concatenate([eps * eye, -eps * eye])


def linearized_choi(cm: ChannelModel, theta0, u) -> np.ndarray:
    """Choi(Λ_θ₀) + Σ uⁱ Choi(∂_iΛ_θ₀)."""
    t0 = as_theta(theta0, cm.m)
    out = np.array(cm.choi(t0))
    for i, ui in enumerate(np.atleast_1d(u)):
        out = out + ui * np.asarray(cm.choi_derivative(t0, i))
    return out


def interiority_check(cm: ChannelModel, theta, eps: float) -> bool:
    """True when the first-order expansion stays completely positive on the
    whole ℓ₁ ball of radius ``eps``. Only the 2m vertices need testing: the
    minimum eigenvalue is concave along segments, so positivity at the
    vertices carries over to their convex hull."""
    if eps <= 0:
        raise InvalidConfig("eps must be positive")
    t = cm.region.require(theta)
    return all(
        core.min_eigenvalue(linearized_choi(cm, t, u)) >= -CP_TOL for u in _vertices(cm.m, eps)
    )


@dataclass(frozen=True)
class ExtremeDecomposition:
    theta0: np.ndarray
    eps: float
    vertices: np.ndarray
    components: tuple
    chois: tuple

    @property
    def m(self) -> int:
        return self.theta0.shape[0]

    def weights(self, theta) -> np.ndarray:
        """p(±i) = 1/(2m) ± δⁱ/(2ε), δ = θ − θ₀; affine, sums to 1, uniform at θ₀."""
        d = as_theta(theta, self.m) - self.theta0
        m = self.m
        return np.concatenate([1 / (2 * m) + d / (2 * self.eps), 1 / (2 * m) - d / (2 * self.eps)])

    def weight_gradient(self) -> np.ndarray:
        """∂p(x)/∂θⁱ, shape (2m, m); constant because the weights are affine."""
        eye = np.eye(self.m) / (2 * self.eps)
        return np.concatenate([eye, -eye])

    def mixture_choi(self, theta) -> np.ndarray:
        return sum(w * c for w, c in zip(self.weights(theta), self.chois))


def extreme_decomposition(cm: ChannelModel, theta0, eps: float) -> ExtremeDecomposition:
    """Write the linearized family near θ₀ as a θ-dependent mixture of 2m fixed channels.

    Component x is the linearized channel at the ℓ₁-ball vertex θ₀ + u_x,
    u_x = ±ε·e_i. With the affine weights of :meth:`ExtremeDecomposition.weights`
    the mixture equals the linearized channel at θ whenever every weight is
    nonnegative, i.e. for |θⁱ − θ₀ⁱ| ≤ ε/m.
    """
    t0 = cm.region.require(theta0)
    if not interiority_check(cm, t0, eps):
        raise NotInterior(f"family is not interior at theta0={t0.tolist()} with eps={eps}")
    m = cm.m
    verts = _vertices(m, eps)
    din = cm.input_dim(t0)
    chois, comps = [], []
    for u in verts:
        c = linearized_choi(cm, t0, u)
        c = 0.5 * (c + c.conj().T)
        chois.append(c)
        comps.append(KrausChannel.from_kraus(core.choi_to_kraus(c, din)))
    return ExtremeDecomposition(t0, float(eps), t0[None, :] + verts, tuple(comps), tuple(chois))


def multinomial_fisher(ed: ExtremeDecomposition, theta) -> FisherMatrix:
    """Fisher information of the mixture label x ~ p_θ."""
    p = ed.weights(theta)
    if np.any(p <= BOUNDARY_P):
        raise BoundaryWeight(f"mixture weight {p.min():.3g} is on the boundary")
    dp = ed.weight_gradient()
    return FisherMatrix((dp / p[:, None]).T @ dp, "classical")


def randomization_test(ed: ExtremeDecomposition, theta, probe, povm: core.Povm, shots: int,
                       rng: np.random.Generator) -> float:
    """χ² p-value comparing 'draw x, apply Λ_x, measure' with the linearized channel's law."""
    probe = core.density(probe)
    din = probe.shape[0]
    p = ed.weights(theta)
    xs = rng.choice(len(p), size=shots, p=p)
    counts = np.zeros(len(povm))
    for x in range(len(p)):
        k = int(np.sum(xs == x))
        if k:
            q = core.outcome_distribution(ed.components[x].apply(probe), povm)
            counts += rng.multinomial(k, q)
    target = core.density(core.apply_choi(ed.mixture_choi(theta), probe, din))
    expected = shots * core.outcome_distribution(target, povm)
    keep = expected > 0
    return float(stats.chisquare(counts[keep], expected[keep] * counts[keep].sum() / expected[keep].sum()).pvalue)


STRATEGIES = ("product-probe", "ghz-probe", "sequential-feedback")


@dataclass(frozen=True)
class ScalingRow:
    n: int
    trials: int
    mse: float
    n_mse: float
    n2_mse: float
    stderr: float


def _product_probe_once(cm: ChannelModel, t: float, n: int, rng) -> float:
    if cm.name == "depolarizing":
        # probe |0⟩, σ_z readout: P(0) = 1 − p/2
        p0 = 1 - t / 2
        k = rng.binomial(n, p0)
        return 2 * (1 - k / n)
    if cm.name == "phase-unitary":
        # probe |+⟩, half the uses read σ_x, half σ_y; atan2 seeds a few
        # Fisher-scoring steps on the joint binomial likelihood
        nx = n - n // 2
        ny = n // 2
        kx = rng.binomial(nx, (1 + np.cos(t)) / 2)
        ky = rng.binomial(ny, (1 + np.sin(t)) / 2) if ny else 0
        fx = kx / nx
        if ny == 0:
            return float(np.arccos(np.clip(2 * fx - 1, -1, 1)))
        return _phase_mle(kx, nx, ky, ny, float(np.arctan2(2 * ky / ny - 1, 2 * fx - 1)))
    raise StrategyUnsupported(f"product-probe is not implemented for {cm.name}")


def _phase_mle(kx, nx, ky, ny, th, steps=4) -> float:
    for _ in range(steps):
        px = np.clip((1 + np.cos(th)) / 2, PROB_FLOOR, 1 - PROB_FLOOR)
        py = np.clip((1 + np.sin(th)) / 2, PROB_FLOOR, 1 - PROB_FLOOR)
        dx, dy = -np.sin(th) / 2, np.cos(th) / 2
        score = dx * (kx / px - (nx - kx) / (1 - px)) + dy * (ky / py - (ny - ky) / (1 - py))
        info = nx * dx * dx / (px * (1 - px)) + ny * dy * dy / (py * (1 - py))
        th = th + float(np.clip(score / info, -0.25, 0.25))
    return float(th)


def single_use_crb(cm: ChannelModel, theta) -> float:
    """Per-use Cramér–Rao value of the product-probe readout."""
    t = float(as_theta(theta, 1)[0])
    if cm.name == "depolarizing":
        p0 = 1 - t / 2
        return p0 * (1 - p0) * 4
    if cm.name == "phase-unitary":
        return 1.0
    raise StrategyUnsupported(f"no product-probe bound for {cm.name}")


def _ghz_once(t: float, n: int, rng, shots: int) -> float:
    """GHZ probe in its two-dimensional invariant subspace.

    A product-probe prefix of ⌈√n⌉·shots uses gives θ₀. The n-use GHZ state
    picks up the relative phase nθ; measuring along the axis offset by −nθ₀
    gives P(+) = (1 − sin n(θ−θ₀))/2, which is inverted on the window
    |θ − θ₀| ≤ π/(2n). Each of ``shots`` repetitions consumes n uses.
    """
    prefix = ceil(sqrt(n)) * shots
    fx = rng.binomial(prefix - prefix // 2, (1 + np.cos(t)) / 2) / (prefix - prefix // 2)
    fy = rng.binomial(prefix // 2, (1 + np.sin(t)) / 2) / (prefix // 2)
    t0 = float(np.arctan2(2 * fy - 1, 2 * fx - 1))
    p_plus = (1 - np.sin(n * (t - t0))) / 2
    f = rng.binomial(shots, np.clip(p_plus, 0, 1)) / shots
    return t0 + float(np.arcsin(np.clip(1 - 2 * f, -1, 1))) / n


def scaling_experiment(cm: ChannelModel, theta, strategy: str, n_list, trials: int, seed: int,
                       shots: int = 400, workers: int = 1) -> list:
    """Monte Carlo MSE of channel-use strategies as a function of the use count n.

    For ``ghz-probe`` the reported MSE is per GHZ readout averaged over
    ``shots`` repetitions, so n²·MSE·shots is the Heisenberg constant.
    """
    n_list = [int(n) for n in n_list]
    if not n_list:
        raise InvalidConfig("n_list must not be empty")
    if strategy not in STRATEGIES:
        raise InvalidConfig(f"unknown strategy {strategy!r}")
    if trials < 2:
        raise InvalidConfig("scaling experiment needs at least 2 trials")
    t = as_theta(theta, cm.m)
    if cm.m != 1:
        raise StrategyUnsupported("scaling experiments are implemented for one parameter")
    cm.region.require(t)
    if strategy == "ghz-probe" and cm.name != "phase-unitary":
        raise StrategyUnsupported("ghz-probe is only defined for the phase-unitary family")
    rows = []
    for idx, n in enumerate(n_list):
        if n < 1:
            raise InvalidConfig("use counts must be positive")
        if strategy == "sequential-feedback":
            probe = _feedback_probe(cm)
            model = cm.probe_model(probe)
            mc = monte_carlo(model, t, TwoStepConfig(n, 1, seed=int(seed) + idx), trials,
                             workers=workers)
            dev = mc.per_trial_estimates[:, 0] - t[0]
        else:
            est = np.empty(trials)
            for k in range(trials):
                rng = trial_rng(seed, idx * 10 ** 7 + k)
                if strategy == "product-probe":
                    est[k] = _product_probe_once(cm, float(t[0]), n, rng)
                else:
                    est[k] = _ghz_once(float(t[0]), n, rng, shots)
            dev = est - t[0]
        sq = dev ** 2
        mse = float(sq.mean())
        se = float(sq.std(ddof=1) / np.sqrt(trials))
        rows.append(ScalingRow(n, trials, mse, n * mse, n * n * mse, se))
    return rows


def _feedback_probe(cm: ChannelModel):
    if cm.name == "depolarizing":
        return np.diag([1.0, 0.0]).astype(complex)
    if cm.name == "phase-unitary":
        return 0.5 * (I2 + core.SX)
    raise StrategyUnsupported(f"sequential-feedback has no probe for {cm.name}")
